//! The full response-schema registry.

use crate::gateway::SchemaRegistry;
use crate::{consensus, extraction, reasoning};

/// Every schema the pipeline asks the gateway to enforce.
pub fn registry() -> SchemaRegistry {
    let mut r = SchemaRegistry::default();
    extraction::register_schemas(&mut r);
    consensus::register_schemas(&mut r);
    reasoning::register_schemas(&mut r);
    r
}
