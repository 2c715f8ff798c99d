//! Allocation-only core of theraloop: domain types, the completion gateway,
//! expert extraction, consensus, case memory, trial evidence, reasoning,
//! the synthetic cohort generator and evaluation metrics.
#![no_std]

extern crate alloc;
#[cfg(test)]
#[macro_use]
extern crate std;

pub mod consensus;
pub mod domain;
pub mod evidence;
pub mod extraction;
pub mod gateway;
pub mod grammar;
pub mod math;
pub mod memory;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod reasoning;
pub mod rules;
pub mod schemas;
pub mod synth;
pub mod stub;
pub mod units;
