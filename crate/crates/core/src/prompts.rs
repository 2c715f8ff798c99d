//! Versioned prompt templates shipped with the crate. The template id is
//! the file name.

use alloc::string::String;

pub const RADIOLOGIST: &str = "radiologist.v1.txt";
pub const BIOCHEMIST: &str = "biochemist.v1.txt";
pub const ONCOLOGIST: &str = "oncologist.v1.txt";
pub const GENERALIST: &str = "generalist.v1.txt";
pub const INTEGRATOR: &str = "integrator.v1.txt";
pub const REASONING: &str = "reasoning.v1.txt";

const DOC_OPEN: &str = "<<<DOCUMENT\n";
const DOC_CLOSE: &str = "\nDOCUMENT>>>";

pub fn template(id: &str) -> Option<&'static str> {
    Some(match id {
        RADIOLOGIST => include_str!("../prompts/radiologist.v1.txt"),
        BIOCHEMIST => include_str!("../prompts/biochemist.v1.txt"),
        ONCOLOGIST => include_str!("../prompts/oncologist.v1.txt"),
        GENERALIST => include_str!("../prompts/generalist.v1.txt"),
        INTEGRATOR => include_str!("../prompts/integrator.v1.txt"),
        REASONING => include_str!("../prompts/reasoning.v1.txt"),
        _ => return None,
    })
}

/// Fills `{{name}}` slots. Unknown slots are left in place.
pub fn render(id: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::from(template(id).unwrap_or_default());
    for (name, value) in slots {
        let key = alloc::format!("{{{{{name}}}}}");
        out = out.replace(&key, value);
    }
    out
}

/// The document embedded in a rendered extraction prompt.
pub fn embedded_document(prompt: &str) -> Option<&str> {
    let start = prompt.find(DOC_OPEN)? + DOC_OPEN.len();
    let end = prompt[start..].find(DOC_CLOSE)? + start;
    Some(&prompt[start..end])
}

/// Text between the line `[header]` and the next bracketed header line.
pub fn section<'a>(prompt: &'a str, header: &str) -> Option<&'a str> {
    let open = alloc::format!("[{header}]\n");
    let start = prompt.find(&open)? + open.len();
    let rest = &prompt[start..];
    let end = rest
        .match_indices("\n[")
        .find(|(i, _)| {
            let line = rest[i + 1..].lines().next().unwrap_or("");
            line.ends_with(']') && line.chars().skip(1).all(|c| c.is_ascii_uppercase() || c == ' ' || c == ']')
        })
        .map(|(i, _)| i)
        .unwrap_or(rest.len());
    Some(&rest[..end])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_template_has_its_slots() {
        for id in [RADIOLOGIST, BIOCHEMIST, ONCOLOGIST, GENERALIST] {
            assert!(template(id).unwrap().contains("{{document}}"), "{id}");
        }
        for slot in ["{{profile}}", "{{cases}}", "{{trial}}"] {
            assert!(template(REASONING).unwrap().contains(slot));
        }
    }

    #[test]
    fn document_round_trips_through_prompt() {
        let p = render(RADIOLOGIST, &[("document", "SUVmax 12.\nBone lesions.")]);
        assert_eq!(embedded_document(&p), Some("SUVmax 12.\nBone lesions."));
    }

    #[test]
    fn sections_split_on_headers() {
        let p = render(REASONING, &[("profile", "a"), ("cases", "b\nc"), ("trial", "d")]);
        assert_eq!(section(&p, "CASE EVIDENCE").map(str::trim), Some("b\nc"));
        assert_eq!(section(&p, "PROFILE").map(str::trim), Some("a"));
    }
}
