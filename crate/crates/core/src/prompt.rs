use serde::{Deserialize, Serialize};

use crate::phrase::unfuse;
use crate::text::{is_placeholder, is_stopword, OBJECT_SLOT, SUBJECT_SLOT};

/// A cloze template over tokens with `[X]` for the subject and `[Y]` for the object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Prompt {
    pub relation: String,
    pub template: Vec<String>,
}

impl Prompt {
    pub fn new(relation: impl Into<String>, template: Vec<String>) -> Self {
        Self {
            relation: relation.into(),
            template,
        }
    }

    pub fn parse(relation: impl Into<String>, template: &str) -> Self {
        Self::new(relation, template.split_whitespace().map(str::to_string).collect())
    }

    /// Exactly one `[X]` and one `[Y]`.
    pub fn has_both_slots(&self) -> bool {
        has_both_slots(&self.template)
    }

    /// Template words other than placeholders, phrase tokens split apart.
    pub fn words(&self) -> Vec<&str> {
        template_words(&self.template)
    }

    pub fn content_words(&self) -> Vec<&str> {
        self.words().into_iter().filter(|w| !is_stopword(w)).collect()
    }

    /// Render with the given replacements for `[X]` and `[Y]`.
    pub fn fill(&self, subject_slot: &str, object_slot: &str) -> String {
        let parts: Vec<String> = self
            .template
            .iter()
            .map(|t| match t.as_str() {
                SUBJECT_SLOT => subject_slot.to_string(),
                OBJECT_SLOT => object_slot.to_string(),
                other => unfuse(other).collect::<Vec<_>>().join(" "),
            })
            .collect();
        parts.join(" ")
    }

    pub fn display(&self) -> String {
        self.template.join(" ")
    }
}

pub fn has_both_slots(template: &[String]) -> bool {
    template.iter().filter(|t| *t == SUBJECT_SLOT).count() == 1
        && template.iter().filter(|t| *t == OBJECT_SLOT).count() == 1
}

pub fn template_words(template: &[String]) -> Vec<&str> {
    template
        .iter()
        .filter(|t| !is_placeholder(t))
        .flat_map(|t| unfuse(t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fills_and_unfuses() {
        let p = Prompt::parse("r", "[X] is_headquartered in [Y]");
        assert!(p.has_both_slots());
        assert_eq!(p.fill("acme", "[MASK]"), "acme is headquartered in [MASK]");
        assert_eq!(p.words(), vec!["is", "headquartered", "in"]);
        assert_eq!(p.content_words(), vec!["headquartered"]);
        assert!(!Prompt::parse("r", "in lower [Y]").has_both_slots());
        assert!(!Prompt::parse("r", "[X] [X] [Y]").has_both_slots());
    }
}
