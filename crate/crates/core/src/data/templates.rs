//! Question/answer template pools. `{X}` marks the concept identifier.

#[derive(Debug, Clone)]
pub struct TemplatePool {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    /// `(question, answer)`; answers may use `{color}`, `{shape}`, `{position}`.
    pub conversation: Vec<(String, String)>,
}

const POSITIVE: [&str; 10] = [
    "Can you see {X} in this photo? Answer with a single word: Yes or No.",
    "Is {X} in this photo?",
    "Can you spot {X} in this picture?",
    "Does this image contain {X}?",
    "Is {X} visible here?",
    "Do you see {X} anywhere in the image?",
    "Is there {X} in this scene?",
    "Can you find {X} in this image?",
    "Does {X} appear in this photo?",
    "Is {X} shown in this picture?",
];

const NEGATIVE: [&str; 10] = [
    "Can you see {X} in this photo? Answer with a single word: Yes or No.",
    "Is {X} present in this image?",
    "Can you tell if {X} is in this photo?",
    "Is {X} somewhere in this picture?",
    "Do you notice {X} in this image?",
    "Would you say {X} is in this photo?",
    "Is {X} part of this scene?",
    "Can {X} be seen in this picture?",
    "Does this photo show {X}?",
    "Is {X} in the picture?",
];

const CONVERSATION: [(&str, &str); 10] = [
    ("What color is {X}?", "{X} is {color}."),
    ("What shape is {X}?", "{X} is a {shape}."),
    ("Where is {X} in this image?", "{X} is {position}."),
    ("Describe the color of {X}.", "The color of {X} is {color}."),
    ("What is the shape of {X}?", "The shape of {X} is a {shape}."),
    ("Which part of the image shows {X}?", "{X} is {position}."),
    ("What does {X} look like?", "{X} is a {color} {shape}."),
    ("Is {X} on the left, in the middle or on the right?", "{X} is {position}."),
    ("What can you tell me about {X}?", "{X} is a {color} {shape}."),
    ("Give a short description of {X}.", "A {color} {shape}."),
];

impl Default for TemplatePool {
    fn default() -> Self {
        Self {
            positive: POSITIVE.iter().map(|s| s.to_string()).collect(),
            negative: NEGATIVE.iter().map(|s| s.to_string()).collect(),
            conversation: CONVERSATION.iter().map(|(q, a)| (q.to_string(), a.to_string())).collect(),
        }
    }
}

pub fn fill(template: &str, identifier: &str) -> String {
    template.replace("{X}", identifier)
}

/// Phrase for a horizontal third index (0, 1, 2).
pub fn position_phrase(third: usize) -> &'static str {
    match third {
        0 => "on the left",
        1 => "in the middle",
        _ => "on the right",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_sizes_and_distinctness() {
        let p = TemplatePool::default();
        for pool in [&p.positive, &p.negative] {
            assert!(pool.len() >= 10);
            let mut s = pool.clone();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), pool.len());
            assert!(pool.iter().all(|t| t.contains("{X}")));
        }
        assert_eq!(p.conversation.len(), 10);
    }
}
