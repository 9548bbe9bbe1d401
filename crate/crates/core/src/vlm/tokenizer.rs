//! Byte-level tokenizer with reserved single-token concept identifiers.

use crate::error::{Error, Result};

/// Size of the frozen base vocabulary.
pub const BASE_VOCAB: usize = 512;
pub const EOS: u32 = 256;
pub const BOS: u32 = 257;
/// Marks the start of the user turn (the question).
pub const USER: u32 = 258;

/// Base byte vocabulary extended with `m` identifier tokens; identifier `j`
/// has id `BASE_VOCAB + j`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    identifiers: Vec<String>,
}

impl Vocabulary {
    pub fn new(identifiers: Vec<String>) -> Result<Self> {
        for (i, a) in identifiers.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::input("empty concept identifier"));
            }
            if identifiers[..i].contains(a) {
                return Err(Error::input(format!("duplicate identifier {a}")));
            }
        }
        Ok(Self { identifiers })
    }

    pub fn base_size(&self) -> usize {
        BASE_VOCAB
    }

    pub fn concepts(&self) -> usize {
        self.identifiers.len()
    }

    pub fn size(&self) -> usize {
        BASE_VOCAB + self.identifiers.len()
    }

    pub fn identifiers(&self) -> &[String] {
        &self.identifiers
    }

    pub fn identifier_id(&self, concept: usize) -> u32 {
        (BASE_VOCAB + concept) as u32
    }

    pub fn concept_of(&self, id: u32) -> Option<usize> {
        let id = id as usize;
        (id >= BASE_VOCAB && id < self.size()).then(|| id - BASE_VOCAB)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        'outer: while i < bytes.len() {
            // longest identifier wins when several match
            let mut best: Option<(usize, usize)> = None;
            for (j, ident) in self.identifiers.iter().enumerate() {
                if bytes[i..].starts_with(ident.as_bytes())
                    && best.map_or(true, |(_, l)| ident.len() > l)
                {
                    best = Some((j, ident.len()));
                }
            }
            if let Some((j, l)) = best {
                out.push(self.identifier_id(j));
                i += l;
                continue 'outer;
            }
            out.push(bytes[i] as u32);
            i += 1;
        }
        out
    }

    /// Decodes up to the first end-of-sequence token.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if let Some(c) = self.concept_of(id) {
                bytes.extend_from_slice(self.identifiers[c].as_bytes());
            } else if id < 256 {
                bytes.push(id as u8);
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn check_id(&self, id: u32) -> Result<()> {
        if (id as usize) < self.size() {
            Ok(())
        } else {
            Err(Error::input(format!("token id {id} outside vocabulary of {}", self.size())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identifiers_are_single_tokens() {
        let v = Vocabulary::new(vec!["<sks1>".into(), "<sks2>".into()]).unwrap();
        let ids = v.encode("Is <sks2> here?");
        assert_eq!(ids.iter().filter(|&&i| i as usize >= BASE_VOCAB).count(), 1);
        assert!(ids.contains(&(BASE_VOCAB as u32 + 1)));
        assert_eq!(v.decode(&ids), "Is <sks2> here?");
    }

    #[test]
    fn base_ids_unchanged_by_expansion() {
        let plain = Vocabulary::default();
        let wide = Vocabulary::new(vec!["<a>".into()]).unwrap();
        assert_eq!(plain.encode("hello yes"), wide.encode("hello yes"));
        assert!(Vocabulary::new(vec!["x".into(), "x".into()]).is_err());
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocabulary::default();
        assert_eq!(v.decode(&[b'N' as u32, b'o' as u32, EOS, b'x' as u32]), "No");
    }
}
