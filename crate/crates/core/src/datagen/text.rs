use std::collections::BTreeMap;

use super::Shape;
use crate::error::{Error, Result};

/// Class prompt template; `{class}` is replaced by the class name.
pub const TEMPLATE: &str = "a photo of a {class} .";

/// Word-level vocabulary with ids in insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut vocab = Self {
            words: Vec::new(),
            ids: BTreeMap::new(),
        };
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("bad vocabulary word {w:?}")));
            }
            if vocab.ids.contains_key(w) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary word {w:?}"
                )));
            }
            vocab.ids.insert(w.to_string(), vocab.words.len());
            vocab.words.push(w.to_string());
        }
        Ok(vocab)
    }

    /// Template words followed by every shape family name.
    pub fn standard() -> Self {
        let mut words: Vec<&str> = vec!["a", "photo", "of", "."];
        words.extend(Shape::FAMILIES.iter().map(|s| s.name()));
        Self::new(&words).expect("standard vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Ids of the filled class template. The eos token is added by the encoder.
    pub fn tokenize_template(&self, class_name: &str) -> Result<Vec<usize>> {
        if class_name.split_whitespace().count() != 1 {
            return Err(Error::UnknownWord(class_name.to_string()));
        }
        self.encode(&TEMPLATE.replace("{class}", class_name))
    }

    pub fn tokenize_classes<S: AsRef<str>>(&self, class_names: &[S]) -> Result<Vec<Vec<usize>>> {
        class_names
            .iter()
            .map(|n| self.tokenize_template(n.as_ref()))
            .collect()
    }
}
