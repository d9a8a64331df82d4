use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const MAX_VOCAB: usize = 256;

/// Coordinates are spoken in 0.5 m steps up to this magnitude.
pub const NUMBER_LIMIT: f64 = 40.0;
pub const NUMBER_STEP: f64 = 0.5;

/// Words that only appear as slot values.
pub const SLOT_WORDS: &[&str] = &[
    "car", "truck", "pedestrian", "bicycle", "yes", "no", "there", "is", "a", "stopped", "going",
    "straight", "slightly", "steering", "to", "the", "left", "right", "front", "back", "reversing",
    "and", "not", "moving", "at", "slow", "moderate", "fast", "speed", "affects", "does", "affect",
    "minus",
];

/// Bijective token <-> id map over a closed word list.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Token spelling for a bucketed magnitude: "3", "3.5".
pub fn number_token(v: f64) -> String {
    let q = (v / NUMBER_STEP).round() * NUMBER_STEP;
    if q.fract() == 0.0 {
        format!("{}", q as i64)
    } else {
        format!("{q:.1}")
    }
}

/// Words for a signed coordinate, bucketed to 0.5 m and clamped.
pub fn coordinate_words(v: f64) -> Vec<String> {
    let c = v.clamp(-NUMBER_LIMIT, NUMBER_LIMIT);
    let q = (c / NUMBER_STEP).round() * NUMBER_STEP;
    if q < 0.0 {
        vec!["minus".to_string(), number_token(-q)]
    } else {
        vec![number_token(q)]
    }
}

/// Inverse of `coordinate_words` on bucket values.
pub fn parse_coordinate(words: &[&str]) -> Option<f64> {
    match words {
        ["minus", n] => n.parse::<f64>().ok().map(|v| -v),
        [n] => n.parse::<f64>().ok(),
        _ => None,
    }
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() > MAX_VOCAB {
            return Err(Error::Vocabulary(format!("{} tokens exceed {MAX_VOCAB}", tokens.len())));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("invalid token {t:?} at line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        for s in [PAD, BOS, EOS, SEP] {
            if !index.contains_key(s) {
                return Err(Error::Vocabulary(format!("missing special token {s}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Specials, then number buckets in ascending order, then words sorted.
    pub fn build(template_words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, SEP].iter().map(|s| s.to_string()).collect();
        let steps = (NUMBER_LIMIT / NUMBER_STEP) as usize;
        let numbers: Vec<String> = (0..=steps).map(|i| number_token(i as f64 * NUMBER_STEP)).collect();
        let mut words: BTreeSet<String> = template_words.into_iter().collect();
        words.extend(SLOT_WORDS.iter().map(|s| s.to_string()));
        for n in &numbers {
            words.remove(n);
        }
        tokens.extend(numbers);
        tokens.extend(words);
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn special(&self, s: &str) -> usize {
        self.index[s]
    }

    /// Whitespace tokenization; every unknown word is listed in the error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        let mut unknown = Vec::new();
        for w in text.split_whitespace() {
            match self.id(w) {
                Some(i) => ids.push(i),
                None => unknown.push(w.to_string()),
            }
        }
        if unknown.is_empty() {
            Ok(ids)
        } else {
            Err(Error::Vocabulary(format!("out-of-vocabulary words: {}", unknown.join(", "))))
        }
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line order defines ids.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
