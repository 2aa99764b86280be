use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ContextDoc, PromptError};

/// One position class in a prompt schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotClass {
    Instruction,
    Gold,
    Retrieved,
    Distracting,
    Random,
    Query,
}

impl SlotClass {
    fn token(self) -> &'static str {
        match self {
            SlotClass::Instruction => "I",
            SlotClass::Gold => "gold",
            SlotClass::Retrieved => "retrieved",
            SlotClass::Distracting => "distracting",
            SlotClass::Random => "random",
            SlotClass::Query => "Q",
        }
    }
}

impl fmt::Display for SlotClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for SlotClass {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "i" | "instruction" => Ok(SlotClass::Instruction),
            "q" | "query" => Ok(SlotClass::Query),
            "gold" => Ok(SlotClass::Gold),
            "retrieved" => Ok(SlotClass::Retrieved),
            "distracting" => Ok(SlotClass::Distracting),
            "random" => Ok(SlotClass::Random),
            other => Err(PromptError::Schema(format!("unknown slot class {other:?}"))),
        }
    }
}

/// Ordered slot layout, e.g. `I,random,gold,Q`.
///
/// Interior classes may repeat; the documents of a class are then divided
/// across its occurrences in order, earlier occurrences taking the smaller
/// share (`I,distracting,gold,distracting,Q` puts `floor(n/2)` distractors
/// before the gold passage).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptSchema {
    slots: Vec<SlotClass>,
}

impl PromptSchema {
    pub fn new(slots: Vec<SlotClass>) -> Result<Self, PromptError> {
        let count = |c: SlotClass| slots.iter().filter(|&&s| s == c).count();
        if slots.first() != Some(&SlotClass::Instruction) {
            return Err(PromptError::Schema("first slot must be I".into()));
        }
        if slots.last() != Some(&SlotClass::Query) {
            return Err(PromptError::Schema("last slot must be Q".into()));
        }
        if count(SlotClass::Instruction) != 1 || count(SlotClass::Query) != 1 {
            return Err(PromptError::Schema(
                "I and Q must each appear exactly once".into(),
            ));
        }
        Ok(Self { slots })
    }

    pub fn slots(&self) -> &[SlotClass] {
        &self.slots
    }

    /// Slots between the instruction and the query.
    pub fn interior(&self) -> &[SlotClass] {
        &self.slots[1..self.slots.len() - 1]
    }

    pub fn contains(&self, class: SlotClass) -> bool {
        self.slots.contains(&class)
    }

    /// The same schema with every occurrence of `class` removed.
    pub fn without(&self, class: SlotClass) -> Self {
        debug_assert!(!matches!(class, SlotClass::Instruction | SlotClass::Query));
        Self {
            slots: self.slots.iter().copied().filter(|&s| s != class).collect(),
        }
    }

    /// Lays out documents in schema order. Classes absent from the schema are
    /// ignored.
    pub fn realize(&self, docs_by_class: &BTreeMap<SlotClass, Vec<ContextDoc>>) -> Vec<ContextDoc> {
        let mut occurrences: BTreeMap<SlotClass, usize> = BTreeMap::new();
        for &slot in self.interior() {
            *occurrences.entry(slot).or_default() += 1;
        }
        let mut seen: BTreeMap<SlotClass, usize> = BTreeMap::new();
        let mut out = Vec::new();
        for &slot in self.interior() {
            let Some(docs) = docs_by_class.get(&slot) else {
                continue;
            };
            let total = occurrences[&slot];
            let j = seen.entry(slot).or_default();
            let n = docs.len();
            let (lo, hi) = (*j * n / total, (*j + 1) * n / total);
            out.extend_from_slice(&docs[lo..hi]);
            *j += 1;
        }
        out
    }
}

impl fmt::Display for PromptSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.slots.iter().map(|s| s.token()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for PromptSchema {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let slots = s
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<SlotClass>, _>>()?;
        Self::new(slots)
    }
}

impl TryFrom<String> for PromptSchema {
    type Error = PromptError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PromptSchema> for String {
    fn from(s: PromptSchema) -> Self {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Origin, Passage};
    use crate::taxonomy::DocLabel;

    fn docs(prefix: &str, n: usize, label: DocLabel) -> Vec<ContextDoc> {
        (0..n)
            .map(|i| ContextDoc {
                passage: Passage::new(format!("{prefix}{i}"), "t", "x", Origin::MainCorpus),
                label,
            })
            .collect()
    }

    #[test]
    fn parses_compact_notation() {
        let s: PromptSchema = "I, random ,gold,Q".parse().unwrap();
        assert_eq!(
            s.slots(),
            &[
                SlotClass::Instruction,
                SlotClass::Random,
                SlotClass::Gold,
                SlotClass::Query
            ]
        );
        assert_eq!(s.to_string(), "I,random,gold,Q");
        assert!("gold,Q".parse::<PromptSchema>().is_err());
        assert!("I,gold".parse::<PromptSchema>().is_err());
        assert!("I,I,gold,Q".parse::<PromptSchema>().is_err());
        assert!("I,relevant,Q".parse::<PromptSchema>().is_err());
    }

    #[test]
    fn repeated_class_splits_documents() {
        let s: PromptSchema = "I,distracting,gold,distracting,Q".parse().unwrap();
        let mut by_class = BTreeMap::new();
        by_class.insert(SlotClass::Distracting, docs("d", 5, DocLabel::Distracting));
        by_class.insert(SlotClass::Gold, docs("g", 1, DocLabel::Gold));
        let ids: Vec<_> = s
            .realize(&by_class)
            .into_iter()
            .map(|d| d.passage.id)
            .collect();
        assert_eq!(ids, vec!["d0", "d1", "g0", "d2", "d3", "d4"]);
    }
}
