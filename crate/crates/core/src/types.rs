//! Domain types shared across the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
    OodTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Dev, Split::Test, Split::OodTest];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::OodTest => "ood_test",
        }
    }

    pub fn is_test(self) -> bool {
        matches!(self, Split::Test | Split::OodTest)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| format!("unknown split {s:?}"))
    }
}

/// One closed-book question with its gold answer(s).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub id: String,
    pub relation_id: String,
    pub subject: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub split: Split,
}

impl QAPair {
    /// The single gold answer of a filtered pair (the first one otherwise).
    pub fn gold(&self) -> &str {
        self.gold_answers.first().map(String::as_str).unwrap_or("")
    }
}

/// Four-way label of how well a model knows a fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KnowledgeCategory {
    HighlyKnown,
    MaybeKnown,
    WeaklyKnown,
    Unknown,
}

impl KnowledgeCategory {
    pub const ALL: [KnowledgeCategory; 4] = [
        KnowledgeCategory::HighlyKnown,
        KnowledgeCategory::MaybeKnown,
        KnowledgeCategory::WeaklyKnown,
        KnowledgeCategory::Unknown,
    ];

    pub fn is_known(self) -> bool {
        self != KnowledgeCategory::Unknown
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KnowledgeCategory::HighlyKnown => "HighlyKnown",
            KnowledgeCategory::MaybeKnown => "MaybeKnown",
            KnowledgeCategory::WeaklyKnown => "WeaklyKnown",
            KnowledgeCategory::Unknown => "Unknown",
        }
    }
}

impl fmt::Display for KnowledgeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KnowledgeCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KnowledgeCategory::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

/// Category per example id.
pub type CategoryMap = std::collections::BTreeMap<String, KnowledgeCategory>;
