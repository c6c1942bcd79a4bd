use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

use super::TokenId;

/// Token inventory with special tokens, per-group seed words and task lexicons.
///
/// Seed sets are keyed by group id (`"male"`, `"female"`, ...) and must be
/// pairwise disjoint. Lexicons are keyed by task name (`"sentiment"`,
/// `"toxicity"`, `"regard_neg"`, `"regard_pos"`) and map token ids to scores
/// in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawVocabulary", into = "RawVocabulary")]
pub struct Vocabulary {
    tokens: Vec<String>,
    bos: TokenId,
    eos: TokenId,
    seed_sets: BTreeMap<String, BTreeSet<TokenId>>,
    lexicons: BTreeMap<String, BTreeMap<TokenId, f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawVocabulary {
    tokens: Vec<String>,
    bos: TokenId,
    eos: TokenId,
    #[serde(default)]
    seed_sets: BTreeMap<String, BTreeSet<TokenId>>,
    #[serde(default)]
    lexicons: BTreeMap<String, BTreeMap<TokenId, f64>>,
}

impl TryFrom<RawVocabulary> for Vocabulary {
    type Error = LabError;

    fn try_from(raw: RawVocabulary) -> Result<Self> {
        Vocabulary::new(raw.tokens, raw.bos, raw.eos, raw.seed_sets, raw.lexicons)
    }
}

impl From<Vocabulary> for RawVocabulary {
    fn from(v: Vocabulary) -> Self {
        RawVocabulary {
            tokens: v.tokens,
            bos: v.bos,
            eos: v.eos,
            seed_sets: v.seed_sets,
            lexicons: v.lexicons,
        }
    }
}

impl Vocabulary {
    pub fn new(
        tokens: Vec<String>,
        bos: TokenId,
        eos: TokenId,
        seed_sets: BTreeMap<String, BTreeSet<TokenId>>,
        lexicons: BTreeMap<String, BTreeMap<TokenId, f64>>,
    ) -> Result<Self> {
        let n = tokens.len();
        if bos >= n || eos >= n {
            return Err(LabError::Invalid(format!(
                "bos/eos ids ({bos}, {eos}) out of range for {n} tokens"
            )));
        }
        if bos == eos {
            return Err(LabError::Invalid("bos and eos must differ".into()));
        }
        let mut seen = BTreeSet::new();
        for (group, set) in &seed_sets {
            for &id in set {
                if id >= n {
                    return Err(LabError::Invalid(format!(
                        "seed token {id} of group `{group}` out of range"
                    )));
                }
                if !seen.insert(id) {
                    return Err(LabError::Invalid(format!(
                        "seed token {id} appears in more than one group"
                    )));
                }
            }
        }
        for (task, lex) in &lexicons {
            for (&id, &score) in lex {
                if id >= n {
                    return Err(LabError::Invalid(format!(
                        "lexicon `{task}` references token {id} out of range"
                    )));
                }
                if !(-1.0..=1.0).contains(&score) {
                    return Err(LabError::Invalid(format!(
                        "lexicon `{task}` score {score} for token {id} outside [-1, 1]"
                    )));
                }
            }
        }
        Ok(Self {
            tokens,
            bos,
            eos,
            seed_sets,
            lexicons,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.bos || id == self.eos
    }

    pub fn seed_sets(&self) -> &BTreeMap<String, BTreeSet<TokenId>> {
        &self.seed_sets
    }

    pub fn groups(&self) -> impl Iterator<Item = &str> {
        self.seed_sets.keys().map(String::as_str)
    }

    pub fn seed_set(&self, group: &str) -> Option<&BTreeSet<TokenId>> {
        self.seed_sets.get(group)
    }

    /// Union of all seed sets (the attribute-revealing tokens).
    pub fn seed_union(&self) -> BTreeSet<TokenId> {
        self.seed_sets.values().flatten().copied().collect()
    }

    /// Group whose seed set contains `id`, if any.
    pub fn group_of(&self, id: TokenId) -> Option<&str> {
        self.seed_sets
            .iter()
            .find(|(_, set)| set.contains(&id))
            .map(|(g, _)| g.as_str())
    }

    pub fn lexicon(&self, task: &str) -> Option<&BTreeMap<TokenId, f64>> {
        self.lexicons.get(task)
    }

    pub fn lexicons(&self) -> &BTreeMap<String, BTreeMap<TokenId, f64>> {
        &self.lexicons
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| LabError::io(path, e))
    }
}
