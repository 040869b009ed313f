//! Deterministic fact segmentation for raw target texts.
//!
//! Splits after sentence-final punctuation and before configured connectives
//! when both sides contain a verb-like word. Gold `facts` in the corpus always
//! win over this heuristic.

use std::collections::HashSet;
use std::path::Path;

use crate::data::{special, Instance, TokenVocab};
use crate::error::{Error, Result};

const DEFAULT_CONFIG: &str = include_str!("../data/segmenter.conf");

#[derive(Clone, Debug)]
pub struct SegmenterConfig {
    /// Each connective as lowercase words; a leading `,` means the preceding
    /// word must end in a comma.
    connectives: Vec<(bool, Vec<String>)>,
    verbs: HashSet<String>,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self::parse(DEFAULT_CONFIG).expect("bundled segmenter config")
    }
}

impl SegmenterConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut connectives = Vec::new();
        let mut verbs = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (kind, value) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("segmenter line {}: missing tab", n + 1)))?;
            match kind.trim() {
                "connective" => {
                    let v = value.trim();
                    let (comma, rest) = match v.strip_prefix(',') {
                        Some(r) => (true, r),
                        None => (false, v),
                    };
                    let words: Vec<String> =
                        rest.split_whitespace().map(str::to_lowercase).collect();
                    if words.is_empty() {
                        return Err(Error::Config(format!(
                            "segmenter line {}: empty connective",
                            n + 1
                        )));
                    }
                    connectives.push((comma, words));
                }
                "verb" => {
                    verbs.insert(value.trim().to_lowercase());
                }
                other => {
                    return Err(Error::Config(format!(
                        "segmenter line {}: unknown entry kind `{other}`",
                        n + 1
                    )))
                }
            }
        }
        Ok(SegmenterConfig { connectives, verbs })
    }

    fn is_verb(&self, word: &str) -> bool {
        let w: String = word
            .chars()
            .filter(|c| !c.is_ascii_punctuation())
            .collect::<String>()
            .to_lowercase();
        self.verbs.contains(&w)
    }
}

fn ends_sentence(word: &str) -> bool {
    word.ends_with(['.', '!', '?'])
}

/// Splits `text` into facts. Joining the result with single spaces gives the
/// whitespace-normalized input.
pub fn segment_facts(text: &str, cfg: &SegmenterConfig) -> Vec<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Vec::new();
    }
    // sentence end (exclusive) for every position
    let mut sentence_end = vec![words.len(); words.len()];
    let mut end = words.len();
    for i in (0..words.len()).rev() {
        if ends_sentence(words[i]) {
            end = i + 1;
        }
        sentence_end[i] = end;
    }

    let mut cuts = Vec::new();
    let mut seg_start = 0;
    let mut i = 0;
    while i < words.len() {
        if i > seg_start {
            if let Some(at) = connective_at(&words, i, cfg) {
                let left_has = words[seg_start..at].iter().any(|w| cfg.is_verb(w));
                let right_has = words[at..sentence_end[i]].iter().any(|w| cfg.is_verb(w));
                if left_has && right_has && at > seg_start {
                    cuts.push(at);
                    seg_start = at;
                }
            }
        }
        if ends_sentence(words[i]) && i + 1 < words.len() {
            cuts.push(i + 1);
            seg_start = i + 1;
        }
        i += 1;
    }
    let mut out = Vec::new();
    let mut start = 0;
    for c in cuts.into_iter().chain(std::iter::once(words.len())) {
        if c > start {
            out.push(words[start..c].join(" "));
            start = c;
        }
    }
    out
}

/// Split point if a connective starts at word `i`.
fn connective_at(words: &[&str], i: usize, cfg: &SegmenterConfig) -> Option<usize> {
    for (comma, conn) in &cfg.connectives {
        if i + conn.len() > words.len() {
            continue;
        }
        let matches = conn
            .iter()
            .zip(&words[i..])
            .all(|(c, w)| w.to_lowercase() == *c);
        if !matches {
            continue;
        }
        if !comma {
            return Some(i);
        }
        let prev = words[i - 1];
        if prev == "," {
            if i >= 2 {
                return Some(i - 1);
            }
        } else if prev.ends_with(',') {
            return Some(i);
        }
    }
    None
}

/// Gold facts when the instance has them, otherwise the heuristic split.
pub fn facts_for(inst: &Instance, cfg: &SegmenterConfig) -> Vec<String> {
    match &inst.facts {
        Some(f) => f.clone(),
        None => segment_facts(&inst.text, cfg),
    }
}

/// Fact token sequences, each wrapped as `[FS] tokens [FE]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactSequence {
    pub facts: Vec<Vec<usize>>,
}

impl FactSequence {
    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// All facts back to back, with the fact index of every position.
    pub fn flatten(&self) -> (Vec<usize>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut owner = Vec::new();
        for (t, f) in self.facts.iter().enumerate() {
            ids.extend_from_slice(f);
            owner.extend(std::iter::repeat(t).take(f.len()));
        }
        (ids, owner)
    }

    /// Content tokens of fact `t`, markers stripped.
    pub fn content(&self, t: usize) -> &[usize] {
        let f = &self.facts[t];
        &f[1..f.len() - 1]
    }
}

pub fn wrap_facts<S: AsRef<str>>(facts: &[S], vocab: &TokenVocab) -> Result<FactSequence> {
    if facts.is_empty() {
        return Err(Error::EmptyFact);
    }
    let mut out = Vec::with_capacity(facts.len());
    for f in facts {
        let ids = vocab.encode(f.as_ref());
        if ids.is_empty() {
            return Err(Error::EmptyFact);
        }
        let mut w = Vec::with_capacity(ids.len() + 2);
        w.push(special::FACT_START);
        w.extend(ids);
        w.push(special::FACT_END);
        out.push(w);
    }
    Ok(FactSequence { facts: out })
}
