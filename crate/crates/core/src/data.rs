//! Corpus records, tokenization, vocabularies, and input linearization.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `(subject, predicate, object)` input unit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    #[serde(rename = "s")]
    pub subject: String,
    #[serde(rename = "p")]
    pub predicate: String,
    #[serde(rename = "o")]
    pub object: String,
}

impl Triple {
    pub fn new(subject: &str, predicate: &str, object: &str) -> Result<Self> {
        let t = Triple {
            subject: subject.to_string(),
            predicate: predicate.to_string(),
            object: object.to_string(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("subject", &self.subject),
            ("predicate", &self.predicate),
            ("object", &self.object),
        ] {
            if v.trim().is_empty() {
                return Err(Error::InvalidTriple(format!("empty {field}")));
            }
        }
        if self.predicate.contains(['[', ']']) {
            return Err(Error::InvalidTriple(format!(
                "predicate `{}` contains a bracket",
                self.predicate
            )));
        }
        Ok(())
    }

    /// Tokens of the predicate followed by tokens of the object.
    pub fn predicate_object_tokens(&self) -> Vec<String> {
        let mut toks = predicate_tokens(&self.predicate);
        toks.extend(tokenize(&self.object));
        toks
    }
}

/// A set of input triples with its target text and optional gold facts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub triples: Vec<Triple>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facts: Option<Vec<String>>,
}

impl Instance {
    /// Checks triple validity, predicate uniqueness, and that the facts (when
    /// present) reproduce the text up to whitespace. `index` labels errors.
    pub fn validate(&self, index: usize) -> Result<()> {
        if self.triples.is_empty() {
            return Err(Error::InvalidTriple(format!(
                "instance {index} has no triples"
            )));
        }
        let mut seen = HashSet::new();
        for t in &self.triples {
            t.validate()?;
            if !seen.insert(predicate_key(&t.predicate)) {
                return Err(Error::DuplicatePredicate {
                    instance: index,
                    predicate: t.predicate.clone(),
                });
            }
        }
        if let Some(facts) = &self.facts {
            if facts.is_empty() || normalize_ws(&facts.join(" ")) != normalize_ws(&self.text) {
                return Err(Error::FactMismatch { instance: index });
            }
        }
        Ok(())
    }

    pub fn predicates(&self) -> impl Iterator<Item = &str> {
        self.triples.iter().map(|t| t.predicate.as_str())
    }
}

pub type Corpus = Vec<Instance>;

/// Reads a line-delimited JSON corpus. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = fs::File::open(path)?;
    let mut corpus = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        inst.validate(corpus.len())?;
        corpus.push(inst);
    }
    Ok(corpus)
}

pub fn write_corpus(path: &Path, corpus: &[Instance]) -> Result<()> {
    let mut out = String::new();
    for inst in corpus {
        out.push_str(&serde_json::to_string(inst)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercases and splits on whitespace; every ASCII punctuation character
/// becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut toks = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    toks.push(std::mem::take(&mut cur));
                }
                toks.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            toks.push(cur);
        }
    }
    toks
}

/// Splits a predicate name into lowercase words at underscores, hyphens,
/// whitespace, and camelCase boundaries (`eatType` → `eat type`).
pub fn predicate_tokens(pred: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    let mut prev_lower = false;
    for ch in pred.chars() {
        if ch == '_' || ch == '-' || ch.is_whitespace() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            prev_lower = false;
            continue;
        }
        if ch.is_uppercase() && prev_lower && !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
        prev_lower = ch.is_lowercase() || ch.is_ascii_digit();
        cur.push(ch);
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words.iter().flat_map(|w| tokenize(w)).collect()
}

/// Case-insensitive lookup key for a predicate; spaces and hyphens fold to
/// underscores.
pub fn predicate_key(pred: &str) -> String {
    pred.trim()
        .chars()
        .map(|c| {
            if c.is_whitespace() || c == '-' {
                '_'
            } else {
                c
            }
        })
        .collect::<String>()
        .to_lowercase()
}

/// Reserved token ids.
pub mod special {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const CLS: usize = 2;
    pub const SEP: usize = 3;
    pub const FACT_START: usize = 4;
    pub const FACT_END: usize = 5;
    pub const NAMES: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[FS]", "[FE]"];
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t}")));
            }
        }
        Ok(TokenVocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(special::UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_tokens(&self, toks: &[String]) -> Vec<usize> {
        toks.iter().map(|t| self.id(t)).collect()
    }

    /// Joins content tokens with spaces, dropping reserved markers.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= special::NAMES.len() || i == special::UNK)
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tokens: Vec<String> = fs::read_to_string(path)?
            .lines()
            .map(str::to_string)
            .collect();
        if tokens.len() < special::NAMES.len()
            || tokens.iter().zip(special::NAMES).any(|(a, b)| a != b)
        {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "missing reserved tokens".into(),
            });
        }
        Self::from_tokens(tokens)
    }
}

pub const START_PREDICATE: usize = 0;
const START_NAME: &str = "<start>";

/// Bijection between predicate names and ids; id 0 is the start-state marker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredicateVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl PredicateVocab {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut all = vec![START_NAME.to_string()];
        all.extend(names.iter().map(|n| n.as_ref().to_string()));
        let mut index = HashMap::new();
        for (i, n) in all.iter().enumerate().skip(1) {
            if index.insert(predicate_key(n), i).is_some() {
                return Err(Error::Config(format!("predicate `{n}` is listed twice")));
            }
        }
        Ok(PredicateVocab { names: all, index })
    }

    /// `K`, including the start marker.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(&predicate_key(name)).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    /// Name as written in plan strings: internal whitespace becomes `_`.
    pub fn plan_name(&self, id: usize) -> String {
        self.names[id]
            .split_whitespace()
            .collect::<Vec<_>>()
            .join("_")
    }

    /// Predicate ids of an instance, in triple order.
    pub fn instance_ids(&self, inst: &Instance) -> Result<Vec<usize>> {
        inst.triples
            .iter()
            .map(|t| {
                self.id(&t.predicate)
                    .ok_or_else(|| Error::Plan(format!("unknown predicate `{}`", t.predicate)))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.names.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let names: Vec<String> = fs::read_to_string(path)?
            .lines()
            .map(str::to_string)
            .collect();
        if names.first().map(String::as_str) != Some(START_NAME) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "missing start marker".into(),
            });
        }
        Self::from_names(&names[1..])
    }
}

/// Builds both vocabularies. Ids are ordered by descending frequency, then
/// lexicographically; tokens seen fewer than `min_freq` times are left out
/// and map to `[UNK]`.
pub fn build_vocabs(corpus: &[Instance], min_freq: usize) -> Result<(TokenVocab, PredicateVocab)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut tok_freq: HashMap<String, usize> = HashMap::new();
    let mut pred_freq: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for inst in corpus {
        let mut bump = |toks: Vec<String>| {
            for t in toks {
                *tok_freq.entry(t).or_default() += 1;
            }
        };
        bump(tokenize(&inst.text));
        for t in &inst.triples {
            bump(tokenize(&t.subject));
            bump(predicate_tokens(&t.predicate));
            bump(tokenize(&t.object));
            let e = pred_freq
                .entry(predicate_key(&t.predicate))
                .or_insert((0, t.predicate.clone()));
            e.0 += 1;
            if t.predicate < e.1 {
                e.1 = t.predicate.clone();
            }
        }
    }
    let mut toks: Vec<(String, usize)> = tok_freq
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && !special::NAMES.contains(&t.as_str()))
        .collect();
    toks.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = special::NAMES.iter().map(|s| s.to_string()).collect();
    tokens.extend(toks.into_iter().map(|(t, _)| t));

    let mut preds: Vec<(String, usize, String)> = pred_freq
        .into_iter()
        .map(|(k, (c, name))| (k, c, name))
        .collect();
    preds.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let names: Vec<String> = preds.into_iter().map(|(_, _, n)| n).collect();

    Ok((
        TokenVocab::from_tokens(tokens)?,
        PredicateVocab::from_names(&names)?,
    ))
}

/// Encoder input: `[CLS]` then, per triple, subject, predicate, and object
/// tokens closed by `[SEP]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearizedInput {
    pub ids: Vec<usize>,
    /// Half-open token range of each triple, `[SEP]` included.
    pub triple_spans: Vec<Range<usize>>,
    pub cls_index: usize,
}

impl LinearizedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Triple index of each position; `None` for `[CLS]`.
    pub fn owners(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.ids.len()];
        for (j, span) in self.triple_spans.iter().enumerate() {
            for o in &mut out[span.clone()] {
                *o = Some(j);
            }
        }
        out
    }
}

pub fn linearize_input(triples: &[Triple], vocab: &TokenVocab) -> LinearizedInput {
    let mut ids = vec![special::CLS];
    let mut spans = Vec::with_capacity(triples.len());
    for t in triples {
        let start = ids.len();
        ids.extend(vocab.encode(&t.subject));
        ids.extend(vocab.encode_tokens(&predicate_tokens(&t.predicate)));
        ids.extend(vocab.encode(&t.object));
        ids.push(special::SEP);
        spans.push(start..ids.len());
    }
    LinearizedInput {
        ids,
        triple_spans: spans,
        cls_index: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn inst(triples: &[(&str, &str, &str)], text: &str) -> Instance {
        Instance {
            triples: triples
                .iter()
                .map(|(s, p, o)| Triple::new(s, p, o).unwrap())
                .collect(),
            text: text.into(),
            facts: None,
        }
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_single_record() {
        let f = write_tmp(
            r#"{"triples":[{"s":"Apollo 8","p":"operator","o":"NASA"}],"text":"apollo 8 was operated by nasa ."}"#,
        );
        let c = load_corpus(f.path()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].triples.len(), 1);
        assert_eq!(c[0].triples[0].predicate, "operator");
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let f = write_tmp("");
        assert!(load_corpus(f.path()).unwrap().is_empty());
    }

    #[test]
    fn rejects_fact_mismatch_and_duplicates_and_bad_json() {
        let f = write_tmp(
            r#"{"triples":[{"s":"a","p":"p","o":"b"}],"text":"a  is b .","facts":["a is","c ."]}"#,
        );
        assert!(matches!(
            load_corpus(f.path()),
            Err(Error::FactMismatch { instance: 0 })
        ));

        let ok = write_tmp(
            r#"{"triples":[{"s":"a","p":"p","o":"b"}],"text":"a  is b .","facts":["a is"," b ."]}"#,
        );
        assert!(load_corpus(ok.path()).is_ok());

        let f = write_tmp(
            "{\"triples\":[{\"s\":\"a\",\"p\":\"x\",\"o\":\"b\"}],\"text\":\"t\"}\n{\"triples\":[{\"s\":\"a\",\"p\":\"eat type\",\"o\":\"b\"},{\"s\":\"a\",\"p\":\"Eat-Type\",\"o\":\"c\"}],\"text\":\"t\"}",
        );
        assert!(matches!(
            load_corpus(f.path()),
            Err(Error::DuplicatePredicate { instance: 1, .. })
        ));

        let f = write_tmp("\n{\"triples\": oops}\n");
        match load_corpus(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(
            tokenize("Apollo 8, operated by NASA."),
            vec!["apollo", "8", ",", "operated", "by", "nasa", "."]
        );
        assert_eq!(predicate_tokens("eatType"), vec!["eat", "type"]);
        assert_eq!(
            predicate_tokens("customer_rating"),
            vec!["customer", "rating"]
        );
        assert_eq!(
            predicate_tokens("customer-rating"),
            vec!["customer", "rating"]
        );
    }

    #[test]
    fn vocab_counts_and_thresholds() {
        let corpus: Vec<Instance> = (0..8)
            .map(|i| inst(&[("x", &format!("pred{i}"), "y")], "x y common common"))
            .chain(std::iter::once(inst(&[("x", "pred0", "y")], "rare")))
            .collect();
        let (tv, pv) = build_vocabs(&corpus, 2).unwrap();
        assert_eq!(pv.len(), 9);
        assert_eq!(pv.id("pred0"), Some(1)); // most frequent
        assert!((1..9).all(|i| pv.name(i) != "<start>"));
        assert_eq!(tv.id("rare"), special::UNK);
        assert_ne!(tv.id("common"), special::UNK);

        let (tv2, pv2) = build_vocabs(&corpus, 2).unwrap();
        assert_eq!(tv, tv2);
        assert_eq!(pv, pv2);
        assert!(matches!(build_vocabs(&[], 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn vocab_files_round_trip() {
        let corpus = vec![inst(&[("a b", "eatType", "c")], "a b c")];
        let (tv, pv) = build_vocabs(&corpus, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        tv.save(&dir.path().join("t")).unwrap();
        pv.save(&dir.path().join("p")).unwrap();
        assert_eq!(TokenVocab::load(&dir.path().join("t")).unwrap(), tv);
        assert_eq!(PredicateVocab::load(&dir.path().join("p")).unwrap(), pv);
    }

    #[test]
    fn linearization_layout() {
        let corpus = vec![inst(&[("a", "p", "b"), ("c", "q", "d")], "t")];
        let (tv, _) = build_vocabs(&corpus, 1).unwrap();
        let lin = linearize_input(&corpus[0].triples, &tv);
        assert_eq!(lin.len(), 9);
        assert_eq!(lin.cls_index, 0);
        assert_eq!(lin.triple_spans, vec![1..5, 5..9]);
        assert_eq!(lin.ids[4], special::SEP);
        assert_eq!(lin.ids[8], special::SEP);

        let one = linearize_input(&corpus[0].triples[..1], &tv);
        assert_eq!(one.triple_spans, vec![1..5]);

        let rev: Vec<Triple> = corpus[0].triples.iter().rev().cloned().collect();
        let lr = linearize_input(&rev, &tv);
        assert_eq!(&lr.ids[1..5], &lin.ids[5..9]);
        let mut a = lin.ids.clone();
        let mut b = lr.ids.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }
}
