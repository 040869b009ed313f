//! Generation and planning metrics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use regex::Regex;

use crate::data::{predicate_key, tokenize, Triple};
use crate::error::{Error, Result};
use crate::inference::Alignment;
use crate::plan::Plan;

pub const OBJECT_SLOT: &str = "{OBJECT}";

fn ngrams(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 with uniform weights, clipped counts, and the brevity
/// penalty against the closest reference length. No smoothing: a zero match
/// count at any order gives 0. Orders for which the hypotheses contain no
/// n-grams at all are left out of the geometric mean.
pub fn bleu(references: &[Vec<Vec<String>>], hypotheses: &[Vec<String>]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::Length(format!(
            "{} reference sets for {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (refs, hyp) in references.iter().zip(hypotheses) {
        if refs.is_empty() {
            return Err(Error::Length("hypothesis without reference".into()));
        }
        hyp_len += hyp.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap();
        for n in 1..=4 {
            let h = ngrams(hyp, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in h {
                total[n - 1] += c;
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    let mut orders = 0;
    for n in 0..4 {
        if total[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_p += (matched[n] as f64 / total[n] as f64).ln();
        orders += 1;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_p / orders as f64).exp())
}

/// Surface patterns per predicate, compiled against tokenized text.
#[derive(Clone, Debug)]
pub struct SlotPatterns {
    patterns: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SerReport {
    pub add: usize,
    pub miss: usize,
    pub wrong: usize,
    /// Number of input slots.
    pub total: usize,
}

impl SerReport {
    /// `100 · (add + miss + wrong) / total`.
    pub fn ser(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        100.0 * (self.add + self.miss + self.wrong) as f64 / self.total as f64
    }

    pub fn merge(&mut self, o: &SerReport) {
        self.add += o.add;
        self.miss += o.miss;
        self.wrong += o.wrong;
        self.total += o.total;
    }
}

fn norm_text(s: &str) -> String {
    tokenize(s).join(" ")
}

/// Any value of one to four tokens.
const ANY_VALUE: &str = r"\S+(?: \S+){0,3}";

impl SlotPatterns {
    /// Parses `predicate<TAB>pattern` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut patterns: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (p, pat) = line.split_once('\t').ok_or_else(|| {
                Error::Patterns(format!("line {}: expected predicate<TAB>pattern", i + 1))
            })?;
            if pat.trim().is_empty() {
                return Err(Error::Patterns(format!("line {}: empty pattern", i + 1)));
            }
            patterns
                .entry(predicate_key(p))
                .or_default()
                .push(pat.trim().to_string());
        }
        Ok(SlotPatterns { patterns })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn predicates(&self) -> impl Iterator<Item = &str> {
        self.patterns.keys().map(String::as_str)
    }

    fn regex(pattern: &str, object: Option<&str>) -> Regex {
        let (pre, post) = match pattern.split_once(OBJECT_SLOT) {
            Some((a, b)) => (a, Some(b)),
            None => (pattern, None),
        };
        let mut re = String::from("(?:^| )");
        let lit = |s: &str| regex::escape(&norm_text(s));
        let pre_n = lit(pre);
        re.push_str(&pre_n);
        if let Some(post) = post {
            if !pre_n.is_empty() {
                re.push(' ');
            }
            match object {
                Some(o) => re.push_str(&regex::escape(&norm_text(o))),
                None => re.push_str(ANY_VALUE),
            }
            let post_n = lit(post);
            if !post_n.is_empty() {
                re.push(' ');
                re.push_str(&post_n);
            }
        }
        re.push_str("(?: |$)");
        Regex::new(&re).expect("escaped pattern")
    }

    fn matches(&self, pred: &str, text: &str, object: Option<&str>) -> bool {
        self.patterns
            .get(&predicate_key(pred))
            .is_some_and(|ps| ps.iter().any(|p| Self::regex(p, object).is_match(text)))
    }

    /// Slot errors of `text` for the input `triples`: a slot is missed when no
    /// pattern of its predicate matches, wrong when one matches only with a
    /// different value, and added when a predicate outside the input matches.
    pub fn ser(&self, text: &str, triples: &[Triple]) -> Result<SerReport> {
        let text = norm_text(text);
        let mut r = SerReport {
            total: triples.len(),
            ..SerReport::default()
        };
        let mut present = HashSet::new();
        for t in triples {
            let key = predicate_key(&t.predicate);
            if !self.patterns.contains_key(&key) {
                return Err(Error::Patterns(format!(
                    "no pattern for predicate `{}`",
                    t.predicate
                )));
            }
            present.insert(key);
            if self.matches(&t.predicate, &text, Some(&t.object)) {
                continue;
            }
            if self.matches(&t.predicate, &text, None) {
                r.wrong += 1;
            } else {
                r.miss += 1;
            }
        }
        for p in self.patterns.keys() {
            if !present.contains(p) && self.matches(p, &text, None) {
                r.add += 1;
            }
        }
        Ok(r)
    }
}

fn cluster_labels(a: &Plan, b: &Plan) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut pa: Vec<usize> = a.predicates().collect();
    let mut pb: Vec<usize> = b.predicates().collect();
    pa.sort_unstable();
    pb.sort_unstable();
    if pa != pb || pa.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Plan("plans cover different predicates".into()));
    }
    let la = pa.iter().map(|&p| a.group_of(p).unwrap()).collect();
    let lb = pa.iter().map(|&p| b.group_of(p).unwrap()).collect();
    Ok((la, lb))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information between the groupings of two plans (order
/// ignored), `I / sqrt(H_a · H_b)`. When either entropy is zero the result is
/// 1 for identical groupings and 0 otherwise.
pub fn nmi(a: &Plan, b: &Plan) -> Result<f64> {
    let (la, lb) = cluster_labels(a, b)?;
    let n = la.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in la.iter().zip(&lb) {
        *joint.entry((x, y)).or_insert(0) += 1;
        *ca.entry(x).or_insert(0) += 1;
        *cb.entry(y).or_insert(0) += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if joint.len() == ca.len() && joint.len() == cb.len() {
        // identical groupings
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        mi += pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln();
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Kendall's tau-b between the group ranks of two plans. A zero denominator
/// gives 1 for identical rankings and 0 otherwise.
pub fn kendall_tau(a: &Plan, b: &Plan) -> Result<f64> {
    let (ra, rb) = cluster_labels(a, b)?;
    let (mut conc, mut disc, mut tie_a, mut tie_b) = (0i64, 0i64, 0i64, 0i64);
    let n = ra.len();
    for i in 0..n {
        for j in i + 1..n {
            let da = (ra[i] as i64 - ra[j] as i64).signum();
            let db = (rb[i] as i64 - rb[j] as i64).signum();
            if da == 0 {
                tie_a += 1;
            }
            if db == 0 {
                tie_b += 1;
            }
            match da * db {
                1 => conc += 1,
                -1 => disc += 1,
                _ => {}
            }
        }
    }
    let n0 = (n * n.saturating_sub(1) / 2) as i64;
    let denom = (((n0 - tie_a) * (n0 - tie_b)) as f64).sqrt();
    if denom == 0.0 {
        return Ok(if ra == rb { 1.0 } else { 0.0 });
    }
    Ok((conc - disc) as f64 / denom)
}

/// Link counts between a predicted and a gold alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AlignCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl AlignCounts {
    pub fn of(predicted: &Alignment, gold: &Alignment) -> Self {
        let links = |a: &Alignment| -> HashSet<(usize, usize)> {
            a.sets
                .iter()
                .enumerate()
                .flat_map(|(t, s)| s.iter().map(move |&p| (t, p)))
                .collect()
        };
        let (p, g) = (links(predicted), links(gold));
        AlignCounts {
            correct: p.intersection(&g).count(),
            predicted: p.len(),
            gold: g.len(),
        }
    }

    pub fn add(&mut self, o: &AlignCounts) {
        self.correct += o.correct;
        self.predicted += o.predicted;
        self.gold += o.gold;
    }

    /// Precision, recall, F1. Empty predictions have precision 1 only when
    /// gold is empty too; empty gold has recall 1.
    pub fn prf(&self) -> (f64, f64, f64) {
        let p = if self.predicted == 0 {
            if self.gold == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.correct as f64 / self.predicted as f64
        };
        let r = if self.gold == 0 {
            1.0
        } else {
            self.correct as f64 / self.gold as f64
        };
        let f = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        (p, r, f)
    }
}

pub fn align_prf(predicted: &Alignment, gold: &Alignment) -> (f64, f64, f64) {
    AlignCounts::of(predicted, gold).prf()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn bleu_reference_values() {
        let h = vec![toks("the cat sat on the mat")];
        assert!((bleu(&[vec![h[0].clone()]], &h).unwrap() - 100.0).abs() < 1e-12);
        let b = bleu(&[vec![toks("the cat sat down")]], &[toks("the cat sat")]).unwrap();
        assert!((b - 100.0 * (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-9);
        assert!((b - 71.65).abs() < 0.01);
        assert_eq!(
            bleu(&[vec![toks("a b c d")]], &[toks("e f g h")]).unwrap(),
            0.0
        );
        assert!(bleu(&[vec![toks("a")]], &[]).is_err());
        // 4-gram with no match but lower orders matching
        let b = bleu(&[vec![toks("a b c d e")]], &[toks("a b c e d")]).unwrap();
        assert_eq!(b, 0.0);
    }

    #[test]
    fn bleu_hand_computed() {
        // hyp: the the cat (3 tokens), ref: the cat is here (4 tokens)
        // p1 = 2/3 (clipped the=1, cat=1), p2: {the the, the cat} vs {the cat, cat is, is here} → 1/2
        // p3: {the the cat} → 0 → score 0
        assert_eq!(
            bleu(&[vec![toks("the cat is here")]], &[toks("the the cat")]).unwrap(),
            0.0
        );
        // hyp "the cat" vs ref "the cat is": p1 = 1, p2 = 1, bp = exp(1 - 3/2)
        let b = bleu(&[vec![toks("the cat is")]], &[toks("the cat")]).unwrap();
        assert!((b - 100.0 * (-0.5f64).exp()).abs() < 1e-9);
    }

    fn patterns() -> SlotPatterns {
        SlotPatterns::parse(
            "food\tserves {OBJECT} food\narea\tin the {OBJECT} area\nnear\tnear {OBJECT}\nfamily_friendly\tis family friendly\n",
        )
        .unwrap()
    }

    fn tr(p: &str, o: &str) -> Triple {
        Triple::new("x", p, o).unwrap()
    }

    #[test]
    fn slot_errors() {
        let pats = patterns();
        let triples = vec![
            tr("food", "thai"),
            tr("area", "city centre"),
            tr("near", "the bakers"),
            tr("family_friendly", "yes"),
        ];
        let text =
            "x serves thai food in the city centre area near the bakers . it is family friendly .";
        let r = pats.ser(text, &triples).unwrap();
        assert_eq!(
            r,
            SerReport {
                add: 0,
                miss: 0,
                wrong: 0,
                total: 4
            }
        );
        assert_eq!(r.ser(), 0.0);

        let r = pats
            .ser(
                "x serves thai food in the city centre area near the bakers .",
                &triples,
            )
            .unwrap();
        assert_eq!((r.miss, r.ser()), (1, 25.0));

        let r = pats.ser("x serves italian food in the city centre area near the bakers . it is family friendly .", &triples).unwrap();
        assert_eq!((r.wrong, r.miss, r.add), (1, 0, 0));

        let r = pats
            .ser("x serves thai food near the bakers .", &triples[..1])
            .unwrap();
        assert_eq!((r.add, r.miss), (1, 0));
        assert!((r.ser() - 100.0).abs() < 1e-12);

        assert!(pats.ser("x", &[tr("owner", "bob")]).is_err());
        assert!(SlotPatterns::parse("food serves").is_err());
    }

    fn plan(g: &[&[usize]]) -> Plan {
        Plan::new(g.iter().map(|x| x.to_vec()).collect())
    }

    #[test]
    fn clustering_metrics() {
        let a = plan(&[&[1, 2], &[3, 4]]);
        let b = plan(&[&[1, 3], &[2, 4]]);
        assert_eq!(nmi(&a, &a).unwrap(), 1.0);
        assert!(nmi(&a, &b).unwrap().abs() < 1e-12);
        let s = plan(&[&[1], &[2], &[3]]);
        let r = plan(&[&[3], &[2], &[1]]);
        assert!((nmi(&s, &r).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(kendall_tau(&s, &s).unwrap(), 1.0);
        assert_eq!(kendall_tau(&s, &r).unwrap(), -1.0);
        let x = plan(&[&[1], &[2, 3]]);
        let y = plan(&[&[2, 3], &[1]]);
        assert!((kendall_tau(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        let one = plan(&[&[1, 2, 3]]);
        assert_eq!(nmi(&one, &one).unwrap(), 1.0);
        assert_eq!(nmi(&one, &s).unwrap(), 0.0);
        assert_eq!(kendall_tau(&one, &one).unwrap(), 1.0);
        assert!(nmi(&a, &s).is_err());
        assert!(kendall_tau(&a, &s).is_err());
        // hand value: {1,2}{3} vs {1}{2,3}: H = ln3 - 2/3 ln2 each; joint counts 1,1,1
        let p = plan(&[&[1, 2], &[3]]);
        let q = plan(&[&[1], &[2, 3]]);
        let h = 3f64.ln() - 2.0 / 3.0 * 2f64.ln();
        let mi = (2.0 / 3.0) * (1.5f64).ln() + (1.0 / 3.0) * (0.75f64).ln();
        assert!((nmi(&p, &q).unwrap() - mi / h).abs() < 1e-12);
    }

    #[test]
    fn alignment_scores() {
        let g = Alignment {
            sets: vec![vec![1, 2], vec![3, 4]],
        };
        assert_eq!(align_prf(&g, &g), (1.0, 1.0, 1.0));
        let half = Alignment {
            sets: vec![vec![1], vec![3]],
        };
        let (p, r, f) = align_prf(&half, &g);
        assert_eq!((p, r), (1.0, 0.5));
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        let empty = Alignment {
            sets: vec![vec![], vec![]],
        };
        assert_eq!(align_prf(&empty, &g).0, 0.0);
        assert_eq!(align_prf(&empty, &empty), (1.0, 1.0, 1.0));
    }

    fn arb_plan() -> impl Strategy<Value = (Plan, Plan)> {
        (
            Just((1..=6usize).collect::<Vec<_>>()).prop_shuffle(),
            Just((1..=6usize).collect::<Vec<_>>()).prop_shuffle(),
            proptest::collection::vec(1..=3usize, 6),
            proptest::collection::vec(1..=3usize, 6),
        )
            .prop_map(|(o1, o2, s1, s2)| {
                let cut = |o: Vec<usize>, s: Vec<usize>| {
                    let mut groups = Vec::new();
                    let mut i = 0;
                    for k in s {
                        if i >= o.len() {
                            break;
                        }
                        let e = (i + k).min(o.len());
                        groups.push(o[i..e].to_vec());
                        i = e;
                    }
                    Plan::new(groups)
                };
                (cut(o1, s1), cut(o2, s2))
            })
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_bounded((a, b) in arb_plan()) {
            let n1 = nmi(&a, &b).unwrap();
            prop_assert!((n1 - nmi(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&n1));
            let t = kendall_tau(&a, &b).unwrap();
            prop_assert!((t - kendall_tau(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&t));
            prop_assert_eq!(nmi(&a, &a).unwrap(), 1.0);
            prop_assert_eq!(kendall_tau(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn bleu_ignores_instance_order(seed in 0u64..100) {
            use rand::{seq::SliceRandom, SeedableRng};
            let refs = vec![vec![toks("a b c d e")], vec![toks("the cat sat on the mat")], vec![toks("x y z")]];
            let hyps = vec![toks("a b c d"), toks("the cat sat on a mat"), toks("x y z")];
            let base = bleu(&refs, &hyps).unwrap();
            let mut idx: Vec<usize> = (0..3).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let r2: Vec<_> = idx.iter().map(|&i| refs[i].clone()).collect();
            let h2: Vec<_> = idx.iter().map(|&i| hyps[i].clone()).collect();
            prop_assert!((bleu(&r2, &h2).unwrap() - base).abs() < 1e-9);
            prop_assert!((0.0..=100.0).contains(&base));
        }
    }
}
