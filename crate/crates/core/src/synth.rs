//! Synthetic restaurant-domain corpora with known sentence plans.
//!
//! Each predicate has a phrase template mentioning its object verbatim.
//! Whenever two or more members of a designated group are present they share
//! one fact, so aggregation is a function of which pairs co-occur. Groups
//! follow a canonical order with probability `canonical_weight`; otherwise
//! two adjacent groups are swapped.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_corpus, Instance, Triple};
use crate::error::{Error, Result};
use crate::eval::OBJECT_SLOT;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthPredicate {
    pub name: String,
    /// Phrase with an `{OBJECT}` placeholder, e.g. `serves {OBJECT} food`.
    pub template: String,
    pub values: Vec<String>,
}

/// Predicates verbalized in one fact whenever at least two are present. The
/// template joins all of them (`{1}`, `{2}`, … in group order); a partial
/// group joins its phrases with `and`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthGroup {
    pub predicates: Vec<String>,
    pub template: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub subjects: Vec<String>,
    /// In canonical order.
    pub predicates: Vec<SynthPredicate>,
    /// Disjoint.
    pub groups: Vec<SynthGroup>,
    pub canonical_weight: f64,
    pub min_triples: usize,
    pub max_triples: usize,
}

fn pred(name: &str, template: &str, values: &[&str]) -> SynthPredicate {
    SynthPredicate {
        name: name.into(),
        template: template.into(),
        values: values.iter().map(|v| v.to_string()).collect(),
    }
}

fn group(preds: &[&str], template: &str) -> SynthGroup {
    SynthGroup {
        predicates: preds.iter().map(|p| p.to_string()).collect(),
        template: template.into(),
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects: [
                "aromi",
                "the mill",
                "blue spice",
                "the punter",
                "zizzi",
                "the eagle",
                "fitzbillies",
                "loch fyne",
                "the rice boat",
                "green man",
                "the phoenix",
                "cotto",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            predicates: vec![
                pred(
                    "eat_type",
                    "is a {OBJECT} type of place to eat",
                    &["pub", "restaurant", "coffee shop"],
                ),
                pred(
                    "food",
                    "serves {OBJECT} food",
                    &[
                        "thai", "italian", "french", "chinese", "indian", "english", "japanese",
                    ],
                ),
                pred(
                    "price_range",
                    "has a {OBJECT} price range",
                    &["low", "moderate", "high"],
                ),
                pred(
                    "area",
                    "is in the {OBJECT} area",
                    &["riverside", "city centre"],
                ),
                pred(
                    "near",
                    "is near {OBJECT}",
                    &[
                        "the bakers",
                        "cafe rouge",
                        "burger king",
                        "the sorrento",
                        "crowne plaza hotel",
                    ],
                ),
                pred(
                    "customer_rating",
                    "has a customer rating of {OBJECT}",
                    &[
                        "1 out of 5",
                        "3 out of 5",
                        "5 out of 5",
                        "average",
                        "excellent",
                    ],
                ),
                pred(
                    "family_friendly",
                    "is {OBJECT} family friendly",
                    &["very", "not", "quite"],
                ),
                pred(
                    "owner",
                    "is run by {OBJECT}",
                    &[
                        "the smith family",
                        "john brown",
                        "a local couple",
                        "the fox group",
                    ],
                ),
            ],
            groups: vec![
                group(&["eat_type", "food", "price_range"], "{1} that {2} and {3}"),
                group(&["area", "near"], "{1} and {2}"),
                group(&["customer_rating", "family_friendly"], "{1} and {2}"),
            ],
            canonical_weight: 0.9,
            min_triples: 1,
            max_triples: 5,
        }
    }
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let spec: SynthSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::Synth("no subjects".into()));
        }
        if self.min_triples == 0
            || self.min_triples > self.max_triples
            || self.max_triples > self.predicates.len()
        {
            return Err(Error::Synth(format!(
                "triple range {}..={} with {} predicates",
                self.min_triples,
                self.max_triples,
                self.predicates.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.canonical_weight) {
            return Err(Error::Synth("canonical_weight outside [0, 1]".into()));
        }
        for p in &self.predicates {
            if p.values.is_empty() || !p.template.contains(OBJECT_SLOT) {
                return Err(Error::Synth(format!(
                    "predicate `{}` needs values and a template with {OBJECT_SLOT}",
                    p.name
                )));
            }
        }
        let mut seen = Vec::new();
        for g in &self.groups {
            if g.predicates.len() < 2 {
                return Err(Error::Synth("groups need at least two predicates".into()));
            }
            for (i, name) in g.predicates.iter().enumerate() {
                if self.index(name).is_none() {
                    return Err(Error::Synth(format!(
                        "group uses unknown predicate `{name}`"
                    )));
                }
                if seen.contains(&name) {
                    return Err(Error::Synth(format!("`{name}` is in more than one group")));
                }
                seen.push(name);
                if !g.template.contains(&format!("{{{}}}", i + 1)) {
                    return Err(Error::Synth(format!(
                        "template `{}` has no slot for `{name}`",
                        g.template
                    )));
                }
            }
        }
        Ok(())
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.predicates.iter().position(|p| p.name == name)
    }

    /// `predicate<TAB>pattern` lines matching the templates.
    pub fn pattern_file(&self) -> String {
        self.predicates
            .iter()
            .map(|p| format!("{}\t{}\n", p.name, p.template))
            .collect()
    }

    /// Canonical grouping of a predicate set (indices into `predicates`), with
    /// the group whose template applies when all its members are present.
    pub fn canonical_groups(&self, chosen: &[usize]) -> Result<Vec<(Vec<usize>, Option<usize>)>> {
        let mut left: Vec<usize> = chosen.to_vec();
        left.sort_unstable();
        let mut groups = Vec::new();
        for (gi, g) in self.groups.iter().enumerate() {
            let idx: Vec<usize> = g
                .predicates
                .iter()
                .map(|n| {
                    self.index(n)
                        .ok_or_else(|| Error::Synth(format!("unknown predicate `{n}`")))
                })
                .collect::<Result<_>>()?;
            let present: Vec<usize> = idx.iter().copied().filter(|i| left.contains(i)).collect();
            if present.len() >= 2 {
                left.retain(|i| !present.contains(i));
                let full = (present.len() == idx.len()).then_some(gi);
                groups.push((present, full));
            }
        }
        groups.extend(left.into_iter().map(|i| (vec![i], None)));
        groups.sort_by_key(|(g, _)| *g.iter().min().unwrap());
        Ok(groups)
    }
}

/// Instances with their gold plans (bracket notation) and the pattern file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthCorpus {
    pub instances: Vec<Instance>,
    pub plans: Vec<String>,
    pub patterns: String,
}

impl SynthCorpus {
    /// Writes `corpus.jsonl`, `plans.txt`, and `patterns.tsv` under `dir`
    /// with the given file stem prefix.
    pub fn write(&self, corpus: &Path, plans: &Path, patterns: &Path) -> Result<()> {
        write_corpus(corpus, &self.instances)?;
        let mut p = self.plans.join("\n");
        if !p.is_empty() {
            p.push('\n');
        }
        fs::write(plans, p)?;
        fs::write(patterns, &self.patterns)?;
        Ok(())
    }
}

fn realize(
    spec: &SynthSpec,
    group: &(Vec<usize>, Option<usize>),
    objects: &[(usize, String)],
) -> Result<String> {
    let phrase = |i: usize| {
        let obj = &objects.iter().find(|(p, _)| *p == i).unwrap().1;
        spec.predicates[i].template.replace(OBJECT_SLOT, obj)
    };
    match group.1 {
        None => Ok(group
            .0
            .iter()
            .map(|&i| phrase(i))
            .collect::<Vec<_>>()
            .join(" and ")),
        Some(gi) => {
            let mut s = spec.groups[gi].template.clone();
            for (k, &i) in group.0.iter().enumerate() {
                let slot = format!("{{{}}}", k + 1);
                if !s.contains(&slot) {
                    return Err(Error::Synth(format!("template missing slot {slot}")));
                }
                s = s.replace(&slot, &phrase(i));
            }
            Ok(s)
        }
    }
}

/// Samples `count` instances deterministically from `seed`.
pub fn synth_corpus(spec: &SynthSpec, count: usize, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SynthCorpus {
        patterns: spec.pattern_file(),
        ..SynthCorpus::default()
    };
    let all: Vec<usize> = (0..spec.predicates.len()).collect();
    for _ in 0..count {
        let j = rng.gen_range(spec.min_triples..=spec.max_triples);
        let chosen: Vec<usize> = all.choose_multiple(&mut rng, j).copied().collect();
        let subject = spec.subjects.choose(&mut rng).unwrap().clone();
        let objects: Vec<(usize, String)> = chosen
            .iter()
            .map(|&i| {
                (
                    i,
                    spec.predicates[i].values.choose(&mut rng).unwrap().clone(),
                )
            })
            .collect();
        let mut groups = spec.canonical_groups(&chosen)?;
        if groups.len() > 1 && !rng.gen_bool(spec.canonical_weight) {
            let at = rng.gen_range(0..groups.len() - 1);
            groups.swap(at, at + 1);
        }
        let mut facts = Vec::with_capacity(groups.len());
        for (t, g) in groups.iter().enumerate() {
            let who = if t == 0 { subject.as_str() } else { "it" };
            facts.push(format!("{who} {} .", realize(spec, g, &objects)?));
        }
        // triples in a random input order
        let mut triples: Vec<Triple> = objects
            .iter()
            .map(|(i, o)| Triple::new(&subject, &spec.predicates[*i].name, o))
            .collect::<Result<_>>()?;
        triples.shuffle(&mut rng);
        out.plans.push(
            groups
                .iter()
                .map(|(g, _)| {
                    let names: Vec<&str> = g
                        .iter()
                        .map(|&i| spec.predicates[i].name.as_str())
                        .collect();
                    format!("[{}]", names.join(" "))
                })
                .collect(),
        );
        out.instances.push(Instance {
            triples,
            text: facts.join(" "),
            facts: Some(facts),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocabs, load_corpus};
    use crate::eval::SlotPatterns;
    use crate::plan::parse_plan;

    #[test]
    fn empty_and_deterministic() {
        let spec = SynthSpec::default();
        let e = synth_corpus(&spec, 0, 1).unwrap();
        assert!(e.instances.is_empty() && e.plans.is_empty());
        assert_eq!(
            synth_corpus(&spec, 30, 9).unwrap(),
            synth_corpus(&spec, 30, 9).unwrap()
        );
        assert_ne!(
            synth_corpus(&spec, 30, 9).unwrap(),
            synth_corpus(&spec, 30, 10).unwrap()
        );
    }

    #[test]
    fn instances_are_consistent_with_their_plans() {
        let spec = SynthSpec::default();
        let c = synth_corpus(&spec, 400, 3).unwrap();
        let (_, pv) = build_vocabs(&c.instances, 1).unwrap();
        let pats = SlotPatterns::parse(&c.patterns).unwrap();
        let mut sizes = [0usize; 4];
        for (i, (inst, plan)) in c.instances.iter().zip(&c.plans).enumerate() {
            inst.validate(i).unwrap();
            let facts = inst.facts.as_ref().unwrap();
            let plan = parse_plan(plan, &pv, 3).unwrap();
            assert_eq!(facts.len(), plan.len());
            assert_eq!(facts.join(" "), inst.text);
            plan.check_exact_cover(&pv.instance_ids(inst).unwrap(), 3)
                .unwrap();
            for g in &plan.groups {
                sizes[g.len()] += 1;
            }
            let r = pats.ser(&inst.text, &inst.triples).unwrap();
            assert_eq!(r.ser(), 0.0, "{}", inst.text);
            // each fact mentions exactly its group's objects
            for (f, g) in facts.iter().zip(&plan.groups) {
                let ts: Vec<&Triple> = inst
                    .triples
                    .iter()
                    .filter(|t| g.contains(&pv.id(&t.predicate).unwrap()))
                    .collect();
                assert_eq!(
                    pats.ser(f, &ts.into_iter().cloned().collect::<Vec<_>>())
                        .unwrap()
                        .ser(),
                    0.0
                );
            }
        }
        assert!(
            sizes[1] > sizes[2] && sizes[2] > sizes[3] && sizes[3] > 0,
            "{sizes:?}"
        );
        assert_eq!(pv.len(), 9);
    }

    #[test]
    fn written_files_load() {
        let c = synth_corpus(&SynthSpec::default(), 20, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b, p) = (
            dir.path().join("c.jsonl"),
            dir.path().join("p.txt"),
            dir.path().join("s.tsv"),
        );
        c.write(&a, &b, &p).unwrap();
        assert_eq!(load_corpus(&a).unwrap(), c.instances);
        assert_eq!(fs::read_to_string(&b).unwrap().lines().count(), 20);
        SlotPatterns::load(&p).unwrap();
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = SynthSpec::default();
        s.groups[0].template = "{1} and {2}".into();
        assert!(synth_corpus(&s, 1, 1).is_err());
        let mut s = SynthSpec::default();
        s.predicates[0].template = "is a place".into();
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.max_triples = 9;
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.groups.push(group(&["food", "owner"], "{1} and {2}"));
        assert!(s.validate().is_err());
    }

    #[test]
    fn partial_groups_still_merge() {
        let s = SynthSpec::default();
        // eat_type, food, area, owner
        let g = s.canonical_groups(&[7, 3, 1, 0]).unwrap();
        assert_eq!(
            g,
            vec![(vec![0, 1], None), (vec![3], None), (vec![7], None)]
        );
        let objects = vec![(0, "pub".to_string()), (1, "thai".to_string())];
        assert_eq!(
            realize(&s, &g[0], &objects).unwrap(),
            "is a pub type of place to eat and serves thai food"
        );
        let g = s.canonical_groups(&[2, 1, 0]).unwrap();
        assert_eq!(g, vec![(vec![0, 1, 2], Some(0))]);
    }
}
