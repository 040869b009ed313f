//! Planning and generation: predicate ordering, aggregation into groups,
//! plan-conditioned decoding, and fact-to-triple alignment.

use std::collections::{HashMap, HashSet};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{special, tokenize, Triple, START_PREDICATE};
use crate::emission::{beam_search, cross_attn_mask, CrossCache, SelfCache};
use crate::error::{Error, Result};
use crate::model::AggModel;
use crate::numeric::{ParamStore, Tensor};
use crate::plan::Plan;
use crate::training::{Prepared, PreparedInput, ScoredLattice};
use crate::transition::{to_local, LocalTables, MaskContext, StateCandidate, TransitionParams};

/// A full predicate order with its summed log transition score.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderingHypothesis {
    pub order: Vec<usize>,
    pub score: f64,
}

fn log_softmax_over(logits: &[f64], keep: &[usize]) -> Vec<(usize, f64)> {
    let max = keep
        .iter()
        .map(|&p| logits[p])
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + keep
            .iter()
            .map(|&p| (logits[p] - max).exp())
            .sum::<f64>()
            .ln();
    keep.iter().map(|&p| (p, logits[p] - lse)).collect()
}

/// Logit rows `A[from]·B` for the start marker and each instance predicate,
/// keyed by predicate id.
fn logit_rows(
    store: &ParamStore,
    a: crate::numeric::ParamId,
    b: crate::numeric::ParamId,
    ctx: &MaskContext,
) -> Result<HashMap<usize, Vec<f64>>> {
    let rows: Vec<usize> = std::iter::once(START_PREDICATE)
        .chain(ctx.predicates().iter().copied())
        .collect();
    let at = store.get(a);
    let mut data = Vec::with_capacity(rows.len() * at.cols());
    for &r in &rows {
        data.extend_from_slice(at.row(r));
    }
    let m = Tensor::matrix(rows.len(), at.cols(), data)?.matmul(store.get(b))?;
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, &r)| (r, m.row(i).to_vec()))
        .collect())
}

/// Beam search over within-state transitions from the start marker; each
/// emitted predicate is removed from the mask. Returns up to `k` complete
/// orderings, best first, ties broken by predicate ids.
pub fn order_predicates(
    store: &ParamStore,
    tr: &TransitionParams,
    ctx: &MaskContext,
    k: usize,
) -> Result<Vec<OrderingHypothesis>> {
    let k = k.max(1);
    let logits = logit_rows(store, tr.a_in, tr.b_in, ctx)?;
    let mut beam = vec![OrderingHypothesis {
        order: Vec::new(),
        score: 0.0,
    }];
    for _ in 0..ctx.len() {
        let mut next = Vec::new();
        for h in &beam {
            let from = h.order.last().copied().unwrap_or(START_PREDICATE);
            let remaining: Vec<usize> = ctx
                .predicates()
                .iter()
                .copied()
                .filter(|p| !h.order.contains(p))
                .collect();
            for (p, lp) in log_softmax_over(&logits[&from], &remaining) {
                let mut order = h.order.clone();
                order.push(p);
                next.push(OrderingHypothesis {
                    order,
                    score: h.score + lp,
                });
            }
        }
        next.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.order.cmp(&b.order))
        });
        next.truncate(k);
        beam = next;
    }
    Ok(beam)
}

/// How candidate groupings are ranked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AggregationScore {
    /// Cross-state links between consecutive groups only.
    #[default]
    Boundary,
    /// Boundary links plus within-group transitions.
    BoundaryAndWithin,
}

/// Every way of cutting `n` ordered items into contiguous groups of at most
/// `cap`, as group sizes.
pub fn compositions(n: usize, cap: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(left: usize, cap: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for s in 1..=cap.min(left) {
            cur.push(s);
            rec(left - s, cap, cur, out);
            cur.pop();
        }
    }
    rec(n, cap.max(1), &mut cur, &mut out);
    out
}

/// Top-`n` groupings of `ordering` with groups of at most `max_group_size`.
/// Ties prefer fewer groups, then the lexicographically smaller plan.
pub fn aggregate(
    store: &ParamStore,
    tr: &TransitionParams,
    ctx: &MaskContext,
    ordering: &[usize],
    n: usize,
    max_group_size: usize,
    scoring: AggregationScore,
) -> Result<Vec<(Plan, f64)>> {
    let tables = LocalTables::compute(store, tr, ctx)?;
    let local: Vec<usize> = to_local(&StateCandidate(ordering.to_vec()), ctx)?;
    let mut out = Vec::new();
    for sizes in compositions(ordering.len(), max_group_size) {
        let mut groups = Vec::with_capacity(sizes.len());
        let mut local_groups = Vec::with_capacity(sizes.len());
        let mut i = 0;
        for s in sizes {
            groups.push(ordering[i..i + s].to_vec());
            local_groups.push(&local[i..i + s]);
            i += s;
        }
        let mut score = 0.0;
        for w in local_groups.windows(2) {
            score += tables.link_log_prob(*w[0].last().unwrap(), w[1][0]);
        }
        if scoring == AggregationScore::BoundaryAndWithin {
            score += local_groups
                .iter()
                .map(|g| tables.state_log_prob(g))
                .sum::<f64>();
        }
        out.push((Plan::new(groups), score));
    }
    out.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(a.0.len().cmp(&b.0.len()))
            .then_with(|| a.0.cmp(&b.0))
    });
    out.truncate(n.max(1));
    Ok(out)
}

/// `log p(z | x)`: first state's probability (with its start link, if any), then for each following state
/// the cross-state link times its own probability.
pub fn plan_log_prob(
    store: &ParamStore,
    tr: &TransitionParams,
    ctx: &MaskContext,
    plan: &Plan,
) -> Result<f64> {
    let tables = LocalTables::compute(store, tr, ctx)?;
    plan_log_prob_with(&tables, ctx, plan)
}

fn plan_log_prob_with(tables: &LocalTables, ctx: &MaskContext, plan: &Plan) -> Result<f64> {
    let mut lp = 0.0;
    let mut prev_last = None;
    for g in &plan.groups {
        let local = to_local(&StateCandidate(g.clone()), ctx)?;
        lp += match prev_last {
            Some(l) => tables.link_log_prob(l, local[0]),
            None => tables.start[local[0]],
        };
        lp += tables.state_log_prob(&local);
        prev_last = local.last().copied();
    }
    Ok(lp)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    Full,
    /// Random predicate order instead of the learned ordering.
    NoOrdering,
    /// One fact per predicate.
    NoAggregation,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "no_ordering" | "no-ordering" => Ok(Mode::NoOrdering),
            "no_aggregation" | "no-aggregation" => Ok(Mode::NoAggregation),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GenerateConfig {
    /// Orderings kept by the ordering beam.
    pub k: usize,
    /// Groupings kept per ordering.
    pub n: usize,
    pub beam_width: usize,
    pub max_fact_len: usize,
    pub mode: Mode,
    /// Overrides the model's group size cap.
    pub max_group_size: Option<usize>,
    pub aggregation_score: AggregationScore,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            k: 3,
            n: 3,
            beam_width: 5,
            max_fact_len: 40,
            mode: Mode::Full,
            max_group_size: None,
            aggregation_score: AggregationScore::Boundary,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub text: String,
    pub facts: Vec<String>,
    pub plan: Plan,
    /// `log p(y | z, x)` of the decoded text.
    pub log_text: f64,
    /// `log p(z | x)`.
    pub log_plan: f64,
    pub log_joint: f64,
    pub candidates: usize,
}

/// Plan-conditioned decoder with memoized facts: a fact depends only on the
/// text decoded so far and the predicate set of its group.
struct PlanDecoder<'a> {
    model: &'a AggModel,
    input: &'a PreparedInput,
    cross: CrossCache,
    beam_width: usize,
    max_len: usize,
    memo: HashMap<(Vec<usize>, Vec<usize>), (Vec<usize>, f64)>,
}

impl<'a> PlanDecoder<'a> {
    fn new(
        model: &'a AggModel,
        input: &'a PreparedInput,
        beam_width: usize,
        max_len: usize,
    ) -> Result<Self> {
        Ok(PlanDecoder {
            cross: model.emission.cross_cache(&model.store, &input.lin)?,
            model,
            input,
            beam_width,
            max_len,
            memo: HashMap::new(),
        })
    }

    fn fact(&mut self, history: &[usize], group: &[usize]) -> Result<(Vec<usize>, f64)> {
        let mut set = group.to_vec();
        set.sort_unstable();
        let key = (history.to_vec(), set);
        if let Some(hit) = self.memo.get(&key) {
            return Ok(hit.clone());
        }
        let keep = cross_attn_mask(&self.input.lin, &self.input.triple_preds, &key.1);
        let out = self.model.emission.decode_fact(
            &self.model.store,
            history,
            &self.cross,
            &keep,
            self.beam_width,
            self.max_len,
        )?;
        self.memo.insert(key, out.clone());
        Ok(out)
    }

    /// Decodes facts group by group; returns fact texts and `log p(y | z, x)`.
    fn plan(&mut self, plan: &Plan) -> Result<(Vec<String>, f64)> {
        let mut history = Vec::new();
        let mut facts = Vec::with_capacity(plan.len());
        let mut total = 0.0;
        for g in &plan.groups {
            let (toks, lp) = self.fact(&history, g)?;
            total += lp;
            history.push(special::FACT_START);
            history.extend_from_slice(&toks);
            if toks.last() != Some(&special::FACT_END) {
                history.push(special::FACT_END);
            }
            facts.push(self.model.tokens.decode(&toks));
        }
        Ok((facts, total))
    }
}

fn join_facts(facts: &[String]) -> String {
    facts
        .iter()
        .filter(|f| !f.is_empty())
        .cloned()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Candidate plans for `mode`, deduplicated, in generation order.
pub fn candidate_plans(
    model: &AggModel,
    ctx: &MaskContext,
    cfg: &GenerateConfig,
) -> Result<Vec<Plan>> {
    let cap = cfg
        .max_group_size
        .unwrap_or(model.config.max_group_size)
        .max(1);
    let (store, tr) = (&model.store, &model.transition);
    let orderings: Vec<Vec<usize>> = match cfg.mode {
        Mode::NoOrdering => {
            let mut order = ctx.predicates().to_vec();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
            vec![order]
        }
        _ => order_predicates(store, tr, ctx, cfg.k)?
            .into_iter()
            .map(|h| h.order)
            .collect(),
    };
    let mut seen = HashSet::new();
    let mut plans = Vec::new();
    for o in orderings {
        let cands = match cfg.mode {
            Mode::NoAggregation => vec![Plan::singletons(&o)],
            _ => aggregate(store, tr, ctx, &o, cfg.n, cap, cfg.aggregation_score)?
                .into_iter()
                .map(|(p, _)| p)
                .collect(),
        };
        for p in cands {
            if seen.insert(p.clone()) {
                plans.push(p);
            }
        }
    }
    Ok(plans)
}

/// Generates text for `triples`, returning the candidate plan maximizing
/// `log p(y | z, x) + log p(z | x)`. Candidates are visited by decreasing
/// `log p(z | x)` (ties by plan), and since `log p(y | z, x) ≤ 0` the search
/// stops as soon as no remaining plan can beat the best joint score; the
/// result equals decoding every candidate.
pub fn generate(model: &AggModel, triples: &[Triple], cfg: &GenerateConfig) -> Result<Generation> {
    let input = model.prepare_input(triples)?;
    let plans = candidate_plans(model, &input.ctx, cfg)?;
    let tables = LocalTables::compute(&model.store, &model.transition, &input.ctx)?;
    let mut scored = plans
        .iter()
        .map(|p| Ok((plan_log_prob_with(&tables, &input.ctx, p)?, p)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let mut dec = PlanDecoder::new(model, &input, cfg.beam_width, cfg.max_fact_len)?;
    let mut best: Option<Generation> = None;
    for (log_plan, plan) in scored {
        if best.as_ref().is_some_and(|b| log_plan <= b.log_joint) {
            break;
        }
        let (facts, log_text) = dec.plan(plan)?;
        let log_joint = log_text + log_plan;
        if best.as_ref().map_or(true, |b| log_joint > b.log_joint) {
            best = Some(Generation {
                text: join_facts(&facts),
                facts,
                plan: plan.clone(),
                log_text,
                log_plan,
                log_joint,
                candidates: plans.len(),
            });
        }
    }
    best.ok_or_else(|| Error::Plan("no candidate plans".into()))
}

/// Candidate plans ranked by `log p(z | x)` without decoding text.
pub fn rank_plans(
    model: &AggModel,
    triples: &[Triple],
    cfg: &GenerateConfig,
) -> Result<Vec<(Plan, f64)>> {
    let input = model.prepare_input(triples)?;
    let tables = LocalTables::compute(&model.store, &model.transition, &input.ctx)?;
    let mut out = candidate_plans(model, &input.ctx, cfg)?
        .into_iter()
        .map(|p| {
            let lp = plan_log_prob_with(&tables, &input.ctx, &p)?;
            Ok((p, lp))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Decodes facts in the order and grouping of a given plan.
pub fn generate_with_plan(
    model: &AggModel,
    triples: &[Triple],
    plan: &Plan,
    beam_width: usize,
    max_fact_len: usize,
    max_group_size: usize,
) -> Result<Generation> {
    let input = model.prepare_input(triples)?;
    plan.check_exact_cover(input.ctx.predicates(), max_group_size)?;
    let mut dec = PlanDecoder::new(model, &input, beam_width, max_fact_len)?;
    let (facts, log_text) = dec.plan(plan)?;
    let log_plan = plan_log_prob(&model.store, &model.transition, &input.ctx, plan)?;
    Ok(Generation {
        text: join_facts(&facts),
        facts,
        plan: plan.clone(),
        log_text,
        log_plan,
        log_joint: log_text + log_plan,
        candidates: 1,
    })
}

/// Unplanned generation with the pretrained sequence-to-sequence model:
/// all triples visible, decoding until `[SEP]`.
pub fn generate_baseline(
    model: &AggModel,
    triples: &[Triple],
    beam_width: usize,
    max_len: usize,
) -> Result<(String, f64)> {
    let input = model.prepare_input(triples)?;
    let em = &model.emission;
    let cross = em.cross_cache(&model.store, &input.lin)?;
    let keep = vec![true; input.lin.len()];
    let (cache, next) = em.extend(
        &model.store,
        &SelfCache::default(),
        &[special::FACT_START],
        &cross,
        &keep,
    )?;
    let allowed = |t: usize| !matches!(t, special::PAD | special::CLS);
    let (toks, lp) = beam_search(
        beam_width.max(1),
        max_len.max(1),
        cache,
        next,
        allowed,
        special::SEP,
        |c, t| em.extend(&model.store, c, &[t], &cross, &keep),
    )?;
    Ok((model.tokens.decode(&toks), lp))
}

/// Predicate set per fact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub sets: Vec<Vec<usize>>,
}

/// Most likely state sequence over the unpruned state space. Returns the
/// per-fact predicate sets, the ordered states, and the path log score.
pub fn viterbi_align(
    store: &ParamStore,
    model: &AggModel,
    p: &Prepared,
    max_group_size: usize,
) -> Result<(Alignment, Vec<StateCandidate>, f64)> {
    let sl = ScoredLattice::compute(
        store,
        &model.emission,
        &model.transition,
        p,
        None,
        max_group_size,
    )?;
    let ctx = &p.input.ctx;
    let ns = sl.lattice.states.len();
    let t_len = sl.facts();
    let own: Vec<f64> = (0..ns).map(|s| sl.state_score(ctx, s)).collect();
    let mut delta: Vec<f64> = (0..ns)
        .map(|s| sl.open_score(s) + own[s] + sl.emission(s, 0))
        .collect();
    let mut back = vec![vec![0usize; ns]; t_len];
    for (t, bt) in back.iter_mut().enumerate().skip(1) {
        let mut next = vec![f64::NEG_INFINITY; ns];
        for s in 0..ns {
            let (mut arg, mut best) = (0, f64::NEG_INFINITY);
            for (sp, &d) in delta.iter().enumerate() {
                let v = d + sl.link_score(ctx, sp, s);
                if v > best {
                    best = v;
                    arg = sp;
                }
            }
            next[s] = best + own[s] + sl.emission(s, t);
            bt[s] = arg;
        }
        delta = next;
    }
    let (mut s, mut score) = (0, f64::NEG_INFINITY);
    for (i, &d) in delta.iter().enumerate() {
        if d > score {
            score = d;
            s = i;
        }
    }
    let mut path = vec![0; t_len];
    for t in (0..t_len).rev() {
        path[t] = s;
        s = back[t][s];
    }
    let states: Vec<StateCandidate> = path.iter().map(|&s| sl.lattice.states[s].clone()).collect();
    let sets = states.iter().map(|s| s.sorted_set()).collect();
    Ok((Alignment { sets }, states, score))
}

/// Aligns each triple to the fact sharing the most predicate and object
/// tokens; ties, including zero overlap, go to the earlier fact.
pub fn rule_align(triples: &[Triple], triple_preds: &[usize], facts: &[String]) -> Alignment {
    let fact_toks: Vec<HashSet<String>> = facts
        .iter()
        .map(|f| tokenize(f).into_iter().collect())
        .collect();
    let mut sets = vec![Vec::new(); facts.len()];
    if facts.is_empty() {
        return Alignment { sets };
    }
    for (t, &p) in triples.iter().zip(triple_preds) {
        let toks: HashSet<String> = t.predicate_object_tokens().into_iter().collect();
        let mut best = (0, 0usize);
        for (f, ft) in fact_toks.iter().enumerate() {
            let overlap = toks.intersection(ft).count();
            if overlap > best.1 {
                best = (f, overlap);
            }
        }
        sets[best.0].push(p);
    }
    sets.iter_mut().for_each(|s| s.sort_unstable());
    Alignment { sets }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocabs, Instance};
    use crate::model::ModelConfig;
    use crate::plan::parse_plan;
    use crate::segment::SegmenterConfig;
    use crate::training::backward_marginal;
    use crate::transition::{state_prob, transition_row, TransitionSet};
    use proptest::prelude::*;

    fn permutations(xs: &[usize]) -> Vec<Vec<usize>> {
        if xs.len() <= 1 {
            return vec![xs.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..xs.len() {
            let mut rest = xs.to_vec();
            let x = rest.remove(i);
            for mut p in permutations(&rest) {
                p.insert(0, x);
                out.push(p);
            }
        }
        out
    }

    fn corpus() -> Vec<Instance> {
        let t = |p: &str, o: &str| Triple::new("aromi", p, o).unwrap();
        vec![Instance {
            triples: vec![t("eatType", "pub"), t("near", "cafe sicilia"), t("customer rating", "high"), t("food", "thai")],
            text: "aromi is a pub . it is near cafe sicilia and has a high customer rating . it serves thai food .".into(),
            facts: None,
        }]
    }

    fn model(seed: u64) -> AggModel {
        let (tv, pv) = build_vocabs(&corpus(), 1).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            d_ff: 16,
            init_std: 0.5,
            transition_dim: 4,
            transition_init_std: 1.0,
            max_target_positions: 64,
            ..ModelConfig::default()
        };
        AggModel::new(tv, pv, cfg, seed).unwrap()
    }

    #[test]
    fn orderings_match_exhaustive_ranking() {
        let m = model(1);
        for n in 1..=4 {
            let input = m.prepare_input(&corpus()[0].triples[..n]).unwrap();
            let ctx = &input.ctx;
            let got = order_predicates(&m.store, &m.transition, ctx, 24).unwrap();
            // oracle: chain of rows with removed predicates, via masked rows
            let mut want: Vec<(Vec<usize>, f64)> = permutations(ctx.predicates())
                .into_iter()
                .map(|perm| {
                    let mut c = ctx.clone();
                    let mut prev = START_PREDICATE;
                    let mut lp = 0.0;
                    for &p in &perm {
                        let mut full = c.clone();
                        if prev != START_PREDICATE {
                            // `prev` is already removed; score its row over what is left
                            full = MaskContext::new(&[c.predicates(), &[prev]].concat()).unwrap();
                            let row = transition_row(
                                &m.store,
                                &m.transition,
                                TransitionSet::Within,
                                prev,
                                &full,
                            )
                            .unwrap();
                            let z: f64 = c.predicates().iter().map(|&q| row[q]).sum();
                            lp += (row[p] / z).ln();
                        } else {
                            let row = transition_row(
                                &m.store,
                                &m.transition,
                                TransitionSet::Within,
                                prev,
                                &full,
                            )
                            .unwrap();
                            lp += row[p].ln();
                        }
                        c = c.without(p);
                        prev = p;
                    }
                    (perm, lp)
                })
                .collect();
            want.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.order, w.0);
                assert!((g.score - w.1).abs() < 1e-10);
            }
            if n == 1 {
                assert_eq!(got[0].score, 0.0);
            }
        }
    }

    #[test]
    fn composition_counts() {
        let counts: Vec<usize> = (1..=7).map(|n| compositions(n, 3).len()).collect();
        assert_eq!(counts, vec![1, 2, 4, 7, 13, 24, 44]);
        assert_eq!(compositions(4, 4).len(), 8);
    }

    #[test]
    fn aggregation_scores_boundaries() {
        let m = model(2);
        let input = m.prepare_input(&corpus()[0].triples[..3]).unwrap();
        let ctx = &input.ctx;
        let order = vec![
            ctx.predicates()[2],
            ctx.predicates()[0],
            ctx.predicates()[1],
        ];
        let plans = aggregate(
            &m.store,
            &m.transition,
            ctx,
            &order,
            10,
            3,
            AggregationScore::Boundary,
        )
        .unwrap();
        assert_eq!(plans.len(), 4);
        let out = |a: usize, b: usize| {
            transition_row(&m.store, &m.transition, TransitionSet::Across, a, ctx).unwrap()[b].ln()
        };
        for (p, s) in &plans {
            assert_eq!(p.predicates().collect::<Vec<_>>(), order);
            let want: f64 = p
                .groups
                .windows(2)
                .map(|w| out(*w[0].last().unwrap(), w[1][0]))
                .sum();
            assert!((s - want).abs() < 1e-12);
        }
        let single = plans.iter().find(|(p, _)| p.len() == 1).unwrap();
        assert_eq!(single.1, 0.0);
        let one = aggregate(
            &m.store,
            &m.transition,
            ctx,
            &order[..1],
            3,
            3,
            AggregationScore::Boundary,
        );
        assert!(one.is_err() || one.unwrap()[0].1 == 0.0);
    }

    #[test]
    fn plan_probability_factorizes() {
        let m = model(3);
        let input = m.prepare_input(&corpus()[0].triples[..3]).unwrap();
        let ctx = &input.ctx;
        let ps = ctx.predicates();
        let plan = Plan::new(vec![vec![ps[1]], vec![ps[2], ps[0]]]);
        let a = StateCandidate(vec![ps[1]]);
        let b = StateCandidate(vec![ps[2], ps[0]]);
        let want = state_prob(&m.store, &m.transition, &a, ctx).unwrap()
            * crate::transition::state_transition_prob(&m.store, &m.transition, &a, &b, ctx)
                .unwrap();
        let got = plan_log_prob(&m.store, &m.transition, ctx, &plan).unwrap();
        assert!((got - want.ln()).abs() < 1e-12);

        let tr = m.transition.with_start_link(true);
        let want = crate::transition::initial_state_prob(&m.store, &tr, &a, ctx).unwrap()
            * crate::transition::state_transition_prob(&m.store, &tr, &a, &b, ctx).unwrap();
        let got = plan_log_prob(&m.store, &tr, ctx, &plan).unwrap();
        assert!((got - want.ln()).abs() < 1e-12);
    }

    #[test]
    fn generation_modes() {
        let m = model(4);
        let triples = &corpus()[0].triples;
        let cfg = GenerateConfig {
            beam_width: 2,
            max_fact_len: 4,
            ..GenerateConfig::default()
        };
        let g = generate(&m, &triples[..1], &cfg).unwrap();
        assert_eq!(g.plan.groups.len(), 1);
        for mode in [Mode::NoOrdering, Mode::NoAggregation] {
            let g2 = generate(
                &m,
                &triples[..1],
                &GenerateConfig {
                    mode,
                    ..cfg.clone()
                },
            )
            .unwrap();
            assert_eq!(g2.plan, g.plan);
        }
        let na = generate(
            &m,
            triples,
            &GenerateConfig {
                mode: Mode::NoAggregation,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(na.facts.len(), 4);
        assert!(na.plan.groups.iter().all(|g| g.len() == 1));
        let capped = generate(
            &m,
            triples,
            &GenerateConfig {
                max_group_size: Some(1),
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(capped.plan.len(), 4);
        let a = generate(&m, triples, &cfg).unwrap();
        let b = generate(&m, triples, &cfg).unwrap();
        assert_eq!(a, b);
        a.plan
            .check_exact_cover(&m.prepare_input(triples).unwrap().triple_preds, 3)
            .unwrap();
    }

    #[test]
    fn generate_is_the_joint_argmax_over_all_plans() {
        let m = model(5);
        let triples = &corpus()[0].triples[..3];
        let input = m.prepare_input(triples).unwrap();
        let cfg = GenerateConfig {
            k: 6,
            n: 4,
            beam_width: 1,
            max_fact_len: 3,
            ..GenerateConfig::default()
        };
        let got = generate(&m, triples, &cfg).unwrap();
        assert_eq!(got.candidates, 6 * 4);
        let mut best: Option<(f64, Plan)> = None;
        for perm in permutations(input.ctx.predicates()) {
            for sizes in compositions(3, 3) {
                let mut groups = Vec::new();
                let mut i = 0;
                for s in sizes {
                    groups.push(perm[i..i + s].to_vec());
                    i += s;
                }
                let plan = Plan::new(groups);
                let g = generate_with_plan(&m, triples, &plan, 1, 3, 3).unwrap();
                if best.as_ref().map_or(true, |b| g.log_joint > b.0) {
                    best = Some((g.log_joint, plan));
                }
            }
        }
        let (score, plan) = best.unwrap();
        assert!((got.log_joint - score).abs() < 1e-10);
        assert_eq!(got.plan, plan);
    }

    #[test]
    fn plan_control() {
        let m = model(6);
        let triples = &corpus()[0].triples[..3];
        let plan = parse_plan("[eatType][near customer-rating]", &m.predicates, 3).unwrap();
        let g = generate_with_plan(&m, triples, &plan, 2, 4, 3).unwrap();
        assert_eq!(g.facts.len(), 2);
        assert_eq!(g, generate_with_plan(&m, triples, &plan, 2, 4, 3).unwrap());
        // the first fact only sees the eatType triple
        let mut other = triples.to_vec();
        other[1].object = "somewhere else".into();
        other[2].object = "low".into();
        let g2 = generate_with_plan(&m, &other, &plan, 2, 4, 3).unwrap();
        assert_eq!(g.facts[0], g2.facts[0]);
        let partial = parse_plan("[eatType][near]", &m.predicates, 3).unwrap();
        assert!(generate_with_plan(&m, triples, &partial, 2, 4, 3).is_err());
        let big = parse_plan("[eatType near customer_rating]", &m.predicates, 3).unwrap();
        assert!(generate_with_plan(&m, triples, &big, 2, 4, 2).is_err());
    }

    #[test]
    fn baseline_generation_runs() {
        let m = model(7);
        let (text, lp) = generate_baseline(&m, &corpus()[0].triples, 2, 6).unwrap();
        assert!(lp <= 0.0);
        assert!(text.split_whitespace().count() <= 6);
    }

    #[test]
    fn viterbi_is_the_best_path_and_below_the_marginal() {
        let m = model(8);
        let inst = Instance {
            triples: corpus()[0].triples[..3].to_vec(),
            text: "aromi is a pub . near cafe sicilia with high customer rating .".into(),
            facts: None,
        };
        let p = m.prepare(&inst, 0, &SegmenterConfig::default()).unwrap();
        let (al, states, score) = viterbi_align(&m.store, &m, &p, 3).unwrap();
        assert_eq!(al.sets.len(), 2);
        let z = backward_marginal(&m.store, &m.emission, &m.transition, &p, None, 3).unwrap();
        assert!(score <= z);
        // brute-force best path
        let sl = ScoredLattice::compute(&m.store, &m.emission, &m.transition, &p, None, 3).unwrap();
        let ctx = &p.input.ctx;
        let ns = sl.lattice.states.len();
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for a in 0..ns {
            for b in 0..ns {
                let v = sl.state_score(ctx, a)
                    + sl.emission(a, 0)
                    + sl.link_score(ctx, a, b)
                    + sl.state_score(ctx, b)
                    + sl.emission(b, 1);
                if v > best.0 {
                    best = (v, (a, b));
                }
            }
        }
        assert!((best.0 - score).abs() < 1e-10);
        assert_eq!(states[0], sl.lattice.states[best.1 .0]);
        assert_eq!(states[1], sl.lattice.states[best.1 .1]);

        let single = Instance {
            triples: corpus()[0].triples[..1].to_vec(),
            text: "aromi is a pub .".into(),
            facts: None,
        };
        let p = m.prepare(&single, 0, &SegmenterConfig::default()).unwrap();
        let (al, _, _) = viterbi_align(&m.store, &m, &p, 3).unwrap();
        assert_eq!(al.sets, vec![p.input.triple_preds.clone()]);
    }

    #[test]
    fn rule_alignment() {
        let t = |p: &str, o: &str| Triple::new("x", p, o).unwrap();
        let triples = vec![t("food", "thai"), t("area", "riverside")];
        let facts = vec!["it is in riverside".to_string(), "serves thai".to_string()];
        assert_eq!(
            rule_align(&triples, &[1, 2], &facts).sets,
            vec![vec![2], vec![1]]
        );
        let none = vec!["hello".to_string(), "world".to_string()];
        assert_eq!(
            rule_align(&triples, &[1, 2], &none).sets,
            vec![vec![1, 2], vec![]]
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn orderings_are_permutations_and_plans_are_contiguous(
            ids in proptest::sample::subsequence((1..=9usize).collect::<Vec<_>>(), 1..=6),
            seed in 0u64..50,
            k in 1usize..4,
            cap in 1usize..4,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let tr = TransitionParams::init(&mut store, 10, 3, 1.0, &mut rng).unwrap();
            let ctx = MaskContext::new(&ids).unwrap();
            for h in order_predicates(&store, &tr, &ctx, k).unwrap() {
                let mut o = h.order.clone();
                o.sort_unstable();
                prop_assert_eq!(&o, &ids);
                for (plan, _) in aggregate(&store, &tr, &ctx, &h.order, 50, cap, AggregationScore::Boundary).unwrap() {
                    prop_assert!(plan.groups.iter().all(|g| !g.is_empty() && g.len() <= cap));
                    prop_assert_eq!(plan.predicates().collect::<Vec<_>>(), h.order.clone());
                }
            }
        }
    }
}
