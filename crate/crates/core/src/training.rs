//! Baseline pretraining, hard alignment, the exact marginal likelihood over
//! state sequences, and the optimization loop.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    linearize_input, special, tokenize, Instance, LinearizedInput, PredicateVocab, TokenVocab,
    Triple, START_PREDICATE,
};
use crate::emission::{cross_attn_mask, EmissionModel};
use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, Adam, Grads, Graph, ParamStore, Var};
use crate::segment::{facts_for, wrap_facts, FactSequence, SegmenterConfig};
use crate::transition::{
    enumerate_states, initial_state_prob, state_transition_prob, GraphTables, MaskContext,
    StateCandidate, TransitionParams, PARAM_PREFIX,
};

/// Encoder-side view of an instance.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    pub lin: LinearizedInput,
    /// Predicate id of each triple, in input order.
    pub triple_preds: Vec<usize>,
    pub ctx: MaskContext,
}

pub fn prepare_input(
    triples: &[Triple],
    tokens: &TokenVocab,
    preds: &PredicateVocab,
) -> Result<PreparedInput> {
    if triples.is_empty() {
        return Err(Error::InvalidTriple("instance without triples".into()));
    }
    let triple_preds = triples
        .iter()
        .map(|t| {
            preds
                .id(&t.predicate)
                .filter(|&p| p != crate::data::START_PREDICATE)
                .ok_or_else(|| Error::Plan(format!("unknown predicate `{}`", t.predicate)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedInput {
        lin: linearize_input(triples, tokens),
        ctx: MaskContext::new(&triple_preds)?,
        triple_preds,
    })
}

/// Per-fact predicate sets that every candidate state must contain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardAlignment {
    pub forced: Vec<Vec<usize>>,
}

impl HardAlignment {
    pub fn none(facts: usize) -> Self {
        HardAlignment {
            forced: vec![Vec::new(); facts],
        }
    }

    pub fn num_forced(&self) -> usize {
        self.forced.iter().map(Vec::len).sum()
    }
}

/// Forces a triple's predicate into the fact whose tokens cover strictly more
/// than half of the triple's predicate and object tokens (ties go to the
/// earlier fact). If a fact attracts more than `max_group_size` predicates,
/// only the best-covered ones are kept.
pub fn hard_align(
    triples: &[Triple],
    triple_preds: &[usize],
    facts: &[String],
    max_group_size: usize,
) -> HardAlignment {
    let fact_toks: Vec<HashSet<String>> = facts
        .iter()
        .map(|f| tokenize(f).into_iter().collect())
        .collect();
    let mut per_fact: Vec<Vec<(f64, usize, usize)>> = vec![Vec::new(); facts.len()];
    for (j, t) in triples.iter().enumerate() {
        let toks: HashSet<String> = t.predicate_object_tokens().into_iter().collect();
        if toks.is_empty() {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for (f, ft) in fact_toks.iter().enumerate() {
            let cov = toks.intersection(ft).count() as f64 / toks.len() as f64;
            if best.map_or(true, |(b, _)| cov > b) {
                best = Some((cov, f));
            }
        }
        if let Some((cov, f)) = best {
            if cov > 0.5 {
                per_fact[f].push((cov, j, triple_preds[j]));
            }
        }
    }
    let forced = per_fact
        .into_iter()
        .map(|mut v| {
            v.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            v.truncate(max_group_size);
            let mut ps: Vec<usize> = v.into_iter().map(|x| x.2).collect();
            ps.sort_unstable();
            ps
        })
        .collect();
    HardAlignment { forced }
}

/// An instance ready for training: encoder input, fact targets, and hard
/// alignment.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: usize,
    pub input: PreparedInput,
    pub facts: FactSequence,
    pub fact_texts: Vec<String>,
    pub hard: HardAlignment,
}

pub fn prepare(
    inst: &Instance,
    id: usize,
    tokens: &TokenVocab,
    preds: &PredicateVocab,
    seg: &SegmenterConfig,
    max_group_size: usize,
) -> Result<Prepared> {
    inst.validate(id)?;
    let input = prepare_input(&inst.triples, tokens, preds)?;
    let fact_texts = facts_for(inst, seg);
    let facts = wrap_facts(&fact_texts, tokens)?;
    let hard = hard_align(
        &inst.triples,
        &input.triple_preds,
        &fact_texts,
        max_group_size,
    );
    Ok(Prepared {
        id,
        input,
        facts,
        fact_texts,
        hard,
    })
}

pub fn prepare_corpus(
    corpus: &[Instance],
    tokens: &TokenVocab,
    preds: &PredicateVocab,
    seg: &SegmenterConfig,
    max_group_size: usize,
) -> Result<Vec<Prepared>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, inst)| prepare(inst, i, tokens, preds, seg, max_group_size))
        .collect()
}

/// Baseline target: all facts back to back, closed by `[SEP]`.
pub fn baseline_target(facts: &FactSequence) -> Vec<usize> {
    let (mut ids, _) = facts.flatten();
    ids.push(special::SEP);
    ids
}

/// Summed token negative log-likelihood of the baseline target with
/// unmasked cross-attention, and the number of scored tokens.
pub fn baseline_nll_graph(g: &mut Graph, em: &EmissionModel, p: &Prepared) -> Result<(Var, usize)> {
    let enc = em.encode_graph(g, &p.input.lin)?;
    let cross = em.cross_kv_graph(g, enc)?;
    let keep = vec![true; p.input.lin.len()];
    let target = baseline_target(&p.facts);
    let n = target.len() - 1;
    let (lp, _) = em.decode_graph(g, &target[..n], 0, &[], &cross, &keep)?;
    let v = em.cfg.vocab_size;
    let idx: Vec<usize> = (0..n).map(|i| i * v + target[i + 1]).collect();
    let picked = g.pick(lp, &idx)?;
    let s = g.sum(picked);
    Ok((g.scale(s, -1.0), n))
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            lr: 1e-3,
            batch_size: 8,
            clip_norm: Some(5.0),
            seed: 1,
        }
    }
}

/// Trains the encoder-decoder as a plain sequence-to-sequence model on full
/// texts. Returns the mean per-token loss of every epoch.
pub fn pretrain_baseline(
    store: &mut ParamStore,
    em: &EmissionModel,
    data: &[Prepared],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(store);
    adam.clip_norm = cfg.clip_norm;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        let mut grads = Grads::zeros_like(store);
        let mut in_batch = 0;
        for (k, &i) in order.iter().enumerate() {
            let p = &data[i];
            let mut g = Graph::new(store);
            let (nll, n) = baseline_nll_graph(&mut g, em, p)?;
            let loss = g.value(nll).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "baseline loss on instance {}",
                    p.id
                )));
            }
            total += loss;
            count += n;
            g.backward_scaled(nll, 1.0 / n as f64, &mut grads)?;
            drop(g);
            in_batch += 1;
            if in_batch == cfg.batch_size.max(1) || k + 1 == order.len() {
                grads.scale(1.0 / in_batch as f64);
                if !grads.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "baseline gradient near instance {}",
                        p.id
                    )));
                }
                adam.step(store, &grads, |_| cfg.lr);
                grads.zero();
                in_batch = 0;
            }
        }
        let mean = total / count as f64;
        log::info!("pretrain epoch {}: loss/token {:.4}", epoch + 1, mean);
        history.push(mean);
    }
    Ok(history)
}

/// Candidate states per fact and the distinct predicate sets they emit from.
#[derive(Clone, Debug)]
pub struct Lattice {
    pub states: Vec<StateCandidate>,
    /// Allowed state indices at each fact.
    pub allowed: Vec<Vec<usize>>,
    /// Sorted predicate sets; `set_of[s]` indexes into this.
    pub sets: Vec<Vec<usize>>,
    pub set_of: Vec<usize>,
}

impl Lattice {
    /// States of 1..=`max_group_size` predicates. At fact `t` only states
    /// containing every predicate of `hard.forced[t]` are kept, and of those,
    /// states using a predicate forced into another fact are dropped unless
    /// nothing else is left.
    pub fn build(
        ctx: &MaskContext,
        facts: usize,
        hard: Option<&HardAlignment>,
        max_group_size: usize,
    ) -> Result<Self> {
        let all = enumerate_states(ctx, max_group_size);
        let mut allowed = Vec::with_capacity(facts);
        for t in 0..facts {
            let forced: &[usize] = hard.and_then(|h| h.forced.get(t)).map_or(&[], |v| v);
            let elsewhere: Vec<usize> = hard.map_or(Vec::new(), |h| {
                h.forced
                    .iter()
                    .enumerate()
                    .filter(|&(u, _)| u != t)
                    .flat_map(|(_, v)| v.iter().copied())
                    .filter(|p| !forced.contains(p))
                    .collect()
            });
            let mut ok: Vec<usize> = (0..all.len())
                .filter(|&s| forced.iter().all(|p| all[s].0.contains(p)))
                .collect();
            let exclusive: Vec<usize> = ok
                .iter()
                .copied()
                .filter(|&s| !all[s].0.iter().any(|p| elsewhere.contains(p)))
                .collect();
            if !exclusive.is_empty() {
                ok = exclusive;
            }
            if ok.is_empty() {
                return Err(Error::NoCandidates { t });
            }
            allowed.push(ok);
        }
        // keep only states used somewhere
        let used: Vec<bool> = {
            let mut u = vec![false; all.len()];
            allowed.iter().flatten().for_each(|&s| u[s] = true);
            u
        };
        let mut remap = vec![usize::MAX; all.len()];
        let mut states = Vec::new();
        for (s, st) in all.into_iter().enumerate() {
            if used[s] {
                remap[s] = states.len();
                states.push(st);
            }
        }
        for a in &mut allowed {
            a.iter_mut().for_each(|s| *s = remap[*s]);
        }
        let mut index: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        let mut sets = Vec::new();
        let set_of = states
            .iter()
            .map(|st| {
                let key = st.sorted_set();
                *index.entry(key.clone()).or_insert_with(|| {
                    sets.push(key);
                    sets.len() - 1
                })
            })
            .collect();
        Ok(Lattice {
            states,
            allowed,
            sets,
            set_of,
        })
    }
}

/// Log-domain tables feeding the dynamic program.
struct DpInput<'a> {
    within: &'a [f64],
    across: &'a [f64],
    /// `[sets × T]` per-fact emission log-probabilities.
    emissions: &'a [f64],
    k: usize,
    state_end: bool,
    start_link: bool,
}

struct DpOutput {
    log_z: f64,
    beta: Vec<Vec<f64>>,
    d_within: Vec<f64>,
    d_across: Vec<f64>,
    d_emissions: Vec<f64>,
}

fn row_of(ctx: &MaskContext, p: usize) -> usize {
    ctx.local(p).expect("state predicate in context") + 1
}

/// Forward and backward recursions over the lattice, with posterior
/// expectations as the gradient of `log Z` with respect to each input table.
fn run_dp(lat: &Lattice, ctx: &MaskContext, inp: &DpInput, t_len: usize) -> Result<DpOutput> {
    let k = inp.k;
    let n = ctx.len();
    let ns = lat.states.len();
    // within-chain log-prob and first/last rows per state
    let within_entries: Vec<Vec<usize>> = lat
        .states
        .iter()
        .map(|st| {
            let mut prev = 0;
            let mut e: Vec<usize> =
                st.0.iter()
                    .map(|&p| {
                        let idx = prev * k + p;
                        prev = row_of(ctx, p);
                        idx
                    })
                    .collect();
            if inp.state_end {
                e.push(prev * k + START_PREDICATE);
            }
            e
        })
        .collect();
    let lw: Vec<f64> = within_entries
        .iter()
        .map(|e| e.iter().map(|&i| inp.within[i]).sum())
        .collect();
    let last_row: Vec<usize> = lat.states.iter().map(|s| row_of(ctx, s.last())).collect();
    let first: Vec<usize> = lat.states.iter().map(|s| s.first()).collect();
    let em = |s: usize, t: usize| inp.emissions[lat.set_of[s] * t_len + t];
    let across = |r: usize, p: usize| inp.across[r * k + p];
    let ninf = f64::NEG_INFINITY;

    // local score of entering state s at fact t, excluding the link
    let enter = |s: usize, t: usize| lw[s] + em(s, t);
    let open = |s: usize| {
        if inp.start_link {
            across(0, first[s])
        } else {
            0.0
        }
    };

    // alpha
    let mut alpha = vec![vec![ninf; ns]; t_len];
    for &s in &lat.allowed[0] {
        alpha[0][s] = open(s) + enter(s, 0);
    }
    for t in 1..t_len {
        // lse of alpha over states grouped by their last row
        let mut by_last: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
        for &s in &lat.allowed[t - 1] {
            by_last[last_row[s]].push(alpha[t - 1][s]);
        }
        let a_last: Vec<f64> = by_last.iter().map(|v| log_sum_exp(v)).collect();
        for &s in &lat.allowed[t] {
            let terms: Vec<f64> = (1..=n).map(|r| a_last[r] + across(r, first[s])).collect();
            alpha[t][s] = log_sum_exp(&terms) + enter(s, t);
        }
    }

    // beta; g_next[f] = lse over states s at t+1 with first(s) = f of enter + beta
    let mut beta = vec![vec![ninf; ns]; t_len];
    for &s in &lat.allowed[t_len - 1] {
        beta[t_len - 1][s] = 0.0;
    }
    let mut g_first: Vec<Vec<f64>> = vec![vec![ninf; k]; t_len];
    for t in (0..t_len).rev() {
        if t + 1 < t_len {
            for &s in &lat.allowed[t] {
                let terms: Vec<f64> = ctx
                    .predicates()
                    .iter()
                    .map(|&f| across(last_row[s], f) + g_first[t + 1][f])
                    .collect();
                beta[t][s] = log_sum_exp(&terms);
            }
        }
        let mut groups: Vec<Vec<f64>> = vec![Vec::new(); k];
        for &s in &lat.allowed[t] {
            groups[first[s]].push(enter(s, t) + beta[t][s]);
        }
        for f in ctx.predicates() {
            g_first[t][*f] = log_sum_exp(&groups[*f]);
        }
    }
    let z_terms: Vec<f64> = lat.allowed[0]
        .iter()
        .map(|&s| open(s) + enter(s, 0) + beta[0][s])
        .collect();
    let log_z = log_sum_exp(&z_terms);
    if !log_z.is_finite() {
        return Err(Error::NonFinite(format!("log marginal {log_z}")));
    }

    let mut d_within = vec![0.0; inp.within.len()];
    let mut d_across = vec![0.0; inp.across.len()];
    let mut d_emissions = vec![0.0; inp.emissions.len()];
    for t in 0..t_len {
        for &s in &lat.allowed[t] {
            let gamma = (alpha[t][s] + beta[t][s] - log_z).exp();
            if gamma == 0.0 {
                continue;
            }
            d_emissions[lat.set_of[s] * t_len + t] += gamma;
            if t == 0 && inp.start_link {
                d_across[first[s]] += gamma;
            }
            for &i in &within_entries[s] {
                d_within[i] += gamma;
            }
        }
        if t > 0 {
            let mut by_last: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
            for &s in &lat.allowed[t - 1] {
                by_last[last_row[s]].push(alpha[t - 1][s]);
            }
            for (r, v) in by_last.iter().enumerate().skip(1) {
                let a = log_sum_exp(v);
                if a == ninf {
                    continue;
                }
                for &f in ctx.predicates() {
                    let xi = (a + across(r, f) + g_first[t][f] - log_z).exp();
                    d_across[r * k + f] += xi;
                }
            }
        }
    }
    Ok(DpOutput {
        log_z,
        beta,
        d_within,
        d_across,
        d_emissions,
    })
}

/// Builds `log p(y | x)` for one instance as a graph node.
pub fn marginal_graph(
    g: &mut Graph,
    em: &EmissionModel,
    tr: &TransitionParams,
    p: &Prepared,
    hard: Option<&HardAlignment>,
    max_group_size: usize,
) -> Result<Var> {
    let ctx = &p.input.ctx;
    let t_len = p.facts.len();
    let lat = Lattice::build(ctx, t_len, hard, max_group_size)?;
    let tables = GraphTables::build(g, tr, ctx)?;
    let enc = em.encode_graph(g, &p.input.lin)?;
    let cross = em.cross_kv_graph(g, enc)?;
    let mut rows = Vec::with_capacity(lat.sets.len());
    for set in &lat.sets {
        let keep = cross_attn_mask(&p.input.lin, &p.input.triple_preds, set);
        rows.push(em.fact_scores_graph(g, &cross, &keep, &p.facts)?);
    }
    let emissions = g.concat_rows(&rows)?;
    let out = run_dp(
        &lat,
        ctx,
        &DpInput {
            within: g.value(tables.within).data(),
            across: g.value(tables.across).data(),
            emissions: g.value(emissions).data(),
            k: tr.num_predicates,
            state_end: tr.state_end,
            start_link: tr.start_link,
        },
        t_len,
    )?;
    g.custom_scalar(
        out.log_z,
        &[tables.within, tables.across, emissions],
        vec![out.d_within, out.d_across, out.d_emissions],
    )
}

/// Exact `log p(y | x)` by the backward recursion; `hard` prunes states.
pub fn backward_marginal(
    store: &ParamStore,
    em: &EmissionModel,
    tr: &TransitionParams,
    p: &Prepared,
    hard: Option<&HardAlignment>,
    max_group_size: usize,
) -> Result<f64> {
    Ok(backward_table(store, em, tr, p, hard, max_group_size)?.0)
}

/// Lattice with every score the recursions need, as plain numbers.
#[derive(Clone, Debug)]
pub struct ScoredLattice {
    pub lattice: Lattice,
    /// `[(n+1) × K]` within-state log transition table (row 0 = start).
    pub within: Vec<f64>,
    /// `[(n+1) × K]` cross-state log transition table.
    pub across: Vec<f64>,
    /// `[sets × T]` per-fact emission log-probabilities.
    pub emissions: Vec<f64>,
    pub num_predicates: usize,
    /// States close with a transition back to the marker column.
    pub state_end: bool,
    pub start_link: bool,
}

impl ScoredLattice {
    pub fn compute(
        store: &ParamStore,
        em: &EmissionModel,
        tr: &TransitionParams,
        p: &Prepared,
        hard: Option<&HardAlignment>,
        max_group_size: usize,
    ) -> Result<Self> {
        let ctx = &p.input.ctx;
        let t_len = p.facts.len();
        let lattice = Lattice::build(ctx, t_len, hard, max_group_size)?;
        let mut g = Graph::new(store);
        let tables = GraphTables::build(&mut g, tr, ctx)?;
        let enc = em.encode_graph(&mut g, &p.input.lin)?;
        let cross = em.cross_kv_graph(&mut g, enc)?;
        let mut emissions = Vec::with_capacity(lattice.sets.len() * t_len);
        for set in &lattice.sets {
            let keep = cross_attn_mask(&p.input.lin, &p.input.triple_preds, set);
            let v = em.fact_scores_graph(&mut g, &cross, &keep, &p.facts)?;
            emissions.extend_from_slice(g.value(v).data());
        }
        Ok(ScoredLattice {
            within: g.value(tables.within).data().to_vec(),
            across: g.value(tables.across).data().to_vec(),
            emissions,
            num_predicates: tr.num_predicates,
            state_end: tr.state_end,
            start_link: tr.start_link,
            lattice,
        })
    }

    pub fn facts(&self) -> usize {
        self.lattice.allowed.len()
    }

    /// `log p(state)` for lattice state `s`.
    pub fn state_score(&self, ctx: &MaskContext, s: usize) -> f64 {
        let k = self.num_predicates;
        let mut prev = 0;
        let mut lp = 0.0;
        for &p in &self.lattice.states[s].0 {
            lp += self.within[prev * k + p];
            prev = row_of(ctx, p);
        }
        if self.state_end {
            lp += self.within[prev * k + START_PREDICATE];
        }
        lp
    }

    /// Start-row link into lattice state `s` when it opens the plan.
    pub fn open_score(&self, s: usize) -> f64 {
        if self.start_link {
            self.across[self.lattice.states[s].first()]
        } else {
            0.0
        }
    }

    /// Cross-state link score from lattice state `a` into `b`, excluding
    /// `b`'s own state probability.
    pub fn link_score(&self, ctx: &MaskContext, a: usize, b: usize) -> f64 {
        let r = row_of(ctx, self.lattice.states[a].last());
        self.across[r * self.num_predicates + self.lattice.states[b].first()]
    }

    pub fn emission(&self, s: usize, t: usize) -> f64 {
        self.emissions[self.lattice.set_of[s] * self.facts() + t]
    }
}

/// The log marginal together with the backward table `β[t][state]` over the
/// lattice's states.
pub fn backward_table(
    store: &ParamStore,
    em: &EmissionModel,
    tr: &TransitionParams,
    p: &Prepared,
    hard: Option<&HardAlignment>,
    max_group_size: usize,
) -> Result<(f64, Lattice, Vec<Vec<f64>>)> {
    let sl = ScoredLattice::compute(store, em, tr, p, hard, max_group_size)?;
    let out = run_dp(
        &sl.lattice,
        &p.input.ctx,
        &DpInput {
            within: &sl.within,
            across: &sl.across,
            emissions: &sl.emissions,
            k: sl.num_predicates,
            state_end: sl.state_end,
            start_link: sl.start_link,
        },
        p.facts.len(),
    )?;
    Ok((out.log_z, sl.lattice, out.beta))
}

pub const BRUTE_FORCE_LIMIT: f64 = 1e6;

/// Sums every state sequence explicitly, using per-fact emission runs and
/// probability-domain transition functions.
pub fn brute_force_marginal(
    store: &ParamStore,
    em: &EmissionModel,
    tr: &TransitionParams,
    p: &Prepared,
    hard: Option<&HardAlignment>,
    max_group_size: usize,
) -> Result<f64> {
    let ctx = &p.input.ctx;
    let t_len = p.facts.len();
    let states = enumerate_states(ctx, max_group_size);
    let size = (states.len() as f64).powi(t_len as i32);
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::SearchSpace {
            size,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let superset = |s: &StateCandidate, t: usize| {
        hard.and_then(|h| h.forced.get(t))
            .map_or(true, |f| f.iter().all(|q| s.0.contains(q)))
    };
    let foreign = |s: &StateCandidate, t: usize| {
        hard.map_or(false, |h| {
            s.0.iter().any(|q| {
                !h.forced[t].contains(q)
                    && h.forced
                        .iter()
                        .enumerate()
                        .any(|(u, f)| u != t && f.contains(q))
            })
        })
    };
    let strict: Vec<bool> = (0..t_len)
        .map(|t| states.iter().any(|s| superset(s, t) && !foreign(s, t)))
        .collect();
    let allowed = |s: &StateCandidate, t: usize| superset(s, t) && !(strict[t] && foreign(s, t));
    // emission log-probabilities by (state, fact)
    let mut emis = vec![vec![f64::NEG_INFINITY; t_len]; states.len()];
    for (i, s) in states.iter().enumerate() {
        for (t, e) in emis[i].iter_mut().enumerate() {
            *e = em.fact_log_prob(
                store,
                &s.0,
                t,
                &p.facts,
                &p.input.lin,
                &p.input.triple_preds,
            )?;
        }
    }
    let init: Vec<f64> = states
        .iter()
        .map(|s| initial_state_prob(store, tr, s, ctx).map(f64::ln))
        .collect::<Result<_>>()?;
    let mut link = vec![vec![0.0; states.len()]; states.len()];
    for (a, sa) in states.iter().enumerate() {
        for (b, sb) in states.iter().enumerate() {
            link[a][b] = state_transition_prob(store, tr, sa, sb, ctx)?.ln();
        }
    }
    let mut scores = Vec::new();
    let mut path = vec![0usize; t_len];
    loop {
        if path
            .iter()
            .enumerate()
            .all(|(t, &s)| allowed(&states[s], t))
        {
            let mut sc = init[path[0]] + emis[path[0]][0];
            for t in 1..t_len {
                sc += link[path[t - 1]][path[t]] + emis[path[t]][t];
            }
            scores.push(sc);
        }
        // odometer increment
        let mut t = t_len;
        loop {
            if t == 0 {
                return if scores.is_empty() {
                    Err(Error::NoCandidates { t: 0 })
                } else {
                    Ok(log_sum_exp(&scores))
                };
            }
            t -= 1;
            path[t] += 1;
            if path[t] < states.len() {
                break;
            }
            path[t] = 0;
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr_model: f64,
    pub lr_transition: f64,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub max_group_size: usize,
    pub use_hard_alignment: bool,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            patience: 5,
            lr_model: 2e-3,
            lr_transition: 1e-2,
            batch_size: 1,
            clip_norm: Some(5.0),
            seed: 1,
            max_group_size: crate::plan::DEFAULT_MAX_GROUP_SIZE,
            use_hard_alignment: true,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean negative log marginal per instance, per epoch.
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Mean negative log marginal over `data`.
pub fn mean_nll(
    store: &ParamStore,
    em: &EmissionModel,
    tr: &TransitionParams,
    data: &[Prepared],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for p in data {
        let hard = cfg.use_hard_alignment.then_some(&p.hard);
        total -= backward_marginal(store, em, tr, p, hard, cfg.max_group_size)?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Maximizes the marginal likelihood with Adam, using separate learning rates
/// for transition parameters and everything else. Keeps the parameters of the
/// best epoch (by `dev` loss, or training loss when `dev` is empty).
pub fn train(
    store: &mut ParamStore,
    em: &EmissionModel,
    tr: &TransitionParams,
    data: &[Prepared],
    dev: &[Prepared],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(store);
    adam.clip_norm = cfg.clip_norm;
    let lr = |name: &str| {
        if name.starts_with(PARAM_PREFIX) {
            cfg.lr_transition
        } else {
            cfg.lr_model
        }
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut grads = Grads::zeros_like(store);
        let mut in_batch = 0;
        for (k, &i) in order.iter().enumerate() {
            let p = &data[i];
            let hard = cfg.use_hard_alignment.then_some(&p.hard);
            let mut g = Graph::new(store);
            let lz =
                marginal_graph(&mut g, em, tr, p, hard, cfg.max_group_size).map_err(
                    |e| match e {
                        Error::NonFinite(m) => Error::NonFinite(format!("instance {}: {m}", p.id)),
                        e => e,
                    },
                )?;
            let v = g.value(lz).item();
            total -= v;
            g.backward_scaled(lz, -1.0, &mut grads)?;
            drop(g);
            in_batch += 1;
            if in_batch == cfg.batch_size.max(1) || k + 1 == order.len() {
                grads.scale(1.0 / in_batch as f64);
                if !grads.is_finite() {
                    return Err(Error::NonFinite(format!("gradient at instance {}", p.id)));
                }
                adam.step(store, &grads, lr);
                grads.zero();
                in_batch = 0;
            }
        }
        let train_loss = total / data.len() as f64;
        report.train_loss.push(train_loss);
        let score = if dev.is_empty() {
            train_loss
        } else {
            let d = mean_nll(store, em, tr, dev, cfg)?;
            report.dev_loss.push(d);
            d
        };
        log::info!("train epoch {epoch}: nll {train_loss:.4}, selection {score:.4}");
        if let Some(dir) = &cfg.checkpoint_dir {
            store.save(&dir.join(format!("epoch-{epoch}.ckpt")))?;
        }
        if best.as_ref().map_or(true, |(b, _)| score < *b) {
            best = Some((score, store.clone()));
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    if let Some((_, b)) = best {
        *store = b;
        if let Some(dir) = &cfg.checkpoint_dir {
            store.save(&dir.join("best.ckpt"))?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocabs;
    use crate::emission::EmissionConfig;
    use crate::numeric::grad_check;
    use crate::transition::state_prob;
    use rand::Rng;

    pub(crate) struct Setup {
        pub store: ParamStore,
        pub em: EmissionModel,
        pub tr: TransitionParams,
        pub data: Vec<Prepared>,
    }

    fn instances() -> Vec<Instance> {
        let t = |p: &str, o: &str| Triple::new("the mill", p, o).unwrap();
        vec![
            Instance {
                triples: vec![t("food", "thai"), t("area", "riverside")],
                text: "the mill serves thai food . it is in riverside .".into(),
                facts: Some(vec![
                    "the mill serves thai food .".into(),
                    "it is in riverside .".into(),
                ]),
            },
            Instance {
                triples: vec![
                    t("food", "thai"),
                    t("area", "riverside"),
                    t("near", "cafe rouge"),
                ],
                text: "the mill serves thai food in riverside near cafe rouge .".into(),
                facts: Some(vec![
                    "the mill serves thai food in riverside near cafe rouge .".into(),
                ]),
            },
            Instance {
                triples: vec![
                    t("near", "cafe rouge"),
                    t("food", "thai"),
                    t("area", "riverside"),
                ],
                text: "near cafe rouge . thai food . riverside area .".into(),
                facts: Some(vec![
                    "near cafe rouge .".into(),
                    "thai food .".into(),
                    "riverside area .".into(),
                ]),
            },
        ]
    }

    fn setup(seed: u64, d: usize) -> Setup {
        let corpus = instances();
        let (tv, pv) = build_vocabs(&corpus, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cfg = EmissionConfig::new(tv.len());
        cfg.d_model = d;
        cfg.d_ff = 2 * d;
        cfg.init_std = 0.3;
        cfg.max_target_positions = 32;
        let em = EmissionModel::init(&mut store, cfg, &mut rng).unwrap();
        let tr = TransitionParams::init(&mut store, pv.len(), 4, 0.7, &mut rng).unwrap();
        let data = prepare_corpus(&corpus, &tv, &pv, &SegmenterConfig::default(), 3).unwrap();
        Setup {
            store,
            em,
            tr,
            data,
        }
    }

    #[test]
    fn hard_alignment_thresholds() {
        let tr = |p: &str, o: &str| Triple::new("x", p, o).unwrap();
        let triples = vec![
            tr("food", "thai"),
            tr("area", "city centre"),
            tr("near", "the blue fox"),
        ];
        // area+city+centre: 2 of 3 covered by the second fact, 1 of 3 by the first
        let facts = vec![
            "thai food in the city .".to_string(),
            "it is in the city centre".to_string(),
        ];
        let h = hard_align(&triples, &[1, 2, 3], &facts, 3);
        assert_eq!(h.forced, vec![vec![1], vec![2]]);

        // near the blue fox: tokens {near, the, blue, fox}; 2 of 4 → exactly 0.5, not forced
        let facts = vec!["the fox .".to_string()];
        let h = hard_align(&triples[2..], &[3], &facts, 3);
        assert_eq!(h.forced, vec![Vec::<usize>::new()]);

        // ties go to the earlier fact
        let facts = vec!["thai food".to_string(), "thai food".to_string()];
        let h = hard_align(&triples[..1], &[1], &facts, 3);
        assert_eq!(h.forced, vec![vec![1], vec![]]);

        // nothing shared
        let h = hard_align(&triples[..1], &[1], &["hello".to_string()], 3);
        assert_eq!(h.num_forced(), 0);

        // crowded fact keeps the best-covered predicates
        let facts = vec!["thai food area city centre near the blue fox".to_string()];
        let h = hard_align(&triples, &[1, 2, 3], &facts, 2);
        assert_eq!(h.forced[0].len(), 2);
    }

    #[test]
    fn single_fact_single_predicate_has_one_path() {
        let s = setup(1, 8);
        let corpus = vec![Instance {
            triples: vec![Triple::new("the mill", "food", "thai").unwrap()],
            text: "thai food .".into(),
            facts: None,
        }];
        let p = prepare(
            &corpus[0],
            0,
            &build_vocabs(&instances(), 1).unwrap().0,
            &build_vocabs(&instances(), 1).unwrap().1,
            &SegmenterConfig::default(),
            3,
        )
        .unwrap();
        let pid = p.input.triple_preds[0];
        let lz = backward_marginal(&s.store, &s.em, &s.tr, &p, None, 3).unwrap();
        let e =
            s.em.fact_log_prob(
                &s.store,
                &[pid],
                0,
                &p.facts,
                &p.input.lin,
                &p.input.triple_preds,
            )
            .unwrap();
        let sp = state_prob(&s.store, &s.tr, &StateCandidate(vec![pid]), &p.input.ctx).unwrap();
        assert_eq!(sp, 1.0);
        assert!((lz - e).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_brute_force_and_pruning_only_removes_mass() {
        let s = setup(2, 8);
        for tr in [
            s.tr,
            s.tr.with_state_end(true),
            s.tr.with_state_end(true).with_start_link(true),
        ] {
            for p in &s.data {
                for cap in [1, 2, 3] {
                    let a = backward_marginal(&s.store, &s.em, &tr, p, None, cap).unwrap();
                    let b = brute_force_marginal(&s.store, &s.em, &tr, p, None, cap).unwrap();
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                    let (a2, _, beta) = backward_table(&s.store, &s.em, &tr, p, None, cap).unwrap();
                    assert_eq!(a, a2);
                    assert!(beta.iter().flatten().all(|&v| v <= 1e-12));
                    assert!(beta.last().unwrap().iter().all(|&v| v == 0.0));
                }
                let pruned = backward_marginal(&s.store, &s.em, &tr, p, Some(&p.hard), 3);
                if let Ok(pr) = pruned {
                    let full = backward_marginal(&s.store, &s.em, &tr, p, None, 3).unwrap();
                    assert!(pr <= full + 1e-12);
                    let bf =
                        brute_force_marginal(&s.store, &s.em, &tr, p, Some(&p.hard), 3).unwrap();
                    assert!((pr - bf).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn over_constrained_alignment_names_the_fact() {
        let s = setup(3, 8);
        let p = &s.data[1];
        let hard = HardAlignment {
            forced: vec![p.input.ctx.predicates().to_vec()],
        };
        let r = backward_marginal(&s.store, &s.em, &s.tr, p, Some(&hard), 2);
        assert!(matches!(r, Err(Error::NoCandidates { t: 0 })));
    }

    #[test]
    fn marginal_gradient_matches_finite_differences() {
        let s = setup(4, 4);
        let p = s.data[0].clone();
        for tr in [
            s.tr,
            s.tr.with_state_end(true),
            s.tr.with_state_end(true).with_start_link(true),
        ] {
            let mut store = s.store.clone();
            let r = grad_check(
                &mut store,
                |st| {
                    let mut g = Graph::new(st);
                    let lz = marginal_graph(&mut g, &s.em, &tr, &p, None, 3)?;
                    let mut grads = Grads::zeros_like(st);
                    g.backward(lz, &mut grads)?;
                    Ok((g.value(lz).item(), grads))
                },
                1e-5,
                300,
                5,
            )
            .unwrap();
            assert!(r.max_rel_err <= 1e-4, "{r:?}");
        }
        // transition parameters specifically
        let mut g = Graph::new(&s.store);
        let lz = marginal_graph(&mut g, &s.em, &s.tr, &p, None, 3).unwrap();
        let mut grads = Grads::zeros_like(&s.store);
        g.backward(lz, &mut grads).unwrap();
        assert!(grads.get(s.tr.a_out).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn random_instances_agree_with_brute_force() {
        let s = setup(5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mut p = s.data[rng.gen_range(0..s.data.len())].clone();
            // random fact split of the same tokens
            let (ids, _) = p.facts.flatten();
            let content: Vec<usize> = ids
                .into_iter()
                .filter(|&t| t != special::FACT_START && t != special::FACT_END)
                .collect();
            let t_len = rng.gen_range(1..=3usize).min(content.len());
            let mut cuts: Vec<usize> = (1..content.len()).collect();
            cuts.shuffle(&mut rng);
            let mut cuts: Vec<usize> = cuts.into_iter().take(t_len - 1).collect();
            cuts.sort_unstable();
            let mut facts = Vec::new();
            let mut start = 0;
            for c in cuts.into_iter().chain([content.len()]) {
                let mut f = vec![special::FACT_START];
                f.extend_from_slice(&content[start..c]);
                f.push(special::FACT_END);
                facts.push(f);
                start = c;
            }
            p.facts = FactSequence { facts };
            let a = backward_marginal(&s.store, &s.em, &s.tr, &p, None, 3).unwrap();
            let b = brute_force_marginal(&s.store, &s.em, &s.tr, &p, None, 3).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_learning_rates_leave_parameters_unchanged() {
        let mut s = setup(6, 8);
        let before = s.store.clone();
        let cfg = TrainConfig {
            epochs: 1,
            lr_model: 0.0,
            lr_transition: 0.0,
            ..TrainConfig::default()
        };
        train(&mut s.store, &s.em, &s.tr, &s.data, &[], &cfg).unwrap();
        for id in before.ids() {
            let a: Vec<u64> = before.get(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = s.store.get(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn training_reduces_the_loss_and_checkpoints() {
        let mut s = setup(7, 8);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            patience: 6,
            lr_model: 1e-2,
            lr_transition: 5e-2,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            use_hard_alignment: false,
            ..TrainConfig::default()
        };
        let r = train(&mut s.store, &s.em, &s.tr, &s.data, &[], &cfg).unwrap();
        assert!(
            r.train_loss.last().unwrap() < &r.train_loss[0],
            "{:?}",
            r.train_loss
        );
        assert!(dir.path().join("epoch-1.ckpt").exists());
        assert!(dir.path().join("best.ckpt").exists());
        let kept = ParamStore::load(&dir.path().join("best.ckpt")).unwrap();
        assert_eq!(kept.num_values(), s.store.num_values());
    }

    #[test]
    fn pretraining_starts_near_uniform_and_memorizes() {
        let corpus = vec![instances()[0].clone()];
        let (tv, pv) = build_vocabs(&corpus, 1).unwrap();
        let data = prepare_corpus(&corpus, &tv, &pv, &SegmenterConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let mut cfg = EmissionConfig::new(tv.len());
        cfg.d_model = 16;
        cfg.d_ff = 32;
        let em = EmissionModel::init(&mut store, cfg, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let (nll, n) = baseline_nll_graph(&mut g, &em, &data[0]).unwrap();
        let per_tok = g.value(nll).item() / n as f64;
        let uniform = (tv.len() as f64).ln();
        assert!((per_tok - uniform).abs() < 0.1 * uniform);
        drop(g);
        let hist = pretrain_baseline(
            &mut store,
            &em,
            &data,
            &PretrainConfig {
                epochs: 150,
                lr: 1e-2,
                batch_size: 1,
                ..PretrainConfig::default()
            },
        )
        .unwrap();
        assert!(*hist.last().unwrap() < 0.05, "{hist:?}");
    }
}
