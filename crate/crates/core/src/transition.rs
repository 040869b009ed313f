//! Latent-state transitions.
//!
//! Predicate-to-predicate transitions are a masked softmax over rows of a
//! low-rank product `A·B`, where columns outside the instance's predicate set
//! are masked out. One parameter pair drives transitions inside a state,
//! another the link from the last predicate of one state to the first
//! predicate of the next.

use rand::Rng;

use crate::data::START_PREDICATE;
use crate::error::{Error, Result};
use crate::numeric::{masked_softmax, Graph, ParamId, ParamStore, Tensor, Var};

/// Which parameter pair a transition row comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransitionSet {
    /// Between consecutive predicates inside one state.
    Within,
    /// From the last predicate of a state to the first of the next.
    Across,
}

#[derive(Clone, Copy, Debug)]
pub struct TransitionParams {
    pub a_in: ParamId,
    pub b_in: ParamId,
    pub a_out: ParamId,
    pub b_out: ParamId,
    pub num_predicates: usize,
    pub dim: usize,
    /// Within-state chains close with a transition back to the marker, so
    /// state probabilities account for where a state stops.
    pub state_end: bool,
    /// The first state's opening predicate is drawn from the cross-state
    /// start row, fixing where a plan begins.
    pub start_link: bool,
}

pub const PARAM_PREFIX: &str = "trans.";

impl TransitionParams {
    /// Registers the four embedding matrices with `N(0, std²)` entries.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        num_predicates: usize,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let k = num_predicates;
        Ok(TransitionParams {
            a_in: store.add_normal("trans.a_in", &[k, dim], std, rng)?,
            b_in: store.add_normal("trans.b_in", &[dim, k], std, rng)?,
            a_out: store.add_normal("trans.a_out", &[k, dim], std, rng)?,
            b_out: store.add_normal("trans.b_out", &[dim, k], std, rng)?,
            num_predicates: k,
            dim,
            state_end: false,
            start_link: false,
        })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let a_in = store.id("trans.a_in")?;
        let shape = store.get(a_in).shape().to_vec();
        Ok(TransitionParams {
            a_in,
            b_in: store.id("trans.b_in")?,
            a_out: store.id("trans.a_out")?,
            b_out: store.id("trans.b_out")?,
            num_predicates: shape[0],
            dim: shape[1],
            state_end: false,
            start_link: false,
        })
    }

    pub fn with_state_end(mut self, on: bool) -> Self {
        self.state_end = on;
        self
    }

    pub fn with_start_link(mut self, on: bool) -> Self {
        self.start_link = on;
        self
    }

    /// Whether column `START_PREDICATE` is a target of row `from` in `set`.
    fn ends_state(&self, set: TransitionSet, from: usize) -> bool {
        self.state_end && set == TransitionSet::Within && from != START_PREDICATE
    }

    fn pair(&self, set: TransitionSet) -> (ParamId, ParamId) {
        match set {
            TransitionSet::Within => (self.a_in, self.b_in),
            TransitionSet::Across => (self.a_out, self.b_out),
        }
    }
}

/// The instance's predicate set `q`; the start marker is implicit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskContext {
    preds: Vec<usize>,
}

impl MaskContext {
    /// `preds` are the instance predicate ids (start marker excluded).
    pub fn new(preds: &[usize]) -> Result<Self> {
        let mut p = preds.to_vec();
        p.sort_unstable();
        p.dedup();
        if p.len() != preds.len() {
            return Err(Error::Plan("repeated predicate in mask context".into()));
        }
        if p.contains(&START_PREDICATE) {
            return Err(Error::Plan(
                "start marker is not an instance predicate".into(),
            ));
        }
        Ok(MaskContext { preds: p })
    }

    /// Instance predicates in ascending id order.
    pub fn predicates(&self) -> &[usize] {
        &self.preds
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    pub fn contains(&self, p: usize) -> bool {
        self.preds.binary_search(&p).is_ok()
    }

    /// Position of `p` among the instance predicates.
    pub fn local(&self, p: usize) -> Option<usize> {
        self.preds.binary_search(&p).ok()
    }

    /// `M(q)` as a dense `K×K` 0/1 matrix.
    pub fn mask_matrix(&self, k: usize) -> Tensor {
        let mut m = Tensor::zeros(&[k, k]);
        let rows = std::iter::once(START_PREDICATE).chain(self.preds.iter().copied());
        for i in rows {
            for &j in &self.preds {
                m.data_mut()[i * k + j] = 1.0;
            }
        }
        m
    }

    /// Same context with `p` removed.
    pub fn without(&self, p: usize) -> Self {
        MaskContext {
            preds: self.preds.iter().copied().filter(|&x| x != p).collect(),
        }
    }
}

/// Ordered group of distinct instance predicates emitting one fact.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateCandidate(pub Vec<usize>);

impl StateCandidate {
    pub fn first(&self) -> usize {
        self.0[0]
    }

    pub fn last(&self) -> usize {
        *self.0.last().unwrap()
    }

    /// Members in ascending order; emission depends only on this.
    pub fn sorted_set(&self) -> Vec<usize> {
        let mut s = self.0.clone();
        s.sort_unstable();
        s
    }

    pub fn validate(&self, ctx: &MaskContext) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Plan("empty state".into()));
        }
        for (i, &p) in self.0.iter().enumerate() {
            if !ctx.contains(p) {
                return Err(Error::PredicateNotInInstance(p));
            }
            if self.0[..i].contains(&p) {
                return Err(Error::Plan(format!(
                    "predicate {p} repeated within a state"
                )));
            }
        }
        Ok(())
    }
}

/// Probability row `p(· | from)` over all `K` predicate ids.
pub fn transition_row(
    store: &ParamStore,
    params: &TransitionParams,
    set: TransitionSet,
    from: usize,
    ctx: &MaskContext,
) -> Result<Vec<f64>> {
    if from != START_PREDICATE && !ctx.contains(from) {
        return Err(Error::PredicateNotInInstance(from));
    }
    let k = params.num_predicates;
    let (a, b) = params.pair(set);
    let a_row = Tensor::matrix(1, params.dim, store.get(a).row(from).to_vec())?;
    let logits = a_row.matmul(store.get(b))?;
    let mut mask = ctx.mask_matrix(k).row(from).to_vec();
    if params.ends_state(set, from) {
        mask[START_PREDICATE] = 1.0;
    }
    let mask = Tensor::matrix(1, k, mask)?;
    Ok(masked_softmax(&logits, &mask)?.into_data())
}

/// Every ordered tuple of 1..=`max_group_size` distinct instance predicates,
/// ordered by length and then lexicographically by id.
pub fn enumerate_states(ctx: &MaskContext, max_group_size: usize) -> Vec<StateCandidate> {
    let preds = ctx.predicates();
    let mut out = Vec::new();
    for len in 1..=max_group_size.min(preds.len()) {
        let mut cur = Vec::with_capacity(len);
        permutations(preds, len, &mut cur, &mut out);
    }
    out
}

fn permutations(preds: &[usize], len: usize, cur: &mut Vec<usize>, out: &mut Vec<StateCandidate>) {
    if cur.len() == len {
        out.push(StateCandidate(cur.clone()));
        return;
    }
    for &p in preds {
        if !cur.contains(&p) {
            cur.push(p);
            permutations(preds, len, cur, out);
            cur.pop();
        }
    }
}

/// Log transition probabilities restricted to one instance.
///
/// Row 0 is the start marker, row `r ≥ 1` is `ctx.predicates()[r - 1]`;
/// column `c` is `ctx.predicates()[c]`.
#[derive(Clone, Debug)]
pub struct LocalTables {
    pub within: Vec<Vec<f64>>,
    pub across: Vec<Vec<f64>>,
    /// Per row, log-probability of closing the state there (0 when states
    /// carry no end transition).
    pub end: Vec<f64>,
    /// Per column, log-probability of opening a plan there (0 without a
    /// start link).
    pub start: Vec<f64>,
}

impl LocalTables {
    pub fn compute(
        store: &ParamStore,
        params: &TransitionParams,
        ctx: &MaskContext,
    ) -> Result<Self> {
        let mut end = Vec::with_capacity(ctx.len() + 1);
        let mut rows = |set| -> Result<Vec<Vec<f64>>> {
            std::iter::once(START_PREDICATE)
                .chain(ctx.predicates().iter().copied())
                .map(|from| {
                    let row = transition_row(store, params, set, from, ctx)?;
                    if set == TransitionSet::Within {
                        end.push(if params.ends_state(set, from) {
                            row[START_PREDICATE].ln()
                        } else {
                            0.0
                        });
                    }
                    Ok(ctx.predicates().iter().map(|&p| row[p].ln()).collect())
                })
                .collect()
        };
        let within = rows(TransitionSet::Within)?;
        let across = rows(TransitionSet::Across)?;
        let start = if params.start_link {
            across[0].clone()
        } else {
            vec![0.0; ctx.len()]
        };
        Ok(LocalTables {
            within,
            across,
            end,
            start,
        })
    }

    /// `log p(state)`: chain of within-state transitions from the start marker.
    pub fn state_log_prob(&self, local_state: &[usize]) -> f64 {
        let mut prev_row = 0;
        let mut lp = 0.0;
        for &s in local_state {
            lp += self.within[prev_row][s];
            prev_row = s + 1;
        }
        lp + self.end[prev_row]
    }

    /// Log of the cross-state link from `prev_last` to `next_first` (local indices).
    pub fn link_log_prob(&self, prev_last: usize, next_first: usize) -> f64 {
        self.across[prev_last + 1][next_first]
    }
}

/// Converts a state's predicate ids to local indices.
pub fn to_local(state: &StateCandidate, ctx: &MaskContext) -> Result<Vec<usize>> {
    state
        .0
        .iter()
        .map(|&p| ctx.local(p).ok_or(Error::PredicateNotInInstance(p)))
        .collect()
}

/// `p(z = state | x)`: within-state chain starting at the start marker.
pub fn state_prob(
    store: &ParamStore,
    params: &TransitionParams,
    state: &StateCandidate,
    ctx: &MaskContext,
) -> Result<f64> {
    state.validate(ctx)?;
    let mut prev = START_PREDICATE;
    let mut p = 1.0;
    for &o in &state.0 {
        p *= transition_row(store, params, TransitionSet::Within, prev, ctx)?[o];
        prev = o;
    }
    if params.state_end {
        p *= transition_row(store, params, TransitionSet::Within, prev, ctx)?[START_PREDICATE];
    }
    Ok(p)
}

/// `p(z_1 = state | x)`: the state probability, times the start-row link
/// into its first predicate when plans carry one.
pub fn initial_state_prob(
    store: &ParamStore,
    params: &TransitionParams,
    state: &StateCandidate,
    ctx: &MaskContext,
) -> Result<f64> {
    let own = state_prob(store, params, state, ctx)?;
    if !params.start_link {
        return Ok(own);
    }
    let link =
        transition_row(store, params, TransitionSet::Across, START_PREDICATE, ctx)?[state.first()];
    Ok(link * own)
}

/// `p(z_t = next | z_{t-1} = prev, x)`: the across link from `prev`'s last
/// predicate to `next`'s first, times `next`'s own state probability.
pub fn state_transition_prob(
    store: &ParamStore,
    params: &TransitionParams,
    prev: &StateCandidate,
    next: &StateCandidate,
    ctx: &MaskContext,
) -> Result<f64> {
    prev.validate(ctx)?;
    let link =
        transition_row(store, params, TransitionSet::Across, prev.last(), ctx)?[next.first()];
    Ok(link * state_prob(store, params, next, ctx)?)
}

/// Log-probability tables on a graph, for training.
pub struct GraphTables {
    /// `[(n+1) × K]` log-probabilities, row 0 = start, masked columns `-inf`.
    pub within: Var,
    pub across: Var,
    pub num_predicates: usize,
}

impl GraphTables {
    pub fn build(g: &mut Graph, params: &TransitionParams, ctx: &MaskContext) -> Result<Self> {
        let k = params.num_predicates;
        let rows: Vec<usize> = std::iter::once(START_PREDICATE)
            .chain(ctx.predicates().iter().copied())
            .collect();
        let keep = |set: TransitionSet| {
            let mut keep = vec![false; rows.len() * k];
            for (r, &from) in rows.iter().enumerate() {
                for &p in ctx.predicates() {
                    keep[r * k + p] = true;
                }
                keep[r * k + START_PREDICATE] = params.ends_state(set, from);
            }
            keep
        };
        let mut one = |a: ParamId, b: ParamId, set: TransitionSet| -> Result<Var> {
            let a = g.param(a);
            let b = g.param(b);
            let a_rows = g.gather_rows(a, &rows)?;
            let logits = g.matmul(a_rows, b)?;
            g.log_softmax(logits, Some(&keep(set)))
        };
        let within = one(params.a_in, params.b_in, TransitionSet::Within)?;
        let across = one(params.a_out, params.b_out, TransitionSet::Across)?;
        Ok(GraphTables {
            within,
            across,
            num_predicates: k,
        })
    }

    /// Flat index into a table for `(row, predicate id)`; row 0 = start,
    /// row `r ≥ 1` = local predicate `r - 1`.
    pub fn index(&self, row: usize, pred: usize) -> usize {
        row * self.num_predicates + pred
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, Grads};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(k: usize, seed: u64) -> (ParamStore, TransitionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let p = TransitionParams::init(&mut s, k, 4, 0.8, &mut rng).unwrap();
        (s, p)
    }

    #[test]
    fn rows_are_distributions_over_the_unmasked_support() {
        let (s, p) = setup(7, 1);
        let ctx = MaskContext::new(&[2, 5, 6]).unwrap();
        for set in [TransitionSet::Within, TransitionSet::Across] {
            for from in [0, 2, 5, 6] {
                let row = transition_row(&s, &p, set, from, &ctx).unwrap();
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                for (j, v) in row.iter().enumerate() {
                    assert_eq!(*v == 0.0, !ctx.contains(j), "col {j}");
                }
            }
        }
        assert!(matches!(
            transition_row(&s, &p, TransitionSet::Within, 3, &ctx),
            Err(Error::PredicateNotInInstance(3))
        ));
    }

    #[test]
    fn single_target_is_forced() {
        let (s, p) = setup(4, 2);
        let ctx = MaskContext::new(&[3]).unwrap();
        let row = transition_row(&s, &p, TransitionSet::Within, 0, &ctx).unwrap();
        assert_eq!(row[3], 1.0);
        let st = StateCandidate(vec![3]);
        assert_eq!(state_prob(&s, &p, &st, &ctx).unwrap(), 1.0);
        assert_eq!(state_transition_prob(&s, &p, &st, &st, &ctx).unwrap(), 1.0);
    }

    #[test]
    fn zero_start_row_is_uniform() {
        let (mut s, p) = setup(3, 3);
        s.get_mut(p.a_in).data_mut()[..4]
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let ctx = MaskContext::new(&[1, 2]).unwrap();
        let row = transition_row(&s, &p, TransitionSet::Within, 0, &ctx).unwrap();
        assert_eq!(row, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn row_matches_hand_computed_masked_softmax() {
        let (s, p) = setup(6, 4);
        let ctx = MaskContext::new(&[1, 3, 4]).unwrap();
        let row = transition_row(&s, &p, TransitionSet::Across, 3, &ctx).unwrap();
        // independent: explicit dot products and exponentials
        let a = s.get(p.a_out);
        let b = s.get(p.b_out);
        let logit = |j: usize| (0..4).map(|d| a.get(3, d) * b.get(d, j)).sum::<f64>();
        let z: f64 = [1, 3, 4].iter().map(|&j| logit(j).exp()).sum();
        for j in 0..6 {
            let want = if [1, 3, 4].contains(&j) {
                logit(j).exp() / z
            } else {
                0.0
            };
            assert!((row[j] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn shift_invariance_of_rows() {
        let (mut s, p) = setup(5, 5);
        let ctx = MaskContext::new(&[1, 2, 4]).unwrap();
        let before = transition_row(&s, &p, TransitionSet::Within, 2, &ctx).unwrap();
        // adding c·1 to b's columns through an extra a-coordinate is awkward;
        // instead add a constant to every logit of row 2 via a rank-one edit:
        // set b[d, j] += c / a[2, d] for one d with a[2, d] != 0
        let a2d = s.get(p.a_in).get(2, 0);
        for j in 0..5 {
            let v = s.get(p.b_in).get(0, j);
            s.get_mut(p.b_in).data_mut()[j] = v + 3.7 / a2d;
        }
        let after = transition_row(&s, &p, TransitionSet::Within, 2, &ctx).unwrap();
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn enumeration_counts_and_order() {
        let ctx = MaskContext::new(&[1, 2, 3]).unwrap();
        let states = enumerate_states(&ctx, 3);
        assert_eq!(states.len(), 15);
        assert_eq!(states[0], StateCandidate(vec![1]));
        assert_eq!(states[3], StateCandidate(vec![1, 2]));
        assert_eq!(states[14], StateCandidate(vec![3, 2, 1]));
        let mut sorted = states.clone();
        sorted.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then(a.0.cmp(&b.0)));
        assert_eq!(sorted, states);

        assert_eq!(
            enumerate_states(&MaskContext::new(&[4]).unwrap(), 3).len(),
            1
        );
        let seven = MaskContext::new(&[1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(enumerate_states(&seven, 3).len(), 259);
        for n in 1..=6usize {
            let ids: Vec<usize> = (1..=n).collect();
            let ctx = MaskContext::new(&ids).unwrap();
            let want: usize = (1..=n.min(3))
                .map(|r| (n - r + 1..=n).product::<usize>())
                .sum();
            assert_eq!(enumerate_states(&ctx, 3).len(), want);
        }
    }

    #[test]
    fn state_prob_unrolls_and_full_permutations_sum_to_one() {
        let (s, p) = setup(5, 6);
        let ctx = MaskContext::new(&[1, 2, 4]).unwrap();
        let st = StateCandidate(vec![2, 4]);
        let want = transition_row(&s, &p, TransitionSet::Within, 0, &ctx).unwrap()[2]
            * transition_row(&s, &p, TransitionSet::Within, 2, &ctx).unwrap()[4];
        assert!((state_prob(&s, &p, &st, &ctx).unwrap() - want).abs() < 1e-15);

        // Brute force: the probability of every length-3 chain with repeats
        // allowed sums to one; restricting to distinct tuples gives the
        // enumerated states' total.
        let ids = [1, 2, 4];
        let row = |f: usize| transition_row(&s, &p, TransitionSet::Within, f, &ctx).unwrap();
        let mut all = 0.0;
        let mut distinct = 0.0;
        for &a in &ids {
            for &b in &ids {
                for &c in &ids {
                    let pr = row(0)[a] * row(a)[b] * row(b)[c];
                    all += pr;
                    if a != b && b != c && a != c {
                        distinct += pr;
                    }
                }
            }
        }
        assert!((all - 1.0).abs() < 1e-12);
        let enumerated: f64 = enumerate_states(&ctx, 3)
            .iter()
            .filter(|st| st.0.len() == 3)
            .map(|st| state_prob(&s, &p, st, &ctx).unwrap())
            .sum();
        assert!((enumerated - distinct).abs() < 1e-14);
    }

    #[test]
    fn cross_state_links() {
        let (s, p) = setup(5, 7);
        let ctx = MaskContext::new(&[1, 3]).unwrap();
        let a = StateCandidate(vec![1]);
        let b = StateCandidate(vec![3]);
        let want = transition_row(&s, &p, TransitionSet::Within, 0, &ctx).unwrap()[3]
            * transition_row(&s, &p, TransitionSet::Across, 1, &ctx).unwrap()[3];
        assert!((state_transition_prob(&s, &p, &a, &b, &ctx).unwrap() - want).abs() < 1e-15);

        // three-state chain against the expanded product
        let ctx = MaskContext::new(&[1, 2, 3, 4]).unwrap();
        let z = [
            StateCandidate(vec![2, 1]),
            StateCandidate(vec![4]),
            StateCandidate(vec![3, 1]),
        ];
        let w = |f| transition_row(&s, &p, TransitionSet::Within, f, &ctx).unwrap();
        let x = |f| transition_row(&s, &p, TransitionSet::Across, f, &ctx).unwrap();
        let expanded = (w(0)[2] * w(2)[1]) * (x(1)[4] * w(0)[4]) * (x(4)[3] * w(0)[3] * w(3)[1]);
        let chained = state_prob(&s, &p, &z[0], &ctx).unwrap()
            * state_transition_prob(&s, &p, &z[0], &z[1], &ctx).unwrap()
            * state_transition_prob(&s, &p, &z[1], &z[2], &ctx).unwrap();
        assert!((expanded - chained).abs() < 1e-15);
    }

    #[test]
    fn local_tables_agree_with_rows() {
        let (s, p) = setup(6, 8);
        let ctx = MaskContext::new(&[2, 3, 5]).unwrap();
        for p in [p, p.with_state_end(true), p.with_start_link(true)] {
            let t = LocalTables::compute(&s, &p, &ctx).unwrap();
            for st in enumerate_states(&ctx, 3) {
                let local = to_local(&st, &ctx).unwrap();
                let direct = state_prob(&s, &p, &st, &ctx).unwrap().ln();
                assert!((t.state_log_prob(&local) - direct).abs() < 1e-12);
                let opened = initial_state_prob(&s, &p, &st, &ctx).unwrap().ln();
                assert!((t.start[local[0]] + t.state_log_prob(&local) - opened).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_states_end_through_the_marker_column() {
        let (s, p) = setup(5, 10);
        let p = p.with_state_end(true);
        let ctx = MaskContext::new(&[1, 3]).unwrap();
        let start = transition_row(&s, &p, TransitionSet::Within, 0, &ctx).unwrap();
        assert_eq!(start[0], 0.0);
        for from in [1, 3] {
            let row = transition_row(&s, &p, TransitionSet::Within, from, &ctx).unwrap();
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row[0] > 0.0);
            let across = transition_row(&s, &p, TransitionSet::Across, from, &ctx).unwrap();
            assert_eq!(across[0], 0.0);
        }
        let st = StateCandidate(vec![3, 1]);
        let want = start[3]
            * transition_row(&s, &p, TransitionSet::Within, 3, &ctx).unwrap()[1]
            * transition_row(&s, &p, TransitionSet::Within, 1, &ctx).unwrap()[0];
        assert!((state_prob(&s, &p, &st, &ctx).unwrap() - want).abs() < 1e-15);
        // a lone predicate no longer has probability one
        let one = MaskContext::new(&[3]).unwrap();
        assert!(state_prob(&s, &p, &StateCandidate(vec![3]), &one).unwrap() < 1.0);
    }

    #[test]
    fn state_prob_gradients() {
        let (mut s, p) = setup(5, 9);
        let ctx = MaskContext::new(&[1, 2, 4]).unwrap();
        let states = [vec![2, 4, 1], vec![1], vec![4, 2]];
        let r = grad_check(
            &mut s,
            |st| {
                let mut g = Graph::new(st);
                let tabs = GraphTables::build(&mut g, &p, &ctx)?;
                let mut idx_in = Vec::new();
                let mut idx_out = Vec::new();
                for state in &states {
                    let mut row = 0;
                    for &o in state {
                        idx_in.push(tabs.index(row, o));
                        row = ctx.local(o).unwrap() + 1;
                    }
                    idx_out.push(tabs.index(row, state[0]));
                }
                let a = g.pick(tabs.within, &idx_in)?;
                let b = g.pick(tabs.across, &idx_out)?;
                let a = g.sum(a);
                let b = g.sum(b);
                let total = g.add(a, b)?;
                let mut grads = Grads::zeros_like(st);
                g.backward(total, &mut grads)?;
                Ok((g.value(total).item(), grads))
            },
            1e-5,
            200,
            1,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-6, "{}", r.max_rel_err);
    }
}
