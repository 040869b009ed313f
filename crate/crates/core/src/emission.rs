//! Fact emission: a Transformer encoder over linearized triples and an
//! autoregressive decoder whose cross-attention only sees the triples of the
//! current latent state.
//!
//! The encoder attends within each triple only (`[CLS]` attends to itself),
//! with positions counted from the start of each triple. An encoded triple
//! therefore depends on nothing but its own tokens, and masking cross-attention
//! to the state's triples makes emission exactly independent of every other
//! triple.
//!
//! The decoder runs over the concatenated facts `[FS] y_1 [FE] [FS] y_2 [FE] …`
//! under one state's cross-attention mask. Because self-attention is causal,
//! a single pass yields `log p(y_t | y_{<t}, z_t = state, x)` for every `t` at
//! once, and emission depends on the state only through its predicate set.

use std::rc::Rc;

use rand::Rng;

use crate::data::{special, LinearizedInput};
use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::segment::FactSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct EmissionConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_source_positions: usize,
    pub max_target_positions: usize,
    pub init_std: f64,
}

impl EmissionConfig {
    pub fn new(vocab_size: usize) -> Self {
        EmissionConfig {
            vocab_size,
            d_model: 64,
            heads: 2,
            layers: 2,
            d_ff: 128,
            max_source_positions: 32,
            max_target_positions: 160,
            init_std: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug)]
struct NormIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct FfIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncLayer {
    ln1: NormIds,
    attn: AttnIds,
    ln2: NormIds,
    ff: FfIds,
}

#[derive(Clone, Debug)]
struct DecLayer {
    ln1: NormIds,
    self_attn: AttnIds,
    ln2: NormIds,
    cross: AttnIds,
    ln3: NormIds,
    ff: FfIds,
}

/// Parameter handles of the encoder-decoder.
#[derive(Clone, Debug)]
pub struct EmissionModel {
    pub cfg: EmissionConfig,
    tok: ParamId,
    src_pos: ParamId,
    tgt_pos: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: NormIds,
    dec: Vec<DecLayer>,
    dec_ln: NormIds,
    out_w: ParamId,
    out_b: ParamId,
}

/// Cross-attention keys and values for one encoded input, per decoder layer.
#[derive(Clone, Debug)]
pub struct CrossCache {
    kv: Vec<(Tensor, Tensor)>,
    len: usize,
}

/// Decoder self-attention keys and values of an already processed prefix.
#[derive(Clone, Debug, Default)]
pub struct SelfCache {
    kv: Vec<(Tensor, Tensor)>,
    len: usize,
}

impl SelfCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Encoder positions visible to the decoder for a given predicate set:
/// `[CLS]` plus every token of a triple whose predicate is in the set.
pub fn cross_attn_mask(lin: &LinearizedInput, triple_preds: &[usize], set: &[usize]) -> Vec<bool> {
    let mut keep = vec![false; lin.len()];
    keep[lin.cls_index] = true;
    for (span, p) in lin.triple_spans.iter().zip(triple_preds) {
        if set.contains(p) {
            keep[span.clone()].iter_mut().for_each(|k| *k = true);
        }
    }
    keep
}

fn tile(row: &[bool], times: usize) -> Rc<Vec<bool>> {
    let mut v = Vec::with_capacity(row.len() * times);
    for _ in 0..times {
        v.extend_from_slice(row);
    }
    Rc::new(v)
}

impl EmissionModel {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: EmissionConfig, rng: &mut R) -> Result<Self> {
        if cfg.d_model % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                cfg.d_model, cfg.heads
            )));
        }
        let (d, f, s) = (cfg.d_model, cfg.d_ff, cfg.init_std);
        store.add_normal("emb.tok", &[cfg.vocab_size, d], s, rng)?;
        store.add_normal("emb.src_pos", &[cfg.max_source_positions, d], s, rng)?;
        store.add_normal("emb.tgt_pos", &[cfg.max_target_positions, d], s, rng)?;
        let norm = |store: &mut ParamStore, name: &str| -> Result<()> {
            store.add_constant(&format!("{name}.g"), &[d], 1.0)?;
            store.add_constant(&format!("{name}.b"), &[d], 0.0)?;
            Ok(())
        };
        let attn = |store: &mut ParamStore, name: &str, rng: &mut R| -> Result<()> {
            for w in ["wq", "wk", "wv", "wo"] {
                store.add_normal(&format!("{name}.{w}"), &[d, d], s, rng)?;
            }
            Ok(())
        };
        let ff = |store: &mut ParamStore, name: &str, rng: &mut R| -> Result<()> {
            store.add_normal(&format!("{name}.w1"), &[d, f], s, rng)?;
            store.add_constant(&format!("{name}.b1"), &[f], 0.0)?;
            store.add_normal(&format!("{name}.w2"), &[f, d], s, rng)?;
            store.add_constant(&format!("{name}.b2"), &[d], 0.0)?;
            Ok(())
        };
        for l in 0..cfg.layers {
            norm(store, &format!("enc.{l}.ln1"))?;
            attn(store, &format!("enc.{l}.attn"), rng)?;
            norm(store, &format!("enc.{l}.ln2"))?;
            ff(store, &format!("enc.{l}.ff"), rng)?;
        }
        norm(store, "enc.ln")?;
        for l in 0..cfg.layers {
            norm(store, &format!("dec.{l}.ln1"))?;
            attn(store, &format!("dec.{l}.self"), rng)?;
            norm(store, &format!("dec.{l}.ln2"))?;
            attn(store, &format!("dec.{l}.cross"), rng)?;
            norm(store, &format!("dec.{l}.ln3"))?;
            ff(store, &format!("dec.{l}.ff"), rng)?;
        }
        norm(store, "dec.ln")?;
        store.add_normal("out.w", &[d, cfg.vocab_size], s, rng)?;
        store.add_constant("out.b", &[cfg.vocab_size], 0.0)?;
        Self::from_store(store, cfg)
    }

    pub fn from_store(store: &ParamStore, cfg: EmissionConfig) -> Result<Self> {
        let norm = |n: &str| -> Result<NormIds> {
            Ok(NormIds {
                g: store.id(&format!("{n}.g"))?,
                b: store.id(&format!("{n}.b"))?,
            })
        };
        let attn = |n: &str| -> Result<AttnIds> {
            Ok(AttnIds {
                wq: store.id(&format!("{n}.wq"))?,
                wk: store.id(&format!("{n}.wk"))?,
                wv: store.id(&format!("{n}.wv"))?,
                wo: store.id(&format!("{n}.wo"))?,
            })
        };
        let ff = |n: &str| -> Result<FfIds> {
            Ok(FfIds {
                w1: store.id(&format!("{n}.w1"))?,
                b1: store.id(&format!("{n}.b1"))?,
                w2: store.id(&format!("{n}.w2"))?,
                b2: store.id(&format!("{n}.b2"))?,
            })
        };
        let enc = (0..cfg.layers)
            .map(|l| {
                Ok(EncLayer {
                    ln1: norm(&format!("enc.{l}.ln1"))?,
                    attn: attn(&format!("enc.{l}.attn"))?,
                    ln2: norm(&format!("enc.{l}.ln2"))?,
                    ff: ff(&format!("enc.{l}.ff"))?,
                })
            })
            .collect::<Result<_>>()?;
        let dec = (0..cfg.layers)
            .map(|l| {
                Ok(DecLayer {
                    ln1: norm(&format!("dec.{l}.ln1"))?,
                    self_attn: attn(&format!("dec.{l}.self"))?,
                    ln2: norm(&format!("dec.{l}.ln2"))?,
                    cross: attn(&format!("dec.{l}.cross"))?,
                    ln3: norm(&format!("dec.{l}.ln3"))?,
                    ff: ff(&format!("dec.{l}.ff"))?,
                })
            })
            .collect::<Result<_>>()?;
        let tok = store.id("emb.tok")?;
        if store.get(tok).shape() != [cfg.vocab_size, cfg.d_model] {
            return Err(Error::Param(format!(
                "token embedding {:?} does not match config",
                store.get(tok).shape()
            )));
        }
        Ok(EmissionModel {
            tok,
            src_pos: store.id("emb.src_pos")?,
            tgt_pos: store.id("emb.tgt_pos")?,
            enc,
            enc_ln: norm("enc.ln")?,
            dec,
            dec_ln: norm("dec.ln")?,
            out_w: store.id("out.w")?,
            out_b: store.id("out.b")?,
            cfg,
        })
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, n: &NormIds) -> Result<Var> {
        let (gain, bias) = (g.param(n.g), g.param(n.b));
        g.layer_norm(x, gain, bias)
    }

    fn project(&self, g: &mut Graph, x: Var, w: ParamId) -> Result<Var> {
        let w = g.param(w);
        g.matmul(x, w)
    }

    /// Multi-head scaled dot-product attention; `keep` is `[rows(q) × rows(k)]`.
    fn attend(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        keep: Option<Rc<Vec<bool>>>,
    ) -> Result<Var> {
        let h = self.cfg.heads;
        let dh = self.cfg.d_model / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(h);
        for i in 0..h {
            let (qh, kh, vh) = if h == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, i * dh, dh)?,
                    g.slice_cols(k, i * dh, dh)?,
                    g.slice_cols(v, i * dh, dh)?,
                )
            };
            let scores = g.matmul_t(qh, kh, false, true)?;
            let scores = g.scale(scores, scale);
            let p = g.masked_softmax(scores, keep.clone())?;
            outs.push(g.matmul(p, vh)?);
        }
        if h == 1 {
            Ok(outs[0])
        } else {
            g.concat_cols(&outs)
        }
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, ff: &FfIds) -> Result<Var> {
        let w1 = g.param(ff.w1);
        let b1 = g.param(ff.b1);
        let w2 = g.param(ff.w2);
        let b2 = g.param(ff.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }

    /// Contextual vectors `[len × d_model]` for the linearized input.
    pub fn encode_graph(&self, g: &mut Graph, lin: &LinearizedInput) -> Result<Var> {
        let n = lin.len();
        let owners = lin.owners();
        let mut pos = vec![0usize; n];
        for span in &lin.triple_spans {
            for (k, p) in span.clone().enumerate() {
                pos[p] = k.min(self.cfg.max_source_positions - 1);
            }
        }
        let mut keep = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                keep[i * n + j] = match (owners[i], owners[j]) {
                    (None, None) => true,
                    (Some(a), Some(b)) => a == b,
                    _ => false,
                };
            }
        }
        let keep = Rc::new(keep);
        let tok = g.param(self.tok);
        let sp = g.param(self.src_pos);
        let e = g.gather_rows(tok, &lin.ids)?;
        let p = g.gather_rows(sp, &pos)?;
        let mut x = g.add(e, p)?;
        for layer in &self.enc {
            let h = self.layer_norm(g, x, &layer.ln1)?;
            let q = self.project(g, h, layer.attn.wq)?;
            let k = self.project(g, h, layer.attn.wk)?;
            let v = self.project(g, h, layer.attn.wv)?;
            let a = self.attend(g, q, k, v, Some(keep.clone()))?;
            let a = self.project(g, a, layer.attn.wo)?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, x, &layer.ln2)?;
            let f = self.feed_forward(g, h, &layer.ff)?;
            x = g.add(x, f)?;
        }
        self.layer_norm(g, x, &self.enc_ln)
    }

    /// One contextual vector per input position.
    pub fn encode(&self, store: &ParamStore, lin: &LinearizedInput) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let v = self.encode_graph(&mut g, lin)?;
        Ok(g.value(v).clone())
    }

    /// Cross-attention keys and values of an encoding, per decoder layer.
    pub fn cross_kv_graph(&self, g: &mut Graph, enc: Var) -> Result<Vec<(Var, Var)>> {
        self.dec
            .iter()
            .map(|l| {
                Ok((
                    self.project(g, enc, l.cross.wk)?,
                    self.project(g, enc, l.cross.wv)?,
                ))
            })
            .collect()
    }

    pub fn cross_cache(&self, store: &ParamStore, lin: &LinearizedInput) -> Result<CrossCache> {
        let mut g = Graph::new(store);
        let enc = self.encode_graph(&mut g, lin)?;
        let kv = self.cross_kv_graph(&mut g, enc)?;
        Ok(CrossCache {
            kv: kv
                .into_iter()
                .map(|(k, v)| (g.value(k).clone(), g.value(v).clone()))
                .collect(),
            len: lin.len(),
        })
    }

    /// Runs the decoder over `tokens` placed after `past_len` earlier
    /// positions. `past` holds those positions' self-attention keys/values
    /// (as graph nodes) when `past_len > 0`. Returns per-position
    /// log-probabilities `[len × V]` and each layer's keys/values for the new
    /// positions.
    #[allow(clippy::type_complexity)]
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        past_len: usize,
        past: &[(Var, Var)],
        cross: &[(Var, Var)],
        cross_keep: &[bool],
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let n = tokens.len();
        let total = past_len + n;
        let positions: Vec<usize> = (past_len..total)
            .map(|p| p.min(self.cfg.max_target_positions - 1))
            .collect();
        let mut causal = vec![false; n * total];
        for i in 0..n {
            for j in 0..=past_len + i {
                causal[i * total + j] = true;
            }
        }
        let causal = Rc::new(causal);
        let cross_keep = tile(cross_keep, n);

        let tok = g.param(self.tok);
        let tp = g.param(self.tgt_pos);
        let e = g.gather_rows(tok, tokens)?;
        let p = g.gather_rows(tp, &positions)?;
        let mut x = g.add(e, p)?;
        let mut new_kv = Vec::with_capacity(self.dec.len());
        for (li, layer) in self.dec.iter().enumerate() {
            let h = self.layer_norm(g, x, &layer.ln1)?;
            let q = self.project(g, h, layer.self_attn.wq)?;
            let k_new = self.project(g, h, layer.self_attn.wk)?;
            let v_new = self.project(g, h, layer.self_attn.wv)?;
            new_kv.push((k_new, v_new));
            let (k, v) = if past_len > 0 {
                let (pk, pv) = past[li];
                (g.concat_rows(&[pk, k_new])?, g.concat_rows(&[pv, v_new])?)
            } else {
                (k_new, v_new)
            };
            let a = self.attend(g, q, k, v, Some(causal.clone()))?;
            let a = self.project(g, a, layer.self_attn.wo)?;
            x = g.add(x, a)?;

            let h = self.layer_norm(g, x, &layer.ln2)?;
            let q = self.project(g, h, layer.cross.wq)?;
            let (ck, cv) = cross[li];
            let a = self.attend(g, q, ck, cv, Some(cross_keep.clone()))?;
            let a = self.project(g, a, layer.cross.wo)?;
            x = g.add(x, a)?;

            let h = self.layer_norm(g, x, &layer.ln3)?;
            let f = self.feed_forward(g, h, &layer.ff)?;
            x = g.add(x, f)?;
        }
        let h = self.layer_norm(g, x, &self.dec_ln)?;
        let w = g.param(self.out_w);
        let b = g.param(self.out_b);
        let logits = g.matmul(h, w)?;
        let logits = g.add_row(logits, b)?;
        Ok((g.log_softmax(logits, None)?, new_kv))
    }

    /// Teacher-forced per-fact log-probabilities `[T]` of `facts` under the
    /// cross-attention mask `cross_keep`. The first `[FS]` of every fact is
    /// input-only; content tokens and `[FE]` are scored.
    pub fn fact_scores_graph(
        &self,
        g: &mut Graph,
        cross: &[(Var, Var)],
        cross_keep: &[bool],
        facts: &FactSequence,
    ) -> Result<Var> {
        let (ids, owner) = facts.flatten();
        let (lp, _) = self.decode_graph(g, &ids[..ids.len() - 1], 0, &[], cross, cross_keep)?;
        let v = self.cfg.vocab_size;
        let mut idx = Vec::with_capacity(ids.len() - 1);
        let mut seg = Vec::with_capacity(ids.len() - 1);
        for i in 0..ids.len() - 1 {
            let target = ids[i + 1];
            idx.push(i * v + target);
            seg.push((target != special::FACT_START).then_some(owner[i + 1]));
        }
        let picked = g.pick(lp, &idx)?;
        g.segment_sum(picked, &seg, facts.len())
    }

    /// `log p(y_t | y_{<t}, z_t = state, x)` for one fact.
    pub fn fact_log_prob(
        &self,
        store: &ParamStore,
        state: &[usize],
        t: usize,
        facts: &FactSequence,
        lin: &LinearizedInput,
        triple_preds: &[usize],
    ) -> Result<f64> {
        if t >= facts.len() {
            return Err(Error::Length(format!("fact {t} of {}", facts.len())));
        }
        if let Some(&p) = state.iter().find(|p| !triple_preds.contains(p)) {
            return Err(Error::PredicateNotInInstance(p));
        }
        let prefix = FactSequence {
            facts: facts.facts[..=t].to_vec(),
        };
        let mut g = Graph::new(store);
        let enc = self.encode_graph(&mut g, lin)?;
        let cross = self.cross_kv_graph(&mut g, enc)?;
        let keep = cross_attn_mask(lin, triple_preds, state);
        let scores = self.fact_scores_graph(&mut g, &cross, &keep, &prefix)?;
        Ok(g.value(scores).data()[t])
    }

    /// Processes `tokens` after the cached prefix; returns the extended cache
    /// and the next-token log-distribution after the last token.
    pub fn extend(
        &self,
        store: &ParamStore,
        cache: &SelfCache,
        tokens: &[usize],
        cross: &CrossCache,
        cross_keep: &[bool],
    ) -> Result<(SelfCache, Vec<f64>)> {
        let mut g = Graph::new(store);
        let past: Vec<(Var, Var)> = cache
            .kv
            .iter()
            .map(|(k, v)| (g.constant(k.clone()), g.constant(v.clone())))
            .collect();
        let cross_vars: Vec<(Var, Var)> = cross
            .kv
            .iter()
            .map(|(k, v)| (g.constant(k.clone()), g.constant(v.clone())))
            .collect();
        if cross_keep.len() != cross.len {
            return Err(Error::Shape("cross mask length".into()));
        }
        let (lp, new_kv) =
            self.decode_graph(&mut g, tokens, cache.len, &past, &cross_vars, cross_keep)?;
        let kv = new_kv
            .iter()
            .enumerate()
            .map(|(l, &(k, v))| {
                let (nk, nv) = (g.value(k), g.value(v));
                match cache.kv.get(l) {
                    Some((pk, pv)) => {
                        let mut kd = pk.data().to_vec();
                        kd.extend_from_slice(nk.data());
                        let mut vd = pv.data().to_vec();
                        vd.extend_from_slice(nv.data());
                        let d = nk.cols();
                        Ok((
                            Tensor::matrix(kd.len() / d, d, kd)?,
                            Tensor::matrix(vd.len() / d, d, vd)?,
                        ))
                    }
                    None => Ok((nk.clone(), nv.clone())),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let lpv = g.value(lp);
        let last = lpv.row(lpv.rows() - 1).to_vec();
        Ok((
            SelfCache {
                kv,
                len: cache.len + tokens.len(),
            },
            last,
        ))
    }

    /// Beam search for one fact. `history` holds the earlier facts with their
    /// markers; the fact's own `[FS]` is appended here. Returns the generated
    /// tokens (ending in `[FE]` unless truncated at `max_len`) and their
    /// summed log-probability.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_fact(
        &self,
        store: &ParamStore,
        history: &[usize],
        cross: &CrossCache,
        cross_keep: &[bool],
        beam_width: usize,
        max_len: usize,
    ) -> Result<(Vec<usize>, f64)> {
        let mut prefix = history.to_vec();
        prefix.push(special::FACT_START);
        let (cache, next) =
            self.extend(store, &SelfCache::default(), &prefix, cross, cross_keep)?;
        beam_search(
            beam_width.max(1),
            max_len.max(1),
            cache,
            next,
            generatable,
            special::FACT_END,
            |cache, tok| self.extend(store, cache, &[tok], cross, cross_keep),
        )
    }
}

/// Tokens a fact may contain.
pub fn generatable(tok: usize) -> bool {
    !matches!(
        tok,
        special::PAD | special::CLS | special::SEP | special::FACT_START
    )
}

struct Hyp<C> {
    tokens: Vec<usize>,
    score: f64,
    state: C,
    next: Vec<f64>,
}

/// Length-unnormalized beam search over tokens accepted by `allowed`, ending
/// at `end` or after `max_len` tokens; ties go to the lexicographically
/// smaller token sequence. `step` feeds one token and returns the new state
/// and the next-token log-distribution.
pub fn beam_search<C, A, F>(
    beam_width: usize,
    max_len: usize,
    init: C,
    first: Vec<f64>,
    allowed: A,
    end: usize,
    mut step: F,
) -> Result<(Vec<usize>, f64)>
where
    A: Fn(usize) -> bool,
    F: FnMut(&C, usize) -> Result<(C, Vec<f64>)>,
{
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        state: init,
        next: first,
    }];
    let mut best: Option<(Vec<usize>, f64)> = None;
    let better =
        |a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)| a.1 > b.1 || (a.1 == b.1 && a.0 < b.0);
    while !live.is_empty() {
        let mut cands: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            for (tok, &lp) in h.next.iter().enumerate() {
                if !allowed(tok) || lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut toks = h.tokens.clone();
                toks.push(tok);
                cands.push((h.score + lp, toks, hi));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        cands.truncate(beam_width);
        let mut next_live = Vec::new();
        for (score, toks, hi) in cands {
            let done = *toks.last().unwrap() == end || toks.len() >= max_len;
            if done {
                let c = (toks, score);
                if best.as_ref().map_or(true, |b| better(&c, b)) {
                    best = Some(c);
                }
            } else {
                let (state, next) = step(&live[hi].state, *toks.last().unwrap())?;
                next_live.push(Hyp {
                    tokens: toks,
                    score,
                    state,
                    next,
                });
            }
        }
        // Scores only decrease, so live hypotheses that cannot beat the best
        // finished one are dropped.
        if let Some((_, b)) = &best {
            next_live.retain(|h| h.score > *b);
        }
        live = next_live;
    }
    best.ok_or_else(|| Error::Length("beam search produced no hypothesis".into()))
}
