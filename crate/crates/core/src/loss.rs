//! Matching losses for groups of source objects tied to one target.
//!
//! Each object in a group gets a matching score: the log probability that it
//! matches the target (softmax over candidate targets of embedding inner
//! products) plus the log of its group weight (sigmoid of the similarity
//! between the object's weighting features and a context vector built from
//! the rest of the group). The max-matching loss trains only on the object
//! with the best score; the ablation variants drop the selection, the
//! weighting, or both.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::math::{dot, log_sigmoid, logsumexp, neg_kl, sigmoid, softmax, ProbVec, PROB_FLOOR};
use crate::model::{
    accumulate_map_grad, GradBuffer, MappingKind, ModelParams, ObjectRef, WeightFeatures,
};
use crate::{Error, Result};
use rand::Rng;

/// One coarse-grained relation: a group of source objects and their target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub group: Vec<ObjectRef>,
    pub target: ObjectRef,
}

impl GroupSample {
    pub fn new(group: Vec<ObjectRef>, target: ObjectRef) -> Result<Self> {
        if group.is_empty() {
            return Err(Error::Empty("group"));
        }
        Ok(Self { group, target })
    }

    pub fn k(&self) -> usize {
        self.group.len()
    }
}

/// Every candidate target the pair-match denominator may range over.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPool {
    refs: Vec<ObjectRef>,
}

impl TargetPool {
    pub fn new(refs: Vec<ObjectRef>) -> Result<Self> {
        if refs.is_empty() {
            return Err(Error::Empty("target pool"));
        }
        Ok(Self { refs })
    }

    /// Pool of categorical targets `0..vocab`.
    pub fn from_vocab(vocab: usize) -> Result<Self> {
        Self::new((0..vocab).map(ObjectRef::Id).collect())
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn get(&self, i: usize) -> &ObjectRef {
        &self.refs[i]
    }
}

/// A training-ready dataset: group samples, the candidate target pool, and
/// each sample's true-target index into that pool.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub samples: Vec<GroupSample>,
    pub pool: TargetPool,
    pub target_indices: Vec<usize>,
}

impl TrainSet {
    pub fn new(samples: Vec<GroupSample>, pool: TargetPool, target_indices: Vec<usize>) -> Result<Self> {
        let set = Self {
            samples,
            pool,
            target_indices,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if self.samples.len() != self.target_indices.len() {
            return Err(Error::DimensionMismatch {
                expected: self.samples.len(),
                got: self.target_indices.len(),
            });
        }
        for &t in &self.target_indices {
            if t >= self.pool.len() {
                return Err(Error::IdOutOfVocab {
                    id: t,
                    vocab: self.pool.len(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Denominator candidates for one sample: pool indices with the true target
/// appearing exactly once. Either the full pool or a seeded uniform sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet {
    indices: Vec<usize>,
    true_pos: usize,
}

/// Pools at most this large are enumerated in full; larger ones fall back to
/// seeded uniform sampling.
pub const FULL_VOCAB_LIMIT: usize = 10_000;

/// Default number of sampled negatives when the pool exceeds the limit.
pub const DEFAULT_NEGATIVES: usize = 100;

impl NegativeSet {
    pub fn new(indices: Vec<usize>, true_pos: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("negative set"));
        }
        if true_pos >= indices.len() {
            return Err(Error::InvalidNegativeSet(format!(
                "true position {true_pos} out of range {}",
                indices.len()
            )));
        }
        let mut seen = HashSet::with_capacity(indices.len());
        for &i in &indices {
            if !seen.insert(i) {
                return Err(Error::InvalidNegativeSet(format!("duplicate candidate {i}")));
            }
        }
        Ok(Self { indices, true_pos })
    }

    /// The whole pool, in order.
    pub fn full(pool_len: usize, true_index: usize) -> Result<Self> {
        if true_index >= pool_len {
            return Err(Error::InvalidNegativeSet(format!(
                "true index {true_index} outside pool of {pool_len}"
            )));
        }
        Ok(Self {
            indices: (0..pool_len).collect(),
            true_pos: true_index,
        })
    }

    /// The true target plus `m` distinct uniform negatives.
    pub fn sampled<R: Rng>(pool_len: usize, true_index: usize, m: usize, rng: &mut R) -> Result<Self> {
        if true_index >= pool_len {
            return Err(Error::InvalidNegativeSet(format!(
                "true index {true_index} outside pool of {pool_len}"
            )));
        }
        let want = (m + 1).min(pool_len);
        let mut indices = Vec::with_capacity(want);
        let mut seen = HashSet::with_capacity(want);
        indices.push(true_index);
        seen.insert(true_index);
        while indices.len() < want {
            let j = rng.gen_range(0..pool_len);
            if seen.insert(j) {
                indices.push(j);
            }
        }
        Ok(Self {
            indices,
            true_pos: 0,
        })
    }

    /// Full pool when small enough, sampled otherwise.
    pub fn auto<R: Rng>(pool_len: usize, true_index: usize, m: usize, rng: &mut R) -> Result<Self> {
        if pool_len <= FULL_VOCAB_LIMIT {
            Self::full(pool_len, true_index)
        } else {
            Self::sampled(pool_len, true_index, m, rng)
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn true_pos(&self) -> usize {
        self.true_pos
    }
}

/// Similarity measure used by the group weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Dot,
    NegKl,
}

/// The four training objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// Negative best combined score: selection and weighting.
    MaxMatching,
    /// Every object treated as matched to the target; no weighting.
    Pairwise,
    /// Sum of combined scores over the group; no selection.
    Matching,
    /// Selection on the pair term alone; no weighting.
    Maximizing,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::MaxMatching,
        LossVariant::Pairwise,
        LossVariant::Matching,
        LossVariant::Maximizing,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::MaxMatching => "max-matching",
            LossVariant::Pairwise => "pairwise",
            LossVariant::Matching => "matching",
            LossVariant::Maximizing => "maximizing",
        }
    }

    fn uses_weights(&self) -> bool {
        matches!(self, LossVariant::MaxMatching | LossVariant::Matching)
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-matching" => Ok(LossVariant::MaxMatching),
            "pairwise" => Ok(LossVariant::Pairwise),
            "matching" => Ok(LossVariant::Matching),
            "maximizing" => Ok(LossVariant::Maximizing),
            other => Err(Error::InvalidConfig(format!("unknown loss variant `{other}`"))),
        }
    }
}

/// How a loss is evaluated: variant, term tradeoff, and the weighting setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Tradeoff multiplying the log group weight. The two terms are equally
    /// combined by default.
    pub lambda: f64,
    pub similarity: Similarity,
    pub weight_features: WeightFeatures,
}

impl LossConfig {
    pub fn new(variant: LossVariant, similarity: Similarity, weight_features: WeightFeatures) -> Self {
        Self {
            variant,
            lambda: 1.0,
            similarity,
            weight_features,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        if self.similarity == Similarity::NegKl && self.weight_features != WeightFeatures::Prob {
            return Err(Error::InvalidConfig(
                "neg-KL similarity needs probabilistic weighting features".into(),
            ));
        }
        Ok(())
    }

    pub fn with_variant(mut self, variant: LossVariant) -> Self {
        self.variant = variant;
        self
    }
}

/// Per-group diagnostics for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchBreakdown {
    /// `log P(target | object_k)` per group object.
    pub pair_log_probs: Vec<f64>,
    /// Row k: similarity of object k to each other object, in group order.
    pub similarities: Vec<Vec<f64>>,
    /// Rows of `similarities` pushed through softmax.
    pub norm_similarities: Vec<Vec<f64>>,
    /// Row k: similarity-weighted sum of the other objects' features.
    pub context_vectors: Vec<Vec<f64>>,
    /// `log P(object_k | group)`, zero for singleton groups.
    pub group_log_weights: Vec<f64>,
    /// `pair_log_probs + lambda * group_log_weights`.
    pub scores: Vec<f64>,
    /// Argmax of `scores`, smallest index on ties.
    pub selected: usize,
}

/// Target-pool embeddings resolved against one parameter snapshot. Rebuild
/// after every optimizer step.
pub struct LossContext<'a> {
    pool: &'a TargetPool,
    q: Vec<PoolEmbed>,
}

enum PoolEmbed {
    /// Target is a categorical id and `g` is an embedding: read the row.
    GRow(usize),
    Owned(Vec<f64>),
}

impl<'a> LossContext<'a> {
    pub fn new(params: &ModelParams, pool: &'a TargetPool) -> Result<Self> {
        let mut q = Vec::with_capacity(pool.len());
        for r in &pool.refs {
            match (params.g_spec.kind, r) {
                (MappingKind::Embedding, ObjectRef::Id(i)) => {
                    if *i >= params.g_spec.in_dim {
                        return Err(Error::IdOutOfVocab {
                            id: *i,
                            vocab: params.g_spec.in_dim,
                        });
                    }
                    q.push(PoolEmbed::GRow(*i));
                }
                _ => q.push(PoolEmbed::Owned(params.forward_g(r)?)),
            }
        }
        Ok(Self { pool, q })
    }

    pub fn pool(&self) -> &TargetPool {
        self.pool
    }

    fn q<'b>(&'b self, params: &'b ModelParams, pool_idx: usize) -> &'b [f64] {
        match &self.q[pool_idx] {
            PoolEmbed::GRow(i) => params.g.row(*i),
            PoolEmbed::Owned(v) => v,
        }
    }
}

struct PairTerms {
    /// Source embeddings, one per group object.
    e: Vec<Vec<f64>>,
    /// Logits rows, one per group object, in negative-set order.
    logits: Vec<Vec<f64>>,
    log_probs: Vec<f64>,
}

fn pair_terms(
    params: &ModelParams,
    sample: &GroupSample,
    negs: &NegativeSet,
    ctx: &LossContext,
) -> Result<PairTerms> {
    let mut e = Vec::with_capacity(sample.k());
    let mut logits = Vec::with_capacity(sample.k());
    let mut log_probs = Vec::with_capacity(sample.k());
    for x in &sample.group {
        let ek = params.forward_f(x)?;
        let mut row = Vec::with_capacity(negs.len());
        for &j in negs.indices() {
            row.push(dot(&ek, ctx.q(params, j))?);
        }
        let lp = row[negs.true_pos()] - logsumexp(&row);
        e.push(ek);
        logits.push(row);
        log_probs.push(lp);
    }
    Ok(PairTerms { e, logits, log_probs })
}

/// Log probability that `x` matches the true target against the candidate
/// set: `f(x)'g(y_true) - logsumexp over candidates`. Always <= 0.
pub fn pair_match_log_prob(
    params: &ModelParams,
    x: &ObjectRef,
    negs: &NegativeSet,
    pool: &TargetPool,
) -> Result<f64> {
    let ctx = LossContext::new(params, pool)?;
    let e = params.forward_f(x)?;
    let mut row = Vec::with_capacity(negs.len());
    for &j in negs.indices() {
        row.push(dot(&e, ctx.q(params, j))?);
    }
    Ok(row[negs.true_pos()] - logsumexp(&row))
}

/// Step-by-step output of the group weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupWeighting {
    pub similarities: Vec<Vec<f64>>,
    pub norm_similarities: Vec<Vec<f64>>,
    pub context_vectors: Vec<Vec<f64>>,
    pub group_log_weights: Vec<f64>,
}

fn sim_value(sim: Similarity, a: &[f64], b: &[f64]) -> Result<f64> {
    match sim {
        Similarity::Dot => dot(a, b),
        Similarity::NegKl => {
            let p = ProbVec::new(a.to_vec())?;
            let q = ProbVec::new(b.to_vec())?;
            neg_kl(&p, &q)
        }
    }
}

struct WeightTerms {
    h: Vec<Vec<f64>>,
    sims: Vec<Vec<f64>>,
    norm_sims: Vec<Vec<f64>>,
    contexts: Vec<Vec<f64>>,
    /// Similarity of each object's context vector to its own features.
    context_sim: Vec<f64>,
    glw: Vec<f64>,
}

fn weight_terms(
    params: &ModelParams,
    sample: &GroupSample,
    sim: Similarity,
    mode: WeightFeatures,
) -> Result<WeightTerms> {
    let k = sample.k();
    let h: Vec<Vec<f64>> = sample
        .group
        .iter()
        .map(|x| params.forward_h(x, mode))
        .collect::<Result<_>>()?;

    if k == 1 {
        // No other objects to weigh against: the weight is pinned to 1.
        return Ok(WeightTerms {
            h,
            sims: vec![vec![]],
            norm_sims: vec![vec![]],
            contexts: vec![vec![]],
            context_sim: vec![0.0],
            glw: vec![0.0],
        });
    }

    let dim = h[0].len();
    let mut sims = Vec::with_capacity(k);
    let mut norm_sims = Vec::with_capacity(k);
    let mut contexts = Vec::with_capacity(k);
    let mut context_sim = Vec::with_capacity(k);
    let mut glw = Vec::with_capacity(k);
    for i in 0..k {
        let others: Vec<usize> = (0..k).filter(|&l| l != i).collect();
        let mut s = Vec::with_capacity(k - 1);
        for &l in &others {
            s.push(sim_value(sim, &h[i], &h[l])?);
        }
        let sn = softmax(&s).into_vec();
        let mut c = vec![0.0; dim];
        for (w, &l) in sn.iter().zip(&others) {
            for (ci, hi) in c.iter_mut().zip(&h[l]) {
                *ci += w * hi;
            }
        }
        let u = sim_value(sim, &c, &h[i])?;
        sims.push(s);
        norm_sims.push(sn);
        contexts.push(c);
        context_sim.push(u);
        glw.push(log_sigmoid(u));
    }
    Ok(WeightTerms {
        h,
        sims,
        norm_sims,
        contexts,
        context_sim,
        glw,
    })
}

/// The group-weighting steps: per-object similarities to the rest of the
/// group, softmax normalization, context vectors, and log sigmoid weights.
/// Singleton groups get log weight zero.
pub fn group_weights(
    params: &ModelParams,
    sample: &GroupSample,
    sim: Similarity,
    mode: WeightFeatures,
) -> Result<GroupWeighting> {
    if sim == Similarity::NegKl && mode != WeightFeatures::Prob {
        return Err(Error::InvalidConfig(
            "neg-KL similarity needs probabilistic weighting features".into(),
        ));
    }
    let wt = weight_terms(params, sample, sim, mode)?;
    Ok(GroupWeighting {
        similarities: wt.sims,
        norm_similarities: wt.norm_sims,
        context_vectors: wt.contexts,
        group_log_weights: wt.glw,
    })
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn combined_scores(plp: &[f64], glw: &[f64], lambda: f64) -> Vec<f64> {
    plp.iter().zip(glw).map(|(p, w)| p + lambda * w).collect()
}

/// The max-matching objective with full per-group diagnostics.
pub fn max_matching_loss(
    params: &ModelParams,
    sample: &GroupSample,
    negs: &NegativeSet,
    ctx: &LossContext,
    cfg: &LossConfig,
) -> Result<(f64, MatchBreakdown)> {
    cfg.validate()?;
    let pt = pair_terms(params, sample, negs, ctx)?;
    let wt = weight_terms(params, sample, cfg.similarity, cfg.weight_features)?;
    let scores = combined_scores(&pt.log_probs, &wt.glw, cfg.lambda);
    let selected = argmax_first(&scores);
    let loss = -scores[selected];
    Ok((
        loss,
        MatchBreakdown {
            pair_log_probs: pt.log_probs,
            similarities: wt.sims,
            norm_similarities: wt.norm_sims,
            context_vectors: wt.contexts,
            group_log_weights: wt.glw,
            scores,
            selected,
        },
    ))
}

/// `logsumexp` over the combined scores: the log of the total matching
/// probability this loss lower-bounds. Always >= the best score.
pub fn total_probability_objective(
    params: &ModelParams,
    sample: &GroupSample,
    negs: &NegativeSet,
    ctx: &LossContext,
    cfg: &LossConfig,
) -> Result<f64> {
    let pt = pair_terms(params, sample, negs, ctx)?;
    let wt = weight_terms(params, sample, cfg.similarity, cfg.weight_features)?;
    let scores = combined_scores(&pt.log_probs, &wt.glw, cfg.lambda);
    Ok(logsumexp(&scores))
}

/// Evaluate the configured variant on one sample.
pub fn loss_forward(
    params: &ModelParams,
    sample: &GroupSample,
    negs: &NegativeSet,
    ctx: &LossContext,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let pt = pair_terms(params, sample, negs, ctx)?;
    match cfg.variant {
        LossVariant::Pairwise => Ok(pt.log_probs.iter().map(|p| -p).sum()),
        LossVariant::Maximizing => Ok(-pt.log_probs[argmax_first(&pt.log_probs)]),
        LossVariant::Matching | LossVariant::MaxMatching => {
            let wt = weight_terms(params, sample, cfg.similarity, cfg.weight_features)?;
            let scores = combined_scores(&pt.log_probs, &wt.glw, cfg.lambda);
            if cfg.variant == LossVariant::Matching {
                Ok(scores.iter().map(|s| -s).sum())
            } else {
                Ok(-scores[argmax_first(&scores)])
            }
        }
    }
}

/// Evaluate one of the ablation objectives, overriding the configured
/// variant.
pub fn ablation_loss(
    params: &ModelParams,
    sample: &GroupSample,
    negs: &NegativeSet,
    ctx: &LossContext,
    variant: LossVariant,
    cfg: &LossConfig,
) -> Result<f64> {
    loss_forward(params, sample, negs, ctx, &cfg.with_variant(variant))
}

fn ln_floored(x: f64) -> f64 {
    x.max(PROB_FLOOR).ln()
}

/// Partials of `S(a, b)` with upstream scalar `g`, added into `da`/`db`.
fn sim_backward(sim: Similarity, a: &[f64], b: &[f64], g: f64, da: &mut [f64], db: &mut [f64]) {
    match sim {
        Similarity::Dot => {
            for i in 0..a.len() {
                da[i] += g * b[i];
                db[i] += g * a[i];
            }
        }
        Similarity::NegKl => {
            // S = -sum_i a_i (ln a_i - ln b_i)
            for i in 0..a.len() {
                da[i] += g * (-(ln_floored(a[i]) - ln_floored(b[i])) - 1.0);
                db[i] += g * (a[i] / b[i].max(PROB_FLOOR));
            }
        }
    }
}

/// Accumulate `dL/dparams` for one sample into `buffer` and return the loss.
///
/// The max in the selecting variants is handled as a subgradient: only the
/// argmax object propagates, but through its full graph — the pair term
/// touches `f` of that object and `g` of every candidate, and the weighting
/// term touches the features of every group member via the normalized
/// similarities and the context vector.
pub fn loss_backward(
    params: &ModelParams,
    sample: &GroupSample,
    negs: &NegativeSet,
    ctx: &LossContext,
    cfg: &LossConfig,
    buffer: &mut GradBuffer,
) -> Result<f64> {
    cfg.validate()?;
    let k = sample.k();
    let d = params.dim();
    let pt = pair_terms(params, sample, negs, ctx)?;
    let needs_weights = cfg.variant.uses_weights();
    let wt = if needs_weights {
        Some(weight_terms(params, sample, cfg.similarity, cfg.weight_features)?)
    } else {
        None
    };

    // Upstream d(loss)/d(pair_log_prob_k) and d(loss)/d(group_log_weight_k).
    let mut alpha = vec![0.0; k];
    let mut beta = vec![0.0; k];
    let loss = match cfg.variant {
        LossVariant::Pairwise => {
            alpha.fill(-1.0);
            pt.log_probs.iter().map(|p| -p).sum()
        }
        LossVariant::Maximizing => {
            let sel = argmax_first(&pt.log_probs);
            alpha[sel] = -1.0;
            -pt.log_probs[sel]
        }
        LossVariant::Matching => {
            let wt = wt.as_ref().expect("weights computed");
            alpha.fill(-1.0);
            beta.fill(-cfg.lambda);
            let scores = combined_scores(&pt.log_probs, &wt.glw, cfg.lambda);
            scores.iter().map(|s| -s).sum()
        }
        LossVariant::MaxMatching => {
            let wt = wt.as_ref().expect("weights computed");
            let scores = combined_scores(&pt.log_probs, &wt.glw, cfg.lambda);
            let sel = argmax_first(&scores);
            alpha[sel] = -1.0;
            beta[sel] = -cfg.lambda;
            -scores[sel]
        }
    };

    // dL/d(source embedding) per object; dL/d(candidate embedding) per
    // candidate, in negative-set order.
    let mut de = vec![vec![0.0; d]; k];
    let mut dq = vec![vec![0.0; d]; negs.len()];

    // Pair term: softmax cross-entropy over the candidate logits.
    for i in 0..k {
        if alpha[i] == 0.0 {
            continue;
        }
        let probs = softmax(&pt.logits[i]).into_vec();
        for (j, &jpool) in negs.indices().iter().enumerate() {
            let indicator = if j == negs.true_pos() { 1.0 } else { 0.0 };
            let dz = alpha[i] * (indicator - probs[j]);
            if dz == 0.0 {
                continue;
            }
            let qj = ctx.q(params, jpool);
            for t in 0..d {
                de[i][t] += dz * qj[t];
                dq[j][t] += dz * pt.e[i][t];
            }
        }
    }

    // Weighting term: chain through sigmoid, context similarity, context
    // vector, normalized similarities, and pairwise similarities into the
    // weighting features of every group member.
    if let Some(wt) = &wt {
        if k > 1 && beta.iter().any(|b| *b != 0.0) {
            let hdim = wt.h[0].len();
            let mut dh = vec![vec![0.0; hdim]; k];
            for i in 0..k {
                if beta[i] == 0.0 {
                    continue;
                }
                let gamma = beta[i] * (1.0 - sigmoid(wt.context_sim[i]));
                let others: Vec<usize> = (0..k).filter(|&l| l != i).collect();

                let mut dc = vec![0.0; hdim];
                sim_backward(cfg.similarity, &wt.contexts[i], &wt.h[i], gamma, &mut dc, &mut dh[i]);

                // Context vector: c = sum_m sn_m h_{o_m}.
                let sn = &wt.norm_sims[i];
                let mut dsn = vec![0.0; others.len()];
                for (m, &l) in others.iter().enumerate() {
                    dsn[m] = dot(&dc, &wt.h[l])?;
                    for t in 0..hdim {
                        dh[l][t] += sn[m] * dc[t];
                    }
                }

                // Softmax Jacobian back to raw similarities.
                let inner: f64 = sn.iter().zip(&dsn).map(|(s, g)| s * g).sum();
                for (m, &l) in others.iter().enumerate() {
                    let ds = sn[m] * (dsn[m] - inner);
                    if ds == 0.0 {
                        continue;
                    }
                    let (left, right) = split_two(&mut dh, i, l);
                    sim_backward(cfg.similarity, &wt.h[i], &wt.h[l], ds, left, right);
                }
            }

            // Map feature gradients back through the weighting features.
            match cfg.weight_features {
                WeightFeatures::Embed => {
                    for i in 0..k {
                        for t in 0..d {
                            de[i][t] += dh[i][t];
                        }
                    }
                }
                WeightFeatures::Prob => {
                    let vocab = params.target_vocab().ok_or(Error::KindMismatch(
                        "probabilistic weighting features need an enumerable target vocabulary",
                    ))?;
                    for i in 0..k {
                        let hi = &wt.h[i];
                        let inner: f64 = hi.iter().zip(&dh[i]).map(|(h, g)| h * g).sum();
                        for y in 0..vocab {
                            let dw = hi[y] * (dh[i][y] - inner);
                            if dw == 0.0 {
                                continue;
                            }
                            let gy = params.g.row(y);
                            for t in 0..d {
                                de[i][t] += dw * gy[t];
                            }
                            buffer.g.add_row(y, &pt.e[i], dw)?;
                        }
                    }
                }
            }
        }
    }

    for (i, x) in sample.group.iter().enumerate() {
        accumulate_map_grad(&mut buffer.f, &params.f_spec, x, &de[i])?;
    }
    for (j, &jpool) in negs.indices().iter().enumerate() {
        accumulate_map_grad(&mut buffer.g, &params.g_spec, ctx.pool.get(jpool), &dq[j])?;
    }

    Ok(loss)
}

/// Disjoint mutable borrows of rows `i` and `l` of `dh`.
fn split_two<'a>(dh: &'a mut [Vec<f64>], i: usize, l: usize) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_ne!(i, l);
    if i < l {
        let (a, b) = dh.split_at_mut(l);
        (&mut a[i], &mut b[0])
    } else {
        let (a, b) = dh.split_at_mut(i);
        (&mut b[0], &mut a[l])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::log_softmax;
    use crate::model::{init_params, MappingSpec, Matrix};

    fn simple_cfg() -> LossConfig {
        LossConfig::new(LossVariant::MaxMatching, Similarity::Dot, WeightFeatures::Embed)
    }

    /// f: embedding over group ids; g: embedding over target ids.
    fn embed_setup(src_vocab: usize, tgt_vocab: usize, d: usize, seed: u64) -> (ModelParams, TargetPool) {
        let params = init_params(
            MappingSpec::embedding(src_vocab, d),
            MappingSpec::embedding(tgt_vocab, d),
            seed,
        )
        .unwrap();
        let pool = TargetPool::from_vocab(tgt_vocab).unwrap();
        (params, pool)
    }

    #[test]
    fn negative_set_invariants() {
        let negs = NegativeSet::full(5, 3).unwrap();
        assert_eq!(negs.len(), 5);
        assert_eq!(negs.indices()[negs.true_pos()], 3);
        assert!(NegativeSet::full(5, 5).is_err());
        assert!(NegativeSet::new(vec![0, 1, 1], 0).is_err());

        let mut rng = crate::rng::substream(0, "negs");
        let negs = NegativeSet::sampled(1000, 7, 20, &mut rng).unwrap();
        assert_eq!(negs.len(), 21);
        assert_eq!(negs.indices()[negs.true_pos()], 7);
        let uniq: std::collections::HashSet<_> = negs.indices().iter().collect();
        assert_eq!(uniq.len(), negs.len());
        // Sampling cannot exceed the pool.
        let negs = NegativeSet::sampled(4, 0, 100, &mut rng).unwrap();
        assert_eq!(negs.len(), 4);
    }

    #[test]
    fn pair_match_equal_logits_and_zero_params() {
        let (mut params, pool) = embed_setup(2, 2, 3, 1);
        params.f.fill_zero();
        params.g.fill_zero();
        let negs = NegativeSet::full(2, 0).unwrap();
        let lp = pair_match_log_prob(&params, &ObjectRef::id(0), &negs, &pool).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);

        let (mut params, pool) = embed_setup(2, 7, 3, 1);
        params.f.fill_zero();
        params.g.fill_zero();
        let negs = NegativeSet::full(7, 4).unwrap();
        let lp = pair_match_log_prob(&params, &ObjectRef::id(1), &negs, &pool).unwrap();
        assert!((lp - (1.0f64 / 7.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn pair_match_hand_logits() {
        // One source embedding [1]; target embeddings [2], [1], [0] give
        // logits [2, 1, 0] with the true target first.
        let (mut params, pool) = embed_setup(1, 3, 1, 0);
        params.f = Matrix::from_data(1, 1, vec![1.0]).unwrap();
        params.g = Matrix::from_data(3, 1, vec![2.0, 1.0, 0.0]).unwrap();
        let negs = NegativeSet::full(3, 0).unwrap();
        let lp = pair_match_log_prob(&params, &ObjectRef::id(0), &negs, &pool).unwrap();
        let expected = 2.0 - (2.0f64.exp() + 1.0f64.exp() + 1.0).ln();
        assert!((lp - expected).abs() < 1e-12);
        assert!((lp - -0.40760596444438104).abs() < 1e-10);
        assert!(lp <= 0.0);
    }

    #[test]
    fn group_weights_singleton_is_exactly_one() {
        let (params, _pool) = embed_setup(3, 3, 4, 5);
        let sample = GroupSample::new(vec![ObjectRef::id(1)], ObjectRef::id(0)).unwrap();
        let w = group_weights(&params, &sample, Similarity::Dot, WeightFeatures::Embed).unwrap();
        assert_eq!(w.group_log_weights, vec![0.0]);
    }

    #[test]
    fn group_weights_identical_pair() {
        // Two objects with the same features v: context = v for both, so the
        // weight is sigmoid(v . v).
        let (mut params, _pool) = embed_setup(2, 3, 2, 0);
        params.f = Matrix::from_data(2, 2, vec![0.6, -0.2, 0.6, -0.2]).unwrap();
        let sample =
            GroupSample::new(vec![ObjectRef::id(0), ObjectRef::id(1)], ObjectRef::id(0)).unwrap();
        let w = group_weights(&params, &sample, Similarity::Dot, WeightFeatures::Embed).unwrap();
        let v2 = 0.6 * 0.6 + 0.2 * 0.2;
        for glw in &w.group_log_weights {
            assert!((glw - sigmoid(v2).ln()).abs() < 1e-12);
        }
        for c in &w.context_vectors {
            assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - -0.2).abs() < 1e-15);
        }
    }

    /// Literal transcription of the weighting steps, kept independent of the
    /// implementation above.
    fn oracle_weights(h: &[Vec<f64>]) -> Vec<f64> {
        let k = h.len();
        let mut out = Vec::new();
        for i in 0..k {
            let others: Vec<&Vec<f64>> = (0..k).filter(|&l| l != i).map(|l| &h[l]).collect();
            let s: Vec<f64> = others
                .iter()
                .map(|o| o.iter().zip(&h[i]).map(|(a, b)| a * b).sum())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let sn: Vec<f64> = exps.iter().map(|x| x / z).collect();
            let dim = h[0].len();
            let mut c = vec![0.0; dim];
            for (w, o) in sn.iter().zip(&others) {
                for t in 0..dim {
                    c[t] += w * o[t];
                }
            }
            let u: f64 = c.iter().zip(&h[i]).map(|(a, b)| a * b).sum();
            out.push((1.0 / (1.0 + (-u).exp())).ln());
        }
        out
    }

    #[test]
    fn group_weights_match_direct_oracle() {
        let rows = vec![0.3, -0.7, 0.2, 0.9, 0.1, -0.4, -0.5, 0.8, 0.6];
        let (mut params, _pool) = embed_setup(3, 3, 3, 0);
        params.f = Matrix::from_data(3, 3, rows.clone()).unwrap();
        let sample = GroupSample::new(
            vec![ObjectRef::id(0), ObjectRef::id(1), ObjectRef::id(2)],
            ObjectRef::id(0),
        )
        .unwrap();
        let got = group_weights(&params, &sample, Similarity::Dot, WeightFeatures::Embed).unwrap();
        let h: Vec<Vec<f64>> = rows.chunks(3).map(|c| c.to_vec()).collect();
        let want = oracle_weights(&h);
        for (g, w) in got.group_log_weights.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn max_matching_loss_matches_bruteforce_over_k() {
        for seed in 0..20 {
            let (params, pool) = embed_setup(6, 4, 3, seed);
            let negs = NegativeSet::full(4, 2).unwrap();
            let ctx = LossContext::new(&params, &pool).unwrap();
            let sample = GroupSample::new(
                vec![ObjectRef::id(0), ObjectRef::id(2), ObjectRef::id(5)],
                ObjectRef::id(2),
            )
            .unwrap();
            let cfg = simple_cfg();
            let (loss, bd) = max_matching_loss(&params, &sample, &negs, &ctx, &cfg).unwrap();

            // Exhaustive: negate each per-object score computed from the
            // public single-object surfaces, take the minimum.
            let w = group_weights(&params, &sample, cfg.similarity, cfg.weight_features).unwrap();
            let mut best = f64::INFINITY;
            for (i, x) in sample.group.iter().enumerate() {
                let plp = pair_match_log_prob(&params, x, &negs, &pool).unwrap();
                best = best.min(-(plp + w.group_log_weights[i]));
            }
            assert!((loss - best).abs() < 1e-12);
            assert!(loss >= 0.0);
            for (i, s) in bd.scores.iter().enumerate() {
                assert!(loss <= -s + 1e-15 || i == bd.selected);
                assert!(-loss >= *s - 1e-15);
            }
        }
    }

    #[test]
    fn scores_additive_bit_exact_at_default_lambda() {
        let (params, pool) = embed_setup(5, 4, 3, 9);
        let negs = NegativeSet::full(4, 1).unwrap();
        let ctx = LossContext::new(&params, &pool).unwrap();
        let sample = GroupSample::new(
            vec![ObjectRef::id(1), ObjectRef::id(3), ObjectRef::id(4)],
            ObjectRef::id(1),
        )
        .unwrap();
        let (_, bd) = max_matching_loss(&params, &sample, &negs, &ctx, &simple_cfg()).unwrap();
        for i in 0..bd.scores.len() {
            assert_eq!(bd.scores[i], bd.pair_log_probs[i] + bd.group_log_weights[i]);
            assert!(bd.group_log_weights[i] < 0.0);
        }
        let sums: Vec<f64> = bd.norm_similarities.iter().map(|r| r.iter().sum()).collect();
        for s in sums {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn total_probability_bounds_best_score() {
        let cfg = simple_cfg();
        for seed in 0..50 {
            let (params, pool) = embed_setup(8, 5, 4, seed);
            let negs = NegativeSet::full(5, 0).unwrap();
            let ctx = LossContext::new(&params, &pool).unwrap();
            let kk = 1 + (seed as usize % 4);
            let group: Vec<ObjectRef> = (0..kk).map(|i| ObjectRef::id(i % 8)).collect();
            let sample = GroupSample::new(group, ObjectRef::id(0)).unwrap();
            let (loss, _) = max_matching_loss(&params, &sample, &negs, &ctx, &cfg).unwrap();
            let upper = total_probability_objective(&params, &sample, &negs, &ctx, &cfg).unwrap();
            assert!(upper >= -loss);
            assert!(upper <= -loss + (kk as f64).ln() + 1e-12);
            if kk == 1 {
                assert_eq!(upper, -loss);
            }
        }
    }

    #[test]
    fn ablations_coincide_for_singleton_groups() {
        let (params, pool) = embed_setup(4, 6, 3, 77);
        let negs = NegativeSet::full(6, 3).unwrap();
        let ctx = LossContext::new(&params, &pool).unwrap();
        let sample = GroupSample::new(vec![ObjectRef::id(2)], ObjectRef::id(3)).unwrap();
        let cfg = simple_cfg();
        let values: Vec<f64> = LossVariant::ALL
            .iter()
            .map(|v| ablation_loss(&params, &sample, &negs, &ctx, *v, &cfg).unwrap())
            .collect();
        for v in &values {
            assert_eq!(*v, values[0]);
        }
        // Equal to softmax cross-entropy computed through the kernel route.
        let e = params.forward_f(&ObjectRef::id(2)).unwrap();
        let logits: Vec<f64> = (0..6).map(|y| dot(&e, params.g.row(y)).unwrap()).collect();
        let ce = -log_softmax(&logits)[3];
        assert_eq!(values[0], ce);
    }

    #[test]
    fn ablation_identities() {
        let (params, pool) = embed_setup(7, 5, 4, 3);
        let negs = NegativeSet::full(5, 2).unwrap();
        let ctx = LossContext::new(&params, &pool).unwrap();
        let cfg = simple_cfg();
        for kk in [2usize, 3, 5] {
            let group: Vec<ObjectRef> = (0..kk).map(|i| ObjectRef::id((i * 2) % 7)).collect();
            let sample = GroupSample::new(group, ObjectRef::id(2)).unwrap();
            let pw = ablation_loss(&params, &sample, &negs, &ctx, LossVariant::Pairwise, &cfg).unwrap();
            let mt = ablation_loss(&params, &sample, &negs, &ctx, LossVariant::Matching, &cfg).unwrap();
            let mx = ablation_loss(&params, &sample, &negs, &ctx, LossVariant::Maximizing, &cfg).unwrap();
            // maximizing <= pairwise: every per-object term is nonnegative.
            assert!(mx <= pw + 1e-12);
            // matching = pairwise - sum of log weights.
            let w = group_weights(&params, &sample, cfg.similarity, cfg.weight_features).unwrap();
            let wsum: f64 = w.group_log_weights.iter().sum();
            assert!((mt - (pw - wsum)).abs() < 1e-10);
        }
    }

    #[test]
    fn shifting_all_target_embeddings_preserves_probs_and_selection() {
        let (params, pool) = embed_setup(6, 5, 4, 11);
        let negs = NegativeSet::full(5, 1).unwrap();
        let sample = GroupSample::new(
            vec![ObjectRef::id(0), ObjectRef::id(3), ObjectRef::id(4)],
            ObjectRef::id(1),
        )
        .unwrap();
        let cfg = simple_cfg();
        let ctx = LossContext::new(&params, &pool).unwrap();
        let (loss, bd) = max_matching_loss(&params, &sample, &negs, &ctx, &cfg).unwrap();

        // Adding the same vector to every target embedding shifts each
        // object's logit row by a constant, which softmax ignores.
        let mut shifted = params.clone();
        let delta = [0.8, -1.3, 0.4, 2.0];
        for y in 0..5 {
            shifted.g.add_row(y, &delta, 1.0).unwrap();
        }
        let ctx2 = LossContext::new(&shifted, &pool).unwrap();
        let (loss2, bd2) = max_matching_loss(&shifted, &sample, &negs, &ctx2, &cfg).unwrap();
        assert_eq!(bd.selected, bd2.selected);
        for (a, b) in bd.pair_log_probs.iter().zip(&bd2.pair_log_probs) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((loss - loss2).abs() < 1e-9);
    }

    #[test]
    fn permuting_group_permutes_breakdown_and_keeps_loss() {
        let (params, pool) = embed_setup(6, 5, 4, 13);
        let negs = NegativeSet::full(5, 0).unwrap();
        let ctx = LossContext::new(&params, &pool).unwrap();
        let cfg = simple_cfg();
        let ids = [0usize, 3, 5, 2];
        let perm = [2usize, 0, 3, 1];
        let sample = GroupSample::new(ids.iter().map(|&i| ObjectRef::id(i)).collect(), ObjectRef::id(0)).unwrap();
        let permuted = GroupSample::new(
            perm.iter().map(|&p| ObjectRef::id(ids[p])).collect(),
            ObjectRef::id(0),
        )
        .unwrap();
        let (l1, b1) = max_matching_loss(&params, &sample, &negs, &ctx, &cfg).unwrap();
        let (l2, b2) = max_matching_loss(&params, &permuted, &negs, &ctx, &cfg).unwrap();
        assert!((l1 - l2).abs() < 1e-9);
        for (new_pos, &old_pos) in perm.iter().enumerate() {
            assert!((b1.scores[old_pos] - b2.scores[new_pos]).abs() < 1e-9);
            assert!((b1.pair_log_probs[old_pos] - b2.pair_log_probs[new_pos]).abs() < 1e-9);
        }
        // Same selected object (by identity, not position).
        assert_eq!(perm[b2.selected], b1.selected);
    }

    #[test]
    fn backward_matches_finite_differences_small_case() {
        let (params, pool) = embed_setup(4, 3, 3, 21);
        let negs = NegativeSet::full(3, 1).unwrap();
        let sample = GroupSample::new(
            vec![ObjectRef::id(0), ObjectRef::id(2), ObjectRef::id(3)],
            ObjectRef::id(1),
        )
        .unwrap();
        for variant in LossVariant::ALL {
            let cfg = simple_cfg().with_variant(variant);
            let ctx = LossContext::new(&params, &pool).unwrap();
            let mut buf = GradBuffer::zeros_like(&params);
            loss_backward(&params, &sample, &negs, &ctx, &cfg, &mut buf).unwrap();
            let h = 1e-5;
            for i in 0..params.num_params() {
                let mut plus = params.clone();
                plus.set_flat(i, plus.get_flat(i) + h);
                let cp = LossContext::new(&plus, &pool).unwrap();
                let fp = loss_forward(&plus, &sample, &negs, &cp, &cfg).unwrap();
                let mut minus = params.clone();
                minus.set_flat(i, minus.get_flat(i) - h);
                let cm = LossContext::new(&minus, &pool).unwrap();
                let fm = loss_forward(&minus, &sample, &negs, &cm, &cfg).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let an = buf.get_flat(i);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
                assert!(rel < 1e-4, "{variant:?} {}: fd={fd} an={an}", params.coord_name(i));
            }
        }
    }

    #[test]
    fn gradient_locality_for_sampled_negatives() {
        // Targets outside the negative set and sources outside the group
        // must receive zero gradient in embed weighting mode.
        let (params, pool) = embed_setup(10, 50, 4, 33);
        let negs = NegativeSet::new(vec![7, 3, 11, 40], 0).unwrap();
        let ctx = LossContext::new(&params, &pool).unwrap();
        let sample = GroupSample::new(
            vec![ObjectRef::id(2), ObjectRef::id(5)],
            ObjectRef::id(7),
        )
        .unwrap();
        let cfg = simple_cfg();
        let mut buf = GradBuffer::zeros_like(&params);
        loss_backward(&params, &sample, &negs, &ctx, &cfg, &mut buf).unwrap();
        for y in 0..50 {
            let touched = [7usize, 3, 11, 40].contains(&y);
            let nonzero = buf.g.row(y).iter().any(|v| *v != 0.0);
            assert_eq!(nonzero, touched, "target row {y}");
        }
        for s in 0..10 {
            let in_group = [2usize, 5].contains(&s);
            let nonzero = buf.f.row(s).iter().any(|v| *v != 0.0);
            assert_eq!(nonzero, in_group, "source row {s}");
        }
    }

    #[test]
    fn singleton_gradient_is_cross_entropy_gradient() {
        let (params, pool) = embed_setup(3, 4, 3, 8);
        let negs = NegativeSet::full(4, 2).unwrap();
        let ctx = LossContext::new(&params, &pool).unwrap();
        let sample = GroupSample::new(vec![ObjectRef::id(1)], ObjectRef::id(2)).unwrap();
        let cfg = simple_cfg();
        let mut buf = GradBuffer::zeros_like(&params);
        loss_backward(&params, &sample, &negs, &ctx, &cfg, &mut buf).unwrap();

        // Hand-computed CE gradient: d/dz = p - onehot, mapped to rows.
        let e = params.forward_f(&ObjectRef::id(1)).unwrap();
        let logits: Vec<f64> = (0..4).map(|y| dot(&e, params.g.row(y)).unwrap()).collect();
        let p = softmax(&logits).into_vec();
        for y in 0..4 {
            let coef = p[y] - if y == 2 { 1.0 } else { 0.0 };
            for t in 0..3 {
                assert!((buf.g.row(y)[t] - coef * e[t]).abs() < 1e-12);
            }
        }
        let mut df = vec![0.0; 3];
        for y in 0..4 {
            let coef = p[y] - if y == 2 { 1.0 } else { 0.0 };
            for t in 0..3 {
                df[t] += coef * params.g.row(y)[t];
            }
        }
        for t in 0..3 {
            assert!((buf.f.row(1)[t] - df[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn prob_mode_weights_are_valid_distributions() {
        let (params, pool) = embed_setup(5, 4, 4, 3);
        let _ = pool;
        let sample = GroupSample::new(
            vec![ObjectRef::id(0), ObjectRef::id(1), ObjectRef::id(4)],
            ObjectRef::id(2),
        )
        .unwrap();
        let w = group_weights(&params, &sample, Similarity::NegKl, WeightFeatures::Prob).unwrap();
        for glw in &w.group_log_weights {
            assert!(*glw < 0.0);
            assert!(sigmoid(0.0) > 0.0); // weights in (0,1) follow from sigmoid range
        }
        for c in &w.context_vectors {
            let sum: f64 = c.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "context stays on the simplex");
        }
        assert!(group_weights(&params, &sample, Similarity::NegKl, WeightFeatures::Embed).is_err());
    }
}
