//! The three learning settings realized as group-sample streams.
//!
//! Multiple-instance learning: a bag of instances is the group, the bag
//! label is the target. Partial-label learning: the candidate label set is
//! the group, the instance is the target. Recommendation: a window of
//! clicked items is the group, the next item is the target.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::loss::{GroupSample, LossConfig, LossVariant, Similarity, TargetPool, TrainSet};
use crate::math::{dot, l2_normalize, softmax};
use crate::model::{init_params, MappingSpec, ModelParams, ObjectRef, WeightFeatures};
use crate::rng::substream;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;

/// Click windows hold at most this many items; the last one is the target.
pub const RS_WINDOW: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mil,
    Pll,
    Rs,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Mil => "mil",
            TaskKind::Pll => "pll",
            TaskKind::Rs => "rs",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mil" => Ok(TaskKind::Mil),
            "pll" => Ok(TaskKind::Pll),
            "rs" => Ok(TaskKind::Rs),
            other => Err(Error::InvalidConfig(format!("unknown task `{other}`"))),
        }
    }
}

/// Mapping and weighting choices for one task. The three constructors pin
/// the standard rows; `custom` is the escape hatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub f_spec: MappingSpec,
    pub g_spec: MappingSpec,
    pub similarity: Similarity,
    pub weight_features: WeightFeatures,
}

impl TaskSpec {
    /// Instances with identity features against an embedded label
    /// vocabulary; weighting on pair-match distributions with neg-KL.
    pub fn mil(n_classes: usize, feature_dim: usize) -> Self {
        Self {
            kind: TaskKind::Mil,
            f_spec: MappingSpec::identity(feature_dim),
            g_spec: MappingSpec::embedding(n_classes, feature_dim),
            similarity: Similarity::NegKl,
            weight_features: WeightFeatures::Prob,
        }
    }

    /// Embedded candidate labels against linearly mapped instance features;
    /// weighting on label embeddings with dot similarity.
    pub fn pll(n_labels: usize, feature_dim: usize, embed_dim: usize) -> Self {
        Self {
            kind: TaskKind::Pll,
            f_spec: MappingSpec::embedding(n_labels, embed_dim),
            g_spec: MappingSpec::linear(feature_dim, embed_dim),
            similarity: Similarity::Dot,
            weight_features: WeightFeatures::Embed,
        }
    }

    /// Embedded items on both sides; weighting on item embeddings with dot
    /// similarity.
    pub fn rs(catalog: usize, embed_dim: usize) -> Self {
        Self {
            kind: TaskKind::Rs,
            f_spec: MappingSpec::embedding(catalog, embed_dim),
            g_spec: MappingSpec::embedding(catalog, embed_dim),
            similarity: Similarity::Dot,
            weight_features: WeightFeatures::Embed,
        }
    }

    pub fn custom(
        kind: TaskKind,
        f_spec: MappingSpec,
        g_spec: MappingSpec,
        similarity: Similarity,
        weight_features: WeightFeatures,
    ) -> Result<Self> {
        let spec = Self {
            kind,
            f_spec,
            g_spec,
            similarity,
            weight_features,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.f_spec.validate()?;
        self.g_spec.validate()?;
        if self.f_spec.out_dim != self.g_spec.out_dim {
            return Err(Error::InvalidConfig(
                "f and g must share the embedding dimension".into(),
            ));
        }
        LossConfig::new(LossVariant::MaxMatching, self.similarity, self.weight_features).validate()
    }

    pub fn init(&self, seed: u64) -> Result<ModelParams> {
        init_params(self.f_spec, self.g_spec, seed)
    }

    pub fn loss_config(&self, variant: LossVariant, lambda: f64) -> LossConfig {
        let mut cfg = LossConfig::new(variant, self.similarity, self.weight_features);
        cfg.lambda = lambda;
        cfg
    }
}

/// A bag of instances under one bag-level label. `instance_labels` is
/// ground truth for evaluation only; the adapters never copy it into
/// training samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilBag {
    pub bag_id: usize,
    pub label: usize,
    pub instances: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_labels: Option<Vec<usize>>,
}

/// One partially labeled instance: the true label hides among the
/// candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PllRecord {
    pub features: Vec<f64>,
    pub candidates: Vec<usize>,
    pub true_label: usize,
}

/// One user's item visits in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickSequence {
    pub user: usize,
    pub items: Vec<usize>,
}

/// Each bag becomes one group sample: instances (L2-normalized) against the
/// bag label. Order is preserved.
pub fn mil_to_groups(bags: &[MilBag]) -> Result<Vec<GroupSample>> {
    if bags.is_empty() {
        return Err(Error::Empty("bag list"));
    }
    bags.iter()
        .map(|bag| {
            if bag.instances.is_empty() {
                return Err(Error::Empty("bag"));
            }
            let group = bag
                .instances
                .iter()
                .map(|feats| {
                    let mut v = feats.clone();
                    l2_normalize(&mut v);
                    ObjectRef::Features(v)
                })
                .collect();
            GroupSample::new(group, ObjectRef::Id(bag.label))
        })
        .collect()
}

/// Each record becomes one group sample: the candidate label ids
/// (canonicalized ascending) against the instance features.
pub fn pll_to_groups(records: &[PllRecord]) -> Result<Vec<GroupSample>> {
    if records.is_empty() {
        return Err(Error::Empty("record list"));
    }
    records
        .iter()
        .map(|rec| {
            if rec.candidates.is_empty() {
                return Err(Error::Empty("candidate set"));
            }
            let mut cands = rec.candidates.clone();
            cands.sort_unstable();
            cands.dedup();
            let mut feats = rec.features.clone();
            l2_normalize(&mut feats);
            GroupSample::new(
                cands.into_iter().map(ObjectRef::Id).collect(),
                ObjectRef::Features(feats),
            )
        })
        .collect()
}

/// Split one sequence into consecutive windows of at most [`RS_WINDOW`]
/// items; the last item of a window is the target, the rest are the group.
/// A trailing window of length one cannot form a group plus target and is
/// dropped.
pub fn rs_windows(seq: &ClickSequence) -> Result<Vec<GroupSample>> {
    if seq.items.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "sequence for user {} has fewer than 2 items",
            seq.user
        )));
    }
    let mut out = Vec::new();
    for chunk in seq.items.chunks(RS_WINDOW) {
        if chunk.len() < 2 {
            continue;
        }
        let (target, group) = chunk.split_last().expect("chunk has at least 2 items");
        out.push(GroupSample::new(
            group.iter().map(|&i| ObjectRef::Id(i)).collect(),
            ObjectRef::Id(*target),
        )?);
    }
    Ok(out)
}

pub fn rs_to_groups(sequences: &[ClickSequence]) -> Result<Vec<GroupSample>> {
    if sequences.is_empty() {
        return Err(Error::Empty("sequence list"));
    }
    let mut out = Vec::new();
    for seq in sequences {
        out.extend(rs_windows(seq)?);
    }
    Ok(out)
}

fn target_id(sample: &GroupSample) -> Result<usize> {
    match &sample.target {
        ObjectRef::Id(i) => Ok(*i),
        ObjectRef::Features(_) => Err(Error::KindMismatch("expected a categorical target")),
    }
}

/// Bag samples against the full label vocabulary.
pub fn mil_train_set(bags: &[MilBag], n_classes: usize) -> Result<TrainSet> {
    let samples = mil_to_groups(bags)?;
    let pool = TargetPool::from_vocab(n_classes)?;
    let target_indices = samples.iter().map(target_id).collect::<Result<_>>()?;
    TrainSet::new(samples, pool, target_indices)
}

/// Candidate-set samples against the pool of the given records' instances:
/// the pair-match denominator for a label ranges over instances.
pub fn pll_train_set(records: &[PllRecord]) -> Result<TrainSet> {
    let samples = pll_to_groups(records)?;
    let pool = TargetPool::new(samples.iter().map(|s| s.target.clone()).collect::<Vec<_>>())?;
    let target_indices = (0..samples.len()).collect();
    TrainSet::new(samples, pool, target_indices)
}

/// Window samples against the full item catalog.
pub fn rs_train_set(samples: Vec<GroupSample>, catalog: usize) -> Result<TrainSet> {
    let pool = TargetPool::from_vocab(catalog)?;
    let target_indices = samples.iter().map(target_id).collect::<Result<_>>()?;
    TrainSet::new(samples, pool, target_indices)
}

/// Argmax class for one instance over the full label vocabulary. Features
/// are normalized the same way the adapters normalize them at ingestion.
pub fn predict_mil(params: &ModelParams, features: &[f64]) -> Result<usize> {
    let mut v = features.to_vec();
    l2_normalize(&mut v);
    let e = params.forward_f(&ObjectRef::Features(v))?;
    let vocab = params.g_spec.in_dim;
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for y in 0..vocab {
        let s = dot(&e, params.g.row(y))?;
        if s > best_score {
            best_score = s;
            best = y;
        }
    }
    Ok(best)
}

/// Argmax label for one instance over the full label vocabulary: labels are
/// the source side here, the instance is the target.
pub fn predict_pll(params: &ModelParams, features: &[f64]) -> Result<usize> {
    let q = params.forward_g(&ObjectRef::Features(features.to_vec()))?;
    let vocab = params.f_spec.in_dim;
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for lab in 0..vocab {
        let s = dot(params.f.row(lab), &q)?;
        if s > best_score {
            best_score = s;
            best = lab;
        }
    }
    Ok(best)
}

/// Like [`predict_pll`] but restricted to a candidate set.
pub fn predict_pll_restricted(
    params: &ModelParams,
    features: &[f64],
    candidates: &[usize],
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    let q = params.forward_g(&ObjectRef::Features(features.to_vec()))?;
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    let mut best = cands[0];
    let mut best_score = f64::NEG_INFINITY;
    for &lab in &cands {
        if lab >= params.f_spec.in_dim {
            return Err(Error::IdOutOfVocab {
                id: lab,
                vocab: params.f_spec.in_dim,
            });
        }
        let s = dot(params.f.row(lab), &q)?;
        if s > best_score {
            best_score = s;
            best = lab;
        }
    }
    Ok(best)
}

/// Descending-score ranking over item ids, skipping `exclude`; ties break
/// toward the smaller id.
fn rank_items(scores: &[f64], exclude: &HashSet<usize>, k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    ids.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    ids
}

/// Top-k items by match score against one query item, excluding the query
/// itself.
pub fn predict_rs(params: &ModelParams, query: usize, k: usize) -> Result<Vec<usize>> {
    let catalog = params.g_spec.in_dim;
    let e = params.forward_f(&ObjectRef::Id(query))?;
    let mut scores = Vec::with_capacity(catalog);
    for y in 0..catalog {
        scores.push(dot(&e, params.g.row(y))?);
    }
    let exclude: HashSet<usize> = [query].into();
    Ok(rank_items(&scores, &exclude, k))
}

/// Top-k items where each candidate is scored by its best match probability
/// over the items in the group; group items are excluded from the ranking.
pub fn predict_rs_plus(params: &ModelParams, group: &[usize], k: usize) -> Result<Vec<usize>> {
    if group.is_empty() {
        return Err(Error::Empty("group"));
    }
    let catalog = params.g_spec.in_dim;
    let mut scores = vec![f64::NEG_INFINITY; catalog];
    for &x in group {
        let e = params.forward_f(&ObjectRef::Id(x))?;
        let mut logits = Vec::with_capacity(catalog);
        for y in 0..catalog {
            logits.push(dot(&e, params.g.row(y))?);
        }
        let probs = softmax(&logits).into_vec();
        for (s, p) in scores.iter_mut().zip(&probs) {
            if *p > *s {
                *s = *p;
            }
        }
    }
    let exclude: HashSet<usize> = group.iter().copied().collect();
    Ok(rank_items(&scores, &exclude, k))
}

/// Deterministic 8:1:1 index split.
pub fn split_811(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "split"));
    let n_val = n / 10;
    let n_test = n / 10;
    let n_train = n - n_val - n_test;
    let train = idx[..n_train].to_vec();
    let val = idx[n_train..n_train + n_val].to_vec();
    let test = idx[n_train + n_val..].to_vec();
    (train, val, test)
}

#[derive(Debug, Clone, Default)]
pub struct RsSplit {
    pub train: Vec<GroupSample>,
    pub val: Vec<GroupSample>,
    pub test: Vec<GroupSample>,
}

/// Per-user window split for recommendation: the last window of each user
/// is the test point and the one before it the validation point; everything
/// earlier trains. Users with a single window only contribute to training.
pub fn rs_split(sequences: &[ClickSequence]) -> Result<RsSplit> {
    rs_split_inner(sequences, None)
}

/// Seeded variant that holds out two random windows per user instead of the
/// last two.
pub fn rs_split_random(sequences: &[ClickSequence], seed: u64) -> Result<RsSplit> {
    rs_split_inner(sequences, Some(substream(seed, "rs-split")))
}

fn rs_split_inner(
    sequences: &[ClickSequence],
    mut rng: Option<rand_chacha::ChaCha8Rng>,
) -> Result<RsSplit> {
    if sequences.is_empty() {
        return Err(Error::Empty("sequence list"));
    }
    let mut split = RsSplit::default();
    for seq in sequences {
        let mut windows = rs_windows(seq)?;
        match windows.len() {
            0 => {}
            1 => split.train.append(&mut windows),
            2 => {
                split.test.push(windows.pop().expect("two windows"));
                split.train.append(&mut windows);
            }
            n => {
                let (vi, ti) = match &mut rng {
                    None => (n - 2, n - 1),
                    Some(r) => {
                        let a = r.gen_range(0..n);
                        let mut b = r.gen_range(0..n - 1);
                        if b >= a {
                            b += 1;
                        }
                        (a.min(b), a.max(b))
                    }
                };
                for (i, w) in windows.into_iter().enumerate() {
                    if i == ti {
                        split.test.push(w);
                    } else if i == vi {
                        split.val.push(w);
                    } else {
                        split.train.push(w);
                    }
                }
            }
        }
    }
    Ok(split)
}

/// Binary tasks from consecutive class-id pairs: bags labeled `c` or `c+1`
/// are relabeled 0/1. Hidden instance labels outside the pair map to 2 so
/// they can never count as correct in binary evaluation.
pub fn adjacent_binary_tasks(bags: &[MilBag], n_classes: usize) -> Vec<(usize, usize, Vec<MilBag>)> {
    let mut out = Vec::new();
    for c in 0..n_classes.saturating_sub(1) {
        let relabel = |l: usize| {
            if l == c {
                0
            } else if l == c + 1 {
                1
            } else {
                2
            }
        };
        let subset: Vec<MilBag> = bags
            .iter()
            .filter(|b| b.label == c || b.label == c + 1)
            .map(|b| MilBag {
                bag_id: b.bag_id,
                label: relabel(b.label),
                instances: b.instances.clone(),
                instance_labels: b
                    .instance_labels
                    .as_ref()
                    .map(|ls| ls.iter().map(|&l| relabel(l)).collect()),
            })
            .collect();
        if !subset.is_empty() {
            out.push((c, c + 1, subset));
        }
    }
    out
}
