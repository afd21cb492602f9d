//! Seeded synthetic data with controllable group noise.
//!
//! Classes are Gaussian clusters around unit-sphere prototypes; bags mix in
//! a controlled fraction of off-class instances. Partial labels corrupt a
//! controlled fraction of records with distractor candidates. Click
//! sequences random-walk inside planted item clusters and teleport with the
//! noise probability. Generation is per-group seeded so it is deterministic
//! and order-independent.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{child_seed, substream};
use crate::tasks::{ClickSequence, MilBag, PllRecord};
use crate::{Error, Result};

/// Knobs for all three generators; each generator reads the subset it
/// needs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub feature_dim: usize,
    /// Standard deviation of the per-coordinate Gaussian jitter around a
    /// class prototype.
    pub cluster_spread: f64,
    /// Bags, records, or user sequences to generate.
    pub n_groups: usize,
    /// Instances per bag.
    pub group_size: usize,
    /// Fraction of group objects mismatched to the target. Strictly below 1
    /// so every group keeps at least one true pairwise relation.
    pub noise_rate: f64,
    /// Fraction of partially labeled records.
    pub epsilon: f64,
    /// Largest candidate-set size for partially labeled records.
    pub tau: usize,
    /// Item catalog size.
    pub catalog_size: usize,
    /// Planted item clusters.
    pub n_clusters: usize,
    /// Items per user sequence before windowing.
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            feature_dim: 10,
            cluster_spread: 0.3,
            n_groups: 500,
            group_size: 5,
            noise_rate: 0.4,
            epsilon: 0.5,
            tau: 4,
            catalog_size: 200,
            n_clusters: 20,
            seq_len: 12,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_rate >= 0.0 && self.noise_rate < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_rate must be in [0, 1), got {}",
                self.noise_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be in [0, 1], got {}",
                self.epsilon
            )));
        }
        if self.tau < 1 || self.tau > self.n_classes {
            return Err(Error::InvalidConfig(format!(
                "tau must be in [1, n_classes], got {} with {} classes",
                self.tau, self.n_classes
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.feature_dim == 0 || self.n_groups == 0 || self.group_size == 0 {
            return Err(Error::InvalidConfig("dims and counts must be positive".into()));
        }
        if self.n_clusters == 0 || self.catalog_size < self.n_clusters {
            return Err(Error::InvalidConfig(
                "catalog must hold at least one item per cluster".into(),
            ));
        }
        if self.seq_len < 2 {
            return Err(Error::InvalidConfig("sequences need at least 2 items".into()));
        }
        Ok(())
    }
}

/// Unit-sphere prototypes, one per class.
fn prototypes(n: usize, dim: usize, seed: u64, stream: &str) -> Vec<Vec<f64>> {
    let mut rng = substream(seed, stream);
    (0..n)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            crate::math::l2_normalize(&mut v);
            v
        })
        .collect()
}

fn jittered<R: Rng>(proto: &[f64], spread: f64, rng: &mut R) -> Vec<f64> {
    proto
        .iter()
        .map(|&p| {
            let z: f64 = StandardNormal.sample(rng);
            p + spread * z
        })
        .collect()
}

/// Bags whose label matches most instances; `ceil(noise_rate * K)` of them
/// (capped at K-1) come from other classes. The hidden per-instance truth
/// rides along for evaluation.
pub fn gen_mil(cfg: &SynthConfig) -> Result<Vec<MilBag>> {
    cfg.validate()?;
    let protos = prototypes(cfg.n_classes, cfg.feature_dim, cfg.seed, "mil-protos");
    let k = cfg.group_size;
    let n_noisy = ((cfg.noise_rate * k as f64).ceil() as usize).min(k - 1);
    let mut bags = Vec::with_capacity(cfg.n_groups);
    for b in 0..cfg.n_groups {
        let mut rng = substream(child_seed(cfg.seed, "mil-bag", b as u64), "draw");
        let label = rng.gen_range(0..cfg.n_classes);
        let mut positions: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            positions.swap(i, rng.gen_range(0..=i));
        }
        let noisy: std::collections::HashSet<usize> = positions[..n_noisy].iter().copied().collect();
        let mut instances = Vec::with_capacity(k);
        let mut truth = Vec::with_capacity(k);
        for pos in 0..k {
            let class = if noisy.contains(&pos) {
                let mut c = rng.gen_range(0..cfg.n_classes - 1);
                if c >= label {
                    c += 1;
                }
                c
            } else {
                label
            };
            instances.push(jittered(&protos[class], cfg.cluster_spread, &mut rng));
            truth.push(class);
        }
        bags.push(MilBag {
            bag_id: b,
            label,
            instances,
            instance_labels: Some(truth),
        });
    }
    Ok(bags)
}

/// Records with Gaussian features per true class; a fraction `epsilon` of
/// them carries extra distractor candidates, between 2 and `tau` labels in
/// total. The rest are singletons.
pub fn gen_pll(cfg: &SynthConfig) -> Result<Vec<PllRecord>> {
    cfg.validate()?;
    let protos = prototypes(cfg.n_classes, cfg.feature_dim, cfg.seed, "pll-protos");
    let n = cfg.n_groups;
    let n_partial = (cfg.epsilon * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut pick_rng = substream(cfg.seed, "pll-partial");
    for i in (1..n).rev() {
        order.swap(i, pick_rng.gen_range(0..=i));
    }
    let partial: std::collections::HashSet<usize> = order[..n_partial.min(n)].iter().copied().collect();

    let mut records = Vec::with_capacity(n);
    for r in 0..n {
        let mut rng = substream(child_seed(cfg.seed, "pll-rec", r as u64), "draw");
        let true_label = rng.gen_range(0..cfg.n_classes);
        let features = jittered(&protos[true_label], cfg.cluster_spread, &mut rng);
        let mut candidates = vec![true_label];
        if partial.contains(&r) && cfg.tau >= 2 {
            let size = rng.gen_range(2..=cfg.tau);
            while candidates.len() < size {
                let c = rng.gen_range(0..cfg.n_classes);
                if !candidates.contains(&c) {
                    candidates.push(c);
                }
            }
        }
        candidates.sort_unstable();
        records.push(PllRecord {
            features,
            candidates,
            true_label,
        });
    }
    Ok(records)
}

/// Items are assigned to clusters round-robin; each user's sequence walks
/// uniformly inside the current item's cluster and teleports to a uniformly
/// random cluster with probability `noise_rate` per step. Returns the
/// sequences and the item-to-cluster map that serves as ground truth.
pub fn gen_rs(cfg: &SynthConfig) -> Result<(Vec<ClickSequence>, Vec<usize>)> {
    cfg.validate()?;
    let clusters: Vec<usize> = (0..cfg.catalog_size).map(|i| i % cfg.n_clusters).collect();
    let cluster_len = |c: usize| (cfg.catalog_size - c).div_ceil(cfg.n_clusters);
    let cluster_item = |c: usize, idx: usize| c + idx * cfg.n_clusters;

    let mut sequences = Vec::with_capacity(cfg.n_groups);
    for u in 0..cfg.n_groups {
        let mut rng = substream(child_seed(cfg.seed, "rs-user", u as u64), "draw");
        let mut items = Vec::with_capacity(cfg.seq_len);
        let mut current = rng.gen_range(0..cfg.catalog_size);
        items.push(current);
        for _ in 1..cfg.seq_len {
            let cluster = if rng.gen_bool(cfg.noise_rate) {
                rng.gen_range(0..cfg.n_clusters)
            } else {
                clusters[current]
            };
            current = cluster_item(cluster, rng.gen_range(0..cluster_len(cluster)));
            items.push(current);
        }
        sequences.push(ClickSequence { user: u, items });
    }
    Ok((sequences, clusters))
}
