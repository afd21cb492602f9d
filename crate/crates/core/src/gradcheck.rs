//! Central finite-difference verification of the analytic gradients, run
//! over random configurations of every loss variant, task setup, and group
//! size.

use rand::Rng;

use crate::loss::{
    loss_backward, loss_forward, max_matching_loss, GroupSample, LossConfig, LossContext,
    LossVariant, NegativeSet, TargetPool,
};
use crate::math::l2_normalize;
use crate::model::{GradBuffer, ModelParams, ObjectRef};
use crate::rng::{child_seed, substream};
use crate::tasks::{TaskKind, TaskSpec};
use crate::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Largest tolerated relative error.
pub const FD_TOL: f64 = 1e-4;

/// One coordinate whose analytic and numeric gradients disagree.
#[derive(Debug, Clone)]
pub struct Failure {
    pub coord: String,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

/// Aggregate over the random configurations of one (variant, task, K) cell.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub variant: LossVariant,
    pub task: TaskKind,
    pub k: usize,
    pub configs: usize,
    pub max_rel_err: f64,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub step: f64,
    pub cases: Vec<CaseResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.failures.is_empty())
    }

    /// Worst relative error observed for one variant across all cells.
    pub fn max_rel_err(&self, variant: LossVariant) -> f64 {
        self.cases
            .iter()
            .filter(|c| c.variant == variant)
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn configs_per_variant(&self, variant: LossVariant) -> usize {
        self.cases
            .iter()
            .filter(|c| c.variant == variant)
            .map(|c| c.configs)
            .sum()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare an analytic gradient against central finite differences of the
/// forward loss, coordinate by coordinate.
pub fn compare_to_fd(
    params: &ModelParams,
    sample: &GroupSample,
    negs: &NegativeSet,
    pool: &TargetPool,
    cfg: &LossConfig,
    analytic: &GradBuffer,
    step: f64,
    tol: f64,
) -> Result<(f64, Vec<Failure>)> {
    let mut max_err = 0.0;
    let mut failures = Vec::new();
    for i in 0..params.num_params() {
        let base = params.get_flat(i);
        let mut plus = params.clone();
        plus.set_flat(i, base + step);
        let ctx_p = LossContext::new(&plus, pool)?;
        let fp = loss_forward(&plus, sample, negs, &ctx_p, cfg)?;
        let mut minus = params.clone();
        minus.set_flat(i, base - step);
        let ctx_m = LossContext::new(&minus, pool)?;
        let fm = loss_forward(&minus, sample, negs, &ctx_m, cfg)?;
        let fd = (fp - fm) / (2.0 * step);
        let an = analytic.get_flat(i);
        let err = rel_err(an, fd);
        if err > max_err {
            max_err = err;
        }
        if err > tol {
            failures.push(Failure {
                coord: params.coord_name(i),
                analytic: an,
                fd,
                rel_err: err,
            });
        }
    }
    Ok((max_err, failures))
}

struct Case {
    params: ModelParams,
    sample: GroupSample,
    negs: NegativeSet,
    pool: TargetPool,
}

/// Draw one random configuration. Configurations whose selection margin is
/// tighter than 1e-3 are rejected: the max subgradient is one-sided there
/// and central differences straddle the kink.
fn draw_case(task: TaskKind, k: usize, variant: LossVariant, seed: u64) -> Result<Case> {
    for attempt in 0..64 {
        let s = child_seed(seed, "gradcheck-case", attempt);
        let mut rng = substream(s, "case");
        let case = match task {
            TaskKind::Mil => {
                let n_classes = rng.gen_range(3..=5);
                let dim = rng.gen_range(3..=5);
                let spec = TaskSpec::mil(n_classes, dim);
                let params = spec.init(s)?;
                let group = (0..k)
                    .map(|_| {
                        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        l2_normalize(&mut v);
                        ObjectRef::Features(v)
                    })
                    .collect();
                let target = rng.gen_range(0..n_classes);
                let pool = TargetPool::from_vocab(n_classes)?;
                Case {
                    params,
                    sample: GroupSample::new(group, ObjectRef::Id(target))?,
                    negs: NegativeSet::full(n_classes, target)?,
                    pool,
                }
            }
            TaskKind::Pll => {
                let n_labels = rng.gen_range(4..=6);
                let feat = rng.gen_range(3..=5);
                let d = rng.gen_range(3..=4);
                let spec = TaskSpec::pll(n_labels, feat, d);
                let params = spec.init(s)?;
                let group = (0..k)
                    .map(|_| ObjectRef::Id(rng.gen_range(0..n_labels)))
                    .collect();
                let pool_size = rng.gen_range(4..=7);
                let refs: Vec<ObjectRef> = (0..pool_size)
                    .map(|_| {
                        let mut v: Vec<f64> = (0..feat).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        l2_normalize(&mut v);
                        ObjectRef::Features(v)
                    })
                    .collect();
                let true_idx = rng.gen_range(0..pool_size);
                let target = refs[true_idx].clone();
                Case {
                    params,
                    sample: GroupSample::new(group, target)?,
                    negs: NegativeSet::full(pool_size, true_idx)?,
                    pool: TargetPool::new(refs)?,
                }
            }
            TaskKind::Rs => {
                let catalog = rng.gen_range(6..=9);
                let d = rng.gen_range(3..=4);
                let spec = TaskSpec::rs(catalog, d);
                let params = spec.init(s)?;
                let group = (0..k)
                    .map(|_| ObjectRef::Id(rng.gen_range(0..catalog)))
                    .collect();
                let target = rng.gen_range(0..catalog);
                // Alternate between the full denominator and the sampled
                // one so both gradient paths get exercised.
                let negs = if attempt % 2 == 0 {
                    NegativeSet::full(catalog, target)?
                } else {
                    NegativeSet::sampled(catalog, target, 3, &mut rng)?
                };
                Case {
                    params,
                    sample: GroupSample::new(group, ObjectRef::Id(target))?,
                    negs,
                    pool: TargetPool::from_vocab(catalog)?,
                }
            }
        };

        let spec_cfg = match task {
            TaskKind::Mil => TaskSpec::mil(3, 3),
            TaskKind::Pll => TaskSpec::pll(3, 3, 3),
            TaskKind::Rs => TaskSpec::rs(3, 3),
        };
        let cfg = LossConfig::new(variant, spec_cfg.similarity, spec_cfg.weight_features);
        let ctx = LossContext::new(&case.params, &case.pool)?;
        let (_, bd) = max_matching_loss(&case.params, &case.sample, &case.negs, &ctx, &cfg)?;
        let margin_vec = match variant {
            LossVariant::Maximizing => &bd.pair_log_probs,
            _ => &bd.scores,
        };
        if selection_margin(margin_vec) > 1e-3 || k == 1 {
            return Ok(case);
        }
    }
    // Margins this tight over 64 draws would point at a degenerate setup.
    Err(crate::Error::InvalidConfig(format!(
        "could not draw a well-separated {task:?} case for K={k}"
    )))
}

fn selection_margin(scores: &[f64]) -> f64 {
    if scores.len() < 2 {
        return f64::INFINITY;
    }
    let mut top = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &s in scores {
        if s > top {
            second = top;
            top = s;
        } else if s > second {
            second = s;
        }
    }
    top - second
}

/// Check every loss variant on every task template and K in {1, 2, 5},
/// `configs_per_cell` random configurations each.
pub fn run(seed: u64, configs_per_cell: usize, step: f64, tol: f64) -> Result<GradCheckReport> {
    let mut cases = Vec::new();
    for variant in LossVariant::ALL {
        for task in [TaskKind::Mil, TaskKind::Pll, TaskKind::Rs] {
            for k in [1usize, 2, 5] {
                let mut result = CaseResult {
                    variant,
                    task,
                    k,
                    configs: 0,
                    max_rel_err: 0.0,
                    failures: Vec::new(),
                };
                for c in 0..configs_per_cell {
                    let case_seed = child_seed(
                        seed,
                        &format!("{}-{}-{k}", variant.name(), task.name()),
                        c as u64,
                    );
                    let case = draw_case(task, k, variant, case_seed)?;
                    let spec_cfg = match task {
                        TaskKind::Mil => TaskSpec::mil(3, 3),
                        TaskKind::Pll => TaskSpec::pll(3, 3, 3),
                        TaskKind::Rs => TaskSpec::rs(3, 3),
                    };
                    let cfg = LossConfig::new(variant, spec_cfg.similarity, spec_cfg.weight_features);
                    let ctx = LossContext::new(&case.params, &case.pool)?;
                    let mut buf = GradBuffer::zeros_like(&case.params);
                    loss_backward(&case.params, &case.sample, &case.negs, &ctx, &cfg, &mut buf)?;
                    let (max_err, mut failures) = compare_to_fd(
                        &case.params,
                        &case.sample,
                        &case.negs,
                        &case.pool,
                        &cfg,
                        &buf,
                        step,
                        tol,
                    )?;
                    result.configs += 1;
                    result.max_rel_err = result.max_rel_err.max(max_err);
                    result.failures.append(&mut failures);
                }
                cases.push(result);
            }
        }
    }
    Ok(GradCheckReport { tol, step, cases })
}
