//! Joint objective, monotone stage assignment by dynamic programming, and the
//! alternating learning loop.
//!
//! Each tick of a sequence scores `psi_d + beta * psi_p` under every stage.
//! Assignments are non-decreasing in time, so the best path is found with
//! a forward pass `G(k, t) = max_{k' <= k} G(k', t - 1) + cost(k, t)` and a
//! backpointer walk. Learning alternates a stage refit (assignments fixed)
//! with a DP pass (stages fixed); both half-steps never lower the objective.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptor::{fit_precision_detailed, EmpiricalStats, GlassoConfig};
use crate::error::{Result, TimecastError};
use crate::exec::Exec;
use crate::ingest::{windowize, FeatureSequence};
use crate::linalg::{logdet_spd, offdiag_l1, quad_form};
use crate::moments::RunningMoments;
use crate::predictor::{constant_link, diffusion_from_abs_dev, link_from_moments, predictor_term};
use crate::types::{
    FeatureConfig, HyperParams, LabeledCollection, ModelSet, StageAssignmentPath, StageModel,
    StageStats, SCHEMA_VERSION,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A stage with its log-determinant and penalty precomputed, for scoring
/// many points.
#[derive(Debug, Clone)]
pub struct StageEvaluator {
    mean: Vec<f64>,
    precision: DMatrix<f64>,
    half_logdet: f64,
    half_d_ln2pi: f64,
    link: Vec<f64>,
    diffusion: f64,
    increment_mean: f64,
    penalty: f64,
}

impl StageEvaluator {
    pub fn new(stage: &StageModel) -> Result<Self> {
        let logdet = logdet_spd(&stage.precision).ok_or_else(|| {
            TimecastError::Domain("stage precision is not positive definite".into())
        })?;
        Ok(Self {
            mean: stage.mean.clone(),
            precision: stage.precision.clone(),
            half_logdet: 0.5 * logdet,
            half_d_ln2pi: 0.5 * stage.dim() as f64 * LN_2PI,
            link: stage.link_weights.clone(),
            diffusion: stage.diffusion,
            increment_mean: stage.increment_mean,
            penalty: offdiag_l1(&stage.precision),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Gaussian log density of `x`.
    #[inline]
    pub fn descriptor(&self, x: &[f64]) -> f64 {
        -0.5 * quad_form(x, &self.mean, &self.precision) + self.half_logdet - self.half_d_ln2pi
    }

    #[inline]
    pub fn link_value(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut acc = self.link[d];
        for (w, v) in self.link[..d].iter().zip(x) {
            acc += w * v;
        }
        acc
    }

    #[inline]
    pub fn predictor(&self, x: &[f64], tau: f64) -> f64 {
        predictor_term(self.link_value(x), tau, self.diffusion, self.increment_mean)
    }

    /// Per-tick cost; the predictor term is skipped at the event tick
    /// (`tau = None`) and when `beta == 0`.
    #[inline]
    pub fn cost(&self, x: &[f64], tau: Option<f64>, beta: f64) -> f64 {
        let d = self.descriptor(x);
        match tau {
            Some(t) if beta != 0.0 => d + beta * self.predictor(x, t),
            _ => d,
        }
    }

    /// Off-diagonal l1 norm of the precision.
    pub fn penalty(&self) -> f64 {
        self.penalty
    }
}

pub fn evaluators(models: &ModelSet) -> Result<Vec<StageEvaluator>> {
    models.stages.iter().map(StageEvaluator::new).collect()
}

/// `psi_d(x) + beta * psi_p(x, tau)` under one stage.
pub fn point_cost(x: &[f64], tau: f64, stage: &StageModel, beta: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(TimecastError::Domain(format!("point cost needs tau > 0, got {tau}")));
    }
    if x.len() != stage.dim() {
        return Err(TimecastError::Dimension {
            expected: stage.dim(),
            actual: x.len(),
        });
    }
    Ok(StageEvaluator::new(stage)?.cost(x, Some(tau), beta))
}

/// Forward DP table over `K` stages and `T` ticks.
#[derive(Debug, Clone)]
pub struct DpTable {
    pub stages: usize,
    pub ticks: usize,
    /// `gamma[t * stages + k]`.
    pub gamma: Vec<f64>,
    /// Predecessor stage of `(k, t)`, same layout as `gamma`.
    pub backptr: Vec<u32>,
}

impl DpTable {
    /// Fills the table; `cost(k, t)` uses 0-based stage and tick.
    pub fn compute<F: FnMut(usize, usize) -> f64>(stages: usize, ticks: usize, mut cost: F) -> Self {
        let mut gamma = vec![f64::NEG_INFINITY; stages * ticks];
        let mut backptr = vec![0u32; stages * ticks];
        if stages == 0 || ticks == 0 {
            return Self {
                stages,
                ticks,
                gamma,
                backptr,
            };
        }
        for k in 0..stages {
            gamma[k] = cost(k, 0);
        }
        for t in 1..ticks {
            let (prev, cur) = gamma.split_at_mut(t * stages);
            let prev = &prev[(t - 1) * stages..];
            let back = &mut backptr[t * stages..(t + 1) * stages];
            // running max over k' <= k; strict comparison keeps the lower index on ties
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0usize;
            for k in 0..stages {
                if prev[k] > best {
                    best = prev[k];
                    arg = k;
                }
                cur[k] = best + cost(k, t);
                back[k] = arg as u32;
            }
        }
        Self {
            stages,
            ticks,
            gamma,
            backptr,
        }
    }

    pub fn gamma_at(&self, stage: usize, tick: usize) -> f64 {
        self.gamma[tick * self.stages + stage]
    }

    /// Best final stage (lowest index on ties) and its value.
    pub fn best_final(&self) -> (usize, f64) {
        let last = &self.gamma[(self.ticks - 1) * self.stages..];
        argmax_low(last)
    }

    /// Optimal value and the path recovered by walking backpointers.
    pub fn best_path(&self) -> (f64, StageAssignmentPath) {
        if self.ticks == 0 {
            return (0.0, StageAssignmentPath::new(Vec::new()).expect("empty path"));
        }
        let (mut k, value) = self.best_final();
        let mut path = vec![0usize; self.ticks];
        for t in (0..self.ticks).rev() {
            path[t] = k;
            if t > 0 {
                k = self.backptr[t * self.stages + k] as usize;
            }
        }
        let path = StageAssignmentPath::new(path).expect("DP paths are monotone by construction");
        (value, path)
    }
}

pub(crate) fn argmax_low(values: &[f64]) -> (usize, f64) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > best {
            best = v;
            arg = k;
        }
    }
    (arg, best)
}

pub(crate) fn assign_features(
    seq: &FeatureSequence,
    evals: &[StageEvaluator],
    beta: f64,
) -> (f64, StageAssignmentPath) {
    let table = DpTable::compute(evals.len(), seq.len(), |k, t| {
        evals[k].cost(seq.row(t), seq.label(t), beta)
    });
    table.best_path()
}

/// Best monotone stage path for one sequence under `models`.
pub fn assign_stages_dp(
    seq: &crate::types::SensorSequence,
    models: &ModelSet,
    beta: f64,
) -> Result<StageAssignmentPath> {
    if seq.dimension() != models.features.sensors {
        return Err(TimecastError::Dimension {
            expected: models.features.sensors,
            actual: seq.dimension(),
        });
    }
    let evals = evaluators(models)?;
    let feats = windowize(seq, models.features.window);
    Ok(assign_features(&feats, &evals, beta).1)
}

pub(crate) fn objective_features(
    feats: &[FeatureSequence],
    evals: &[StageEvaluator],
    paths: &[StageAssignmentPath],
    alpha: f64,
    beta: f64,
    exec: Exec,
) -> f64 {
    let per_seq = exec.map_range(feats.len(), |i| {
        let f = &feats[i];
        let p = paths[i].stages();
        let mut acc = 0.0;
        for t in 0..f.len() {
            acc += evals[p[t]].cost(f.row(t), f.label(t), beta);
        }
        acc
    });
    let fit: f64 = per_seq.iter().sum();
    let penalty: f64 = evals.iter().map(|e| e.penalty()).sum();
    fit - alpha * penalty
}

/// Joint objective: summed per-tick costs minus every stage's penalty.
pub fn total_objective(
    collection: &LabeledCollection,
    models: &ModelSet,
    assignments: &[StageAssignmentPath],
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    let feats = features_of(collection, models.features.window, Exec::default());
    check_paths(&feats, assignments, models.k())?;
    let evals = evaluators(models)?;
    Ok(objective_features(&feats, &evals, assignments, alpha, beta, Exec::default()))
}

fn check_paths(feats: &[FeatureSequence], paths: &[StageAssignmentPath], k: usize) -> Result<()> {
    if feats.len() != paths.len() {
        return Err(TimecastError::Argument(format!(
            "{} assignment paths for {} sequences",
            paths.len(),
            feats.len()
        )));
    }
    for (f, p) in feats.iter().zip(paths) {
        if f.len() != p.len() {
            return Err(TimecastError::Argument(format!(
                "path length {} does not match sequence `{}` of length {}",
                p.len(),
                f.instance_id,
                f.len()
            )));
        }
        if p.stages().iter().any(|&s| s >= k) {
            return Err(TimecastError::Argument(format!(
                "path for `{}` uses a stage beyond K={k}",
                f.instance_id
            )));
        }
    }
    Ok(())
}

pub(crate) fn features_of(collection: &LabeledCollection, window: usize, exec: Exec) -> Vec<FeatureSequence> {
    exec.map(&collection.sequences, |s| windowize(s, window))
}

/// Per-stage bookkeeping from one refit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateSummary {
    /// Stage had no assigned points and kept its previous parameters.
    pub stale: Vec<bool>,
    /// Link solved with ridge or replaced by the intercept-only fallback.
    pub link_fallback: Vec<bool>,
    pub glasso_unconverged: usize,
    /// Candidate refit scored below the previous parameters, which were kept.
    pub kept_previous: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct StageFlags {
    stale: bool,
    link_fallback: bool,
    glasso_unconverged: bool,
    kept_previous: bool,
}

type Member = (u32, u32);

fn stage_members(paths: &[StageAssignmentPath], k: usize) -> Vec<Vec<Member>> {
    let mut out = vec![Vec::new(); k];
    for (i, p) in paths.iter().enumerate() {
        for (t, &s) in p.stages().iter().enumerate() {
            out[s].push((i as u32, t as u32));
        }
    }
    out
}

fn descriptor_value(
    feats: &[FeatureSequence],
    members: &[Member],
    mean: &[f64],
    precision: &DMatrix<f64>,
    alpha: f64,
) -> f64 {
    let Some(logdet) = logdet_spd(precision) else {
        return f64::NEG_INFINITY;
    };
    let d = mean.len() as f64;
    let mut acc = 0.0;
    for &(i, t) in members {
        let x = feats[i as usize].row(t as usize);
        acc += -0.5 * quad_form(x, mean, precision) + 0.5 * logdet - 0.5 * d * LN_2PI;
    }
    acc - alpha * offdiag_l1(precision)
}

struct PredictorParams {
    link: Vec<f64>,
    increment_mean: f64,
    diffusion: f64,
}

fn predictor_value(
    feats: &[FeatureSequence],
    pairs: &[(Member, f64)],
    p: &PredictorParams,
) -> f64 {
    let d = p.link.len() - 1;
    let mut acc = 0.0;
    for &((i, t), tau) in pairs {
        let x = feats[i as usize].row(t as usize);
        let mut f = p.link[d];
        for (w, v) in p.link[..d].iter().zip(x) {
            f += w * v;
        }
        acc += predictor_term(f, tau, p.diffusion, p.increment_mean);
    }
    acc
}

fn abs_dev(pairs: &[(Member, f64)], center: f64) -> f64 {
    pairs.iter().map(|(_, tau)| (1.0 / tau - center).abs()).sum()
}

/// Default predictor for a stage that has never seen a labelled point.
fn placeholder_predictor(d: usize) -> PredictorParams {
    PredictorParams {
        link: constant_link(d, 1.0),
        increment_mean: 1.0,
        diffusion: 1.0,
    }
}

/// Fits one stage from its members. With `prev`, each block (descriptor,
/// predictor) keeps the previous parameters when the refit scores lower on
/// the same points, so the objective cannot decrease.
fn refit_stage(
    feats: &[FeatureSequence],
    members: &[Member],
    prev: Option<&StageModel>,
    alpha: f64,
    glasso: &GlassoConfig,
) -> Option<(StageModel, StageFlags)> {
    let mut flags = StageFlags::default();
    if members.is_empty() {
        flags.stale = true;
        return prev.map(|p| (p.clone(), flags));
    }
    let d = feats[members[0].0 as usize].dim;

    let mut desc = RunningMoments::new(d);
    let mut pred = RunningMoments::new(d + 2);
    let mut pairs: Vec<(Member, f64)> = Vec::new();
    let mut z = vec![0.0; d + 2];
    for &(i, t) in members {
        let f = &feats[i as usize];
        let x = f.row(t as usize);
        desc.push(x);
        if let Some(tau) = f.label(t as usize) {
            z[..d].copy_from_slice(x);
            z[d] = tau;
            z[d + 1] = 1.0 / tau;
            pred.push(&z);
            pairs.push(((i, t), tau));
        }
    }

    // Descriptor. The glasso objective n(log det - tr(QL)) is twice the summed
    // Gaussian log-likelihood, so the stage penalty alpha enters as 2 alpha.
    let stats = EmpiricalStats::from_moments(&desc).ok()?;
    let (mut mean, mut precision) = match fit_precision_detailed(&stats, 2.0 * alpha, glasso) {
        Ok(fit) => {
            flags.glasso_unconverged = !fit.converged;
            (stats.mean.clone(), fit.precision)
        }
        Err(_) => match prev {
            Some(p) => (p.mean.clone(), p.precision.clone()),
            None => (stats.mean.clone(), DMatrix::identity(d, d)),
        },
    };
    if let Some(p) = prev {
        let new_v = descriptor_value(feats, members, &mean, &precision, alpha);
        let old_v = descriptor_value(feats, members, &p.mean, &p.precision, alpha);
        if old_v > new_v {
            mean = p.mean.clone();
            precision = p.precision.clone();
            flags.kept_previous = true;
        }
    }

    // Predictor
    let chosen = if pairs.is_empty() {
        match prev {
            Some(p) => PredictorParams {
                link: p.link_weights.clone(),
                increment_mean: p.increment_mean,
                diffusion: p.diffusion,
            },
            None => placeholder_predictor(d),
        }
    } else {
        let n = pairs.len() as u64;
        let link = if pairs.len() >= d + 2 {
            let fit = link_from_moments(&pred);
            flags.link_fallback = fit.ridge;
            fit.weights
        } else {
            flags.link_fallback = true;
            constant_link(d, pred.mean[d])
        };
        let increment_mean = pred.mean[d + 1];
        let fresh = PredictorParams {
            link,
            increment_mean,
            diffusion: diffusion_from_abs_dev(abs_dev(&pairs, increment_mean), n),
        };
        match prev {
            None => fresh,
            Some(p) => {
                let retuned = PredictorParams {
                    link: p.link_weights.clone(),
                    increment_mean: p.increment_mean,
                    diffusion: diffusion_from_abs_dev(abs_dev(&pairs, p.increment_mean), n),
                };
                let old = PredictorParams {
                    link: p.link_weights.clone(),
                    increment_mean: p.increment_mean,
                    diffusion: p.diffusion,
                };
                let vf = predictor_value(feats, &pairs, &fresh);
                let vr = predictor_value(feats, &pairs, &retuned);
                let vo = predictor_value(feats, &pairs, &old);
                if vf >= vr && vf >= vo {
                    fresh
                } else {
                    flags.kept_previous = true;
                    if vr >= vo {
                        retuned
                    } else {
                        old
                    }
                }
            }
        }
    };

    let abs_dev_sum = abs_dev(&pairs, chosen.increment_mean);
    Some((
        StageModel {
            mean,
            precision,
            link_weights: chosen.link,
            diffusion: chosen.diffusion,
            increment_mean: chosen.increment_mean,
            count: members.len() as u64,
            sum_stats: StageStats {
                descriptor: desc,
                predictor: pred,
                abs_dev_sum,
            },
        },
        flags,
    ))
}

fn update_features(
    feats: &[FeatureSequence],
    paths: &[StageAssignmentPath],
    k: usize,
    prev: Option<&[StageModel]>,
    hyper: &HyperParams,
    exec: Exec,
) -> Result<(Vec<StageModel>, UpdateSummary)> {
    let members = stage_members(paths, k);
    let fitted = exec.map_range(k, |s| {
        refit_stage(
            feats,
            &members[s],
            prev.and_then(|p| p.get(s)),
            hyper.alpha,
            &hyper.glasso,
        )
    });
    let mut global: Option<StageModel> = None;
    let mut stages = Vec::with_capacity(k);
    let mut summary = UpdateSummary::default();
    for r in fitted {
        let (stage, flags) = match r {
            Some(x) => x,
            None => {
                // empty with nothing to keep: borrow the pooled fit
                if global.is_none() {
                    let all: Vec<Member> = members.iter().flatten().copied().collect();
                    global = refit_stage(feats, &all, None, hyper.alpha, &hyper.glasso).map(|x| x.0);
                }
                let mut g = global.clone().ok_or_else(|| {
                    TimecastError::Argument("no observations to fit stage models".into())
                })?;
                g.count = 0;
                g.sum_stats = StageStats::empty(g.dim());
                (
                    g,
                    StageFlags {
                        stale: true,
                        ..Default::default()
                    },
                )
            }
        };
        summary.stale.push(flags.stale);
        summary.link_fallback.push(flags.link_fallback);
        summary.glasso_unconverged += flags.glasso_unconverged as usize;
        summary.kept_previous += flags.kept_previous as usize;
        stages.push(stage);
    }
    Ok((stages, summary))
}

/// Refits every stage from the points assigned to it. Stages with no points
/// keep `previous` parameters and are flagged stale.
pub fn update_stage_models(
    collection: &LabeledCollection,
    assignments: &[StageAssignmentPath],
    hyper: &HyperParams,
    previous: Option<&ModelSet>,
) -> Result<(ModelSet, UpdateSummary)> {
    hyper.validate()?;
    let feats = features_of(collection, hyper.window, Exec::default());
    let k = match previous {
        Some(m) => m.k(),
        None => assignments
            .iter()
            .filter_map(|p| p.stages().iter().max())
            .max()
            .map_or(1, |m| m + 1),
    };
    check_paths(&feats, assignments, k)?;
    let (stages, summary) = update_features(
        &feats,
        assignments,
        k,
        previous.map(|m| m.stages.as_slice()),
        hyper,
        Exec::default(),
    )?;
    Ok((
        ModelSet {
            stages,
            hyper: hyper.clone(),
            features: feature_config(collection, hyper, previous),
        },
        summary,
    ))
}

fn feature_config(
    collection: &LabeledCollection,
    hyper: &HyperParams,
    previous: Option<&ModelSet>,
) -> FeatureConfig {
    FeatureConfig {
        sensors: collection.dimension,
        window: hyper.window,
        znormalize: previous.is_some_and(|m| m.features.znormalize),
    }
}

/// Equal contiguous blocks per sequence, cut points jittered by up to 10%
/// of the block length when `seed` is set.
pub fn initial_paths(lengths: &[usize], k: usize, seed: Option<u64>) -> Vec<StageAssignmentPath> {
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    lengths
        .iter()
        .map(|&t| {
            if t < k || k <= 1 {
                return StageAssignmentPath::new(vec![0; t]).expect("constant path");
            }
            let block = t as f64 / k as f64;
            let reach = (0.1 * block).floor() as i64;
            let mut cuts = Vec::with_capacity(k - 1);
            let mut lo = 1i64;
            for j in 1..k {
                let mut c = (j as f64 * block).round() as i64;
                if let Some(r) = rng.as_mut() {
                    if reach > 0 {
                        c += r.random_range(-reach..=reach);
                    }
                }
                // every block keeps at least one tick
                let hi = (t - (k - j)) as i64;
                c = c.clamp(lo, hi);
                cuts.push(c as usize);
                lo = c + 1;
            }
            let mut stages = Vec::with_capacity(t);
            let mut s = 0;
            for i in 0..t {
                while s < cuts.len() && i >= cuts[s] {
                    s += 1;
                }
                stages.push(s);
            }
            StageAssignmentPath::new(stages).expect("blocks are monotone")
        })
        .collect()
}

/// Block initialisation plus stage models fitted to those blocks.
pub fn initialize(
    collection: &LabeledCollection,
    hyper: &HyperParams,
) -> Result<(ModelSet, Vec<StageAssignmentPath>)> {
    hyper.validate()?;
    let feats = features_of(collection, hyper.window, Exec::default());
    let (stages, paths) = initialize_features(&feats, hyper, Exec::default())?;
    Ok((
        ModelSet {
            stages,
            hyper: hyper.clone(),
            features: feature_config(collection, hyper, None),
        },
        paths,
    ))
}

fn initialize_features(
    feats: &[FeatureSequence],
    hyper: &HyperParams,
    exec: Exec,
) -> Result<(Vec<StageModel>, Vec<StageAssignmentPath>)> {
    let lengths: Vec<usize> = feats.iter().map(|f| f.len()).collect();
    let paths = initial_paths(&lengths, hyper.k_init, hyper.seed);
    let (stages, _) = update_features(feats, &paths, hyper.k_init, None, hyper, exec)?;
    Ok((stages, paths))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    /// Objective after initialisation, then after each outer iteration.
    pub objective_trace: Vec<f64>,
    /// Objective after every half-step (assignment, then refit).
    pub half_step_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Points per stage in the final assignment.
    pub stage_counts: Vec<u64>,
    pub pruned_stages: usize,
    pub final_k: usize,
}

impl FitReport {
    /// Largest decrease between consecutive half-steps (0 when monotone).
    pub fn max_decrease(&self) -> f64 {
        self.half_step_trace
            .windows(2)
            .map(|w| (w[0] - w[1]).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Output of [`learn`].
#[derive(Debug, Clone)]
pub struct LearnOutput {
    pub models: ModelSet,
    pub assignments: Vec<StageAssignmentPath>,
    pub report: FitReport,
}

pub fn learn(collection: &LabeledCollection, hyper: &HyperParams) -> Result<LearnOutput> {
    learn_with(collection, hyper, Exec::default())
}

pub fn learn_with(collection: &LabeledCollection, hyper: &HyperParams, exec: Exec) -> Result<LearnOutput> {
    hyper.validate()?;
    if collection.is_empty() || collection.total_ticks() == 0 {
        return Err(TimecastError::Argument("cannot learn from an empty collection".into()));
    }
    let feats = features_of(collection, hyper.window, exec);
    let (mut stages, mut paths) = initialize_features(&feats, hyper, exec)?;
    let (alpha, beta) = (hyper.alpha, hyper.beta);

    let mut evals: Vec<StageEvaluator> = stages.iter().map(StageEvaluator::new).collect::<Result<_>>()?;
    let mut current = objective_features(&feats, &evals, &paths, alpha, beta, exec);
    let mut trace = vec![current];
    let mut half = vec![current];
    let mut empty_streak = vec![0usize; stages.len()];
    let mut pruned = 0;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..hyper.max_iter {
        iterations += 1;
        let assigned = exec.map(&feats, |f| assign_features(f, &evals, beta).1);
        paths = assigned;

        // empty stages survive one iteration as stale, then are dropped
        let counts = stage_counts(&paths, stages.len());
        for (s, c) in counts.iter().enumerate() {
            empty_streak[s] = if *c == 0 { empty_streak[s] + 1 } else { 0 };
        }
        if hyper.prune_empty_stages && empty_streak.iter().any(|&e| e >= 2) {
            let keep: Vec<bool> = empty_streak.iter().map(|&e| e < 2).collect();
            let mut map = vec![usize::MAX; stages.len()];
            let mut next = 0;
            for (s, &k) in keep.iter().enumerate() {
                if k {
                    map[s] = next;
                    next += 1;
                }
            }
            pruned += stages.len() - next;
            paths = paths.iter().map(|p| p.remap(&map)).collect::<Result<_>>()?;
            let mut it = keep.iter();
            stages.retain(|_| *it.next().unwrap());
            let mut it = keep.iter();
            empty_streak.retain(|_| *it.next().unwrap());
            evals = stages.iter().map(StageEvaluator::new).collect::<Result<_>>()?;
        }
        half.push(objective_features(&feats, &evals, &paths, alpha, beta, exec));

        let (next_stages, _) = update_features(&feats, &paths, stages.len(), Some(&stages), hyper, exec)?;
        stages = next_stages;
        evals = stages.iter().map(StageEvaluator::new).collect::<Result<_>>()?;
        let value = objective_features(&feats, &evals, &paths, alpha, beta, exec);
        half.push(value);
        trace.push(value);

        let change = (value - current).abs() / current.abs().max(1e-12);
        current = value;
        if change < hyper.tol {
            converged = true;
            break;
        }
    }

    let final_k = stages.len();
    let report = FitReport {
        schema_version: SCHEMA_VERSION,
        objective_trace: trace,
        half_step_trace: half,
        iterations,
        converged,
        stage_counts: stage_counts(&paths, final_k),
        pruned_stages: pruned,
        final_k,
    };
    Ok(LearnOutput {
        models: ModelSet {
            stages,
            hyper: hyper.clone(),
            features: feature_config(collection, hyper, None),
        },
        assignments: paths,
        report,
    })
}

pub fn stage_counts(paths: &[StageAssignmentPath], k: usize) -> Vec<u64> {
    let mut c = vec![0u64; k];
    for p in paths {
        for &s in p.stages() {
            c[s] += 1;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::SensorSequence;

    fn stage(mean: Vec<f64>, link: Vec<f64>, diffusion: f64, increment_mean: f64) -> StageModel {
        let d = mean.len();
        StageModel {
            mean,
            precision: DMatrix::identity(d, d),
            link_weights: link,
            diffusion,
            increment_mean,
            count: 0,
            sum_stats: StageStats::empty(d),
        }
    }

    #[test]
    fn point_cost_examples() {
        let s = stage(vec![0.0, 0.0], vec![0.0, 0.0, 1.0], 1.0, 1.0);
        let c = point_cost(&[0.0, 0.0], 1.0, &s, 0.1).unwrap();
        assert!((c + 1.837877).abs() < 1e-6);
        let c0 = point_cost(&[0.3, -1.0], 4.0, &s, 0.0).unwrap();
        let d = crate::descriptor::gaussian_loglik(&[0.3, -1.0], &[0.0, 0.0], &s.precision).unwrap();
        assert!((c0 - d).abs() < 1e-12);
        assert!(point_cost(&[0.0], 1.0, &s, 0.1).is_err());
        assert!(point_cost(&[0.0, 0.0], 0.0, &s, 0.1).is_err());
    }

    #[test]
    fn dp_crafted_two_stage_path() {
        // stage 2 dominates from t = 2
        let costs = [[0.0, -5.0], [-3.0, 0.0], [-3.0, 0.0]];
        let table = DpTable::compute(2, 3, |k, t| costs[t][k]);
        let (v, p) = table.best_path();
        assert_eq!(p.to_one_based(), vec![1, 2, 2]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn dp_ties_prefer_lower_stage() {
        let table = DpTable::compute(3, 4, |_, _| 1.0);
        let (v, p) = table.best_path();
        assert_eq!(v, 4.0);
        assert_eq!(p.stages(), &[0, 0, 0, 0]);
    }

    #[test]
    fn single_stage_assigns_everything_to_it() {
        let seq = SensorSequence::from_rows("a", (0..7).map(|i| vec![i as f64]).collect(), None).unwrap();
        let models = ModelSet {
            stages: vec![stage(vec![0.0], vec![0.0, 3.0], 1.0, 0.5)],
            hyper: HyperParams::default(),
            features: FeatureConfig {
                sensors: 1,
                window: 1,
                znormalize: false,
            },
        };
        let p = assign_stages_dp(&seq, &models, 0.1).unwrap();
        assert_eq!(p.stages(), &[0; 7]);
    }

    #[test]
    fn initial_blocks() {
        let p = initial_paths(&[10], 5, None);
        assert_eq!(p[0].to_one_based(), vec![1, 1, 2, 2, 3, 3, 4, 4, 5, 5]);
        let p = initial_paths(&[3], 5, None);
        assert_eq!(p[0].stages(), &[0, 0, 0]);
        let a = initial_paths(&[200; 4], 4, Some(1));
        let b = initial_paths(&[200; 4], 4, Some(2));
        assert_ne!(a, b);
        for p in a.iter().chain(&b) {
            assert_eq!(*p.stages().last().unwrap(), 3);
            assert!(p.stages().windows(2).all(|w| w[0] <= w[1]));
        }
    }

    fn toy_collection() -> LabeledCollection {
        let seqs = (0..4)
            .map(|v| {
                let rows = (0..30)
                    .map(|t| {
                        let base = if t < 15 { 0.0 } else { 5.0 };
                        vec![base + ((t * 7 + v) % 5) as f64 * 0.1, ((t * 3 + v) % 4) as f64 * 0.1]
                    })
                    .collect();
                SensorSequence::from_rows(format!("s{v}"), rows, None).unwrap()
            })
            .collect();
        LabeledCollection::new(seqs).unwrap()
    }

    #[test]
    fn empty_stage_is_flagged_and_kept() {
        let c = toy_collection();
        let hyper = HyperParams {
            k_init: 2,
            ..Default::default()
        };
        let (models, paths) = initialize(&c, &hyper).unwrap();
        let all_first: Vec<_> = paths
            .iter()
            .map(|p| StageAssignmentPath::new(vec![0; p.len()]).unwrap())
            .collect();
        let (next, summary) = update_stage_models(&c, &all_first, &hyper, Some(&models)).unwrap();
        assert_eq!(summary.stale, vec![false, true]);
        assert_eq!(next.stages[1], models.stages[1]);
    }

    #[test]
    fn objective_with_one_stage_and_no_predictor() {
        let c = toy_collection();
        let hyper = HyperParams {
            k_init: 1,
            beta: 0.0,
            alpha: 0.0,
            ..Default::default()
        };
        let (models, paths) = initialize(&c, &hyper).unwrap();
        let j = total_objective(&c, &models, &paths, 0.0, 0.0).unwrap();
        let pts: Vec<Vec<f64>> = c
            .sequences
            .iter()
            .flat_map(|s| s.observations.iter().map(|o| o.values.clone()))
            .collect();
        let direct = crate::descriptor::stage_descriptor_objective(
            &pts,
            &models.stages[0].mean,
            &models.stages[0].precision,
            0.0,
        )
        .unwrap();
        assert!((j - direct).abs() < 1e-9 * direct.abs());
    }

    #[test]
    fn learn_single_stage_converges_fast() {
        let c = toy_collection();
        let hyper = HyperParams {
            k_init: 1,
            ..Default::default()
        };
        let out = learn(&c, &hyper).unwrap();
        assert!(out.report.converged);
        assert!(out.report.iterations <= 2);
        let (init, _) = initialize(&c, &hyper).unwrap();
        assert_eq!(out.models.stages[0].mean, init.stages[0].mean);
    }

    #[test]
    fn learn_two_regimes_is_monotone() {
        let c = toy_collection();
        let hyper = HyperParams {
            k_init: 3,
            seed: Some(3),
            ..Default::default()
        };
        let out = learn(&c, &hyper).unwrap();
        let r = &out.report;
        for w in r.half_step_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{:?}", r.half_step_trace);
        }
        for p in &out.assignments {
            assert!(p.stages().iter().all(|&s| s < out.models.k()));
        }
    }
}
