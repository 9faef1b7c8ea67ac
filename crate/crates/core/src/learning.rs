//! Global parameter learning: pooled Gaussian statistics and the local
//! M-step, the Newton step for the Dirichlet rows α, the learning-rate
//! schedule and the online mini-batch training driver.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Task, TaskCollection};
use crate::error::{Error, Result};
use crate::inference::{dirichlet_expected_log, run_estep, EStepOutput, VariationalState};
use crate::model::{init_model, Covariance, ThemeModel, TrainConfig};
use crate::specfn::{digamma, trigamma};

/// Themes whose responsibility mass falls below this keep their previous
/// parameters in the local M-step.
pub const MIN_THEME_MASS: f64 = 1e-8;

/// Entrywise floor for α after a Newton step.
pub const ALPHA_FLOOR: f64 = 1e-6;

/// Maximum number of times the α Newton direction is halved to keep α positive.
const MAX_ALPHA_HALVINGS: usize = 20;

/// Responsibility-weighted sufficient statistics of the image-themes over a
/// batch of tasks.
///
/// Moments are accumulated about a fixed per-theme `center` (the current
/// means during training) to limit cancellation when forming covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalThemeStats {
    /// N_dk = Σ_c Σ_n r_dcnk for each contributing task, in batch order.
    pub task_mass: Vec<Vec<f64>>,
    /// Σ_d N_dk.
    pub mass: Vec<f64>,
    pub center: Vec<Vec<f64>>,
    /// Σ r (x − center_k).
    pub weighted_sum: Vec<DVector<f64>>,
    /// Σ r (x − center_k)(x − center_k)ᵀ.
    pub scatter: Vec<DMatrix<f64>>,
    pub total_samples: usize,
}

impl LocalThemeStats {
    pub fn empty(center: Vec<Vec<f64>>) -> Self {
        let k = center.len();
        let d = center.first().map_or(0, Vec::len);
        Self {
            task_mass: Vec::new(),
            mass: vec![0.0; k],
            center,
            weighted_sum: vec![DVector::zeros(d); k],
            scatter: vec![DMatrix::zeros(d, d); k],
            total_samples: 0,
        }
    }

    fn add_task(&mut self, task: &Task, state: &VariationalState) -> Result<()> {
        let k = self.mass.len();
        let d = self.center.first().map_or(0, Vec::len);
        if task.dim() != d {
            return Err(Error::Argument(format!(
                "task {:?} has dimension {}, statistics expect {d}",
                task.id(),
                task.dim()
            )));
        }
        if state.r.len() != task.num_classes()
            || state
                .r
                .iter()
                .zip(task.classes())
                .any(|(r, cls)| r.len() != cls.len() * k)
        {
            return Err(Error::Argument(format!(
                "responsibilities do not match task {:?}",
                task.id()
            )));
        }
        let mut task_mass = vec![0.0; k];
        let mut centered = DVector::zeros(d);
        for (cls, r) in task.classes().iter().zip(&state.r) {
            for (row, resp) in cls.rows().zip(r.chunks_exact(k)) {
                for kk in 0..k {
                    let w = resp[kk];
                    if w == 0.0 {
                        continue;
                    }
                    for i in 0..d {
                        centered[i] = row[i] as f64 - self.center[kk][i];
                    }
                    task_mass[kk] += w;
                    self.weighted_sum[kk].axpy(w, &centered, 1.0);
                    self.scatter[kk].ger(w, &centered, &centered, 1.0);
                }
            }
        }
        for (m, t) in self.mass.iter_mut().zip(&task_mass) {
            *m += t;
        }
        self.task_mass.push(task_mass);
        self.total_samples += task.total_samples();
        Ok(())
    }

    /// Appends `other` (accumulated about the same centers) to `self`.
    pub fn merge(&mut self, other: LocalThemeStats) {
        for k in 0..self.mass.len() {
            self.mass[k] += other.mass[k];
            self.weighted_sum[k] += &other.weighted_sum[k];
            self.scatter[k] += &other.scatter[k];
        }
        self.task_mass.extend(other.task_mass);
        self.total_samples += other.total_samples;
    }
}

/// Sums responsibility mass and first/second moments over a batch.
///
/// `centers` (K×D) is the shift the moments are taken about; any value gives
/// the same M-step up to rounding.
pub fn accumulate_stats(
    tasks: &[&Task],
    states: &[&VariationalState],
    centers: &[Vec<f64>],
) -> Result<LocalThemeStats> {
    if tasks.len() != states.len() {
        return Err(Error::Argument(format!(
            "{} tasks but {} variational states",
            tasks.len(),
            states.len()
        )));
    }
    let mut stats = LocalThemeStats::empty(centers.to_vec());
    for (task, state) in tasks.iter().zip(states) {
        stats.add_task(task, state)?;
    }
    Ok(stats)
}

/// Batch-optimal ("local") image-themes.
#[derive(Debug, Clone)]
pub struct LocalThemes {
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Covariance>,
    /// Themes whose mass was below [`MIN_THEME_MASS`] and kept their
    /// previous values.
    pub skipped: Vec<usize>,
}

/// Weighted mean and covariance (plus `jitter`·I) per theme.
///
/// Themes with negligible mass fall back to `previous`.
pub fn local_mstep(
    stats: &LocalThemeStats,
    jitter: f64,
    previous: &ThemeModel,
) -> Result<LocalThemes> {
    let k = stats.mass.len();
    let d = stats.center.first().map_or(0, Vec::len);
    if previous.image_themes() != k || previous.dim() != d {
        return Err(Error::Argument(
            "statistics do not match the previous model's shape".into(),
        ));
    }
    let mut mu = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    for kk in 0..k {
        let n = stats.mass[kk];
        if !(n >= MIN_THEME_MASS) {
            log::debug!("image-theme {kk} has mass {n:e}; keeping previous parameters");
            skipped.push(kk);
            mu.push(previous.mu()[kk].clone());
            sigma.push(previous.sigma()[kk].clone());
            continue;
        }
        let shift = &stats.weighted_sum[kk] / n;
        let mut cov = &stats.scatter[kk] / n;
        cov.syger(-1.0, &shift, &shift, 1.0);
        cov.fill_upper_triangle_with_lower_triangle();
        for i in 0..d {
            cov[(i, i)] += jitter;
        }
        mu.push(
            stats.center[kk]
                .iter()
                .zip(shift.iter())
                .map(|(c, s)| c + s)
                .collect(),
        );
        sigma.push(
            Covariance::new(cov)
                .map_err(|e| Error::Numeric(format!("local covariance of theme {kk}: {e}")))?,
        );
    }
    Ok(LocalThemes { mu, sigma, skipped })
}

/// Sufficient statistics of the α objective over a batch:
/// n_l = Σ_d Σ_c η_dcl and s_lk = Σ_d Σ_c η_dcl ln θ̃_dck.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaStats {
    pub eta_mass: Vec<f64>,
    pub weighted_ln_theta: Vec<Vec<f64>>,
}

impl AlphaStats {
    pub fn new(task_themes: usize, image_themes: usize) -> Self {
        Self {
            eta_mass: vec![0.0; task_themes],
            weighted_ln_theta: vec![vec![0.0; image_themes]; task_themes],
        }
    }

    pub fn add_state(&mut self, state: &VariationalState) -> Result<()> {
        for (gamma, eta) in state.gamma.iter().zip(&state.eta) {
            let ln_theta = dirichlet_expected_log(gamma)?;
            for (l, &e) in eta.iter().enumerate() {
                self.eta_mass[l] += e;
                for (s, &lt) in self.weighted_ln_theta[l].iter_mut().zip(&ln_theta) {
                    *s += e * lt;
                }
            }
        }
        Ok(())
    }

    pub fn from_states<'s>(
        states: impl IntoIterator<Item = &'s VariationalState>,
        task_themes: usize,
        image_themes: usize,
    ) -> Result<Self> {
        let mut stats = Self::new(task_themes, image_themes);
        for s in states {
            stats.add_state(s)?;
        }
        Ok(stats)
    }

    /// g_lk = n_l [ψ(Σ_j α_lj) − ψ(α_lk)] + s_lk.
    pub fn gradient(&self, alpha: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        alpha
            .iter()
            .enumerate()
            .map(|(l, row)| {
                let psi_total = digamma(row.iter().sum())?;
                row.iter()
                    .zip(&self.weighted_ln_theta[l])
                    .map(|(&a, &s)| Ok(self.eta_mass[l] * (psi_total - digamma(a)?) + s))
                    .collect()
            })
            .collect()
    }
}

/// Gradient of the α-dependent part of the bound,
/// Σ_d Σ_c Σ_l η_dcl [ln Γ(Σ_k α_lk) − Σ_k ln Γ(α_lk) + Σ_k (α_lk − 1) ln θ̃_dck],
/// with respect to each α_lk.
pub fn alpha_gradient(states: &[VariationalState], alpha: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = alpha.first().map_or(0, Vec::len);
    AlphaStats::from_states(states, alpha.len(), k)?.gradient(alpha)
}

/// Gradient and structured Hessian H_l = diag(q_l) + u_l 11ᵀ for each α row.
///
/// q_lkk = −n_l ψ′(α_lk) and u_l = n_l ψ′(Σ_k α_lk). `b` holds the
/// Sherman–Morrison scalar (Σ_j g_lj/q_ljj) / (1/u_l + Σ_j 1/q_ljj), or `None`
/// for rows where it is undefined (no η mass, or a singular correction).
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaNewtonWork {
    pub g: Vec<Vec<f64>>,
    pub q_diag: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub b: Vec<Option<f64>>,
}

impl AlphaNewtonWork {
    pub fn new(stats: &AlphaStats, alpha: &[Vec<f64>]) -> Result<Self> {
        let g = stats.gradient(alpha)?;
        let mut q_diag = Vec::with_capacity(alpha.len());
        let mut u = Vec::with_capacity(alpha.len());
        for (l, row) in alpha.iter().enumerate() {
            let n = stats.eta_mass[l];
            q_diag.push(
                row.iter()
                    .map(|&a| Ok(-n * trigamma(a)?))
                    .collect::<Result<Vec<_>>>()?,
            );
            u.push(n * trigamma(row.iter().sum())?);
        }
        Ok(Self::from_parts(g, q_diag, u))
    }

    /// Assembles the work from an explicit gradient and Hessian parts.
    pub fn from_parts(g: Vec<Vec<f64>>, q_diag: Vec<Vec<f64>>, u: Vec<f64>) -> Self {
        let b = g
            .iter()
            .zip(&q_diag)
            .zip(&u)
            .map(|((g_row, q_row), &u_l)| sherman_morrison_scalar(g_row, q_row, u_l))
            .collect();
        Self { g, q_diag, u, b }
    }
}

fn sherman_morrison_scalar(g: &[f64], q: &[f64], u: f64) -> Option<f64> {
    if q.iter().any(|&v| v == 0.0 || !v.is_finite()) || !u.is_finite() || u == 0.0 {
        return None;
    }
    let inv_sum: f64 = q.iter().map(|v| 1.0 / v).sum();
    let denom = 1.0 / u + inv_sum;
    let scale = (1.0 / u).abs() + q.iter().map(|v| (1.0 / v).abs()).sum::<f64>();
    if denom.abs() <= 1e-12 * scale {
        return None;
    }
    Some(g.iter().zip(q).map(|(g, q)| g / q).sum::<f64>() / denom)
}

/// H⁻¹g row by row: (g_lk − b_l) / q_lkk.
///
/// Falls back to the diagonal-only direction g_lk / q_lkk when the rank-one
/// correction is singular, and to zero for rows with a zero diagonal (no η
/// mass in the batch).
pub fn alpha_newton_direction(work: &AlphaNewtonWork) -> Vec<Vec<f64>> {
    work.g
        .iter()
        .zip(&work.q_diag)
        .zip(&work.b)
        .map(|((g_row, q_row), b)| {
            if q_row.iter().any(|&q| q == 0.0 || !q.is_finite()) {
                return vec![0.0; g_row.len()];
            }
            let b = b.unwrap_or(0.0);
            g_row.iter().zip(q_row).map(|(g, q)| (g - b) / q).collect()
        })
        .collect()
}

/// α − ρ·direction, halving the direction (up to 20 times) while any entry
/// would become non-positive, then flooring at [`ALPHA_FLOOR`].
pub fn step_alpha(alpha: &[Vec<f64>], direction: &[Vec<f64>], rho: f64) -> Vec<Vec<f64>> {
    let propose = |scale: f64| -> Vec<Vec<f64>> {
        alpha
            .iter()
            .zip(direction)
            .map(|(a_row, d_row)| {
                a_row
                    .iter()
                    .zip(d_row)
                    .map(|(a, d)| a - rho * scale * d)
                    .collect()
            })
            .collect()
    };
    let mut scale = 1.0;
    let mut next = propose(scale);
    let mut halvings = 0;
    while halvings < MAX_ALPHA_HALVINGS && next.iter().flatten().any(|v| !(*v > 0.0)) {
        scale *= 0.5;
        halvings += 1;
        next = propose(scale);
    }
    for v in next.iter_mut().flatten() {
        if !(*v >= ALPHA_FLOOR) {
            *v = ALPHA_FLOOR;
        }
    }
    next
}

/// ρ_d = (τ₀ + d)^(−τ₁) for batch counter d ≥ 1.
pub fn learning_rate(tau0: f64, tau1: f64, d: u64) -> f64 {
    (tau0 + d as f64).powf(-tau1)
}

/// Blends the model towards the local themes with weight ρ and takes a
/// ρ-scaled Newton step on α.
pub fn online_update(
    model: &ThemeModel,
    local: &LocalThemes,
    alpha_direction: &[Vec<f64>],
    rho: f64,
    jitter: f64,
) -> Result<ThemeModel> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Argument(format!(
            "learning rate {rho} outside [0, 1]"
        )));
    }
    let k = model.image_themes();
    if local.mu.len() != k || local.sigma.len() != k {
        return Err(Error::Argument("local themes do not match model K".into()));
    }
    let mu = model
        .mu()
        .iter()
        .zip(&local.mu)
        .map(|(old, new)| {
            old.iter()
                .zip(new)
                .map(|(o, n)| (1.0 - rho) * o + rho * n)
                .collect()
        })
        .collect();
    let sigma = model
        .sigma()
        .iter()
        .zip(&local.sigma)
        .enumerate()
        .map(|(kk, (old, new))| {
            let blended = old.matrix() * (1.0 - rho) + new.matrix() * rho;
            Covariance::new(blended.clone()).or_else(|_| {
                let d = blended.nrows();
                Covariance::new(blended + DMatrix::identity(d, d) * jitter)
                    .map_err(|e| Error::Numeric(format!("blended covariance of theme {kk}: {e}")))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let alpha = step_alpha(model.alpha(), alpha_direction, rho);
    if alpha.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("alpha became non-finite".into()));
    }
    Ok(ThemeModel::from_parts(
        mu,
        sigma,
        alpha,
        model.delta().to_vec(),
    ))
}

/// Diagnostics of one mini-batch update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub batch: u64,
    pub rho: f64,
    /// Mean per-task ELBO from the batch's E-steps (before the update).
    pub mean_elbo: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub estep_iters_mean: f64,
    pub estep_nonconverged: usize,
    pub gamma_clamps: usize,
    pub skipped_themes: usize,
}

/// E-steps for a batch in parallel; output order matches `batch`.
pub fn batch_estep(
    batch: &[&Task],
    model: &ThemeModel,
    config: &TrainConfig,
) -> Result<Vec<EStepOutput>> {
    batch
        .par_iter()
        .map(|t| run_estep(t, model, config))
        .collect()
}

/// One mini-batch update with learning rate `rho`: E-steps, pooled local
/// M-step, α Newton direction and the online blend.
pub fn train_step(
    model: &ThemeModel,
    batch: &[&Task],
    config: &TrainConfig,
    rho: f64,
) -> Result<(ThemeModel, BatchLog)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let outputs = batch_estep(batch, model, config)?;
    let states: Vec<&VariationalState> = outputs.iter().map(|o| &o.state).collect();

    // per-task stats in parallel, reduced sequentially in batch order
    let per_task: Vec<(LocalThemeStats, AlphaStats)> = batch
        .par_iter()
        .zip(states.par_iter())
        .map(|(task, state)| {
            let mut theme = LocalThemeStats::empty(model.mu().to_vec());
            theme.add_task(task, state)?;
            let mut alpha = AlphaStats::new(model.task_themes(), model.image_themes());
            alpha.add_state(state)?;
            Ok((theme, alpha))
        })
        .collect::<Result<_>>()?;
    let mut theme_stats = LocalThemeStats::empty(model.mu().to_vec());
    let mut alpha_stats = AlphaStats::new(model.task_themes(), model.image_themes());
    for (t, a) in per_task {
        theme_stats.merge(t);
        for l in 0..model.task_themes() {
            alpha_stats.eta_mass[l] += a.eta_mass[l];
            for (s, v) in alpha_stats.weighted_ln_theta[l]
                .iter_mut()
                .zip(&a.weighted_ln_theta[l])
            {
                *s += v;
            }
        }
    }

    let local = local_mstep(&theme_stats, config.jitter, model)?;
    let work = AlphaNewtonWork::new(&alpha_stats, model.alpha())?;
    let direction = alpha_newton_direction(&work);
    let next = online_update(model, &local, &direction, rho, config.jitter)?;

    let n = outputs.len() as f64;
    let (alpha_min, alpha_max) = next
        .alpha()
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let log = BatchLog {
        batch: 0,
        rho,
        mean_elbo: outputs.iter().map(|o| o.elbo).sum::<f64>() / n,
        alpha_min,
        alpha_max,
        estep_iters_mean: outputs.iter().map(|o| o.iterations as f64).sum::<f64>() / n,
        estep_nonconverged: outputs.iter().filter(|o| !o.converged).count(),
        gamma_clamps: outputs.iter().map(|o| o.gamma_clamps).sum(),
        skipped_themes: local.skipped.len(),
    };
    Ok((next, log))
}

/// Online training from an existing model.
///
/// Tasks are visited in a fresh seeded permutation each epoch and cut into
/// batches of `batch_size` (the last batch of an epoch may be smaller). Batch
/// d = 1, 2, … uses ρ_d = (τ₀ + d)^(−τ₁); training stops after
/// `max_batches` updates.
pub fn train_from(
    mut model: ThemeModel,
    tasks: &TaskCollection,
    config: &TrainConfig,
) -> Result<(ThemeModel, Vec<BatchLog>)> {
    config.validate()?;
    if tasks.dim() != model.dim() {
        return Err(Error::Data(format!(
            "data dimension {} does not match model dimension {}",
            tasks.dim(),
            model.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    let mut cursor = order.len();
    let mut logs = Vec::with_capacity(config.max_batches);
    for d in 1..=config.max_batches as u64 {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let batch: Vec<&Task> = order[cursor..end]
            .iter()
            .map(|&i| &tasks.tasks()[i])
            .collect();
        cursor = end;
        let rho = learning_rate(config.tau0, config.tau1, d);
        let (next, mut log) = train_step(&model, &batch, config, rho)?;
        log.batch = d;
        log::info!(
            "batch {d}: rho {rho:.5} mean elbo {:.4} alpha [{:.4}, {:.4}] e-step iters {:.1}",
            log.mean_elbo,
            log.alpha_min,
            log.alpha_max,
            log.estep_iters_mean
        );
        logs.push(log);
        model = next;
    }
    Ok((model, logs))
}

/// Initializes a model from the data (see [`init_model`]) and trains it.
pub fn train(
    tasks: &TaskCollection,
    task_themes: usize,
    image_themes: usize,
    delta: f64,
    config: &TrainConfig,
) -> Result<(ThemeModel, Vec<BatchLog>)> {
    config.validate()?;
    let model = init_model(
        tasks,
        task_themes,
        image_themes,
        delta,
        config.jitter,
        config.seed,
    )?;
    train_from(model, tasks, config)
}
