//! Per-task E-step: coordinate ascent over the variational parameters
//! r (sample responsibilities), γ (class image-theme Dirichlet), η (class
//! task-theme assignment) and λ (task task-theme Dirichlet), with the model
//! held fixed, plus evaluation of the evidence lower bound.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_dirichlet, Task};
use crate::error::{Error, Result};
use crate::model::{ThemeModel, TrainConfig};
use crate::specfn::{digamma, log_beta_dirichlet, normalize_log_weights};

/// Floor applied to γ entries that come out non-positive.
pub const GAMMA_FLOOR: f64 = 1e-8;

/// Concentration of the symmetric Dirichlet used to perturb the uniform
/// initial r and η rows.
const INIT_CONCENTRATION: f64 = 100.0;

/// Variational parameters of one task.
///
/// `r[c]` is a row-major N_c×K block of responsibilities, `gamma[c]` has
/// length K, `eta[c]` length L and `lambda` length L. Rows of `r` and `eta`
/// sum to one; `gamma` and `lambda` are strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub r: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub eta: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
}

impl VariationalState {
    pub fn num_classes(&self) -> usize {
        self.gamma.len()
    }

    pub fn image_themes(&self) -> usize {
        self.gamma.first().map_or(0, Vec::len)
    }

    /// Responsibility row of sample `n` in class `c`.
    pub fn r_row(&self, c: usize, n: usize) -> &[f64] {
        let k = self.image_themes();
        &self.r[c][n * k..(n + 1) * k]
    }

    /// Checks the simplex and positivity invariants to tolerance `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        let k = self.image_themes();
        for (c, block) in self.r.iter().enumerate() {
            for (n, row) in block.chunks_exact(k).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > tol || row.iter().any(|v| *v < 0.0) {
                    return Err(Error::Numeric(format!(
                        "r[{c}][{n}] is not a probability vector (sum {s})"
                    )));
                }
            }
        }
        for (c, row) in self.eta.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > tol || row.iter().any(|v| *v < 0.0) {
                return Err(Error::Numeric(format!(
                    "eta[{c}] is not a probability vector (sum {s})"
                )));
            }
        }
        if self
            .gamma
            .iter()
            .flatten()
            .chain(&self.lambda)
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(Error::Numeric(
                "gamma/lambda entries must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// E_Dir(u)[ln x_k] = ψ(u_k) − ψ(Σ_j u_j).
pub fn dirichlet_expected_log(u: &[f64]) -> Result<Vec<f64>> {
    if u.is_empty() {
        return Err(Error::domain(
            "dirichlet_expected_log",
            "empty parameter vector",
        ));
    }
    let psi_total = digamma(u.iter().sum())?;
    u.iter().map(|&v| Ok(digamma(v)? - psi_total)).collect()
}

/// Responsibilities for one class.
///
/// `log_pdf` is the row-major N×K block of ln N(x_n; μ_k, Σ_k) and
/// `ln_theta` the expected log image-theme mixture of the class. Writes
/// r_nk ∝ exp(ln θ̃_k + ln N(x_n; μ_k, Σ_k)) into `r`.
pub fn update_r(log_pdf: &[f64], ln_theta: &[f64], r: &mut [f64]) -> Result<()> {
    let k = ln_theta.len();
    for (row_in, row_out) in log_pdf.chunks_exact(k).zip(r.chunks_exact_mut(k)) {
        for ((out, &lp), &lt) in row_out.iter_mut().zip(row_in).zip(ln_theta) {
            *out = lp + lt;
        }
        normalize_log_weights(row_out)?;
    }
    Ok(())
}

/// γ_k = 1 + Σ_n r_nk + Σ_l η_l (α_lk − 1) for one class.
///
/// Returns the new γ and the number of entries that were floored at
/// [`GAMMA_FLOOR`].
pub fn update_gamma(r: &[f64], eta: &[f64], alpha: &[Vec<f64>]) -> (Vec<f64>, usize) {
    let k = alpha[0].len();
    let mut gamma = vec![1.0; k];
    for row in r.chunks_exact(k) {
        for (g, &v) in gamma.iter_mut().zip(row) {
            *g += v;
        }
    }
    for (&e, a_row) in eta.iter().zip(alpha) {
        for (g, &a) in gamma.iter_mut().zip(a_row) {
            *g += e * (a - 1.0);
        }
    }
    let mut clamped = 0;
    for g in gamma.iter_mut() {
        if !(*g > GAMMA_FLOOR) {
            *g = GAMMA_FLOOR;
            clamped += 1;
        }
    }
    (gamma, clamped)
}

/// η_l ∝ exp(ln φ̃_l − ln B(α_l) + Σ_k (α_lk − 1) ln θ̃_k) for one class.
pub fn update_eta(
    ln_theta: &[f64],
    ln_phi: &[f64],
    alpha: &[Vec<f64>],
    ln_b_alpha: &[f64],
) -> Result<Vec<f64>> {
    let mut eta: Vec<f64> = alpha
        .iter()
        .zip(ln_phi)
        .zip(ln_b_alpha)
        .map(|((a_row, &lp), &lb)| {
            lp - lb
                + a_row
                    .iter()
                    .zip(ln_theta)
                    .map(|(&a, &lt)| (a - 1.0) * lt)
                    .sum::<f64>()
        })
        .collect();
    normalize_log_weights(&mut eta)?;
    Ok(eta)
}

/// λ_l = δ_l + Σ_c η_cl.
pub fn update_lambda(eta: &[Vec<f64>], delta: &[f64]) -> Vec<f64> {
    let mut lambda = delta.to_vec();
    for row in eta {
        for (l, &e) in lambda.iter_mut().zip(row) {
            *l += e;
        }
    }
    lambda
}

/// The nine expectation terms of the evidence lower bound for one task.
///
/// The bound is the sum of the five `e_log_p_*` terms minus the four
/// `e_log_q_*` terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboTerms {
    pub e_log_p_x: f64,
    pub e_log_p_z: f64,
    pub e_log_p_theta: f64,
    pub e_log_p_y: f64,
    pub e_log_p_phi: f64,
    pub e_log_q_z: f64,
    pub e_log_q_theta: f64,
    pub e_log_q_y: f64,
    pub e_log_q_phi: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.e_log_p_x + self.e_log_p_z + self.e_log_p_theta + self.e_log_p_y + self.e_log_p_phi
            - self.e_log_q_z
            - self.e_log_q_theta
            - self.e_log_q_y
            - self.e_log_q_phi
    }
}

fn x_ln_x(v: f64) -> f64 {
    if v > 0.0 {
        v * v.ln()
    } else {
        0.0
    }
}

/// Coordinate-ascent driver for one task against a fixed model.
///
/// Caches the Gaussian log-densities of every sample and ln B(α_l), which stay
/// fixed for the whole E-step.
pub struct EStep<'a> {
    task: &'a Task,
    model: &'a ThemeModel,
    log_pdf: Vec<Vec<f64>>,
    ln_b_alpha: Vec<f64>,
    state: VariationalState,
    gamma_clamps: usize,
}

impl<'a> EStep<'a> {
    /// Starts from the given state after checking its shape against the task
    /// and model.
    pub fn new(task: &'a Task, model: &'a ThemeModel, state: VariationalState) -> Result<Self> {
        let mut step = Self::prepare(task, model)?;
        let (k, l) = (model.image_themes(), model.task_themes());
        let shape_ok = state.r.len() == task.num_classes()
            && state.gamma.len() == task.num_classes()
            && state.eta.len() == task.num_classes()
            && state.lambda.len() == l
            && state
                .r
                .iter()
                .zip(task.classes())
                .all(|(r, cls)| r.len() == cls.len() * k)
            && state.gamma.iter().all(|g| g.len() == k)
            && state.eta.iter().all(|e| e.len() == l);
        if !shape_ok {
            return Err(Error::Argument(
                "variational state shape does not match task and model".into(),
            ));
        }
        step.state = state;
        Ok(step)
    }

    /// Random initialization: r and η rows drawn from a symmetric
    /// Dirichlet(100) around uniform, then γ and λ from their update equations.
    pub fn init(task: &'a Task, model: &'a ThemeModel, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut step = Self::prepare(task, model)?;
        let (k, l) = (model.image_themes(), model.task_themes());
        let conc_k = vec![INIT_CONCENTRATION; k];
        let conc_l = vec![INIT_CONCENTRATION; l];
        let mut clamps = 0;
        for (c, cls) in task.classes().iter().enumerate() {
            let r = &mut step.state.r[c];
            for n in 0..cls.len() {
                r[n * k..(n + 1) * k].copy_from_slice(&sample_dirichlet(rng, &conc_k));
            }
            step.state.eta[c] = sample_dirichlet(rng, &conc_l);
            let (g, cl) = update_gamma(&step.state.r[c], &step.state.eta[c], model.alpha());
            step.state.gamma[c] = g;
            clamps += cl;
        }
        step.state.lambda = update_lambda(&step.state.eta, model.delta());
        step.gamma_clamps = clamps;
        Ok(step)
    }

    fn prepare(task: &'a Task, model: &'a ThemeModel) -> Result<Self> {
        if task.dim() != model.dim() {
            return Err(Error::Data(format!(
                "task {:?} has dimension {}, model expects {}",
                task.id(),
                task.dim(),
                model.dim()
            )));
        }
        let k = model.image_themes();
        let l = model.task_themes();
        let mut buf = vec![0.0; task.dim()];
        let log_pdf = task
            .classes()
            .iter()
            .map(|cls| {
                let mut out = Vec::with_capacity(cls.len() * k);
                for row in cls.rows() {
                    for (b, &v) in buf.iter_mut().zip(row) {
                        *b = v as f64;
                    }
                    for kk in 0..k {
                        out.push(model.log_pdf_unchecked(&buf, kk));
                    }
                }
                out
            })
            .collect();
        let ln_b_alpha = model
            .alpha()
            .iter()
            .map(|a| log_beta_dirichlet(a))
            .collect::<Result<Vec<_>>>()?;
        let c = task.num_classes();
        let state = VariationalState {
            r: task
                .classes()
                .iter()
                .map(|cls| vec![0.0; cls.len() * k])
                .collect(),
            gamma: vec![vec![1.0; k]; c],
            eta: vec![vec![1.0 / l as f64; l]; c],
            lambda: model.delta().to_vec(),
        };
        Ok(Self {
            task,
            model,
            log_pdf,
            ln_b_alpha,
            state,
            gamma_clamps: 0,
        })
    }

    pub fn state(&self) -> &VariationalState {
        &self.state
    }

    pub fn into_state(self) -> VariationalState {
        self.state
    }

    /// Replaces the current state (shape is not rechecked).
    pub fn set_state(&mut self, state: VariationalState) {
        self.state = state;
    }

    /// Total number of γ entries floored so far.
    pub fn gamma_clamps(&self) -> usize {
        self.gamma_clamps
    }

    pub fn update_r(&mut self, c: usize) -> Result<()> {
        let ln_theta = dirichlet_expected_log(&self.state.gamma[c])?;
        update_r(&self.log_pdf[c], &ln_theta, &mut self.state.r[c])
    }

    pub fn update_gamma(&mut self, c: usize) {
        let (g, clamped) = update_gamma(&self.state.r[c], &self.state.eta[c], self.model.alpha());
        if clamped > 0 {
            log::warn!(
                "task {:?} class {c}: {clamped} gamma entries floored at {GAMMA_FLOOR:e}",
                self.task.id()
            );
        }
        self.gamma_clamps += clamped;
        self.state.gamma[c] = g;
    }

    pub fn update_eta(&mut self, c: usize) -> Result<()> {
        let ln_theta = dirichlet_expected_log(&self.state.gamma[c])?;
        let ln_phi = dirichlet_expected_log(&self.state.lambda)?;
        self.state.eta[c] = update_eta(&ln_theta, &ln_phi, self.model.alpha(), &self.ln_b_alpha)?;
        Ok(())
    }

    pub fn update_lambda(&mut self) {
        self.state.lambda = update_lambda(&self.state.eta, self.model.delta());
    }

    /// One sweep in the order r, γ, η, λ. Returns the mean absolute change of λ.
    pub fn sweep(&mut self) -> Result<f64> {
        let c = self.task.num_classes();
        for i in 0..c {
            self.update_r(i)?;
        }
        for i in 0..c {
            self.update_gamma(i);
        }
        for i in 0..c {
            self.update_eta(i)?;
        }
        let previous = std::mem::take(&mut self.state.lambda);
        self.update_lambda();
        let change = previous
            .iter()
            .zip(&self.state.lambda)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / previous.len() as f64;
        Ok(change)
    }

    pub fn elbo_terms(&self) -> Result<ElboTerms> {
        let model = self.model;
        let st = &self.state;
        let k = model.image_themes();
        let mut t = ElboTerms::default();
        let ln_phi = dirichlet_expected_log(&st.lambda)?;

        for c in 0..st.num_classes() {
            let ln_theta = dirichlet_expected_log(&st.gamma[c])?;
            let mut mass = vec![0.0; k];
            for (row, lp) in st.r[c].chunks_exact(k).zip(self.log_pdf[c].chunks_exact(k)) {
                for kk in 0..k {
                    t.e_log_p_x += row[kk] * lp[kk];
                    t.e_log_q_z += x_ln_x(row[kk]);
                    mass[kk] += row[kk];
                }
            }
            t.e_log_p_z += mass
                .iter()
                .zip(&ln_theta)
                .map(|(m, lt)| m * lt)
                .sum::<f64>();

            for (l, (&e, a_row)) in st.eta[c].iter().zip(model.alpha()).enumerate() {
                let inner = -self.ln_b_alpha[l]
                    + a_row
                        .iter()
                        .zip(&ln_theta)
                        .map(|(&a, &lt)| (a - 1.0) * lt)
                        .sum::<f64>();
                t.e_log_p_theta += e * inner;
                t.e_log_p_y += e * ln_phi[l];
                t.e_log_q_y += x_ln_x(e);
            }

            t.e_log_q_theta += -log_beta_dirichlet(&st.gamma[c])?
                + st.gamma[c]
                    .iter()
                    .zip(&ln_theta)
                    .map(|(&g, &lt)| (g - 1.0) * lt)
                    .sum::<f64>();
        }

        t.e_log_p_phi = -log_beta_dirichlet(model.delta())?
            + model
                .delta()
                .iter()
                .zip(&ln_phi)
                .map(|(&d, &lp)| (d - 1.0) * lp)
                .sum::<f64>();
        t.e_log_q_phi = -log_beta_dirichlet(&st.lambda)?
            + st.lambda
                .iter()
                .zip(&ln_phi)
                .map(|(&v, &lp)| (v - 1.0) * lp)
                .sum::<f64>();
        Ok(t)
    }

    pub fn elbo(&self) -> Result<f64> {
        Ok(self.elbo_terms()?.total())
    }
}

/// Result of a full E-step.
#[derive(Debug, Clone)]
pub struct EStepOutput {
    pub state: VariationalState,
    /// Number of sweeps performed.
    pub iterations: usize,
    /// Whether the λ-change criterion was met before `max_e_iters`.
    pub converged: bool,
    pub gamma_clamps: usize,
    /// Evidence lower bound at the returned state.
    pub elbo: f64,
}

/// Stream id for a task's E-step initialization: FNV-1a of its id, so the
/// result depends only on (seed, task) and not on the task's position.
pub fn estep_stream(task_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in task_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Runs coordinate ascent on one task until the mean absolute change of λ
/// drops below `config.e_tol` or `config.max_e_iters` sweeps have run.
pub fn run_estep(task: &Task, model: &ThemeModel, config: &TrainConfig) -> Result<EStepOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(estep_stream(task.id()));
    let mut step = EStep::init(task, model, &mut rng)?;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_e_iters {
        let change = step.sweep()?;
        iterations += 1;
        if change < config.e_tol {
            converged = true;
            break;
        }
    }
    let elbo = step.elbo()?;
    Ok(EStepOutput {
        gamma_clamps: step.gamma_clamps(),
        state: step.into_state(),
        iterations,
        converged,
        elbo,
    })
}

/// ELBO of `state` for `task` under `model`.
pub fn elbo(task: &Task, state: &VariationalState, model: &ThemeModel) -> Result<f64> {
    EStep::new(task, model, state.clone())?.elbo()
}

/// All nine ELBO terms of `state` for `task` under `model`.
pub fn elbo_terms(task: &Task, state: &VariationalState, model: &ThemeModel) -> Result<ElboTerms> {
    EStep::new(task, model, state.clone())?.elbo_terms()
}
