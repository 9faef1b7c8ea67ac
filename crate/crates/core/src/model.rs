//! Global model parameters: K Gaussian image-themes, L Dirichlet task-theme
//! rows and the task-theme prior, plus training hyper-parameters and the JSON
//! checkpoint format.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TaskCollection;
use crate::error::{Error, Result};

/// Default diagonal jitter added to covariance estimates.
pub const DEFAULT_JITTER: f64 = 1e-6;

const CHECKPOINT_VERSION: u32 = 1;

/// A symmetric positive-definite covariance with its cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct Covariance {
    matrix: DMatrix<f64>,
    lower: DMatrix<f64>,
    log_det: f64,
}

impl Covariance {
    /// Factorizes `matrix`, failing if it is not symmetric positive definite.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let d = matrix.nrows();
        if d == 0 || matrix.ncols() != d {
            return Err(Error::Model(format!(
                "covariance must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("covariance has non-finite entries".into()));
        }
        let scale = matrix.diagonal().amax().max(f64::MIN_POSITIVE);
        for i in 0..d {
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-9 * scale {
                    return Err(Error::Model(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let chol = nalgebra::Cholesky::new(matrix.clone())
            .ok_or_else(|| Error::Model("covariance is not positive definite".into()))?;
        let lower = chol.unpack();
        let log_det = 2.0 * lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::Model(
                "covariance log-determinant is not finite".into(),
            ));
        }
        Ok(Self {
            matrix,
            lower,
            log_det,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Lower-triangular Cholesky factor L with Σ = L Lᵀ.
    pub fn cholesky_lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// (x − μ)ᵀ Σ⁻¹ (x − μ) by forward substitution against the factor.
    pub fn mahalanobis_sq(&self, x: &[f64], mu: &[f64]) -> f64 {
        let d = self.dim();
        let mut y = [0.0f64; 16];
        let mut heap;
        let y: &mut [f64] = if d <= 16 {
            &mut y[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut acc = 0.0;
        for i in 0..d {
            let mut s = x[i] - mu[i];
            for (j, yj) in y.iter().enumerate().take(i) {
                s -= self.lower[(i, j)] * yj;
            }
            let yi = s / self.lower[(i, i)];
            y[i] = yi;
            acc += yi * yi;
        }
        acc
    }
}

/// Global LDCC parameters.
///
/// Immutable once built: every update produces a new value, so the model can be
/// shared read-only across E-step workers.
#[derive(Debug, Clone)]
pub struct ThemeModel {
    mu: Vec<Vec<f64>>,
    sigma: Vec<Covariance>,
    alpha: Vec<Vec<f64>>,
    delta: Vec<f64>,
    dim: usize,
}

impl ThemeModel {
    /// Builds and validates a model from raw parameters.
    ///
    /// `mu` is K×D, `sigma` holds K D×D matrices, `alpha` is L×K and `delta` has
    /// length L.
    pub fn new(
        mu: Vec<Vec<f64>>,
        sigma: Vec<DMatrix<f64>>,
        alpha: Vec<Vec<f64>>,
        delta: Vec<f64>,
    ) -> Result<Self> {
        let k = mu.len();
        if k == 0 {
            return Err(Error::Model("at least one image-theme is required".into()));
        }
        let dim = mu[0].len();
        if dim == 0 {
            return Err(Error::Model("dimension must be at least 1".into()));
        }
        if let Some(i) = mu.iter().position(|m| m.len() != dim) {
            return Err(Error::Model(format!("mean {i} has wrong dimension")));
        }
        if mu.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Model("means must be finite".into()));
        }
        if sigma.len() != k {
            return Err(Error::Model(format!(
                "expected {k} covariances, got {}",
                sigma.len()
            )));
        }
        let sigma = sigma
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                if m.nrows() != dim {
                    return Err(Error::Model(format!("covariance {i} has wrong dimension")));
                }
                Covariance::new(m).map_err(|e| Error::Model(format!("theme {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let l = alpha.len();
        if l == 0 {
            return Err(Error::Model("at least one task-theme is required".into()));
        }
        if delta.len() != l {
            return Err(Error::Model(format!(
                "delta has length {}, expected {l}",
                delta.len()
            )));
        }
        for (i, row) in alpha.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Model(format!("alpha row {i} has wrong length")));
            }
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::Model(format!("alpha row {i} has invalid entry {v}")));
            }
        }
        if let Some(v) = delta.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Model(format!("delta has invalid entry {v}")));
        }
        Ok(Self {
            mu,
            sigma,
            alpha,
            delta,
            dim,
        })
    }

    pub(crate) fn from_parts(
        mu: Vec<Vec<f64>>,
        sigma: Vec<Covariance>,
        alpha: Vec<Vec<f64>>,
        delta: Vec<f64>,
    ) -> Self {
        let dim = mu[0].len();
        Self {
            mu,
            sigma,
            alpha,
            delta,
            dim,
        }
    }

    /// Number of task-themes L.
    pub fn task_themes(&self) -> usize {
        self.alpha.len()
    }

    /// Number of image-themes K.
    pub fn image_themes(&self) -> usize {
        self.mu.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mu(&self) -> &[Vec<f64>] {
        &self.mu
    }

    pub fn sigma(&self) -> &[Covariance] {
        &self.sigma
    }

    pub fn alpha(&self) -> &[Vec<f64>] {
        &self.alpha
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    /// ln N(x; μ_k, Σ_k), using the cached factorization.
    pub fn gaussian_log_pdf(&self, x: &[f64], k: usize) -> Result<f64> {
        if k >= self.image_themes() {
            return Err(Error::Argument(format!(
                "theme index {k} out of range for K = {}",
                self.image_themes()
            )));
        }
        if x.len() != self.dim {
            return Err(Error::Argument(format!(
                "sample has dimension {}, model expects {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(
                "gaussian_log_pdf",
                "sample has non-finite entries",
            ));
        }
        Ok(self.log_pdf_unchecked(x, k))
    }

    #[inline]
    pub(crate) fn log_pdf_unchecked(&self, x: &[f64], k: usize) -> f64 {
        let cov = &self.sigma[k];
        let maha = cov.mahalanobis_sq(x, &self.mu[k]);
        -0.5 * (self.dim as f64 * (2.0 * PI).ln() + cov.log_det() + maha)
    }

    /// Writes the JSON checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            l: self.task_themes(),
            k: self.image_themes(),
            d: self.dim,
            delta: self.delta.clone(),
            alpha: self.alpha.clone(),
            mu: self.mu.clone(),
            sigma: self
                .sigma
                .iter()
                .map(|c| {
                    c.matrix()
                        .row_iter()
                        .map(|r| r.iter().copied().collect())
                        .collect()
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&file).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a JSON checkpoint, re-deriving factorizations and re-validating.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        file.into_model()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "D")]
    d: usize,
    delta: Vec<f64>,
    alpha: Vec<Vec<f64>>,
    mu: Vec<Vec<f64>>,
    sigma: Vec<Vec<Vec<f64>>>,
}

impl CheckpointFile {
    fn into_model(self) -> Result<ThemeModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        if self.mu.len() != self.k || self.alpha.len() != self.l || self.delta.len() != self.l {
            return Err(Error::Checkpoint(
                "declared L/K do not match parameter shapes".into(),
            ));
        }
        let mut sigma = Vec::with_capacity(self.k);
        for (i, rows) in self.sigma.into_iter().enumerate() {
            if rows.len() != self.d || rows.iter().any(|r| r.len() != self.d) {
                return Err(Error::Checkpoint(format!(
                    "sigma {i} is not {0}x{0}",
                    self.d
                )));
            }
            sigma.push(DMatrix::from_row_iterator(
                self.d,
                self.d,
                rows.into_iter().flatten(),
            ));
        }
        if self.mu.iter().any(|m| m.len() != self.d) {
            return Err(Error::Checkpoint("mean dimension does not match D".into()));
        }
        ThemeModel::new(self.mu, sigma, self.alpha, self.delta)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Hyper-parameters of the online training loop and the per-task E-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Delay τ₀ ≥ 0 of the learning-rate schedule.
    pub tau0: f64,
    /// Forgetting rate τ₁ ∈ (0.5, 1].
    pub tau1: f64,
    pub batch_size: usize,
    /// E-step stops when the mean absolute change of λ falls below this.
    pub e_tol: f64,
    pub max_e_iters: usize,
    pub jitter: f64,
    pub seed: u64,
    /// Number of mini-batch updates to perform.
    pub max_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau0: 100.0,
            tau1: 0.51,
            batch_size: 500,
            e_tol: 1e-3,
            max_e_iters: 100,
            jitter: DEFAULT_JITTER,
            seed: 0,
            max_batches: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0.is_finite() && self.tau0 >= 0.0) {
            return Err(Error::Argument(format!(
                "tau0 = {} must be >= 0",
                self.tau0
            )));
        }
        if !(self.tau1 > 0.5 && self.tau1 <= 1.0) {
            return Err(Error::Argument(format!(
                "tau1 = {} must lie in (0.5, 1] for the step sizes to satisfy the Robbins-Monro conditions",
                self.tau1
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        if !(self.e_tol.is_finite() && self.e_tol > 0.0) {
            return Err(Error::Argument(format!(
                "e_tol = {} must be > 0",
                self.e_tol
            )));
        }
        if self.max_e_iters == 0 {
            return Err(Error::Argument("max_e_iters must be at least 1".into()));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::Argument(format!(
                "jitter = {} must be >= 0",
                self.jitter
            )));
        }
        Ok(())
    }
}

/// Sample covariance (divided by n) of all rows in the collection.
pub(crate) fn global_covariance(sample: &TaskCollection) -> (DVector<f64>, DMatrix<f64>) {
    let d = sample.dim();
    let mut n = 0usize;
    let mut mean = DVector::zeros(d);
    for task in sample.tasks() {
        for row in task.rows() {
            n += 1;
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    let mut centered = DVector::zeros(d);
    for task in sample.tasks() {
        for row in task.rows() {
            for i in 0..d {
                centered[i] = row[i] as f64 - mean[i];
            }
            cov.syger(1.0, &centered, &centered, 1.0);
        }
    }
    cov.fill_upper_triangle_with_lower_triangle();
    cov /= n as f64;
    (mean, cov)
}

/// Initializes a model from data.
///
/// Means are K distinct data rows chosen by D²-weighted seeding (each next row
/// drawn with probability proportional to its squared distance from the
/// nearest row already chosen). Every covariance starts at the global sample
/// covariance plus `jitter`·I, α is all ones and δ is symmetric.
pub fn init_model(
    sample: &TaskCollection,
    task_themes: usize,
    image_themes: usize,
    delta_value: f64,
    jitter: f64,
    seed: u64,
) -> Result<ThemeModel> {
    if task_themes == 0 || image_themes == 0 {
        return Err(Error::Argument("L and K must be at least 1".into()));
    }
    if !(delta_value.is_finite() && delta_value > 0.0) {
        return Err(Error::Argument(format!(
            "delta = {delta_value} must be > 0"
        )));
    }
    let rows: Vec<&[f32]> = sample.tasks().iter().flat_map(|t| t.rows()).collect();
    if image_themes > rows.len() {
        return Err(Error::Argument(format!(
            "K = {image_themes} exceeds the {} available samples",
            rows.len()
        )));
    }
    let d = sample.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen: Vec<usize> = Vec::with_capacity(image_themes);
    let mut nearest = vec![f64::INFINITY; rows.len()];
    let sq_dist = |a: &[f32], b: &[f32]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum()
    };
    chosen.push(rng.random_range(0..rows.len()));
    while chosen.len() < image_themes {
        let last = rows[*chosen.last().unwrap()];
        for (i, row) in rows.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(row, last));
        }
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.unwrap()
        } else {
            // Fewer distinct rows than K: fall back to any unused index.
            let unused: Vec<usize> = (0..rows.len()).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
    }

    let (_, mut cov) = global_covariance(sample);
    for i in 0..d {
        cov[(i, i)] += jitter;
    }
    let mu = chosen
        .iter()
        .map(|&i| rows[i].iter().map(|&v| v as f64).collect())
        .collect();
    ThemeModel::new(
        mu,
        vec![cov; image_themes],
        vec![vec![1.0; image_themes]; task_themes],
        vec![delta_value; task_themes],
    )
}

/// A random but well-conditioned model for generating synthetic data.
///
/// Means are uniform in [−10, 10]^D, covariances diagonal with variances in
/// [0.5, 1.5], α entries uniform in [0.5, 3] and δ = 1.
pub fn random_model(
    task_themes: usize,
    image_themes: usize,
    dim: usize,
    seed: u64,
) -> Result<ThemeModel> {
    if task_themes == 0 || image_themes == 0 || dim == 0 {
        return Err(Error::Argument("L, K and D must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = (0..image_themes)
        .map(|_| (0..dim).map(|_| rng.random_range(-10.0..=10.0)).collect())
        .collect();
    let sigma = (0..image_themes)
        .map(|_| {
            let diag: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..=1.5)).collect();
            DMatrix::from_diagonal(&DVector::from_vec(diag))
        })
        .collect();
    let alpha = (0..task_themes)
        .map(|_| {
            (0..image_themes)
                .map(|_| rng.random_range(0.5..=3.0))
                .collect()
        })
        .collect();
    ThemeModel::new(mu, sigma, alpha, vec![1.0; task_themes])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassBlock, Task};

    fn single_theme(mu: Vec<f64>, sigma: DMatrix<f64>) -> ThemeModel {
        ThemeModel::new(vec![mu], vec![sigma], vec![vec![1.0]], vec![1.0]).unwrap()
    }

    #[test]
    fn log_pdf_standard_normal_at_zero() {
        let m = single_theme(vec![0.0], DMatrix::identity(1, 1));
        let v = m.gaussian_log_pdf(&[0.0], 0).unwrap();
        assert!((v + 0.918_938_533_2).abs() < 1e-10);
    }

    #[test]
    fn log_pdf_at_mean_with_identity() {
        let m = single_theme(vec![1.0, -2.0, 3.0], DMatrix::identity(3, 3));
        let v = m.gaussian_log_pdf(&[1.0, -2.0, 3.0], 0).unwrap();
        assert!((v + 1.5 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_pdf_hand_evaluated() {
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let m = single_theme(vec![1.0, 0.0], sigma);
        let v = m.gaussian_log_pdf(&[3.0, 1.0], 0).unwrap();
        let want = -0.5 * (2.0 * (2.0 * PI).ln() + 4f64.ln() + (4.0 / 4.0 + 1.0));
        assert!((v - want).abs() < 1e-12);
        assert!((v + 3.531_024_246_969).abs() < 1e-9);
    }

    #[test]
    fn log_pdf_rejects_bad_input() {
        let m = single_theme(vec![0.0], DMatrix::identity(1, 1));
        assert!(matches!(
            m.gaussian_log_pdf(&[f64::NAN], 0),
            Err(Error::Domain { .. })
        ));
        assert!(m.gaussian_log_pdf(&[0.0], 1).is_err());
        assert!(m.gaussian_log_pdf(&[0.0, 0.0], 0).is_err());
    }

    #[test]
    fn log_pdf_integrates_to_one_in_1d() {
        let m = ThemeModel::new(
            vec![vec![-1.5], vec![2.0]],
            vec![
                DMatrix::from_element(1, 1, 0.3),
                DMatrix::from_element(1, 1, 2.5),
            ],
            vec![vec![1.0, 1.0]],
            vec![1.0],
        )
        .unwrap();
        for k in 0..2 {
            // composite Simpson on [-30, 30]
            let n = 20_000;
            let (a, b) = (-30.0, 30.0);
            let h = (b - a) / n as f64;
            let mut s = 0.0;
            for i in 0..=n {
                let x = a + i as f64 * h;
                let w = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                s += w * m.gaussian_log_pdf(&[x], k).unwrap().exp();
            }
            assert!((s * h / 3.0 - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn mahalanobis_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in 1..=8 {
            for _ in 0..10 {
                let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
                let spd = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
                let cov = Covariance::new(spd.clone()).unwrap();
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                let diff = DVector::from_iterator(d, x.iter().zip(&mu).map(|(a, b)| a - b));
                let inv = spd.clone().try_inverse().unwrap();
                let want = (diff.transpose() * inv * &diff)[(0, 0)];
                let got = cov.mahalanobis_sq(&x, &mu);
                assert!((got - want).abs() <= 1e-8 * (1.0 + want.abs()));
                assert!((cov.log_det() - spd.determinant().ln()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_invalid_parameters() {
        let bad_sigma = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            ThemeModel::new(
                vec![vec![0.0, 0.0]],
                vec![bad_sigma],
                vec![vec![1.0]],
                vec![1.0]
            ),
            Err(Error::Model(_))
        ));
        assert!(ThemeModel::new(
            vec![vec![0.0]],
            vec![DMatrix::identity(1, 1)],
            vec![vec![-1.0]],
            vec![1.0]
        )
        .is_err());
        assert!(ThemeModel::new(
            vec![vec![0.0]],
            vec![DMatrix::identity(1, 1)],
            vec![vec![1.0]],
            vec![0.0]
        )
        .is_err());
    }

    fn toy_collection() -> TaskCollection {
        let block = ClassBlock::new(2, vec![0.0, 0.0, 2.0, 0.0, 0.0, 4.0, 2.0, 4.0]).unwrap();
        TaskCollection::new(vec![Task::new("toy", vec![block]).unwrap()]).unwrap()
    }

    #[test]
    fn init_covariance_matches_hand_computation() {
        let coll = toy_collection();
        let m = init_model(&coll, 2, 3, 0.5, 1e-6, 1).unwrap();
        // mean (1, 2); deviations (±1, ±2) → var_x = 1, var_y = 4, cov = 0
        let want = DMatrix::from_row_slice(2, 2, &[1.0 + 1e-6, 0.0, 0.0, 4.0 + 1e-6]);
        for cov in m.sigma() {
            assert!((cov.matrix() - &want).amax() < 1e-12);
        }
        assert_eq!(m.alpha(), &[vec![1.0; 3], vec![1.0; 3]]);
        assert_eq!(m.delta(), &[0.5, 0.5]);
        // distinct data rows
        let rows: Vec<Vec<f64>> = coll.tasks()[0]
            .rows()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        for (i, mu) in m.mu().iter().enumerate() {
            assert!(rows.contains(mu));
            for other in &m.mu()[..i] {
                assert_ne!(mu, other);
            }
        }
    }

    #[test]
    fn init_single_theme_and_determinism() {
        let coll = toy_collection();
        let a = init_model(&coll, 1, 1, 0.5, 1e-6, 9).unwrap();
        let b = init_model(&coll, 1, 1, 0.5, 1e-6, 9).unwrap();
        assert_eq!(a.mu(), b.mu());
        assert_eq!(a.sigma()[0].matrix(), b.sigma()[0].matrix());
        assert!(init_model(&coll, 1, 5, 0.5, 1e-6, 9).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = random_model(3, 4, 3, 17).unwrap();
        m.save(&path).unwrap();
        let back = ThemeModel::load(&path).unwrap();
        assert_eq!(m.mu(), back.mu());
        assert_eq!(m.alpha(), back.alpha());
        assert_eq!(m.delta(), back.delta());
        for (a, b) in m.sigma().iter().zip(back.sigma()) {
            assert_eq!(a.matrix(), b.matrix());
        }

        let text = std::fs::read_to_string(&path).unwrap();
        let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
        json["alpha"][0][0] = serde_json::json!(-0.25);
        std::fs::write(&path, json.to_string()).unwrap();
        assert!(matches!(ThemeModel::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            tau1: 0.4,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            tau1: 1.01,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
