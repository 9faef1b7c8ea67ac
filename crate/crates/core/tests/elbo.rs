use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::{digamma, ln_gamma};

use ldcc::data::{generate_synthetic, Task};
use ldcc::inference::{elbo_terms, EStep, VariationalState};
use ldcc::model::{random_model, ThemeModel};

fn ln_beta(a: &[f64]) -> f64 {
    a.iter().map(|&x| ln_gamma(x)).sum::<f64>() - ln_gamma(a.iter().sum())
}

fn e_ln(u: &[f64]) -> Vec<f64> {
    let total = digamma(u.iter().sum());
    u.iter().map(|&v| digamma(v) - total).collect()
}

fn xlnx(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v * v.ln()
    }
}

fn gaussian_ln(x: &[f64], mu: &[f64], sigma: &DMatrix<f64>) -> f64 {
    let d = x.len();
    let diff = DVector::from_fn(d, |i, _| x[i] - mu[i]);
    let inv = sigma.clone().try_inverse().unwrap();
    let q = (diff.transpose() * inv * &diff)[(0, 0)];
    -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + sigma.determinant().ln() + q)
}

/// The nine terms by direct triple loops over the definitions.
fn naive_terms(task: &Task, s: &VariationalState, m: &ThemeModel) -> [f64; 9] {
    let k = m.image_themes();
    let l = m.task_themes();
    let ln_phi = e_ln(&s.lambda);
    let mut t = [0.0; 9];
    for (c, cls) in task.classes().iter().enumerate() {
        let ln_theta = e_ln(&s.gamma[c]);
        for n in 0..cls.len() {
            let x: Vec<f64> = cls.row(n).iter().map(|&v| v as f64).collect();
            for kk in 0..k {
                let r = s.r[c][n * k + kk];
                t[0] += r * gaussian_ln(&x, &m.mu()[kk], m.sigma()[kk].matrix());
                t[1] += r * ln_theta[kk];
                t[5] += xlnx(r);
            }
        }
        for ll in 0..l {
            let e = s.eta[c][ll];
            let mut inner = -ln_beta(&m.alpha()[ll]);
            for kk in 0..k {
                inner += (m.alpha()[ll][kk] - 1.0) * ln_theta[kk];
            }
            t[2] += e * inner;
            t[3] += e * ln_phi[ll];
            t[7] += xlnx(e);
        }
        let mut q_theta = -ln_beta(&s.gamma[c]);
        for kk in 0..k {
            q_theta += (s.gamma[c][kk] - 1.0) * ln_theta[kk];
        }
        t[6] += q_theta;
    }
    t[4] = -ln_beta(m.delta());
    t[8] = -ln_beta(&s.lambda);
    for ll in 0..l {
        t[4] += (m.delta()[ll] - 1.0) * ln_phi[ll];
        t[8] += (s.lambda[ll] - 1.0) * ln_phi[ll];
    }
    t
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn random_state(rng: &mut ChaCha8Rng, task: &Task, k: usize, l: usize) -> VariationalState {
    VariationalState {
        r: task
            .classes()
            .iter()
            .map(|cls| {
                (0..cls.len())
                    .flat_map(|_| random_simplex(rng, k))
                    .collect()
            })
            .collect(),
        gamma: (0..task.num_classes())
            .map(|_| (0..k).map(|_| rng.random_range(0.2..10.0)).collect())
            .collect(),
        eta: (0..task.num_classes())
            .map(|_| random_simplex(rng, l))
            .collect(),
        lambda: (0..l).map(|_| rng.random_range(0.2..10.0)).collect(),
    }
}

#[test]
fn elbo_terms_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..12 {
        let l = 1 + trial % 3;
        let k = 1 + trial % 4;
        let d = 1 + trial % 3;
        let model = random_model(l, k, d, trial as u64).unwrap();
        let (coll, _) = generate_synthetic(&model, 2, 3, 4, trial as u64).unwrap();
        for task in coll.tasks() {
            let state = random_state(&mut rng, task, k, l);
            let got = elbo_terms(task, &state, &model).unwrap();
            let want = naive_terms(task, &state, &model);
            let got = [
                got.e_log_p_x,
                got.e_log_p_z,
                got.e_log_p_theta,
                got.e_log_p_y,
                got.e_log_p_phi,
                got.e_log_q_z,
                got.e_log_q_theta,
                got.e_log_q_y,
                got.e_log_q_phi,
            ];
            for (i, (g, w)) in got.iter().zip(&want).enumerate() {
                assert!(
                    (g - w).abs() <= 1e-9 * w.abs().max(1.0),
                    "term {i}: {g} vs {w} (L={l} K={k} D={d})"
                );
            }
        }
    }
}

#[test]
fn zero_responsibilities_contribute_nothing_to_entropy() {
    let model = random_model(1, 2, 1, 3).unwrap();
    let (coll, _) = generate_synthetic(&model, 1, 1, 3, 3).unwrap();
    let task = &coll.tasks()[0];
    let state = VariationalState {
        r: vec![vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]],
        gamma: vec![vec![2.0, 3.0]],
        eta: vec![vec![1.0]],
        lambda: vec![2.0],
    };
    let t = elbo_terms(task, &state, &model).unwrap();
    assert_eq!(t.e_log_q_z, 0.0);
    assert_eq!(t.e_log_q_y, 0.0);
    assert!(t.total().is_finite());
}

fn mix_simplex(v: &mut [f64], target: &[f64], eps: f64) {
    for (a, b) in v.iter_mut().zip(target) {
        *a = (1.0 - eps) * *a + eps * b;
    }
}

/// At a coordinate-ascent fixed point no single-block perturbation raises the bound.
#[test]
fn converged_state_is_a_blockwise_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..10u64 {
        let model = random_model(2, 3, 2, 100 + trial).unwrap();
        let (coll, _) = generate_synthetic(&model, 1, 4, 6, 200 + trial).unwrap();
        let task = &coll.tasks()[0];
        let mut step = EStep::init(task, &model, &mut rng).unwrap();
        for _ in 0..500 {
            step.sweep().unwrap();
        }
        let best = step.elbo().unwrap();
        let base = step.state().clone();
        let tol = 1e-9 * best.abs().max(1.0);
        let (k, l) = (3, 2);

        for _ in 0..20 {
            for eps in [1e-2, 1e-4] {
                let c = rng.random_range(0..task.num_classes());
                let mut candidates = Vec::new();

                let mut s = base.clone();
                let n = rng.random_range(0..task.classes()[c].len());
                let target = random_simplex(&mut rng, k);
                mix_simplex(&mut s.r[c][n * k..(n + 1) * k], &target, eps);
                candidates.push(("r", s));

                let mut s = base.clone();
                for g in &mut s.gamma[c] {
                    *g *= (eps * rng.random_range(-1.0..1.0f64)).exp();
                }
                candidates.push(("gamma", s));

                let mut s = base.clone();
                let target = random_simplex(&mut rng, l);
                mix_simplex(&mut s.eta[c], &target, eps);
                candidates.push(("eta", s));

                let mut s = base.clone();
                for v in &mut s.lambda {
                    *v *= (eps * rng.random_range(-1.0..1.0f64)).exp();
                }
                candidates.push(("lambda", s));

                for (block, s) in candidates {
                    let v = ldcc::inference::elbo(task, &s, &model).unwrap();
                    assert!(
                        v <= best + tol,
                        "perturbing {block} raised the bound: {v} > {best}"
                    );
                }
            }
        }
    }
}
