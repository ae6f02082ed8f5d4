//! Independent reference computations: exhaustive enumeration, dense linear
//! algebra, quadrature and generic minimizers. These deliberately share no
//! code paths with the fast implementations they check, and are only meant
//! for small problems.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::linear::PrecisionOp;
use crate::tree::{TreeParams, TreeTopology};
use crate::wavelet::WaveletLayout;

/// Random forest of at most `max_nodes` nodes and depth at most `max_depth`,
/// nodes in topological order.
pub fn random_forest<R: Rng>(rng: &mut R, max_nodes: usize, max_depth: usize) -> TreeTopology {
    let n = rng.random_range(1..=max_nodes);
    let mut parent = Vec::with_capacity(n);
    let mut level = Vec::with_capacity(n);
    for j in 0..n {
        let candidates: Vec<usize> = (0..j).filter(|&p| level[p] < max_depth).collect();
        if j == 0 || candidates.is_empty() || rng.random_bool(0.2) {
            parent.push(None);
            level.push(1);
        } else {
            let p = candidates[rng.random_range(0..candidates.len())];
            parent.push(Some(p));
            level.push(level[p] + 1);
        }
    }
    TreeTopology::new(parent, level).expect("generated forest is valid")
}

pub fn random_tree_params<R: Rng>(rng: &mut R, levels: usize) -> TreeParams {
    let mut p = TreeParams::new(levels.max(1), rng.random_range(0.05..0.95), 0.5, 0.5);
    for row in p.theta.iter_mut().skip(1) {
        row[0] = rng.random_range(0.05..0.95);
        row[1] = rng.random_range(0.05..0.95);
    }
    p
}

#[derive(Debug, Clone)]
pub struct EnumeratedTree {
    pub q1: Vec<f64>,
    /// `[k][r]` as in [`crate::tree::TreeMarginals`]
    pub qpair: Vec<[[f64; 2]; 2]>,
    pub log_z: f64,
    /// `sum_delta Q log(Q / P)`
    pub kl: f64,
}

/// Exhaustive sum over all `2^n` state configurations.
pub fn enumerate_tree(
    topo: &TreeTopology,
    params: &TreeParams,
    evidence: &[[f64; 2]],
) -> EnumeratedTree {
    let n = topo.len();
    assert!(n <= 30, "enumeration limited to 30 nodes");
    let mut states = vec![0u8; n];
    let total = 1u64 << n;
    let mut log_w = Vec::with_capacity(total as usize);
    let mut log_p = Vec::with_capacity(total as usize);
    for code in 0..total {
        for (j, s) in states.iter_mut().enumerate() {
            *s = ((code >> j) & 1) as u8;
        }
        let lp = params.log_prior(topo, &states);
        let le: f64 = states
            .iter()
            .zip(evidence)
            .map(|(&s, e)| e[s as usize])
            .sum();
        log_p.push(lp);
        log_w.push(lp + le);
    }
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = log_w.iter().map(|w| (w - m).exp()).sum();
    let log_z = m + z.ln();
    let mut q1 = vec![0.0; n];
    let mut qpair = vec![[[0.0; 2]; 2]; n];
    let mut kl = 0.0;
    for code in 0..total {
        let q = (log_w[code as usize] - log_z).exp();
        kl += q * (log_w[code as usize] - log_z - log_p[code as usize]);
        for j in 0..n {
            let k = ((code >> j) & 1) as usize;
            if k == 1 {
                q1[j] += q;
            }
            if let Some(p) = topo.parent(j) {
                let r = ((code >> p) & 1) as usize;
                qpair[j][k][r] += q;
            }
        }
    }
    EnumeratedTree {
        q1,
        qpair,
        log_z,
        kl,
    }
}

/// Golden-section minimization of a unimodal function on `[a, b]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Minimizer over a positive scale: coarse log-grid scan then golden section.
pub fn argmin_positive(f: impl Fn(f64) -> f64, log_lo: f64, log_hi: f64) -> f64 {
    let n = 2000;
    let step = (log_hi - log_lo) / n as f64;
    let best = (0..=n)
        .map(|i| log_lo + step * i as f64)
        .min_by(|a, b| f(a.exp()).total_cmp(&f(b.exp())))
        .unwrap();
    golden_section(|t| f(t.exp()), best - step, best + step, 200).exp()
}

/// `min_{gamma > 0} f(gamma)` by grid scan and refinement.
pub fn min_positive(f: impl Fn(f64) -> f64, log_lo: f64, log_hi: f64) -> f64 {
    let g = argmin_positive(&f, log_lo, log_hi);
    f(g)
}

/// `B` as a dense matrix (`B[j, i]` maps pixel `i` to coefficient `j`).
pub fn dense_transform(layout: &WaveletLayout) -> DMatrix<f64> {
    let n = layout.len();
    let mut b = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for i in 0..n {
        e[i] = 1.0;
        let col = layout.forward_slice(&e);
        e[i] = 0.0;
        for (j, v) in col.into_iter().enumerate() {
            b[(j, i)] = v;
        }
    }
    b
}

pub fn dense_precision(op: &PrecisionOp<'_>) -> DMatrix<f64> {
    let b = dense_transform(op.layout);
    let mut a = b.transpose() * DMatrix::from_diagonal(&DVector::from_column_slice(op.pi)) * &b;
    let prec = 1.0 / op.observation.sigma2();
    for (i, &obs) in op.observation.observed_flags().iter().enumerate() {
        if obs {
            a[(i, i)] += prec;
        }
    }
    a
}

pub fn dense_solve(op: &PrecisionOp<'_>, rhs: &[f64]) -> Vec<f64> {
    let chol = dense_precision(op)
        .cholesky()
        .expect("A must be positive definite");
    chol.solve(&DVector::from_column_slice(rhs))
        .as_slice()
        .to_vec()
}

/// `diag(B A^-1 B^T)` by dense inversion.
pub fn dense_coefficient_variances(op: &PrecisionOp<'_>) -> Vec<f64> {
    let b = dense_transform(op.layout);
    let chol = dense_precision(op)
        .cholesky()
        .expect("A must be positive definite");
    let cov = &b * chol.inverse() * b.transpose();
    (0..cov.nrows()).map(|j| cov[(j, j)]).collect()
}

/// Composite Simpson weights on `2 * half + 1` equally spaced nodes.
fn simpson_weights(count: usize, h: f64) -> Vec<f64> {
    assert!(count % 2 == 1 && count >= 3);
    (0..count)
        .map(|i| {
            let w = if i == 0 || i == count - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * h / 3.0
        })
        .collect()
}

/// `log int f` over `[-r, r]^dim` (`dim` in {1, 2}) by composite Simpson with
/// the origin on a grid node. `log_f` returns the log-integrand.
pub fn log_integrate(log_f: impl Fn(&[f64]) -> f64, dim: usize, r: f64, half_nodes: usize) -> f64 {
    let count = 2 * half_nodes + 1;
    let h = r / half_nodes as f64;
    let w = simpson_weights(count, h);
    let grid: Vec<f64> = (0..count).map(|i| -r + h * i as f64).collect();
    let mut vals = Vec::new();
    match dim {
        1 => {
            for (i, &x) in grid.iter().enumerate() {
                vals.push(w[i].ln() + log_f(&[x]));
            }
        }
        2 => {
            for (i, &x) in grid.iter().enumerate() {
                for (k, &y) in grid.iter().enumerate() {
                    vals.push((w[i] * w[k]).ln() + log_f(&[x, y]));
                }
            }
        }
        _ => panic!("quadrature supports 1 or 2 dimensions"),
    }
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Limited-memory BFGS with Armijo backtracking, for smooth objectives.
/// `f` returns value and gradient.
pub fn lbfgs_minimize(
    f: impl Fn(&[f64]) -> (f64, Vec<f64>),
    x0: &[f64],
    iters: usize,
    memory: usize,
) -> (Vec<f64>, f64) {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    for _ in 0..iters {
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let scale = hist
            .last()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or(1.0 / dot(&g, &g).sqrt().max(1.0));
        for qi in q.iter_mut() {
            *qi *= scale;
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
            hist.clear();
        }
        let mut t = 1.0;
        let (mut xn, mut fxn, mut gn);
        loop {
            xn = x.iter().zip(&d).map(|(a, b)| a + t * b).collect::<Vec<_>>();
            let r = f(&xn);
            fxn = r.0;
            gn = r.1;
            if fxn <= fx + 1e-4 * t * slope || t < 1e-20 {
                break;
            }
            t *= 0.5;
        }
        if fxn > fx {
            break;
        }
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let converged = fx - fxn <= 1e-16 * fx.abs().max(1.0);
        x = xn;
        fx = fxn;
        g = gn;
        if sy > 1e-300 {
            hist.push((s, y, 1.0 / sy));
            if hist.len() > memory {
                hist.remove(0);
            }
        }
        if converged {
            break;
        }
    }
    (x, fx)
}
