//! The inner penalized least-squares problem
//! `min_u sigma^-2 ||y - X u||^2 + sum_j w_j(sqrt(z_j + s_j^2))`, `s = B u`,
//! solved by preconditioned Polak-Ribiere nonlinear conjugate gradients with
//! an exact one-dimensional line search.

use crate::error::{Error, Result};
use crate::potentials::Penalty;
use crate::wavelet::WaveletLayout;

/// `w(p) = (1 - q) psi_low(p) + q psi_high(p)`, with the constant parts of
/// both penalties cached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedPenalty {
    pub q: f64,
    low: Penalty,
    high: Penalty,
    c_low: f64,
    c_high: f64,
}

impl WeightedPenalty {
    pub fn new(q: f64, low: Penalty, high: Penalty) -> Self {
        Self {
            q,
            low,
            high,
            c_low: low.constant(),
            c_high: high.constant(),
        }
    }

    pub fn single(p: Penalty) -> Self {
        Self::new(0.0, p, p)
    }

    pub fn low(&self) -> &Penalty {
        &self.low
    }

    pub fn high(&self) -> &Penalty {
        &self.high
    }

    /// `(psi_low(p), psi_high(p))`
    pub fn state_values(&self, p: f64) -> (f64, f64) {
        (
            self.low.shape(p).0 + self.c_low,
            self.high.shape(p).0 + self.c_high,
        )
    }

    /// Value, first and second derivative in `p`.
    #[inline]
    pub fn eval(&self, p: f64) -> (f64, f64, f64) {
        if self.q == 0.0 {
            let (v, d1, d2) = self.low.shape(p);
            return (v + self.c_low, d1, d2);
        }
        if self.q == 1.0 {
            let (v, d1, d2) = self.high.shape(p);
            return (v + self.c_high, d1, d2);
        }
        let (a0, a1, a2) = self.low.shape(p);
        let (b0, b1, b2) = self.high.shape(p);
        let q = self.q;
        let r = 1.0 - q;
        (
            r * (a0 + self.c_low) + q * (b0 + self.c_high),
            r * a1 + q * b1,
            r * a2 + q * b2,
        )
    }

    /// `w'(p) / p`.
    #[inline]
    pub fn slope_over_p(&self, p: f64) -> f64 {
        if self.q == 0.0 {
            return self.low.slope_over_p(p);
        }
        if self.q == 1.0 {
            return self.high.slope_over_p(p);
        }
        (1.0 - self.q) * self.low.slope_over_p(p) + self.q * self.high.slope_over_p(p)
    }
}

/// The PLS objective with `z`, the penalties and the data fixed.
#[derive(Debug, Clone, Copy)]
pub struct PlsObjective<'a> {
    pub layout: &'a WaveletLayout,
    pub observed: &'a [bool],
    pub inv_sigma2: f64,
    /// `X^T y`, zero at unobserved pixels.
    pub y_full: &'a [f64],
    pub z: &'a [f64],
    pub field: &'a [WeightedPenalty],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlsReport {
    pub initial_value: f64,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

impl<'a> PlsObjective<'a> {
    pub fn n(&self) -> usize {
        self.layout.len()
    }

    fn residual(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.y_full)
            .zip(self.observed)
            .map(|((u, y), &o)| if o { u - y } else { 0.0 })
            .collect()
    }

    /// `sum_j w_j(p_j)`, writing `w_j'(p_j) s_j / p_j` into `gs`.
    fn penalty_and_coeff_grad(&self, s: &[f64], gs: &mut [f64]) -> f64 {
        let mut total = 0.0;
        for j in 0..s.len() {
            let p = (self.z[j] + s[j] * s[j]).sqrt();
            let (v, d1, _) = self.field[j].eval(p);
            total += v;
            gs[j] = if p > 0.0 { d1 * s[j] / p } else { 0.0 };
        }
        total
    }

    pub fn penalty(&self, s: &[f64]) -> f64 {
        s.iter()
            .zip(self.z)
            .zip(self.field)
            .map(|((s, z), w)| w.eval((z + s * s).sqrt()).0)
            .sum()
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        let s = self.layout.forward_slice(u);
        let data: f64 = self.residual(u).iter().map(|r| r * r).sum();
        self.inv_sigma2 * data + self.penalty(&s)
    }

    pub fn value_and_gradient(&self, u: &[f64]) -> (f64, Vec<f64>) {
        let s = self.layout.forward_slice(u);
        let resid = self.residual(u);
        let mut gs = vec![0.0; s.len()];
        let mut g = vec![0.0; s.len()];
        let f = self.eval_from(&s, &resid, &mut gs, &mut g);
        (f, g)
    }

    /// Value and pixel gradient from precomputed `s = B u` and residual.
    fn eval_from(&self, s: &[f64], resid: &[f64], gs: &mut [f64], g: &mut [f64]) -> f64 {
        let pen = self.penalty_and_coeff_grad(s, gs);
        self.layout.inverse_into(gs, g);
        let mut data = 0.0;
        for (gi, r) in g.iter_mut().zip(resid) {
            data += r * r;
            *gi += 2.0 * self.inv_sigma2 * r;
        }
        self.inv_sigma2 * data + pen
    }

    /// Derivatives of `alpha -> f(u + alpha d)` given `s`, `t = B d`, and the
    /// data-term constants `c1 = r'Xd`, `c2 = |Xd|^2`.
    fn line_derivs(&self, s: &[f64], t: &[f64], c1: f64, c2: f64, alpha: f64) -> (f64, f64) {
        let mut d1 = 2.0 * self.inv_sigma2 * (c1 + alpha * c2);
        let mut d2 = 2.0 * self.inv_sigma2 * c2;
        for j in 0..s.len() {
            let tj = t[j];
            if tj == 0.0 {
                continue;
            }
            let x = s[j] + alpha * tj;
            let z = self.z[j];
            let p = (z + x * x).sqrt();
            if p == 0.0 {
                continue;
            }
            let (_, w1, w2) = self.field[j].eval(p);
            let dp = x * tj / p;
            d1 += w1 * dp;
            d2 += w2 * dp * dp + w1 * tj * tj * z / (p * p * p);
        }
        (d1, d2)
    }

    /// Minimizer of the convex 1-D restriction by safeguarded Newton.
    fn line_search(&self, s: &[f64], t: &[f64], c1: f64, c2: f64) -> f64 {
        let (d0, h0) = self.line_derivs(s, t, c1, c2, 0.0);
        if !(d0 < 0.0) {
            return 0.0;
        }
        let tol = 1e-10 * d0.abs();
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut a = if h0 > 0.0 && h0.is_finite() {
            -d0 / h0
        } else {
            1.0
        };
        for _ in 0..60 {
            let (d1, d2) = self.line_derivs(s, t, c1, c2, a);
            if !d1.is_finite() {
                hi = a;
                a = 0.5 * (lo + a);
                continue;
            }
            if d1.abs() <= tol {
                return a;
            }
            if d1 < 0.0 {
                lo = a;
            } else {
                hi = a;
            }
            let newton = if d2 > 0.0 { a - d1 / d2 } else { f64::NAN };
            a = if hi.is_infinite() {
                if newton.is_finite() {
                    newton.max(2.0 * a)
                } else {
                    2.0 * a
                }
            } else if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi.is_finite() && hi - lo <= 1e-14 * hi {
                break;
            }
        }
        // largest point known to have a negative slope, hence a decrease
        lo
    }

    /// Diagonal Gauss-Newton preconditioner in pixel space.
    fn preconditioner(&self, s: &[f64]) -> Vec<f64> {
        // near-zero coefficients would otherwise freeze under the Laplace curvature
        let floor = (s.iter().map(|v| v * v).sum::<f64>() / s.len().max(1) as f64).sqrt();
        let w: Vec<f64> = s
            .iter()
            .zip(self.z)
            .zip(self.field)
            .map(|((s, z), f)| f.slope_over_p((z + s * s).sqrt().max(floor)))
            .collect();
        let mut d = self.layout.weighted_diagonal(&w);
        for (di, &o) in d.iter_mut().zip(self.observed) {
            if o {
                *di += 2.0 * self.inv_sigma2;
            }
            *di = 1.0 / di.max(1e-300);
        }
        d
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Run up to `max_iters` nonlinear CG iterations from `u`, which is updated
/// in place. Returns the objective before and after.
pub fn minimize(obj: &PlsObjective<'_>, u: &mut [f64], max_iters: usize) -> Result<PlsReport> {
    let n = obj.n();
    if u.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: u.len(),
        });
    }
    let mut s = obj.layout.forward_slice(u);
    let mut resid = obj.residual(u);
    let mut gs = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut f = obj.eval_from(&s, &resid, &mut gs, &mut g);
    if !f.is_finite() {
        return Err(Error::NonFinite {
            stage: "pls",
            detail: format!("initial objective {f}"),
        });
    }
    let initial_value = f;
    let minv = obj.preconditioner(&s);
    let mut h: Vec<f64> = g.iter().zip(&minv).map(|(a, b)| a * b).collect();
    let mut d: Vec<f64> = h.iter().map(|v| -v).collect();
    let mut gh = dot(&g, &h);
    let mut t = vec![0.0; n];
    let mut xd = vec![0.0; n];
    let mut iterations = 0;
    let mut restarted = false;

    while iterations < max_iters {
        if gh <= 0.0 {
            break;
        }
        obj.layout.forward_into(&d, &mut t);
        for ((x, di), &o) in xd.iter_mut().zip(&d).zip(obj.observed) {
            *x = if o { *di } else { 0.0 };
        }
        let c1 = dot(&resid, &xd);
        let c2 = dot(&xd, &xd);
        let alpha = obj.line_search(&s, &t, c1, c2);
        iterations += 1;
        if alpha == 0.0 {
            if restarted {
                break;
            }
            // lost descent; restart along the preconditioned gradient
            restarted = true;
            for (di, hi) in d.iter_mut().zip(&h) {
                *di = -hi;
            }
            continue;
        }
        for i in 0..n {
            u[i] += alpha * d[i];
            s[i] += alpha * t[i];
            resid[i] += alpha * xd[i];
        }
        let f_new = obj.eval_from(&s, &resid, &mut gs, &mut g);
        if !f_new.is_finite() {
            return Err(Error::NonFinite {
                stage: "pls",
                detail: format!("objective {f_new} at iteration {iterations}"),
            });
        }
        let decrease = f - f_new;
        f = f_new;
        let h_new: Vec<f64> = g.iter().zip(&minv).map(|(a, b)| a * b).collect();
        let gh_new = dot(&g, &h_new);
        let beta = ((gh_new - dot(&g, &h)) / gh).max(0.0);
        h = h_new;
        gh = gh_new;
        for (di, hi) in d.iter_mut().zip(&h) {
            *di = -hi + beta * *di;
        }
        restarted = false;
        if dot(&g, &d) >= 0.0 {
            for (di, hi) in d.iter_mut().zip(&h) {
                *di = -hi;
            }
        }
        if decrease.abs() <= 1e-15 * f.abs() {
            break;
        }
    }

    // resynchronize s and the objective with u
    let (value, grad) = obj.value_and_gradient(u);
    Ok(PlsReport {
        initial_value,
        value,
        grad_norm: dot(&grad, &grad).sqrt(),
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::Potential;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        layout: WaveletLayout,
        observed: Vec<bool>,
        y: Vec<f64>,
        z: Vec<f64>,
        field: Vec<WeightedPenalty>,
    }

    impl Fixture {
        fn objective(&self, inv_sigma2: f64) -> PlsObjective<'_> {
            PlsObjective {
                layout: &self.layout,
                observed: &self.observed,
                inv_sigma2,
                y_full: &self.y,
                z: &self.z,
                field: &self.field,
            }
        }
    }

    fn random_fixture(seed: u64, n_side: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = WaveletLayout::new(n_side, n_side, 2).unwrap();
        let n = layout.len();
        let observed: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let y = (0..n)
            .map(|i| {
                if observed[i] {
                    rng.random::<f64>()
                } else {
                    0.0
                }
            })
            .collect();
        let z = (0..n).map(|_| rng.random_range(0.01..0.5)).collect();
        let field = (0..n)
            .map(|_| {
                let lap = Penalty::Plain(Potential::laplace(rng.random_range(0.5..5.0)).unwrap());
                let conv = Penalty::Convexified {
                    tau: rng.random_range(0.5..5.0),
                    nu: 2.1,
                    e: rng.random_range(0.5..10.0),
                };
                let gauss =
                    Penalty::Plain(Potential::gaussian(rng.random_range(0.5..5.0)).unwrap());
                let pick = [lap, conv, gauss];
                WeightedPenalty::new(
                    rng.random(),
                    pick[rng.random_range(0..3)],
                    pick[rng.random_range(0..3)],
                )
            })
            .collect();
        Fixture {
            layout,
            observed,
            y,
            z,
            field,
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let fx = random_fixture(seed, 8);
            let obj = fx.objective(3.0);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let u: Vec<f64> = (0..fx.layout.len()).map(|_| rng.random()).collect();
            let (_, g) = obj.value_and_gradient(&u);
            let h = 1e-5;
            let fd: Vec<f64> = (0..u.len())
                .map(|i| {
                    let mut a = u.clone();
                    let mut b = u.clone();
                    a[i] += h;
                    b[i] -= h;
                    (obj.value(&a) - obj.value(&b)) / (2.0 * h)
                })
                .collect();
            let num: f64 = g
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(num / den <= 1e-5, "seed {seed}: {}", num / den);
        }
    }

    #[test]
    fn minimize_decreases_and_reaches_stationarity() {
        let fx = random_fixture(7, 8);
        let obj = fx.objective(10.0);
        let mut u = vec![0.5; fx.layout.len()];
        let rep = minimize(&obj, &mut u, 500).unwrap();
        assert!(rep.value <= rep.initial_value);
        assert!(rep.grad_norm < 1e-6, "{}", rep.grad_norm);
    }

    #[test]
    fn gaussian_scalar_shrinkage() {
        // identity observation, Gaussian penalty everywhere: u = y / (1 + sigma2 xi)
        let layout = WaveletLayout::new(2, 2, 1).unwrap();
        let (sigma2, xi) = (0.5, 3.0);
        let g = WeightedPenalty::single(Penalty::Plain(Potential::gaussian(xi).unwrap()));
        let fx = Fixture {
            layout,
            observed: vec![true; 4],
            y: vec![0.3, -1.0, 2.0, 0.7],
            z: vec![0.1; 4],
            field: vec![g; 4],
        };
        let obj = fx.objective(1.0 / sigma2);
        let mut u = vec![0.0; 4];
        minimize(&obj, &mut u, 50).unwrap();
        for (ui, yi) in u.iter().zip(&fx.y) {
            assert!((ui - yi / (1.0 + sigma2 * xi)).abs() < 1e-10);
        }
    }

    #[test]
    fn flat_penalties_reproduce_data() {
        let layout = WaveletLayout::new(4, 4, 2).unwrap();
        let lap = WeightedPenalty::single(Penalty::Plain(Potential::laplace(1e-9).unwrap()));
        let y: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let fx = Fixture {
            layout,
            observed: vec![true; 16],
            y: y.clone(),
            z: vec![1e-6; 16],
            field: vec![lap; 16],
        };
        let obj = fx.objective(100.0);
        let mut u = vec![0.0; 16];
        minimize(&obj, &mut u, 100).unwrap();
        for (a, b) in u.iter().zip(&y) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
