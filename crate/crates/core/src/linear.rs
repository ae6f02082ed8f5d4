//! Observation operators, the Gaussian precision `A(pi) = X^T X / sigma^2 +
//! B^T diag(pi) B`, preconditioned conjugate gradients and Perturb&MAP
//! variance estimation. Everything is matrix-free.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::wavelet::WaveletLayout;

/// Lower clamp on estimated variances.
pub const Z_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum ObservationKind {
    /// `X = I` (denoising)
    Identity,
    /// `X = I_J` (inpainting), observed pixel indices in output order
    Mask { observed: Vec<usize> },
}

/// `y = X u + eps`, `eps ~ N(0, sigma2 I)`.
#[derive(Debug, Clone)]
pub struct ObservationOp {
    n: usize,
    kind: ObservationKind,
    sigma2: f64,
    /// `diag(X^T X)`
    observed: Vec<bool>,
}

impl ObservationOp {
    pub fn identity(n: usize, sigma2: f64) -> Result<Self> {
        check_sigma2(sigma2)?;
        Ok(Self {
            n,
            kind: ObservationKind::Identity,
            sigma2,
            observed: vec![true; n],
        })
    }

    pub fn mask(n: usize, observed: Vec<usize>, sigma2: f64) -> Result<Self> {
        check_sigma2(sigma2)?;
        let mut flags = vec![false; n];
        for &i in &observed {
            if i >= n {
                return Err(Error::InvalidParameter(format!(
                    "observed index {i} out of range for {n} pixels"
                )));
            }
            if std::mem::replace(&mut flags[i], true) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate observed index {i}"
                )));
            }
        }
        Ok(Self {
            n,
            kind: ObservationKind::Mask { observed },
            sigma2,
            observed: flags,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        match &self.kind {
            ObservationKind::Identity => self.n,
            ObservationKind::Mask { observed } => observed.len(),
        }
    }

    pub fn kind(&self) -> &ObservationKind {
        &self.kind
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, ObservationKind::Identity)
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn with_sigma2(&self, sigma2: f64) -> Result<Self> {
        check_sigma2(sigma2)?;
        Ok(Self {
            sigma2,
            ..self.clone()
        })
    }

    /// `diag(X^T X)` as flags.
    pub fn observed_flags(&self) -> &[bool] {
        &self.observed
    }

    /// `X u`.
    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n, u.len())?;
        Ok(match &self.kind {
            ObservationKind::Identity => u.to_vec(),
            ObservationKind::Mask { observed } => observed.iter().map(|&i| u[i]).collect(),
        })
    }

    /// `X^T v`.
    pub fn adjoint(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.m(), v.len())?;
        Ok(match &self.kind {
            ObservationKind::Identity => v.to_vec(),
            ObservationKind::Mask { observed } => {
                let mut out = vec![0.0; self.n];
                for (&i, &x) in observed.iter().zip(v) {
                    out[i] = x;
                }
                out
            }
        })
    }
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2.is_finite() && sigma2 > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "noise variance must be > 0, got {sigma2}"
        )))
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `A(pi) = sigma^-2 X^T X + B^T diag(pi) B`.
#[derive(Debug, Clone, Copy)]
pub struct PrecisionOp<'a> {
    pub observation: &'a ObservationOp,
    pub layout: &'a WaveletLayout,
    pub pi: &'a [f64],
}

impl<'a> PrecisionOp<'a> {
    pub fn new(
        observation: &'a ObservationOp,
        layout: &'a WaveletLayout,
        pi: &'a [f64],
    ) -> Result<Self> {
        check_len(layout.len(), observation.n())?;
        check_len(layout.len(), pi.len())?;
        if let Some(j) = pi.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "pi[{j}] = {} must be finite and >= 0",
                pi[j]
            )));
        }
        Ok(Self {
            observation,
            layout,
            pi,
        })
    }

    pub fn n(&self) -> usize {
        self.layout.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n(), x.len())?;
        let mut out = vec![0.0; x.len()];
        let mut scratch = vec![0.0; x.len()];
        self.apply_into(x, &mut out, &mut scratch);
        Ok(out)
    }

    /// `out = A x`; `scratch` has length `n`.
    pub fn apply_into(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        self.layout.forward_into(x, scratch);
        for (s, p) in scratch.iter_mut().zip(self.pi) {
            *s *= p;
        }
        self.layout.inverse_into(scratch, out);
        let prec = 1.0 / self.observation.sigma2();
        for ((o, &xi), &obs) in out.iter_mut().zip(x).zip(self.observation.observed_flags()) {
            if obs {
                *o += prec * xi;
            }
        }
    }

    /// Exact `diag(A)`.
    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = self.layout.weighted_diagonal(self.pi);
        let prec = 1.0 / self.observation.sigma2();
        for (di, &obs) in d.iter_mut().zip(self.observation.observed_flags()) {
            if obs {
                *di += prec;
            }
        }
        d
    }
}

#[derive(Debug, Clone)]
pub struct PcgResult {
    pub x: Vec<f64>,
    /// `||A x - b|| / ||b||`
    pub rel_residual: f64,
    pub iterations: usize,
}

/// Jacobi-preconditioned conjugate gradients from a zero start.
pub fn pcg_solve(
    op: &PrecisionOp<'_>,
    rhs: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<PcgResult> {
    check_len(op.n(), rhs.len())?;
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "tolerance must be > 0, got {tol}"
        )));
    }
    let n = op.n();
    let bnorm = dot(rhs, rhs).sqrt();
    if bnorm == 0.0 {
        return Ok(PcgResult {
            x: vec![0.0; n],
            rel_residual: 0.0,
            iterations: 0,
        });
    }
    let inv_diag: Vec<f64> = op
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut zv: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = zv.clone();
    let mut ap = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut rz = dot(&r, &zv);
    let mut iterations = 0;

    while iterations < max_iters {
        op.apply_into(&p, &mut ap, &mut scratch);
        let pap = dot(&p, &ap);
        if !pap.is_finite() || !rz.is_finite() {
            return Err(Error::NonFinite {
                stage: "pcg",
                detail: format!("iteration {iterations}: p'Ap = {pap}, r'z = {rz}"),
            });
        }
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        iterations += 1;
        if dot(&r, &r).sqrt() / bnorm <= tol {
            break;
        }
        for i in 0..n {
            zv[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &zv);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = zv[i] + beta * p[i];
        }
    }

    // report the true residual, not the recurrence
    op.apply_into(&x, &mut ap, &mut scratch);
    let true_res: f64 = ap
        .iter()
        .zip(rhs)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
        / bnorm;
    if !true_res.is_finite() {
        return Err(Error::NonFinite {
            stage: "pcg",
            detail: "final residual".into(),
        });
    }
    Ok(PcgResult {
        x,
        rel_residual: true_res,
        iterations,
    })
}

/// Right-hand side `r_k = sigma^-1 X^T eps1 + B^T diag(pi)^(1/2) eps2` of the
/// `k`-th Perturb&MAP sample; `Cov(r_k) = A(pi)`.
pub fn perturbation(op: &PrecisionOp<'_>, seed: u64, k: u64) -> Vec<f64> {
    let n = op.n();
    let mut rng = RngStream::new(seed, "pm", k).rng();
    let inv_sigma = 1.0 / op.observation.sigma2().sqrt();
    let eps1: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let eps2: Vec<f64> = op
        .pi
        .iter()
        .map(|p| p.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut r = op.layout.inverse_slice(&eps2);
    for ((ri, e), &obs) in r.iter_mut().zip(eps1).zip(op.observation.observed_flags()) {
        if obs {
            *ri += inv_sigma * e;
        }
    }
    r
}

#[derive(Debug, Clone)]
pub struct VarianceEstimate {
    /// Estimated `Var[s_j]`, clamped to `>= Z_FLOOR`.
    pub z: Vec<f64>,
    pub max_residual: f64,
    pub mean_iterations: f64,
}

/// Perturb&MAP estimate of `diag(B A^-1 B^T)` from `samples` PCG solves.
pub fn sample_variances(
    op: &PrecisionOp<'_>,
    samples: usize,
    cg_iters: usize,
    seed: u64,
) -> Result<VarianceEstimate> {
    sample_variances_with(op, samples, seed, |rhs| {
        let r = pcg_solve(op, rhs, 1e-8, cg_iters)?;
        Ok((r.x, r.rel_residual, r.iterations))
    })
}

/// Perturb&MAP with a caller-supplied solver for `A x = r`, which returns the
/// solution, its relative residual and iteration count.
pub fn sample_variances_with<F>(
    op: &PrecisionOp<'_>,
    samples: usize,
    seed: u64,
    solve: F,
) -> Result<VarianceEstimate>
where
    F: Fn(&[f64]) -> Result<(Vec<f64>, f64, usize)> + Sync,
{
    if samples == 0 {
        return Err(Error::InvalidParameter("need at least one sample".into()));
    }
    let n = op.n();
    let chunk = rayon::current_num_threads().max(1);
    let mut acc = vec![0.0; n];
    let mut max_residual: f64 = 0.0;
    let mut total_iters = 0usize;
    let indices: Vec<u64> = (0..samples as u64).collect();
    for block in indices.chunks(chunk) {
        let results: Vec<Result<(Vec<f64>, f64, usize)>> = block
            .par_iter()
            .map(|&k| {
                let rhs = perturbation(op, seed, k);
                let (x, res, it) = solve(&rhs)?;
                Ok((op.layout.forward_slice(&x), res, it))
            })
            .collect();
        // fixed reduction order
        for r in results {
            let (s, res, it) = r?;
            for (a, v) in acc.iter_mut().zip(&s) {
                *a += v * v;
            }
            max_residual = max_residual.max(res);
            total_iters += it;
        }
    }
    let inv = 1.0 / samples as f64;
    Ok(VarianceEstimate {
        z: acc.into_iter().map(|a| (a * inv).max(Z_FLOOR)).collect(),
        max_residual,
        mean_iterations: total_iters as f64 * inv,
    })
}

/// `z = (sigma^-2 1 + pi)^-1`, exact when `X = I`.
pub fn exact_variances_denoising(pi: &[f64], sigma2: f64) -> Vec<f64> {
    let prec = 1.0 / sigma2;
    pi.iter().map(|p| 1.0 / (prec + p)).collect()
}

/// Checked form of [`exact_variances_denoising`].
pub fn exact_variances(observation: &ObservationOp, pi: &[f64]) -> Result<Vec<f64>> {
    if !observation.is_identity() {
        return Err(Error::InvalidParameter(
            "exact variances require an identity observation operator".into(),
        ));
    }
    check_len(observation.n(), pi.len())?;
    Ok(exact_variances_denoising(pi, observation.sigma2()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(h: usize, w: usize, levels: usize) -> (WaveletLayout, ObservationOp) {
        let layout = WaveletLayout::new(h, w, levels).unwrap();
        let obs = ObservationOp::identity(h * w, 1.0).unwrap();
        (layout, obs)
    }

    #[test]
    fn observation_mask_roundtrip() {
        let obs = ObservationOp::mask(5, vec![3, 0], 0.1).unwrap();
        let y = obs.apply(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(y, vec![4.0, 1.0]);
        assert_eq!(obs.adjoint(&y).unwrap(), vec![1.0, 0.0, 0.0, 4.0, 0.0]);
        assert!(ObservationOp::mask(5, vec![1, 1], 0.1).is_err());
        assert!(ObservationOp::mask(5, vec![5], 0.1).is_err());
        assert!(ObservationOp::identity(5, 0.0).is_err());
    }

    #[test]
    fn precision_examples() {
        let (layout, obs) = setup(8, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let zero = vec![0.0; 64];
        let a = PrecisionOp::new(&obs, &layout, &zero)
            .unwrap()
            .apply(&x)
            .unwrap();
        assert!(a.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
        let c = vec![2.5; 64];
        let a = PrecisionOp::new(&obs, &layout, &c)
            .unwrap()
            .apply(&x)
            .unwrap();
        assert!(a.iter().zip(&x).all(|(a, b)| (a - 3.5 * b).abs() < 1e-12));
        let empty = ObservationOp::mask(64, vec![], 1.0).unwrap();
        let ones = vec![1.0; 64];
        let a = PrecisionOp::new(&empty, &layout, &ones)
            .unwrap()
            .apply(&x)
            .unwrap();
        assert!(a.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(PrecisionOp::new(&obs, &layout, &[0.0; 3]).is_err());
        assert!(PrecisionOp::new(&obs, &layout, &vec![-1.0; 64]).is_err());
    }

    #[test]
    fn precision_is_symmetric_with_exact_diagonal() {
        let layout = WaveletLayout::new(8, 8, 2).unwrap();
        let obs = ObservationOp::mask(64, (0..64).step_by(3).collect(), 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pi: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 4.0).collect();
        let op = PrecisionOp::new(&obs, &layout, &pi).unwrap();
        let x: Vec<f64> = (0..64).map(|_| rng.random::<f64>() - 0.5).collect();
        let y: Vec<f64> = (0..64).map(|_| rng.random::<f64>() - 0.5).collect();
        let lhs = dot(&op.apply(&x).unwrap(), &y);
        let rhs = dot(&x, &op.apply(&y).unwrap());
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
        let dense = oracle::dense_precision(&op);
        for (i, d) in op.diagonal().iter().enumerate() {
            assert!((d - dense[(i, i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn pcg_closed_forms() {
        let (layout, obs) = setup(8, 8, 3);
        let rhs: Vec<f64> = (0..64).map(|i| (i as f64).sin()).collect();
        let zero = vec![0.0; 64];
        let r = pcg_solve(
            &PrecisionOp::new(&obs, &layout, &zero).unwrap(),
            &rhs,
            1e-12,
            50,
        )
        .unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.x.iter().zip(&rhs).all(|(a, b)| (a - b).abs() < 1e-14));
        let c = vec![3.0; 64];
        let r = pcg_solve(
            &PrecisionOp::new(&obs, &layout, &c).unwrap(),
            &rhs,
            1e-12,
            50,
        )
        .unwrap();
        assert!(r
            .x
            .iter()
            .zip(&rhs)
            .all(|(a, b)| (a - b / 4.0).abs() < 1e-12));
        let r = pcg_solve(
            &PrecisionOp::new(&obs, &layout, &c).unwrap(),
            &zero,
            1e-12,
            50,
        )
        .unwrap();
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn pcg_matches_dense_on_inpainting() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = WaveletLayout::new(16, 16, 3).unwrap();
        let observed: Vec<usize> = (0..256).filter(|_| rng.random::<bool>()).collect();
        let obs = ObservationOp::mask(256, observed, 0.05).unwrap();
        let pi: Vec<f64> = (0..256).map(|_| 0.1 + rng.random::<f64>() * 10.0).collect();
        let op = PrecisionOp::new(&obs, &layout, &pi).unwrap();
        let rhs: Vec<f64> = (0..256).map(|_| rng.random::<f64>() - 0.5).collect();
        let r = pcg_solve(&op, &rhs, 1e-12, 2000).unwrap();
        let x = oracle::dense_solve(&op, &rhs);
        let err =
            r.x.iter()
                .zip(&x)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / norm < 1e-6, "{}", err / norm);
    }

    #[test]
    fn exact_variances_match_dense() {
        let (layout, _) = setup(8, 8, 3);
        let obs = ObservationOp::identity(64, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pi: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 50.0).collect();
        let z = exact_variances(&obs, &pi).unwrap();
        let dense =
            oracle::dense_coefficient_variances(&PrecisionOp::new(&obs, &layout, &pi).unwrap());
        for (a, b) in z.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((exact_variances_denoising(&[0.0], 0.01)[0] - 0.01).abs() < 1e-16);
        assert_eq!(exact_variances_denoising(&[1.0], 1.0)[0], 0.5);
        let mask = ObservationOp::mask(64, vec![0], 0.01).unwrap();
        assert!(exact_variances(&mask, &pi).is_err());
    }

    #[test]
    fn sampler_is_deterministic_and_tracks_dominant_precision() {
        let layout = WaveletLayout::new(8, 8, 2).unwrap();
        let obs = ObservationOp::mask(64, (0..64).step_by(2).collect(), 0.1).unwrap();
        let mut pi = vec![1.0; 64];
        pi[10] = 1e8;
        let op = PrecisionOp::new(&obs, &layout, &pi).unwrap();
        let a = sample_variances(&op, 20, 200, 77).unwrap();
        let b = sample_variances(&op, 20, 200, 77).unwrap();
        assert_eq!(a.z, b.z);
        let exact = oracle::dense_coefficient_variances(&op);
        assert!((exact[10] - 1e-8).abs() < 1e-10);
        assert!(a.z[10] < 1e-7, "{}", a.z[10]);
    }

    #[test]
    fn sampler_tracks_exact_denoising_variances() {
        let layout = WaveletLayout::new(16, 16, 4).unwrap();
        let obs = ObservationOp::identity(256, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pi: Vec<f64> = (0..256).map(|_| rng.random::<f64>() * 200.0).collect();
        let op = PrecisionOp::new(&obs, &layout, &pi).unwrap();
        let k = 1000;
        let est = sample_variances(&op, k, 100, 3).unwrap();
        let exact = exact_variances_denoising(&pi, 0.01);
        let mean_rel: f64 = est
            .z
            .iter()
            .zip(&exact)
            .map(|(a, b)| ((a - b) / b).abs())
            .sum::<f64>()
            / 256.0;
        assert!(mean_rel <= 3.0 / (k as f64).sqrt(), "{mean_rel}");
    }
}
