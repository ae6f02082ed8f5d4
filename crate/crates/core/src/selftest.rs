//! Quick reference checks behind `treevb selftest`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::inference::{PlsObjective, WeightedPenalty};
use crate::linear::{exact_variances_denoising, pcg_solve, ObservationOp, PrecisionOp};
use crate::oracle;
use crate::potentials::{Penalty, Potential};
use crate::tree::{bp_infer, kl_to_prior};
use crate::wavelet::{Image, WaveletLayout};

type Check = fn() -> Result<(), String>;

fn wavelet_round_trip() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let l = rng.random_range(1..=4);
        let (h, w) = (rng.random_range(1..=4) << l, rng.random_range(1..=4) << l);
        let layout = WaveletLayout::new(h, w, l).map_err(|e| e.to_string())?;
        let img = Image::new(h, w, (0..h * w).map(|_| rng.random()).collect())
            .map_err(|e| e.to_string())?;
        let s = layout.forward(&img).map_err(|e| e.to_string())?;
        let back = layout.inverse(&s).map_err(|e| e.to_string())?;
        let err = back
            .pixels
            .iter()
            .zip(&img.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let n0: f64 = img.pixels.iter().map(|v| v * v).sum();
        let n1: f64 = s.iter().map(|v| v * v).sum();
        if err > 1e-10 || (n0 - n1).abs() > 1e-10 * n0 {
            return Err(format!("{h}x{w} L={l}: reconstruction error {err:e}"));
        }
    }
    Ok(())
}

fn potential_tightness() -> Result<(), String> {
    let pots = [
        Potential::laplace(1.7).unwrap(),
        Potential::student_t(0.8, 2.1).unwrap(),
    ];
    for pot in pots {
        for i in 0..=40 {
            let s = -10.0 + 0.5 * i as f64;
            let brute = oracle::min_positive(
                |g| s * s / g + pot.h_dual(g).unwrap_or(f64::INFINITY),
                -30.0,
                8.0,
            );
            let exact = pot.neg2_log(s);
            if (brute - exact).abs() > 1e-6 * exact.abs().max(1.0) {
                return Err(format!("{} at s={s}: {brute} vs {exact}", pot.kind()));
            }
        }
    }
    Ok(())
}

fn tree_enumeration() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let topo = oracle::random_forest(&mut rng, 12, 4);
        let params = oracle::random_tree_params(&mut rng, topo.levels());
        let ev: Vec<[f64; 2]> = (0..topo.len())
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let m = bp_infer(&topo, &params, &ev).map_err(|e| e.to_string())?;
        let brute = oracle::enumerate_tree(&topo, &params, &ev);
        let dq =
            m.q1.iter()
                .zip(&brute.q1)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
        if dq > 1e-10
            || (m.log_z - brute.log_z).abs() > 1e-10
            || (kl_to_prior(&m, &ev) - brute.kl).abs() > 1e-9
        {
            return Err(format!("mismatch on a {}-node forest", topo.len()));
        }
    }
    Ok(())
}

fn linear_solves() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layout = WaveletLayout::new(8, 8, 2).map_err(|e| e.to_string())?;
    let n = layout.len();
    let pi: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
    let observed: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.4)).collect();
    let obs = ObservationOp::mask(n, observed, 0.05).map_err(|e| e.to_string())?;
    let op = PrecisionOp::new(&obs, &layout, &pi).map_err(|e| e.to_string())?;
    let rhs: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let x = pcg_solve(&op, &rhs, 1e-12, 500)
        .map_err(|e| e.to_string())?
        .x;
    let dense = oracle::dense_solve(&op, &rhs);
    let err = x
        .iter()
        .zip(&dense)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = dense.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if err > 1e-6 * scale {
        return Err(format!("pcg error {err:e}"));
    }
    let ident = ObservationOp::identity(n, 0.05).map_err(|e| e.to_string())?;
    let op = PrecisionOp::new(&ident, &layout, &pi).map_err(|e| e.to_string())?;
    let z = exact_variances_denoising(&pi, 0.05);
    let dense = oracle::dense_coefficient_variances(&op);
    let err = z
        .iter()
        .zip(&dense)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if err > 1e-10 {
        return Err(format!("denoising variances error {err:e}"));
    }
    Ok(())
}

fn pls_gradient() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layout = WaveletLayout::new(8, 8, 2).map_err(|e| e.to_string())?;
    let n = layout.len();
    let observed: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| if observed[i] { rng.random() } else { 0.0 })
        .collect();
    let z: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.3)).collect();
    let field: Vec<WeightedPenalty> = (0..n)
        .map(|_| {
            WeightedPenalty::new(
                rng.random(),
                Penalty::Plain(Potential::laplace(2.0).unwrap()),
                Penalty::Convexified {
                    tau: 1.0,
                    nu: 2.1,
                    e: 3.0,
                },
            )
        })
        .collect();
    let obj = PlsObjective {
        layout: &layout,
        observed: &observed,
        inv_sigma2: 4.0,
        y_full: &y,
        z: &z,
        field: &field,
    };
    let u: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let (_, g) = obj.value_and_gradient(&u);
    let h = 1e-5;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        let mut a = u.clone();
        let mut b = u.clone();
        a[i] += h;
        b[i] -= h;
        let fd = (obj.value(&a) - obj.value(&b)) / (2.0 * h);
        num += (fd - g[i]).powi(2);
        den += fd * fd;
    }
    let rel = (num / den).sqrt();
    if rel > 1e-5 {
        return Err(format!("relative gradient error {rel:e}"));
    }
    Ok(())
}

/// Run every check, printing one line each; true when all pass.
pub fn run_all(out: &mut impl Write) -> bool {
    let checks: [(&str, Check); 5] = [
        ("wavelet perfect reconstruction", wavelet_round_trip),
        ("potential dual tightness", potential_tightness),
        ("tree BP vs enumeration", tree_enumeration),
        ("PCG and exact variances vs dense", linear_solves),
        ("PLS gradient vs finite differences", pls_gradient),
    ];
    let mut ok = true;
    for (name, check) in checks {
        let line = match check() {
            Ok(()) => format!("PASS {name}"),
            Err(e) => {
                ok = false;
                format!("FAIL {name}: {e}")
            }
        };
        let _ = writeln!(out, "{line}");
    }
    ok
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        let mut buf = Vec::new();
        assert!(
            super::run_all(&mut buf),
            "{}",
            String::from_utf8_lossy(&buf)
        );
    }
}
