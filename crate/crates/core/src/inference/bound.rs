//! Dense evaluation of the full variational bound on `-2 log P(y)` for small
//! models, with an exact log-determinant.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::potentials::Potential;
use crate::tree::{kl_divergence, TreeMarginals, TreeParams, TreeTopology};

/// Largest model [`phi_dense`] accepts.
pub const DENSE_MAX: usize = 256;

/// Prior on one coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slot {
    Single(Potential),
    /// Latent-state node; the `k`-th `Node` slot is tree node `k`.
    Node {
        low: Potential,
        high: Potential,
    },
}

/// `y = X u + noise`, `s = B u`, with an explicit prior per coefficient.
#[derive(Debug, Clone)]
pub struct DenseModel {
    /// `m x n`
    pub x: DMatrix<f64>,
    /// `n x n`, orthonormal
    pub b: DMatrix<f64>,
    pub y: DVector<f64>,
    pub sigma2: f64,
    pub slots: Vec<Slot>,
    pub tree: Option<(TreeTopology, TreeParams)>,
}

impl DenseModel {
    pub fn n(&self) -> usize {
        self.b.ncols()
    }

    fn node_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, Slot::Node { .. }))
            .count()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.n();
        if n > DENSE_MAX {
            return Err(Error::TooLarge(n));
        }
        for (expected, actual) in [
            (n, self.b.nrows()),
            (n, self.x.ncols()),
            (self.x.nrows(), self.y.len()),
            (n, self.slots.len()),
        ] {
            if expected != actual {
                return Err(Error::DimensionMismatch { expected, actual });
            }
        }
        let nodes = self.node_count();
        match &self.tree {
            Some((topo, _)) if topo.len() == nodes => Ok(()),
            None if nodes == 0 => Ok(()),
            _ => Err(Error::MalformedTree(
                "node slots do not match the tree".into(),
            )),
        }
    }
}

/// `gamma` of a potential at magnitude `p`, with the dual value `h(gamma)`.
fn gamma_and_h(pot: &Potential, p: f64) -> Result<(f64, f64)> {
    let g = pot.gamma_min(p);
    Ok((g, pot.h_dual(g)?))
}

/// The bound `-2 log Z_Q(<pi>) + <h(gamma)> + 2 D[Q || P]` with `gamma` the
/// minimizers at `p_j = sqrt(z_j + s_j^2)`, `s = B u_star`, and `Q(delta)`
/// given by `marginals`. Valid for any inputs; tight at the optimum.
pub fn phi_dense(
    model: &DenseModel,
    u_star: &[f64],
    z: &[f64],
    marginals: Option<&TreeMarginals>,
) -> Result<f64> {
    model.check()?;
    let n = model.n();
    if u_star.len() != n || z.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: u_star.len().min(z.len()),
        });
    }
    let s = &model.b * DVector::from_column_slice(u_star);
    let mut pi = vec![0.0; n];
    let mut h_sum = 0.0;
    let mut node = 0;
    for j in 0..n {
        let p = (z[j] + s[j] * s[j]).sqrt();
        match model.slots[j] {
            Slot::Single(pot) => {
                let (g, h) = gamma_and_h(&pot, p)?;
                pi[j] = 1.0 / g;
                h_sum += h;
            }
            Slot::Node { low, high } => {
                let q = marginals
                    .ok_or_else(|| Error::InvalidParameter("tree model needs marginals".into()))?
                    .q1[node];
                node += 1;
                let (g0, h0) = gamma_and_h(&low, p)?;
                let (g1, h1) = gamma_and_h(&high, p)?;
                pi[j] = (1.0 - q) / g0 + q / g1;
                h_sum += (1.0 - q) * h0 + q * h1;
            }
        }
    }
    let kl = match (&model.tree, marginals) {
        (Some((topo, params)), Some(m)) => kl_divergence(topo, m, params),
        _ => 0.0,
    };

    let inv = 1.0 / model.sigma2;
    let bt = model.b.transpose();
    let a = model.x.transpose() * &model.x * inv
        + &bt * DMatrix::from_diagonal(&DVector::from_vec(pi)) * &model.b;
    let chol = a.cholesky().ok_or_else(|| Error::NonFinite {
        stage: "dense bound",
        detail: "precision matrix is not positive definite".into(),
    })?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let rhs = model.x.transpose() * &model.y * inv;
    let quad = rhs.dot(&chol.solve(&rhs));
    let m = model.y.len() as f64;
    let neg2_log_z = m * (2.0 * PI * model.sigma2).ln() + inv * model.y.norm_squared()
        - quad
        - n as f64 * (2.0 * PI).ln()
        + log_det;
    Ok(neg2_log_z + h_sum + 2.0 * kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::tree::bp_infer;

    fn one_dim(slot: Slot, y: f64, sigma2: f64) -> DenseModel {
        DenseModel {
            x: DMatrix::identity(1, 1),
            b: DMatrix::identity(1, 1),
            y: DVector::from_vec(vec![y]),
            sigma2,
            slots: vec![slot],
            tree: None,
        }
    }

    #[test]
    fn gaussian_is_tight() {
        let (xi, sigma2, y) = (2.5, 0.3, 0.8);
        let model = one_dim(Slot::Single(Potential::gaussian(xi).unwrap()), y, sigma2);
        let v = sigma2 + 1.0 / xi;
        let exact = (2.0 * PI * v).ln() + y * y / v;
        let phi = phi_dense(&model, &[0.1], &[0.2], None).unwrap();
        assert!((phi - exact).abs() < 1e-12, "{phi} vs {exact}");
    }

    #[test]
    fn laplace_bound_holds_in_one_dim() {
        let model = one_dim(Slot::Single(Potential::laplace(1.5).unwrap()), 0.9, 0.2);
        let truth = -2.0
            * oracle::log_integrate(
                |s| {
                    -0.5 * (0.9 - s[0]).powi(2) / 0.2
                        - 0.5 * (2.0 * PI * 0.2).ln()
                        - 0.5 * Potential::laplace(1.5).unwrap().neg2_log(s[0])
                },
                1,
                30.0,
                30000,
            );
        for (u, z) in [(0.5, 0.1), (0.0, 0.3), (0.9, 0.01)] {
            let phi = phi_dense(&model, &[u], &[z], None).unwrap();
            assert!(phi >= truth - 1e-6, "{phi} < {truth}");
        }
    }

    #[test]
    fn tree_node_needs_marginals() {
        let topo = TreeTopology::new(vec![None], vec![1]).unwrap();
        let params = TreeParams::new(1, 0.4, 0.5, 0.5);
        let lap = Potential::laplace(1.0).unwrap();
        let mut model = one_dim(
            Slot::Node {
                low: lap,
                high: lap,
            },
            0.2,
            0.1,
        );
        model.tree = Some((topo.clone(), params.clone()));
        assert!(phi_dense(&model, &[0.0], &[0.1], None).is_err());
        let m = bp_infer(&topo, &params, &[[0.0, 0.0]]).unwrap();
        let single = one_dim(Slot::Single(lap), 0.2, 0.1);
        let a = phi_dense(&model, &[0.1], &[0.1], Some(&m)).unwrap();
        let b = phi_dense(&single, &[0.1], &[0.1], None).unwrap();
        // prior marginals carry no KL, equal potentials collapse to one
        assert!((a - b).abs() < 1e-12);
    }
}
