//! Latent binary quad-tree prior over coefficient states and exact
//! sum-product inference on it.
//!
//! Node `j` carries a state `delta_j in {0, 1}` (low/high). Roots are high
//! with probability `rho_root`; a node at level `l > 1` is high with
//! probability `theta[l][r]` given its parent is in state `r`. Evidence enters
//! as per-node log-potentials `(a_j(0), a_j(1))` and the posterior is
//! `Q(delta) ∝ P(delta) prod_j exp(a_j(delta_j))`.

use crate::error::{Error, Result};
use crate::wavelet::WaveletLayout;

/// CPT entries are kept inside `[THETA_MIN, 1 - THETA_MIN]`.
pub const THETA_MIN: f64 = 1e-4;

/// Parent links and levels of a forest whose nodes are topologically ordered
/// (every parent precedes its children).
#[derive(Debug, Clone)]
pub struct TreeTopology {
    parent: Vec<Option<usize>>,
    level: Vec<usize>,
    levels: usize,
}

impl TreeTopology {
    /// `level` is 1 for roots and `level[parent] + 1` otherwise.
    pub fn new(parent: Vec<Option<usize>>, level: Vec<usize>) -> Result<Self> {
        if parent.len() != level.len() {
            return Err(Error::MalformedTree(format!(
                "{} parent links for {} levels",
                parent.len(),
                level.len()
            )));
        }
        for (j, (p, &l)) in parent.iter().zip(&level).enumerate() {
            match *p {
                None if l != 1 => {
                    return Err(Error::MalformedTree(format!("root {j} at level {l}")));
                }
                Some(p) if p >= j => {
                    return Err(Error::MalformedTree(format!(
                        "node {j} precedes its parent {p}"
                    )));
                }
                Some(p) if level[p] + 1 != l => {
                    return Err(Error::MalformedTree(format!(
                        "node {j} at level {l} under parent at level {}",
                        level[p]
                    )));
                }
                _ => {}
            }
        }
        let levels = level.iter().copied().max().unwrap_or(0);
        Ok(Self {
            parent,
            level,
            levels,
        })
    }

    /// The forest over the detail coefficients of `layout`; node `k` is
    /// canonical coefficient `layout.n_scaling() + k`.
    pub fn from_layout(layout: &WaveletLayout) -> Self {
        let offset = layout.n_scaling();
        let info = &layout.info()[offset..];
        Self {
            parent: info.iter().map(|c| c.parent.map(|p| p - offset)).collect(),
            level: info.iter().map(|c| c.level).collect(),
            levels: layout.levels(),
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parent[j]
    }

    pub fn level(&self, j: usize) -> usize {
        self.level[j]
    }

    pub fn roots(&self) -> impl Iterator<Item = usize> + '_ {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.is_none().then_some(j))
    }
}

/// Root probability and per-level conditional probability tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeParams {
    pub rho_root: f64,
    /// `theta[l - 1][r] = P(delta_j = 1 | delta_parent = r)` for nodes at
    /// level `l`; the level-1 row mirrors `rho_root`.
    pub theta: Vec<[f64; 2]>,
}

impl TreeParams {
    pub fn new(levels: usize, rho_root: f64, theta0: f64, theta1: f64) -> Self {
        let mut theta = vec![[theta0, theta1]; levels.max(1)];
        theta[0] = [rho_root; 2];
        Self { rho_root, theta }.clamped()
    }

    pub fn levels(&self) -> usize {
        self.theta.len()
    }

    /// `P(delta_j = 1 | parent state)` for a node at `level`; `parent` is
    /// `None` at roots.
    pub fn prob_high(&self, level: usize, parent: Option<usize>) -> f64 {
        match parent {
            None => self.rho_root,
            Some(r) => self.theta[level - 1][r],
        }
    }

    pub fn clamped(mut self) -> Self {
        let c = |v: f64| v.clamp(THETA_MIN, 1.0 - THETA_MIN);
        self.rho_root = c(self.rho_root);
        for row in &mut self.theta {
            row[0] = c(row[0]);
            row[1] = c(row[1]);
        }
        self.theta[0] = [self.rho_root; 2];
        self
    }

    /// `log P(delta)` of a full configuration.
    pub fn log_prior(&self, topo: &TreeTopology, states: &[u8]) -> f64 {
        (0..topo.len())
            .map(|j| {
                let p1 = self.prob_high(topo.level(j), topo.parent(j).map(|p| states[p] as usize));
                if states[j] == 1 {
                    p1.ln()
                } else {
                    (1.0 - p1).ln()
                }
            })
            .sum()
    }
}

/// Posterior single and pairwise marginals.
#[derive(Debug, Clone)]
pub struct TreeMarginals {
    /// `Q(delta_j = 1)`
    pub q1: Vec<f64>,
    /// `qpair[j][k][r] = Q(delta_j = k, delta_parent(j) = r)`; all zero at roots.
    pub qpair: Vec<[[f64; 2]; 2]>,
    pub log_z: f64,
}

impl TreeMarginals {
    /// Marginals of the prior itself (flat evidence).
    pub fn prior(topo: &TreeTopology, params: &TreeParams) -> Self {
        bp_infer(topo, params, &vec![[0.0; 2]; topo.len()]).expect("flat evidence is valid")
    }

    pub fn q(&self, j: usize, state: usize) -> f64 {
        if state == 1 {
            self.q1[j]
        } else {
            1.0 - self.q1[j]
        }
    }
}

#[inline]
fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_cpt(params: &TreeParams) -> Vec<[[f64; 2]; 2]> {
    // [level - 1][r][k]
    params
        .theta
        .iter()
        .map(|t| {
            [
                [(1.0 - t[0]).ln(), t[0].ln()],
                [(1.0 - t[1]).ln(), t[1].ln()],
            ]
        })
        .collect()
}

/// Exact marginals and log-partition of `P(delta) prod_j exp(evidence_j)`
/// by one upward and one downward sweep in log space.
pub fn bp_infer(
    topo: &TreeTopology,
    params: &TreeParams,
    evidence: &[[f64; 2]],
) -> Result<TreeMarginals> {
    let n = topo.len();
    if evidence.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: evidence.len(),
        });
    }
    if params.levels() < topo.levels() {
        return Err(Error::MalformedTree(format!(
            "{} CPT levels for a depth-{} forest",
            params.levels(),
            topo.levels()
        )));
    }
    if let Some(j) = evidence
        .iter()
        .position(|e| !(e[0].is_finite() && e[1].is_finite()))
    {
        return Err(Error::NonFinite {
            stage: "tree evidence",
            detail: format!("node {j}"),
        });
    }
    let lcpt = log_cpt(params);
    let lroot = [(1.0 - params.rho_root).ln(), params.rho_root.ln()];

    // upward: up[j] = evidence + sum of child messages
    let mut up: Vec<[f64; 2]> = evidence.to_vec();
    let mut msg = vec![[0.0; 2]; n];
    let mut log_z = 0.0;
    for j in (0..n).rev() {
        let u = up[j];
        match topo.parent(j) {
            Some(p) => {
                let t = &lcpt[topo.level(j) - 1];
                let m = [
                    lse2(t[0][0] + u[0], t[0][1] + u[1]),
                    lse2(t[1][0] + u[0], t[1][1] + u[1]),
                ];
                msg[j] = m;
                up[p][0] += m[0];
                up[p][1] += m[1];
            }
            None => log_z += lse2(lroot[0] + u[0], lroot[1] + u[1]),
        }
    }

    // downward: down[j] = log prior-side message into j
    let mut down = vec![[0.0; 2]; n];
    let mut q1 = vec![0.0; n];
    let mut qpair = vec![[[0.0; 2]; 2]; n];
    for j in 0..n {
        let u = up[j];
        match topo.parent(j) {
            None => down[j] = lroot,
            Some(p) => {
                let t = &lcpt[topo.level(j) - 1];
                let outside = [
                    down[p][0] + up[p][0] - msg[j][0],
                    down[p][1] + up[p][1] - msg[j][1],
                ];
                down[j] = [
                    lse2(outside[0] + t[0][0], outside[1] + t[1][0]),
                    lse2(outside[0] + t[0][1], outside[1] + t[1][1]),
                ];
                // joint over (k, r)
                let mut lj = [[0.0; 2]; 2];
                for (k, row) in lj.iter_mut().enumerate() {
                    for (r, v) in row.iter_mut().enumerate() {
                        *v = outside[r] + t[r][k] + u[k];
                    }
                }
                let norm = lse2(lse2(lj[0][0], lj[0][1]), lse2(lj[1][0], lj[1][1]));
                for k in 0..2 {
                    for r in 0..2 {
                        qpair[j][k][r] = (lj[k][r] - norm).exp();
                    }
                }
            }
        }
        let b0 = down[j][0] + u[0];
        let b1 = down[j][1] + u[1];
        q1[j] = 1.0 / (1.0 + (b0 - b1).exp());
    }

    let marginals = TreeMarginals { q1, qpair, log_z };
    debug_assert!(consistency_error(topo, &marginals) < 1e-9);
    Ok(marginals)
}

/// Largest violation of normalization and marginal consistency of `qpair`
/// against `q1`.
pub fn consistency_error(topo: &TreeTopology, m: &TreeMarginals) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..topo.len() {
        if let Some(p) = topo.parent(j) {
            let t = &m.qpair[j];
            let total = t[0][0] + t[0][1] + t[1][0] + t[1][1];
            worst = worst.max((total - 1.0).abs());
            worst = worst.max((t[1][0] + t[1][1] - m.q1[j]).abs());
            worst = worst.max((t[0][1] + t[1][1] - m.q1[p]).abs());
        }
    }
    worst
}

/// `D[Q || P] = E_Q[sum_j a_j(delta_j)] - log Z`.
pub fn kl_to_prior(marginals: &TreeMarginals, evidence: &[[f64; 2]]) -> f64 {
    let expected: f64 = marginals
        .q1
        .iter()
        .zip(evidence)
        .map(|(&q, e)| (1.0 - q) * e[0] + q * e[1])
        .sum();
    expected - marginals.log_z
}

/// `D[Q || P]` for a tree-structured `Q` given by its marginals, against the
/// prior with parameters `params`. Unlike [`kl_to_prior`] this stays valid
/// after the CPTs change.
pub fn kl_divergence(topo: &TreeTopology, marginals: &TreeMarginals, params: &TreeParams) -> f64 {
    let xlogy = |x: f64, y: f64| if x > 0.0 { x * y.ln() } else { 0.0 };
    let mut kl = 0.0;
    for j in 0..topo.len() {
        let q1 = marginals.q1[j];
        match topo.parent(j) {
            None => {
                let p1 = params.rho_root;
                kl += xlogy(q1, q1 / p1) + xlogy(1.0 - q1, (1.0 - q1) / (1.0 - p1));
            }
            Some(p) => {
                let qp = [1.0 - marginals.q1[p], marginals.q1[p]];
                let t = &params.theta[topo.level(j) - 1];
                for r in 0..2 {
                    let prior = [1.0 - t[r], t[r]];
                    for k in 0..2 {
                        let q = marginals.qpair[j][k][r];
                        if q > 0.0 && qp[r] > 0.0 {
                            kl += q * (q / qp[r] / prior[k]).ln();
                        }
                    }
                }
            }
        }
    }
    kl
}

/// Expected-complete-data update of the CPTs. Levels without parent-state
/// mass keep their previous value.
pub fn update_theta(
    topo: &TreeTopology,
    marginals: &TreeMarginals,
    prev: &TreeParams,
) -> TreeParams {
    let levels = prev.levels();
    let mut num = vec![[0.0f64; 2]; levels];
    let mut den = vec![[0.0f64; 2]; levels];
    let (mut root_sum, mut root_count) = (0.0, 0usize);
    for j in 0..topo.len() {
        match topo.parent(j) {
            None => {
                root_sum += marginals.q1[j];
                root_count += 1;
            }
            Some(_) => {
                let l = topo.level(j) - 1;
                let t = &marginals.qpair[j];
                for r in 0..2 {
                    num[l][r] += t[1][r];
                    den[l][r] += t[0][r] + t[1][r];
                }
            }
        }
    }
    let mut next = prev.clone();
    if root_count > 0 {
        next.rho_root = root_sum / root_count as f64;
    }
    for l in 1..levels {
        for r in 0..2 {
            if den[l][r] > 0.0 {
                next.theta[l][r] = num[l][r] / den[l][r];
            }
        }
    }
    next.clamped()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single() -> TreeTopology {
        TreeTopology::new(vec![None], vec![1]).unwrap()
    }

    #[test]
    fn single_root_flat() {
        let params = TreeParams::new(1, 0.3, 0.5, 0.5);
        let m = bp_infer(&single(), &params, &[[0.0, 0.0]]).unwrap();
        assert!((m.q1[0] - 0.3).abs() < 1e-15);
        assert!(m.log_z.abs() < 1e-15);
        assert!(kl_to_prior(&m, &[[0.0, 0.0]]).abs() < 1e-15);
    }

    #[test]
    fn single_root_evidence() {
        let params = TreeParams::new(1, 0.5, 0.5, 0.5);
        let ev = [[0.0, 3f64.ln()]];
        let m = bp_infer(&single(), &params, &ev).unwrap();
        assert!((m.q1[0] - 0.75).abs() < 1e-15);
        assert!((m.log_z - 2f64.ln()).abs() < 1e-15);
        let kl = kl_to_prior(&m, &ev);
        assert!((kl - (0.75 * 3f64.ln() - 2f64.ln())).abs() < 1e-15);
        assert!((kl - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_input() {
        let params = TreeParams::new(1, 0.5, 0.5, 0.5);
        assert!(bp_infer(&single(), &params, &[]).is_err());
        assert!(bp_infer(&single(), &params, &[[f64::NAN, 0.0]]).is_err());
        assert!(TreeTopology::new(vec![Some(1), None], vec![2, 1]).is_err());
        assert!(TreeTopology::new(vec![None, Some(0)], vec![1, 3]).is_err());
        assert!(TreeTopology::new(vec![None], vec![2]).is_err());
    }

    #[test]
    fn matches_enumeration_on_random_forests() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let topo = oracle::random_forest(&mut rng, 14, 5);
            let params = oracle::random_tree_params(&mut rng, topo.levels());
            let ev: Vec<[f64; 2]> = (0..topo.len())
                .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
                .collect();
            let m = bp_infer(&topo, &params, &ev).unwrap();
            let brute = oracle::enumerate_tree(&topo, &params, &ev);
            assert!((m.log_z - brute.log_z).abs() < 1e-10);
            for j in 0..topo.len() {
                assert!((m.q1[j] - brute.q1[j]).abs() < 1e-10);
                if topo.parent(j).is_some() {
                    for k in 0..2 {
                        for r in 0..2 {
                            assert!((m.qpair[j][k][r] - brute.qpair[j][k][r]).abs() < 1e-10);
                        }
                    }
                }
            }
            assert!(consistency_error(&topo, &m) < 1e-10);
            assert!((kl_to_prior(&m, &ev) - brute.kl).abs() < 1e-9);
            assert!((kl_divergence(&topo, &m, &params) - brute.kl).abs() < 1e-9);
        }
    }

    #[test]
    fn deep_layout_does_not_underflow() {
        let layout = WaveletLayout::new(256, 256, 8).unwrap();
        let topo = TreeTopology::from_layout(&layout);
        let params = TreeParams::new(8, 0.5, 0.1, 0.9);
        let ev = vec![[-40.0, 0.0]; topo.len()];
        let m = bp_infer(&topo, &params, &ev).unwrap();
        assert!(m.log_z.is_finite());
        assert!(m.q1.iter().all(|q| q.is_finite() && *q > 0.99));
        assert!(consistency_error(&topo, &m) < 1e-10);
    }

    #[test]
    fn theta_update_examples() {
        let topo = TreeTopology::new(vec![None; 4], vec![1; 4]).unwrap();
        let m = TreeMarginals {
            q1: vec![0.2, 0.4, 0.6, 0.8],
            qpair: vec![[[0.0; 2]; 2]; 4],
            log_z: 0.0,
        };
        let next = update_theta(&topo, &m, &TreeParams::new(1, 0.1, 0.1, 0.1));
        assert!((next.rho_root - 0.5).abs() < 1e-15);

        let topo = TreeTopology::new(vec![None, Some(0), Some(0)], vec![1, 2, 2]).unwrap();
        let m = TreeMarginals {
            q1: vec![0.5; 3],
            qpair: vec![[[0.25; 2]; 2]; 3],
            log_z: 0.0,
        };
        let next = update_theta(&topo, &m, &TreeParams::new(2, 0.5, 0.1, 0.9));
        assert!((next.theta[1][0] - 0.5).abs() < 1e-15);
        assert!((next.theta[1][1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn theta_update_keeps_empty_levels_and_clamps() {
        let topo = TreeTopology::new(vec![None], vec![1]).unwrap();
        let m = TreeMarginals {
            q1: vec![1.0],
            qpair: vec![[[0.0; 2]; 2]],
            log_z: 0.0,
        };
        let prev = TreeParams::new(3, 0.5, 0.2, 0.7);
        let next = update_theta(&topo, &m, &prev);
        assert_eq!(next.rho_root, 1.0 - THETA_MIN);
        assert_eq!(next.theta[2], prev.theta[2]);
    }
}
