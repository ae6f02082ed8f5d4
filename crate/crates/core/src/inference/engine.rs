//! The double-loop engine.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linear::{exact_variances, sample_variances, ObservationOp, PrecisionOp};
use crate::potentials::{refit_tangent, ConvexTangent, Penalty, Potential};
use crate::rng::derive_seed;
use crate::tree::{bp_infer, kl_divergence, update_theta, TreeMarginals, TreeTopology};
use crate::wavelet::{Image, WaveletLayout};

use super::bound::{DenseModel, Slot, DENSE_MAX};
use super::config::{Estimator, ModelConfig, VarianceSource};
use super::hypers::{clamp_hyper, closed_form_scale, fit_prior, refit_scale, Hypers, LevelPrior};
use super::pls::{minimize, PlsObjective, PlsReport, WeightedPenalty};

/// Observed data, observation operator and wavelet geometry.
#[derive(Debug, Clone)]
pub struct Problem {
    layout: WaveletLayout,
    observation: ObservationOp,
    y: Vec<f64>,
    y_full: Vec<f64>,
    topology: TreeTopology,
}

impl Problem {
    /// `y` holds the `m` observed values in the operator's order.
    pub fn new(
        height: usize,
        width: usize,
        levels: usize,
        observation: ObservationOp,
        y: Vec<f64>,
    ) -> Result<Self> {
        let layout = WaveletLayout::new(height, width, levels)?;
        if observation.n() != layout.len() {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                actual: observation.n(),
            });
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "observation",
                detail: format!("y[{i}] = {}", y[i]),
            });
        }
        let y_full = observation.adjoint(&y)?;
        let topology = TreeTopology::from_layout(&layout);
        Ok(Self {
            layout,
            observation,
            y,
            y_full,
            topology,
        })
    }

    /// Denoising problem with `X = I`.
    pub fn denoising(noisy: &Image, levels: usize, sigma2: f64) -> Result<Self> {
        let obs = ObservationOp::identity(noisy.len(), sigma2)?;
        Self::new(noisy.height, noisy.width, levels, obs, noisy.pixels.clone())
    }

    pub fn layout(&self) -> &WaveletLayout {
        &self.layout
    }

    pub fn observation(&self) -> &ObservationOp {
        &self.observation
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// `X^T y`
    pub fn y_full(&self) -> &[f64] {
        &self.y_full
    }

    pub fn topology(&self) -> &TreeTopology {
        &self.topology
    }

    /// The data with missing pixels set to the mean of the observed ones.
    pub fn mean_filled(&self) -> Vec<f64> {
        let mean = if self.y.is_empty() {
            0.0
        } else {
            self.y.iter().sum::<f64>() / self.y.len() as f64
        };
        self.y_full
            .iter()
            .zip(self.observation.observed_flags())
            .map(|(&v, &o)| if o { v } else { mean })
            .collect()
    }
}

/// Hyperparameters fitted to the raw data by maximizing their prior
/// probability, missing pixels mean-filled.
pub fn init_hypers(problem: &Problem, config: &ModelConfig) -> Result<Hypers> {
    if config.levels != problem.layout.levels() {
        return Err(Error::InvalidParameter(format!(
            "config depth {} differs from problem depth {}",
            config.levels,
            problem.layout.levels()
        )));
    }
    let s = problem.layout.forward_slice(&problem.mean_filled());
    Ok(fit_prior(
        &problem.layout,
        &s,
        config.model,
        config.nu,
        config.init_em_iters,
    )?
    .hypers)
}

#[derive(Debug, Clone)]
pub struct VariationalState {
    pub u_star: Vec<f64>,
    /// `B u_star`
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    /// Student's t tangent slopes per coefficient and state; unused slots are 0.
    pub e: Vec<[f64; 2]>,
    /// `None` for factorial models, where every state is low.
    pub marginals: Option<TreeMarginals>,
    pub hypers: Hypers,
    pub phi_trace: Vec<f64>,
}

impl VariationalState {
    #[inline]
    pub fn p(&self, j: usize) -> f64 {
        (self.z[j] + self.s[j] * self.s[j]).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Refit,
    Pls,
    Bp,
    Hypers,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Refit => "refit",
            Stage::Pls => "pls",
            Stage::Bp => "bp",
            Stage::Hypers => "hypers",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub outer: usize,
    pub round: usize,
    pub stage: Stage,
    pub phi: f64,
    pub grad_norm: Option<f64>,
    pub pls_iters: Option<usize>,
    /// Largest relative residual of the variance solves.
    pub cg_residual: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub u_star: Image,
    pub marginals: Option<TreeMarginals>,
    pub hypers: Hypers,
    pub phi_trace: Vec<f64>,
    pub trace: Vec<TraceEvent>,
    pub outer_iters: usize,
    pub phi_final: f64,
}

pub struct Engine<'a> {
    problem: &'a Problem,
    config: ModelConfig,
    observation: ObservationOp,
    state: VariationalState,
    field: Vec<WeightedPenalty>,
    trace: Vec<TraceEvent>,
    outer: usize,
    round: usize,
}

fn penalty_for(pot: &Potential, e: f64) -> Result<Penalty> {
    match pot {
        Potential::StudentT { .. } => Penalty::convexified(pot, ConvexTangent::new(e)?),
        _ => Ok(Penalty::Plain(*pot)),
    }
}

impl<'a> Engine<'a> {
    pub fn new(problem: &'a Problem, config: ModelConfig, hypers: Hypers) -> Result<Self> {
        config.validate()?;
        let layout = &problem.layout;
        if config.levels != layout.levels() {
            return Err(Error::InvalidParameter(format!(
                "config depth {} differs from problem depth {}",
                config.levels,
                layout.levels()
            )));
        }
        hypers.check(config.model, config.levels)?;
        let observation = problem.observation.with_sigma2(config.sigma2)?;
        let n = layout.len();
        let u_star = problem.mean_filled();
        let s = layout.forward_slice(&u_star);
        let z0 = match config.estimator {
            Estimator::Map => config.z_smooth,
            Estimator::Vb => config.sigma2,
        };
        let marginals = hypers
            .tree
            .as_ref()
            .map(|t| TreeMarginals::prior(&problem.topology, t));
        let state = VariationalState {
            u_star,
            s,
            z: vec![z0; n],
            e: vec![[0.0; 2]; n],
            marginals,
            hypers,
            phi_trace: Vec::new(),
        };
        let mut engine = Self {
            problem,
            config,
            observation,
            state,
            field: Vec::new(),
            trace: Vec::new(),
            outer: 0,
            round: 0,
        };
        engine.refit_tangents()?;
        engine.rebuild_field()?;
        if engine.config.model.is_tree() {
            engine.update_q_delta()?;
        }
        Ok(engine)
    }

    pub fn state(&self) -> &VariationalState {
        &self.state
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn field(&self) -> &[WeightedPenalty] {
        &self.field
    }

    /// Replace `z` (tests and diagnostics); penalties are unchanged.
    pub fn set_z(&mut self, z: Vec<f64>) -> Result<()> {
        if z.len() != self.state.z.len() {
            return Err(Error::DimensionMismatch {
                expected: self.state.z.len(),
                actual: z.len(),
            });
        }
        self.state.z = z;
        Ok(())
    }

    /// Replace the current estimate.
    pub fn set_u(&mut self, u: Vec<f64>) -> Result<()> {
        if u.len() != self.state.u_star.len() {
            return Err(Error::DimensionMismatch {
                expected: self.state.u_star.len(),
                actual: u.len(),
            });
        }
        self.state.s = self.problem.layout.forward_slice(&u);
        self.state.u_star = u;
        Ok(())
    }

    fn node(&self, j: usize) -> usize {
        j - self.problem.layout.n_scaling()
    }

    fn q1(&self, j: usize) -> f64 {
        self.state
            .marginals
            .as_ref()
            .map_or(0.0, |m| m.q1[self.node(j)])
    }

    fn prior_of(&self, j: usize) -> Option<&LevelPrior> {
        let level = self.problem.layout.coeff(j).level;
        (level > 0).then(|| self.state.hypers.level(level))
    }

    fn rebuild_field(&mut self) -> Result<()> {
        let n_scal = self.problem.layout.n_scaling();
        let scal = WeightedPenalty::single(Penalty::Plain(Potential::gaussian(
            self.state.hypers.xi_scaling,
        )?));
        let mut field = Vec::with_capacity(self.state.s.len());
        for j in 0..self.state.s.len() {
            if j < n_scal {
                field.push(scal);
                continue;
            }
            let prior = *self.prior_of(j).expect("detail coefficient");
            let e = self.state.e[j];
            field.push(match prior {
                LevelPrior::Single(pot) => WeightedPenalty::single(penalty_for(&pot, e[0])?),
                LevelPrior::Pair { low, high } => WeightedPenalty::new(
                    self.q1(j),
                    penalty_for(&low, e[0])?,
                    penalty_for(&high, e[1])?,
                ),
            });
        }
        self.field = field;
        Ok(())
    }

    fn refit_tangents(&mut self) -> Result<()> {
        for j in self.problem.layout.n_scaling()..self.state.s.len() {
            let prior = *self.prior_of(j).expect("detail coefficient");
            let p = self.state.p(j);
            for r in 0..prior.n_states() {
                let pot = prior.state(r);
                if let Potential::StudentT { .. } = pot {
                    self.state.e[j][r] = refit_tangent(pot, p)?.e;
                }
            }
        }
        Ok(())
    }

    /// `<pi>_j = w_j'(p_j) / (2 p_j)`: the expected inverse variance of the
    /// Gaussian lower bound at the current `p`.
    pub fn effective_pi(&self) -> Vec<f64> {
        self.field
            .iter()
            .enumerate()
            .map(|(j, w)| 0.5 * w.slope_over_p(self.state.p(j)))
            .collect()
    }

    pub fn pls_objective(&self) -> PlsObjective<'_> {
        PlsObjective {
            layout: &self.problem.layout,
            observed: self.observation.observed_flags(),
            inv_sigma2: 1.0 / self.observation.sigma2(),
            y_full: &self.problem.y_full,
            z: &self.state.z,
            field: &self.field,
        }
    }

    pub fn inner_pls(&mut self) -> Result<PlsReport> {
        let mut u = self.state.u_star.clone();
        let rep = minimize(&self.pls_objective(), &mut u, self.config.budgets.pls_iters)
            .map_err(|e| e.at("pls"))?;
        self.set_u(u)?;
        let phi = self.phi_inner();
        self.push(
            Stage::Pls,
            phi,
            Some(rep.grad_norm),
            Some(rep.iterations),
            None,
        );
        Ok(rep)
    }

    /// Exact `Q(delta | y)` given the current penalties; no-op for factorial
    /// models.
    pub fn update_q_delta(&mut self) -> Result<()> {
        let Some(params) = self.state.hypers.tree.as_ref() else {
            return Ok(());
        };
        let n_scal = self.problem.layout.n_scaling();
        let evidence: Vec<[f64; 2]> = (n_scal..self.field.len())
            .map(|j| {
                let p = self.state.p(j);
                let (v0, v1) = self.field[j].state_values(p);
                [-0.5 * v0, -0.5 * v1]
            })
            .collect();
        let m = bp_infer(&self.problem.topology, params, &evidence).map_err(|e| e.at("bp"))?;
        for (w, &q) in self.field[n_scal..].iter_mut().zip(&m.q1) {
            w.q = q;
        }
        self.state.marginals = Some(m);
        Ok(())
    }

    /// Per-level state weights and magnitudes: `(w, p)` for state `r`.
    fn level_data(&self, level: usize, r: usize) -> (Vec<f64>, Vec<f64>) {
        let range = self.problem.layout.level_range(level);
        let pair = self.state.hypers.level(level).n_states() == 2;
        let w = range
            .clone()
            .map(|j| {
                if !pair {
                    1.0
                } else {
                    let q = self.q1(j);
                    if r == 1 {
                        q
                    } else {
                        1.0 - q
                    }
                }
            })
            .collect();
        let p = range.map(|j| self.state.p(j)).collect();
        (w, p)
    }

    /// Closed-form updates of Laplace and Gaussian scales, the scaling-band
    /// precision and the tree CPTs. Student's t scales are left alone.
    pub fn update_hypers_closed_form(&mut self) -> Result<()> {
        let n_scal = self.problem.layout.n_scaling();
        let ps: Vec<f64> = (0..n_scal).map(|j| self.state.p(j)).collect();
        let gauss = Potential::gaussian(self.state.hypers.xi_scaling)?;
        if let Some(xi) = closed_form_scale(&gauss, &vec![1.0; n_scal], &ps) {
            self.state.hypers.xi_scaling = xi;
        }
        for l in 1..=self.config.levels {
            let prior = *self.state.hypers.level(l);
            for r in 0..prior.n_states() {
                let pot = prior.state(r);
                if let Potential::StudentT { .. } = pot {
                    continue;
                }
                let (w, p) = self.level_data(l, r);
                if let Some(v) = closed_form_scale(pot, &w, &p) {
                    self.state.hypers.levels[l - 1].set_state(r, pot.with_scale(v));
                }
            }
        }
        if let (Some(params), Some(m)) = (
            self.state.hypers.tree.as_ref(),
            self.state.marginals.as_ref(),
        ) {
            self.state.hypers.tree = Some(update_theta(&self.problem.topology, m, params));
        }
        self.rebuild_field()
    }

    /// Newton update of every Student's t scale on the true penalty.
    pub fn update_student_tau(&mut self) -> Result<()> {
        for l in 1..=self.config.levels {
            let prior = *self.state.hypers.level(l);
            for r in 0..prior.n_states() {
                let pot = prior.state(r);
                if let Potential::StudentT { .. } = pot {
                    let (w, p) = self.level_data(l, r);
                    let next = refit_scale(pot, &w, &p);
                    self.state.hypers.levels[l - 1]
                        .set_state(r, next.with_scale(clamp_hyper(next.scale())));
                }
            }
        }
        self.rebuild_field()
    }

    fn resolved_source(&self) -> VarianceSource {
        match self.config.variance_source {
            VarianceSource::Auto if self.observation.is_identity() => VarianceSource::Exact,
            VarianceSource::Auto => VarianceSource::PerturbAndMap,
            other => other,
        }
    }

    /// Refit `z` to the current Gaussian posterior variances (VB only), then
    /// the Student's t scales (when learning) and tangents.
    pub fn outer_refit(&mut self) -> Result<()> {
        let mut cg_residual = None;
        if self.config.estimator == Estimator::Vb {
            let bootstrap = self.outer == 0
                && self.config.variance_source == VarianceSource::Auto
                && !self.observation.is_identity();
            if bootstrap {
                self.state.z.fill(self.observation.sigma2());
            } else {
                let pi = self.effective_pi();
                let op = PrecisionOp::new(&self.observation, &self.problem.layout, &pi)?;
                self.state.z = match self.resolved_source() {
                    VarianceSource::PerturbAndMap => {
                        let b = &self.config.budgets;
                        let seed = derive_seed(self.config.seed, "outer", self.outer as u64);
                        let est = sample_variances(&op, b.pm_samples, b.pm_cg_iters, seed)
                            .map_err(|e| e.at("variances"))?;
                        cg_residual = Some(est.max_residual);
                        est.z
                    }
                    _ => exact_variances(&self.observation, &pi).map_err(|e| e.at("variances"))?,
                };
            }
        }
        if self.config.learn_hypers && self.config.model.uses_student() {
            self.update_student_tau()?;
        }
        self.refit_tangents()?;
        self.rebuild_field()?;
        let phi = self.phi_inner();
        self.push(Stage::Refit, phi, None, None, cg_residual);
        Ok(())
    }

    /// `sigma^-2 |y - X u*|^2 + sum_j w_j(p_j) + 2 D[Q || P]`.
    pub fn phi_inner(&self) -> f64 {
        let inv = 1.0 / self.observation.sigma2();
        let data: f64 = self
            .state
            .u_star
            .iter()
            .zip(&self.problem.y_full)
            .zip(self.observation.observed_flags())
            .map(|((u, y), &o)| if o { (u - y) * (u - y) } else { 0.0 })
            .sum();
        let pen: f64 = self
            .field
            .iter()
            .enumerate()
            .map(|(j, w)| w.eval(self.state.p(j)).0)
            .sum();
        let kl = match (&self.state.marginals, &self.state.hypers.tree) {
            (Some(m), Some(t)) => kl_divergence(&self.problem.topology, m, t),
            _ => 0.0,
        };
        inv * data + pen + 2.0 * kl
    }

    fn push(
        &mut self,
        stage: Stage,
        phi: f64,
        grad_norm: Option<f64>,
        pls_iters: Option<usize>,
        cg_residual: Option<f64>,
    ) {
        self.state.phi_trace.push(phi);
        self.trace.push(TraceEvent {
            outer: self.outer,
            round: self.round,
            stage,
            phi,
            grad_norm,
            pls_iters,
            cg_residual,
        });
    }

    /// One inner round: PLS, then `Q(delta | y)`, then hyperparameters.
    pub fn inner_round(&mut self) -> Result<f64> {
        self.inner_pls()?;
        if self.config.model.is_tree() {
            self.update_q_delta()?;
            let phi = self.phi_inner();
            self.push(Stage::Bp, phi, None, None, None);
        }
        if self.config.learn_hypers {
            self.update_hypers_closed_form()
                .map_err(|e| e.at("hyperparameters"))?;
            let phi = self.phi_inner();
            self.push(Stage::Hypers, phi, None, None, None);
        }
        let phi = self.phi_inner();
        if !phi.is_finite() {
            return Err(Error::NonFinite {
                stage: "bound",
                detail: format!("phi = {phi} at outer iteration {}", self.outer),
            });
        }
        Ok(phi)
    }

    /// One outer iteration: refit, then up to `inner_rounds` inner rounds
    /// with early exit on a small relative change of the bound.
    pub fn outer_iteration(&mut self) -> Result<f64> {
        self.outer_refit()?;
        let mut prev = self.phi_inner();
        for round in 0..self.config.budgets.inner_rounds {
            self.round = round;
            let phi = self.inner_round()?;
            let done = (prev - phi).abs() <= self.config.inner_tol * phi.abs();
            prev = phi;
            if done {
                break;
            }
        }
        self.outer += 1;
        self.round = 0;
        Ok(prev)
    }

    /// The same model with explicit dense matrices, for [`super::phi_dense`].
    pub fn dense_model(&self) -> Result<DenseModel> {
        let layout = &self.problem.layout;
        let n = layout.len();
        if n > DENSE_MAX {
            return Err(Error::TooLarge(n));
        }
        let mut b = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for k in 0..n {
            e[k] = 1.0;
            b.set_column(k, &DVector::from_vec(layout.forward_slice(&e)));
            e[k] = 0.0;
        }
        let observed: Vec<usize> = (0..n)
            .filter(|&i| self.observation.observed_flags()[i])
            .collect();
        let mut x = DMatrix::zeros(observed.len(), n);
        for (r, &i) in observed.iter().enumerate() {
            x[(r, i)] = 1.0;
        }
        let y = DVector::from_iterator(
            observed.len(),
            observed.iter().map(|&i| self.problem.y_full[i]),
        );
        let scal = Potential::gaussian(self.state.hypers.xi_scaling)?;
        let slots = (0..n)
            .map(|j| match self.prior_of(j) {
                None => Slot::Single(scal),
                Some(LevelPrior::Single(pot)) => Slot::Single(*pot),
                Some(LevelPrior::Pair { low, high }) => Slot::Node {
                    low: *low,
                    high: *high,
                },
            })
            .collect();
        let tree = self
            .state
            .hypers
            .tree
            .as_ref()
            .map(|t| (self.problem.topology.clone(), t.clone()));
        Ok(DenseModel {
            x,
            b,
            y,
            sigma2: self.observation.sigma2(),
            slots,
            tree,
        })
    }

    pub fn run(mut self) -> Result<RunResult> {
        let outer = match self.config.estimator {
            Estimator::Map => 1,
            Estimator::Vb => self.config.budgets.outer,
        };
        let mut phi_final = self.phi_inner();
        for _ in 0..outer {
            phi_final = self.outer_iteration()?;
        }
        let layout = &self.problem.layout;
        Ok(RunResult {
            u_star: Image::new(layout.height(), layout.width(), self.state.u_star)?,
            marginals: self.state.marginals,
            hypers: self.state.hypers,
            phi_trace: self.state.phi_trace,
            trace: self.trace,
            outer_iters: self.outer,
            phi_final,
        })
    }
}

/// Initialize hyperparameters from the data and run the engine.
pub fn run(problem: &Problem, config: &ModelConfig) -> Result<RunResult> {
    let hypers = init_hypers(problem, config).map_err(|e| e.at("initialization"))?;
    run_with(problem, config, hypers)
}

/// Run the engine from given hyperparameters.
pub fn run_with(problem: &Problem, config: &ModelConfig, hypers: Hypers) -> Result<RunResult> {
    Engine::new(problem, config.clone(), hypers)?.run()
}
