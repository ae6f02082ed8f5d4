use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// The four prior models: factorial or latent-tree, Laplace or Student's t.
///
/// `LapTree` pairs two Laplace potentials per level; `TTree` uses a Gaussian
/// for the low state and a Student's t for the high state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Model {
    LapFact,
    TFact,
    LapTree,
    TTree,
}

impl Model {
    pub const ALL: [Model; 4] = [Model::LapFact, Model::TFact, Model::LapTree, Model::TTree];

    pub fn is_tree(self) -> bool {
        matches!(self, Model::LapTree | Model::TTree)
    }

    pub fn uses_student(self) -> bool {
        matches!(self, Model::TFact | Model::TTree)
    }

    pub fn id(self) -> &'static str {
        match self {
            Model::LapFact => "lap-fact",
            Model::TFact => "t-fact",
            Model::LapTree => "lap-tree",
            Model::TTree => "t-tree",
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Model::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown model '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    /// Posterior mean under the variational approximation.
    Vb,
    /// Posterior mode.
    Map,
}

impl Estimator {
    pub fn id(self) -> &'static str {
        match self {
            Estimator::Vb => "vb",
            Estimator::Map => "map",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vb" => Ok(Estimator::Vb),
            "map" => Ok(Estimator::Map),
            _ => Err(Error::InvalidParameter(format!("unknown mode '{s}'"))),
        }
    }
}

/// How the outer loop obtains `z = Var_Q[s | y]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceSource {
    /// Exact formula for denoising, Perturb&MAP otherwise.
    #[default]
    Auto,
    Exact,
    PerturbAndMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budgets {
    pub outer: usize,
    pub inner_rounds: usize,
    pub pls_iters: usize,
    pub pm_samples: usize,
    pub pm_cg_iters: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            outer: 15,
            inner_rounds: 3,
            pls_iters: 150,
            pm_samples: 30,
            pm_cg_iters: 70,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub model: Model,
    pub estimator: Estimator,
    pub learn_hypers: bool,
    pub levels: usize,
    pub sigma2: f64,
    /// Student's t shape, fixed.
    pub nu: f64,
    pub budgets: Budgets,
    pub seed: u64,
    pub variance_source: VarianceSource,
    /// Uniform `z` used in MAP mode to keep penalties smooth.
    pub z_smooth: f64,
    /// EM sweeps of the tree hyperparameter initialization.
    pub init_em_iters: usize,
    /// Early exit of the inner loop on relative change of the bound.
    pub inner_tol: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model: Model::LapTree,
            estimator: Estimator::Vb,
            learn_hypers: true,
            levels: 8,
            sigma2: 0.01,
            nu: 2.1,
            budgets: Budgets::default(),
            seed: 0,
            variance_source: VarianceSource::Auto,
            z_smooth: 1e-6,
            init_em_iters: 5,
            inner_tol: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn new(model: Model, estimator: Estimator) -> Self {
        Self {
            model,
            estimator,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.budgets;
        if b.outer == 0
            || b.inner_rounds == 0
            || b.pls_iters == 0
            || b.pm_samples == 0
            || b.pm_cg_iters == 0
        {
            return Err(Error::InvalidParameter(
                "iteration budgets must be positive".into(),
            ));
        }
        if self.levels == 0 {
            return Err(Error::InvalidParameter("wavelet depth must be >= 1".into()));
        }
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma2 must be > 0, got {}",
                self.sigma2
            )));
        }
        if !(self.nu > 2.0) {
            return Err(Error::InvalidParameter(format!(
                "nu must be > 2, got {}",
                self.nu
            )));
        }
        if !(self.z_smooth > 0.0) {
            return Err(Error::InvalidParameter("z_smooth must be > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = ModelConfig::default();
        assert_eq!(c.budgets.outer, 15);
        assert_eq!(c.budgets.inner_rounds, 3);
        assert_eq!(c.budgets.pls_iters, 150);
        assert_eq!(c.budgets.pm_samples, 30);
        assert_eq!(c.budgets.pm_cg_iters, 70);
        assert_eq!(c.levels, 8);
        assert_eq!(c.nu, 2.1);
        c.validate().unwrap();
    }

    #[test]
    fn parse_ids() {
        for m in Model::ALL {
            assert_eq!(m.id().parse::<Model>().unwrap(), m);
        }
        assert!("lap".parse::<Model>().is_err());
        assert_eq!("map".parse::<Estimator>().unwrap(), Estimator::Map);
        let mut c = ModelConfig::default();
        c.budgets.outer = 0;
        assert!(c.validate().is_err());
    }
}
