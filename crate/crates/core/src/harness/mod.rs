//! Experiment driver: observation synthesis, PSNR and the method matrix.

mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{
    init_hypers, run_with, Budgets, Estimator, Model, ModelConfig, Problem, RunResult,
};
use crate::linear::ObservationOp;
use crate::rng::RngStream;
use crate::wavelet::{csv_err, Image};

pub use io::{load_f32, load_image, save_f32, save_level_heatmaps, save_pgm, to_bytes};

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(1 / MSE)` with the estimate clipped to `[0, 1]`; `+inf` when
/// the images agree exactly.
pub fn psnr(estimate: &Image, truth: &Image) -> Result<f64> {
    if (estimate.height, estimate.width) != (truth.height, truth.width) {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: estimate.len(),
        });
    }
    let mse = estimate
        .pixels
        .iter()
        .zip(&truth.pixels)
        .map(|(e, t)| (e.clamp(0.0, 1.0) - t).powi(2))
        .sum::<f64>()
        / truth.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Denoise,
    Inpaint,
}

impl Task {
    pub fn id(self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Inpaint => "inpaint",
        }
    }

    /// Likelihood noise variance used when none is given.
    pub fn default_sigma2(self) -> f64 {
        match self {
            Task::Denoise => 0.01,
            Task::Inpaint => 1e-5,
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise" => Ok(Task::Denoise),
            "inpaint" => Ok(Task::Inpaint),
            _ => Err(Error::InvalidParameter(format!("unknown task '{s}'"))),
        }
    }
}

/// Observed data for one image: denoising adds `N(0, sigma2)` noise from
/// stream `("noise", image_index)`; inpainting keeps `ceil((1 - frac) n)`
/// pixels drawn from stream `("mask", 0)`, so every image of a run of the
/// same size shares the mask.
pub fn synthesize_observation(
    image: &Image,
    task: Task,
    sigma2: f64,
    mask_frac: f64,
    seed: u64,
    image_index: u64,
) -> Result<(Vec<f64>, ObservationOp)> {
    let n = image.len();
    match task {
        Task::Denoise => {
            if !(sigma2 >= 0.0 && sigma2.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "sigma2 must be >= 0, got {sigma2}"
                )));
            }
            let mut rng = RngStream::new(seed, "noise", image_index).rng();
            let sd = sigma2.sqrt();
            let y = image
                .pixels
                .iter()
                .map(|u| u + sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            // a noiseless observation still needs a positive likelihood variance
            let op = ObservationOp::identity(n, if sigma2 > 0.0 { sigma2 } else { 1e-8 })?;
            Ok((y, op))
        }
        Task::Inpaint => {
            if !(0.0..1.0).contains(&mask_frac) {
                return Err(Error::InvalidParameter(format!(
                    "mask fraction must be in [0, 1), got {mask_frac}"
                )));
            }
            let keep = ((1.0 - mask_frac) * n as f64).ceil() as usize;
            let mut rng = RngStream::new(seed, "mask", 0).rng();
            let mut kept = sample(&mut rng, n, keep.min(n)).into_vec();
            kept.sort_unstable();
            let y = kept.iter().map(|&i| image.pixels[i]).collect();
            Ok((y, ObservationOp::mask(n, kept, sigma2)?))
        }
    }
}

/// One of the eight estimator/prior combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Method {
    pub model: Model,
    pub estimator: Estimator,
}

impl Method {
    pub fn all() -> Vec<Method> {
        [Estimator::Vb, Estimator::Map]
            .into_iter()
            .flat_map(|estimator| {
                Model::ALL
                    .into_iter()
                    .map(move |model| Method { model, estimator })
            })
            .collect()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.estimator, self.model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub task: Task,
    pub sigma2: f64,
    pub mask_frac: f64,
    pub methods: Vec<Method>,
    pub learn_hypers: bool,
    pub seed: u64,
    pub images: Vec<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub levels: usize,
    pub budgets: Budgets,
    /// Also write `.f32` dumps, q1 heatmaps and coefficient CSVs.
    pub dumps: bool,
}

impl ExperimentSpec {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            sigma2: task.default_sigma2(),
            mask_frac: 0.75,
            methods: vec![Method {
                model: Model::LapTree,
                estimator: Estimator::Vb,
            }],
            learn_hypers: false,
            seed: 0,
            images: Vec::new(),
            out_dir: None,
            levels: 8,
            budgets: Budgets::default(),
            dumps: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma2 must be > 0, got {}",
                self.sigma2
            )));
        }
        if !(0.0..1.0).contains(&self.mask_frac) {
            return Err(Error::InvalidParameter(format!(
                "mask fraction must be in [0, 1), got {}",
                self.mask_frac
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, method: Method) -> ModelConfig {
        ModelConfig {
            model: method.model,
            estimator: method.estimator,
            learn_hypers: self.learn_hypers,
            levels: self.levels,
            sigma2: self.sigma2,
            budgets: self.budgets,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    /// `key=value` lines of the effective configuration.
    pub fn echo(&self) -> String {
        let methods: Vec<String> = self.methods.iter().map(|m| m.to_string()).collect();
        let images: Vec<String> = self
            .images
            .iter()
            .map(|p| p.display().to_string())
            .collect();
        let b = &self.budgets;
        let lines = [
            ("task", self.task.id().to_string()),
            ("sigma2", self.sigma2.to_string()),
            ("mask_frac", self.mask_frac.to_string()),
            ("methods", methods.join(",")),
            ("learn_hypers", self.learn_hypers.to_string()),
            ("seed", self.seed.to_string()),
            ("levels", self.levels.to_string()),
            ("outer", b.outer.to_string()),
            ("inner_rounds", b.inner_rounds.to_string()),
            ("pls_iters", b.pls_iters.to_string()),
            ("pm_samples", b.pm_samples.to_string()),
            ("pm_cg_iters", b.pm_cg_iters.to_string()),
            ("images", images.join(",")),
        ];
        lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Parse a plain `key=value` file; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidParameter(format!("config line {}: expected key=value", no + 1))
        })?;
        out.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub image: String,
    pub method: Model,
    pub mode: Estimator,
    pub learned: bool,
    /// Capped at [`PSNR_CAP`].
    pub psnr_db: f64,
    pub phi_final: f64,
    pub outer_iters: usize,
    pub wall_s: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub image: String,
    pub method: Option<Method>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub learned: bool,
    pub images: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
}

impl SummaryRow {
    /// `mean ± std` with one decimal.
    pub fn formatted(&self) -> String {
        format!("{:.1} ± {:.1}", self.psnr_mean, self.psnr_std)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub failures: Vec<Failure>,
    pub summary: Vec<SummaryRow>,
}

pub const CSV_HEADER: [&str; 9] = [
    "image",
    "method",
    "mode",
    "learned",
    "psnr_db",
    "phi_final",
    "outer_iters",
    "wall_s",
    "seed",
];

impl Report {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.image.clone(),
                r.method.id().to_string(),
                r.mode.id().to_string(),
                r.learned.to_string(),
                format!("{:.4}", r.psnr_db),
                format!("{:.6e}", r.phi_final),
                r.outer_iters.to_string(),
                format!("{:.3}", r.wall_s),
                r.seed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "method",
            "mode",
            "learned",
            "images",
            "psnr_mean",
            "psnr_std",
            "psnr",
        ])
        .map_err(csv_err)?;
        for s in &self.summary {
            w.write_record([
                s.method.model.id().to_string(),
                s.method.estimator.id().to_string(),
                s.learned.to_string(),
                s.images.to_string(),
                format!("{:.4}", s.psnr_mean),
                format!("{:.4}", s.psnr_std),
                s.formatted(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    fn summarize(&mut self, methods: &[Method], learned: bool) {
        self.summary = methods
            .iter()
            .filter_map(|&m| {
                let v: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.method == m.model && r.mode == m.estimator)
                    .map(|r| r.psnr_db)
                    .collect();
                if v.is_empty() {
                    return None;
                }
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let var = if v.len() > 1 {
                    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
                } else {
                    0.0
                };
                Some(SummaryRow {
                    method: m,
                    learned,
                    images: v.len(),
                    psnr_mean: mean,
                    psnr_std: var.sqrt(),
                })
            })
            .collect();
    }
}

fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Ground truth and synthesized data for one image.
pub struct Prepared {
    pub id: String,
    pub truth: Image,
    pub problem: Problem,
}

pub fn prepare(spec: &ExperimentSpec, path: &Path, index: usize) -> Result<Prepared> {
    let truth = load_image(path, Some(spec.levels))?;
    let (y, op) = synthesize_observation(
        &truth,
        spec.task,
        spec.sigma2,
        spec.mask_frac,
        spec.seed,
        index as u64,
    )?;
    let problem = Problem::new(truth.height, truth.width, spec.levels, op, y)?;
    Ok(Prepared {
        id: image_id(path),
        truth,
        problem,
    })
}

/// Run one method on a prepared image.
pub fn run_method(
    spec: &ExperimentSpec,
    prepared: &Prepared,
    method: Method,
) -> Result<(ReportRow, RunResult)> {
    let config = spec.model_config(method);
    let start = Instant::now();
    let hypers = init_hypers(&prepared.problem, &config).map_err(|e| e.at("initialization"))?;
    let result = run_with(&prepared.problem, &config, hypers)?;
    let wall_s = start.elapsed().as_secs_f64();
    let row = ReportRow {
        image: prepared.id.clone(),
        method: method.model,
        mode: method.estimator,
        learned: spec.learn_hypers,
        psnr_db: psnr(&result.u_star, &prepared.truth)?.min(PSNR_CAP),
        phi_final: result.phi_final,
        outer_iters: result.outer_iters,
        wall_s,
        seed: spec.seed,
    };
    Ok((row, result))
}

fn write_artifacts(
    spec: &ExperimentSpec,
    dir: &Path,
    prepared: &Prepared,
    method: Method,
    result: &RunResult,
) -> Result<()> {
    let learned = if spec.learn_hypers { "learned" } else { "init" };
    let stem = dir.join(format!("{}_{}_{}", prepared.id, method, learned));
    let with_ext = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    save_pgm(&result.u_star, &with_ext(".pgm"))?;
    if !spec.dumps {
        return Ok(());
    }
    save_f32(&result.u_star, &with_ext(".f32"))?;
    let layout = prepared.problem.layout();
    let coeffs = layout.forward(&result.u_star)?;
    layout.write_coefficients_csv(&coeffs, fs::File::create(with_ext("_coeffs.csv"))?)?;
    if let Some(m) = &result.marginals {
        save_level_heatmaps(layout, &m.q1, &with_ext("_q1"))?;
    }
    write_trace(result, fs::File::create(with_ext("_trace.csv"))?)
}

/// Per-step engine trace: `outer,round,stage,phi,grad_norm,pls_iters,cg_residual`.
pub fn write_trace<W: std::io::Write>(result: &RunResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "outer",
        "round",
        "stage",
        "phi",
        "grad_norm",
        "pls_iters",
        "cg_residual",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6e}")).unwrap_or_default();
    for t in &result.trace {
        w.write_record([
            t.outer.to_string(),
            t.round.to_string(),
            t.stage.as_str().to_string(),
            format!("{:.10e}", t.phi),
            opt(t.grad_norm),
            t.pls_iters.map(|v| v.to_string()).unwrap_or_default(),
            opt(t.cg_residual),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_observed(spec: &ExperimentSpec, dir: &Path, prepared: &Prepared) -> Result<()> {
    let filled = Image::new(
        prepared.truth.height,
        prepared.truth.width,
        prepared.problem.y_full().to_vec(),
    )?;
    save_pgm(
        &filled,
        &dir.join(format!("{}_{}_observed.pgm", prepared.id, spec.task.id())),
    )
}

/// Run every (image, method) pair. Failures are isolated per pair and
/// reported; rows are ordered by image, then method, regardless of the order
/// of completion.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report> {
    spec.validate()?;
    if let Some(dir) = &spec.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), spec.echo())?;
    }
    let prepared: Vec<std::result::Result<Prepared, Failure>> = spec
        .images
        .iter()
        .enumerate()
        .map(|(i, path)| {
            prepare(spec, path, i).map_err(|e| Failure {
                image: image_id(path),
                method: None,
                error: e.to_string(),
            })
        })
        .collect();
    let mut report = Report::default();
    let mut jobs = Vec::new();
    for p in &prepared {
        match p {
            Ok(p) => {
                if let Some(dir) = &spec.out_dir {
                    write_observed(spec, dir, p)?;
                }
                jobs.extend(spec.methods.iter().map(move |&m| (p, m)));
            }
            Err(f) => report.failures.push(f.clone()),
        }
    }
    let outcomes: Vec<std::result::Result<ReportRow, Failure>> = jobs
        .par_iter()
        .map(|&(p, method)| {
            let fail = |e: Error| Failure {
                image: p.id.clone(),
                method: Some(method),
                error: e.to_string(),
            };
            let (row, result) = run_method(spec, p, method).map_err(fail)?;
            if let Some(dir) = &spec.out_dir {
                write_artifacts(spec, dir, p, method, &result).map_err(fail)?;
            }
            Ok(row)
        })
        .collect();
    for o in outcomes {
        match o {
            Ok(r) => report.rows.push(r),
            Err(f) => report.failures.push(f),
        }
    }
    report.summarize(&spec.methods, spec.learn_hypers);
    if let Some(dir) = &spec.out_dir {
        report.write_csv(fs::File::create(dir.join("report.csv"))?)?;
        report.write_summary_csv(fs::File::create(dir.join("summary.csv"))?)?;
        if !report.failures.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("failures.csv")).map_err(csv_err)?;
            w.write_record(["image", "method", "error"])
                .map_err(csv_err)?;
            for f in &report.failures {
                let m = f.method.map(|m| m.to_string()).unwrap_or_default();
                w.write_record([f.image.as_str(), &m, &f.error])
                    .map_err(csv_err)?;
            }
            w.flush()?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f64) -> Image {
        Image::filled(4, 4, v)
    }

    #[test]
    fn psnr_hand_values() {
        let truth = Image::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let shifted = Image::new(2, 2, vec![0.2, 0.3, 0.4, 0.5]).unwrap();
        assert!((psnr(&shifted, &truth).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&truth, &truth).unwrap().is_infinite());
        let p = psnr(&flat(0.5), &flat(1.0)).unwrap();
        assert!((p - 6.0206).abs() < 1e-4);
        // clipping
        assert!(psnr(&flat(1.7), &flat(1.0)).unwrap().is_infinite());
    }

    #[test]
    fn observation_synthesis() {
        let img = Image::new(
            256,
            256,
            (0..65536).map(|i| (i % 256) as f64 / 255.0).collect(),
        )
        .unwrap();
        let (y, op) = synthesize_observation(&img, Task::Inpaint, 1e-5, 0.75, 3, 0).unwrap();
        assert_eq!(op.m(), 16384);
        assert_eq!(y.len(), 16384);
        let (y2, op2) = synthesize_observation(&img, Task::Inpaint, 1e-5, 0.75, 3, 7).unwrap();
        assert_eq!(op.observed_flags(), op2.observed_flags());
        assert_eq!(y, y2);
        let (clean, _) = synthesize_observation(&img, Task::Denoise, 0.0, 0.0, 1, 0).unwrap();
        assert_eq!(clean, img.pixels);
        let (a, _) = synthesize_observation(&img, Task::Denoise, 0.01, 0.0, 1, 0).unwrap();
        let (b, _) = synthesize_observation(&img, Task::Denoise, 0.01, 0.0, 1, 0).unwrap();
        let (c, _) = synthesize_observation(&img, Task::Denoise, 0.01, 0.0, 1, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let var = a
            .iter()
            .zip(&img.pixels)
            .map(|(a, u)| (a - u).powi(2))
            .sum::<f64>()
            / 65536.0;
        assert!((var - 0.01).abs() < 5e-4);
    }

    #[test]
    fn config_parsing_and_methods() {
        let cfg = parse_config("# c\nsigma2 = 0.02\npls-iters=10 # x\n\n").unwrap();
        assert_eq!(cfg["sigma2"], "0.02");
        assert_eq!(cfg["pls_iters"], "10");
        assert!(parse_config("nonsense").is_err());
        assert_eq!(Method::all().len(), 8);
        assert_eq!(
            Method {
                model: Model::TTree,
                estimator: Estimator::Map
            }
            .to_string(),
            "map-t-tree"
        );
    }

    #[test]
    fn empty_method_list_gives_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ExperimentSpec::new(Task::Denoise);
        spec.methods.clear();
        spec.out_dir = Some(dir.path().to_path_buf());
        let report = run_experiment(&spec).unwrap();
        assert!(report.rows.is_empty());
        let text = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(
            text,
            "image,method,mode,learned,psnr_db,phi_final,outer_iters,wall_s,seed\n"
        );
        assert!(dir.path().join("config.txt").exists());
    }
}
