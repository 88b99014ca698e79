//! Seeded multi-cell experiment sweeps: for each combination of sequence
//! length, initializer, and odometry setting, learn models over several
//! training sequences with random restarts, score them against the truth,
//! and compare odometry-on vs odometry-off cells with a Welch t-test.
//!
//! All randomness derives from the plan seed, cells are enumerated in
//! lexicographic order, and runs execute on a rayon pool but are written
//! out in a fixed order, so reruns produce byte-identical artifacts.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{OdoHmmError, Result};
use crate::eval::{extract_essential_map, sampled_kl};
use crate::init::{init_model_kmeans, init_model_random, init_model_tag_based, InitConfig};
use crate::io::{self, Lines};
use crate::model::{AugmentedHmm, ExperienceSequence};
use crate::reestimate::{learn, EmConfig};
use crate::sim::sample_experience;

const PLAN_MAGIC: &str = "ODOHMM-PLAN v1";

/// Initialization strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Initializer {
    KMeans,
    Random,
    Tag,
}

impl Initializer {
    pub fn name(self) -> &'static str {
        match self {
            Initializer::KMeans => "kmeans",
            Initializer::Random => "random",
            Initializer::Tag => "tag",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Initializer::KMeans),
            "random" => Ok(Initializer::Random),
            "tag" => Ok(Initializer::Tag),
            other => Err(OdoHmmError::Parse(format!("unknown initializer '{other}'"))),
        }
    }
}

/// A full sweep description; the cross product of `seq_lengths`,
/// `initializers`, and `odometry` settings forms the cell grid.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub name: String,
    pub spec_path: PathBuf,
    pub seq_lengths: Vec<usize>,
    /// Training sequences per cell.
    pub sequences: usize,
    pub initializers: Vec<Initializer>,
    /// Odometry settings to sweep (true = relation densities active).
    pub odometry: Vec<bool>,
    /// Random restarts per (cell, sequence).
    pub restarts: usize,
    pub seed: u64,
    pub kl_k: usize,
    pub kl_t: usize,
    pub epsilon: f64,
    pub max_iters: usize,
    pub output_dir: PathBuf,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.seq_lengths.is_empty()
            || self.initializers.is_empty()
            || self.odometry.is_empty()
        {
            return Err(OdoHmmError::Input("plan sweeps must be non-empty".into()));
        }
        if self.sequences == 0 || self.restarts == 0 || self.kl_k == 0 || self.kl_t == 0 {
            return Err(OdoHmmError::Input("plan counts must be at least 1".into()));
        }
        if self.seq_lengths.iter().any(|&t| t < 2) {
            return Err(OdoHmmError::Input("sequence lengths must be at least 2".into()));
        }
        Ok(())
    }
}

pub fn plan_to_string(plan: &ExperimentPlan) -> String {
    let mut out = format!("{PLAN_MAGIC}\n");
    out.push_str(&format!("name {}\n", plan.name));
    out.push_str(&format!("spec {}\n", plan.spec_path.display()));
    out.push_str("seq-lengths");
    for t in &plan.seq_lengths {
        out.push_str(&format!(" {t}"));
    }
    out.push('\n');
    out.push_str(&format!("sequences {}\n", plan.sequences));
    out.push_str("initializers");
    for i in &plan.initializers {
        out.push_str(&format!(" {}", i.name()));
    }
    out.push('\n');
    out.push_str("odometry");
    for &o in &plan.odometry {
        out.push_str(if o { " on" } else { " off" });
    }
    out.push('\n');
    out.push_str(&format!("restarts {}\n", plan.restarts));
    out.push_str(&format!("seed {}\n", plan.seed));
    out.push_str(&format!("kl-k {}\n", plan.kl_k));
    out.push_str(&format!("kl-t {}\n", plan.kl_t));
    out.push_str(&format!("epsilon {:e}\n", plan.epsilon));
    out.push_str(&format!("max-iters {}\n", plan.max_iters));
    out.push_str(&format!("output {}\n", plan.output_dir.display()));
    out
}

pub fn plan_from_str(text: &str) -> Result<ExperimentPlan> {
    let mut lines = Lines::new(text);
    lines.expect(PLAN_MAGIC)?;
    let name = lines.scalar_field("name")?.to_string();
    let spec_path = PathBuf::from(lines.scalar_field("spec")?);
    let seq_lengths = lines
        .field("seq-lengths")?
        .into_iter()
        .map(io::parse_usize)
        .collect::<Result<_>>()?;
    let sequences = io::parse_usize(lines.scalar_field("sequences")?)?;
    let initializers = lines
        .field("initializers")?
        .into_iter()
        .map(Initializer::parse)
        .collect::<Result<_>>()?;
    let odometry = lines
        .field("odometry")?
        .into_iter()
        .map(|t| match t {
            "on" => Ok(true),
            "off" => Ok(false),
            other => Err(OdoHmmError::Parse(format!("odometry must be on/off, found '{other}'"))),
        })
        .collect::<Result<_>>()?;
    let restarts = io::parse_usize(lines.scalar_field("restarts")?)?;
    let seed = io::parse_usize(lines.scalar_field("seed")?)? as u64;
    let kl_k = io::parse_usize(lines.scalar_field("kl-k")?)?;
    let kl_t = io::parse_usize(lines.scalar_field("kl-t")?)?;
    let epsilon = io::parse_f64(lines.scalar_field("epsilon")?)?;
    let max_iters = io::parse_usize(lines.scalar_field("max-iters")?)?;
    let output_dir = PathBuf::from(lines.scalar_field("output")?);
    let plan = ExperimentPlan {
        name,
        spec_path,
        seq_lengths,
        sequences,
        initializers,
        odometry,
        restarts,
        seed,
        kl_k,
        kl_t,
        epsilon,
        max_iters,
        output_dir,
    };
    plan.validate()?;
    Ok(plan)
}

pub fn read_plan(path: &Path) -> Result<ExperimentPlan> {
    plan_from_str(&std::fs::read_to_string(path)?)
}

/// One learning run: a (cell, training sequence, restart) triple.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub cell: String,
    pub seq_index: usize,
    pub restart: usize,
    pub d_nats: f64,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

/// Aggregated statistics for one cell.
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub cell: String,
    pub t_len: usize,
    pub initializer: Initializer,
    pub odometry: bool,
    pub runs: usize,
    pub failures: usize,
    pub mean_d: f64,
    pub sd_d: f64,
    pub mean_iters: f64,
    pub sd_iters: f64,
}

/// Welch comparison of an odometry-on cell against its odometry-off twin.
#[derive(Debug, Clone)]
pub struct TTestRow {
    pub t_len: usize,
    pub initializer: Initializer,
    /// Quantity compared: divergence or iteration count.
    pub quantity: &'static str,
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    /// One-sided p-value for "on < off".
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResults {
    pub runs: Vec<RunResult>,
    pub cells: Vec<CellSummary>,
    pub t_tests: Vec<TTestRow>,
    pub failures: usize,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Student t distribution via the regularized incomplete beta function
// ---------------------------------------------------------------------------

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, 9 coefficients.
    const COEFFS: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta I_x(a, b) via Lentz's continued fraction.
fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    // use the symmetry I_x(a,b) = 1 - I_{1-x}(b,a) where the fraction
    // converges fastest
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - incomplete_beta(b, a, 1.0 - x);
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() + ln_gamma(a + b)
        - ln_gamma(a)
        - ln_gamma(b);
    let tiny = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..300 {
        let m = m as f64;
        // even step
        let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        d = 1.0 + num * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + num / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        // odd step
        let num = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        d = 1.0 + num * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + num / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-14 {
            break;
        }
    }
    ln_front.exp() * h / a
}

/// P(T ≤ t) for Student's t with `nu` degrees of freedom.
pub fn student_t_cdf(t: f64, nu: f64) -> f64 {
    let x = nu / (nu + t * t);
    let tail = 0.5 * incomplete_beta(nu / 2.0, 0.5, x);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// One-sided Welch t-test for mean(a) < mean(b); returns (t, dof, p).
pub fn welch_t_test(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let va = sa * sa / na;
    let vb = sb * sb / nb;
    if va + vb == 0.0 {
        // constant samples: degenerate t, decided by the means alone
        let dof = na + nb - 2.0;
        return if ma == mb {
            (0.0, dof, 0.5)
        } else if ma < mb {
            (f64::NEG_INFINITY, dof, 0.0)
        } else {
            (f64::INFINITY, dof, 1.0)
        };
    }
    let t = (ma - mb) / (va + vb).sqrt();
    let dof = (va + vb).powi(2)
        / (va * va / (na - 1.0).max(1.0) + vb * vb / (nb - 1.0).max(1.0));
    let p = student_t_cdf(t, dof);
    (t, dof, p)
}

// ---------------------------------------------------------------------------
// Sweep execution
// ---------------------------------------------------------------------------

/// Deterministic seed derivation (splitmix64 over mixed indices).
pub fn derive_seed(base: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(b.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(c.wrapping_mul(0x94d049bb133111eb))
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
struct Cell {
    id: String,
    index: usize,
    t_len: usize,
    initializer: Initializer,
    odometry: bool,
}

fn enumerate_cells(plan: &ExperimentPlan) -> Vec<Cell> {
    let mut cells = Vec::new();
    let mut lengths = plan.seq_lengths.clone();
    lengths.sort_unstable();
    lengths.dedup();
    let mut inits = plan.initializers.clone();
    inits.sort_unstable();
    inits.dedup();
    let mut odos = plan.odometry.clone();
    odos.sort_unstable();
    odos.dedup();
    for &t_len in &lengths {
        for &initializer in &inits {
            for &odometry in &odos {
                cells.push(Cell {
                    id: format!(
                        "T{t_len:06}-init={}-odo={}",
                        initializer.name(),
                        if odometry { "on" } else { "off" }
                    ),
                    index: 0,
                    t_len,
                    initializer,
                    odometry,
                });
            }
        }
    }
    cells.sort_by(|a, b| a.id.cmp(&b.id));
    for (i, c) in cells.iter_mut().enumerate() {
        c.index = i;
    }
    cells
}

/// Tagging hyperparameters scaled to the environment's odometric noise:
/// bucket sigmas at 1.5x the largest relation sigma reachable with
/// non-negligible probability, so reading outliers stay inside the
/// new-state window instead of spawning spurious states.
pub fn tag_config_for(truth: &AugmentedHmm, seed: u64) -> InitConfig {
    let defaults = InitConfig::default();
    let mut sigma_xy: f64 = 0.1;
    let mut kappa_min = f64::INFINITY;
    for i in 0..truth.n_states {
        for j in 0..truth.n_states {
            if truth.transition[(i, j)] > 0.05 {
                let r = &truth.relation[i][j];
                sigma_xy = sigma_xy.max(r.sigma_x).max(r.sigma_y);
                kappa_min = kappa_min.min(r.kappa_theta);
            }
        }
    }
    let sigma_theta = (1.5 / kappa_min.sqrt()).max(defaults.bucket_sigma.2);
    InitConfig {
        bucket_sigma: (1.5 * sigma_xy, 1.5 * sigma_xy, sigma_theta),
        new_state_threshold: 4.0,
        seed,
        ..defaults
    }
}

fn init_for(
    initializer: Initializer,
    e: &ExperienceSequence,
    truth: &AugmentedHmm,
    seed: u64,
) -> Result<AugmentedHmm> {
    let config = match initializer {
        Initializer::Tag => tag_config_for(truth, seed),
        _ => InitConfig { seed, default_sigma: 4.0, default_kappa: 0.5, ..InitConfig::default() },
    };
    match initializer {
        Initializer::Tag => {
            init_model_tag_based(e, truth.n_states, truth.constraint_regime, &truth.obs_dims, &config)
        }
        Initializer::KMeans => {
            init_model_kmeans(e, truth.n_states, truth.constraint_regime, &truth.obs_dims, &config)
        }
        Initializer::Random => init_model_random(
            truth.n_states,
            &truth.obs_dims,
            e,
            truth.coordinate_regime,
            truth.constraint_regime,
            &config,
        ),
    }
}

fn run_one(
    plan: &ExperimentPlan,
    truth: &AugmentedHmm,
    cell: &Cell,
    seq_index: usize,
    restart: usize,
) -> RunResult {
    let mut result = RunResult {
        cell: cell.id.clone(),
        seq_index,
        restart,
        d_nats: f64::NAN,
        iterations: 0,
        converged: false,
        error: None,
    };
    let attempt = || -> Result<(f64, usize, bool, AugmentedHmm)> {
        // training data depends only on (seed, T, sequence index): shared
        // across initializers and odometry settings for paired comparisons
        let data_seed = derive_seed(plan.seed, 1, cell.t_len as u64, seq_index as u64);
        let (e, _) = sample_experience(truth, cell.t_len, data_seed)?;
        let init_seed = derive_seed(plan.seed, 2, cell.index as u64 * 1000 + seq_index as u64, restart as u64);
        let model0 = init_for(cell.initializer, &e, truth, init_seed)?;
        let mut config = EmConfig::new(truth.constraint_regime, truth.coordinate_regime);
        config.epsilon = plan.epsilon;
        config.max_iters = plan.max_iters;
        config.use_odometry = cell.odometry;
        config.seed = derive_seed(plan.seed, 3, cell.index as u64, (seq_index * 1000 + restart) as u64);
        let outcome = learn(&model0, &e, &config)?;
        let kl_seed = derive_seed(plan.seed, 4, cell.t_len as u64, 0);
        let report = sampled_kl(truth, &outcome.model, plan.kl_k, plan.kl_t, kl_seed)?;
        Ok((report.d_nats, outcome.iterations, outcome.converged, outcome.model))
    };
    match attempt() {
        Ok((d, iters, converged, _)) => {
            result.d_nats = d;
            result.iterations = iters;
            result.converged = converged;
        }
        Err(err) => result.error = Some(err.to_string()),
    }
    result
}

/// Execute the plan against an already-built ground-truth model. Returns
/// the per-run table, cell summaries, and paired t-tests; writes nothing.
pub fn run_experiment_with_model(
    plan: &ExperimentPlan,
    truth: &AugmentedHmm,
) -> Result<ExperimentResults> {
    plan.validate()?;
    let cells = enumerate_cells(plan);
    let jobs: Vec<(usize, usize, usize)> = cells
        .iter()
        .enumerate()
        .flat_map(|(ci, _)| {
            (0..plan.sequences)
                .flat_map(move |s| (0..plan.restarts).map(move |r| (ci, s, r)))
        })
        .collect();
    let mut runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(ci, s, r)| run_one(plan, truth, &cells[ci], s, r))
        .collect();
    runs.sort_by(|a, b| {
        (&a.cell, a.seq_index, a.restart).cmp(&(&b.cell, b.seq_index, b.restart))
    });

    let mut summaries = Vec::with_capacity(cells.len());
    for cell in &cells {
        let ok: Vec<&RunResult> = runs
            .iter()
            .filter(|r| r.cell == cell.id && r.error.is_none())
            .collect();
        let failures = runs
            .iter()
            .filter(|r| r.cell == cell.id && r.error.is_some())
            .count();
        let ds: Vec<f64> = ok.iter().map(|r| r.d_nats).collect();
        let iters: Vec<f64> = ok.iter().map(|r| r.iterations as f64).collect();
        let (mean_d, sd_d) = mean_sd(&ds);
        let (mean_iters, sd_iters) = mean_sd(&iters);
        summaries.push(CellSummary {
            cell: cell.id.clone(),
            t_len: cell.t_len,
            initializer: cell.initializer,
            odometry: cell.odometry,
            runs: ok.len(),
            failures,
            mean_d,
            sd_d,
            mean_iters,
            sd_iters,
        });
    }

    let mut t_tests = Vec::new();
    for on in cells.iter().filter(|c| c.odometry) {
        let Some(off) = cells
            .iter()
            .find(|c| !c.odometry && c.t_len == on.t_len && c.initializer == on.initializer)
        else {
            continue;
        };
        let collect = |cell: &Cell, f: fn(&RunResult) -> f64| -> Vec<f64> {
            runs.iter()
                .filter(|r| r.cell == cell.id && r.error.is_none())
                .map(f)
                .collect()
        };
        for (quantity, f) in [
            ("d_nats", (|r: &RunResult| r.d_nats) as fn(&RunResult) -> f64),
            ("iterations", |r: &RunResult| r.iterations as f64),
        ] {
            let a = collect(on, f);
            let b = collect(off, f);
            if a.len() < 2 || b.len() < 2 {
                continue;
            }
            let (t, dof, p) = welch_t_test(&a, &b);
            t_tests.push(TTestRow {
                t_len: on.t_len,
                initializer: on.initializer,
                quantity,
                t_statistic: t,
                degrees_of_freedom: dof,
                p_value: p,
            });
        }
    }

    let failures = runs.iter().filter(|r| r.error.is_some()).count();
    Ok(ExperimentResults { runs, cells: summaries, t_tests, failures })
}

pub fn runs_to_csv(runs: &[RunResult]) -> String {
    let mut out = String::from("cell,seq,restart,d_nats,iterations,converged,error\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{:.17e},{},{},{}\n",
            r.cell,
            r.seq_index,
            r.restart,
            r.d_nats,
            r.iterations,
            r.converged,
            r.error.as_deref().unwrap_or("")
        ));
    }
    out
}

pub fn cells_to_csv(cells: &[CellSummary]) -> String {
    let mut out =
        String::from("cell,runs,failures,mean_d_nats,sd_d_nats,mean_iterations,sd_iterations\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            c.cell, c.runs, c.failures, c.mean_d, c.sd_d, c.mean_iters, c.sd_iters
        ));
    }
    out
}

pub fn t_tests_to_csv(rows: &[TTestRow]) -> String {
    let mut out = String::from("t_len,initializer,quantity,t_statistic,dof,p_value\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.17e},{:.17e},{:.17e}\n",
            r.t_len,
            r.initializer.name(),
            r.quantity,
            r.t_statistic,
            r.degrees_of_freedom,
            r.p_value
        ));
    }
    out
}

/// Execute a plan end to end: read the environment spec, build the truth
/// model, run every cell, and write results.csv / cells.csv / ttests.csv
/// plus the truth model's essential map into the output directory.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentResults> {
    let spec = io::read_spec(&plan.spec_path)?;
    let truth = crate::sim::build_environment(&spec, derive_seed(plan.seed, 0, 0, 0))?;
    let results = run_experiment_with_model(plan, &truth)?;
    std::fs::create_dir_all(&plan.output_dir)?;
    std::fs::write(plan.output_dir.join("results.csv"), runs_to_csv(&results.runs))?;
    std::fs::write(plan.output_dir.join("cells.csv"), cells_to_csv(&results.cells))?;
    std::fs::write(plan.output_dir.join("ttests.csv"), t_tests_to_csv(&results.t_tests))?;
    let map = extract_essential_map(&truth, 0.2);
    std::fs::write(plan.output_dir.join("truth-map.dot"), map.to_dot())?;
    std::fs::write(plan.output_dir.join("truth-map.svg"), map.to_svg())?;
    io::write_model(&truth, &plan.output_dir.join("truth.model"))?;
    Ok(results)
}
