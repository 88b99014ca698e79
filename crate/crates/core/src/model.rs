//! The augmented HMM data model: the tuple ⟨S, O, A, B, R, π⟩ with a
//! per-pair odometric relation matrix and heading parameters, plus the
//! validity rules and the two density building blocks used by inference.

use ndarray::Array2;
use std::f64::consts::PI;

use crate::circular::{log_bessel_i0, wrap_angle, VonMisesParams, KAPPA_MAX, KAPPA_MIN};
use crate::error::{OdoHmmError, Result};

/// Floor on positional standard deviations (meters).
pub const SIGMA_FLOOR: f64 = 1e-3;
/// Self-transition positional spread (meters). The odometric change over a
/// self transition is zero-mean with a small variance.
pub const SELF_SIGMA: f64 = 0.2;
/// Self-transition heading concentration.
pub const SELF_KAPPA: f64 = 50.0;
/// Floor applied to A and B entries after each reestimation, then renormalized.
pub const PROB_FLOOR: f64 = 1e-6;

/// Which frame odometric readings are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordinateRegime {
    /// One global frame; readings realigned at every turn (perpendicularity).
    Global,
    /// Each state carries its own frame anchored at the state, Y along the
    /// robot's heading there.
    StateRelative,
}

/// Which geometric constraints the relation means must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintRegime {
    /// μ(a,b) = −μ(b,a) only.
    AntiSymmetric,
    /// Full directed metric: anti-symmetry plus μ(a,c) = μ(a,b) + μ(b,c).
    Additive,
}

/// One odometry reading: displacement along x, y (meters) and change in
/// heading (radians).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OdoReading {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl OdoReading {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta) }
    }
}

/// Rotate a planar point by `heading_change` radians.
pub fn transform_relative(p: (f64, f64), heading_change: f64) -> (f64, f64) {
    let (s, c) = heading_change.sin_cos();
    (p.0 * c - p.1 * s, p.0 * s + p.1 * c)
}

/// Odometric parameters for one ordered state pair: mean/spread of the x and
/// y displacements, mean/concentration of the heading change.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationEntry {
    pub mu_x: f64,
    pub sigma_x: f64,
    pub mu_y: f64,
    pub sigma_y: f64,
    pub mu_theta: f64,
    pub kappa_theta: f64,
}

impl RelationEntry {
    pub fn new(mu_x: f64, sigma_x: f64, mu_y: f64, sigma_y: f64, mu_theta: f64, kappa_theta: f64) -> Self {
        Self {
            mu_x,
            sigma_x: sigma_x.max(SIGMA_FLOOR),
            mu_y,
            sigma_y: sigma_y.max(SIGMA_FLOOR),
            mu_theta: wrap_angle(mu_theta),
            kappa_theta: kappa_theta.clamp(KAPPA_MIN, KAPPA_MAX),
        }
    }

    /// The zero-displacement entry used on the diagonal.
    pub fn self_transition() -> Self {
        Self::new(0.0, SELF_SIGMA, 0.0, SELF_SIGMA, 0.0, SELF_KAPPA)
    }

    pub fn log_density(&self, r: &OdoReading) -> f64 {
        let log_norm = |v: f64, mu: f64, sigma: f64| {
            let z = (v - mu) / sigma;
            -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * PI).ln()
        };
        let log_i0 = log_bessel_i0(self.kappa_theta).expect("kappa clamped on construction");
        log_norm(r.x, self.mu_x, self.sigma_x)
            + log_norm(r.y, self.mu_y, self.sigma_y)
            + self.kappa_theta * (r.theta - self.mu_theta).cos()
            - (2.0 * PI).ln()
            - log_i0
    }

    pub fn heading(&self) -> VonMisesParams {
        VonMisesParams::new(self.mu_theta, self.kappa_theta)
    }
}

/// The augmented hidden Markov model ⟨S, O, A, B, R, π⟩.
///
/// `transition` is the N×N row-stochastic matrix A; `observation` holds one
/// stochastic N×|Oᵢ| matrix per observation-vector component; `relation` is
/// the N×N odometric relation matrix R; π has all mass on `initial_state`.
#[derive(Debug, Clone)]
pub struct AugmentedHmm {
    pub n_states: usize,
    /// Alphabet size of each observation-vector component.
    pub obs_dims: Vec<usize>,
    pub transition: Array2<f64>,
    pub observation: Vec<Array2<f64>>,
    pub relation: Vec<Vec<RelationEntry>>,
    pub initial_state: usize,
    pub coordinate_regime: CoordinateRegime,
    pub constraint_regime: ConstraintRegime,
}

/// Observation vector at one time step: one symbol id per component.
pub type ObsVector = Vec<usize>;

/// The training input: per-step pairs of odometry reading and observation
/// vector. `odo[0]` is unused (there is no transition into the first step).
#[derive(Debug, Clone)]
pub struct ExperienceSequence {
    pub odo: Vec<OdoReading>,
    pub obs: Vec<ObsVector>,
    pub coordinate_regime: CoordinateRegime,
    /// Ground truth from simulation; never visible to the learner.
    pub true_states: Option<Vec<usize>>,
}

impl ExperienceSequence {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn validate_against(&self, obs_dims: &[usize]) -> Result<()> {
        if self.obs.len() < 2 {
            return Err(OdoHmmError::Structural("sequence length must be >= 2".into()));
        }
        if self.odo.len() != self.obs.len() {
            return Err(OdoHmmError::Structural("odo/obs length mismatch".into()));
        }
        for (t, v) in self.obs.iter().enumerate() {
            if v.len() != obs_dims.len() {
                return Err(OdoHmmError::Input(format!(
                    "observation vector at t={t} has {} components, expected {}",
                    v.len(),
                    obs_dims.len()
                )));
            }
            for (i, &sym) in v.iter().enumerate() {
                if sym >= obs_dims[i] {
                    return Err(OdoHmmError::Input(format!(
                        "symbol {sym} out of range for component {i} at t={t}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One invariant violation found by `validate_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub rule: &'static str,
    pub location: String,
    pub magnitude: f64,
}

/// Everything `validate_model` found; empty iff the model is valid.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, rule: &'static str, location: String, magnitude: f64) {
        self.violations.push(Violation { rule, location, magnitude });
    }
}

const STOCHASTIC_TOL: f64 = 1e-9;
const GLOBAL_TOL: f64 = 1e-9;
const THETA_TOL: f64 = 1e-6;
const RELATIVE_TOL: f64 = 1e-6;

impl AugmentedHmm {
    /// Structural consistency: shapes must match `n_states` and `obs_dims`.
    pub fn check_structure(&self) -> Result<()> {
        let n = self.n_states;
        if self.transition.dim() != (n, n) {
            return Err(OdoHmmError::Structural(format!(
                "transition matrix is {:?}, expected ({n}, {n})",
                self.transition.dim()
            )));
        }
        if self.observation.len() != self.obs_dims.len() {
            return Err(OdoHmmError::Structural(format!(
                "{} observation matrices for {} components",
                self.observation.len(),
                self.obs_dims.len()
            )));
        }
        for (i, b) in self.observation.iter().enumerate() {
            if b.dim() != (n, self.obs_dims[i]) {
                return Err(OdoHmmError::Structural(format!(
                    "observation matrix {i} is {:?}, expected ({n}, {})",
                    b.dim(),
                    self.obs_dims[i]
                )));
            }
        }
        if self.relation.len() != n || self.relation.iter().any(|row| row.len() != n) {
            return Err(OdoHmmError::Structural("relation matrix shape mismatch".into()));
        }
        if self.initial_state >= n {
            return Err(OdoHmmError::Structural(format!(
                "initial state {} out of range",
                self.initial_state
            )));
        }
        Ok(())
    }

    /// Probability of observing vector `v` in `state`: the product of the
    /// per-component B entries (components are conditionally independent
    /// given the state).
    pub fn observation_probability(&self, state: usize, v: &[usize]) -> Result<f64> {
        if state >= self.n_states {
            return Err(OdoHmmError::Input(format!("state {state} out of range")));
        }
        if v.len() != self.obs_dims.len() {
            return Err(OdoHmmError::Input(format!(
                "observation vector has {} components, expected {}",
                v.len(),
                self.obs_dims.len()
            )));
        }
        let mut p = 1.0;
        for (i, &sym) in v.iter().enumerate() {
            if sym >= self.obs_dims[i] {
                return Err(OdoHmmError::Input(format!(
                    "symbol {sym} out of range for component {i}"
                )));
            }
            p *= self.observation[i][(state, sym)];
        }
        Ok(p)
    }

    /// Density of reading `r` under the relation distribution for the
    /// transition from state `i` to state `j`. A density, not a
    /// probability; may exceed 1.
    pub fn relation_density(&self, i: usize, j: usize, r: &OdoReading) -> Result<f64> {
        if i >= self.n_states || j >= self.n_states {
            return Err(OdoHmmError::Input(format!("state pair ({i}, {j}) out of range")));
        }
        Ok(self.relation[i][j].log_density(r).exp())
    }

    fn mu_xy(&self, i: usize, j: usize) -> (f64, f64) {
        (self.relation[i][j].mu_x, self.relation[i][j].mu_y)
    }

    /// Check every invariant, collecting one entry per violation.
    ///
    /// Pure and idempotent; returns an error only on structural
    /// (shape-level) inconsistency.
    pub fn validate(&self) -> Result<ValidationReport> {
        self.check_structure()?;
        let n = self.n_states;
        let mut report = ValidationReport::default();

        for i in 0..n {
            let row_sum: f64 = self.transition.row(i).sum();
            if (row_sum - 1.0).abs() > STOCHASTIC_TOL {
                report.push("A-row-stochastic", format!("A[{i}]"), (row_sum - 1.0).abs());
            }
            for j in 0..n {
                if self.transition[(i, j)] < 0.0 {
                    report.push("A-nonnegative", format!("A[{i}][{j}]"), -self.transition[(i, j)]);
                }
            }
        }
        for (c, b) in self.observation.iter().enumerate() {
            for j in 0..n {
                let row_sum: f64 = b.row(j).sum();
                if (row_sum - 1.0).abs() > STOCHASTIC_TOL {
                    report.push("B-row-stochastic", format!("B[{c}][{j}]"), (row_sum - 1.0).abs());
                }
                for k in 0..self.obs_dims[c] {
                    if b[(j, k)] < 0.0 {
                        report.push("B-nonnegative", format!("B[{c}][{j}][{k}]"), -b[(j, k)]);
                    }
                }
            }
        }

        for i in 0..n {
            for j in 0..n {
                let e = &self.relation[i][j];
                if e.sigma_x < SIGMA_FLOOR {
                    report.push("sigma-floor", format!("R[{i}][{j}].sigma_x"), SIGMA_FLOOR - e.sigma_x);
                }
                if e.sigma_y < SIGMA_FLOOR {
                    report.push("sigma-floor", format!("R[{i}][{j}].sigma_y"), SIGMA_FLOOR - e.sigma_y);
                }
                if e.kappa_theta < KAPPA_MIN || e.kappa_theta > KAPPA_MAX {
                    report.push("kappa-range", format!("R[{i}][{j}].kappa_theta"), e.kappa_theta);
                }
            }
            let d = &self.relation[i][i];
            for (field, v) in [("mu_x", d.mu_x), ("mu_y", d.mu_y), ("mu_theta", d.mu_theta)] {
                if v.abs() > GLOBAL_TOL {
                    report.push("diagonal-zero", format!("R[{i}][{i}].{field}"), v.abs());
                }
            }
        }

        match self.coordinate_regime {
            CoordinateRegime::Global => self.validate_global(&mut report),
            CoordinateRegime::StateRelative => self.validate_relative(&mut report),
        }
        Ok(report)
    }

    fn validate_global(&self, report: &mut ValidationReport) {
        let n = self.n_states;
        for i in 0..n {
            for j in (i + 1)..n {
                let a = &self.relation[i][j];
                let b = &self.relation[j][i];
                let dx = (a.mu_x + b.mu_x).abs();
                let dy = (a.mu_y + b.mu_y).abs();
                let dt = wrap_angle(a.mu_theta + b.mu_theta).abs();
                if dx > GLOBAL_TOL {
                    report.push("anti-symmetry-x", format!("R[{i}][{j}]"), dx);
                }
                if dy > GLOBAL_TOL {
                    report.push("anti-symmetry-y", format!("R[{i}][{j}]"), dy);
                }
                if dt > THETA_TOL {
                    report.push("anti-symmetry-theta", format!("R[{i}][{j}]"), dt);
                }
            }
        }
        if self.constraint_regime == ConstraintRegime::Additive {
            for a in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        let (abx, aby) = self.mu_xy(a, b);
                        let (bcx, bcy) = self.mu_xy(b, c);
                        let (acx, acy) = self.mu_xy(a, c);
                        let dx = (abx + bcx - acx).abs();
                        let dy = (aby + bcy - acy).abs();
                        let dt = wrap_angle(
                            self.relation[a][b].mu_theta + self.relation[b][c].mu_theta
                                - self.relation[a][c].mu_theta,
                        )
                        .abs();
                        if dx > GLOBAL_TOL {
                            report.push("additivity-x", format!("({a},{b},{c})"), dx);
                        }
                        if dy > GLOBAL_TOL {
                            report.push("additivity-y", format!("({a},{b},{c})"), dy);
                        }
                        if dt > THETA_TOL {
                            report.push("additivity-theta", format!("({a},{b},{c})"), dt);
                        }
                    }
                }
            }
        }
    }

    fn validate_relative(&self, report: &mut ValidationReport) {
        let n = self.n_states;
        // Transformed anti-symmetry: μ(a,b) = −T_ba[μ(b,a)], where T_ba
        // rotates by μθ(b,a). Heading anti-symmetry is unchanged.
        for a in 0..n {
            for b in (a + 1)..n {
                let fwd = self.mu_xy(a, b);
                let rev = self.mu_xy(b, a);
                let mapped = transform_relative(rev, self.relation[b][a].mu_theta);
                let dx = (fwd.0 + mapped.0).abs();
                let dy = (fwd.1 + mapped.1).abs();
                let dt = wrap_angle(self.relation[a][b].mu_theta + self.relation[b][a].mu_theta).abs();
                if dx > RELATIVE_TOL {
                    report.push("rel-anti-symmetry-x", format!("R[{a}][{b}]"), dx);
                }
                if dy > RELATIVE_TOL {
                    report.push("rel-anti-symmetry-y", format!("R[{a}][{b}]"), dy);
                }
                if dt > THETA_TOL {
                    report.push("rel-anti-symmetry-theta", format!("R[{a}][{b}]"), dt);
                }
            }
        }
        if self.constraint_regime == ConstraintRegime::Additive {
            // μ(a,c) = μ(a,b) + T_ba[μ(b,c)], with T_ba rotating by μθ(b,a).
            for a in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        let ab = self.mu_xy(a, b);
                        let bc = self.mu_xy(b, c);
                        let ac = self.mu_xy(a, c);
                        let mapped = transform_relative(bc, self.relation[b][a].mu_theta);
                        let dx = (ab.0 + mapped.0 - ac.0).abs();
                        let dy = (ab.1 + mapped.1 - ac.1).abs();
                        let dt = wrap_angle(
                            self.relation[a][b].mu_theta + self.relation[b][c].mu_theta
                                - self.relation[a][c].mu_theta,
                        )
                        .abs();
                        if dx > RELATIVE_TOL {
                            report.push("rel-additivity-x", format!("({a},{b},{c})"), dx);
                        }
                        if dy > RELATIVE_TOL {
                            report.push("rel-additivity-y", format!("({a},{b},{c})"), dy);
                        }
                        if dt > THETA_TOL {
                            report.push("rel-additivity-theta", format!("({a},{b},{c})"), dt);
                        }
                    }
                }
            }
        }
    }
}

/// Build a relation matrix from per-state potentials (coordinates on the
/// x, y and θ axes). The result is additive and anti-symmetric by
/// construction: every mean is a difference of potentials, expressed in the
/// origin state's frame when `regime` is state-relative.
pub fn relations_from_potentials(
    xs: &[f64],
    ys: &[f64],
    thetas: &[f64],
    sigma: impl Fn(usize, usize) -> (f64, f64),
    kappa: impl Fn(usize, usize) -> f64,
    regime: CoordinateRegime,
) -> Vec<Vec<RelationEntry>> {
    let n = xs.len();
    let mut rel = vec![vec![RelationEntry::self_transition(); n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let global = (xs[j] - xs[i], ys[j] - ys[i]);
            let (mx, my) = match regime {
                CoordinateRegime::Global => global,
                // Frame-i coordinates of a global vector: rotate by +θ_i.
                // This matches T_ab = rotation by μθ(a,b) mapping frame a
                // to frame b, with μθ(i,j) = θ_j − θ_i.
                CoordinateRegime::StateRelative => transform_relative(global, thetas[i]),
            };
            let (sx, sy) = sigma(i, j);
            rel[i][j] = RelationEntry::new(mx, sx, my, sy, thetas[j] - thetas[i], kappa(i, j));
        }
    }
    rel
}
