//! Ground-truth environment construction and Monte Carlo experience
//! sampling.
//!
//! An environment is a prescribed walk over states with planar poses; the
//! built model places most transition mass on the walk successor, the
//! action-failure mass on self, observation mass on per-state labels, and
//! derives the relation matrix from the pose geometry so the active
//! regime's constraints hold exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use ndarray::Array2;

use crate::error::{OdoHmmError, Result};
use crate::model::{
    relations_from_potentials, transform_relative, AugmentedHmm, ConstraintRegime,
    CoordinateRegime, ExperienceSequence, OdoReading,
};

/// Observation alphabet: wall, door, open, unknown.
pub const OBS_WALL: usize = 0;
pub const OBS_DOOR: usize = 1;
pub const OBS_OPEN: usize = 2;
pub const OBS_UNKNOWN: usize = 3;
pub const OBS_SYMBOLS: usize = 4;
/// Observation components: front, left, right.
pub const OBS_COMPONENTS: usize = 3;

/// Positional noise floor for near-zero displacement means.
pub const SIM_SIGMA_FLOOR: f64 = 0.05;

/// One state of a prescribed-path environment.
#[derive(Debug, Clone)]
pub struct StateSpec {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// Per-component observation labels (front, left, right).
    pub labels: Vec<usize>,
}

/// A prescribed-path environment in the style of a hand-built topological
/// map: states with poses, a cyclic/connected walk over them, and noise
/// ranges from which per-state values are drawn deterministically.
#[derive(Debug, Clone)]
pub struct EnvironmentSpec {
    pub name: String,
    pub states: Vec<StateSpec>,
    /// Directed walk edges (from, to); every state must appear as a source.
    pub path: Vec<(usize, usize)>,
    pub failure_rate: (f64, f64),
    pub obs_correctness: (f64, f64),
    /// Positional noise as a fraction of the absolute displacement mean.
    pub noise_fraction: f64,
    /// Heading concentration on straight transitions and on turns.
    pub kappa_straight: f64,
    pub kappa_turn: f64,
    pub coordinate_regime: CoordinateRegime,
    pub constraint_regime: ConstraintRegime,
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(OdoHmmError::Structural("environment has no states".into()));
        }
        for s in &self.states {
            if s.labels.len() != OBS_COMPONENTS {
                return Err(OdoHmmError::Structural(format!(
                    "state labels must have {OBS_COMPONENTS} components"
                )));
            }
            if s.labels.iter().any(|&l| l >= OBS_SYMBOLS) {
                return Err(OdoHmmError::Structural("label outside alphabet".into()));
            }
        }
        let mut successor = vec![None; n];
        for &(a, b) in &self.path {
            if a >= n || b >= n {
                return Err(OdoHmmError::Structural("path edge references unknown state".into()));
            }
            if successor[a].replace(b).is_some() {
                return Err(OdoHmmError::Structural(format!("state {a} has two path successors")));
            }
        }
        if successor.iter().any(Option::is_none) {
            return Err(OdoHmmError::Structural("every state needs a path successor".into()));
        }
        let in_range = |(lo, hi): (f64, f64)| (0.0..=1.0).contains(&lo) && lo <= hi && hi <= 1.0;
        if !in_range(self.failure_rate) || !in_range(self.obs_correctness) {
            return Err(OdoHmmError::Range("rates must lie within [0, 1]".into()));
        }
        if self.noise_fraction <= 0.0 {
            return Err(OdoHmmError::Range("noise fraction must be positive".into()));
        }
        Ok(())
    }

    pub fn successor(&self, state: usize) -> usize {
        self.path.iter().find(|&&(a, _)| a == state).map(|&(_, b)| b).unwrap()
    }
}

/// Build the ground-truth model: walk successor gets 1 − failure, failure
/// mass stays on self; observations get the drawn correctness on the true
/// label and the remainder spread uniformly; relations come from the pose
/// geometry with noise-fraction sigmas and turn-dependent concentrations.
pub fn build_environment(spec: &EnvironmentSpec, seed: u64) -> Result<AugmentedHmm> {
    spec.validate()?;
    let n = spec.states.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut transition = Array2::zeros((n, n));
    for i in 0..n {
        let failure = rng.gen_range(spec.failure_rate.0..=spec.failure_rate.1);
        transition[(i, i)] = failure;
        transition[(i, spec.successor(i))] += 1.0 - failure;
    }

    let mut observation = vec![Array2::zeros((n, OBS_SYMBOLS)); OBS_COMPONENTS];
    for i in 0..n {
        for c in 0..OBS_COMPONENTS {
            let correct = rng.gen_range(spec.obs_correctness.0..=spec.obs_correctness.1);
            let rest = (1.0 - correct) / (OBS_SYMBOLS - 1) as f64;
            for k in 0..OBS_SYMBOLS {
                observation[c][(i, k)] = if k == spec.states[i].labels[c] { correct } else { rest };
            }
        }
    }

    let xs: Vec<f64> = spec.states.iter().map(|s| s.x).collect();
    let ys: Vec<f64> = spec.states.iter().map(|s| s.y).collect();
    let thetas: Vec<f64> = spec.states.iter().map(|s| s.heading).collect();
    let sigma = |i: usize, j: usize| {
        let (dx, dy) = (xs[j] - xs[i], ys[j] - ys[i]);
        (
            (spec.noise_fraction * dx.abs()).max(SIM_SIGMA_FLOOR),
            (spec.noise_fraction * dy.abs()).max(SIM_SIGMA_FLOOR),
        )
    };
    let kappa = |i: usize, j: usize| {
        let dt = crate::circular::wrap_angle(thetas[j] - thetas[i]);
        if dt.abs() < 1e-9 {
            spec.kappa_straight
        } else {
            spec.kappa_turn
        }
    };
    let relation =
        relations_from_potentials(&xs, &ys, &thetas, sigma, kappa, spec.coordinate_regime);

    let model = AugmentedHmm {
        n_states: n,
        obs_dims: vec![OBS_SYMBOLS; OBS_COMPONENTS],
        transition,
        observation,
        relation,
        initial_state: 0,
        coordinate_regime: spec.coordinate_regime,
        constraint_regime: spec.constraint_regime,
    };
    model.check_structure()?;
    Ok(model)
}

/// Per-step trajectory record for plotting: accumulated pose, the raw
/// reading that produced it, and the hidden true state.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
    pub true_state: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryDump {
    pub steps: Vec<TrajectoryStep>,
}

impl TrajectoryDump {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,y,theta,dx,dy,dtheta,true_state\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
                s.t, s.x, s.y, s.theta, s.dx, s.dy, s.dtheta, s.true_state
            ));
        }
        out
    }
}

fn pick_index<R: Rng + ?Sized>(probs: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in probs.enumerate() {
        acc += p;
        last = k;
        if u <= acc {
            return k;
        }
    }
    last
}

/// Sample a length-`t_len` experience sequence: hidden states from π/A,
/// observation vectors from B, odometric readings from the relation
/// entries (normal x/y noise, von Mises heading noise). Ground-truth
/// states appear in the sequence's hidden field and the trajectory dump.
pub fn sample_experience(
    model: &AugmentedHmm,
    t_len: usize,
    seed: u64,
) -> Result<(ExperienceSequence, TrajectoryDump)> {
    if t_len < 2 {
        return Err(OdoHmmError::Input("sequence length must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(t_len);
    states.push(model.initial_state);
    for _ in 1..t_len {
        let prev = *states.last().unwrap();
        states.push(pick_index(model.transition.row(prev).iter().copied(), &mut rng));
    }

    let mut odo = vec![OdoReading::new(0.0, 0.0, 0.0)];
    let mut obs = Vec::with_capacity(t_len);
    for (t, &s) in states.iter().enumerate() {
        let mut v = Vec::with_capacity(model.obs_dims.len());
        for b in &model.observation {
            v.push(pick_index(b.row(s).iter().copied(), &mut rng));
        }
        obs.push(v);
        if t > 0 {
            let entry = &model.relation[states[t - 1]][s];
            let dx = Normal::new(entry.mu_x, entry.sigma_x).unwrap().sample(&mut rng);
            let dy = Normal::new(entry.mu_y, entry.sigma_y).unwrap().sample(&mut rng);
            let dtheta = entry.heading().sample(&mut rng);
            odo.push(OdoReading::new(dx, dy, dtheta));
        }
    }

    let dump = accumulate_trajectory(&odo, &states, model.coordinate_regime);
    let e = ExperienceSequence {
        odo,
        obs,
        coordinate_regime: model.coordinate_regime,
        true_states: Some(states),
    };
    Ok((e, dump))
}

/// Chain raw readings into an accumulated trajectory: prefix sums in the
/// global regime, heading-chained transforms in the state-relative regime.
pub fn accumulate_trajectory(
    odo: &[OdoReading],
    states: &[usize],
    regime: CoordinateRegime,
) -> TrajectoryDump {
    let mut dump = TrajectoryDump::default();
    let (mut px, mut py, mut ph) = (0.0_f64, 0.0_f64, 0.0_f64);
    for (t, &s) in states.iter().enumerate() {
        let (dx, dy, dtheta) = if t == 0 {
            (0.0, 0.0, 0.0)
        } else {
            (odo[t].x, odo[t].y, odo[t].theta)
        };
        match regime {
            CoordinateRegime::Global => {
                px += dx;
                py += dy;
            }
            CoordinateRegime::StateRelative => {
                // reading lives in the previous pose's frame
                let (gx, gy) = transform_relative((dx, dy), -ph);
                px += gx;
                py += gy;
            }
        }
        ph = crate::circular::wrap_angle(ph + dtheta);
        dump.steps.push(TrajectoryStep { t, x: px, y: py, theta: ph, dx, dy, dtheta, true_state: s });
    }
    dump
}

/// Labels for a corridor state whose walk continues straight.
fn corridor_labels() -> Vec<usize> {
    vec![OBS_OPEN, OBS_WALL, OBS_WALL]
}

/// Build a rectangular loop of states spaced `step` meters apart with
/// `per_side` interior states per side plus one corner state each; corner
/// states turn left by 90°.
fn rectangle_loop(per_side: [usize; 4], step: f64) -> Vec<StateSpec> {
    use std::f64::consts::FRAC_PI_2;
    let mut states = Vec::new();
    let (mut x, mut y) = (0.0_f64, 0.0_f64);
    let mut heading = 0.0_f64;
    for (side, &count) in per_side.iter().enumerate() {
        for k in 0..=count {
            let turning = k == count;
            let labels = if turning {
                // corner: wall ahead, opening on the turn side
                vec![OBS_WALL, OBS_OPEN, OBS_WALL]
            } else if k == 0 && side % 2 == 0 {
                // a door next to each corner on two sides, for texture
                vec![OBS_OPEN, OBS_DOOR, OBS_WALL]
            } else {
                corridor_labels()
            };
            states.push(StateSpec { x, y, heading, labels });
            if turning {
                heading = crate::circular::wrap_angle(heading + FRAC_PI_2);
            }
            let (dx, dy) = transform_relative((step, 0.0), -heading);
            x += dx;
            y += dy;
        }
    }
    states
}

/// A 17-state four-corridor loop analog: an 18-state rectangle at 2 m
/// spacing with one mid-corridor state elided, leaving one 4 m segment.
pub fn loop17_spec(
    coordinate_regime: CoordinateRegime,
    constraint_regime: ConstraintRegime,
) -> EnvironmentSpec {
    let mut states = rectangle_loop([4, 3, 4, 3], 2.0);
    states.remove(2);
    let n = states.len();
    debug_assert_eq!(n, 17);
    let path = (0..n).map(|i| (i, (i + 1) % n)).collect();
    EnvironmentSpec {
        name: "LOOP-17".into(),
        states,
        path,
        failure_rate: (0.05, 0.10),
        obs_correctness: (0.85, 0.95),
        noise_fraction: 0.05,
        kappa_straight: 300.0,
        kappa_turn: 100.0,
        coordinate_regime,
        constraint_regime,
    }
}

/// A 44-state prescribed-path analog of a two-hall environment: two
/// rectangular loops sharing a connecting corridor, traversed as one long
/// closed walk, 2 m spacing.
pub fn halls44_spec(
    coordinate_regime: CoordinateRegime,
    constraint_regime: ConstraintRegime,
) -> EnvironmentSpec {
    use std::f64::consts::FRAC_PI_2;
    // A closed rectangular walk with a detour: the outer hall is a large
    // rectangle, the second hall is reached by a spur along the top side.
    let mut states = rectangle_loop([9, 4, 9, 4], 2.0);
    // spur: branch off state 5 heading north, out and back (7 out, 7 back)
    let base = states[5].clone();
    let x = base.x;
    let mut y = base.y;
    for k in 0..7 {
        y += 2.0;
        let labels = if k == 6 { vec![OBS_WALL, OBS_DOOR, OBS_DOOR] } else { corridor_labels() };
        states.push(StateSpec { x, y, heading: FRAC_PI_2, labels });
    }
    for _ in 0..7 {
        y -= 2.0;
        states.push(StateSpec { x, y, heading: -FRAC_PI_2, labels: corridor_labels() });
    }
    let n = states.len();
    debug_assert_eq!(n, 44);
    // walk: 0..=5 → spur out (30..36) → spur back (37..43) → 6..29 → 0
    let mut order: Vec<usize> = (0..=5).collect();
    order.extend(30..44);
    order.extend(6..30);
    let path = order
        .iter()
        .enumerate()
        .map(|(k, &s)| (s, order[(k + 1) % order.len()]))
        .collect();
    EnvironmentSpec {
        name: "HALLS-44".into(),
        states,
        path,
        failure_rate: (0.05, 0.10),
        obs_correctness: (0.85, 0.95),
        noise_fraction: 0.05,
        kappa_straight: 300.0,
        kappa_turn: 100.0,
        coordinate_regime,
        constraint_regime,
    }
}
