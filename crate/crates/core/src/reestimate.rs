//! The constrained M-step and the EM driver loop.
//!
//! A and B have the usual closed-form expected-count updates. The relation
//! matrix R is reestimated under geometric constraints with *lag-behind*
//! updates: means use the previous iteration's variances/concentrations,
//! then variances are recomputed from the new means. Anti-symmetry pools
//! forward and reverse transition mass for each pair; full additivity is
//! enforced by reparameterizing positions as per-state potentials (weighted
//! least squares) and, for headings, by projecting the anti-symmetric
//! estimate onto the additive space while preserving the best-supported
//! entries.

use ndarray::Array2;
use std::time::Instant;

use crate::circular::{invert_bessel_ratio, log_bessel_i0, wrap_angle, KAPPA_MIN};
use crate::error::{OdoHmmError, Result};
use crate::inference::{e_step, EStepTables};
use crate::model::{
    transform_relative, AugmentedHmm, ConstraintRegime, CoordinateRegime, ExperienceSequence,
    RelationEntry, SIGMA_FLOOR,
};

/// Pair mass below which a relation entry is left unchanged.
const MASS_EPS: f64 = 1e-12;

/// Knobs for the EM loop.
#[derive(Debug, Clone)]
pub struct EmConfig {
    /// Convergence threshold on the max elementwise change in A and B.
    pub epsilon: f64,
    pub max_iters: usize,
    pub constraint_regime: ConstraintRegime,
    pub coordinate_regime: CoordinateRegime,
    /// Floor applied to A and B entries after each update, then renormalized.
    pub prob_floor: f64,
    /// Uniform jitter (± this many meters) added once to the positional
    /// readings before learning, to avoid degenerate density spikes.
    pub jitter_amplitude: f64,
    pub seed: u64,
    /// When false, relation densities and R updates are disabled and the
    /// loop reduces to standard Baum-Welch on the observation process.
    pub use_odometry: bool,
}

impl EmConfig {
    pub fn new(constraint_regime: ConstraintRegime, coordinate_regime: CoordinateRegime) -> Self {
        Self {
            epsilon: 1e-4,
            max_iters: 500,
            constraint_regime,
            coordinate_regime,
            prob_floor: crate::model::PROB_FLOOR,
            jitter_amplitude: 0.01,
            seed: 0,
            use_odometry: true,
        }
    }
}

/// Per-state coordinates on the x, y and θ axes; relation means in the
/// additive regime are differences of these potentials. The anchor state of
/// each connected component sits at the origin with zero heading.
#[derive(Debug, Clone)]
pub struct StateEmbedding {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub thetas: Vec<f64>,
}

/// One EM iteration's worth of diagnostics.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iteration: usize,
    pub log_likelihood: f64,
    pub max_change: f64,
    pub antisym_residual: f64,
    pub additivity_residual: f64,
    pub wall_ms: f64,
}

/// Per-iteration history of a `learn` run.
#[derive(Debug, Clone, Default)]
pub struct EmTrace {
    pub rows: Vec<TraceRow>,
}

impl EmTrace {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("iteration,log_likelihood,max_change,antisym_residual,additivity_residual,wall_ms\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.3}\n",
                r.iteration, r.log_likelihood, r.max_change, r.antisym_residual, r.additivity_residual, r.wall_ms
            ));
        }
        out
    }
}

/// Result of a full `learn` run.
#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub model: AugmentedHmm,
    pub trace: EmTrace,
    pub converged: bool,
    pub iterations: usize,
}

/// ξ-weighted sufficient statistics for one directed state pair, aggregated
/// over the sequence: total mass, weighted sums and squares of the x/y
/// readings, and weighted sin/cos sums of the heading readings.
#[derive(Debug, Clone, Copy, Default)]
pub struct PairStats {
    pub w: f64,
    pub sx: f64,
    pub sy: f64,
    pub qx: f64,
    pub qy: f64,
    pub sin: f64,
    pub cos: f64,
}

/// Aggregate ξ against the readings. ξ[t] weighs the transition from step t
/// to t+1, whose odometric reading is `odo[t+1]`.
pub fn pair_stats(tables: &EStepTables, e: &ExperienceSequence) -> Vec<Vec<PairStats>> {
    let (steps, n, _) = tables.xi.dim();
    let mut stats = vec![vec![PairStats::default(); n]; n];
    for t in 0..steps {
        let r = &e.odo[t + 1];
        let (rs, rc) = r.theta.sin_cos();
        for i in 0..n {
            for j in 0..n {
                let xi = tables.xi[(t, i, j)];
                if xi == 0.0 {
                    continue;
                }
                let s = &mut stats[i][j];
                s.w += xi;
                s.sx += xi * r.x;
                s.sy += xi * r.y;
                s.qx += xi * r.x * r.x;
                s.qy += xi * r.y * r.y;
                s.sin += xi * rs;
                s.cos += xi * rc;
            }
        }
    }
    stats
}

fn floor_and_normalize_row(row: &mut [f64], floor: f64) {
    for v in row.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
    let sum: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Transition update: expected transitions out of i into j over expected
/// visits to i, floored and renormalized. A state with no occupancy mass
/// gets a uniform row.
pub fn reestimate_transitions(tables: &EStepTables, floor: f64) -> Array2<f64> {
    let (steps, n, _) = tables.xi.dim();
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        let occ: f64 = (0..steps).map(|t| tables.gamma[(t, i)]).sum();
        if occ <= MASS_EPS {
            log::warn!("state {i} has no occupancy mass; resetting transition row to uniform");
            a.row_mut(i).fill(1.0 / n as f64);
            continue;
        }
        for j in 0..n {
            let trans: f64 = (0..steps).map(|t| tables.xi[(t, i, j)]).sum();
            a[(i, j)] = trans / occ;
        }
        floor_and_normalize_row(a.row_mut(i).as_slice_mut().unwrap(), floor);
    }
    a
}

/// Observation update: γ-weighted symbol counts per component, floored and
/// renormalized per state.
pub fn reestimate_observations(
    tables: &EStepTables,
    e: &ExperienceSequence,
    obs_dims: &[usize],
    floor: f64,
) -> Vec<Array2<f64>> {
    let (t_len, n) = tables.gamma.dim();
    let mut out = Vec::with_capacity(obs_dims.len());
    for (c, &m) in obs_dims.iter().enumerate() {
        let mut b = Array2::zeros((n, m));
        for j in 0..n {
            let occ: f64 = (0..t_len).map(|t| tables.gamma[(t, j)]).sum();
            if occ <= MASS_EPS {
                log::warn!("state {j} has no occupancy mass; resetting observation row to uniform");
                b.row_mut(j).fill(1.0 / m as f64);
                continue;
            }
            for t in 0..t_len {
                b[(j, e.obs[t][c])] += tables.gamma[(t, j)];
            }
            for k in 0..m {
                b[(j, k)] /= occ;
            }
            floor_and_normalize_row(b.row_mut(j).as_slice_mut().unwrap(), floor);
        }
        out.push(b);
    }
    out
}

fn variance_from_stats(w: f64, s: f64, q: f64, mu: f64) -> f64 {
    ((q - 2.0 * mu * s + mu * mu * w) / w).max(0.0).sqrt().max(SIGMA_FLOOR)
}

/// Anti-symmetric x/y update in the global frame: the lag-behind pooled
/// mean of forward readings and negated reverse readings, each weighted by
/// ξ mass over the current variance, then variances from the new means.
///
/// Returns the updated relation matrix with headings carried over from
/// `current` untouched.
pub fn reestimate_relations_antisym(
    tables: &EStepTables,
    e: &ExperienceSequence,
    current: &[Vec<RelationEntry>],
) -> Vec<Vec<RelationEntry>> {
    let stats = pair_stats(tables, e);
    let n = current.len();
    let mut out = current.to_vec();
    for i in 0..n {
        for j in (i + 1)..n {
            let (f, r) = (&stats[i][j], &stats[j][i]);
            if f.w + r.w <= MASS_EPS {
                continue;
            }
            for axis in 0..2 {
                let (sf, qf, sr, qr, sig_f, sig_r) = if axis == 0 {
                    (f.sx, f.qx, r.sx, r.qx, current[i][j].sigma_x, current[j][i].sigma_x)
                } else {
                    (f.sy, f.qy, r.sy, r.qy, current[i][j].sigma_y, current[j][i].sigma_y)
                };
                let (vf, vr) = (sig_f * sig_f, sig_r * sig_r);
                let num = sf / vf - sr / vr;
                let den = f.w / vf + r.w / vr;
                let mu = num / den;
                let sigma_fwd = if f.w > MASS_EPS {
                    variance_from_stats(f.w, sf, qf, mu)
                } else {
                    sig_f
                };
                let sigma_rev = if r.w > MASS_EPS {
                    variance_from_stats(r.w, sr, qr, -mu)
                } else {
                    sig_r
                };
                if axis == 0 {
                    out[i][j].mu_x = mu;
                    out[j][i].mu_x = -mu;
                    out[i][j].sigma_x = sigma_fwd;
                    out[j][i].sigma_x = sigma_rev;
                } else {
                    out[i][j].mu_y = mu;
                    out[j][i].mu_y = -mu;
                    out[i][j].sigma_y = sigma_fwd;
                    out[j][i].sigma_y = sigma_rev;
                }
            }
        }
        out[i][i].mu_x = 0.0;
        out[i][i].mu_y = 0.0;
    }
    out
}

/// Heading matrix: per ordered pair, mean direction and concentration.
pub type HeadingMatrix = Vec<Vec<(f64, f64)>>;

pub fn heading_matrix(rel: &[Vec<RelationEntry>]) -> HeadingMatrix {
    rel.iter()
        .map(|row| row.iter().map(|e| (e.mu_theta, e.kappa_theta)).collect())
        .collect()
}

/// Anti-symmetric heading update: pooled lag-behind circular mean (forward
/// mass weighted by the current κ of the forward entry, reverse by the
/// reverse entry's κ with flipped sign), then κ from the Bessel-ratio
/// equation at the new mean.
pub fn reestimate_heading_antisym(
    tables: &EStepTables,
    e: &ExperienceSequence,
    current: &[Vec<RelationEntry>],
) -> HeadingMatrix {
    let stats = pair_stats(tables, e);
    let n = current.len();
    let mut out = heading_matrix(current);

    let kappa_for = |stats_dir: &PairStats, mu: f64| -> Option<f64> {
        if stats_dir.w <= MASS_EPS {
            return None;
        }
        // Σ ξ cos(rθ − μ) / Σ ξ, expanded through the angle-difference identity
        let ratio = ((stats_dir.cos * mu.cos() + stats_dir.sin * mu.sin()) / stats_dir.w).max(0.0);
        Some(invert_bessel_ratio(ratio.min(1.0 - 1e-15)).expect("ratio in range"))
    };

    for i in 0..n {
        for j in (i + 1)..n {
            let (f, r) = (&stats[i][j], &stats[j][i]);
            if f.w + r.w <= MASS_EPS {
                continue;
            }
            let (k_f, k_r) = (current[i][j].kappa_theta, current[j][i].kappa_theta);
            let num = f.sin * k_f - r.sin * k_r;
            let den = f.cos * k_f + r.cos * k_r;
            let (mu_f, mu_r);
            if num == 0.0 && den == 0.0 {
                log::warn!("pair ({i},{j}) heading mean undefined; keeping mean, flooring kappa");
                mu_f = current[i][j].mu_theta;
                mu_r = current[j][i].mu_theta;
                out[i][j] = (mu_f, KAPPA_MIN);
                out[j][i] = (mu_r, KAPPA_MIN);
                continue;
            }
            mu_f = num.atan2(den);
            mu_r = wrap_angle(-mu_f);
            let kf = kappa_for(f, mu_f).unwrap_or(k_f);
            let kr = kappa_for(r, mu_r).unwrap_or(k_r);
            out[i][j] = (mu_f, kf);
            out[j][i] = (mu_r, kr);
        }
        out[i][i].0 = 0.0;
    }
    out
}

pub(crate) struct UnionFind(Vec<usize>);

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        Self((0..n).collect())
    }
    pub(crate) fn find(&mut self, x: usize) -> usize {
        if self.0[x] != x {
            let root = self.find(self.0[x]);
            self.0[x] = root;
        }
        self.0[x]
    }
    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Maximum-weight spanning tree on symmetrized pair weights, as a list of
/// (i, j) edges with i < j. Ties break by lowest (i, j) lexicographic order.
pub(crate) fn max_weight_spanning_tree(weights: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = weights.len();
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            edges.push((i, j, weights[i][j] + weights[j][i]));
        }
    }
    edges.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut uf = UnionFind::new(n);
    let mut tree = Vec::with_capacity(n.saturating_sub(1));
    for (i, j, _) in edges {
        if uf.union(i, j) {
            tree.push((i, j));
        }
    }
    tree
}

/// Project an anti-symmetric heading matrix onto the additive space
/// (differences of per-state heading potentials), preserving the entries on
/// the maximum-weight spanning tree of the expected transition counts.
///
/// Headings are lifted to the real line by propagating tree-edge means from
/// the anchor; off-tree entries become potential differences renormalized
/// to (−π, π]. Idempotent: tree entries pass through verbatim, so a second
/// application reproduces the same potentials bit for bit.
pub fn project_headings_additive(
    means: &HeadingMatrix,
    xi_totals: &[Vec<f64>],
) -> (HeadingMatrix, Vec<f64>) {
    let n = means.len();
    let tree = max_weight_spanning_tree(xi_totals);
    let mut adjacency = vec![Vec::new(); n];
    for &(i, j) in &tree {
        adjacency[i].push(j);
        adjacency[j].push(i);
    }
    let mut thetas = vec![0.0; n];
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for &j in &adjacency[i] {
            if !seen[j] {
                seen[j] = true;
                thetas[j] = thetas[i] + means[i][j].0;
                queue.push_back(j);
            }
        }
    }

    let mut out = means.clone();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out[i][j].0 = wrap_angle(thetas[j] - thetas[i]);
            }
        }
        out[i][i].0 = 0.0;
    }
    // tree entries (and their exact negations) pass through verbatim
    for &(i, j) in &tree {
        out[i][j].0 = means[i][j].0;
        out[j][i].0 = -means[i][j].0;
    }
    (out, thetas)
}

/// Additive x/y update in the global frame: reparameterize as per-state
/// positions, solve the ξ/σ²-weighted least-squares (normal equations,
/// dense direct solve), and read the means back as potential differences.
/// Variances follow from the new means (lag-behind).
///
/// A disconnected transition-mass graph anchors each component at its
/// lowest-index state.
pub fn reestimate_positions_additive(
    tables: &EStepTables,
    e: &ExperienceSequence,
    current: &[Vec<RelationEntry>],
) -> (StateEmbedding, Vec<Vec<RelationEntry>>) {
    let stats = pair_stats(tables, e);
    let n = current.len();
    let mut xs = vec![0.0; n];
    let mut ys = vec![0.0; n];

    for axis in 0..2 {
        let select = |s: &PairStats, cur: &RelationEntry| -> (f64, f64) {
            if axis == 0 {
                (s.sx, cur.sigma_x)
            } else {
                (s.sy, cur.sigma_y)
            }
        };
        // weight w_ij = Σξ/σ², target s_ij = Σξr/σ²
        let mut w = vec![vec![0.0; n]; n];
        let mut s = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j || stats[i][j].w <= MASS_EPS {
                    continue;
                }
                let (sum, sigma) = select(&stats[i][j], &current[i][j]);
                let v = sigma * sigma;
                w[i][j] = stats[i][j].w / v;
                s[i][j] = sum / v;
            }
        }
        let positions = solve_potentials(&w, &s);
        if axis == 0 {
            xs = positions;
        } else {
            ys = positions;
        }
    }

    let mut out = current.to_vec();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                out[i][i].mu_x = 0.0;
                out[i][i].mu_y = 0.0;
                continue;
            }
            out[i][j].mu_x = xs[j] - xs[i];
            out[i][j].mu_y = ys[j] - ys[i];
            if stats[i][j].w > MASS_EPS {
                out[i][j].sigma_x =
                    variance_from_stats(stats[i][j].w, stats[i][j].sx, stats[i][j].qx, out[i][j].mu_x);
                out[i][j].sigma_y =
                    variance_from_stats(stats[i][j].w, stats[i][j].sy, stats[i][j].qy, out[i][j].mu_y);
            }
        }
    }
    let thetas = vec![0.0; n];
    (StateEmbedding { xs, ys, thetas }, out)
}

/// Solve the Laplacian normal equations Σ_i (w_ik + w_ki)(p_k − p_i) =
/// Σ_i (s_ik − s_ki) with the lowest-index state of each connected
/// component anchored at 0.
fn solve_potentials(w: &[Vec<f64>], s: &[Vec<f64>]) -> Vec<f64> {
    let n = w.len();
    // connected components over symmetrized positive weights
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if w[i][j] + w[j][i] > 0.0 {
                uf.union(i, j);
            }
        }
    }
    let mut anchors = vec![false; n];
    let mut component_count = 0;
    for k in 0..n {
        if uf.find(k) == k {
            anchors[k] = true;
            component_count += 1;
        }
    }
    if component_count > 1 {
        log::warn!("transition-mass graph has {component_count} components; anchoring each independently");
    }

    let mut mat = nalgebra::DMatrix::zeros(n, n);
    let mut rhs = nalgebra::DVector::zeros(n);
    for k in 0..n {
        if anchors[k] {
            mat[(k, k)] = 1.0;
            continue;
        }
        for i in 0..n {
            if i == k {
                continue;
            }
            let ww = w[i][k] + w[k][i];
            mat[(k, k)] += ww;
            mat[(k, i)] -= ww;
            rhs[k] += s[i][k] - s[k][i];
        }
    }
    let solution = mat
        .lu()
        .solve(&rhs)
        .expect("normal equations solvable: Laplacian plus anchor rows is nonsingular");
    solution.iter().copied().collect()
}

/// State-relative x/y update: the anti-symmetric pooling of the global
/// variant with reverse readings mapped through the heading transform
/// before pooling. `headings` must already hold the updated heading means.
///
/// The reverse mean is recovered as μ(j,i) = −T_ij[μ(i,j)], which makes the
/// transformed anti-symmetry constraint exact.
pub fn reestimate_relations_relative(
    tables: &EStepTables,
    e: &ExperienceSequence,
    current: &[Vec<RelationEntry>],
    headings: &HeadingMatrix,
) -> Vec<Vec<RelationEntry>> {
    let stats = pair_stats(tables, e);
    let n = current.len();
    let mut out = current.to_vec();
    for i in 0..n {
        for j in (i + 1)..n {
            let (f, r) = (&stats[i][j], &stats[j][i]);
            if f.w + r.w <= MASS_EPS {
                continue;
            }
            let mu_theta = headings[i][j].0;
            // reverse weighted sums mapped into frame i with sign flipped:
            // −T_ji[·] where T_ji rotates by μθ(j,i) = −μθ(i,j)
            let mapped = transform_relative((-r.sx, -r.sy), -mu_theta);
            let mut mu = [0.0; 2];
            for axis in 0..2 {
                let (sf, sig_f, sig_r, m) = if axis == 0 {
                    (f.sx, current[i][j].sigma_x, current[j][i].sigma_x, mapped.0)
                } else {
                    (f.sy, current[i][j].sigma_y, current[j][i].sigma_y, mapped.1)
                };
                let (vf, vr) = (sig_f * sig_f, sig_r * sig_r);
                mu[axis] = (sf / vf + m / vr) / (f.w / vf + r.w / vr);
            }
            out[i][j].mu_x = mu[0];
            out[i][j].mu_y = mu[1];
            let rev = transform_relative((-mu[0], -mu[1]), mu_theta);
            out[j][i].mu_x = rev.0;
            out[j][i].mu_y = rev.1;

            if f.w > MASS_EPS {
                out[i][j].sigma_x = variance_from_stats(f.w, f.sx, f.qx, mu[0]);
                out[i][j].sigma_y = variance_from_stats(f.w, f.sy, f.qy, mu[1]);
            }
            if r.w > MASS_EPS {
                out[j][i].sigma_x = variance_from_stats(r.w, r.sx, r.qx, rev.0);
                out[j][i].sigma_y = variance_from_stats(r.w, r.sy, r.qy, rev.1);
            }
        }
        out[i][i].mu_x = 0.0;
        out[i][i].mu_y = 0.0;
    }
    out
}

/// State-relative additive update: rotate each directed pair's weighted
/// sums into the global frame via the per-state heading potentials, run the
/// global position solve there, and read the means back in each origin
/// state's frame.
pub fn reestimate_positions_relative_additive(
    tables: &EStepTables,
    e: &ExperienceSequence,
    current: &[Vec<RelationEntry>],
    thetas: &[f64],
) -> (StateEmbedding, Vec<Vec<RelationEntry>>) {
    let stats = pair_stats(tables, e);
    let n = current.len();

    let mut xs = vec![0.0; n];
    let mut ys = vec![0.0; n];
    {
        // global-frame weighted sums: frame i → global rotates by −θ_i
        let mut wx = vec![vec![0.0; n]; n];
        let mut sx = vec![vec![0.0; n]; n];
        let mut wy = vec![vec![0.0; n]; n];
        let mut sy = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j || stats[i][j].w <= MASS_EPS {
                    continue;
                }
                let g = transform_relative((stats[i][j].sx, stats[i][j].sy), -thetas[i]);
                let (vx, vy) = (
                    current[i][j].sigma_x * current[i][j].sigma_x,
                    current[i][j].sigma_y * current[i][j].sigma_y,
                );
                wx[i][j] = stats[i][j].w / vx;
                sx[i][j] = g.0 / vx;
                wy[i][j] = stats[i][j].w / vy;
                sy[i][j] = g.1 / vy;
            }
        }
        xs = solve_potentials(&wx, &sx);
        ys = solve_potentials(&wy, &sy);
    }

    let mut out = current.to_vec();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                out[i][i].mu_x = 0.0;
                out[i][i].mu_y = 0.0;
                continue;
            }
            let rel = transform_relative((xs[j] - xs[i], ys[j] - ys[i]), thetas[i]);
            out[i][j].mu_x = rel.0;
            out[i][j].mu_y = rel.1;
            if stats[i][j].w > MASS_EPS {
                out[i][j].sigma_x =
                    variance_from_stats(stats[i][j].w, stats[i][j].sx, stats[i][j].qx, rel.0);
                out[i][j].sigma_y =
                    variance_from_stats(stats[i][j].w, stats[i][j].sy, stats[i][j].qy, rel.1);
            }
        }
    }
    (StateEmbedding { xs: xs.clone(), ys: ys.clone(), thetas: thetas.to_vec() }, out)
}

fn apply_headings(rel: &mut [Vec<RelationEntry>], headings: &HeadingMatrix) {
    for (row, hrow) in rel.iter_mut().zip(headings) {
        for (entry, &(mu, kappa)) in row.iter_mut().zip(hrow) {
            entry.mu_theta = mu;
            entry.kappa_theta = kappa;
        }
    }
    for (i, row) in rel.iter_mut().enumerate() {
        row[i].mu_theta = 0.0;
    }
}

/// Refit heading concentrations at (possibly projected) mean directions:
/// the conditional maximizer of the expected von Mises log-likelihood for a
/// fixed mean. Keeps the projection step from leaving sharp concentrations
/// pointed at directions the data no longer supports.
pub fn refit_heading_kappa(
    means: &mut HeadingMatrix,
    tables: &EStepTables,
    e: &ExperienceSequence,
) {
    let stats = pair_stats(tables, e);
    let n = means.len();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = &stats[i][j];
            if s.w <= MASS_EPS {
                continue;
            }
            let mu = means[i][j].0;
            let ratio = ((s.cos * mu.cos() + s.sin * mu.sin()) / s.w).max(0.0);
            means[i][j].1 = invert_bessel_ratio(ratio.min(1.0 - 1e-15)).expect("ratio in range");
        }
    }
}

/// Expected heading log-likelihood contribution of a heading matrix under
/// the posterior pair statistics; used to keep the additive projection from
/// moving against the likelihood.
fn heading_q(means: &HeadingMatrix, stats: &[Vec<PairStats>]) -> f64 {
    let n = means.len();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = &stats[i][j];
            if s.w <= MASS_EPS {
                continue;
            }
            let (mu, kappa) = means[i][j];
            q += kappa * (s.cos * mu.cos() + s.sin * mu.sin())
                - s.w * ((2.0 * std::f64::consts::PI).ln() + log_bessel_i0(kappa).expect("kappa in range"));
        }
    }
    q
}

/// Additive heading step: project the pooled means onto the consistent set
/// and refit the concentrations there, but fall back to the previous
/// (already consistent) means — with refit concentrations — whenever the
/// projection would lower the expected heading likelihood. The fallback
/// keeps the step an ascent, so the generalized-EM guarantee survives the
/// projection heuristic.
fn additive_heading_step(
    headings: &HeadingMatrix,
    model: &AugmentedHmm,
    tables: &EStepTables,
    e: &ExperienceSequence,
) -> (HeadingMatrix, Vec<f64>) {
    let (mut projected, thetas) = project_headings_additive(headings, &xi_totals(tables));
    refit_heading_kappa(&mut projected, tables, e);
    let mut previous = heading_matrix(&model.relation);
    refit_heading_kappa(&mut previous, tables, e);
    let stats = pair_stats(tables, e);
    if heading_q(&projected, &stats) >= heading_q(&previous, &stats) {
        (projected, thetas)
    } else {
        // Recover per-state heading potentials from the previous consistent
        // matrix (gauge-fixed at state 0) so position updates in the relative
        // regime stay aligned with the directions we actually keep.
        let prev_thetas: Vec<f64> = (0..previous.len())
            .map(|j| if j == 0 { 0.0 } else { previous[0][j].0 })
            .collect();
        (previous, prev_thetas)
    }
}

fn xi_totals(tables: &EStepTables) -> Vec<Vec<f64>> {
    let (steps, n, _) = tables.xi.dim();
    let mut totals = vec![vec![0.0; n]; n];
    for t in 0..steps {
        for i in 0..n {
            for j in 0..n {
                totals[i][j] += tables.xi[(t, i, j)];
            }
        }
    }
    totals
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One EM iteration: E-step at the current model, then A, B, Rθ (with the
/// additive projection when configured), then Rˣʸ. The reported max change
/// covers A and B only.
pub fn em_step(
    model: &AugmentedHmm,
    e: &ExperienceSequence,
    config: &EmConfig,
) -> Result<(AugmentedHmm, f64, f64)> {
    let tables = e_step(model, e, config.use_odometry)?;
    let mut next = model.clone();

    next.transition = reestimate_transitions(&tables, config.prob_floor);
    next.observation = reestimate_observations(&tables, e, &model.obs_dims, config.prob_floor);

    if config.use_odometry {
        let headings = reestimate_heading_antisym(&tables, e, &model.relation);
        match (config.constraint_regime, config.coordinate_regime) {
            (ConstraintRegime::AntiSymmetric, CoordinateRegime::Global) => {
                next.relation = reestimate_relations_antisym(&tables, e, &model.relation);
                apply_headings(&mut next.relation, &headings);
            }
            (ConstraintRegime::AntiSymmetric, CoordinateRegime::StateRelative) => {
                next.relation =
                    reestimate_relations_relative(&tables, e, &model.relation, &headings);
                apply_headings(&mut next.relation, &headings);
            }
            (ConstraintRegime::Additive, CoordinateRegime::Global) => {
                let (chosen, _) = additive_heading_step(&headings, model, &tables, e);
                let (_, rel) = reestimate_positions_additive(&tables, e, &model.relation);
                next.relation = rel;
                apply_headings(&mut next.relation, &chosen);
            }
            (ConstraintRegime::Additive, CoordinateRegime::StateRelative) => {
                let (chosen, thetas) = additive_heading_step(&headings, model, &tables, e);
                let (_, rel) =
                    reestimate_positions_relative_additive(&tables, e, &model.relation, &thetas);
                next.relation = rel;
                apply_headings(&mut next.relation, &chosen);
            }
        }
    }

    let mut max_change = max_abs_diff(&model.transition, &next.transition);
    for (old, new) in model.observation.iter().zip(&next.observation) {
        max_change = max_change.max(max_abs_diff(old, new));
    }
    Ok((next, max_change, tables.log_likelihood))
}

/// Max residuals of the anti-symmetry and additivity constraints over the
/// positional means, reported in the trace.
fn constraint_residuals(model: &AugmentedHmm) -> (f64, f64) {
    let n = model.n_states;
    let mu = |i: usize, j: usize| (model.relation[i][j].mu_x, model.relation[i][j].mu_y);
    let mut antisym = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let f = mu(i, j);
            let r = mu(j, i);
            let mapped = match model.coordinate_regime {
                CoordinateRegime::Global => r,
                CoordinateRegime::StateRelative => {
                    transform_relative(r, model.relation[j][i].mu_theta)
                }
            };
            antisym = antisym.max((f.0 + mapped.0).abs()).max((f.1 + mapped.1).abs());
        }
    }
    let mut additive = 0.0_f64;
    if model.constraint_regime == ConstraintRegime::Additive {
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let ab = mu(a, b);
                    let bc = mu(b, c);
                    let ac = mu(a, c);
                    let mapped = match model.coordinate_regime {
                        CoordinateRegime::Global => bc,
                        CoordinateRegime::StateRelative => {
                            transform_relative(bc, model.relation[b][a].mu_theta)
                        }
                    };
                    additive = additive
                        .max((ab.0 + mapped.0 - ac.0).abs())
                        .max((ab.1 + mapped.1 - ac.1).abs());
                }
            }
        }
    }
    (antisym, additive)
}

/// Add uniform jitter (± amplitude) to the positional readings. Applied
/// once at the start of a learn run to avoid degenerate density spikes on
/// repeated identical readings.
pub fn apply_jitter(e: &ExperienceSequence, amplitude: f64, seed: u64) -> ExperienceSequence {
    use rand::{Rng, SeedableRng};
    if amplitude == 0.0 {
        return e.clone();
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = e.clone();
    for r in out.odo.iter_mut().skip(1) {
        r.x += rng.gen_range(-amplitude..=amplitude);
        r.y += rng.gen_range(-amplitude..=amplitude);
    }
    out
}

/// The full EM loop: iterate `em_step` until the max A/B change drops below
/// ε or the iteration budget runs out.
pub fn learn(model0: &AugmentedHmm, e: &ExperienceSequence, config: &EmConfig) -> Result<LearnOutcome> {
    if config.constraint_regime != model0.constraint_regime
        || config.coordinate_regime != model0.coordinate_regime
    {
        return Err(OdoHmmError::Structural(
            "config regimes do not match the initial model".into(),
        ));
    }
    let e = apply_jitter(e, config.jitter_amplitude, config.seed);
    let mut model = model0.clone();
    let mut trace = EmTrace::default();
    let mut converged = false;
    for iteration in 0..config.max_iters {
        let start = Instant::now();
        let (next, max_change, log_likelihood) = em_step(&model, &e, config)?;
        let (antisym_residual, additivity_residual) = constraint_residuals(&next);
        trace.rows.push(TraceRow {
            iteration,
            log_likelihood,
            max_change,
            antisym_residual,
            additivity_residual,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        model = next;
        if max_change <= config.epsilon {
            converged = true;
            break;
        }
    }
    let iterations = trace.rows.len();
    Ok(LearnOutcome { model, trace, converged, iterations })
}
