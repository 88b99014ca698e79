//! Initial-model construction: tag-based bucketing/tagging over odometric
//! readings, k-means over accumulated positions, and uniform-random models.
//!
//! The tag-based initializer works directly on recorded *relations*: it
//! first clusters readings into buckets by proximity, then walks the
//! sequence assigning origin/destination states while populating the
//! relation means under the active regime's consistency constraints
//! (maintained here as per-state potentials, which makes the closure
//! automatic and exact).

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::circular::{wrap_angle, KAPPA_MAX};
use crate::error::{OdoHmmError, Result};
use crate::model::{
    relations_from_potentials, transform_relative, AugmentedHmm, ConstraintRegime,
    CoordinateRegime, ExperienceSequence, OdoReading,
};
use ndarray::Array2;

/// Knobs shared by the initializers.
#[derive(Debug, Clone)]
pub struct InitConfig {
    /// Bucketing standard deviations (x, y in meters; theta in radians).
    pub bucket_sigma: (f64, f64, f64),
    /// New-state threshold during tagging, in bucket-sigma units.
    pub new_state_threshold: f64,
    /// Relation sigma when a bucket is too small for a sample estimate.
    pub default_sigma: f64,
    pub default_kappa: f64,
    pub prob_floor: f64,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            bucket_sigma: (0.2, 0.2, 10.0_f64.to_radians()),
            new_state_threshold: 2.0,
            default_sigma: 0.5,
            default_kappa: 5.0,
            prob_floor: crate::model::PROB_FLOOR,
            seed: 0,
        }
    }
}

/// One proximity bucket: a running mean over its member readings.
#[derive(Debug, Clone)]
pub struct Bucket {
    pub mean: (f64, f64, f64),
    pub members: Vec<usize>,
    sum_x: f64,
    sum_y: f64,
    sin_theta: f64,
    cos_theta: f64,
}

impl Bucket {
    fn new(index: usize, r: &OdoReading) -> Self {
        Self {
            mean: (r.x, r.y, r.theta),
            members: vec![index],
            sum_x: r.x,
            sum_y: r.y,
            sin_theta: r.theta.sin(),
            cos_theta: r.theta.cos(),
        }
    }

    fn admit(&mut self, index: usize, r: &OdoReading) {
        self.members.push(index);
        self.sum_x += r.x;
        self.sum_y += r.y;
        self.sin_theta += r.theta.sin();
        self.cos_theta += r.theta.cos();
        let n = self.members.len() as f64;
        self.mean = (
            self.sum_x / n,
            self.sum_y / n,
            self.sin_theta.atan2(self.cos_theta),
        );
    }

    fn matches(&self, r: &OdoReading, sigma: (f64, f64, f64), k: f64) -> bool {
        (r.x - self.mean.0).abs() <= k * sigma.0
            && (r.y - self.mean.1).abs() <= k * sigma.1
            && wrap_angle(r.theta - self.mean.2).abs() <= k * sigma.2
    }
}

/// The bucketing result: buckets in creation order plus the per-reading
/// assignment.
#[derive(Debug, Clone)]
pub struct BucketSet {
    pub buckets: Vec<Bucket>,
    pub assignment: Vec<usize>,
    pub sigma: (f64, f64, f64),
}

/// Sequentially cluster readings: a reading joins the first existing
/// bucket whose running mean it is within 1.5 sigma of along all three
/// dimensions (theta circularly), else it seeds a new bucket.
pub fn bucket_odometry(readings: &[OdoReading], sigma: (f64, f64, f64)) -> Result<BucketSet> {
    if readings.is_empty() {
        return Err(OdoHmmError::Input("no readings to bucket".into()));
    }
    if sigma.0 <= 0.0 || sigma.1 <= 0.0 || sigma.2 <= 0.0 {
        return Err(OdoHmmError::Range("bucket sigmas must be positive".into()));
    }
    let mut buckets: Vec<Bucket> = Vec::new();
    let mut assignment = Vec::with_capacity(readings.len());
    for (idx, r) in readings.iter().enumerate() {
        match buckets.iter_mut().enumerate().find(|(_, b)| b.matches(r, sigma, 1.5)) {
            Some((b_idx, bucket)) => {
                bucket.admit(idx, r);
                assignment.push(b_idx);
            }
            None => {
                buckets.push(Bucket::new(idx, r));
                assignment.push(buckets.len() - 1);
            }
        }
    }
    Ok(BucketSet { buckets, assignment, sigma })
}

/// The tagging result: the state at every time step (including the start
/// state at t=0), the discovered per-state potentials, and which bucket
/// populated each directed relation entry.
#[derive(Debug, Clone)]
pub struct TaggedSequence {
    pub states: Vec<usize>,
    /// Global-frame (x, y, theta) potential per discovered state.
    pub potentials: Vec<(f64, f64, f64)>,
    /// (origin, destination) -> bucket that tagged the entry.
    pub entry_bucket: HashMap<(usize, usize), usize>,
}

impl TaggedSequence {
    pub fn n_discovered(&self) -> usize {
        self.potentials.len()
    }

    /// Relation mean implied by the potentials for a directed pair,
    /// expressed in the origin frame under the given regime.
    pub fn relation_mean(&self, i: usize, j: usize, regime: CoordinateRegime) -> (f64, f64, f64) {
        let (xi, yi, ti) = self.potentials[i];
        let (xj, yj, tj) = self.potentials[j];
        let global = (xj - xi, yj - yi);
        let (mx, my) = match regime {
            CoordinateRegime::Global => global,
            CoordinateRegime::StateRelative => transform_relative(global, ti),
        };
        (mx, my, wrap_angle(tj - ti))
    }
}

/// Walk the sequence assigning states. Matching order per reading: first
/// the (state, bucket) association recorded earlier, then the closest
/// populated relation mean in the current state's row within the
/// new-state threshold, else a fresh state whose potential extends the
/// current one by the reading's bucket mean.
pub fn tag_states(
    buckets: &BucketSet,
    readings: &[OdoReading],
    n_states: usize,
    regime: CoordinateRegime,
    config: &InitConfig,
) -> Result<TaggedSequence> {
    if readings.len() != buckets.assignment.len() {
        return Err(OdoHmmError::Input("readings do not match the bucket assignment".into()));
    }
    let sigma = buckets.sigma;
    let mut tagged = TaggedSequence {
        states: vec![0],
        potentials: vec![(0.0, 0.0, 0.0)],
        entry_bucket: HashMap::new(),
    };
    let mut assoc: HashMap<(usize, usize), usize> = HashMap::new();
    let mut needed_beyond = 0usize;

    for (idx, r) in readings.iter().enumerate() {
        let s = *tagged.states.last().unwrap();
        let b = buckets.assignment[idx];
        let dest = if let Some(&d) = assoc.get(&(s, b)) {
            d
        } else {
            // closest populated entry in row s (the diagonal counts, with
            // zero mean), by max-normalized distance over the three axes
            let mut best: Option<(f64, usize)> = None;
            for j in 0..tagged.potentials.len() {
                let (mx, my, mt) = tagged.relation_mean(s, j, regime);
                let d = ((r.x - mx).abs() / sigma.0)
                    .max((r.y - my).abs() / sigma.1)
                    .max(wrap_angle(r.theta - mt).abs() / sigma.2);
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            match best {
                Some((d, j)) if d <= config.new_state_threshold => {
                    assoc.insert((s, b), j);
                    if j != s {
                        tagged.entry_bucket.entry((s, j)).or_insert(b);
                    }
                    j
                }
                _ => {
                    let new_index = tagged.potentials.len();
                    if new_index >= n_states {
                        // keep scanning so the error reports the full shortfall
                        needed_beyond += 1;
                    }
                    let (mx, my, mt) = buckets.buckets[b].mean;
                    let (xs, ys, ts) = tagged.potentials[s];
                    let global = match regime {
                        CoordinateRegime::Global => (mx, my),
                        CoordinateRegime::StateRelative => transform_relative((mx, my), -ts),
                    };
                    tagged.potentials.push((xs + global.0, ys + global.1, ts + mt));
                    assoc.insert((s, b), new_index);
                    tagged.entry_bucket.insert((s, new_index), b);
                    new_index
                }
            }
        };
        tagged.states.push(dest);
    }

    if needed_beyond > 0 {
        return Err(OdoHmmError::StateOverflow {
            needed: n_states + needed_beyond,
            available: n_states,
        });
    }
    Ok(tagged)
}

fn counts_to_stochastic(counts: Array2<f64>, floor: f64) -> Array2<f64> {
    let (rows, cols) = counts.dim();
    let mut out = counts;
    for i in 0..rows {
        let total: f64 = out.row(i).sum();
        if total <= 0.0 {
            out.row_mut(i).fill(1.0 / cols as f64);
            continue;
        }
        for j in 0..cols {
            out[(i, j)] = (out[(i, j)] / total).max(floor);
        }
        let renorm: f64 = out.row(i).sum();
        for j in 0..cols {
            out[(i, j)] /= renorm;
        }
    }
    out
}

fn matrices_from_tagging(
    states: &[usize],
    e: &ExperienceSequence,
    n: usize,
    obs_dims: &[usize],
    floor: f64,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let mut a = Array2::zeros((n, n));
    for w in states.windows(2) {
        a[(w[0], w[1])] += 1.0;
    }
    let mut bs = Vec::with_capacity(obs_dims.len());
    for (c, &m) in obs_dims.iter().enumerate() {
        let mut b = Array2::zeros((n, m));
        for (t, &s) in states.iter().enumerate() {
            b[(s, e.obs[t][c])] += 1.0;
        }
        bs.push(counts_to_stochastic(b, floor));
    }
    (counts_to_stochastic(a, floor), bs)
}

/// Per-axis sample standard deviations of a bucket's members (theta as
/// circular concentration), when the bucket is large enough to estimate.
fn bucket_spread(bucket: &Bucket, readings: &[OdoReading]) -> Option<(f64, f64, f64)> {
    if bucket.members.len() < 3 {
        return None;
    }
    let n = bucket.members.len() as f64;
    let (mx, my, mt) = bucket.mean;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut ct = 0.0;
    for &idx in &bucket.members {
        let r = &readings[idx];
        vx += (r.x - mx).powi(2);
        vy += (r.y - my).powi(2);
        ct += wrap_angle(r.theta - mt).cos();
    }
    let ratio = (ct / n).clamp(0.0, 1.0 - 1e-12);
    let kappa = crate::circular::invert_bessel_ratio(ratio).ok()?;
    Some(((vx / n).sqrt(), (vy / n).sqrt(), kappa))
}

/// Tag-based initialization: buckets and tags the readings, then converts
/// tagged transitions and observations into floored count estimates and
/// realizes the relation matrix from the discovered potentials. States the
/// tagging never discovered get potentials extended from random readings.
pub fn init_model_tag_based(
    e: &ExperienceSequence,
    n: usize,
    constraint_regime: ConstraintRegime,
    obs_dims: &[usize],
    config: &InitConfig,
) -> Result<AugmentedHmm> {
    e.validate_against(obs_dims)?;
    let readings = &e.odo[1..];
    let buckets = bucket_odometry(readings, config.bucket_sigma)?;
    let tagged = tag_states(&buckets, readings, n, e.coordinate_regime, config)?;

    let mut potentials = tagged.potentials.clone();
    if potentials.len() < n {
        log::warn!(
            "tagging discovered {} of {n} states; populating the rest from random readings",
            potentials.len()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        while potentials.len() < n {
            let anchor = rng.gen_range(0..potentials.len());
            let r = &readings[rng.gen_range(0..readings.len())];
            let (xs, ys, ts) = potentials[anchor];
            let global = match e.coordinate_regime {
                CoordinateRegime::Global => (r.x, r.y),
                CoordinateRegime::StateRelative => transform_relative((r.x, r.y), -ts),
            };
            potentials.push((xs + global.0, ys + global.1, ts + r.theta));
        }
    }

    let (a, bs) = matrices_from_tagging(&tagged.states, e, n, obs_dims, config.prob_floor);

    let spreads: HashMap<(usize, usize), (f64, f64, f64)> = tagged
        .entry_bucket
        .iter()
        .filter_map(|(&pair, &b)| bucket_spread(&buckets.buckets[b], readings).map(|s| (pair, s)))
        .collect();
    let sigma = |i: usize, j: usize| {
        let forward = spreads.get(&(i, j));
        let reverse = spreads.get(&(j, i));
        match forward.or(reverse) {
            Some(&(sx, sy, _)) => (sx.max(crate::model::SIGMA_FLOOR), sy.max(crate::model::SIGMA_FLOOR)),
            None => (config.default_sigma, config.default_sigma),
        }
    };
    let kappa = |i: usize, j: usize| {
        match spreads.get(&(i, j)).or_else(|| spreads.get(&(j, i))) {
            Some(&(_, _, k)) => k.min(KAPPA_MAX),
            None => config.default_kappa,
        }
    };
    let xs: Vec<f64> = potentials.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = potentials.iter().map(|p| p.1).collect();
    let ts: Vec<f64> = potentials.iter().map(|p| p.2).collect();
    let relation = relations_from_potentials(&xs, &ys, &ts, sigma, kappa, e.coordinate_regime);

    let model = AugmentedHmm {
        n_states: n,
        obs_dims: obs_dims.to_vec(),
        transition: a,
        observation: bs,
        relation,
        initial_state: 0,
        coordinate_regime: e.coordinate_regime,
        constraint_regime,
    };
    model.check_structure()?;
    Ok(model)
}

/// K-means initialization over accumulated global positions: clusters
/// become states, the walk over cluster labels provides transition and
/// observation counts, centroids become positional potentials.
pub fn init_model_kmeans(
    e: &ExperienceSequence,
    n: usize,
    constraint_regime: ConstraintRegime,
    obs_dims: &[usize],
    config: &InitConfig,
) -> Result<AugmentedHmm> {
    if e.coordinate_regime != CoordinateRegime::Global {
        return Err(OdoHmmError::Input(
            "k-means initialization requires globally-referenced odometry".into(),
        ));
    }
    e.validate_against(obs_dims)?;
    let t_len = e.len();
    // accumulated positions and headings, position 0 at the origin
    let mut points = Vec::with_capacity(t_len);
    let (mut px, mut py, mut ph) = (0.0_f64, 0.0_f64, 0.0_f64);
    points.push((px, py, ph));
    for r in e.odo.iter().skip(1) {
        px += r.x;
        py += r.y;
        ph += r.theta;
        points.push((px, py, ph));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut taken = std::collections::HashSet::new();
    while centroids.len() < n {
        let idx = rng.gen_range(0..t_len);
        if taken.insert(idx) || taken.len() >= t_len {
            centroids.push((points[idx].0, points[idx].1));
        }
    }

    let mut assignment = vec![0usize; t_len];
    for _round in 0..200 {
        let mut changed = false;
        for (t, p) in points.iter().enumerate() {
            let nearest = (0..n)
                .min_by(|&a, &b| {
                    let da = (p.0 - centroids[a].0).powi(2) + (p.1 - centroids[a].1).powi(2);
                    let db = (p.0 - centroids[b].0).powi(2) + (p.1 - centroids[b].1).powi(2);
                    da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                })
                .unwrap();
            if assignment[t] != nearest {
                assignment[t] = nearest;
                changed = true;
            }
        }
        let mut sums = vec![(0.0_f64, 0.0_f64, 0usize); n];
        for (t, p) in points.iter().enumerate() {
            let s = &mut sums[assignment[t]];
            s.0 += p.0;
            s.1 += p.1;
            s.2 += 1;
        }
        for k in 0..n {
            if sums[k].2 == 0 {
                // reseed an empty cluster from the point farthest from its
                // current centroid
                let far = points
                    .iter()
                    .enumerate()
                    .max_by(|(ta, a), (tb, b)| {
                        let ca = centroids[assignment[*ta]];
                        let cb = centroids[assignment[*tb]];
                        let da = (a.0 - ca.0).powi(2) + (a.1 - ca.1).powi(2);
                        let db = (b.0 - cb.0).powi(2) + (b.1 - cb.1).powi(2);
                        da.partial_cmp(&db).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                log::warn!("k-means cluster {k} empty; reseeding from point {far}");
                centroids[k] = (points[far].0, points[far].1);
                changed = true;
            } else {
                centroids[k] = (sums[k].0 / sums[k].2 as f64, sums[k].1 / sums[k].2 as f64);
            }
        }
        if !changed {
            break;
        }
    }

    let (a, bs) = matrices_from_tagging(&assignment, e, n, obs_dims, config.prob_floor);

    // heading potential: circular mean of accumulated headings per cluster
    let mut thetas = vec![0.0_f64; n];
    for k in 0..n {
        let (mut s, mut c) = (0.0_f64, 0.0_f64);
        for (t, p) in points.iter().enumerate() {
            if assignment[t] == k {
                s += p.2.sin();
                c += p.2.cos();
            }
        }
        if s != 0.0 || c != 0.0 {
            thetas[k] = s.atan2(c);
        }
    }
    let xs: Vec<f64> = centroids.iter().map(|c| c.0).collect();
    let ys: Vec<f64> = centroids.iter().map(|c| c.1).collect();
    let relation = relations_from_potentials(
        &xs,
        &ys,
        &thetas,
        |_, _| (config.default_sigma, config.default_sigma),
        |_, _| config.default_kappa,
        CoordinateRegime::Global,
    );

    let model = AugmentedHmm {
        n_states: n,
        obs_dims: obs_dims.to_vec(),
        transition: a,
        observation: bs,
        relation,
        initial_state: assignment[0],
        coordinate_regime: CoordinateRegime::Global,
        constraint_regime,
    };
    model.check_structure()?;
    Ok(model)
}

/// Uniform-random initialization: Dirichlet(1) rows for A and B, relation
/// potentials uniform within the accumulated-position bounding box.
pub fn init_model_random(
    n: usize,
    obs_dims: &[usize],
    e: &ExperienceSequence,
    coordinate_regime: CoordinateRegime,
    constraint_regime: ConstraintRegime,
    config: &InitConfig,
) -> Result<AugmentedHmm> {
    use std::f64::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dirichlet_row = |len: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..len).map(|_| -rng.gen::<f64>().ln()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    };

    let mut transition = Array2::zeros((n, n));
    for i in 0..n {
        for (j, v) in dirichlet_row(n).into_iter().enumerate() {
            transition[(i, j)] = v;
        }
    }
    let mut observation = Vec::with_capacity(obs_dims.len());
    for &m in obs_dims {
        let mut b = Array2::zeros((n, m));
        for i in 0..n {
            for (j, v) in dirichlet_row(m).into_iter().enumerate() {
                b[(i, j)] = v;
            }
        }
        observation.push(b);
    }

    // bounding box of the accumulated positions
    let (mut px, mut py) = (0.0_f64, 0.0_f64);
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    for r in e.odo.iter().skip(1) {
        px += r.x;
        py += r.y;
        lo_x = lo_x.min(px);
        hi_x = hi_x.max(px);
        lo_y = lo_y.min(py);
        hi_y = hi_y.max(py);
    }
    if hi_x - lo_x < 1.0 {
        hi_x = lo_x + 1.0;
    }
    if hi_y - lo_y < 1.0 {
        hi_y = lo_y + 1.0;
    }
    let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(lo_x..hi_x)).collect();
    let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(lo_y..hi_y)).collect();
    let ts: Vec<f64> = (0..n).map(|_| rng.gen_range(-PI..PI)).collect();
    let relation = relations_from_potentials(
        &xs,
        &ys,
        &ts,
        |_, _| (config.default_sigma, config.default_sigma),
        |_, _| config.default_kappa,
        coordinate_regime,
    );

    let model = AugmentedHmm {
        n_states: n,
        obs_dims: obs_dims.to_vec(),
        transition,
        observation,
        relation,
        initial_state: 0,
        coordinate_regime,
        constraint_regime,
    };
    model.check_structure()?;
    Ok(model)
}
