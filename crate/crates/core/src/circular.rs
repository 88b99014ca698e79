//! Von Mises distribution machinery: modified Bessel functions, density,
//! weighted maximum-likelihood estimation, and Bessel-ratio inversion.
//!
//! Heading changes between states are modeled as von Mises-distributed.
//! The concentration parameter κ plays the role of an inverse variance;
//! its ML estimate requires inverting the ratio I1(κ)/I0(κ), which has no
//! closed form. We invert it with a precomputed table plus bisection.

use rand::Rng;
use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{OdoHmmError, Result};

/// Smallest admissible concentration. Below this the distribution is
/// indistinguishable from uniform on the circle.
pub const KAPPA_MIN: f64 = 1e-3;
/// Largest admissible concentration. Chosen so e^κ stays inside the f64
/// dynamic range once divided by I0(κ).
pub const KAPPA_MAX: f64 = 700.0;

const RATIO_TABLE_SIZE: usize = 2048;

/// Normalize an angle to (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Modified Bessel function of the first kind, order 0, by power series.
pub fn bessel_i0(kappa: f64) -> Result<f64> {
    check_kappa_range(kappa)?;
    let half = kappa / 2.0;
    let x2 = half * half;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut r = 1.0_f64;
    loop {
        term *= x2 / (r * r);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
        r += 1.0;
    }
    Ok(sum)
}

/// Modified Bessel function of the first kind, order 1, by power series.
pub fn bessel_i1(kappa: f64) -> Result<f64> {
    check_kappa_range(kappa)?;
    let half = kappa / 2.0;
    let x2 = half * half;
    let mut term = half;
    let mut sum = half;
    let mut r = 1.0_f64;
    loop {
        term *= x2 / (r * (r + 1.0));
        sum += term;
        if term < sum.abs() * 1e-17 + f64::MIN_POSITIVE {
            break;
        }
        r += 1.0;
    }
    Ok(sum)
}

fn check_kappa_range(kappa: f64) -> Result<()> {
    if !(0.0..=KAPPA_MAX).contains(&kappa) {
        return Err(OdoHmmError::Range(format!(
            "kappa {kappa} outside [0, {KAPPA_MAX}]"
        )));
    }
    Ok(())
}

/// log I0(κ). I0(700) is still finite in f64, so a direct log suffices.
pub fn log_bessel_i0(kappa: f64) -> Result<f64> {
    Ok(bessel_i0(kappa)?.ln())
}

/// Von Mises parameters: mean direction and concentration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VonMisesParams {
    pub mu: f64,
    pub kappa: f64,
}

impl VonMisesParams {
    pub fn new(mu: f64, kappa: f64) -> Self {
        Self {
            mu: wrap_angle(mu),
            kappa: kappa.clamp(KAPPA_MIN, KAPPA_MAX),
        }
    }

    /// Density f(θ) = e^{κ cos(θ−μ)} / (2π I0(κ)), evaluated in log space.
    pub fn density(&self, theta: f64) -> f64 {
        self.log_density(theta).exp()
    }

    pub fn log_density(&self, theta: f64) -> f64 {
        let log_i0 = log_bessel_i0(self.kappa).expect("kappa clamped on construction");
        self.kappa * (theta - self.mu).cos() - (2.0 * PI).ln() - log_i0
    }

    /// Draw a sample via the Best-Fisher (1979) wrapped-Cauchy rejection scheme.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let kappa = self.kappa;
        if kappa < 1e-8 {
            return wrap_angle(rng.gen_range(-PI..PI));
        }
        let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
        let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
        let r = (1.0 + rho * rho) / (2.0 * rho);
        loop {
            let u1: f64 = rng.gen();
            let z = (PI * u1).cos();
            let f = (1.0 + r * z) / (r + z);
            let c = kappa * (r - f);
            let u2: f64 = rng.gen();
            if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
                let u3: f64 = rng.gen();
                let theta = if u3 > 0.5 { f.acos() } else { -f.acos() };
                return wrap_angle(self.mu + theta);
            }
        }
    }
}

/// A weighted set of angles; weights are expected counts from EM.
#[derive(Debug, Clone)]
pub struct CircularSample {
    pub angles: Vec<f64>,
    pub weights: Option<Vec<f64>>,
}

impl CircularSample {
    pub fn unweighted(angles: Vec<f64>) -> Self {
        Self { angles, weights: None }
    }

    pub fn weighted(angles: Vec<f64>, weights: Vec<f64>) -> Self {
        debug_assert_eq!(angles.len(), weights.len());
        Self { angles, weights: Some(weights) }
    }
}

/// Weighted circular mean: direction of the resultant vector plus its
/// normalized length in [0, 1].
///
/// Returns an error when the resultant vanishes (e.g. two antipodal
/// samples of equal weight); the mean direction is undefined there and
/// the caller decides the fallback.
pub fn circular_mean(sample: &CircularSample) -> Result<(f64, f64)> {
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut total = 0.0;
    for (i, &theta) in sample.angles.iter().enumerate() {
        let w = sample.weights.as_ref().map_or(1.0, |ws| ws[i]);
        sx += w * theta.cos();
        sy += w * theta.sin();
        total += w;
    }
    if total <= 0.0 {
        return Err(OdoHmmError::Range("circular mean of zero total weight".into()));
    }
    let resultant = (sx * sx + sy * sy).sqrt() / total;
    if resultant < 1e-12 {
        return Err(OdoHmmError::UndefinedMean);
    }
    Ok((sy.atan2(sx), resultant))
}

/// The ratio A(κ) = I1(κ)/I0(κ), monotone increasing from 0 towards 1.
pub fn bessel_ratio(kappa: f64) -> Result<f64> {
    Ok(bessel_i1(kappa)? / bessel_i0(kappa)?)
}

struct RatioTable {
    kappas: Vec<f64>,
    ratios: Vec<f64>,
}

fn ratio_table() -> &'static RatioTable {
    static TABLE: OnceLock<RatioTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut kappas = Vec::with_capacity(RATIO_TABLE_SIZE);
        let mut ratios = Vec::with_capacity(RATIO_TABLE_SIZE);
        let log_min = KAPPA_MIN.ln();
        let log_max = KAPPA_MAX.ln();
        for i in 0..RATIO_TABLE_SIZE {
            let frac = i as f64 / (RATIO_TABLE_SIZE - 1) as f64;
            let kappa = (log_min + frac * (log_max - log_min)).exp().min(KAPPA_MAX);
            kappas.push(kappa);
            ratios.push(bessel_ratio(kappa).expect("kappa within range"));
        }
        RatioTable { kappas, ratios }
    })
}

/// Invert A(κ) = I1(κ)/I0(κ): find κ with A(κ) = r, to 1e-8 in the ratio.
///
/// r = 0 maps to the κ floor; r at or beyond A(κ_max) clamps to κ_max.
pub fn invert_bessel_ratio(r: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&r) {
        return Err(OdoHmmError::Range(format!("bessel ratio {r} outside [0, 1)")));
    }
    let table = ratio_table();
    if r <= table.ratios[0] {
        return Ok(KAPPA_MIN);
    }
    if r >= *table.ratios.last().unwrap() {
        return Ok(KAPPA_MAX);
    }
    // Bracket from the table, then bisect.
    let idx = table.ratios.partition_point(|&x| x < r);
    let mut lo = table.kappas[idx - 1];
    let mut hi = table.kappas[idx];
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let val = bessel_ratio(mid)?;
        if (val - r).abs() <= 1e-9 {
            return Ok(mid);
        }
        if val < r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Weighted ML fit of von Mises parameters: mean from the circular mean,
/// κ from ratio inversion of the resultant length (floored at κ_min).
pub fn estimate_von_mises(sample: &CircularSample) -> Result<VonMisesParams> {
    let (mu, resultant) = circular_mean(sample)?;
    let r = resultant.clamp(0.0, 1.0 - 1e-15);
    let kappa = invert_bessel_ratio(r)?;
    Ok(VonMisesParams::new(mu, kappa))
}
