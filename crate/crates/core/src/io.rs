//! Plain-text serialization for models, environment specs, and experience
//! sequences.
//!
//! All formats are versioned UTF-8 documents designed to diff cleanly.
//! Floating-point values are written with 17 significant digits, which is
//! enough for `f64` round trips to be bit-exact.

use std::path::Path;

use ndarray::Array2;

use crate::error::{OdoHmmError, Result};
use crate::model::{
    AugmentedHmm, ConstraintRegime, CoordinateRegime, ExperienceSequence, OdoReading,
    RelationEntry,
};
use crate::sim::{EnvironmentSpec, StateSpec, OBS_COMPONENTS};

const MODEL_MAGIC: &str = "ODOHMM-MODEL v1";
const ENV_MAGIC: &str = "ODOHMM-ENV v1";
const SEQ_MAGIC: &str = "ODOHMM-SEQ v1";

/// 17 significant digits: exact f64 round trip.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn coordinate_regime_name(r: CoordinateRegime) -> &'static str {
    match r {
        CoordinateRegime::Global => "global",
        CoordinateRegime::StateRelative => "relative",
    }
}

pub fn parse_coordinate_regime(s: &str) -> Result<CoordinateRegime> {
    match s {
        "global" => Ok(CoordinateRegime::Global),
        "relative" => Ok(CoordinateRegime::StateRelative),
        other => Err(OdoHmmError::Parse(format!("unknown coordinate regime '{other}'"))),
    }
}

pub fn constraint_regime_name(r: ConstraintRegime) -> &'static str {
    match r {
        ConstraintRegime::AntiSymmetric => "antisym",
        ConstraintRegime::Additive => "additive",
    }
}

pub fn parse_constraint_regime(s: &str) -> Result<ConstraintRegime> {
    match s {
        "antisym" => Ok(ConstraintRegime::AntiSymmetric),
        "additive" => Ok(ConstraintRegime::Additive),
        other => Err(OdoHmmError::Parse(format!("unknown constraint regime '{other}'"))),
    }
}

/// Line-oriented reader with one-token lookahead and error positions.
pub(crate) struct Lines<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> Lines<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Self { lines, pos: 0 }
    }

    pub(crate) fn next(&mut self) -> Result<&'a str> {
        let line = self
            .lines
            .get(self.pos)
            .copied()
            .ok_or_else(|| OdoHmmError::Parse("unexpected end of document".into()))?;
        self.pos += 1;
        Ok(line)
    }

    pub(crate) fn expect(&mut self, literal: &str) -> Result<()> {
        let line = self.next()?;
        if line != literal {
            return Err(OdoHmmError::Parse(format!("expected '{literal}', found '{line}'")));
        }
        Ok(())
    }

    /// A `key value...` header line; returns the value tokens.
    pub(crate) fn field(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.next()?;
        let mut tokens = line.split_whitespace();
        let found = tokens.next().unwrap_or("");
        if found != key {
            return Err(OdoHmmError::Parse(format!("expected field '{key}', found '{found}'")));
        }
        Ok(tokens.collect())
    }

    pub(crate) fn scalar_field(&mut self, key: &str) -> Result<&'a str> {
        let tokens = self.field(key)?;
        if tokens.len() != 1 {
            return Err(OdoHmmError::Parse(format!("field '{key}' needs exactly one value")));
        }
        Ok(tokens[0])
    }
}

pub(crate) fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| OdoHmmError::Parse(format!("bad float '{s}'")))
}

pub(crate) fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| OdoHmmError::Parse(format!("bad integer '{s}'")))
}

fn parse_row(line: &str, expected: usize) -> Result<Vec<f64>> {
    let row: Vec<f64> =
        line.split_whitespace().map(parse_f64).collect::<Result<_>>()?;
    if row.len() != expected {
        return Err(OdoHmmError::Parse(format!(
            "expected {expected} values per row, found {}",
            row.len()
        )));
    }
    Ok(row)
}

// ---------------------------------------------------------------------------
// Model documents
// ---------------------------------------------------------------------------

pub fn model_to_string(model: &AugmentedHmm) -> String {
    let n = model.n_states;
    let mut out = format!("{MODEL_MAGIC}\nMODEL-HEADER\n");
    out.push_str(&format!("n-states {n}\n"));
    out.push_str(&format!("obs-components {}\n", model.obs_dims.len()));
    out.push_str("obs-dims");
    for d in &model.obs_dims {
        out.push_str(&format!(" {d}"));
    }
    out.push('\n');
    out.push_str(&format!(
        "coordinate-regime {}\n",
        coordinate_regime_name(model.coordinate_regime)
    ));
    out.push_str(&format!(
        "constraint-regime {}\n",
        constraint_regime_name(model.constraint_regime)
    ));
    out.push_str("MATRIX-A\n");
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| fmt(model.transition[(i, j)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    for (c, b) in model.observation.iter().enumerate() {
        out.push_str(&format!("MATRIX-B[{c}]\n"));
        for i in 0..n {
            let row: Vec<String> =
                (0..model.obs_dims[c]).map(|k| fmt(b[(i, k)])).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out.push_str("MATRIX-R\n");
    for row in &model.relation {
        for e in row {
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                fmt(e.mu_x),
                fmt(e.sigma_x),
                fmt(e.mu_y),
                fmt(e.sigma_y),
                fmt(e.mu_theta),
                fmt(e.kappa_theta)
            ));
        }
    }
    out.push_str(&format!("INITIAL-STATE\n{}\n", model.initial_state));
    out
}

pub fn model_from_str(text: &str) -> Result<AugmentedHmm> {
    let mut lines = Lines::new(text);
    lines.expect(MODEL_MAGIC)?;
    lines.expect("MODEL-HEADER")?;
    let n = parse_usize(lines.scalar_field("n-states")?)?;
    let components = parse_usize(lines.scalar_field("obs-components")?)?;
    let obs_dims: Vec<usize> = lines
        .field("obs-dims")?
        .into_iter()
        .map(parse_usize)
        .collect::<Result<_>>()?;
    if obs_dims.len() != components {
        return Err(OdoHmmError::Parse("obs-dims length disagrees with obs-components".into()));
    }
    let coordinate_regime = parse_coordinate_regime(lines.scalar_field("coordinate-regime")?)?;
    let constraint_regime = parse_constraint_regime(lines.scalar_field("constraint-regime")?)?;

    lines.expect("MATRIX-A")?;
    let mut transition = Array2::zeros((n, n));
    for i in 0..n {
        let row = parse_row(lines.next()?, n)?;
        for (j, v) in row.into_iter().enumerate() {
            transition[(i, j)] = v;
        }
    }
    let mut observation = Vec::with_capacity(components);
    for (c, &m) in obs_dims.iter().enumerate() {
        lines.expect(&format!("MATRIX-B[{c}]"))?;
        let mut b = Array2::zeros((n, m));
        for i in 0..n {
            let row = parse_row(lines.next()?, m)?;
            for (k, v) in row.into_iter().enumerate() {
                b[(i, k)] = v;
            }
        }
        observation.push(b);
    }
    lines.expect("MATRIX-R")?;
    let mut relation = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = Vec::with_capacity(n);
        for _ in 0..n {
            let v = parse_row(lines.next()?, 6)?;
            row.push(RelationEntry::new(v[0], v[1], v[2], v[3], v[4], v[5]));
        }
        relation.push(row);
    }
    lines.expect("INITIAL-STATE")?;
    let initial_state = parse_usize(lines.next()?)?;

    let model = AugmentedHmm {
        n_states: n,
        obs_dims,
        transition,
        observation,
        relation,
        initial_state,
        coordinate_regime,
        constraint_regime,
    };
    model.check_structure()?;
    Ok(model)
}

pub fn write_model(model: &AugmentedHmm, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_string(model))?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<AugmentedHmm> {
    model_from_str(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Environment spec documents
// ---------------------------------------------------------------------------

pub fn spec_to_string(spec: &EnvironmentSpec) -> String {
    let mut out = format!("{ENV_MAGIC}\n");
    out.push_str(&format!("name {}\n", spec.name));
    out.push_str(&format!(
        "coordinate-regime {}\n",
        coordinate_regime_name(spec.coordinate_regime)
    ));
    out.push_str(&format!(
        "constraint-regime {}\n",
        constraint_regime_name(spec.constraint_regime)
    ));
    out.push_str(&format!(
        "failure-rate {} {}\n",
        fmt(spec.failure_rate.0),
        fmt(spec.failure_rate.1)
    ));
    out.push_str(&format!(
        "obs-correctness {} {}\n",
        fmt(spec.obs_correctness.0),
        fmt(spec.obs_correctness.1)
    ));
    out.push_str(&format!("noise-fraction {}\n", fmt(spec.noise_fraction)));
    out.push_str(&format!("kappa-straight {}\n", fmt(spec.kappa_straight)));
    out.push_str(&format!("kappa-turn {}\n", fmt(spec.kappa_turn)));
    out.push_str(&format!("STATES {}\n", spec.states.len()));
    for s in &spec.states {
        let labels: Vec<String> = s.labels.iter().map(ToString::to_string).collect();
        out.push_str(&format!(
            "{} {} {} {}\n",
            fmt(s.x),
            fmt(s.y),
            fmt(s.heading),
            labels.join(" ")
        ));
    }
    out.push_str(&format!("PATH {}\n", spec.path.len()));
    for &(a, b) in &spec.path {
        out.push_str(&format!("{a} {b}\n"));
    }
    out
}

pub fn spec_from_str(text: &str) -> Result<EnvironmentSpec> {
    let mut lines = Lines::new(text);
    lines.expect(ENV_MAGIC)?;
    let name = lines.scalar_field("name")?.to_string();
    let coordinate_regime = parse_coordinate_regime(lines.scalar_field("coordinate-regime")?)?;
    let constraint_regime = parse_constraint_regime(lines.scalar_field("constraint-regime")?)?;
    let pair = |tokens: Vec<&str>, key: &str| -> Result<(f64, f64)> {
        if tokens.len() != 2 {
            return Err(OdoHmmError::Parse(format!("field '{key}' needs two values")));
        }
        Ok((parse_f64(tokens[0])?, parse_f64(tokens[1])?))
    };
    let failure_rate = pair(lines.field("failure-rate")?, "failure-rate")?;
    let obs_correctness = pair(lines.field("obs-correctness")?, "obs-correctness")?;
    let noise_fraction = parse_f64(lines.scalar_field("noise-fraction")?)?;
    let kappa_straight = parse_f64(lines.scalar_field("kappa-straight")?)?;
    let kappa_turn = parse_f64(lines.scalar_field("kappa-turn")?)?;

    let n = parse_usize(lines.scalar_field("STATES")?)?;
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        let tokens: Vec<&str> = lines.next()?.split_whitespace().collect();
        if tokens.len() != 3 + OBS_COMPONENTS {
            return Err(OdoHmmError::Parse(format!(
                "state line needs {} values",
                3 + OBS_COMPONENTS
            )));
        }
        states.push(StateSpec {
            x: parse_f64(tokens[0])?,
            y: parse_f64(tokens[1])?,
            heading: parse_f64(tokens[2])?,
            labels: tokens[3..].iter().map(|t| parse_usize(t)).collect::<Result<_>>()?,
        });
    }
    let m = parse_usize(lines.scalar_field("PATH")?)?;
    let mut path = Vec::with_capacity(m);
    for _ in 0..m {
        let tokens: Vec<&str> = lines.next()?.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(OdoHmmError::Parse("path line needs two state indices".into()));
        }
        path.push((parse_usize(tokens[0])?, parse_usize(tokens[1])?));
    }
    let spec = EnvironmentSpec {
        name,
        states,
        path,
        failure_rate,
        obs_correctness,
        noise_fraction,
        kappa_straight,
        kappa_turn,
        coordinate_regime,
        constraint_regime,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn write_spec(spec: &EnvironmentSpec, path: &Path) -> Result<()> {
    std::fs::write(path, spec_to_string(spec))?;
    Ok(())
}

pub fn read_spec(path: &Path) -> Result<EnvironmentSpec> {
    spec_from_str(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Experience sequence documents
// ---------------------------------------------------------------------------

pub fn sequence_to_string(e: &ExperienceSequence) -> String {
    let t_len = e.odo.len();
    let components = e.obs.first().map_or(0, Vec::len);
    let mut out = format!("{SEQ_MAGIC}\n");
    out.push_str(&format!("length {t_len}\n"));
    out.push_str(&format!("obs-components {components}\n"));
    out.push_str(&format!(
        "coordinate-regime {}\n",
        coordinate_regime_name(e.coordinate_regime)
    ));
    out.push_str(&format!("true-states {}\n", e.true_states.is_some()));
    out.push_str("STEPS\n");
    for t in 0..t_len {
        let r = &e.odo[t];
        out.push_str(&format!("{} {} {}", fmt(r.x), fmt(r.y), fmt(r.theta)));
        for &s in &e.obs[t] {
            out.push_str(&format!(" {s}"));
        }
        if let Some(states) = &e.true_states {
            out.push_str(&format!(" {}", states[t]));
        }
        out.push('\n');
    }
    out
}

pub fn sequence_from_str(text: &str) -> Result<ExperienceSequence> {
    let mut lines = Lines::new(text);
    lines.expect(SEQ_MAGIC)?;
    let t_len = parse_usize(lines.scalar_field("length")?)?;
    let components = parse_usize(lines.scalar_field("obs-components")?)?;
    let coordinate_regime = parse_coordinate_regime(lines.scalar_field("coordinate-regime")?)?;
    let has_truth = match lines.scalar_field("true-states")? {
        "true" => true,
        "false" => false,
        other => return Err(OdoHmmError::Parse(format!("bad true-states flag '{other}'"))),
    };
    lines.expect("STEPS")?;
    let mut odo = Vec::with_capacity(t_len);
    let mut obs = Vec::with_capacity(t_len);
    let mut true_states = has_truth.then(|| Vec::with_capacity(t_len));
    let expected = 3 + components + usize::from(has_truth);
    for _ in 0..t_len {
        let tokens: Vec<&str> = lines.next()?.split_whitespace().collect();
        if tokens.len() != expected {
            return Err(OdoHmmError::Parse(format!("step line needs {expected} values")));
        }
        odo.push(OdoReading {
            x: parse_f64(tokens[0])?,
            y: parse_f64(tokens[1])?,
            theta: parse_f64(tokens[2])?,
        });
        obs.push(
            tokens[3..3 + components]
                .iter()
                .map(|t| parse_usize(t))
                .collect::<Result<_>>()?,
        );
        if let Some(states) = true_states.as_mut() {
            states.push(parse_usize(tokens[expected - 1])?);
        }
    }
    Ok(ExperienceSequence { odo, obs, coordinate_regime, true_states })
}

pub fn write_sequence(e: &ExperienceSequence, path: &Path) -> Result<()> {
    std::fs::write(path, sequence_to_string(e))?;
    Ok(())
}

pub fn read_sequence(path: &Path) -> Result<ExperienceSequence> {
    sequence_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{build_environment, loop17_spec, sample_experience};

    fn loop_model() -> AugmentedHmm {
        let spec = loop17_spec(CoordinateRegime::StateRelative, ConstraintRegime::Additive);
        build_environment(&spec, 7).unwrap()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let model = loop_model();
        let text = model_to_string(&model);
        let back = model_from_str(&text).unwrap();
        assert_eq!(back.n_states, model.n_states);
        assert_eq!(back.obs_dims, model.obs_dims);
        assert_eq!(back.initial_state, model.initial_state);
        assert_eq!(back.coordinate_regime, model.coordinate_regime);
        assert_eq!(back.constraint_regime, model.constraint_regime);
        for i in 0..model.n_states {
            for j in 0..model.n_states {
                assert_eq!(
                    back.transition[(i, j)].to_bits(),
                    model.transition[(i, j)].to_bits()
                );
                assert_eq!(back.relation[i][j], model.relation[i][j]);
                assert_eq!(
                    back.relation[i][j].mu_theta.to_bits(),
                    model.relation[i][j].mu_theta.to_bits()
                );
            }
        }
        for (b1, b2) in back.observation.iter().zip(&model.observation) {
            assert_eq!(b1, b2);
        }
        // serialize-parse-serialize is a fixed point
        assert_eq!(model_to_string(&back), text);
    }

    #[test]
    fn spec_round_trip_rebuilds_identical_model() {
        let spec = loop17_spec(CoordinateRegime::Global, ConstraintRegime::AntiSymmetric);
        let back = spec_from_str(&spec_to_string(&spec)).unwrap();
        assert_eq!(back.name, spec.name);
        assert_eq!(back.path, spec.path);
        let m1 = build_environment(&spec, 3).unwrap();
        let m2 = build_environment(&back, 3).unwrap();
        assert_eq!(model_to_string(&m1), model_to_string(&m2));
    }

    #[test]
    fn sequence_round_trip_is_bit_exact() {
        let model = loop_model();
        let (e, _) = sample_experience(&model, 50, 21).unwrap();
        assert!(e.true_states.is_some());
        let text = sequence_to_string(&e);
        let back = sequence_from_str(&text).unwrap();
        assert_eq!(back.obs, e.obs);
        assert_eq!(back.true_states, e.true_states);
        assert_eq!(back.coordinate_regime, e.coordinate_regime);
        for (a, b) in back.odo.iter().zip(&e.odo) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
            assert_eq!(a.theta.to_bits(), b.theta.to_bits());
        }

        let mut blind = e.clone();
        blind.true_states = None;
        let back = sequence_from_str(&sequence_to_string(&blind)).unwrap();
        assert_eq!(back.true_states, None);
        assert_eq!(back.obs, blind.obs);
    }

    #[test]
    fn file_io_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let model = loop_model();
        let p = dir.path().join("m.model");
        write_model(&model, &p).unwrap();
        assert_eq!(model_to_string(&read_model(&p).unwrap()), model_to_string(&model));

        let spec = loop17_spec(CoordinateRegime::Global, ConstraintRegime::AntiSymmetric);
        let p = dir.path().join("e.env");
        write_spec(&spec, &p).unwrap();
        assert_eq!(spec_to_string(&read_spec(&p).unwrap()), spec_to_string(&spec));

        let (e, _) = sample_experience(&model, 20, 2).unwrap();
        let p = dir.path().join("s.seq");
        write_sequence(&e, &p).unwrap();
        assert_eq!(
            sequence_to_string(&read_sequence(&p).unwrap()),
            sequence_to_string(&e)
        );
    }

    #[test]
    fn malformed_documents_are_rejected() {
        assert!(model_from_str("nonsense").is_err());
        assert!(spec_from_str("ODOHMM-ENV v1\nname x\n").is_err());
        assert!(sequence_from_str("ODOHMM-SEQ v1\nlength zero\n").is_err());

        let model = loop_model();
        let text = model_to_string(&model);
        // corrupt one matrix value into a non-number
        let corrupted = text.replacen("e0", "ex", 1);
        assert!(model_from_str(&corrupted).is_err());
        // truncation is caught
        let truncated: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(model_from_str(&truncated).is_err());
    }
}
