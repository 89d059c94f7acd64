use serde::Serialize;

use super::{AutodiffError, Tape, Tensor, Var};

/// Location and values of one checked gradient coordinate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst: Option<Coordinate>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of the recorded scalar `loss` against central
/// differences, perturbing each coordinate of `params` and replaying the tape.
///
/// Replay reuses every recorded attribute (masks, gather indices, dropout
/// seeds), so discrete choices made while recording stay fixed.
pub fn check_recorded(
    tape: &mut Tape,
    loss: Var,
    params: &[(String, Var)],
    epsilon: f64,
) -> Result<GradCheckReport, AutodiffError> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(AutodiffError::InvalidTensor(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let grads = tape.backward(loss)?;
    for (name, var) in params {
        if let Some(index) = grads.tensor(*var).data().iter().position(|g| !g.is_finite()) {
            return Err(AutodiffError::NonFinite { which: "analytic", param: name.clone(), index });
        }
    }
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    for (name, var) in params {
        let analytic = grads.tensor(*var);
        let start = var.id() + 1;
        for i in 0..analytic.numel() {
            let a = analytic.data()[i];
            let original = tape.value(*var).data()[i];
            tape.leaf_data_mut(*var)[i] = original + epsilon;
            tape.replay_from(start)?;
            let plus = tape.value(loss).data()[0];
            tape.leaf_data_mut(*var)[i] = original - epsilon;
            tape.replay_from(start)?;
            let minus = tape.value(loss).data()[0];
            tape.leaf_data_mut(*var)[i] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            if !numeric.is_finite() {
                return Err(AutodiffError::NonFinite { which: "numeric", param: name.clone(), index: i });
            }
            let rel = relative_error(a, numeric);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some(Coordinate { param: name.clone(), index: i, analytic: a, numeric, rel_error: rel });
            }
        }
    }
    tape.replay()?;
    Ok(report)
}

/// Records `program` once over fresh parameter leaves and checks it with
/// [`check_recorded`]. `program` receives the tape, the parameter handles in
/// the order of `params`, and `seed`.
pub fn finite_difference_check<E, F>(
    program: F,
    params: &[(String, Tensor)],
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport, E>
where
    E: From<AutodiffError>,
    F: FnOnce(&mut Tape, &[Var], u64) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = program(&mut tape, &vars, seed)?;
    let named: Vec<(String, Var)> = params.iter().map(|(n, _)| n.clone()).zip(vars).collect();
    Ok(check_recorded(&mut tape, loss, &named, epsilon)?)
}
