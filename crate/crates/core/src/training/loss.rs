use std::collections::BTreeSet;

use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result};

/// `−log distribution[gold]`.
pub fn loss_emo(distribution: &[f64], gold: usize) -> Result<f64> {
    let p = distribution
        .get(gold)
        .ok_or_else(|| Error::Invalid(format!("gold emotion {gold} out of range for {} classes", distribution.len())))?;
    Ok(-p.ln())
}

/// Summed per-token loss of `targets` under row-wise log-probabilities
/// `log_probs` (`[T × V]`). With `smoothing = ε` each term is
/// `(1 − ε)·(−log p_y) + ε·mean_v(−log p_v)`.
pub fn loss_gen(log_probs: &Tensor, targets: &[usize], smoothing: f64) -> Result<f64> {
    let (t, v) = log_probs.dims2();
    if t != targets.len() {
        return Err(Error::Invalid(format!("{t} decoder steps for {} targets", targets.len())));
    }
    let mut total = 0.0;
    for (row, &y) in targets.iter().enumerate() {
        if y >= v {
            return Err(Error::Invalid(format!("target {y} out of range for vocabulary {v}")));
        }
        let lp = log_probs.row_slice(row);
        total += if smoothing == 0.0 {
            -lp[y]
        } else {
            let uniform = -lp.iter().sum::<f64>() / v as f64;
            (1.0 - smoothing) * -lp[y] + smoothing * uniform
        };
    }
    Ok(total)
}

/// `−Σ_{i<j ∈ selected} R[i][j] / |selected|`; zero for a single emotion.
pub fn loss_eco(r: &Tensor, selected: &BTreeSet<usize>) -> Result<f64> {
    let (p, _) = r.dims2();
    if selected.is_empty() || selected.iter().any(|&e| e >= p) {
        return Err(Error::Invalid(format!("invalid emotion selection {selected:?} for {p} emotions")));
    }
    let ids: Vec<usize> = selected.iter().copied().collect();
    let mut sum = 0.0;
    for (n, &i) in ids.iter().enumerate() {
        for &j in &ids[n + 1..] {
            sum += r.get(i, j);
        }
    }
    Ok(-sum / ids.len() as f64)
}

/// Generation loss on the tape.
pub struct GenLoss {
    pub loss: Var,
    /// Unsmoothed summed negative log-likelihood.
    pub nll: f64,
    pub tokens: usize,
}

pub fn gen_loss(tape: &mut Tape, logits: Var, targets: &[usize], smoothing: f64) -> Result<GenLoss> {
    let (t, v) = tape.value(logits).dims2();
    if t != targets.len() {
        return Err(Error::Invalid(format!("{t} decoder steps for {} targets", targets.len())));
    }
    let lp = tape.log_softmax(logits, 1)?;
    let flat: Vec<usize> = targets.iter().enumerate().map(|(row, &y)| row * v + y).collect();
    let picked = tape.gather(lp, &flat)?;
    let picked_sum = tape.sum_all(picked)?;
    let nll = -tape.value(picked_sum).data()[0];
    let loss = if smoothing == 0.0 {
        tape.scale(picked_sum, -1.0)?
    } else {
        let all = tape.sum_all(lp)?;
        let a = tape.scale(picked_sum, -(1.0 - smoothing))?;
        let b = tape.scale(all, -smoothing / v as f64)?;
        tape.add(a, b)?
    };
    Ok(GenLoss { loss, nll, tokens: t })
}

/// `−log_softmax(h_m)[gold]` on the tape.
pub fn emo_loss(tape: &mut Tape, h_m: Var, gold: usize) -> Result<Var> {
    let p = tape.value(h_m).numel();
    if gold >= p {
        return Err(Error::Invalid(format!("gold emotion {gold} out of range for {p} classes")));
    }
    let lp = tape.log_softmax(h_m, 1)?;
    let picked = tape.gather(lp, &[gold])?;
    Ok(tape.scale(picked, -1.0)?)
}

/// Correlation loss on the tape. The selection is a constant index set.
pub fn eco_loss(tape: &mut Tape, r: Var, selected: &BTreeSet<usize>) -> Result<Var> {
    let p = tape.shape(r)[0];
    if selected.is_empty() || selected.iter().any(|&e| e >= p) {
        return Err(Error::Invalid(format!("invalid emotion selection {selected:?} for {p} emotions")));
    }
    let ids: Vec<usize> = selected.iter().copied().collect();
    let pairs: Vec<usize> =
        ids.iter().enumerate().flat_map(|(n, &i)| ids[n + 1..].iter().map(move |&j| i * p + j)).collect();
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let picked = tape.gather(r, &pairs)?;
    let sum = tape.sum_all(picked)?;
    Ok(tape.scale(sum, -1.0 / ids.len() as f64)?)
}
