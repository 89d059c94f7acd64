use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::graph::GraphTopology;
use crate::nn::Ctx;
use crate::{Error, Result};

/// How the first-pass emotion attention reshapes the second graph pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Re-weight word → emotion edges with `softmax(h_emo)`.
    Soft,
    /// Drop emotion nodes outside the OTSU-selected relevant set.
    #[default]
    Hard,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Soft => "soft",
            Strategy::Hard => "hard",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Strategy::Soft),
            "hard" => Ok(Strategy::Hard),
            other => Err(Error::Config(format!("unknown strategy {other:?}, expected soft or hard"))),
        }
    }
}

pub const MAX_RELEVANT: usize = 5;
pub const SOFT_TOP: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct OtsuSplit {
    pub relevant: BTreeSet<usize>,
    pub irrelevant: BTreeSet<usize>,
    pub variance: f64,
}

/// Ids ordered by descending value, equal values by ascending id.
pub fn ranking(values: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..values.len()).collect();
    ids.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    ids
}

pub fn top_k(values: &[f64], k: usize) -> BTreeSet<usize> {
    ranking(values).into_iter().take(k).collect()
}

/// Splits `values` into a top-ranked relevant set and the rest by maximal
/// between-class variance, trying `r = 1..=min(max_relevant, P − 1)`.
pub fn otsu_split(values: &[f64], max_relevant: usize) -> Result<OtsuSplit> {
    let p = values.len();
    if p < 2 {
        return Err(Error::Invalid(format!("OTSU split needs at least 2 values, got {p}")));
    }
    if max_relevant == 0 {
        return Err(Error::Invalid("max_relevant must be positive".into()));
    }
    let order = ranking(values);
    // Offsets from the top value keep equal inputs exactly equal.
    let top = values[order[0]];
    let d: Vec<f64> = order.iter().map(|&i| values[i] - top).collect();
    let total: f64 = d.iter().sum();
    let mu = total / p as f64;
    let (mut best_r, mut best_var) = (1, f64::NEG_INFINITY);
    let mut head = 0.0;
    for r in 1..=max_relevant.min(p - 1) {
        head += d[r - 1];
        let mu_v = head / r as f64;
        let mu_rest = (total - head) / (p - r) as f64;
        let w = r as f64 / p as f64;
        let var = w * (mu - mu_v).powi(2) + (1.0 - w) * (mu - mu_rest).powi(2);
        if var > best_var {
            best_var = var;
            best_r = r;
        }
    }
    let relevant: BTreeSet<usize> = order[..best_r].iter().copied().collect();
    let irrelevant = order[best_r..].iter().copied().collect();
    Ok(OtsuSplit { relevant, irrelevant, variance: best_var })
}

#[derive(Clone, Debug)]
pub struct StrategyOutcome {
    pub mode: Strategy,
    pub h_emo: Vec<f64>,
    /// `softmax(h_emo)` values (soft mode).
    pub soft_label: Option<Vec<f64>>,
    pub relevant: Option<BTreeSet<usize>>,
    pub irrelevant: Option<BTreeSet<usize>>,
    /// Emotions entering the correlation loss: top-3 (soft) or relevant (hard).
    pub selected: BTreeSet<usize>,
}

/// Result of [`apply_strategy`]: the outcome plus the modified second-pass graph.
pub struct StrategyPlan {
    pub outcome: StrategyOutcome,
    pub topology: GraphTopology,
    /// `[1 × P]` word → emotion override, on the tape.
    pub edge_override: Option<Var>,
}

pub fn apply_strategy(ctx: &mut Ctx, mode: Strategy, h_emo: Var, base: &GraphTopology) -> Result<StrategyPlan> {
    let values = ctx.tape.value(h_emo).data().to_vec();
    match mode {
        Strategy::Soft => {
            let label = ctx.tape.softmax(h_emo, 1)?;
            let soft = ctx.tape.value(label).data().to_vec();
            let selected = top_k(&values, SOFT_TOP);
            let outcome = StrategyOutcome {
                mode,
                h_emo: values,
                soft_label: Some(soft),
                relevant: None,
                irrelevant: None,
                selected,
            };
            Ok(StrategyPlan { outcome, topology: base.clone(), edge_override: Some(label) })
        }
        Strategy::Hard => {
            let split = otsu_split(&values, MAX_RELEVANT)?;
            let topology = base.without_emotions(&split.irrelevant);
            let outcome = StrategyOutcome {
                mode,
                h_emo: values,
                soft_label: None,
                selected: split.relevant.clone(),
                relevant: Some(split.relevant),
                irrelevant: Some(split.irrelevant),
            };
            Ok(StrategyPlan { outcome, topology, edge_override: None })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn two_clusters() {
        let s = otsu_split(&[0.9, 0.85, 0.1, 0.05], 5).unwrap();
        assert_eq!(s.relevant, ids(&[0, 1]));
        assert_eq!(s.irrelevant, ids(&[2, 3]));
    }

    #[test]
    fn equal_values_pick_lowest_id() {
        let s = otsu_split(&[0.1; 6], 5).unwrap();
        assert_eq!(s.relevant, ids(&[0]));
        assert_eq!(s.variance, 0.0);
    }

    #[test]
    fn dominant_value() {
        let s = otsu_split(&[0.2, 0.2, 3.0, 0.2, 0.2], 5).unwrap();
        assert_eq!(s.relevant, ids(&[2]));
    }

    #[test]
    fn relevant_set_is_capped() {
        let mut v = vec![1.0; 10];
        v.extend([0.0; 2]);
        let s = otsu_split(&v, 5).unwrap();
        assert!(s.relevant.len() <= 5);
    }

    #[test]
    fn rejects_single_value() {
        assert!(otsu_split(&[1.0], 5).is_err());
    }

    #[test]
    fn top_k_ties_go_to_lower_id() {
        assert_eq!(top_k(&[0.5, 0.9, 0.5, 0.5], 3), ids(&[0, 1, 2]));
    }

    #[test]
    fn strategy_parses() {
        assert_eq!("soft".parse::<Strategy>().unwrap(), Strategy::Soft);
        assert!("medium".parse::<Strategy>().is_err());
        assert_eq!(Strategy::Hard.to_string(), "hard");
    }
}
