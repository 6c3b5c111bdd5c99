//! Training objective: cross-entropy plus a center-pull/fake-push hinge and a
//! batch-level separation hinge, all recorded on the tape.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Tape, Var};

/// Indices of real and fake samples within one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPartition {
    pub real: Vec<usize>,
    pub fake: Vec<usize>,
}

impl BatchPartition {
    pub fn from_labels(labels: &[Label]) -> Self {
        let (real, fake) = (0..labels.len()).partition(|&i| labels[i] == Label::Real);
        BatchPartition { real, fake }
    }

    pub fn len(&self) -> usize {
        self.real.len() + self.fake.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that the two sets are disjoint and cover `0..batch`.
    pub fn validate(&self, batch: usize) -> Result<()> {
        let mut seen = vec![false; batch];
        for &i in self.real.iter().chain(&self.fake) {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::Validation(format!("sample {i} appears twice in the partition"))),
                None => {
                    return Err(Error::dim(
                        "partition",
                        "index",
                        format!("{i} out of range for batch {batch}"),
                    ))
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Validation("partition does not cover the batch".into()));
        }
        Ok(())
    }
}

/// Margin and term weights of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub margin: f64,
    pub lambda_center: f64,
    pub lambda_sep: f64,
}

impl From<&ModelConfig> for LossWeights {
    fn from(c: &ModelConfig) -> Self {
        LossWeights {
            margin: c.margin,
            lambda_center: c.lambda_center,
            lambda_sep: c.lambda_sep,
        }
    }
}

/// A loss term on the tape; `var` is `None` when nothing contributes.
#[derive(Clone, Copy, Debug)]
pub struct Term {
    pub var: Option<Var>,
    pub skipped: bool,
}

impl Term {
    pub fn value(&self, tape: &Tape) -> f64 {
        self.var.map_or(0.0, |v| tape.scalar(v))
    }
}

/// Scalar values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_center: f64,
    pub l_sep: f64,
    pub total: f64,
    pub center_skipped: bool,
    pub sep_skipped: bool,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_center, self.l_sep, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `mean_R d^2 + mean_F max(0, m - d)`. An empty side contributes nothing and
/// marks the term as skipped.
pub fn center_loss(tape: &mut Tape, distances: Var, part: &BatchPartition, margin: f64) -> Result<Term> {
    let mut parts = Vec::with_capacity(2);
    if !part.real.is_empty() {
        let d = tape.gather(distances, &part.real)?;
        let sq = tape.square(d);
        parts.push(tape.mean(sq));
    }
    if !part.fake.is_empty() {
        let d = tape.gather(distances, &part.fake)?;
        let slack = tape.affine(d, -1.0, margin);
        let hinge = tape.relu(slack);
        parts.push(tape.mean(hinge));
    }
    let skipped = parts.len() < 2;
    let var = match parts[..] {
        [] => None,
        [a] => Some(a),
        [a, b] => Some(tape.add(a, b)?),
        _ => unreachable!(),
    };
    Ok(Term { var, skipped })
}

/// `max(0, mean_R d - mean_F d + m)`; skipped unless both sides are present.
pub fn separation_loss(tape: &mut Tape, distances: Var, part: &BatchPartition, margin: f64) -> Result<Term> {
    if part.real.is_empty() || part.fake.is_empty() {
        return Ok(Term {
            var: None,
            skipped: true,
        });
    }
    let real = tape.gather(distances, &part.real)?;
    let real = tape.mean(real);
    let fake = tape.gather(distances, &part.fake)?;
    let fake = tape.mean(fake);
    let diff = tape.sub(real, fake)?;
    let shifted = tape.affine(diff, 1.0, margin);
    Ok(Term {
        var: Some(tape.relu(shifted)),
        skipped: false,
    })
}

/// `CE + lambda_center * center + lambda_sep * separation` on one tape.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[Label],
    distances: Var,
    part: &BatchPartition,
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let n = labels.len();
    let rows = tape.shape(logits).first().copied().unwrap_or(0);
    let dists = tape.shape(distances).first().copied().unwrap_or(0);
    if rows != n || dists != n || part.len() != n {
        return Err(Error::dim(
            "total_loss",
            "batch",
            format!("logits {rows}, labels {n}, distances {dists}, partition {}", part.len()),
        ));
    }
    let classes: Vec<usize> = labels.iter().map(|l| l.class()).collect();
    let ce = tape.softmax_cross_entropy(logits, &classes)?;
    let center = center_loss(tape, distances, part, weights.margin)?;
    let sep = separation_loss(tape, distances, part, weights.margin)?;
    let mut total = ce;
    for (term, lambda) in [(center, weights.lambda_center), (sep, weights.lambda_sep)] {
        if let Some(v) = term.var {
            let scaled = tape.affine(v, lambda, 0.0);
            total = tape.add(total, scaled)?;
        }
    }
    let breakdown = LossBreakdown {
        l_cls: tape.scalar(ce),
        l_center: center.value(tape),
        l_sep: sep.value(tape),
        total: tape.scalar(total),
        center_skipped: center.skipped,
        sep_skipped: sep.skipped,
    };
    Ok((total, breakdown))
}
