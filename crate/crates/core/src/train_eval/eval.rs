use serde::{Deserialize, Serialize};

use super::{max_norm_deviation, PreparedSet};
use crate::data::{Domain, Label};
use crate::error::{Error, Result};
use crate::model::RcdnModel;

const EVAL_BATCH: usize = 64;

/// Counts with "fake" as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub true_negative: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_positive + self.true_negative + self.false_positive + self.false_negative
    }

    pub fn accuracy(&self) -> f64 {
        (self.true_positive + self.true_negative) as f64 / self.total() as f64
    }

    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Fake, Label::Fake) => self.true_positive += 1,
            (Label::Real, Label::Real) => self.true_negative += 1,
            (Label::Real, Label::Fake) => self.false_positive += 1,
            (Label::Fake, Label::Real) => self.false_negative += 1,
        }
    }
}

/// One row of the per-sample predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub domain: Domain,
    pub label: Label,
    /// Probability of the fake class.
    pub score: f64,
    pub prediction: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: Confusion,
    pub records: Vec<SampleRecord>,
    pub max_norm_deviation: f64,
    pub distances: Vec<f64>,
}

/// Accuracy of a frozen model over a labelled set (argmax, ties to real).
pub fn evaluate(model: &RcdnModel, set: &PreparedSet) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty test set".into()));
    }
    let mut confusion = Confusion::default();
    let mut records = Vec::with_capacity(set.len());
    let mut distances = Vec::with_capacity(set.len());
    let mut worst = 0.0f64;
    let rows: Vec<usize> = (0..set.len()).collect();
    for chunk in rows.chunks(EVAL_BATCH) {
        let (images, spectra) = set.batch(chunk)?;
        let out = model.infer(&images, &spectra)?;
        worst = worst.max(max_norm_deviation(&out.unit, out.embed_dim));
        distances.extend(&out.distances);
        for (&r, p) in chunk.iter().zip(out.predictions()) {
            confusion.record(set.labels[r], p.label);
            records.push(SampleRecord {
                id: set.ids[r],
                domain: set.domains[r],
                label: set.labels[r],
                score: p.score,
                prediction: p.label,
            });
        }
    }
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        confusion,
        records,
        max_norm_deviation: worst,
        distances,
    })
}

/// Accuracies with rows = training domain and columns = test domain, both in
/// FE, I2I, T2I order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultMatrix {
    pub cells: [[f64; 3]; 3],
}

impl ResultMatrix {
    pub const DOMAINS: [Domain; 3] = Domain::FORGED;

    pub fn new(cells: [[f64; 3]; 3]) -> Result<Self> {
        if cells.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!("accuracies must lie in [0, 1]: {cells:?}")));
        }
        Ok(ResultMatrix { cells })
    }

    pub fn diagonal(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.cells[i][i])
    }

    /// Off-diagonal cells in row order.
    pub fn off_diagonal(&self) -> [f64; 6] {
        let mut out = [0.0; 6];
        let mut k = 0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    out[k] = self.cells[i][j];
                    k += 1;
                }
            }
        }
        out
    }
}

/// In-domain and cross-domain averages with their difference and ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationSummary {
    pub in_domain_avg: f64,
    pub cross_avg: f64,
    pub gap: f64,
    pub ratio: f64,
}

pub fn summarize(matrix: &ResultMatrix) -> Result<GeneralizationSummary> {
    let in_domain_avg = matrix.diagonal().iter().sum::<f64>() / 3.0;
    let cross_avg = matrix.off_diagonal().iter().sum::<f64>() / 6.0;
    if in_domain_avg == 0.0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(GeneralizationSummary {
        in_domain_avg,
        cross_avg,
        gap: in_domain_avg - cross_avg,
        ratio: cross_avg / in_domain_avg,
    })
}

/// Evaluates each model (trained on FE, I2I, T2I in that order) on each test
/// set (same order). Returns the matrix and the evaluations, row-major.
pub fn cross_matrix(models: [&RcdnModel; 3], tests: [&PreparedSet; 3]) -> Result<(ResultMatrix, Vec<Evaluation>)> {
    let mut cells = [[0.0; 3]; 3];
    let mut evals = Vec::with_capacity(9);
    for (i, model) in models.iter().enumerate() {
        for (j, set) in tests.iter().enumerate() {
            let e = evaluate(model, set)?;
            cells[i][j] = e.accuracy;
            evals.push(e);
        }
    }
    Ok((ResultMatrix::new(cells)?, evals))
}
