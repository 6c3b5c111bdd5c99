//! Training loop, frozen-model evaluation, the cross-domain protocol and its
//! generalization summary, and report files.

mod eval;
mod report;
mod train;

pub use eval::{
    cross_matrix, evaluate, summarize, Confusion, Evaluation, GeneralizationSummary, ResultMatrix, SampleRecord,
};
pub use report::{matrix_csv, parse_matrix_csv, render_markdown, write_predictions_csv, write_report, SummaryFile};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};

use rayon::prelude::*;

use crate::data::{Domain, ImageSample, Label};
use crate::error::{Error, Result};
use crate::spectral::spectral_preprocess;
use crate::tensor::Tensor;

/// Samples converted once into network inputs: CHW pixels and spectral maps.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub size: usize,
    pub ids: Vec<u64>,
    pub domains: Vec<Domain>,
    pub labels: Vec<Label>,
    images: Vec<f64>,
    spectra: Vec<f64>,
}

impl PreparedSet {
    pub fn new(samples: &[ImageSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Validation("empty sample set".into()))?;
        let size = first.pixels.width;
        if let Some(bad) = samples
            .iter()
            .find(|s| s.pixels.width != size || s.pixels.height != size || s.pixels.channels != 3)
        {
            return Err(Error::dim(
                "prepare",
                "height/width",
                format!("sample {} of {} is not {size}x{size}x3", bad.id, bad.domain),
            ));
        }
        let maps = samples
            .par_iter()
            .map(|s| spectral_preprocess(&s.pixels).map(|m| m.to_chw()))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedSet {
            size,
            ids: samples.iter().map(|s| s.id).collect(),
            domains: samples.iter().map(|s| s.domain).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
            images: samples.iter().flat_map(|s| s.pixels.to_chw()).collect(),
            spectra: maps.concat(),
        })
    }

    /// Concatenation of two sets of the same image size.
    pub fn join(mut self, other: &PreparedSet) -> Result<Self> {
        if self.size != other.size {
            return Err(Error::dim(
                "join",
                "height/width",
                format!("{} vs {}", self.size, other.size),
            ));
        }
        self.ids.extend(&other.ids);
        self.domains.extend(&other.domains);
        self.labels.extend(&other.labels);
        self.images.extend(&other.images);
        self.spectra.extend(&other.spectra);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Image and spectral-map tensors `B x 3 x S x S` for the given rows.
    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Tensor)> {
        let per = 3 * self.size * self.size;
        let gather = |src: &[f64]| {
            rows.iter()
                .flat_map(|&r| src[r * per..(r + 1) * per].iter().copied())
                .collect()
        };
        let shape = [rows.len(), 3, self.size, self.size];
        Ok((
            Tensor::new(shape, gather(&self.images))?,
            Tensor::new(shape, gather(&self.spectra))?,
        ))
    }
}

/// Largest `| ||row|| - 1 |` over the rows of a row-major matrix. All-zero
/// rows (normalized from a zero embedding) have no direction and are skipped.
pub fn max_norm_deviation(rows: &[f64], width: usize) -> f64 {
    rows.chunks_exact(width)
        .filter(|r| r.iter().any(|&v| v != 0.0))
        .map(|r| (r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max)
}
