//! Synthetic real/forged image families, on-disk datasets and batching.

mod ppm;
pub mod probe;
mod synth;

pub use ppm::{decode_ppm, encode_ppm, load_ppm, save_ppm};
pub use synth::{signed_frequency, PatchRect, FE_BLEND_BORDER, GENERATOR_VERSION};

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::spectral::RealGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Classifier index: real 0, fake 1.
    pub fn class(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "REAL")]
    Real,
    #[serde(rename = "FE")]
    Fe,
    #[serde(rename = "I2I")]
    I2i,
    #[serde(rename = "T2I")]
    T2i,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Real, Domain::Fe, Domain::I2i, Domain::T2i];
    pub const FORGED: [Domain; 3] = [Domain::Fe, Domain::I2i, Domain::T2i];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Real => "REAL",
            Domain::Fe => "FE",
            Domain::I2i => "I2I",
            Domain::T2i => "T2I",
        }
    }

    pub fn label(self) -> Label {
        if self == Domain::Real {
            Label::Real
        } else {
            Label::Fake
        }
    }

    fn stream_key(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown domain tag `{s}` (expected REAL, FE, I2I or T2I)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `H x W x 3`, values in `[0, 1]`.
    pub pixels: RealGrid,
    pub label: Label,
    pub domain: Domain,
    pub id: u64,
}

const BASE_KEY: u64 = 0xBA5E;
const ARTIFACT_KEY: u64 = 0xA27;

fn base_texture(seed: u64, domain: Domain, id: u64, size: usize) -> Result<RealGrid> {
    synth::real_texture(&mut rng::stream(seed, &[domain.stream_key(), id, BASE_KEY]), size)
}

/// One deterministic sample of `domain`, a pure function of `(seed, domain, id, size)`.
pub fn generate(domain: Domain, seed: u64, id: u64, size: usize) -> Result<ImageSample> {
    synth::check_size(size)?;
    let base = base_texture(seed, domain, id, size)?;
    let mut r = rng::stream(seed, &[domain.stream_key(), id, ARTIFACT_KEY]);
    let pixels = match domain {
        Domain::Real => base,
        Domain::Fe => synth::face_edit(&mut r, &base)?.0,
        Domain::I2i => synth::image_to_image(&mut r, &base)?,
        Domain::T2i => synth::text_to_image(&mut r, &base)?,
    };
    Ok(ImageSample {
        pixels,
        label: domain.label(),
        domain,
        id,
    })
}

/// FE forgery together with its unedited base texture and patch.
pub fn face_edit_with_base(seed: u64, id: u64, size: usize) -> Result<(ImageSample, RealGrid, PatchRect)> {
    synth::check_size(size)?;
    let base = base_texture(seed, Domain::Fe, id, size)?;
    let mut r = rng::stream(seed, &[Domain::Fe.stream_key(), id, ARTIFACT_KEY]);
    let (pixels, rect) = synth::face_edit(&mut r, &base)?;
    let sample = ImageSample {
        pixels,
        label: Label::Fake,
        domain: Domain::Fe,
        id,
    };
    Ok((sample, base, rect))
}

/// Samples with the given ids, generated in parallel, returned in id order.
pub fn generate_ids(domain: Domain, seed: u64, ids: Range<u64>, size: usize) -> Result<Vec<ImageSample>> {
    ids.into_par_iter().map(|id| generate(domain, seed, id, size)).collect()
}

pub fn gen_real(seed: u64, n: usize, size: usize) -> Result<Vec<ImageSample>> {
    generate_ids(Domain::Real, seed, 0..n as u64, size)
}

pub fn gen_fake(domain: Domain, seed: u64, n: usize, size: usize) -> Result<Vec<ImageSample>> {
    if domain == Domain::Real {
        return Err(Error::Validation(
            "gen_fake needs a forged domain (FE, I2I or T2I)".into(),
        ));
    }
    generate_ids(domain, seed, 0..n as u64, size)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            train_per_domain: 500,
            test_per_domain: 200,
            image_size: 64,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_per_domain == 0 || self.test_per_domain == 0 {
            return Err(Error::Validation(
                "per-domain train and test counts must be positive".into(),
            ));
        }
        synth::check_size(self.image_size)
    }

    /// Train ids come first, test ids follow, so the two never overlap.
    pub fn ids(&self, split: Split) -> Range<u64> {
        let train = self.train_per_domain as u64;
        match split {
            Split::Train => 0..train,
            Split::Test => train..train + self.test_per_domain as u64,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_domain,
            Split::Test => self.test_per_domain,
        }
    }
}

/// Contents of `manifest.json` at a dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: String,
    pub spec: DatasetSpec,
    pub seed: u64,
    /// Per domain, per split: file count.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    /// Per domain, per split: SHA-256 over the image files in id order.
    pub digests: BTreeMap<String, BTreeMap<String, String>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn split_dir(root: &Path, domain: Domain, split: Split) -> PathBuf {
    root.join(domain.as_str()).join(split.as_str())
}

pub fn sample_path(root: &Path, domain: Domain, split: Split, id: u64) -> PathBuf {
    split_dir(root, domain, split).join(format!("{id}.ppm"))
}

/// Generates every domain and split under `root` and writes the manifest.
pub fn build_dataset(spec: &DatasetSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut counts = BTreeMap::new();
    let mut digests = BTreeMap::new();
    for domain in Domain::ALL {
        for split in [Split::Train, Split::Test] {
            let dir = split_dir(root, domain, split);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let encoded: Vec<(u64, Vec<u8>)> = spec
                .ids(split)
                .into_par_iter()
                .map(|id| {
                    let sample = generate(domain, spec.seed, id, spec.image_size)?;
                    let bytes = encode_ppm(&sample.pixels)?;
                    let path = sample_path(root, domain, split, id);
                    std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
                    Ok((id, bytes))
                })
                .collect::<Result<_>>()?;
            let mut hasher = Sha256::new();
            for (_, bytes) in &encoded {
                hasher.update(bytes);
            }
            counts
                .entry(domain.as_str().to_owned())
                .or_insert_with(BTreeMap::new)
                .insert(split.as_str().to_owned(), encoded.len());
            digests
                .entry(domain.as_str().to_owned())
                .or_insert_with(BTreeMap::new)
                .insert(split.as_str().to_owned(), hex(&hasher.finalize()));
        }
    }
    let manifest = DatasetManifest {
        generator_version: GENERATOR_VERSION.to_owned(),
        spec: spec.clone(),
        seed: spec.seed,
        counts,
        digests,
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every sample of one split, sorted by id.
pub fn load_split(root: &Path, domain: Domain, split: Split) -> Result<Vec<ImageSample>> {
    let dir = split_dir(root, domain, split);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| Error::Validation(format!("{}: file name is not a numeric id", path.display())))?;
            ids.push(id);
        }
    }
    if ids.is_empty() {
        return Err(Error::Validation(format!("{}: no .ppm files", dir.display())));
    }
    ids.sort_unstable();
    ids.into_par_iter()
        .map(|id| {
            Ok(ImageSample {
                pixels: load_ppm(&sample_path(root, domain, split, id))?,
                label: domain.label(),
                domain,
                id,
            })
        })
        .collect()
}

/// Shuffled batches holding at least two real and two fake samples each.
///
/// Every batch takes the same real/fake split, proportional to the class
/// ratio; samples that cannot fill a complete batch are dropped. The order
/// is a function of `(seed, epoch)`.
pub fn stratified_batches(labels: &[Label], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 4 || !batch_size.is_multiple_of(2) {
        return Err(Error::Validation(format!(
            "batch size must be even and at least 4, got {batch_size}"
        )));
    }
    let mut real: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Real).collect();
    let mut fake: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Fake).collect();
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Validation(
            "stratified batching needs both real and fake samples".into(),
        ));
    }
    let mut r = rng::stream(seed, &[0x5EED_BA7C, epoch]);
    rng::shuffle(&mut r, &mut real);
    rng::shuffle(&mut r, &mut fake);
    let share = (batch_size as f64 * real.len() as f64 / labels.len() as f64).round() as usize;
    let per_real = share.clamp(2, batch_size - 2);
    let per_fake = batch_size - per_real;
    let count = (real.len() / per_real).min(fake.len() / per_fake);
    let mut batches = Vec::with_capacity(count);
    for b in 0..count {
        let mut batch: Vec<usize> = real[b * per_real..(b + 1) * per_real]
            .iter()
            .chain(&fake[b * per_fake..(b + 1) * per_fake])
            .copied()
            .collect();
        rng::shuffle(&mut r, &mut batch);
        batches.push(batch);
    }
    Ok(batches)
}
