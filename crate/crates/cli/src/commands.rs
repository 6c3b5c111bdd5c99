use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rcdn_core::data::{build_dataset, load_split, read_manifest, DatasetManifest, DatasetSpec, Domain, Label, Split};
use rcdn_core::losses::LossWeights;
use rcdn_core::model::{load_checkpoint, ModelConfig, RcdnModel};
use rcdn_core::spectral::is_power_of_two;
use rcdn_core::train_eval::{
    cross_matrix, evaluate, summarize, train as fit, write_predictions_csv, write_report, Confusion, EpochRecord,
    Evaluation, PreparedSet, SummaryFile, TrainConfig,
};
use rcdn_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::{dataset_ref, DatasetRef, RunRecorder};
use crate::selftest::{run_suite, Fault, Suite};
use crate::{CliError, CrossdomainArgs, EvalArgs, GenDataArgs, TrainArgs, TrainFlags};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const COMPARISON_MD: &str = "comparison.md";
pub const ABLATION_DIR: &str = "ablation";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let rec = RunRecorder::start("gen-data");
    let spec = DatasetSpec {
        train_per_domain: a.per_domain_train,
        test_per_domain: a.per_domain_test,
        image_size: a.size,
        seed: a.seed,
    };
    spec.validate()?;
    if !is_power_of_two(a.size) {
        log::warn!(
            "image size {} is not a power of two; spectral maps will use the direct DFT path",
            a.size
        );
    }
    let started = Instant::now();
    let manifest = build_dataset(&spec, &a.out)?;
    let total: usize = manifest.counts.values().flat_map(|m| m.values()).sum();
    log::info!(
        "wrote {total} images to {} in {:.1?}",
        a.out.display(),
        started.elapsed()
    );
    rec.write(&a.out, a.seed, &spec, Some(dataset_ref(&a.out)?))?;
    Ok(())
}

/// Defaults, then the `--config` file, then explicit flags. Image size
/// and dataset fields always come from the dataset manifest.
pub fn resolve_config(flags: &TrainFlags, dataset: &DatasetManifest) -> Result<TrainConfig> {
    let mut c = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = flags.epochs {
        c.epochs = v;
    }
    if let Some(v) = flags.seed {
        c.seed = v;
    }
    if let Some(v) = flags.lambda_c {
        c.model.lambda_center = v;
    }
    if let Some(v) = flags.lambda_s {
        c.model.lambda_sep = v;
    }
    if let Some(v) = flags.margin {
        c.model.margin = v;
    }
    if let Some(v) = flags.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = flags.lr {
        c.optimizer.lr = v;
    }
    if let Some(v) = flags.eval_every {
        c.eval_every = v;
    }
    c.dataset = dataset.spec.clone();
    c.model.image_size = dataset.spec.image_size;
    c.checkpoint_path = None;
    c.validate()?;
    Ok(c)
}

/// Real images of a split, loaded once and paired with each forged domain.
struct SplitData {
    real: PreparedSet,
}

impl SplitData {
    fn load(root: &Path, split: Split) -> Result<Self> {
        Ok(SplitData {
            real: PreparedSet::new(&load_split(root, Domain::Real, split)?)?,
        })
    }

    fn with(&self, root: &Path, domain: Domain, split: Split) -> Result<PreparedSet> {
        let fakes = PreparedSet::new(&load_split(root, domain, split)?)?;
        self.real.clone().join(&fakes)
    }
}

fn check_forged(domain: Domain) -> Result<()> {
    if domain == Domain::Real {
        return Err(Error::Usage("REAL is not a forged domain; pick FE, I2I or T2I".into()));
    }
    Ok(())
}

fn write_trace(path: &Path, trace: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for r in trace {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn read_trace(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Contents of `eval.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_domain: Domain,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<PathBuf>,
    pub samples: usize,
    pub accuracy: f64,
    pub confusion: Confusion,
    pub mean_distance_real: f64,
    pub mean_distance_fake: f64,
    pub max_norm_deviation: f64,
}

impl EvalReport {
    fn new(test_domain: Domain, checkpoint: Option<PathBuf>, e: &Evaluation) -> Self {
        let mean = |want: Label| {
            let d: Vec<f64> = e
                .records
                .iter()
                .zip(&e.distances)
                .filter(|(r, _)| r.label == want)
                .map(|(_, &d)| d)
                .collect();
            d.iter().sum::<f64>() / d.len().max(1) as f64
        };
        EvalReport {
            test_domain,
            checkpoint,
            samples: e.records.len(),
            accuracy: e.accuracy,
            confusion: e.confusion,
            mean_distance_real: mean(Label::Real),
            mean_distance_fake: mean(Label::Fake),
            max_norm_deviation: e.max_norm_deviation,
        }
    }
}

fn write_evaluation(dir: &Path, report: &EvalReport, e: &Evaluation) -> Result<()> {
    write_file(&dir.join(EVAL_FILE), &serde_json::to_string_pretty(report)?)?;
    write_predictions_csv(&dir.join(PREDICTIONS_FILE), e.records.iter().map(|r| (None, r)))
}

fn train_one(
    dir: &Path,
    domain: Domain,
    config: &TrainConfig,
    train_set: &PreparedSet,
    test_set: &PreparedSet,
    dataset: &DatasetRef,
) -> Result<RcdnModel> {
    let rec = RunRecorder::start("train");
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut config = config.clone();
    config.checkpoint_path = Some(dir.join(CHECKPOINT_FILE));
    log::info!("training on REAL vs {domain} ({} images)", train_set.len());
    let held_out = (config.eval_every > 0).then_some(test_set);
    let outcome = fit(&config, train_set, held_out)?;
    write_trace(&dir.join(TRACE_FILE), &outcome.trace)?;
    rec.write(
        dir,
        config.seed,
        &json!({ "train_domain": domain, "train": config }),
        Some(dataset.clone()),
    )?;
    Ok(outcome.model)
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    check_forged(a.train_domain)?;
    let manifest = read_manifest(&a.data)?;
    let config = resolve_config(&a.flags, &manifest)?;
    let dataset = dataset_ref(&a.data)?;
    let (train_split, test_split) = (
        SplitData::load(&a.data, Split::Train)?,
        SplitData::load(&a.data, Split::Test)?,
    );
    let train_set = train_split.with(&a.data, a.train_domain, Split::Train)?;
    let test_set = test_split.with(&a.data, a.train_domain, Split::Test)?;
    let model = train_one(&a.out, a.train_domain, &config, &train_set, &test_set, &dataset)?;
    let e = evaluate(&model, &test_set)?;
    let report = EvalReport::new(a.train_domain, Some(a.out.join(CHECKPOINT_FILE)), &e);
    write_evaluation(&a.out, &report, &e)?;
    println!("{} in-domain test accuracy {:.4}", a.train_domain, e.accuracy);
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let rec = RunRecorder::start("eval");
    check_forged(a.test_domain)?;
    let manifest = read_manifest(&a.data)?;
    let size = manifest.spec.image_size;
    let model = match &a.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => RcdnModel::new(ModelConfig {
            seed: a.seed,
            image_size: size,
            ..ModelConfig::default()
        })?,
    };
    if model.config().image_size != size {
        return Err(Error::Config(format!(
            "model expects {0}x{0} images but the dataset holds {1}x{1}",
            model.config().image_size,
            size
        ))
        .into());
    }
    let test_set = SplitData::load(&a.data, Split::Test)?.with(&a.data, a.test_domain, Split::Test)?;
    let e = evaluate(&model, &test_set)?;
    write_evaluation(&a.out, &EvalReport::new(a.test_domain, a.checkpoint.clone(), &e), &e)?;
    rec.write(
        &a.out,
        model.config().seed,
        &json!({ "test_domain": a.test_domain, "checkpoint": a.checkpoint, "model": model.config() }),
        Some(dataset_ref(&a.data)?),
    )?;
    println!("{} test accuracy {:.4}", a.test_domain, e.accuracy);
    Ok(())
}

struct DomainSets {
    train: Vec<PreparedSet>,
    test: Vec<PreparedSet>,
}

impl DomainSets {
    fn load(root: &Path) -> Result<Self> {
        let (tr, te) = (
            SplitData::load(root, Split::Train)?,
            SplitData::load(root, Split::Test)?,
        );
        let mut sets = DomainSets {
            train: Vec::new(),
            test: Vec::new(),
        };
        for domain in Domain::FORGED {
            sets.train.push(tr.with(root, domain, Split::Train)?);
            sets.test.push(te.with(root, domain, Split::Test)?);
        }
        Ok(sets)
    }
}

/// Trains one model per forged domain under `dir` and writes the
/// cross-domain report there.
fn run_protocol(
    dir: &Path,
    method: &str,
    config: &TrainConfig,
    sets: &DomainSets,
    dataset: &DatasetRef,
) -> Result<SummaryFile> {
    let mut models = Vec::with_capacity(3);
    for (k, domain) in Domain::FORGED.into_iter().enumerate() {
        let sub = dir.join(domain.as_str());
        models.push(train_one(&sub, domain, config, &sets.train[k], &sets.test[k], dataset)?);
    }
    let (matrix, evaluations) = cross_matrix(
        [&models[0], &models[1], &models[2]],
        [&sets.test[0], &sets.test[1], &sets.test[2]],
    )?;
    let file = SummaryFile {
        summary: summarize(&matrix)?,
        loss_weights: LossWeights::from(&config.model),
    };
    write_report(dir, &matrix, &file, method, &evaluations)?;
    let s = &file.summary;
    println!(
        "{method}: in-domain {:.4}, cross {:.4}, gap {:.4}, ratio {:.3}",
        s.in_domain_avg, s.cross_avg, s.gap, s.ratio
    );
    Ok(file)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub full: SummaryFile,
    pub ablation: SummaryFile,
}

pub fn comparison_markdown(c: &Comparison) -> String {
    let mut out = String::from("| Loss | In-domain Avg | Cross Avg | Gap | Ratio |\n|---|---|---|---|---|\n");
    for (name, f) in [("full", &c.full), ("ablation", &c.ablation)] {
        let (w, s) = (&f.loss_weights, &f.summary);
        writeln!(
            out,
            "| {name} (lambda_c={}, lambda_s={}) | {:.4} | {:.4} | {:.4} | {:.3} |",
            w.lambda_center, w.lambda_sep, s.in_domain_avg, s.cross_avg, s.gap, s.ratio
        )
        .unwrap();
    }
    out
}

pub fn crossdomain(a: &CrossdomainArgs) -> Result<(), CliError> {
    let rec = RunRecorder::start("crossdomain");
    let manifest = read_manifest(&a.data)?;
    let config = resolve_config(&a.flags, &manifest)?;
    let dataset = dataset_ref(&a.data)?;
    let sets = DomainSets::load(&a.data)?;
    let started = Instant::now();
    let full = run_protocol(&a.out, "RCDN", &config, &sets, &dataset)?;

    if a.ablation {
        let ablation_rec = RunRecorder::start("crossdomain");
        let mut baseline = config.clone();
        baseline.model.lambda_center = 0.0;
        baseline.model.lambda_sep = 0.0;
        let dir = a.out.join(ABLATION_DIR);
        let ablation = run_protocol(&dir, "Ablation", &baseline, &sets, &dataset)?;
        ablation_rec.write(&dir, baseline.seed, &baseline, Some(dataset.clone()))?;
        let c = Comparison { full, ablation };
        write_file(
            &a.out.join(COMPARISON_JSON),
            &serde_json::to_string_pretty(&c).map_err(Error::from)?,
        )?;
        write_file(&a.out.join(COMPARISON_MD), &comparison_markdown(&c))?;
    }
    log::info!("cross-domain protocol finished in {:.1?}", started.elapsed());
    rec.write(
        &a.out,
        config.seed,
        &json!({ "ablation": a.ablation, "train": config }),
        Some(dataset),
    )?;
    Ok(())
}

pub fn selftest(suites: Vec<Suite>, fault: Fault) -> Result<(), CliError> {
    let mut failed = Vec::new();
    let mut rows = Vec::new();
    for suite in suites {
        let started = Instant::now();
        let cases = run_suite(suite, fault);
        let elapsed = started.elapsed();
        for c in &cases {
            println!(
                "{:<7} {:<8} {:<28} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.suite,
                c.name,
                c.detail
            );
        }
        let bad: Vec<String> = cases.iter().filter(|c| !c.passed).map(|c| c.id()).collect();
        rows.push((suite, cases.len(), bad.len(), elapsed));
        failed.extend(bad);
    }
    println!("\n| suite | cases | failed | status | time |\n|---|---|---|---|---|");
    for (suite, n, bad, t) in rows {
        let status = if bad == 0 { "pass" } else { "FAIL" };
        println!("| {suite} | {n} | {bad} | {status} | {t:.2?} |");
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Selftest(failed))
    }
}
