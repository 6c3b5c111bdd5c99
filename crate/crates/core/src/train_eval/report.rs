use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Evaluation, GeneralizationSummary, ResultMatrix, SampleRecord};
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    #[serde(flatten)]
    pub summary: GeneralizationSummary,
    pub loss_weights: LossWeights,
}

pub fn matrix_csv(matrix: &ResultMatrix) -> String {
    let mut out = String::from("train\\test");
    for d in ResultMatrix::DOMAINS {
        write!(out, ",{d}").unwrap();
    }
    out.push('\n');
    for (d, row) in ResultMatrix::DOMAINS.iter().zip(&matrix.cells) {
        out.push_str(d.as_str());
        for v in row {
            write!(out, ",{v:.4}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_matrix_csv(text: &str) -> Result<ResultMatrix> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Validation("empty matrix file".into()))?;
    let expected: Vec<String> = std::iter::once("train\\test".to_owned())
        .chain(ResultMatrix::DOMAINS.iter().map(|d| d.to_string()))
        .collect();
    if header.split(',').collect::<Vec<_>>() != expected {
        return Err(Error::Validation(format!("unexpected matrix header `{header}`")));
    }
    let mut cells = [[0.0; 3]; 3];
    for (i, d) in ResultMatrix::DOMAINS.iter().enumerate() {
        let line = lines
            .next()
            .ok_or_else(|| Error::Validation(format!("missing matrix row {d}")))?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 || fields[0] != d.as_str() {
            return Err(Error::Validation(format!("malformed matrix row `{line}`")));
        }
        for j in 0..3 {
            cells[i][j] = fields[j + 1]
                .parse()
                .map_err(|_| Error::Validation(format!("bad cell `{}`", fields[j + 1])))?;
        }
    }
    ResultMatrix::new(cells)
}

/// Cross-domain table followed by the generalization summary row.
pub fn render_markdown(matrix: &ResultMatrix, summary: &GeneralizationSummary, method: &str) -> String {
    let mut out = String::from("## Cross-domain accuracy\n\n| Train \\ Test |");
    for d in ResultMatrix::DOMAINS {
        write!(out, " {d} |").unwrap();
    }
    out.push_str("\n|---|---|---|---|\n");
    for (d, row) in ResultMatrix::DOMAINS.iter().zip(&matrix.cells) {
        write!(out, "| {d} |").unwrap();
        for v in row {
            write!(out, " {v:.4} |").unwrap();
        }
        out.push('\n');
    }
    out.push_str(
        "\n## Generalization summary\n\n| Method | In-domain | Cross Avg | Gap | Ratio |\n|---|---|---|---|---|\n",
    );
    writeln!(
        out,
        "| {method} | {:.4} | {:.4} | {:.4} | {:.3} |",
        summary.in_domain_avg, summary.cross_avg, summary.gap, summary.ratio
    )
    .unwrap();
    out
}

/// Writes `id,domain,label,score,prediction` rows, prefixed by a
/// `train_domain` column when `train_domain` is given for the rows.
pub fn write_predictions_csv<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (Option<Domain>, &'a SampleRecord)>,
) -> Result<()> {
    let mut out = String::new();
    let mut header_done = false;
    for (train, r) in rows {
        if !header_done {
            if train.is_some() {
                out.push_str("train_domain,");
            }
            out.push_str("id,domain,label,score,prediction\n");
            header_done = true;
        }
        if let Some(t) = train {
            write!(out, "{t},").unwrap();
        }
        writeln!(
            out,
            "{},{},{},{},{}",
            r.id,
            r.domain,
            r.label.as_str(),
            r.score,
            r.prediction.as_str()
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `matrix.csv`, `summary.json`, `report.md` and `predictions.csv`
/// into `dir`. `evaluations` are the cross-matrix evaluations, row-major.
pub fn write_report(
    dir: &Path,
    matrix: &ResultMatrix,
    summary: &SummaryFile,
    method: &str,
    evaluations: &[Evaluation],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("matrix.csv"), &matrix_csv(matrix))?;
    write(&dir.join("summary.json"), &serde_json::to_string_pretty(summary)?)?;
    write(
        &dir.join("report.md"),
        &render_markdown(matrix, &summary.summary, method),
    )?;
    let rows = evaluations
        .iter()
        .enumerate()
        .flat_map(|(k, e)| e.records.iter().map(move |r| (Some(ResultMatrix::DOMAINS[k / 3]), r)));
    write_predictions_csv(&dir.join("predictions.csv"), rows)
}
