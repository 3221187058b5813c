//! Named lists of experiments, run row by row into per-row directories, and
//! the combined comparison tables.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::{error, info};
use refgame::checkpoint::latest_checkpoint;
use refgame::config::DualTaskMode;
use refgame::encoder::EncoderRegime;
use refgame::metrics::EvaluationReport;
use refgame::trainer::{self, REPORT_FILE};
use refgame::{Error, ExperimentConfig, Result};
use serde::{Deserialize, Serialize};

pub const TABLE_TEXT: &str = "table.txt";
pub const TABLE_CSV: &str = "table.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixRow {
    pub name: String,
    /// Section heading the row is grouped under in the combined table.
    #[serde(default)]
    pub group: String,
    pub config: ExperimentConfig,
}

impl MatrixRow {
    /// The label shown in the table's first column.
    pub fn label(&self) -> &'static str {
        match self.config.dual_task.mode {
            DualTaskMode::ReceiverPredicts => "Receiver-Predicts",
            DualTaskMode::SenderPredicts => "Sender-Predicts",
            DualTaskMode::None => self.config.encoder.regime.display_name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentMatrix {
    pub name: String,
    #[serde(rename = "row")]
    pub rows: Vec<MatrixRow>,
}

impl ExperimentMatrix {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let m: ExperimentMatrix = toml::from_str(text).map_err(|e| Error::Config(format!("invalid matrix: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize matrix: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for row in &self.rows {
            if row.name.is_empty() || row.name.contains(['/', '\\']) || row.name.starts_with('.') {
                return Err(Error::Config(format!("row name {:?} is not a valid directory name", row.name)));
            }
            if !seen.insert(row.name.as_str()) {
                return Err(Error::Config(format!("duplicate row name {:?}", row.name)));
            }
            row.config
                .validate()
                .map_err(|e| Error::Config(format!("row {}: {e}", row.name)))?;
        }
        Ok(())
    }

    /// The eleven rows of the paper's three tables, derived from `base`
    /// (which supplies data location, weights file, seed and all shared
    /// hyperparameters).
    pub fn paper(base: &ExperimentConfig) -> Self {
        let mut rows = Vec::new();
        let regimes = [
            ("pretrained", EncoderRegime::PretrainedFrozen),
            ("random", EncoderRegime::RandomFrozen),
            ("learned", EncoderRegime::LearnedEndToEnd),
        ];
        let variants = [
            ("plain", "Table 1", false, false),
            ("noise", "Table 2: Sender images augmented with Gaussian noise", true, false),
            ("rotation", "Table 2: Sender images augmented with random rotations", false, true),
        ];
        for (variant, group, noise, rotation) in variants {
            for (regime_name, regime) in regimes {
                let mut c = base.clone();
                c.output_dir = None;
                c.encoder.regime = regime;
                c.game.sender_noise = noise;
                c.game.sender_rotation = rotation;
                c.dual_task.mode = DualTaskMode::None;
                c.loss.rotation_weight = None;
                c.loss.alternate = None;
                rows.push(MatrixRow {
                    name: format!("{regime_name}-{variant}"),
                    group: group.to_string(),
                    config: c,
                });
            }
        }
        for (name, mode) in [
            ("receiver-predicts", DualTaskMode::ReceiverPredicts),
            ("sender-predicts", DualTaskMode::SenderPredicts),
        ] {
            let mut c = base.clone();
            c.output_dir = None;
            c.encoder.regime = EncoderRegime::LearnedEndToEnd;
            c.game.sender_noise = true;
            c.game.sender_rotation = true;
            c.dual_task.mode = mode;
            c.loss.rotation_weight = None;
            c.loss.alternate = None;
            rows.push(MatrixRow {
                name: name.to_string(),
                group: "Table 3".to_string(),
                config: c,
            });
        }
        ExperimentMatrix {
            name: "paper".to_string(),
            rows,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowStatus {
    Completed(EvaluationReport),
    /// A report for the same config already existed.
    Skipped(EvaluationReport),
    Failed(String),
}

impl RowStatus {
    pub fn report(&self) -> Option<&EvaluationReport> {
        match self {
            RowStatus::Completed(r) | RowStatus::Skipped(r) => Some(r),
            RowStatus::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RowResult {
    pub row: MatrixRow,
    pub status: RowStatus,
}

#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    pub results: Vec<RowResult>,
    pub table_text: PathBuf,
    pub table_csv: PathBuf,
}

impl MatrixOutcome {
    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| matches!(r.status, RowStatus::Failed(_))).count()
    }
}

/// Train and evaluate one row, resuming from its latest checkpoint when one
/// exists and `force` is off.
pub fn default_runner(config: &ExperimentConfig, force: bool) -> Result<EvaluationReport> {
    let dir = config.output_dir();
    if force && dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    let resume = latest_checkpoint(&dir);
    Ok(trainer::train(config, resume.as_deref())?.report)
}

/// The report in `dir` if it exists and belongs to `config`.
pub fn existing_report(dir: &Path, config: &ExperimentConfig) -> Option<EvaluationReport> {
    let text = std::fs::read_to_string(dir.join(REPORT_FILE)).ok()?;
    let report: EvaluationReport = serde_json::from_str(&text).ok()?;
    (report.provenance.get("config_hash") == Some(&config.hash())).then_some(report)
}

/// Run every row into `out_dir/<row name>/`, at most `parallelism` at a time.
/// Rows with an existing matching report are skipped unless `force`. A
/// failing row is recorded and does not stop the others. The combined table
/// is written in row order.
pub fn run_matrix<F>(
    matrix: &ExperimentMatrix,
    out_dir: &Path,
    parallelism: usize,
    force: bool,
    runner: F,
) -> Result<MatrixOutcome>
where
    F: Fn(&ExperimentConfig, bool) -> Result<EvaluationReport> + Sync,
{
    matrix.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..matrix.rows.len()).collect());
    let slots: Vec<Mutex<Option<RowStatus>>> = matrix.rows.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..parallelism.max(1).min(matrix.rows.len().max(1)) {
            scope.spawn(|| loop {
                let Some(i) = queue.lock().unwrap().pop_front() else {
                    break;
                };
                let row = &matrix.rows[i];
                let mut config = row.config.clone();
                config.output_dir = Some(out_dir.join(&row.name));
                let status = match existing_report(&config.output_dir(), &config) {
                    Some(report) if !force => {
                        info!("row {}: report exists, skipping", row.name);
                        RowStatus::Skipped(report)
                    }
                    _ => match runner(&config, force) {
                        Ok(report) => RowStatus::Completed(report),
                        Err(e) => {
                            error!("row {} failed: {e}", row.name);
                            RowStatus::Failed(e.to_string())
                        }
                    },
                };
                *slots[i].lock().unwrap() = Some(status);
            });
        }
    });
    let results: Vec<RowResult> = matrix
        .rows
        .iter()
        .zip(slots)
        .map(|(row, slot)| RowResult {
            row: row.clone(),
            status: slot.into_inner().unwrap().expect("every row ran"),
        })
        .collect();
    let table_text = out_dir.join(TABLE_TEXT);
    let table_csv = out_dir.join(TABLE_CSV);
    std::fs::write(&table_text, render_text_table(&matrix.name, &results))?;
    std::fs::write(&table_csv, render_csv_table(&results))?;
    Ok(MatrixOutcome {
        results,
        table_text,
        table_csv,
    })
}

fn with_sd(mean: f64, sd: f64) -> String {
    format!("{mean:.2} (±{sd:.2})")
}

fn opt2(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// Text columns in the paper's layout, plus rotation accuracy and the
/// row's config hash.
fn text_cells(r: &RowResult) -> Vec<String> {
    let hash = r.row.config.short_hash();
    match r.status.report() {
        Some(rep) => vec![
            r.row.label().to_string(),
            with_sd(rep.comm_rate, rep.comm_rate_sd),
            match (rep.mean_msg_len, rep.msg_len_sd) {
                (Some(m), Some(s)) => with_sd(m, s),
                _ => "-".to_string(),
            },
            format!("{:.2}", rep.top5_comm_rate),
            format!("{:.2}", rep.target_class_top5_mean),
            format!("{:.2}", rep.target_class_avg_rank),
            opt2(rep.rotation_accuracy),
            hash,
        ],
        None => {
            let mut cells = vec![r.row.label().to_string()];
            cells.extend(std::iter::repeat_n("failed".to_string(), 6));
            cells.push(hash);
            cells
        }
    }
}

const HEADER: [&str; 8] = [
    "Feature extractor / model",
    "Comm. rate",
    "Message length",
    "Top-5 comm. rate",
    "#target-class in top-5",
    "Target-class avg. rank",
    "Rot. acc.",
    "Config",
];

pub fn render_text_table(title: &str, results: &[RowResult]) -> String {
    let rows: Vec<Vec<String>> = results.iter().map(text_cells).collect();
    let widths: Vec<usize> = (0..HEADER.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([HEADER[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1));
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{rule}");
    let _ = writeln!(out, "{}", line(&HEADER.map(String::from)));
    let mut group: Option<&str> = None;
    for (r, cells) in results.iter().zip(&rows) {
        if group != Some(r.row.group.as_str()) {
            group = Some(&r.row.group);
            let _ = writeln!(out, "{rule}");
            if !r.row.group.is_empty() {
                let _ = writeln!(out, "{}:", r.row.group);
            }
        }
        let _ = writeln!(out, "{}", line(cells));
    }
    let _ = writeln!(out, "{rule}");
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv_table(results: &[RowResult]) -> String {
    let mut out = String::from(
        "name,group,model,status,comm_rate,comm_rate_sd,mean_msg_len,msg_len_sd,top5_comm_rate,target_class_top5_mean,target_class_avg_rank,rotation_accuracy,config_hash\n",
    );
    let num = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
    for r in results {
        let status = match &r.status {
            RowStatus::Completed(_) => "completed",
            RowStatus::Skipped(_) => "completed",
            RowStatus::Failed(_) => "failed",
        };
        let rep = r.status.report();
        let fields = [
            csv_field(&r.row.name),
            csv_field(&r.row.group),
            csv_field(r.row.label()),
            status.to_string(),
            num(rep.map(|r| r.comm_rate)),
            num(rep.map(|r| r.comm_rate_sd)),
            num(rep.and_then(|r| r.mean_msg_len)),
            num(rep.and_then(|r| r.msg_len_sd)),
            num(rep.map(|r| r.top5_comm_rate)),
            num(rep.map(|r| r.target_class_top5_mean)),
            num(rep.map(|r| r.target_class_avg_rank)),
            num(rep.and_then(|r| r.rotation_accuracy)),
            r.row.config.hash(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}
