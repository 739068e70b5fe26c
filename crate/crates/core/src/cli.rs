//! Command-line front end. Every subcommand renders a [`Table`] to standard
//! output or, with `--out`, writes it atomically to a file.

use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Number, Value};

use crate::baselines::{knas_score_bundle, sfda_score, DEFAULT_SFDA_A};
use crate::bundle::{atomic_write, read_bundle, synth_bundle, synth_gradients, write_bundle, FeatureBundle};
use crate::error::{Error, Result};
use crate::evidence::{EvidenceOptions, NormDenominator, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::geometry::{assign_pyramid_level, Normalization, PyramidConfig};
use crate::ranking::{reproduce_tables, stability, EvalMetric, ScoreTable, TauVariant};
use crate::scores::{score_det_logme, score_iou_logme, score_logme, score_u_logme, ScoreConfig, UnifiedFit};

pub const THREADS_ENV: &str = "TRANSFER_RANK_THREADS";
pub const BUNDLE_EXTENSION: &str = "dtfb";

#[derive(Debug, Parser)]
#[command(name = "detrank", version, about = "Rank pre-trained object detectors by transferability")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score a single bundle with one method.
    Score(ScoreArgs),
    /// Score a zoo of bundles and rank them by Det-LogME.
    Rank(RankArgs),
    /// Compare score columns against ground-truth mAP.
    Evaluate(EvaluateArgs),
    /// Mean and spread of ranking metrics over random sub-zoos.
    Stability(StabilityArgs),
    /// Write synthetic bundles with planted quality.
    Synth(SynthArgs),
    /// Assign pyramid levels to box sizes.
    AssignLevels(AssignLevelsArgs),
    /// Recompute ranking correlations for the published score tables.
    Reproduce(ReproduceArgs),
    /// Check a bundle and its manifest.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum OutputFormat {
    #[default]
    Csv,
    Markdown,
    JsonLines,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Logme,
    ULogme,
    IouLogme,
    DetLogme,
    Sfda,
    Knas,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Center,
    Border,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitArg {
    Joint,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DenominatorArg {
    Observations,
    Objects,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Plain,
    Weighted,
    Hyperbolic,
}

impl From<VariantArg> for TauVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Plain => TauVariant::Plain,
            VariantArg::Weighted => TauVariant::Weighted,
            VariantArg::Hyperbolic => TauVariant::Hyperbolic,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Output format.
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
    /// Write to this file instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PyramidArgs {
    /// Canonical level for a 224-pixel object.
    #[arg(long, default_value_t = 3)]
    pub l0: i32,
    #[arg(long, default_value_t = 2)]
    pub l_min: i32,
    #[arg(long, default_value_t = 5)]
    pub l_max: i32,
    /// Objects with sqrt(wh) below this go to the lowest level.
    #[arg(long, default_value_t = 64.0)]
    pub small_thresh: f64,
    /// Objects with sqrt(wh) above this go to the highest level.
    #[arg(long, default_value_t = 512.0)]
    pub large_thresh: f64,
}

impl PyramidArgs {
    pub fn config(&self) -> Result<PyramidConfig> {
        let cfg = PyramidConfig {
            l0: self.l0,
            l_min: self.l_min,
            l_max: self.l_max,
            small_thresh: self.small_thresh,
            large_thresh: self.large_thresh,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ScoringArgs {
    /// Weight of the IoU term in Det-LogME.
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    /// Box target encoding.
    #[arg(long, value_enum, default_value_t = NormArg::Center)]
    pub normalization: NormArg,
    /// How the class-slotted weights are obtained.
    #[arg(long, value_enum, default_value_t = FitArg::Joint)]
    pub fit: FitArg,
    /// Relative tolerance on alpha and beta.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    /// Denominator of the normalized log evidence.
    #[arg(long, value_enum, default_value_t = DenominatorArg::Observations)]
    pub evidence_denominator: DenominatorArg,
    /// SFDA regularization constant.
    #[arg(long, default_value_t = DEFAULT_SFDA_A)]
    pub sfda_a: f64,
    /// Number of equal-width gradient blocks (head layers) for KNAS.
    #[arg(long, default_value_t = 1)]
    pub knas_layers: usize,
    #[command(flatten)]
    pub pyramid: PyramidArgs,
}

impl ScoringArgs {
    pub fn config(&self) -> Result<ScoreConfig> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidInput("--tol must be positive and --max-iter at least 1".into()));
        }
        if !(self.sfda_a > 0.0) || !self.sfda_a.is_finite() {
            return Err(Error::InvalidInput("--sfda-a must be positive".into()));
        }
        if self.knas_layers == 0 {
            return Err(Error::InvalidInput("--knas-layers must be at least 1".into()));
        }
        let cfg = ScoreConfig {
            mu: self.mu,
            normalization: match self.normalization {
                NormArg::Center => Normalization::Center,
                NormArg::Border => Normalization::Border,
            },
            pyramid: self.pyramid.config()?,
            evidence: EvidenceOptions {
                tol: self.tol,
                max_iter: self.max_iter,
                norm: match self.evidence_denominator {
                    DenominatorArg::Observations => NormDenominator::Observations,
                    DenominatorArg::Objects => NormDenominator::Objects,
                },
            },
            fit: match self.fit {
                FitArg::Joint => UnifiedFit::Joint,
                FitArg::Literal => UnifiedFit::Literal,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExtraColumn {
    Logme,
    Sfda,
    Knas,
}

#[derive(Debug, Clone, Args)]
pub struct RankArgs {
    /// Directory of `.dtfb` bundles.
    #[arg(long, required_unless_present = "bundle")]
    pub bundles: Option<PathBuf>,
    /// Individual bundle paths (repeatable).
    #[arg(long, conflicts_with = "bundles")]
    pub bundle: Vec<PathBuf>,
    /// Additional per-model columns.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub extra: Vec<ExtraColumn>,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GroundTruthArgs {
    /// Score table; the first column is the model id.
    #[arg(long)]
    pub scores: PathBuf,
    /// Ground-truth table; the first column is the model id.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value = "map")]
    pub gt_column: String,
    /// Score columns to use (default: every numeric column except the gt column).
    #[arg(long, value_delimiter = ',')]
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub tables: GroundTruthArgs,
    /// Metrics: tauw-plain, tauw-weighted, tauw-hyperbolic, pearson, pearson-uniform, rel1.
    #[arg(long, value_delimiter = ',', default_value = "tauw-plain,tauw-weighted,tauw-hyperbolic,pearson,rel1")]
    pub metrics: Vec<String>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct StabilityArgs {
    #[command(flatten)]
    pub tables: GroundTruthArgs,
    #[arg(long)]
    pub subset_size: usize,
    /// Fraction of all C(N, k) subsets to draw.
    #[arg(long, default_value_t = 0.01)]
    pub fraction: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = VariantArg::Plain)]
    pub variant: VariantArg,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Planted qualities in [0, 1], one bundle each.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,0.9")]
    pub qualities: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    pub objects: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Per-object gradient length (0 for none).
    #[arg(long, default_value_t = 0)]
    pub gradient_dim: usize,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct AssignLevelsArgs {
    /// CSV with `width,height` columns, or `-` for standard input.
    #[arg(long, required_unless_present_all = ["width", "height"])]
    pub input: Option<PathBuf>,
    #[arg(long, requires = "height", conflicts_with = "input")]
    pub width: Option<f64>,
    #[arg(long, requires = "width", conflicts_with = "input")]
    pub height: Option<f64>,
    #[command(flatten)]
    pub pyramid: PyramidArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReproduceArgs {
    /// Directory holding the six dataset fixtures and `printed_tau.csv`.
    #[arg(long)]
    pub fixtures: PathBuf,
    /// Writes `<prefix>.md` and `<prefix>.csv`; Markdown goes to standard output otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub bundle: PathBuf,
}

/// Rows of JSON values rendered as CSV, Markdown or JSON lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

fn num(x: f64) -> Value {
    Number::from_f64(x).map_or_else(|| Value::String(x.to_string()), Value::Number)
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::Null => "N/A".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self {
            headers: headers.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: OutputFormat) -> Result<String> {
        match format {
            OutputFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(&self.headers)?;
                for r in &self.rows {
                    w.write_record(r.iter().map(cell_text))?;
                }
                let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
                Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
            }
            OutputFormat::Markdown => {
                let mut s = format!("| {} |\n|", self.headers.join(" | "));
                s.push_str(&"---|".repeat(self.headers.len()));
                s.push('\n');
                for r in &self.rows {
                    let cells: Vec<String> = r.iter().map(cell_text).collect();
                    s.push_str(&format!("| {} |\n", cells.join(" | ")));
                }
                Ok(s)
            }
            OutputFormat::JsonLines => {
                let mut s = String::new();
                for r in &self.rows {
                    let obj: Map<String, Value> = self.headers.iter().cloned().zip(r.iter().cloned()).collect();
                    s.push_str(&serde_json::to_string(&Value::Object(obj))?);
                    s.push('\n');
                }
                Ok(s)
            }
        }
    }
}

fn emit(text: &str, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(p) => atomic_write(p, text.as_bytes()),
        None => stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn emit_table(table: &Table, output: &OutputArgs, stdout: &mut dyn Write) -> Result<()> {
    emit(&table.render(output.format)?, output.out.as_deref(), stdout)
}

/// `.dtfb` files in a directory, sorted by name.
pub fn list_bundles(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == BUNDLE_EXTENSION))
        .collect();
    paths.sort();
    Ok(paths)
}

fn method_column(m: Method) -> &'static str {
    match m {
        Method::Logme => "logme",
        Method::ULogme => "u_logme_raw",
        Method::IouLogme => "iou_logme_raw",
        Method::DetLogme => "det_logme",
        Method::Sfda => "sfda",
        Method::Knas => "knas",
    }
}

fn cmd_score(args: &ScoreArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let cfg = args.scoring.config()?;
    if args.method == Method::DetLogme {
        return Err(Error::InvalidInput("det-logme requires a zoo (use rank)".into()));
    }
    let bundle = read_bundle(&args.bundle)?;
    let mut headers = vec!["model_name", method_column(args.method)];
    let value = match args.method {
        Method::Logme => score_logme(&bundle, &cfg)?,
        Method::ULogme => score_u_logme(&bundle, &cfg)?.0,
        Method::IouLogme => {
            let (_, sol) = score_u_logme(&bundle, &cfg)?;
            score_iou_logme(&bundle, &sol, &cfg)?
        }
        Method::Sfda => {
            let r = sfda_score(&bundle, args.scoring.sfda_a)?;
            if r.jittered {
                let _ = writeln!(stderr, "note: added diagonal jitter to the regularized within-class scatter");
            }
            headers.push("sfda_jittered");
            let mut t = Table::new(&headers);
            t.push(vec![bundle.model_name.clone().into(), num(r.score), r.jittered.into()]);
            return emit_table(&t, &args.output, stdout);
        }
        Method::Knas => knas_score_bundle(&bundle, args.scoring.knas_layers)?,
        Method::DetLogme => unreachable!(),
    };
    let mut t = Table::new(&headers);
    t.push(vec![bundle.model_name.clone().into(), num(value)]);
    emit_table(&t, &args.output, stdout)
}

fn extra_value(bundle: &FeatureBundle, col: ExtraColumn, args: &ScoringArgs, cfg: &ScoreConfig) -> Result<Value> {
    let r = match col {
        ExtraColumn::Logme => score_logme(bundle, cfg),
        ExtraColumn::Sfda => sfda_score(bundle, args.sfda_a).map(|r| r.score),
        ExtraColumn::Knas => {
            if bundle.gradients.is_none() {
                return Ok(Value::Null);
            }
            knas_score_bundle(bundle, args.knas_layers)
        }
    };
    match r {
        Ok(v) => Ok(num(v)),
        Err(Error::NotApplicable(_)) => Ok(Value::Null),
        Err(e) => Err(e),
    }
}

fn cmd_rank(args: &RankArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = args.scoring.config()?;
    let paths = match &args.bundles {
        Some(dir) => list_bundles(dir)?,
        None => args.bundle.clone(),
    };
    if paths.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "rank needs at least 2 bundles, found {}",
            paths.len()
        )));
    }
    let zoo: Vec<FeatureBundle> = paths.iter().map(|p| read_bundle(p)).collect::<Result<_>>()?;
    let scores = score_det_logme(&zoo, &cfg)?;

    let mut headers: Vec<&str> = crate::scores::SCORE_COLUMNS.to_vec();
    for e in &args.extra {
        headers.push(match e {
            ExtraColumn::Logme => "logme",
            ExtraColumn::Sfda => "sfda",
            ExtraColumn::Knas => "knas",
        });
    }
    let mut t = Table::new(&headers);
    for rec in scores.ranked() {
        let bundle = zoo.iter().find(|b| b.model_name == rec.model_name).expect("scored bundle");
        let mut row = vec![
            rec.model_name.clone().into(),
            num(rec.u_logme_raw),
            num(rec.iou_logme_raw),
            num(rec.u_norm),
            num(rec.iou_norm),
            num(rec.det_logme),
        ];
        for e in &args.extra {
            row.push(extra_value(bundle, *e, &args.scoring, &cfg)?);
        }
        t.push(row);
    }
    emit_table(&t, &args.output, stdout)
}

fn load_tables(args: &GroundTruthArgs) -> Result<(ScoreTable, ScoreTable, Vec<String>)> {
    let scores = ScoreTable::read_csv(&args.scores)?;
    let gt = if args.gt == args.scores {
        scores.clone()
    } else {
        ScoreTable::read_csv(&args.gt)?
    };
    gt.require(&args.gt_column)?;
    let columns = if args.columns.is_empty() {
        scores
            .columns
            .iter()
            .map(|(h, _)| h.clone())
            .filter(|h| *h != args.gt_column)
            .collect()
    } else {
        args.columns.clone()
    };
    for c in &columns {
        if scores.column(c).is_none() {
            return Err(Error::Format(format!("score table has no numeric column '{c}'")));
        }
    }
    if columns.is_empty() {
        return Err(Error::Format("score table has no numeric score columns".into()));
    }
    Ok((scores, gt, columns))
}

fn cmd_evaluate(args: &EvaluateArgs, stdout: &mut dyn Write) -> Result<()> {
    let metrics: Vec<EvalMetric> = args.metrics.iter().map(|m| EvalMetric::parse(m)).collect::<Result<_>>()?;
    let (scores, gt, columns) = load_tables(&args.tables)?;
    let mut t = Table::new(&["score_column", "metric", "value"]);
    for col in &columns {
        let records = match scores.join(col, &gt, &args.tables.gt_column) {
            Ok(r) => Some(r),
            Err(Error::NotApplicable(_)) => None,
            Err(e) => return Err(e),
        };
        for m in &metrics {
            let v = match &records {
                Some(r) => num(m.compute(r)?),
                None => Value::Null,
            };
            t.push(vec![col.clone().into(), m.name().into(), v]);
        }
    }
    emit_table(&t, &args.output, stdout)
}

fn cmd_stability(args: &StabilityArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    if args.subset_size < 2 || !(args.fraction > 0.0 && args.fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "--subset-size must be >= 2 and --fraction in (0, 1], got {} and {}",
            args.subset_size, args.fraction
        )));
    }
    let (scores, gt, columns) = load_tables(&args.tables)?;
    let gt_values = gt.lookup(&scores.ids, &args.tables.gt_column)?;
    let mut metrics = Vec::new();
    for c in &columns {
        match scores.join(c, &gt, &args.tables.gt_column) {
            Ok(r) => metrics.push((c.clone(), r.iter().map(|x| x.score).collect())),
            Err(Error::NotApplicable(_)) => {
                let _ = writeln!(stderr, "skipping column '{c}': contains N/A");
            }
            Err(e) => return Err(e),
        }
    }
    let report = stability(
        &scores.ids,
        &metrics,
        &gt_values,
        args.subset_size,
        args.fraction,
        args.seed,
        args.variant.into(),
    )?;
    let _ = stderr.write_all(report.summary().as_bytes());
    let mut t = Table::new(&crate::ranking::STABILITY_COLUMNS);
    for m in &report.metrics {
        t.push(vec![
            m.metric.clone().into(),
            num(m.mean_tauw),
            num(m.std_tauw),
            num(m.mean_rel1),
            num(m.std_rel1),
        ]);
    }
    emit_table(&t, &args.output, stdout)
}

fn cmd_synth(args: &SynthArgs, stdout: &mut dyn Write) -> Result<()> {
    if args.qualities.is_empty() {
        return Err(Error::InvalidInput("--qualities is empty".into()));
    }
    let bundles: Vec<FeatureBundle> = args
        .qualities
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let seed = args.seed.wrapping_add(i as u64);
            let mut b = synth_bundle(args.objects, args.dim, args.classes, *q, seed)?;
            if args.gradient_dim > 0 {
                b.gradients = Some(synth_gradients(&b, args.gradient_dim, seed)?);
            }
            Ok(b)
        })
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let mut t = Table::new(&["model_name", "quality", "path"]);
    for (b, q) in bundles.iter().zip(&args.qualities) {
        let path = args.out_dir.join(format!("{}.{BUNDLE_EXTENSION}", b.model_name));
        write_bundle(b, &path)?;
        t.push(vec![b.model_name.clone().into(), num(*q), path.display().to_string().into()]);
    }
    emit(&t.render(OutputFormat::Csv)?, None, stdout)
}

fn cmd_assign_levels(args: &AssignLevelsArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = args.pyramid.config()?;
    let sizes: Vec<(f64, f64)> = match (&args.input, args.width, args.height) {
        (None, Some(w), Some(h)) => vec![(w, h)],
        (Some(p), _, _) => {
            let mut text = String::new();
            if p.as_os_str() == "-" {
                std::io::stdin()
                    .read_to_string(&mut text)
                    .map_err(|e| Error::io("<stdin>", e))?;
            } else {
                text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            }
            let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
            let h = rdr.headers()?.clone();
            let col = |name: &str| {
                h.iter()
                    .position(|x| x == name)
                    .ok_or_else(|| Error::Format(format!("input needs a '{name}' column")))
            };
            let (wi, hi) = (col("width")?, col("height")?);
            let mut out = Vec::new();
            for (i, r) in rdr.records().enumerate() {
                let r = r?;
                let parse = |j: usize| {
                    r.get(j)
                        .and_then(|s| s.parse::<f64>().ok())
                        .ok_or_else(|| Error::Format(format!("row {}: malformed size", i + 1)))
                };
                out.push((parse(wi)?, parse(hi)?));
            }
            out
        }
        _ => return Err(Error::InvalidInput("give --input or both --width and --height".into())),
    };
    let mut t = Table::new(&["width", "height", "level"]);
    for (w, h) in sizes {
        let level = assign_pyramid_level(w, h, &cfg)?;
        t.push(vec![num(w), num(h), level.into()]);
    }
    emit_table(&t, &args.output, stdout)
}

fn cmd_reproduce(args: &ReproduceArgs, stdout: &mut dyn Write) -> Result<()> {
    let report = reproduce_tables(&args.fixtures)?;
    let md = report.to_markdown();
    match &args.out {
        Some(prefix) => {
            let csv = report.to_csv()?;
            atomic_write(&prefix.with_extension("md"), md.as_bytes())?;
            atomic_write(&prefix.with_extension("csv"), csv.as_bytes())
        }
        None => emit(&md, None, stdout),
    }
}

fn cmd_validate(args: &ValidateArgs, stdout: &mut dyn Write) -> Result<()> {
    let b = read_bundle(&args.bundle)?;
    let line = format!(
        "ok {}: model={} dataset={} M={} D={} K={} levels={} gradients={}\n",
        args.bundle.display(),
        b.model_name,
        b.dataset_name,
        b.num_objects,
        b.feature_dim,
        b.num_classes,
        b.levels.is_some(),
        b.gradient_dim()
    );
    emit(&line, None, stdout)
}

pub fn execute(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Score(a) => cmd_score(a, stdout, stderr),
        Command::Rank(a) => cmd_rank(a, stdout),
        Command::Evaluate(a) => cmd_evaluate(a, stdout),
        Command::Stability(a) => cmd_stability(a, stdout, stderr),
        Command::Synth(a) => cmd_synth(a, stdout),
        Command::AssignLevels(a) => cmd_assign_levels(a, stdout),
        Command::Reproduce(a) => cmd_reproduce(a, stdout),
        Command::Validate(a) => cmd_validate(a, stdout),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::InvalidInput(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = configure_threads().and_then(|_| execute(&cli, stdout, stderr));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
