use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use zqhero::toy::{gen_batches, gen_toy, TOY_CONFIG};
use zqhero::{
    compare, model_traffic, quantize_model, write_atomic, Batch, BatchData, CalibrationTable, CompareReport,
    Container, Error, Model, ModeConfig, ModelConfig, Tensor, TrafficReport,
};

/// Post-training W8A8 quantization of transformer encoders.
#[derive(Parser)]
#[command(name = "zqhero", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded random model and, with --data, random token batches.
    GenToy(GenToyArgs),
    /// Observe activation ranges over FP32 forward passes.
    Calibrate(CalibrateArgs),
    /// Fold and quantize a model for one mode.
    Quantize(QuantizeArgs),
    /// Run one mode over a batch-data file.
    Run(RunArgs),
    /// Compare modes against FP32.
    Compare(CompareArgs),
    /// Analytical memory traffic of one forward pass.
    Traffic(TrafficArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long)]
    out: PathBuf,
    /// Also write `batches * batch_size` token rows here.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON model config; defaults to the 4-layer d=128 toy shape.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    batches: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    batches: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Longer rows are truncated; shorter rows are used as they are.
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Preset name (FP32, M1, M2, M3) or path to a JSON mode config.
    #[arg(long)]
    mode: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value = "FP32")]
    mode: String,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    /// Container with `hidden` and (with a head) `logits`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Comma-separated modes.
    #[arg(long, default_value = "M1,M2,M3")]
    mode: String,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct TrafficArgs {
    /// Take the shape from this checkpoint; BERT-base shapes otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "M3")]
    mode: String,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

const BERT_BASE: ModelConfig = ModelConfig {
    vocab_size: 30522,
    max_positions: 512,
    type_vocab: 2,
    d_model: 768,
    n_heads: 12,
    d_ff: 3072,
    n_layers: 12,
    n_labels: 2,
    ln_eps: 1e-12,
};

fn load_model(path: &Path) -> anyhow::Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_data(path: &Path, seq_len: usize) -> anyhow::Result<BatchData> {
    let mut data = BatchData::load(path).with_context(|| format!("loading data {}", path.display()))?;
    if data.seq_len() > seq_len {
        let all = data.all().truncate(seq_len)?;
        data = BatchData::new(all.ids, all.mask, data.labels)?;
    }
    Ok(data)
}

fn load_calib(path: Option<&Path>, mode: &ModeConfig) -> anyhow::Result<CalibrationTable> {
    match path {
        Some(p) => CalibrationTable::load(p).with_context(|| format!("loading calibration {}", p.display())),
        None if mode.required_symbols().is_empty() => Ok(CalibrationTable::default()),
        None => bail!("mode {mode} needs --calib"),
    }
}

fn emit(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_toy_cmd(a: GenToyArgs) -> anyhow::Result<()> {
    let config = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(Error::from)?,
        None => TOY_CONFIG,
    };
    let model = gen_toy(&config, a.seed)?;
    model.save(&a.out)?;
    if let Some(path) = &a.data {
        let seq = a.seq_len.min(config.max_positions);
        gen_batches(&model, a.batches * a.batch_size, seq, a.seed.wrapping_add(1))?.save(path)?;
    }
    Ok(())
}

fn calibrate_cmd(a: CalibrateArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let data = load_data(&a.data, a.seq_len)?;
    let mut batches = data.batches(a.batch_size)?;
    batches.truncate(a.batches);
    let table = model.calibrate(&batches)?;
    emit(&table.to_json()?, Some(&a.out))
}

fn quantize_cmd(a: QuantizeArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let mode = ModeConfig::resolve(&a.mode)?;
    let calib = load_calib(a.calib.as_deref(), &mode)?;
    quantize_model(&model, &calib, mode)?.to_container()?.write(&a.out)?;
    Ok(())
}

/// Runs `batches` in order and stacks the outputs.
fn run_all(q: &zqhero::QuantizedModel, batches: &[Batch]) -> anyhow::Result<zqhero::ForwardOutput> {
    let (mut hidden, mut logits, mut rows) = (Vec::new(), Vec::new(), 0);
    let mut shape = Vec::new();
    let mut n_labels = 0;
    for b in batches {
        let out = q.forward(b)?;
        shape = out.hidden.shape().to_vec();
        rows += b.n_seq();
        hidden.extend_from_slice(out.hidden.data());
        if let Some(l) = out.logits {
            n_labels = l.cols();
            logits.extend_from_slice(l.data());
        }
    }
    if rows == 0 {
        bail!("no rows to run");
    }
    shape[0] = rows;
    let logits = if n_labels > 0 { Some(Tensor::new(&[rows, n_labels], logits)?) } else { None };
    Ok(zqhero::ForwardOutput { hidden: Tensor::new(&shape, hidden)?, logits })
}

fn run_cmd(a: RunArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let mode = ModeConfig::resolve(&a.mode)?;
    let calib = load_calib(a.calib.as_deref(), &mode)?;
    let data = load_data(&a.data, a.seq_len)?;
    let q = quantize_model(&model, &calib, mode)?;
    let out = run_all(&q, &data.batches(a.batch_size)?)?;

    let predictions: Option<Vec<usize>> = out.logits.as_ref().map(zqhero::compare::argmax_rows);
    let accuracy = match (&predictions, &data.labels) {
        (Some(p), Some(l)) => {
            Some(p.iter().zip(l).filter(|(p, &y)| **p as i64 == y as i64).count() as f64 / p.len() as f64)
        }
        _ => None,
    };
    if let Some(path) = &a.out {
        let mut c = Container::default();
        c.meta.insert("mode".into(), serde_json::to_value(mode)?);
        c.insert("hidden", out.hidden.clone());
        if let Some(l) = &out.logits {
            c.insert("logits", l.clone());
        }
        c.write(path)?;
    }
    let summary = serde_json::json!({
        "mode": mode.to_string(),
        "rows": out.hidden.shape()[0],
        "predictions": predictions,
        "accuracy": accuracy,
    });
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&summary)?),
        Format::Text => {
            println!("mode {mode}: {} rows", out.hidden.shape()[0]);
            if let Some(acc) = accuracy {
                println!("accuracy {acc:.4}");
            }
        }
    }
    Ok(())
}

fn compare_text(reports: &[CompareReport]) -> String {
    let with_logits = reports.iter().any(|r| r.logits.is_some());
    let with_acc = reports.iter().any(|r| r.accuracy.is_some());
    let mut s = format!("{:<12} {:>12} {:>12} {:>10}", "mode", "hidden_cos", "hidden_rel", "max_abs");
    if with_logits {
        write!(s, " {:>12} {:>12} {:>10}", "logits_cos", "logits_rel", "agree").unwrap();
    }
    if with_acc {
        write!(s, " {:>9}", "accuracy").unwrap();
    }
    s.push('\n');
    for r in reports {
        write!(s, "{:<12} {:>12.6} {:>12.6} {:>10.4}", r.mode, r.hidden.cosine, r.hidden.rel_frobenius, r.hidden.max_abs_err)
            .unwrap();
        if let Some(l) = &r.logits {
            write!(s, " {:>12.6} {:>12.6} {:>10.4}", l.cosine, l.rel_frobenius, r.agreement.unwrap_or(0.0)).unwrap();
        }
        if let Some(acc) = r.accuracy {
            write!(s, " {acc:>9.4}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn compare_cmd(a: CompareArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let modes = a.mode.split(',').map(|m| ModeConfig::resolve(m.trim())).collect::<zqhero::Result<Vec<_>>>()?;
    let data = load_data(&a.data, a.seq_len)?;
    let batches = data.batches(a.batch_size)?;
    let calib = a.calib.as_deref().map(CalibrationTable::load).transpose()?.unwrap_or_default();
    let reference = run_all(&model.reference()?, &batches)?;
    let mut reports = Vec::with_capacity(modes.len());
    for mode in modes {
        if a.calib.is_none() && !mode.required_symbols().is_empty() {
            bail!("mode {mode} needs --calib");
        }
        let out = run_all(&quantize_model(&model, &calib, mode)?, &batches)?;
        reports.push(compare(&mode.to_string(), &reference, &out, data.labels.as_deref())?);
    }
    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&reports)? + "\n",
        Format::Text => compare_text(&reports),
    };
    emit(&text, a.out.as_deref())
}

fn traffic_text(r: &TrafficReport) -> String {
    let mut s = format!(
        "mode {}  seq {}  batch {}\n{:<26} {:>10} {:>12} {:>12} {:>8}\n",
        r.mode, r.seq_len, r.batch, "op", "precision", "read", "written", "ratio"
    );
    for (e, b) in r.entries.iter().zip(&r.baseline) {
        let ratio = if e.total() == 0 { 1.0 } else { b.total() as f64 / e.total() as f64 };
        writeln!(s, "{:<26} {:>10} {:>12} {:>12} {:>8.4}", e.name, e.precision, e.bytes_read, e.bytes_written, ratio)
            .unwrap();
    }
    writeln!(s, "total {} bytes, fp16 baseline {} bytes, ratio {:.4}", r.total, r.baseline_total, r.ratio).unwrap();
    s
}

fn traffic_cmd(a: TrafficArgs) -> anyhow::Result<()> {
    let config = match &a.model {
        Some(p) => load_model(p)?.config,
        None => BERT_BASE,
    };
    let mode = ModeConfig::resolve(&a.mode)?;
    let report = model_traffic(&config, a.seq_len, a.batch_size, mode);
    let text = match a.format {
        Format::Json => report.to_json()?,
        Format::Text => traffic_text(&report),
    };
    emit(&text, a.out.as_deref())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Invariant(_)) => 3,
        Some(_) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.cmd {
        Cmd::GenToy(a) => gen_toy_cmd(a),
        Cmd::Calibrate(a) => calibrate_cmd(a),
        Cmd::Quantize(a) => quantize_cmd(a),
        Cmd::Run(a) => run_cmd(a),
        Cmd::Compare(a) => compare_cmd(a),
        Cmd::Traffic(a) => traffic_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
