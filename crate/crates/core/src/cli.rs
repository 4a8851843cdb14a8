//! Command-line front end. The `pt2t` binary only parses arguments and
//! calls [`run`]; everything here is reachable from tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{
    artifact_file, output_error, quantize_model, CalibGram, LayerFailure, ModelReport, QuantConfig, REPORT_FILE,
};
use crate::synth::{write_synthetic, SynthSpec};
use crate::tensorio::{load_calib, load_manifest, load_tensor, read_packed, write_raw_f32, LayerManifest};
use crate::ternary::{dequantize, weight_error, ScaleDtype};

pub const EXIT_OK: i32 = 0;
pub const EXIT_LAYER_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

pub const EVAL_REPORT_FILE: &str = "eval_report.json";
/// Relative difference above which eval flags a disagreement with the quantize-time report.
pub const EVAL_MATCH_TOL: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "pt2t", version, about = "Post-training ternarization of weight matrices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize every tensor in a manifest into PT2T files.
    Quantize(QuantizeArgs),
    /// Recompute error metrics from PT2T artifacts on disk.
    Eval(EvalArgs),
    /// Expand a PT2T file into raw little-endian f32 weights.
    Dequantize(DequantizeArgs),
    /// Print the header and statistics of a PT2T file.
    Inspect(InspectArgs),
    /// Generate a seeded synthetic manifest with weights and activations.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleDtypeArg {
    F32,
    F16,
}

impl From<ScaleDtypeArg> for ScaleDtype {
    fn from(v: ScaleDtypeArg) -> Self {
        match v {
            ScaleDtypeArg::F32 => ScaleDtype::F32,
            ScaleDtypeArg::F16 => ScaleDtype::F16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON object mapping layer names to calibration files; overrides the manifest.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(short = 'k', long = "group-size", default_value_t = 128)]
    pub group_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lambda_frac: f64,
    #[arg(long, default_value_t = crate::atq::DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[arg(long)]
    pub no_ssr: bool,
    #[arg(long)]
    pub no_aga: bool,
    #[arg(long)]
    pub no_itf: bool,
    #[arg(long)]
    pub no_compensation: bool,
    /// Fail layers that have no calibration data instead of using an identity Gram.
    #[arg(long)]
    pub require_calib: bool,
    #[arg(long, value_enum, default_value_t = ScaleDtypeArg::F32)]
    pub scale_dtype: ScaleDtypeArg,
    /// Extra machine-readable summary; the JSON report is always written.
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub report: ReportFormat,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

impl QuantizeArgs {
    pub fn config(&self) -> QuantConfig {
        QuantConfig {
            group_size: self.group_size,
            lambda_frac: self.lambda_frac,
            max_iters: self.max_iters,
            scale_dtype: self.scale_dtype.into(),
            ssr: !self.no_ssr,
            aga: !self.no_aga,
            itf: !self.no_itf,
            compensation: !self.no_compensation,
            allow_identity_gram: !self.require_calib,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory holding the PT2T files written by `quantize`.
    #[arg(long)]
    pub packed: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Where to write the JSON eval report (default: <packed>/eval_report.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DequantizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub file: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 256)]
    pub m: usize,
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.05)]
    pub outlier_frac: f64,
    #[arg(long, default_value_t = 10.0)]
    pub outlier_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub offset_range: f64,
}

/// Reads a `{"layer": "path"}` calibration map and points the matching
/// manifest entries at those files.
pub fn apply_calib_map(manifest: &mut LayerManifest, map_path: &Path) -> Result<()> {
    let text = fs::read_to_string(map_path).map_err(|e| Error::io(map_path, e))?;
    let map: BTreeMap<String, String> =
        serde_json::from_str(&text).map_err(|e| Error::ManifestParse(format!("calibration map: {e}")))?;
    let base = map_path.parent().unwrap_or(Path::new(""));
    for (name, rel) in map {
        let entry = manifest
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
        let p = base.join(&rel);
        if !p.exists() {
            return Err(Error::entry(&name, format!("missing calibration file {}", p.display())));
        }
        let abs = fs::canonicalize(&p).map_err(|e| Error::io(&p, e))?;
        entry.calib_path = Some(abs.to_string_lossy().into_owned());
    }
    Ok(())
}

fn load_with_calib(manifest: &Path, calib: Option<&Path>) -> Result<LayerManifest> {
    let mut man = load_manifest(manifest)?;
    if let Some(c) = calib {
        apply_calib_map(&mut man, c)?;
    }
    Ok(man)
}

pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Quantize(a) => cmd_quantize(&a),
        Command::Eval(a) => cmd_eval(&a).map(|r| if r.failures.is_empty() { EXIT_OK } else { EXIT_LAYER_FAILURE }),
        Command::Dequantize(a) => cmd_dequantize(&a).map(|_| EXIT_OK),
        Command::Inspect(a) => cmd_inspect(&a).map(|_| EXIT_OK),
        Command::Synth(a) => cmd_synth(&a).map(|_| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}

fn write_report_csv(path: &Path, report: &ModelReport) -> Result<()> {
    let mut out = String::from("layer,n,m,k,e_w,e_x_gram,bits_per_weight,total_bits_per_weight,itf_iters_mean,blocks,ssr,aga\n");
    for l in &report.layers {
        out.push_str(&format!(
            "{},{},{},{},{:e},{:e},{},{},{},{},{},{}\n",
            l.layer, l.n, l.m, l.k, l.e_w, l.e_x_gram, l.bits_per_weight, l.total_bits_per_weight, l.itf_iters_mean, l.blocks, l.ssr, l.aga
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn cmd_quantize(args: &QuantizeArgs) -> Result<i32> {
    let cfg = args.config();
    cfg.validate()?;
    if args.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let manifest = load_with_calib(&args.manifest, args.calib.as_deref())?;
    let report = quantize_model(&manifest, &cfg, &args.out, args.jobs)?;
    for l in &report.layers {
        println!(
            "{:<24} {:>6}x{:<6} e_w={:.6e} e_x={:.6e} bpw={:.3} ({:.3} total) itf_iters={:.1}{}",
            l.layer,
            l.n,
            l.m,
            l.e_w,
            l.e_x_gram,
            l.bits_per_weight,
            l.total_bits_per_weight,
            l.itf_iters_mean,
            if l.gram_fallback { " [identity gram]" } else { "" }
        );
    }
    for f in &report.failures {
        println!("{:<24} FAILED: {}", f.layer, f.error);
    }
    if args.report == ReportFormat::Csv {
        write_report_csv(&args.out.join("model_report.csv"), &report)?;
    }
    println!(
        "{} layers, {} failed; size reduction {:.2}x vs f32, {:.2}x vs f16",
        report.layers.len(),
        report.failures.len(),
        report.size_reduction_vs_f32,
        report.size_reduction_vs_f16
    );
    Ok(if report.failures.is_empty() { EXIT_OK } else { EXIT_LAYER_FAILURE })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLayer {
    pub layer: String,
    pub e_w: f64,
    pub e_x_gram: f64,
    pub gram_fallback: bool,
    pub calib_samples: usize,
    pub quantize_e_w: Option<f64>,
    pub quantize_e_x_gram: Option<f64>,
    /// Either metric differs from the quantize-time report beyond tolerance.
    pub mismatch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub layers: Vec<EvalLayer>,
    pub failures: Vec<LayerFailure>,
    pub mismatches: usize,
}

fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn eval_layer(manifest: &LayerManifest, packed_dir: &Path, name: &str) -> Result<(f64, f64, CalibGram)> {
    let w = load_tensor(manifest, name)?;
    let packed = read_packed(packed_dir.join(artifact_file(name)))?;
    if [packed.rows(), packed.cols()] != w.shape() {
        return Err(Error::ShapeMismatch {
            expected: w.shape().to_vec(),
            actual: vec![packed.rows(), packed.cols()],
        });
    }
    let w_hat = dequantize(&packed);
    let gram = match load_calib(manifest, name)? {
        Some(b) => CalibGram::from_batch(&b),
        None => CalibGram::identity(w.cols()),
    };
    let e_w = weight_error(&w, &w_hat)?;
    let e_x = output_error(&w, &w_hat, &gram)?;
    Ok((e_w, e_x, gram))
}

/// Recomputes metrics purely from on-disk artifacts.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let manifest = load_with_calib(&args.manifest, args.calib.as_deref())?;
    let prior: Option<ModelReport> = match fs::read_to_string(args.packed.join(REPORT_FILE)) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(_) => None,
    };
    let mut layers = Vec::new();
    let mut failures = Vec::new();
    for e in &manifest.entries {
        match eval_layer(&manifest, &args.packed, &e.name) {
            Ok((e_w, e_x, gram)) => {
                let q = prior.as_ref().and_then(|p| p.layers.iter().find(|l| l.layer == e.name));
                let mismatch = q.is_some_and(|q| rel_diff(q.e_w, e_w) > EVAL_MATCH_TOL || rel_diff(q.e_x_gram, e_x) > EVAL_MATCH_TOL);
                let row = EvalLayer {
                    layer: e.name.clone(),
                    e_w,
                    e_x_gram: e_x,
                    gram_fallback: gram.is_identity_fallback(),
                    calib_samples: gram.count(),
                    quantize_e_w: q.map(|q| q.e_w),
                    quantize_e_x_gram: q.map(|q| q.e_x_gram),
                    mismatch,
                };
                println!(
                    "{:<24} e_w={:.6e} e_x={:.6e}{}",
                    row.layer,
                    row.e_w,
                    row.e_x_gram,
                    if mismatch { "  MISMATCH vs quantize report" } else { "" }
                );
                layers.push(row);
            }
            Err(err) => {
                println!("{:<24} FAILED: {err}", e.name);
                failures.push(LayerFailure {
                    layer: e.name.clone(),
                    error: err.to_string(),
                });
            }
        }
    }
    let report = EvalReport {
        mismatches: layers.iter().filter(|l| l.mismatch).count(),
        layers,
        failures,
    };
    let out = args.out.clone().unwrap_or_else(|| args.packed.join(EVAL_REPORT_FILE));
    fs::write(&out, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&out, e))?;
    Ok(report)
}

pub fn cmd_dequantize(args: &DequantizeArgs) -> Result<()> {
    let packed = read_packed(&args.input)?;
    let w = dequantize(&packed);
    write_raw_f32(&args.output, w.data())?;
    println!("wrote {}x{} f32 to {}", w.rows(), w.cols(), args.output.display());
    Ok(())
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let p = read_packed(&args.file)?;
    let trits = p.trits();
    let total = trits.as_slice().len() as f64;
    let frac = |v: i8| trits.as_slice().iter().filter(|&&t| t == v).count() as f64 / total;
    let identity = p.permutation().iter().enumerate().all(|(j, &c)| j == c as usize);
    let file_bytes = crate::tensorio::encoded_len(p.rows(), p.cols(), p.group_size(), p.scale_dtype());
    let alphas = p.grid().alphas();
    let zero_groups = alphas.iter().filter(|&&a| a == 0.0).count();
    println!("shape        {} x {}", p.rows(), p.cols());
    println!("group size   {} ({} groups/row)", p.group_size(), p.groups());
    println!("scale dtype  {:?}", p.scale_dtype());
    println!("permutation  {}", if identity { "identity" } else { "reordered" });
    println!("trits        -1: {:.4}  0: {:.4}  +1: {:.4}", frac(-1), frac(0), frac(1));
    println!("zero-alpha   {zero_groups} of {} groups", alphas.len());
    println!(
        "bits/weight  {:.4} (trits) {:.4} (file, {} bytes)",
        p.trit_bits_per_weight(),
        8.0 * file_bytes as f64 / total,
        file_bytes
    );
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<LayerManifest> {
    let spec = SynthSpec {
        layers: args.layers,
        n: args.n,
        m: args.m,
        samples: args.samples,
        outlier_frac: args.outlier_frac,
        outlier_scale: args.outlier_scale,
        offset_range: args.offset_range,
        ..SynthSpec::default()
    };
    if !(0.0..=1.0).contains(&spec.outlier_frac) || spec.offset_range < 0.0 {
        return Err(Error::Config("outlier fraction must be in [0, 1] and offset range non-negative".into()));
    }
    let man = write_synthetic(&args.out, args.seed, &spec)?;
    println!("wrote {} layers to {}", man.entries.len(), args.out.join("manifest.json").display());
    Ok(man)
}
