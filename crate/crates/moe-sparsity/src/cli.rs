//! Command-line interface: one subcommand per workflow step, each a thin
//! wrapper over the library that also drops a reproducibility manifest next
//! to its primary output.
//!
//! Exit codes: 0 success, 2 configuration errors (clap usage errors
//! included), 3 I/O or file-format errors, 4 the enumeration guard.

use crate::accounting::{count_after_prune, count_params, RefConfig};
use crate::calibration::{export_heatmap, run_calibration, StatsExport};
use crate::error::{Error, Result};
use crate::evaluation::{calib_size_sweep, eval_fidelity, sweep_csv};
use crate::io;
use crate::modelgen::{gen_calib, gen_model, DomainSpec, GenSpec};
use crate::numerics::Matrix;
use crate::pruning::{
    prune_frequency, prune_model_layerwise, prune_model_progressive, prune_random, PruneMethod,
    PruneSpec,
};
use crate::skipping::{calibrate_beta, SkipConfig, SkipMode};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Built-in copy of the shipped Mixtral-8x7B reference config.
pub const MIXTRAL_8X7B_JSON: &str = include_str!("../data/mixtral-8x7b.json");

#[derive(Parser, Debug)]
#[command(
    name = "moe-sparsity",
    version,
    about = "Desk-scale MoE expert pruning and dynamic skipping toolkit"
)]
pub struct Cli {
    /// Rayon worker threads (defaults to the core count).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Exhaustive,
    Progressive,
    Random,
    Frequency,
}

impl From<MethodArg> for PruneMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Exhaustive => PruneMethod::Exhaustive,
            MethodArg::Progressive => PruneMethod::Progressive,
            MethodArg::Random => PruneMethod::Random,
            MethodArg::Frequency => PruneMethod::Frequency,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SkipModeArg {
    Top2,
    General,
}

impl From<SkipModeArg> for SkipMode {
    fn from(m: SkipModeArg) -> Self {
        match m {
            SkipModeArg::Top2 => SkipMode::Top2,
            SkipModeArg::General => SkipMode::General,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic model from a GenSpec JSON document.
    GenModel {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate calibration tokens from a domain spec JSON document.
    GenCalib {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward the model over calibration tokens; write routing stats and an
    /// optional per-layer cache dump.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        /// Prefix for dumping per-layer {inputs,outputs} .cal files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prune the model to --keep experts per layer.
    Prune {
        #[arg(long)]
        method: MethodArg,
        #[arg(long)]
        keep: usize,
        #[arg(long)]
        model: PathBuf,
        /// Calibration tokens; optional for the random baseline.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Calibrate per-layer skip thresholds as median weight ratios.
    CalibrateBeta {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, value_enum, default_value = "top2")]
        skip_mode: SkipModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a variant model against a reference model on holdout tokens.
    Eval {
        /// The unmodified reference model.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// The pruned (and/or skipped) variant.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        skip: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Prune at several calibration sizes and tabulate holdout quality.
    SweepCalib {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Routing statistics and co-selection heatmaps.
    Stats {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Prefix for per-layer heatmap CSVs ({prefix}.layer{l}.csv).
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Parameter accounting for a reference config.
    Count {
        /// Reference config JSON; defaults to the shipped Mixtral-8x7B shape.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Report counts after pruning to this many experts per layer.
        #[arg(long)]
        keep: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Everything needed to reproduce a run: resolved options, seeds, input
/// hashes, and the files written. Saved as `<primary output>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    pub options: serde_json::Value,
    pub seeds: Vec<u64>,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_time_secs: f64,
}

fn manifest_path(primary: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", primary.display()))
}

struct ManifestBuilder {
    start: Instant,
    subcommand: String,
    options: serde_json::Value,
    seeds: Vec<u64>,
    input_hashes: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl ManifestBuilder {
    fn new(subcommand: &str, options: serde_json::Value) -> Self {
        ManifestBuilder {
            start: Instant::now(),
            subcommand: subcommand.to_string(),
            options,
            seeds: Vec::new(),
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn seed(&mut self, seed: u64) {
        self.seeds.push(seed);
    }

    /// Reads an input file, recording its content hash.
    fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.input_hashes
            .insert(path.display().to_string(), io::sha256_hex(&bytes));
        Ok(bytes)
    }

    fn wrote(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes the manifest next to the primary output.
    fn finish(mut self, primary: &Path) -> Result<()> {
        let path = manifest_path(primary);
        self.outputs.push(path.display().to_string());
        let manifest = RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            subcommand: self.subcommand,
            options: self.options,
            seeds: self.seeds,
            input_hashes: self.input_hashes,
            outputs: self.outputs,
            wall_time_secs: self.start.elapsed().as_secs_f64(),
        };
        write_json(&path, &manifest)
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path, e))?;
    text.push('\n');
    io::write_atomic(path, text.as_bytes())
}

fn load_model_hashed(mb: &mut ManifestBuilder, path: &Path) -> Result<crate::moe::MoEModel> {
    let bytes = mb.read_input(path)?;
    io::model_from_bytes(&bytes, path)
}

fn load_calib_hashed(mb: &mut ManifestBuilder, path: &Path) -> Result<Matrix> {
    mb.read_input(path)?;
    io::load_calib(path)
}

/// Document accepted by `gen-calib`: a domain plus the token count.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibGenSpec {
    pub domain: DomainSpec,
    pub n_tokens: usize,
}

fn default_holdout_tokens() -> usize {
    1024
}

/// Document accepted by `sweep-calib`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub domain: DomainSpec,
    pub sizes: Vec<usize>,
    pub method: PruneMethod,
    pub keep: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_holdout_tokens")]
    pub holdout_tokens: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        // Best effort; the pool can only be installed once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match cli.command {
        Command::GenModel { spec, out } => cmd_gen_model(&spec, &out),
        Command::GenCalib { spec, out } => cmd_gen_calib(&spec, &out),
        Command::Calibrate {
            model,
            calib,
            stats,
            out,
        } => cmd_calibrate(&model, &calib, &stats, out.as_deref()),
        Command::Prune {
            method,
            keep,
            model,
            calib,
            seed,
            out,
            report,
        } => cmd_prune(
            method.into(),
            keep,
            &model,
            calib.as_deref(),
            seed,
            &out,
            report.as_deref(),
        ),
        Command::CalibrateBeta {
            model,
            calib,
            skip_mode,
            out,
        } => cmd_calibrate_beta(&model, &calib, skip_mode.into(), &out),
        Command::Eval {
            reference,
            model,
            calib,
            skip,
            report,
        } => cmd_eval(&reference, &model, &calib, skip.as_deref(), &report),
        Command::SweepCalib { model, spec, out } => cmd_sweep(&model, &spec, &out),
        Command::Stats {
            model,
            calib,
            stats,
            heatmap,
        } => cmd_stats(&model, &calib, stats.as_deref(), heatmap.as_deref()),
        Command::Count {
            reference,
            keep,
            report,
        } => cmd_count(reference.as_deref(), keep, report.as_deref()),
    }
}

fn cmd_gen_model(spec_path: &Path, out: &Path) -> Result<()> {
    let mut mb = ManifestBuilder::new(
        "gen-model",
        json!({ "spec": spec_path.display().to_string(), "out": out.display().to_string() }),
    );
    let spec: GenSpec = parse_json(&mb.read_input(spec_path)?, spec_path)?;
    mb.seed(spec.seed);
    let model = gen_model(&spec)?;
    io::save_model(&model, out)?;
    mb.wrote(out);
    mb.finish(out)
}

fn cmd_gen_calib(spec_path: &Path, out: &Path) -> Result<()> {
    let mut mb = ManifestBuilder::new(
        "gen-calib",
        json!({ "spec": spec_path.display().to_string(), "out": out.display().to_string() }),
    );
    let spec: CalibGenSpec = parse_json(&mb.read_input(spec_path)?, spec_path)?;
    mb.seed(spec.domain.seed);
    let tokens = gen_calib(&spec.domain, spec.n_tokens, spec.domain.mean.len())?;
    io::save_calib(&tokens, out)?;
    mb.wrote(out);
    mb.finish(out)
}

fn cmd_calibrate(
    model_path: &Path,
    calib_path: &Path,
    stats_path: &Path,
    dump_prefix: Option<&Path>,
) -> Result<()> {
    let mut mb = ManifestBuilder::new(
        "calibrate",
        json!({
            "model": model_path.display().to_string(),
            "calib": calib_path.display().to_string(),
            "stats": stats_path.display().to_string(),
            "out": dump_prefix.map(|p| p.display().to_string()),
        }),
    );
    let model = load_model_hashed(&mut mb, model_path)?;
    let tokens = load_calib_hashed(&mut mb, calib_path)?;
    let (cache, stats) = run_calibration(&model, &tokens)?;
    write_json(stats_path, &StatsExport::from_stats(&stats))?;
    mb.wrote(stats_path);
    if let Some(prefix) = dump_prefix {
        for (l, lc) in cache.layers.iter().enumerate() {
            let inputs = PathBuf::from(format!("{}.layer{l}.inputs.cal", prefix.display()));
            let outputs = PathBuf::from(format!("{}.layer{l}.outputs.cal", prefix.display()));
            io::save_calib(&lc.inputs, &inputs)?;
            io::save_calib(&lc.outputs, &outputs)?;
            mb.wrote(&inputs);
            mb.wrote(&outputs);
        }
    }
    mb.finish(stats_path)
}

fn cmd_prune(
    method: PruneMethod,
    keep: usize,
    model_path: &Path,
    calib_path: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    report_path: Option<&Path>,
) -> Result<()> {
    let mut mb = ManifestBuilder::new(
        "prune",
        json!({
            "method": method.name(),
            "keep": keep,
            "model": model_path.display().to_string(),
            "calib": calib_path.map(|p| p.display().to_string()),
            "seed": seed,
            "out": out.display().to_string(),
            "report": report_path.map(|p| p.display().to_string()),
        }),
    );
    let model = load_model_hashed(&mut mb, model_path)?;
    let mut spec = PruneSpec::new(method, keep);
    if let Some(s) = seed {
        spec.seed = s;
        mb.seed(s);
    }
    let tokens = match calib_path {
        Some(p) => Some(load_calib_hashed(&mut mb, p)?),
        None => None,
    };

    let (pruned, report) = match (method, &tokens) {
        (PruneMethod::Random, None) => prune_random(&model, &spec, None)?,
        (_, None) => {
            return Err(Error::InvalidConfig(format!(
                "--calib is required for the {} method",
                method.name()
            )))
        }
        (PruneMethod::Random, Some(t)) => {
            let (cache, _) = run_calibration(&model, t)?;
            prune_random(&model, &spec, Some(&cache))?
        }
        (PruneMethod::Exhaustive, Some(t)) => {
            let (cache, _) = run_calibration(&model, t)?;
            prune_model_layerwise(&model, &cache, &spec)?
        }
        (PruneMethod::Progressive, Some(t)) => prune_model_progressive(&model, t, &spec)?,
        (PruneMethod::Frequency, Some(t)) => {
            let (cache, stats) = run_calibration(&model, t)?;
            prune_frequency(&model, &stats, &spec, Some(&cache))?
        }
    };

    io::save_model(&pruned, out)?;
    mb.wrote(out);
    if let Some(rp) = report_path {
        write_json(rp, &report)?;
        mb.wrote(rp);
    }
    mb.finish(out)
}

fn cmd_calibrate_beta(
    model_path: &Path,
    calib_path: &Path,
    mode: SkipMode,
    out: &Path,
) -> Result<()> {
    let mut mb = ManifestBuilder::new(
        "calibrate-beta",
        json!({
            "model": model_path.display().to_string(),
            "calib": calib_path.display().to_string(),
            "skip_mode": match mode { SkipMode::Top2 => "top2", SkipMode::General => "general" },
            "out": out.display().to_string(),
        }),
    );
    let model = load_model_hashed(&mut mb, model_path)?;
    let tokens = load_calib_hashed(&mut mb, calib_path)?;
    let (_, stats) = run_calibration(&model, &tokens)?;
    let config = calibrate_beta(&stats, mode)?;
    write_json(out, &config)?;
    mb.wrote(out);
    mb.finish(out)
}

fn cmd_eval(
    ref_path: &Path,
    model_path: &Path,
    calib_path: &Path,
    skip_path: Option<&Path>,
    report_path: &Path,
) -> Result<()> {
    let mut mb = ManifestBuilder::new(
        "eval",
        json!({
            "ref": ref_path.display().to_string(),
            "model": model_path.display().to_string(),
            "calib": calib_path.display().to_string(),
            "skip": skip_path.map(|p| p.display().to_string()),
            "report": report_path.display().to_string(),
        }),
    );
    let original = load_model_hashed(&mut mb, ref_path)?;
    let variant = load_model_hashed(&mut mb, model_path)?;
    let holdout = load_calib_hashed(&mut mb, calib_path)?;
    let skip: Option<SkipConfig> = match skip_path {
        Some(p) => Some(parse_json(&mb.read_input(p)?, p)?),
        None => None,
    };
    let report = eval_fidelity(&original, &variant, skip.as_ref(), &holdout)?;
    write_json(report_path, &report)?;
    mb.wrote(report_path);
    mb.finish(report_path)
}

fn cmd_sweep(model_path: &Path, spec_path: &Path, out: &Path) -> Result<()> {
    let mut mb = ManifestBuilder::new(
        "sweep-calib",
        json!({
            "model": model_path.display().to_string(),
            "spec": spec_path.display().to_string(),
            "out": out.display().to_string(),
        }),
    );
    let model = load_model_hashed(&mut mb, model_path)?;
    let sweep: SweepSpec = parse_json(&mb.read_input(spec_path)?, spec_path)?;
    mb.seed(sweep.domain.seed);
    mb.seed(sweep.seed);
    let mut spec = PruneSpec::new(sweep.method, sweep.keep);
    spec.seed = sweep.seed;
    let rows = calib_size_sweep(
        &model,
        &sweep.domain,
        &sweep.sizes,
        &spec,
        sweep.holdout_tokens,
    )?;
    io::write_atomic(out, sweep_csv(&rows).as_bytes())?;
    mb.wrote(out);
    mb.finish(out)
}

fn cmd_stats(
    model_path: &Path,
    calib_path: &Path,
    stats_path: Option<&Path>,
    heatmap_prefix: Option<&Path>,
) -> Result<()> {
    if stats_path.is_none() && heatmap_prefix.is_none() {
        return Err(Error::InvalidConfig(
            "stats: pass --stats and/or --heatmap".into(),
        ));
    }
    let mut mb = ManifestBuilder::new(
        "stats",
        json!({
            "model": model_path.display().to_string(),
            "calib": calib_path.display().to_string(),
            "stats": stats_path.map(|p| p.display().to_string()),
            "heatmap": heatmap_prefix.map(|p| p.display().to_string()),
        }),
    );
    let model = load_model_hashed(&mut mb, model_path)?;
    let tokens = load_calib_hashed(&mut mb, calib_path)?;
    let (_, stats) = run_calibration(&model, &tokens)?;
    if let Some(sp) = stats_path {
        write_json(sp, &StatsExport::from_stats(&stats))?;
        mb.wrote(sp);
    }
    if let Some(prefix) = heatmap_prefix {
        for l in 0..stats.layers.len() {
            let path = PathBuf::from(format!("{}.layer{l}.csv", prefix.display()));
            export_heatmap(&stats, l, &path)?;
            mb.wrote(&path);
        }
    }
    let primary = stats_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| heatmap_prefix.unwrap().to_path_buf());
    mb.finish(&primary)
}

fn cmd_count(ref_path: Option<&Path>, keep: Option<u64>, report_path: Option<&Path>) -> Result<()> {
    let mut mb = ManifestBuilder::new(
        "count",
        json!({
            "ref": ref_path.map(|p| p.display().to_string()),
            "keep": keep,
            "report": report_path.map(|p| p.display().to_string()),
        }),
    );
    let cfg: RefConfig = match ref_path {
        Some(p) => parse_json(&mb.read_input(p)?, p)?,
        None => serde_json::from_str(MIXTRAL_8X7B_JSON)
            .expect("built-in reference config parses"),
    };
    let rendered = match keep {
        Some(r) => {
            let rep = count_after_prune(&cfg, r)?;
            serde_json::to_string_pretty(&rep)
        }
        None => {
            let rep = count_params(&cfg)?;
            serde_json::to_string_pretty(&rep)
        }
    }
    .expect("count reports serialize");
    println!("{rendered}");
    if let Some(rp) = report_path {
        io::write_atomic(rp, format!("{rendered}\n").as_bytes())?;
        mb.wrote(rp);
        mb.finish(rp)?;
    }
    Ok(())
}
