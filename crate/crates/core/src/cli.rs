//! Command-line surface. Exit codes: 0 success, 1 usage or configuration
//! error, 2 bad data on disk.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checks::gradient_suite;
use crate::error::{Error, Result};
use crate::experiment::install_converter;
use crate::io::{load_checkpoint, load_dataset, load_frame, save_checkpoint, save_dataset, scene_dirs, srgb_to_netpbm, write_atomic};
use crate::nets::{init_bundle, Domain, Mode};
use crate::raw::{camera_preview, domain_statistics, StatsReport};
use crate::synth::{default_profiles, generate_pairs, CameraProfile, PairSettings};
use crate::train::{
    converter_pairs, evaluate, pretrain_converter, select_k_shot, train, write_history_csv, ConverterConfig,
    TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "lowlight-fsda", version, about = "Few-shot low-light raw enhancement toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset for one camera.
    SynthGen(SynthGenArgs),
    /// Pretrain the 16-to-8-bit converter on a source dataset.
    PretrainConverter(PretrainArgs),
    /// Train an enhancement model.
    Train(TrainArgs),
    /// Enhance one scene.
    Infer(InferArgs),
    /// Score a checkpoint on a test dataset.
    Eval(EvalArgs),
    /// Intensity/derivative histograms of a dataset's raw captures.
    Stats(StatsArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct SynthGenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scenes: usize,
    /// `A`, `B`, or a camera profile JSON file.
    #[arg(long)]
    profile: String,
    /// Scene extents as HxW.
    #[arg(long, default_value = "128x128", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, value_delimiter = ',', default_value = "100,300")]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_noise: bool,
}

#[derive(Debug, Args, Serialize)]
struct PretrainArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = ConverterConfig::default().budget)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::desk().channel_base)]
    channel_base: usize,
    #[arg(long, default_value_t = ConverterConfig::default().crop)]
    crop: usize,
    #[arg(long, default_value_t = ConverterConfig::default().lr)]
    lr: f64,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Source-camera dataset; not needed for `target_only`.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// JSON file with TrainConfig fields; unspecified fields keep the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint holding a pretrained converter.
    #[arg(long)]
    converter: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Loss history CSV; written to stdout when omitted.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    domain: DomainArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_enum)]
    domain: DomainArg,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct StatsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Second dataset; prints the histogram L1 distance between the two.
    #[arg(long)]
    against: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct GradcheckArgs {
    /// Override the per-check tolerances.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_data_error() || matches!(e, Error::Dimension { .. }) {
        2
    } else {
        1
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn print_config(out: &mut dyn Write, command: &str, cfg: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string(cfg).expect("config serializes");
    writeln!(out, "# {command} config {json}").map_err(io_err)
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::SynthGen(a) => synth_gen(&a, out),
        Command::PretrainConverter(a) => pretrain(&a, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::Infer(a) => infer(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Stats(a) => stats(&a, out),
        Command::Gradcheck(a) => gradcheck(&a, out),
    }
}

fn load_profile(spec: &str) -> Result<CameraProfile> {
    let (a, b) = default_profiles();
    match spec {
        "A" => Ok(a),
        "B" => Ok(b),
        path => {
            let p = Path::new(path);
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let profile: CameraProfile = serde_json::from_slice(&bytes).map_err(|e| Error::format(p, e.to_string()))?;
            profile.validate()?;
            Ok(profile)
        }
    }
}

#[derive(Serialize)]
struct Resolved<'a, A, B> {
    args: &'a A,
    #[serde(flatten)]
    extra: B,
}

fn synth_gen(a: &SynthGenArgs, out: &mut dyn Write) -> Result<i32> {
    let profile = load_profile(&a.profile)?;
    let settings = PairSettings {
        ratio_set: a.ratios.clone(),
        noise_enabled: !a.no_noise,
        ..PairSettings::default()
    };
    #[derive(Serialize)]
    struct Extra<'a> {
        camera: &'a CameraProfile,
        long_exposure_s: f64,
    }
    print_config(
        out,
        "synth-gen",
        &Resolved {
            args: a,
            extra: Extra {
                camera: &profile,
                long_exposure_s: settings.long_exposure_s,
            },
        },
    )?;
    let (h, w) = a.size;
    let pairs = generate_pairs(&profile, a.scenes, h, w, a.seed, &settings)?;
    let dirs = save_dataset(&a.out, &pairs)?;
    writeln!(out, "wrote {} scenes to {}", dirs.len(), a.out.display()).map_err(io_err)?;
    Ok(0)
}

fn pretrain(a: &PretrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = ConverterConfig {
        budget: a.budget,
        crop: a.crop,
        lr: a.lr,
        seed: a.seed,
        ..ConverterConfig::default()
    };
    print_config(out, "pretrain-converter", &Resolved { args: a, extra: &cfg })?;
    let pairs = load_dataset(&a.source)?;
    let mut bundle = init_bundle(a.seed, Mode::Proposed, a.channel_base)?;
    let report = pretrain_converter(&mut bundle, &converter_pairs(&pairs), &cfg)?;
    save_checkpoint(&a.out, &bundle)?;
    writeln!(
        out,
        "converter: {} train / {} held-out pairs, held-out MAE {:.5}",
        report.train_pairs, report.val_pairs, report.val_mae
    )
    .map_err(io_err)?;
    Ok(0)
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let mut v: serde_json::Value =
                serde_json::from_slice(&bytes).map_err(|e| Error::format(p, e.to_string()))?;
            // fields missing from the file fall back to the desk preset
            let mut base = serde_json::to_value(TrainConfig::desk()).expect("serializes");
            if let (Some(obj), Some(b)) = (v.as_object_mut(), base.as_object_mut()) {
                for (k, val) in std::mem::take(obj) {
                    b.insert(k, val);
                }
            } else {
                return Err(Error::format(p, "config must be a JSON object"));
            }
            serde_json::from_value(base).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::desk(),
    };
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = resolve_train_config(a)?;
    print_config(out, "train", &Resolved { args: a, extra: &cfg })?;
    let target_pool = load_dataset(&a.target)?;
    let shots = select_k_shot(&target_pool, cfg.k, &cfg.ratio_set, cfg.seed)?;
    let source = match (&a.source, cfg.mode) {
        (_, Mode::TargetOnly) => Vec::new(),
        (Some(dir), _) => load_dataset(dir)?,
        (None, m) => return Err(Error::Config(format!("mode {m} needs --source"))),
    };
    let mut bundle = init_bundle(cfg.seed, cfg.mode, cfg.channel_base)?;
    if let Some(p) = &a.converter {
        let conv = load_checkpoint(p)?;
        if conv.channel_base != cfg.channel_base {
            return Err(Error::Config(format!(
                "converter checkpoint has channel_base {}, config has {}",
                conv.channel_base, cfg.channel_base
            )));
        }
        install_converter(&mut bundle, &conv);
    }
    let history = train(&mut bundle, &source, &shots, &cfg)?;
    let mut csv = Vec::new();
    write_history_csv(&mut csv, &history).map_err(io_err)?;
    match &a.history {
        Some(p) => write_atomic(p, &csv)?,
        None => out.write_all(&csv).map_err(io_err)?,
    }
    save_checkpoint(&a.out, &bundle)?;
    writeln!(out, "# saved {} after {} steps", a.out.display(), history.len()).map_err(io_err)?;
    Ok(0)
}

fn infer(a: &InferArgs, out: &mut dyn Write) -> Result<i32> {
    print_config(out, "infer", a)?;
    let bundle = load_checkpoint(&a.ckpt)?;
    let (frame, _) = load_frame(&a.input)?;
    let img = bundle.full_forward(&frame, a.domain.into())?;
    srgb_to_netpbm(&img).write(&a.out)?;
    writeln!(out, "wrote {}", a.out.display()).map_err(io_err)?;
    Ok(0)
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    print_config(out, "eval", a)?;
    let bundle = load_checkpoint(&a.ckpt)?;
    let test = load_dataset(&a.test)?;
    let report = evaluate(&bundle, &test, a.domain.into())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(io_err)?;
    write_atomic(&a.report, &csv)?;
    writeln!(
        out,
        "{} scenes: mean PSNR {:.3} dB, mean SSIM {:.4}",
        report.rows.len(),
        report.mean_psnr,
        report.mean_ssim
    )
    .map_err(io_err)?;
    Ok(0)
}

fn dataset_stats(dir: &Path) -> Result<StatsReport> {
    let previews = scene_dirs(dir)?
        .iter()
        .map(|d| load_frame(d).and_then(|(f, _)| camera_preview(&f)))
        .collect::<Result<Vec<_>>>()?;
    domain_statistics(&previews)
}

fn stats(a: &StatsArgs, out: &mut dyn Write) -> Result<i32> {
    print_config(out, "stats", a)?;
    let report = dataset_stats(&a.input)?;
    let mut csv = String::from("histogram,bin,value\n");
    for (name, h) in [
        ("intensity", &report.intensity),
        ("derivative", &report.derivative),
        ("joint", &report.joint),
    ] {
        for (i, v) in h.iter().enumerate() {
            csv.push_str(&format!("{name},{i},{v:e}\n"));
        }
    }
    write_atomic(&a.report, csv.as_bytes())?;
    if let Some(other) = &a.against {
        let d = report.l1_distance(&dataset_stats(other)?);
        writeln!(out, "histogram L1 distance: {d:.6}").map_err(io_err)?;
    }
    Ok(0)
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    print_config(out, "gradcheck", a)?;
    let reports = gradient_suite(a.seed, a.tolerance);
    writeln!(out, "{:<22} {:>14} {:>10}  status", "op", "max_rel_error", "tolerance").map_err(io_err)?;
    for r in &reports {
        writeln!(
            out,
            "{:<22} {:>14.3e} {:>10.1e}  {}",
            r.op_name,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        )
        .map_err(io_err)?;
    }
    Ok(if reports.iter().all(|r| r.passed) { 0 } else { 1 })
}
