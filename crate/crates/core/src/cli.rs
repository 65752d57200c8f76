//! Command-line surface: `synth`, `pretrain`, `train`, `register` and
//! `evaluate`.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 I/O or
//! file-format error, 4 numeric failure. Diagnostics go to stderr; stdout
//! carries only final machine-readable lines and the evaluation table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_case, CaseOutcome, CaseResult, EvaluationReport};
use crate::io::{
    load_manifest, read_field, read_landmarks, read_volume, synthesize_dataset, write_dataset, write_field, write_volume,
    CaseRecord, SyntheticSpec,
};
use crate::models::{Checkpoint, ModelBundle};
use crate::par;
use crate::training::{EpochRecord, PairCase, TrainRecord, Trainer};
use crate::volume::DisplacementField;

#[derive(Debug, Parser)]
#[command(name = "wssamnet", version, about = "Segmentation-attention deformable registration of 3D volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic cases with a known deformation
    Synth(SynthArgs),
    /// Affine self-registration pretraining on every volume of a manifest
    Pretrain(TrainArgs),
    /// Pair training (fixed to moving) on a manifest
    Train(TrainArgs),
    /// Register one moving volume onto a fixed volume
    Register(RegisterArgs),
    /// Landmark evaluation of stored or predicted fields
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// SyntheticSpec JSON; built-in defaults when omitted (32^3, 8 landmarks,
    /// warp 3 voxels, smoothness sigma 4, 16 blobs, seed 0, 1 case)
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// RunConfig JSON; built-in defaults when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest; falls back to the config's paths.manifest
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint to write; falls back to the config's paths.output. The
    /// training log goes to <out>.log.json and <out>.log.txt
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint of the same phase (weights, optimiser state
    /// and epoch counter); runs the configured number of further epochs
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Start from the weights of a checkpoint with a fresh optimiser (e.g. a
    /// pretraining checkpoint)
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Overrides the config's seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    /// Displacement field output ([X, Y, Z, 3], voxel units)
    #[arg(long)]
    pub out_field: PathBuf,
    /// Warped moving volume output
    #[arg(long)]
    pub out_warped: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["field_dir", "ckpt", "truth", "identity"])))]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding <case_id>_field.nii.gz (or .nii) per case
    #[arg(long)]
    pub field_dir: Option<PathBuf>,
    /// Predict each case's field with this checkpoint
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Use the manifest's truth_field_path entries
    #[arg(long)]
    pub truth: bool,
    /// Evaluate the identity transform
    #[arg(long)]
    pub identity: bool,
    /// Report JSON output
    #[arg(long)]
    pub out: PathBuf,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::Config(_) | Error::Manifest(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Checkpoint(_) => 3,
        Error::Numeric(_) => 4,
    }
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Pretrain(a) => cmd_train(&a, Phase::Pretrain),
        Command::Train(a) => cmd_train(&a, Phase::Train),
        Command::Register(a) => cmd_register(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<SyntheticSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| match e {
        Error::InvalidInput(m) => Error::Config(m),
        other => other,
    })?;
    let cases = synthesize_dataset(&spec)?;
    let records = write_dataset(&cases, &a.out)?;
    log::info!("wrote {} synthetic case(s) to {}", records.len(), a.out.display());
    Ok(())
}

/// Loads one manifest entry with landmarks in each volume's voxel frame.
pub fn load_pair(rec: &CaseRecord) -> Result<PairCase> {
    let fixed = read_volume(&rec.fixed_path)?;
    let moving = read_volume(&rec.moving_path)?;
    let fixed_landmarks = read_landmarks(&rec.fixed_landmarks_path)?.to_voxel(&fixed);
    let moving_landmarks = read_landmarks(&rec.moving_landmarks_path)?.to_voxel(&moving);
    Ok(PairCase { id: rec.case_id.clone(), fixed, moving, fixed_landmarks, moving_landmarks })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Train,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Train => "train",
        }
    }
}

const META_PHASE: &str = "phase";

fn log_paths(out: &Path) -> (PathBuf, PathBuf) {
    let base = out.as_os_str().to_owned();
    let mut json = base.clone();
    json.push(".log.json");
    let mut txt = base;
    txt.push(".log.txt");
    (PathBuf::from(json), PathBuf::from(txt))
}

fn epoch_line(r: &EpochRecord) -> String {
    format!(
        "epoch {} total {:.6} cc {:.6} mi {:.6} smooth {:.6} focal_fixed {:.6} focal_moving {:.6} lr {:.3e}",
        r.epoch, r.total, r.cc, r.mi, r.smooth, r.focal_fixed, r.focal_moving, r.lr
    )
}

pub fn cmd_train(a: &TrainArgs, phase: Phase) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let manifest = a
        .manifest
        .clone()
        .or_else(|| cfg.paths.manifest.clone())
        .ok_or_else(|| Error::Config("no manifest given (--manifest or paths.manifest)".into()))?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.paths.output.clone())
        .ok_or_else(|| Error::Config("no output checkpoint given (--out or paths.output)".into()))?;
    let records = load_manifest(&manifest)?;
    if records.is_empty() {
        return Err(Error::Manifest(format!("{}: manifest lists no cases", manifest.display())));
    }
    let pairs = records.iter().map(load_pair).collect::<Result<Vec<_>>>()?;
    let opt = match phase {
        Phase::Pretrain => cfg.pretrain_opt(),
        Phase::Train => cfg.train_opt(),
    };
    let objective = cfg.objective.clone();
    let mut trainer = if let Some(p) = &a.resume {
        let ck = Checkpoint::load(p)?;
        let stored = ck.meta.get(META_PHASE).and_then(|v| v.as_str()).unwrap_or_default();
        if stored != phase.name() {
            return Err(Error::Config(format!(
                "{}: cannot resume {} from a `{stored}` checkpoint",
                p.display(),
                phase.name()
            )));
        }
        let mut t = Trainer::resume(&ck, opt, objective)?;
        t.opt.epochs += t.epochs_completed;
        t
    } else {
        let bundle = match &a.init {
            Some(p) => Checkpoint::load(p)?.to_bundle()?,
            None => ModelBundle::new(cfg.bundle_config())?,
        };
        Trainer::new(bundle, opt, objective)?
    };
    let first = trainer.epochs_completed;
    log::info!(
        "{}: {} case(s), epochs {}..{}, {} parameters",
        phase.name(),
        pairs.len(),
        first,
        trainer.opt.epochs,
        trainer.bundle.parameter_count()
    );
    let on_epoch = |r: &EpochRecord| log::info!("{}", epoch_line(r));
    let record: TrainRecord = match phase {
        Phase::Pretrain => {
            let items = PairCase::pretrain_items(&pairs);
            trainer.run_pretrain(&items, &cfg.augment, on_epoch)?
        }
        Phase::Train => trainer.run_train(&pairs, on_epoch)?,
    };
    let mut ck = trainer.checkpoint();
    ck.meta[META_PHASE] = serde_json::Value::from(phase.name());
    ck.save(&out)?;
    let (json_path, txt_path) = log_paths(&out);
    let log_json = serde_json::json!({ "phase": phase.name(), "config": cfg, "epochs": record.epochs });
    fs::write(&json_path, serde_json::to_string_pretty(&log_json).expect("log serialises") + "\n")?;
    let mut txt = String::new();
    for r in &record.epochs {
        writeln!(txt, "{}", epoch_line(r)).expect("writing to a String cannot fail");
    }
    fs::write(&txt_path, txt)?;
    println!("checkpoint={}", out.display());
    Ok(())
}

pub fn cmd_register(a: &RegisterArgs) -> Result<()> {
    let bundle = Checkpoint::load(&a.ckpt)?.to_bundle()?;
    let fixed = read_volume(&a.fixed)?;
    let moving = read_volume(&a.moving)?;
    let t0 = Instant::now();
    let out = bundle.forward(&fixed, &moving)?;
    let secs = t0.elapsed().as_secs_f64();
    write_field(&out.field, &a.out_field, fixed.spacing(), fixed.origin())?;
    let warped = out.warped_moving.with_geometry(fixed.spacing(), fixed.origin())?;
    write_volume(&warped, &a.out_warped)?;
    println!("registration_time_s={secs:.6}");
    Ok(())
}

fn field_for(a: &EvaluateArgs, rec: &CaseRecord, pair: &PairCase, bundle: Option<&ModelBundle>) -> Result<DisplacementField> {
    if let Some(b) = bundle {
        return Ok(b.forward(&pair.fixed, &pair.moving)?.field);
    }
    if let Some(dir) = &a.field_dir {
        let gz = dir.join(format!("{}_field.nii.gz", rec.case_id));
        let plain = dir.join(format!("{}_field.nii", rec.case_id));
        return read_field(if gz.is_file() { &gz } else { &plain });
    }
    if a.truth {
        let p = rec
            .truth_field_path
            .as_ref()
            .ok_or_else(|| Error::Manifest(format!("case {}: no truth_field_path", rec.case_id)))?;
        return read_field(p);
    }
    DisplacementField::zeros(pair.fixed.shape())
}

fn evaluate_record(a: &EvaluateArgs, rec: &CaseRecord, bundle: Option<&ModelBundle>) -> Result<CaseResult> {
    let pair = load_pair(rec)?;
    let field = field_for(a, rec, &pair, bundle)?;
    evaluate_case(&rec.case_id, &pair.fixed, &pair.moving, &pair.fixed_landmarks, &pair.moving_landmarks, &field)
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let records = load_manifest(&a.manifest)?;
    let bundle = match &a.ckpt {
        Some(p) => Some(Checkpoint::load(p)?.to_bundle()?),
        None => None,
    };
    let results = par::map(records.len(), |i| evaluate_record(a, &records[i], bundle.as_ref()));
    let mut first_err = None;
    let outcomes: Vec<CaseOutcome> = records
        .iter()
        .zip(results)
        .map(|(rec, r)| match r {
            Ok(c) => CaseOutcome::Ok(c),
            Err(e) => {
                log::warn!("case {}: {e}", rec.case_id);
                let msg = e.to_string();
                first_err.get_or_insert(e);
                CaseOutcome::Failed { case_id: rec.case_id.clone(), error: msg }
            }
        })
        .collect();
    let report = EvaluationReport::from_outcomes(outcomes)?;
    fs::write(&a.out, report.to_json())?;
    println!("{}", report.table());
    match (report.aggregate, first_err) {
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::Manifest(format!("{}: manifest lists no cases", a.manifest.display()))),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::InvalidInput("x".into())), 2);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 3);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 4);
    }

    #[test]
    fn log_paths_append_suffixes() {
        let (j, t) = log_paths(Path::new("/tmp/a.ckpt"));
        assert_eq!(j, PathBuf::from("/tmp/a.ckpt.log.json"));
        assert_eq!(t, PathBuf::from("/tmp/a.ckpt.log.txt"));
    }
}
