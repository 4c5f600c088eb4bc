use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use avit_core::face_model::{export_obj, flame_forward, template_from_checkpoint, ExpressionParams, PoseParams, ShapeParams, TEMPLATE_TAG};
use avit_core::pipeline::{self, AnimationFile, Models, RunConfig};
use avit_core::{checkpoint::Checkpoint, Error};
use clap::{Parser, Subcommand};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "avit", version, about = "Instruction-driven 3D talking-face synthesis at desk scale")]
struct Cli {
    /// Run directory holding the corpus, checkpoints and reports.
    #[arg(long, env = "AVIT_OUT", default_value = "avit_run", global = true)]
    out: PathBuf,
    /// Run configuration file. Defaults to the run directory's saved config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    master_seed: Option<u64>,
    /// Start from the few-second miniature configuration instead of the desk-scale one.
    #[arg(long, global = true)]
    miniature: bool,
    /// Override one config value, e.g. `--set bridge.steps=200` (value parsed as JSON).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the head template and the synthetic corpus.
    GenData,
    TrainPrior,
    TrainAlign,
    TrainLm,
    TrainBridge,
    /// Animate one clip: generated instruction (or --instruction) to style samples to coefficients.
    Synth {
        #[arg(long)]
        clip: String,
        /// Sampling seed for the style prior.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        instruction: Option<String>,
        #[arg(long, default_value_t = 1)]
        n: usize,
    },
    /// Score the trained run on the test split.
    Eval,
    /// Train and score the four bridge variants.
    Ablate,
    /// Serve the HTTP API over the run directory.
    Serve {
        #[arg(long, default_value_t = avit_service::DEFAULT_PORT)]
        port: u16,
    },
    /// Write an OBJ of the template, or of one frame of an animation file.
    ExportObj {
        #[arg(long)]
        animation: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().with_context(|| format!("`{key}` does not name a config field"))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let saved = cli.out.join(pipeline::CONFIG_FILE);
    let base = match (&cli.config, cli.miniature) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, true) => RunConfig::miniature(),
        (None, false) if saved.exists() => RunConfig::load(&saved)?,
        (None, false) => RunConfig::default(),
    };
    let mut v = serde_json::to_value(&base)?;
    if let Some(s) = cli.master_seed {
        v["seed"] = s.into();
    }
    for o in &cli.overrides {
        let (k, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut v, k, val).map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(RunConfig::from_json(&v.to_string())?)
}

fn print_json<S: serde::Serialize>(v: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn export(dir: &Path, animation: Option<&Path>, frame: usize, output: Option<PathBuf>) -> Result<PathBuf> {
    let template = template_from_checkpoint(&Checkpoint::load(&dir.join(pipeline::TEMPLATE_FILE), TEMPLATE_TAG)?)?;
    let (mesh, default_name) = match animation {
        None => {
            let psi = ExpressionParams { psi: vec![0.0; template.dim_psi()] };
            (flame_forward(&template, &ShapeParams::default(), &PoseParams::neutral(), &psi)?, "template.obj".to_string())
        }
        Some(p) => {
            let a = AnimationFile::from_json(&std::fs::read_to_string(p)?, template.dim_psi())?;
            let Some(f) = a.frames.get(frame) else {
                return Err(Error::Param(format!("frame {frame} out of range ({} frames)", a.frames.len())).into());
            };
            (pipeline::frame_mesh(&template, f)?, format!("frame_{frame}.obj"))
        }
    };
    let path = output.unwrap_or_else(|| dir.join("export").join(default_name));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, export_obj(&mesh))?;
    Ok(path)
}

fn run(cli: Cli) -> Result<()> {
    let dir = cli.out.clone();
    let stage_config = |cli: &Cli| -> Result<RunConfig> {
        let cfg = resolve_config(cli)?;
        std::fs::create_dir_all(&dir)?;
        pipeline::save_config(&cfg, &dir)?;
        Ok(cfg)
    };
    match &cli.cmd {
        Cmd::GenData => pipeline::stage_gen_data(&resolve_config(&cli)?, &dir)?,
        Cmd::TrainPrior => print_json(&pipeline::stage_train_prior(&stage_config(&cli)?, &dir)?.final_val_loss)?,
        Cmd::TrainAlign => print_json(&pipeline::stage_train_align(&stage_config(&cli)?, &dir)?.final_loss)?,
        Cmd::TrainLm => print_json(&pipeline::stage_train_lm(&stage_config(&cli)?, &dir)?.losses.last())?,
        Cmd::TrainBridge => print_json(&pipeline::stage_train_bridge(&stage_config(&cli)?, &dir)?.final_val_diff)?,
        Cmd::Synth { clip, seed, instruction, n } => {
            let m = Models::load(&dir)?;
            let out = pipeline::synthesize(&m, clip, instruction.as_deref(), *n, *seed)?;
            if !out.unknown_words.is_empty() {
                eprintln!("warning: words outside the vocabulary: {}", out.unknown_words.join(", "));
            }
            println!("{}", out.instruction);
            for (k, a) in out.animations.iter().enumerate() {
                let rel = format!("synth/{clip}_seed{seed}_{k}.json");
                pipeline::write_artifact(&dir, &rel, a.to_json().as_bytes())?;
                println!("{}", dir.join(rel).display());
            }
        }
        Cmd::Eval => println!("{}", pipeline::stage_eval(&dir)?.to_json()),
        Cmd::Ablate => {
            for r in pipeline::stage_ablate(&dir)? {
                println!("{}", r.to_json());
            }
        }
        Cmd::Serve { port } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(avit_service::serve(dir.clone(), *port))?;
        }
        Cmd::ExportObj { animation, frame, output } => {
            println!("{}", export(&dir, animation.as_deref(), *frame, output.clone())?.display());
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Param(_)) => 2,
        Some(Error::Numeric(_)) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
