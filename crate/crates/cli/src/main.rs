//! `gsedit`: localized text-driven editing of Gaussian splatting scenes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use gsedit_core::image::{write_pfm_rgb, write_pfm_scalar, write_png_rgb};
use gsedit_core::localize::load_mask_2d;
use gsedit_core::localize::select_frontal;
use gsedit_core::oracle::mock::{MockScenario, MockSpec};
use gsedit_core::oracle::remote::{BridgeClient, DEFAULT_TIMEOUT};
use gsedit_core::oracle::Oracles;
use gsedit_core::refine::{
    init_stage, locate_stage, run_pipeline, CycleConfig, PipelineConfig, PipelineOptions, PipelineState, StageTimings,
};
use gsedit_core::render::{render_with, RenderOutput};
use gsedit_core::scene::manifest::load_cameras;
use gsedit_core::scene::ply::{load_ply, save_ply};
use gsedit_core::scene::{Camera, GaussianCloud};
use gsedit_core::{Error, Exec};

#[derive(Parser)]
#[command(name = "gsedit", version, about = "Localized text-driven editing of Gaussian splatting scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Locate the edit region: per-view 2D masks and the per-Gaussian 3D mask.
    Locate(Common),
    /// Edit the frontal view and seed new Gaussians from calibrated depth.
    Init(InitArgs),
    /// Run refinement cycles from a checkpoint written by `init` or a previous run.
    Refine(RefineArgs),
    /// Run every stage end to end.
    Pipeline(PipelineArgs),
    /// Render color, depth and alpha for every camera.
    Render(RenderArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    /// Run configuration JSON. Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<u32>,
    /// Adjacent views per cycle.
    #[arg(long)]
    m: Option<usize>,
    /// Start timesteps, one per cycle, e.g. "750,500,250".
    #[arg(long)]
    cycles: Option<String>,
    /// Fine-tuning iterations per cycle.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the built-in mock oracles described by the config's `mock` section.
    #[arg(long, conflicts_with = "bridge_cmd")]
    mock_oracles: bool,
    /// Shell command starting an oracle bridge on stdio.
    #[arg(long)]
    bridge_cmd: Option<String>,
    /// Seconds to wait for each bridge response.
    #[arg(long)]
    bridge_timeout: Option<u64>,
    /// Disable data-parallel execution.
    #[arg(long)]
    serial: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding the `locate` masks. Defaults to `<out>/masks`.
    #[arg(long)]
    masks: Option<PathBuf>,
}

#[derive(Args)]
struct RefineArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Background color as "r,g,b".
    #[arg(long, default_value = "0,0,0")]
    background: String,
    #[arg(long)]
    serial: bool,
}

/// Pipeline settings plus the mock scenario used with `--mock-oracles`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RunConfig {
    #[serde(flatten)]
    pipeline: PipelineConfig,
    #[serde(default)]
    mock: MockSpec,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: &'a RunConfig,
    seed: u64,
    timings: StageTimings,
    artifacts: BTreeMap<&'static str, PathBuf>,
    oracles: &'static str,
    handshake: Option<Value>,
    summary: Value,
}

/// An error that maps to a fixed exit code.
#[derive(Debug)]
struct Coded(u8, String);

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Coded {}

const EXIT_INPUT: u8 = 2;
const EXIT_LOCALIZATION: u8 = 3;
const EXIT_INIT: u8 = 4;
const EXIT_ORACLE: u8 = 5;
const EXIT_NUMERIC: u8 = 6;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(Coded(code, _)) = cause.downcast_ref::<Coded>() {
            return *code;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.root() {
                Error::LocalizationFailed => EXIT_LOCALIZATION,
                Error::InitializationFailed { .. }
                | Error::DegenerateScale
                | Error::DegenerateTarget
                | Error::TooFewPixels(_) => EXIT_INIT,
                Error::Oracle { .. } => EXIT_ORACLE,
                Error::NonFiniteLoss { .. } | Error::NonFiniteParameters { .. } => EXIT_NUMERIC,
                _ => EXIT_INPUT,
            };
        }
    }
    EXIT_INPUT
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Locate(c) => cmd_locate(&c),
        Command::Init(a) => cmd_init(&a),
        Command::Refine(a) => cmd_cycles("refine", &a.common, Some(&a.resume)),
        Command::Pipeline(a) => cmd_cycles("pipeline", &a.common, a.resume.as_deref()),
        Command::Render(a) => cmd_render(&a),
    }
}

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    Coded(EXIT_INPUT, msg.into()).into()
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| input_error(format!("bad {what} entry {s:?} in {text:?}"))))
        .collect()
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| input_error(format!("reading config {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| input_error(format!("config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let p = &mut cfg.pipeline;
    if let Some(v) = &c.prompt {
        p.prompt.clone_from(v);
    }
    if let Some(v) = c.gamma {
        p.gamma = v;
    }
    if let Some(v) = c.tau {
        p.tau = v;
    }
    if let Some(v) = c.guidance {
        p.guidance_w = v;
    }
    if let Some(v) = c.seed {
        p.seed = v;
    }
    if let Some(text) = &c.cycles {
        let ts: Vec<u32> = parse_list(text, "cycle")?;
        let base = CycleConfig {
            m: 20,
            start_t: 0,
            iters: 500,
        };
        p.cycles = ts
            .iter()
            .enumerate()
            .map(|(k, &start_t)| CycleConfig {
                start_t,
                ..p.cycles.get(k).copied().unwrap_or(base)
            })
            .collect();
    }
    for cycle in &mut p.cycles {
        if let Some(m) = c.m {
            cycle.m = m;
        }
        if let Some(n) = c.iters {
            cycle.iters = n;
        }
    }
    p.validate().map_err(|e| input_error(e.to_string()))?;
    if p.prompt.is_empty() {
        return Err(input_error("a prompt is required (--prompt or config)"));
    }
    Ok(cfg)
}

struct Inputs {
    scene: GaussianCloud,
    cameras: Vec<Camera>,
    exec: Exec,
}

fn load_inputs(scene: &Path, cameras: &Path, serial: bool) -> Result<Inputs> {
    let scene = load_ply(scene).with_context(|| format!("loading scene {}", scene.display()))?;
    scene.validate()?;
    let cameras = load_cameras(cameras).with_context(|| format!("loading cameras {}", cameras.display()))?;
    if cameras.is_empty() {
        return Err(input_error("camera manifest has no views"));
    }
    Ok(Inputs {
        scene,
        cameras,
        exec: if serial { Exec::Serial } else { Exec::Parallel },
    })
}

enum OracleSet {
    Mock(Box<MockScenario>),
    Bridge(BridgeClient),
}

impl OracleSet {
    fn open(c: &Common, cfg: &RunConfig, inputs: &Inputs) -> Result<Self> {
        if c.mock_oracles {
            let sc = cfg.mock.build(&inputs.scene, &inputs.cameras, cfg.pipeline.background);
            return Ok(OracleSet::Mock(Box::new(sc)));
        }
        let Some(cmd) = &c.bridge_cmd else {
            return Err(input_error("choose --mock-oracles or --bridge-cmd"));
        };
        let timeout = c.bridge_timeout.map_or(DEFAULT_TIMEOUT, Duration::from_secs);
        let workspace = c.out.join("bridge");
        std::fs::create_dir_all(&workspace).with_context(|| format!("creating {}", workspace.display()))?;
        let client = BridgeClient::spawn(cmd, workspace, timeout)
            .map_err(|e| Coded(EXIT_ORACLE, format!("starting bridge: {e}")))?;
        Ok(OracleSet::Bridge(client))
    }

    fn oracles(&self) -> Oracles<'_> {
        match self {
            OracleSet::Mock(sc) => sc.oracles(),
            OracleSet::Bridge(b) => Oracles {
                editor: b,
                noise: b,
                depth: b,
                perceptual: Some(b),
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            OracleSet::Mock(_) => "mock",
            OracleSet::Bridge(_) => "bridge",
        }
    }

    fn handshake(&self) -> Option<Value> {
        match self {
            OracleSet::Mock(_) => None,
            OracleSet::Bridge(b) => b.handshake(),
        }
    }
}

fn render_all(inputs: &Inputs, cloud: &GaussianCloud, background: [f64; 3]) -> Vec<RenderOutput> {
    inputs
        .cameras
        .iter()
        .map(|c| render_with(cloud, c, background, inputs.exec))
        .collect()
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes `manifest.json` through a temporary file and a rename.
fn write_manifest(dir: &Path, manifest: &RunManifest<'_>) -> Result<()> {
    let tmp = dir.join(".manifest.json.tmp");
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, dir.join("manifest.json")).context("publishing manifest")?;
    Ok(())
}

fn cmd_locate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let inputs = load_inputs(&c.scene, &c.cameras, c.serial)?;
    create_out(&c.out)?;
    let oracles = OracleSet::open(c, &cfg, &inputs)?;
    let t0 = Instant::now();
    let images: Vec<_> = render_all(&inputs, &inputs.scene, cfg.pipeline.background)
        .into_iter()
        .map(|r| r.color)
        .collect();
    let loc = locate_stage(
        &inputs.scene,
        &inputs.cameras,
        &images,
        &cfg.pipeline,
        oracles.oracles(),
        inputs.exec,
        Some(&c.out),
    )?;
    let timings = StageTimings {
        locate: t0.elapsed().as_secs_f64(),
        ..Default::default()
    };
    let mask_sums: Vec<usize> = loc.masks.iter().map(|m| m.sum()).collect();
    println!(
        "frontal view {} ({} of {} Gaussians selected)",
        loc.frontal,
        loc.mask3d.count(),
        inputs.scene.len()
    );
    write_manifest(
        &c.out,
        &RunManifest {
            command: "locate",
            config: &cfg,
            seed: cfg.pipeline.seed,
            timings,
            artifacts: BTreeMap::from([
                ("masks", c.out.join("masks")),
                ("mask3d", c.out.join("masks/mask3d.bin")),
            ]),
            oracles: oracles.kind(),
            handshake: oracles.handshake(),
            summary: serde_json::json!({
                "frontal_view": loc.frontal,
                "mask_sums": mask_sums,
                "selected_gaussians": loc.mask3d.count(),
            }),
        },
    )
}

fn cmd_init(a: &InitArgs) -> Result<()> {
    let c = &a.common;
    let cfg = load_config(c)?;
    let inputs = load_inputs(&c.scene, &c.cameras, c.serial)?;
    let mask_dir = a.masks.clone().unwrap_or_else(|| c.out.join("masks"));
    let masks = (0..inputs.cameras.len())
        .map(|v| {
            let stem = mask_dir.join(format!("view_{v:04}"));
            let (mask, _, _) = load_mask_2d(&stem).map_err(|e| input_error(format!("mask for view {v}: {e}")))?;
            if mask.values.width != inputs.cameras[v].width || mask.values.height != inputs.cameras[v].height {
                return Err(input_error(format!("mask for view {v} does not match the camera size")));
            }
            Ok(mask)
        })
        .collect::<Result<Vec<_>>>()?;
    let frontal = select_frontal(&masks)?;
    create_out(&c.out)?;
    let oracles = OracleSet::open(c, &cfg, &inputs)?;
    let t0 = Instant::now();
    let originals = render_all(&inputs, &inputs.scene, cfg.pipeline.background);
    let init = init_stage(
        &inputs.scene,
        &inputs.cameras,
        &originals,
        &masks,
        frontal,
        &cfg.pipeline,
        oracles.oracles(),
    )?;
    let timings = StageTimings {
        init: t0.elapsed().as_secs_f64(),
        ..Default::default()
    };
    let scene_path = c.out.join("scene.ply");
    let checkpoint = c.out.join("checkpoints/init");
    let edit_path = c.out.join("frontal_edit.png");
    save_ply(&init.state.cloud, &scene_path)?;
    init.state.save(&checkpoint)?;
    write_png_rgb(&init.state.views[&frontal].1, &edit_path)?;
    println!(
        "frontal view {frontal}: {} Gaussians added, {} pixels skipped",
        init.added, init.skipped
    );
    write_manifest(
        &c.out,
        &RunManifest {
            command: "init",
            config: &cfg,
            seed: cfg.pipeline.seed,
            timings,
            artifacts: BTreeMap::from([
                ("scene", scene_path),
                ("checkpoint", checkpoint),
                ("frontal_edit", edit_path),
            ]),
            oracles: oracles.kind(),
            handshake: oracles.handshake(),
            summary: serde_json::json!({
                "frontal_view": frontal,
                "added": init.added,
                "skipped": init.skipped,
                "calibration": init.calibration.map(|k| [k.a, k.b]),
            }),
        },
    )
}

fn cmd_cycles(command: &str, c: &Common, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(c)?;
    let inputs = load_inputs(&c.scene, &c.cameras, c.serial)?;
    let resume = resume
        .map(|dir| PipelineState::load(dir).map_err(|e| input_error(format!("checkpoint {}: {e}", dir.display()))))
        .transpose()?;
    create_out(&c.out)?;
    let oracles = OracleSet::open(c, &cfg, &inputs)?;
    let out = run_pipeline(
        &inputs.scene,
        &inputs.cameras,
        &cfg.pipeline,
        oracles.oracles(),
        PipelineOptions {
            exec: inputs.exec,
            artifacts: Some(c.out.clone()),
            resume,
            observer: None,
        },
    )?;
    let scene_path = c.out.join("scene.ply");
    save_ply(&out.cloud, &scene_path)?;
    println!(
        "{} cycles, {} iterations, {} Gaussians ({} added)",
        out.state.cycles_completed,
        out.state.iterations_done,
        out.cloud.len(),
        out.cloud.added().iter().filter(|&&a| a).count()
    );
    let mut artifacts = BTreeMap::from([
        ("scene", scene_path),
        ("checkpoints", c.out.join("checkpoints")),
        ("coarse", c.out.join("coarse")),
        ("refined", c.out.join("refined")),
    ]);
    if out.masks.is_some() {
        artifacts.insert("masks", c.out.join("masks"));
    }
    write_manifest(
        &c.out,
        &RunManifest {
            command,
            config: &cfg,
            seed: cfg.pipeline.seed,
            timings: out.timings,
            artifacts,
            oracles: oracles.kind(),
            handshake: oracles.handshake(),
            summary: serde_json::json!({
                "frontal_history": out.state.frontal_history,
                "iterations": out.state.iterations_done,
                "added": out.added,
                "skipped": out.skipped,
                "calibration": out.calibration.map(|k| [k.a, k.b]),
                "final_loss": out.losses.last(),
            }),
        },
    )
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let bg: Vec<f64> = parse_list(&a.background, "background")?;
    let background: [f64; 3] = bg
        .try_into()
        .map_err(|_| input_error("background needs three components"))?;
    let inputs = load_inputs(&a.scene, &a.cameras, a.serial)?;
    create_out(&a.out)?;
    for (v, r) in render_all(&inputs, &inputs.scene, background).iter().enumerate() {
        let stem = a.out.join(format!("view_{v:04}"));
        write_png_rgb(&r.color, stem.with_extension("png"))?;
        write_pfm_rgb(&r.color, stem.with_extension("pfm"))?;
        write_pfm_scalar(&r.depth, a.out.join(format!("view_{v:04}_depth.pfm")))?;
        write_pfm_scalar(&r.alpha, a.out.join(format!("view_{v:04}_alpha.pfm")))?;
    }
    println!("rendered {} views", inputs.cameras.len());
    Ok(())
}
