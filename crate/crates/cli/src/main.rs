use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lidar_pose::checkpoint::load_checkpoint;
use lidar_pose::gradcheck::run_gradcheck;
use lidar_pose::kptr::KptrModel;
use lidar_pose::scene_io::{read_scenes, write_scenes};
use lidar_pose::synth::{generate_scenes, GenConfig, SkeletonTemplate};
use lidar_pose::train::{evaluate, predict_scenes, train, BoxSource, RunArtifacts, TrainConfig};
use lidar_pose::{Error, ModelConfig};

/// Reported size of the full-scale keypoint transformer, in parameters.
const REFERENCE_KPTR_PARAMS: f64 = 9.61e6;

#[derive(Parser)]
#[command(name = "lidar-pose", version, about = "Box-local keypoint transformer for LiDAR human pose")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes as JSON lines.
    GenData(GenDataArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on labeled scenes.
    Eval(EvalArgs),
    /// Write predicted keypoints for every box.
    Predict(PredictArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Print the parameter breakdown of a model.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    count: usize,
    /// Generator settings (JSON); flags override.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_humans: Option<usize>,
    #[arg(long)]
    max_humans: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoxSourceArg {
    Gt,
    Jittered,
    Mixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Desk,
    Tiny,
}

impl Preset {
    fn model(self) -> ModelConfig {
        match self {
            Preset::Full => ModelConfig::full(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training settings (JSON); flags override.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model dimensions preset, applied before the config file.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, value_enum)]
    box_source: Option<BoxSourceArg>,
    #[arg(long)]
    no_seg_aux: bool,
    #[arg(long)]
    no_box_feat: bool,
    #[arg(long)]
    freeze_stage1: bool,
    #[arg(long)]
    include_occluded: bool,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write one SVG wireframe per scene into this directory.
    #[arg(long)]
    figures: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
    Both,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "both")]
    precision: Precision,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// Inspect the model stored in a checkpoint instead.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// A failed command: message and process exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            Error::NonFinite(_) => 4,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let mut cfg: GenConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.min_humans {
        cfg.humans_per_scene.0 = n;
    }
    if let Some(n) = a.max_humans {
        cfg.humans_per_scene.1 = n;
    }
    cfg.validate()?;
    let scenes = generate_scenes(&cfg, &SkeletonTemplate::default(), a.count)?;
    write_scenes(&a.out, &scenes)?;
    let people: usize = scenes.iter().map(|s| s.boxes.len()).sum();
    println!("wrote {} scenes with {people} people to {}", scenes.len(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Error> {
    let mut base = TrainConfig::desk();
    if let Some(p) = a.preset {
        base.model = p.model();
        if matches!(p, Preset::Full) {
            base.batch_size = TrainConfig::full().batch_size;
        }
    }
    let mut cfg = match &a.config {
        Some(p) => {
            // File values sit on top of the preset, flags on top of both.
            let mut merged = serde_json::to_value(&base)?;
            let file: serde_json::Value = read_json(p)?;
            merge(&mut merged, file);
            serde_json::from_value(merged).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => base,
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.max_lr {
        cfg.max_lr = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.weight_decay = v;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if let Some(v) = a.box_source {
        cfg.box_source = match v {
            BoxSourceArg::Gt => BoxSource::Gt,
            BoxSourceArg::Jittered => BoxSource::Jittered,
            BoxSourceArg::Mixed => BoxSource::Mixed,
        };
    }
    if a.no_seg_aux {
        cfg.objective.seg_aux = false;
    }
    if a.no_box_feat {
        cfg.model.box_feat = false;
    }
    if a.freeze_stage1 {
        cfg.freeze_stage1 = true;
    }
    if a.include_occluded {
        cfg.objective.include_occluded = true;
    }
    if a.no_augment {
        cfg.augment = false;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Recursive object merge; `patch` wins.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn run_train(a: TrainArgs) -> CmdResult {
    let cfg = train_config(&a)?;
    let train_scenes = read_scenes(&a.train)?;
    let val_scenes = match &a.val {
        Some(p) => read_scenes(p)?,
        None => Vec::new(),
    };
    let out = train(&cfg, &train_scenes, &val_scenes, Some(&a.out))?;
    let paths = RunArtifacts::new(&a.out);
    if let Some(last) = out.epochs.last() {
        println!("final epoch {}: mean loss {:.5}", last.epoch, last.mean_loss);
        if let Some(v) = &last.val {
            print!("{}", v.table());
        }
    }
    println!("run directory {}", paths.dir.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> CmdResult {
    let (model, _) = load_checkpoint::<f32>(&a.checkpoint)?;
    let scenes = read_scenes(&a.scenes)?;
    let ev = evaluate(&model, &scenes, a.threshold, &Default::default())?;
    print!("{}", ev.report.table());
    if let Some(acc) = ev.visibility_accuracy {
        println!("visibility accuracy {acc:.4}");
    }
    if let Some(p) = &a.report {
        let json = serde_json::to_string_pretty(&ev)?;
        std::fs::write(p, json).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn run_predict(a: PredictArgs) -> CmdResult {
    let (model, _) = load_checkpoint::<f32>(&a.checkpoint)?;
    let scenes = read_scenes(&a.scenes)?;
    let pred = predict_scenes(&model, &scenes, a.threshold)?;
    write_scenes(&a.out, &pred)?;
    if let Some(dir) = &a.figures {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        for s in &pred {
            lidar_pose::plot::write_wireframe(dir.join(format!("{}.svg", s.id)), s)?;
        }
    }
    println!("wrote predictions for {} scenes to {}", pred.len(), a.out.display());
    Ok(())
}

fn run_gradcheck_cmd(a: GradcheckArgs) -> CmdResult {
    let mut ok = true;
    if matches!(a.precision, Precision::F64 | Precision::Both) {
        let r = run_gradcheck::<f64>(a.seed)?;
        print!("{}", r.table());
        ok &= r.passed(1e-5);
    }
    if matches!(a.precision, Precision::F32 | Precision::Both) {
        let r = run_gradcheck::<f32>(a.seed)?;
        print!("{}", r.table());
        ok &= r.passed(1e-3);
    }
    if ok {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure {
            code: 4,
            message: "gradient check tolerance exceeded".into(),
        })
    }
}

fn run_inspect(a: InspectArgs) -> CmdResult {
    let model: KptrModel<f32> = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?.0,
        None => KptrModel::placeholder(a.preset.model())?,
    };
    println!("model config: {}", serde_json::to_string(&model.config)?);
    println!("{:<16}{:>12}", "group", "parameters");
    let mut stage1 = 0;
    for (g, n) in model.store.group_counts() {
        let tag = if g.starts_with("stage1") {
            stage1 += n;
            "  (stage-1 surrogate)"
        } else {
            ""
        };
        println!("{g:<16}{n:>12}{tag}");
    }
    let kptr = model.kptr_param_count();
    println!("{:<16}{:>12}", "kptr total", kptr);
    println!("{:<16}{:>12}", "stage-1 total", stage1);
    println!(
        "kptr vs reference {:.2}M: {:+.1}%",
        REFERENCE_KPTR_PARAMS / 1e6,
        100.0 * (kptr as f64 / REFERENCE_KPTR_PARAMS - 1.0)
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Gradcheck(a) => run_gradcheck_cmd(a),
        Command::Inspect(a) => run_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
