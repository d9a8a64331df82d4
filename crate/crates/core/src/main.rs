use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dima::config::RunConfig;
use dima::eval::{evaluate, summary_table, EvalProtocol, MetricsReport, ProtocolKind, METRICS_HEADER};
use dima::model::{dual_inference, Model};
use dima::planner::Trajectory;
use dima::surrogate::{apply_edit, edit_qa, propose_edit};
use dima::training::{train_stage, Checkpoint, Stage, TrainingData};
use dima::world::{kind_counts, load_dataset, save_dataset, GeneratorConfig, KindMix, ScenarioKind, Scene, Split};
use dima::{report, Error};

const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "dima", version, about = "Train and evaluate a vision planner distilled from a language branch")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene dataset (JSON lines).
    Datagen {
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Generation seed.
        #[arg(long, env = "DIMA_SEED", default_value_t = 0)]
        seed: u64,
        /// Scenario weights as kind=weight,... (unlisted kinds get 0).
        #[arg(long, default_value = "straight=1,turn-left=1,turn-right=1,three-point-turn=1,resume-from-stop=1,overtake=1")]
        mix: String,
        /// Scenario kind to leave out; repeatable.
        #[arg(long = "exclude-kind", value_name = "KIND")]
        exclude_kind: Vec<String>,
    },
    /// Train stage 1, stage 2 or both, writing checkpoints and loss logs to out_dir.
    Train {
        /// Run config (key = value lines).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        /// Continue from the stage's checkpoint in out_dir if one exists.
        #[arg(long, default_value_t = false)]
        resume: bool,
        /// Overrides the config seed.
        #[arg(long, env = "DIMA_SEED")]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        /// Checkpoint to evaluate (vision branch).
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// full, targeted, or longtail:<kind>.
        #[arg(long, default_value = "full")]
        split: String,
        #[arg(long, default_value = "standardized")]
        protocol: ProtocolKind,
        /// Fuse with the language branch of --mllm-checkpoint.
        #[arg(long, default_value_t = false)]
        dual: bool,
        #[arg(long)]
        mllm_checkpoint: Option<PathBuf>,
        /// Echo the ground truth instead of planning; checks the harness.
        #[arg(long, default_value_t = false)]
        oracle: bool,
        /// Append the report row to this CSV (header written when new).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-sample errors and collision flags.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Answer a question about one scene with the language branch.
    Ask {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scene_id: u64,
        #[arg(long)]
        question: String,
        /// Longest answer in tokens.
        #[arg(long, default_value_t = 16)]
        max_len: usize,
    },
    /// Render a loss log or a metrics table as SVG.
    Report {
        #[arg(long, conflicts_with = "metrics_csv", required_unless_present = "metrics_csv")]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        metrics_csv: Option<PathBuf>,
        #[arg(long)]
        out_svg: PathBuf,
    },
    /// Propose a scene edit and show the resulting question and answer.
    Edit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scene_id: u64,
        /// Edit proposal seed.
        #[arg(long, env = "DIMA_SEED", default_value_t = 0)]
        seed: u64,
        /// Map half-width used for placement.
        #[arg(long, default_value_t = 16.0)]
        extent: f64,
        /// Write a top-down SVG of the edit.
        #[arg(long)]
        out_svg: Option<PathBuf>,
    },
}

/// Failure with its exit code.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Divergence { .. }) { EXIT_DIVERGED } else { EXIT_USAGE };
        Failure(code, e.to_string())
    }
}

impl From<dima::world::WorldError> for Failure {
    fn from(e: dima::world::WorldError) -> Self {
        Failure(EXIT_USAGE, e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure(EXIT_USAGE, msg.into())
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn find_scene(scenes: Vec<Scene>, id: u64) -> Result<Scene, Failure> {
    scenes
        .into_iter()
        .find(|s| s.id == id)
        .ok_or_else(|| usage(format!("no scene with id {id} in the dataset")))
}

fn model_from(path: &Path) -> Result<Model, Failure> {
    Ok(Checkpoint::load(path)?.model()?)
}

fn datagen(out: &Path, count: usize, seed: u64, mix: &str, exclude: &[String]) -> Result<(), Failure> {
    let mut m = KindMix::parse(mix)?;
    for k in exclude {
        let kind = ScenarioKind::parse(k).ok_or_else(|| usage(format!("unknown scenario kind `{k}`")))?;
        m = m.exclude(kind)?;
    }
    let scenes = m.generate(count, seed, &GeneratorConfig::default())?;
    save_dataset(&scenes, out)?;
    for (kind, n) in kind_counts(&scenes) {
        println!("{kind:<18} {n}");
    }
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn train(config: &Path, stage: StageArg, resume: bool, seed: Option<u64>) -> Result<(), Failure> {
    let mut run = RunConfig::load(config)?;
    if let Some(s) = seed {
        run.seed = s;
    }
    let scenes = load_dataset(Path::new(&run.train_data))?;
    let data = TrainingData::new(scenes, &run.model_config().grid)?;
    let stages: &[Stage] = match stage {
        StageArg::One => &[Stage::One],
        StageArg::Two => &[Stage::Two],
        StageArg::All => &[Stage::One, Stage::Two],
    };
    for &s in stages {
        let t0 = std::time::Instant::now();
        let session = train_stage(&run, s, resume, &data)?;
        println!(
            "stage {s}: {} steps in {:.1} s -> {}",
            session.step,
            t0.elapsed().as_secs_f64(),
            dima::training::checkpoint_path(&run, s).display()
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint: Option<&Path>,
    dataset: &Path,
    split: &str,
    protocol: ProtocolKind,
    dual: bool,
    mllm_checkpoint: Option<&Path>,
    oracle: bool,
    out: Option<&Path>,
    samples: Option<&Path>,
) -> Result<(), Failure> {
    if dual && mllm_checkpoint.is_none() {
        return Err(usage("--dual needs --mllm-checkpoint"));
    }
    let split: Split = split.parse()?;
    let scenes = load_dataset(dataset)?;
    let chosen: Vec<&Scene> = scenes.iter().filter(|s| split.contains(s)).collect();
    if chosen.is_empty() {
        eprintln!("warning: split {split} of {} is empty", dataset.display());
    }
    let proto = EvalProtocol::preset(protocol);
    let report = if oracle {
        evaluate(&chosen, &split.to_string(), protocol, proto, |s| Trajectory::new(s.ego.gt_traj.clone()))?
    } else {
        let vision = model_from(checkpoint.expect("clap requires a checkpoint without --oracle"))?;
        match mllm_checkpoint.filter(|_| dual) {
            Some(p) => {
                let mllm = model_from(p)?;
                evaluate(&chosen, &split.to_string(), protocol, proto, |s| dual_inference(&vision, &mllm, s))?
            }
            None => evaluate(&chosen, &split.to_string(), protocol, proto, |s| Ok(vision.plan(s)?.0))?,
        }
    };
    print!("{}", summary_table(std::slice::from_ref(&report)));
    if let Some(path) = out {
        append_row(path, &report)?;
    }
    if let Some(path) = samples {
        write_file(path, &report.samples_csv())?;
    }
    Ok(())
}

fn append_row(path: &Path, report: &MetricsReport) -> Result<(), Failure> {
    let mut text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => format!("{METRICS_HEADER}\n"),
        Err(e) => return Err(usage(format!("cannot read {}: {e}", path.display()))),
    };
    text.push_str(&report.csv_row());
    text.push('\n');
    write_file(path, &text)
}

fn ask(checkpoint: &Path, dataset: &Path, scene_id: u64, question: &str, max_len: usize) -> Result<(), Failure> {
    let model = model_from(checkpoint)?;
    model.vocab.encode(question)?;
    let scene = find_scene(load_dataset(dataset)?, scene_id)?;
    println!("{}", model.ask(&scene, question, max_len)?);
    Ok(())
}

fn render(loss_csv: Option<&Path>, metrics_csv: Option<&Path>, out_svg: &Path) -> Result<(), Failure> {
    let (path, chart): (&Path, fn(&str) -> dima::Result<String>) = match (loss_csv, metrics_csv) {
        (Some(p), _) => (p, report::loss_chart),
        (None, Some(p)) => (p, report::metrics_chart),
        (None, None) => return Err(usage("give --loss-csv or --metrics-csv")),
    };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let svg = chart(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    write_file(out_svg, &svg)
}

fn edit(dataset: &Path, scene_id: u64, seed: u64, extent: f64, out_svg: Option<&Path>) -> Result<(), Failure> {
    let scene = find_scene(load_dataset(dataset)?, scene_id)?;
    let op = propose_edit(&scene, extent, seed)?;
    let edited = apply_edit(&scene, &op)?;
    let qa = edit_qa(&op, &edited)?;
    let a = op.agent();
    let p = a.position_at(0);
    println!(
        "{:?} {} (id {}) at ({:.1}, {:.1}), {:.1} x {:.1} m",
        op.kind(),
        a.category.name(),
        a.id,
        p[0],
        p[1],
        a.size[0],
        a.size[1]
    );
    println!("Q: {}", qa.question_text());
    println!("A: {}", qa.answer_text());
    if let Some(path) = out_svg {
        write_file(path, &report::edit_preview(&scene, &op, extent))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Datagen {
            out,
            count,
            seed,
            mix,
            exclude_kind,
        } => datagen(&out, count, seed, &mix, &exclude_kind),
        Command::Train {
            config,
            stage,
            resume,
            seed,
        } => train(&config, stage, resume, seed),
        Command::Eval {
            checkpoint,
            dataset,
            split,
            protocol,
            dual,
            mllm_checkpoint,
            oracle,
            out,
            samples,
        } => eval(
            checkpoint.as_deref(),
            &dataset,
            &split,
            protocol,
            dual,
            mllm_checkpoint.as_deref(),
            oracle,
            out.as_deref(),
            samples.as_deref(),
        ),
        Command::Ask {
            checkpoint,
            dataset,
            scene_id,
            question,
            max_len,
        } => ask(&checkpoint, &dataset, scene_id, &question, max_len),
        Command::Report {
            loss_csv,
            metrics_csv,
            out_svg,
        } => render(loss_csv.as_deref(), metrics_csv.as_deref(), &out_svg),
        Command::Edit {
            dataset,
            scene_id,
            seed,
            extent,
            out_svg,
        } => edit(&dataset, scene_id, seed, extent, out_svg.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
