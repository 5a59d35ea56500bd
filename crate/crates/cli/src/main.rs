//! `trajpred`: data generation, two-stage training, evaluation, heatmaps
//! and self-checks.
//!
//! Exit codes: 0 success, 1 user error, 2 internal invariant violation.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trajpred::checkpoint::Checkpoint;
use trajpred::config::RunConfig;
use trajpred::dataset::{build_dataset, DatasetSizes, Split};
use trajpred::heatmap::{heatmap, write_heatmaps, HeatmapOptions};
use trajpred::metrics::{evaluate, load_matrix};
use trajpred::model::Model;
use trajpred::pipeline::{check_stage_order, evaluate_with, load_dataset, run_stage, train_set};
use trajpred::selfcheck::{run_all, SelfCheckConfig};
use trajpred::synth::default_vocabulary;
use trajpred::text::{PromptMode, TripletVocabulary};
use trajpred::train::Stage;
use trajpred::Error;

#[derive(Parser)]
#[command(name = "trajpred", version, about = "Trajectory-conditioned triplet recognition on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into a directory.
    GenData(GenDataArgs),
    /// Train stage 1, stage 2, or both in order.
    Train(TrainArgs),
    /// Score a split (or external score/label matrices) and write a report.
    Eval(EvalArgs),
    /// Token similarity heatmaps for one clip and triplet.
    Heatmap(HeatmapArgs),
    /// Gradient checks, metric oracles and freeze invariants.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Run config whose `data` section supplies the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated verbs; an empty string holds nothing out.
    #[arg(long)]
    held_out_verbs: Option<String>,
    /// Train, test and unseen-test clip counts, e.g. 600,200,100.
    #[arg(long)]
    sizes: Option<DatasetSizes>,
    #[arg(long)]
    sigma_px: Option<f64>,
    #[arg(long)]
    sigma_box: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    stage: StageArg,
    /// Final checkpoint. With `--stage both` the stage-1 checkpoint is
    /// written next to it as `<stem>.stage1.<ext>`.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from (stage 2 normally starts from stage 1).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Allow stage 2 without a stage-1 checkpoint.
    #[arg(long)]
    cold_start: bool,
    /// Dataset directory; overrides the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_trajectory: bool,
    #[arg(long, value_parser = parse_mode)]
    prompt_mode: Option<PromptMode>,
    #[arg(long)]
    stage1_steps: Option<usize>,
    #[arg(long)]
    stage2_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Loss log; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "scores")]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// External `[N, C]` score matrix (f32 with a `.json` shape sidecar).
    #[arg(long, requires = "labels", conflicts_with = "ckpt")]
    scores: Option<PathBuf>,
    #[arg(long, requires = "scores")]
    labels: Option<PathBuf>,
    /// Vocabulary for external matrices; defaults to the synthetic one.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    clip: String,
    /// Triplet as "instrument verb target".
    #[arg(long)]
    triplet: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Ignore the clip's boxes and run on visual tokens only.
    #[arg(long)]
    no_boxes: bool,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Break one backward rule to confirm the checks catch it.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
    #[arg(long, default_value_t = 20)]
    grad_instances: usize,
    #[arg(long, default_value_t = 300)]
    metric_instances: usize,
}

fn parse_mode(s: &str) -> Result<PromptMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum CliError {
    User(String),
    Internal(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Tensor(_) | Error::FrozenViolation(_) | Error::MissingGradient(_) => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::Selfcheck(a) => selfcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::User(_) => 1,
                CliError::Internal(_) => 2,
            })
        }
    }
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let d = &mut cfg.data;
    if let Some(s) = a.seed {
        d.dataset.seed = s;
    }
    if let Some(list) = &a.held_out_verbs {
        d.dataset.held_out_verbs = list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
    }
    if let Some(s) = a.sizes {
        d.dataset.sizes = s;
    }
    if let Some(v) = a.sigma_px {
        d.sigma_px = v;
    }
    if let Some(v) = a.sigma_box {
        d.sigma_box = v;
    }
    cfg.validate()?;
    let ds = build_dataset(&cfg.data.dataset, &cfg.data.scene(), &default_vocabulary())?;
    let manifest = ds.save(&a.out)?;
    let count = |s: Split| manifest.clips.iter().filter(|c| c.split == s).count();
    let summary = serde_json::json!({
        "out": a.out,
        "digest": manifest.digest,
        "scene_digest": manifest.scene_digest,
        "seed": manifest.config.seed,
        "held_out_verbs": manifest.config.held_out_verbs,
        "train": count(Split::Train),
        "test": count(Split::Test),
        "unseen_test": count(Split::UnseenTest),
    });
    println!("{summary}");
    Ok(())
}

/// `<dir>/<stem>.stage<n>.<ext>` next to `out`.
fn stage_path(out: &Path, stage: u32, step: Option<usize>) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    let ext = out.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    let name = match step {
        Some(k) => format!("{stem}.stage{stage}.step{k}{ext}"),
        None => format!("{stem}.stage{stage}{ext}"),
    };
    out.with_file_name(name)
}

fn train(a: TrainArgs) -> CliResult {
    let init = a.init.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg = match (&a.config, &init) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(ck)) => ck.header.config.clone(),
        (None, None) => RunConfig::default(),
    };
    if let Some(d) = &a.data {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if a.no_trajectory {
        cfg.train.use_trajectory = false;
    }
    if let Some(m) = a.prompt_mode {
        cfg.train.prompt_mode = m;
    }
    if let Some(n) = a.stage1_steps {
        cfg.train.stage1_steps = n;
    }
    if let Some(n) = a.stage2_steps {
        cfg.train.stage2_steps = n;
    }
    if let Some(n) = a.batch_size {
        cfg.train.batch_size = n;
    }
    if let Some(n) = a.checkpoint_every {
        cfg.checkpoint_every = n;
    }
    cfg.validate()?;

    let stages: Vec<Stage> = match a.stage {
        StageArg::One => vec![Stage::One],
        StageArg::Two => vec![Stage::Two],
        StageArg::Both => vec![Stage::One, Stage::Two],
    };
    let completed = init.as_ref().map_or(0, |ck| ck.header.stage);
    check_stage_order(stages[0], completed, a.cold_start)?;

    let ds = load_dataset(&cfg.data)?;
    let mut model = match &init {
        Some(ck) => {
            if ck.header.config.model != cfg.model {
                return Err(CliError::User("config model section differs from the --init checkpoint".into()));
            }
            ck.restore()?
        }
        None => Model::new(&cfg.model, &ds.vocab, cfg.train.seed)?,
    };
    let set = train_set(&model, &ds)?;

    let csv_path = a.loss_csv.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".loss.csv");
        PathBuf::from(s)
    });
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut csv = String::from("stage,step,loss\n");
    let mut done = completed;
    for (i, &stage) in stages.iter().enumerate() {
        let out = a.out.clone();
        let (log, ck) = run_stage(&mut model, &set, stage, &cfg, done, a.cold_start, &mut |ck| {
            ck.save(&stage_path(&out, ck.header.stage, Some(ck.header.step)))
        })?;
        let path = if i + 1 == stages.len() { a.out.clone() } else { stage_path(&a.out, stage.number(), None) };
        ck.save(&path)?;
        for (k, l) in log.losses.iter().enumerate() {
            csv.push_str(&format!("{},{},{l:.17e}\n", stage.number(), k + 1));
        }
        let last = log.losses.last().copied().unwrap_or(f64::NAN);
        eprintln!("stage {}: {} steps, final loss {last:.6}, checkpoint {}", stage.number(), log.losses.len(), path.display());
        done = stage.number();
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let report = match (&a.scores, &a.labels, &a.ckpt) {
        (Some(s), Some(y), _) => {
            let vocab = match &a.vocab {
                Some(p) => TripletVocabulary::load(p)?,
                None => default_vocabulary(),
            };
            let (s, y) = (load_matrix(s)?, load_matrix(y)?);
            if s.dims2().map_err(Error::from)?.1 != vocab.n_classes() {
                return Err(Error::VocabularyMismatch(format!(
                    "score matrix has {} columns, vocabulary has {} classes",
                    s.dims2().map_err(Error::from)?.1,
                    vocab.n_classes()
                ))
                .into());
            }
            evaluate(&s, &y, &vocab)?
        }
        (_, _, Some(ck)) => {
            let ck = Checkpoint::load(ck)?;
            let mut cfg = ck.header.config.clone();
            if let Some(d) = &a.data {
                cfg.data.dir = Some(d.clone());
            }
            let model = ck.restore()?;
            let ds = load_dataset(&cfg.data)?;
            let mut r = evaluate_with(&model, &ds, a.split, &cfg)?;
            r.config_digest = Some(ck.header.config_digest.clone());
            r
        }
        _ => return Err(CliError::User("pass --ckpt or --scores with --labels".into())),
    };
    trajpred::dataset::write_json(&a.report, &report)?;
    println!("{}", report.table());
    Ok(())
}

fn cmd_heatmap(a: HeatmapArgs) -> CliResult {
    let ck = Checkpoint::load(&a.ckpt)?;
    let mut cfg = ck.header.config.clone();
    if let Some(d) = &a.data {
        cfg.data.dir = Some(d.clone());
    }
    let model = ck.restore()?;
    let class = model.vocab.parse_triplet(&a.triplet)?;
    let ds = load_dataset(&cfg.data)?;
    let sample = ds
        .samples
        .iter()
        .find(|s| s.clip.clip_id == a.clip)
        .ok_or_else(|| CliError::User(format!("clip `{}` is not in the dataset", a.clip)))?;
    let tracks = if a.no_boxes { &[][..] } else { &sample.tracks[..] };
    let opts = HeatmapOptions {
        mode: cfg.train.prompt_mode,
        scale: cfg.train.scale,
        use_trajectory: cfg.train.use_trajectory,
        config_digest: ck.header.config_digest.clone(),
    };
    let mut maps = heatmap(&model, &sample.clip, tracks, class, &opts)?;
    let files = write_heatmaps(&a.out, &sample.clip, &mut maps)?;
    if maps.sidecar.missing_boxes {
        eprintln!("warning: clip `{}` has no boxes; ran without trajectory tokens", a.clip);
    }
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn selfcheck(a: SelfcheckArgs) -> CliResult {
    if let Some(name) = &a.inject_fault {
        let kind = ndcore::OpKind::from_name(name).ok_or_else(|| CliError::User(format!("unknown op `{name}`")))?;
        ndcore::fault::inject(kind);
    }
    let cfg = SelfCheckConfig { grad_instances: a.grad_instances, metric_instances: a.metric_instances, ..Default::default() };
    let lines = run_all(&cfg);
    let mut stdout = std::io::stdout().lock();
    for l in &lines {
        writeln!(stdout, "{}", l.json()).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.check.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Internal(format!("{} check(s) failed: {}", failed.len(), failed.join(", "))))
    }
}
