use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;

use volnet::data::{
    extract_voi, generate_phantoms, read_volume, resample_to_cube, write_volume, PhantomSpec, PreprocessConfig, Split,
    MANIFEST_NAME,
};
use volnet::explain::LocalizationConfig;
use volnet::models::{AttentionKind, BackboneKind, ModelSpec};
use volnet::run::{
    ablation_run, ablation_subsets, compare_scores, eval_checkpoint_file, explain_volume, train_run, EvalOptions,
    RunConfig, ABLATION_FILE,
};
use volnet::training::AugmentConfig;
use volnet::{Error, Result};

/// Exit status for configuration and input errors.
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_LEAKAGE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "volnet",
    version,
    about = "Volumetric attention networks on chest CT volumes"
)]
struct Cli {
    /// Log verbosity (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic chest phantoms with a manifest.
    Phantom(PhantomArgs),
    /// Crop a volume to its lung VOI and resample it to a cube.
    Preprocess(PreprocessArgs),
    /// Train a model; writes a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// DeLong paired test between two score files.
    Compare(CompareArgs),
    /// Grad-CAM heatmaps for one volume.
    Explain(ExplainArgs),
    /// Train and evaluate the attention-stacking subsets.
    Ablation(AblationArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total count; a quarter are positive unless --positives/--negatives are given.
    #[arg(long, default_value_t = 400)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long)]
    positives: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 64)]
    edge: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// 64³ input at quarter width.
    Desk,
    /// 128³ input at full width.
    Full,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Run configuration (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Attention architecture: sanet, mlanet or none.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    backbone: Option<String>,
    /// Comma-separated attention positions in 1..=4, or "none".
    #[arg(long)]
    positions: Option<String>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Skip the Grad-CAM localization statistic.
    #[arg(long)]
    no_localization: bool,
}

#[derive(Args)]
struct CompareArgs {
    scores_a: PathBuf,
    scores_b: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// "all" for every stage, or a comma-separated list of tap names.
    #[arg(long, default_value = "all")]
    taps: String,
    /// Also write the multiplicative aggregate of the per-tap maps.
    #[arg(long)]
    aggregate: bool,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Every subset of the four positions instead of the reported five.
    #[arg(long)]
    full_grid: bool,
}

fn parse_positions(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid attention position {p:?}")))
        })
        .collect()
}

fn run_config(a: &ModelArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::new(
            ModelSpec::desk(BackboneKind::DenseNet121, AttentionKind::Sanet, vec![1, 2, 3, 4]),
            PathBuf::new(),
            PathBuf::new(),
        ),
    };
    if let Some(b) = &a.backbone {
        let kind: BackboneKind = b.parse()?;
        if kind != cfg.model.backbone {
            cfg.model.backbone = kind;
            cfg.model.stage_config = kind.default_stages();
        }
    }
    if let Some(arch) = &a.arch {
        cfg.model.attention = arch.parse()?;
        if cfg.model.attention == AttentionKind::None {
            cfg.model.attention_positions.clear();
        } else if cfg.model.attention_positions.is_empty() {
            cfg.model.attention_positions = vec![1, 2, 3, 4];
        }
    }
    if let Some(p) = &a.positions {
        cfg.model.attention_positions = parse_positions(p)?;
    }
    match a.profile {
        Some(Profile::Desk) => {
            cfg.model.input_spatial = [64; 3];
            cfg.model.width_multiplier = 0.25;
        }
        Some(Profile::Full) => {
            cfg.model.input_spatial = [128; 3];
            cfg.model.width_multiplier = 1.0;
        }
        None => {}
    }
    if let Some(d) = a.dim {
        cfg.model.input_spatial = [d; 3];
    }
    if let Some(w) = a.width {
        cfg.model.width_multiplier = w;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(wd) = a.weight_decay {
        cfg.train.weight_decay = wd;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.no_augment {
        cfg.train.augment = AugmentConfig::disabled();
    }
    if let Some(m) = &a.manifest {
        cfg.manifest = m.clone();
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    if cfg.manifest.as_os_str().is_empty() {
        return Err(Error::Config("--manifest is required (or set it in --config)".into()));
    }
    if cfg.output_dir.as_os_str().is_empty() {
        return Err(Error::Config(
            "--out is required (or set output_dir in --config)".into(),
        ));
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    let spec = match (a.positives, a.negatives) {
        (None, None) => PhantomSpec::with_count(a.seed, a.dim, a.count),
        (Some(p), Some(n)) => PhantomSpec::new(a.seed, a.dim, p, n),
        (Some(p), None) => PhantomSpec::new(a.seed, a.dim, p, a.count.saturating_sub(p)),
        (None, Some(n)) => PhantomSpec::new(a.seed, a.dim, a.count.saturating_sub(n), n),
    };
    let rows = generate_phantoms(&spec, &a.out)?;
    println!("manifest: {}", a.out.join(MANIFEST_NAME).display());
    let pos = rows.iter().filter(|r| r.label == 1).count();
    println!("positives: {pos}, negatives: {}", rows.len() - pos);
    for s in Split::ALL {
        let n = rows.iter().filter(|r| r.split == s).count();
        let p = rows.iter().filter(|r| r.split == s && r.label == 1).count();
        println!("{s}: {n} ({p} positive)");
    }
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let v = read_volume(&a.input)?;
    let cfg = PreprocessConfig::new(a.edge);
    let voi = extract_voi(&v, &cfg.voi)?;
    if voi.fallback {
        warn!("lungs not found; keeping the full volume");
    }
    let cube = resample_to_cube(&voi.volume, a.edge)?;
    write_volume(&a.output, &cube)?;
    println!(
        "voi: lo {:?} hi {:?}{}",
        voi.bbox.lo,
        voi.bbox.hi,
        if voi.fallback { " (fallback: full volume)" } else { "" }
    );
    println!("wrote {} ({}³)", a.output.display(), a.edge);
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = run_config(&a.model)?;
    let out = train_run(&cfg)?;
    let last = out.log.epochs.last();
    println!("run directory: {}", out.run_dir.display());
    println!(
        "epochs: {}, best epoch: {}, final train loss: {}",
        out.log.epochs.len(),
        out.best_epoch.map_or_else(|| "init".into(), |e| e.to_string()),
        fmt_opt(last.map(|e| e.train_loss))
    );
    if !out.voi_fallbacks.is_empty() {
        println!("voi fallbacks: {}", out.voi_fallbacks.join(","));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let opts = EvalOptions {
        split: a.split.parse()?,
        batch_size: a.batch_size.max(1),
        localization: (!a.no_localization).then(LocalizationConfig::default),
        ..Default::default()
    };
    let r = eval_checkpoint_file(&a.checkpoint, &a.manifest, &a.out, &opts)?;
    println!("cases: {} positive, {} negative", r.n_pos, r.n_neg);
    println!("auc: {}", fmt_opt(r.auc));
    if let Some((lo, hi)) = r.delong_ci_95 {
        println!("95% CI (DeLong): [{lo:.4}, {hi:.4}]");
    }
    println!("threshold: {} ({:?})", r.youden_threshold, r.threshold_source);
    println!(
        "sensitivity {} specificity {} ppv {} npv {} accuracy {}",
        fmt_opt(r.sensitivity),
        fmt_opt(r.specificity),
        fmt_opt(r.ppv),
        fmt_opt(r.npv),
        fmt_opt(r.accuracy)
    );
    if let Some(l) = &r.localization {
        println!(
            "localization: {}/{} inside (fraction {}, required {})",
            l.inside,
            l.candidates,
            fmt_opt(l.fraction),
            l.required_fraction
        );
    }
    println!("report: {}", a.out.join(volnet::run::REPORT_FILE).display());
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let t = compare_scores(&a.scores_a, &a.scores_b)?;
    println!("auc_a: {:.6}", t.auc_a);
    println!("auc_b: {:.6}", t.auc_b);
    println!("difference: {:.6}", t.difference);
    println!("z: {:.6}", t.z);
    println!("p_value: {}", t.p_value);
    Ok(())
}

fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let taps: Vec<String> = if a.taps == "all" {
        Vec::new()
    } else {
        a.taps.split(',').map(|t| t.trim().to_string()).collect()
    };
    let maps = explain_volume(
        &a.checkpoint,
        &a.volume,
        &taps,
        a.aggregate,
        &a.out,
        &Default::default(),
    )?;
    for m in &maps {
        println!("{}: {}", m.name, m.path.display());
        if m.all_zero {
            eprintln!(
                "warning: heatmap {} is all zero (the logit does not depend on this tap)",
                m.name
            );
        }
    }
    Ok(())
}

fn cmd_ablation(a: AblationArgs) -> Result<()> {
    let cfg = run_config(&a.model)?;
    let out_dir = cfg.output_dir.clone();
    let rows = ablation_run(&cfg, &ablation_subsets(a.full_grid), &out_dir)?;
    println!("positions\tauc\taccuracy\tspecificity\tsensitivity\tppv\tnpv");
    for r in &rows {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.positions,
            fmt_opt(r.auc),
            fmt_opt(r.accuracy),
            fmt_opt(r.specificity),
            fmt_opt(r.sensitivity),
            fmt_opt(r.ppv),
            fmt_opt(r.npv)
        );
    }
    println!("table: {}", out_dir.join(ABLATION_FILE).display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } | Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Leakage(_) => EXIT_LEAKAGE,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Ablation(a) => cmd_ablation(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
