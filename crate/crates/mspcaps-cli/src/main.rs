//! Command-line surface: train, evaluate, attack, inspect, and data
//! conversion for MSPCaps models. Logs go to stderr; machine-readable
//! results are files.

mod config;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use mspcaps::attack::{robustness_sweep, write_robustness_csv, AttackKind, DEFAULT_EPSILONS};
use mspcaps::data::{
    load_dataset, parse_cifar10_bin, parse_idx_images, parse_idx_labels, write_labels, write_mspd,
    AugmentPolicy, Dataset, Split,
};
use mspcaps::error::{Error, Result};
use mspcaps::model::Model;
use mspcaps::train::{
    config_fingerprint, evaluate, load_checkpoint, load_model, save_checkpoint, MetricsWriter,
    Schedule, Trainer,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mspcaps", about = "Multi-scale patchify capsule network trainer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a metrics CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run an adversarial robustness sweep against a checkpoint.
    Attack(AttackArgs),
    /// Report parameters, capsule counts, and routing group sizes.
    Inspect(InspectArgs),
    /// Convert IDX or CIFAR-10 binary files into the MSPD raw container.
    Convert(ConvertArgs),
}

#[derive(Args, Clone)]
struct ConfigOverrides {
    /// JSON run configuration; flags below override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Routing mechanism: car or dr.
    #[arg(long)]
    routing: Option<String>,
    #[arg(long)]
    dr_iters: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    weight_shared: Option<bool>,
    /// Three 0/1 digits choosing the 32x32, 16x16, 8x8 scales, e.g. 110.
    #[arg(long)]
    scale_mask: Option<String>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    limit_train: Option<usize>,
    #[arg(long)]
    limit_eval: Option<usize>,
    #[arg(long)]
    seed_init: Option<u64>,
    #[arg(long)]
    seed_shuffle: Option<u64>,
    #[arg(long)]
    seed_dropout: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Resume from a checkpoint written by an identical configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Resolved run configuration of the checkpoint.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Evaluate at most this many samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Dataset split: test or train.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Attack kind: fgsm or bim.
    #[arg(long, default_value = "fgsm")]
    attack: String,
    /// Comma-separated strictly increasing epsilon grid.
    #[arg(long)]
    eps_list: Option<String>,
    /// Iteration count for bim.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Attack at most this many samples.
    #[arg(long, default_value_t = 1000)]
    limit: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Output CSV path (default: next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Validate and count against an existing checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    /// Source files: one IDX image file, or CIFAR-10 .bin batches.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// IDX label file (required for --format idx).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Source format: idx or cifar-bin; detected from the magic when omitted.
    #[arg(long)]
    format: Option<String>,
    /// Output prefix; writes <prefix>.mspd and <prefix>.labels.
    #[arg(long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    mspcaps::init_threads_from_env();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Convert(args) => cmd_convert(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Incompatible(_) => 2,
        Error::Format { .. } | Error::Io(_) => 3,
        Error::Numeric(_) | Error::Shape { .. } | Error::Axis { .. } | Error::Domain { .. } => 4,
    }
}

fn build_config(overrides: &ConfigOverrides) -> Result<RunConfig> {
    let mut cfg = match &overrides.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let o = overrides.clone();
    if let Some(v) = o.preset {
        cfg.preset = v;
    }
    if let Some(v) = o.dataset {
        cfg.dataset = v;
    }
    if let Some(v) = o.data_dir {
        cfg.data_dir = v;
    }
    if o.epochs.is_some() {
        cfg.epochs = o.epochs;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if o.lr.is_some() {
        cfg.base_lr = o.lr;
    }
    if let Some(v) = o.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = o.routing {
        cfg.routing = match v.as_str() {
            "car" => mspcaps::model::RoutingKind::Car,
            "dr" => mspcaps::model::RoutingKind::Dr,
            other => return Err(Error::Config(format!("unknown routing `{other}` (car|dr)"))),
        };
    }
    if let Some(v) = o.dr_iters {
        cfg.dr_iters = v;
    }
    if let Some(v) = o.patch_size {
        cfg.patch_size = v;
    }
    if o.weight_shared.is_some() {
        cfg.weight_shared = o.weight_shared;
    }
    if let Some(mask) = o.scale_mask {
        let bits: Vec<char> = mask.chars().collect();
        if bits.len() != 3 || bits.iter().any(|c| *c != '0' && *c != '1') {
            return Err(Error::Config(format!("scale mask `{mask}` must be three 0/1 digits")));
        }
        cfg.scale_mask = [bits[0] == '1', bits[1] == '1', bits[2] == '1'];
    }
    if o.dropout.is_some() {
        cfg.dropout_rate = o.dropout;
    }
    if o.limit_train.is_some() {
        cfg.limit_train = o.limit_train;
    }
    if o.limit_eval.is_some() {
        cfg.limit_eval = o.limit_eval;
    }
    if let Some(v) = o.seed_init {
        cfg.seed_init = v;
    }
    if let Some(v) = o.seed_shuffle {
        cfg.seed_shuffle = v;
    }
    if let Some(v) = o.seed_dropout {
        cfg.seed_dropout = v;
    }
    if let Some(v) = o.out_dir {
        cfg.out_dir = v;
    }
    cfg.resolve()?;
    Ok(cfg)
}

fn load_split(cfg: &RunConfig, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let mut ds = load_dataset(&cfg.dataset, &cfg.data_dir, split)?;
    if let Some(n) = limit {
        ds.truncate(n);
    }
    Ok(ds)
}

fn policy_for(cfg: &RunConfig, channels: usize) -> AugmentPolicy {
    AugmentPolicy::for_dataset(&cfg.dataset).unwrap_or_else(|_| {
        // raw-container datasets: normalize to [-1, 1], no random augmentation
        let mut p = AugmentPolicy::none(channels);
        p.normalize_mean = vec![0.5; channels];
        p.normalize_std = vec![0.5; channels];
        p
    })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = build_config(&args.overrides)?;
    let model_cfg = cfg.model_config()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join("config.resolved.json"))?;

    let train_data = load_split(&cfg, Split::Train, cfg.limit_train)?;
    let test_data = load_split(&cfg, Split::Test, cfg.limit_eval)?;
    let policy = policy_for(&cfg, model_cfg.in_channels);
    let epochs = cfg.epochs.expect("resolved");

    let mut model = Model::<f32>::build(model_cfg, cfg.seed_init)?;
    let report = model.count_params();
    eprintln!(
        "model preset={} routing={:?} shared={} p={} params={}",
        cfg.preset,
        model.config.routing,
        model.config.weight_shared,
        model.config.patch_size,
        report.total
    );

    let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size);
    let mut schedule = Schedule::new(cfg.base_lr.expect("resolved"), epochs, steps_per_epoch);
    schedule.warmup_epochs = cfg.warmup_epochs;
    schedule.min_lr = cfg.min_lr;
    let mut trainer = Trainer::new(&model, schedule, cfg.weight_decay, cfg.seeds(), cfg.batch_size);

    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut metrics = if let Some(resume) = &args.resume {
        load_checkpoint(resume, &mut model, &mut trainer)?;
        eprintln!("resumed from {} at epoch {}", resume.display(), trainer.epoch);
        MetricsWriter::append(&metrics_path)?
    } else {
        MetricsWriter::create(&metrics_path)?
    };

    let mut best_acc = f64::NEG_INFINITY;
    while trainer.epoch < epochs as u64 {
        let epoch = trainer.epoch;
        let tm = trainer.train_epoch(&mut model, &train_data, &policy)?;
        metrics.row(epoch, "train", tm.loss, tm.accuracy, tm.lr, tm.seconds)?;
        let em = evaluate(&mut model, &test_data, &policy, cfg.batch_size, None)?;
        metrics.row(epoch, "test", em.loss, em.accuracy, tm.lr, em.seconds)?;
        eprintln!(
            "epoch {epoch}: train loss {:.4} acc {:.4} | test loss {:.4} acc {:.4} | lr {:.3e} ({:.1}s)",
            tm.loss, tm.accuracy, em.loss, em.accuracy, tm.lr, tm.seconds
        );
        save_checkpoint(&cfg.out_dir.join("last.ckpt"), &model, &trainer)?;
        if em.accuracy > best_acc {
            best_acc = em.accuracy;
            save_checkpoint(&cfg.out_dir.join("best.ckpt"), &model, &trainer)?;
        }
    }
    eprintln!("done: best test accuracy {best_acc:.4}");
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.resolve()?;
    if let Some(dir) = args.data_dir {
        cfg.data_dir = dir;
    }
    let model_cfg = cfg.model_config()?;
    let mut model = Model::<f32>::build(model_cfg, cfg.seed_init)?;
    let header = load_model(&args.checkpoint, &mut model)?;

    let split = match args.split.as_str() {
        "test" => Split::Test,
        "train" => Split::Train,
        other => return Err(Error::Config(format!("unknown split `{other}`"))),
    };
    let data = load_split(&cfg, split, args.limit)?;
    let policy = policy_for(&cfg, model.config.in_channels);
    let em = evaluate(&mut model, &data, &policy, cfg.batch_size, args.limit)?;
    println!("accuracy {:.4}", em.accuracy);

    let metrics_path = args
        .checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join("metrics.csv");
    let mut writer = if metrics_path.exists() {
        MetricsWriter::append(&metrics_path)?
    } else {
        MetricsWriter::create(&metrics_path)?
    };
    writer.row(header.epoch, "eval", em.loss, em.accuracy, 0.0, em.seconds)?;
    Ok(())
}

fn parse_eps_list(text: &str) -> Result<Vec<f64>> {
    let eps: std::result::Result<Vec<f64>, _> = text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    eps.map_err(|e| Error::Config(format!("bad epsilon list `{text}`: {e}")))
}

fn cmd_attack(args: AttackArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.resolve()?;
    if let Some(dir) = args.data_dir {
        cfg.data_dir = dir;
    }
    let model_cfg = cfg.model_config()?;
    let mut model = Model::<f32>::build(model_cfg, cfg.seed_init)?;
    load_model(&args.checkpoint, &mut model)?;

    let kind = match args.attack.as_str() {
        "fgsm" => AttackKind::Fgsm,
        "bim" => AttackKind::Bim,
        other => return Err(Error::Config(format!("unknown attack `{other}` (fgsm|bim)"))),
    };
    let epsilons = match &args.eps_list {
        Some(text) => parse_eps_list(text)?,
        None => DEFAULT_EPSILONS.to_vec(),
    };
    let data = load_split(&cfg, Split::Test, None)?;
    let policy = policy_for(&cfg, model.config.in_channels);
    let curve = robustness_sweep(
        &mut model,
        &data,
        &policy,
        &epsilons,
        kind,
        args.steps,
        args.batch_size,
        Some(args.limit),
        &cfg.preset,
    )?;
    for &(eps, acc) in &curve.points {
        eprintln!("{kind} eps {eps}: accuracy {acc:.4}");
    }
    let out = args.out.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("robustness.csv")
    });
    write_robustness_csv(&out, &[curve])?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let cfg = build_config(&args.overrides)?;
    let model_cfg = cfg.model_config()?;
    let mut model = Model::<f32>::build(model_cfg, cfg.seed_init)?;
    if let Some(ckpt) = &args.checkpoint {
        load_model(ckpt, &mut model)?;
    }
    let report = model.count_params();
    println!("fingerprint {:016x}", config_fingerprint(&model.config));
    let counts = model.capsule_counts();
    let total: usize = counts.iter().map(|(_, n)| n).sum();
    for (scale, n) in &counts {
        let hw = model.config.map_hw(*scale);
        println!("scale {hw}x{hw}: {n} primary capsules");
    }
    println!("primary capsules total: {total}");
    let groups = model.car_group_sizes();
    if !groups.is_empty() {
        let s: Vec<String> = groups.iter().map(|g| g.to_string()).collect();
        println!("car group sizes: ({})", s.join(", "));
    }
    println!("parameters by module:");
    print!("{report}");
    Ok(())
}

#[derive(PartialEq)]
enum SourceFormat {
    Idx,
    CifarBin,
}

fn detect_format(args: &ConvertArgs) -> Result<SourceFormat> {
    if let Some(f) = &args.format {
        return match f.as_str() {
            "idx" => Ok(SourceFormat::Idx),
            "cifar-bin" => Ok(SourceFormat::CifarBin),
            other => Err(Error::Config(format!("unknown format `{other}` (idx|cifar-bin)"))),
        };
    }
    let first = &args.input[0];
    let bytes = std::fs::read(first).map_err(|e| Error::Format {
        offset: 0,
        msg: format!("cannot read {}: {e}", first.display()),
    })?;
    if bytes.len() >= 4 && u32::from_be_bytes(bytes[..4].try_into().unwrap()) == 0x0803 {
        return Ok(SourceFormat::Idx);
    }
    if bytes.len() % 3073 == 0 && !bytes.is_empty() {
        return Ok(SourceFormat::CifarBin);
    }
    Err(Error::Config(format!(
        "cannot detect source format of {} (pass --format idx|cifar-bin)",
        first.display()
    )))
}

fn cmd_convert(args: ConvertArgs) -> Result<()> {
    let format = detect_format(&args)?;
    let (images, labels) = match format {
        SourceFormat::Idx => {
            if args.input.len() != 1 {
                return Err(Error::Config("idx conversion takes exactly one image file".into()));
            }
            let labels_path = args
                .labels
                .as_ref()
                .ok_or_else(|| Error::Config("idx conversion needs --labels".into()))?;
            let images = parse_idx_images(&std::fs::read(&args.input[0])?)?;
            let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
            (images, labels)
        }
        SourceFormat::CifarBin => {
            let mut all_data = Vec::new();
            let mut all_labels = Vec::new();
            let mut n = 0;
            for path in &args.input {
                let (imgs, labels) = parse_cifar10_bin(&std::fs::read(path)?)?;
                n += imgs.shape()[0];
                all_data.extend_from_slice(imgs.data());
                all_labels.extend(labels);
            }
            (
                mspcaps::tensor::Tensor::new(vec![n, 3, 32, 32], all_data)?,
                all_labels,
            )
        }
    };
    if images.shape()[0] != labels.len() {
        return Err(Error::Format {
            offset: 0,
            msg: format!("{} images vs {} labels", images.shape()[0], labels.len()),
        });
    }
    let mspd = args.output.with_extension("mspd");
    let labels_out = args.output.with_extension("labels");
    write_mspd(&mspd, &images)?;
    write_labels(&labels_out, &labels)?;
    eprintln!("wrote {} and {}", mspd.display(), labels_out.display());
    Ok(())
}
