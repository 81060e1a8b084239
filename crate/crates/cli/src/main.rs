//! `noisynp`: train, evaluate, sweep, render and export from one binary.
//!
//! Every command takes `--config` plus repeatable `--set key=value` overrides and writes
//! the resolved configuration and a code hash next to what it produces. Exit codes are
//! 0 on success, 2 for configuration errors, 3 for numerical failures and 4 for I/O.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use noisynp::backbone::Checkpoint;
use noisynp::config::{resolve_path, ExperimentConfig};
use noisynp::eval::{
    aggregate, derive_seed, export_figure, Aggregate, ResultRow, ResultsStore, Runner, Split,
    TrainKey, Trained, FIGURES,
};
use noisynp::funcdata::{Phase, Setup};
use noisynp::imagefunc::{
    compose_strip, context_image, render_prediction, sample_image_task, values_to_image,
    ImageFunctionSet,
};
use noisynp::models::Model;
use noisynp::ErrorKind;

const CODE_VERSION: &str = env!("NOISYNP_CODE_HASH");
const RESOLVED_CONFIG: &str = "resolved_config.toml";
const CODE_VERSION_FILE: &str = "code_version";

#[derive(Parser)]
#[command(
    name = "noisynp",
    version,
    about = "Neural processes trained and scored under noisy contexts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration value, e.g. `--set train.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Override `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; replaces the configured one for this command.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("train.seed={s}"));
        }
        Ok(ExperimentConfig::load(&self.config, &overrides)
            .with_context(|| format!("loading {}", self.config.display()))?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model; prints the checkpoint path.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from an existing checkpoint instead of starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on the configured test set and append the row.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Results label; defaults to the checkpoint's variant name.
        #[arg(long)]
        label: Option<String>,
    },
    /// Run the configured tuning and sweep blocks, skipping finished cells.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Render image completions from one or more checkpoints.
    Render {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to render; repeat to compare several models side by side.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Index into the held-out images.
        #[arg(long, default_value_t = 0)]
        image: usize,
        /// Context size; defaults to the configured one.
        #[arg(long)]
        num_ctx: Option<usize>,
        /// Latent samples averaged per render.
        #[arg(long, default_value_t = 30)]
        samples: usize,
    },
    /// Write plot-ready series from a results directory.
    ExportPlots {
        /// Results directory holding results.csv.
        #[arg(long)]
        results: PathBuf,
        /// One of fig1, fig2, fig4, fig6, fig7, or `all`.
        #[arg(long, default_value = "all")]
        figure: String,
        /// Directory for the exported series.
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_aggregate(a: &Aggregate) {
    println!(
        "{} {} {} setup {} s={} r={}: {a} ({} seeds)",
        a.dataset, a.kernel, a.model, a.setup, a.noise_s, a.noise_r, a.seeds
    );
}

fn write_provenance(dir: &Path, cfg: Option<&ExperimentConfig>) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    if let Some(cfg) = cfg {
        fs::write(dir.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    }
    fs::write(dir.join(CODE_VERSION_FILE), format!("{CODE_VERSION}\n"))?;
    Ok(())
}

fn load_trained(path: &Path) -> anyhow::Result<(TrainKey, Trained)> {
    let ck: Checkpoint<f32> = Checkpoint::load(path)?;
    let key: TrainKey = serde_json::from_str(&ck.config).map_err(|e| {
        noisynp::Error::Format(format!(
            "{}: checkpoint config is not a training key: {e}",
            path.display()
        ))
    })?;
    let model = Model::new(&key.model)?;
    model.layout().validate(&ck.params)?;
    Ok((
        key,
        Trained {
            model,
            params: ck.params,
            checkpoint: path.to_path_buf(),
        },
    ))
}

fn cmd_train(common: &Common, resume: bool) -> anyhow::Result<()> {
    let mut cfg = common.load()?;
    if let Some(out) = &common.out {
        cfg.paths.checkpoint_dir = out.clone();
    }
    let mut runner = Runner::new(cfg.clone())?;
    runner.set_resume(resume);
    let variant = cfg.model.variant;
    let key = runner.train_key(
        variant,
        cfg.loss.resolve(variant),
        cfg.data.setup,
        &cfg.data.noise,
        cfg.train.seed,
    );
    let trained = runner.train(&key)?;
    write_provenance(&resolve_path(&cfg.paths.checkpoint_dir), Some(&cfg))?;
    println!("{}", trained.checkpoint.display());
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path, label: Option<&str>) -> anyhow::Result<()> {
    let mut cfg = common.load()?;
    if let Some(out) = &common.out {
        cfg.paths.results_dir = out.clone();
    }
    let (key, trained) = load_trained(checkpoint)?;
    if key.model.variant != cfg.model.variant {
        return Err(noisynp::Error::Config(format!(
            "checkpoint holds a {} model but the config asks for {}",
            key.model.variant, cfg.model.variant
        ))
        .into());
    }
    let runner = Runner::new(cfg.clone())?;
    let label = label
        .map(str::to_string)
        .unwrap_or_else(|| key.model.variant.to_string());
    let noise = cfg.data.noise;
    let (ll, n) = runner.evaluate(
        &trained,
        &label,
        cfg.data.setup,
        key.train.seed,
        Split::Test,
        &noise,
    )?;
    let row = ResultRow {
        dataset: cfg.data.dataset.clone(),
        kernel: cfg.data.kernel_label(),
        model: label,
        setup: cfg.data.setup,
        noise_s: noise.std,
        noise_r: noise.effective_rate(),
        seed: key.train.seed,
        target_ll: ll,
        n_tasks: n,
        k_eval: cfg.eval.k_eval,
    };
    let meta = serde_json::json!({ "checkpoint": checkpoint.display().to_string(), "train_key": key.hash() });
    if !runner.store().append(&row, meta)? {
        log::warn!("{} already has a row; kept the stored one", row.key());
    }
    write_provenance(runner.store().dir(), Some(&cfg))?;
    let rows = runner.store().rows()?;
    let group: Vec<ResultRow> = rows
        .into_iter()
        .filter(|r| {
            (&r.dataset, &r.kernel, &r.model, r.setup)
                == (&row.dataset, &row.kernel, &row.model, row.setup)
                && r.noise_s == row.noise_s
                && r.noise_r == row.noise_r
        })
        .collect();
    for a in aggregate(&group) {
        print_aggregate(&a);
    }
    Ok(())
}

fn cmd_sweep(common: &Common) -> anyhow::Result<()> {
    let mut cfg = common.load()?;
    if let Some(out) = &common.out {
        cfg.paths.results_dir = out.clone();
    }
    let runner = Runner::new(cfg.clone())?;
    write_provenance(runner.store().dir(), Some(&cfg))?;
    let res = runner.run_sweep()?;
    for a in &res.aggregates {
        print_aggregate(a);
    }
    Ok(())
}

fn cmd_render(
    common: &Common,
    checkpoints: &[PathBuf],
    image: usize,
    num_ctx: Option<usize>,
    samples: usize,
) -> anyhow::Result<()> {
    let cfg = common.load()?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| resolve_path(&cfg.paths.results_dir).join("renders"));
    let runner = Runner::new(cfg.clone())?;
    let Some((_, test)) = runner.image_sets() else {
        bail!(noisynp::Error::Config("render needs [data.images]".into()))
    };
    if image >= test.images.len() {
        bail!(noisynp::Error::Config(format!(
            "image {image} out of range; {} held-out images",
            test.images.len()
        )));
    }
    let mut task_cfg = cfg
        .image_task_config(cfg.data.noise)
        .expect("image data configured");
    task_cfg.batch_size = 1;
    if let Some(n) = num_ctx {
        task_cfg.num_ctx = n;
    }
    let one = ImageFunctionSet::with_stats(
        vec![test.images[image].clone()],
        vec![test.names[image].clone()],
        test.stats.clone(),
    )?;
    let seed = derive_seed(&["render", &test.names[image], &cfg.train.seed.to_string()]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = sample_image_task(&one, &task_cfg, Setup::Three, Phase::Eval, &mut rng)?
        .tasks
        .remove(0);
    let (h, w) = (one.height, one.width);

    fs::create_dir_all(&out)?;
    let mut panels = vec![
        values_to_image(&one.function(0).y, h, w, &one.stats)?,
        context_image(&task.ctx, h, w, &one.stats),
    ];
    let mut models = Vec::new();
    for path in checkpoints {
        let (key, trained) = load_trained(path)?;
        let name = format!("{}-{}", key.model.variant, key.hash());
        let mut model_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(&["render-model", &name, &seed.to_string()]));
        let render = render_prediction(
            &trained.model,
            &trained.params,
            &one,
            &task.ctx,
            samples,
            &mut model_rng,
        )?;
        render.image.save(out.join(format!("{name}.png")))?;
        let max_std = render.std_map.iter().copied().fold(0.0, f64::max);
        render
            .std_image(h, w, max_std)
            .save(out.join(format!("{name}-std.png")))?;
        panels.push(render.image);
        models.push(serde_json::json!({ "name": name, "checkpoint": path.display().to_string(), "max_std": max_std }));
    }
    let strip = compose_strip(&panels, 2)?;
    let strip_path = out.join("strip.png");
    strip.save(&strip_path)?;
    let sidecar = serde_json::json!({
        "image": test.names[image],
        "task_seed": seed,
        "noise": cfg.data.noise,
        "num_ctx": task.ctx.len(),
        "samples": samples,
        "panels": ["clean", "context"],
        "models": models,
    });
    fs::write(
        out.join("strip.json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    write_provenance(&out, Some(&cfg))?;
    println!("{}", strip_path.display());
    Ok(())
}

fn cmd_export(results: &Path, figure: &str, out: &Path) -> anyhow::Result<()> {
    let store = ResultsStore::open(results)?;
    let rows = store.rows()?;
    let figures: Vec<&str> = if figure == "all" {
        FIGURES.to_vec()
    } else {
        vec![figure]
    };
    let mut n = 0;
    for f in figures {
        n += export_figure(&rows, f, out)?.len();
    }
    write_provenance(out, None)?;
    println!("{n} series files in {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train { common, resume } => cmd_train(common, *resume),
        Command::Eval {
            common,
            checkpoint,
            label,
        } => cmd_eval(common, checkpoint, label.as_deref()),
        Command::Sweep { common } => cmd_sweep(common),
        Command::Render {
            common,
            checkpoint,
            image,
            num_ctx,
            samples,
        } => cmd_render(common, checkpoint, *image, *num_ctx, *samples),
        Command::ExportPlots {
            results,
            figure,
            out,
        } => cmd_export(results, figure, out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err
        .chain()
        .find_map(|e| e.downcast_ref::<noisynp::Error>())
        .map(noisynp::Error::kind)
    {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Numeric) => 3,
        Some(ErrorKind::Io) => 4,
        None if err
            .chain()
            .any(|e| e.is::<std::io::Error>() || e.is::<image::ImageError>()) =>
        {
            4
        }
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
