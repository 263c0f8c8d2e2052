//! `gpm` — train and evaluate proxy-based hard-mining experiments.
//!
//! Subcommands: generate | train | eval | ablate | inspect. Every run is
//! described by a flat key=value config assembled from a preset, an
//! optional config file, and repeatable `--set` overrides, and is written
//! back into the output directory for exact replay.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use gpm_core::config::{Preset, RunConfig};
use gpm_core::dataset::{self, PlaceDataset};
use gpm_core::eval::{evaluate_model, RECALL_KS};
use gpm_core::losses::LossKind;
use gpm_core::model::Model;
use gpm_core::sampler::SamplerMode;
use gpm_core::train::{train_on, TrainOutcome};

#[derive(Parser)]
#[command(
    name = "gpm",
    about = "Metric-learning trainer with global proxy-based hard mini-batch mining",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic place dataset file
    Generate(GenerateCmd),
    /// Train a model, writing checkpoints and metric CSVs
    Train(TrainCmd),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalCmd),
    /// Run an ablation grid and write a summary table
    Ablate(AblateCmd),
    /// Summarize a dataset file, optionally exporting CSV
    Inspect(InspectCmd),
}

/// Config assembly shared by the config-driven subcommands.
#[derive(Args)]
struct ConfigArgs {
    /// Starting preset: paper | desk
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Config file of key=value lines applied on top of the preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed (applied after --config, before --set)
    #[arg(long)]
    seed: Option<u64>,
    /// Override a single key, e.g. --set sampler.M=60 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for parallel ablation cells (training itself is
    /// single-threaded for reproducibility)
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl ConfigArgs {
    fn build(&self) -> anyhow::Result<RunConfig> {
        let preset: Preset = self.preset.parse()?;
        let mut cfg = RunConfig::preset(preset, 0);
        if let Some(path) = &self.config {
            cfg.apply_config_file(path)
                .with_context(|| format!("reading config {}", path.display()))?;
        }
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        for pair in &self.set {
            let (key, value) = pair
                .split_once('=')
                .with_context(|| format!("--set '{pair}' is not KEY=VALUE"))?;
            cfg.set_key(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateCmd {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output dataset file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for checkpoints, CSVs, and the config snapshot
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCmd {
    /// Model checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file to split into queries and references
    #[arg(long)]
    dataset: PathBuf,
    /// Fraction of each place's images held out as queries
    #[arg(long, default_value_t = 0.25)]
    holdout: f64,
    /// Split seed
    #[arg(long, default_value_t = 3)]
    seed: u64,
    /// Output directory for recall.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateCmd {
    #[command(flatten)]
    config: ConfigArgs,
    /// Grid shape: "scenarios" (loss x OHM x GPM) or "m-sweep"
    #[arg(long, default_value = "scenarios")]
    grid: String,
    /// Batch sizes for --grid m-sweep
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    m_values: Vec<usize>,
    /// Seeds shared by every cell
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Output directory for summary.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectCmd {
    /// Dataset file to summarize
    #[arg(long)]
    dataset: PathBuf,
    /// Also export the features as CSV to this path
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match Cli::parse().command {
        Command::Generate(cmd) => run_generate(cmd),
        Command::Train(cmd) => run_train(cmd),
        Command::Eval(cmd) => run_eval(cmd),
        Command::Ablate(cmd) => run_ablate(cmd),
        Command::Inspect(cmd) => run_inspect(cmd),
    }
}

fn run_generate(cmd: GenerateCmd) -> anyhow::Result<()> {
    let cfg = cmd.config.build()?;
    cfg.generator.validate()?;
    let ds = dataset::generate(&cfg.generator)?;
    dataset::save(&ds, &cmd.out)
        .with_context(|| format!("writing {}", cmd.out.display()))?;
    log::info!(
        "wrote {} places x [{},{}] images (dim {}) to {}",
        ds.n_places(),
        cfg.generator.images_per_place_min,
        cfg.generator.images_per_place_max,
        ds.feature_dim(),
        cmd.out.display()
    );
    Ok(())
}

fn run_train(cmd: TrainCmd) -> anyhow::Result<()> {
    let cfg = cmd.config.build()?;
    cfg.validate()?;
    let ds = resolve_dataset(&cfg)?;
    let outcome = train_on(&cfg, &ds, Some(&cmd.out))?;
    print_outcome(&outcome);
    Ok(())
}

fn print_outcome(outcome: &TrainOutcome) {
    let r = &outcome.final_recall;
    log::info!(
        "final recall@1 {:.4}  @5 {:.4}  @10 {:.4}  ({} queries / {} references)",
        r.get(1).unwrap_or(f64::NAN),
        r.get(5).unwrap_or(f64::NAN),
        r.get(10).unwrap_or(f64::NAN),
        r.n_queries,
        r.n_references
    );
    log::info!(
        "bank: {} proxies x dim {} = {} bytes; mean plan build {:.3}s, mean epoch {:.3}s",
        outcome.cost.n_places,
        outcome.cost.proxy_dim,
        outcome.cost.bank_bytes,
        outcome.cost.plan_build_seconds,
        outcome.cost.epoch_seconds
    );
}

fn resolve_dataset(cfg: &RunConfig) -> anyhow::Result<PlaceDataset> {
    Ok(match &cfg.dataset_path {
        Some(path) => {
            dataset::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => dataset::generate(&cfg.generator)?,
    })
}

fn run_eval(cmd: EvalCmd) -> anyhow::Result<()> {
    let model = Model::load(&cmd.checkpoint)
        .with_context(|| format!("loading checkpoint {}", cmd.checkpoint.display()))?;
    let ds = dataset::load(&cmd.dataset)
        .with_context(|| format!("loading dataset {}", cmd.dataset.display()))?;
    if ds.feature_dim() != model.config.input_dim {
        bail!(
            "dataset features have dim {}, checkpoint expects {}",
            ds.feature_dim(),
            model.config.input_dim
        );
    }
    let split = dataset::make_eval_split(&ds, cmd.holdout, cmd.seed)?;
    let report = evaluate_model(&model, &split, &RECALL_KS)?;

    std::fs::create_dir_all(&cmd.out)?;
    let path = cmd.out.join("recall.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "n_queries,n_references,recall_at_1,recall_at_5,recall_at_10")?;
    writeln!(
        w,
        "{},{},{},{},{}",
        report.n_queries,
        report.n_references,
        report.get(1).unwrap_or(f64::NAN),
        report.get(5).unwrap_or(f64::NAN),
        report.get(10).unwrap_or(f64::NAN)
    )?;
    w.flush()?;
    log::info!(
        "recall@1 {:.4}  @5 {:.4}  @10 {:.4} -> {}",
        report.get(1).unwrap_or(f64::NAN),
        report.get(5).unwrap_or(f64::NAN),
        report.get(10).unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

/// One ablation cell: overrides applied on top of the base config.
#[derive(Clone, Debug)]
struct Cell {
    label: String,
    loss: Option<LossKind>,
    ohm: Option<bool>,
    mode: SamplerMode,
    m: Option<usize>,
}

/// Median of already-collected values.
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn run_ablate(cmd: AblateCmd) -> anyhow::Result<()> {
    let base = cmd.config.build()?;
    base.validate()?;
    if cmd.seeds.is_empty() {
        bail!("--seeds must list at least one seed");
    }

    let cells: Vec<Cell> = match cmd.grid.as_str() {
        "scenarios" => {
            let losses = [LossKind::Triplet, LossKind::Contrastive, LossKind::MultiSimilarity];
            let scenarios = [(false, false), (false, true), (true, false), (true, true)];
            losses
                .iter()
                .flat_map(|&loss| {
                    scenarios.iter().map(move |&(ohm, gpm)| Cell {
                        label: format!(
                            "{loss},ohm={},gpm={}",
                            ohm as u8,
                            gpm as u8
                        ),
                        loss: Some(loss),
                        ohm: Some(ohm),
                        mode: if gpm { SamplerMode::Gpm } else { SamplerMode::Random },
                        m: None,
                    })
                })
                .collect()
        }
        "m-sweep" => cmd
            .m_values
            .iter()
            .flat_map(|&m| {
                [SamplerMode::Random, SamplerMode::Gpm].into_iter().map(move |mode| Cell {
                    label: format!("M={m},{mode}"),
                    loss: None,
                    ohm: None,
                    mode,
                    m: Some(m),
                })
            })
            .collect(),
        other => bail!("unknown grid '{other}' (expected scenarios | m-sweep)"),
    };

    // one dataset per seed, shared by every cell for a fair comparison
    let datasets: Vec<(u64, PlaceDataset)> = cmd
        .seeds
        .iter()
        .map(|&seed| -> anyhow::Result<(u64, PlaceDataset)> {
            let mut cfg = base.clone();
            cfg.set_seed(seed);
            Ok((seed, resolve_dataset(&cfg)?))
        })
        .collect::<anyhow::Result<_>>()?;

    let runs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cmd.seeds.len()).map(move |s| (c, s)))
        .collect();

    let execute = |&(cell_idx, seed_idx): &(usize, usize)| -> anyhow::Result<TrainOutcome> {
        let cell = &cells[cell_idx];
        let (seed, ds) = &datasets[seed_idx];
        let mut cfg = base.clone();
        cfg.set_seed(*seed);
        if let Some(loss) = cell.loss {
            cfg.loss.kind = loss;
        }
        if let Some(ohm) = cell.ohm {
            cfg.loss.ohm_enabled = ohm;
        }
        if let Some(m) = cell.m {
            cfg.sampler.m = m;
        }
        cfg.sampler.mode = cell.mode;
        cfg.eval_every = 0; // final-epoch evaluation only
        Ok(train_on(&cfg, ds, None)?)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cmd.config.threads.max(1))
        .build()?;
    let outcomes: Vec<anyhow::Result<TrainOutcome>> = pool.install(|| {
        use rayon::prelude::*;
        runs.par_iter().map(execute).collect()
    });

    std::fs::create_dir_all(&cmd.out)?;
    base.write_to(&cmd.out.join("config.txt"))?;
    let mut w = BufWriter::new(File::create(cmd.out.join("summary.csv"))?);
    writeln!(
        w,
        "cell,seeds,recall_at_1,recall_at_5,recall_at_10,mean_fraction_pairs,mean_fraction_triplets"
    )?;

    let mut outcome_iter = outcomes.into_iter();
    let mut table = String::new();
    for cell in &cells {
        let mut r1 = Vec::new();
        let mut r5 = Vec::new();
        let mut r10 = Vec::new();
        let mut frac_pairs = Vec::new();
        let mut frac_triplets = Vec::new();
        for _ in &cmd.seeds {
            let outcome = outcome_iter
                .next()
                .expect("one outcome per run")
                .with_context(|| format!("cell {}", cell.label))?;
            r1.push(outcome.final_recall.get(1).unwrap_or(f64::NAN));
            r5.push(outcome.final_recall.get(5).unwrap_or(f64::NAN));
            r10.push(outcome.final_recall.get(10).unwrap_or(f64::NAN));
            let n = outcome.per_epoch.len() as f64;
            frac_pairs
                .push(outcome.per_epoch.iter().map(|e| e.mean_pair_fraction).sum::<f64>() / n);
            frac_triplets
                .push(outcome.per_epoch.iter().map(|e| e.mean_triplet_fraction).sum::<f64>() / n);
        }
        let seeds_label = cmd
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join("|");
        let row = format!(
            "{},{seeds_label},{},{},{},{},{}",
            cell.label,
            median(&mut r1),
            median(&mut r5),
            median(&mut r10),
            median(&mut frac_pairs),
            median(&mut frac_triplets)
        );
        writeln!(w, "{row}")?;
        let _ = writeln!(table, "{row}");
    }
    w.flush()?;
    log::info!("summary ({} cells):\n{table}", cells.len());
    Ok(())
}

fn run_inspect(cmd: InspectCmd) -> anyhow::Result<()> {
    let ds = dataset::load(&cmd.dataset)
        .with_context(|| format!("loading {}", cmd.dataset.display()))?;
    let (min_imgs, max_imgs) = ds
        .places()
        .iter()
        .fold((usize::MAX, 0), |(lo, hi), p| {
            (lo.min(p.images.len()), hi.max(p.images.len()))
        });
    println!("places:        {}", ds.n_places());
    println!("images:        {} ({min_imgs}..{max_imgs} per place)", ds.n_images());
    println!("feature_dim:   {}", ds.feature_dim());
    match &ds.generator {
        Some(g) => {
            println!("generator:     seed={} archetypes={}", g.seed, g.n_archetypes);
            println!(
                "noise:         sigma_within={} sigma_archetype={}",
                g.sigma_within, g.sigma_archetype
            );
        }
        None => println!("generator:     (external data)"),
    }
    if let Some(csv) = &cmd.csv {
        let mut w = BufWriter::new(File::create(csv)?);
        dataset::export_csv(&ds, &mut w)?;
        w.flush()?;
        println!("csv export:    {}", csv.display());
    }
    Ok(())
}
