//! The training loop: assemble a batch from the current plan, forward both
//! branches, compute the loss (optionally with OHM), average and cache the
//! per-place proxies, backpropagate, step the optimizer; rebuild the batch
//! plan at every epoch boundary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::dataset::{self, EvalSplit, PlaceDataset};
use crate::error::{Error, Result};
use crate::eval::{cost_report, evaluate_model, CostReport, RecallReport, RECALL_KS};
use crate::losses::{compute_loss, embedding_grad, pairwise_similarity, StatsWindow};
use crate::model::{EmbeddingBatch, Model};
use crate::numerics::{sgd_step, Matrix};
use crate::sampler::{
    compute_place_proxy, derive_seed, epoch_boundary, EpochSampler, MemoryBank, PlaceId,
    SamplerMode,
};

/// Aggregates of one training epoch.
#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_pair_fraction: f64,
    pub mean_triplet_fraction: f64,
    pub used_gpm_plan: bool,
    pub recall: Option<RecallReport>,
}

/// Everything a finished run hands back to its caller.
#[derive(Debug)]
pub struct TrainOutcome {
    pub per_epoch: Vec<EpochMetrics>,
    pub final_recall: RecallReport,
    pub cost: CostReport,
    pub model: Model,
    pub n_degenerate_proxies: u64,
}

/// Resolves the dataset (load or generate) and trains. With an output
/// directory, writes the config snapshot, CSVs, plan/bank dumps, and
/// per-epoch checkpoints.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = match &cfg.dataset_path {
        Some(path) => dataset::load(path)?,
        None => dataset::generate(&cfg.generator)?,
    };
    train_on(cfg, &ds, out_dir)
}

/// Trains on an already-resolved dataset (shared by `train`, the ablation
/// driver, and tests that reuse one dataset across runs).
pub fn train_on(cfg: &RunConfig, ds: &PlaceDataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.feature_dim() != cfg.encoder.input_dim {
        return Err(Error::Shape(format!(
            "dataset features have dim {}, encoder expects {}",
            ds.feature_dim(),
            cfg.encoder.input_dim
        )));
    }

    let split = dataset::make_eval_split(ds, cfg.eval_holdout, cfg.split_seed())?;
    let train_ds = dataset::train_view(&split, ds.feature_dim())?;
    let place_ids: Vec<PlaceId> = train_ds.place_ids().collect();

    let mut model = Model::init(cfg.encoder.clone())?;
    model.head.detach_input = cfg.detach_proxy_input;
    let mut bank = MemoryBank::new(cfg.encoder.proxy_dim);

    let mut out = match out_dir {
        Some(dir) => Some(OutputWriter::create(dir, cfg)?),
        None => None,
    };

    let mut per_epoch = Vec::with_capacity(cfg.epochs);
    let mut interval_window = StatsWindow::default();
    let mut n_degenerate_proxies = 0u64;
    let mut step = 0usize;
    let mut plan_seconds_total = 0.0;
    let mut epoch_seconds_total = 0.0;

    for epoch in 0..cfg.epochs {
        let plan_start = Instant::now();
        let plan = epoch_boundary(&bank, &place_ids, epoch, &cfg.sampler)?;
        plan.verify_partition(&place_ids)?;
        plan_seconds_total += plan_start.elapsed().as_secs_f64();
        let used_gpm_plan = cfg.sampler.mode == SamplerMode::Gpm
            && epoch > 0
            && plan.epoch_built_for == epoch
            && bank.len() == place_ids.len();
        log::info!(
            "epoch {epoch}: plan of {} tuples ({}), partition verified",
            plan.tuples.len(),
            if used_gpm_plan { "gpm" } else { "random" }
        );
        if let Some(o) = out.as_mut() {
            o.write_plan(epoch, used_gpm_plan, &plan)?;
        }

        let epoch_start = Instant::now();
        let mut sampler =
            EpochSampler::new(plan, cfg.sampler.k, derive_seed(cfg.sampler.seed, epoch as u64, 1));
        let mut epoch_window = StatsWindow::default();

        while let Some(spec) = sampler.next_batch(&train_ds) {
            let spec = spec?;
            let mut rows = Vec::with_capacity(spec.n_rows());
            let mut labels = Vec::with_capacity(spec.n_rows());
            for (id, indices) in &spec.places {
                let place = train_ds
                    .place_by_id(*id)
                    .ok_or_else(|| Error::Validation(format!("unknown place {id}")))?;
                for &i in indices {
                    rows.push(place.images[i].clone());
                    labels.push(*id);
                }
            }
            let features = Matrix::from_rows(&rows)?;

            let fwd = model.forward(&features)?;
            let batch = EmbeddingBatch::new(fwd.x.clone(), fwd.z.clone(), labels, cfg.sampler.k)?;

            let sim_x = pairwise_similarity(&batch.x);
            let sim_z = pairwise_similarity(&batch.z);
            let loss_x = compute_loss(&sim_x, &batch.labels, &cfg.loss)?;
            let loss_z = compute_loss(&sim_z, &batch.labels, &cfg.loss)?;
            let total_loss = loss_x.value + cfg.proxy_loss_weight * loss_z.value;
            if !total_loss.is_finite() {
                let diagnostic = nan_diagnostic(epoch, step, loss_x.value, loss_z.value, &model);
                if let Some(o) = out.as_mut() {
                    o.write_nan_dump(&diagnostic)?;
                }
                return Err(Error::NonFinite(diagnostic));
            }

            // cache this batch's place proxies before the parameter update
            for g in 0..batch.n_places() {
                let id = batch.group_label(g);
                let z_block = group_rows(&batch.z, g, cfg.sampler.k);
                match compute_place_proxy(&z_block) {
                    Ok(proxy) => bank.update(id, proxy, epoch)?,
                    Err(Error::Degenerate(msg)) => {
                        n_degenerate_proxies += 1;
                        log::warn!("place {id}: degenerate proxy kept previous value ({msg})");
                    }
                    Err(e) => return Err(e),
                }
            }

            let grad_x = embedding_grad(&loss_x.grad_sim, &batch.x)?;
            let grad_z =
                embedding_grad(&loss_z.grad_sim, &batch.z)?.scale(cfg.proxy_loss_weight);
            model.backward(&fwd, &grad_x, &grad_z)?;
            sgd_step(&mut model.params_mut(), &cfg.sgd, epoch)?;

            interval_window.push(total_loss, &loss_x.stats);
            epoch_window.push(total_loss, &loss_x.stats);
            step += 1;
            if step.is_multiple_of(cfg.log_interval) {
                if let Some(o) = out.as_mut() {
                    o.write_fraction_row(step, epoch, &interval_window)?;
                }
                interval_window.reset();
            }
        }
        epoch_seconds_total += epoch_start.elapsed().as_secs_f64();

        let evaluate_now = epoch + 1 == cfg.epochs
            || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
        let recall = if evaluate_now {
            Some(evaluate_model(&model, &split, &RECALL_KS)?)
        } else {
            None
        };

        let metrics = EpochMetrics {
            epoch,
            mean_loss: epoch_window.mean_loss().unwrap_or(0.0),
            mean_pair_fraction: epoch_window.mean_pair_fraction().unwrap_or(0.0),
            mean_triplet_fraction: epoch_window.mean_triplet_fraction().unwrap_or(0.0),
            used_gpm_plan,
            recall,
        };
        if let Some(o) = out.as_mut() {
            o.write_metrics_row(&metrics)?;
            o.save_checkpoint(&model, epoch)?;
        }
        per_epoch.push(metrics);
    }

    if !interval_window.is_empty() {
        if let Some(o) = out.as_mut() {
            o.write_fraction_row(step, cfg.epochs - 1, &interval_window)?;
        }
    }

    let epochs = cfg.epochs as f64;
    let cost = cost_report(
        &bank,
        std::mem::size_of::<f64>(),
        plan_seconds_total / epochs,
        epoch_seconds_total / epochs,
    );

    let final_recall = per_epoch
        .last()
        .and_then(|m| m.recall.clone())
        .expect("final epoch always evaluates");

    if let Some(o) = out.as_mut() {
        o.write_cost(&cost)?;
        o.save_bank(&bank)?;
        o.save_final_checkpoint(&model)?;
        o.finish()?;
    }

    Ok(TrainOutcome {
        per_epoch,
        final_recall,
        cost,
        model,
        n_degenerate_proxies,
    })
}

/// Copies rows `g*k .. (g+1)*k` of a matrix.
fn group_rows(m: &Matrix, g: usize, k: usize) -> Matrix {
    Matrix::from_fn(k, m.cols(), |i, j| m.get(g * k + i, j))
}

fn nan_diagnostic(epoch: usize, step: usize, loss_x: f64, loss_z: f64, model: &Model) -> String {
    let mut s = format!(
        "non-finite loss at epoch {epoch} step {step}: main={loss_x} proxy={loss_z}\n"
    );
    for (name, p) in ["w1", "b1", "w2", "b2", "head_w", "head_b"]
        .iter()
        .zip(model.params())
    {
        let sq: f64 = p.value.as_slice().iter().map(|v| v * v).sum();
        let _ = std::fmt::Write::write_fmt(
            &mut s,
            format_args!("param {name}: l2 {}\n", sq.sqrt()),
        );
    }
    s
}

/// File outputs for one run: config snapshot, CSVs with stable headers,
/// plan and bank dumps, checkpoints.
struct OutputWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    fractions: BufWriter<File>,
    plans: BufWriter<File>,
}

impl OutputWriter {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        cfg.write_to(&dir.join("config.txt"))?;
        let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(
            metrics,
            "epoch,mean_loss,mean_fraction_pairs,mean_fraction_triplets,plan,recall_at_1,recall_at_5,recall_at_10"
        )?;
        let mut fractions = BufWriter::new(File::create(dir.join("fractions.csv"))?);
        writeln!(
            fractions,
            "step,epoch,loss_value,fraction_informative_pairs,fraction_informative_triplets"
        )?;
        let plans = BufWriter::new(File::create(dir.join("plans.txt"))?);
        Ok(OutputWriter {
            dir: dir.to_path_buf(),
            metrics,
            fractions,
            plans,
        })
    }

    fn write_fraction_row(&mut self, step: usize, epoch: usize, w: &StatsWindow) -> Result<()> {
        writeln!(
            self.fractions,
            "{step},{epoch},{},{},{}",
            w.mean_loss().unwrap_or(0.0),
            w.mean_pair_fraction().unwrap_or(0.0),
            w.mean_triplet_fraction().unwrap_or(0.0)
        )?;
        Ok(())
    }

    fn write_metrics_row(&mut self, m: &EpochMetrics) -> Result<()> {
        let recall = match &m.recall {
            Some(r) => format!(
                "{},{},{}",
                r.get(1).unwrap_or(f64::NAN),
                r.get(5).unwrap_or(f64::NAN),
                r.get(10).unwrap_or(f64::NAN)
            ),
            None => ",,".into(),
        };
        writeln!(
            self.metrics,
            "{},{},{},{},{},{recall}",
            m.epoch,
            m.mean_loss,
            m.mean_pair_fraction,
            m.mean_triplet_fraction,
            if m.used_gpm_plan { "gpm" } else { "random" }
        )?;
        Ok(())
    }

    fn write_plan(
        &mut self,
        epoch: usize,
        used_gpm: bool,
        plan: &crate::sampler::BatchPlan,
    ) -> Result<()> {
        writeln!(
            self.plans,
            "# epoch {epoch} mode={} tuples={}",
            if used_gpm { "gpm" } else { "random" },
            plan.tuples.len()
        )?;
        plan.write_to(&mut self.plans)
    }

    fn save_checkpoint(&self, model: &Model, epoch: usize) -> Result<()> {
        model.save(&self.dir.join(format!("checkpoint_epoch_{epoch:04}.ckpt")))
    }

    fn save_final_checkpoint(&self, model: &Model) -> Result<()> {
        model.save(&self.dir.join("checkpoint_final.ckpt"))
    }

    fn save_bank(&self, bank: &MemoryBank) -> Result<()> {
        bank.save(&self.dir.join("bank.csv"))
    }

    fn write_cost(&self, cost: &CostReport) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.dir.join("cost.csv"))?);
        writeln!(
            w,
            "proxy_dim,n_places,bank_bytes,plan_build_seconds,epoch_seconds"
        )?;
        writeln!(
            w,
            "{},{},{},{},{}",
            cost.proxy_dim, cost.n_places, cost.bank_bytes, cost.plan_build_seconds, cost.epoch_seconds
        )?;
        Ok(())
    }

    fn write_nan_dump(&mut self, diagnostic: &str) -> Result<()> {
        std::fs::write(self.dir.join("nan_dump.txt"), diagnostic)?;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.fractions.flush()?;
        self.plans.flush()?;
        Ok(())
    }
}

/// Splits evaluation both ways so tests and the eval command can reuse a
/// training config's split parameters.
pub fn eval_split_for(cfg: &RunConfig, ds: &PlaceDataset) -> Result<EvalSplit> {
    dataset::make_eval_split(ds, cfg.eval_holdout, cfg.split_seed())
}
