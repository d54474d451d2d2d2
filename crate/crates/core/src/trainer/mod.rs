//! Two-stage training: bidirectional pretraining on the four contrastive
//! objectives, parameter transfer, then causal fine-tuning with early
//! stopping on validation NDCG@10.

mod adam;
pub(crate) mod audit;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use audit::{audit_with_fault, finite_difference_audit, toy_config, AuditLoss, AuditReport};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EpochRecord, Manifest, RngState, Stage, TensorEntry};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::corpus::{AttributeTable, DatasetSplit};
use crate::encoder::{is_critic, ModelConfig, Params, TrainRng};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalProtocol, EvalTarget};
use crate::objectives::{finetune_objective, pretrain_loss, LossReport, PretrainObjective, TermStats};
use crate::sampler::{build_finetune_batch, build_pretrain_batch, PretrainContext, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub finetune_batch: usize,
    /// Upper bound on fine-tuning epochs.
    pub finetune_epochs: usize,
    /// Fine-tuning learning rate, and the pretraining one unless
    /// `pretrain_lr` is set.
    pub lr: f64,
    pub pretrain_lr: Option<f64>,
    pub seed: u64,
    /// Fine-tuning stops after this many epochs without a new best
    /// validation NDCG@10.
    pub patience: usize,
    /// Share of users whose training sequences are used for fine-tuning.
    pub train_fraction: f64,
    /// Emit a pretraining checkpoint every this many epochs (0: never).
    pub checkpoint_every: usize,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 100,
            pretrain_batch: 200,
            finetune_batch: 256,
            finetune_epochs: 200,
            lr: 1e-3,
            pretrain_lr: None,
            seed: 42,
            patience: 10,
            train_fraction: 1.0,
            checkpoint_every: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_batch == 0 || self.finetune_batch == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        for lr in std::iter::once(self.lr).chain(self.pretrain_lr) {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::InvalidConfig("learning rates must be positive".into()));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::InvalidConfig("train.train_fraction must lie in (0, 1]".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidConfig("train.clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            clip_norm: self.clip_norm,
            ..Default::default()
        }
    }
}

/// RNG for one training stage. Stages use separate streams of the same seed.
fn stage_rng(seed: u64, stream: u64) -> TrainRng {
    let mut rng = TrainRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = 0;
const PRETRAIN_STREAM: u64 = 1;
const FINETUNE_STREAM: u64 = 2;
const FRACTION_STREAM: u64 = 3;

/// Fresh parameters for `seed`.
pub fn initial_params(model: &ModelConfig, seed: u64) -> Params<f32> {
    Params::init(model, &mut stage_rng(seed, INIT_STREAM))
}

pub struct PretrainSetup<'a> {
    pub split: &'a DatasetSplit,
    pub attributes: &'a AttributeTable,
    pub model: &'a ModelConfig,
    pub sampler: &'a SamplerConfig,
    pub objective: &'a PretrainObjective,
    pub train: &'a TrainConfig,
}

/// Running per-objective means weighted by term counts.
#[derive(Default)]
struct ReportAccumulator {
    sums: [(f64, usize); 4],
    total: f64,
    batches: usize,
}

impl ReportAccumulator {
    fn add(&mut self, r: &LossReport) {
        for (slot, term) in self.sums.iter_mut().zip([r.aap, r.mip, r.map, r.sp]) {
            if let Some(t) = term {
                slot.0 += t.mean * t.count as f64;
                slot.1 += t.count;
            }
        }
        self.total += r.total;
        self.batches += 1;
    }

    fn finish(&self) -> LossReport {
        let term = |(s, c): (f64, usize)| (c > 0).then(|| TermStats { mean: s / c as f64, count: c });
        LossReport {
            aap: term(self.sums[0]),
            mip: term(self.sums[1]),
            map: term(self.sums[2]),
            sp: term(self.sums[3]),
            total: self.total / self.batches.max(1) as f64,
        }
    }
}

/// Pretrains from fresh parameters. `on_checkpoint` receives a checkpoint
/// every `checkpoint_every` epochs.
pub fn pretrain(setup: &PretrainSetup<'_>, on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>) -> Result<Checkpoint> {
    pretrain_from(initial_params(setup.model, setup.train.seed), setup, on_checkpoint)
}

pub fn pretrain_from(
    mut params: Params<f32>,
    setup: &PretrainSetup<'_>,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    let (model, train) = (setup.model, setup.train);
    model.validate()?;
    train.validate()?;
    setup.sampler.validate()?;
    setup.objective.weights.validate()?;
    let mut rng = stage_rng(train.seed, PRETRAIN_STREAM);
    let mut opt = OptimizerState::new(&params, train.adam(train.pretrain_lr.unwrap_or(train.lr)));
    let ctx = PretrainContext {
        attributes: setup.attributes,
        n_items: model.n_items,
        n_attrs: model.n_attrs,
        max_len: model.max_len,
        mask_token: model.mask_token(),
    };
    let mut order: Vec<usize> = (0..setup.split.len()).collect();
    let mut history = Vec::new();
    let snapshot = |params: &Params<f32>, epoch, rng: &TrainRng, history: &Vec<EpochRecord>| Checkpoint {
        params: params.clone(),
        stage: Stage::Pretrained,
        epoch,
        rng_state: RngState::capture(rng),
        history: history.clone(),
    };

    for epoch in 1..=train.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut acc = ReportAccumulator::default();
        for chunk in order.chunks(train.pretrain_batch) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|&u| setup.split.train[u].as_slice()).collect();
            let batch = build_pretrain_batch(&seqs, &ctx, setup.sampler, &mut rng)?;
            let mut tape = Tape::new();
            let pv = params.register(&mut tape);
            let (total, report) = pretrain_loss(&mut tape, &pv, model, &batch, setup.objective, Some(&mut rng))?;
            if !report.total.is_finite() {
                return Err(Error::DivergenceDetected { epoch, value: report.total });
            }
            let mut grads = tape.backward(total);
            let grads = tape.param_grads(&mut grads);
            adam_step(&mut params, &grads, &mut opt)?;
            acc.add(&report);
        }
        let report = acc.finish();
        log::info!("pretrain epoch {epoch}: loss {:.5}", report.total);
        history.push(EpochRecord {
            stage: Stage::Pretrained,
            epoch,
            loss: report.total,
            report: Some(report),
            valid_ndcg10: None,
        });
        if train.checkpoint_every > 0 && epoch % train.checkpoint_every == 0 {
            on_checkpoint(&snapshot(&params, epoch, &rng, &history))?;
        }
    }
    Ok(snapshot(&params, train.pretrain_epochs, &rng, &history))
}

/// Parameters for fine-tuning from a pretrained checkpoint: embeddings and
/// every block tensor are copied, critic matrices are zeroed (they play no
/// part in fine-tuning).
pub fn transfer_parameters(pretrained: &Checkpoint, target: &ModelConfig) -> Result<Params<f32>> {
    pretrained.config().compatible_with(target)?;
    let mut params = pretrained.params.clone();
    params.config = target.clone();
    for (id, t) in params.tensors.iter_mut().enumerate() {
        if is_critic(id) {
            t.fill(0.0);
        }
    }
    Ok(params)
}

pub struct FinetuneSetup<'a> {
    pub split: &'a DatasetSplit,
    pub train: &'a TrainConfig,
    /// Candidate protocol for validation; its target is forced to `valid`.
    pub protocol: &'a EvalProtocol,
}

/// Users whose sequences are used for fine-tuning, by seeded shuffle.
pub fn select_training_users(n_users: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut users: Vec<usize> = (0..n_users).collect();
    if fraction >= 1.0 {
        return users;
    }
    users.shuffle(&mut stage_rng(seed, FRACTION_STREAM));
    let keep = ((n_users as f64 * fraction).ceil() as usize).clamp(1, n_users);
    users.truncate(keep);
    users.sort_unstable();
    users
}

/// Causal fine-tuning; returns the parameters with the best validation
/// NDCG@10 seen.
pub fn finetune(init: Params<f32>, setup: &FinetuneSetup<'_>) -> Result<Checkpoint> {
    let train = setup.train;
    train.validate()?;
    let model = init.config.clone();
    model.validate()?;
    let mut rng = stage_rng(train.seed, FINETUNE_STREAM);
    let users = select_training_users(setup.split.len(), train.train_fraction, train.seed);
    let protocol = EvalProtocol {
        k_values: vec![10],
        ..setup.protocol.with_target(EvalTarget::Valid)
    };
    let mut params = init;
    let mut opt = OptimizerState::new(&params, train.adam(train.lr));
    let mut order = users.clone();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Params<f32>)> = None;
    let mut since_best = 0;

    for epoch in 1..=train.finetune_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(train.finetune_batch) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|&u| setup.split.train[u].as_slice()).collect();
            let batch = build_finetune_batch(&seqs, model.n_items, model.max_len, &mut rng)?;
            let mut tape = Tape::new();
            let pv = params.register(&mut tape);
            let loss = finetune_objective(&mut tape, &pv, &model, &batch, Some(&mut rng))?;
            let value = tape.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(Error::DivergenceDetected { epoch, value });
            }
            let mut grads = tape.backward(loss);
            let grads = tape.param_grads(&mut grads);
            adam_step(&mut params, &grads, &mut opt)?;
            loss_sum += value;
            batches += 1;
        }
        let loss = loss_sum / batches.max(1) as f64;
        let ndcg = evaluate_model(&params, setup.split, &protocol)?.ndcg_at(10);
        log::info!("finetune epoch {epoch}: loss {loss:.5}, valid NDCG@10 {ndcg:.4}");
        history.push(EpochRecord {
            stage: Stage::Finetuned,
            epoch,
            loss,
            report: None,
            valid_ndcg10: Some(ndcg),
        });
        if best.as_ref().is_none_or(|b| ndcg > b.0) {
            best = Some((ndcg, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train.patience {
                break;
            }
        }
    }
    let (epoch, params) = match best {
        Some((_, epoch, p)) => (epoch, p),
        None => (0, params),
    };
    Ok(Checkpoint {
        params,
        stage: Stage::Finetuned,
        epoch,
        rng_state: RngState::capture(&rng),
        history,
    })
}
