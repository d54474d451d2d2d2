//! Finite-difference gradient audit in f64.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::corpus::AttributeTable;
use crate::encoder::{ModelConfig, Params, TrainRng};
use crate::objectives::{finetune_objective, pretrain_loss, LossWeights, PretrainObjective};
use crate::sampler::{build_finetune_batch, build_pretrain_batch, FinetuneBatch, PretrainBatch, PretrainContext, SamplerConfig};

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-8;
/// Initial weight scale for audits: large enough that gradients are not
/// dominated by finite-difference noise.
const AUDIT_INIT_STD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AuditLoss {
    Aap,
    Mip,
    Map,
    Sp,
    Finetune,
    Pretrain(LossWeights),
}

impl AuditLoss {
    pub fn all() -> Vec<AuditLoss> {
        vec![Self::Aap, Self::Mip, Self::Map, Self::Sp, Self::Finetune]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Aap => "aap",
            Self::Mip => "mip",
            Self::Map => "map",
            Self::Sp => "sp",
            Self::Finetune => "finetune",
            Self::Pretrain(_) => "pretrain",
        }
    }

    fn weights(&self) -> Option<LossWeights> {
        let only = |i: usize| {
            let mut w = [0.0; 4];
            w[i] = 1.0;
            LossWeights {
                aap: w[0],
                mip: w[1],
                map: w[2],
                sp: w[3],
            }
        };
        match self {
            Self::Aap => Some(only(0)),
            Self::Mip => Some(only(1)),
            Self::Map => Some(only(2)),
            Self::Sp => Some(only(3)),
            Self::Finetune => None,
            Self::Pretrain(w) => Some(w.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub loss: String,
    pub seed: u64,
    pub max_rel_error: f64,
    /// Tensor holding the worst entry, and both gradients there.
    pub worst_tensor: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub n_checked: usize,
    /// Largest absolute analytic and numeric gradient entries.
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

/// Toy model config used by the audit: d = 8, sequences of 6 items, two
/// blocks, no dropout.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        blocks: 2,
        max_len: 6,
        n_items: 10,
        n_attrs: 6,
        dropout: 0.0,
        d_ff: 16,
        init_std: AUDIT_INIT_STD,
    }
}

enum Batch {
    Pretrain(PretrainBatch),
    Finetune(FinetuneBatch),
}

fn toy_batch(loss: &AuditLoss, cfg: &ModelConfig, rng: &mut TrainRng) -> crate::Result<Batch> {
    let seqs = toy_sequences(cfg, rng);
    if matches!(loss, AuditLoss::Finetune) {
        return Ok(Batch::Finetune(build_finetune_batch(&seqs, cfg.n_items, cfg.max_len, rng)?));
    }
    Ok(Batch::Pretrain(toy_pretrain_batch(&seqs, cfg, 2, rng)?))
}

/// Four random full-length sequences over the toy vocabulary.
pub(crate) fn toy_sequences(cfg: &ModelConfig, rng: &mut TrainRng) -> Vec<Vec<usize>> {
    let n = cfg.max_len;
    (0..4).map(|_| (0..n).map(|_| rng.random_range(1..=cfg.n_items)).collect()).collect()
}

/// Pretraining batch over `seqs` with random one-or-two attribute sets and
/// `k` negatives per slot.
pub(crate) fn toy_pretrain_batch(seqs: &[Vec<usize>], cfg: &ModelConfig, k: usize, rng: &mut TrainRng) -> crate::Result<PretrainBatch> {
    let mut attrs = AttributeTable::empty(cfg.n_items);
    for i in 1..=cfg.n_items {
        let a = rng.random_range(1..=cfg.n_attrs);
        let b = rng.random_range(1..=cfg.n_attrs);
        let mut set = vec![a, b];
        set.sort_unstable();
        set.dedup();
        attrs.attrs[i] = set;
    }
    let ctx = PretrainContext {
        attributes: &attrs,
        n_items: cfg.n_items,
        n_attrs: cfg.n_attrs,
        max_len: cfg.max_len,
        mask_token: cfg.mask_token(),
    };
    let sampler = SamplerConfig {
        n_neg_item: k,
        n_neg_attr: k,
        n_neg_seg: k,
        seg_max: 3,
        ..Default::default()
    };
    build_pretrain_batch(seqs, &ctx, &sampler, rng)
}

fn loss_on_tape(params: &Params<f64>, batch: &Batch, weights: &Option<LossWeights>) -> crate::Result<(Tape<f64>, crate::autograd::Var)> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let out = match (batch, weights) {
        (Batch::Pretrain(b), Some(w)) => {
            let obj = PretrainObjective {
                weights: w.clone(),
                raw_bilinear: false,
            };
            pretrain_loss(&mut tape, &pv, &params.config, b, &obj, None)?.0
        }
        (Batch::Finetune(b), _) => finetune_objective(&mut tape, &pv, &params.config, b, None)?,
        (Batch::Pretrain(_), None) => unreachable!("pretrain batch implies weights"),
    };
    Ok((tape, out))
}

/// Max over all parameters of `|analytic − numeric| / max(|numeric|, 1e-8)`
/// with central differences of step 1e-5.
pub fn finite_difference_audit(loss: &AuditLoss, cfg: &ModelConfig, seed: u64) -> crate::Result<AuditReport> {
    audit_with_fault(loss, cfg, seed, None)
}

/// Like [`finite_difference_audit`], with the analytic gradient multiplied
/// by `1 + fault` to check that the audit catches broken gradients.
pub fn audit_with_fault(loss: &AuditLoss, cfg: &ModelConfig, seed: u64, fault: Option<f64>) -> crate::Result<AuditReport> {
    cfg.validate()?;
    let mut rng = TrainRng::seed_from_u64(seed);
    let mut params: Params<f64> = Params::init_with_std(cfg, cfg.init_std, &mut rng);
    let batch = toy_batch(loss, cfg, &mut rng)?;
    let weights = loss.weights();

    let (tape, out) = loss_on_tape(&params, &batch, &weights)?;
    let mut grads = tape.backward(out);
    let mut analytic: Vec<_> = params.tensors.iter().map(|t| ndarray::Array2::zeros(t.raw_dim())).collect::<Vec<_>>();
    for (id, g) in tape.param_grads(&mut grads) {
        analytic[id] += &g;
    }
    if let Some(f) = fault {
        for g in &mut analytic {
            g.mapv_inplace(|v| v * (1.0 + f));
        }
    }

    let names = Params::<f64>::names(cfg);
    let eval = |p: &Params<f64>| -> crate::Result<f64> {
        let (tape, out) = loss_on_tape(p, &batch, &weights)?;
        Ok(tape.scalar(out))
    };
    let mut report = AuditReport {
        loss: loss.name().into(),
        seed,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        n_checked: 0,
        max_abs_analytic: 0.0,
        max_abs_numeric: 0.0,
    };
    for id in 0..params.tensors.len() {
        for idx in 0..params.tensors[id].len() {
            let (r, c) = (idx / params.tensors[id].ncols(), idx % params.tensors[id].ncols());
            let orig = params.tensors[id][[r, c]];
            params.tensors[id][[r, c]] = orig + STEP;
            let up = eval(&params)?;
            params.tensors[id][[r, c]] = orig - STEP;
            let down = eval(&params)?;
            params.tensors[id][[r, c]] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[id][[r, c]];
            let err = (a - numeric).abs() / numeric.abs().max(FLOOR);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst_tensor = names[id].clone();
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            report.max_abs_analytic = report.max_abs_analytic.max(a.abs());
            report.max_abs_numeric = report.max_abs_numeric.max(numeric.abs());
            report.n_checked += 1;
        }
    }
    Ok(report)
}
