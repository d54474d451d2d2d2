//! Experiment configuration (flat dotted-key TOML) and the run pipelines
//! shared by the command-line tool and the test suites.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalProtocol, EvalResult, EvalTarget, ReportEntry};
use crate::objectives::{LossWeights, PretrainObjective};
use crate::sampler::SamplerConfig;
use crate::trainer::{
    finetune, initial_params, pretrain, save_checkpoint, transfer_parameters, Checkpoint, FinetuneSetup, PretrainSetup,
    TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Preprocessed dataset directory.
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub d_ff: usize,
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub finetune_batch: usize,
    pub finetune_epochs: usize,
    pub lr: f64,
    /// Pretraining learning rate; 0 means `lr`.
    pub pretrain_lr: f64,
    pub seed: u64,
    pub patience: usize,
    pub train_fraction: f64,
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub aap_weight: f64,
    pub mip_weight: f64,
    pub map_weight: f64,
    pub sp_weight: f64,
    pub raw_bilinear: bool,
    pub n_neg_item: usize,
    pub n_neg_attr: usize,
    pub n_neg_seg: usize,
    pub mask_ratio: f64,
    pub seg_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n_negatives: usize,
    pub k_values: Vec<usize>,
    pub seed: u64,
    pub scope: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Root under which run directories are created; empty means the
    /// `MIMREC_OUTPUT_ROOT` environment variable, then `runs`.
    pub root: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let w = LossWeights::default();
        let s = SamplerConfig::default();
        let e = EvalProtocol::default();
        Self {
            data: DataSection { dir: "data".into() },
            model: ModelSection {
                d: 64,
                heads: 2,
                blocks: 2,
                max_len: 50,
                dropout: 0.2,
                d_ff: 256,
                init_std: 0.02,
            },
            train: TrainSection {
                pretrain_epochs: t.pretrain_epochs,
                pretrain_batch: t.pretrain_batch,
                finetune_batch: t.finetune_batch,
                finetune_epochs: t.finetune_epochs,
                lr: t.lr,
                pretrain_lr: 0.0,
                seed: t.seed,
                patience: t.patience,
                train_fraction: t.train_fraction,
                checkpoint_every: t.checkpoint_every,
                clip_norm: 0.0,
            },
            loss: LossSection {
                aap_weight: w.aap,
                mip_weight: w.mip,
                map_weight: w.map,
                sp_weight: w.sp,
                raw_bilinear: false,
                n_neg_item: s.n_neg_item,
                n_neg_attr: s.n_neg_attr,
                n_neg_seg: s.n_neg_seg,
                mask_ratio: s.mask_ratio,
                seg_max: s.seg_max,
            },
            eval: EvalSection {
                n_negatives: e.n_negatives,
                k_values: e.k_values,
                seed: e.seed,
                scope: "sampled".into(),
            },
            output: OutputSection { root: String::new() },
        }
    }
}

fn to_toml_value(cfg: &ExperimentConfig) -> toml::Table {
    toml::Table::try_from(cfg).expect("config serializes to a table")
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Parses the right-hand side of a `key=value` override. Bare words that
/// are not valid TOML values are taken as strings.
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ExperimentConfig {
    /// All keys in dotted form with their values.
    pub fn flat(&self) -> BTreeMap<String, toml::Value> {
        let mut out = BTreeMap::new();
        flatten("", &to_toml_value(self), &mut out);
        out
    }

    /// Sets one dotted key. Integers are accepted where floats are expected.
    pub fn set(&mut self, key: &str, value: toml::Value) -> Result<()> {
        let mut flat = self.flat();
        let slot = flat
            .get_mut(key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown config key `{key}`")))?;
        *slot = match (&*slot, value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        *self = Self::from_flat(&flat)?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k.trim(), parse_override_value(v.trim()))?;
        }
        Ok(())
    }

    fn from_flat(flat: &BTreeMap<String, toml::Value>) -> Result<Self> {
        let mut root = toml::Table::new();
        for (key, v) in flat {
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().expect("non-empty key");
            let mut t = &mut root;
            for p in parts {
                t = t
                    .entry(p)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::InvalidConfig(format!("`{key}` conflicts with a value")))?;
            }
            t.insert(last.to_string(), v.clone());
        }
        root.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.message().to_string()))
    }

    /// Reads a config document. Keys may be dotted (`loss.mip_weight = 1.0`)
    /// or grouped in tables; unspecified keys keep their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::InvalidConfig(e.message().to_string()))?;
        let mut given = BTreeMap::new();
        flatten("", &table, &mut given);
        let mut cfg = Self::default();
        for (k, v) in given {
            cfg.set(&k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// One `key = value` line per setting, sorted by key.
    pub fn to_flat_toml(&self) -> String {
        self.flat().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_flat_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.sampler_config().validate()?;
        self.objective().weights.validate()?;
        self.protocol()?.validate()?;
        let probe = self.model_config(1, 1);
        probe.validate()
    }

    pub fn model_config(&self, n_items: usize, n_attrs: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d: m.d,
            heads: m.heads,
            blocks: m.blocks,
            max_len: m.max_len,
            n_items,
            n_attrs,
            dropout: m.dropout,
            d_ff: m.d_ff,
            init_std: m.init_std,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            pretrain_epochs: t.pretrain_epochs,
            pretrain_batch: t.pretrain_batch,
            finetune_batch: t.finetune_batch,
            finetune_epochs: t.finetune_epochs,
            lr: t.lr,
            pretrain_lr: (t.pretrain_lr > 0.0).then_some(t.pretrain_lr),
            seed: t.seed,
            patience: t.patience,
            train_fraction: t.train_fraction,
            checkpoint_every: t.checkpoint_every,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let l = &self.loss;
        SamplerConfig {
            mask_ratio: l.mask_ratio,
            n_neg_item: l.n_neg_item,
            n_neg_attr: l.n_neg_attr,
            n_neg_seg: l.n_neg_seg,
            seg_max: l.seg_max,
        }
    }

    pub fn objective(&self) -> PretrainObjective {
        let l = &self.loss;
        PretrainObjective {
            weights: LossWeights {
                aap: l.aap_weight,
                mip: l.mip_weight,
                map: l.map_weight,
                sp: l.sp_weight,
            },
            raw_bilinear: l.raw_bilinear,
        }
    }

    pub fn protocol(&self) -> Result<EvalProtocol> {
        Ok(EvalProtocol {
            n_negatives: self.eval.n_negatives,
            k_values: self.eval.k_values.clone(),
            seed: self.eval.seed,
            target: EvalTarget::Test,
            scope: self.eval.scope.parse()?,
        })
    }

    /// Output root: the config value, then `MIMREC_OUTPUT_ROOT`, then `runs`.
    pub fn output_root(&self) -> PathBuf {
        if !self.output.root.is_empty() {
            return PathBuf::from(&self.output.root);
        }
        std::env::var_os("MIMREC_OUTPUT_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
    }
}

/// Dataset plus the model config sized to it.
pub struct Prepared {
    pub dataset: Dataset,
    pub model: ModelConfig,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig, dataset: Dataset) -> Result<Self> {
        let model = cfg.model_config(dataset.n_items(), dataset.n_attrs());
        model.validate()?;
        Ok(Self { dataset, model })
    }

    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        Self::new(cfg, Dataset::load(&cfg.data.dir)?)
    }
}

/// Pretrains and hands every periodic checkpoint to `on_checkpoint`.
pub fn run_pretrain(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    let train = cfg.train_config();
    let sampler = cfg.sampler_config();
    let objective = cfg.objective();
    let setup = PretrainSetup {
        split: &prep.dataset.split,
        attributes: &prep.dataset.attributes,
        model: &prep.model,
        sampler: &sampler,
        objective: &objective,
        train: &train,
    };
    pretrain(&setup, on_checkpoint)
}

/// Checkpoint callback writing to `<dir>/epoch-NNNN`.
pub fn save_into(dir: &Path) -> impl FnMut(&Checkpoint) -> Result<()> + '_ {
    move |c| save_checkpoint(c, dir.join(format!("epoch-{:04}", c.epoch)))
}

/// Fine-tunes from `init` (a pretrained checkpoint) or from fresh
/// parameters.
pub fn run_finetune(cfg: &ExperimentConfig, prep: &Prepared, init: Option<&Checkpoint>) -> Result<Checkpoint> {
    let params = match init {
        Some(ck) => transfer_parameters(ck, &prep.model)?,
        None => initial_params(&prep.model, cfg.train.seed),
    };
    let train = cfg.train_config();
    let protocol = cfg.protocol()?;
    finetune(
        params,
        &FinetuneSetup {
            split: &prep.dataset.split,
            train: &train,
            protocol: &protocol,
        },
    )
}

pub fn run_evaluate(cfg: &ExperimentConfig, prep: &Prepared, ckpt: &Checkpoint) -> Result<EvalResult> {
    prep.model.compatible_with(ckpt.config())?;
    evaluate_model(&ckpt.params, &prep.dataset.split, &cfg.protocol()?)
}

/// Pretrain, fine-tune and test-evaluate in one go.
pub fn run_pipeline(cfg: &ExperimentConfig, prep: &Prepared) -> Result<EvalResult> {
    let init = if cfg.train.pretrain_epochs > 0 {
        Some(run_pretrain(cfg, prep, &mut |_| Ok(()))?)
    } else {
        None
    };
    let ft = run_finetune(cfg, prep, init.as_ref())?;
    run_evaluate(cfg, prep, &ft)
}

/// The full model plus one variant per removed objective.
pub fn ablation_variants(cfg: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut out = vec![("full".to_string(), cfg.clone())];
    for name in ["aap", "mip", "map", "sp"] {
        let mut c = cfg.clone();
        c.set(&format!("loss.{name}_weight"), toml::Value::Float(0.0)).expect("known key");
        out.push((format!("-{}", name.to_uppercase()), c));
    }
    out
}

/// Report entry for a labelled result under `cfg`'s protocol.
pub fn report_entry(cfg: &ExperimentConfig, label: &str, result: &EvalResult) -> Result<ReportEntry> {
    Ok(ReportEntry::new(label, &cfg.protocol()?, result))
}
