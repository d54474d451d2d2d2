//! Self-attentive sequence encoder: item + position embeddings, stacked
//! post-norm transformer blocks, and dot-product next-item scoring against
//! the shared item embedding table.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnLayout, Scalar, Tape, Var};
use crate::corpus::truncate_pad;
use crate::error::{Error, Result};

/// RNG driving dropout and every sampler.
pub type TrainRng = rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding dimension.
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub n_items: usize,
    pub n_attrs: usize,
    pub dropout: f64,
    pub d_ff: usize,
    pub init_std: f64,
}

impl ModelConfig {
    /// Defaults: d = 64, 2 heads, 2 blocks, max length 50, d_ff = 4d,
    /// dropout 0.2.
    pub fn new(n_items: usize, n_attrs: usize) -> Self {
        Self {
            d: 64,
            heads: 2,
            blocks: 2,
            max_len: 50,
            n_items,
            n_attrs,
            dropout: 0.2,
            d_ff: 256,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.d == 0 || self.heads == 0 || self.max_len == 0 || self.n_items == 0 || self.d_ff == 0 {
            return fail("model sizes must be at least 1");
        }
        if self.d % self.heads != 0 {
            return fail("model.d must be divisible by model.heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("model.dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Index of the `[mask]` token in the item table.
    pub fn mask_token(&self) -> usize {
        self.n_items + 1
    }

    /// Shapes that must agree for parameters to be exchangeable.
    pub fn compatible_with(&self, other: &ModelConfig) -> Result<()> {
        let pairs = [
            ("d", self.d, other.d),
            ("heads", self.heads, other.heads),
            ("blocks", self.blocks, other.blocks),
            ("max_len", self.max_len, other.max_len),
            ("n_items", self.n_items, other.n_items),
            ("n_attrs", self.n_attrs, other.n_attrs),
            ("d_ff", self.d_ff, other.d_ff),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(Error::ConfigMismatch(format!("{name}: {a} vs {b}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Bidirectional,
    Causal,
}

pub const ITEM_EMB: usize = 0;
pub const ATTR_EMB: usize = 1;
pub const POS_EMB: usize = 2;
pub const CRITIC_AAP: usize = 3;
pub const CRITIC_MIP: usize = 4;
pub const CRITIC_MAP: usize = 5;
pub const CRITIC_SP: usize = 6;
const BLOCK_BASE: usize = 7;
const PER_BLOCK: usize = 12;

/// Tensor slots inside one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockTensor {
    Wq = 0,
    Wk,
    Wv,
    Wo,
    AttnNormGain,
    AttnNormBias,
    FfnW1,
    FfnB1,
    FfnW2,
    FfnB2,
    FfnNormGain,
    FfnNormBias,
}

const BLOCK_NAMES: [&str; PER_BLOCK] = [
    "w_q",
    "w_k",
    "w_v",
    "w_o",
    "attn_norm.gain",
    "attn_norm.bias",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
    "ffn_norm.gain",
    "ffn_norm.bias",
];

pub fn block_tensor(block: usize, t: BlockTensor) -> usize {
    BLOCK_BASE + block * PER_BLOCK + t as usize
}

pub fn is_critic(id: usize) -> bool {
    (CRITIC_AAP..=CRITIC_SP).contains(&id)
}

/// All learnable tensors, stored in a fixed canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub config: ModelConfig,
    pub tensors: Vec<Array2<T>>,
}

fn tensor_shape(cfg: &ModelConfig, id: usize) -> (usize, usize) {
    let d = cfg.d;
    match id {
        ITEM_EMB => (cfg.n_items + 2, d),
        ATTR_EMB => (cfg.n_attrs + 1, d),
        POS_EMB => (cfg.max_len, d),
        CRITIC_AAP..=CRITIC_SP => (d, d),
        _ => match (id - BLOCK_BASE) % PER_BLOCK {
            0..=3 => (d, d),
            6 => (d, cfg.d_ff),
            7 => (1, cfg.d_ff),
            8 => (cfg.d_ff, d),
            _ => (1, d),
        },
    }
}

impl<T: Scalar> Params<T> {
    pub fn n_tensors(cfg: &ModelConfig) -> usize {
        BLOCK_BASE + cfg.blocks * PER_BLOCK
    }

    pub fn shapes(cfg: &ModelConfig) -> Vec<(usize, usize)> {
        (0..Self::n_tensors(cfg)).map(|id| tensor_shape(cfg, id)).collect()
    }

    pub fn names(cfg: &ModelConfig) -> Vec<String> {
        (0..Self::n_tensors(cfg))
            .map(|id| match id {
                ITEM_EMB => "item_emb".to_string(),
                ATTR_EMB => "attr_emb".to_string(),
                POS_EMB => "pos_emb".to_string(),
                CRITIC_AAP => "critic.aap".to_string(),
                CRITIC_MIP => "critic.mip".to_string(),
                CRITIC_MAP => "critic.map".to_string(),
                CRITIC_SP => "critic.sp".to_string(),
                _ => {
                    let rel = id - BLOCK_BASE;
                    format!("block{}.{}", rel / PER_BLOCK, BLOCK_NAMES[rel % PER_BLOCK])
                }
            })
            .collect()
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            tensors: Self::shapes(config).into_iter().map(Array2::zeros).collect(),
            config: config.clone(),
        }
    }

    /// Weights and embeddings ~ normal(0, std) truncated at two standard
    /// deviations; biases and norm offsets zero, norm gains one.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        Self::init_with_std(config, config.init_std, rng)
    }

    pub fn init_with_std<R: Rng + ?Sized>(config: &ModelConfig, std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let normal = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("valid std");
        for (id, t) in p.tensors.iter_mut().enumerate() {
            let fill = if id < BLOCK_BASE {
                Some(())
            } else {
                match (id - BLOCK_BASE) % PER_BLOCK {
                    0..=3 | 6 | 8 => Some(()),
                    4 | 10 => {
                        t.fill(T::one());
                        None
                    }
                    _ => None,
                }
            };
            if fill.is_some() {
                t.mapv_inplace(|_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break T::of(v);
                    }
                });
            }
        }
        p
    }

    pub fn get(&self, id: usize) -> &Array2<T> {
        &self.tensors[id]
    }

    pub fn item_embedding(&self) -> &Array2<T> {
        &self.tensors[ITEM_EMB]
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Puts every tensor on the tape as a parameter leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .enumerate()
                .map(|(id, t)| tape.param(id, t.clone()))
                .collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| U::of(v.to_f64().expect("finite"))))
                .collect(),
        }
    }
}

/// Tape handles for a registered parameter set.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn get(&self, id: usize) -> Var {
        self.0[id]
    }

    pub fn block(&self, block: usize, t: BlockTensor) -> Var {
        self.0[block_tensor(block, t)]
    }
}

/// A batch of equally wide sequences laid out row-major, `batch × width`.
/// Position `p` of a row uses position embedding `pos_offset + p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqBatch {
    pub ids: Vec<usize>,
    pub validity: Vec<bool>,
    pub batch: usize,
    pub width: usize,
    pub pos_offset: usize,
}

impl SeqBatch {
    /// Truncates and left-pads every sequence to `max_len`, then drops
    /// leading columns that are padding in every row. Dropped columns are
    /// accounted for in `pos_offset`, so each item keeps the position it
    /// would have at full width.
    pub fn left_padded<S: AsRef<[usize]>>(seqs: &[S], max_len: usize) -> Self {
        let longest = seqs.iter().map(|s| s.as_ref().len().min(max_len)).max().unwrap_or(0).max(1);
        let mut out = Self {
            ids: Vec::with_capacity(seqs.len() * longest),
            validity: Vec::with_capacity(seqs.len() * longest),
            batch: seqs.len(),
            width: longest,
            pos_offset: max_len - longest,
        };
        for s in seqs {
            let (ids, valid) = truncate_pad(s.as_ref(), max_len);
            out.ids.extend_from_slice(&ids[max_len - longest..]);
            out.validity.extend_from_slice(&valid[max_len - longest..]);
        }
        out
    }

    /// Right-padded layout with positions starting at 0 (used for segments).
    pub fn right_padded<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let width = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0).max(1);
        let mut out = Self {
            ids: vec![0; seqs.len() * width],
            validity: vec![false; seqs.len() * width],
            batch: seqs.len(),
            width,
            pos_offset: 0,
        };
        for (b, s) in seqs.iter().enumerate() {
            for (p, &id) in s.as_ref().iter().enumerate() {
                out.ids[b * width + p] = id;
                out.validity[b * width + p] = true;
            }
        }
        out
    }

    pub fn row(&self, b: usize, p: usize) -> usize {
        b * self.width + p
    }

    /// Flat row index of the last real position of each sequence.
    pub fn last_real_rows(&self) -> Vec<usize> {
        (0..self.batch)
            .map(|b| {
                let p = (0..self.width)
                    .rev()
                    .find(|&p| self.validity[self.row(b, p)])
                    .unwrap_or(self.width - 1);
                self.row(b, p)
            })
            .collect()
    }
}

/// `mask[q][k]`: may position `q` attend to position `k`.
pub fn build_attention_mask(validity: &[bool], direction: Direction) -> Array2<bool> {
    let n = validity.len();
    Array2::from_shape_fn((n, n), |(q, k)| {
        let allowed = match direction {
            Direction::Causal => k <= q && validity[k],
            Direction::Bidirectional => validity[k],
        };
        allowed || (q == k && validity[q])
    })
}

fn batch_layout(batch: &SeqBatch, direction: Direction, heads: usize) -> AttnLayout {
    let w = batch.width;
    let mut mask = Vec::with_capacity(batch.batch * w * w);
    for b in 0..batch.batch {
        let valid = &batch.validity[b * w..(b + 1) * w];
        let m = build_attention_mask(valid, direction);
        for q in 0..w {
            for k in 0..w {
                // padding queries attend to themselves only; their outputs are never read
                mask.push(m[[q, k]] || (q == k && !valid[q]));
            }
        }
    }
    AttnLayout {
        batch: batch.batch,
        width: w,
        heads,
        mask,
    }
}

/// `F⁰ = M_I[ids] + P[positions]` on the tape.
pub fn embed_on_tape<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, cfg: &ModelConfig, batch: &SeqBatch) -> Result<Var> {
    let rows = cfg.n_items + 2;
    if let Some(&bad) = batch.ids.iter().find(|&&i| i >= rows) {
        return Err(Error::IndexOutOfRange { index: bad, rows });
    }
    if batch.pos_offset + batch.width > cfg.max_len {
        return Err(Error::IndexOutOfRange {
            index: batch.pos_offset + batch.width - 1,
            rows: cfg.max_len,
        });
    }
    let items = tape.gather(pv.get(ITEM_EMB), batch.ids.clone());
    let positions = (0..batch.batch)
        .flat_map(|_| batch.pos_offset..batch.pos_offset + batch.width)
        .collect();
    let pos = tape.gather(pv.get(POS_EMB), positions);
    Ok(tape.add(items, pos))
}

fn block_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    block: usize,
    x: Var,
    layout: AttnLayout,
    mut rng: Option<&mut TrainRng>,
) -> Var {
    use BlockTensor::*;
    let q = tape.matmul(x, pv.block(block, Wq));
    let k = tape.matmul(x, pv.block(block, Wk));
    let v = tape.matmul(x, pv.block(block, Wv));
    let heads = tape.attention(q, k, v, layout);
    let mut attn = tape.matmul(heads, pv.block(block, Wo));
    if let Some(r) = rng.as_deref_mut() {
        attn = tape.dropout(attn, cfg.dropout, r);
    }
    let res = tape.add(x, attn);
    let x1 = tape.layer_norm(res, pv.block(block, AttnNormGain), pv.block(block, AttnNormBias));

    let h = tape.matmul(x1, pv.block(block, FfnW1));
    let h = tape.add_row(h, pv.block(block, FfnB1));
    let h = tape.relu(h);
    let h = tape.matmul(h, pv.block(block, FfnW2));
    let mut ffn = tape.add_row(h, pv.block(block, FfnB2));
    if let Some(r) = rng.as_deref_mut() {
        ffn = tape.dropout(ffn, cfg.dropout, r);
    }
    let res = tape.add(x1, ffn);
    tape.layer_norm(res, pv.block(block, FfnNormGain), pv.block(block, FfnNormBias))
}

/// Full encoder on the tape. Output is `(batch·width) × d`. Dropout is
/// applied only when `rng` is given.
pub fn encode_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    batch: &SeqBatch,
    direction: Direction,
    mut rng: Option<&mut TrainRng>,
) -> Result<Var> {
    let mut x = embed_on_tape(tape, pv, cfg, batch)?;
    if let Some(r) = rng.as_deref_mut() {
        x = tape.dropout(x, cfg.dropout, r);
    }
    let layout = batch_layout(batch, direction, cfg.heads);
    for block in 0..cfg.blocks {
        x = block_on_tape(tape, pv, cfg, block, x, layout.clone(), rng.as_deref_mut());
    }
    Ok(x)
}

/// Forward-only batch encoding (evaluation mode, no dropout).
pub fn encode_batch<T: Scalar>(params: &Params<T>, batch: &SeqBatch, direction: Direction) -> Result<Array2<T>> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let out = encode_on_tape(&mut tape, &pv, &params.config, batch, direction, None)?;
    Ok(tape.value(out).clone())
}

fn single(ids: &[usize], validity: &[bool]) -> SeqBatch {
    SeqBatch {
        ids: ids.to_vec(),
        validity: validity.to_vec(),
        batch: 1,
        width: ids.len(),
        pos_offset: 0,
    }
}

/// `F⁰[t] = M_I[ids[t]] + P[t]` for one sequence.
pub fn embed_sequence<T: Scalar>(ids: &[usize], params: &Params<T>) -> Result<Array2<T>> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let valid = vec![true; ids.len()];
    let out = embed_on_tape(&mut tape, &pv, &params.config, &single(ids, &valid))?;
    Ok(tape.value(out).clone())
}

fn check_mask(mask: &Array2<bool>) -> Result<()> {
    match mask.rows().into_iter().position(|r| !r.iter().any(|&b| b)) {
        Some(row) => Err(Error::MaskAllFalseRow { row }),
        None => Ok(()),
    }
}

/// One transformer block in evaluation mode on a single `n × d` input.
pub fn attention_block<T: Scalar>(f: &Array2<T>, mask: &Array2<bool>, params: &Params<T>, block: usize) -> Result<Array2<T>> {
    check_mask(mask)?;
    let n = f.nrows();
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let x = tape.constant(f.clone());
    let layout = AttnLayout {
        batch: 1,
        width: n,
        heads: params.config.heads,
        mask: mask.iter().copied().collect(),
    };
    let out = block_on_tape(&mut tape, &pv, &params.config, block, x, layout, None);
    Ok(tape.value(out).clone())
}

/// Per-head attention probability matrices (`n × n`) of one block.
pub fn attention_weights<T: Scalar>(f: &Array2<T>, mask: &Array2<bool>, params: &Params<T>, block: usize) -> Result<Vec<Array2<T>>> {
    use BlockTensor::*;
    check_mask(mask)?;
    let cfg = &params.config;
    let (n, dh) = (f.nrows(), cfg.d / cfg.heads);
    let q = f.dot(params.get(block_tensor(block, Wq)));
    let k = f.dot(params.get(block_tensor(block, Wk)));
    let flat_mask: Vec<bool> = mask.iter().copied().collect();
    let scale = T::one() / T::of(dh as f64).sqrt();
    Ok((0..cfg.heads)
        .map(|h| {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            let mut scores: Vec<T> = q.slice(cols).dot(&k.slice(cols).t()).iter().map(|&v| v * scale).collect();
            crate::autograd::masked_softmax_rows(&mut scores, &flat_mask, n);
            Array2::from_shape_vec((n, n), scores).expect("square")
        })
        .collect())
}

/// Embedding followed by every block, positions starting at 0.
pub fn encode<T: Scalar>(ids: &[usize], validity: &[bool], direction: Direction, params: &Params<T>) -> Result<Array2<T>> {
    encode_batch(params, &single(ids, validity), direction)
}

/// `score(i) = M_I[i] · state`.
pub fn score_next_item<T: Scalar>(state: ArrayView1<T>, candidates: &[usize], params: &Params<T>) -> Result<Vec<T>> {
    let table = params.item_embedding();
    candidates
        .iter()
        .map(|&i| {
            if i >= table.nrows() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    rows: table.nrows(),
                });
            }
            Ok(table.row(i).dot(&state))
        })
        .collect()
}
