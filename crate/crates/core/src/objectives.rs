//! Contrastive pretraining losses and the pairwise fine-tuning loss.
//!
//! Every pretraining objective scores an anchor against one positive and a
//! few sampled negatives with a bilinear critic `σ(xᵀ W y)` and feeds the
//! scores to a softmax cross-entropy whose positive sits in its own
//! candidate set. Each objective is averaged over its terms, then the four
//! are combined with non-negative weights.

use serde::{Deserialize, Serialize};

use crate::autograd::{neg_log_sigmoid, sigmoid, Scalar, Tape, Var};
use crate::encoder::{
    encode_on_tape, Direction, ModelConfig, ParamVars, SeqBatch, TrainRng, ATTR_EMB, CRITIC_AAP, CRITIC_MAP, CRITIC_MIP,
    CRITIC_SP, ITEM_EMB,
};
use crate::error::Result;
use crate::sampler::{AttrSlot, FinetuneBatch, PretrainBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub aap: f64,
    pub mip: f64,
    pub map: f64,
    pub sp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            aap: 0.2,
            mip: 1.0,
            map: 1.0,
            sp: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("aap", self.aap), ("mip", self.mip), ("map", self.map), ("sp", self.sp)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(crate::Error::InvalidConfig(format!("loss.{name}_weight must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Pretraining objective settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PretrainObjective {
    pub weights: LossWeights,
    /// Score candidates with the raw bilinear form instead of its sigmoid.
    pub raw_bilinear: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermStats {
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub aap: Option<TermStats>,
    pub mip: Option<TermStats>,
    pub map: Option<TermStats>,
    pub sp: Option<TermStats>,
    pub total: f64,
}

/// `σ(xᵀ W y)`.
pub fn bilinear_logit<T: Scalar>(x: &[T], y: &[T], w: &ndarray::Array2<T>) -> T {
    let n = x.len();
    let mut acc = T::zero();
    for i in 0..n {
        for j in 0..n {
            acc = acc + x[i] * w[[i, j]] * y[j];
        }
    }
    sigmoid(acc)
}

/// `−[pos − ln Σ exp(c)]` over `c ∈ {pos} ∪ negs`, with max subtraction.
pub fn sampled_info_nce<T: Scalar>(pos: T, negs: &[T]) -> T {
    let max = negs.iter().fold(pos, |m, &v| m.max(v));
    let z = negs.iter().fold((pos - max).exp(), |acc, &v| acc + (v - max).exp());
    max + z.ln() - pos
}

/// A loss averaged over its terms, as it sits on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm {
    pub mean: Var,
    /// Column of per-term values, `count × 1`.
    pub terms: Var,
    pub count: usize,
}

/// `m × (1+K)` critic scores: row `g` compares anchor row `anchor_rows[g]`
/// against `candidates[g]` (positive first) looked up in `table`.
fn critic_scores<T: Scalar>(
    tape: &mut Tape<T>,
    anchors: Var,
    anchor_rows: Vec<usize>,
    table: Var,
    candidates: Vec<usize>,
    per_group: usize,
    critic: Var,
    raw: bool,
) -> Var {
    let groups = anchor_rows.len();
    let projected = tape.matmul(anchors, critic);
    let repeated = anchor_rows.iter().flat_map(|&r| std::iter::repeat_n(r, per_group)).collect();
    let left = tape.gather(projected, repeated);
    let right = tape.gather(table, candidates);
    let mut scores = tape.row_dot(left, right);
    if !raw {
        scores = tape.sigmoid(scores);
    }
    tape.reshape(scores, groups, per_group)
}

fn info_nce_mean<T: Scalar>(tape: &mut Tape<T>, scores: Var) -> LossTerm {
    let count = tape.shape(scores).0;
    let per_row = tape.info_nce(scores);
    LossTerm {
        mean: tape.mean(per_row),
        terms: per_row,
        count,
    }
}

fn attr_slots_loss<T: Scalar>(
    tape: &mut Tape<T>,
    anchors: Var,
    slots: &[AttrSlot],
    table: Var,
    critic: Var,
    raw: bool,
) -> Option<LossTerm> {
    let per_group = 1 + slots.first()?.negatives.len();
    let rows = slots.iter().map(|s| s.row).collect();
    let cands = slots
        .iter()
        .flat_map(|s| std::iter::once(s.positive).chain(s.negatives.iter().copied()))
        .collect();
    let scores = critic_scores(tape, anchors, rows, table, cands, per_group, critic, raw);
    Some(info_nce_mean(tape, scores))
}

/// Item ↔ attribute: raw item embeddings of non-masked positions against
/// their attributes. Items without attributes contribute nothing.
pub fn aap_loss<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, batch: &PretrainBatch, raw: bool) -> Option<LossTerm> {
    if batch.aap.is_empty() {
        return None;
    }
    let anchors = tape.gather(pv.get(ITEM_EMB), batch.aap_items.clone());
    attr_slots_loss(tape, anchors, &batch.aap, pv.get(ATTR_EMB), pv.get(CRITIC_AAP), raw)
}

/// Masked context ↔ masked item. `hidden` is the bidirectional encoding of
/// the masked view.
pub fn mip_loss<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, batch: &PretrainBatch, hidden: Var, raw: bool) -> Option<LossTerm> {
    let per_group = 1 + batch.mip.first()?.negatives.len();
    let rows = batch.mip.iter().map(|s| s.row).collect();
    let cands = batch
        .mip
        .iter()
        .flat_map(|s| std::iter::once(s.positive).chain(s.negatives.iter().copied()))
        .collect();
    let scores = critic_scores(tape, hidden, rows, pv.get(ITEM_EMB), cands, per_group, pv.get(CRITIC_MIP), raw);
    Some(info_nce_mean(tape, scores))
}

/// Masked context ↔ attributes of the masked item.
pub fn map_loss<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, batch: &PretrainBatch, hidden: Var, raw: bool) -> Option<LossTerm> {
    attr_slots_loss(tape, hidden, &batch.map, pv.get(ATTR_EMB), pv.get(CRITIC_MAP), raw)
}

/// Context ↔ segment. `context` holds one row per sequence with a segment
/// plan; `segments` holds `1 + K` rows per such sequence, positive first.
pub fn sp_loss<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, context: Var, segments: Var, raw: bool) -> Option<LossTerm> {
    let groups = tape.shape(context).0;
    if groups == 0 {
        return None;
    }
    let per_group = tape.shape(segments).0 / groups;
    let projected = tape.matmul(context, pv.get(CRITIC_SP));
    let repeated = (0..groups).flat_map(|g| std::iter::repeat_n(g, per_group)).collect();
    let left = tape.gather(projected, repeated);
    let mut scores = tape.row_dot(left, segments);
    if !raw {
        scores = tape.sigmoid(scores);
    }
    let scores = tape.reshape(scores, groups, per_group);
    Some(info_nce_mean(tape, scores))
}

/// Context and segment representations for SP: last-real-position states
/// of the segment-masked view, and of each segment encoded on its own
/// (bidirectional, positions from 0).
pub fn segment_representations<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    batch: &PretrainBatch,
    mut rng: Option<&mut TrainRng>,
) -> Result<Option<(Var, Var)>> {
    let rows = batch.sp_rows();
    if rows.is_empty() {
        return Ok(None);
    }
    let view = encode_on_tape(tape, pv, cfg, &batch.segment_view, Direction::Bidirectional, rng.as_deref_mut())?;
    let last = batch.segment_view.last_real_rows();
    let context = tape.gather(view, rows.iter().map(|&b| last[b]).collect());

    let mut segs: Vec<&[usize]> = Vec::new();
    for &b in &rows {
        let plan = batch.segment_plans[b].as_ref().expect("sp row has a plan");
        segs.push(&plan.segment_items);
        segs.extend(plan.negative_segments.iter().map(Vec::as_slice));
    }
    let seg_batch = SeqBatch::right_padded(&segs);
    let encoded = encode_on_tape(tape, pv, cfg, &seg_batch, Direction::Bidirectional, rng)?;
    let segments = tape.gather(encoded, seg_batch.last_real_rows());
    Ok(Some((context, segments)))
}

/// Which objective a [`LossTerm`] belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Aap,
    Mip,
    Map,
    Sp,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Aap => "aap",
            ObjectiveKind::Mip => "mip",
            ObjectiveKind::Map => "map",
            ObjectiveKind::Sp => "sp",
        }
    }
}

/// Every objective with positive weight that has at least one term in the
/// batch, unweighted.
pub fn pretrain_terms<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    batch: &PretrainBatch,
    objective: &PretrainObjective,
    mut rng: Option<&mut TrainRng>,
) -> Result<Vec<(ObjectiveKind, LossTerm)>> {
    let w = &objective.weights;
    let raw = objective.raw_bilinear;
    let mut out = Vec::new();
    if w.aap > 0.0 {
        if let Some(t) = aap_loss(tape, pv, batch, raw) {
            out.push((ObjectiveKind::Aap, t));
        }
    }
    if w.mip > 0.0 || w.map > 0.0 {
        let hidden = encode_on_tape(tape, pv, cfg, &batch.masked, Direction::Bidirectional, rng.as_deref_mut())?;
        if w.mip > 0.0 {
            if let Some(t) = mip_loss(tape, pv, batch, hidden, raw) {
                out.push((ObjectiveKind::Mip, t));
            }
        }
        if w.map > 0.0 {
            if let Some(t) = map_loss(tape, pv, batch, hidden, raw) {
                out.push((ObjectiveKind::Map, t));
            }
        }
    }
    if w.sp > 0.0 {
        if let Some((context, segments)) = segment_representations(tape, pv, cfg, batch, rng)? {
            if let Some(t) = sp_loss(tape, pv, context, segments, raw) {
                out.push((ObjectiveKind::Sp, t));
            }
        }
    }
    Ok(out)
}

/// Weighted sum of the four objectives. Objectives with weight 0 are not
/// computed at all.
pub fn pretrain_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    batch: &PretrainBatch,
    objective: &PretrainObjective,
    rng: Option<&mut TrainRng>,
) -> Result<(Var, LossReport)> {
    let w = &objective.weights;
    let mut parts: Vec<(LossTerm, f64)> = Vec::new();
    let mut report = LossReport::default();
    for (kind, t) in pretrain_terms(tape, pv, cfg, batch, objective, rng)? {
        let s = Some(stats(tape, t));
        let weight = match kind {
            ObjectiveKind::Aap => {
                report.aap = s;
                w.aap
            }
            ObjectiveKind::Mip => {
                report.mip = s;
                w.mip
            }
            ObjectiveKind::Map => {
                report.map = s;
                w.map
            }
            ObjectiveKind::Sp => {
                report.sp = s;
                w.sp
            }
        };
        parts.push((t, weight));
    }
    let total = weighted_sum(tape, &parts);
    report.total = tape.scalar(total).to_f64().unwrap_or(f64::NAN);
    Ok((total, report))
}

fn stats<T: Scalar>(tape: &Tape<T>, t: LossTerm) -> TermStats {
    TermStats {
        mean: tape.scalar(t.mean).to_f64().unwrap_or(f64::NAN),
        count: t.count,
    }
}

fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, parts: &[(LossTerm, f64)]) -> Var {
    let mut total: Option<Var> = None;
    for &(term, weight) in parts {
        let scaled = tape.scale(term.mean, T::of(weight));
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled),
            None => scaled,
        });
    }
    total.unwrap_or_else(|| tape.constant(ndarray::Array2::zeros((1, 1))))
}

/// Per-position `−ln σ(s⁺ − s⁻)` as a column, one row per supervised target.
pub fn finetune_terms<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, batch: &FinetuneBatch, hidden: Var) -> Var {
    let rows = batch.targets.iter().map(|t| t.0).collect();
    let pos = batch.targets.iter().map(|t| t.1).collect();
    let neg = batch.targets.iter().map(|t| t.2).collect();
    let states = tape.gather(hidden, rows);
    let pos_emb = tape.gather(pv.get(ITEM_EMB), pos);
    let neg_emb = tape.gather(pv.get(ITEM_EMB), neg);
    let pos_score = tape.row_dot(states, pos_emb);
    let neg_score = tape.row_dot(states, neg_emb);
    let diff = tape.sub(pos_score, neg_score);
    tape.softplus_neg(diff)
}

/// `Σ −ln σ(s⁺ − s⁻)` over supervised positions, divided by the number of
/// sequences. `hidden` is the causal encoding of `batch.input`.
pub fn finetune_loss<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, batch: &FinetuneBatch, hidden: Var) -> Var {
    let terms = finetune_terms(tape, pv, batch, hidden);
    let total = tape.sum(terms);
    tape.scale(total, T::one() / T::of(batch.input.batch.max(1) as f64))
}

/// Causal encoding followed by [`finetune_loss`].
pub fn finetune_objective<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    batch: &FinetuneBatch,
    rng: Option<&mut TrainRng>,
) -> Result<Var> {
    let hidden = encode_on_tape(tape, pv, cfg, &batch.input, Direction::Causal, rng)?;
    Ok(finetune_loss(tape, pv, batch, hidden))
}

/// Scalar `−ln σ(pos − neg)` for one pair.
pub fn pairwise_rank_term<T: Scalar>(pos: T, neg: T) -> T {
    neg_log_sigmoid(pos - neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AttributeTable;
    use crate::encoder::{encode_batch, Params};
    use crate::sampler::{build_finetune_batch, build_pretrain_batch, PretrainContext, SamplerConfig};
    use ndarray::Array2;
    use rand::SeedableRng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn cfg(d: usize) -> ModelConfig {
        ModelConfig {
            d,
            heads: 2,
            blocks: 2,
            max_len: 6,
            n_items: 12,
            n_attrs: 6,
            dropout: 0.0,
            d_ff: 2 * d,
            init_std: 0.5,
        }
    }

    fn attrs() -> AttributeTable {
        let mut t = AttributeTable::empty(12);
        for i in 1..=12 {
            if i % 4 != 0 {
                t.attrs[i] = vec![(i % 6) + 1, ((i + 2) % 6) + 1];
                t.attrs[i].sort();
            }
        }
        t
    }

    fn seqs() -> Vec<Vec<usize>> {
        vec![vec![1, 2, 3, 5, 6, 7], vec![4, 5, 9, 10, 11], vec![12, 1, 2, 6]]
    }

    fn batch(sampler: &SamplerConfig, seed: u64) -> PretrainBatch {
        let a = attrs();
        let ctx = PretrainContext {
            attributes: &a,
            n_items: 12,
            n_attrs: 6,
            max_len: 6,
            mask_token: 13,
        };
        build_pretrain_batch(&seqs(), &ctx, sampler, &mut TrainRng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn bilinear_examples() {
        let w = Array2::<f64>::eye(3);
        assert_eq!(bilinear_logit(&[0.0; 3], &[1.0, 2.0, 3.0], &w), 0.5);
        let e1 = [1.0, 0.0, 0.0];
        assert!((bilinear_logit(&e1, &e1, &w) - 0.7310585786300049).abs() < 1e-15);
        let w = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 * 0.1 - 0.4);
        let (x, y) = ([0.3, -1.0, 2.0], [1.5, 0.2, -0.7]);
        let wt = w.t().to_owned();
        assert!((bilinear_logit(&x, &y, &w) - bilinear_logit(&y, &x, &wt)).abs() < 1e-15);
    }

    #[test]
    fn info_nce_examples() {
        assert!((sampled_info_nce(0.7f64, &[0.7; 99]) - 4.605170185988091).abs() < 1e-12);
        assert!(sampled_info_nce(1e4, &[0.0, 1.0]) < 1e-12);
        let expected = -(0.3 - (0.3f64.exp() + 0.1f64.exp() + (-0.2f64).exp()).ln());
        assert!((sampled_info_nce(0.3, &[0.1, -0.2]) - expected).abs() < 1e-15);
        assert!(sampled_info_nce(2.0, &[0.1, -0.2]) < sampled_info_nce(1.0, &[0.1, -0.2]));
    }

    /// Scalar recomputation of one objective: mean over groups of
    /// sampled_info_nce of σ(anchor·W·candidate).
    fn scalar_objective(groups: &[(Vec<f64>, Vec<Vec<f64>>)], w: &Array2<f64>, raw: bool) -> f64 {
        let total: f64 = groups
            .iter()
            .map(|(anchor, cands)| {
                let score = |c: &Vec<f64>| {
                    let s = bilinear_logit(anchor, c, w);
                    if raw {
                        (s / (1.0 - s)).ln()
                    } else {
                        s
                    }
                };
                sampled_info_nce(score(&cands[0]), &cands[1..].iter().map(score).collect::<Vec<_>>())
            })
            .sum();
        total / groups.len() as f64
    }

    fn row(a: &Array2<f64>, r: usize) -> Vec<f64> {
        a.row(r).to_vec()
    }

    #[test]
    fn objectives_match_scalar_recomputation() {
        let c = cfg(4);
        let p: Params<f64> = Params::init(&c, &mut TrainRng::seed_from_u64(11));
        let sampler = SamplerConfig {
            n_neg_item: 2,
            n_neg_attr: 2,
            n_neg_seg: 2,
            ..Default::default()
        };
        let b = batch(&sampler, 3);
        let items = p.get(ITEM_EMB);
        let attrs = p.get(ATTR_EMB);
        let hidden = encode_batch(&p, &b.masked, Direction::Bidirectional).unwrap();

        for raw in [false, true] {
            let mut tape = Tape::new();
            let pv = p.register(&mut tape);
            let aap = aap_loss(&mut tape, &pv, &b, raw).unwrap();
            let groups: Vec<_> = b
                .aap
                .iter()
                .map(|s| {
                    let cands = std::iter::once(s.positive).chain(s.negatives.clone()).map(|a| row(attrs, a)).collect();
                    (row(items, b.aap_items[s.row]), cands)
                })
                .collect();
            let expect = scalar_objective(&groups, p.get(CRITIC_AAP), raw);
            assert!((tape.scalar(aap.mean) - expect).abs() < 1e-12);

            let h = encode_on_tape(&mut tape, &pv, &c, &b.masked, Direction::Bidirectional, None).unwrap();
            let mip = mip_loss(&mut tape, &pv, &b, h, raw).unwrap();
            let groups: Vec<_> = b
                .mip
                .iter()
                .map(|s| {
                    let cands = std::iter::once(s.positive).chain(s.negatives.clone()).map(|i| row(items, i)).collect();
                    (row(&hidden, s.row), cands)
                })
                .collect();
            assert!((tape.scalar(mip.mean) - scalar_objective(&groups, p.get(CRITIC_MIP), raw)).abs() < 1e-12);

            let map = map_loss(&mut tape, &pv, &b, h, raw).unwrap();
            let groups: Vec<_> = b
                .map
                .iter()
                .map(|s| {
                    let cands = std::iter::once(s.positive).chain(s.negatives.clone()).map(|a| row(attrs, a)).collect();
                    (row(&hidden, s.row), cands)
                })
                .collect();
            assert!((tape.scalar(map.mean) - scalar_objective(&groups, p.get(CRITIC_MAP), raw)).abs() < 1e-12);

            let (ctx, segs) = segment_representations(&mut tape, &pv, &c, &b, None).unwrap().unwrap();
            let sp = sp_loss(&mut tape, &pv, ctx, segs, raw).unwrap();
            let view = encode_batch(&p, &b.segment_view, Direction::Bidirectional).unwrap();
            let last = b.segment_view.last_real_rows();
            let groups: Vec<_> = b
                .sp_rows()
                .into_iter()
                .map(|r| {
                    let plan = b.segment_plans[r].as_ref().unwrap();
                    let cands = std::iter::once(&plan.segment_items)
                        .chain(&plan.negative_segments)
                        .map(|s| {
                            let valid = vec![true; s.len()];
                            let enc = crate::encoder::encode(s, &valid, Direction::Bidirectional, &p).unwrap();
                            row(&enc, s.len() - 1)
                        })
                        .collect();
                    (row(&view, last[r]), cands)
                })
                .collect();
            assert!((tape.scalar(sp.mean) - scalar_objective(&groups, p.get(CRITIC_SP), raw)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_parameters_give_uniform_losses() {
        let c = cfg(8);
        let p = Params::<f64>::zeros(&c);
        for k in [1usize, 3] {
            let sampler = SamplerConfig {
                n_neg_item: k,
                n_neg_attr: k,
                n_neg_seg: k,
                ..Default::default()
            };
            let b = batch(&sampler, k as u64);
            let mut tape = Tape::new();
            let pv = p.register(&mut tape);
            let (_, report) = pretrain_loss(&mut tape, &pv, &c, &b, &PretrainObjective::default(), None).unwrap();
            let uniform = (1.0 + k as f64).ln();
            for term in [report.aap, report.mip, report.map, report.sp] {
                assert!((term.unwrap().mean - uniform).abs() < 1e-12);
            }
        }
        let fb = build_finetune_batch(&seqs(), 12, 6, &mut TrainRng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let pv = p.register(&mut tape);
        let loss = finetune_objective(&mut tape, &pv, &c, &fb, None).unwrap();
        let terms = fb.targets.len() as f64;
        assert!((tape.scalar(loss) * 3.0 - terms * LN2).abs() < 1e-12);
    }

    #[test]
    fn duplicate_negative_gives_ln2() {
        let c = cfg(4);
        let mut p: Params<f64> = Params::init(&c, &mut TrainRng::seed_from_u64(2));
        let mut b = batch(&SamplerConfig::default(), 5);
        // make item 12 an exact copy of every MIP positive's row, use it as the negative
        let slot = b.mip[0].clone();
        b.mip.truncate(1);
        b.mip[0].negatives = vec![12];
        let src = p.tensors[ITEM_EMB].row(slot.positive).to_owned();
        p.tensors[ITEM_EMB].row_mut(12).assign(&src);
        let mut tape = Tape::new();
        let pv = p.register(&mut tape);
        let h = encode_on_tape(&mut tape, &pv, &c, &b.masked, Direction::Bidirectional, None).unwrap();
        let mip = mip_loss(&mut tape, &pv, &b, h, false).unwrap();
        assert!((tape.scalar(mip.mean) - LN2).abs() < 1e-15);

        // SP with the positive segment reused as the negative
        for plan in b.segment_plans.iter_mut().flatten() {
            plan.negative_segments = vec![plan.segment_items.clone()];
        }
        let (ctx, segs) = segment_representations(&mut tape, &pv, &c, &b, None).unwrap().unwrap();
        let sp = sp_loss(&mut tape, &pv, ctx, segs, false).unwrap();
        assert!((tape.scalar(sp.mean) - LN2).abs() < 1e-15);
    }

    #[test]
    fn zero_embeddings_aap_is_ln2() {
        let c = cfg(4);
        let mut p: Params<f64> = Params::init(&c, &mut TrainRng::seed_from_u64(2));
        p.tensors[ITEM_EMB].fill(0.0);
        p.tensors[ATTR_EMB].fill(0.0);
        let b = batch(&SamplerConfig::default(), 8);
        let mut tape = Tape::new();
        let pv = p.register(&mut tape);
        let aap = aap_loss(&mut tape, &pv, &b, false).unwrap();
        assert!((tape.scalar(aap.mean) - LN2).abs() < 1e-15);
    }

    #[test]
    fn empty_attribute_sets_contribute_nothing() {
        let c = cfg(4);
        let p: Params<f64> = Params::init(&c, &mut TrainRng::seed_from_u64(2));
        let empty = AttributeTable::empty(12);
        let ctx = PretrainContext {
            attributes: &empty,
            n_items: 12,
            n_attrs: 6,
            max_len: 6,
            mask_token: 13,
        };
        let b = build_pretrain_batch(&seqs(), &ctx, &SamplerConfig::default(), &mut TrainRng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let pv = p.register(&mut tape);
        let (_, report) = pretrain_loss(&mut tape, &pv, &c, &b, &PretrainObjective::default(), None).unwrap();
        assert!(report.aap.is_none() && report.map.is_none());
        assert!(report.mip.is_some() && report.total.is_finite());
    }

    #[test]
    fn weights_combine_linearly() {
        let c = cfg(4);
        let p: Params<f64> = Params::init(&c, &mut TrainRng::seed_from_u64(4));
        let b = batch(&SamplerConfig::default(), 2);
        let run = |weights: LossWeights| {
            let mut tape = Tape::new();
            let pv = p.register(&mut tape);
            let obj = PretrainObjective {
                weights,
                raw_bilinear: false,
            };
            let (total, report) = pretrain_loss(&mut tape, &pv, &c, &b, &obj, None).unwrap();
            let grads_zero = {
                let mut g = tape.backward(total);
                tape.param_grads(&mut g).iter().all(|(_, g)| g.iter().all(|&v| v == 0.0))
            };
            (report, grads_zero)
        };
        let (base, _) = run(LossWeights::default());
        let m = |t: Option<TermStats>| t.unwrap().mean;
        let expected = 0.2 * m(base.aap) + m(base.mip) + m(base.map) + 0.5 * m(base.sp);
        assert!((base.total - expected).abs() < 1e-12);

        let (doubled, _) = run(LossWeights {
            mip: 2.0,
            ..Default::default()
        });
        assert!((doubled.total - base.total - m(base.mip)).abs() < 1e-12);

        let (none, zero_grads) = run(LossWeights {
            aap: 0.0,
            mip: 0.0,
            map: 0.0,
            sp: 0.0,
        });
        assert_eq!(none.total, 0.0);
        assert!(zero_grads);
    }

    #[test]
    fn finetune_matches_scalar_recomputation() {
        let c = ModelConfig {
            blocks: 1,
            ..cfg(4)
        };
        let p: Params<f64> = Params::init(&c, &mut TrainRng::seed_from_u64(6));
        let fb = build_finetune_batch(&[vec![3, 7, 2]], 12, 6, &mut TrainRng::seed_from_u64(1)).unwrap();
        assert_eq!(fb.targets.len(), 2);
        let hidden = encode_batch(&p, &fb.input, Direction::Causal).unwrap();
        let items = p.get(ITEM_EMB);
        let expect: f64 = fb
            .targets
            .iter()
            .map(|&(r, pos, neg)| pairwise_rank_term(hidden.row(r).dot(&items.row(pos)), hidden.row(r).dot(&items.row(neg))))
            .sum();
        let mut tape = Tape::new();
        let pv = p.register(&mut tape);
        let loss = finetune_objective(&mut tape, &pv, &c, &fb, None).unwrap();
        assert!((tape.scalar(loss) - expect).abs() < 1e-12);
        assert!(pairwise_rank_term(1e3, 0.0) < 1e-12);
        assert!((pairwise_rank_term(0.4, 0.4) - LN2).abs() < 1e-15);
    }
}
