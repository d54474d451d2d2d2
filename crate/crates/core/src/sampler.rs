//! Batch construction for both training stages: Cloze masking, segment
//! selection and negative sampling of items, attributes and segments.

use std::collections::HashSet;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::AttributeTable;
use crate::encoder::SeqBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mask_ratio: f64,
    pub n_neg_item: usize,
    pub n_neg_attr: usize,
    pub n_neg_seg: usize,
    pub seg_max: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.2,
            n_neg_item: 1,
            n_neg_attr: 1,
            n_neg_seg: 1,
            seg_max: 8,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::InvalidConfig("sampler.mask_ratio must lie in (0, 1)".into()));
        }
        if self.n_neg_item == 0 || self.n_neg_attr == 0 || self.n_neg_seg == 0 {
            return Err(Error::InvalidConfig("negative counts must be at least 1".into()));
        }
        if self.seg_max < 2 {
            return Err(Error::InvalidConfig("sampler.seg_max must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    /// First and last (inclusive) masked position.
    pub start: usize,
    pub end: usize,
    pub segment_items: Vec<usize>,
    pub negative_segments: Vec<Vec<usize>>,
}

impl SegmentPlan {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn real_positions(validity: &[bool]) -> Vec<usize> {
    validity.iter().enumerate().filter(|(_, &v)| v).map(|(p, _)| p).collect()
}

/// Number of positions the Cloze task masks for a sequence of `real_len`.
pub fn mask_count(real_len: usize, ratio: f64) -> usize {
    ((ratio * real_len as f64).ceil() as usize).clamp(1, real_len.max(1))
}

/// Replaces `⌈ratio · real_len⌉` (at least one) distinct real positions with
/// `mask_token`.
pub fn mask_items<R: Rng + ?Sized>(
    seq: &[usize],
    validity: &[bool],
    mask_ratio: f64,
    mask_token: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, MaskPlan)> {
    let real = real_positions(validity);
    if real.is_empty() {
        return Err(Error::NoRealPositions);
    }
    let count = mask_count(real.len(), mask_ratio);
    let mut positions: Vec<usize> = index::sample(rng, real.len(), count).into_iter().map(|i| real[i]).collect();
    positions.sort_unstable();
    let targets = positions.iter().map(|&p| seq[p]).collect();
    let mut masked = seq.to_vec();
    for &p in &positions {
        masked[p] = mask_token;
    }
    Ok((masked, MaskPlan { positions, targets }))
}

/// Picks a contiguous segment of length uniform in
/// `[2, min(⌊real_len/2⌋, seg_max)]` at a uniform start inside the real
/// region. Negatives are filled in later.
pub fn select_segment<R: Rng + ?Sized>(seq: &[usize], validity: &[bool], seg_max: usize, rng: &mut R) -> Result<SegmentPlan> {
    let real = real_positions(validity);
    if real.len() < 4 {
        return Err(Error::SequenceTooShortForSegment(real.len()));
    }
    let max_len = (real.len() / 2).min(seg_max).max(2);
    let len = rng.random_range(2..=max_len);
    let offset = rng.random_range(0..=real.len() - len);
    let start = real[offset];
    let end = real[offset + len - 1];
    Ok(SegmentPlan {
        start,
        end,
        segment_items: seq[start..=end].to_vec(),
        negative_segments: Vec::new(),
    })
}

/// Uniform sample without replacement from `1..=n_ids` minus `exclude`.
fn sample_excluding<R: Rng + ?Sized>(n_ids: usize, exclude: &HashSet<usize>, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let excluded_in_range = exclude.iter().filter(|&&i| (1..=n_ids).contains(&i)).count();
    let available = n_ids - excluded_in_range;
    if available < count {
        return Err(Error::VocabExhausted {
            requested: count,
            available,
        });
    }
    if available < 4 * count || available * 2 < n_ids {
        let eligible: Vec<usize> = (1..=n_ids).filter(|i| !exclude.contains(i)).collect();
        return Ok(index::sample(rng, eligible.len(), count).into_iter().map(|k| eligible[k]).collect());
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let c = rng.random_range(1..=n_ids);
        if !exclude.contains(&c) && !out.contains(&c) {
            out.push(c);
        }
    }
    Ok(out)
}

/// Negative items drawn uniformly from `{1..=n_items} ∖ exclude`.
pub fn sample_negative_items<R: Rng + ?Sized>(n_items: usize, exclude: &HashSet<usize>, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    sample_excluding(n_items, exclude, count, rng)
}

/// Negative attributes drawn uniformly from the complement of `item_attrs`.
pub fn sample_negative_attributes<R: Rng + ?Sized>(n_attrs: usize, item_attrs: &[usize], count: usize, rng: &mut R) -> Result<Vec<usize>> {
    let exclude: HashSet<usize> = item_attrs.iter().copied().collect();
    sample_excluding(n_attrs, &exclude, count, rng)
}

/// A contiguous run of `length` items from a uniformly chosen pool sequence
/// long enough to supply one, at a uniform start.
pub fn sample_negative_segment<R: Rng + ?Sized, S: AsRef<[usize]>>(pool: &[S], length: usize, rng: &mut R) -> Result<Vec<usize>> {
    let eligible: Vec<&[usize]> = pool.iter().map(AsRef::as_ref).filter(|s| s.len() >= length).collect();
    let donor = eligible.choose(rng).ok_or(Error::NoEligibleDonor(length))?;
    let start = rng.random_range(0..=donor.len() - length);
    Ok(donor[start..start + length].to_vec())
}

/// One AAP or MAP training pair group: a row of the anchor (an item
/// embedding row or an encoder output row), its positive attribute and the
/// sampled negative attributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttrSlot {
    pub row: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// MIP target at one masked row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSlot {
    pub row: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainBatch {
    /// MIP/MAP view: masked ids over the (trimmed) left-padded layout.
    pub masked: SeqBatch,
    pub mask_plans: Vec<MaskPlan>,
    /// Item ids at non-masked real rows of the masked view, and their
    /// attribute slots (row indexes into `aap_items`).
    pub aap_items: Vec<usize>,
    pub aap: Vec<AttrSlot>,
    pub mip: Vec<ItemSlot>,
    pub map: Vec<AttrSlot>,
    /// SP view: segment replaced by mask tokens. Independent of `masked`.
    pub segment_view: SeqBatch,
    pub segment_plans: Vec<Option<SegmentPlan>>,
}

impl PretrainBatch {
    /// Sequences that carry a segment plan, in batch order.
    pub fn sp_rows(&self) -> Vec<usize> {
        self.segment_plans
            .iter()
            .enumerate()
            .filter_map(|(b, p)| p.as_ref().map(|_| b))
            .collect()
    }
}

/// Everything the pretraining sampler needs besides the sequences.
pub struct PretrainContext<'a> {
    pub attributes: &'a AttributeTable,
    pub n_items: usize,
    pub n_attrs: usize,
    pub max_len: usize,
    pub mask_token: usize,
}

/// Builds both masked views of every sequence plus all positive/negative
/// slots of the four pretraining objectives.
pub fn build_pretrain_batch<R: Rng + ?Sized, S: AsRef<[usize]>>(
    seqs: &[S],
    ctx: &PretrainContext<'_>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<PretrainBatch> {
    let base = SeqBatch::left_padded(seqs, ctx.max_len);
    let w = base.width;
    let mut masked = base.clone();
    let mut segment_view = base.clone();
    let mut mask_plans = Vec::with_capacity(seqs.len());
    let mut segment_plans = Vec::with_capacity(seqs.len());
    let (mut aap_items, mut aap, mut mip, mut map) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());

    for b in 0..base.batch {
        let rows = b * w..(b + 1) * w;
        let ids = &base.ids[rows.clone()];
        let valid = &base.validity[rows.clone()];

        let (masked_ids, plan) = mask_items(ids, valid, cfg.mask_ratio, ctx.mask_token, rng)?;
        masked.ids[rows.clone()].copy_from_slice(&masked_ids);

        for (p, &item) in ids.iter().enumerate() {
            if !valid[p] || plan.positions.contains(&p) {
                continue;
            }
            let attrs = ctx.attributes.of(item);
            if attrs.is_empty() {
                continue;
            }
            let anchor = aap_items.len();
            aap_items.push(item);
            for &a in attrs {
                aap.push(AttrSlot {
                    row: anchor,
                    positive: a,
                    negatives: sample_negative_attributes(ctx.n_attrs, attrs, cfg.n_neg_attr, rng)?,
                });
            }
        }

        for (&p, &target) in plan.positions.iter().zip(&plan.targets) {
            let row = b * w + p;
            let exclude = HashSet::from([target]);
            mip.push(ItemSlot {
                row,
                positive: target,
                negatives: sample_negative_items(ctx.n_items, &exclude, cfg.n_neg_item, rng)?,
            });
            let attrs = ctx.attributes.of(target);
            for &a in attrs {
                map.push(AttrSlot {
                    row,
                    positive: a,
                    negatives: sample_negative_attributes(ctx.n_attrs, attrs, cfg.n_neg_attr, rng)?,
                });
            }
        }
        mask_plans.push(plan);

        let seg = match select_segment(ids, valid, cfg.seg_max, rng) {
            Ok(mut seg) => {
                for p in seg.start..=seg.end {
                    segment_view.ids[b * w + p] = ctx.mask_token;
                }
                let peers: Vec<&[usize]> = (0..base.batch)
                    .filter(|&o| o != b)
                    .map(|o| seqs[o].as_ref())
                    .map(|s| &s[s.len().saturating_sub(ctx.max_len)..])
                    .collect();
                let neg: Result<Vec<_>> = (0..cfg.n_neg_seg)
                    .map(|_| sample_negative_segment(&peers, seg.len(), rng))
                    .collect();
                match neg {
                    Ok(neg) => {
                        seg.negative_segments = neg;
                        Some(seg)
                    }
                    // no peer long enough: this sequence sits out SP
                    Err(Error::NoEligibleDonor(_)) => {
                        segment_view.ids[rows.clone()].copy_from_slice(ids);
                        None
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(Error::SequenceTooShortForSegment(_)) => None,
            Err(e) => return Err(e),
        };
        segment_plans.push(seg);
    }

    Ok(PretrainBatch {
        masked,
        mask_plans,
        aap_items,
        aap,
        mip,
        map,
        segment_view,
        segment_plans,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneBatch {
    /// Causal input `i_1 … i_{n−1}`, left-padded and trimmed.
    pub input: SeqBatch,
    /// `(row, positive next item, negative item)` at every real row.
    pub targets: Vec<(usize, usize, usize)>,
}

/// Shifts each training sequence by one: the input is every item but the
/// last, the target at each position is the following item, paired with one
/// uniformly drawn negative different from it.
pub fn build_finetune_batch<R: Rng + ?Sized, S: AsRef<[usize]>>(
    train: &[S],
    n_items: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<FinetuneBatch> {
    let inputs: Vec<&[usize]> = train
        .iter()
        .map(|s| {
            let s = s.as_ref();
            &s[..s.len().saturating_sub(1)]
        })
        .collect();
    let input = SeqBatch::left_padded(&inputs, max_len);
    let w = input.width;
    let mut targets = Vec::new();
    for (b, s) in train.iter().enumerate() {
        let next = &s.as_ref()[1..];
        let next = &next[next.len().saturating_sub(max_len)..];
        let first = w - next.len();
        for (k, &pos) in next.iter().enumerate() {
            let row = b * w + first + k;
            debug_assert!(input.validity[row]);
            let neg = sample_negative_items(n_items, &HashSet::from([pos]), 1, rng)?[0];
            targets.push((row, pos, neg));
        }
    }
    Ok(FinetuneBatch { input, targets })
}
