//! Leave-one-out ranking evaluation: each user's held-out item is ranked
//! among sampled (or all) non-interacted items.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::corpus::DatasetSplit;
use crate::encoder::{encode_batch, Direction, Params, SeqBatch, TrainRng};
use crate::error::{Error, Result};
use crate::sampler::sample_negative_items;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTarget {
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateScope {
    Sampled,
    Full,
}

impl FromStr for CandidateScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(Self::Sampled),
            "full" => Ok(Self::Full),
            other => Err(Error::InvalidConfig(format!("unknown candidate scope `{other}`"))),
        }
    }
}

impl FromStr for EvalTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            other => Err(Error::InvalidConfig(format!("unknown eval target `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub n_negatives: usize,
    pub k_values: Vec<usize>,
    pub seed: u64,
    pub target: EvalTarget,
    pub scope: CandidateScope,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            n_negatives: 99,
            k_values: vec![1, 5, 10],
            seed: 42,
            target: EvalTarget::Test,
            scope: CandidateScope::Sampled,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_negatives == 0 {
            return Err(Error::InvalidConfig("eval.n_negatives must be >= 1".into()));
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(Error::InvalidConfig("eval.k_values must be non-empty and positive".into()));
        }
        if self.scope == CandidateScope::Sampled && self.k_values.iter().any(|&k| k > self.n_negatives + 1) {
            return Err(Error::InvalidConfig("eval.k_values may not exceed n_negatives + 1".into()));
        }
        Ok(())
    }

    pub fn with_target(&self, target: EvalTarget) -> Self {
        Self {
            target,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub n_users: usize,
}

impl EvalResult {
    /// Averages per-user metrics computed from 1-based ranks.
    pub fn from_ranks(ranks: &[usize], k_values: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n;
        Self {
            hr: k_values.iter().map(|&k| (k, mean(&|r| hr_at_k(r, k)))).collect(),
            ndcg: k_values.iter().map(|&k| (k, mean(&|r| ndcg_at_k(r, k)))).collect(),
            mrr: mean(&|r| mrr(r)),
            n_users: ranks.len(),
        }
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// Ground truth plus `n_negatives` distinct items outside `history` and the
/// ground truth, shuffled. Returns the candidates and the ground truth's
/// position among them.
pub fn sample_candidates<R: rand::Rng + ?Sized>(
    history: &HashSet<usize>,
    ground_truth: usize,
    n_items: usize,
    n_negatives: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, usize)> {
    let mut exclude = history.clone();
    exclude.insert(ground_truth);
    let mut cands = sample_negative_items(n_items, &exclude, n_negatives, rng)?;
    cands.push(ground_truth);
    cands.shuffle(rng);
    let gt = cands.iter().position(|&c| c == ground_truth).expect("ground truth present");
    Ok((cands, gt))
}

/// Ground truth followed by every item outside `history`, in id order.
pub fn full_candidates(history: &HashSet<usize>, ground_truth: usize, n_items: usize) -> (Vec<usize>, usize) {
    let mut cands = vec![ground_truth];
    cands.extend((1..=n_items).filter(|i| *i != ground_truth && !history.contains(i)));
    (cands, 0)
}

/// 1-based rank with pessimistic ties: every other candidate scoring at
/// least as high as the ground truth counts against it.
pub fn rank_ground_truth<T: PartialOrd + Copy>(scores: &[T], gt_position: usize) -> usize {
    let gt = scores[gt_position];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != gt_position && s >= gt)
        .count()
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn mrr(rank: usize) -> f64 {
    1.0 / rank as f64
}

/// Anything that can score candidate items given a user's context.
pub trait Scorer {
    /// One score vector per context, aligned with `candidates`.
    fn score(&self, contexts: &[&[usize]], candidates: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Next-item scores of a causal encoder: the last real state dotted with
/// each candidate's item embedding.
pub struct ModelScorer<'a, T> {
    pub params: &'a Params<T>,
    pub batch_size: usize,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(params: &'a Params<T>) -> Self {
        Self { params, batch_size: 256 }
    }
}

impl<T: Scalar> Scorer for ModelScorer<'_, T> {
    fn score(&self, contexts: &[&[usize]], candidates: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let items = self.params.item_embedding();
        let mut out = Vec::with_capacity(contexts.len());
        for (ctx, cands) in contexts.chunks(self.batch_size).zip(candidates.chunks(self.batch_size)) {
            let batch = SeqBatch::left_padded(ctx, self.params.config.max_len);
            let hidden = encode_batch(self.params, &batch, Direction::Causal)?;
            for (row, cands) in batch.last_real_rows().into_iter().zip(cands) {
                let state = hidden.row(row);
                let scores = cands
                    .iter()
                    .map(|&c| {
                        if c >= items.nrows() {
                            return Err(Error::IndexOutOfRange { index: c, rows: items.nrows() });
                        }
                        Ok(state.dot(&items.row(c)).to_f64().unwrap_or(f64::NAN))
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push(scores);
            }
        }
        Ok(out)
    }
}

/// Candidate RNG for one user: fixed per (seed, target, user).
fn candidate_rng(seed: u64, target: EvalTarget, user: usize) -> TrainRng {
    let mut rng = TrainRng::seed_from_u64(seed ^ if target == EvalTarget::Test { 0x7e57 } else { 0x7a11d });
    rng.set_stream(user as u64);
    rng
}

/// Per-user 1-based ranks of the held-out item.
pub fn evaluate_ranks(scorer: &dyn Scorer, split: &DatasetSplit, n_items: usize, protocol: &EvalProtocol) -> Result<Vec<usize>> {
    protocol.validate()?;
    let mut contexts = Vec::with_capacity(split.len());
    let mut cands = Vec::with_capacity(split.len());
    let mut gts = Vec::with_capacity(split.len());
    for row in 0..split.len() {
        let full = split.full(row);
        let history: HashSet<usize> = full.iter().copied().collect();
        let (ctx_len, gt) = match protocol.target {
            EvalTarget::Valid => (full.len() - 2, split.valid_target[row]),
            EvalTarget::Test => (full.len() - 1, split.test_target[row]),
        };
        let (c, pos) = match protocol.scope {
            CandidateScope::Sampled => {
                let mut rng = candidate_rng(protocol.seed, protocol.target, split.users[row]);
                sample_candidates(&history, gt, n_items, protocol.n_negatives, &mut rng)?
            }
            CandidateScope::Full => full_candidates(&history, gt, n_items),
        };
        contexts.push(full[..ctx_len].to_vec());
        cands.push(c);
        gts.push(pos);
    }
    let ctx_refs: Vec<&[usize]> = contexts.iter().map(Vec::as_slice).collect();
    let scores = scorer.score(&ctx_refs, &cands)?;
    Ok(scores.iter().zip(gts).map(|(s, g)| rank_ground_truth(s, g)).collect())
}

pub fn evaluate(scorer: &dyn Scorer, split: &DatasetSplit, n_items: usize, protocol: &EvalProtocol) -> Result<EvalResult> {
    let ranks = evaluate_ranks(scorer, split, n_items, protocol)?;
    Ok(EvalResult::from_ranks(&ranks, &protocol.k_values))
}

/// Evaluates a causal model on `split`.
pub fn evaluate_model<T: Scalar>(params: &Params<T>, split: &DatasetSplit, protocol: &EvalProtocol) -> Result<EvalResult> {
    evaluate(&ModelScorer::new(params), split, params.config.n_items, protocol)
}

/// Scores items by training-split frequency, ignoring the context.
pub struct PopularityScorer {
    pub counts: Vec<f64>,
}

impl PopularityScorer {
    pub fn fit(split: &DatasetSplit, n_items: usize) -> Self {
        let mut counts = vec![0.0; n_items + 1];
        for seq in &split.train {
            for &i in seq {
                counts[i] += 1.0;
            }
        }
        Self { counts }
    }
}

impl Scorer for PopularityScorer {
    fn score(&self, contexts: &[&[usize]], candidates: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        Ok(contexts
            .iter()
            .zip(candidates)
            .map(|(_, c)| c.iter().map(|&i| self.counts.get(i).copied().unwrap_or(0.0)).collect())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub label: String,
    pub protocol: ReportProtocol,
    pub metrics: ReportMetrics,
    pub n_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportProtocol {
    pub n_negatives: usize,
    pub k_values: Vec<usize>,
    pub seed: u64,
    pub scope: CandidateScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
}

impl ReportEntry {
    pub fn new(label: &str, protocol: &EvalProtocol, result: &EvalResult) -> Self {
        Self {
            label: label.to_string(),
            protocol: ReportProtocol {
                n_negatives: protocol.n_negatives,
                k_values: protocol.k_values.clone(),
                seed: protocol.seed,
                scope: protocol.scope,
            },
            metrics: ReportMetrics {
                hr: result.hr.clone(),
                ndcg: result.ndcg.clone(),
                mrr: result.mrr,
            },
            n_users: result.n_users,
        }
    }
}

/// Plain-text table, one row per entry.
pub fn render_table(entries: &[ReportEntry]) -> String {
    let ks: Vec<usize> = entries.first().map(|e| e.protocol.k_values.clone()).unwrap_or_default();
    let width = entries.iter().map(|e| e.label.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}", "label");
    for k in &ks {
        write!(out, "  {:>7}", format!("HR@{k}")).unwrap();
    }
    for k in &ks {
        write!(out, "  {:>7}", format!("NDCG@{k}")).unwrap();
    }
    out.push_str("      MRR   users\n");
    for e in entries {
        write!(out, "{:<width$}", e.label).unwrap();
        for k in &ks {
            write!(out, "  {:>7.4}", e.metrics.hr.get(k).copied().unwrap_or(f64::NAN)).unwrap();
        }
        for k in &ks {
            write!(out, "  {:>7.4}", e.metrics.ndcg.get(k).copied().unwrap_or(f64::NAN)).unwrap();
        }
        writeln!(out, "  {:>7.4}  {:>6}", e.metrics.mrr, e.n_users).unwrap();
    }
    out
}

/// Writes `report.json` (array of entries) and `report.txt`.
pub fn emit_report(entries: &[ReportEntry], out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(entries)?)?;
    std::fs::write(dir.join("report.txt"), render_table(entries))?;
    Ok(())
}

pub fn load_report(dir: impl AsRef<Path>) -> Result<Vec<ReportEntry>> {
    let text = std::fs::read_to_string(dir.as_ref().join("report.json"))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_ground_truth(&[0.1, 0.9, 0.3], 1), 1);
        assert_eq!(rank_ground_truth(&[0.5; 100], 17), 100);
        assert_eq!(rank_ground_truth(&[0.9, 0.5, 0.7, 0.1], 1), 3);
    }

    #[test]
    fn metric_examples() {
        assert_eq!((hr_at_k(1, 1), ndcg_at_k(1, 5), mrr(1)), (1.0, 1.0, 1.0));
        assert_eq!(ndcg_at_k(3, 5), 0.5);
        assert_eq!((hr_at_k(11, 10), ndcg_at_k(11, 10)), (0.0, 0.0));
        assert_eq!(mrr(11), 1.0 / 11.0);
    }

    #[test]
    fn candidates_examples() {
        let hist: HashSet<usize> = (1..=200).filter(|i| *i != 7).collect();
        let mut rng = TrainRng::seed_from_u64(0);
        let (c, g) = sample_candidates(&HashSet::new(), 3, 500, 99, &mut rng).unwrap();
        assert_eq!(c.len(), 100);
        assert_eq!(c[g], 3);
        let distinct: HashSet<_> = c.iter().collect();
        assert_eq!(distinct.len(), 100);

        let hist_forced: HashSet<usize> = (1..=10).filter(|&i| i != 4 && i != 9).collect();
        let (mut c, _) = sample_candidates(&hist_forced, 4, 10, 1, &mut rng).unwrap();
        c.sort();
        assert_eq!(c, [4, 9]);

        assert!(matches!(
            sample_candidates(&hist, 7, 200, 1, &mut rng),
            Err(Error::VocabExhausted { .. })
        ));
        for seed in 0..50 {
            let mut rng = TrainRng::seed_from_u64(seed);
            let hist: HashSet<usize> = (1..=300).step_by(2).collect();
            let (c, g) = sample_candidates(&hist, 1, 300, 99, &mut rng).unwrap();
            assert!(c.iter().enumerate().all(|(i, x)| i == g || !hist.contains(x)));
        }
    }

    #[test]
    fn full_scope_excludes_history() {
        let hist: HashSet<usize> = [1, 2, 5].into();
        let (c, g) = full_candidates(&hist, 5, 6);
        assert_eq!((c, g), (vec![5, 3, 4, 6], 0));
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&[], dir.path()).unwrap();
        assert!(load_report(dir.path()).unwrap().is_empty());
        let p = EvalProtocol::default();
        let r = EvalResult::from_ranks(&[1, 3, 20], &p.k_values);
        let entries = vec![ReportEntry::new("full", &p, &r)];
        emit_report(&entries, dir.path()).unwrap();
        assert_eq!(load_report(dir.path()).unwrap(), entries);
        let table = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert_eq!(table.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert!(v[0]["protocol"]["scope"] == "sampled" && v[0]["metrics"]["ndcg"]["5"].is_number());
    }

    proptest! {
        #[test]
        fn metric_bounds(ranks in proptest::collection::vec(1usize..=100, 1..50)) {
            let r = EvalResult::from_ranks(&ranks, &[1, 5, 10]);
            let mut prev = 0.0;
            for k in [1, 5, 10] {
                prop_assert!(0.0 <= r.ndcg[&k] && r.ndcg[&k] <= r.hr[&k] + 1e-15 && r.hr[&k] <= 1.0);
                prop_assert!(r.hr[&k] >= prev);
                prev = r.hr[&k];
            }
            prop_assert!(r.hr[&1] <= r.mrr + 1e-15 && r.mrr >= 0.01 - 1e-15 && r.mrr <= 1.0);
        }

        #[test]
        fn shift_invariance(scores in proptest::collection::vec(-5.0f64..5.0, 2..30), shift in -100.0f64..100.0, gt in 0usize..30) {
            let gt = gt % scores.len();
            // integer-valued scores keep the shift exact
            let scores: Vec<f64> = scores.iter().map(|s| s.round()).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift.round()).collect();
            prop_assert_eq!(rank_ground_truth(&scores, gt), rank_ground_truth(&shifted, gt));
        }
    }
}
