//! Invariant checks run by `mimrec audit` and the acceptance suite.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::encoder::{encode, Direction, ModelConfig, Params, TrainRng};
use crate::objectives::{finetune_terms, pretrain_terms, PretrainObjective};
use crate::sampler::build_finetune_batch;
use crate::trainer::audit::{toy_pretrain_batch, toy_sequences};
use crate::trainer::toy_config;
use crate::Result;

/// Largest per-term deviation from the uniform-logit value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformReport {
    pub max_deviation: f64,
    pub n_terms: usize,
}

/// With every parameter at zero all logits coincide, so each contrastive
/// term must equal `ln(1 + K)` and each fine-tune term `ln 2`.
pub fn uniform_law(ks: &[usize], seed: u64) -> Result<UniformReport> {
    let cfg = toy_config();
    let params = Params::<f64>::zeros(&cfg);
    let mut rng = TrainRng::seed_from_u64(seed);
    let mut report = UniformReport {
        max_deviation: 0.0,
        n_terms: 0,
    };
    let mut record = |values: &ndarray::Array2<f64>, expected: f64| {
        for v in values.iter() {
            report.max_deviation = report.max_deviation.max((v - expected).abs());
            report.n_terms += 1;
        }
    };
    for &k in ks {
        let seqs = toy_sequences(&cfg, &mut rng);
        let batch = toy_pretrain_batch(&seqs, &cfg, k, &mut rng)?;
        for raw in [false, true] {
            let mut tape = Tape::new();
            let pv = params.register(&mut tape);
            let objective = PretrainObjective {
                raw_bilinear: raw,
                ..Default::default()
            };
            for (_, term) in pretrain_terms(&mut tape, &pv, &cfg, &batch, &objective, None)? {
                record(tape.value(term.terms), (1.0 + k as f64).ln());
            }
        }
    }
    let seqs = toy_sequences(&cfg, &mut rng);
    let fb = build_finetune_batch(&seqs, cfg.n_items, cfg.max_len, &mut rng)?;
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let hidden = crate::encoder::encode_on_tape(&mut tape, &pv, &cfg, &fb.input, Direction::Causal, None)?;
    let terms = finetune_terms(&mut tape, &pv, &fb, hidden);
    record(tape.value(terms), std::f64::consts::LN_2);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalityReport {
    pub trials: usize,
    /// Trials where a causal prefix state changed at all.
    pub causal_violations: usize,
    /// Trials where a bidirectional prefix state changed.
    pub bidirectional_changed: usize,
}

/// Perturbs a random suffix of a random sequence and compares encoder
/// states before the perturbation point, bit for bit, in f32.
pub fn causality(trials: usize, seed: u64) -> Result<CausalityReport> {
    let cfg = ModelConfig {
        max_len: 12,
        n_items: 30,
        ..toy_config()
    };
    let mut rng = TrainRng::seed_from_u64(seed);
    let mut report = CausalityReport {
        trials,
        causal_violations: 0,
        bidirectional_changed: 0,
    };
    for _ in 0..trials {
        let params = Params::<f32>::init_with_std(&cfg, 0.5, &mut rng);
        let n = cfg.max_len;
        let len = rng.random_range(2..=n);
        let mut ids = vec![0; n - len];
        ids.extend((0..len).map(|_| rng.random_range(1..=cfg.n_items)));
        let valid: Vec<bool> = ids.iter().map(|&i| i != 0).collect();
        let t = rng.random_range(n - len + 1..n);
        let mut other = ids.clone();
        for slot in &mut other[t..] {
            let old = *slot;
            while *slot == old {
                *slot = rng.random_range(1..=cfg.n_items);
            }
        }
        let a = encode(&ids, &valid, Direction::Causal, &params)?;
        let b = encode(&other, &valid, Direction::Causal, &params)?;
        if a.slice(ndarray::s![..t, ..]) != b.slice(ndarray::s![..t, ..]) {
            report.causal_violations += 1;
        }
        let c = encode(&ids, &valid, Direction::Bidirectional, &params)?;
        let d = encode(&other, &valid, Direction::Bidirectional, &params)?;
        if c.slice(ndarray::s![n - len..t, ..]) != d.slice(ndarray::s![n - len..t, ..]) {
            report.bidirectional_changed += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_terms() {
        let r = uniform_law(&[1, 2, 4], 0).unwrap();
        assert!(r.n_terms > 50);
        assert!(r.max_deviation < 1e-12, "{r:?}");
    }

    #[test]
    fn causal_prefix_is_exact() {
        let r = causality(20, 3).unwrap();
        assert_eq!(r.causal_violations, 0);
        assert_eq!(r.bidirectional_changed, 20);
    }
}
