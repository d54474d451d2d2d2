//! Synthetic interaction data with planted cluster-level sequential
//! structure and cluster-aligned item attributes.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::corpus::{Interaction, RawInteractions, Vocab};
use crate::encoder::TrainRng;
use crate::error::{Error, Result};
use crate::eval::Scorer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_attrs: usize,
    pub attrs_per_item: usize,
    pub n_clusters: usize,
    /// Only first-order chains are generated.
    pub markov_order: usize,
    /// Log-odds of the planted successor cluster over any other cluster;
    /// infinity makes the chain deterministic.
    pub transition_concentration: f64,
    /// Probability that each attribute of an item is replaced by a random one.
    pub attr_noise: f64,
    /// Inclusive range of sequence lengths.
    pub seq_len_range: (usize, usize),
    /// Zipf exponent of item popularity inside a cluster.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 500,
            n_attrs: 50,
            attrs_per_item: 4,
            n_clusters: 10,
            markov_order: 1,
            transition_concentration: 3.0,
            attr_noise: 0.1,
            seq_len_range: (8, 20),
            popularity_skew: 0.8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(format!("synth: {m}")));
        if self.n_users < 2 || self.n_items < 2 || self.n_attrs < 2 || self.n_clusters < 2 {
            return fail("all sizes must be at least 2");
        }
        if self.n_clusters > self.n_items {
            return fail("more clusters than items");
        }
        if self.attrs_per_item == 0 || self.attrs_per_item > self.n_attrs {
            return fail("attrs_per_item must lie in [1, n_attrs]");
        }
        if self.markov_order != 1 {
            return fail("only markov_order = 1 is supported");
        }
        if self.transition_concentration.is_nan() || self.transition_concentration <= 0.0 {
            return fail("transition_concentration must be > 0");
        }
        if !(0.0..=1.0).contains(&self.attr_noise) {
            return fail("attr_noise must lie in [0, 1]");
        }
        let (lo, hi) = self.seq_len_range;
        if lo < 5 || hi < lo {
            return fail("sequence lengths must be at least 5");
        }
        Ok(())
    }
}

pub fn item_name(i: usize) -> String {
    format!("i{i:04}")
}

pub fn attr_name(a: usize) -> String {
    format!("a{a:03}")
}

fn user_name(u: usize) -> String {
    format!("u{u:05}")
}

/// The generated data plus the planted structure behind it. Item and
/// cluster numbers here are 0-based generator ids.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub spec: SynthSpec,
    pub cluster_of: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    /// Popularity of each item inside its cluster (sums to 1 per cluster).
    pub within: Vec<f64>,
    /// Row-stochastic cluster transition matrix.
    pub transitions: Vec<Vec<f64>>,
    pub successor: Vec<usize>,
    pub interactions: RawInteractions,
    pub attributes: Vec<(String, Vec<String>)>,
}

/// Attribute ids (0-based) of cluster `c`'s block.
pub fn cluster_block(spec: &SynthSpec, c: usize) -> Vec<usize> {
    (0..spec.attrs_per_item).map(|k| (c * spec.attrs_per_item + k) % spec.n_attrs).collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthWorld> {
    spec.validate()?;
    let mut rng = TrainRng::seed_from_u64(spec.seed);
    let k = spec.n_clusters;

    let mut items: Vec<usize> = (0..spec.n_items).collect();
    items.shuffle(&mut rng);
    let mut cluster_of = vec![0; spec.n_items];
    let mut members = vec![Vec::new(); k];
    for (pos, &i) in items.iter().enumerate() {
        cluster_of[i] = pos % k;
        members[pos % k].push(i);
    }
    let mut within = vec![0.0; spec.n_items];
    for m in &members {
        let w: Vec<f64> = (1..=m.len()).map(|r| (r as f64).powf(-spec.popularity_skew)).collect();
        let z: f64 = w.iter().sum();
        for (&i, w) in m.iter().zip(w) {
            within[i] = w / z;
        }
    }

    let mut successor: Vec<usize> = (0..k).collect();
    successor.shuffle(&mut rng);
    let transitions: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            if spec.transition_concentration.is_infinite() {
                return (0..k).map(|j| if j == successor[c] { 1.0 } else { 0.0 }).collect();
            }
            let peak = spec.transition_concentration.exp();
            let z = peak + (k - 1) as f64;
            (0..k).map(|j| if j == successor[c] { peak / z } else { 1.0 / z }).collect()
        })
        .collect();

    let item_pick: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new(m.iter().map(|&i| within[i])).expect("positive weights"))
        .collect();
    let cluster_pick: Vec<WeightedIndex<f64>> = transitions
        .iter()
        .map(|row| WeightedIndex::new(row.iter().copied()).expect("positive weights"))
        .collect();

    let mut records = Vec::new();
    for u in 0..spec.n_users {
        let len = rng.random_range(spec.seq_len_range.0..=spec.seq_len_range.1);
        let mut c = rng.random_range(0..k);
        for t in 0..len {
            if t > 0 {
                c = cluster_pick[c].sample(&mut rng);
            }
            let item = members[c][item_pick[c].sample(&mut rng)];
            records.push(Interaction {
                user: user_name(u),
                item: item_name(item),
                ts: 1_600_000_000 + (u * 1000 + t) as i64,
            });
        }
    }

    let mut attributes = Vec::with_capacity(spec.n_items);
    for i in 0..spec.n_items {
        let mut attrs = cluster_block(spec, cluster_of[i]);
        for slot in 0..attrs.len() {
            if rng.random_bool(spec.attr_noise) {
                loop {
                    let a = rng.random_range(0..spec.n_attrs);
                    if !attrs.contains(&a) {
                        attrs[slot] = a;
                        break;
                    }
                }
            }
        }
        attrs.sort_unstable();
        attributes.push((item_name(i), attrs.into_iter().map(attr_name).collect()));
    }

    Ok(SynthWorld {
        spec: spec.clone(),
        cluster_of,
        members,
        within,
        transitions,
        successor,
        interactions: RawInteractions { records },
        attributes,
    })
}

impl SynthWorld {
    /// Writes `interactions.tsv` and `attributes.jsonl`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("interactions.tsv"))?);
        for r in &self.interactions.records {
            writeln!(w, "{}\t{}\t{}", r.user, r.item, r.ts)?;
        }
        w.flush()?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("attributes.jsonl"))?);
        for (item, attrs) in &self.attributes {
            serde_json::to_writer(&mut w, &serde_json::json!({ "item": item, "attrs": attrs }))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Probability of `next` following `prev` under the planted chain.
    pub fn bigram(&self, prev: usize, next: usize) -> f64 {
        self.transitions[self.cluster_of[prev]][self.cluster_of[next]] * self.within[next]
    }

    /// Scorer using the true chain, keyed by vocabulary indices.
    pub fn oracle_scorer<'a>(&'a self, vocab: &Vocab) -> PlantedOracle<'a> {
        let to_gen = (0..=vocab.n_items())
            .map(|idx| {
                if idx == 0 {
                    return None;
                }
                vocab.items[idx - 1].strip_prefix('i').and_then(|s| s.parse().ok())
            })
            .collect();
        PlantedOracle { world: self, to_gen }
    }
}

/// Scores candidates by the planted bigram probability from the last
/// context item.
pub struct PlantedOracle<'a> {
    world: &'a SynthWorld,
    to_gen: Vec<Option<usize>>,
}

impl Scorer for PlantedOracle<'_> {
    fn score(&self, contexts: &[&[usize]], candidates: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        Ok(contexts
            .iter()
            .zip(candidates)
            .map(|(ctx, cands)| {
                let prev = ctx.last().and_then(|&i| self.to_gen[i]);
                cands
                    .iter()
                    .map(|&c| match (prev, self.to_gen[c]) {
                        (Some(p), Some(n)) => self.world.bigram(p, n),
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_attributes, load_interactions, Dataset, InteractionFormat};
    use crate::eval::{evaluate, EvalProtocol, PopularityScorer};

    #[test]
    fn noiseless_attributes_are_cluster_blocks() {
        let spec = SynthSpec {
            attr_noise: 0.0,
            n_users: 50,
            ..Default::default()
        };
        let w = generate(&spec).unwrap();
        for (i, (_, attrs)) in w.attributes.iter().enumerate() {
            let mut block: Vec<String> = cluster_block(&spec, w.cluster_of[i]).into_iter().map(attr_name).collect();
            block.sort();
            assert_eq!(attrs, &block);
        }
    }

    #[test]
    fn infinite_concentration_cycles() {
        let spec = SynthSpec {
            transition_concentration: f64::INFINITY,
            n_users: 30,
            ..Default::default()
        };
        let w = generate(&spec).unwrap();
        let seqs = crate::corpus::build_sequences(&w.interactions, &Vocab::from_interactions(&w.interactions)).unwrap();
        let vocab = Vocab::from_interactions(&w.interactions);
        for s in seqs {
            let clusters: Vec<usize> = s
                .items
                .iter()
                .map(|&i| w.cluster_of[vocab.items[i - 1][1..].parse::<usize>().unwrap()])
                .collect();
            for pair in clusters.windows(2) {
                assert_eq!(pair[1], w.successor[pair[0]]);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = SynthSpec {
            n_users: 40,
            ..Default::default()
        };
        let (a, b) = (generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_eq!(a.interactions, b.interactions);
        assert_eq!(a.attributes, b.attributes);
    }

    #[test]
    fn default_round_trips_without_core_loss() {
        let spec = SynthSpec::default();
        let w = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.write(dir.path()).unwrap();
        let raw = load_interactions(dir.path().join("interactions.tsv"), InteractionFormat::Tsv).unwrap();
        assert_eq!(raw, w.interactions);
        let ds = Dataset::preprocess(&raw, Some(&w.attributes), 5).unwrap();
        assert_eq!(ds.stats().actions, raw.len());
        assert_eq!(ds.stats().users, spec.n_users);
        assert_eq!(ds.n_items(), spec.n_items);
        let mut vocab = ds.vocab.clone();
        let attrs = load_attributes(dir.path().join("attributes.jsonl"), &mut vocab).unwrap();
        assert_eq!(attrs, ds.attributes);

        let proto = EvalProtocol::default();
        let oracle = evaluate(&w.oracle_scorer(&ds.vocab), &ds.split, ds.n_items(), &proto).unwrap();
        let pop = evaluate(&PopularityScorer::fit(&ds.split, ds.n_items()), &ds.split, ds.n_items(), &proto).unwrap();
        assert!(oracle.hr_at(10) > pop.hr_at(10) + 0.1, "{oracle:?} vs {pop:?}");
    }
}
