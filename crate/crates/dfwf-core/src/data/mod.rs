//! Seeded synthetic genuine/spoof audio tasks and ASVspoof-style protocol
//! plumbing.
//!
//! Genuine utterances are harmonic stacks drawn from one fixed global
//! distribution, so the genuine class stays consistent across tasks. Spoof
//! types start from the same kind of base voice and apply one fixed
//! family-specific transform per type id: synthesis-like types inject
//! spectral artifacts (phase resets, inharmonicity, formant-band energy),
//! replay-like types push the signal through a playback channel (lowpass,
//! echo, level compression).

mod protocol;
mod synth;

pub use protocol::{
    dump_dataset, load_protocol_dataset, parse_protocol, serialize_protocol, ProtocolEntry,
};
pub use synth::{
    generate_genuine, generate_spoof, preset, replay_presets, synthesis_presets, SpoofFamily,
    SpoofTransform, SpoofTypeSpec, Utterance,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Train/dev/eval utterance lists of one task.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub eval: Vec<Utterance>,
}

/// One labeled task of a sequential experiment.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task_id: String,
    pub split: DatasetSplit,
}

/// Benchmark layout: tasks with an obvious cross-family gap, or a chain of
/// types within one family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    TwoTaskGap,
    FourTaskChain,
}

impl BenchmarkKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "two_task_gap" => Ok(BenchmarkKind::TwoTaskGap),
            "four_task_chain" => Ok(BenchmarkKind::FourTaskChain),
            other => Err(Error::InvalidConfig(format!("unknown benchmark {other:?}"))),
        }
    }
}

/// Per-task, per-split utterance counts (balanced between classes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSizes {
    pub train: usize,
    pub dev: usize,
    pub eval: usize,
}

impl Default for BenchmarkSizes {
    fn default() -> Self {
        BenchmarkSizes { train: 400, dev: 100, eval: 200 }
    }
}

impl BenchmarkSizes {
    pub fn validate(&self) -> Result<()> {
        if self.train < 2 || self.dev < 2 || self.eval < 2 {
            return Err(Error::InvalidConfig(
                "each split needs at least 2 utterances so both classes appear".into(),
            ));
        }
        Ok(())
    }
}

/// Build a seeded benchmark. Utterance ids are namespaced by task and split,
/// so all splits are pairwise disjoint.
pub fn build_benchmark(
    kind: BenchmarkKind,
    sizes: BenchmarkSizes,
    seed: u64,
) -> Result<Vec<TaskData>> {
    sizes.validate()?;
    let specs: Vec<SpoofTypeSpec> = match kind {
        BenchmarkKind::TwoTaskGap => {
            let s = synthesis_presets();
            let r = replay_presets();
            vec![s[0].clone(), r[0].clone()]
        }
        BenchmarkKind::FourTaskChain => synthesis_presets(),
    };

    let mut tasks = Vec::with_capacity(specs.len());
    for spec in &specs {
        let task_id = spec.type_id.clone();
        let mut splits = Vec::with_capacity(3);
        for split_name in ["train", "dev", "eval"] {
            let n = match split_name {
                "train" => sizes.train,
                "dev" => sizes.dev,
                _ => sizes.eval,
            };
            let n_genuine = n / 2;
            let n_spoof = n - n_genuine;
            let gseed = derive_seed(seed, &format!("{task_id}-{split_name}-genuine"), 0);
            let sseed = derive_seed(seed, &format!("{task_id}-{split_name}-spoof"), 0);
            let mut utts = generate_genuine(n_genuine, gseed);
            utts.extend(generate_spoof(spec, n_spoof, sseed));
            for u in utts.iter_mut() {
                u.utt_id = format!("{task_id}-{split_name}-{}", u.utt_id);
            }
            splits.push(utts);
        }
        let eval = splits.pop().unwrap();
        let dev = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        tasks.push(TaskData { task_id, split: DatasetSplit { train, dev, eval } });
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_task_counts() {
        let sizes = BenchmarkSizes { train: 4, dev: 2, eval: 2 };
        let two = build_benchmark(BenchmarkKind::TwoTaskGap, sizes, 1).unwrap();
        assert_eq!(two.len(), 2);
        let four = build_benchmark(BenchmarkKind::FourTaskChain, sizes, 1).unwrap();
        assert_eq!(four.len(), 4);
    }

    #[test]
    fn split_ids_are_pairwise_disjoint() {
        let sizes = BenchmarkSizes { train: 4, dev: 2, eval: 2 };
        let tasks = build_benchmark(BenchmarkKind::TwoTaskGap, sizes, 5).unwrap();
        let mut seen = std::collections::HashSet::new();
        for t in &tasks {
            for u in t.split.train.iter().chain(&t.split.dev).chain(&t.split.eval) {
                assert!(seen.insert(u.utt_id.clone()), "duplicate id {}", u.utt_id);
            }
        }
    }

    #[test]
    fn splits_are_class_balanced() {
        let sizes = BenchmarkSizes { train: 10, dev: 4, eval: 6 };
        let tasks = build_benchmark(BenchmarkKind::TwoTaskGap, sizes, 2).unwrap();
        for t in &tasks {
            for (split, n) in [(&t.split.train, 10), (&t.split.dev, 4), (&t.split.eval, 6)] {
                assert_eq!(split.len(), n);
                let genuine = split
                    .iter()
                    .filter(|u| u.label == crate::metrics::Label::Genuine)
                    .count();
                assert_eq!(genuine, n / 2);
            }
        }
    }

    #[test]
    fn rejects_undersized_splits() {
        let sizes = BenchmarkSizes { train: 1, dev: 2, eval: 2 };
        assert!(build_benchmark(BenchmarkKind::TwoTaskGap, sizes, 0).is_err());
    }
}
