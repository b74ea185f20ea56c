//! Single-task training and multi-step sequential experiments.
//!
//! Step 1 of a sequence always trains a fresh base model with plain
//! cross-entropy. Later steps depend on the strategy: fine-tuning continues
//! from the previous weights; the distillation strategies additionally freeze
//! the previous model as a teacher; multi-condition retrains from scratch on
//! the union of all training sets seen so far. After every step the model is
//! evaluated on the eval sets of all tasks seen so far, filling one row of
//! the EER matrix.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointMeta;
use crate::error::{Error, Result};
use crate::frontend::{extract_features, FeatureMatrix, LfccConfig};
use crate::losses::{total_loss, DistillationConfig, LossBreakdown, LossWeights};
use crate::metrics::{compute_eer, avg_eer, EvalReport, Label, ScoreRecord};
use crate::model::{batch_tensor, Classifier, LcnnConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::seed::derive_seed;
use crate::tensor::{Graph, Tensor};

const SCORING_BATCH: usize = 64;

/// Sequential-training strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    FineTune,
    MultiCondition,
    Dfwf,
    LwfOnly,
    PsaOnly,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::FineTune => "fine_tune",
            StrategyKind::MultiCondition => "multi_condition",
            StrategyKind::Dfwf => "dfwf",
            StrategyKind::LwfOnly => "lwf_only",
            StrategyKind::PsaOnly => "psa_only",
        }
    }

    /// Whether later steps distill from the previous-step model.
    pub fn uses_teacher(&self) -> bool {
        matches!(self, StrategyKind::Dfwf | StrategyKind::LwfOnly | StrategyKind::PsaOnly)
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fine_tune" => Ok(StrategyKind::FineTune),
            "multi_condition" => Ok(StrategyKind::MultiCondition),
            "dfwf" => Ok(StrategyKind::Dfwf),
            "lwf_only" => Ok(StrategyKind::LwfOnly),
            "psa_only" => Ok(StrategyKind::PsaOnly),
            other => Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingStrategy {
    pub kind: StrategyKind,
    pub weights: LossWeights,
    pub distill: DistillationConfig,
}

impl TrainingStrategy {
    pub fn fine_tune() -> Self {
        TrainingStrategy {
            kind: StrategyKind::FineTune,
            weights: LossWeights { alpha: 0.0, beta: 0.0 },
            distill: DistillationConfig::default(),
        }
    }

    pub fn multi_condition() -> Self {
        TrainingStrategy {
            kind: StrategyKind::MultiCondition,
            weights: LossWeights { alpha: 0.0, beta: 0.0 },
            distill: DistillationConfig::default(),
        }
    }

    pub fn dfwf(weights: LossWeights, distill: DistillationConfig) -> Self {
        TrainingStrategy { kind: StrategyKind::Dfwf, weights, distill }
    }

    pub fn lwf_only(alpha: f64, distill: DistillationConfig) -> Self {
        TrainingStrategy {
            kind: StrategyKind::LwfOnly,
            weights: LossWeights { alpha, beta: 0.0 },
            distill,
        }
    }

    pub fn psa_only(beta: f64, distill: DistillationConfig) -> Self {
        TrainingStrategy {
            kind: StrategyKind::PsaOnly,
            weights: LossWeights { alpha: 0.0, beta },
            distill,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.distill.validate()?;
        let bad = match self.kind {
            StrategyKind::FineTune | StrategyKind::MultiCondition => {
                self.weights.alpha != 0.0 || self.weights.beta != 0.0
            }
            StrategyKind::LwfOnly => self.weights.beta != 0.0,
            StrategyKind::PsaOnly => self.weights.alpha != 0.0,
            StrategyKind::Dfwf => false,
        };
        if bad {
            return Err(Error::InvalidConfig(format!(
                "strategy {} does not admit alpha={} beta={}",
                self.kind.name(),
                self.weights.alpha,
                self.weights.beta
            )));
        }
        Ok(())
    }
}

/// One trainer-ready utterance.
#[derive(Debug, Clone)]
pub struct FeatureItem {
    pub utt_id: String,
    pub label: Label,
    pub features: FeatureMatrix,
}

/// A task's train/dev/eval feature splits.
#[derive(Debug, Clone)]
pub struct TaskFeatures {
    pub task_id: String,
    pub train: Vec<FeatureItem>,
    pub dev: Vec<FeatureItem>,
    pub eval: Vec<FeatureItem>,
}

/// Ordered tasks defining one sequential experiment.
#[derive(Debug, Clone)]
pub struct TaskSequence {
    pub tasks: Vec<TaskFeatures>,
}

impl TaskSequence {
    pub fn new(tasks: Vec<TaskFeatures>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::EmptyInput("task sequence"));
        }
        for i in 0..tasks.len() {
            for j in i + 1..tasks.len() {
                if tasks[i].task_id == tasks[j].task_id {
                    return Err(Error::Data(format!(
                        "duplicate task id {:?} in sequence",
                        tasks[i].task_id
                    )));
                }
            }
        }
        Ok(TaskSequence { tasks })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Extract duration-normalized features for raw utterances. The slice seed of
/// each utterance derives from `seed` and its id, so preparation is stable
/// under reordering.
pub fn prepare_items<'a>(
    utts: impl Iterator<Item = (&'a str, Label, &'a crate::frontend::Waveform)>,
    cfg: &LfccConfig,
    target_frames: usize,
    seed: u64,
) -> Result<Vec<FeatureItem>> {
    let mut out = Vec::new();
    for (utt_id, label, wave) in utts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, utt_id, 0));
        let features = extract_features(wave, cfg, target_frames, &mut rng)?;
        out.push(FeatureItem { utt_id: utt_id.to_string(), label, features });
    }
    Ok(out)
}

/// Loss means and dev EER of one epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub dev_eer: f64,
}

/// Log of one training step.
#[derive(Debug, Clone)]
pub struct TaskTrainLog {
    pub task_id: String,
    pub train_size: usize,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_eer: f64,
}

impl TaskTrainLog {
    /// Per-epoch CSV with the loss-breakdown columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,original,lwf,psa,total,dev_eer\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                e.epoch, e.loss.original, e.loss.lwf, e.loss.psa, e.loss.total, e.dev_eer
            ));
        }
        s
    }
}

/// Train `model` on one task. A teacher snapshot is required exactly when the
/// strategy distills. Returns the per-epoch log; the model is left at its
/// best-dev-EER epoch.
pub fn train_task(
    model: &mut Classifier,
    teacher: Option<&Classifier>,
    task_id: &str,
    train: &[FeatureItem],
    dev: &[FeatureItem],
    strategy: &TrainingStrategy,
    adam: &AdamConfig,
    seed: u64,
) -> Result<TaskTrainLog> {
    strategy.validate()?;
    adam.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if dev.is_empty() {
        return Err(Error::EmptyInput("dev set"));
    }
    if strategy.kind.uses_teacher() && teacher.is_none() {
        return Err(Error::MissingTeacher(strategy.kind.name()));
    }

    let alpha = strategy.weights.alpha;
    let beta = strategy.weights.beta;
    let use_lwf = strategy.kind.uses_teacher() && alpha > 0.0;
    let use_psa = strategy.kind.uses_teacher() && beta > 0.0;

    // The teacher is frozen, so its per-utterance outputs are computed once.
    let teacher_out = if use_lwf || use_psa {
        Some(teacher_outputs(teacher.unwrap(), train)?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamState::new(model.params());
    let mut log = TaskTrainLog {
        task_id: task_id.to_string(),
        train_size: train.len(),
        epochs: Vec::with_capacity(adam.epochs),
        best_epoch: 0,
        best_dev_eer: f64::INFINITY,
    };
    let mut best_params: Option<crate::tensor::ParamSet> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..adam.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for chunk in order.chunks(adam.batch_size) {
            let batch: Vec<&FeatureMatrix> = chunk.iter().map(|&i| &train[i].features).collect();
            let labels: Vec<usize> =
                chunk.iter().map(|&i| class_index(train[i].label)).collect();
            let x = batch_tensor(&batch)?;

            let mut g = Graph::new();
            let input = g.leaf(x);
            let nodes = model.forward_graph(&mut g, input)?;
            let ce = g.cross_entropy(nodes.logits, &labels)?;

            let lwf_node = if use_lwf {
                let out = teacher_out.as_ref().unwrap();
                let y_old = gather_rows(&out.probs, 2, chunk)?;
                let y_new = g.softmax(nodes.logits)?;
                Some(g.lwf_loss(y_new, &y_old, strategy.distill.temperature)?)
            } else {
                None
            };

            let psa_node = if use_psa {
                let genuine_rows: Vec<usize> = chunk
                    .iter()
                    .enumerate()
                    .filter(|(_, &i)| train[i].label == Label::Genuine)
                    .map(|(r, _)| r)
                    .collect();
                if genuine_rows.is_empty() {
                    None
                } else {
                    let out = teacher_out.as_ref().unwrap();
                    let selected: Vec<usize> =
                        genuine_rows.iter().map(|&r| chunk[r]).collect();
                    let emb_old = gather_rows(&out.embeddings, out.emb_dim, &selected)?;
                    Some(g.psa_loss(
                        nodes.embedding,
                        &emb_old,
                        &genuine_rows,
                        strategy.distill.psa_form,
                    )?)
                }
            } else {
                None
            };

            let (total, breakdown) =
                total_loss(&mut g, ce, lwf_node, psa_node, &strategy.weights)?;
            if !breakdown.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at task {task_id} epoch {epoch}: {breakdown:?}"
                )));
            }
            model.params_mut().zero_grads();
            g.backward_params(total, model.params_mut())?;
            adam_step(model.params_mut(), &mut state, adam)?;

            let w = chunk.len() as f64;
            sums.original += breakdown.original * w;
            sums.lwf += breakdown.lwf * w;
            sums.psa += breakdown.psa * w;
            sums.total += breakdown.total * w;
        }
        let n = train.len() as f64;
        let loss = LossBreakdown {
            original: sums.original / n,
            lwf: sums.lwf / n,
            psa: sums.psa / n,
            total: sums.total / n,
        };
        let dev_eer = evaluate_eer(model, dev)?.eer;
        if dev_eer < log.best_dev_eer {
            log.best_dev_eer = dev_eer;
            log.best_epoch = epoch;
            best_params = Some(model.params().clone());
        }
        log.epochs.push(EpochLog { epoch, loss, dev_eer });
    }

    if let Some(best) = best_params {
        *model.params_mut() = best;
    }
    Ok(log)
}

struct TeacherOutputs {
    probs: Vec<f64>,      // n x 2 softmax rows
    embeddings: Vec<f64>, // n x emb_dim
    emb_dim: usize,
}

fn teacher_outputs(teacher: &Classifier, items: &[FeatureItem]) -> Result<TeacherOutputs> {
    let emb_dim = teacher.config().embedding_dim;
    let mut probs = Vec::with_capacity(items.len() * 2);
    let mut embeddings = Vec::with_capacity(items.len() * emb_dim);
    for chunk in items.chunks(SCORING_BATCH) {
        let batch: Vec<&FeatureMatrix> = chunk.iter().map(|it| &it.features).collect();
        let x = batch_tensor(&batch)?;
        let (emb, logits) = teacher.forward_batch(&x)?;
        for row in logits.data().chunks_exact(2) {
            probs.extend(crate::losses::softmax(row));
        }
        embeddings.extend_from_slice(emb.data());
    }
    Ok(TeacherOutputs { probs, embeddings, emb_dim })
}

fn gather_rows(flat: &[f64], dim: usize, rows: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for &r in rows {
        data.extend_from_slice(&flat[r * dim..(r + 1) * dim]);
    }
    Tensor::from_vec(&[rows.len(), dim], data)
}

fn class_index(label: Label) -> usize {
    match label {
        Label::Genuine => 0,
        Label::Spoof => 1,
    }
}

/// Score items with the genuine-class log-probability.
pub fn score_items(model: &Classifier, items: &[FeatureItem]) -> Result<Vec<ScoreRecord>> {
    let mut records = Vec::with_capacity(items.len());
    for chunk in items.chunks(SCORING_BATCH) {
        let batch: Vec<&FeatureMatrix> = chunk.iter().map(|it| &it.features).collect();
        let x = batch_tensor(&batch)?;
        let (_, logits) = model.forward_batch(&x)?;
        for (item, row) in chunk.iter().zip(logits.data().chunks_exact(2)) {
            let log_z = crate::tensor::graph::log_sum_exp(row);
            records.push(ScoreRecord {
                utt_id: item.utt_id.clone(),
                label: item.label,
                score: row[class_index(Label::Genuine)] - log_z,
            });
        }
    }
    Ok(records)
}

pub fn evaluate_eer(model: &Classifier, items: &[FeatureItem]) -> Result<EvalReport> {
    compute_eer(&score_items(model, items)?)
}

/// Result of a sequential experiment. `eer_matrix[i][j]` is the EER on task
/// `j`'s eval set after training step `i`; row `i` has `i + 1` entries.
#[derive(Debug, Clone)]
pub struct SequenceResult {
    pub task_ids: Vec<String>,
    pub eer_matrix: Vec<Vec<f64>>,
    pub avg_eer_per_step: Vec<f64>,
    pub step_logs: Vec<TaskTrainLog>,
    pub checkpoints: Vec<Classifier>,
}

impl SequenceResult {
    pub fn final_avg_eer(&self) -> f64 {
        *self.avg_eer_per_step.last().unwrap()
    }

    /// EER matrix as CSV with header `step,task,eer` (steps are 1-based).
    pub fn eer_matrix_csv(&self) -> String {
        let mut s = String::from("step,task,eer\n");
        for (i, row) in self.eer_matrix.iter().enumerate() {
            for (j, eer) in row.iter().enumerate() {
                s.push_str(&format!("{},{},{:.6}\n", i + 1, self.task_ids[j], eer));
            }
        }
        s
    }

    /// Average EER after each step as CSV with header `step,avg_eer`; the
    /// step index doubles as the number of attacks seen.
    pub fn avg_eer_csv(&self) -> String {
        let mut s = String::from("step,avg_eer\n");
        for (i, avg) in self.avg_eer_per_step.iter().enumerate() {
            s.push_str(&format!("{},{:.6}\n", i + 1, avg));
        }
        s
    }

    /// Metadata for the checkpoint written after step `i`.
    pub fn checkpoint_meta(&self, step: usize, seed: u64) -> CheckpointMeta {
        CheckpointMeta {
            task_id: self.task_ids[step].clone(),
            epoch: self.step_logs[step].best_epoch as u64,
            seed,
        }
    }
}

/// Run a full sequential experiment. All randomness derives from `seed`;
/// identical inputs reproduce an identical result.
pub fn run_sequence(
    seq: &TaskSequence,
    strategy: &TrainingStrategy,
    model_cfg: &LcnnConfig,
    adam: &AdamConfig,
    seed: u64,
) -> Result<SequenceResult> {
    strategy.validate()?;
    let tasks = &seq.tasks;
    let mut result = SequenceResult {
        task_ids: tasks.iter().map(|t| t.task_id.clone()).collect(),
        eer_matrix: Vec::new(),
        avg_eer_per_step: Vec::new(),
        step_logs: Vec::new(),
        checkpoints: Vec::new(),
    };

    let base_strategy = TrainingStrategy::fine_tune();
    let mut model: Option<Classifier> = None;
    for (i, task) in tasks.iter().enumerate() {
        let train_seed = derive_seed(seed, "train", i as u64);
        let log = if i == 0 {
            let mut base = Classifier::new(LcnnConfig {
                init_seed: derive_seed(seed, "init", 0),
                ..model_cfg.clone()
            })?;
            let log = train_task(
                &mut base,
                None,
                &task.task_id,
                &task.train,
                &task.dev,
                &base_strategy,
                adam,
                train_seed,
            )?;
            model = Some(base);
            log
        } else {
            match strategy.kind {
                StrategyKind::FineTune => {
                    let m = model.as_mut().unwrap();
                    train_task(
                        m,
                        None,
                        &task.task_id,
                        &task.train,
                        &task.dev,
                        &base_strategy,
                        adam,
                        train_seed,
                    )?
                }
                StrategyKind::Dfwf | StrategyKind::LwfOnly | StrategyKind::PsaOnly => {
                    let teacher = model.as_ref().unwrap().snapshot_teacher();
                    let m = model.as_mut().unwrap();
                    train_task(
                        m,
                        Some(&teacher),
                        &task.task_id,
                        &task.train,
                        &task.dev,
                        strategy,
                        adam,
                        train_seed,
                    )?
                }
                StrategyKind::MultiCondition => {
                    let mut fresh = Classifier::new(LcnnConfig {
                        init_seed: derive_seed(seed, "init", i as u64),
                        ..model_cfg.clone()
                    })?;
                    let union_id: Vec<&str> =
                        tasks[..=i].iter().map(|t| t.task_id.as_str()).collect();
                    let train_union: Vec<FeatureItem> = tasks[..=i]
                        .iter()
                        .flat_map(|t| t.train.iter().cloned())
                        .collect();
                    let dev_union: Vec<FeatureItem> = tasks[..=i]
                        .iter()
                        .flat_map(|t| t.dev.iter().cloned())
                        .collect();
                    let log = train_task(
                        &mut fresh,
                        None,
                        &union_id.join("+"),
                        &train_union,
                        &dev_union,
                        &base_strategy,
                        adam,
                        train_seed,
                    )?;
                    model = Some(fresh);
                    log
                }
            }
        };

        let m = model.as_ref().unwrap();
        let mut row = Vec::with_capacity(i + 1);
        for task in &tasks[..=i] {
            row.push(evaluate_eer(m, &task.eval)?.eer);
        }
        result.avg_eer_per_step.push(avg_eer(&row)?);
        result.eer_matrix.push(row);
        result.step_logs.push(log);
        result.checkpoints.push(m.snapshot_teacher());
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_invariants_are_enforced() {
        let d = DistillationConfig::default();
        let mut s = TrainingStrategy::fine_tune();
        s.weights.alpha = 0.5;
        assert!(s.validate().is_err());

        let mut s = TrainingStrategy::lwf_only(1.0, d);
        s.weights.beta = 0.5;
        assert!(s.validate().is_err());

        let mut s = TrainingStrategy::psa_only(1.0, d);
        s.weights.alpha = 0.5;
        assert!(s.validate().is_err());

        assert!(TrainingStrategy::dfwf(LossWeights::default(), d).validate().is_ok());
    }

    #[test]
    fn sequence_rejects_duplicate_ids() {
        let t = |id: &str| TaskFeatures {
            task_id: id.to_string(),
            train: vec![],
            dev: vec![],
            eval: vec![],
        };
        assert!(TaskSequence::new(vec![t("a"), t("a")]).is_err());
        assert!(TaskSequence::new(vec![]).is_err());
        assert!(TaskSequence::new(vec![t("a"), t("b")]).is_ok());
    }

    #[test]
    fn missing_teacher_is_reported() {
        let model_cfg = LcnnConfig {
            conv_blocks: vec![crate::model::ConvBlock {
                out_channels: 2,
                kernel: 3,
                stride: (2, 2),
                pool: (2, 2),
            }],
            ..Default::default()
        };
        let mut model = Classifier::new(model_cfg).unwrap();
        let item = FeatureItem {
            utt_id: "u0".into(),
            label: Label::Genuine,
            features: FeatureMatrix::zeros(60, 320),
        };
        let strategy = TrainingStrategy::dfwf(LossWeights::default(), DistillationConfig::default());
        let err = train_task(
            &mut model,
            None,
            "t",
            &[item.clone()],
            &[item],
            &strategy,
            &AdamConfig { epochs: 1, ..Default::default() },
            0,
        );
        assert!(matches!(err, Err(Error::MissingTeacher(_))));
    }
}
