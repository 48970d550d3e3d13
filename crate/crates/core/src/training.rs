//! Composite objective, the Adam training loop, checkpoints and the
//! ablation switches.
//!
//! Every random draw comes from a stream keyed by `(seed, epoch)` for the
//! shuffle and `(seed, epoch, sample)` for the random mask, so a run resumed
//! from a checkpoint replays exactly what the uninterrupted run would do.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluation::{evaluate, EvalError, EvalReport};
use crate::goal_predictor::{build_mask, CandidateConfig, GoalError, MaskMatrix};
use crate::model::{
    prepare, LossRecord, LossWeights, Model, ModelConfig, ModelError, PreparedSample, OPTIMIZER_PREFIX,
};
use crate::nn::{Adam, BlockSpec, Checkpoint, NnError, Tape, Tensor};
use crate::scene::Sample;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss on training sample {sample} at optimizer step {step}: {record:?}")]
    NonFinite {
        sample: usize,
        step: u64,
        record: LossRecord,
    },
    #[error("non-finite gradient at optimizer step {step} (samples {samples:?})")]
    NonFiniteGradient { step: u64, samples: Vec<usize> },
    #[error("training sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: ModelError,
    },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Goal(#[from] GoalError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Everything a run needs: objective weights, ablation switches,
/// optimizer settings and the architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w_bev: f64,
    pub w_fpv: f64,
    /// Random-mask drop probability; ignored when `use_random_mask` is off.
    pub beta: f64,
    /// Coarse attention threshold.
    pub epsilon: f64,
    pub use_shared_queries: bool,
    pub use_random_mask: bool,
    pub use_cross_attention: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Tail fraction of a training file held out for validation.
    pub validation_fraction: f64,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub mlp_depth: usize,
    pub subgraph_layers: usize,
    pub global_layers: usize,
    pub refinement_rounds: usize,
    pub t_pred: usize,
    pub k: usize,
    pub coverage_radius: f64,
    pub candidates: CandidateConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            w_bev: 1.0,
            w_fpv: 1.0,
            beta: 0.1,
            epsilon: m.epsilon,
            use_shared_queries: true,
            use_random_mask: true,
            use_cross_attention: true,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            validation_fraction: 0.1,
            embedding_size: m.block.embedding_size,
            hidden_size: m.block.hidden_size,
            num_heads: m.block.num_heads,
            mlp_depth: m.block.depth,
            subgraph_layers: m.subgraph_layers,
            global_layers: m.global_layers,
            refinement_rounds: m.refinement_rounds,
            t_pred: m.t_pred,
            k: m.k,
            coverage_radius: m.coverage_radius,
            candidates: m.candidates,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, w) in [
            ("w1", self.w1),
            ("w2", self.w2),
            ("w3", self.w3),
            ("w_bev", self.w_bev),
            ("w_fpv", self.w_fpv),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} = {w} must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta = {} outside [0, 1]", self.beta));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            ));
        }
        if self.use_random_mask && !self.use_shared_queries {
            return bad("the random mask drops shared-query flags and needs use_shared_queries".into());
        }
        self.model_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            block: BlockSpec {
                embedding_size: self.embedding_size,
                hidden_size: self.hidden_size,
                num_heads: self.num_heads,
                depth: self.mlp_depth,
            },
            subgraph_layers: self.subgraph_layers,
            global_layers: self.global_layers,
            refinement_rounds: self.refinement_rounds,
            t_pred: self.t_pred,
            k: self.k,
            coverage_radius: self.coverage_radius,
            candidates: self.candidates.clone(),
            use_shared_queries: self.use_shared_queries,
            use_cross_attention: self.use_cross_attention,
            epsilon: self.epsilon,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w1: self.w1,
            w2: self.w2,
            w3: self.w3,
            w_bev: self.w_bev,
            w_fpv: self.w_fpv,
        }
    }

    /// Drop probability actually used: zero with the random mask off.
    pub fn effective_beta(&self) -> f64 {
        if self.use_random_mask {
            self.beta
        } else {
            0.0
        }
    }
}

/// Model wiring selected by the ablation switches. Shared queries off
/// gives per-view heatmaps and sampling, cross attention off gives the
/// plain global graph; the random mask alone is rejected without shared
/// queries.
pub fn ablation_modes(cfg: &TrainConfig) -> Result<ModelConfig, TrainError> {
    cfg.validate()?;
    Ok(cfg.model_config())
}

/// `Σ_view w_view (w1 L1 + w2 L2 + w3 L3)` with components ordered
/// `[bev, fpv]` and `[L1, L2, L3]`.
pub fn total_loss(components: &[[f64; 3]; 2], w: &LossWeights) -> f64 {
    let view = |c: &[f64; 3]| w.w1 * c[0] + w.w2 * c[1] + w.w3 * c[2];
    w.w_bev * view(&components[0]) + w.w_fpv * view(&components[1])
}

const SHUFFLE_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;

fn keyed_rng(seed: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([seed, stream, a, b]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Visiting order of `n` training samples in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, SHUFFLE_STREAM, epoch as u64, 0));
    order
}

/// Training mask of sample `index` in `epoch`.
pub fn training_mask(
    prep: &PreparedSample,
    cfg: &TrainConfig,
    epoch: usize,
    index: usize,
) -> Result<MaskMatrix, TrainError> {
    let mut rng = keyed_rng(cfg.seed, MASK_STREAM, epoch as u64, index as u64);
    Ok(build_mask(
        &prep.candidates.points,
        &prep.camera,
        &mut rng,
        cfg.effective_beta(),
        true,
    )?)
}

/// One element of a mini-batch; `index` only labels diagnostics.
pub struct BatchItem<'a> {
    pub index: usize,
    pub sample: &'a PreparedSample,
    pub mask: MaskMatrix,
}

fn mean_record(records: &[LossRecord]) -> LossRecord {
    let n = records.len().max(1) as f64;
    let mut m = LossRecord::default();
    for r in records {
        for v in 0..2 {
            m.l1[v] += r.l1[v] / n;
            m.l2[v] += r.l2[v] / n;
            m.l3[v] += r.l3[v] / n;
        }
        m.total += r.total / n;
    }
    m
}

/// One Adam step on the mean loss of `batch`. Returns the mean loss record
/// before the update.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[BatchItem<'_>],
    weights: &LossWeights,
) -> Result<LossRecord, TrainError> {
    let mut grads = model.store.zero_gradients();
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut records = Vec::with_capacity(batch.len());
    for item in batch {
        let mut tape = Tape::new(&model.store);
        let vars = model.loss(&mut tape, item.sample, &item.mask, weights)?;
        let record = vars.record(&tape);
        if !record.total.is_finite() {
            return Err(TrainError::NonFinite {
                sample: item.index,
                step: adam.steps_taken() + 1,
                record,
            });
        }
        tape.backward(vars.total, &mut grads, scale)?;
        records.push(record);
    }
    if !grads.all_finite() {
        return Err(TrainError::NonFiniteGradient {
            step: adam.steps_taken() + 1,
            samples: batch.iter().map(|b| b.index).collect(),
        });
    }
    adam.update(&mut model.store, &grads);
    Ok(mean_record(&records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over the epoch's samples of the pre-update losses.
    pub train: LossRecord,
    pub validation: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    model: ModelConfig,
    train: TrainConfig,
    /// Epochs completed when the tensors were taken.
    epoch: usize,
    optimizer_steps: u64,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    best_value: Option<f64>,
}

/// A training run in progress.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    adam: Adam,
    epoch: usize,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    /// Validation BEV minFDE of the best model.
    best_value: Option<f64>,
    best_tensors: Vec<(String, Tensor)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        let model = Model::new(ablation_modes(&cfg)?, cfg.seed)?;
        let adam = Adam::new(&model.store, cfg.learning_rate);
        let best_tensors = model.tensors();
        Ok(Self {
            cfg,
            model,
            adam,
            epoch: 0,
            history: Vec::new(),
            best_epoch: 0,
            best_value: None,
            best_tensors,
        })
    }

    /// Continues from the `last` and `best` checkpoints of an earlier run.
    /// `cfg` may raise the epoch count; everything else must match.
    pub fn resume(cfg: TrainConfig, last: &Checkpoint, best: &Checkpoint) -> Result<Self, TrainError> {
        let meta: CheckpointMeta = serde_json::from_value(last.meta.clone())
            .map_err(|e| TrainError::Resume(format!("checkpoint metadata: {e}")))?;
        if meta.kind != "last" {
            return Err(TrainError::Resume(format!(
                "expected a `last` checkpoint, got `{}`",
                meta.kind
            )));
        }
        let stored = TrainConfig {
            epochs: cfg.epochs,
            ..meta.train.clone()
        };
        if stored != cfg {
            return Err(TrainError::Resume(
                "training config differs from the checkpoint".into(),
            ));
        }
        if meta.epoch > cfg.epochs {
            return Err(TrainError::Resume(format!(
                "checkpoint has {} epochs, config asks for {}",
                meta.epoch, cfg.epochs
            )));
        }
        let mut t = Self::new(cfg)?;
        t.model.load_tensors(last)?;
        let moments = |which: &str| -> Result<Vec<Tensor>, TrainError> {
            t.model
                .store
                .iter()
                .map(|(_, name, _)| {
                    let key = format!("{OPTIMIZER_PREFIX}{which}.{name}");
                    last.get(&key)
                        .cloned()
                        .ok_or_else(|| TrainError::Resume(format!("missing optimizer tensor {key}")))
                })
                .collect()
        };
        let (m, v) = (moments("m")?, moments("v")?);
        t.adam.restore(meta.optimizer_steps, m, v)?;
        let mut best_model = Model::new(t.model.config.clone(), 0)?;
        best_model.load_tensors(best)?;
        t.best_tensors = best_model.tensors();
        t.epoch = meta.epoch;
        t.history = meta.history;
        t.best_epoch = meta.best_epoch;
        t.best_value = meta.best_value;
        Ok(t)
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    fn meta(&self, kind: &str, epoch: usize) -> serde_json::Value {
        serde_json::to_value(CheckpointMeta {
            kind: kind.into(),
            model: self.model.config.clone(),
            train: self.cfg.clone(),
            epoch,
            optimizer_steps: self.adam.steps_taken(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            best_value: self.best_value,
        })
        .expect("metadata serializes")
    }

    /// Current parameters plus optimizer state.
    pub fn last_checkpoint(&self) -> Checkpoint {
        let mut tensors = self.model.tensors();
        for (which, g) in [
            ("m", self.adam.first_moments()),
            ("v", self.adam.second_moments()),
        ] {
            for (id, t) in g.iter() {
                let name = self.model.store.name(id);
                tensors.push((format!("{OPTIMIZER_PREFIX}{which}.{name}"), t.clone()));
            }
        }
        Checkpoint {
            meta: self.meta("last", self.epoch),
            tensors,
        }
    }

    /// Parameters with the best validation BEV minFDE so far, or the
    /// latest ones when there is no validation set.
    pub fn best_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: self.meta("best", self.best_epoch),
            tensors: self.best_tensors.clone(),
        }
    }

    /// One pass over `train` in this epoch's seeded order, then validation.
    pub fn run_epoch(
        &mut self,
        train: &[PreparedSample],
        validation: &[Sample],
    ) -> Result<&EpochRecord, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let weights = self.cfg.loss_weights();
        let order = epoch_order(train.len(), self.cfg.seed, self.epoch);
        let mut records = Vec::with_capacity(order.len());
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&index| {
                    Ok(BatchItem {
                        index,
                        sample: &train[index],
                        mask: training_mask(&train[index], &self.cfg, self.epoch, index)?,
                    })
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            let r = train_step(&mut self.model, &mut self.adam, &batch, &weights)?;
            // weight by batch size so the epoch mean is per sample
            records.extend(std::iter::repeat_n(r, chunk.len()));
        }
        self.epoch += 1;

        let validation = if validation.is_empty() {
            None
        } else {
            Some(evaluate(&self.model, validation)?)
        };
        match &validation {
            Some(report) => {
                if self.cfg.use_shared_queries && report.consistency_rate != 1.0 {
                    log::error!(
                        "epoch {}: cross-view consistency rate {} with shared queries",
                        self.epoch,
                        report.consistency_rate
                    );
                }
                if self.best_value.is_none_or(|b| report.bev.minfde < b) {
                    self.best_value = Some(report.bev.minfde);
                    self.best_epoch = self.epoch;
                    self.best_tensors = self.model.tensors();
                }
            }
            None => {
                self.best_epoch = self.epoch;
                self.best_tensors = self.model.tensors();
            }
        }
        let record = EpochRecord {
            epoch: self.epoch,
            train: mean_record(&records),
            validation,
        };
        log::info!(
            "epoch {}: loss {:.4}{}",
            record.epoch,
            record.train.total,
            record
                .validation
                .as_ref()
                .map(|v| format!(", val BEV minADE {:.3} minFDE {:.3}", v.bev.minade, v.bev.minfde))
                .unwrap_or_default()
        );
        self.history.push(record);
        Ok(self.history.last().expect("just pushed"))
    }

    /// Trains until `cfg.epochs`, writing `last.ckpt`, `best.ckpt` and
    /// `history.json` into `out` (when given) at the start and after every
    /// epoch.
    pub fn fit(
        &mut self,
        train: &[Sample],
        validation: &[Sample],
        out: Option<&Path>,
    ) -> Result<TrainOutcome, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let prepared = prepare_all(train, &self.model.config)?;
        if let Some(dir) = out {
            self.save(dir)?;
        }
        while self.epoch < self.cfg.epochs {
            self.run_epoch(&prepared, validation)?;
            if let Some(dir) = out {
                self.save(dir)?;
            }
        }
        Ok(TrainOutcome {
            last: self.last_checkpoint(),
            best: self.best_checkpoint(),
            history: self.history.clone(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| TrainError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        self.last_checkpoint().save(&dir.join(LAST_CHECKPOINT))?;
        self.best_checkpoint().save(&dir.join(BEST_CHECKPOINT))?;
        let history = dir.join(HISTORY_FILE);
        let json = serde_json::to_vec_pretty(&self.history).expect("history serializes");
        fs::write(&history, json).map_err(io(&history))?;
        Ok(())
    }
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.json";

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

fn prepare_all(samples: &[Sample], cfg: &ModelConfig) -> Result<Vec<PreparedSample>, TrainError> {
    samples
        .iter()
        .enumerate()
        .map(|(index, s)| prepare(s, cfg).map_err(|source| TrainError::Sample { index, source }))
        .collect()
}

/// Trains a fresh model on `train`, selecting the best checkpoint by BEV
/// minFDE on `validation` (or keeping the latest when it is empty).
pub fn run_training(
    train: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    Trainer::new(cfg.clone())?.fit(train, validation, out)
}

/// Continues the run whose checkpoints live in `dir`.
pub fn resume_training(
    train: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    let last = Checkpoint::load(&dir.join(LAST_CHECKPOINT))?;
    let best = Checkpoint::load(&dir.join(BEST_CHECKPOINT))?;
    Trainer::resume(cfg.clone(), &last, &best)?.fit(train, validation, Some(dir))
}

/// Splits off the last `fraction` of `samples` (rounded) for validation,
/// keeping at least one training sample.
pub fn split_validation(mut samples: Vec<Sample>, fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    let n_val = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    let val = samples.split_off(n - n_val);
    (samples, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::small_config;
    use crate::scene::{generate_dataset, GenConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_cfg() -> TrainConfig {
        let m = small_config();
        TrainConfig {
            embedding_size: m.block.embedding_size,
            hidden_size: m.block.hidden_size,
            num_heads: m.block.num_heads,
            mlp_depth: m.block.depth,
            subgraph_layers: m.subgraph_layers,
            global_layers: m.global_layers,
            batch_size: 2,
            epochs: 2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn data(n: usize, seed: u64) -> Vec<Sample> {
        generate_dataset(n, seed, &GenConfig::default()).unwrap()
    }

    #[test]
    fn total_loss_closed_forms() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&[[1.0, 2.0, 3.0]; 2], &w), 12.0);
        let zero = LossWeights {
            w1: 0.0,
            w2: 0.0,
            w3: 0.0,
            w_bev: 0.0,
            w_fpv: 0.0,
        };
        assert_eq!(total_loss(&[[1.0, 2.0, 3.0]; 2], &zero), 0.0);
    }

    proptest! {
        #[test]
        fn total_loss_matches_direct_formula_and_is_linear(
            c in prop::array::uniform2(prop::array::uniform3(0.0f64..10.0)),
            w in prop::array::uniform5(0.0f64..3.0),
            s in 0.0f64..4.0,
        ) {
            let lw = LossWeights { w1: w[0], w2: w[1], w3: w[2], w_bev: w[3], w_fpv: w[4] };
            let direct = w[3] * (w[0] * c[0][0] + w[1] * c[0][1] + w[2] * c[0][2])
                + w[4] * (w[0] * c[1][0] + w[1] * c[1][1] + w[2] * c[1][2]);
            prop_assert!((total_loss(&c, &lw) - direct).abs() <= 1e-12 * direct.abs().max(1.0));
            let scaled = LossWeights { w_bev: s * w[3], ..lw };
            let parts = LossWeights { w_fpv: 0.0, ..lw };
            let expect = total_loss(&c, &lw) + (s - 1.0) * total_loss(&c, &parts);
            prop_assert!((total_loss(&c, &scaled) - expect).abs() <= 1e-9 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn model_total_agrees_with_total_loss() {
        let cfg = TrainConfig {
            w1: 0.7,
            w2: 1.3,
            w3: 0.2,
            w_bev: 0.9,
            w_fpv: 0.4,
            ..tiny_cfg()
        };
        let model = Model::new(cfg.model_config(), 3).unwrap();
        for s in data(4, 8) {
            let prep = prepare(&s, &model.config).unwrap();
            let mask = training_mask(&prep, &cfg, 0, 0).unwrap();
            let mut tape = Tape::new(&model.store);
            let vars = model.loss(&mut tape, &prep, &mask, &cfg.loss_weights()).unwrap();
            let r = vars.record(&tape);
            let comps = [[r.l1[0], r.l2[0], r.l3[0]], [r.l1[1], r.l2[1], r.l3[1]]];
            let direct = total_loss(&comps, &cfg.loss_weights());
            assert!(
                (r.total - direct).abs() <= 1e-12 * direct.abs().max(1.0),
                "{} vs {direct}",
                r.total
            );
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let rm_without_que = TrainConfig {
            use_shared_queries: false,
            ..TrainConfig::default()
        };
        assert!(matches!(
            ablation_modes(&rm_without_que),
            Err(TrainError::Config(_))
        ));
        for bad in [
            TrainConfig {
                beta: 1.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                w2: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: f64::NAN,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        let json = r#"{"epochs": 3, "use_random_mask": false}"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.effective_beta(), 0.0);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochz": 3}"#).is_err());
    }

    #[test]
    fn ablation_wiring() {
        let all_off = TrainConfig {
            use_shared_queries: false,
            use_random_mask: false,
            use_cross_attention: false,
            ..TrainConfig::default()
        };
        let m = ablation_modes(&all_off).unwrap();
        assert!(!m.use_shared_queries);
        assert_eq!(m.graph_mode(), crate::encoder::GraphMode::Plain);
        let all_on = ablation_modes(&TrainConfig::default()).unwrap();
        assert!(all_on.use_shared_queries);
        assert_eq!(
            all_on.graph_mode(),
            crate::encoder::GraphMode::CrossView { epsilon: 0.05 }
        );
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny_cfg()
        };
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.model.tensors();
        let prepared = prepare_all(&data(3, 1), &t.model.config).unwrap();
        t.run_epoch(&prepared, &[]).unwrap();
        assert_eq!(t.model.tensors(), before);
    }

    #[test]
    fn single_sample_overfits() {
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 1,
            ..tiny_cfg()
        };
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let prep = prepare(&data(1, 21)[0], &t.model.config).unwrap();
        let w = cfg.loss_weights();
        let mut first = None;
        let mut last = 0.0;
        for step in 0..500 {
            let item = BatchItem {
                index: 0,
                sample: &prep,
                mask: training_mask(&prep, &cfg, step, 0).unwrap(),
            };
            let r = train_step(&mut t.model, &mut t.adam, &[item], &w).unwrap();
            first.get_or_insert(r.total);
            last = r.total;
        }
        let first = first.unwrap();
        assert!(last < 0.1 * first, "loss {first} -> {last}");
    }

    #[test]
    fn nonfinite_loss_aborts() {
        let cfg = tiny_cfg();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let mut prep = prepare(&data(1, 2)[0], &t.model.config).unwrap();
        prep.future[0] = prep.future[0]
            .iter()
            .map(|p| p.map(|[x, y]| [x * 1e308, y]))
            .collect();
        let item = BatchItem {
            index: 7,
            sample: &prep,
            mask: training_mask(&prep, &cfg, 0, 0).unwrap(),
        };
        let before = t.model.tensors();
        let err = train_step(&mut t.model, &mut t.adam, &[item], &cfg.loss_weights()).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { sample: 7, .. }), "{err}");
        assert_eq!(t.model.tensors(), before);
    }

    #[test]
    fn epochs_zero_returns_the_initial_model() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let out = run_training(&data(2, 4), &[], &cfg, None).unwrap();
        assert!(out.history.is_empty());
        let fresh = Model::new(cfg.model_config(), cfg.seed).unwrap();
        assert_eq!(out.best.tensors, fresh.tensors());
        assert_eq!(
            Model::from_checkpoint(&out.last).unwrap().tensors(),
            fresh.tensors()
        );
    }

    #[test]
    fn history_length_and_best_selection() {
        let cfg = TrainConfig {
            epochs: 3,
            ..tiny_cfg()
        };
        let val = data(3, 900);
        let out = run_training(&data(6, 5), &val, &cfg, None).unwrap();
        assert_eq!(out.history.len(), 3);
        let fdes: Vec<f64> = out
            .history
            .iter()
            .map(|h| h.validation.as_ref().unwrap().bev.minfde)
            .collect();
        let best = fdes.iter().copied().fold(f64::INFINITY, f64::min);
        let best_epoch = fdes.iter().position(|&f| f == best).unwrap() + 1;
        assert_eq!(out.best.meta["best_epoch"], best_epoch);
        let model = Model::from_checkpoint(&out.best).unwrap();
        assert_eq!(evaluate(&model, &val).unwrap().bev.minfde, best);
        for h in &out.history {
            assert_eq!(h.validation.as_ref().unwrap().consistency_rate, 1.0);
        }
    }

    #[test]
    fn same_seed_same_checkpoints() {
        let cfg = tiny_cfg();
        let (train, val) = (data(5, 3), data(2, 77));
        let a = run_training(&train, &val, &cfg, None).unwrap();
        let b = run_training(&train, &val, &cfg, None).unwrap();
        assert_eq!(a.last.to_bytes(), b.last.to_bytes());
        assert_eq!(a.best.to_bytes(), b.best.to_bytes());
        let c = run_training(&train, &val, &TrainConfig { seed: 12, ..cfg }, None).unwrap();
        assert_ne!(a.last.to_bytes(), c.last.to_bytes());
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let cfg = TrainConfig {
            epochs: 3,
            ..tiny_cfg()
        };
        let (train, val) = (data(5, 31), data(2, 32));
        let full = run_training(&train, &val, &cfg, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let prepared = prepare_all(&train, &t.model.config).unwrap();
        t.run_epoch(&prepared, &val).unwrap();
        t.save(dir.path()).unwrap();
        drop(t);
        let resumed = resume_training(&train, &val, &cfg, dir.path()).unwrap();
        assert_eq!(resumed.last.to_bytes(), full.last.to_bytes());
        assert_eq!(resumed.best.to_bytes(), full.best.to_bytes());
        let on_disk = Checkpoint::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(on_disk.to_bytes(), full.last.to_bytes());
    }

    #[test]
    fn resume_rejects_a_different_config() {
        let cfg = tiny_cfg();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let prepared = prepare_all(&data(2, 1), &t.model.config).unwrap();
        t.run_epoch(&prepared, &[]).unwrap();
        let (last, best) = (t.last_checkpoint(), t.best_checkpoint());
        let other = TrainConfig {
            learning_rate: 0.5,
            ..cfg.clone()
        };
        assert!(matches!(
            Trainer::resume(other, &last, &best),
            Err(TrainError::Resume(_))
        ));
        assert!(matches!(
            Trainer::resume(cfg, &best, &best),
            Err(TrainError::Resume(_))
        ));
    }

    #[test]
    fn shuffles_and_masks_are_keyed() {
        assert_eq!(epoch_order(50, 1, 3), epoch_order(50, 1, 3));
        assert_ne!(epoch_order(50, 1, 3), epoch_order(50, 1, 4));
        let mut sorted = epoch_order(50, 9, 0);
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        let mut a = keyed_rng(1, MASK_STREAM, 2, 3);
        let mut b = keyed_rng(1, MASK_STREAM, 3, 2);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn random_mask_off_keeps_visibility() {
        let cfg = TrainConfig {
            use_random_mask: false,
            ..tiny_cfg()
        };
        let model = Model::new(cfg.model_config(), 0).unwrap();
        let prep = prepare(&data(1, 6)[0], &model.config).unwrap();
        let m = training_mask(&prep, &cfg, 0, 0).unwrap();
        assert!(m.bev.iter().all(|f| *f));
        assert_eq!(m.fpv, prep.coords.fpv_visible);
    }

    #[test]
    fn validation_split_takes_the_tail() {
        let samples = data(10, 2);
        let (train, val) = split_validation(samples.clone(), 0.2);
        assert_eq!(train, samples[..8]);
        assert_eq!(val, samples[8..]);
        let (train, val) = split_validation(samples[..1].to_vec(), 0.5);
        assert_eq!((train.len(), val.len()), (1, 0));
    }
}
