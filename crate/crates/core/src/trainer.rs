//! Two-stage training: focal base training on seen classes, then fine-tuning
//! over all class semantics with the mixed rebalanced objective.

use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentModel, ScoreGradients};
use crate::detector::AnchorLabel;
use crate::error::{Error, Result};
use crate::loss::{
    anchor_group_loss, anchor_group_loss_grad, focal_batch_loss, focal_batch_loss_grad,
    AnchorPrediction, LossConfig, PStarMode,
};
use crate::semantics::{Partition, SemanticMatrix, SemanticsMode};
use crate::synthdata::{derive_seed, Scene};

/// Objective used in the second stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneObjective {
    /// `lambda * L(s) + (1 - lambda) * L(n)` with the penalty on novel anchors.
    #[default]
    Rebalanced,
    /// Plain focal loss over every anchor.
    Focal,
}

impl FromStr for FineTuneObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rebalanced" => Ok(Self::Rebalanced),
            "focal" => Ok(Self::Focal),
            other => Err(Error::Config(format!("unknown fine-tune objective `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_base: usize,
    pub epochs_ft: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_scenes: usize,
    pub seed: u64,
    pub semantics_mode: SemanticsMode,
    pub ft_objective: FineTuneObjective,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_base: 30,
            epochs_ft: 10,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_scenes: 4,
            seed: 0,
            semantics_mode: SemanticsMode::Trainable,
            ft_objective: FineTuneObjective::Rebalanced,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_base == 0 || self.epochs_ft == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must be in [0, 1)".into()));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("Adam epsilon must be > 0".into()));
        }
        if self.batch_scenes == 0 {
            return Err(Error::Config("batch_scenes must be >= 1".into()));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    /// Per epoch, the mean over scenes of each scene's own objective, taken when
    /// its batch was processed.
    pub epoch_losses: Vec<f64>,
    pub checksum: f64,
    pub wall_time_secs: f64,
}

/// Adam with bias correction over a fixed list of parameter matrices.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Array2<f64>], grads: &[&Array2<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(&mut **p)
                .and(*g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// How class slots are split between the seen and novel loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Routing {
    /// Split by the class partition.
    ByPartition,
    /// Every slot takes the novel (penalized) path.
    AllNovel,
}

#[derive(Debug, Clone, Copy)]
enum Objective {
    Focal,
    Mixed(Routing),
}

struct Stage<'a> {
    name: &'static str,
    semantics: &'a SemanticMatrix,
    subset: Vec<usize>,
    objective: Objective,
    loss: LossConfig,
    epochs: usize,
    stream: u64,
}

/// Anchor predictions for one batch of scenes, skipping ignored anchors,
/// with the score row of each prediction and the prediction count per scene.
fn batch_predictions(
    scenes: &[&Scene],
    scores: &Array2<f64>,
    subset: &[usize],
) -> (Vec<AnchorPrediction>, Vec<usize>, Vec<usize>) {
    let mut preds = Vec::new();
    let mut rows = Vec::new();
    let mut counts = Vec::with_capacity(scenes.len());
    let mut row = 0;
    for scene in scenes {
        let before = preds.len();
        for label in &scene.anchor_labels {
            let label = match *label {
                AnchorLabel::Ignore => {
                    row += 1;
                    continue;
                }
                AnchorLabel::Negative => None,
                // classes outside the scored subset act as background
                AnchorLabel::Positive { class, .. } => subset.iter().position(|&c| c == class),
            };
            preds.push(AnchorPrediction {
                scores: scores.row(row).to_vec(),
                label,
            });
            rows.push(row);
            row += 1;
        }
        counts.push(preds.len() - before);
    }
    (preds, rows, counts)
}

/// Which scored slots feed the penalized novel term.
fn novel_slots(semantics: &SemanticMatrix, subset: &[usize], routing: Routing) -> Vec<bool> {
    let part = semantics.partition();
    subset
        .iter()
        .map(|&c| match routing {
            Routing::AllNovel => true,
            Routing::ByPartition => part[c].is_novel(),
        })
        .collect()
}

fn stack_features(scenes: &[&Scene]) -> Array2<f64> {
    let views: Vec<_> = scenes.iter().map(|s| s.anchor_features.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("scenes share the feature dimension")
}

struct BatchObjective {
    value: f64,
    /// The objective of each scene taken on its own.
    per_scene: Vec<f64>,
    features: Array2<f64>,
    /// `dL/dp` for every score.
    upstream: Array2<f64>,
}

/// Objective value and `dL/dp` for one batch.
fn batch_objective(model: &AlignmentModel, stage: &Stage<'_>, scenes: &[&Scene]) -> Result<BatchObjective> {
    let features = stack_features(scenes);
    let scores = model.score_batch(&features, stage.semantics, &stage.subset)?;
    let (preds, rows, counts) = batch_predictions(scenes, &scores, &stage.subset);
    let slots = match stage.objective {
        Objective::Focal => Vec::new(),
        Objective::Mixed(routing) => novel_slots(stage.semantics, &stage.subset, routing),
    };
    let value_of = |preds: &[AnchorPrediction]| match stage.objective {
        Objective::Focal => focal_batch_loss(preds, &stage.loss),
        Objective::Mixed(_) => anchor_group_loss(preds, &slots, &stage.loss),
    };
    let value = value_of(&preds)?;
    let grads = match stage.objective {
        Objective::Focal => focal_batch_loss_grad(&preds, &stage.loss)?,
        Objective::Mixed(_) => anchor_group_loss_grad(&preds, &slots, &stage.loss)?,
    };
    let mut per_scene = Vec::with_capacity(counts.len());
    let mut start = 0;
    for n in counts {
        per_scene.push(value_of(&preds[start..start + n])?);
        start += n;
    }
    let mut upstream = Array2::zeros(scores.raw_dim());
    for (row, g) in rows.into_iter().zip(grads) {
        upstream.row_mut(row).assign(&ndarray::Array1::from(g));
    }
    Ok(BatchObjective {
        value,
        per_scene,
        features,
        upstream,
    })
}

/// Total objective over `scenes` as a single batch; used by gradient checks.
pub fn objective_value(
    model: &AlignmentModel,
    semantics: &SemanticMatrix,
    subset: &[usize],
    scenes: &[&Scene],
    loss: &LossConfig,
    focal: bool,
) -> Result<f64> {
    Ok(batch_objective(model, &probe_stage(semantics, subset, loss, focal), scenes)?.value)
}

/// Objective value together with its gradients for the model parameters and
/// the stacked anchor features.
pub fn objective_gradients(
    model: &AlignmentModel,
    semantics: &SemanticMatrix,
    subset: &[usize],
    scenes: &[&Scene],
    loss: &LossConfig,
    focal: bool,
) -> Result<(f64, ScoreGradients)> {
    let stage = probe_stage(semantics, subset, loss, focal);
    let b = batch_objective(model, &stage, scenes)?;
    Ok((b.value, model.score_gradients(&b.features, semantics, subset, &b.upstream)?))
}

fn probe_stage<'a>(semantics: &'a SemanticMatrix, subset: &[usize], loss: &LossConfig, focal: bool) -> Stage<'a> {
    Stage {
        name: "probe",
        semantics,
        subset: subset.to_vec(),
        objective: if focal { Objective::Focal } else { Objective::Mixed(Routing::ByPartition) },
        loss: *loss,
        epochs: 1,
        stream: 0,
    }
}

fn run_stage(model: &mut AlignmentModel, scenes: &[Scene], stage: Stage<'_>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config(format!("{} stage has no scenes", stage.name)));
    }
    let start = Instant::now();
    let train_metric = model.mode == SemanticsMode::Trainable;
    let shapes = [model.bridge.dim(), model.metric.metric.dim()];
    let mut adam = Adam::new(cfg, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stage.stream, 0));
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut epoch_losses = Vec::with_capacity(stage.epochs);
    let mut scene_losses = vec![0.0; scenes.len()];
    for epoch in 0..stage.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_scenes) {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let b = batch_objective(model, &stage, &batch)?;
            if !b.value.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss: b.value });
            }
            for (&i, &v) in chunk.iter().zip(&b.per_scene) {
                scene_losses[i] = v;
            }
            let grads = model.score_gradients(&b.features, stage.semantics, &stage.subset, &b.upstream)?;
            if train_metric {
                adam.update(
                    &mut [&mut model.bridge, &mut model.metric.metric],
                    &[&grads.bridge, &grads.metric],
                );
            } else {
                adam.update(&mut [&mut model.bridge], &[&grads.bridge]);
            }
        }
        let mean = scene_losses.iter().sum::<f64>() / scenes.len() as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        stage: stage.name.to_string(),
        epoch_losses,
        checksum: model.checksum(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

const STREAM_BASE: u64 = 11;
const STREAM_FT: u64 = 12;
const STREAM_SELF: u64 = 13;

/// Base training on seen classes with the focal loss; novel class scores are
/// never computed.
pub fn train_base(d_tr: &[Scene], model: &mut AlignmentModel, semantics: &SemanticMatrix, cfg: &TrainConfig) -> Result<TrainReport> {
    check_base_split(d_tr, semantics)?;
    let stage = Stage {
        name: "base",
        semantics,
        subset: semantics.indices(&[Partition::Seen]),
        objective: Objective::Focal,
        loss: cfg.loss.focal(),
        epochs: cfg.epochs_base,
        stream: STREAM_BASE,
    };
    run_stage(model, d_tr, stage, cfg)
}

fn check_base_split(d_tr: &[Scene], semantics: &SemanticMatrix) -> Result<()> {
    let part = semantics.partition();
    if d_tr.iter().flat_map(Scene::classes).any(|c| part[c].is_novel()) {
        return Err(Error::Config("base-training scenes contain novel classes".into()));
    }
    Ok(())
}

/// Fine-tuning with every class semantic in play.
pub fn fine_tune(model: &mut AlignmentModel, d_ft: &[Scene], semantics: &SemanticMatrix, cfg: &TrainConfig) -> Result<TrainReport> {
    if semantics.few_count() == 0 {
        return Err(Error::Config(
            "fine-tuning needs few-shot classes; use the zero-shot self-tuning pass instead".into(),
        ));
    }
    let objective = match cfg.ft_objective {
        FineTuneObjective::Rebalanced => Objective::Mixed(Routing::ByPartition),
        FineTuneObjective::Focal => Objective::Focal,
    };
    let stage = Stage {
        name: "fine_tune",
        semantics,
        subset: semantics.all_indices(),
        objective,
        loss: cfg.loss,
        epochs: cfg.epochs_ft,
        stream: STREAM_FT,
    };
    run_stage(model, d_ft, stage, cfg)
}

/// Zero-shot second stage: another pass over the base data in which every
/// seen class is treated as a few-shot class, with dynamic `p*`.
pub fn zsd_self_tune(model: &mut AlignmentModel, d_tr: &[Scene], semantics: &SemanticMatrix, cfg: &TrainConfig) -> Result<TrainReport> {
    if semantics.few_count() != 0 {
        return Err(Error::Config("self-tuning applies only when there are no few-shot classes".into()));
    }
    check_base_split(d_tr, semantics)?;
    let stage = Stage {
        name: "zsd_self_tune",
        semantics,
        subset: semantics.indices(&[Partition::Seen]),
        objective: Objective::Mixed(Routing::AllNovel),
        loss: LossConfig {
            p_star_mode: PStarMode::Dynamic,
            ..cfg.loss
        },
        epochs: cfg.epochs_ft,
        stream: STREAM_SELF,
    };
    run_stage(model, d_tr, stage, cfg)
}
