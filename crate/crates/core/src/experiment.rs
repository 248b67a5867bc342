//! End-to-end runs: world and bundle generation, both training stages,
//! evaluation across modes, seed medians and the beta/lambda sweep.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentModel;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMode, EvalReport, Thresholds};
use crate::semantics::{SemanticMatrix, SemanticsMode};
use crate::synthdata::{assemble_bundle, derive_seed, generate_world, DatasetBundle, SplitSizes, SyntheticWorld, WorldSpec};
use crate::trainer::{fine_tune, train_base, zsd_self_tune, FineTuneObjective, TrainConfig, TrainReport};

const STREAM_INIT: u64 = 21;

/// Everything that determines one run apart from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub world: WorldSpec,
    pub sizes: SplitSizes,
    pub shots: usize,
    pub train: TrainConfig,
    pub thresholds: Thresholds,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            sizes: SplitSizes::default(),
            shots: 5,
            train: TrainConfig::default(),
            thresholds: Thresholds::default(),
        }
    }
}

pub struct Prepared {
    pub world: SyntheticWorld,
    pub bundle: DatasetBundle,
}

impl Prepared {
    pub fn semantics(&self) -> &SemanticMatrix {
        &self.world.semantics
    }
}

pub fn prepare(world: &WorldSpec, sizes: &SplitSizes, shots: usize, seed: u64) -> Result<Prepared> {
    let world = generate_world(world, seed)?;
    let bundle = assemble_bundle(&world, sizes, shots)?;
    Ok(Prepared { world, bundle })
}

/// Seed used to initialise model parameters for run seed `seed`.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, STREAM_INIT, 0)
}

/// A fine-tuning recipe: how class semantics are handled and which loss
/// drives the second stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Method {
    pub semantics_mode: SemanticsMode,
    pub ft_objective: FineTuneObjective,
}

impl Method {
    /// Trainable semantics with the rebalanced loss.
    pub const FULL: Method = Method {
        semantics_mode: SemanticsMode::Trainable,
        ft_objective: FineTuneObjective::Rebalanced,
    };
    /// Fixed semantics with plain focal fine-tuning.
    pub const FOCAL_BASELINE: Method = Method {
        semantics_mode: SemanticsMode::Fixed,
        ft_objective: FineTuneObjective::Focal,
    };

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        TrainConfig {
            semantics_mode: self.semantics_mode,
            ft_objective: self.ft_objective,
            ..cfg.clone()
        }
    }
}

/// Initialises a model and runs base training on `d_tr`.
pub fn base_model(prep: &Prepared, cfg: &TrainConfig) -> Result<(AlignmentModel, TrainReport)> {
    let mut model = AlignmentModel::init(
        prep.world.spec.feature_dim,
        prep.world.vocab.clone(),
        cfg.semantics_mode,
        init_seed(cfg.seed),
    )?;
    let report = train_base(&prep.bundle.d_tr, &mut model, prep.semantics(), cfg)?;
    Ok((model, report))
}

/// Fine-tunes on `d_ft`, or runs the self-tuning pass over `d_tr` when the
/// split has no few-shot classes.
pub fn second_stage(model: &mut AlignmentModel, prep: &Prepared, cfg: &TrainConfig) -> Result<TrainReport> {
    if prep.semantics().few_count() == 0 {
        zsd_self_tune(model, &prep.bundle.d_tr, prep.semantics(), cfg)
    } else {
        fine_tune(model, &prep.bundle.d_ft, prep.semantics(), cfg)
    }
}

/// Modes that the class split supports.
pub fn supported_modes(semantics: &SemanticMatrix) -> Vec<EvalMode> {
    EvalMode::ALL
        .into_iter()
        .filter(|m| m.reported_groups().iter().all(|g| semantics.count(*g) > 0))
        .collect()
}

/// Non-generalized mode covering every novel class of the split.
pub fn novel_mode(semantics: &SemanticMatrix) -> Result<EvalMode> {
    match (semantics.few_count() > 0, semantics.unseen_count() > 0) {
        (true, true) => Ok(EvalMode::Asd),
        (true, false) => Ok(EvalMode::Fsd),
        (false, true) => Ok(EvalMode::Zsd),
        (false, false) => Err(Error::Config("the split has no novel classes".into())),
    }
}

pub fn evaluate_modes(
    model: &AlignmentModel,
    prep: &Prepared,
    modes: &[EvalMode],
    thresholds: &Thresholds,
) -> Result<BTreeMap<EvalMode, EvalReport>> {
    modes
        .iter()
        .map(|&m| Ok((m, evaluate(model, &prep.bundle.d_ts, prep.semantics(), m, thresholds)?)))
        .collect()
}

/// Reports before and after the second stage for one method and seed.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub base: BTreeMap<EvalMode, EvalReport>,
    pub tuned: BTreeMap<EvalMode, EvalReport>,
    pub base_train: TrainReport,
    pub tune_train: TrainReport,
}

pub fn run_method(prep: &Prepared, settings: &RunSettings, method: Method, seed: u64) -> Result<MethodOutcome> {
    let cfg = TrainConfig { seed, ..method.apply(&settings.train) };
    let modes = supported_modes(prep.semantics());
    let (mut model, base_train) = base_model(prep, &cfg)?;
    let base = evaluate_modes(&model, prep, &modes, &settings.thresholds)?;
    let tune_train = second_stage(&mut model, prep, &cfg)?;
    let tuned = evaluate_modes(&model, prep, &modes, &settings.thresholds)?;
    Ok(MethodOutcome {
        base,
        tuned,
        base_train,
        tune_train,
    })
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("median"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

/// One (beta, lambda) cell: novel mAP per seed and its median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub beta: f64,
    pub lambda: f64,
    pub per_seed: Vec<f64>,
    pub median: f64,
}

/// Fine-tunes the full method for every (beta, lambda) pair and reports the
/// novel-class mAP. The base model for each seed is shared across cells.
pub fn run_sweep(settings: &RunSettings, seeds: &[u64], betas: &[f64], lambdas: &[f64]) -> Result<Vec<SweepCell>> {
    if seeds.is_empty() || betas.is_empty() || lambdas.is_empty() {
        return Err(Error::Config("sweep needs at least one seed, beta and lambda".into()));
    }
    let per_seed: Vec<Vec<f64>> = seeds
        .par_iter()
        .map(|&seed| {
            let prep = prepare(&settings.world, &settings.sizes, settings.shots, seed)?;
            let mode = novel_mode(prep.semantics())?;
            let cfg = TrainConfig { seed, ..Method::FULL.apply(&settings.train) };
            let (base, _) = base_model(&prep, &cfg)?;
            let mut out = Vec::with_capacity(betas.len() * lambdas.len());
            for &beta in betas {
                for &lambda in lambdas {
                    let mut cell_cfg = cfg.clone();
                    cell_cfg.loss.beta = beta;
                    cell_cfg.loss.lambda_mix = lambda;
                    cell_cfg.loss.validate()?;
                    let mut model = base.clone();
                    second_stage(&mut model, &prep, &cell_cfg)?;
                    let report = evaluate(&model, &prep.bundle.d_ts, prep.semantics(), mode, &settings.thresholds)?;
                    out.push(report.novel_map(prep.semantics()).unwrap_or(0.0));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::with_capacity(betas.len() * lambdas.len());
    for (bi, &beta) in betas.iter().enumerate() {
        for (li, &lambda) in lambdas.iter().enumerate() {
            let idx = bi * lambdas.len() + li;
            let values: Vec<f64> = per_seed.iter().map(|v| v[idx]).collect();
            cells.push(SweepCell {
                beta,
                lambda,
                median: median(&values)?,
                per_seed: values,
            });
        }
    }
    Ok(cells)
}

/// Sweep table laid out with one row per beta and one column per lambda,
/// values in percent.
pub fn sweep_table(cells: &[SweepCell], betas: &[f64], lambdas: &[f64]) -> String {
    let mut out = String::from("beta");
    for l in lambdas {
        out.push_str(&format!(",lambda={l}"));
    }
    out.push('\n');
    for &b in betas {
        out.push_str(&b.to_string());
        for &l in lambdas {
            let v = cells
                .iter()
                .find(|c| c.beta == b && c.lambda == l)
                .map(|c| format!("{:.2}", c.median * 100.0))
                .unwrap_or_default();
            out.push(',');
            out.push_str(&v);
        }
        out.push('\n');
    }
    out
}
