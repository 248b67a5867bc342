//! Finite-difference checks of the full training objective with respect to
//! the bridge matrix, the semantic metric and the anchor features.

use anyshot::alignment::AlignmentModel;
use anyshot::loss::{LossConfig, PStarMode};
use anyshot::semantics::SemanticsMode;
use anyshot::synthdata::{assemble_bundle, generate_world, Scene, SplitSizes, WorldSpec};
use anyshot::trainer::{objective_gradients, objective_value};
use ndarray::Array2;

const STEP: f64 = 1e-6;

fn small_world() -> (anyshot::synthdata::SyntheticWorld, Vec<Scene>) {
    let spec = WorldSpec {
        seen: 3,
        few: 1,
        unseen: 1,
        feature_dim: 5,
        embed_dim: 4,
        vocab_size: 6,
        grid: 4,
        ..WorldSpec::default()
    };
    let world = generate_world(&spec, 3).unwrap();
    let sizes = SplitSizes { train_scenes: 2, test_scenes: 2, ..SplitSizes::default() };
    let bundle = assemble_bundle(&world, &sizes, 2).unwrap();
    let mut scenes = bundle.d_ft.clone();
    scenes.extend(bundle.d_tr.iter().cloned());
    (world, scenes)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn check_param(
    model: &AlignmentModel,
    analytic: &Array2<f64>,
    value_at: impl Fn(&AlignmentModel) -> f64,
    select: impl Fn(&mut AlignmentModel) -> &mut Array2<f64>,
) {
    let (rows, cols) = analytic.dim();
    for i in 0..rows {
        for j in 0..cols {
            let mut up = model.clone();
            select(&mut up)[[i, j]] += STEP;
            let mut down = model.clone();
            select(&mut down)[[i, j]] -= STEP;
            let fd = (value_at(&up) - value_at(&down)) / (2.0 * STEP);
            let err = rel_err(analytic[[i, j]], fd);
            assert!(
                err < 1e-4 || (analytic[[i, j]] - fd).abs() < 1e-8,
                "entry ({i},{j}): analytic {} vs fd {fd}",
                analytic[[i, j]]
            );
        }
    }
}

fn run(mode: SemanticsMode, focal: bool, loss: LossConfig) {
    let (world, scenes) = small_world();
    let refs: Vec<&Scene> = scenes.iter().collect();
    let subset = world.semantics.all_indices();
    let model = AlignmentModel::init(5, world.vocab.clone(), mode, 9).unwrap();
    let value = |m: &AlignmentModel| objective_value(m, &world.semantics, &subset, &refs, &loss, focal).unwrap();
    let (v, grads) = objective_gradients(&model, &world.semantics, &subset, &refs, &loss, focal).unwrap();
    assert_eq!(v, value(&model));
    check_param(&model, &grads.bridge, value, |m| &mut m.bridge);
    match mode {
        SemanticsMode::Trainable => check_param(&model, &grads.metric, value, |m| &mut m.metric.metric),
        SemanticsMode::Fixed => assert!(grads.metric.iter().all(|&g| g == 0.0)),
    }
}

// Dynamic p* is held fixed when differentiating, so the checks use a fixed
// penalty level for the mixed objective.
fn mixed_loss() -> LossConfig {
    LossConfig {
        p_star_mode: PStarMode::Fixed(0.6),
        lambda_mix: 0.3,
        ..LossConfig::default()
    }
}

#[test]
fn focal_objective_trainable() {
    run(SemanticsMode::Trainable, true, LossConfig::default());
}

#[test]
fn focal_objective_fixed() {
    run(SemanticsMode::Fixed, true, LossConfig::default());
}

#[test]
fn mixed_objective_trainable() {
    run(SemanticsMode::Trainable, false, mixed_loss());
}

#[test]
fn feature_gradient_matches_finite_differences() {
    let (world, scenes) = small_world();
    let subset = world.semantics.all_indices();
    let loss = mixed_loss();
    let model = AlignmentModel::init(5, world.vocab.clone(), SemanticsMode::Trainable, 9).unwrap();
    let scene = &scenes[0];
    let (_, grads) = objective_gradients(&model, &world.semantics, &subset, &[scene], &loss, false).unwrap();
    for a in 0..scene.anchor_features.nrows() {
        for k in 0..scene.anchor_features.ncols() {
            let shifted = |h: f64| {
                let mut s = scene.clone();
                s.anchor_features[[a, k]] += h;
                objective_value(&model, &world.semantics, &subset, &[&s], &loss, false).unwrap()
            };
            let fd = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
            let an = grads.features[[a, k]];
            assert!(rel_err(an, fd) < 1e-4 || (an - fd).abs() < 1e-8, "anchor {a} dim {k}: {an} vs {fd}");
        }
    }
}
