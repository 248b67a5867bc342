//! Visual-semantic compatibility scorer `p = sigmoid(f^T U g(W))` and its
//! parameter gradients.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantics::{
    apply_semantics, MetricParams, SemanticMatrix, SemanticsMode, Vocabulary,
};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Trainable state: the bridge `U` (`n x d`) and the metric `M`; the
/// vocabulary `D` is carried along but never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    pub bridge: Array2<f64>,
    pub metric: MetricParams,
    pub vocab: Vocabulary,
    pub mode: SemanticsMode,
}

/// Gradients of a scalar objective with respect to the scorer inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGradients {
    pub bridge: Array2<f64>,
    pub metric: Array2<f64>,
    /// One row per input feature.
    pub features: Array2<f64>,
}

impl AlignmentModel {
    /// Random initialization: `U ~ U[-1/sqrt(n), 1/sqrt(n)]`,
    /// `M ~ U[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn init(n: usize, vocab: Vocabulary, mode: SemanticsMode, seed: u64) -> Result<Self> {
        let d = vocab.dim();
        if n == 0 || d == 0 {
            return Err(Error::Dimension("feature and embedding dims must be positive".into()));
        }
        let v = vocab.size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bu = 1.0 / (n as f64).sqrt();
        let bm = 1.0 / (d as f64).sqrt();
        let bridge = Array2::from_shape_fn((n, d), |_| rng.random_range(-bu..=bu));
        let metric = Array2::from_shape_fn((d, v), |_| rng.random_range(-bm..=bm));
        Ok(Self {
            bridge,
            metric: MetricParams { metric },
            vocab,
            mode,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.bridge.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.bridge.ncols()
    }

    fn check_semantics(&self, semantics: &SemanticMatrix) -> Result<()> {
        if semantics.dim() != self.embed_dim() {
            return Err(Error::Dimension(format!(
                "semantics have d = {}, model expects {}",
                semantics.dim(),
                self.embed_dim()
            )));
        }
        Ok(())
    }

    /// `g(W)` for the selected classes (`d x C`).
    pub fn prototypes(&self, semantics: &SemanticMatrix, subset: &[usize]) -> Result<Array2<f64>> {
        self.check_semantics(semantics)?;
        if subset.is_empty() {
            return Err(Error::EmptyInput("class subset"));
        }
        apply_semantics(semantics, subset, self.mode, &self.metric, &self.vocab)
    }

    /// Class embeddings in visual space, `U g(W)` (`n x C`).
    pub fn class_filters(&self, semantics: &SemanticMatrix, subset: &[usize]) -> Result<Array2<f64>> {
        Ok(self.bridge.dot(&self.prototypes(semantics, subset)?))
    }

    /// Scores of one feature against the selected classes.
    pub fn score(
        &self,
        feature: ArrayView1<'_, f64>,
        semantics: &SemanticMatrix,
        subset: &[usize],
    ) -> Result<Array1<f64>> {
        if feature.len() != self.feature_dim() {
            return Err(Error::Dimension(format!(
                "feature has length {}, model expects {}",
                feature.len(),
                self.feature_dim()
            )));
        }
        Ok(feature.dot(&self.class_filters(semantics, subset)?).mapv(sigmoid))
    }

    /// Scores for a batch of features (`A x n`), returned as `A x C`.
    pub fn score_batch(
        &self,
        features: &Array2<f64>,
        semantics: &SemanticMatrix,
        subset: &[usize],
    ) -> Result<Array2<f64>> {
        let filters = self.class_filters(semantics, subset)?;
        scores_with_filters(features, &filters)
    }

    /// Back-propagates `upstream = dL/dp` (`A x C`) through the scorer.
    pub fn score_gradients(
        &self,
        features: &Array2<f64>,
        semantics: &SemanticMatrix,
        subset: &[usize],
        upstream: &Array2<f64>,
    ) -> Result<ScoreGradients> {
        let protos = self.prototypes(semantics, subset)?;
        let filters = self.bridge.dot(&protos);
        let scores = scores_with_filters(features, &filters)?;
        if upstream.dim() != scores.dim() {
            return Err(Error::Dimension(format!(
                "upstream is {:?}, scores are {:?}",
                upstream.dim(),
                scores.dim()
            )));
        }
        // dL/dz = dL/dp * p (1 - p)
        let dz = upstream * &scores.mapv(|p| p * (1.0 - p));
        let dz_f = features.t().dot(&dz); // n x C
        let bridge = dz_f.dot(&protos.t());
        let features_grad = dz.dot(&filters.t());
        let metric = match self.mode {
            SemanticsMode::Fixed => Array2::zeros(self.metric.metric.raw_dim()),
            SemanticsMode::Trainable => {
                let dg = self.bridge.t().dot(&dz_f); // d x C
                let dh = dg * &protos.mapv(|g| 1.0 - g * g);
                let w = semantics.select(subset);
                w.dot(&dh.t()).dot(&self.vocab.atoms().t())
            }
        };
        let grads = ScoreGradients {
            bridge,
            metric,
            features: features_grad,
        };
        if grads.bridge.iter().chain(grads.metric.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numerical("score gradients"));
        }
        Ok(grads)
    }

    /// Order-sensitive checksum of all trainable parameters.
    pub fn checksum(&self) -> f64 {
        self.bridge
            .iter()
            .chain(self.metric.metric.iter())
            .enumerate()
            .map(|(i, x)| x * (1.0 + (i % 97) as f64 / 97.0))
            .sum()
    }

    pub fn shapes(&self) -> [(usize, usize); 3] {
        [
            self.bridge.dim(),
            self.metric.metric.dim(),
            self.vocab.atoms().dim(),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&Checkpoint::from(self))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ck.try_into()
    }
}

pub fn scores_with_filters(features: &Array2<f64>, filters: &Array2<f64>) -> Result<Array2<f64>> {
    if features.ncols() != filters.nrows() {
        return Err(Error::Dimension(format!(
            "features have length {}, filters expect {}",
            features.ncols(),
            filters.nrows()
        )));
    }
    Ok(features.dot(filters).mapv(sigmoid))
}

/// Checkpoint file layout (JSON): dimensions, semantics mode and the three
/// matrices flattened row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub semantics_mode: SemanticsMode,
    pub bridge: Vec<f64>,
    pub metric: Vec<f64>,
    pub vocab: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "anyshot-alignment";

impl From<&AlignmentModel> for Checkpoint {
    fn from(m: &AlignmentModel) -> Self {
        let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            feature_dim: m.feature_dim(),
            embed_dim: m.embed_dim(),
            vocab_size: m.vocab.size(),
            semantics_mode: m.mode,
            bridge: flat(&m.bridge),
            metric: flat(&m.metric.metric),
            vocab: flat(m.vocab.atoms()),
        }
    }
}

impl TryFrom<Checkpoint> for AlignmentModel {
    type Error = Error;

    fn try_from(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != 1 {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let shaped = |v: Vec<f64>, r: usize, c: usize, what: &str| {
            Array2::from_shape_vec((r, c), v)
                .map_err(|_| Error::Dimension(format!("checkpoint {what} is not {r}x{c}")))
        };
        let bridge = shaped(ck.bridge, ck.feature_dim, ck.embed_dim, "bridge")?;
        let metric = shaped(ck.metric, ck.embed_dim, ck.vocab_size, "metric")?;
        let vocab = shaped(ck.vocab, ck.vocab_size, ck.embed_dim, "vocab")?;
        if bridge.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("checkpoint bridge"));
        }
        Ok(AlignmentModel {
            bridge,
            metric: MetricParams::new(metric)?,
            vocab: Vocabulary::new(vocab)?,
            mode: ck.semantics_mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::Partition;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn semantics3() -> SemanticMatrix {
        SemanticMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            array![[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]],
            vec![Partition::Seen, Partition::Seen, Partition::Unseen],
        )
        .unwrap()
    }

    fn model(bridge: Array2<f64>, mode: SemanticsMode) -> AlignmentModel {
        let vocab = Vocabulary::new(array![[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]]).unwrap();
        AlignmentModel {
            bridge,
            metric: MetricParams::new(array![[0.4, -0.2, 0.3], [0.1, 0.7, -0.5]]).unwrap(),
            vocab,
            mode,
        }
    }

    #[test]
    fn zero_feature_scores_half() {
        let m = model(Array2::eye(2), SemanticsMode::Trainable);
        let s = m.score(Array1::zeros(2).view(), &semantics3(), &[0, 1, 2]).unwrap();
        assert!(s.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn identity_bridge_alignment() {
        let w = semantics3();
        let m = model(Array2::eye(2), SemanticsMode::Fixed);
        let f = w.column(2).to_owned();
        let s = m.score(f.view(), &w, &[2]).unwrap();
        assert_abs_diff_eq!(s[0], sigmoid(1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(s[0], 0.73106, epsilon = 1e-5);
    }

    #[test]
    fn hand_computed_scores() {
        let w = semantics3();
        let m = model(array![[2.0, -1.0], [0.5, 1.0]], SemanticsMode::Fixed);
        let f = array![1.0, 2.0];
        // f^T U = [3, 1]; columns: (1,0), (0,1), (1,1)/sqrt2
        let s = m.score(f.view(), &w, &[0, 1, 2]).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let expected = [sigmoid(3.0), sigmoid(1.0), sigmoid(4.0 * r)];
        for (a, b) in s.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn dimension_errors() {
        let m = model(Array2::eye(2), SemanticsMode::Fixed);
        assert!(matches!(
            m.score(Array1::zeros(3).view(), &semantics3(), &[0]),
            Err(Error::Dimension(_))
        ));
        assert!(m.score(Array1::zeros(2).view(), &semantics3(), &[]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = model(array![[0.3, -0.2], [0.1, 0.4], [0.7, 0.2]], SemanticsMode::Trainable);
        let f = array![[0.5, -1.0, 2.0], [1.0, 0.0, -0.3]];
        let g = m.score_gradients(&f, &semantics3(), &[0, 1, 2], &Array2::zeros((2, 3))).unwrap();
        assert!(g.bridge.iter().chain(g.metric.iter()).chain(g.features.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn fixed_mode_has_zero_metric_gradient() {
        let m = model(array![[0.3, -0.2], [0.1, 0.4], [0.7, 0.2]], SemanticsMode::Fixed);
        let f = array![[0.5, -1.0, 2.0]];
        let g = m.score_gradients(&f, &semantics3(), &[0, 2], &array![[1.0, -2.0]]).unwrap();
        assert!(g.metric.iter().all(|&x| x == 0.0));
        assert!(g.bridge.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn adding_classes_keeps_parameter_shapes() {
        let m = model(Array2::eye(2), SemanticsMode::Trainable);
        let shapes = m.shapes();
        let f = array![[0.2, 0.3]];
        assert_eq!(m.score_batch(&f, &semantics3(), &[0, 1]).unwrap().ncols(), 2);
        assert_eq!(m.score_batch(&f, &semantics3(), &[0, 1, 2]).unwrap().ncols(), 3);
        assert_eq!(m.shapes(), shapes);
    }

    #[test]
    fn checkpoint_round_trip() {
        let vocab = Vocabulary::new(Array2::from_shape_fn((5, 3), |(i, j)| (i + 2 * j + 1) as f64)).unwrap();
        let m = AlignmentModel::init(4, vocab, SemanticsMode::Trainable, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        let back = AlignmentModel::load(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let vocab = Vocabulary::new(Array2::ones((6, 4))).unwrap();
        let a = AlignmentModel::init(9, vocab.clone(), SemanticsMode::Fixed, 3).unwrap();
        let b = AlignmentModel::init(9, vocab.clone(), SemanticsMode::Fixed, 3).unwrap();
        let c = AlignmentModel::init(9, vocab, SemanticsMode::Fixed, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.bridge.iter().all(|x| x.abs() <= 1.0 / 3.0));
        assert!(a.metric.metric.iter().all(|x| x.abs() <= 0.5));
    }
}
