//! Flat experiment configuration. A TOML file of `key = value` pairs is
//! layered over the built-in defaults, then `ANYSHOT_<KEY>` environment
//! variables, then explicit `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Thresholds;
use crate::experiment::RunSettings;
use crate::loss::{FlatLossConfig, LossConfig};
use crate::semantics::SemanticsMode;
use crate::synthdata::{SplitSizes, WorldSpec};
use crate::trainer::{FineTuneObjective, TrainConfig};

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "ANYSHOT_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seen: usize,
    pub few: usize,
    pub unseen: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub noise_sigma: f64,
    pub grid: usize,
    pub shared_weight: f64,
    pub background_spread: f64,
    pub feature_scale: f64,

    pub train_scenes: usize,
    pub test_scenes: usize,
    pub max_objects: usize,
    pub ft_seen_objects: usize,
    pub ft_seen_shots: bool,
    pub shots: usize,

    pub epochs_base: usize,
    pub epochs_ft: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_scenes: usize,
    pub semantics_mode: SemanticsMode,
    pub ft_objective: FineTuneObjective,

    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// `dynamic` or `fixed`.
    pub p_star_mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_star_value: Option<f64>,
    pub epsilon: f64,

    pub score_threshold: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    pub recall_k: usize,

    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub sweep_betas: Vec<f64>,
    pub sweep_lambdas: Vec<f64>,
    pub curve_samples: usize,
    pub curve_betas: Vec<f64>,
    /// `alpha` and `gamma` used when tracing loss curves.
    pub curve_alpha: f64,
    pub curve_gamma: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let world = WorldSpec::default();
        let sizes = SplitSizes::default();
        let train = TrainConfig::default();
        let loss = FlatLossConfig::from(LossConfig::default());
        let th = Thresholds::default();
        Self {
            seen: world.seen,
            few: world.few,
            unseen: world.unseen,
            feature_dim: world.feature_dim,
            embed_dim: world.embed_dim,
            vocab_size: world.vocab_size,
            noise_sigma: world.noise_sigma,
            grid: world.grid,
            shared_weight: world.shared_weight,
            background_spread: world.background_spread,
            feature_scale: world.feature_scale,
            train_scenes: sizes.train_scenes,
            test_scenes: sizes.test_scenes,
            max_objects: sizes.max_objects,
            ft_seen_objects: sizes.ft_seen_objects,
            ft_seen_shots: sizes.ft_seen_shots,
            shots: 5,
            epochs_base: train.epochs_base,
            epochs_ft: train.epochs_ft,
            learning_rate: train.learning_rate,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            batch_scenes: train.batch_scenes,
            semantics_mode: train.semantics_mode,
            ft_objective: train.ft_objective,
            alpha: loss.alpha,
            beta: loss.beta,
            gamma: loss.gamma,
            lambda: loss.lambda,
            p_star_mode: loss.p_star_mode,
            p_star_value: loss.p_star_value,
            epsilon: loss.epsilon,
            score_threshold: th.score,
            nms_iou: th.nms_iou,
            match_iou: th.match_iou,
            recall_k: th.recall_k,
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            sweep_betas: vec![0.0, 1.0, 2.0, 5.0],
            sweep_lambdas: vec![0.0, 0.1, 0.5, 1.0],
            curve_samples: 200,
            curve_betas: vec![0.0, 1.0, 2.0, 5.0],
            curve_alpha: 1.0,
            curve_gamma: 0.0,
        }
    }
}

fn config_err(what: impl std::fmt::Display) -> Error {
    Error::Config(what.to_string())
}

/// Parses an override value as a TOML literal. Bare words become strings and
/// comma lists become arrays when the key holds an array.
fn parse_value(raw: &str, current: Option<&toml::Value>) -> toml::Value {
    let raw = raw.trim();
    if let Ok(mut t) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = t.remove("v") {
            if !(matches!(current, Some(toml::Value::Array(_))) && !v.is_array()) {
                return v;
            }
        }
    }
    if matches!(current, Some(toml::Value::Array(_))) {
        let items = raw
            .trim_matches(|c| c == '[' || c == ']')
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| parse_value(s, None))
            .collect();
        return toml::Value::Array(items);
    }
    toml::Value::String(raw.to_string())
}

/// Config assembled layer by layer.
#[derive(Debug, Clone)]
pub struct ConfigBuilder {
    table: toml::Table,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        let table = toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialize");
        Self { table }
    }
}

impl ConfigBuilder {
    pub fn file(mut self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let parsed: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            path: path.to_path_buf(),
            msg: e.message().to_string(),
        })?;
        self.table.extend(parsed);
        Ok(self)
    }

    /// Applies every `ANYSHOT_<KEY>` variable in `vars`; `<KEY>` is matched
    /// case-insensitively.
    pub fn env<I: IntoIterator<Item = (String, String)>>(mut self, vars: I) -> Self {
        for (name, value) in vars {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                let v = parse_value(&value, self.table.get(&key));
                self.table.insert(key, v);
            }
        }
        self
    }

    /// Applies one `key=value` override.
    pub fn set(mut self, assignment: &str) -> Result<Self> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim().to_string();
        let v = parse_value(value, self.table.get(&key));
        self.table.insert(key, v);
        Ok(self)
    }

    pub fn build(self) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::Value::Table(self.table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds must not be empty"));
        }
        if self.curve_samples < 2 {
            return Err(config_err("curve_samples must be >= 2"));
        }
        if self.curve_betas.is_empty() {
            return Err(config_err("curve_betas must not be empty"));
        }
        if self.shots == 0 {
            return Err(config_err("shots must be >= 1"));
        }
        self.settings()?;
        Ok(())
    }

    pub fn world(&self) -> WorldSpec {
        WorldSpec {
            seen: self.seen,
            few: self.few,
            unseen: self.unseen,
            feature_dim: self.feature_dim,
            embed_dim: self.embed_dim,
            vocab_size: self.vocab_size,
            noise_sigma: self.noise_sigma,
            grid: self.grid,
            shared_weight: self.shared_weight,
            background_spread: self.background_spread,
            feature_scale: self.feature_scale,
        }
    }

    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train_scenes: self.train_scenes,
            test_scenes: self.test_scenes,
            max_objects: self.max_objects,
            ft_seen_objects: self.ft_seen_objects,
            ft_seen_shots: self.ft_seen_shots,
        }
    }

    pub fn loss(&self) -> Result<LossConfig> {
        LossConfig::try_from(FlatLossConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            lambda: self.lambda,
            p_star_mode: self.p_star_mode.clone(),
            p_star_value: self.p_star_value,
            epsilon: self.epsilon,
        })
    }

    /// Training settings for run seed `seed`.
    pub fn train(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs_base: self.epochs_base,
            epochs_ft: self.epochs_ft,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            batch_scenes: self.batch_scenes,
            seed,
            semantics_mode: self.semantics_mode,
            ft_objective: self.ft_objective,
            loss: self.loss()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn thresholds(&self) -> Result<Thresholds> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.score_threshold) || !unit(self.nms_iou) || !(self.match_iou > 0.0 && self.match_iou <= 1.0) {
            return Err(config_err("thresholds must lie in [0, 1]"));
        }
        if self.recall_k == 0 {
            return Err(config_err("recall_k must be >= 1"));
        }
        Ok(Thresholds {
            score: self.score_threshold,
            nms_iou: self.nms_iou,
            match_iou: self.match_iou,
            recall_k: self.recall_k,
        })
    }

    pub fn settings(&self) -> Result<RunSettings> {
        let world = self.world();
        world.validate()?;
        Ok(RunSettings {
            world,
            sizes: self.sizes(),
            shots: self.shots,
            train: self.train(self.seeds.first().copied().unwrap_or(0))?,
            thresholds: self.thresholds()?,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::PStarMode;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_carry_recommended_loss() {
        let cfg = ConfigBuilder::default().build().unwrap();
        let loss = cfg.loss().unwrap();
        assert_eq!((loss.alpha, loss.gamma, loss.beta, loss.lambda_mix), (0.25, 2.0, 5.0, 0.1));
        assert_eq!(loss.p_star_mode, PStarMode::Dynamic);
        assert_eq!(cfg.settings().unwrap(), RunSettings::default());
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "beta = 2\nlambda = 0.5\nseeds = [1, 2]\n").unwrap();
        let cfg = ConfigBuilder::default()
            .file(&path)
            .unwrap()
            .env(env(&[("ANYSHOT_LAMBDA", "0.3"), ("ANYSHOT_OUT_DIR", "/tmp/x"), ("OTHER", "1")]))
            .set("seeds=3,4,5")
            .unwrap()
            .set("p_star_mode=fixed")
            .unwrap()
            .set("p_star_value = 0.5")
            .unwrap()
            .build()
            .unwrap();
        assert_eq!(cfg.beta, 2.0);
        assert_eq!(cfg.lambda, 0.3);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.seeds, vec![3, 4, 5]);
        assert_eq!(cfg.loss().unwrap().p_star_mode, PStarMode::Fixed(0.5));
    }

    #[test]
    fn bad_configs_rejected() {
        let b = ConfigBuilder::default;
        assert!(b().set("seeds=[]").unwrap().build().is_err());
        assert!(b().set("no_such_key=1").unwrap().build().is_err());
        assert!(b().set("beta").is_err());
        assert!(b().set("lambda=1.5").unwrap().build().is_err());
        assert!(b().set("epochs_ft=0").unwrap().build().is_err());
        assert!(b().set("p_star_mode=fixed").unwrap().build().is_err());
        assert!(b().set("semantics_mode=frozen").unwrap().build().is_err());
        assert!(b().file(Path::new("/definitely/not/here.toml")).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ConfigBuilder::default().set("few=0").unwrap().build().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, cfg.to_toml()).unwrap();
        assert_eq!(ConfigBuilder::default().file(&path).unwrap().build().unwrap(), cfg);
    }
}
