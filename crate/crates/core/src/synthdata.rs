//! Synthetic any-shot detection worlds.
//!
//! Classes get unit-norm embeddings that share a common direction (as word
//! vectors tend to). A hidden linear map turns an embedding into the mean
//! visual feature of that class, so a model that learns the inverse map on
//! seen classes can in principle score classes it never saw. Background
//! anchors are drawn around embeddings pointing away from the shared
//! direction.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detector::{match_anchors, AnchorLabel, BoundingBox, NEGATIVE_IOU, POSITIVE_IOU};
use crate::error::{Error, Result};
use crate::semantics::{l2_normalize, Partition, SemanticMatrix, Vocabulary};

/// Class counts and dimensions of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seen: usize,
    pub few: usize,
    pub unseen: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub noise_sigma: f64,
    pub grid: usize,
    /// Weight of the direction shared by all class embeddings.
    pub shared_weight: f64,
    /// Scale of the random part of background embeddings, which otherwise
    /// point away from the shared direction.
    pub background_spread: f64,
    /// Overall magnitude of anchor features. Multiplies both the hidden
    /// projection and the noise, so it leaves the signal-to-noise ratio alone.
    pub feature_scale: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seen: 13,
            few: 2,
            unseen: 2,
            feature_dim: 64,
            embed_dim: 32,
            vocab_size: 64,
            noise_sigma: 0.15,
            grid: 8,
            shared_weight: 0.3,
            background_spread: 0.5,
            feature_scale: 4.0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seen < 1 {
            return Err(Error::Config("at least one seen class is required".into()));
        }
        if self.embed_dim < 2 || self.feature_dim < 2 {
            return Err(Error::Config("feature and embedding dims must be >= 2".into()));
        }
        if self.vocab_size < 1 || self.grid < 1 {
            return Err(Error::Config("vocabulary size and grid must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !(self.shared_weight >= 0.0 && self.shared_weight.is_finite()) {
            return Err(Error::Config("shared_weight must be >= 0".into()));
        }
        if !(self.background_spread >= 0.0 && self.background_spread.is_finite()) {
            return Err(Error::Config("background_spread must be >= 0".into()));
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return Err(Error::Config("feature_scale must be > 0".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.seen + self.few + self.unseen
    }

    /// ZSD, FSD or ASD depending on which novel groups exist.
    pub fn setting(&self) -> &'static str {
        match (self.few > 0, self.unseen > 0) {
            (true, true) => "ASD",
            (true, false) => "FSD",
            (false, true) => "ZSD",
            (false, false) => "seen-only",
        }
    }
}

/// Stream-splitting seed derivation (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

const STREAM_WORLD: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_FT: u64 = 3;
const STREAM_TEST: u64 = 4;
const STREAM_SCENE: u64 = 5;
const STREAM_FT_SEEN: u64 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub semantics: SemanticMatrix,
    /// Semantic-to-visual map (`n x d`); never shown to a model.
    pub hidden_projection: Array2<f64>,
    pub shared_direction: Array1<f64>,
    pub vocab: Vocabulary,
    pub seed: u64,
}

/// Builds a world: embeddings, hidden projection and vocabulary atoms.
pub fn generate_world(spec: &WorldSpec, seed: u64) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = rng_for(seed, STREAM_WORLD, 0);
    let (d, n) = (spec.embed_dim, spec.feature_dim);
    let shared = random_unit(&mut rng, d)?;
    let t = spec.total();
    let mut vectors = Array2::zeros((d, t));
    for c in 0..t {
        let w = perturbed(&mut rng, &shared, spec.shared_weight)?;
        vectors.column_mut(c).assign(&w);
    }
    let mut names = Vec::with_capacity(t);
    let mut partition = Vec::with_capacity(t);
    for (group, count) in [
        (Partition::Seen, spec.seen),
        (Partition::FewShot, spec.few),
        (Partition::Unseen, spec.unseen),
    ] {
        for _ in 0..count {
            names.push(format!("class{:02}", names.len()));
            partition.push(group);
        }
    }
    let semantics = SemanticMatrix::new(names, vectors, partition)?;
    let scale = spec.feature_scale / (n as f64).sqrt();
    let hidden_projection = Array2::from_shape_fn((n, d), |_| gaussian(&mut rng) * scale);
    let atoms = Array2::from_shape_fn((spec.vocab_size, d), |_| gaussian(&mut rng));
    let vocab = Vocabulary::new(atoms)?;
    Ok(SyntheticWorld {
        spec: spec.clone(),
        semantics,
        hidden_projection,
        shared_direction: shared,
        vocab,
        seed,
    })
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Result<Array1<f64>> {
    let v = Array1::from_shape_fn(d, |_| gaussian(rng));
    l2_normalize(v.view())
}

/// `normalize(weight * direction + z)` with `z` an isotropic unit-scale draw.
fn perturbed(rng: &mut ChaCha8Rng, direction: &Array1<f64>, weight: f64) -> Result<Array1<f64>> {
    let d = direction.len();
    let z = Array1::from_shape_fn(d, |_| gaussian(rng) / (d as f64).sqrt());
    l2_normalize((direction * weight + z).view())
}

impl SyntheticWorld {
    /// Noise-free visual feature of a class.
    pub fn class_mean(&self, class: usize) -> Array1<f64> {
        self.hidden_projection.dot(&self.semantics.column(class))
    }

    /// Grid anchors, row-major from the top-left cell.
    pub fn anchors(&self) -> Vec<BoundingBox> {
        grid_anchors(self.spec.grid)
    }

    fn object_feature(&self, class: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let sigma = self.spec.noise_sigma * self.spec.feature_scale;
        let mut f = self.class_mean(class);
        if sigma > 0.0 {
            f.mapv_inplace(|x| x + sigma * gaussian(rng));
        }
        f
    }

    fn background_feature(&self, rng: &mut ChaCha8Rng) -> Result<Array1<f64>> {
        let d = self.shared_direction.len();
        let spread = self.spec.background_spread;
        let z = Array1::from_shape_fn(d, |_| gaussian(rng) * spread / (d as f64).sqrt());
        let b = l2_normalize((&z - &self.shared_direction).view())?;
        let sigma = self.spec.noise_sigma * self.spec.feature_scale;
        let mut f = self.hidden_projection.dot(&b);
        if sigma > 0.0 {
            f.mapv_inplace(|x| x + sigma * gaussian(rng));
        }
        Ok(f)
    }

    /// Random scene with `object_count` objects of any class.
    pub fn generate_scene(&self, object_count: usize, seed: u64) -> Result<Scene> {
        let mut rng = rng_for(seed, STREAM_SCENE, 0);
        let t = self.semantics.num_classes();
        let classes: Vec<usize> = (0..object_count).map(|_| rng.random_range(0..t)).collect();
        self.scene_with_classes(&classes, &mut rng)
    }

    /// Places one object per entry of `classes` on distinct grid cells.
    pub fn scene_with_classes(&self, classes: &[usize], rng: &mut ChaCha8Rng) -> Result<Scene> {
        let g = self.spec.grid;
        if classes.len() > g * g {
            return Err(Error::Config(format!(
                "{} objects do not fit on a {g}x{g} grid",
                classes.len()
            )));
        }
        let anchors = self.anchors();
        let mut cells: Vec<usize> = (0..g * g).collect();
        cells.shuffle(rng);
        let cell = 1.0 / g as f64;
        let mut boxes = Vec::with_capacity(classes.len());
        for (&class, &c) in classes.iter().zip(&cells) {
            let a = anchors[c];
            let (cx, cy) = ((a.x_min + a.x_max) / 2.0, (a.y_min + a.y_max) / 2.0);
            let cx = cx + rng.random_range(-0.1..0.1) * cell;
            let cy = cy + rng.random_range(-0.1..0.1) * cell;
            let w = rng.random_range(0.85..1.15) * cell;
            let h = rng.random_range(0.85..1.15) * cell;
            let bbox = BoundingBox::new(
                (cx - w / 2.0).max(0.0),
                (cy - h / 2.0).max(0.0),
                (cx + w / 2.0).min(1.0),
                (cy + h / 2.0).min(1.0),
            )?;
            boxes.push((bbox, class));
        }
        self.materialize(boxes, rng)
    }

    /// Labels anchors against `boxes` and draws their features.
    pub fn materialize(&self, boxes: Vec<(BoundingBox, usize)>, rng: &mut ChaCha8Rng) -> Result<Scene> {
        let anchors = self.anchors();
        let labels = match_anchors(&anchors, &boxes, POSITIVE_IOU, NEGATIVE_IOU)?;
        let n = self.spec.feature_dim;
        let mut features = Array2::zeros((anchors.len(), n));
        for (i, label) in labels.iter().enumerate() {
            let f = match label {
                AnchorLabel::Positive { class, .. } => self.object_feature(*class, rng),
                _ => self.background_feature(rng)?,
            };
            features.row_mut(i).assign(&f);
        }
        Ok(Scene {
            boxes,
            anchors,
            anchor_labels: labels,
            anchor_features: features,
        })
    }
}

pub fn grid_anchors(grid: usize) -> Vec<BoundingBox> {
    let cell = 1.0 / grid as f64;
    let mut out = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            out.push(BoundingBox {
                x_min: c as f64 * cell,
                y_min: r as f64 * cell,
                x_max: (c + 1) as f64 * cell,
                y_max: (r + 1) as f64 * cell,
            });
        }
    }
    out
}

/// One synthetic image: ground-truth boxes plus per-anchor features.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub boxes: Vec<(BoundingBox, usize)>,
    pub anchors: Vec<BoundingBox>,
    pub anchor_labels: Vec<AnchorLabel>,
    /// `A x n`, one row per anchor.
    pub anchor_features: Array2<f64>,
}

impl Scene {
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.boxes.iter().map(|(_, c)| *c)
    }
}

/// Scene counts for a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Objects per training/test scene are drawn from `1..=max_objects`.
    pub max_objects: usize,
    /// Seen objects placed next to each few-shot object in `d_ft`.
    pub ft_seen_objects: usize,
    /// Also give every seen class `shots` single-object scenes in `d_ft`.
    #[serde(default)]
    pub ft_seen_shots: bool,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            test_scenes: 120,
            max_objects: 4,
            ft_seen_objects: 1,
            ft_seen_shots: true,
        }
    }
}

/// Base-training, fine-tuning and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub d_tr: Vec<Scene>,
    pub d_ft: Vec<Scene>,
    pub d_ts: Vec<Scene>,
    pub shots: usize,
}

/// Builds the three splits. `d_tr` and `d_ts` depend only on the world seed,
/// so bundles that differ in `shots` share them.
pub fn assemble_bundle(world: &SyntheticWorld, sizes: &SplitSizes, shots: usize) -> Result<DatasetBundle> {
    let sem = &world.semantics;
    let seen = sem.indices(&[Partition::Seen]);
    let few = sem.indices(&[Partition::FewShot]);
    if !few.is_empty() && shots == 0 {
        return Err(Error::Config("few-shot classes need shots >= 1".into()));
    }
    if sizes.max_objects == 0 {
        return Err(Error::Config("max_objects must be >= 1".into()));
    }
    let cells = world.spec.grid * world.spec.grid;
    if sizes.max_objects > cells || sizes.ft_seen_objects + 1 > cells {
        return Err(Error::Config("too many objects per scene for the grid".into()));
    }
    let all = sem.all_indices();
    let random_split = |stream: u64, count: usize, pool: &[usize]| -> Result<Vec<Scene>> {
        (0..count)
            .map(|i| {
                let mut rng = rng_for(world.seed, stream, i as u64);
                let k = rng.random_range(1..=sizes.max_objects);
                let classes: Vec<usize> = (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect();
                world.scene_with_classes(&classes, &mut rng)
            })
            .collect()
    };
    let d_tr = random_split(STREAM_TRAIN, sizes.train_scenes, &seen)?;
    let d_ts = random_split(STREAM_TEST, sizes.test_scenes, &all)?;

    let mut d_ft = Vec::with_capacity(few.len() * shots);
    for (fi, &f) in few.iter().enumerate() {
        for shot in 0..shots {
            let mut rng = rng_for(world.seed, STREAM_FT, (fi * 1_000_003 + shot) as u64);
            let mut classes = vec![f];
            for _ in 0..sizes.ft_seen_objects {
                classes.push(seen[rng.random_range(0..seen.len())]);
            }
            d_ft.push(world.scene_with_classes(&classes, &mut rng)?);
        }
    }
    if !few.is_empty() && sizes.ft_seen_shots {
        for (si, &c) in seen.iter().enumerate() {
            for shot in 0..shots {
                let mut rng = rng_for(world.seed, STREAM_FT_SEEN, (si * 1_000_003 + shot) as u64);
                d_ft.push(world.scene_with_classes(&[c], &mut rng)?);
            }
        }
    }
    let bundle = DatasetBundle {
        d_tr,
        d_ft,
        d_ts,
        shots,
    };
    bundle.check_hygiene(sem)?;
    Ok(bundle)
}

impl DatasetBundle {
    /// Verifies that novel classes stay out of the training splits and that
    /// every few-shot class has exactly `shots` boxes.
    pub fn check_hygiene(&self, sem: &SemanticMatrix) -> Result<()> {
        let part = sem.partition();
        if let Some(c) = self.d_tr.iter().flat_map(Scene::classes).find(|&c| part[c].is_novel()) {
            return Err(Error::Config(format!("novel class {c} in base-training split")));
        }
        if let Some(c) = self.d_ft.iter().flat_map(Scene::classes).find(|&c| part[c] == Partition::Unseen) {
            return Err(Error::Config(format!("unseen class {c} in fine-tuning split")));
        }
        for f in sem.indices(&[Partition::FewShot]) {
            let count = self.d_ft.iter().flat_map(Scene::classes).filter(|&c| c == f).count();
            if count != self.shots {
                return Err(Error::Config(format!(
                    "few-shot class {f} has {count} boxes, expected {}",
                    self.shots
                )));
            }
        }
        Ok(())
    }

    pub fn box_count(&self, split: &[Scene], group: Partition, sem: &SemanticMatrix) -> usize {
        split
            .iter()
            .flat_map(Scene::classes)
            .filter(|&c| sem.partition()[c] == group)
            .count()
    }
}

// ---------------------------------------------------------------------------
// On-disk layout: `world.json` plus one JSON-lines file per split.

#[derive(Debug, Serialize, Deserialize)]
struct WorldFile {
    format: String,
    seed: u64,
    spec: WorldSpec,
    sizes: SplitSizes,
    shots: usize,
    class_names: Vec<String>,
    partition: Vec<Partition>,
    /// `d x T`, row-major.
    semantics: Vec<f64>,
    /// `n x d`, row-major.
    hidden_projection: Vec<f64>,
    shared_direction: Vec<f64>,
    /// `v x d`, row-major.
    vocab: Vec<f64>,
}

/// One line of a split file.
#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    id: usize,
    /// `[x_min, y_min, x_max, y_max]` per box.
    boxes: Vec<[f64; 4]>,
    classes: Vec<usize>,
    /// Per anchor: class id if positive, `-1` negative, `-2` ignore.
    labels: Vec<i64>,
    features: Vec<Vec<f64>>,
}

const WORLD_FORMAT: &str = "anyshot-world-v1";
pub const SPLIT_FILES: [&str; 3] = ["d_tr.jsonl", "d_ft.jsonl", "d_ts.jsonl"];

fn flatten(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn shaped(v: Vec<f64>, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
    Array2::from_shape_vec((rows, cols), v).map_err(|_| Error::Dimension(format!("{what} is not {rows}x{cols}")))
}

/// Writes `world.json` and the split files into `dir`.
pub fn save_bundle(dir: &Path, world: &SyntheticWorld, sizes: &SplitSizes, bundle: &DatasetBundle) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let sem = &world.semantics;
    let file = WorldFile {
        format: WORLD_FORMAT.into(),
        seed: world.seed,
        spec: world.spec.clone(),
        sizes: sizes.clone(),
        shots: bundle.shots,
        class_names: sem.class_names().to_vec(),
        partition: sem.partition().to_vec(),
        semantics: flatten(sem.vectors()),
        hidden_projection: flatten(&world.hidden_projection),
        shared_direction: world.shared_direction.to_vec(),
        vocab: flatten(world.vocab.atoms()),
    };
    std::fs::write(dir.join("world.json"), serde_json::to_string_pretty(&file)? + "\n")?;
    for (name, split) in SPLIT_FILES.iter().zip([&bundle.d_tr, &bundle.d_ft, &bundle.d_ts]) {
        let path = dir.join(name);
        if split.is_empty() {
            if path.exists() {
                std::fs::remove_file(&path)?;
            }
            continue;
        }
        let mut out = BufWriter::new(File::create(path)?);
        for (id, scene) in split.iter().enumerate() {
            serde_json::to_writer(&mut out, &scene_record(id, scene))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    Ok(())
}

fn scene_record(id: usize, scene: &Scene) -> SceneRecord {
    SceneRecord {
        id,
        boxes: scene.boxes.iter().map(|(b, _)| [b.x_min, b.y_min, b.x_max, b.y_max]).collect(),
        classes: scene.classes().collect(),
        labels: scene
            .anchor_labels
            .iter()
            .map(|l| match l {
                AnchorLabel::Positive { class, .. } => *class as i64,
                AnchorLabel::Negative => -1,
                AnchorLabel::Ignore => -2,
            })
            .collect(),
        features: scene.anchor_features.outer_iter().map(|r| r.to_vec()).collect(),
    }
}

fn scene_from_record(rec: SceneRecord, grid: usize, n: usize) -> Result<Scene> {
    let anchors = grid_anchors(grid);
    if rec.labels.len() != anchors.len() || rec.features.len() != anchors.len() || rec.boxes.len() != rec.classes.len() {
        return Err(Error::Dimension(format!("scene {} does not match the grid", rec.id)));
    }
    let boxes = rec
        .boxes
        .iter()
        .zip(&rec.classes)
        .map(|(b, &c)| Ok((BoundingBox::new(b[0], b[1], b[2], b[3])?, c)))
        .collect::<Result<Vec<_>>>()?;
    let labels = rec
        .labels
        .iter()
        .map(|&l| match l {
            -1 => Ok(AnchorLabel::Negative),
            -2 => Ok(AnchorLabel::Ignore),
            c if c >= 0 => {
                let class = c as usize;
                let gt = rec.classes.iter().position(|&x| x == class).unwrap_or(0);
                Ok(AnchorLabel::Positive { class, gt })
            }
            other => Err(Error::Config(format!("bad anchor label {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let anchor_count = rec.labels.len();
    let flat: Vec<f64> = rec.features.into_iter().flatten().collect();
    Ok(Scene {
        boxes,
        anchors,
        anchor_labels: labels,
        anchor_features: shaped(flat, anchor_count, n, "scene features")?,
    })
}

/// A bundle read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedBundle {
    pub world: SyntheticWorld,
    pub sizes: SplitSizes,
    pub bundle: DatasetBundle,
}

pub fn load_bundle(dir: &Path) -> Result<LoadedBundle> {
    let world_path = dir.join("world.json");
    let file: WorldFile = serde_json::from_str(&std::fs::read_to_string(&world_path)?)?;
    if file.format != WORLD_FORMAT {
        return Err(Error::Parse {
            path: world_path,
            msg: format!("unknown format `{}`", file.format),
        });
    }
    let spec = file.spec;
    let t = file.class_names.len();
    let semantics = SemanticMatrix::new(
        file.class_names,
        shaped(file.semantics, spec.embed_dim, t, "semantics")?,
        file.partition,
    )?;
    let world = SyntheticWorld {
        hidden_projection: shaped(file.hidden_projection, spec.feature_dim, spec.embed_dim, "hidden projection")?,
        shared_direction: Array1::from(file.shared_direction),
        vocab: Vocabulary::new(shaped(file.vocab, spec.vocab_size, spec.embed_dim, "vocab")?)?,
        semantics,
        seed: file.seed,
        spec,
    };
    let mut splits = Vec::with_capacity(3);
    for name in SPLIT_FILES {
        let path = dir.join(name);
        let mut scenes = Vec::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: SceneRecord = serde_json::from_str(&line)?;
                scenes.push(scene_from_record(rec, world.spec.grid, world.spec.feature_dim)?);
            }
        }
        splits.push(scenes);
    }
    let d_ts = splits.pop().unwrap_or_default();
    let d_ft = splits.pop().unwrap_or_default();
    let d_tr = splits.pop().unwrap_or_default();
    let bundle = DatasetBundle {
        d_tr,
        d_ft,
        d_ts,
        shots: file.shots,
    };
    bundle.check_hygiene(&world.semantics)?;
    Ok(LoadedBundle {
        world,
        sizes: file.sizes,
        bundle,
    })
}
