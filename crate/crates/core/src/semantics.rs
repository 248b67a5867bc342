//! Class semantic embeddings: loading, normalization, partitioning and the
//! trainable vocabulary transform `g(w) = tanh(w M D)`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_TOL: f64 = 1e-9;

/// Which training regime a class belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Seen,
    FewShot,
    Unseen,
}

impl Partition {
    pub fn is_novel(self) -> bool {
        !matches!(self, Partition::Seen)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Seen => "seen",
            Partition::FewShot => "few",
            Partition::Unseen => "unseen",
        })
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(Partition::Seen),
            "few" | "few_shot" => Ok(Partition::FewShot),
            "unseen" => Ok(Partition::Unseen),
            other => Err(Error::Config(format!("unknown partition tag `{other}`"))),
        }
    }
}

/// Whether `g(.)` is the identity or the trainable vocabulary attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SemanticsMode {
    Fixed,
    #[default]
    Trainable,
}

impl FromStr for SemanticsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(SemanticsMode::Fixed),
            "trainable" => Ok(SemanticsMode::Trainable),
            other => Err(Error::Config(format!("unknown semantics mode `{other}`"))),
        }
    }
}

/// One entry of a class-list file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEntry {
    pub name: String,
    pub partition: Partition,
}

/// Parses a class list: one `name tag` pair per line, `#` starts a comment.
pub fn parse_class_list(text: &str) -> Result<Vec<ClassEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(name), Some(tag), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Config(format!(
                "class list line {}: expected `name seen|few|unseen`",
                lineno + 1
            )));
        };
        out.push(ClassEntry {
            name: name.to_string(),
            partition: tag.parse()?,
        });
    }
    Ok(out)
}

pub fn read_class_list(path: &Path) -> Result<Vec<ClassEntry>> {
    parse_class_list(&std::fs::read_to_string(path)?)
}

/// Returns `v / ||v||`.
pub fn l2_normalize(v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(v.mapv(|x| x / norm))
}

/// Normalizes in place. Vectors already at unit length are left untouched so
/// that reloading saved data reproduces it bit for bit.
fn normalize_in_place(mut v: ndarray::ArrayViewMut1<f64>) -> Result<()> {
    let sq = v.dot(&v);
    if (sq - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok(());
    }
    let unit = l2_normalize(v.view())?;
    v.assign(&unit);
    Ok(())
}

/// Class embeddings stored column-wise (`d x T`) with their partition tags.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMatrix {
    class_names: Vec<String>,
    vectors: Array2<f64>,
    partition: Vec<Partition>,
}

impl SemanticMatrix {
    /// Builds a matrix from raw columns, normalizing each one.
    pub fn new(
        class_names: Vec<String>,
        vectors: Array2<f64>,
        partition: Vec<Partition>,
    ) -> Result<Self> {
        let t = vectors.ncols();
        if class_names.len() != t || partition.len() != t {
            return Err(Error::Dimension(format!(
                "{} names and {} tags for {} columns",
                class_names.len(),
                partition.len(),
                t
            )));
        }
        if vectors.nrows() == 0 {
            return Err(Error::Dimension("embedding dimension is zero".into()));
        }
        let mut seen_names = HashSet::new();
        for name in &class_names {
            if !seen_names.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate class name `{name}`")));
            }
        }
        if !partition.contains(&Partition::Seen) {
            return Err(Error::Config("at least one seen class is required".into()));
        }
        let mut vectors = vectors;
        for col in vectors.axis_iter_mut(Axis(1)) {
            normalize_in_place(col)?;
        }
        Ok(Self {
            class_names,
            vectors,
            partition,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn partition(&self) -> &[Partition] {
        &self.partition
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn count(&self, group: Partition) -> usize {
        self.partition.iter().filter(|&&p| p == group).count()
    }

    pub fn seen_count(&self) -> usize {
        self.count(Partition::Seen)
    }

    pub fn few_count(&self) -> usize {
        self.count(Partition::FewShot)
    }

    pub fn unseen_count(&self) -> usize {
        self.count(Partition::Unseen)
    }

    /// Class indices belonging to any of `groups`, in column order.
    pub fn indices(&self, groups: &[Partition]) -> Vec<usize> {
        self.partition
            .iter()
            .enumerate()
            .filter(|(_, p)| groups.contains(p))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.num_classes()).collect()
    }

    /// Columns of the given classes, `d x |subset|`.
    pub fn select(&self, subset: &[usize]) -> Array2<f64> {
        self.vectors.select(Axis(1), subset)
    }

    pub fn column(&self, class: usize) -> ArrayView1<'_, f64> {
        self.vectors.column(class)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }
}

/// Word vocabulary `D` (`v x d`, unit rows).
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    atoms: Array2<f64>,
}

impl Vocabulary {
    pub fn new(atoms: Array2<f64>) -> Result<Self> {
        if atoms.nrows() == 0 {
            return Err(Error::Config("vocabulary needs at least one atom".into()));
        }
        let mut atoms = atoms;
        for row in atoms.axis_iter_mut(Axis(0)) {
            normalize_in_place(row)?;
        }
        Ok(Self { atoms })
    }

    /// Uses the first `limit` vectors of a word-vector table as atoms.
    pub fn from_table(table: &WordVectors, limit: usize) -> Result<Self> {
        let take = limit.min(table.len());
        if take == 0 {
            return Err(Error::Config("vocabulary needs at least one atom".into()));
        }
        let mut atoms = Array2::zeros((take, table.dim()));
        for (i, (_, v)) in table.entries.iter().take(take).enumerate() {
            atoms.row_mut(i).assign(v);
        }
        Self::new(atoms)
    }

    pub fn atoms(&self) -> &Array2<f64> {
        &self.atoms
    }

    pub fn size(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn dim(&self) -> usize {
        self.atoms.ncols()
    }
}

/// Trainable metric `M` (`d x v`).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricParams {
    pub metric: Array2<f64>,
}

impl MetricParams {
    pub fn new(metric: Array2<f64>) -> Result<Self> {
        if metric.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("metric parameters"));
        }
        Ok(Self { metric })
    }

    pub fn zeros(d: usize, v: usize) -> Self {
        Self {
            metric: Array2::zeros((d, v)),
        }
    }
}

/// Word vectors read from a plain-text table (`token x1 ... xd` per line).
#[derive(Debug, Clone)]
pub struct WordVectors {
    dim: usize,
    entries: Vec<(String, Array1<f64>)>,
    lookup: HashMap<String, usize>,
}

impl WordVectors {
    pub fn parse(text: &str, expected_dim: usize, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut lookup = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values = fields
                .map(f64::from_str)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: origin.to_path_buf(),
                    msg: format!("line {}: {e}", lineno + 1),
                })?;
            if values.len() != expected_dim {
                return Err(Error::Dimension(format!(
                    "token `{token}` has {} components, expected {expected_dim}",
                    values.len()
                )));
            }
            lookup.entry(token.to_string()).or_insert(entries.len());
            entries.push((token.to_string(), Array1::from(values)));
        }
        Ok(Self {
            dim: expected_dim,
            entries,
            lookup,
        })
    }

    pub fn read(path: &Path, expected_dim: usize) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, expected_dim, path)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<ArrayView1<'_, f64>> {
        self.lookup.get(token).map(|&i| self.entries[i].1.view())
    }

    /// Vector for a class name. Multi-word names (`traffic_light`) fall back
    /// to the mean of their token vectors.
    pub fn class_vector(&self, name: &str) -> Result<Array1<f64>> {
        if let Some(v) = self.get(name) {
            return Ok(v.to_owned());
        }
        let tokens: Vec<&str> = name.split(['_', '-']).filter(|t| !t.is_empty()).collect();
        if tokens.len() < 2 {
            return Err(Error::MissingEmbedding(name.to_string()));
        }
        let mut sum = Array1::zeros(self.dim);
        for token in &tokens {
            let v = self
                .get(token)
                .ok_or_else(|| Error::MissingEmbedding(name.to_string()))?;
            sum += &v;
        }
        Ok(sum / tokens.len() as f64)
    }
}

/// Loads class embeddings for `classes` from a word-vector file, normalizing
/// each column.
pub fn load_word_vectors(
    path: &Path,
    classes: &[ClassEntry],
    expected_dim: usize,
) -> Result<SemanticMatrix> {
    let table = WordVectors::read(path, expected_dim)?;
    semantics_from_table(&table, classes)
}

pub fn semantics_from_table(table: &WordVectors, classes: &[ClassEntry]) -> Result<SemanticMatrix> {
    let mut vectors = Array2::zeros((table.dim(), classes.len()));
    for (j, class) in classes.iter().enumerate() {
        vectors.column_mut(j).assign(&table.class_vector(&class.name)?);
    }
    SemanticMatrix::new(
        classes.iter().map(|c| c.name.clone()).collect(),
        vectors,
        classes.iter().map(|c| c.partition).collect(),
    )
}

/// `g(W) = W`.
pub fn fixed_semantics(w: &Array2<f64>) -> Array2<f64> {
    w.clone()
}

/// Pre-activation `(w M D)` for every class column of `w`, returned as
/// `d x T` (column per class).
pub fn semantic_preactivation(
    w: &Array2<f64>,
    metric: &MetricParams,
    vocab: &Vocabulary,
) -> Result<Array2<f64>> {
    let (d, v) = metric.metric.dim();
    if w.nrows() != d || vocab.size() != v || vocab.dim() != d {
        return Err(Error::Dimension(format!(
            "W is {}x{}, M is {d}x{v}, D is {}x{}",
            w.nrows(),
            w.ncols(),
            vocab.size(),
            vocab.dim()
        )));
    }
    // (W^T M D)^T = D^T M^T W
    let md = metric.metric.dot(vocab.atoms());
    Ok(md.t().dot(w))
}

/// `g(w) = tanh(w M D)` for each class column of `w`.
pub fn transform_semantics(
    w: &Array2<f64>,
    metric: &MetricParams,
    vocab: &Vocabulary,
) -> Result<Array2<f64>> {
    Ok(semantic_preactivation(w, metric, vocab)?.mapv(f64::tanh))
}

/// Applies `g` according to `mode` to the selected class columns.
pub fn apply_semantics(
    semantics: &SemanticMatrix,
    subset: &[usize],
    mode: SemanticsMode,
    metric: &MetricParams,
    vocab: &Vocabulary,
) -> Result<Array2<f64>> {
    let w = semantics.select(subset);
    match mode {
        SemanticsMode::Fixed => Ok(fixed_semantics(&w)),
        SemanticsMode::Trainable => transform_semantics(&w, metric, vocab),
    }
}

/// Checks that every column (or row, for vocabularies) is unit length.
pub fn is_normalized(m: &Array2<f64>, axis: Axis) -> bool {
    m.axis_iter(axis)
        .all(|lane| (lane.dot(&lane).sqrt() - 1.0).abs() <= NORM_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use std::io::Write;

    fn tagged(names: &[(&str, &str)]) -> Vec<ClassEntry> {
        parse_class_list(
            &names
                .iter()
                .map(|(n, t)| format!("{n} {t}"))
                .collect::<Vec<_>>()
                .join("\n"),
        )
        .unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(array![1.0, 0.0, 0.0].view()).unwrap(), array![1.0, 0.0, 0.0]);
        let v = l2_normalize(array![3.0, 4.0].view()).unwrap();
        assert_abs_diff_eq!(v[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.8, epsilon = 1e-15);
        assert!(matches!(l2_normalize(array![0.0, 0.0].view()), Err(Error::ZeroNorm)));
    }

    #[test]
    fn loads_and_normalizes_word_vectors() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "cat 3 4 0").unwrap();
        writeln!(file, "dog 0.6 0.8 0").unwrap();
        writeln!(file, "traffic 1 0 0").unwrap();
        writeln!(file, "light 0 1 0").unwrap();
        let classes = tagged(&[("dog", "seen"), ("cat", "unseen"), ("traffic_light", "few")]);
        let w = load_word_vectors(file.path(), &classes, 3).unwrap();
        assert_eq!(w.class_names(), ["dog", "cat", "traffic_light"]);
        assert_eq!(w.column(0), array![0.6, 0.8, 0.0]);
        assert_abs_diff_eq!(w.column(1)[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(w.column(1)[1], 0.8, epsilon = 1e-15);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(w.column(2)[0], h, epsilon = 1e-15);
        assert!(is_normalized(w.vectors(), Axis(1)));
        assert_eq!((w.seen_count(), w.few_count(), w.unseen_count()), (1, 1, 1));
    }

    #[test]
    fn load_errors() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "cat 1 0 0").unwrap();
        let missing = tagged(&[("cat", "seen"), ("zebra", "unseen")]);
        assert!(matches!(
            load_word_vectors(file.path(), &missing, 3),
            Err(Error::MissingEmbedding(name)) if name == "zebra"
        ));
        assert!(matches!(
            load_word_vectors(file.path(), &tagged(&[("cat", "seen")]), 4),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn twenty_classes_three_hundred_dims() {
        let mut text = String::new();
        for c in 0..20 {
            text.push_str(&format!("class{c}"));
            for k in 0..300 {
                text.push_str(&format!(" {}", ((c * 7 + k * 13) % 11) as f64 - 5.0));
            }
            text.push('\n');
        }
        let table = WordVectors::parse(&text, 300, Path::new("mem")).unwrap();
        let classes: Vec<_> = (0..20)
            .map(|c| ClassEntry {
                name: format!("class{c}"),
                partition: if c < 15 { Partition::Seen } else { Partition::Unseen },
            })
            .collect();
        let w = semantics_from_table(&table, &classes).unwrap();
        assert_eq!(w.vectors().dim(), (300, 20));
        assert!(is_normalized(w.vectors(), Axis(1)));
    }

    #[test]
    fn class_list_parsing() {
        let list = parse_class_list("# header\nperson seen\nzebra unseen # note\n\nbus few\n").unwrap();
        assert_eq!(list.len(), 3);
        assert_eq!(list[2].partition, Partition::FewShot);
        assert!(parse_class_list("person").is_err());
        assert!(parse_class_list("person maybe").is_err());
    }

    #[test]
    fn rejects_duplicates_and_missing_seen() {
        let v = Array2::eye(2);
        let names = vec!["a".to_string(), "a".to_string()];
        assert!(SemanticMatrix::new(names, v.clone(), vec![Partition::Seen; 2]).is_err());
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(SemanticMatrix::new(names, v, vec![Partition::Unseen; 2]).is_err());
    }

    #[test]
    fn transform_zero_metric_is_zero() {
        let w = SemanticMatrix::new(
            vec!["a".into(), "b".into()],
            array![[1.0, 0.0], [0.0, 1.0]],
            vec![Partition::Seen, Partition::Unseen],
        )
        .unwrap();
        let vocab = Vocabulary::new(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let g = transform_semantics(w.vectors(), &MetricParams::zeros(2, 3), &vocab).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn transform_scalar_case() {
        let w = array![[1.0]];
        let metric = MetricParams::new(array![[1.0]]).unwrap();
        let vocab = Vocabulary::new(array![[1.0]]).unwrap();
        let g = transform_semantics(&w, &metric, &vocab).unwrap();
        assert_abs_diff_eq!(g[[0, 0]], 1.0f64.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(g[[0, 0]], 0.76159, epsilon = 1e-5);
    }

    #[test]
    fn transform_shape_mismatch() {
        let w = Array2::ones((3, 2));
        let vocab = Vocabulary::new(Array2::ones((4, 3))).unwrap();
        assert!(matches!(
            transform_semantics(&w, &MetricParams::zeros(2, 4), &vocab),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn mode_changes_values_not_shapes() {
        let w = SemanticMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            array![[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]],
            vec![Partition::Seen, Partition::Seen, Partition::FewShot],
        )
        .unwrap();
        let vocab = Vocabulary::new(array![[1.0, 2.0], [0.0, 1.0]]).unwrap();
        let metric = MetricParams::new(array![[0.5, -0.3], [0.2, 0.9]]).unwrap();
        let seen = w.indices(&[Partition::Seen]);
        assert_eq!(seen.len(), w.seen_count());
        let fixed = apply_semantics(&w, &seen, SemanticsMode::Fixed, &metric, &vocab).unwrap();
        let learned = apply_semantics(&w, &seen, SemanticsMode::Trainable, &metric, &vocab).unwrap();
        assert_eq!(fixed.dim(), learned.dim());
        assert_eq!(fixed, w.select(&seen));
        assert_ne!(fixed, learned);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn transform_is_bounded(
                w in proptest::collection::vec(-3.0f64..3.0, 6),
                m in proptest::collection::vec(-50.0f64..50.0, 8),
                atoms in proptest::collection::vec(0.1f64..2.0, 8),
            ) {
                let w = Array2::from_shape_vec((2, 3), w).unwrap();
                let metric = MetricParams::new(Array2::from_shape_vec((2, 4), m).unwrap()).unwrap();
                let vocab = Vocabulary::new(Array2::from_shape_vec((4, 2), atoms).unwrap()).unwrap();
                let g = transform_semantics(&w, &metric, &vocab).unwrap();
                prop_assert!(g.iter().all(|x| x.abs() <= 1.0 && x.is_finite()));
            }

            #[test]
            fn normalized_columns_are_unit(v in proptest::collection::vec(0.01f64..10.0, 12)) {
                let names = (0..4).map(|i| format!("c{i}")).collect();
                let w = SemanticMatrix::new(
                    names,
                    Array2::from_shape_vec((3, 4), v).unwrap(),
                    vec![Partition::Seen, Partition::Seen, Partition::FewShot, Partition::Unseen],
                ).unwrap();
                prop_assert!(is_normalized(w.vectors(), Axis(1)));
            }
        }
    }
}
