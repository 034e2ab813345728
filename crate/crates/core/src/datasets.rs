//! Benchmark dataset contracts, ingestion and split protocols.
//!
//! A dataset root holds `images/` plus `annotations.csv`, whose header is
//! `id,x1,y1,...,xK,yK` with coordinates in original pixels. Images are
//! ordered lexicographically by file name; the first `train_count` are the
//! training split and the rest the test split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{SpacingModel, Unit};
use crate::geometry::{AnnotatedImage, ImageSpace, LandmarkSet, Split};

pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const IMAGES_DIR: &str = "images";
const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Per-benchmark protocol.
///
/// Resolutions are stored as width x height; the benchmarks' portrait
/// images are tested at 512 rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub landmark_count: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub train_resolution: ImageSpace,
    pub test_resolution: ImageSpace,
    pub spacing: SpacingModel,
    /// SDR thresholds in the spacing model's unit.
    pub sdr_thresholds: Vec<f64>,
    /// Size every source image is expected to have, if the corpus is uniform.
    #[serde(default)]
    pub expected_original: Option<ImageSpace>,
}

fn space(w: u32, h: u32) -> ImageSpace {
    ImageSpace::new(w, h).expect("builtin spaces are non-empty")
}

impl DatasetSpec {
    pub const BUILTIN: [&'static str; 3] = ["chest", "head", "hand"];

    pub fn chest() -> Self {
        Self {
            name: "chest".into(),
            landmark_count: 6,
            train_count: 229,
            test_count: 50,
            train_resolution: space(512, 512),
            test_resolution: space(512, 512),
            spacing: SpacingModel::Pixel,
            sdr_thresholds: vec![3.0, 6.0, 9.0],
            expected_original: None,
        }
    }

    pub fn head() -> Self {
        Self {
            name: "head".into(),
            landmark_count: 19,
            train_count: 150,
            test_count: 250,
            train_resolution: space(512, 512),
            test_resolution: space(416, 512),
            spacing: SpacingModel::HEAD,
            sdr_thresholds: vec![2.0, 2.5, 3.0, 4.0],
            expected_original: Some(space(1935, 2400)),
        }
    }

    pub fn hand() -> Self {
        Self {
            name: "hand".into(),
            landmark_count: 37,
            train_count: 609,
            test_count: 300,
            train_resolution: space(512, 512),
            test_resolution: space(368, 512),
            spacing: SpacingModel::HAND,
            sdr_thresholds: vec![2.0, 4.0, 10.0],
            expected_original: None,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "chest" => Some(Self::chest()),
            "head" => Some(Self::head()),
            "hand" => Some(Self::hand()),
            _ => None,
        }
    }

    pub fn metric_unit(&self) -> Unit {
        self.spacing.unit()
    }

    pub fn total(&self) -> usize {
        self.train_count + self.test_count
    }

    pub fn validate(&self) -> Result<()> {
        if self.landmark_count == 0 {
            return Err(Error::Config(format!("{}: landmark count must be positive", self.name)));
        }
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::Config(format!("{}: both splits must be non-empty", self.name)));
        }
        if self.sdr_thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config(format!("{}: SDR thresholds must be positive", self.name)));
        }
        self.spacing.validate(self.landmark_count)
    }
}

/// Ingested dataset: records in canonical order with positional splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    root: PathBuf,
    spec: DatasetSpec,
    records: Vec<AnnotatedImage>,
}

impl DatasetIndex {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn records(&self) -> &[AnnotatedImage] {
        &self.records
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &AnnotatedImage> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.records_in(split).map(|r| r.id.clone()).collect()
    }

    pub fn record(&self, id: &str) -> Option<&AnnotatedImage> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: DatasetIndex = serde_json::from_str(&text)?;
        index.check_split_invariants()?;
        Ok(index)
    }

    /// Rebases the index on another root (e.g. after moving the corpus).
    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = root.into();
        self
    }

    fn check_split_invariants(&self) -> Result<()> {
        if self.records.len() != self.spec.total() {
            return Err(Error::Split(format!(
                "{} has {} records, protocol expects {}",
                self.spec.name,
                self.records.len(),
                self.spec.total()
            )));
        }
        for (i, r) in self.records.iter().enumerate() {
            let expected = if i < self.spec.train_count {
                Split::Train
            } else {
                Split::Test
            };
            if r.split != expected {
                return Err(Error::Split(format!(
                    "record {} at position {i} is tagged {:?}",
                    r.id, r.split
                )));
            }
            if r.truth.len() != self.spec.landmark_count {
                return Err(Error::LandmarkCount {
                    id: r.id.clone(),
                    expected: self.spec.landmark_count,
                    found: r.truth.len(),
                });
            }
        }
        Ok(())
    }

    /// Fails if any of `ids` belongs to the test split or is unknown.
    pub fn ensure_training_ids<S: AsRef<str>>(&self, ids: &[S]) -> Result<()> {
        for id in ids {
            match self.record(id.as_ref()) {
                None => return Err(Error::Split(format!("unknown image id {}", id.as_ref()))),
                Some(r) if r.split == Split::Test => {
                    return Err(Error::Split(format!(
                        "test image {} must not be used for training or validation",
                        r.id
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Reads a dataset root and assigns the positional train/test split.
pub fn ingest(root: &Path, spec: &DatasetSpec) -> Result<DatasetIndex> {
    spec.validate()?;
    let images = list_images(&root.join(IMAGES_DIR))?;
    if images.is_empty() {
        return Err(Error::NoImages(root.join(IMAGES_DIR)));
    }
    let annotations = read_annotations(&root.join(ANNOTATIONS_FILE), spec.landmark_count)?;

    let missing: Vec<String> = images
        .iter()
        .filter(|(id, _)| !annotations.contains_key(id))
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingAnnotations(missing));
    }
    let known: BTreeSet<&String> = images.iter().map(|(id, _)| id).collect();
    for id in annotations.keys().filter(|id| !known.contains(id)) {
        warn!("{}: annotation for {id} has no image, ignored", spec.name);
    }
    if images.len() != spec.total() {
        return Err(Error::Split(format!(
            "{} expects {} images ({} train + {} test), found {}",
            spec.name,
            spec.total(),
            spec.train_count,
            spec.test_count,
            images.len()
        )));
    }

    let mut records = Vec::with_capacity(images.len());
    for (pos, (id, file)) in images.into_iter().enumerate() {
        let path = root.join(IMAGES_DIR).join(&file);
        let (w, h) = image::image_dimensions(&path)?;
        let original_space = ImageSpace::new(w, h)?;
        if let Some(expected) = spec.expected_original {
            if expected != original_space {
                warn!("{}: {id} is {original_space}, expected {expected}", spec.name);
            }
        }
        let truth = LandmarkSet::from_flat(&annotations[&id], original_space)?;
        let outside = truth.out_of_bounds();
        if !outside.is_empty() {
            warn!("{}: {id} has landmarks outside the image: {outside:?}", spec.name);
        }
        records.push(AnnotatedImage {
            id,
            image_path: format!("{IMAGES_DIR}/{file}"),
            original_space,
            truth,
            split: if pos < spec.train_count {
                Split::Train
            } else {
                Split::Test
            },
        });
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        spec: spec.clone(),
        records,
    })
}

/// `(id, file name)` pairs sorted by file name.
fn list_images(dir: &Path) -> Result<Vec<(String, String)>> {
    let entries = match fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let (Some(stem), Some(name)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.file_name().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        out.push((stem.to_string(), name.to_string()));
    }
    out.sort_by(|a, b| a.1.cmp(&b.1));
    for pair in out.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::Annotation {
                location: dir.display().to_string(),
                message: format!("two images share the id {}", pair[0].0),
            });
        }
    }
    Ok(out)
}

fn read_annotations(path: &Path, k: usize) -> Result<HashMap<String, Vec<f64>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let name = path.display().to_string();
    let header = reader.headers()?.clone();
    if header.get(0) != Some("id") {
        return Err(Error::Annotation {
            location: format!("{name} header"),
            message: "first column must be `id`".into(),
        });
    }
    if header.len() != 1 + 2 * k {
        return Err(Error::Annotation {
            location: format!("{name} header"),
            message: format!(
                "expected {} coordinate columns for {k} landmarks, found {}",
                2 * k,
                header.len().saturating_sub(1)
            ),
        });
    }
    let mut out = HashMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(row as u64 + 2);
        let id = record.get(0).unwrap_or_default().to_string();
        let id = Path::new(&id)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&id)
            .to_string();
        let location = format!("{name} line {line} (id {id})");
        if id.is_empty() {
            return Err(Error::Annotation {
                location,
                message: "empty id".into(),
            });
        }
        if record.len() != 1 + 2 * k {
            return Err(Error::LandmarkCount {
                id,
                expected: k,
                found: (record.len() - 1) / 2,
            });
        }
        let coords = record
            .iter()
            .skip(1)
            .enumerate()
            .map(|(col, field)| {
                field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Annotation {
                        location: location.clone(),
                        message: format!("column {} is not a finite number: {field:?}", col + 2),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if out.insert(id.clone(), coords).is_some() {
            return Err(Error::Annotation {
                location,
                message: format!("duplicate annotation for {id}"),
            });
        }
    }
    Ok(out)
}

/// Writes an annotation table in the ingest format.
pub fn write_annotations(path: &Path, rows: &[(String, LandmarkSet)]) -> Result<()> {
    let k = rows.first().map(|(_, s)| s.len()).unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    for i in 1..=k {
        header.push(format!("x{i}"));
        header.push(format!("y{i}"));
    }
    w.write_record(&header)?;
    for (id, set) in rows {
        let mut row = vec![id.clone()];
        row.extend(set.to_flat().iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Partitions the training split into `folds` validation folds.
///
/// Ids are shuffled with `seed`, then dealt round-robin so fold sizes
/// differ by at most one. Both lists keep the index's canonical order.
pub fn kfold_split(index: &DatasetIndex, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    let ids = index.ids(Split::Train);
    if folds < 2 {
        return Err(Error::Split(format!("need at least 2 folds, got {folds}")));
    }
    if folds > ids.len() {
        return Err(Error::Split(format!(
            "{folds} folds requested for {} training images",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0usize; ids.len()];
    for (slot, &i) in order.iter().enumerate() {
        assignment[i] = slot % folds;
    }
    Ok((0..folds)
        .map(|f| {
            let (val, train): (Vec<_>, Vec<_>) =
                ids.iter().zip(&assignment).partition(|(_, &a)| a == f);
            Fold {
                index: f,
                train_ids: train.into_iter().map(|(id, _)| id.clone()).collect(),
                val_ids: val.into_iter().map(|(id, _)| id.clone()).collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Holdout {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Deterministic validation holdout of `floor(n * fraction)` training images.
pub fn holdout_val(index: &DatasetIndex, fraction: f64, seed: u64) -> Result<Holdout> {
    holdout_ids(&index.ids(Split::Train), fraction, seed)
}

/// [`holdout_val`] over an explicit id list, e.g. one fold's training ids.
pub fn holdout_ids(ids: &[String], fraction: f64, seed: u64) -> Result<Holdout> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("holdout fraction must be in (0, 1), got {fraction}")));
    }
    let n_val = (ids.len() as f64 * fraction).floor() as usize;
    if n_val == 0 || n_val == ids.len() {
        return Err(Error::Split(format!(
            "holdout of {fraction} over {} images leaves an empty partition",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val: BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let (val_ids, train_ids): (Vec<_>, Vec<_>) = ids
        .iter()
        .cloned()
        .enumerate()
        .partition(|(i, _)| val.contains(i));
    Ok(Holdout {
        train_ids: train_ids.into_iter().map(|(_, id)| id).collect(),
        val_ids: val_ids.into_iter().map(|(_, id)| id).collect(),
    })
}

/// Builds an index from in-memory records, e.g. for synthetic corpora.
pub fn index_from_records(
    root: impl Into<PathBuf>,
    spec: DatasetSpec,
    records: Vec<AnnotatedImage>,
) -> Result<DatasetIndex> {
    spec.validate()?;
    let index = DatasetIndex {
        root: root.into(),
        spec,
        records,
    };
    index.check_split_invariants()?;
    Ok(index)
}

/// Count of records per split, for summaries.
pub fn split_counts(index: &DatasetIndex) -> BTreeMap<Split, usize> {
    let mut out = BTreeMap::new();
    for r in index.records() {
        *out.entry(r.split).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Landmark;
    use crate::raster::Raster;

    fn tiny_spec(k: usize, train: usize, test: usize) -> DatasetSpec {
        DatasetSpec {
            name: "tiny".into(),
            landmark_count: k,
            train_count: train,
            test_count: test,
            train_resolution: ImageSpace::new(8, 8).unwrap(),
            test_resolution: ImageSpace::new(8, 8).unwrap(),
            spacing: SpacingModel::Pixel,
            sdr_thresholds: vec![1.0],
            expected_original: None,
        }
    }

    fn write_root(dir: &Path, n: usize, k: usize, skip_row: Option<usize>) {
        fs::create_dir_all(dir.join(IMAGES_DIR)).unwrap();
        let s = ImageSpace::new(6, 4).unwrap();
        let mut rows = Vec::new();
        for i in 0..n {
            let id = format!("img{i:03}");
            Raster::filled(s, 0.5)
                .save(&dir.join(IMAGES_DIR).join(format!("{id}.png")))
                .unwrap();
            if Some(i) == skip_row {
                continue;
            }
            let set = LandmarkSet::new(
                (0..k).map(|j| Landmark::new(j as f64, (i % 4) as f64)).collect(),
                s,
            )
            .unwrap();
            rows.push((id, set));
        }
        write_annotations(&dir.join(ANNOTATIONS_FILE), &rows).unwrap();
    }

    fn ingest_tiny(n: usize, train: usize) -> DatasetIndex {
        let dir = tempfile::tempdir().unwrap();
        write_root(dir.path(), n, 2, None);
        ingest(dir.path(), &tiny_spec(2, train, n - train)).unwrap()
    }

    #[test]
    fn builtin_protocols() {
        let chest = DatasetSpec::chest();
        assert_eq!((chest.landmark_count, chest.train_count, chest.test_count), (6, 229, 50));
        assert_eq!(chest.sdr_thresholds, vec![3.0, 6.0, 9.0]);
        assert_eq!(chest.metric_unit(), Unit::Px);
        let head = DatasetSpec::head();
        assert_eq!((head.landmark_count, head.train_count, head.test_count), (19, 150, 250));
        assert_eq!(head.sdr_thresholds, vec![2.0, 2.5, 3.0, 4.0]);
        assert_eq!((head.test_resolution.height(), head.test_resolution.width()), (512, 416));
        let hand = DatasetSpec::hand();
        assert_eq!((hand.landmark_count, hand.train_count, hand.test_count), (37, 609, 300));
        assert_eq!(hand.sdr_thresholds, vec![2.0, 4.0, 10.0]);
        assert_eq!((hand.test_resolution.height(), hand.test_resolution.width()), (512, 368));
        for name in DatasetSpec::BUILTIN {
            DatasetSpec::builtin(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn positional_split_and_order() {
        let index = ingest_tiny(7, 5);
        let ids: Vec<_> = index.records().iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["img000", "img001", "img002", "img003", "img004", "img005", "img006"]);
        assert_eq!(index.ids(Split::Train).len(), 5);
        assert_eq!(index.ids(Split::Test), vec!["img005", "img006"]);
        assert_eq!(index.records()[0].original_space, ImageSpace::new(6, 4).unwrap());
    }

    #[test]
    fn missing_annotation_names_the_image() {
        let dir = tempfile::tempdir().unwrap();
        write_root(dir.path(), 4, 2, Some(2));
        match ingest(dir.path(), &tiny_spec(2, 2, 2)) {
            Err(Error::MissingAnnotations(ids)) => assert_eq!(ids, vec!["img002"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn landmark_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_root(dir.path(), 4, 3, None);
        assert!(ingest(dir.path(), &tiny_spec(2, 2, 2)).is_err());
    }

    #[test]
    fn corrupt_row_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_root(dir.path(), 3, 1, None);
        let path = dir.path().join(ANNOTATIONS_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("img001,0,1", "img001,zero,1");
        fs::write(&path, text).unwrap();
        let err = ingest(dir.path(), &tiny_spec(1, 2, 1)).unwrap_err().to_string();
        assert!(err.contains("img001"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn empty_root() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest(dir.path(), &tiny_spec(1, 1, 1)),
            Err(Error::NoImages(_))
        ));
    }

    #[test]
    fn wrong_total_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_root(dir.path(), 5, 2, None);
        assert!(matches!(ingest(dir.path(), &tiny_spec(2, 2, 2)), Err(Error::Split(_))));
    }

    #[test]
    fn serialized_index_is_idempotent_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        write_root(dir.path(), 6, 2, None);
        let a = ingest(dir.path(), &tiny_spec(2, 4, 2)).unwrap();
        let b = ingest(dir.path(), &tiny_spec(2, 4, 2)).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let path = dir.path().join("tiny.index.json");
        a.save(&path).unwrap();
        assert_eq!(DatasetIndex::load(&path).unwrap(), a);
    }

    #[test]
    fn kfold_partitions_train_split() {
        let index = ingest_tiny(12, 9);
        let folds = kfold_split(&index, 4, 3).unwrap();
        let mut seen = BTreeSet::new();
        for f in &folds {
            assert!(f.val_ids.len() == 2 || f.val_ids.len() == 3);
            assert_eq!(f.val_ids.len() + f.train_ids.len(), 9);
            for id in &f.val_ids {
                assert!(seen.insert(id.clone()), "{id} in two folds");
                assert!(!f.train_ids.contains(id));
            }
            index.ensure_training_ids(&f.val_ids).unwrap();
            index.ensure_training_ids(&f.train_ids).unwrap();
        }
        assert_eq!(seen.len(), 9);
        assert_eq!(folds, kfold_split(&index, 4, 3).unwrap());
    }

    #[test]
    fn two_folds_on_four() {
        let index = ingest_tiny(5, 4);
        let folds = kfold_split(&index, 2, 0).unwrap();
        assert_eq!(folds.len(), 2);
        assert_eq!(folds[0].val_ids.len(), 2);
        assert_eq!(folds[0].val_ids, folds[1].train_ids);
    }

    #[test]
    fn kfold_errors() {
        let index = ingest_tiny(5, 3);
        assert!(kfold_split(&index, 1, 0).is_err());
        assert!(kfold_split(&index, 4, 0).is_err());
    }

    #[test]
    fn holdout_fraction() {
        let index = ingest_tiny(4, 2);
        let h = holdout_val(&index, 0.5, 9).unwrap();
        assert_eq!((h.train_ids.len(), h.val_ids.len()), (1, 1));
        assert_eq!(h, holdout_val(&index, 0.5, 9).unwrap());
        assert!(holdout_val(&index, 0.2, 9).is_err());
        assert!(holdout_val(&index, 1.0, 9).is_err());
        assert!(holdout_val(&index, 0.0, 9).is_err());
    }

    #[test]
    fn test_ids_are_refused_for_training() {
        let index = ingest_tiny(4, 2);
        assert!(index.ensure_training_ids(&index.ids(Split::Test)).is_err());
        assert!(index.ensure_training_ids(&["nope"]).is_err());
    }
}
