//! Radial-error metrics and the evaluation pipeline.
//!
//! Distances are pooled over every landmark of every image (micro average)
//! and converted to the dataset's unit with a per-image spacing factor.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetIndex, DatasetSpec};
use crate::error::{Error, Result};
use crate::geometry::{map_landmarks, radial_distances, AnnotatedImage, LandmarkSet, Split};
use crate::heatmap::{decode, DecodeMode};
use crate::models::LandmarkNet;
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Px,
    Mm,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Unit::Px => "px",
            Unit::Mm => "mm",
        })
    }
}

/// Formats a threshold the way result tables label it, e.g. `2.5mm`.
pub fn threshold_label(value: f64, unit: Unit) -> String {
    format!("{value}{unit}")
}

/// Conversion of pixel distances into the dataset's reporting unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpacingModel {
    /// Distances stay in pixels.
    Pixel,
    /// Isotropic physical pixel size.
    FixedMmPerPx { mm_per_px: f64 },
    /// Normalizes by the ground-truth distance between two landmarks that
    /// span a known physical width.
    WristWidth {
        first: usize,
        second: usize,
        wrist_width_mm: f64,
    },
}

impl SpacingModel {
    /// 0.1 mm square pixels.
    pub const HEAD: SpacingModel = SpacingModel::FixedMmPerPx { mm_per_px: 0.1 };

    /// Wrist spanned by the first and fifth landmark, assumed 50 mm wide.
    pub const HAND: SpacingModel = SpacingModel::WristWidth {
        first: 0,
        second: 4,
        wrist_width_mm: 50.0,
    };

    pub fn unit(&self) -> Unit {
        match self {
            SpacingModel::Pixel => Unit::Px,
            _ => Unit::Mm,
        }
    }

    pub fn validate(&self, landmark_count: usize) -> Result<()> {
        match *self {
            SpacingModel::Pixel => Ok(()),
            SpacingModel::FixedMmPerPx { mm_per_px } if mm_per_px > 0.0 && mm_per_px.is_finite() => Ok(()),
            SpacingModel::FixedMmPerPx { mm_per_px } => {
                Err(Error::Spacing(format!("mm per pixel must be positive, got {mm_per_px}")))
            }
            SpacingModel::WristWidth {
                first,
                second,
                wrist_width_mm,
            } => {
                if first >= landmark_count || second >= landmark_count || first == second {
                    return Err(Error::Spacing(format!(
                        "wrist landmarks ({first}, {second}) invalid for {landmark_count} landmarks"
                    )));
                }
                if !(wrist_width_mm > 0.0 && wrist_width_mm.is_finite()) {
                    return Err(Error::Spacing(format!(
                        "wrist width must be positive, got {wrist_width_mm}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Pixel-to-unit multiplier for one image. Wrist endpoints always come from
/// the ground truth.
pub fn spacing_factor(truth: &LandmarkSet, model: &SpacingModel) -> Result<f64> {
    match *model {
        SpacingModel::Pixel => Ok(1.0),
        SpacingModel::FixedMmPerPx { mm_per_px } => Ok(mm_per_px),
        SpacingModel::WristWidth {
            first,
            second,
            wrist_width_mm,
        } => {
            model.validate(truth.len())?;
            let p = truth.landmarks()[first];
            let q = truth.landmarks()[second];
            let width_px = p.distance(&q);
            if width_px == 0.0 {
                return Err(Error::Spacing(
                    "wrist endpoints coincide, spacing undefined".into(),
                ));
            }
            Ok(wrist_width_mm / width_px)
        }
    }
}

/// Radial errors of every landmark of every image, in the spacing model's unit.
pub fn unit_distances(
    pred: &[LandmarkSet],
    truth: &[LandmarkSet],
    model: &SpacingModel,
) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} ground-truth sets",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("no images to score"));
    }
    let mut out = Vec::with_capacity(truth.iter().map(LandmarkSet::len).sum());
    for (p, t) in pred.iter().zip(truth) {
        let factor = spacing_factor(t, model)?;
        out.extend(radial_distances(p, t)?.into_iter().map(|d| d * factor));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("no landmarks to score"));
    }
    Ok(out)
}

/// Mean radial error pooled over all landmarks.
pub fn mre(pred: &[LandmarkSet], truth: &[LandmarkSet], model: &SpacingModel) -> Result<f64> {
    let d = unit_distances(pred, truth, model)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Percentage of pooled landmarks with error `<= t`, per threshold.
pub fn sdr(
    pred: &[LandmarkSet],
    truth: &[LandmarkSet],
    model: &SpacingModel,
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let d = unit_distances(pred, truth, model)?;
    thresholds
        .iter()
        .map(|&t| {
            if !(t > 0.0) {
                return Err(Error::contract(format!("threshold must be positive, got {t}")));
            }
            Ok((t, success_rate(&d, t)))
        })
        .collect()
}

fn success_rate(distances: &[f64], t: f64) -> f64 {
    let hits = distances.iter().filter(|d| **d <= t).count();
    100.0 * hits as f64 / distances.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdrValue {
    pub threshold: f64,
    /// Percentage in `[0, 100]`.
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

/// Summary of one evaluation, or of several folds when `*std` come from
/// the spread across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mre: f64,
    /// Population standard deviation: of the pooled radial errors for a
    /// single evaluation, of the per-fold MREs for a cross-validation.
    pub mre_std: Option<f64>,
    pub sdr: Vec<SdrValue>,
    pub n_images: usize,
    pub n_landmarks: usize,
    pub unit: Unit,
}

impl MetricsReport {
    pub fn from_distances(
        distances: &[f64],
        n_images: usize,
        thresholds: &[f64],
        unit: Unit,
    ) -> Result<Self> {
        if distances.is_empty() {
            return Err(Error::EmptyInput("no landmarks to score"));
        }
        let mut thresholds = thresholds.to_vec();
        thresholds.sort_by(f64::total_cmp);
        let (mean, std) = mean_std(distances);
        Ok(Self {
            mre: mean,
            mre_std: Some(std),
            sdr: thresholds
                .into_iter()
                .map(|t| SdrValue {
                    threshold: t,
                    rate: success_rate(distances, t),
                    std: None,
                })
                .collect(),
            n_images,
            n_landmarks: distances.len(),
            unit,
        })
    }

    pub fn sdr_at(&self, threshold: f64) -> Option<f64> {
        self.sdr
            .iter()
            .find(|s| s.threshold == threshold)
            .map(|s| s.rate)
    }

    /// Mean and population std of MRE and each SDR across folds.
    pub fn aggregate(folds: &[MetricsReport]) -> Result<Self> {
        let first = folds.first().ok_or(Error::EmptyInput("no folds to aggregate"))?;
        for f in folds {
            if f.unit != first.unit || f.sdr.len() != first.sdr.len() {
                return Err(Error::contract("folds report different units or thresholds"));
            }
        }
        let mres: Vec<f64> = folds.iter().map(|f| f.mre).collect();
        let (mre, mre_std) = mean_std(&mres);
        let sdr = first
            .sdr
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let rates: Vec<f64> = folds.iter().map(|f| f.sdr[i].rate).collect();
                let (rate, std) = mean_std(&rates);
                SdrValue {
                    threshold: s.threshold,
                    rate,
                    std: Some(std),
                }
            })
            .collect();
        Ok(Self {
            mre,
            mre_std: Some(mre_std),
            sdr,
            n_images: folds.iter().map(|f| f.n_images).sum(),
            n_landmarks: folds.iter().map(|f| f.n_landmarks).sum(),
            unit: first.unit,
        })
    }
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Anything that turns a test-resolution image into landmarks on that grid.
pub trait LandmarkPredictor {
    fn landmark_count(&self) -> usize;

    /// `image` is already resized to the dataset's test resolution; the
    /// returned landmarks must be expressed in `image.space()`.
    fn predict(&self, record: &AnnotatedImage, image: &Raster) -> Result<LandmarkSet>;
}

/// Predicts with a network and decodes its heatmaps.
pub struct NetPredictor<'a> {
    pub net: &'a LandmarkNet,
    pub decode: DecodeMode,
}

impl LandmarkPredictor for NetPredictor<'_> {
    fn landmark_count(&self) -> usize {
        self.net.spec().out_channels
    }

    fn predict(&self, _record: &AnnotatedImage, image: &Raster) -> Result<LandmarkSet> {
        let stack = self.net.predict_heatmaps(image)?;
        Ok(decode(&stack, self.decode)?.landmarks)
    }
}

/// Returns the ground truth, mapped to the test grid.
pub struct OraclePredictor {
    pub landmark_count: usize,
}

impl LandmarkPredictor for OraclePredictor {
    fn landmark_count(&self) -> usize {
        self.landmark_count
    }

    fn predict(&self, record: &AnnotatedImage, image: &Raster) -> Result<LandmarkSet> {
        map_landmarks(&record.truth, record.original_space, image.space())
    }
}

/// Grid on which radial errors are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSpace {
    /// Predictions mapped back to the source image.
    #[default]
    Original,
    /// Ground truth mapped onto the test resolution; only meaningful for
    /// pixel-unit datasets.
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    #[serde(default)]
    pub decode: DecodeMode,
    #[serde(default)]
    pub space: EvalSpace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub id: String,
    /// Errors in the report's unit, one per landmark.
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_image: Vec<ImageResult>,
}

/// Which records of an index to score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalSelection {
    Test,
    Ids(Vec<String>),
}

/// Scores `predictor` on a selection of an ingested dataset.
///
/// Each image is loaded, resized to the dataset's test resolution,
/// predicted, mapped back, and scored under the dataset's spacing model.
pub fn evaluate(
    predictor: &dyn LandmarkPredictor,
    index: &DatasetIndex,
    selection: &EvalSelection,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let records: Vec<&AnnotatedImage> = match selection {
        EvalSelection::Test => index.records_in(Split::Test).collect(),
        EvalSelection::Ids(ids) => ids
            .iter()
            .map(|id| {
                index
                    .record(id)
                    .ok_or_else(|| Error::contract(format!("unknown image id {id}")))
            })
            .collect::<Result<_>>()?,
    };
    let root = index.root();
    evaluate_with(predictor, index.spec(), &records, |r| {
        Raster::load(&root.join(&r.image_path))
    }, opts)
}

/// Like [`evaluate`] but with a caller-supplied image source.
pub fn evaluate_with(
    predictor: &dyn LandmarkPredictor,
    spec: &DatasetSpec,
    records: &[&AnnotatedImage],
    mut load: impl FnMut(&AnnotatedImage) -> Result<Raster>,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no images selected for evaluation"));
    }
    if predictor.landmark_count() != spec.landmark_count {
        return Err(Error::contract(format!(
            "predictor emits {} landmarks, {} expects {}",
            predictor.landmark_count(),
            spec.name,
            spec.landmark_count
        )));
    }
    if opts.space == EvalSpace::Network && spec.spacing != SpacingModel::Pixel {
        return Err(Error::Config(format!(
            "network-space evaluation needs a pixel spacing model, {} uses {:?}",
            spec.name, spec.spacing
        )));
    }
    let test_space = spec.test_resolution;
    let mut per_image = Vec::with_capacity(records.len());
    let mut pooled = Vec::new();
    for record in records {
        let image = load(record)?;
        let image = if image.space() == test_space {
            image
        } else {
            image.resize(test_space)
        };
        let pred = predictor.predict(record, &image)?;
        if pred.space() != test_space || pred.len() != spec.landmark_count {
            return Err(Error::contract(format!(
                "prediction for {} has {} landmarks in {}, expected {} in {test_space}",
                record.id,
                pred.len(),
                pred.space(),
                spec.landmark_count
            )));
        }
        let (pred, truth) = match opts.space {
            EvalSpace::Original => (
                map_landmarks(&pred, test_space, record.original_space)?,
                record.truth.clone(),
            ),
            EvalSpace::Network => (
                pred,
                map_landmarks(&record.truth, record.original_space, test_space)?,
            ),
        };
        let factor = spacing_factor(&record.truth, &spec.spacing)?;
        let distances: Vec<f64> = radial_distances(&pred, &truth)?
            .into_iter()
            .map(|d| d * factor)
            .collect();
        pooled.extend_from_slice(&distances);
        per_image.push(ImageResult {
            id: record.id.clone(),
            distances,
        });
    }
    let report = MetricsReport::from_distances(
        &pooled,
        records.len(),
        &spec.sdr_thresholds,
        spec.spacing.unit(),
    )?;
    Ok(Evaluation { report, per_image })
}

/// Convenience wrapper evaluating a trained network.
pub fn evaluate_net(
    net: &LandmarkNet,
    index: &DatasetIndex,
    selection: &EvalSelection,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let predictor = NetPredictor {
        net,
        decode: opts.decode,
    };
    evaluate(&predictor, index, selection, opts)
}

/// Writes per-image errors as CSV, one row per image.
pub fn write_per_image_csv(path: &Path, eval: &Evaluation) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &eval.per_image {
        let mut row = vec![r.id.clone()];
        row.extend(r.distances.iter().map(|d| d.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ImageSpace, Landmark};
    use proptest::prelude::*;

    fn space() -> ImageSpace {
        ImageSpace::new(200, 200).unwrap()
    }

    fn set(points: &[(f64, f64)]) -> LandmarkSet {
        LandmarkSet::new(
            points.iter().map(|&(x, y)| Landmark::new(x, y)).collect(),
            space(),
        )
        .unwrap()
    }

    #[test]
    fn wrist_factor() {
        let mut pts = vec![(0.0, 0.0); 37];
        pts[4] = (0.0, 100.0);
        assert_eq!(spacing_factor(&set(&pts), &SpacingModel::HAND).unwrap(), 0.5);
        pts[4] = (30.0, 40.0);
        assert_eq!(spacing_factor(&set(&pts), &SpacingModel::HAND).unwrap(), 50.0 / 50.0);
    }

    #[test]
    fn coincident_wrist_endpoints_fail() {
        let pts = vec![(3.0, 3.0); 37];
        assert!(matches!(
            spacing_factor(&set(&pts), &SpacingModel::HAND),
            Err(Error::Spacing(_))
        ));
    }

    #[test]
    fn wrist_indices_must_exist() {
        assert!(spacing_factor(&set(&[(0.0, 0.0), (1.0, 1.0)]), &SpacingModel::HAND).is_err());
    }

    #[test]
    fn fixed_and_pixel_factors() {
        let s = set(&[(1.0, 2.0)]);
        assert_eq!(spacing_factor(&s, &SpacingModel::HEAD).unwrap(), 0.1);
        assert_eq!(spacing_factor(&s, &SpacingModel::Pixel).unwrap(), 1.0);
    }

    #[test]
    fn mre_is_arithmetic_mean() {
        let truth = set(&[(0.0, 0.0), (10.0, 10.0)]);
        let pred = set(&[(3.0, 4.0), (10.0, 10.0)]);
        assert_eq!(mre(&[pred], &[truth.clone()], &SpacingModel::Pixel).unwrap(), 2.5);
        assert_eq!(mre(&[truth.clone()], &[truth], &SpacingModel::Pixel).unwrap(), 0.0);
    }

    #[test]
    fn sdr_boundary_is_inclusive() {
        // distances 1, 3 and 5 mm at 0.1 mm/px
        let truth = set(&[(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)]);
        let pred = set(&[(10.0, 0.0), (0.0, 30.0), (30.0, 40.0)]);
        let rates = sdr(&[pred], &[truth], &SpacingModel::HEAD, &[3.0, 1e12]).unwrap();
        assert!((rates[0].1 - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(rates[1].1, 100.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            mre(&[], &[], &SpacingModel::Pixel),
            Err(Error::EmptyInput(_))
        ));
        assert!(sdr(&[], &[], &SpacingModel::Pixel, &[1.0]).is_err());
    }

    #[test]
    fn aggregate_identical_folds_has_zero_std() {
        let r = MetricsReport::from_distances(&[1.0, 2.0, 3.0], 1, &[2.0], Unit::Mm).unwrap();
        let agg = MetricsReport::aggregate(&[r.clone(), r.clone(), r]).unwrap();
        assert_eq!(agg.mre, 2.0);
        assert_eq!(agg.mre_std, Some(0.0));
        assert_eq!(agg.sdr[0].std, Some(0.0));
        assert_eq!(agg.n_images, 3);
    }

    #[test]
    fn aggregate_uses_population_std() {
        let a = MetricsReport::from_distances(&[1.0], 1, &[2.0], Unit::Mm).unwrap();
        let b = MetricsReport::from_distances(&[3.0], 1, &[2.0], Unit::Mm).unwrap();
        let agg = MetricsReport::aggregate(&[a, b]).unwrap();
        assert_eq!(agg.mre, 2.0);
        assert_eq!(agg.mre_std, Some(1.0));
        assert_eq!(agg.sdr[0].rate, 50.0);
        assert_eq!(agg.sdr[0].std, Some(50.0));
    }

    proptest! {
        #[test]
        fn sdr_monotone_and_mre_scales(
            pts in proptest::collection::vec((0.0f64..200.0, 0.0f64..200.0, 0.0f64..200.0, 0.0f64..200.0), 1..30),
            c in 0.01f64..10.0,
        ) {
            let pred = set(&pts.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>());
            let truth = set(&pts.iter().map(|p| (p.2, p.3)).collect::<Vec<_>>());
            let ts = [1.0, 5.0, 20.0, 80.0, 300.0];
            let rates = sdr(&[pred.clone()], &[truth.clone()], &SpacingModel::Pixel, &ts).unwrap();
            for w in rates.windows(2) {
                prop_assert!(w[0].1 <= w[1].1);
            }
            prop_assert_eq!(rates[4].1, 100.0);
            let px = mre(&[pred.clone()], &[truth.clone()], &SpacingModel::Pixel).unwrap();
            let mm = mre(&[pred], &[truth], &SpacingModel::FixedMmPerPx { mm_per_px: c }).unwrap();
            prop_assert!((mm - c * px).abs() <= 1e-9 * mm.abs().max(1.0));
        }
    }
}
