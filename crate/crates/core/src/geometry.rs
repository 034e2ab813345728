//! Landmark coordinates and the image spaces they live in.
//!
//! Coordinates are continuous with the origin at the center of the top-left
//! pixel; `x` is the column and `y` the row. Resizing maps each axis
//! independently by the ratio of the side lengths.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel dimensions of an image grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSpace")]
pub struct ImageSpace {
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct RawSpace {
    width: u32,
    height: u32,
}

impl TryFrom<RawSpace> for ImageSpace {
    type Error = Error;

    fn try_from(raw: RawSpace) -> Result<Self> {
        ImageSpace::new(raw.width, raw.height)
    }
}

impl ImageSpace {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidSpace { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Continuous coordinate of the grid center.
    pub fn center(&self) -> Landmark {
        Landmark::new(
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// Whether `p` falls on a pixel of this grid, i.e. inside `[0, w) x [0, h)`.
    pub fn contains(&self, p: Landmark) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }
}

impl fmt::Display for ImageSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
}

impl Landmark {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Landmark) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Ordered landmarks of one image, in the dataset's annotation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    landmarks: Vec<Landmark>,
    space: ImageSpace,
}

impl LandmarkSet {
    pub fn new(landmarks: Vec<Landmark>, space: ImageSpace) -> Result<Self> {
        if let Some(i) = landmarks.iter().position(|p| !p.is_finite()) {
            return Err(Error::contract(format!("landmark {i} is not finite")));
        }
        Ok(Self { landmarks, space })
    }

    /// Builds a set from interleaved `x1, y1, x2, y2, ...` values.
    pub fn from_flat(values: &[f64], space: ImageSpace) -> Result<Self> {
        if values.len() % 2 != 0 {
            return Err(Error::contract(format!(
                "odd number of coordinates ({})",
                values.len()
            )));
        }
        let landmarks = values
            .chunks_exact(2)
            .map(|xy| Landmark::new(xy[0], xy[1]))
            .collect();
        Self::new(landmarks, space)
    }

    pub fn landmarks(&self) -> &[Landmark] {
        &self.landmarks
    }

    pub fn space(&self) -> ImageSpace {
        self.space
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Landmark> {
        self.landmarks.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Landmark> {
        self.landmarks.iter()
    }

    /// Indices of landmarks that fall outside the grid.
    pub fn out_of_bounds(&self) -> Vec<usize> {
        self.landmarks
            .iter()
            .enumerate()
            .filter(|(_, p)| !self.space.contains(**p))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.landmarks.iter().flat_map(|p| [p.x, p.y]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One image of a benchmark together with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub id: String,
    /// Path relative to the dataset root.
    pub image_path: String,
    pub original_space: ImageSpace,
    pub truth: LandmarkSet,
    pub split: Split,
}

/// Rescales landmarks from one grid to another, each axis independently.
pub fn map_landmarks(src: &LandmarkSet, from: ImageSpace, to: ImageSpace) -> Result<LandmarkSet> {
    if src.space != from {
        return Err(Error::contract(format!(
            "landmarks are in {} but mapping starts from {from}",
            src.space
        )));
    }
    let (fw, fh) = (from.width as f64, from.height as f64);
    let (tw, th) = (to.width as f64, to.height as f64);
    let landmarks = src
        .landmarks
        .iter()
        .map(|p| Landmark::new(p.x * tw / fw, p.y * th / fh))
        .collect();
    Ok(LandmarkSet {
        landmarks,
        space: to,
    })
}

/// Per-landmark Euclidean distances, in pixels of the shared space.
pub fn radial_distances(pred: &LandmarkSet, truth: &LandmarkSet) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "landmark count mismatch: {} predicted vs {} ground truth",
            pred.len(),
            truth.len()
        )));
    }
    if pred.space != truth.space {
        return Err(Error::contract(format!(
            "space mismatch: prediction in {}, ground truth in {}",
            pred.space, truth.space
        )));
    }
    Ok(pred
        .landmarks
        .iter()
        .zip(&truth.landmarks)
        .map(|(p, t)| p.distance(t))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space(w: u32, h: u32) -> ImageSpace {
        ImageSpace::new(w, h).unwrap()
    }

    fn set(points: &[(f64, f64)], s: ImageSpace) -> LandmarkSet {
        LandmarkSet::new(points.iter().map(|&(x, y)| Landmark::new(x, y)).collect(), s).unwrap()
    }

    #[test]
    fn zero_sized_space_is_rejected() {
        assert!(matches!(
            ImageSpace::new(0, 10),
            Err(Error::InvalidSpace { .. })
        ));
        assert!(ImageSpace::new(10, 0).is_err());
        let parsed: std::result::Result<ImageSpace, _> =
            serde_json::from_str(r#"{"width":0,"height":3}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn halving() {
        let from = space(1000, 1000);
        let to = space(500, 500);
        let out = map_landmarks(&set(&[(100.0, 200.0)], from), from, to).unwrap();
        assert_eq!(out.landmarks()[0], Landmark::new(50.0, 100.0));
        assert_eq!(out.space(), to);
    }

    #[test]
    fn identity_mapping() {
        let s = space(37, 91);
        let src = set(&[(1.25, 3.5), (36.9, 0.0)], s);
        assert_eq!(map_landmarks(&src, s, s).unwrap(), src);
    }

    #[test]
    fn hand_center_to_test_resolution() {
        // 781.5 * 512 / 1563 = 256, 1084.5 * 368 / 2169 = 184
        let from = space(1563, 2169);
        let to = space(512, 368);
        let out = map_landmarks(&set(&[(1563.0 / 2.0, 2169.0 / 2.0)], from), from, to).unwrap();
        assert_eq!(out.landmarks()[0], Landmark::new(256.0, 184.0));
    }

    #[test]
    fn mapping_requires_matching_source_space() {
        let src = set(&[(1.0, 1.0)], space(10, 10));
        assert!(matches!(
            map_landmarks(&src, space(20, 20), space(5, 5)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn three_four_five() {
        let s = space(10, 10);
        let d = radial_distances(&set(&[(3.0, 4.0)], s), &set(&[(0.0, 0.0)], s)).unwrap();
        assert_eq!(d, vec![5.0]);
        let same = set(&[(1.0, 2.0), (3.0, 4.0)], s);
        assert_eq!(radial_distances(&same, &same).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn distance_contract_errors() {
        let s = space(10, 10);
        let one = set(&[(1.0, 1.0)], s);
        let two = set(&[(1.0, 1.0), (2.0, 2.0)], s);
        assert!(radial_distances(&one, &two).is_err());
        let other = set(&[(1.0, 1.0)], space(11, 10));
        assert!(radial_distances(&one, &other).is_err());
    }

    #[test]
    fn distances_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = space(512, 512);
        let mut coords = Vec::new();
        for _ in 0..100 {
            coords.push([
                rng.random_range(0.0..512.0),
                rng.random_range(0.0..512.0),
                rng.random_range(0.0..512.0),
                rng.random_range(0.0..512.0),
            ]);
        }
        let pred = set(&coords.iter().map(|c| (c[0], c[1])).collect::<Vec<_>>(), s);
        let truth = set(&coords.iter().map(|c| (c[2], c[3])).collect::<Vec<_>>(), s);
        let got = radial_distances(&pred, &truth).unwrap();
        for (i, c) in coords.iter().enumerate() {
            let dx = c[0] - c[2];
            let dy = c[1] - c[3];
            let expected = (dx * dx + dy * dy).sqrt();
            assert!((got[i] - expected).abs() <= 1e-12 * expected.max(1.0));
        }
    }

    #[test]
    fn non_finite_landmarks_are_rejected() {
        assert!(LandmarkSet::new(vec![Landmark::new(f64::NAN, 0.0)], space(2, 2)).is_err());
    }

    #[test]
    fn out_of_bounds_is_reported_not_clamped() {
        let s = space(10, 10);
        let lms = set(&[(-0.5, 1.0), (9.99, 9.99), (10.0, 0.0)], s);
        assert_eq!(lms.out_of_bounds(), vec![0, 2]);
        assert_eq!(lms.landmarks()[0].x, -0.5);
    }

    proptest! {
        #[test]
        fn round_trip_mapping(
            x in 0.0f64..4000.0, y in 0.0f64..4000.0,
            fw in 1u32..4000, fh in 1u32..4000, tw in 1u32..1024, th in 1u32..1024,
        ) {
            let from = space(fw, fh);
            let to = space(tw, th);
            let src = set(&[(x, y)], from);
            let back = map_landmarks(&map_landmarks(&src, from, to).unwrap(), to, from).unwrap();
            let p = back.landmarks()[0];
            prop_assert!((p.x - x).abs() <= 1e-9 * x.max(1.0));
            prop_assert!((p.y - y).abs() <= 1e-9 * y.max(1.0));
        }

        #[test]
        fn mapping_is_linear(x in 0.0f64..500.0, y in 0.0f64..500.0, alpha in 1u32..8) {
            let from = space(500, 400);
            let to = space(128, 96);
            let a = alpha as f64;
            let base = map_landmarks(&set(&[(x, y)], from), from, to).unwrap().landmarks()[0];
            let scaled_from = space(500 * alpha, 400 * alpha);
            let scaled_to = space(128 * alpha, 96 * alpha);
            let scaled = map_landmarks(&set(&[(a * x, a * y)], scaled_from), scaled_from, scaled_to)
                .unwrap()
                .landmarks()[0];
            prop_assert!((scaled.x - a * base.x).abs() <= 1e-9 * scaled.x.max(1.0));
            prop_assert!((scaled.y - a * base.y).abs() <= 1e-9 * scaled.y.max(1.0));
        }

        #[test]
        fn distances_symmetric_and_translation_invariant(
            pts in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0), 1..20),
            dx in -50.0f64..50.0, dy in -50.0f64..50.0,
        ) {
            let s = space(100, 100);
            let a = set(&pts.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), s);
            let b = set(&pts.iter().map(|p| (p.2, p.3)).collect::<Vec<_>>(), s);
            let ab = radial_distances(&a, &b).unwrap();
            prop_assert_eq!(&ab, &radial_distances(&b, &a).unwrap());
            let a2 = set(&pts.iter().map(|p| (p.0 + dx, p.1 + dy)).collect::<Vec<_>>(), s);
            let b2 = set(&pts.iter().map(|p| (p.2 + dx, p.3 + dy)).collect::<Vec<_>>(), s);
            for (d, d2) in ab.iter().zip(radial_distances(&a2, &b2).unwrap()) {
                prop_assert!((d - d2).abs() <= 1e-9);
            }
            prop_assert!(ab.iter().all(|d| *d >= 0.0));
        }
    }
}
