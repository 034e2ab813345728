//! Gaussian heatmap labels and peak decoding.
//!
//! Each landmark becomes one channel holding an unnormalized Gaussian with
//! peak amplitude 1. Values further than `sqrt(2 ln 1e4)` sigma from the
//! center (below 1e-4) are left at zero.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImageSpace, Landmark, LandmarkSet};

/// Default Gaussian width in pixels at training resolution.
pub const DEFAULT_SIGMA: f64 = 5.0;

/// Landmarks further than this many sigmas outside the grid yield an empty channel.
pub const OFF_GRID_SIGMAS: f64 = 3.0;

const TRUNCATION: f64 = 1e-4;

/// A `K x H x W` stack of per-landmark maps.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    values: Vec<f32>,
    channels: usize,
    space: ImageSpace,
    sigma: Option<f64>,
    flagged: Vec<bool>,
}

impl HeatmapStack {
    pub fn new(values: Vec<f32>, channels: usize, space: ImageSpace) -> Result<Self> {
        if values.len() != channels * space.pixels() {
            return Err(Error::contract(format!(
                "{channels} channels of {space} need {} values, got {}",
                channels * space.pixels(),
                values.len()
            )));
        }
        Ok(Self {
            values,
            channels,
            space,
            sigma: None,
            flagged: vec![false; channels],
        })
    }

    /// Wraps a `(K, H, W)` prediction tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (k, h, w) = t.dims3()?;
        let values = t
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(values, k, ImageSpace::new(w as u32, h as u32)?)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn space(&self) -> ImageSpace {
        self.space
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.space.pixels();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f32] {
        let n = self.space.pixels();
        &mut self.values[k * n..(k + 1) * n]
    }

    /// Channels whose landmark lay too far off the grid to be encoded.
    pub fn flagged(&self) -> &[bool] {
        &self.flagged
    }

    pub fn at(&self, k: usize, x: usize, y: usize) -> f32 {
        self.channel(k)[y * self.space.width() as usize + x]
    }
}

/// Renders one Gaussian channel per landmark.
pub fn encode(lms: &LandmarkSet, space: ImageSpace, sigma: f64) -> Result<HeatmapStack> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
    }
    if lms.space() != space {
        return Err(Error::contract(format!(
            "landmarks are in {} but heatmaps requested in {space}",
            lms.space()
        )));
    }
    let mut stack = HeatmapStack::new(vec![0.0; lms.len() * space.pixels()], lms.len(), space)?;
    stack.sigma = Some(sigma);
    let radius = sigma * (2.0 * (1.0 / TRUNCATION).ln()).sqrt();
    let (w, h) = (space.width() as f64, space.height() as f64);
    let margin = OFF_GRID_SIGMAS * sigma;
    for (k, p) in lms.iter().enumerate() {
        if p.x < -margin || p.y < -margin || p.x > w - 1.0 + margin || p.y > h - 1.0 + margin {
            stack.flagged[k] = true;
            continue;
        }
        let x0 = (p.x - radius).floor().max(0.0) as usize;
        let x1 = (p.x + radius).ceil().min(w - 1.0) as usize;
        let y0 = (p.y - radius).floor().max(0.0) as usize;
        let y1 = (p.y + radius).ceil().min(h - 1.0) as usize;
        let denom = 2.0 * sigma * sigma;
        let width = space.width() as usize;
        let channel = stack.channel_mut(k);
        for v in y0..=y1 {
            let dy = v as f64 - p.y;
            for u in x0..=x1 {
                let dx = u as f64 - p.x;
                channel[v * width + u] = (-(dx * dx + dy * dy) / denom).exp() as f32;
            }
        }
    }
    Ok(stack)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Argmax,
    #[default]
    Subpixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub landmarks: LandmarkSet,
    /// Channels without a usable peak; their landmark is the grid center.
    pub low_confidence: Vec<bool>,
}

/// Locates each channel's peak.
///
/// Ties resolve to the first maximum in row-major order. Sub-pixel mode fits
/// a parabola through the peak and its two neighbours on each axis, with the
/// offset clamped to half a pixel.
pub fn decode(stack: &HeatmapStack, mode: DecodeMode) -> Result<Decoded> {
    if stack.channels == 0 {
        return Err(Error::contract("cannot decode an empty heatmap stack"));
    }
    let width = stack.space.width() as usize;
    let height = stack.space.height() as usize;
    let mut landmarks = Vec::with_capacity(stack.channels);
    let mut low_confidence = Vec::with_capacity(stack.channels);
    for k in 0..stack.channels {
        let ch = stack.channel(k);
        let mut best = 0usize;
        let mut max = f32::NEG_INFINITY;
        let mut min = f32::INFINITY;
        for (i, &v) in ch.iter().enumerate() {
            if v > max {
                max = v;
                best = i;
            }
            if v < min {
                min = v;
            }
        }
        if !max.is_finite() || max <= min {
            landmarks.push(stack.space.center());
            low_confidence.push(true);
            continue;
        }
        let (px, py) = (best % width, best / width);
        let mut p = Landmark::new(px as f64, py as f64);
        if mode == DecodeMode::Subpixel {
            if px > 0 && px + 1 < width {
                p.x += parabola_offset(ch[best - 1], ch[best], ch[best + 1]);
            }
            if py > 0 && py + 1 < height {
                p.y += parabola_offset(ch[best - width], ch[best], ch[best + width]);
            }
        }
        landmarks.push(p);
        low_confidence.push(false);
    }
    Ok(Decoded {
        landmarks: LandmarkSet::new(landmarks, stack.space)?,
        low_confidence,
    })
}

fn parabola_offset(left: f32, center: f32, right: f32) -> f64 {
    let (l, c, r) = (left as f64, center as f64, right as f64);
    let curvature = l - 2.0 * c + r;
    if curvature >= 0.0 {
        return 0.0;
    }
    (0.5 * (l - r) / curvature).clamp(-0.5, 0.5)
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

    fn lms(points: &[(f64, f64)], s: ImageSpace) -> LandmarkSet {
        LandmarkSet::new(points.iter().map(|&(x, y)| Landmark::new(x, y)).collect(), s).unwrap()
    }

    #[test]
    fn peak_is_one_at_integer_landmark() {
        let s = space(64, 48);
        for sigma in [1.0, 2.5, 5.0] {
            let stack = encode(&lms(&[(10.0, 20.0)], s), s, sigma).unwrap();
            assert_eq!(stack.at(0, 10, 20), 1.0);
            let d = decode(&stack, DecodeMode::Argmax).unwrap();
            assert_eq!(d.landmarks.landmarks()[0], Landmark::new(10.0, 20.0));
        }
    }

    #[test]
    fn one_sigma_value() {
        let s = space(64, 64);
        let stack = encode(&lms(&[(30.0, 30.0)], s), s, 4.0).unwrap();
        let expected = (-0.5f64).exp() as f32;
        assert!((stack.at(0, 34, 30) - expected).abs() < 1e-7);
        assert!((stack.at(0, 30, 26) - expected).abs() < 1e-7);
        assert!((expected - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn channels_match_scalar_reference() {
        let s = space(40, 30);
        let points = [(12.3, 7.9), (30.0, 22.5)];
        let sigma = 3.0;
        let stack = encode(&lms(&points, s), s, sigma).unwrap();
        let mut summed = vec![0.0f32; s.pixels()];
        for (k, &(px, py)) in points.iter().enumerate() {
            let single = encode(&lms(&[(px, py)], s), s, sigma).unwrap();
            assert_eq!(single.channel(0), stack.channel(k));
            for v in 0..30 {
                for u in 0..40 {
                    let g = (-((u as f64 - px).powi(2) + (v as f64 - py).powi(2))
                        / (2.0 * sigma * sigma))
                        .exp();
                    let got = stack.at(k, u, v) as f64;
                    if g >= TRUNCATION {
                        assert!((got - g).abs() < 1e-6, "({u},{v}) {got} vs {g}");
                    } else {
                        assert!(got < TRUNCATION);
                    }
                    summed[v * 40 + u] += got as f32;
                }
            }
        }
        let total: Vec<f32> = (0..s.pixels())
            .map(|i| stack.channel(0)[i] + stack.channel(1)[i])
            .collect();
        assert_eq!(total, summed);
    }

    #[test]
    fn far_off_grid_channel_is_zero_and_flagged() {
        let s = space(32, 32);
        let stack = encode(&lms(&[(-10.0, 5.0), (5.0, 5.0), (34.0, 5.0)], s), s, 3.0).unwrap();
        assert_eq!(stack.flagged(), &[true, false, false]);
        assert!(stack.channel(0).iter().all(|v| *v == 0.0));
        // within 3 sigma of the border: partial Gaussian, not flagged
        assert!(stack.channel(2).iter().any(|v| *v > 0.0));
    }

    #[test]
    fn bad_sigma_or_space() {
        let s = space(8, 8);
        assert!(encode(&lms(&[(1.0, 1.0)], s), s, 0.0).is_err());
        assert!(encode(&lms(&[(1.0, 1.0)], s), space(9, 8), 1.0).is_err());
    }

    #[test]
    fn constant_channel_decodes_to_center_with_flag() {
        let s = space(9, 7);
        let stack = HeatmapStack::new(vec![0.3; 2 * 63], 2, s).unwrap();
        let d = decode(&stack, DecodeMode::Subpixel).unwrap();
        assert_eq!(d.low_confidence, vec![true, true]);
        assert_eq!(d.landmarks.landmarks()[0], Landmark::new(4.0, 3.0));
    }

    #[test]
    fn ties_pick_first_in_row_major_order() {
        let s = space(4, 3);
        let mut v = vec![0.0; 12];
        v[6] = 1.0; // (2, 1)
        v[9] = 1.0; // (1, 2)
        let stack = HeatmapStack::new(v, 1, s).unwrap();
        let d = decode(&stack, DecodeMode::Argmax).unwrap();
        assert_eq!(d.landmarks.landmarks()[0], Landmark::new(2.0, 1.0));
    }

    #[test]
    fn subpixel_sweep_stays_within_half_pixel() {
        let s = space(128, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let p = (rng.random_range(5.0..122.0), rng.random_range(5.0..122.0));
            let stack = encode(&lms(&[p], s), s, 3.0).unwrap();
            let q = decode(&stack, DecodeMode::Subpixel).unwrap().landmarks.landmarks()[0];
            worst = worst.max((q.x - p.0).abs()).max((q.y - p.1).abs());
        }
        assert!(worst <= 0.5, "worst axis error {worst}");
        let stack = encode(&lms(&[(10.3, 20.7)], s), s, 3.0).unwrap();
        let q = decode(&stack, DecodeMode::Subpixel).unwrap().landmarks.landmarks()[0];
        assert!((q.x - 10.3).abs() <= 0.5 && (q.y - 20.7).abs() <= 0.5);
    }

    #[test]
    fn from_tensor_shape() {
        let t = Tensor::zeros((3, 5, 7), candle_core::DType::F32, &candle_core::Device::Cpu).unwrap();
        let stack = HeatmapStack::from_tensor(&t).unwrap();
        assert_eq!(stack.channels(), 3);
        assert_eq!(stack.space(), space(7, 5));
    }

    proptest! {
        #[test]
        fn argmax_round_trip(x in 0u32..64, y in 0u32..48, sigma in 0.5f64..8.0) {
            let s = space(64, 48);
            let set = lms(&[(x as f64, y as f64)], s);
            let stack = encode(&set, s, sigma).unwrap();
            prop_assert_eq!(decode(&stack, DecodeMode::Argmax).unwrap().landmarks, set);
        }

        #[test]
        fn integer_translation_shifts_channel(
            x in 10u32..40, y in 10u32..30, dx in -5i32..5, dy in -5i32..5,
        ) {
            let s = space(64, 48);
            let a = encode(&lms(&[(x as f64, y as f64)], s), s, 2.0).unwrap();
            let b = encode(
                &lms(&[((x as i32 + dx) as f64, (y as i32 + dy) as f64)], s), s, 2.0,
            ).unwrap();
            for v in 0..48i32 {
                for u in 0..64i32 {
                    let (su, sv) = (u - dx, v - dy);
                    if (0..64).contains(&su) && (0..48).contains(&sv) {
                        prop_assert_eq!(
                            b.at(0, u as usize, v as usize),
                            a.at(0, su as usize, sv as usize)
                        );
                    }
                }
            }
        }

        #[test]
        fn decode_invariant_to_positive_rescaling(
            x in 0.0f64..63.0, y in 0.0f64..47.0, scale in 0.01f32..100.0,
        ) {
            let s = space(64, 48);
            let stack = encode(&lms(&[(x, y)], s), s, 3.0).unwrap();
            let scaled = HeatmapStack::new(
                stack.values().iter().map(|v| v * scale).collect(), 1, s,
            ).unwrap();
            prop_assert_eq!(
                decode(&stack, DecodeMode::Argmax).unwrap(),
                decode(&scaled, DecodeMode::Argmax).unwrap()
            );
        }
    }
}
