//! Training-time geometric and photometric augmentation.
//!
//! One affine draw moves both the image and its landmarks: the image is
//! resampled bilinearly, the landmarks are transformed analytically. The
//! transform acts about the image center.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Landmark, LandmarkSet};
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Rotation drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Isotropic scale drawn from `[scale.0, scale.1]`.
    pub scale: (f64, f64),
    /// Translation per axis as a fraction of that side's length.
    pub translate_frac: f64,
    /// Multiplicative brightness jitter, factor in `[1 - b, 1 + b]`.
    pub brightness: f64,
    /// Contrast jitter about the image mean, factor in `[1 - c, 1 + c]`.
    pub contrast: f64,
    /// Chance that each transform is applied at all.
    pub probability: f64,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            rotation_deg: 10.0,
            scale: (0.9, 1.1),
            translate_frac: 0.05,
            brightness: 0.2,
            contrast: 0.2,
            probability: 0.5,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// A policy whose draws are always the identity.
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
            translate_frac: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            probability: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("augmentation: {what}")));
        if !(0.0..=1.0).contains(&self.probability) {
            return bad("probability must lie in [0, 1]");
        }
        if !(self.scale.0 > 0.0 && self.scale.0 <= self.scale.1 && self.scale.1.is_finite()) {
            return bad("scale range must be positive and ordered");
        }
        for (name, v) in [
            ("rotation", self.rotation_deg),
            ("translation", self.translate_frac),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} range must be a non-negative half-width"));
            }
        }
        if self.brightness >= 1.0 || self.contrast >= 1.0 {
            return bad("brightness and contrast half-widths must stay below 1");
        }
        Ok(())
    }

    /// Samples one set of transform parameters for an image of `width x height`.
    pub fn draw(&self, rng: &mut impl Rng, width: usize, height: usize) -> AugmentDraw {
        let p = self.probability;
        let pick = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64, neutral: f64| {
            if rng.random::<f64>() < p && hi > lo {
                rng.random_range(lo..=hi)
            } else {
                neutral
            }
        };
        let r = self.rotation_deg;
        let t = self.translate_frac;
        let rotation_deg = pick(rng, -r, r, 0.0);
        let scale = pick(rng, self.scale.0, self.scale.1, 1.0);
        let (tx, ty) = if rng.random::<f64>() < p && t > 0.0 {
            (
                rng.random_range(-t..=t) * width as f64,
                rng.random_range(-t..=t) * height as f64,
            )
        } else {
            (0.0, 0.0)
        };
        let brightness = pick(rng, 1.0 - self.brightness, 1.0 + self.brightness, 1.0);
        let contrast = pick(rng, 1.0 - self.contrast, 1.0 + self.contrast, 1.0);
        AugmentDraw {
            rotation_deg,
            scale,
            translate: (tx, ty),
            brightness,
            contrast,
        }
    }
}

/// Concrete transform parameters of one augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub rotation_deg: f64,
    pub scale: f64,
    /// Translation in pixels.
    pub translate: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        rotation_deg: 0.0,
        scale: 1.0,
        translate: (0.0, 0.0),
        brightness: 1.0,
        contrast: 1.0,
    };

    fn sanitized(self) -> Self {
        let finite = self.rotation_deg.is_finite()
            && self.scale.is_finite()
            && self.translate.0.is_finite()
            && self.translate.1.is_finite()
            && self.brightness.is_finite()
            && self.contrast.is_finite();
        if !finite || self.scale <= 0.0 || self.brightness < 0.0 || self.contrast < 0.0 {
            Self::IDENTITY
        } else {
            self
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == 1.0 && self.translate == (0.0, 0.0)
    }

    fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.scale;
        [[k * c, -k * s], [k * s, k * c]]
    }

    /// Image of `p` under the geometric part of the draw.
    pub fn map_point(&self, p: Landmark, center: Landmark) -> Landmark {
        let m = self.linear();
        let (dx, dy) = (p.x - center.x, p.y - center.y);
        Landmark::new(
            m[0][0] * dx + m[0][1] * dy + center.x + self.translate.0,
            m[1][0] * dx + m[1][1] * dy + center.y + self.translate.1,
        )
    }

    fn unmap_point(&self, q: Landmark, center: Landmark) -> Landmark {
        let m = self.linear();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let (dx, dy) = (
            q.x - center.x - self.translate.0,
            q.y - center.y - self.translate.1,
        );
        Landmark::new(
            (m[1][1] * dx - m[0][1] * dy) / det + center.x,
            (-m[1][0] * dx + m[0][0] * dy) / det + center.y,
        )
    }

    /// Applies the draw to an image and its landmarks. Landmarks leaving the
    /// grid are kept as they are; out-of-image pixels are filled with zero.
    pub fn apply(&self, image: &Raster, lms: &LandmarkSet) -> Result<(Raster, LandmarkSet)> {
        if lms.space() != image.space() {
            return Err(Error::contract(format!(
                "landmarks in {} for an image of {}",
                lms.space(),
                image.space()
            )));
        }
        let draw = self.sanitized();
        let center = image.space().center();
        let (mut out, lms) = if draw.is_geometric_identity() {
            (image.clone(), lms.clone())
        } else {
            let mut out = Raster::filled(image.space(), 0.0);
            for y in 0..image.height() {
                for x in 0..image.width() {
                    let src = draw.unmap_point(Landmark::new(x as f64, y as f64), center);
                    out.set(x, y, image.sample_bilinear(src, 0.0));
                }
            }
            let moved = lms.iter().map(|p| draw.map_point(*p, center)).collect();
            (out, LandmarkSet::new(moved, lms.space())?)
        };
        if draw.contrast != 1.0 || draw.brightness != 1.0 {
            let data = out.data_mut();
            let mean = data.iter().map(|v| *v as f64).sum::<f64>() / data.len() as f64;
            for v in data.iter_mut() {
                let adjusted = ((*v as f64 - mean) * draw.contrast + mean) * draw.brightness;
                *v = adjusted.clamp(0.0, 1.0) as f32;
            }
        }
        Ok((out, lms))
    }
}

/// Samples and applies one augmentation.
pub fn apply(
    image: &Raster,
    lms: &LandmarkSet,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Result<(Raster, LandmarkSet, AugmentDraw)> {
    let draw = policy.draw(rng, image.width(), image.height());
    let (img, lms) = draw.apply(image, lms)?;
    Ok((img, lms, draw))
}

/// Independent random stream for one image in one epoch.
pub fn rng_for(seed: u64, image_id: &str, epoch: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update(image_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageSpace;

    fn textured(w: u32, h: u32) -> Raster {
        let s = ImageSpace::new(w, h).unwrap();
        let data = (0..s.pixels())
            .map(|i| ((i * 37 % 101) as f32) / 100.0)
            .collect();
        Raster::new(s, data).unwrap()
    }

    fn set(points: &[(f64, f64)], s: ImageSpace) -> LandmarkSet {
        LandmarkSet::new(points.iter().map(|&(x, y)| Landmark::new(x, y)).collect(), s).unwrap()
    }

    #[test]
    fn identity_policy_is_a_no_op() {
        let img = textured(17, 11);
        let lms = set(&[(3.2, 4.5), (16.0, 0.0)], img.space());
        let mut rng = rng_for(1, "a", 0);
        let (out, moved, draw) = apply(&img, &lms, &AugmentPolicy::none(), &mut rng).unwrap();
        assert_eq!(draw, AugmentDraw::IDENTITY);
        assert_eq!(out, img);
        assert_eq!(moved, lms);
    }

    #[test]
    fn quarter_turn_of_square_image() {
        let img = textured(9, 9);
        let draw = AugmentDraw {
            rotation_deg: 90.0,
            ..AugmentDraw::IDENTITY
        };
        let (x, y) = (2.0, 7.0);
        let (out, moved) = draw.apply(&img, &set(&[(x, y)], img.space())).unwrap();
        let p = moved.landmarks()[0];
        assert!((p.x - (9.0 - 1.0 - y)).abs() < 1e-12);
        assert!((p.y - x).abs() < 1e-12);
        // pixel (x, y) lands on (H-1-y, x)
        for yy in 0..9 {
            for xx in 0..9 {
                let v = out.get(8 - yy, xx);
                assert!((v - img.get(xx, yy)).abs() < 1e-5, "({xx},{yy})");
            }
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let img = textured(32, 24);
        let lms = set(&[(5.0, 6.0), (20.0, 12.5)], img.space());
        let policy = AugmentPolicy {
            probability: 1.0,
            ..AugmentPolicy::default()
        };
        let a = apply(&img, &lms, &policy, &mut rng_for(42, "img7", 3)).unwrap();
        let b = apply(&img, &lms, &policy, &mut rng_for(42, "img7", 3)).unwrap();
        assert_eq!(a, b);
        let c = apply(&img, &lms, &policy, &mut rng_for(42, "img8", 3)).unwrap();
        assert_ne!(a.2, c.2);
    }

    #[test]
    fn landmarks_follow_the_analytic_transform() {
        let img = textured(40, 30);
        let lms = set(&[(5.0, 6.0), (39.0, 29.0), (-3.0, 2.0)], img.space());
        let policy = AugmentPolicy {
            probability: 1.0,
            rotation_deg: 30.0,
            ..AugmentPolicy::default()
        };
        for i in 0..20 {
            let mut rng = rng_for(5, "x", i);
            let (_, moved, draw) = apply(&img, &lms, &policy, &mut rng).unwrap();
            let center = img.space().center();
            for (p, q) in lms.iter().zip(moved.iter()) {
                assert_eq!(draw.map_point(*p, center), *q);
                let back = draw.unmap_point(*q, center);
                assert!((back.x - p.x).abs() < 1e-9 && (back.y - p.y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn image_content_tracks_landmarks() {
        // a single bright pixel must move where its landmark goes
        let s = ImageSpace::new(41, 41).unwrap();
        let mut img = Raster::filled(s, 0.0);
        img.set(12, 25, 1.0);
        let lms = set(&[(12.0, 25.0)], s);
        let draw = AugmentDraw {
            rotation_deg: 17.0,
            scale: 1.05,
            translate: (2.5, -1.5),
            ..AugmentDraw::IDENTITY
        };
        let (out, moved) = draw.apply(&img, &lms).unwrap();
        let p = moved.landmarks()[0];
        let (mut best, mut at) = (0.0, (0, 0));
        for y in 0..41 {
            for x in 0..41 {
                if out.get(x, y) > best {
                    best = out.get(x, y);
                    at = (x, y);
                }
            }
        }
        assert!((at.0 as f64 - p.x).abs() <= 1.0 && (at.1 as f64 - p.y).abs() <= 1.0);
    }

    #[test]
    fn photometric_jitter_leaves_landmarks() {
        let img = textured(10, 10);
        let lms = set(&[(1.5, 2.5)], img.space());
        let draw = AugmentDraw {
            brightness: 1.2,
            contrast: 0.8,
            ..AugmentDraw::IDENTITY
        };
        let (out, moved) = draw.apply(&img, &lms).unwrap();
        assert_eq!(moved, lms);
        assert_ne!(out, img);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn degenerate_draw_falls_back_to_identity() {
        let img = textured(10, 10);
        let lms = set(&[(1.5, 2.5)], img.space());
        let draw = AugmentDraw {
            scale: 0.0,
            rotation_deg: f64::NAN,
            ..AugmentDraw::IDENTITY
        };
        let (out, moved) = draw.apply(&img, &lms).unwrap();
        assert_eq!(out, img);
        assert_eq!(moved, lms);
    }

    #[test]
    fn policy_validation() {
        AugmentPolicy::default().validate().unwrap();
        AugmentPolicy::none().validate().unwrap();
        let bad = AugmentPolicy {
            scale: (1.1, 0.9),
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentPolicy {
            probability: 1.5,
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
    }
}
