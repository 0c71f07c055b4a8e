use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Crop area as a fraction of the source area, `[min, max]`.
    pub crop_scale: [f64; 2],
    pub flip_prob: f64,
    /// Per-channel additive RGB jitter is uniform in `[-jitter, jitter]`.
    pub jitter: f64,
    pub out_size: usize,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            crop_scale: [0.3, 1.0],
            flip_prob: 0.5,
            jitter: 0.1,
            out_size: 64,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity(size: usize) -> Self {
        AugmentationPolicy {
            crop_scale: [1.0, 1.0],
            flip_prob: 0.0,
            jitter: 0.0,
            out_size: size,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!("crop_scale {:?} must satisfy 0 < lo ≤ hi ≤ 1", self.crop_scale)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || self.jitter < 0.0 || self.out_size == 0 {
            return Err(Error::invalid("bad augmentation policy"));
        }
        Ok(())
    }

    /// Samples crop, flip and jitter for a square `src_size` image.
    pub fn draw(&self, rng: &mut impl Rng, src_size: usize) -> AugDraw {
        let area = rng.gen_range(self.crop_scale[0]..=self.crop_scale[1]);
        let side = ((area.sqrt() * src_size as f64).round() as usize).clamp(1, src_size);
        let y0 = rng.gen_range(0..=src_size - side);
        let x0 = rng.gen_range(0..=src_size - side);
        let flip = rng.gen_bool(self.flip_prob);
        let jitter = [0; 3].map(|_| {
            if self.jitter > 0.0 {
                rng.gen_range(-self.jitter..=self.jitter)
            } else {
                0.0
            }
        });
        AugDraw {
            crop: [y0, x0, side, side],
            flip,
            jitter,
            out_size: self.out_size,
        }
    }
}

/// One realized augmentation: crop `[y0, x0, h, w]`, flip, RGB offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct AugDraw {
    pub crop: [usize; 4],
    pub flip: bool,
    pub jitter: [f64; 3],
    pub out_size: usize,
}

impl AugDraw {
    pub fn flip_only(h: usize, w: usize) -> Self {
        assert_eq!(h, w, "square images only");
        AugDraw {
            crop: [0, 0, h, w],
            flip: true,
            jitter: [0.0; 3],
            out_size: h,
        }
    }
}

/// Bilinear resized crop, optional horizontal flip, clamped RGB jitter.
pub fn augment(image: &Tensor, draw: &AugDraw) -> Result<Tensor> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::Shape {
            op: "augment",
            lhs: image.shape().to_vec(),
            rhs: vec![],
        });
    };
    let [y0, x0, ch, cw] = draw.crop;
    if ch == 0 || cw == 0 || y0 + ch > h || x0 + cw > w {
        return Err(Error::invalid(format!(
            "crop {:?} exceeds {h}x{w} image",
            draw.crop
        )));
    }
    let out = draw.out_size;
    let src = image.data();
    let at = |y: usize, x: usize, k: usize| src[(y * w + x) * c + k];
    let mut data = Vec::with_capacity(out * out * c);
    for oy in 0..out {
        let sy = (y0 as f64 + (oy as f64 + 0.5) * ch as f64 / out as f64 - 0.5)
            .clamp(y0 as f64, (y0 + ch - 1) as f64);
        let (yl, fy) = (sy.floor() as usize, sy - sy.floor());
        let yh = (yl + 1).min(y0 + ch - 1);
        for ox in 0..out {
            let ox_src = if draw.flip { out - 1 - ox } else { ox };
            let sx = (x0 as f64 + (ox_src as f64 + 0.5) * cw as f64 / out as f64 - 0.5)
                .clamp(x0 as f64, (x0 + cw - 1) as f64);
            let (xl, fx) = (sx.floor() as usize, sx - sx.floor());
            let xh = (xl + 1).min(x0 + cw - 1);
            for k in 0..c {
                let top = at(yl, xl, k) * (1.0 - fx) + at(yl, xh, k) * fx;
                let bottom = at(yh, xl, k) * (1.0 - fx) + at(yh, xh, k) * fx;
                let v = top * (1.0 - fy) + bottom * fy + draw.jitter.get(k).copied().unwrap_or(0.0);
                data.push(if draw.jitter.iter().any(|&j| j != 0.0) {
                    v.clamp(0.0, 1.0)
                } else {
                    v
                });
            }
        }
    }
    Tensor::new(&[out, out, c], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image() -> Tensor {
        Tensor::from_fn(&[12, 12, 3], |i| ((i * 37) % 101) as f64 / 100.0).unwrap()
    }

    #[test]
    fn identity_policy_is_identity() {
        let img = image();
        let policy = AugmentationPolicy::identity(12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = policy.draw(&mut rng, 12);
        assert_eq!(augment(&img, &d).unwrap().data(), img.data());
    }

    #[test]
    fn double_flip_restores() {
        let img = image();
        let d = AugDraw::flip_only(12, 12);
        let once = augment(&img, &d).unwrap();
        assert_ne!(once.data(), img.data());
        assert_eq!(augment(&once, &d).unwrap().data(), img.data());
    }

    #[test]
    fn crops_stay_in_bounds() {
        let policy = AugmentationPolicy {
            crop_scale: [0.2, 1.0],
            flip_prob: 0.5,
            jitter: 0.1,
            out_size: 8,
            seed: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
        for _ in 0..1000 {
            let d = policy.draw(&mut rng, 40);
            let [y0, x0, h, w] = d.crop;
            assert!(h > 0 && w > 0 && y0 + h <= 40 && x0 + w <= 40);
        }
    }

    #[test]
    fn successive_draws_differ() {
        let policy = AugmentationPolicy {
            crop_scale: [0.3, 1.0],
            flip_prob: 0.5,
            jitter: 0.1,
            out_size: 8,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_ne!(policy.draw(&mut rng, 40), policy.draw(&mut rng, 40));
    }

    #[test]
    fn oversized_crop_is_an_error() {
        let d = AugDraw { crop: [4, 4, 10, 10], flip: false, jitter: [0.0; 3], out_size: 4 };
        assert!(augment(&image(), &d).is_err());
    }
}
