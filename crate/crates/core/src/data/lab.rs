//! sRGB ↔ CIE Lab (D65) and the fixed normalization fed to the encoder.

use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// D65 reference white.
pub const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

static XYZ_TO_RGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&RGB_TO_XYZ));

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 1, 2, 2), -c(1, 0, 2, 2), c(1, 0, 2, 1)],
        [-c(0, 1, 2, 2), c(0, 0, 2, 2), -c(0, 0, 2, 1)],
        [c(0, 1, 1, 2), -c(0, 0, 1, 2), c(0, 0, 1, 1)],
    ];
    let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = cof[j][i] / det;
        }
    }
    inv
}

fn mat3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn srgb_decode(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn srgb_encode(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

const DELTA: f64 = 6.0 / 29.0;

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

pub fn rgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let [x, y, z] = mat3(&RGB_TO_XYZ, rgb.map(srgb_decode));
    let (fx, fy, fz) = (lab_f(x / WHITE[0]), lab_f(y / WHITE[1]), lab_f(z / WHITE[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse conversion; the result is clamped into the sRGB cube.
pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        WHITE[0] * lab_f_inv(fx),
        WHITE[1] * lab_f_inv(fy),
        WHITE[2] * lab_f_inv(fz),
    ];
    mat3(&XYZ_TO_RGB, xyz).map(|c| srgb_encode(c.max(0.0)).clamp(0.0, 1.0))
}

fn map_pixels(frame: &Tensor, f: impl Fn([f64; 3]) -> Result<[f64; 3]>) -> Result<Tensor> {
    if frame.shape().len() != 3 || frame.shape()[2] != 3 {
        return Err(Error::Shape {
            op: "color conversion",
            lhs: frame.shape().to_vec(),
            rhs: vec![0, 0, 3],
        });
    }
    let mut out = Vec::with_capacity(frame.numel());
    for px in frame.data().chunks_exact(3) {
        out.extend_from_slice(&f([px[0], px[1], px[2]])?);
    }
    Tensor::new(frame.shape(), out)
}

/// `(H, W, 3)` sRGB in `[0, 1]` to raw Lab.
pub fn rgb_to_lab(frame: &Tensor) -> Result<Tensor> {
    map_pixels(frame, |px| {
        if px.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid(format!("rgb value {px:?} outside [0, 1]")));
        }
        Ok(rgb_to_lab_pixel(px))
    })
}

pub fn lab_to_rgb(frame: &Tensor) -> Result<Tensor> {
    map_pixels(frame, |px| Ok(lab_to_rgb_pixel(px)))
}

/// Per-channel affine map `(v − mean) / range` applied to raw Lab.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabNorm {
    pub mean: [f64; 3],
    pub range: [f64; 3],
}

impl Default for LabNorm {
    fn default() -> Self {
        LabNorm {
            mean: [50.0, 0.0, 0.0],
            range: [100.0, 220.0, 220.0],
        }
    }
}

impl LabNorm {
    pub fn normalize(&self, lab: &Tensor) -> Result<Tensor> {
        map_pixels(lab, |px| Ok([0, 1, 2].map(|c| (px[c] - self.mean[c]) / self.range[c])))
    }

    pub fn denormalize(&self, lab: &Tensor) -> Result<Tensor> {
        map_pixels(lab, |px| Ok([0, 1, 2].map(|c| px[c] * self.range[c] + self.mean[c])))
    }

    /// RGB frame straight to the encoder's input space.
    pub fn encode_rgb(&self, rgb: &Tensor) -> Result<Tensor> {
        self.normalize(&rgb_to_lab(rgb)?)
    }
}
