//! Region similarity (IoU), boundary F-measure and keypoint PCK.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn same_len(op: &'static str, a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        })
    }
}

/// `|pred ∩ gt| / |pred ∪ gt|`; 1 when both masks are empty.
pub fn region_similarity(pred: &[bool], gt: &[bool]) -> Result<f64> {
    same_len("region_similarity", pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with a 4-neighbour that is background or off-image.
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && mask[y as usize * width + x as usize]
    };
    (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as isize, (i % width) as isize);
            mask[i] && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))
        })
        .collect()
}

/// Fraction of `from` pixels within Euclidean distance `tol` of a `to` pixel.
fn matched_fraction(from: &[bool], to: &[bool], height: usize, width: usize, tol: usize) -> Option<f64> {
    let total = from.iter().filter(|&&b| b).count();
    if total == 0 {
        return None;
    }
    let t = tol as isize;
    let mut hit = 0;
    for (i, _) in from.iter().enumerate().filter(|(_, &b)| b) {
        let (y, x) = ((i / width) as isize, (i % width) as isize);
        let found = (-t..=t).any(|dy| {
            (-t..=t).any(|dx| {
                let (yy, xx) = (y + dy, x + dx);
                dy * dy + dx * dx <= t * t
                    && yy >= 0
                    && xx >= 0
                    && (yy as usize) < height
                    && (xx as usize) < width
                    && to[yy as usize * width + xx as usize]
            })
        });
        hit += found as usize;
    }
    Some(hit as f64 / total as f64)
}

/// Default matching tolerance: 0.8% of the image diagonal, rounded up.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

/// Boundary F-measure with disk matching at `tol` pixels; 1 when both
/// boundaries are empty, 0 when exactly one is.
pub fn contour_accuracy(pred: &[bool], gt: &[bool], height: usize, width: usize, tol: usize) -> Result<f64> {
    same_len("contour_accuracy", pred, gt)?;
    if pred.len() != height * width {
        return Err(Error::Shape {
            op: "contour_accuracy",
            lhs: vec![height, width],
            rhs: vec![pred.len()],
        });
    }
    let bp = boundary(pred, height, width);
    let bg = boundary(gt, height, width);
    let precision = matched_fraction(&bp, &bg, height, width, tol);
    let recall = matched_fraction(&bg, &bp, height, width, tol);
    Ok(match (precision, recall) {
        (None, None) => 1.0,
        (Some(p), Some(r)) if p + r > 0.0 => 2.0 * p * r / (p + r),
        _ => 0.0,
    })
}

/// Fraction of keypoints whose error is at most `alpha · reference_size`.
/// Not symmetric in its arguments when the reference comes from `gt`.
pub fn pck(pred: &[[f64; 2]], gt: &[[f64; 2]], alpha: f64, reference_size: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape {
            op: "pck",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    if !(reference_size > 0.0) || pred.is_empty() {
        return Err(Error::invalid("pck needs keypoints and a positive reference size"));
    }
    let thr = alpha * reference_size;
    let ok = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt() <= thr)
        .count();
    Ok(ok as f64 / pred.len() as f64)
}

/// Larger side of the keypoints' bounding box.
pub fn bbox_reference(points: &[[f64; 2]]) -> f64 {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (hi[0] - lo[0]).max(hi[1] - lo[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
}

impl SegScore {
    pub fn from_pairs(pairs: &[(f64, f64)]) -> SegScore {
        if pairs.is_empty() {
            return SegScore { j_mean: 1.0, f_mean: 1.0, jf_mean: 1.0 };
        }
        let n = pairs.len() as f64;
        let j_mean = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let f_mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        SegScore {
            j_mean,
            f_mean,
            jf_mean: (j_mean + f_mean) / 2.0,
        }
    }
}
