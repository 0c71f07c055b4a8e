//! Global and windowed correlation maps between two feature grids, their
//! use as reconstruction weights, window pooling to a coarser level, and the
//! per-query entropy used to select uncertain rows.
//!
//! A local map over an `h × w` grid with window side `r` (odd) is stored as
//! an `(h·w, r²)` tensor. Cell `k = (dy + R)·r + (dx + R)`, `R = r / 2`,
//! refers to reference position `(y + dy, x + dx)`. Cells falling outside
//! the grid are invalid: their weight is exactly 0.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to correlation entries before taking logs.
pub const ENTROPY_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct GlobalCorrelationMap {
    /// `(n, n)` with `n = h·w`; row `i` is a distribution over reference cells.
    pub values: Tensor,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct LocalCorrelationMap {
    /// `(h·w, r²)`.
    pub values: Tensor,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub valid: Arc<Vec<bool>>,
}

impl LocalCorrelationMap {
    pub fn queries(&self) -> usize {
        self.height * self.width
    }

    pub fn cells(&self) -> usize {
        self.window * self.window
    }

    /// Same map with the values cut from the graph.
    pub fn detached(&self) -> LocalCorrelationMap {
        LocalCorrelationMap {
            values: self.values.detach(),
            ..self.clone()
        }
    }
}

/// Reference index of window cell `k` for query `(y, x)`, if in bounds.
#[inline]
pub fn window_cell(y: usize, x: usize, k: usize, h: usize, w: usize, r: usize) -> Option<usize> {
    let half = (r / 2) as isize;
    let ry = y as isize + (k / r) as isize - half;
    let rx = x as isize + (k % r) as isize - half;
    (ry >= 0 && rx >= 0 && (ry as usize) < h && (rx as usize) < w).then(|| ry as usize * w + rx as usize)
}

pub fn window_valid(h: usize, w: usize, r: usize) -> Vec<bool> {
    let mut valid = Vec::with_capacity(h * w * r * r);
    for y in 0..h {
        for x in 0..w {
            valid.extend((0..r * r).map(|k| window_cell(y, x, k, h, w, r).is_some()));
        }
    }
    valid
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

fn grid(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        (&[h, w, d], sb) if sb == a.shape() => Ok((h, w, d)),
        _ => Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }),
    }
}

/// `a[i, j] = softmax_j(F_t(i)·F_r(j) / τ)` over every reference position.
pub fn global_correlation(ft: &Tensor, fr: &Tensor, tau: f64) -> Result<GlobalCorrelationMap> {
    let (h, w, d) = grid("global_correlation", ft, fr)?;
    check_tau(tau)?;
    let q = ft.reshape(&[h * w, d])?;
    let k = fr.reshape(&[h * w, d])?;
    let values = q.matmul(&k.transpose()?)?.scale(1.0 / tau)?.softmax_lastdim()?;
    Ok(GlobalCorrelationMap { values, tau })
}

/// Windowed similarity logits `F_t(i)·F_r(j) / τ`; invalid cells hold 0.
fn local_logits(ft: &Tensor, fr: &Tensor, r: usize, tau: f64) -> Result<Tensor> {
    let (h, w, d) = grid("local_correlation", ft, fr)?;
    let cells = r * r;
    let (a, b) = (ft.data(), fr.data());
    let inv = 1.0 / tau;
    let mut out = vec![0.0; h * w * cells];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let qi = &a[i * d..(i + 1) * d];
            for k in 0..cells {
                if let Some(j) = window_cell(y, x, k, h, w, r) {
                    out[i * cells + k] = crate::tensor::dot_product(qi, &b[j * d..(j + 1) * d]) * inv;
                }
            }
        }
    }
    let (a, b) = (ft.data().to_vec(), fr.data().to_vec());
    Tensor::from_op(
        "local_logits",
        vec![h * w, cells],
        out,
        &[ft, fr],
        Box::new(move |ctx| {
            let mut ga = vec![0.0; h * w * d];
            let mut gb = vec![0.0; h * w * d];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    for k in 0..cells {
                        let g = ctx.grad[i * cells + k] * inv;
                        if g == 0.0 {
                            continue;
                        }
                        if let Some(j) = window_cell(y, x, k, h, w, r) {
                            for c in 0..d {
                                ga[i * d + c] += g * b[j * d + c];
                                gb[j * d + c] += g * a[i * d + c];
                            }
                        }
                    }
                }
            }
            Ok(vec![Some(ga), Some(gb)])
        }),
    )
}

/// Softmax over the in-bounds cells of the `r × r` window centred on each
/// query's own position.
pub fn local_correlation(ft: &Tensor, fr: &Tensor, r: usize, tau: f64) -> Result<LocalCorrelationMap> {
    if r % 2 == 0 {
        return Err(Error::invalid(format!("window size must be odd, got {r}")));
    }
    check_tau(tau)?;
    let (h, w, _) = grid("local_correlation", ft, fr)?;
    let valid = Arc::new(window_valid(h, w, r));
    let values = local_logits(ft, fr, r, tau)?.masked_softmax_lastdim(valid.clone())?;
    Ok(LocalCorrelationMap {
        values,
        height: h,
        width: w,
        window: r,
        valid,
    })
}

/// `Î(i) = Σ_j c_ij I_r(j)` over the window, accumulated in cell order.
pub fn reconstruct_frame(c: &LocalCorrelationMap, reference: &Tensor) -> Result<Tensor> {
    let (h, w, r) = (c.height, c.width, c.window);
    let ch = match reference.shape() {
        &[rh, rw, ch] if rh == h && rw == w => ch,
        s => {
            return Err(Error::Shape {
                op: "reconstruct_frame",
                lhs: vec![h, w, r * r],
                rhs: s.to_vec(),
            })
        }
    };
    let cells = r * r;
    let cv = c.values.data();
    let iv = reference.data();
    let mut out = vec![0.0; h * w * ch];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for ci in 0..ch {
                let mut acc = 0.0;
                for k in 0..cells {
                    if let Some(j) = window_cell(y, x, k, h, w, r) {
                        acc += cv[i * cells + k] * iv[j * ch + ci];
                    }
                }
                out[i * ch + ci] = acc;
            }
        }
    }
    let (cv, iv) = (cv.to_vec(), iv.to_vec());
    Tensor::from_op(
        "reconstruct_frame",
        vec![h, w, ch],
        out,
        &[&c.values, reference],
        Box::new(move |ctx| {
            let mut gc = vec![0.0; h * w * cells];
            let mut gi = vec![0.0; h * w * ch];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let g = &ctx.grad[i * ch..(i + 1) * ch];
                    for k in 0..cells {
                        if let Some(j) = window_cell(y, x, k, h, w, r) {
                            let wgt = cv[i * cells + k];
                            let mut s = 0.0;
                            for c in 0..ch {
                                s += g[c] * iv[j * ch + c];
                                gi[j * ch + c] += wgt * g[c];
                            }
                            gc[i * cells + k] = s;
                        }
                    }
                }
            }
            Ok(vec![Some(gc), Some(gi)])
        }),
    )
}

/// Window size at the finer level that pools exactly onto `r_coarse`.
pub fn compatible_fine_window(r_coarse: usize, stride: usize) -> usize {
    stride * (r_coarse - 1) + 1
}

/// Pools a level-`l` map onto the grid and window of level `l + 1`.
///
/// Coarse query `(Y, X)` reads fine query `(sY + ⌊s/2⌋, sX + ⌊s/2⌋)`. Each
/// fine window cell lands in the coarse cell that contains its reference
/// position; weights landing in the same coarse cell are averaged and the
/// row is renormalized. The result is a constant (no gradient).
pub fn correlation_downsample(
    c: &LocalCorrelationMap,
    stride: usize,
    r_coarse: usize,
) -> Result<LocalCorrelationMap> {
    if stride == 0 || c.height % stride != 0 || c.width % stride != 0 {
        return Err(Error::invalid(format!(
            "grid {}x{} is not divisible by stride {stride}",
            c.height, c.width
        )));
    }
    if r_coarse % 2 == 0 {
        return Err(Error::invalid(format!("window size must be odd, got {r_coarse}")));
    }
    let need = compatible_fine_window(r_coarse, stride);
    if c.window != need {
        return Err(Error::invalid(format!(
            "fine window {} cannot pool onto window {r_coarse} at stride {stride}; r^l must be {need}",
            c.window
        )));
    }
    let (hf, wf, rf) = (c.height, c.width, c.window);
    let (hc, wc, rc) = (hf / stride, wf / stride, r_coarse);
    let (half_f, half_c) = ((rf / 2) as isize, (rc / 2) as isize);
    let off = (stride / 2) as isize;
    let s = stride as isize;
    let cf = c.values.data();
    let (cells_f, cells_c) = (rf * rf, rc * rc);
    let valid = window_valid(hc, wc, rc);
    let mut out = vec![0.0; hc * wc * cells_c];
    let mut counts = vec![0usize; cells_c];
    for yc in 0..hc {
        for xc in 0..wc {
            let q = yc * wc + xc;
            let (yf, xf) = (yc * stride + stride / 2, xc * stride + stride / 2);
            let i = yf * wf + xf;
            let row = &mut out[q * cells_c..(q + 1) * cells_c];
            counts.iter_mut().for_each(|n| *n = 0);
            for k in 0..cells_f {
                let dy = (k / rf) as isize - half_f;
                let dx = (k % rf) as isize - half_f;
                let qy = (off + dy).div_euclid(s) + half_c;
                let qx = (off + dx).div_euclid(s) + half_c;
                let kc = (qy * rc as isize + qx) as usize;
                row[kc] += cf[i * cells_f + k];
                counts[kc] += 1;
            }
            let mut total = 0.0;
            for (kc, v) in row.iter_mut().enumerate() {
                if valid[q * cells_c + kc] && counts[kc] > 0 {
                    *v /= counts[kc] as f64;
                    total += *v;
                } else {
                    *v = 0.0;
                }
            }
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            } else {
                // No mass survived pooling: fall back to uniform over valid cells.
                let n = valid[q * cells_c..(q + 1) * cells_c].iter().filter(|&&b| b).count();
                for (kc, v) in row.iter_mut().enumerate() {
                    if valid[q * cells_c + kc] {
                        *v = 1.0 / n as f64;
                    }
                }
            }
        }
    }
    Ok(LocalCorrelationMap {
        values: Tensor::new(&[hc * wc, cells_c], out)?,
        height: hc,
        width: wc,
        window: rc,
        valid: Arc::new(valid),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyConvention {
    /// `Σ_j −log c_ij`
    AsWritten,
    /// `Σ_j −c_ij log c_ij`
    Shannon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub values: Vec<f64>,
    pub convention: EntropyConvention,
}

/// Per-query entropy over the valid window cells.
pub fn entropy_map(c: &LocalCorrelationMap, convention: EntropyConvention) -> Result<EntropyMap> {
    let cells = c.cells();
    let values: Vec<f64> = c
        .values
        .data()
        .chunks_exact(cells)
        .zip(c.valid.chunks_exact(cells))
        .map(|(row, valid)| {
            row.iter()
                .zip(valid)
                .filter(|(_, &ok)| ok)
                .map(|(&p, _)| {
                    let pc = p.max(ENTROPY_CLAMP);
                    match convention {
                        EntropyConvention::AsWritten => -pc.ln(),
                        EntropyConvention::Shannon => -p * pc.ln(),
                    }
                })
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFault { op: "entropy_map" });
    }
    Ok(EntropyMap { values, convention })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Threshold {
    Absolute(f64),
    /// Per-map quantile in `(0, 1)`.
    Quantile(f64),
}

/// `m_i = H(i) > T`, with `T` either fixed or the map's own quantile.
pub fn entropy_mask(h: &EntropyMap, threshold: Threshold) -> Result<Vec<bool>> {
    let t = match threshold {
        Threshold::Absolute(t) => t,
        Threshold::Quantile(q) => {
            if !(q > 0.0 && q < 1.0) {
                return Err(Error::invalid(format!("quantile {q} outside (0, 1)")));
            }
            if h.values.is_empty() {
                return Ok(Vec::new());
            }
            let mut sorted = h.values.clone();
            sorted.sort_by(f64::total_cmp);
            let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
            sorted[idx]
        }
    };
    Ok(h.values.iter().map(|&v| v > t).collect())
}
