//! Step-2 objective: pyramid frame reconstruction, local correlation
//! distillation with entropy selection, and global correlation distillation
//! against a frozen teacher.

use serde::{Deserialize, Serialize};

use crate::correlation::{
    correlation_downsample, entropy_map, entropy_mask, global_correlation, local_correlation,
    reconstruct_frame, EntropyConvention, GlobalCorrelationMap, LocalCorrelationMap, Threshold,
};
use crate::data::{center_sample, frame_pyramid, FramePyramid};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalLossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TemporalLossWeights {
    fn default() -> Self {
        TemporalLossWeights { alpha: 1.0, beta: 10.0 }
    }
}

impl TemporalLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_finite() && self.beta.is_finite() && self.alpha >= 0.0 && self.beta >= 0.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

/// Mean absolute difference.
pub fn reconstruction_loss(reconstructed: &Tensor, target: &Tensor) -> Result<Tensor> {
    reconstructed.l1_diff(target)?.mean()
}

/// `Σ_l mean |T(c^l, I^l_r) − I^l_t|` over the supplied levels.
pub fn pyramid_reconstruction_loss(
    maps: &[LocalCorrelationMap],
    targets: &[Tensor],
    references: &[Tensor],
) -> Result<Tensor> {
    if maps.is_empty() || maps.len() != targets.len() || maps.len() != references.len() {
        return Err(Error::invalid(format!(
            "pyramid reconstruction needs matching levels: {} maps, {} targets, {} references",
            maps.len(),
            targets.len(),
            references.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for ((c, t), r) in maps.iter().zip(targets).zip(references) {
        let l = reconstruction_loss(&reconstruct_frame(c, r)?, t)?;
        total = Some(match total {
            None => l,
            Some(acc) => acc.add(&l)?,
        });
    }
    Ok(total.expect("at least one level"))
}

/// `Σ_i m_i ‖c_i − ĉ_i‖²` divided by (selected queries × window cells).
/// The pseudo label is detached. An empty mask yields 0.
pub fn local_correlation_distillation(
    student: &LocalCorrelationMap,
    pseudo: &LocalCorrelationMap,
    mask: &[bool],
) -> Result<Tensor> {
    if student.values.shape() != pseudo.values.shape() {
        return Err(Error::Shape {
            op: "local_correlation_distillation",
            lhs: student.values.shape().to_vec(),
            rhs: pseudo.values.shape().to_vec(),
        });
    }
    let (n, cells) = (student.values.shape()[0], student.values.shape()[1]);
    if mask.len() != n {
        return Err(Error::Shape {
            op: "local_correlation_distillation",
            lhs: vec![n],
            rhs: vec![mask.len()],
        });
    }
    let selected = mask.iter().filter(|&&m| m).count();
    if selected == 0 {
        log::debug!("local correlation distillation: empty entropy mask");
        return Tensor::scalar(0.0);
    }
    let weights = Tensor::new(
        &[n, cells],
        mask.iter()
            .flat_map(|&m| std::iter::repeat(if m { 1.0 } else { 0.0 }).take(cells))
            .collect(),
    )?;
    student
        .values
        .sq_diff(&pseudo.values.detach())?
        .mul(&weights)?
        .sum()?
        .scale(1.0 / (selected * cells) as f64)
}

/// Mean squared difference against a detached teacher map.
pub fn global_correlation_distillation(
    student: &GlobalCorrelationMap,
    teacher: &GlobalCorrelationMap,
) -> Result<Tensor> {
    student.values.sq_diff(&teacher.values.detach())?.mean()
}

/// `L^p_rec + α·L^e_lc + β·L_gc`.
pub fn temporal_total_loss(
    rec: &Tensor,
    lc: &Tensor,
    gc: &Tensor,
    weights: TemporalLossWeights,
) -> Result<Tensor> {
    weights.validate()?;
    for t in [rec, lc, gc] {
        if t.numel() != 1 {
            return Err(Error::invalid(format!("loss terms must be scalars, got {:?}", t.shape())));
        }
    }
    rec.add(&lc.scale(weights.alpha)?)?.add(&gc.scale(weights.beta)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalConfig {
    /// Local window size per reconstruction level, fine to coarse
    /// (one entry per encoder level except the coarsest).
    pub windows: Vec<usize>,
    pub tau: f64,
    pub weights: TemporalLossWeights,
    /// Reconstruct at every level below the coarsest; otherwise only at the
    /// second-coarsest.
    pub pyramid: bool,
    /// Restrict local distillation to high-entropy queries.
    pub entropy_selection: bool,
    pub entropy: EntropyConvention,
    pub threshold: Threshold,
    /// Probability of zeroing one Lab channel of the encoder inputs.
    pub dropout_prob: f64,
    /// Reference frames precede targets by 1..=max_gap frames.
    pub max_gap: usize,
    pub iters: usize,
    pub lr: f64,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig {
            windows: vec![17, 9],
            tau: 0.07,
            weights: TemporalLossWeights::default(),
            pyramid: true,
            entropy_selection: true,
            entropy: EntropyConvention::AsWritten,
            threshold: Threshold::Quantile(0.5),
            dropout_prob: 0.8,
            max_gap: 4,
            iters: 6000,
            lr: 1e-3,
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self, strides: &[usize]) -> Result<()> {
        self.weights.validate()?;
        if strides.len() < 2 || self.windows.len() != strides.len() - 1 {
            return Err(Error::invalid(format!(
                "need one window per level below the coarsest: {} windows for {} levels",
                self.windows.len(),
                strides.len()
            )));
        }
        if self.windows.iter().any(|r| r % 2 == 0) {
            return Err(Error::invalid(format!("windows {:?} must be odd", self.windows)));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) || !(self.tau > 0.0) || self.max_gap == 0 {
            return Err(Error::invalid("dropout_prob must lie in [0, 1], tau must be positive and max_gap at least 1"));
        }
        if self.weights.alpha > 0.0 {
            let n = self.windows.len();
            if n < 2 {
                return Err(Error::invalid("local distillation needs at least two reconstruction levels"));
            }
            let s = strides[n - 1] / strides[n - 2];
            let need = crate::correlation::compatible_fine_window(self.windows[n - 1], s);
            if self.windows[n - 2] != need {
                return Err(Error::invalid(format!(
                    "window {} at the pseudo-label level must be {need}",
                    self.windows[n - 2]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub lc: f64,
    pub gc: f64,
    pub total: f64,
    /// Fraction of evaluation-level queries kept by the entropy mask.
    pub masked_fraction: f64,
}

/// Zeros one channel of a `(H, W, C)` frame.
pub fn drop_channel(frame: &Tensor, channel: usize) -> Result<Tensor> {
    let c = *frame.shape().last().unwrap_or(&0);
    if channel >= c {
        return Err(Error::invalid(format!("channel {channel} out of range for {c} channels")));
    }
    let mut data = frame.to_vec();
    data.iter_mut().skip(channel).step_by(c).for_each(|v| *v = 0.0);
    Tensor::new(frame.shape(), data)
}

/// Everything the objective needs for one target/reference pair.
pub struct TemporalSample<'a> {
    /// Normalized Lab frames, `(H, W, 3)`.
    pub target: &'a Tensor,
    pub reference: &'a Tensor,
    /// Channel zeroed in both encoder inputs, if any.
    pub dropout: Option<usize>,
}

/// Parts of the objective that act as constants: the pooled pseudo label,
/// the entropy mask over evaluation-level queries and the teacher's global
/// map. Holding them fixed lets finite differences probe only the paths the
/// analytic gradient follows.
#[derive(Debug, Clone, Default)]
pub struct DetachedTargets {
    pub pseudo: Option<LocalCorrelationMap>,
    pub mask: Option<Vec<bool>>,
    pub teacher_map: Option<GlobalCorrelationMap>,
}

/// Builds the full objective as a differentiable scalar plus its breakdown.
pub fn temporal_objective(
    student: &Encoder,
    teacher: Option<&Encoder>,
    cfg: &TemporalConfig,
    sample: &TemporalSample<'_>,
) -> Result<(Tensor, LossBreakdown)> {
    let (total, breakdown, _) = temporal_objective_with(student, teacher, cfg, sample, None)?;
    Ok((total, breakdown))
}

/// Like [`temporal_objective`], optionally reusing previously computed
/// detached targets; also returns the targets that were used.
pub fn temporal_objective_with(
    student: &Encoder,
    teacher: Option<&Encoder>,
    cfg: &TemporalConfig,
    sample: &TemporalSample<'_>,
    fixed: Option<&DetachedTargets>,
) -> Result<(Tensor, LossBreakdown, DetachedTargets)> {
    let strides = &student.config().stage_total_strides;
    cfg.validate(strides)?;
    let n_levels = strides.len();
    let rec_levels = n_levels - 1;
    let (enc_t, enc_r) = match sample.dropout {
        Some(ch) => (drop_channel(sample.target, ch)?, drop_channel(sample.reference, ch)?),
        None => (sample.target.clone(), sample.reference.clone()),
    };
    let ft = student.encode_pyramid(&enc_t)?;
    let fr = student.encode_pyramid(&enc_r)?;
    let mut used = DetachedTargets::default();

    let first = if cfg.pyramid { 0 } else { rec_levels - 1 };
    let need_lc = cfg.weights.alpha > 0.0 && rec_levels >= 2;
    let need_pseudo = need_lc && fixed.and_then(|f| f.pseudo.as_ref()).is_none();
    let lowest = if need_pseudo { first.min(rec_levels - 2) } else { first };
    let mut maps = Vec::new();
    for l in lowest..rec_levels {
        maps.push(local_correlation(ft.level(l), fr.level(l), cfg.windows[l], cfg.tau)?);
    }
    let map_at = |l: usize| &maps[l - lowest];

    let pt: FramePyramid = frame_pyramid(sample.target, &strides[first..rec_levels])?;
    let pr: FramePyramid = frame_pyramid(sample.reference, &strides[first..rec_levels])?;
    let rec = pyramid_reconstruction_loss(
        &(first..rec_levels).map(|l| map_at(l).clone()).collect::<Vec<_>>(),
        &pt.levels,
        &pr.levels,
    )?;

    let mut masked_fraction = 0.0;
    let lc = if need_lc {
        let top = rec_levels - 1;
        let pseudo = match fixed.and_then(|f| f.pseudo.clone()) {
            Some(p) => p,
            None => {
                let s = strides[top] / strides[top - 1];
                correlation_downsample(&map_at(top - 1).detached(), s, cfg.windows[top])?
            }
        };
        let student_map = map_at(top);
        let mask = match fixed.and_then(|f| f.mask.clone()) {
            Some(m) => m,
            None if cfg.entropy_selection => {
                entropy_mask(&entropy_map(student_map, cfg.entropy)?, cfg.threshold)?
            }
            None => vec![true; student_map.queries()],
        };
        masked_fraction = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        let lc = local_correlation_distillation(student_map, &pseudo, &mask)?;
        used.pseudo = Some(pseudo);
        used.mask = Some(mask);
        lc
    } else {
        Tensor::scalar(0.0)?
    };

    let gc = match teacher {
        Some(teacher) if cfg.weights.beta > 0.0 => {
            let top = n_levels - 1;
            let a = global_correlation(ft.level(top), fr.level(top), cfg.tau)?;
            let a_hat = match fixed.and_then(|f| f.teacher_map.clone()) {
                Some(m) => m,
                None => {
                    let tt = teacher.encode_pyramid(sample.target)?;
                    let tr = teacher.encode_pyramid(sample.reference)?;
                    global_correlation(tt.level(top), tr.level(top), cfg.tau)?
                }
            };
            let gc = global_correlation_distillation(&a, &a_hat)?;
            used.teacher_map = Some(a_hat);
            gc
        }
        _ => Tensor::scalar(0.0)?,
    };

    let total = temporal_total_loss(&rec, &lc, &gc, cfg.weights)?;
    let breakdown = LossBreakdown {
        rec: rec.item()?,
        lc: lc.item()?,
        gc: gc.item()?,
        total: total.item()?,
        masked_fraction,
    };
    Ok((total, breakdown, used))
}

/// One optimizer step on the student; the teacher is only read.
pub fn temporal_train_step(
    student: &mut Encoder,
    teacher: Option<&Encoder>,
    optimizer: &mut Adam,
    lr: f64,
    cfg: &TemporalConfig,
    sample: &TemporalSample<'_>,
) -> Result<LossBreakdown> {
    if let Some(t) = teacher {
        if !t.is_frozen() {
            return Err(Error::invalid("teacher encoder must be frozen"));
        }
    }
    student.zero_grad();
    let (total, breakdown) = temporal_objective(student, teacher, cfg, sample)?;
    total.backward()?;
    let next = optimizer.step(student.params(), lr)?;
    student.set_params(next)?;
    Ok(breakdown)
}

/// Target pyramid levels aligned with the encoder's levels below the
/// coarsest; exposed for callers that reconstruct outside the objective.
pub fn reconstruction_targets(frame: &Tensor, strides: &[usize]) -> Result<Vec<Tensor>> {
    strides.iter().map(|&s| center_sample(frame, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use approx::assert_abs_diff_eq;

    fn map(values: Vec<f64>, h: usize, w: usize, r: usize) -> LocalCorrelationMap {
        let valid = std::sync::Arc::new(crate::correlation::window_valid(h, w, r));
        LocalCorrelationMap {
            values: Tensor::new(&[h * w, r * r], values).unwrap(),
            height: h,
            width: w,
            window: r,
            valid,
        }
    }

    #[test]
    fn reconstruction_loss_examples() {
        let a = Tensor::full(&[2, 2, 3], 0.5).unwrap();
        let z = Tensor::zeros(&[2, 2, 3]);
        assert_eq!(reconstruction_loss(&a, &a).unwrap().item().unwrap(), 0.0);
        assert_abs_diff_eq!(reconstruction_loss(&a, &z).unwrap().item().unwrap(), 0.5, epsilon = 1e-15);

        let p = a.to_param();
        reconstruction_loss(&p, &z).unwrap().backward().unwrap();
        assert!(p.grad().unwrap().iter().all(|&g| (g - 1.0 / 12.0).abs() < 1e-15));
        assert!(reconstruction_loss(&a, &Tensor::zeros(&[2, 3, 3])).is_err());
    }

    #[test]
    fn pyramid_loss_sums_levels() {
        // Two 1×1 levels with r=1: reconstruction copies the reference pixel.
        let c = map(vec![1.0], 1, 1, 1);
        let r = [Tensor::new(&[1, 1, 1], vec![0.2]).unwrap(), Tensor::new(&[1, 1, 1], vec![0.3]).unwrap()];
        let t = [Tensor::zeros(&[1, 1, 1]), Tensor::zeros(&[1, 1, 1])];
        let l = pyramid_reconstruction_loss(&[c.clone(), c.clone()], &t, &r).unwrap();
        assert_abs_diff_eq!(l.item().unwrap(), 0.5, epsilon = 1e-15);
        assert!(pyramid_reconstruction_loss(&[c], &t, &r).is_err());
    }

    #[test]
    fn local_distillation_examples() {
        // Hand-built single-query map with a two-cell row.
        let s = LocalCorrelationMap {
            values: Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap(),
            height: 1,
            width: 1,
            window: 1,
            valid: std::sync::Arc::new(vec![true, true]),
        };
        let p = LocalCorrelationMap {
            values: Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap(),
            ..s.clone()
        };
        let v = local_correlation_distillation(&s, &p, &[true]).unwrap().item().unwrap();
        assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        assert_eq!(local_correlation_distillation(&s, &s, &[true]).unwrap().item().unwrap(), 0.0);
        assert_eq!(local_correlation_distillation(&s, &p, &[false]).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn global_distillation_examples() {
        let a = GlobalCorrelationMap {
            values: Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap(),
            tau: 1.0,
        };
        let b = GlobalCorrelationMap {
            values: Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap(),
            tau: 1.0,
        };
        assert_abs_diff_eq!(global_correlation_distillation(&a, &b).unwrap().item().unwrap(), 0.25);
        assert_abs_diff_eq!(global_correlation_distillation(&b, &a).unwrap().item().unwrap(), 0.25);
        assert_eq!(global_correlation_distillation(&a, &a).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let s = |v| Tensor::scalar(v).unwrap();
        let w = TemporalLossWeights { alpha: 1.0, beta: 10.0 };
        assert_abs_diff_eq!(temporal_total_loss(&s(1.0), &s(0.5), &s(0.2), w).unwrap().item().unwrap(), 3.5, epsilon = 1e-12);
        let zero = TemporalLossWeights { alpha: 0.0, beta: 0.0 };
        assert_eq!(temporal_total_loss(&s(0.7), &s(0.5), &s(0.2), zero).unwrap().item().unwrap(), 0.7);
        assert_eq!(temporal_total_loss(&s(0.0), &s(0.0), &s(0.0), w).unwrap().item().unwrap(), 0.0);
        let bad = TemporalLossWeights { alpha: -1.0, beta: 0.0 };
        assert!(temporal_total_loss(&s(0.0), &s(0.0), &s(0.0), bad).is_err());
    }

    #[test]
    fn drop_channel_zeros_one_channel() {
        let f = Tensor::full(&[2, 2, 3], 1.0).unwrap();
        let d = drop_channel(&f, 1).unwrap();
        for px in d.data().chunks_exact(3) {
            assert_eq!(px, &[1.0, 0.0, 1.0]);
        }
        assert!(drop_channel(&f, 3).is_err());
    }

    fn tiny_frames() -> (Tensor, Tensor) {
        let t = Tensor::from_fn(&[32, 32, 3], |i| ((i * 13 % 17) as f64 / 17.0 - 0.5) * 0.4).unwrap();
        let r = Tensor::from_fn(&[32, 32, 3], |i| ((i * 11 % 19) as f64 / 19.0 - 0.5) * 0.4).unwrap();
        (t, r)
    }

    #[test]
    fn breakdown_total_is_weighted_sum_and_teacher_untouched() {
        let cfg_enc = EncoderConfig {
            stage_channels: vec![4, 4, 4],
            stage_total_strides: vec![2, 4, 8],
            ..EncoderConfig::default()
        };
        let mut student = Encoder::new(cfg_enc).unwrap();
        let teacher = student.freeze();
        let before: Vec<Vec<f64>> = teacher.params().iter().map(Tensor::to_vec).collect();
        let cfg = TemporalConfig {
            windows: vec![5, 3],
            ..TemporalConfig::default()
        };
        let (t, r) = tiny_frames();
        let sample = TemporalSample { target: &t, reference: &r, dropout: Some(0) };
        let mut opt = Adam::new(student.params());
        let b = temporal_train_step(&mut student, Some(&teacher), &mut opt, 1e-3, &cfg, &sample).unwrap();
        let w = cfg.weights;
        assert_abs_diff_eq!(b.total, b.rec + w.alpha * b.lc + w.beta * b.gc, epsilon = 1e-6);
        assert!(b.rec >= 0.0 && b.lc >= 0.0 && b.gc >= 0.0);
        assert!((0.0..=1.0).contains(&b.masked_fraction));
        for (p, old) in teacher.params().iter().zip(&before) {
            assert_eq!(p.data(), old.as_slice());
            assert!(p.grad().is_none());
        }
        // A trainable teacher is refused.
        let loose = student.clone();
        assert!(temporal_train_step(&mut student, Some(&loose), &mut opt, 1e-3, &cfg, &sample).is_err());
    }

    #[test]
    fn incompatible_windows_are_rejected() {
        let cfg = TemporalConfig {
            windows: vec![15, 9],
            ..TemporalConfig::default()
        };
        let err = cfg.validate(&[4, 8, 32]).unwrap_err();
        assert!(err.to_string().contains("must be 17"), "{err}");
        let ok = TemporalConfig {
            windows: vec![15, 9],
            weights: TemporalLossWeights { alpha: 0.0, beta: 1.0 },
            ..TemporalConfig::default()
        };
        assert!(ok.validate(&[4, 8, 32]).is_ok());
    }
}
