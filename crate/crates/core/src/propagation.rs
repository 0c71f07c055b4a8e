//! Recurrent label propagation: labels of the first frame and of recent
//! predictions are carried to each new frame through windowed feature
//! affinities restricted to the top-k matches.

use serde::{Deserialize, Serialize};

use crate::correlation::window_cell;
use crate::data::LabelMap;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationConfig {
    pub window: usize,
    pub top_k: usize,
    /// Recent predictions kept besides the first frame.
    pub memory: usize,
    pub tau: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            window: 9,
            top_k: 10,
            memory: 4,
            tau: 0.07,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.top_k == 0 || !(self.tau > 0.0) {
            return Err(Error::invalid(format!(
                "propagation needs an odd window, top_k ≥ 1 and tau > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-cell probability vectors over `classes` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub probs: Vec<f64>,
}

impl SoftLabelMap {
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width * classes || classes == 0 {
            return Err(Error::Shape {
                op: "soft labels",
                lhs: vec![height, width, classes],
                rhs: vec![probs.len()],
            });
        }
        Ok(SoftLabelMap { height, width, classes, probs })
    }

    /// Fraction of each `stride × stride` block carrying each label.
    pub fn from_labels(labels: &LabelMap, classes: usize, stride: usize) -> Result<Self> {
        if labels.height % stride != 0 || labels.width % stride != 0 {
            return Err(Error::invalid(format!(
                "label map {}x{} is not divisible by stride {stride}",
                labels.height, labels.width
            )));
        }
        if labels.max_label() as usize >= classes {
            return Err(Error::invalid(format!(
                "label {} exceeds the {classes} label channels",
                labels.max_label()
            )));
        }
        let (h, w) = (labels.height / stride, labels.width / stride);
        let mut probs = vec![0.0; h * w * classes];
        let share = 1.0 / (stride * stride) as f64;
        for y in 0..labels.height {
            for x in 0..labels.width {
                let cell = (y / stride) * w + x / stride;
                probs[cell * classes + labels.get(y, x) as usize] += share;
            }
        }
        SoftLabelMap::new(h, w, classes, probs)
    }

    pub fn argmax(&self) -> Vec<u32> {
        self.probs
            .chunks_exact(self.classes)
            .map(|p| {
                let mut best = 0;
                for (k, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = k;
                    }
                }
                best as u32
            })
            .collect()
    }

    /// Hard labels at `stride ×` the map's resolution, nearest neighbour.
    pub fn upsample_hard(&self, stride: usize) -> LabelMap {
        let cells = self.argmax();
        let (h, w) = (self.height * stride, self.width * stride);
        let labels = (0..h * w)
            .map(|i| cells[(i / w / stride) * self.width + (i % w) / stride])
            .collect();
        LabelMap::new(h, w, labels).expect("sizes agree")
    }
}

/// Feature/label pairs to propagate from: the first entry is permanent,
/// the rest is a FIFO of at most `capacity` recent predictions.
#[derive(Debug, Clone)]
pub struct PropagationMemory {
    capacity: usize,
    entries: Vec<(Tensor, SoftLabelMap)>,
}

impl PropagationMemory {
    pub fn new(first_features: Tensor, first_labels: SoftLabelMap, capacity: usize) -> Result<Self> {
        let mem = PropagationMemory {
            capacity,
            entries: Vec::new(),
        };
        mem.check(&first_features, &first_labels, None)?;
        Ok(PropagationMemory {
            entries: vec![(first_features, first_labels)],
            ..mem
        })
    }

    fn check(&self, f: &Tensor, l: &SoftLabelMap, like: Option<&(Tensor, SoftLabelMap)>) -> Result<()> {
        let &[h, w, _] = f.shape() else {
            return Err(Error::Shape { op: "memory", lhs: f.shape().to_vec(), rhs: vec![l.height, l.width] });
        };
        if h != l.height || w != l.width {
            return Err(Error::Shape { op: "memory", lhs: f.shape().to_vec(), rhs: vec![l.height, l.width] });
        }
        if let Some((f0, l0)) = like {
            if f0.shape() != f.shape() || l0.classes != l.classes {
                return Err(Error::invalid(format!(
                    "memory entry mismatch: features {:?} vs {:?}, {} vs {} label channels",
                    f.shape(),
                    f0.shape(),
                    l.classes,
                    l0.classes
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(Tensor, SoftLabelMap)] {
        &self.entries
    }

    /// Appends a prediction, evicting the oldest non-first entry at capacity.
    pub fn push(&mut self, features: Tensor, labels: SoftLabelMap) -> Result<()> {
        self.check(&features, &labels, self.entries.first())?;
        if self.entries.len() > self.capacity {
            self.entries.remove(1);
        }
        if self.capacity > 0 {
            self.entries.push((features, labels));
        }
        Ok(())
    }
}

/// Labels for one frame from its features and the memory.
pub fn propagate_step(
    memory: &PropagationMemory,
    current: &Tensor,
    window: usize,
    tau: f64,
    top_k: usize,
) -> Result<SoftLabelMap> {
    let Some((f0, l0)) = memory.entries.first() else {
        return Err(Error::invalid("propagation memory is empty"));
    };
    if current.shape() != f0.shape() {
        return Err(Error::Shape {
            op: "propagate_step",
            lhs: current.shape().to_vec(),
            rhs: f0.shape().to_vec(),
        });
    }
    if window % 2 == 0 || top_k == 0 || !(tau > 0.0) {
        return Err(Error::invalid("propagate_step needs an odd window, top_k ≥ 1 and tau > 0"));
    }
    let &[h, w, d] = current.shape() else { unreachable!() };
    let classes = l0.classes;
    let cur = current.data();
    let mut probs = vec![0.0; h * w * classes];
    let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(memory.len() * window * window);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let q = &cur[i * d..(i + 1) * d];
            cand.clear();
            for (m, (f, _)) in memory.entries.iter().enumerate() {
                let fd = f.data();
                for k in 0..window * window {
                    if let Some(j) = window_cell(y, x, k, h, w, window) {
                        let sim = crate::tensor::dot_product(q, &fd[j * d..(j + 1) * d]);
                        cand.push((sim, m, j));
                    }
                }
            }
            // Stable: ties keep gathering order.
            cand.sort_by(|a, b| b.0.total_cmp(&a.0));
            let kept = &cand[..top_k.min(cand.len())];
            let max = kept[0].0 / tau;
            let weights: Vec<f64> = kept.iter().map(|c| (c.0 / tau - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let out = &mut probs[i * classes..(i + 1) * classes];
            for (wgt, &(_, m, j)) in weights.iter().zip(kept) {
                let lab = &memory.entries[m].1.probs[j * classes..(j + 1) * classes];
                for (o, &p) in out.iter_mut().zip(lab) {
                    *o += wgt / total * p;
                }
            }
        }
    }
    SoftLabelMap::new(h, w, classes, probs)
}

/// Propagates frame-0 labels through pre-computed evaluation-level
/// features; returns soft maps for frames `1..`.
pub fn propagate_features(
    features: &[Tensor],
    init: SoftLabelMap,
    cfg: &PropagationConfig,
) -> Result<Vec<SoftLabelMap>> {
    cfg.validate()?;
    let Some(first) = features.first() else {
        return Err(Error::invalid("clip has no frames"));
    };
    let mut memory = PropagationMemory::new(first.clone(), init, cfg.memory)?;
    let mut out = Vec::with_capacity(features.len().saturating_sub(1));
    for f in &features[1..] {
        let pred = propagate_step(&memory, f, cfg.window, cfg.tau, cfg.top_k)?;
        memory.push(f.clone(), pred.clone())?;
        out.push(pred);
    }
    Ok(out)
}

/// Full-resolution hard labels for every frame of a clip. Frame 0 is the
/// given annotation; later frames are propagated at `level`.
pub fn run_sequence(
    encoder: &Encoder,
    frames: &[Tensor],
    init: &LabelMap,
    classes: usize,
    level: usize,
    cfg: &PropagationConfig,
) -> Result<Vec<LabelMap>> {
    if frames.is_empty() {
        return Err(Error::invalid("clip has no frames"));
    }
    let stride = *encoder
        .config()
        .stage_total_strides
        .get(level)
        .ok_or_else(|| Error::invalid(format!("encoder has no level {level}")))?;
    let soft = SoftLabelMap::from_labels(init, classes, stride)?;
    let features = frames
        .iter()
        .map(|f| Ok(encoder.encode_pyramid(f)?.levels.swap_remove(level).detach()))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![init.clone()];
    for pred in propagate_features(&features, soft, cfg)? {
        out.push(pred.upsample_hard(stride));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::{local_correlation, reconstruct_frame};

    fn features(h: usize, w: usize, d: usize, seed: usize) -> Tensor {
        Tensor::from_fn(&[h, w, d], |i| ((i * 31 + seed * 17) % 23) as f64 / 23.0 - 0.4)
            .unwrap()
            .l2_normalize_lastdim(1e-12)
            .unwrap()
    }

    fn soft(h: usize, w: usize, c: usize, seed: usize) -> SoftLabelMap {
        let mut p: Vec<f64> = (0..h * w * c).map(|i| ((i * 13 + seed) % 7 + 1) as f64).collect();
        for row in p.chunks_exact_mut(c) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        SoftLabelMap::new(h, w, c, p).unwrap()
    }

    #[test]
    fn identical_features_top1_copies_labels() {
        // Injective features so the best match is the co-located cell.
        let f = Tensor::from_fn(&[5, 5, 25], |i| if i / 25 == i % 25 { 1.0 } else { 0.0 }).unwrap();
        let labels = soft(5, 5, 3, 1);
        let mem = PropagationMemory::new(f.clone(), labels.clone(), 4).unwrap();
        let out = propagate_step(&mem, &f, 3, 0.07, 1).unwrap();
        assert_eq!(out, labels);
    }

    #[test]
    fn untruncated_single_entry_matches_reconstruction() {
        let (h, w, r, tau) = (6, 6, 3, 0.2);
        let cur = features(h, w, 5, 0);
        let mem_f = features(h, w, 5, 3);
        let labels = soft(h, w, 4, 2);
        let mem = PropagationMemory::new(mem_f.clone(), labels.clone(), 4).unwrap();
        let out = propagate_step(&mem, &cur, r, tau, r * r).unwrap();
        let c = local_correlation(&cur, &mem_f, r, tau).unwrap();
        let want = reconstruct_frame(&c, &Tensor::new(&[h, w, 4], labels.probs.clone()).unwrap()).unwrap();
        for (a, b) in out.probs.iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn matching_entry_dominates() {
        let onehot = |d: usize, hot: usize| Tensor::from_fn(&[1, 1, d], |i| if i == hot { 1.0 } else { 0.0 }).unwrap();
        let a = SoftLabelMap::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let b = SoftLabelMap::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let mut mem = PropagationMemory::new(onehot(2, 1), a, 4).unwrap();
        mem.push(onehot(2, 0), b).unwrap();
        let out = propagate_step(&mem, &onehot(2, 0), 1, 0.01, 10).unwrap();
        assert!(out.probs[1] > 1.0 - 1e-12);
    }

    #[test]
    fn uniform_features_average_window_labels() {
        let f = Tensor::full(&[3, 3, 2], std::f64::consts::FRAC_1_SQRT_2).unwrap();
        let labels = soft(3, 3, 2, 4);
        let mem = PropagationMemory::new(f.clone(), labels.clone(), 4).unwrap();
        let out = propagate_step(&mem, &f, 3, 0.07, 81).unwrap();
        // Centre sees the whole grid.
        for c in 0..2 {
            let mean: f64 = labels.probs.iter().skip(c).step_by(2).sum::<f64>() / 9.0;
            assert!((out.probs[4 * 2 + c] - mean).abs() < 1e-12);
        }
        for row in out.probs.chunks_exact(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn memory_keeps_first_and_last_m() {
        let f = features(2, 2, 2, 0);
        let l = soft(2, 2, 2, 0);
        let mut mem = PropagationMemory::new(f.clone(), l.clone(), 4).unwrap();
        for _ in 0..10 {
            mem.push(f.clone(), l.clone()).unwrap();
        }
        assert_eq!(mem.len(), 5);
        assert!(mem.push(f, soft(2, 2, 3, 0)).is_err());
    }

    #[test]
    fn block_average_and_upsample() {
        let labels = LabelMap::new(2, 4, vec![0, 1, 1, 1, 0, 0, 1, 1]).unwrap();
        let s = SoftLabelMap::from_labels(&labels, 2, 2).unwrap();
        assert_eq!(s.probs, vec![0.75, 0.25, 0.0, 1.0]);
        let up = s.upsample_hard(2);
        assert_eq!(up.labels, vec![0, 0, 1, 1, 0, 0, 1, 1]);
        assert!(SoftLabelMap::from_labels(&labels, 1, 2).is_err());
    }

    #[test]
    fn empty_feature_list_is_an_error() {
        let l = soft(2, 2, 2, 0);
        assert!(propagate_features(&[], l, &PropagationConfig::default()).is_err());
    }
}
