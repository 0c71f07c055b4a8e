//! Step-1 contrastive pretraining: a query encoder with a projection head is
//! pulled toward a momentum key encoder's view of the same image and pushed
//! away from a FIFO queue of earlier keys.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentationPolicy, LabNorm};
use crate::encoder::{momentum_blend, Encoder};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;

const UNIT_TOL: f64 = 1e-5;
const ZERO_NORM: f64 = 1e-12;

/// Fixed-capacity FIFO of unit-norm key vectors.
#[derive(Debug, Clone)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        NegativeQueue {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Appends a key, evicting the oldest one at capacity.
    pub fn push(&mut self, key: &[f64]) -> Result<()> {
        if key.len() != self.dim {
            return Err(Error::Shape {
                op: "queue push",
                lhs: vec![self.dim],
                rhs: vec![key.len()],
            });
        }
        let norm = key.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(format!("queue keys must have unit norm, got {norm}")));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(key.to_vec());
        Ok(())
    }

    /// Rows of a `(B, d)` key tensor, in order.
    pub fn push_rows(&mut self, keys: &Tensor) -> Result<()> {
        for row in keys.data().chunks_exact(self.dim) {
            self.push(row)?;
        }
        Ok(())
    }

    /// `(K, d)` constant tensor of the stored keys, oldest first.
    pub fn as_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            &[self.entries.len(), self.dim],
            self.entries.iter().flatten().copied().collect(),
        )
    }
}

fn check_rows_nonzero(op: &str, t: &Tensor) -> Result<()> {
    let d = *t.shape().last().unwrap_or(&1);
    if d == 0 || t.data().chunks_exact(d).any(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() < ZERO_NORM) {
        return Err(Error::invalid(format!("{op}: zero-norm vector")));
    }
    Ok(())
}

/// Mean over the batch of `−log(e^{q·k⁺/τ} / (e^{q·k⁺/τ} + Σ e^{q·k⁻/τ}))`.
///
/// `q` and `k_pos` are `(B, d)`; `negatives` is `(K, d)` and is detached.
pub fn info_nce_loss(q: &Tensor, k_pos: &Tensor, negatives: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let &[b, d] = q.shape() else {
        return Err(Error::Shape {
            op: "info_nce_loss",
            lhs: q.shape().to_vec(),
            rhs: k_pos.shape().to_vec(),
        });
    };
    if k_pos.shape() != q.shape() || negatives.rank() != 2 || negatives.shape()[1] != d {
        return Err(Error::Shape {
            op: "info_nce_loss",
            lhs: q.shape().to_vec(),
            rhs: if k_pos.shape() != q.shape() {
                k_pos.shape().to_vec()
            } else {
                negatives.shape().to_vec()
            },
        });
    }
    check_rows_nonzero("info_nce_loss", q)?;
    check_rows_nonzero("info_nce_loss", k_pos)?;
    if negatives.shape()[0] > 0 {
        check_rows_nonzero("info_nce_loss", negatives)?;
    }
    let pos = q.mul(k_pos)?.sum_axis(1)?.reshape(&[b, 1])?;
    let logits = if negatives.shape()[0] == 0 {
        pos
    } else {
        let neg = q.matmul(&negatives.detach().transpose()?)?;
        Tensor::concat(&[&pos, &neg], 1)?
    };
    logits
        .scale(1.0 / tau)?
        .log_softmax_lastdim()?
        .slice(1, 0, 1)?
        .mean()?
        .neg()
}

/// `Linear(d, d) → ReLU → Linear(d, out)`.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    params: Vec<Tensor>,
}

impl ProjectionHead {
    pub fn new(dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::param(shape, (0..shape.iter().product()).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        let w1 = uniform(&[dim, dim], dim)?;
        let w2 = uniform(&[dim, out_dim], dim)?;
        Ok(ProjectionHead {
            params: vec![w1, Tensor::param(&[dim], vec![0.0; dim])?, w2, Tensor::param(&[out_dim], vec![0.0; out_dim])?],
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != 4 || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::invalid("projection head parameter mismatch"));
        }
        self.params = params;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [w1, b1, w2, b2] = &self.params[..] else { unreachable!() };
        x.matmul(w1)?.add_bias(b1)?.relu()?.matmul(w2)?.add_bias(b2)
    }

    fn momentum_copy(&self) -> ProjectionHead {
        ProjectionHead {
            params: self.params.iter().map(Tensor::detach).collect(),
        }
    }
}

/// Unit-norm embedding of one frame: spatial mean of the coarsest raw
/// features, projected and normalized. Returns `(1, out_dim)`.
pub fn embed(encoder: &Encoder, head: &ProjectionHead, frame: &Tensor) -> Result<Tensor> {
    let pyr = encoder.encode_raw(frame)?;
    let top = pyr.levels.last().expect("encoder has levels");
    let &[h, w, d] = top.shape() else { unreachable!() };
    let pooled = top.reshape(&[h * w, d])?.mean_axis(0)?.reshape(&[1, d])?;
    head.forward(&pooled)?.l2_normalize_lastdim(ZERO_NORM)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    pub queue_capacity: usize,
    pub tau: f64,
    pub momentum: f64,
    pub proj_dim: usize,
    pub batch_size: usize,
    pub iters: usize,
    pub lr: f64,
    /// Number of procedurally generated training images; should well exceed
    /// `queue_capacity` so an image's own keys rarely sit in the queue.
    pub corpus_size: usize,
    pub image_size: usize,
    pub augmentation: AugmentationPolicy,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig {
            queue_capacity: 128,
            tau: 0.07,
            momentum: 0.99,
            proj_dim: 32,
            batch_size: 8,
            iters: 500,
            lr: 1e-3,
            corpus_size: 4096,
            image_size: 64,
            augmentation: AugmentationPolicy::default(),
        }
    }
}

/// Query encoder, momentum key encoder, both heads and the negative queue.
#[derive(Debug, Clone)]
pub struct SpatialModel {
    pub student: Encoder,
    pub head: ProjectionHead,
    pub key_encoder: Encoder,
    pub key_head: ProjectionHead,
    pub queue: NegativeQueue,
    optimizer: Adam,
}

impl SpatialModel {
    pub fn new(student: Encoder, cfg: &SpatialConfig) -> Result<Self> {
        let d = *student.config().stage_channels.last().expect("levels");
        let head = ProjectionHead::new(d, cfg.proj_dim, student.config().init_seed.wrapping_add(1))?;
        let mut all = student.params().to_vec();
        all.extend_from_slice(head.params());
        Ok(SpatialModel {
            key_encoder: student.momentum_copy(),
            key_head: head.momentum_copy(),
            queue: NegativeQueue::new(cfg.queue_capacity, cfg.proj_dim),
            optimizer: Adam::new(&all),
            student,
            head,
        })
    }
}

/// One contrastive step over a batch of RGB images; returns the batch loss.
///
/// Each image is augmented twice; the first view feeds the query path and
/// the second the key path. Keys enter the queue after the update, and the
/// key path then moves toward the query path by momentum.
pub fn spatial_train_step(
    images: &[Tensor],
    model: &mut SpatialModel,
    cfg: &SpatialConfig,
    norm: &LabNorm,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("batch must contain at least one image"));
    }
    let mut queries = Vec::with_capacity(images.len());
    let mut keys = Vec::with_capacity(images.len());
    for img in images {
        let side = img.shape()[0];
        let view_a = augment(img, &cfg.augmentation.draw(rng, side))?;
        let view_b = augment(img, &cfg.augmentation.draw(rng, side))?;
        queries.push(embed(&model.student, &model.head, &norm.encode_rgb(&view_a)?)?);
        keys.push(embed(&model.key_encoder, &model.key_head, &norm.encode_rgb(&view_b)?)?.detach());
    }
    contrastive_update(model, cfg, &queries, &keys, lr)
}

/// Loss, optimizer step, queue update and momentum update for given
/// query rows and detached key rows.
pub fn contrastive_update(
    model: &mut SpatialModel,
    cfg: &SpatialConfig,
    queries: &[Tensor],
    keys: &[Tensor],
    lr: f64,
) -> Result<f64> {
    let q = Tensor::concat(&queries.iter().collect::<Vec<_>>(), 0)?;
    let k = Tensor::concat(&keys.iter().collect::<Vec<_>>(), 0)?.detach();
    model.student.zero_grad();
    model.head.params().iter().for_each(Tensor::zero_grad);
    let loss = info_nce_loss(&q, &k, &model.queue.as_tensor()?, cfg.tau)?;
    let value = loss.item()?;
    if loss.requires_grad() {
        loss.backward()?;
        let mut all = model.student.params().to_vec();
        all.extend_from_slice(model.head.params());
        let mut next = model.optimizer.step(&all, lr)?;
        let head = next.split_off(model.student.params().len());
        model.student.set_params(next)?;
        model.head.set_params(head)?;
    }
    model.queue.push_rows(&k)?;
    model.key_encoder.momentum_update(&model.student, cfg.momentum)?;
    let key_head = momentum_blend(model.key_head.params(), model.head.params(), cfg.momentum)?;
    model.key_head.set_params(key_head)?;
    Ok(value)
}
