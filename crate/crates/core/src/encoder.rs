//! Plain strided CNN producing an N-level feature pyramid.
//!
//! Each stage down-samples with 3×3 stride-2 convolutions (ReLU after each)
//! until it reaches its cumulative stride, then applies a 3×3 stride-1
//! convolution whose output is the level's feature map. The next stage
//! consumes the ReLU of that map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{self, ArchiveEntry};
use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Tensor};

/// Features of the encoder are L2-normalized with this floor on the norm.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Channel count `d^l` of every pyramid level, fine to coarse.
    pub stage_channels: Vec<usize>,
    /// Cumulative down-sampling factor of every level, fine to coarse.
    pub stage_total_strides: Vec<usize>,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            stage_channels: vec![16, 32, 64],
            stage_total_strides: vec![4, 8, 32],
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Finer variant: the evaluation level sits at stride 4.
    pub fn stride4() -> Self {
        EncoderConfig {
            stage_total_strides: vec![2, 4, 16],
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn coarsest_stride(&self) -> usize {
        *self.stage_total_strides.last().unwrap_or(&1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 || n != self.stage_total_strides.len() {
            return Err(Error::invalid(
                "stage_channels and stage_total_strides must be non-empty and of equal length",
            ));
        }
        if self.in_channels == 0 || self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        let mut prev = 1;
        for (l, &s) in self.stage_total_strides.iter().enumerate() {
            if s == 0 || s % prev != 0 || (l > 0 && s <= prev) {
                return Err(Error::invalid(format!(
                    "stage_total_strides {:?} must be strictly increasing with each dividing the next",
                    self.stage_total_strides
                )));
            }
            if !(s / prev).is_power_of_two() {
                return Err(Error::invalid(format!(
                    "stride ratio {} between levels is not a power of two",
                    s / prev
                )));
            }
            prev = s;
        }
        Ok(())
    }

    pub fn level_shape(&self, level: usize, height: usize, width: usize) -> [usize; 3] {
        let s = self.stage_total_strides[level];
        [height / s, width / s, self.stage_channels[level]]
    }
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// `(h^l, w^l, d^l)` per level, fine to coarse.
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l]
    }

    pub fn normalized(&self) -> Result<FeaturePyramid> {
        Ok(FeaturePyramid {
            levels: self
                .levels
                .iter()
                .map(|t| t.l2_normalize_lastdim(NORM_EPS))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    param: usize,
    stride: usize,
    relu: bool,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    params: Vec<Tensor>,
    stages: Vec<Vec<ConvLayer>>,
    frozen: bool,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::param(
        shape,
        (0..shape.iter().product()).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = Vec::new();
        let mut stages = Vec::new();
        let mut cin = config.in_channels;
        let mut prev = 1;
        for (&cout, &s) in config.stage_channels.iter().zip(&config.stage_total_strides) {
            let mut layers = Vec::new();
            let mut push = |cin: usize, stride: usize, relu: bool, params: &mut Vec<Tensor>| -> Result<()> {
                layers.push(ConvLayer {
                    param: params.len(),
                    stride,
                    relu,
                });
                params.push(kaiming_uniform(&mut rng, &[3, 3, cin, cout], 9 * cin)?);
                params.push(Tensor::param(&[cout], vec![0.0; cout])?);
                Ok(())
            };
            let downs = (s / prev).trailing_zeros();
            for _ in 0..downs {
                push(cin, 2, true, &mut params)?;
                cin = cout;
            }
            push(cin, 1, false, &mut params)?;
            cin = cout;
            prev = s;
            stages.push(layers);
        }
        Ok(Encoder {
            config,
            params,
            stages,
            frozen: false,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (s, layers) in self.stages.iter().enumerate() {
            for (i, _) in layers.iter().enumerate() {
                names.push(format!("encoder.stage{s}.conv{i}.weight"));
                names.push(format!("encoder.stage{s}.conv{i}.bias"));
            }
        }
        names
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn check_structure(&self, other: &[Tensor]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.len()
            )));
        }
        for (a, b) in self.params.iter().zip(other) {
            if a.shape() != b.shape() {
                return Err(Error::Shape {
                    op: "encoder weights",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Replaces the weights; trainability follows the current encoder.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        self.check_structure(&params)?;
        self.params = params
            .iter()
            .zip(&self.params)
            .map(|(p, cur)| if cur.requires_grad() { p.to_param() } else { p.detach() })
            .collect();
        Ok(())
    }

    /// Copy running on exactly the given tensors, keeping their graph links
    /// (used to differentiate through the encoder with respect to them).
    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Encoder> {
        self.check_structure(&params)?;
        Ok(Encoder {
            config: self.config.clone(),
            params,
            stages: self.stages.clone(),
            frozen: false,
        })
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }

    /// `θ_self ← m·θ_self + (1 − m)·θ_student`, elementwise.
    pub fn momentum_update(&mut self, student: &Encoder, m: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::invalid(format!("momentum {m} outside [0, 1]")));
        }
        self.check_structure(&student.params)?;
        self.params = momentum_blend(&self.params, &student.params, m)?;
        Ok(())
    }

    /// Snapshot whose weights never change and never receive gradients.
    pub fn freeze(&self) -> Encoder {
        Encoder {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::detach).collect(),
            stages: self.stages.clone(),
            frozen: true,
        }
    }

    /// Gradient-free copy that still accepts momentum updates.
    pub fn momentum_copy(&self) -> Encoder {
        Encoder {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::detach).collect(),
            stages: self.stages.clone(),
            frozen: false,
        }
    }

    /// Trainable copy (used to start step 2 from a step-1 encoder).
    pub fn thawed(&self) -> Encoder {
        Encoder {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::to_param).collect(),
            stages: self.stages.clone(),
            frozen: false,
        }
    }

    fn check_input(&self, frame: &Tensor) -> Result<(usize, usize)> {
        let &[h, w, c] = frame.shape() else {
            return Err(Error::Shape {
                op: "encode",
                lhs: frame.shape().to_vec(),
                rhs: vec![0, 0, self.config.in_channels],
            });
        };
        if c != self.config.in_channels {
            return Err(Error::Shape {
                op: "encode",
                lhs: frame.shape().to_vec(),
                rhs: vec![h, w, self.config.in_channels],
            });
        }
        let m = self.config.coarsest_stride();
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid(format!(
                "frame {h}x{w}: height and width must be multiples of {m}"
            )));
        }
        Ok((h, w))
    }

    /// Un-normalized level outputs.
    pub fn encode_raw(&self, frame: &Tensor) -> Result<FeaturePyramid> {
        self.check_input(frame)?;
        let mut x = frame.clone();
        let mut levels = Vec::with_capacity(self.stages.len());
        for layers in &self.stages {
            for layer in layers {
                let y = x.conv2d(
                    &self.params[layer.param],
                    Some(&self.params[layer.param + 1]),
                    Conv2dSpec {
                        stride: layer.stride,
                        padding: 1,
                    },
                )?;
                x = if layer.relu { y.relu()? } else { y };
            }
            levels.push(x.clone());
            x = x.relu()?;
        }
        Ok(FeaturePyramid { levels })
    }

    /// Channel-normalized pyramid, the input to every correlation.
    pub fn encode_pyramid(&self, frame: &Tensor) -> Result<FeaturePyramid> {
        self.encode_raw(frame)?.normalized()
    }

    pub fn archive_entries(&self) -> Vec<ArchiveEntry> {
        self.param_names()
            .into_iter()
            .zip(&self.params)
            .map(|(n, p)| ArchiveEntry::from_tensor(n, p))
            .collect()
    }

    pub fn from_archive(config: EncoderConfig, entries: &[ArchiveEntry]) -> Result<Encoder> {
        let mut enc = Encoder::new(config)?;
        let params = enc
            .param_names()
            .iter()
            .map(|n| archive::find(entries, n)?.to_tensor())
            .collect::<Result<Vec<_>>>()?;
        enc.set_params(params)?;
        Ok(enc)
    }
}

/// Elementwise `m·a + (1 − m)·b` over matching parameter lists; each result
/// keeps the trainability of its `teacher` entry.
pub fn momentum_blend(teacher: &[Tensor], student: &[Tensor], m: f64) -> Result<Vec<Tensor>> {
    teacher
        .iter()
        .zip(student)
        .map(|(t, s)| {
            let data = t
                .data()
                .iter()
                .zip(s.data())
                .map(|(a, b)| m * a + (1.0 - m) * b)
                .collect();
            if t.requires_grad() {
                Tensor::param(t.shape(), data)
            } else {
                Tensor::new(t.shape(), data)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_shapes_for_64_and_128() {
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        for (size, want) in [(64, [16, 8, 2]), (128, [32, 16, 4])] {
            let x = Tensor::zeros(&[size, size, 3]);
            let p = enc.encode_raw(&x).unwrap();
            for (l, w) in p.levels.iter().zip(want) {
                assert_eq!(&l.shape()[..2], &[w, w]);
            }
            assert_eq!(p.levels[2].shape()[2], 64);
        }
    }

    #[test]
    fn indivisible_input_names_multiple() {
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        let err = enc.encode_raw(&Tensor::zeros(&[48, 64, 3])).unwrap_err();
        assert!(err.to_string().contains("multiples of 32"), "{err}");
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut enc = Encoder::new(EncoderConfig::default()).unwrap();
        let zeros = enc.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        enc.set_params(zeros).unwrap();
        let x = Tensor::from_fn(&[64, 64, 3], |i| (i as f64 * 0.01).sin()).unwrap();
        let p = enc.encode_raw(&x).unwrap();
        assert!(p.levels.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn momentum_extremes() {
        let a = Encoder::new(EncoderConfig::default()).unwrap();
        let b = Encoder::new(EncoderConfig { init_seed: 9, ..EncoderConfig::default() }).unwrap();
        let mut t = a.clone();
        t.momentum_update(&b, 1.0).unwrap();
        assert!(t.params().iter().zip(a.params()).all(|(x, y)| x.data() == y.data()));
        t.momentum_update(&b, 0.0).unwrap();
        assert!(t.params().iter().zip(b.params()).all(|(x, y)| x.data() == y.data()));

        let z = Tensor::zeros(&[2]);
        let o = Tensor::full(&[2], 1.0).unwrap();
        let blended = momentum_blend(&[z], &[o], 0.999).unwrap();
        assert!(blended[0].data().iter().all(|v| (v - 0.001).abs() < 1e-15));
    }

    #[test]
    fn structure_mismatch_is_an_error() {
        let mut a = Encoder::new(EncoderConfig::default()).unwrap();
        let b = Encoder::new(EncoderConfig {
            stage_channels: vec![8, 32, 64],
            ..EncoderConfig::default()
        })
        .unwrap();
        assert!(a.momentum_update(&b, 0.5).is_err());
    }

    #[test]
    fn frozen_encoder_rejects_updates_and_records_nothing() {
        let student = Encoder::new(EncoderConfig::default()).unwrap();
        let mut teacher = student.freeze();
        assert!(matches!(teacher.momentum_update(&student, 0.5), Err(Error::Frozen)));
        assert!(matches!(teacher.set_params(student.params().to_vec()), Err(Error::Frozen)));
        let x = Tensor::from_fn(&[32, 32, 3], |i| (i as f64 * 0.37).cos() * 0.3).unwrap();
        let out = teacher.encode_pyramid(&x).unwrap();
        assert!(out.levels.iter().all(|l| !l.requires_grad()));
        let s = student.encode_pyramid(&x).unwrap();
        for (a, b) in out.levels.iter().zip(&s.levels) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig {
            stage_total_strides: vec![4, 6, 32],
            ..EncoderConfig::default()
        };
        assert!(Encoder::new(bad).is_err());
        let bad = EncoderConfig {
            stage_total_strides: vec![4, 8],
            ..EncoderConfig::default()
        };
        assert!(Encoder::new(bad).is_err());
        assert!(Encoder::new(EncoderConfig::stride4()).is_ok());
    }
}
