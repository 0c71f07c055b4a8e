//! Finite-difference checks of every training loss, in isolation and
//! composed through a tiny encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::correlation::{
    correlation_downsample, global_correlation, local_correlation, reconstruct_frame,
};
use crate::encoder::{Encoder, EncoderConfig, NORM_EPS};
use crate::error::Result;
use crate::spatial::info_nce_loss;
use crate::temporal::{
    global_correlation_distillation, local_correlation_distillation, pyramid_reconstruction_loss,
    reconstruction_loss, temporal_objective_with, TemporalConfig, TemporalSample,
};
use crate::tensor::{finite_difference_check_many, Tensor};

/// Tolerance for losses checked on their direct inputs.
pub const ISOLATED_TOL: f64 = 1e-4;
/// Tolerance for the composite objective differentiated through the encoder.
pub const COMPOSITE_TOL: f64 = 1e-3;
pub const EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("finite")
}

fn unit(t: &Tensor) -> Result<Tensor> {
    t.l2_normalize_lastdim(NORM_EPS)
}

fn report(name: &'static str, err: f64, tolerance: f64) -> GradCheckReport {
    GradCheckReport { name, max_rel_error: err, tolerance }
}

pub fn check_info_nce(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d, k) = (2, 16, 8);
    let q = uniform(&mut rng, &[b, d], -1.0, 1.0);
    let kp = uniform(&mut rng, &[b, d], -1.0, 1.0);
    let negs = unit(&uniform(&mut rng, &[k, d], -1.0, 1.0))?;
    let err = finite_difference_check_many(
        |xs| info_nce_loss(&unit(&xs[0])?, &unit(&xs[1])?, &negs, 0.07),
        &[q, kp],
        EPS,
    )?;
    Ok(report("contrastive (InfoNCE)", err, ISOLATED_TOL))
}

pub fn check_global_distillation(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 3, 8];
    let ft = uniform(&mut rng, &shape, -1.0, 1.0);
    let fr = uniform(&mut rng, &shape, -1.0, 1.0);
    let teacher = global_correlation(
        &unit(&uniform(&mut rng, &shape, -1.0, 1.0))?,
        &unit(&uniform(&mut rng, &shape, -1.0, 1.0))?,
        0.07,
    )?;
    let err = finite_difference_check_many(
        |xs| {
            let a = global_correlation(&unit(&xs[0])?, &unit(&xs[1])?, 0.07)?;
            global_correlation_distillation(&a, &teacher)
        },
        &[ft, fr],
        EPS,
    )?;
    Ok(report("global correlation distillation", err, ISOLATED_TOL))
}

pub fn check_reconstruction(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ft = uniform(&mut rng, &[8, 8, 4], -1.0, 1.0);
    let fr = uniform(&mut rng, &[8, 8, 4], -1.0, 1.0);
    let ir = uniform(&mut rng, &[8, 8, 3], -0.5, 0.5);
    let it = uniform(&mut rng, &[8, 8, 3], -0.5, 0.5);
    let err = finite_difference_check_many(
        |xs| {
            let c = local_correlation(&unit(&xs[0])?, &unit(&xs[1])?, 3, 0.07)?;
            reconstruction_loss(&reconstruct_frame(&c, &xs[2])?, &it)
        },
        &[ft, fr, ir],
        EPS,
    )?;
    Ok(report("local correlation + reconstruction (L1)", err, ISOLATED_TOL))
}

pub fn check_pyramid_reconstruction(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0t = uniform(&mut rng, &[8, 8, 3], -1.0, 1.0);
    let f0r = uniform(&mut rng, &[8, 8, 3], -1.0, 1.0);
    let f1t = uniform(&mut rng, &[4, 4, 3], -1.0, 1.0);
    let f1r = uniform(&mut rng, &[4, 4, 3], -1.0, 1.0);
    let targets = [uniform(&mut rng, &[8, 8, 3], -0.5, 0.5), uniform(&mut rng, &[4, 4, 3], -0.5, 0.5)];
    let refs = [uniform(&mut rng, &[8, 8, 3], -0.5, 0.5), uniform(&mut rng, &[4, 4, 3], -0.5, 0.5)];
    let err = finite_difference_check_many(
        |xs| {
            let c0 = local_correlation(&unit(&xs[0])?, &unit(&xs[1])?, 5, 0.07)?;
            let c1 = local_correlation(&unit(&xs[2])?, &unit(&xs[3])?, 3, 0.07)?;
            pyramid_reconstruction_loss(&[c0, c1], &targets, &refs)
        },
        &[f0t, f0r, f1t, f1r],
        EPS,
    )?;
    Ok(report("pyramid reconstruction", err, ISOLATED_TOL))
}

pub fn check_local_distillation(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ft = uniform(&mut rng, &[4, 4, 3], -1.0, 1.0);
    let fr = uniform(&mut rng, &[4, 4, 3], -1.0, 1.0);
    let fine = local_correlation(
        &unit(&uniform(&mut rng, &[8, 8, 3], -1.0, 1.0))?,
        &unit(&uniform(&mut rng, &[8, 8, 3], -1.0, 1.0))?,
        5,
        0.07,
    )?;
    let pseudo = correlation_downsample(&fine, 2, 3)?;
    let mask: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
    let err = finite_difference_check_many(
        |xs| {
            let c = local_correlation(&unit(&xs[0])?, &unit(&xs[1])?, 3, 0.07)?;
            local_correlation_distillation(&c, &pseudo, &mask)
        },
        &[ft, fr],
        EPS,
    )?;
    Ok(report("local correlation distillation (masked)", err, ISOLATED_TOL))
}

/// Encoder with two channels per stage on 16×16 frames.
pub fn tiny_encoder_config(seed: u64) -> EncoderConfig {
    EncoderConfig {
        in_channels: 3,
        stage_channels: vec![2, 2, 2],
        stage_total_strides: vec![2, 4, 8],
        init_seed: seed,
    }
}

pub fn tiny_temporal_config() -> TemporalConfig {
    TemporalConfig {
        windows: vec![5, 3],
        ..TemporalConfig::default()
    }
}

pub fn check_composite(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student = Encoder::new(tiny_encoder_config(seed))?;
    let teacher = Encoder::new(tiny_encoder_config(seed + 1))?.freeze();
    let cfg = tiny_temporal_config();
    let target = uniform(&mut rng, &[16, 16, 3], -0.5, 0.5);
    let reference = uniform(&mut rng, &[16, 16, 3], -0.5, 0.5);
    let sample = TemporalSample { target: &target, reference: &reference, dropout: Some(1) };
    let (_, _, fixed) = temporal_objective_with(&student, Some(&teacher), &cfg, &sample, None)?;
    let err = finite_difference_check_many(
        |ps| {
            let enc = student.with_params(ps.to_vec())?;
            Ok(temporal_objective_with(&enc, Some(&teacher), &cfg, &sample, Some(&fixed))?.0)
        },
        student.params(),
        EPS,
    )?;
    Ok(report("total objective through encoder", err, COMPOSITE_TOL))
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        check_info_nce(seed)?,
        check_global_distillation(seed)?,
        check_reconstruction(seed)?,
        check_pyramid_reconstruction(seed)?,
        check_local_distillation(seed)?,
        check_composite(seed)?,
    ])
}
