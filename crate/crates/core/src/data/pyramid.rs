use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames down-sampled to match the feature levels used for reconstruction.
#[derive(Debug, Clone)]
pub struct FramePyramid {
    pub levels: Vec<Tensor>,
}

/// Keeps the pixel at the center of every `stride × stride` cell, i.e. index
/// `stride·k + ⌊stride/2⌋` along both axes.
pub fn center_sample(frame: &Tensor, stride: usize) -> Result<Tensor> {
    let &[h, w, c] = frame.shape() else {
        return Err(Error::Shape {
            op: "center_sample",
            lhs: frame.shape().to_vec(),
            rhs: vec![],
        });
    };
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::invalid(format!(
            "frame {h}x{w} is not divisible by stride {stride}"
        )));
    }
    let (ho, wo, off) = (h / stride, w / stride, stride / 2);
    let src = frame.data();
    let mut out = Vec::with_capacity(ho * wo * c);
    for y in 0..ho {
        for x in 0..wo {
            let p = ((y * stride + off) * w + x * stride + off) * c;
            out.extend_from_slice(&src[p..p + c]);
        }
    }
    Tensor::new(&[ho, wo, c], out)
}

pub fn frame_pyramid(frame: &Tensor, strides: &[usize]) -> Result<FramePyramid> {
    let levels = strides
        .iter()
        .map(|&s| center_sample(frame, s))
        .collect::<Result<_>>()?;
    Ok(FramePyramid { levels })
}
