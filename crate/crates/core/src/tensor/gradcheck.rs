use super::Tensor;
use crate::error::{Error, Result};

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    finite_difference_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), eps)
}

/// Same as [`finite_difference_check`] over several inputs at once.
pub fn finite_difference_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    let params: Vec<Tensor> = xs.iter().map(Tensor::to_param).collect();
    let root = f(&params)?;
    root.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let probe = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let inputs: Vec<Tensor> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                if i == which {
                    let mut d = x.to_vec();
                    d[coord] += delta;
                    Tensor::new(x.shape(), d)
                } else {
                    Ok(x.detach())
                }
            })
            .collect::<Result<_>>()?;
        let v = f(&inputs)?.item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NumericFault { op: "finite_difference_check" })
        }
    };

    let mut worst: f64 = 0.0;
    for (which, x) in xs.iter().enumerate() {
        for coord in 0..x.numel() {
            let numeric = (probe(which, coord, eps)? - probe(which, coord, -eps)?) / (2.0 * eps);
            let a = analytic[which][coord];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
