//! Gradient reversal: identity on the way forward, `-lambda * g` on the way back.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlConfig {
    pub lambda: f64,
}

struct GradientReversal {
    lambda: f64,
}

impl CustomOp1 for GradientReversal {
    fn name(&self) -> &'static str {
        "gradient-reversal"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let Some((start, end)) = layout.contiguous_offsets() else {
            candle_core::bail!("gradient reversal expects a contiguous input");
        };
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].to_vec()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].to_vec()),
            other => candle_core::bail!("gradient reversal: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.affine(-self.lambda, 0.0)?))
    }
}

/// Passes `x` through unchanged and reverses (and scales) its gradient.
pub fn grl(x: &Tensor, config: GrlConfig) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(GradientReversal {
        lambda: config.lambda,
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn forward_is_identity() {
        let x = Tensor::new(&[[1.5f32, -2.0], [0.0, 3.25]], &Device::Cpu).unwrap();
        let y = grl(&x.t().unwrap(), GrlConfig { lambda: 0.7 }).unwrap();
        assert_eq!(y.to_vec2::<f32>().unwrap(), x.t().unwrap().to_vec2::<f32>().unwrap());
    }

    /// Finite-difference check of d/dx f(grl(x)) = -lambda f'(x) for
    /// f(x) = sum(x^3).
    #[test]
    fn gradient_matches_reversed_finite_difference() {
        let xs = [0.3f64, -1.2, 2.0];
        for lambda in [0.0, 0.5, 1.0] {
            let x = Var::new(&xs, &Device::Cpu).unwrap();
            let f = grl(x.as_tensor(), GrlConfig { lambda }).unwrap().powf(3.0).unwrap().sum_all().unwrap();
            let g = f.backward().unwrap().get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
            for (i, &xi) in xs.iter().enumerate() {
                let h = 1e-5;
                let fd = ((xi + h).powi(3) - (xi - h).powi(3)) / (2.0 * h);
                assert!((g[i] + lambda * fd).abs() < 1e-6, "lambda {lambda}: {} vs {}", g[i], -lambda * fd);
                if lambda == 0.0 {
                    assert_eq!(g[i], 0.0);
                }
            }
        }
    }
}
