use candle_core::{Tensor, D};

use super::ops::{gelu, Ctx};
use super::params::{Init, ParamBuilder};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(pb, in_dim, out_dim, Init::fan_in(in_dim))
    }

    pub fn with_init(pb: &ParamBuilder, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        let weight = pb.get((out_dim, in_dim), "weight", init)?;
        let bias = pb.get(out_dim, "bias", Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("linear input has at least one dim");
        let rows = x.elem_count() / in_dim.max(1);
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &ParamBuilder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Option<Init>,
    ) -> Result<Self> {
        let init = init.unwrap_or(Init::fan_in(in_c * kernel * kernel));
        let weight = pb.get((out_c, in_c, kernel, kernel), "weight", init)?;
        let bias = if bias {
            Some(pb.get(out_c, "bias", Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?,
            None => y,
        })
    }
}

/// Transposed convolution; kernel layout `[in_c, out_c, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        pb: &ParamBuilder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        init: Option<Init>,
    ) -> Result<Self> {
        let init = init.unwrap_or(Init::fan_in(in_c * kernel * kernel));
        let weight = pb.get((in_c, out_c, kernel, kernel), "weight", init)?;
        let bias = pb.get(out_c, "bias", Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride,
            padding: 0,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.get(dim, "gamma", Init::Ones)?,
            beta: pb.get(dim, "beta", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Two linear layers with a GELU between and dropout on the hidden layer.
#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(pb: &ParamBuilder, dim: usize, expansion: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&pb.pp("up"), dim, dim * expansion)?,
            down: Linear::new(&pb.pp("down"), dim * expansion, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = ctx.dropout(&gelu(&self.up.forward(x)?)?)?;
        self.down.forward(&h)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(pb: &ParamBuilder, count: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: pb.get((count, dim), "table", Init::fan_in(dim))?,
        })
    }

    pub fn count(&self) -> usize {
        self.table.dims()[0]
    }

    /// `ids` is a `[B, T]` u32 tensor; returns `[B, T, dim]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let flat = ids.flatten_all()?;
        let rows = self.table.index_select(&flat, 0)?;
        let dim = self.table.dims()[1];
        Ok(rows.reshape((b, t, dim))?)
    }
}

pub(crate) fn expect_dims(context: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.dims() != expected {
        return Err(Error::shape(context, expected, t.dims()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    /// Direct scatter definition of a transposed convolution.
    fn conv_transpose_oracle(
        input: &[Vec<f64>],
        kernel: &[Vec<f64>],
        stride: usize,
    ) -> Vec<Vec<f64>> {
        let (h, w) = (input.len(), input[0].len());
        let k = kernel.len();
        let (oh, ow) = ((h - 1) * stride + k, (w - 1) * stride + k);
        let mut out = vec![vec![0.0; ow]; oh];
        for i in 0..h {
            for j in 0..w {
                for a in 0..k {
                    for b in 0..k {
                        out[i * stride + a][j * stride + b] += input[i][j] * kernel[a][b];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn transposed_conv_matches_scatter_oracle() {
        let dev = Device::Cpu;
        let input = vec![vec![1.0, -2.0], vec![0.5, 3.0]];
        let kernel = vec![vec![1.0, 2.0], vec![-1.0, 0.25]];
        let expected = conv_transpose_oracle(&input, &kernel, 2);
        assert_eq!(expected.len(), 4);

        let x = Tensor::new(&[[[[1.0f64, -2.0], [0.5, 3.0]]]], &dev).unwrap();
        let k = Tensor::new(&[[[[1.0f64, 2.0], [-1.0, 0.25]]]], &dev).unwrap();
        let layer = ConvTranspose2d::from_tensors(k, None, 2, 0);
        let y = layer.forward(&x).unwrap().squeeze(0).unwrap().squeeze(0).unwrap();
        assert_eq!(y.to_vec2::<f64>().unwrap(), expected);

        // Overlapping footprint (stride 1, 3x3 output).
        let expected = conv_transpose_oracle(&input, &kernel, 1);
        let k = Tensor::new(&[[[[1.0f64, 2.0], [-1.0, 0.25]]]], &dev).unwrap();
        let layer = ConvTranspose2d::from_tensors(k, None, 1, 0);
        let y = layer.forward(&x).unwrap().squeeze(0).unwrap().squeeze(0).unwrap();
        assert_eq!(y.to_vec2::<f64>().unwrap(), expected);
    }

    #[test]
    fn linear_handles_rank_three_inputs() {
        let dev = Device::Cpu;
        let w = Tensor::new(&[[1.0f64, 0.0], [0.0, 2.0], [1.0, 1.0]], &dev).unwrap();
        let b = Tensor::new(&[0.5f64, 0.0, -1.0], &dev).unwrap();
        let lin = Linear::from_tensors(w, Some(b));
        let x = Tensor::new(&[[[1.0f64, 2.0], [3.0, 4.0]]], &dev).unwrap();
        let y = lin.forward(&x).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(y[0][0], vec![1.5, 4.0, 2.0]);
        assert_eq!(y[0][1], vec![3.5, 8.0, 6.0]);
    }

    #[test]
    fn layer_norm_normalizes_last_dim() {
        let dev = Device::Cpu;
        let store = super::super::params::ParamStore::new();
        let pb = ParamBuilder::new(&store, 0, DType::F64, &dev);
        let ln = LayerNorm::new(&pb, 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &dev).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
