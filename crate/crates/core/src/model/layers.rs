use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use rand::{Rng, SeedableRng};

use super::params::{Init, Scope};
use crate::error::Result;

/// Additive attention bias on padded keys; large enough that `exp` underflows to 0.
const MASK_BIAS: f64 = -1e9;

/// Per-call forward state: train/eval switch and the dropout generator.
pub struct ForwardCtx {
    pub train: bool,
    rng: rand_chacha::ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.train || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if self.rng.gen::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

/// Validity mask for a padded batch of sequences.
#[derive(Debug, Clone)]
pub struct SeqMask {
    /// `B x T x 1`, 1 on valid positions, 0 on padding.
    pub keep: Tensor,
    /// `B x 1 x 1 x T`, 0 on valid keys and a large negative value on padded keys.
    pub key_bias: Tensor,
    pub lengths: Vec<usize>,
}

impl SeqMask {
    pub fn from_lengths(lengths: &[usize], max_len: usize, dtype: DType, device: &Device) -> Result<Self> {
        let b = lengths.len();
        let mut keep = vec![0f32; b * max_len];
        for (i, &l) in lengths.iter().enumerate() {
            keep[i * max_len..i * max_len + l.min(max_len)].fill(1.0);
        }
        let bias: Vec<f64> = keep.iter().map(|&k| if k > 0.0 { 0.0 } else { MASK_BIAS }).collect();
        Ok(Self {
            keep: Tensor::from_vec(keep, (b, max_len, 1), device)?.to_dtype(dtype)?,
            key_bias: Tensor::from_vec(bias, (b, 1, 1, max_len), device)?.to_dtype(dtype)?,
            lengths: lengths.to_vec(),
        })
    }

    pub fn from_bool(mask: &Array2<bool>, dtype: DType, device: &Device) -> Result<Self> {
        let lengths: Vec<usize> = mask
            .outer_iter()
            .map(|row| row.iter().take_while(|&&m| m).count())
            .collect();
        Self::from_lengths(&lengths, mask.ncols(), dtype, device)
    }

    pub fn max_len(&self) -> usize {
        self.keep.dims()[1]
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn valid_count(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Zeroes padded positions of a `B x T x C` tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.keep)?)
    }

    /// Zeroes padded positions of a `B x T` tensor.
    pub fn apply_2d(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.mul(&self.keep.squeeze(2)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(s: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: s.get("weight", &[in_dim, out_dim], Init::Uniform(bound))?,
            bias: s.get("bias", &[out_dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Same-length 1-D convolution over `B x T x C_in` inputs.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl Conv1d {
    pub fn new(s: &mut Scope, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        assert!(kernel % 2 == 1, "kernel size must be odd to preserve length");
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        Ok(Self {
            weight: s.get("weight", &[out_ch, in_ch, kernel], Init::Uniform(bound))?,
            bias: s.get("bias", &[out_ch], Init::Zeros)?,
            padding: kernel / 2,
        })
    }

    /// Written as shifted copies + one matmul rather than `Tensor::conv1d`,
    /// whose backward pass disagrees with finite differences in candle 0.11.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, t, _) = x.dims3()?;
        let (out_ch, in_ch, kernel) = self.weight.dims3()?;
        let cols = if kernel == 1 {
            x.clone()
        } else {
            let padded = x.pad_with_zeros(1, self.padding, self.padding)?;
            let shifted = (0..kernel).map(|k| padded.narrow(1, k, t)).collect::<candle_core::Result<Vec<_>>>()?;
            Tensor::cat(&shifted, 2)?
        };
        // [out, in, k] -> [(k, in), out] to match the column order above
        let w = self.weight.permute((2, 1, 0))?.reshape((kernel * in_ch, out_ch))?;
        Ok(cols.broadcast_matmul(&w)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.get("gamma", &[dim], Init::Ones)?,
            beta: s.get("beta", &[dim], Init::Zeros)?,
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

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(s: &mut Scope, n: usize, dim: usize, init: Init) -> Result<Self> {
        Ok(Self {
            table: s.get("table", &[n, dim], init)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.table.dims()[0]
    }

    /// Looks up `ids` of any shape, appending the embedding axis.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let rows = self.table.index_select(&flat, 0)?;
        dims.push(self.table.dims()[1]);
        Ok(rows.reshape(dims)?)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }
}

/// Sinusoidal positions, `T x d`.
pub fn positional_encoding(len: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut pe = vec![0f64; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            pe[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::from_vec(pe, (len, dim), device)?.to_dtype(dtype)?)
}

/// Softmax over the last axis. The row maximum is treated as a constant,
/// which leaves values and gradients unchanged.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{InitSource, ParamGroup};

    #[test]
    fn conv_preserves_length() {
        let mut src = InitSource::new(0, DType::F64, Device::Cpu);
        let mut s = Scope::new(&mut src, ParamGroup::Decoder);
        let conv = Conv1d::new(&mut s, 3, 5, 5).unwrap();
        let x = Tensor::ones((2, 7, 3), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[2, 7, 5]);
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut src = InitSource::new(0, DType::F64, Device::Cpu);
        let mut s = Scope::new(&mut src, ParamGroup::Decoder);
        let ln = LayerNorm::new(&mut s, 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y: Vec<f64> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean = y.iter().sum::<f64>() / 4.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, -3.0, 0.5], [100.0, 100.0, -1e9]], &Device::Cpu).unwrap();
        let p: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        for row in &p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p[1][2], 0.0);
    }

    #[test]
    fn mask_from_lengths() {
        let m = SeqMask::from_lengths(&[3, 1], 4, DType::F32, &Device::Cpu).unwrap();
        let keep: Vec<Vec<f32>> = m.keep.squeeze(2).unwrap().to_vec2().unwrap();
        assert_eq!(keep, vec![vec![1.0, 1.0, 1.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]]);
        assert_eq!(m.valid_count(), 4);
    }

    #[test]
    fn dropout_is_seeded_and_off_in_eval() {
        let x = Tensor::ones((4, 8), DType::F32, &Device::Cpu).unwrap();
        let a: Vec<Vec<f32>> = ForwardCtx::train(5).dropout(&x, 0.5).unwrap().to_vec2().unwrap();
        let b: Vec<Vec<f32>> = ForwardCtx::train(5).dropout(&x, 0.5).unwrap().to_vec2().unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|&v| v == 0.0 || v == 2.0));
        let e: Vec<Vec<f32>> = ForwardCtx::eval().dropout(&x, 0.5).unwrap().to_vec2().unwrap();
        assert!(e.iter().flatten().all(|&v| v == 1.0));
    }
}
