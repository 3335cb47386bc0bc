use candle_core::{DType, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use super::store::{Buffer, Init, ParamStore};
use crate::error::Result;

/// Numeric precision used for a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Full,
    Mixed,
}

/// Operation classes that a precision policy assigns a dtype to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpClass {
    Convolution,
    MatMul,
    Normalization,
    Reduction,
    Activation,
    Softmax,
    Interpolation,
    Loss,
}

/// Per-operation compute dtype table. Tensors flow between operations in
/// f32; an operation whose class maps to f16 casts its inputs down, runs,
/// and casts the result back up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionPolicy {
    table: [(OpClass, DType); 8],
}

impl PrecisionPolicy {
    pub fn full() -> Self {
        PrecisionPolicy {
            table: [
                (OpClass::Convolution, DType::F32),
                (OpClass::MatMul, DType::F32),
                (OpClass::Normalization, DType::F32),
                (OpClass::Reduction, DType::F32),
                (OpClass::Activation, DType::F32),
                (OpClass::Softmax, DType::F32),
                (OpClass::Interpolation, DType::F32),
                (OpClass::Loss, DType::F32),
            ],
        }
    }

    pub fn mixed() -> Self {
        let mut p = Self::full();
        p.table[0].1 = DType::F16;
        p.table[1].1 = DType::F16;
        p
    }

    pub fn for_precision(p: Precision) -> Self {
        match p {
            Precision::Full => Self::full(),
            Precision::Mixed => Self::mixed(),
        }
    }

    pub fn dtype(&self, op: OpClass) -> DType {
        self.table
            .iter()
            .find(|(o, _)| *o == op)
            .map(|(_, d)| *d)
            .unwrap_or(DType::F32)
    }

    pub fn table(&self) -> &[(OpClass, DType)] {
        &self.table
    }
}

/// Forward-pass context.
#[derive(Debug, Clone, Copy)]
pub struct Mode {
    pub train: bool,
    pub policy: PrecisionPolicy,
}

impl Mode {
    pub fn eval(precision: Precision) -> Self {
        Mode {
            train: false,
            policy: PrecisionPolicy::for_precision(precision),
        }
    }

    pub fn train(precision: Precision) -> Self {
        Mode {
            train: true,
            policy: PrecisionPolicy::for_precision(precision),
        }
    }
}

fn cast(x: &Tensor, dt: DType) -> Result<Tensor> {
    Ok(x.to_dtype(dt)?)
}

/// Matrix product under the policy's matmul dtype, returned in f32.
pub fn matmul(a: &Tensor, b: &Tensor, mode: &Mode) -> Result<Tensor> {
    let dt = mode.policy.dtype(OpClass::MatMul);
    let y = cast(a, dt)?.broadcast_matmul(&cast(b, dt)?)?;
    cast(&y, DType::F32)
}

pub fn sub(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    groups: usize,
}

/// Weight init families for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvInit {
    /// He normal with fan-out, used throughout the backbones.
    HeFanOut,
    /// Uniform in ±1/sqrt(fan_in), used for the 1×1 output heads.
    FanInUniform,
}

pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
    pub init: ConvInit,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: false,
            init: ConvInit::HeFanOut,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn init(mut self, init: ConvInit) -> Self {
        self.init = init;
        self
    }
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: ConvSpec) -> Result<Self> {
        let k = spec.kernel;
        let cin_g = spec.in_ch / spec.groups;
        let fan_in = (cin_g * k * k) as f64;
        let fan_out = (spec.out_ch / spec.groups * k * k) as f64;
        let w_init = match spec.init {
            ConvInit::HeFanOut => Init::Normal {
                std: (2.0 / fan_out).sqrt(),
            },
            ConvInit::FanInUniform => Init::Uniform {
                bound: 1.0 / fan_in.sqrt(),
            },
        };
        let weight = store.param(&sub(prefix, "weight"), &[spec.out_ch, cin_g, k, k], w_init)?;
        let bias = if spec.bias {
            let b_init = match spec.init {
                ConvInit::HeFanOut => Init::Zeros,
                ConvInit::FanInUniform => Init::Uniform {
                    bound: 1.0 / fan_in.sqrt(),
                },
            };
            Some(store.param(&sub(prefix, "bias"), &[spec.out_ch], b_init)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let dt = mode.policy.dtype(OpClass::Convolution);
        let y = cast(x, dt)?.conv2d(
            &cast(self.weight.as_tensor(), dt)?,
            self.padding,
            self.stride,
            1,
            self.groups,
        )?;
        let y = cast(&y, DType::F32)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Buffer,
    running_var: Buffer,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            weight: store.param(&sub(prefix, "weight"), &[channels], Init::Ones)?,
            bias: store.param(&sub(prefix, "bias"), &[channels], Init::Zeros)?,
            running_mean: store.zeros_buffer(&sub(prefix, "running_mean"), channels)?,
            running_var: store.ones_buffer(&sub(prefix, "running_var"), channels)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let x = cast(x, mode.policy.dtype(OpClass::Normalization))?;
        let (mean, var) = if mode.train {
            let (b, _, h, w) = x.dims4()?;
            let mean = x.mean_keepdim((0, 2, 3))?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = ((self.running_mean.get() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.get() * (1.0 - m))? + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(rm);
            self.running_var.set(rv);
            (mean, var)
        } else {
            (
                self.running_mean.get().reshape((1, (), 1, 1))?,
                self.running_var.get().reshape((1, (), 1, 1))?,
            )
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let w = self.weight.as_tensor().reshape((1, (), 1, 1))?;
        let b = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        Ok(xhat.broadcast_mul(&w)?.broadcast_add(&b)?)
    }
}

/// Layer normalisation over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Var,
    bias: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            weight: store.param(&sub(prefix, "weight"), &[dim], Init::Ones)?,
            bias: store.param(&sub(prefix, "bias"), &[dim], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let x = cast(x, mode.policy.dtype(OpClass::Normalization))?;
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Linear {
            weight: store.param(
                &sub(prefix, "weight"),
                &[out_dim, in_dim],
                Init::TruncNormal { std: 0.02 },
            )?,
            bias: store.param(&sub(prefix, "bias"), &[out_dim], Init::Zeros)?,
        })
    }

    /// `x`: (..., in_dim) → (..., out_dim).
    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let y = matmul(x, &self.weight.as_tensor().t()?, mode)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Row-interpolation matrix (out × in) for bilinear resizing with
/// half-pixel centres (align_corners = false).
fn bilinear_matrix(in_len: usize, out_len: usize) -> Vec<f32> {
    let mut m = vec![0f32; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let w1 = src - i0 as f64;
        m[o * in_len + i0] += (1.0 - w1) as f32;
        m[o * in_len + i1] += w1 as f32;
    }
    m
}

/// Bilinear resize of a B×C×H×W tensor to `out_h`×`out_w`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize, mode: &Mode) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dt = mode.policy.dtype(OpClass::Interpolation);
    let mh = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(dt)?;
    let mw = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?
        .t()?
        .contiguous()?
        .to_dtype(dt)?;
    let x = cast(x, dt)?;
    let y = x.broadcast_matmul(&mw)?;
    let y = mh.broadcast_matmul(&y)?;
    cast(&y, DType::F32)
}

/// 3×3 stride-2 max pooling with one pixel of padding. Inputs are
/// non-negative (post-ReLU), so zero padding never wins the max.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    // Pad so every window offset has 2·out rows/cols available.
    let xp = x
        .pad_with_zeros(2, 1, 2 * oh + 1 - h)?
        .pad_with_zeros(3, 1, 2 * ow + 1 - w)?;
    let mut out: Option<Tensor> = None;
    for dr in 0..3 {
        for dc in 0..3 {
            let s = xp
                .narrow(2, dr, 2 * oh)?
                .narrow(3, dc, 2 * ow)?
                .reshape((b, c, oh, 2, ow, 2))?
                .narrow(3, 0, 1)?
                .narrow(5, 0, 1)?
                .reshape((b, c, oh, ow))?;
            out = Some(match out {
                None => s,
                Some(m) => m.maximum(&s)?,
            });
        }
    }
    Ok(out.expect("nine window offsets"))
}
