use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::fxp::real::{self, Real};
use crate::fxp::WeightFormat;

pub type Attrs = BTreeMap<String, serde_json::Value>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Linear,
    Relu,
    LeakyRelu {
        #[serde(with = "real::serde_real")]
        alpha: Real,
    },
    Tanh,
    Sigmoid,
    Softsign,
}

impl ActivationKind {
    /// Piecewise-linear kinds are computed exactly with a select; the rest
    /// go through a lookup table.
    pub fn is_piecewise_linear(&self) -> bool {
        matches!(self, ActivationKind::Linear | ActivationKind::Relu | ActivationKind::LeakyRelu { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Linear => "linear",
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu { .. } => "leakyrelu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Softsign => "softsign",
        }
    }

    pub fn eval_f64(&self, x: f64) -> f64 {
        match self {
            ActivationKind::Linear => x,
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::LeakyRelu { alpha } => {
                if x < 0.0 {
                    real::real_to_f64(alpha) * x
                } else {
                    x
                }
            }
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActivationKind::Softsign => x / (1.0 + x.abs()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub filters: usize,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    /// `[before, after]` padding per spatial axis.
    pub pad: Vec<[usize; 2]>,
}

impl ConvAttrs {
    pub fn new(filters: usize, kernel: Vec<usize>) -> Self {
        let n = kernel.len();
        Self { filters, kernel, stride: vec![1; n], pad: vec![[0, 0]; n] }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolAttrs {
    pub pool: Vec<usize>,
    pub stride: Vec<usize>,
    pub pad: Vec<[usize; 2]>,
}

impl PoolAttrs {
    pub fn new(pool: Vec<usize>) -> Self {
        let n = pool.len();
        Self { stride: pool.clone(), pad: vec![[0, 0]; n], pool }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    Quant,
    BipolarQuant,
    Trunc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op")]
pub enum Op {
    Input { shape: Vec<usize> },
    Dense { units: usize },
    Conv1D(ConvAttrs),
    Conv2D(ConvAttrs),
    DepthwiseConv(ConvAttrs),
    Pointwise { filters: usize },
    MaxPool(PoolAttrs),
    AvgPool(PoolAttrs),
    BatchNorm {
        #[serde(with = "real::serde_real")]
        epsilon: Real,
    },
    Activation(ActivationKind),
    Softmax,
    Add,
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
    Transpose { perm: Vec<usize> },
    /// A quantizer that has not been absorbed into a precision annotation.
    Quant { kind: QuantizerKind, format: WeightFormat },
    /// Value lives in `weights["value"]`.
    Constant,
    Custom { tag: String, #[serde(default)] attrs: Attrs },
}

impl Op {
    /// Lower-case stem used by the deterministic renaming scheme.
    pub fn stem(&self) -> String {
        match self {
            Op::Input { .. } => "input".into(),
            Op::Dense { .. } => "dense".into(),
            Op::Conv1D(_) => "conv1d".into(),
            Op::Conv2D(_) => "conv2d".into(),
            Op::DepthwiseConv(_) => "depthwise".into(),
            Op::Pointwise { .. } => "pointwise".into(),
            Op::MaxPool(_) => "maxpool".into(),
            Op::AvgPool(_) => "avgpool".into(),
            Op::BatchNorm { .. } => "batchnorm".into(),
            Op::Activation(k) => k.name().into(),
            Op::Softmax => "softmax".into(),
            Op::Add => "add".into(),
            Op::Concat { .. } => "concat".into(),
            Op::Reshape { .. } => "reshape".into(),
            Op::Transpose { .. } => "transpose".into(),
            Op::Quant { kind, .. } => match kind {
                QuantizerKind::Quant => "quant".into(),
                QuantizerKind::BipolarQuant => "bipolarquant".into(),
                QuantizerKind::Trunc => "trunc".into(),
            },
            Op::Constant => "constant".into(),
            Op::Custom { tag, .. } => tag.to_ascii_lowercase(),
        }
    }

    /// Name used for per-op-type configuration keys.
    pub fn type_name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "Input",
            Op::Dense { .. } => "Dense",
            Op::Conv1D(_) => "Conv1D",
            Op::Conv2D(_) => "Conv2D",
            Op::DepthwiseConv(_) => "DepthwiseConv",
            Op::Pointwise { .. } => "Pointwise",
            Op::MaxPool(_) => "MaxPool",
            Op::AvgPool(_) => "AvgPool",
            Op::BatchNorm { .. } => "BatchNorm",
            Op::Activation(_) => "Activation",
            Op::Softmax => "Softmax",
            Op::Add => "Add",
            Op::Concat { .. } => "Concat",
            Op::Reshape { .. } => "Reshape",
            Op::Transpose { .. } => "Transpose",
            Op::Quant { .. } => "Quant",
            Op::Constant => "Constant",
            Op::Custom { .. } => "Custom",
        }
    }

    /// Layers realized as a constant matrix-vector multiply.
    pub fn is_cmvm(&self) -> bool {
        matches!(
            self,
            Op::Dense { .. } | Op::Conv1D(_) | Op::Conv2D(_) | Op::DepthwiseConv(_) | Op::Pointwise { .. }
        )
    }

    pub fn is_conv_like(&self) -> bool {
        matches!(self, Op::Conv1D(_) | Op::Conv2D(_) | Op::DepthwiseConv(_) | Op::Pointwise { .. })
    }

    /// Ops that carry an accumulator precision.
    pub fn has_accumulator(&self) -> bool {
        self.is_cmvm() || matches!(self, Op::BatchNorm { .. } | Op::AvgPool(_))
    }

    /// Elementwise and layout-agnostic: commutes with any transpose.
    pub fn is_elementwise_unary(&self) -> bool {
        matches!(self, Op::Activation(_) | Op::Quant { .. })
    }

    /// Names of the weight tensors this op reads, with whether each is required.
    pub fn weight_names(&self) -> &'static [(&'static str, bool)] {
        match self {
            Op::Dense { .. }
            | Op::Conv1D(_)
            | Op::Conv2D(_)
            | Op::DepthwiseConv(_)
            | Op::Pointwise { .. } => &[("kernel", true), ("bias", false)],
            Op::BatchNorm { .. } => &[("gamma", true), ("beta", true), ("mean", true), ("variance", true)],
            Op::Constant => &[("value", true)],
            _ => &[],
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.type_name())
    }
}

/// `floor((input + pad_total - kernel) / stride) + 1`, or `None` when the
/// window does not fit.
pub fn window_out(input: usize, kernel: usize, stride: usize, pad: [usize; 2]) -> Option<usize> {
    let padded = input + pad[0] + pad[1];
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}
