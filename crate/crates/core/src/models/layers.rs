use candle_core::{DType, Device, Module, ModuleT, Result, Tensor, D};
use candle_nn::{batch_norm, conv2d, conv2d_no_bias, BatchNorm, BatchNormConfig, Conv2d, Conv2dConfig, VarBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Act {
    Relu,
    Silu,
    Identity,
}

impl Act {
    pub(crate) fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Act::Relu => x.relu(),
            Act::Silu => x.silu(),
            Act::Identity => Ok(x.clone()),
        }
    }
}

pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvOpts {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvOpts {
    pub(crate) fn k(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            dilation: 1,
            groups: 1,
            bias: false,
        }
    }

    pub(crate) fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub(crate) fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub(crate) fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub(crate) fn bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

/// "Same" convolution: padding keeps the size for stride 1.
pub(crate) fn conv(cin: usize, cout: usize, o: ConvOpts, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: o.dilation * (o.kernel - 1) / 2,
        stride: o.stride,
        dilation: o.dilation,
        groups: o.groups,
        cudnn_fwd_algo: None,
    };
    if o.bias {
        conv2d(cin, cout, o.kernel, cfg, vb)
    } else {
        conv2d_no_bias(cin, cout, o.kernel, cfg, vb)
    }
}

pub(crate) fn bn(c: usize, eps: f64, vb: VarBuilder) -> Result<BatchNorm> {
    batch_norm(
        c,
        BatchNormConfig {
            eps,
            ..Default::default()
        },
        vb,
    )
}

/// Convolution (no bias), batch norm, activation. Parameters live under
/// `<prefix>.0` and `<prefix>.1`.
#[derive(Debug, Clone)]
pub(crate) struct ConvBnAct {
    conv: Conv2d,
    bn: BatchNorm,
    act: Act,
}

impl ConvBnAct {
    pub(crate) fn new(
        cin: usize,
        cout: usize,
        o: ConvOpts,
        act: Act,
        eps: f64,
        vb: VarBuilder,
    ) -> Result<Self> {
        Self::from_parts(cin, cout, o, act, eps, vb.pp("0"), vb.pp("1"))
    }

    /// Same as [`ConvBnAct::new`] with explicit prefixes for each part.
    pub(crate) fn from_parts(
        cin: usize,
        cout: usize,
        o: ConvOpts,
        act: Act,
        eps: f64,
        conv_vb: VarBuilder,
        bn_vb: VarBuilder,
    ) -> Result<Self> {
        Ok(Self {
            conv: conv(cin, cout, o, conv_vb)?,
            bn: bn(cout, eps, bn_vb)?,
            act,
        })
    }

    pub(crate) fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.conv.forward(x)?;
        let x = self.bn.forward_t(&x, train)?;
        self.act.apply(&x)
    }
}

/// Depthwise convolution computed as a sum of shifted, per-channel scaled
/// copies of the input. Weight shape `(C, 1, k, k)`.
#[derive(Debug, Clone)]
pub(crate) struct DepthwiseConv {
    weight: Tensor,
    kernel: usize,
    stride: usize,
    dilation: usize,
}

impl DepthwiseConv {
    pub(crate) fn new(
        c: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        let weight = vb.get_with_hints(
            (c, 1, kernel, kernel),
            "weight",
            candle_nn::init::DEFAULT_KAIMING_NORMAL,
        )?;
        Ok(Self {
            weight,
            kernel,
            stride,
            dilation,
        })
    }
}

impl Module for DepthwiseConv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let pad = self.dilation * (self.kernel - 1) / 2;
        let padded = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
        let mut acc: Option<Tensor> = None;
        for i in 0..self.kernel {
            for j in 0..self.kernel {
                let tap = self
                    .weight
                    .narrow(2, i, 1)?
                    .narrow(3, j, 1)?
                    .reshape((1, c, 1, 1))?;
                let shifted = padded
                    .narrow(2, i * self.dilation, h)?
                    .narrow(3, j * self.dilation, w)?
                    .broadcast_mul(&tap)?;
                acc = Some(match acc {
                    None => shifted,
                    Some(a) => (a + shifted)?,
                });
            }
        }
        let out = acc.expect("kernel has at least one tap");
        if self.stride == 1 {
            return Ok(out);
        }
        subsample(&out, self.stride, n, c, h, w)
    }
}

/// Keeps rows and columns `0, s, 2s, ...`.
fn subsample(x: &Tensor, s: usize, n: usize, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let (ho, wo) = (h.div_ceil(s), w.div_ceil(s));
    let x = x.pad_with_zeros(2, 0, ho * s - h)?.pad_with_zeros(3, 0, wo * s - w)?;
    x.reshape((n, c, ho, s, wo, s))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?
        .reshape((n, c, ho, wo))
}

/// `(out, in)` matrix of 1-D linear interpolation weights, corners aligned.
fn interpolation_matrix(out: usize, inp: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; out * inp];
    for i in 0..out {
        if inp == 1 || out == 1 {
            m[i * inp] = 1.0;
            continue;
        }
        let src = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let lo = (src.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        let frac = src - lo as f64;
        m[i * inp + lo] += 1.0 - frac;
        m[i * inp + hi] += frac;
    }
    Tensor::from_vec(m, (out, inp), device)?.to_dtype(dtype)
}

/// Bilinear resize (corners aligned) expressed as two matrix products so
/// it stays differentiable.
pub(crate) fn resize_bilinear(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, hi, wi) = x.dims4()?;
    if (hi, wi) == (h, w) {
        return Ok(x.clone());
    }
    let rows = interpolation_matrix(h, hi, x.dtype(), x.device())?;
    let cols = interpolation_matrix(w, wi, x.dtype(), x.device())?.t()?;
    let x = x.contiguous()?.broadcast_matmul(&cols.contiguous()?)?;
    rows.broadcast_matmul(&x.contiguous()?)
}

pub(crate) fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)
}
