//! Feature extractors. Parameter names follow torchvision's state dicts so
//! ImageNet weights exported from it load directly (under `encoder.`).
//!
//! Every encoder returns five feature maps at strides 2, 4, 8, 16 and 32
//! (or 2, 4, 8, 8, 8 when built dilated for atrous decoders).

use candle_core::{Module, ModuleT, Result, Tensor};
use candle_nn::{BatchNorm, Conv2d, VarBuilder};

use super::layers::{bn, conv, global_avg_pool, sigmoid, Act, ConvBnAct, ConvOpts, DepthwiseConv};

const BN_EPS: f64 = 1e-5;
const EFFICIENTNET_BN_EPS: f64 = 1e-3;

pub(crate) fn scaled(c: usize, divisor: usize) -> usize {
    (c / divisor).max(1)
}

#[derive(Debug, Clone)]
pub(crate) enum Encoder {
    Vgg19(Vgg19),
    ResNeXt(ResNeXt),
    EfficientNet(EfficientNet),
}

impl Encoder {
    pub(crate) fn channels(&self) -> [usize; 5] {
        match self {
            Encoder::Vgg19(e) => e.channels,
            Encoder::ResNeXt(e) => e.channels,
            Encoder::EfficientNet(e) => e.channels,
        }
    }

    pub(crate) fn forward_t(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        match self {
            Encoder::Vgg19(e) => e.forward(x),
            Encoder::ResNeXt(e) => e.forward_t(x, train),
            Encoder::EfficientNet(e) => e.forward_t(x, train),
        }
    }
}

// ---------------------------------------------------------------------------
// VGG19 (no batch norm)

#[derive(Debug, Clone)]
enum VggOp {
    Conv(Conv2d),
    Pool,
}

#[derive(Debug, Clone)]
pub(crate) struct Vgg19 {
    /// Stage 0 runs at full resolution and is not emitted.
    stages: Vec<Vec<VggOp>>,
    channels: [usize; 5],
}

impl Vgg19 {
    pub(crate) fn new(in_ch: usize, divisor: usize, vb: VarBuilder) -> Result<Self> {
        // 0 marks a max pool
        const CFG: [usize; 21] = [
            64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512,
            512, 0,
        ];
        let vb = vb.pp("features");
        let mut stages: Vec<Vec<VggOp>> = vec![Vec::new()];
        let mut idx = 0;
        let mut cin = in_ch;
        for &c in CFG.iter() {
            if c == 0 {
                stages.push(vec![VggOp::Pool]);
                idx += 1;
                continue;
            }
            let cout = scaled(c, divisor);
            let layer = conv(cin, cout, ConvOpts::k(3).bias(), vb.pp(idx.to_string()))?;
            stages.last_mut().expect("stage exists").push(VggOp::Conv(layer));
            cin = cout;
            idx += 2;
        }
        let channels = [128, 256, 512, 512, 512].map(|c| scaled(c, divisor));
        Ok(Self { stages, channels })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(5);
        let mut x = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            for op in stage {
                x = match op {
                    VggOp::Conv(c) => c.forward(&x)?.relu()?,
                    VggOp::Pool => x.max_pool2d_with_stride(2, 2)?,
                };
            }
            if i > 0 {
                feats.push(x.clone());
            }
        }
        Ok(feats)
    }
}

// ---------------------------------------------------------------------------
// ResNeXt-101 32x8d

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    #[allow(clippy::too_many_arguments)]
    fn new(
        cin: usize,
        width: usize,
        cout: usize,
        groups: usize,
        stride: usize,
        dilation: usize,
        downsample: bool,
        vb: VarBuilder,
    ) -> Result<Self> {
        let downsample = if downsample {
            let d = vb.pp("downsample");
            Some((
                conv(cin, cout, ConvOpts::k(1).stride(stride), d.pp("0"))?,
                bn(cout, BN_EPS, d.pp("1"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv(cin, width, ConvOpts::k(1), vb.pp("conv1"))?,
            bn1: bn(width, BN_EPS, vb.pp("bn1"))?,
            conv2: conv(
                width,
                width,
                ConvOpts::k(3).stride(stride).dilation(dilation).groups(groups),
                vb.pp("conv2"),
            )?,
            bn2: bn(width, BN_EPS, vb.pp("bn2"))?,
            conv3: conv(width, cout, ConvOpts::k(1), vb.pp("conv3"))?,
            bn3: bn(cout, BN_EPS, vb.pp("bn3"))?,
            downsample,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let out = self.bn1.forward_t(&self.conv1.forward(x)?, train)?.relu()?;
        let out = self.bn2.forward_t(&self.conv2.forward(&out)?, train)?.relu()?;
        let out = self.bn3.forward_t(&self.conv3.forward(&out)?, train)?;
        let identity = match &self.downsample {
            Some((c, b)) => b.forward_t(&c.forward(x)?, train)?,
            None => x.clone(),
        };
        (out + identity)?.relu()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ResNeXt {
    conv1: Conv2d,
    bn1: BatchNorm,
    layers: Vec<Vec<Bottleneck>>,
    channels: [usize; 5],
}

impl ResNeXt {
    /// ResNeXt-101 32x8d. The stem pools with a 2x2 window.
    pub(crate) fn new(in_ch: usize, divisor: usize, dilated: bool, vb: VarBuilder) -> Result<Self> {
        const BLOCKS: [usize; 4] = [3, 4, 23, 3];
        const PLANES: [usize; 4] = [64, 128, 256, 512];
        let groups = (32 / divisor).max(1);
        let stem = scaled(64, divisor);
        let conv1 = conv(in_ch, stem, ConvOpts::k(7).stride(2), vb.pp("conv1"))?;
        let bn1 = bn(stem, BN_EPS, vb.pp("bn1"))?;
        let mut cin = stem;
        let mut dilation = 1;
        let mut layers = Vec::with_capacity(4);
        for (li, (&n, &planes)) in BLOCKS.iter().zip(PLANES.iter()).enumerate() {
            let planes = scaled(planes, divisor);
            // base width 8 per group: width = planes * 8 / 64 * 32
            let width = planes * 4;
            let cout = planes * 4;
            let mut stride = if li == 0 { 1 } else { 2 };
            let previous_dilation = dilation;
            if dilated && li >= 2 {
                dilation *= stride;
                stride = 1;
            }
            let lvb = vb.pp(format!("layer{}", li + 1));
            let mut blocks = Vec::with_capacity(n);
            for b in 0..n {
                let (s, d, down) = if b == 0 {
                    (stride, previous_dilation, stride != 1 || cin != cout)
                } else {
                    (1, dilation, false)
                };
                blocks.push(Bottleneck::new(cin, width, cout, groups, s, d, down, lvb.pp(b.to_string()))?);
                cin = cout;
            }
            layers.push(blocks);
        }
        let channels = [
            stem,
            scaled(64, divisor) * 4,
            scaled(128, divisor) * 4,
            scaled(256, divisor) * 4,
            scaled(512, divisor) * 4,
        ];
        Ok(Self {
            conv1,
            bn1,
            layers,
            channels,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let x = self.bn1.forward_t(&self.conv1.forward(x)?, train)?.relu()?;
        let mut feats = vec![x.clone()];
        let mut x = x.max_pool2d_with_stride(2, 2)?;
        for layer in &self.layers {
            for block in layer {
                x = block.forward_t(&x, train)?;
            }
            feats.push(x.clone());
        }
        Ok(feats)
    }
}

// ---------------------------------------------------------------------------
// EfficientNet-B7

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = d.max(((v + d / 2.0) / d).floor() * d);
    if new_v < 0.9 * v {
        new_v += d;
    }
    new_v as usize
}

#[derive(Debug, Clone)]
struct SqueezeExcite {
    fc1: Conv2d,
    fc2: Conv2d,
}

impl SqueezeExcite {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = global_avg_pool(x)?;
        let s = self.fc1.forward(&s)?.silu()?;
        let s = sigmoid(&self.fc2.forward(&s)?)?;
        x.broadcast_mul(&s)
    }
}

#[derive(Debug, Clone)]
struct MbConv {
    expand: Option<ConvBnAct>,
    depthwise: DepthwiseConv,
    depthwise_bn: BatchNorm,
    se: SqueezeExcite,
    project: ConvBnAct,
    residual: bool,
}

impl MbConv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        cin: usize,
        cout: usize,
        expand_ratio: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        let vb = vb.pp("block");
        let expanded = make_divisible((cin * expand_ratio) as f64, 8);
        let mut n = 0;
        let expand = if expanded != cin {
            n += 1;
            Some(ConvBnAct::new(
                cin,
                expanded,
                ConvOpts::k(1),
                Act::Silu,
                EFFICIENTNET_BN_EPS,
                vb.pp("0"),
            )?)
        } else {
            None
        };
        let dvb = vb.pp(n.to_string());
        let depthwise = DepthwiseConv::new(expanded, kernel, stride, dilation, dvb.pp("0"))?;
        let depthwise_bn = bn(expanded, EFFICIENTNET_BN_EPS, dvb.pp("1"))?;
        let squeeze = (cin / 4).max(1);
        let svb = vb.pp((n + 1).to_string());
        let se = SqueezeExcite {
            fc1: conv(expanded, squeeze, ConvOpts::k(1).bias(), svb.pp("fc1"))?,
            fc2: conv(squeeze, expanded, ConvOpts::k(1).bias(), svb.pp("fc2"))?,
        };
        let project = ConvBnAct::new(
            expanded,
            cout,
            ConvOpts::k(1),
            Act::Identity,
            EFFICIENTNET_BN_EPS,
            vb.pp((n + 2).to_string()),
        )?;
        Ok(Self {
            expand,
            depthwise,
            depthwise_bn,
            se,
            project,
            residual: stride == 1 && cin == cout,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = match &self.expand {
            Some(e) => e.forward_t(x, train)?,
            None => x.clone(),
        };
        h = self.depthwise.forward(&h)?;
        h = self.depthwise_bn.forward_t(&h, train)?.silu()?;
        h = self.se.forward(&h)?;
        h = self.project.forward_t(&h, train)?;
        if self.residual {
            h = (h + x)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct EfficientNet {
    stem: ConvBnAct,
    stages: Vec<Vec<MbConv>>,
    channels: [usize; 5],
}

impl EfficientNet {
    /// EfficientNet-B7 (width 2.0, depth 3.1). Stochastic depth is not used.
    pub(crate) fn new(in_ch: usize, divisor: usize, dilated: bool, vb: VarBuilder) -> Result<Self> {
        // expand, kernel, stride, in, out, layers (before scaling)
        const BASE: [(usize, usize, usize, usize, usize, usize); 7] = [
            (1, 3, 1, 32, 16, 1),
            (6, 3, 2, 16, 24, 2),
            (6, 5, 2, 24, 40, 2),
            (6, 3, 2, 40, 80, 3),
            (6, 5, 1, 80, 112, 3),
            (6, 5, 2, 112, 192, 4),
            (6, 3, 1, 192, 320, 1),
        ];
        const WIDTH: f64 = 2.0;
        const DEPTH: f64 = 3.1;
        let adjust = |c: usize| make_divisible(c as f64 * WIDTH / divisor as f64, 8);
        let vb = vb.pp("features");
        let stem_out = adjust(BASE[0].3);
        let stem = ConvBnAct::new(
            in_ch,
            stem_out,
            ConvOpts::k(3).stride(2),
            Act::Silu,
            EFFICIENTNET_BN_EPS,
            vb.pp("0"),
        )?;
        let mut stages = Vec::with_capacity(BASE.len());
        let mut dilation = 1;
        for (si, &(e, k, s, cin, cout, n)) in BASE.iter().enumerate() {
            let (cin, cout) = (adjust(cin), adjust(cout));
            let layers = (n as f64 * DEPTH).ceil() as usize;
            let mut stride = s;
            // stages 4..7 run at strides 16 and 32
            if dilated && si >= 3 && stride == 2 {
                dilation *= 2;
                stride = 1;
            }
            let svb = vb.pp((si + 1).to_string());
            let mut blocks = Vec::with_capacity(layers);
            for b in 0..layers {
                let (bin, bs) = if b == 0 { (cin, stride) } else { (cout, 1) };
                blocks.push(MbConv::new(bin, cout, e, k, bs, dilation, svb.pp(b.to_string()))?);
            }
            stages.push(blocks);
        }
        let channels = [adjust(16), adjust(24), adjust(40), adjust(112), adjust(320)];
        Ok(Self {
            stem,
            stages,
            channels,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let mut x = self.stem.forward_t(x, train)?;
        let mut feats = Vec::with_capacity(5);
        for (si, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward_t(&x, train)?;
            }
            // ends of stages 1, 2, 3, 5 and 7
            if matches!(si, 0 | 1 | 2 | 4 | 6) {
                feats.push(x.clone());
            }
        }
        Ok(feats)
    }
}
