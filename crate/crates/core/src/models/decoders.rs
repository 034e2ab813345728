use candle_core::{Result, Tensor};
use candle_nn::VarBuilder;

use super::layers::{global_avg_pool, Act, ConvBnAct, ConvOpts};

const BN_EPS: f64 = 1e-5;
const DECODER_CHANNELS: [usize; 5] = [256, 128, 64, 32, 16];
const ASPP_CHANNELS: usize = 256;
const ASPP_RATES: [usize; 3] = [12, 24, 36];
const MIN_DECODER_CHANNELS: usize = 8;

pub(crate) fn decoder_channels(divisor: usize) -> [usize; 5] {
    DECODER_CHANNELS.map(|c| (c / divisor).max(MIN_DECODER_CHANNELS))
}

pub(crate) fn aspp_channels(divisor: usize) -> usize {
    (ASPP_CHANNELS / divisor).max(MIN_DECODER_CHANNELS)
}

fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    x.upsample_nearest2d(h * 2, w * 2)
}

/// Nearest upsample by 2, concatenate the skip, two conv-bn-relu layers.
#[derive(Debug, Clone)]
struct DecoderBlock {
    conv1: ConvBnAct,
    conv2: ConvBnAct,
}

impl DecoderBlock {
    fn new(cin: usize, skip: usize, cout: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv1: ConvBnAct::new(cin + skip, cout, ConvOpts::k(3), Act::Relu, BN_EPS, vb.pp("conv1"))?,
            conv2: ConvBnAct::new(cout, cout, ConvOpts::k(3), Act::Relu, BN_EPS, vb.pp("conv2"))?,
        })
    }

    fn forward_t(&self, x: &Tensor, skip: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let mut x = upsample2(x)?;
        if let Some(s) = skip {
            x = Tensor::cat(&[&x, s], 1)?;
        }
        let x = self.conv1.forward_t(&x, train)?;
        self.conv2.forward_t(&x, train)
    }
}

/// Plain U-Net decoder over five encoder features, ending at stride 1.
#[derive(Debug, Clone)]
pub(crate) struct UnetDecoder {
    blocks: Vec<DecoderBlock>,
}

impl UnetDecoder {
    pub(crate) fn new(encoder: [usize; 5], divisor: usize, vb: VarBuilder) -> Result<Self> {
        let dec = decoder_channels(divisor);
        let vb = vb.pp("blocks");
        let mut blocks = Vec::with_capacity(5);
        let mut cin = encoder[4];
        for i in 0..5 {
            let skip = if i < 4 { encoder[3 - i] } else { 0 };
            blocks.push(DecoderBlock::new(cin, skip, dec[i], vb.pp(i.to_string()))?);
            cin = dec[i];
        }
        Ok(Self { blocks })
    }

    pub(crate) fn out_channels(divisor: usize) -> usize {
        decoder_channels(divisor)[4]
    }

    pub(crate) fn forward_t(&self, feats: &[Tensor], train: bool) -> Result<Tensor> {
        let mut x = feats[4].clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let skip = if i < 4 { Some(&feats[3 - i]) } else { None };
            x = block.forward_t(&x, skip, train)?;
        }
        Ok(x)
    }
}

/// Nested U-Net decoder. Node `x_{d}_{l}` sits at depth `d` of column `l`
/// and sees every earlier node of its row plus the encoder skip.
#[derive(Debug, Clone)]
pub(crate) struct UnetPlusPlusDecoder {
    blocks: std::collections::BTreeMap<(usize, usize), DecoderBlock>,
    depth: usize,
}

impl UnetPlusPlusDecoder {
    pub(crate) fn new(encoder: [usize; 5], divisor: usize, vb: VarBuilder) -> Result<Self> {
        let dec = decoder_channels(divisor);
        // deepest first
        let enc: Vec<usize> = encoder.iter().rev().copied().collect();
        let in_ch: Vec<usize> = std::iter::once(enc[0]).chain(dec[..4].iter().copied()).collect();
        let skip_ch: Vec<usize> = enc[1..].iter().copied().chain(std::iter::once(0)).collect();
        let depth = in_ch.len() - 1;
        let vb = vb.pp("blocks");
        let mut blocks = std::collections::BTreeMap::new();
        for layer in 0..depth {
            for d in 0..=layer {
                let (cin, skip, cout) = if d == 0 {
                    (in_ch[layer], skip_ch[layer] * (layer + 1), dec[layer])
                } else {
                    (skip_ch[layer - 1], skip_ch[layer] * (layer + 1 - d), skip_ch[layer])
                };
                let block = DecoderBlock::new(cin, skip, cout, vb.pp(format!("x_{d}_{layer}")))?;
                blocks.insert((d, layer), block);
            }
        }
        let last = DecoderBlock::new(in_ch[depth], 0, dec[depth], vb.pp(format!("x_0_{depth}")))?;
        blocks.insert((0, depth), last);
        Ok(Self { blocks, depth })
    }

    pub(crate) fn out_channels(divisor: usize) -> usize {
        decoder_channels(divisor)[4]
    }

    pub(crate) fn forward_t(&self, feats: &[Tensor], train: bool) -> Result<Tensor> {
        let f: Vec<&Tensor> = feats.iter().rev().collect();
        let mut dense: std::collections::BTreeMap<(usize, usize), Tensor> = Default::default();
        for layer in 0..self.depth {
            for d in 0..(self.depth - layer) {
                if layer == 0 {
                    let out = self.blocks[&(d, d)].forward_t(f[d], Some(f[d + 1]), train)?;
                    dense.insert((d, d), out);
                } else {
                    let l = d + layer;
                    let mut cat: Vec<&Tensor> = (d + 1..=l).map(|i| &dense[&(i, l)]).collect();
                    cat.push(f[l + 1]);
                    let skip = Tensor::cat(&cat, 1)?;
                    let out = self.blocks[&(d, l)].forward_t(&dense[&(d, l - 1)], Some(&skip), train)?;
                    dense.insert((d, l), out);
                }
            }
        }
        let prev = &dense[&(0, self.depth - 1)];
        self.blocks[&(0, self.depth)].forward_t(prev, None, train)
    }
}

/// Atrous spatial pyramid pooling followed by a 3x3 conv-bn-relu.
#[derive(Debug, Clone)]
pub(crate) struct DeepLabV3Decoder {
    branches: Vec<ConvBnAct>,
    pooling: ConvBnAct,
    project: ConvBnAct,
    tail: ConvBnAct,
}

impl DeepLabV3Decoder {
    pub(crate) fn new(cin: usize, divisor: usize, vb: VarBuilder) -> Result<Self> {
        let c = aspp_channels(divisor);
        let aspp = vb.pp("0");
        let convs = aspp.pp("convs");
        let mut branches = vec![ConvBnAct::new(cin, c, ConvOpts::k(1), Act::Relu, BN_EPS, convs.pp("0"))?];
        for (i, &rate) in ASPP_RATES.iter().enumerate() {
            branches.push(ConvBnAct::new(
                cin,
                c,
                ConvOpts::k(3).dilation(rate),
                Act::Relu,
                BN_EPS,
                convs.pp((i + 1).to_string()),
            )?);
        }
        // torch layout: pool at .0, conv at .1, bn at .2
        let pvb = convs.pp("4");
        let pooling = ConvBnAct::from_parts(cin, c, ConvOpts::k(1), Act::Relu, BN_EPS, pvb.pp("1"), pvb.pp("2"))?;
        let project = ConvBnAct::new(5 * c, c, ConvOpts::k(1), Act::Relu, BN_EPS, aspp.pp("project"))?;
        let tail = ConvBnAct::from_parts(c, c, ConvOpts::k(3), Act::Relu, BN_EPS, vb.pp("1"), vb.pp("2"))?;
        Ok(Self {
            branches,
            pooling,
            project,
            tail,
        })
    }

    pub(crate) fn out_channels(divisor: usize) -> usize {
        aspp_channels(divisor)
    }

    pub(crate) fn forward_t(&self, feats: &[Tensor], train: bool) -> Result<Tensor> {
        let x = &feats[4];
        let (_, _, h, w) = x.dims4()?;
        let mut outs = Vec::with_capacity(5);
        for b in &self.branches {
            outs.push(b.forward_t(x, train)?);
        }
        let pooled = self.pooling.forward_t(&global_avg_pool(x)?, train)?;
        let (n, c, _, _) = pooled.dims4()?;
        outs.push(pooled.broadcast_as((n, c, h, w))?.contiguous()?);
        let x = Tensor::cat(&outs, 1)?;
        let x = self.project.forward_t(&x, train)?;
        self.tail.forward_t(&x, train)
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Decoder {
    Unet(UnetDecoder),
    UnetPlusPlus(UnetPlusPlusDecoder),
    DeepLabV3(DeepLabV3Decoder),
}

impl Decoder {
    pub(crate) fn forward_t(&self, feats: &[Tensor], train: bool) -> Result<Tensor> {
        match self {
            Decoder::Unet(d) => d.forward_t(feats, train),
            Decoder::UnetPlusPlus(d) => d.forward_t(feats, train),
            Decoder::DeepLabV3(d) => d.forward_t(feats, train),
        }
    }
}
