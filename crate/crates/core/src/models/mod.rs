//! Encoder-decoder networks mapping a grayscale image to one heatmap per
//! landmark at the input resolution.

mod checkpoint;
mod decoders;
mod encoders;
mod init;
mod layers;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Module, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

pub use checkpoint::{sidecar_path, Checkpoint, CheckpointMeta};
pub(crate) use checkpoint::write_atomic;

use crate::error::{Error, Result};
use crate::heatmap::HeatmapStack;
use crate::raster::Raster;
use decoders::{DeepLabV3Decoder, Decoder, UnetDecoder, UnetPlusPlusDecoder};
use encoders::{EfficientNet, Encoder, ResNeXt, Vgg19};
use layers::{conv, resize_bilinear, ConvOpts};

/// Environment variable naming the directory of ImageNet encoder weights.
pub const WEIGHTS_DIR_ENV: &str = "LMBENCH_WEIGHTS_DIR";

const INPUT_CHANNELS: usize = 1;
const SIZE_MULTIPLE: usize = 32;
const DEEPLAB_OUTPUT_STRIDE: usize = 8;
const INPUT_MEAN: f64 = 0.449;
const INPUT_STD: f64 = 0.226;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "unet")]
    Unet,
    #[serde(rename = "unetpp")]
    UnetPlusPlus,
    #[serde(rename = "deeplabv3")]
    DeepLabV3,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Self::Unet, Self::UnetPlusPlus, Self::DeepLabV3];

    pub fn name(self) -> &'static str {
        match self {
            Self::Unet => "unet",
            Self::UnetPlusPlus => "unetpp",
            Self::DeepLabV3 => "deeplabv3",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Self::Unet => "U-Net",
            Self::UnetPlusPlus => "U-Net++",
            Self::DeepLabV3 => "DeepLabV3",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EncoderKind {
    #[serde(rename = "efficientnet-b7")]
    EfficientNetB7,
    #[serde(rename = "resnext101_32x8d")]
    ResNeXt101,
    #[serde(rename = "vgg19")]
    Vgg19,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [Self::EfficientNetB7, Self::ResNeXt101, Self::Vgg19];

    pub fn name(self) -> &'static str {
        match self {
            Self::EfficientNetB7 => "efficientnet-b7",
            Self::ResNeXt101 => "resnext101_32x8d",
            Self::Vgg19 => "vgg19",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Self::EfficientNetB7 => "EfficientNet-B7",
            Self::ResNeXt101 => "ResNeXt101",
            Self::Vgg19 => "VGG19",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown encoder `{s}`")))
    }
}

/// Where the initial weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pretrained {
    Imagenet,
    None,
    /// Every tensor except the output head is copied from the checkpoint.
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub encoder: EncoderKind,
    pub pretrained: Pretrained,
    pub out_channels: usize,
    /// Divides every channel width; 1 is the reference network. Decoder
    /// widths stay at 8 or more.
    #[serde(default = "one")]
    pub width_divisor: usize,
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn new(architecture: Architecture, encoder: EncoderKind, out_channels: usize) -> Self {
        Self {
            architecture,
            encoder,
            pretrained: Pretrained::Imagenet,
            out_channels,
            width_divisor: 1,
        }
    }

    pub fn with_pretrained(mut self, pretrained: Pretrained) -> Self {
        self.pretrained = pretrained;
        self
    }

    pub fn with_width_divisor(mut self, divisor: usize) -> Self {
        self.width_divisor = divisor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.architecture == Architecture::DeepLabV3 && self.encoder == EncoderKind::Vgg19 {
            return Err(Error::Capability(
                "deeplabv3 needs a dilatable encoder; vgg19 is not supported".into(),
            ));
        }
        if self.out_channels == 0 {
            return Err(Error::contract("out_channels must be positive"));
        }
        if !self.width_divisor.is_power_of_two() || self.width_divisor > 32 {
            return Err(Error::Config(format!(
                "width_divisor must be a power of two <= 32, got {}",
                self.width_divisor
            )));
        }
        if self.pretrained == Pretrained::Imagenet && self.width_divisor != 1 {
            return Err(Error::Capability(
                "imagenet weights exist only for width_divisor 1".into(),
            ));
        }
        Ok(())
    }

    /// Same network with the pretrained source dropped, for comparisons.
    pub(crate) fn same_shape(&self, other: &ModelSpec) -> bool {
        self.architecture == other.architecture
            && self.encoder == other.encoder
            && self.width_divisor == other.width_divisor
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} K={}", self.architecture, self.encoder, self.out_channels)?;
        if self.width_divisor != 1 {
            write!(f, " /{}", self.width_divisor)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub seed: u64,
    pub dtype: DType,
    pub device: Device,
    pub weights_dir: Option<PathBuf>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            dtype: DType::F32,
            device: Device::Cpu,
            weights_dir: std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from),
        }
    }
}

impl BuildOptions {
    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Imagenet,
    Scratch,
}

/// One completed training stage in a network's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub dataset: String,
    pub landmark_count: usize,
    pub run_id: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub origin: Origin,
    pub lineage: Vec<StageRecord>,
}

/// A built network together with its variables.
pub struct LandmarkNet {
    spec: ModelSpec,
    varmap: VarMap,
    encoder: Encoder,
    decoder: Decoder,
    head: Conv2d,
    device: Device,
    dtype: DType,
    seed: u64,
    provenance: Provenance,
}

impl fmt::Debug for LandmarkNet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LandmarkNet")
            .field("spec", &self.spec)
            .field("parameters", &self.parameter_count())
            .field("provenance", &self.provenance)
            .finish()
    }
}

impl LandmarkNet {
    /// Builds the network and loads its initial weights per `spec.pretrained`.
    pub fn build(spec: &ModelSpec, opts: &BuildOptions) -> Result<Self> {
        spec.validate()?;
        match &spec.pretrained {
            Pretrained::None => Self::skeleton(spec, opts, Origin::Scratch),
            Pretrained::Imagenet => {
                let net = Self::skeleton(spec, opts, Origin::Imagenet)?;
                net.load_imagenet(opts.weights_dir.as_deref())?;
                Ok(net)
            }
            Pretrained::Checkpoint(path) => {
                let ckpt = Checkpoint::load(path)?;
                if !ckpt.meta.spec.same_shape(spec) {
                    return Err(Error::Checkpoint {
                        path: path.clone(),
                        message: format!("holds {}, requested {}", ckpt.meta.spec, spec),
                    });
                }
                swap_head(&ckpt, spec.out_channels, opts)
            }
        }
    }

    fn skeleton(spec: &ModelSpec, opts: &BuildOptions, origin: Origin) -> Result<Self> {
        spec.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, opts.dtype, &opts.device);
        let d = spec.width_divisor;
        let dilated = spec.architecture == Architecture::DeepLabV3;
        let evb = vb.pp("encoder");
        let encoder = match spec.encoder {
            EncoderKind::Vgg19 => Encoder::Vgg19(Vgg19::new(INPUT_CHANNELS, d, evb)?),
            EncoderKind::ResNeXt101 => Encoder::ResNeXt(ResNeXt::new(INPUT_CHANNELS, d, dilated, evb)?),
            EncoderKind::EfficientNetB7 => {
                Encoder::EfficientNet(EfficientNet::new(INPUT_CHANNELS, d, dilated, evb)?)
            }
        };
        let channels = encoder.channels();
        let dvb = vb.pp("decoder");
        let (decoder, head) = match spec.architecture {
            Architecture::Unet => (
                Decoder::Unet(UnetDecoder::new(channels, d, dvb)?),
                conv(UnetDecoder::out_channels(d), spec.out_channels, ConvOpts::k(3).bias(), vb.pp("head"))?,
            ),
            Architecture::UnetPlusPlus => (
                Decoder::UnetPlusPlus(UnetPlusPlusDecoder::new(channels, d, dvb)?),
                conv(
                    UnetPlusPlusDecoder::out_channels(d),
                    spec.out_channels,
                    ConvOpts::k(3).bias(),
                    vb.pp("head"),
                )?,
            ),
            Architecture::DeepLabV3 => (
                Decoder::DeepLabV3(DeepLabV3Decoder::new(channels[4], d, dvb)?),
                conv(
                    DeepLabV3Decoder::out_channels(d),
                    spec.out_channels,
                    ConvOpts::k(1).bias(),
                    vb.pp("head"),
                )?,
            ),
        };
        init::reinit(&varmap, opts.seed, |_| true)?;
        Ok(Self {
            spec: spec.clone(),
            varmap,
            encoder,
            decoder,
            head,
            device: opts.device.clone(),
            dtype: opts.dtype,
            seed: opts.seed,
            provenance: Provenance {
                origin,
                lineage: Vec::new(),
            },
        })
    }

    fn load_imagenet(&self, dir: Option<&Path>) -> Result<()> {
        let name = self.spec.encoder.name();
        let dir = dir.ok_or_else(|| {
            Error::PretrainedUnavailable(format!("{name}: set {WEIGHTS_DIR_ENV} to the weights directory"))
        })?;
        let path = dir.join(format!("{name}.safetensors"));
        if !path.is_file() {
            return Err(Error::PretrainedUnavailable(format!("{} not found", path.display())));
        }
        let source = candle_core::safetensors::load(&path, &self.device)
            .map_err(|e| Error::PretrainedUnavailable(format!("{}: {e}", path.display())))?;
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        let mut names: Vec<&String> = data.keys().filter(|k| k.starts_with("encoder.")).collect();
        names.sort();
        for full in names {
            let key = &full["encoder.".len()..];
            let var = &data[full];
            let mut t = source.get(key).cloned().ok_or_else(|| {
                Error::PretrainedUnavailable(format!("{}: missing tensor `{key}`", path.display()))
            })?;
            // first convolution: fold RGB filters into one grayscale channel
            if t.rank() == 4 && t.dim(1)? == 3 && var.dim(1)? == 1 {
                t = t.sum_keepdim(1)?;
            }
            if t.dims() != var.dims() {
                return Err(Error::PretrainedUnavailable(format!(
                    "{}: `{key}` has shape {:?}, expected {:?}",
                    path.display(),
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Rebuilds a saved network exactly.
    pub fn from_checkpoint(ckpt: &Checkpoint, opts: &BuildOptions) -> Result<Self> {
        let mut spec = ckpt.meta.spec.clone();
        spec.pretrained = Pretrained::None;
        let mut net = Self::skeleton(&spec, &opts.clone().seed(ckpt.meta.seed), ckpt.meta.provenance.origin)?;
        net.spec = ckpt.meta.spec.clone();
        net.provenance = ckpt.meta.provenance.clone();
        let path = ckpt.source().map(Path::to_path_buf).unwrap_or_default();
        net.copy_from(ckpt.tensors(), |_| true).map_err(|message| Error::Checkpoint {
            path,
            message,
        })?;
        Ok(net)
    }

    pub fn load(path: &Path, opts: &BuildOptions) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, opts)
    }

    fn copy_from(
        &self,
        tensors: &HashMap<String, Tensor>,
        filter: impl Fn(&str) -> bool,
    ) -> std::result::Result<(), String> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        for (name, var) in data.iter().filter(|(k, _)| filter(k)) {
            let t = tensors.get(name).ok_or_else(|| format!("missing tensor `{name}`"))?;
            if t.dims() != var.dims() {
                return Err(format!("`{name}` has shape {:?}, expected {:?}", t.dims(), var.dims()));
            }
            let t = t
                .to_device(&self.device)
                .and_then(|t| t.to_dtype(self.dtype))
                .map_err(|e| e.to_string())?;
            var.set(&t).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    /// Snapshot of this network as a checkpoint.
    pub fn to_checkpoint(
        &self,
        config_hash: Option<String>,
        metrics_at_save: BTreeMap<String, f64>,
    ) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            spec: self.spec.clone(),
            provenance: self.provenance.clone(),
            config_hash,
            seed: self.seed,
            metrics_at_save,
        };
        Ok(Checkpoint::new(meta, self.snapshot()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(None, BTreeMap::new())?.save(path)
    }

    /// `(N, C, H, W)` input to `(N, K, H, W)` raw heatmap scores. Sizes need not be
    /// multiples of 32; the input is zero padded and the output cropped.
    /// Three-channel input is averaged to grayscale first.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let x = match c {
            1 => x.clone(),
            3 => x.mean_keepdim(1)?,
            _ => return Err(Error::contract(format!("expected 1 or 3 input channels, got {c}"))),
        };
        let ph = h.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
        let pw = w.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
        let x = x.to_dtype(self.dtype)?.affine(1.0 / INPUT_STD, -INPUT_MEAN / INPUT_STD)?;
        let x = x.pad_with_zeros(2, 0, ph - h)?.pad_with_zeros(3, 0, pw - w)?;
        let feats = self.encoder.forward_t(&x, train)?;
        let y = self.decoder.forward_t(&feats, train)?;
        let mut y = self.head.forward(&y)?;
        if self.spec.architecture == Architecture::DeepLabV3 {
            let (_, _, yh, yw) = y.dims4()?;
            y = resize_bilinear(&y, yh * DEEPLAB_OUTPUT_STRIDE, yw * DEEPLAB_OUTPUT_STRIDE)?;
        }
        Ok(y.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }

    /// Stacks rasters of equal size into a `(N, 1, H, W)` tensor.
    pub fn input_tensor(&self, images: &[&Raster]) -> Result<Tensor> {
        let first = images.first().ok_or(Error::EmptyInput("images"))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(images.len() * h * w);
        for im in images {
            if im.space() != first.space() {
                return Err(Error::contract(format!(
                    "batch mixes {} and {}",
                    first.space(),
                    im.space()
                )));
            }
            data.extend_from_slice(im.data());
        }
        Ok(Tensor::from_vec(data, (images.len(), 1, h, w), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Heatmaps for one image in evaluation mode, on the image's grid.
    pub fn predict_heatmaps(&self, image: &Raster) -> Result<HeatmapStack> {
        let x = self.input_tensor(&[image])?;
        let y = self.forward_t(&x, false)?;
        HeatmapStack::from_tensor(&y.squeeze(0)?)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn origin(&self) -> Origin {
        self.provenance.origin
    }

    pub fn lineage(&self) -> &[StageRecord] {
        &self.provenance.lineage
    }

    pub fn push_stage(&mut self, stage: StageRecord) {
        self.provenance.lineage.push(stage);
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Parameters updated by the optimiser (batch-norm statistics excluded).
    pub fn trainable_vars(&self) -> Vec<Var> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        let mut named: Vec<(&String, &Var)> = data
            .iter()
            .filter(|(k, _)| !k.ends_with(".running_mean") && !k.ends_with(".running_var"))
            .collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        named.into_iter().map(|(_, v)| v.clone()).collect()
    }

    /// Trainable variables whose name passes `filter`.
    pub fn named_vars(&self, filter: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        let mut named: Vec<(String, Var)> = data
            .iter()
            .filter(|(k, _)| filter(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        named.sort_by(|a, b| a.0.cmp(&b.0));
        named
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable_vars().iter().map(|v| v.elem_count()).sum()
    }

    /// Deep copy of every variable, keyed by name.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        data.iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &HashMap<String, Tensor>) -> Result<()> {
        self.copy_from(snapshot, |_| true).map_err(Error::Contract)
    }
}

/// Whether `name` belongs to the final output layer.
pub fn is_head_tensor(name: &str) -> bool {
    init::is_head(name)
}

/// New network with `out_channels` outputs: every tensor except the final
/// layer comes from `ckpt`, and the final layer is freshly initialised from
/// `opts.seed`.
pub fn swap_head(ckpt: &Checkpoint, out_channels: usize, opts: &BuildOptions) -> Result<LandmarkNet> {
    let mut spec = ckpt.meta.spec.clone();
    spec.out_channels = out_channels;
    spec.pretrained = Pretrained::None;
    let mut net = LandmarkNet::skeleton(&spec, opts, ckpt.meta.provenance.origin)?;
    let path = ckpt.source().map(Path::to_path_buf).unwrap_or_default();
    net.copy_from(ckpt.tensors(), |k| !init::is_head(k))
        .map_err(|message| Error::Checkpoint {
            path: path.clone(),
            message,
        })?;
    net.spec.pretrained = match ckpt.source() {
        Some(p) => Pretrained::Checkpoint(p.to_path_buf()),
        None => ckpt.meta.spec.pretrained.clone(),
    };
    net.provenance = ckpt.meta.provenance.clone();
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch: Architecture, enc: EncoderKind, k: usize) -> ModelSpec {
        ModelSpec::new(arch, enc, k)
            .with_pretrained(Pretrained::None)
            .with_width_divisor(32)
    }

    #[test]
    fn deeplab_with_vgg_is_rejected() {
        let spec = tiny(Architecture::DeepLabV3, EncoderKind::Vgg19, 3);
        let err = LandmarkNet::build(&spec, &BuildOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Capability(_)), "{err}");
    }

    #[test]
    fn imagenet_without_weights_fails_loudly() {
        let spec = ModelSpec::new(Architecture::Unet, EncoderKind::Vgg19, 3);
        let opts = BuildOptions {
            weights_dir: Some(PathBuf::from("/nonexistent")),
            ..Default::default()
        };
        let err = LandmarkNet::build(&spec, &opts).unwrap_err();
        assert!(matches!(err, Error::PretrainedUnavailable(_)), "{err}");
    }

    #[test]
    fn every_combination_preserves_resolution() {
        for arch in Architecture::ALL {
            for enc in EncoderKind::ALL {
                let spec = tiny(arch, enc, 3);
                if spec.validate().is_err() {
                    continue;
                }
                let net = LandmarkNet::build(&spec, &BuildOptions::default()).unwrap();
                let x = Tensor::zeros((1, 1, 80, 46), DType::F32, &Device::Cpu).unwrap();
                let y = net.forward_t(&x, false).unwrap();
                assert_eq!(y.dims(), &[1, 3, 80, 46], "{spec}");
                let rgb = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
                assert_eq!(net.forward_t(&rgb, false).unwrap().dims(), &[2, 3, 64, 64]);
            }
        }
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let spec = tiny(Architecture::Unet, EncoderKind::ResNeXt101, 2);
        let a = LandmarkNet::build(&spec, &BuildOptions::default().seed(5)).unwrap();
        let b = LandmarkNet::build(&spec, &BuildOptions::default().seed(5)).unwrap();
        let c = LandmarkNet::build(&spec, &BuildOptions::default().seed(6)).unwrap();
        let (sa, sb, sc) = (a.snapshot().unwrap(), b.snapshot().unwrap(), c.snapshot().unwrap());
        let key = "encoder.conv1.weight";
        let v = |s: &HashMap<String, Tensor>| s[key].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v(&sa), v(&sb));
        assert_ne!(v(&sa), v(&sc));
    }
}
