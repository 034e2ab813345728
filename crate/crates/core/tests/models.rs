use std::fs;

use lmbench_core::models::{is_head_tensor, swap_head};
use lmbench_core::*;

fn space(w: u32, h: u32) -> ImageSpace {
    ImageSpace::new(w, h).unwrap()
}

fn gradient_image(s: ImageSpace) -> Raster {
    let w = s.width() as usize;
    let data = (0..s.pixels()).map(|i| ((i % w) as f32 / w as f32) * 0.8 + 0.1).collect();
    Raster::new(s, data).unwrap()
}

fn scratch(arch: Architecture, enc: EncoderKind, k: usize, div: usize) -> ModelSpec {
    ModelSpec::new(arch, enc, k)
        .with_pretrained(Pretrained::None)
        .with_width_divisor(div)
}

fn flat(t: &candle_core::Tensor) -> Vec<f32> {
    t.to_dtype(candle_core::DType::F32)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

#[test]
fn hand_sized_unetpp_vgg_emits_one_map_per_landmark() {
    let spec = scratch(Architecture::UnetPlusPlus, EncoderKind::Vgg19, 37, 8);
    let net = LandmarkNet::build(&spec, &BuildOptions::default()).unwrap();
    let stack = net.predict_heatmaps(&gradient_image(space(512, 512))).unwrap();
    assert_eq!(stack.channels(), 37);
    assert_eq!(stack.space(), space(512, 512));
}

#[test]
#[ignore = "full-width VGG19 forward at 512x512 takes minutes on one CPU core"]
fn full_width_unetpp_vgg_output_shape() {
    let spec = scratch(Architecture::UnetPlusPlus, EncoderKind::Vgg19, 37, 1);
    let net = LandmarkNet::build(&spec, &BuildOptions::default()).unwrap();
    let stack = net.predict_heatmaps(&gradient_image(space(512, 512))).unwrap();
    assert_eq!((stack.channels(), stack.space()), (37, space(512, 512)));
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let spec = scratch(Architecture::Unet, EncoderKind::ResNeXt101, 2, 16);
    let net = LandmarkNet::build(&spec, &BuildOptions::default().seed(4)).unwrap();
    let path = dir.path().join("net.ckpt");
    net.save(&path).unwrap();
    let loaded = LandmarkNet::load(&path, &BuildOptions::default()).unwrap();
    assert_eq!(loaded.spec(), net.spec());
    assert_eq!(loaded.seed(), 4);
    let image = gradient_image(space(64, 48));
    let a = net.predict_heatmaps(&image).unwrap();
    let b = loaded.predict_heatmaps(&image).unwrap();
    assert_eq!(a.values(), b.values());
}

#[test]
fn evaluation_is_deterministic() {
    let spec = scratch(Architecture::Unet, EncoderKind::ResNeXt101, 1, 16);
    let net = LandmarkNet::build(&spec, &BuildOptions::default()).unwrap();
    let image = gradient_image(space(64, 64));
    let a = net.predict_heatmaps(&image).unwrap();
    let b = net.predict_heatmaps(&image).unwrap();
    assert_eq!(a.values(), b.values());
}

#[test]
fn corrupt_or_missing_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.ckpt");
    assert!(matches!(Checkpoint::load(&missing), Err(Error::Checkpoint { .. })));

    let spec = scratch(Architecture::Unet, EncoderKind::Vgg19, 2, 32);
    let net = LandmarkNet::build(&spec, &BuildOptions::default()).unwrap();
    let path = dir.path().join("net.ckpt");
    net.save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint { .. })));
}

#[test]
fn head_swap_keeps_body_bytes_and_reseeds_head() {
    let dir = tempfile::tempdir().unwrap();
    let spec = scratch(Architecture::UnetPlusPlus, EncoderKind::Vgg19, 4, 32);
    let net = LandmarkNet::build(&spec, &BuildOptions::default().seed(1)).unwrap();
    let path = dir.path().join("stage.ckpt");
    net.save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();

    for k in [4, 7] {
        let swapped = swap_head(&ckpt, k, &BuildOptions::default().seed(2)).unwrap();
        assert_eq!(swapped.spec().out_channels, k);
        assert_eq!(swapped.spec().pretrained, Pretrained::Checkpoint(path.clone()));
        let after = swapped.snapshot().unwrap();
        let mut head_changed = false;
        for (name, before) in ckpt.tensors() {
            let now = &after[name];
            if is_head_tensor(name) {
                head_changed |= now.dims() != before.dims() || flat(now) != flat(before);
            } else {
                assert_eq!(flat(now), flat(before), "{name} changed across the head swap");
            }
        }
        assert!(head_changed, "head was not reinitialised for k = {k}");
    }
}

#[test]
fn same_seed_builds_identical_networks() {
    let spec = scratch(Architecture::DeepLabV3, EncoderKind::EfficientNetB7, 3, 16);
    let a = LandmarkNet::build(&spec, &BuildOptions::default().seed(9)).unwrap();
    let b = LandmarkNet::build(&spec, &BuildOptions::default().seed(9)).unwrap();
    let c = LandmarkNet::build(&spec, &BuildOptions::default().seed(10)).unwrap();
    let (sa, sb, sc) = (a.snapshot().unwrap(), b.snapshot().unwrap(), c.snapshot().unwrap());
    let mut differs = false;
    for (name, t) in &sa {
        assert_eq!(flat(t), flat(&sb[name]), "{name}");
        differs |= flat(t) != flat(&sc[name]);
    }
    assert!(differs);
}

#[test]
fn non_square_inputs_keep_their_size() {
    for arch in Architecture::ALL {
        let spec = scratch(arch, EncoderKind::ResNeXt101, 2, 32);
        let net = LandmarkNet::build(&spec, &BuildOptions::default()).unwrap();
        let stack = net.predict_heatmaps(&gradient_image(space(72, 40))).unwrap();
        assert_eq!(stack.space(), space(72, 40), "{arch}");
    }
}
