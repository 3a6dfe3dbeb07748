use fcan::checkpoint::{self, MANIFEST};
use fcan::fct::{self, Dtype};
use fcan::netpbm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, load_image, load_labels, save_image, save_labels};
use fcan_core::aan::{DomainStyle, GramMatrix};
use fcan_core::backbone::{BackboneConfig, Layer, MiniFcn};
use fcan_core::data::{LabelMap, IGNORE};
use fcan_core::ran::{Discriminator, DiscriminatorConfig};
use fcan_core::Tensor;
use proptest::prelude::*;

#[test]
fn hand_assembled_ppm_decodes() {
    let mut bytes = b"P6\n# two by two\n2 2\n255\n".to_vec();
    bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153]);
    let img = decode_ppm(&bytes).unwrap();
    assert_eq!(img.shape(), &[3, 2, 2]);
    // Planar layout: R plane, then G, then B.
    let want = [
        1.0, 0.0, 0.0, 0.2, //
        0.0, 1.0, 0.0, 0.4, //
        0.0, 0.0, 1.0, 0.6,
    ];
    for (a, b) in img.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(
        encode_ppm(&img).unwrap(),
        b"P6\n2 2\n255\n\xff\x00\x00\x00\xff\x00\x00\x00\xff\x33\x66\x99"
    );
}

#[test]
fn pgm_255_is_ignore() {
    let labels = decode_pgm(b"P5 3 1 255 \x00\x04\xff").unwrap();
    assert_eq!(labels.data(), &[0, 4, IGNORE]);
}

#[test]
fn malformed_headers_are_rejected() {
    assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
    assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
    assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
    assert!(decode_pgm(b"P5\n0 2\n255\n").is_err());
    assert!(decode_pgm(b"P5\n1 1\n255\n\x00\x00").is_err());
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::from_fn([3, 3, 5], |i| (i % 256) as f64 / 255.0);
    save_image(&dir.path().join("a.ppm"), &img).unwrap();
    assert_eq!(load_image(&dir.path().join("a.ppm")).unwrap(), img);
    let lbl = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, IGNORE]).unwrap();
    save_labels(&dir.path().join("a.pgm"), &lbl).unwrap();
    assert_eq!(load_labels(&dir.path().join("a.pgm")).unwrap(), lbl);
    assert!(load_image(&dir.path().join("missing.ppm")).is_err());
}

#[test]
fn fct_header_and_dtypes() {
    let t = Tensor::new([2, 3], vec![0.1, -2.5, 3.0, 1e-300, f64::MAX, 0.0]).unwrap();
    let bytes = fct::encode(&t, Dtype::F64);
    assert_eq!(&bytes[..4], b"FCT1");
    assert_eq!(bytes[4], 1);
    assert_eq!(bytes[5], 2);
    assert_eq!(&bytes[6..14], &2u64.to_le_bytes());
    assert_eq!(bytes.len(), 6 + 16 + 48);
    assert_eq!(fct::decode(&bytes).unwrap(), (t.clone(), Dtype::F64));

    let small = Tensor::new([3], vec![0.1, -2.5, 3.0]).unwrap();
    let (back, dtype) = fct::decode(&fct::encode(&small, Dtype::F32)).unwrap();
    assert_eq!(dtype, Dtype::F32);
    for (a, b) in back.data().iter().zip(small.data()) {
        assert_eq!(*a, f64::from(*b as f32));
    }
    let scalar = Tensor::new(Vec::<usize>::new(), vec![7.0]).unwrap();
    assert_eq!(fct::decode(&fct::encode(&scalar, Dtype::F64)).unwrap().0, scalar);
}

fn tiny_backbone() -> MiniFcn {
    let mut m = MiniFcn::new(BackboneConfig {
        channels: [4, 4, 6, 6, 8],
        num_classes: 3,
        init_seed: 5,
        ..BackboneConfig::default()
    })
    .unwrap();
    for (i, s) in m.stages_mut().iter_mut().enumerate() {
        s.stats.mean.iter_mut().for_each(|v| *v = 0.1 * i as f64 + 0.01);
        s.stats.var.iter_mut().for_each(|v| *v = 1.0 + 0.3 * i as f64);
    }
    m
}

#[test]
fn backbone_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_backbone();
    checkpoint::save_backbone(dir.path(), &model, Dtype::F64).unwrap();
    let back = checkpoint::load_backbone(dir.path()).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.params(), model.params());
    for (a, b) in back.stages().iter().zip(model.stages()) {
        assert_eq!(a.stats, b.stats);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(manifest["format"], checkpoint::FORMAT);
    assert_eq!(manifest["kind"], "backbone");

    let f32_dir = tempfile::tempdir().unwrap();
    checkpoint::save_backbone(f32_dir.path(), &model, Dtype::F32).unwrap();
    let lossy = checkpoint::load_backbone(f32_dir.path()).unwrap();
    for (a, b) in lossy.params().iter().zip(model.params()) {
        assert!(a.max_abs_diff(b) < 1e-6);
    }
}

#[test]
fn discriminator_and_style_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let disc = Discriminator::new(DiscriminatorConfig {
        in_channels: 8,
        branch_channels: 3,
        rates: vec![1, 3],
        init_seed: 2,
        ..DiscriminatorConfig::default()
    })
    .unwrap();
    checkpoint::save_discriminator(&dir.path().join("d"), &disc, Dtype::F64).unwrap();
    assert_eq!(checkpoint::load_discriminator(&dir.path().join("d")).unwrap(), disc);
    assert!(checkpoint::load_backbone(&dir.path().join("d")).is_err());

    let style = DomainStyle::new(
        vec![
            (Layer::C1, GramMatrix::new(2, vec![1.0, 0.5, 0.5, 2.0], 64.0).unwrap()),
            (Layer::C3, GramMatrix::new(1, vec![0.25], 16.0).unwrap()),
        ],
        4,
    )
    .unwrap();
    checkpoint::save_style(&dir.path().join("s"), &style, Dtype::F64).unwrap();
    assert_eq!(checkpoint::load_style(&dir.path().join("s")).unwrap(), style);
}

#[test]
fn manifest_cannot_escape_its_directory() {
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save_backbone(dir.path(), &tiny_backbone(), Dtype::F64).unwrap();
    let path = dir.path().join(MANIFEST);
    let text = std::fs::read_to_string(&path).unwrap();
    let first = text.find("\"file\": \"").unwrap() + 9;
    let end = first + text[first..].find('"').unwrap();
    let tampered = format!("{}../{}{}", &text[..first], &text[first..end], &text[end..]);
    std::fs::write(&path, tampered).unwrap();
    assert!(checkpoint::load_backbone(dir.path()).is_err());
}

fn quantized_image() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<u8>(), 3 * h * w)
            .prop_map(move |v| Tensor::new([3, h, w], v.into_iter().map(|b| b as f64 / 255.0).collect()).unwrap())
    })
}

proptest! {
    #[test]
    fn ppm_round_trip(img in quantized_image()) {
        let bytes = encode_ppm(&img).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(encode_ppm(&back).unwrap(), bytes);
    }

    #[test]
    fn pgm_round_trip(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let data: Vec<u8> = (0..h * w).map(|i| (seed.rotate_left(i as u32) % 7) as u8).map(|v| if v == 6 { IGNORE } else { v }).collect();
        let lbl = LabelMap::new(h, w, data).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&lbl)).unwrap(), lbl);
    }

    #[test]
    fn fct_round_trip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
        let t = Tensor::new(shape, data).unwrap();
        prop_assert_eq!(fct::decode(&fct::encode(&t, Dtype::F64)).unwrap().0, t.clone());
        let (f, _) = fct::decode(&fct::encode(&t, Dtype::F32)).unwrap();
        for (a, b) in f.data().iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits(), f64::from(*b as f32).to_bits());
        }
    }

    #[test]
    fn truncated_fct_is_rejected(cut in 1usize..30) {
        let t = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = fct::encode(&t, Dtype::F64);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(fct::decode(&bytes[..keep]).is_err());
    }
}
