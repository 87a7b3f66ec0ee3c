use dada_core::model::{discriminator_forward, init_discriminator, init_model, DepthMode, DiscriminatorConfig, ModelConfig};
use dada_core::{Error, ModelParams, Tensor};
use proptest::prelude::*;

fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    Tensor::from_fn(&[3, h, w], |i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 999.0)
}

fn small_config() -> ModelConfig {
    ModelConfig {
        input_size: (16, 16),
        ..ModelConfig::default()
    }
}

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = ModelConfig::default();
    let a = init_model::<f32>(&cfg, 11).unwrap();
    let b = init_model::<f32>(&cfg, 11).unwrap();
    let c = init_model::<f32>(&cfg, 12).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.store.fingerprint(), b.store.fingerprint());
    assert!(a.store.iter().zip(c.store.iter()).any(|((_, x), (_, y))| x != y));
    assert!(a.store.all_finite());
}

#[test]
fn depth_encoder_divides_channels_by_four() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.depth_widths(), [64, 16, 4, 1]);
    let p = init_model::<f64>(&cfg, 0).unwrap();
    let shape = |n: &str| p.store.get(n).unwrap().shape().to_vec();
    assert_eq!(shape("depth.enc1.weight"), vec![16, 64, 1, 1]);
    assert_eq!(shape("depth.enc2.weight"), vec![4, 16, 3, 3]);
    assert_eq!(shape("depth.enc3.weight"), vec![1, 4, 1, 1]);
    assert_eq!(shape("depth.proj.weight"), vec![1, 1, 1, 1]);
    assert_eq!(shape("depth.dec.weight"), vec![64, 1, 1, 1]);

    let wide = ModelConfig {
        backbone_channels: vec![16, 32, 64, 128],
        ..ModelConfig::default()
    };
    assert_eq!(wide.depth_widths(), [128, 32, 8, 2]);
    let bad = ModelConfig {
        backbone_channels: vec![16, 32, 64, 96],
        ..ModelConfig::default()
    };
    assert!(matches!(init_model::<f32>(&bad, 0), Err(Error::Config(_))));
}

#[test]
fn forward_shapes_and_normalization() {
    let p = init_model::<f32>(&ModelConfig::default(), 1).unwrap();
    let out = p.forward(&image(64, 64, 1)).unwrap();
    assert_eq!(out.seg.0.shape(), &[7, 64, 64]);
    assert!(out.seg.max_normalization_error() <= 1e-6);
    assert!(out.seg.0.data().iter().all(|&v| v >= 0.0));
    let z = out.depth.unwrap();
    assert_eq!(z.0.shape(), &[1, 64, 64]);
    assert!(z.0.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    // initial inverse depth sits near mid-range
    let mean = z.0.data().iter().sum::<f32>() / z.0.len() as f32;
    assert!((mean - 0.5).abs() < 0.1, "mean Z {mean}");
    assert_eq!(out.backbone_features.shape(), &[64, 8, 8]);
}

#[test]
fn wrong_input_shape_reports_expected_and_actual() {
    let p = init_model::<f32>(&ModelConfig::default(), 1).unwrap();
    match p.forward(&image(32, 64, 0)) {
        Err(Error::Shape { expected, actual, .. }) => {
            assert_eq!(expected, vec![3, 64, 64]);
            assert_eq!(actual, vec![3, 32, 64]);
        }
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn unit_fusion_hook_leaves_backbone_features_unchanged() {
    let p = init_model::<f32>(&ModelConfig::default(), 2).unwrap();
    let out = p.forward_with(&image(64, 64, 2), DepthMode::UnitFusion).unwrap();
    assert_eq!(out.fused_features, out.backbone_features);
    assert!(out.depth.is_some());
}

/// Zero decoder weights with unit bias make the branch an exact identity.
fn with_identity_decoder(p: &ModelParams<f32>) -> ModelParams<f32> {
    let mut q = p.clone();
    let w = q.store.get_mut("depth.dec.weight").unwrap();
    w.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let b = q.store.get_mut("depth.dec.bias").unwrap();
    b.data_mut().iter_mut().for_each(|v| *v = 1.0);
    q
}

#[test]
fn identity_decoder_reproduces_depth_free_network_bit_for_bit() {
    let p = init_model::<f32>(&ModelConfig::default(), 3).unwrap();
    let q = with_identity_decoder(&p);
    for seed in 0..3 {
        let x = image(64, 64, seed);
        let active = q.forward_with(&x, DepthMode::Active).unwrap();
        let bypass = p.forward_with(&x, DepthMode::Bypass).unwrap();
        assert_eq!(active.seg.0.data(), bypass.seg.0.data());
        assert_eq!(active.fused_features, bypass.backbone_features);
    }
}

#[test]
fn discriminator_output_geometry() {
    let d = init_discriminator::<f32>(&DiscriminatorConfig::new(7), 4).unwrap();
    let x = Tensor::full(&[7, 64, 64], 0.2f32);
    let s = discriminator_forward(&d, &x).unwrap();
    assert_eq!(s.shape(), &[1, 4, 4]);
    assert_eq!(DiscriminatorConfig::new(7).output_size(64, 64), Some((4, 4)));
    assert_eq!(
        d.store.get("disc.0.weight").unwrap().shape(),
        &[64, 7, 4, 4],
        "widths 64 -> 128 -> 256 -> 1"
    );
    assert_eq!(d.store.get("disc.2.weight").unwrap().shape(), &[256, 128, 4, 4]);
    assert_eq!(d.store.get("disc.head.weight").unwrap().shape(), &[1, 256, 4, 4]);

    let z = d.zeroed();
    assert!(discriminator_forward(&z, &x).unwrap().data().iter().all(|&v| v == 0.0));

    let depth_d = init_discriminator::<f32>(&DiscriminatorConfig::new(1), 4).unwrap();
    assert!(matches!(discriminator_forward(&depth_d, &x), Err(Error::Shape { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn soft_segmentation_is_normalized_for_any_input_and_weights(
        seed in 0u64..1000,
        scale in 0.1f64..8.0,
        lo in -4.0f64..0.0,
        hi in 0.0f64..4.0,
    ) {
        let cfg = small_config();
        let mut p = init_model::<f64>(&cfg, seed).unwrap();
        for (_, t) in p.store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let x = Tensor::from_fn(&[3, 16, 16], |i| lo + (hi - lo) * ((i as u64 * 40503 + seed) % 997) as f64 / 996.0);
        for mode in [DepthMode::Active, DepthMode::Bypass, DepthMode::UnitFusion] {
            let out = p.forward_with(&x, mode).unwrap();
            prop_assert!(out.seg.max_normalization_error() <= 1e-6);
            prop_assert!(out.seg.0.data().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn outputs_are_finite_on_unit_range_inputs(seed in 0u64..1000) {
        let p = init_model::<f32>(&small_config(), seed).unwrap();
        let x = image(16, 16, seed);
        let out = p.forward(&x).unwrap();
        prop_assert!(out.seg.0.all_finite());
        prop_assert!(out.depth.unwrap().0.all_finite());
        prop_assert!(out.fused_features.all_finite());
    }
}
