//! Algebraic and invariance properties checked over random inputs.

mod common;

use common::random_image;
use proptest::prelude::*;
use skyclear::autograd::{Tensor, Var};
use skyclear::data::{apply_fog, degrade, depth_ramp, DegradationKind, DegradationSpec};
use skyclear::gradcheck::uniform;
use skyclear::image::Image;
use skyclear::metrics::{psnr, ssim};
use skyclear::params::{Init, ParamStore};
use skyclear::prompt::{build_cyclic_c2p, build_initial_c2p, build_visual_prompt, PromptIteration, PromptTokens, TokenRole};
use skyclear::prompt_block::{cross_attend, AttentionParams, ScaleMode};
use skyclear::residual::{extract_residual, modulate};

fn kind() -> impl Strategy<Value = DegradationKind> {
    prop::sample::select(DegradationKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn residual_ignores_achromatic_shifts(seed in 0u64..10_000, shift in 0.0f32..0.5) {
        let img = random_image(6, 5, seed).map(|v| v * 0.5);
        let shifted = img.map(|v| v + shift);
        let (a, b) = (extract_residual(&img), extract_residual(&shifted));
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn residual_scales_linearly(seed in 0u64..10_000, k in 0.0f32..1.0) {
        let img = random_image(6, 5, seed);
        let (a, b) = (extract_residual(&img), extract_residual(&img.map(|v| v * k)));
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((k * x - y).abs() < 1e-6);
            prop_assert!((0.0..=1.0).contains(x));
        }
    }

    #[test]
    fn gray_images_have_zero_residual(g in 0.0f32..=1.0) {
        let img = Image::from_fn(3, 4, |_, _| [g, g, g]);
        prop_assert!(extract_residual(&img).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn modulation_is_linear_in_features(seed in 0u64..10_000) {
        let shape = [1, 2, 3, 3];
        let c = |s| Var::constant(uniform(&shape, -1.0, 1.0, s));
        let (x1, x2, alpha) = (c(seed), c(seed + 1), c(seed + 2));
        let zero = Var::constant(Tensor::<f64>::zeros(&shape));
        let lhs = modulate(&x1.add(&x2), &alpha, &zero).unwrap();
        let rhs = modulate(&x1, &alpha, &zero).unwrap().add(&modulate(&x2, &alpha, &zero).unwrap());
        for (a, b) in lhs.value().data().iter().zip(rhs.value().data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let ones = Var::constant(Tensor::<f64>::from_vec(&shape, vec![1.0; 18]));
        let same = modulate(&x1, &ones, &zero).unwrap();
        prop_assert_eq!(same.value().data(), x1.value().data());
    }

    #[test]
    fn fog_moves_monotonically_toward_airlight(seed in 0u64..10_000, b1 in 0.0f64..3.0, db in 0.0f64..3.0, a in 0.5f32..1.0) {
        let img = random_image(5, 4, seed);
        let depth = depth_ramp(5, 4);
        let airlight = [a, a, a];
        let thin = apply_fog(&img, b1, airlight, &depth).unwrap();
        let thick = apply_fog(&img, b1 + db, airlight, &depth).unwrap();
        for (t1, t2) in thin.planar().iter().zip(thick.planar()) {
            prop_assert!((t2 - a).abs() <= (t1 - a).abs() + 1e-6);
        }
    }

    #[test]
    fn metrics_are_symmetric(seed in 0u64..10_000) {
        let a = random_image(12, 13, seed);
        let b = random_image(12, 13, seed + 1);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prompt_shapes_follow_the_token_layout(b in 1usize..4, n in 1usize..9, d in 1usize..7, seed in 0u64..1000) {
        let v = |shape: &[usize], s| Var::constant(uniform(shape, -1.0, 1.0, s));
        let pk = v(&[b, 1, d], seed);
        let pt = v(&[b, 1, d], seed + 1);
        let pw = v(&[b, 1, d], seed + 2);
        let pv = build_visual_prompt(&pk, &v(&[n, d], seed + 3)).unwrap();
        prop_assert_eq!(pv.shape(), &[b, n, d]);

        let initial = build_initial_c2p(Some(&pv), Some(&pt)).unwrap();
        prop_assert_eq!(initial.tokens().shape(), &[b, n + 1, d]);
        prop_assert_eq!(initial.roles().iter().filter(|r| **r == TokenRole::Textual).count(), 1);
        let text_row = initial.textual().unwrap();
        prop_assert_eq!(text_row.value().data(), pt.value().data());
        prop_assert_eq!(build_initial_c2p(Some(&pv), None).unwrap().len(), n);

        let cyclic = build_cyclic_c2p(Some(&pw), Some(&pt)).unwrap();
        prop_assert_eq!(cyclic.tokens().shape(), &[b, 2, d]);
        prop_assert_eq!(cyclic.roles(), &[TokenRole::WeatherFree, TokenRole::Textual]);
        let reused = cyclic.row(1);
        prop_assert_eq!(reused.value().data(), pt.value().data());
        prop_assert_eq!(build_cyclic_c2p(Some(&pw), None).unwrap().len(), 1);

        // The refreshed prompt drops every visual row and keeps the textual one.
        let rows = |t: &PromptTokens<f64>| -> Vec<Vec<f64>> { (0..t.len()).map(|m| t.row(m).value().data().to_vec()).collect() };
        let (before, after) = (rows(&initial), rows(&cyclic));
        for (m, role) in initial.roles().iter().enumerate() {
            let matches = after.iter().filter(|r| **r == before[m]).count();
            prop_assert_eq!(matches, usize::from(*role == TokenRole::Textual));
        }
    }

    #[test]
    fn attention_ignores_token_order(seed in 0u64..1000, m in 1usize..6, rot in 0usize..6) {
        let (c, d) = (3, 4);
        let mut store = ParamStore::<f64>::default();
        let attn = AttentionParams::new(&mut Init::new(&mut store, seed), "attn", c, d, ScaleMode::Sqrt);
        let p = store.bind(false);
        let x = Var::constant(uniform(&[2, c, 2, 3], -1.0, 1.0, seed + 1));
        let tokens = uniform(&[2, m, d], -1.0, 1.0, seed + 2);
        let rot = rot % m;
        let mut rotated = tokens.data().to_vec();
        for bi in 0..2 {
            for t in 0..m {
                let src = (t + rot) % m;
                rotated[(bi * m + t) * d..(bi * m + t + 1) * d].copy_from_slice(&tokens.data()[(bi * m + src) * d..(bi * m + src + 1) * d]);
            }
        }
        let roles = vec![TokenRole::Visual; m];
        let run = |t: Tensor<f64>| {
            let pt = PromptTokens::new(Var::constant(t), roles.clone(), PromptIteration::Initial).unwrap();
            cross_attend(&p, &attn, &x, &pt).unwrap().output.value().clone()
        };
        let a = run(tokens.clone());
        let b = run(Tensor::from_vec(&[2, m, d], rotated));
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn synthesis_stays_in_range_and_is_deterministic(k in kind(), intensity in 0.0f64..=1.0, seed in 0u64..10_000) {
        let img = random_image(20, 24, seed);
        let spec = DegradationSpec::new(k, intensity, seed).unwrap();
        let out = degrade(&img, &spec).unwrap();
        prop_assert!(out.in_unit_range());
        prop_assert_eq!(&out, &degrade(&img, &DegradationSpec::new(k, intensity, seed).unwrap()).unwrap());
    }

    #[test]
    fn zero_intensity_synthesis_is_identity(k in kind(), seed in 0u64..10_000) {
        let img = random_image(16, 16, seed);
        prop_assert_eq!(degrade(&img, &DegradationSpec::new(k, 0.0, seed).unwrap()).unwrap(), img);
    }

    #[test]
    fn out_of_range_intensity_is_rejected(k in kind(), intensity in prop_oneof![-10.0f64..-1e-9, 1.0 + 1e-9..10.0]) {
        prop_assert!(DegradationSpec::new(k, intensity, 0).is_err());
    }
}
