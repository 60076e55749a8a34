use audiogate_core::data::{augment, flip_horizontal, generate_example, DatasetParams, ImageSample};
use audiogate_core::editing::{interpolate_audio, scale_volume};
use audiogate_core::losses::{token_weight, TokenWeighting};
use audiogate_core::metrics::{aic, ais, fid, iis};
use audiogate_core::sampling::{cfg_combine, CfgFormulation};
use audiogate_core::{AudioClip, AudioEmbedding};
use candle_core::{Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_metrics_lie_in_unit_interval(gen in rows(6, 3), cond in rows(6, 3), val in rows(9, 3)) {
        let (a, counts) = ais(&gen, &cond, &val).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(counts.iter().all(|c| c.below <= c.total && c.total == 9));
        let (i, _) = iis(&gen, &cond, &val).unwrap();
        prop_assert!((0.0..=1.0).contains(&i));
    }

    #[test]
    fn aic_predictions_are_valid_classes(gen in rows(8, 4), protos in rows(3, 4)) {
        let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let (score, preds) = aic(&gen, &labels, &protos).unwrap();
        prop_assert!((0.0..=1.0).contains(&score));
        prop_assert!(preds.iter().all(|&p| p < 3));
    }

    #[test]
    fn fid_is_nonnegative_and_zero_on_self(a in rows(12, 3), b in rows(12, 3)) {
        prop_assert!(fid(&a, &b).unwrap() >= 0.0);
        prop_assert!(fid(&a, &a).unwrap() < 1e-5);
    }

    #[test]
    fn guidance_at_unit_scale_is_conditional(
        c in prop::collection::vec(-10.0f64..10.0, 8),
        u in prop::collection::vec(-10.0f64..10.0, 8),
    ) {
        let ct = Tensor::from_vec(c.clone(), 8, &Device::Cpu).unwrap();
        let ut = Tensor::from_vec(u, 8, &Device::Cpu).unwrap();
        for f in [CfgFormulation::Standard, CfgFormulation::Additive] {
            let out = cfg_combine(&ct, &ut, 1.0, f).unwrap().to_vec1::<f64>().unwrap();
            prop_assert_eq!(&out, &c);
        }
    }

    #[test]
    fn reverse_sigmoid_weights_decrease(t in 0.5f64..20.0, k in 2usize..100) {
        let w = TokenWeighting::ReverseSigmoid { temperature: t }.weights(k).unwrap();
        prop_assert!(w.windows(2).all(|p| p[1] < p[0]));
        prop_assert!(w.iter().all(|v| *v > 0.0 && *v < 1.0));
        prop_assert_eq!(w[0], token_weight(1, t).unwrap());
    }

    #[test]
    fn flip_is_involution(seed in any::<u64>(), class in 0usize..8) {
        let p = DatasetParams { seed, ..DatasetParams::default() };
        let img = generate_example(&p, class, 0).image;
        prop_assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn augmentation_keeps_range_and_label(seed in any::<u64>(), class in 0usize..8) {
        let img = generate_example(&DatasetParams::default(), class, 1).image;
        let out: ImageSample = augment(&img, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(out.class_id, img.class_id);
        prop_assert_eq!(out.pixels.len(), img.pixels.len());
        prop_assert!(out.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn examples_are_deterministic_and_paired(seed in any::<u64>(), class in 0usize..8, idx in 0usize..50) {
        let p = DatasetParams { seed, ..DatasetParams::default() };
        let a = generate_example(&p, class, idx);
        prop_assert_eq!(&a, &generate_example(&p, class, idx));
        prop_assert_eq!(a.audio.class_id, class);
        prop_assert_eq!(a.image.class_id, class);
        prop_assert!(a.audio.waveform.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn interpolation_stays_between_endpoints(
        e1 in prop::collection::vec(-1.0f32..1.0, 16),
        e2 in prop::collection::vec(-1.0f32..1.0, 16),
        lambda in 0.0f64..=1.0,
    ) {
        let out = interpolate_audio(&AudioEmbedding(e1.clone()), &AudioEmbedding(e2.clone()), lambda).unwrap();
        for ((o, a), b) in out.0.iter().zip(&e1).zip(&e2) {
            prop_assert!(*o >= a.min(*b) - 1e-6 && *o <= a.max(*b) + 1e-6);
        }
    }

    #[test]
    fn volume_scaling_stays_in_range(wave in prop::collection::vec(-1.0f32..1.0, 64), gain in 0.0f64..10.0) {
        let clip = AudioClip { waveform: wave, sample_rate: 16_000, class_id: 0 };
        let out = scale_volume(&clip, gain).unwrap();
        prop_assert!(out.waveform.iter().all(|v| v.abs() <= 1.0));
        prop_assert_eq!(out.waveform.len(), clip.waveform.len());
    }
}
