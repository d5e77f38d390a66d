use proptest::prelude::*;

use sft_core::model::prediction_from_logits;
use sft_core::objective::{long_loss, mean_average_precision, mean_cross_entropy, Batch};
use sft_core::preproc::{crop_resize, BBox, VideoClip};
use sft_core::synthdata::{decode_clip, encode_clip};
use sft_core::{LongLossParams, Tensor};

fn logits_and_labels() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<usize>)> {
    (1usize..6, 2usize..6).prop_flat_map(|(b, m)| {
        (
            Just(b),
            Just(m),
            prop::collection::vec(-8.0f64..8.0, b * m),
            prop::collection::vec(0..m, b),
        )
    })
}

proptest! {
    #[test]
    fn softmax_normalised_and_shift_invariant(z in prop::collection::vec(-30.0f64..30.0, 1..12), c in -50.0f64..50.0) {
        let p = prediction_from_logits(&Tensor::from_vec(z.clone()));
        prop_assert!((p.probabilities.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let q = prediction_from_logits(&Tensor::from_vec(shifted));
        prop_assert_eq!(p.class, q.class);
    }

    #[test]
    fn long_loss_lies_between_ce_and_scaled_ce(
        (b, m, z, labels) in logits_and_labels(),
        alpha in 0.0f64..3.0,
        seed_d in prop::collection::vec(0.5f64..40.0, 6),
    ) {
        let logits = Tensor::new(vec![b, m], z).unwrap();
        let d = &seed_d[..b];
        let p = LongLossParams::new(alpha, 4.0, 20.0, true).unwrap();
        let ll = long_loss(&Batch { logits: &logits, labels: &labels, distances: d }, &p).unwrap();
        let ce = mean_cross_entropy(&logits, &labels).unwrap();
        // clamped weights lie in [1, 1 + alpha]
        prop_assert!(ll >= ce * (1.0 - 1e-12));
        prop_assert!(ll <= ce * (1.0 + alpha) * (1.0 + 1e-12));
    }

    #[test]
    fn map_is_a_fraction_and_perfect_for_one_hot((b, m, z, labels) in logits_and_labels()) {
        let scores = Tensor::new(vec![b, m], z).unwrap();
        let v = mean_average_precision(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let mut one_hot = vec![0.0f64; b * m];
        for (i, &l) in labels.iter().enumerate() {
            one_hot[i * m + l] = 1.0;
        }
        let perfect = mean_average_precision(&Tensor::new(vec![b, m], one_hot).unwrap(), &labels).unwrap();
        prop_assert_eq!(perfect, 1.0);
    }

    #[test]
    fn resize_keeps_constant_frames_constant(
        h in 2usize..20, w in 2usize..20, v in 0.0f32..1.0, oh in 1usize..40, ow in 1usize..40,
        corners in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
    ) {
        let frame = Tensor::new(vec![1, h, w], vec![v; h * w]).unwrap();
        let (a, b, c, d) = corners;
        let x0 = (a * (w - 1) as f64) as usize;
        let y0 = (b * (h - 1) as f64) as usize;
        let x1 = x0 + 1 + (c * (w - 1 - x0) as f64) as usize;
        let y1 = y0 + 1 + (d * (h - 1 - y0) as f64) as usize;
        let out = crop_resize(&frame, &BBox::new(x0, y0, x1, y1).unwrap(), (oh, ow)).unwrap();
        prop_assert_eq!(out.shape(), &[1, oh, ow]);
        prop_assert!(out.data().iter().all(|&o| (o - v).abs() < 1e-6));
    }

    #[test]
    fn clip_bytes_round_trip(
        n in 1usize..5, h in 1usize..9, w in 1usize..9, label in 0usize..10, d in 4.0f32..20.0, seed in any::<u64>(),
    ) {
        let mut rng = sft_core::Rng::new(seed);
        let frames = Tensor::<f32>::rand_uniform(&[n, 1, h, w], 0.0, 1.0, &mut rng);
        let clip = VideoClip::new(frames, 12.0, d, label).unwrap();
        let back = decode_clip(&encode_clip(&clip).unwrap()).unwrap();
        prop_assert_eq!(back.frames(), clip.frames());
        prop_assert_eq!(back.distance_m().to_bits(), clip.distance_m().to_bits());
        prop_assert_eq!(encode_clip(&back).unwrap(), encode_clip(&clip).unwrap());
    }
}
