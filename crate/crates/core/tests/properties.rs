use std::rc::Rc;

use proptest::prelude::*;

use advpatch::autodiff::Tape;
use advpatch::gradcheck::random_view;
use advpatch::labels::{predict_labels, LabelMap};
use advpatch::loss::{adaptive_gamma, combined_gradient, correct_set, pixelwise_ce, split_losses};
use advpatch::metrics::ConfusionMatrix;
use advpatch::model::{ModelConfig, SegModel};
use advpatch::patch::{overlay, rect_at, Placement, PlacementSpec};
use advpatch::rng::{stream, Stream};
use advpatch::scene::billboard_homography;
use advpatch::tensor::Tensor;

fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn image_strategy(h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f32..=1.0, 3 * h * w).prop_map(move |d| tensor(&[3, h, w], d))
}

fn l2(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(c in 2usize..6, logits in prop::collection::vec(-30.0f32..30.0, 5 * 12)) {
        let hw = 12;
        let t = tensor(&[c, 3, 4], logits[..c * hw].to_vec());
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let p = tape.softmax_channels(x).unwrap();
        let p = tape.value(p);
        for px in 0..hw {
            let col: Vec<f32> = (0..c).map(|k| p.data()[k * hw + px]).collect();
            prop_assert!(col.iter().all(|&v| v > 0.0));
            prop_assert!((col.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn argmax_commutes_with_softmax(logits in prop::collection::vec(-5.0f32..5.0, 5 * 16)) {
        let z = tensor(&[5, 4, 4], logits);
        let mut tape = Tape::new();
        let x = tape.constant(z.clone());
        let p = tape.softmax_channels(x).unwrap();
        prop_assert_eq!(predict_labels(tape.value(p)).unwrap(), predict_labels(&z).unwrap());
    }

    #[test]
    fn combined_gradient_norm_bounded(
        a in prop::collection::vec(-10.0f32..10.0, 1..64),
        b_seed in any::<u64>(),
        gamma in 0.0f32..=1.0,
    ) {
        let b: Vec<f32> = a.iter().enumerate().map(|(i, x)| ((b_seed >> (i % 64)) & 1) as f32 - x * 0.3).collect();
        let g = combined_gradient(&a, &b, gamma).unwrap();
        prop_assert!(l2(&g) <= 1.0 + 1e-5);
        if l2(&a) > 1e-3 {
            prop_assert!((l2(&combined_gradient(&a, &b, 1.0).unwrap()) - 1.0).abs() < 1e-5);
        }
        if l2(&b) > 1e-3 {
            prop_assert!((l2(&combined_gradient(&a, &b, 0.0).unwrap()) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn correct_set_and_gamma(
        pred in prop::collection::vec(0u8..5, 48),
        gt in prop::collection::vec(0u8..5, 48),
        mask in prop::collection::vec(any::<bool>(), 48),
    ) {
        prop_assume!(mask.iter().any(|m| !m));
        let p = LabelMap::new(6, 8, pred.clone()).unwrap();
        let g = LabelMap::new(6, 8, gt.clone()).unwrap();
        let ups = correct_set(&p, &g, &mask).unwrap();
        prop_assert!(ups.iter().zip(&mask).all(|(&u, &m)| !(u && m)));
        let gamma = adaptive_gamma(&ups, &mask).unwrap();
        prop_assert!((0.0..=1.0).contains(&gamma));
        let outside = mask.iter().filter(|m| !**m).count() as f32;
        let wrong = (0..48).filter(|&i| !mask[i] && pred[i] != gt[i]).count() as f32;
        prop_assert!((gamma - (1.0 - wrong / outside)).abs() < 1e-6);
    }

    #[test]
    fn split_losses_partition_the_mean(
        logits in prop::collection::vec(-3.0f32..3.0, 5 * 16),
        gt in prop::collection::vec(0u8..5, 16),
        mask in prop::collection::vec(prop::bool::weighted(0.2), 16),
    ) {
        prop_assume!(mask.iter().any(|m| !m));
        let mut tape = Tape::new();
        let z = tape.constant(tensor(&[5, 4, 4], logits));
        let probs = tape.softmax_channels(z).unwrap();
        let labels = LabelMap::new(4, 4, gt).unwrap();
        let pred = predict_labels(tape.value(probs)).unwrap();
        let ups = correct_set(&pred, &labels, &mask).unwrap();
        let (lm, lmb) = split_losses(&mut tape, probs, &labels, &ups, &mask).unwrap();
        let outside: Vec<bool> = mask.iter().map(|m| !m).collect();
        let ce = pixelwise_ce(&mut tape, probs, &labels, &Rc::new(outside.clone())).unwrap();
        let n = outside.iter().filter(|o| **o).count() as f32;
        let total = tape.value(lm).item().unwrap() + tape.value(lmb).item().unwrap();
        prop_assert!((total / n - tape.value(ce).item().unwrap()).abs() < 1e-4);
    }

    #[test]
    fn overlay_leaves_outside_bit_exact(
        image in image_strategy(16, 24),
        patch in image_strategy(4, 6),
        top in 0.0f64..10.0,
        left in 0.0f64..15.0,
        scale in 0.5f64..1.5,
    ) {
        let Ok(spec) = rect_at((top + 3.0, left + 4.5), scale, (16, 24), (4, 6)) else { return Ok(()) };
        let out = overlay(&image, &patch, &spec).unwrap();
        let hw = 16 * 24;
        for i in 0..3 * hw {
            if !spec.mask()[i % hw] {
                prop_assert_eq!(out.data()[i].to_bits(), image.data()[i].to_bits());
            }
        }
        prop_assert!(spec.mask_count() > 0);
    }

    #[test]
    fn integer_placement_copies_patch(image in image_strategy(10, 12), patch in image_strategy(3, 5), top in 0usize..7, left in 0usize..7) {
        let spec = PlacementSpec::new(
            Placement::EotRect { top: top as f64, left: left as f64, scale: 1.0 },
            (10, 12),
            (3, 5),
        ).unwrap();
        let out = overlay(&image, &patch, &spec).unwrap();
        prop_assert_eq!(spec.mask_count(), 15);
        for k in 0..3 {
            for r in 0..3 {
                for c in 0..5 {
                    prop_assert_eq!(out.data()[(k * 10 + top + r) * 12 + left + c], patch.data()[(k * 3 + r) * 5 + c]);
                }
            }
        }
    }

    #[test]
    fn confusion_matrix_equivariant_under_relabeling(
        pred in prop::collection::vec(0u8..4, 64),
        gt in prop::collection::vec(0u8..4, 64),
        perm in Just([0u8, 1, 2, 3]).prop_shuffle(),
    ) {
        let mut a = ConfusionMatrix::new(4);
        a.accumulate(&LabelMap::new(8, 8, pred.clone()).unwrap(), &LabelMap::new(8, 8, gt.clone()).unwrap(), None).unwrap();
        let map = |v: &[u8]| v.iter().map(|&x| perm[x as usize]).collect::<Vec<_>>();
        let mut b = ConfusionMatrix::new(4);
        b.accumulate(&LabelMap::new(8, 8, map(&pred)).unwrap(), &LabelMap::new(8, 8, map(&gt)).unwrap(), None).unwrap();
        prop_assert_eq!(a.miou().unwrap(), b.miou().unwrap());
        prop_assert_eq!(a.macc().unwrap(), b.macc().unwrap());
    }

    #[test]
    fn homography_reprojects_corners(seed in any::<u64>()) {
        let mut rng = stream(seed, Stream::Gradcheck, 1);
        let (cam, bb) = random_view(&mut rng).unwrap();
        let h = billboard_homography(&cam, &bb, (12, 24)).unwrap();
        for ((u, v), world) in [(0.0, 0.0), (24.0, 0.0), (24.0, 12.0), (0.0, 12.0)].into_iter().zip(bb.corners()) {
            let got = h.apply(u, v).unwrap();
            let want = cam.project_point(&world).pixel().unwrap();
            prop_assert!((got[0] - want[0]).abs() < 1e-6 && (got[1] - want[1]).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn model_forward_is_pure(image in image_strategy(8, 16), seed in any::<u64>()) {
        let m = SegModel::new(ModelConfig { widths: [4, 8], seed, ..Default::default() }).unwrap();
        let a = m.forward(&image).unwrap();
        let b = m.forward(&image).unwrap();
        prop_assert_eq!(a.shape(), &[5, 8, 16][..]);
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
