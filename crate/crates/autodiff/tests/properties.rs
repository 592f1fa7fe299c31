use autodiff::{Tape, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        data in prop::collection::vec(-50.0f32..50.0, 12)
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            for v in row {
                prop_assert!(*v >= 0.0);
            }
        }
    }

    #[test]
    fn bilinear_is_convex_combination_in_range(
        map in prop::collection::vec(-10.0f32..10.0, 9),
        u in 0.0f32..1.0,
        v in 0.0f32..1.0,
    ) {
        let lo = map.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = map.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new(vec![1, 3, 3], map).unwrap());
        let l = tape.constant(Tensor::new(vec![1, 2], vec![u, v]).unwrap());
        let out = tape.bilinear_sample(m, l).unwrap();
        let s = tape.value(out).data()[0];
        prop_assert!(s >= lo - 1e-4 && s <= hi + 1e-4);
    }

    #[test]
    fn layer_norm_rows_are_standardized(
        data in prop::collection::vec(-5.0f32..5.0, 16)
    ) {
        // skip near-constant rows where normalization is eps-dominated
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 8], data.clone()).unwrap());
        let y = tape.layer_norm(x, 1e-5).unwrap();
        for (yrow, xrow) in tape.value(y).data().chunks(8).zip(data.chunks(8)) {
            let spread = xrow.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
                - xrow.iter().cloned().fold(f32::INFINITY, f32::min);
            if spread < 1e-2 {
                continue;
            }
            let mean: f32 = yrow.iter().sum::<f32>() / 8.0;
            prop_assert!(mean.abs() < 1e-4);
        }
    }
}
