use adavi_core::link::Link;
use adavi_core::rng::Rng;
use adavi_core::tape::Tape;
use adavi_core::train::moving_average;
use adavi_core::Tensor;
use approx::assert_relative_eq;
use proptest::prelude::*;

fn rows(cols: usize) -> impl Strategy<Value = Tensor> {
    (1usize..5).prop_flat_map(move |r| {
        prop::collection::vec(-6.0f64..6.0, r * cols).prop_map(move |d| Tensor::new(vec![r, cols], d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_centered_lands_on_the_simplex(x in rows(3)) {
        let tape = Tape::new();
        let (y, fwd) = Link::SoftmaxCentered.forward_and_log_det(tape.constant(x.clone())).unwrap();
        let y = y.value();
        for r in 0..x.shape()[0] {
            let row = y.row(r).unwrap();
            assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-12);
            prop_assert!(row.data().iter().all(|v| *v > 0.0));
        }
        let (back, inv) = Link::SoftmaxCentered.inverse_and_log_det(tape.constant(y)).unwrap();
        prop_assert!(back.value().max_abs_diff(&x) < 1e-9);
        prop_assert!(fwd.value().max_abs_diff(&inv.neg().unwrap().value()) < 1e-9);
    }

    #[test]
    fn sqrt_softmax_centered_lands_on_the_sphere(x in rows(2)) {
        let tape = Tape::new();
        let y = Link::SqrtSoftmaxCentered.forward(tape.constant(x.clone())).unwrap().value();
        for r in 0..x.shape()[0] {
            let sq: f64 = y.row(r).unwrap().data().iter().map(|v| v * v).sum();
            assert_relative_eq!(sq, 1.0, epsilon = 1e-12);
        }
        let back = Link::SqrtSoftmaxCentered.inverse(tape.constant(y)).unwrap();
        prop_assert!(back.value().max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn exp_log_det_is_the_row_sum(x in rows(4)) {
        let tape = Tape::new();
        let ld = Link::Exp.forward_log_det(tape.constant(x.clone())).unwrap().value();
        for r in 0..x.shape()[0] {
            assert_relative_eq!(ld.data()[r], x.row(r).unwrap().sum(), epsilon = 1e-12);
        }
    }

    #[test]
    fn gather_rows_then_stack_rows_agree(x in rows(3), seed in any::<u64>()) {
        let perm = Rng::new(seed).permutation(x.shape()[0]);
        let gathered = x.gather_rows(&perm).unwrap();
        let stacked = Tensor::stack(&perm.iter().map(|&r| x.row(r).unwrap()).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(&gathered, &stacked);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        prop_assert_eq!(gathered.gather_rows(&inverse).unwrap(), x);
    }

    #[test]
    fn rng_position_resumes_the_stream(seed in any::<u64>(), stream in 0u64..16, skip in 0usize..50) {
        let mut a = Rng::with_stream(seed, stream);
        for _ in 0..skip {
            a.normal();
        }
        let mut b = Rng::from_position(a.position());
        let xs: Vec<f64> = (0..8).map(|_| a.uniform()).collect();
        let ys: Vec<f64> = (0..8).map(|_| b.uniform()).collect();
        prop_assert_eq!(xs, ys);
    }

    #[test]
    fn moving_average_of_a_constant_is_constant(c in -1e3f64..1e3, n in 1usize..40, w in 1usize..10) {
        for v in moving_average(&vec![c; n], w) {
            assert_relative_eq!(v, c, max_relative = 1e-12, epsilon = 1e-9);
        }
    }

    #[test]
    fn moving_average_stays_within_the_range(xs in prop::collection::vec(-1e3f64..1e3, 1..40), w in 1usize..10) {
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in moving_average(&xs, w) {
            prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }
    }
}

#[test]
fn permutations_are_permutations() {
    let mut rng = Rng::new(3);
    for n in [0, 1, 7, 100] {
        let mut p = rng.permutation(n);
        p.sort_unstable();
        assert_eq!(p, (0..n).collect::<Vec<_>>());
    }
}
