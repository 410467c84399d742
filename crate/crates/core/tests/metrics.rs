use proptest::prelude::*;

use vos_core::mask::BinaryMask;
use vos_core::metrics::{boundary_f, default_tolerance, jaccard};

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |d| BinaryMask::new(h, w, d).unwrap())
}

fn rect(h: usize, w: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| (y0..y0 + rh).contains(&y) && (x0..x0 + rw).contains(&x))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_are_symmetric_and_bounded(a in mask_strategy(12, 10), b in mask_strategy(12, 10), tol in 0.0f64..3.0) {
        let (j, f) = (jaccard(&a, &b).unwrap(), boundary_f(&a, &b, tol).unwrap());
        prop_assert_eq!(j, jaccard(&b, &a).unwrap());
        prop_assert!((f - boundary_f(&b, &a, tol).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&j) && (0.0..=1.0).contains(&f));
        prop_assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(boundary_f(&a, &a, tol).unwrap(), 1.0);
    }

    #[test]
    fn boundary_f_grows_with_tolerance(a in mask_strategy(10, 10), b in mask_strategy(10, 10)) {
        let mut last = 0.0;
        for tol in [0.0, 1.0, 1.5, 2.0, 4.0] {
            let f = boundary_f(&a, &b, tol).unwrap();
            prop_assert!(f >= last - 1e-12);
            last = f;
        }
    }

    #[test]
    fn deeper_erosion_scores_lower(y0 in 4usize..10, x0 in 4usize..10, side in 16usize..24) {
        let truth = rect(40, 40, y0, x0, side, side);
        let tol = default_tolerance(40, 40);
        let mut last = (1.0, 1.0);
        for k in 1..5 {
            let pred = truth.eroded(k);
            let score = (jaccard(&pred, &truth).unwrap(), boundary_f(&pred, &truth, tol).unwrap());
            prop_assert!(score.0 < last.0, "J did not drop at erosion {}", k);
            prop_assert!(score.1 <= last.1, "F rose at erosion {}", k);
            last = score;
        }
        // beyond the tolerance the boundaries no longer match at all
        prop_assert_eq!(boundary_f(&truth.eroded(3), &truth, tol).unwrap(), 0.0);
    }
}

#[test]
fn empty_masks() {
    let empty = BinaryMask::empty(8, 8);
    let full = rect(8, 8, 2, 2, 3, 3);
    assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
    assert_eq!(boundary_f(&empty, &empty, 1.0).unwrap(), 1.0);
    assert_eq!(jaccard(&empty, &full).unwrap(), 0.0);
    assert_eq!(boundary_f(&full, &empty, 1.0).unwrap(), 0.0);
}
