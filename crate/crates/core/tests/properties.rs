//! Property-based invariants of kernels, smoothing, metrics and augmentation.

use pmt_core::autodiff::total_variation;
use pmt_core::data::{AugmentDraw, AugmentMode};
use pmt_core::metrics::{self, cos_sim, format_sig6, psnr, ssim};
use pmt_core::pmt::{make_kernel, smooth, KernelSpec};
use pmt_core::Tensor;
use proptest::prelude::*;

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..1.0, c * h * w).prop_map(move |d| Tensor::new(vec![c, h, w], d).unwrap())
}

fn kernel_spec() -> impl Strategy<Value = KernelSpec> {
    prop_oneof![
        Just(KernelSpec::None),
        (1usize..6).prop_map(|k| KernelSpec::Linear { k }),
        (1usize..6).prop_map(|k| KernelSpec::Gaussian { k }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kernels_are_normalized_symmetric_and_peaked(spec in kernel_spec()) {
        let k = make_kernel(spec).unwrap();
        let n = k.shape()[0];
        prop_assert!((k.sum() - 1.0).abs() <= 1e-12);
        let d = k.data();
        let centre = d[(n / 2) * n + n / 2];
        for i in 0..n {
            for j in 0..n {
                let v = d[i * n + j];
                prop_assert!(v > 0.0 && v <= centre);
                prop_assert_eq!(v, d[j * n + i]);
                prop_assert_eq!(v, d[(n - 1 - i) * n + j]);
            }
        }
    }

    #[test]
    fn smoothing_never_grows_l1_norm(spec in kernel_spec(), g in image(2, 6, 7)) {
        let g = g.map(|v| v - 0.5);
        let s = smooth(&g, &make_kernel(spec).unwrap()).unwrap();
        prop_assert_eq!(s.shape(), g.shape());
        prop_assert!(s.l1_norm() <= g.l1_norm() + 1e-12);
    }

    #[test]
    fn smoothing_is_linear(spec in kernel_spec(), a in image(1, 5, 5), b in image(1, 5, 5), t in -2.0f64..2.0) {
        let k = make_kernel(spec).unwrap();
        let mut comb = a.clone();
        comb.add_scaled(&b, t).unwrap();
        let mut expect = smooth(&a, &k).unwrap();
        expect.add_scaled(&smooth(&b, &k).unwrap(), t).unwrap();
        prop_assert!(smooth(&comb, &k).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn ssim_and_psnr_are_symmetric(a in image(3, 9, 8), b in image(3, 9, 8)) {
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(psnr(&a, &a).unwrap(), metrics::PSNR_CAP);
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn total_variation_ignores_constant_shifts(a in image(2, 5, 6), shift in -3.0f64..3.0, beta in 1.0f64..3.0) {
        let tv = total_variation(&a, beta).unwrap();
        let shifted = total_variation(&a.map(|v| v + shift), beta).unwrap();
        prop_assert!((tv - shifted).abs() <= 1e-9 * (1.0 + tv));
        prop_assert!(tv >= 0.0);
    }

    #[test]
    fn cosine_is_scale_invariant(u in prop::collection::vec(-1.0f64..1.0, 8), s in 0.1f64..10.0) {
        prop_assume!(u.iter().any(|v| v.abs() > 1e-3));
        let u = Tensor::vector(u);
        let c = cos_sim(&u, &u.map(|v| v * s)).unwrap();
        prop_assert!((c - 1.0).abs() < 1e-12);
        let n = cos_sim(&u, &u.map(|v| -v)).unwrap();
        prop_assert!((n + 1.0).abs() < 1e-12);
    }

    #[test]
    fn sig6_roundtrips_within_rounding(mantissa in -1.0f64..1.0, exp in -8i32..9) {
        let v = mantissa * 10f64.powi(exp);
        let s = format_sig6(v);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - v).abs() <= 5e-6 * v.abs() + 1e-300, "{} -> {}", v, s);
        prop_assert!(!s.contains('.') || !s.split('e').next().unwrap().ends_with('0'));
    }

    #[test]
    fn affine_backward_is_adjoint(seed in 0u64..1000, x in image(3, 10, 10), y in image(3, 10, 10)) {
        let draw = AugmentDraw::sample(&AugmentMode::default_affine(), x.shape(), seed).unwrap();
        let lhs = draw.apply(&x).dot(&y).unwrap();
        let rhs = x.dot(&draw.backward(&x, &y)).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }
}
