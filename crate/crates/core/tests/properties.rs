use proptest::prelude::*;

use hsrkan::autograd::{upsample, Interpolation};
use hsrkan::bspline::{basis_row, make_knots};
use hsrkan::degradation::HsiCube;
use hsrkan::io::{decode_hsc, encode_hsc};
use hsrkan::kan::layer_entropy;
use hsrkan::metrics::{psnr, sam};
use hsrkan::{ActivationStats, SplineConfig, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn basis_rows_sum_to_one_even_when_clamped(
        g in 1usize..10,
        k in 0usize..6,
        lo in -3.0f64..0.0,
        width in 0.5f64..4.0,
        x in -8.0f64..8.0,
    ) {
        let knots = make_knots(&SplineConfig::new(g, k, [lo, lo + width]).unwrap()).unwrap();
        let row = basis_row(x, &knots);
        prop_assert_eq!(row.len(), g + k);
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(row.iter().all(|&v| v >= 0.0));
        prop_assert!(row.iter().filter(|&&v| v > 0.0).count() <= k + 1);
    }

    #[test]
    fn hsc_round_trip(bands in 1usize..5, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let data: Vec<f64> = (0..bands * h * w)
            .map(|i| ((seed.wrapping_mul(i as u64 + 1) >> 40) as f32 / 1e5) as f64)
            .collect();
        let cube = HsiCube::new(bands, h, w, data).unwrap();
        prop_assert_eq!(decode_hsc(&encode_hsc(&cube).unwrap()).unwrap(), cube);
    }

    #[test]
    fn entropy_is_bounded(norms in prop::collection::vec(0.0f64..10.0, 1..40)) {
        let n = norms.len();
        let stats = ActivationStats { edge_norms: Tensor::new([1, n], norms).unwrap(), n_samples: 1 };
        let s = layer_entropy(Some(&stats)).unwrap();
        prop_assert!(s >= 0.0);
        prop_assert!(s <= (n as f64).ln() + 1e-12);
    }

    #[test]
    fn sam_ignores_per_pixel_scaling(
        spectra in prop::collection::vec(0.05f64..1.0, 12),
        gains in prop::collection::vec(0.1f64..10.0, 4),
    ) {
        let a = HsiCube::new(3, 2, 2, spectra.clone()).unwrap();
        let scaled: Vec<f64> = spectra.iter().enumerate().map(|(i, v)| v * gains[i % 4]).collect();
        let b = HsiCube::new(3, 2, 2, scaled).unwrap();
        prop_assert!(sam(&b, &a).unwrap().degrees < 1e-5);
    }

    #[test]
    fn psnr_is_symmetric(a in prop::collection::vec(0.0f64..1.0, 8), b in prop::collection::vec(0.0f64..1.0, 8)) {
        let (ca, cb) = (HsiCube::new(2, 2, 2, a).unwrap(), HsiCube::new(2, 2, 2, b).unwrap());
        let (p, q) = (psnr(&ca, &cb, 1.0).unwrap(), psnr(&cb, &ca, 1.0).unwrap());
        prop_assert!(p == q || (p - q).abs() < 1e-12);
    }

    #[test]
    fn upsampling_keeps_constants(v in -2.0f64..2.0, scale in prop::sample::select(vec![2usize, 4, 8])) {
        for kind in [Interpolation::Bicubic, Interpolation::Bilinear] {
            let x = Tensor::from_fn([1, 2, 3, 3], |_| v);
            let up = upsample(&x, scale, kind).unwrap();
            prop_assert_eq!(up.shape(), &[1, 2, 3 * scale, 3 * scale][..]);
            prop_assert!(up.data().iter().all(|&u| (u - v).abs() < 1e-12));
        }
    }
}
