use proptest::prelude::*;
use ternq_core::quantize::{weight_quant, QuantizedWeights};
use ternq_core::tensor::matmul_bt;
use ternq_core::ternpack::{footprint, pack_ternary, packed_matmul, unpack_ternary, GIB};
use ternq_core::Tensor;

fn codes() -> impl Strategy<Value = QuantizedWeights<f32>> {
    (1usize..12, 1usize..12, 0.001f32..10.0).prop_flat_map(|(r, c, s)| {
        prop::collection::vec(-1i8..=1, r * c)
            .prop_map(move |v| QuantizedWeights::new(&[r, c], v, s).unwrap())
    })
}

fn tensor(r: usize, c: usize) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(-1.0f32..1.0, r * c).prop_map(move |d| Tensor::new(&[r, c], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn unpack_inverts_pack(q in codes()) {
        let p = pack_ternary(&q).unwrap();
        prop_assert_eq!(p.bytes().len(), (q.codes().len()).div_ceil(4));
        prop_assert_eq!(unpack_ternary(&p).unwrap(), q);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn packed_matmul_matches_dense(
        (x, w) in (1usize..9, 1usize..33, 1usize..20)
            .prop_flat_map(|(m, k, n)| (tensor(m, k), tensor(n, k)))
    ) {
        let q = weight_quant(&w);
        let packed = packed_matmul(&x, &pack_ternary(&q).unwrap()).unwrap();
        let dense = matmul_bt(&x, &q.dequantize()).unwrap();
        for (a, b) in packed.data().iter().zip(dense.data()) {
            prop_assert!((a - b).abs() <= 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn footprint_grows_with_params(p in 1u64..1_000_000_000_000, extra in 1u64..1000, t in 0u64..100) {
        let a = footprint(p, t, &[]).unwrap();
        let b = footprint(p + 4 * extra, t, &[]).unwrap();
        prop_assert!(b.total_bytes > a.total_bytes);
        prop_assert_eq!(a.total_bytes, p.div_ceil(4) + 4 * t);
    }
}

#[test]
fn random_16x16_equals_dense_reference() {
    let w = Tensor::from_fn(&[16, 16], |i| ((i * 37 % 29) as f32 - 14.0) / 7.0);
    let x = Tensor::from_fn(&[16, 16], |i| ((i * 11 % 17) as f32 - 8.0) / 5.0);
    let q = weight_quant(&w);
    let packed = packed_matmul(&x, &pack_ternary(&q).unwrap()).unwrap();
    let dense = matmul_bt(&x, &q.dequantize()).unwrap();
    for (a, b) in packed.data().iter().zip(dense.data()) {
        assert!((a - b).abs() <= 1e-5);
    }
}

#[test]
fn compression_ratio_is_sixteen() {
    for params in [1_000_000u64, 123_456_789, 70_000_000_000] {
        let r = footprint(params, 0, &[]).unwrap();
        assert!(r.weight_bytes * 16 >= r.dense_f32_bytes);
        assert!(r.dense_f32_bytes as f64 > r.weight_bytes as f64 * 15.9);
    }
}

#[test]
fn seventy_billion_fits_24_gib() {
    let r = footprint(70_000_000_000, 0, &[24 * GIB]).unwrap();
    assert_eq!(r.weight_bytes, 17_500_000_000);
    assert!((r.weight_gib() - 16.298).abs() < 1e-3);
    assert!((r.dense_f32_gib() - 260.77).abs() < 1e-2);
    assert_eq!(r.fits, vec![(24 * GIB, true)]);
}
