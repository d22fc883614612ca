//! Property tests over the numeric invariants.

use mtsc_core::attention::{AttentionConfig, TpsBlock};
use mtsc_core::data::{Dataset, Sample};
use mtsc_core::tensor::{Initializer, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_stay_positive(
        rows in 1usize..5,
        cols in 1usize..7,
        raw in prop::collection::vec(-50.0f64..50.0, 1..35),
    ) {
        let n = rows * cols;
        let data: Vec<f64> = (0..n).map(|i| raw[i % raw.len()] + i as f64 * 0.01).collect();
        let x = Tensor::new(vec![rows, cols], data).unwrap();
        let y = x.softmax(1).unwrap();
        for row in y.to_vec().chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn znormalize_is_idempotent(
        len in 2usize..20,
        raw in prop::collection::vec(-100.0f64..100.0, 2..40),
    ) {
        let data: Vec<f64> = (0..len).map(|i| raw[i % raw.len()]).collect();
        let ds = Dataset::new(
            "p",
            vec![Sample {
                series: Tensor::new(vec![1, len], data).unwrap(),
                label: 0,
                original_len: len,
            }],
            1,
            vec!["a".into()],
        )
        .unwrap();
        let once = ds.znormalize();
        let twice = once.znormalize();
        let a = once.samples[0].series.to_vec();
        let b = twice.samples[0].series.to_vec();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn padding_preserves_prefix(
        d in 1usize..4,
        len in 1usize..10,
        pad in 0usize..6,
        raw in prop::collection::vec(-10.0f64..10.0, 1..40),
    ) {
        let data: Vec<f64> = (0..d * len).map(|i| raw[i % raw.len()]).collect();
        let ds = Dataset::new(
            "p",
            vec![Sample {
                series: Tensor::new(vec![d, len], data.clone()).unwrap(),
                label: 0,
                original_len: len,
            }],
            d,
            vec!["a".into()],
        )
        .unwrap();
        let padded = ds.pad_to(len + pad).unwrap();
        let v = padded.samples[0].series.to_vec();
        for ch in 0..d {
            for t in 0..len {
                prop_assert_eq!(v[ch * (len + pad) + t], data[ch * len + t]);
            }
            for t in len..len + pad {
                prop_assert_eq!(v[ch * (len + pad) + t], 0.0);
            }
        }
    }

    #[test]
    fn tps_attention_rows_always_normalize(seed in 0u64..200) {
        let cfg = AttentionConfig { d: 4, ..AttentionConfig::default() };
        let mut init = Initializer::new(seed);
        let block = TpsBlock::new(&mut init, &cfg);
        let n = 3 + (seed % 5) as usize;
        let data: Vec<f64> = (0..n * 4).map(|i| ((seed + i as u64) as f64 * 0.61).sin() * 2.0).collect();
        let f = Tensor::new(vec![n, 4], data).unwrap();
        let out = block.forward(&f).unwrap();
        for row in out.attention[0].to_vec().chunks(n) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        let a2 = out.pseudo_gaussian.to_vec();
        for i in 0..n {
            prop_assert_eq!(a2[i * n + i], 1.0);
            for j in 0..n {
                prop_assert!(a2[i * n + j] > 0.0 && a2[i * n + j] <= 1.0);
            }
        }
    }
}
