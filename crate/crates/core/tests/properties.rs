//! Randomized invariants.

mod common;

use common::*;
use fedtime_core::data::{origins_per_channel, partition_clients, window_refs, RevinState, TimeSeriesDataset};
use fedtime_core::federation::{aggregate, kmeans};
use fedtime_core::model::checkpoint::{decode_payload, encode_payload, from_bytes, to_bytes};
use fedtime_core::model::{ForecastModel, QuantizedTensor};
use fedtime_core::numerics::Tensor;
use proptest::prelude::*;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantization_error_is_bounded_by_block_absmax(
        values in prop::collection::vec(-50.0f64..50.0, 1..300),
        block in 1usize..80,
    ) {
        let t = Tensor::vector(values.clone()).unwrap();
        let q = QuantizedTensor::quantize(&t, block).unwrap();
        let d = q.dequantize();
        prop_assert_eq!(d.shape(), t.shape());
        for (a, b) in values.chunks(block).zip(d.data().chunks(block)) {
            let absmax = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= absmax / 127.0 + 1e-12);
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in 0u64..1000, phase in 0usize..3) {
        let mut r = rng(seed);
        let base = ForecastModel::new(tiny_config(&mut r), seed).unwrap();
        let model = match phase {
            0 => base,
            1 => base.into_full().unwrap(),
            _ => base.into_peft(seed).unwrap(),
        }
        .snapped_f32();
        let bytes = to_bytes(&model).unwrap();
        let back = from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn payloads_round_trip_f32_values(values in prop::collection::vec(-1e6f32..1e6, 2..64), split in 1usize..63) {
        let split = split.min(values.len() - 1);
        let a: Vec<f64> = values[..split].iter().map(|&v| f64::from(v)).collect();
        let b: Vec<f64> = values[split..].iter().map(|&v| f64::from(v)).collect();
        let ts = vec![Tensor::vector(a.clone()).unwrap(), Tensor::vector(b.clone()).unwrap()];
        let bytes = encode_payload(&ts);
        prop_assert_eq!(bytes.len(), 4 * values.len());
        let back = decode_payload(&bytes, &[vec![a.len()], vec![b.len()]]).unwrap();
        prop_assert_eq!(back, ts);
    }

    #[test]
    fn aggregation_is_the_weighted_mean(
        rows in prop::collection::vec((prop::collection::vec(-10.0f64..10.0, 5), 0.1f64..100.0), 1..8),
    ) {
        let thetas: Vec<Vec<Tensor>> = rows.iter().map(|(v, _)| vec![Tensor::vector(v.clone()).unwrap()]).collect();
        let members: Vec<(&[Tensor], f64)> = thetas.iter().zip(&rows).map(|(t, (_, w))| (t.as_slice(), *w)).collect();
        let got = aggregate(&members).unwrap();
        let total: f64 = rows.iter().map(|(_, w)| w).sum();
        for j in 0..5 {
            let want: f64 = rows.iter().map(|(v, w)| v[j] * w).sum::<f64>() / total;
            prop_assert!((got[0].data()[j] - want).abs() < 1e-9);
        }
        // Identical members aggregate to themselves.
        let same: Vec<(&[Tensor], f64)> = members.iter().map(|(_, w)| (thetas[0].as_slice(), *w)).collect();
        let id = aggregate(&same).unwrap();
        prop_assert!(max_abs_diff(id[0].data(), thetas[0][0].data()) < 1e-12);
    }

    #[test]
    fn kmeans_reaches_a_lloyd_fixed_point(
        points in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..12),
        k in 1usize..4,
        seed in 0u64..100,
    ) {
        let k = k.min(points.len());
        let km = kmeans(&points, k, seed).unwrap();
        prop_assert_eq!(km.assignments.len(), points.len());
        prop_assert_eq!(km.centroids.len(), k);
        for w in km.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9);
        }
        for (p, &c) in points.iter().zip(&km.assignments) {
            let mine = dist2(p, &km.centroids[c]);
            for other in &km.centroids {
                prop_assert!(mine <= dist2(p, other) + 1e-9);
            }
        }
        prop_assert_eq!(kmeans(&points, k, seed).unwrap(), km);
    }

    #[test]
    fn window_counts_follow_the_closed_form(
        rows in 1usize..200, channels in 1usize..4, l in 1usize..40, t in 1usize..20, stride in 1usize..7,
    ) {
        let cols: Vec<Vec<f64>> = (0..channels).map(|c| (0..rows).map(|r| (r * channels + c) as f64).collect()).collect();
        let ds = TimeSeriesDataset::from_columns("p", &cols).unwrap();
        let per = origins_per_channel(rows, l, t, stride);
        match window_refs(&ds, l, t, stride) {
            Ok(refs) => {
                prop_assert_eq!(refs.len(), channels * per);
                prop_assert!(refs.iter().all(|w| w.origin + l + t <= rows));
            }
            Err(_) => prop_assert_eq!(per, 0),
        }
        let loops = if rows >= l + t { (0..).map(|k| k * stride).take_while(|o| o + l + t <= rows).count() } else { 0 };
        prop_assert_eq!(per, loops);
    }

    #[test]
    fn client_shards_are_contiguous_and_cover(rows in 10usize..300, clients in 1usize..9) {
        let ds = TimeSeriesDataset::from_columns("p", &[(0..rows).map(|r| r as f64).collect()]).unwrap();
        match partition_clients(&ds, clients, 1) {
            Ok(shards) => {
                let mut next = 0;
                for s in &shards {
                    prop_assert_eq!(s.start_row, next);
                    prop_assert_eq!(s.data.value(0, 0), next as f64);
                    next += s.rows();
                }
                prop_assert_eq!(next, rows);
                let sizes: Vec<usize> = shards.iter().map(|s| s.rows()).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
            Err(_) => prop_assert!(rows < clients),
        }
    }

    #[test]
    fn revin_round_trips(
        values in prop::collection::vec(-1e3f64..1e3, 2..100),
        gain in prop_oneof![0.05f64..5.0, -5.0f64..-0.05],
        bias in -3.0f64..3.0,
    ) {
        let st = RevinState::fit(&values, gain, bias);
        let back = st.denormalize(&st.normalize(&values)).unwrap();
        prop_assert!(max_abs_diff(&values, &back) < 1e-6);
    }
}
