mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use massweights::fixtures::{planted_model, toy_config, Plant};
use massweights::probe::{find_massive_layer, find_massive_weights};
use massweights::trace::{attention_sink_fraction, magnitude_profile, magnitude_stats, trace_forward, StateKind};
use massweights::ParameterStore;

#[test]
fn planted_third_of_four_layers() {
    let c = toy_config(65, 16, 32, 4, 2);
    let p = planted_model::<f32>(&c, 2, &Plant::new(3, vec![5])).unwrap();
    assert_eq!(find_massive_layer(&c, &p).unwrap(), (3, None));
}

#[test]
fn unplanted_layer_matches_exhaustive_oracle() {
    let c = toy_config(33, 16, 48, 4, 2);
    let p = ParameterStore::<f64>::random(&c, 13, 0.3).unwrap();
    let states = common::naive_bos_intermediates(&c, &p);
    let maxima: Vec<f64> = states
        .iter()
        .map(|(_, v)| v.iter().fold(0.0, |m, x| f64::max(m, x.abs())))
        .collect();
    let mut best = 0;
    for (i, m) in maxima.iter().enumerate() {
        if *m > maxima[best] {
            best = i;
        }
    }
    assert_eq!(find_massive_layer(&c, &p).unwrap().0, best + 1);

    let report = find_massive_weights(&c, &p, 6).unwrap();
    let inter = &states[best].1;
    let mut order: Vec<usize> = (0..inter.len()).collect();
    order.sort_by(|&a, &b| inter[b].abs().total_cmp(&inter[a].abs()).then(a.cmp(&b)));
    assert_eq!(report.indices, order[..6]);
}

#[test]
fn planted_layer_towers_over_the_rest() {
    let c = toy_config(65, 16, 32, 4, 2);
    let p = planted_model::<f32>(&c, 3, &Plant::new(2, vec![8, 1])).unwrap();
    let trace = trace_forward(&c, &p, &[c.bos_token_id], 0).unwrap();
    let profile = magnitude_profile(&trace);
    let top1: Vec<f64> = (1..=4)
        .map(|l| profile.get(l, StateKind::Inter).unwrap().top1)
        .collect();
    let mut others: Vec<f64> = top1
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != 1)
        .map(|(_, v)| *v)
        .collect();
    others.sort_by(f64::total_cmp);
    let median = others[others.len() / 2];
    assert!(top1[1] >= 100.0 * median, "{top1:?}");
}

#[test]
fn stats_match_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut abs: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    abs.sort_by(|a, b| b.total_cmp(a));
    let (top, median) = magnitude_stats(&v);
    assert_eq!(top, [abs[0], abs[1], abs[2]]);
    assert_eq!(median, abs[32]);
}

#[test]
fn massive_coordinate_persists_through_later_layers() {
    let c = toy_config(65, 16, 32, 4, 2);
    let plant = Plant {
        down_coord: Some(11),
        ..Plant::new(2, vec![20])
    };
    let p = planted_model::<f64>(&c, 4, &plant).unwrap();
    let trace = trace_forward(&c, &p, &[c.bos_token_id, 3, 7], 0).unwrap();
    let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap();
    assert_eq!(argmax(&trace.layers[1].inter), 20);
    for lt in &trace.layers[1..] {
        assert_eq!(argmax(&lt.h), 11, "layer {}", lt.layer);
    }
}

#[test]
fn sinks_follow_the_massive_layer() {
    let c = toy_config(65, 16, 32, 4, 2);
    let p = planted_model::<f64>(&c, 4, &Plant::new(2, vec![20])).unwrap();
    let ids = [c.bos_token_id, 3, 7, 12, 40, 9];
    let trace = trace_forward(&c, &p, &ids, 0).unwrap();
    let frac = attention_sink_fraction(&trace, 0).unwrap();
    assert_eq!(frac.len(), 4);
    assert!(frac.iter().all(|f| (0.0..=1.0).contains(f)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reported_indices_are_sort_prefixes(seed in 0u64..1000, k in 1usize..24) {
        let c = toy_config(33, 16, 24, 2, 2);
        let p = ParameterStore::<f64>::random(&c, seed, 0.3).unwrap();
        let a = find_massive_weights(&c, &p, k).unwrap();
        let b = find_massive_weights(&c, &p, k + 1).unwrap();
        prop_assert_eq!(a.layer, b.layer);
        prop_assert_eq!(&a.indices[..], &b.indices[..k]);
    }

    #[test]
    fn sink_fraction_is_a_fraction(seed in 0u64..1000, len in 1usize..10, sink in 0usize..10) {
        let c = toy_config(33, 16, 24, 2, 2);
        let p = ParameterStore::<f32>::random(&c, seed, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..33)).collect();
        let trace = trace_forward(&c, &p, &ids, 0).unwrap();
        match attention_sink_fraction(&trace, sink) {
            Ok(f) => prop_assert!(sink < len && f.iter().all(|x| (0.0..=1.0 + 1e-6).contains(x))),
            Err(_) => prop_assert!(sink >= len),
        }
    }
}
