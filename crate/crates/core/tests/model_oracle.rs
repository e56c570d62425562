mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use massweights::fixtures::{planted_model, toy_config, Plant};
use massweights::model::{
    build_forward, ffn_intermediate, forward, moe_route, names, FfnIntermediate, ForwardOptions, ParamVars,
    ResidualVariant,
};
use massweights::tensor::Graph;
use massweights::trace::trace_forward;
use massweights::{ParameterStore, Tensor};

#[test]
fn seed_seven_logits_match_naive_oracle() {
    let c = toy_config(33, 16, 32, 2, 2);
    let p = ParameterStore::<f32>::random(&c, 7, 0.1).unwrap();
    let ids = [c.bos_token_id, 5, 9];
    let engine = forward(&c, &p, &ids).unwrap();
    let oracle = common::naive_forward(&c, &p, &ids);
    for (t, row) in oracle.iter().enumerate() {
        for (v, want) in row.iter().enumerate() {
            assert!((f64::from(engine.row(t)[v]) - want).abs() <= 1e-4);
        }
    }
}

#[test]
fn zero_residual_dropout_is_pre_ln() {
    let pre = toy_config(33, 16, 32, 2, 2);
    let mut drop = pre.clone();
    drop.residual = ResidualVariant::ResidualDropout { p: 0.0 };
    let p = ParameterStore::<f32>::random(&pre, 7, 0.1).unwrap();
    let ids = [32, 1, 2, 3, 4];
    let base = forward(&pre, &p, &ids).unwrap();
    assert!(forward(&drop, &p, &ids).unwrap().bitwise_eq(&base));

    // Training mode draws no mask at p = 0 either.
    let mut g = Graph::new();
    let pv = ParamVars::new(&mut g, &p, false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut opts = ForwardOptions {
        adapters: None,
        dropout_rng: Some(&mut rng),
    };
    let nodes = build_forward(&mut g, &drop, &pv, &ids, &mut opts).unwrap();
    assert!(g.value(nodes.logits).bitwise_eq(&base));
}

#[test]
fn training_dropout_changes_logits_but_inference_does_not() {
    let mut c = toy_config(33, 16, 32, 2, 2);
    c.residual = ResidualVariant::ResidualDropout { p: 0.5 };
    let p = ParameterStore::<f64>::random(&c, 7, 0.1).unwrap();
    let ids = [32, 1, 2, 3];
    let mut pre = c.clone();
    pre.residual = ResidualVariant::PreLn;
    assert!(forward(&c, &p, &ids)
        .unwrap()
        .bitwise_eq(&forward(&pre, &p, &ids).unwrap()));

    let mut g = Graph::new();
    let pv = ParamVars::new(&mut g, &p, false);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut opts = ForwardOptions {
        adapters: None,
        dropout_rng: Some(&mut rng),
    };
    let nodes = build_forward(&mut g, &c, &pv, &ids, &mut opts).unwrap();
    assert!(!g.value(nodes.logits).bitwise_eq(&forward(&c, &p, &ids).unwrap()));
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for residual in [ResidualVariant::PreLn, ResidualVariant::SandwichLn] {
        let mut c = toy_config(33, 16, 32, 3, 4);
        c.residual = residual;
        let p = ParameterStore::<f32>::random(&c, 3, 0.3).unwrap();
        let ids: Vec<u32> = (0..11).map(|_| rng.gen_range(0..33)).collect();
        let trace = trace_forward(&c, &p, &ids, 0).unwrap();
        for lt in &trace.layers {
            for head in &lt.attention {
                for r in 0..head.rows() {
                    let s: f32 = head.row(r).iter().sum();
                    assert!((s - 1.0).abs() <= 1e-5);
                }
            }
        }
    }
}

#[test]
fn ffn_intermediate_vectors() {
    let c = toy_config(33, 16, 32, 2, 2);
    let mut p = ParameterStore::<f64>::random(&c, 5, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let zero = ffn_intermediate(&c, &p, 1, &[0.0; 16]).unwrap();
    assert_eq!(zero, FfnIntermediate::Dense(vec![0.0; 32]));

    for name in [names::ffn_gate(1, None), names::ffn_up(1, None)] {
        p.get_mut(&name).unwrap().row_mut(6).iter_mut().for_each(|v| *v = 0.0);
    }
    let FfnIntermediate::Dense(inter) = ffn_intermediate(&c, &p, 1, &x).unwrap() else {
        panic!("dense layer")
    };
    assert_eq!(inter[6], 0.0);
    let (oracle, _) = common::gated_ffn(&p, &vec![x.clone()], 1, None);
    for (a, b) in inter.iter().zip(&oracle[0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn planted_row_is_the_largest_intermediate() {
    let c = toy_config(33, 16, 32, 2, 2);
    for (layer, row) in [(1, 4), (2, 19), (2, 0)] {
        let p = planted_model::<f64>(&c, 9, &Plant::new(layer, vec![row])).unwrap();
        let states = common::naive_bos_intermediates(&c, &p);
        let (_, inter) = &states[layer - 1];
        let argmax = (0..inter.len())
            .max_by(|&a, &b| inter[a].abs().total_cmp(&inter[b].abs()))
            .unwrap();
        assert_eq!(argmax, row);
    }
}

#[test]
fn router_vectors() {
    let zero_router = Tensor::<f64>::zeros(vec![4, 4]);
    let (probs, top) = moe_route(&zero_router, &[0.0; 4]).unwrap();
    assert!(probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
    assert_eq!(top, [0, 1]);

    let identity = Tensor::from_fn(vec![4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    let (_, top) = moe_route(&identity, &[5.0, 1.0, 1.0, 1.0]).unwrap();
    assert!(top.contains(&0));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let router = Tensor::from_fn(vec![6, 8], |_| rng.gen_range(-1.0..1.0));
    let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (probs, top) = moe_route(&router, &x).unwrap();
    let logits: Vec<f64> = (0..6).map(|e| (0..8).map(|j| router.row(e)[j] * x[j]).sum()).collect();
    let want = common::softmax(&logits);
    for (a, b) in probs.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-6);
    }
    let (a, b) = common::top2(&want);
    assert_eq!(top, [a, b]);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
}
