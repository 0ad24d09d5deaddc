//! Finest-only fusion reduces to a late dot-product head over decoder features.

mod common;

use common::oracles::baseline_reduction;
use rand::Rng;
use vlseg::nn::{FusionNet, GuidanceTensors, NetworkConfig};

#[test]
fn finest_only_fusion_is_a_dot_product_head() {
    for seed in 0..4 {
        let d = baseline_reduction(seed);
        assert!(d <= 1e-6, "seed {seed}: {d:e}");
    }
}

#[test]
fn zero_guidance_equals_fusion_free_network() {
    let cfg = NetworkConfig::tiny(vec![4, 6, 8], 2, 10);
    let net = FusionNet::new(cfg.clone()).unwrap();
    let mut free_cfg = cfg.clone();
    free_cfg.guidance_dim = 0;
    let free = FusionNet::new(free_cfg).unwrap();
    let params: Vec<f64> = net.init_params(5);
    let mut fp = vec![0.0; free.param_count()];
    for e in free.layout().entries() {
        let src = net.layout().get(&e.name).unwrap();
        // a widened tensor keeps the narrow one in the leading columns of each row
        let (cols, src_cols) = (*e.shape.last().unwrap(), *src.shape.last().unwrap());
        for row in 0..e.len() / cols {
            let s = src.offset + row * src_cols;
            fp[e.offset + row * cols..e.offset + (row + 1) * cols].copy_from_slice(&params[s..s + cols]);
        }
    }
    let mut r = common::rng(1);
    let volume = common::random_field(&mut r, 1, [8, 8, 8], 1.0);
    let feats = net.encode(&params, &volume).unwrap();
    let a = net.decode(&params, &feats, &GuidanceTensors::zeros(&cfg)).unwrap();
    let b = free.forward(&fp, &volume, &[0.0; 10]).unwrap();
    for (x, y) in a.logits.iter().zip(&b.logits) {
        for (u, v) in x.data.iter().zip(&y.data) {
            assert!((u - v).abs() <= 1e-10);
        }
    }
}

#[test]
fn no_fusion_ignores_the_prompt() {
    let mut cfg = NetworkConfig::tiny(vec![4, 6, 8], 2, 10);
    cfg.fusion_stage_mask = vec![false, false];
    let net = FusionNet::new(cfg).unwrap();
    let params: Vec<f64> = net.init_params(2);
    let mut r = common::rng(2);
    let volume = common::random_field(&mut r, 1, [8, 8, 8], 1.0);
    let q1: Vec<f64> = (0..10).map(|_| r.gen_range(-1.0..1.0)).collect();
    let q2: Vec<f64> = (0..10).map(|_| r.gen_range(-1.0..1.0)).collect();
    assert_eq!(
        net.forward(&params, &volume, &q1).unwrap(),
        net.forward(&params, &volume, &q2).unwrap()
    );
}
