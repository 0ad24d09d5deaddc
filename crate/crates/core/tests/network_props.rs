//! Structural properties of the network: prompt pathway, purity, accounting.

mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use vlseg::nn::{count_parameters, FusionNet, NetworkConfig};
use vlseg::tensor::Field;

fn rand_vec(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

#[test]
fn guidance_ignores_bottleneck_token_order() {
    let cfg = NetworkConfig::tiny(vec![4, 6, 8], 3, 10);
    let net = FusionNet::new(cfg).unwrap();
    let params: Vec<f64> = net.init_params(1);
    let mut r = common::rng(1);
    let b = common::random_field(&mut r, 8, [2, 3, 2], 1.0);
    let q = rand_vec(&mut r, 10);
    let n = b.voxels();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let mut shuffled = b.clone();
    for c in 0..8 {
        for (dst, &src) in perm.iter().enumerate() {
            shuffled.data[c * n + dst] = b.data[c * n + src];
        }
    }
    let g1 = net.prompt_decode(&params, &q, &b).unwrap();
    let g2 = net.prompt_decode(&params, &q, &shuffled).unwrap();
    for (a, c) in g1.tensors.iter().flatten().zip(g2.tensors.iter().flatten()) {
        assert!((a - c).abs() < 1e-12);
    }
}

#[test]
fn positions_break_token_symmetry() {
    let mut cfg = NetworkConfig::tiny(vec![4, 6, 8], 3, 10);
    cfg.positional_tokens = 12;
    let net = FusionNet::new(cfg).unwrap();
    let params: Vec<f64> = net.init_params(1);
    let mut r = common::rng(2);
    let b = common::random_field(&mut r, 8, [2, 3, 2], 1.0);
    let q = rand_vec(&mut r, 10);
    let mut rev = b.clone();
    let n = b.voxels();
    for c in 0..8 {
        rev.data[c * n..(c + 1) * n].reverse();
    }
    let g1 = net.prompt_decode(&params, &q, &b).unwrap();
    let g2 = net.prompt_decode(&params, &q, &rev).unwrap();
    assert_ne!(g1, g2);
    let too_many = common::random_field(&mut r, 8, [2, 4, 2], 1.0);
    assert!(net.prompt_decode(&params, &q, &too_many).is_err());
}

#[test]
fn prompts_change_the_prediction() {
    let cfg = NetworkConfig::tiny(vec![4, 6, 8], 3, 10);
    let net = FusionNet::new(cfg).unwrap();
    let params: Vec<f64> = net.init_params(3);
    let mut r = common::rng(3);
    let v = common::random_field(&mut r, 1, [8, 8, 8], 1.0);
    let a = net.forward(&params, &v, &rand_vec(&mut r, 10)).unwrap();
    let b = net.forward(&params, &v, &rand_vec(&mut r, 10)).unwrap();
    assert_ne!(a.logits[0], b.logits[0]);
    assert!(net.forward(&params, &v, &rand_vec(&mut r, 9)).is_err());
}

#[test]
fn forward_is_pure() {
    let net = FusionNet::new(common::tiny_net()).unwrap();
    let params: Vec<f32> = net.init_params(4);
    let mut r = common::rng(4);
    let v: Field<f32> = common::random_field(&mut r, 1, [16, 16, 16], 1.0).cast();
    let q: Vec<f32> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
    let a = net.forward(&params, &v, &q).unwrap();
    let b = net.forward(&params, &v, &q).unwrap();
    assert_eq!(a, b);
}

#[test]
fn constant_input_stays_finite() {
    let net = FusionNet::new(common::tiny_net()).unwrap();
    let params: Vec<f32> = net.init_params(5);
    let q = vec![0.1f32; 64];
    for value in [0.0f32, 1.0] {
        let v = Field::from_vec(1, [8, 8, 8], vec![value; 512]).unwrap();
        let out = net.forward(&params, &v, &q).unwrap();
        assert!(out.logits.iter().all(Field::all_finite));
    }
}

#[test]
fn stage_sizes_scale_with_input() {
    let net = FusionNet::new(common::tiny_net()).unwrap();
    let params: Vec<f64> = net.init_params(6);
    let small = net.encode(&params, &Field::zeros(1, [8, 4, 8])).unwrap();
    let big = net.encode(&params, &Field::zeros(1, [16, 8, 16])).unwrap();
    for (a, b) in small.stages.iter().zip(&big.stages) {
        assert_eq!(a.dims.map(|d| 2 * d), b.dims);
    }
}

fn arb_config() -> impl Strategy<Value = NetworkConfig> {
    (2usize..6, 0usize..5, 1usize..4, any::<bool>(), 1usize..20).prop_flat_map(|(s, g, c, ds, text)| {
        prop::collection::vec(any::<bool>(), s - 1).prop_map(move |mask| {
            let mut cfg = NetworkConfig::tiny((0..s).map(|i| c * (i + 1)).collect(), g, text);
            cfg.fusion_stage_mask = mask;
            cfg.deep_supervision = ds;
            cfg
        })
    })
}

proptest! {
    #[test]
    fn fusing_one_more_stage_adds_its_adapter(cfg in arb_config()) {
        let base = count_parameters(&cfg);
        prop_assert_eq!(base, common::oracles::reference_parameter_count(&cfg));
        if cfg.guidance_dim > 0 {
            for j in 0..cfg.fusion_stage_mask.len() {
                if cfg.fusion_stage_mask[j] {
                    continue;
                }
                let mut more = cfg.clone();
                more.fusion_stage_mask[j] = true;
                prop_assert!(count_parameters(&more) > base);
            }
        }
    }

    #[test]
    fn zero_guidance_rows_equal_no_fusion(cfg in arb_config()) {
        let mut g0 = cfg.clone();
        g0.guidance_dim = 0;
        let mut off = cfg.clone();
        off.fusion_stage_mask = vec![false; cfg.n_stages - 1];
        prop_assert_eq!(count_parameters(&g0), count_parameters(&off));
        prop_assert!(!g0.text_pathway());
    }

    #[test]
    fn adapter_output_grows_with_guidance(cfg in arb_config()) {
        prop_assume!(cfg.guidance_dim > 0 && cfg.text_pathway());
        let mut double = cfg.clone();
        double.guidance_dim *= 2;
        let layout = vlseg::nn::ParamLayout::for_config(&cfg);
        let layout2 = vlseg::nn::ParamLayout::for_config(&double);
        for s in 0..cfg.n_stages - 1 {
            if cfg.fused_at(s) {
                let a = layout.get(&format!("adapter{s}.fc2.w")).unwrap().len();
                let b = layout2.get(&format!("adapter{s}.fc2.w")).unwrap().len();
                prop_assert_eq!(2 * a, b);
            }
        }
    }
}
