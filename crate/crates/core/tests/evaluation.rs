//! Metric reports, prompt stability and the ablation runner.

mod common;

use std::collections::BTreeSet;

use common::{tiny_dataset, tiny_net, tiny_train_config};
use vlseg::dataset::{Dataset, Split};
use vlseg::eval::{
    evaluate, predict, prompt_stability, run_ablation, stability_variants, threshold_logits, AblationSpec,
    AblationVariant, MetricReport, NetPredictor, PromptSelection, Predictor, StabilityConfig, Subset, VariantKind,
};
use vlseg::loss::{dice_metric, hit_rate};
use vlseg::nn::{Checkpoint, FusionNet, NetworkConfig};
use vlseg::synth::TrainingSample;
use vlseg::tensor::{Field, Mask};
use vlseg::{Error, Result};

/// Looks the volume up among known cases and answers with the true mask.
struct Oracle {
    cases: Vec<TrainingSample>,
}

impl Oracle {
    fn new(data: &Dataset) -> Self {
        Oracle {
            cases: (0..data.len()).map(|i| data.case(i).unwrap()).collect(),
        }
    }
}

impl Predictor for Oracle {
    fn predict(&mut self, volume: &Field<f32>, prompt: &str) -> Result<Mask> {
        let case = self.cases.iter().find(|c| &c.volume == volume).expect("known volume");
        for (key, texts) in &case.prompt_bank {
            if texts.iter().any(|t| t == prompt) {
                return Ok(case.masks[key].clone());
            }
        }
        Ok(Mask::zeros(volume.dims))
    }
}

struct Empty;

impl Predictor for Empty {
    fn predict(&mut self, volume: &Field<f32>, _: &str) -> Result<Mask> {
        Ok(Mask::zeros(volume.dims))
    }
}

/// Ignores the prompt; fails on volumes whose first voxel is above `fail_above`.
struct Blind {
    fail_above: f32,
}

impl Predictor for Blind {
    fn predict(&mut self, volume: &Field<f32>, _: &str) -> Result<Mask> {
        if volume.data[0] > self.fail_above {
            return Err(Error::InvalidInput("refusing this volume".into()));
        }
        let data = volume.data.iter().map(|&v| (v > 0.3) as u8).collect();
        Mask::from_vec(volume.dims, data)
    }
}

#[test]
fn perfect_predictor_scores_one() {
    let data = tiny_dataset(10);
    for sel in [PromptSelection::Canonical, PromptSelection::AllVariants] {
        let rep = evaluate(&mut Oracle::new(&data), &data, Split::Test, sel).unwrap();
        assert_eq!(rep.mean_dice, 1.0);
        assert_eq!(rep.hit_rate_5, 1.0);
        assert!(rep.errors.is_empty());
        assert!(rep.rows.iter().any(|r| !r.positive));
    }
}

#[test]
fn empty_predictor_scores_zero_on_positives() {
    let data = tiny_dataset(10);
    let rep = evaluate(&mut Empty, &data, Split::Test, PromptSelection::Canonical).unwrap();
    let pos = rep.summary(Subset::Positive).unwrap();
    assert_eq!(pos.mean_dice, 0.0);
    assert_eq!(pos.hit_rate_5, 0.0);
    let neg = rep.summary(Subset::Negative).unwrap();
    assert_eq!((neg.mean_dice, neg.mean_pred_fraction), (1.0, 0.0));
    let n_pos = rep.rows.iter().filter(|r| r.positive).count() as f64;
    assert!((rep.mean_dice - (1.0 - n_pos / rep.rows.len() as f64)).abs() < 1e-12);
}

#[test]
fn row_set_covers_every_prompt() {
    let data = tiny_dataset(11);
    let rep = evaluate(&mut Empty, &data, Split::Test, PromptSelection::AllVariants).unwrap();
    let mut want = 0;
    for i in data.indices(Split::Test) {
        let c = data.case(i).unwrap();
        want += c.prompt_bank.values().chain(c.negative_bank.values()).map(Vec::len).sum::<usize>();
    }
    assert_eq!(rep.rows.len(), want);
    let canon = evaluate(&mut Empty, &data, Split::Test, PromptSelection::Canonical).unwrap();
    let keys: usize = data
        .indices(Split::Test)
        .iter()
        .map(|&i| {
            let c = data.case(i).unwrap();
            c.prompt_bank.len() + c.negative_bank.len()
        })
        .sum();
    assert_eq!(canon.rows.len(), keys);
}

#[test]
fn aggregates_match_recomputation_from_the_table() {
    let data = tiny_dataset(12);
    let rep = evaluate(&mut Blind { fail_above: f32::MAX }, &data, Split::Test, PromptSelection::AllVariants).unwrap();
    let tsv = rep.to_tsv();
    let mut lines = tsv.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let col = header.iter().position(|h| *h == "dice").unwrap();
    let dices: Vec<f64> = lines.map(|l| l.split('\t').nth(col).unwrap().parse().unwrap()).collect();
    assert_eq!(dices.len(), rep.rows.len());
    let mean = dices.iter().sum::<f64>() / dices.len() as f64;
    assert!((mean - rep.mean_dice).abs() < 1e-6);
    let hits = dices.iter().filter(|&&d| d >= 0.05).count() as f64 / dices.len() as f64;
    assert!((hits - rep.hit_rate_5).abs() < 1e-12);
    assert_eq!(rep.hit_rate_5, hit_rate(&rep.rows.iter().map(|r| r.dice).collect::<Vec<_>>(), 0.05).unwrap());
    let rebuilt = MetricReport::from_rows(rep.rows.clone(), vec![]).unwrap();
    assert_eq!(rebuilt.mean_dice, rep.mean_dice);
    for sub in [Subset::Positive, Subset::Negative, Subset::Spatial] {
        let rows: Vec<_> = rep.rows.iter().filter(|r| sub.contains(r)).collect();
        if let Some(s) = rep.summary(sub) {
            assert_eq!(s.rows, rows.len());
            let m = rows.iter().map(|r| r.dice).sum::<f64>() / rows.len() as f64;
            assert!((m - s.mean_dice).abs() < 1e-12);
        }
    }
    let json = rep.summary_json();
    assert_eq!(json["all"]["rows"].as_u64().unwrap() as usize, rep.rows.len());
}

#[test]
fn failing_cases_are_recorded_not_fatal() {
    let data = tiny_dataset(13);
    let firsts: Vec<f32> = data
        .indices(Split::Test)
        .iter()
        .map(|&i| data.case(i).unwrap().volume.data[0])
        .collect();
    let mut sorted = firsts.clone();
    sorted.sort_by(f32::total_cmp);
    let cut = sorted[sorted.len() / 2];
    let rep = evaluate(&mut Blind { fail_above: cut }, &data, Split::Test, PromptSelection::Canonical).unwrap();
    let failing = firsts.iter().filter(|&&v| v > cut).count();
    assert!(failing > 0);
    assert_eq!(rep.errors.len(), failing);
    let err = evaluate(&mut Blind { fail_above: f32::MIN }, &data, Split::Test, PromptSelection::Canonical);
    assert!(err.is_err());
}

#[test]
fn thresholding_convention() {
    let dims = [2, 2, 2];
    let f = |v: f32| Field::from_vec(1, dims, vec![v; 8]).unwrap();
    assert_eq!(threshold_logits(&f(-10.0), 0.5).unwrap().count(), 0);
    assert_eq!(threshold_logits(&f(10.0), 0.5).unwrap().count(), 8);
    assert_eq!(threshold_logits(&f(0.0), 0.5).unwrap().count(), 8);
}

#[test]
fn network_predictions_are_deterministic_and_checked() {
    let data = tiny_dataset(14);
    let net = FusionNet::new(tiny_net()).unwrap();
    let ck = Checkpoint::new(tiny_net(), net.init_params(3)).unwrap();
    let emb = data.prompt_embedder().unwrap();
    let case = data.case(0).unwrap();
    let a = predict(&ck, &case.volume, "sphere", &emb).unwrap();
    let b = predict(&ck, &case.volume, "sphere", &emb).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dims, case.dims());
    let many = NetPredictor::new(ck.clone(), emb.clone())
        .unwrap()
        .predict_many(&case.volume, &["ball", "sphere"])
        .unwrap();
    assert_eq!(many[1], a);
    let bad = Field::<f32>::zeros(1, [16, 16, 10]);
    assert!(predict(&ck, &bad, "sphere", &emb).is_err());
    let mut other = tiny_net();
    other.text_dim = 16;
    let ck2 = Checkpoint::new(other.clone(), FusionNet::new(other).unwrap().init_params(0)).unwrap();
    assert!(NetPredictor::new(ck2, emb).is_err());
}

#[test]
fn stability_over_variants() {
    let data = tiny_dataset(15);
    let cfg = StabilityConfig::default();
    let variants = stability_variants(&data, &cfg).unwrap();
    for (key, vs) in &variants {
        assert!(vs.len() >= 2, "{key}");
        let syn = vs.iter().filter(|v| v.1 == VariantKind::Synonym).count();
        let typos = vs.iter().filter(|v| v.1 == VariantKind::Typo).count();
        assert!(syn >= 1 && typos >= 1);
        let unique: BTreeSet<_> = vs.iter().map(|v| &v.0).collect();
        assert_eq!(unique.len(), vs.len());
    }
    let rep = prompt_stability(&mut Blind { fail_above: f32::MAX }, &data, &cfg).unwrap();
    let covered: Vec<&String> = rep.spreads.iter().map(|s| &s.target).collect();
    let expected_rows: usize = covered.iter().map(|k| variants[*k].len()).sum();
    assert_eq!(rep.rows.len(), expected_rows);
    for s in &rep.spreads {
        assert_eq!(s.min, s.max, "prompt-blind predictor must not vary: {s:?}");
        assert_eq!(s.iqr, 0.0);
        let cases: BTreeSet<usize> = rep.rows.iter().filter(|r| r.target == s.target).map(|r| r.cases).collect();
        assert_eq!(cases.len(), 1);
    }
    assert_eq!(covered.len() + rep.skipped.len(), variants.len());

    let oracle = prompt_stability(&mut Oracle::new(&data), &data, &cfg).unwrap();
    for r in &oracle.rows {
        // typos fall outside the prompt bank, so the oracle answers empty
        let want = if r.kind == VariantKind::Synonym { 1.0 } else { 0.0 };
        assert_eq!(r.mean_dice, want, "{r:?}");
    }
}

fn tiny_ablation(seeds: Vec<u64>) -> AblationSpec {
    let net = tiny_net();
    let mask = NetworkConfig::finest_k_mask(3, 2);
    let v = |name: &str| AblationVariant {
        name: name.into(),
        fusion_stage_mask: mask.clone(),
        deep_supervision: true,
    };
    AblationSpec {
        variants: vec![v("a"), v("b")],
        ordering: Some(("a".into(), "b".into())),
        ..AblationSpec::standard(net, tiny_train_config(1, 2), seeds)
    }
}

#[test]
fn identical_variants_tie_and_runs_repeat() {
    let data = tiny_dataset(16);
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_ablation(vec![1, 2]);
    let t1 = run_ablation(&data, &spec, Some(dir.path())).unwrap();
    let t2 = run_ablation(&data, &spec, None).unwrap();
    assert_eq!(t1, t2);
    assert_eq!(t1.rows[0].seeds, t1.rows[1].seeds);
    let ord = t1.ordering.as_ref().unwrap();
    assert_eq!(ord.difference, 0.0);
    assert!(!ord.holds);
    assert!(dir.path().join("ablation.tsv").exists());
    assert!(dir.path().join("a_seed1").join("eval.tsv").exists());
    let tsv = std::fs::read_to_string(dir.path().join("ablation.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 2 * 3);
    for r in &t1.rows {
        let m = r.seeds.iter().map(|s| s.positive_dice).sum::<f64>() / 2.0;
        assert!((m - r.positive.mean).abs() < 1e-12);
        for s in &r.seeds {
            let dice_ok = (0.0..=1.0).contains(&s.positive_dice);
            assert!(dice_ok && s.final_loss.is_finite());
        }
    }
}

#[test]
fn ablation_specs_are_validated() {
    let data = tiny_dataset(17);
    let mut one_seed = tiny_ablation(vec![1]);
    assert!(run_ablation(&data, &one_seed, None).is_err());
    one_seed.seeds = vec![1, 2];
    one_seed.variants.pop();
    assert!(one_seed.validate().is_err());
    let mut dup = tiny_ablation(vec![1, 2]);
    dup.variants[1].name = "a".into();
    assert!(dup.validate().is_err());
    let mut unknown = tiny_ablation(vec![1, 2]);
    unknown.ordering = Some(("a".into(), "zzz".into()));
    assert!(unknown.validate().is_err());
    let mut bad_mask = tiny_ablation(vec![1, 2]);
    bad_mask.variants[0].fusion_stage_mask = vec![true];
    assert!(bad_mask.validate().is_err());
    let std = AblationSpec::standard(tiny_net(), tiny_train_config(1, 1), vec![0, 1]);
    let names: Vec<&str> = std.variants.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(names, vec!["fusion-1", "fusion-2", "fusion-2+ds"]);
    assert_eq!(std.ordering, Some(("fusion-2+ds".into(), "fusion-1".into())));
}

#[test]
fn dice_of_identical_masks() {
    let m = common::ball_mask([8, 8, 8], [4.0, 4.0, 4.0], 2.0);
    assert_eq!(dice_metric(&m, &m).unwrap(), 1.0);
}
