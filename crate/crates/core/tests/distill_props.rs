use std::collections::HashSet;

use evitraffic::distill::{
    calibration_report, distill_report, evaluate, ranking, score_samples, split_preserve_remove, stream_filter,
    threshold_at_percentile, weighted_mae, SampleScore, SplitMode,
};
use evitraffic::lwr::{Rarity, Sample};
use evitraffic::model::{train, DecodeMode, Model, ModelConfig, TrainConfig};
use evitraffic::roadgraph::RoadGraph;
use proptest::prelude::*;

fn scores_strategy() -> impl Strategy<Value = Vec<SampleScore>> {
    prop::collection::vec((0u32..40, any::<bool>()), 1..60).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (k, c))| SampleScore {
                sample_id: 1000 + i as u64 * 3,
                ku_mean: f64::from(k) * 0.25,
                congested: c,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn ranking_is_a_permutation(scores in scores_strategy()) {
        let r = ranking(&scores);
        let ids: HashSet<u64> = scores.iter().map(|s| s.sample_id).collect();
        prop_assert_eq!(r.len(), scores.len());
        prop_assert_eq!(r.iter().copied().collect::<HashSet<_>>(), ids);
    }

    #[test]
    fn preserve_and_remove_partition(scores in scores_strategy(), pct in 0.0f64..=100.0) {
        let keep_low = distill_report(&scores, pct, SplitMode::PreserveLowest).unwrap();
        let drop_low = distill_report(&scores, pct, SplitMode::RemoveLowest).unwrap();
        let a: HashSet<u64> = keep_low.kept.iter().copied().collect();
        let b: HashSet<u64> = drop_low.kept.iter().copied().collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len() + b.len(), scores.len());
        prop_assert_eq!(&keep_low.kept, &drop_low.removed);
        for r in [&keep_low, &drop_low] {
            let k: HashSet<u64> = r.kept.iter().copied().collect();
            let m: HashSet<u64> = r.removed.iter().copied().collect();
            prop_assert!(k.is_disjoint(&m));
            prop_assert_eq!(k.len() + m.len(), scores.len());
        }
        let score = |id: &u64| scores.iter().find(|s| s.sample_id == *id).unwrap().ku_mean;
        let low_max = drop_low.removed.iter().map(score).fold(f64::NEG_INFINITY, f64::max);
        let high_min = drop_low.kept.iter().map(score).fold(f64::INFINITY, f64::min);
        prop_assert!(low_max <= high_min);
    }

    #[test]
    fn percentile_is_monotone_and_bounded(values in prop::collection::vec(-50.0f64..50.0, 1..40), p in 0.0f64..=100.0, q in 0.0f64..=100.0) {
        let (lo, hi) = (p.min(q), p.max(q));
        let a = threshold_at_percentile(&values, lo).unwrap();
        let b = threshold_at_percentile(&values, hi).unwrap();
        prop_assert!(a <= b);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= min && b <= max);
    }

    #[test]
    fn weighted_mae_bounds_plain_mae(pairs in prop::collection::vec((0.0f64..130.0, 0.0f64..130.0), 1..50)) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mae = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        let w = weighted_mae(&p, &t).unwrap();
        prop_assert!(w >= mae);
        prop_assert!(w <= 4.0 * mae + 1e-12);
    }
}

fn graph(n: usize) -> RoadGraph {
    RoadGraph::corridor(&vec![2; n], 0.4, 2.0).unwrap()
}

fn model(nodes: usize) -> Model {
    let cfg = ModelConfig {
        hidden_dim: 4,
        key_dim: 2,
        feature_dim: 4,
        degree_speed: 1,
        degree_flow: 2,
        encoder_steps: 4,
        decoder_steps: 3,
        ..ModelConfig::default()
    };
    Model::new(graph(nodes), cfg, 2).unwrap()
}

fn sample(id: u64, nodes: usize, level: f64) -> Sample {
    let mut s = Sample {
        id,
        scenario_id: 0,
        offset: id as u32,
        rarity: Rarity::Recurrent,
        speed: Vec::new(),
        flow: Vec::new(),
    };
    for t in 0..7 {
        for i in 0..nodes {
            s.speed.push((level - 4.0 * (t * i) as f64 % 50.0).max(5.0) as f32);
            s.flow.push((900.0 + 30.0 * i as f64) as f32);
        }
    }
    s
}

fn corpus(nodes: usize, n: usize) -> Vec<Sample> {
    (0..n).map(|k| sample(k as u64, nodes, 40.0 + 9.0 * k as f64)).collect()
}

#[test]
fn scoring_is_deterministic_and_split_filters_samples() {
    let nodes = 4;
    let m = model(nodes);
    let samples = corpus(nodes, 10);
    let refs: Vec<&Sample> = samples.iter().collect();
    let a = score_samples(&m, &refs, DecodeMode::TeacherForced, 3).unwrap();
    let b = score_samples(&m, &refs, DecodeMode::TeacherForced, 10).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|s| s.ku_mean > 0.0 && s.ku_mean.is_finite()));

    let (kept, report) = split_preserve_remove(&samples, &a, 50.0, SplitMode::RemoveLowest).unwrap();
    assert_eq!(kept.len(), 5);
    assert_eq!(report.kept.len(), 5);
    let (all, _) = split_preserve_remove(&samples, &a, 100.0, SplitMode::PreserveLowest).unwrap();
    assert_eq!(all, samples);
    let (all, _) = split_preserve_remove(&samples, &a, 0.0, SplitMode::RemoveLowest).unwrap();
    assert_eq!(all, samples);
    assert!(split_preserve_remove(&samples, &a, 0.0, SplitMode::PreserveLowest).is_err());
    assert!(split_preserve_remove(&samples[..3], &a, 50.0, SplitMode::PreserveLowest).is_err());
}

#[test]
fn stream_filter_limits_and_conservation() {
    let nodes = 4;
    let m = model(nodes);
    let mut incoming = corpus(nodes, 11);
    incoming[3].speed.pop();
    incoming[7].flow[2] = f32::NAN;
    let run = |th: f64| stream_filter(&m, th, incoming.clone(), 4, DecodeMode::TeacherForced).unwrap();

    let none = run(f64::INFINITY);
    assert!(none.kept.is_empty());
    assert_eq!(none.malformed, 2);
    let all = run(0.0);
    assert_eq!(all.kept.len(), 9);
    assert_eq!(all.acceptance_rate(), 1.0);
    assert_eq!(all.windows.iter().map(|w| w.incoming).sum::<usize>(), 11);
    assert_eq!(all.windows.iter().map(|w| w.malformed).sum::<usize>(), 2);
    assert_eq!(all.windows.len(), 3);

    let refs: Vec<&Sample> = incoming.iter().filter(|s| s.speed.len() == 7 * nodes && s.flow.iter().all(|v| v.is_finite())).collect();
    let scores = score_samples(&m, &refs, DecodeMode::TeacherForced, 8).unwrap();
    let values: Vec<f64> = scores.iter().map(|s| s.ku_mean).collect();
    let th = threshold_at_percentile(&values, 50.0).unwrap();
    let half = run(th);
    assert_eq!(half, run(th));
    let expected = values.iter().filter(|&&v| v > th).count();
    assert_eq!(half.kept.len(), expected);
}

#[test]
fn calibration_columns_add_up() {
    let nodes = 4;
    let m = model(nodes);
    let samples = corpus(nodes, 6);
    let refs: Vec<&Sample> = samples.iter().collect();
    let rep = calibration_report(&m, &refs, DecodeMode::FreeRun, 4).unwrap();
    assert_eq!(rep.rows.len(), 3);
    for r in rep.rows.iter().chain([&rep.overall]) {
        let lhs = r.total_std * r.total_std;
        let rhs = r.data_std * r.data_std + r.knowledge_std * r.knowledge_std;
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.max(1e-300));
    }
    assert_eq!(rep.overall.points, 6 * 3 * nodes);
    let e = evaluate(&m, &refs, DecodeMode::FreeRun, 4).unwrap();
    assert!((e.speed.rmse - rep.overall.rmse).abs() < 1e-9);
    assert!(e.speed.weighted_mae.unwrap() >= e.speed.mae);
    assert_eq!(e.flow.points, e.speed.points);
}

/// A congestion wave moving upstream; `sample` above is free-flowing for
/// levels near the speed limit.
fn incident(id: u64, nodes: usize) -> Sample {
    let mut s = sample(id, nodes, 110.0);
    for t in 0..7 {
        for i in 0..nodes {
            if i + t >= nodes {
                s.speed[t * nodes + i] = 20.0 + 2.0 * i as f32;
                s.flow[t * nodes + i] = 1500.0;
            }
        }
    }
    s.rarity = Rarity::RareIncident;
    s
}

#[test]
fn a_unique_sample_outranks_a_heavily_duplicated_one() {
    let nodes = 4;
    let mut m = model(nodes);
    let mut samples: Vec<Sample> = (0..100).map(|k| sample(k, nodes, 110.0)).collect();
    samples.push(incident(100, nodes));
    let refs: Vec<&Sample> = samples.iter().collect();
    let tc = TrainConfig {
        epochs: 15,
        batch_size: 8,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    train(&mut m, &refs, &tc, 3, None).unwrap();
    let scores = score_samples(&m, &refs, DecodeMode::TeacherForced, 32).unwrap();
    let mut dup: Vec<f64> = scores[..100].iter().map(|s| s.ku_mean).collect();
    dup.sort_by(f64::total_cmp);
    let median = 0.5 * (dup[49] + dup[50]);
    assert!(scores[100].ku_mean > median, "unique {} vs duplicate median {median}", scores[100].ku_mean);
}
