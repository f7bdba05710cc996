use evitraffic::artifact::Stamp;
use evitraffic::lwr::{Rarity, Sample};
use evitraffic::model::checkpoint::CHECKPOINT_VERSION;
use evitraffic::model::{
    scheduled_sampling_prob, train, Checkpoint, DecodeMode, Model, ModelConfig, ModelError, TrainConfig, TrainState,
};
use evitraffic::roadgraph::RoadGraph;
use evitraffic::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn chain(n: usize) -> RoadGraph {
    RoadGraph::corridor(&vec![2; n], 0.4, 2.0).unwrap()
}

fn tiny_config(enc: usize, dec: usize) -> ModelConfig {
    ModelConfig {
        hidden_dim: 3,
        key_dim: 2,
        feature_dim: 3,
        degree_speed: 1,
        degree_flow: 2,
        encoder_steps: enc,
        decoder_steps: dec,
        ..ModelConfig::default()
    }
}

fn sample(id: u64, nodes: usize, steps: usize, speed: impl Fn(usize, usize) -> f64, flow: impl Fn(usize, usize) -> f64) -> Sample {
    let mut s = Sample {
        id,
        scenario_id: 0,
        offset: id as u32,
        rarity: Rarity::Recurrent,
        speed: Vec::with_capacity(nodes * steps),
        flow: Vec::with_capacity(nodes * steps),
    };
    for t in 0..steps {
        for i in 0..nodes {
            s.speed.push(speed(t, i) as f32);
            s.flow.push(flow(t, i) as f32);
        }
    }
    s
}

/// A queue that starts at the downstream end and spreads upstream.
fn congestion_wave(id: u64, nodes: usize, steps: usize, phase: f64) -> Sample {
    sample(
        id,
        nodes,
        steps,
        |t, i| {
            let front = nodes as f64 - 0.4 * t as f64 - phase;
            if (i as f64) > front {
                25.0 + 3.0 * i as f64
            } else {
                115.0 - 2.0 * i as f64
            }
        },
        |t, i| 1200.0 + 40.0 * ((t + i) as f64 * 0.7 + phase).sin(),
    )
}

fn random_model(graph: RoadGraph, cfg: ModelConfig, seed: u64) -> Model {
    let mut m = Model::new(graph, cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in m.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    m
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    const STEP: f64 = 1e-5;
    const REL_TOL: f64 = 1e-4;
    const REL_FLOOR: f64 = 1e-6;
    let nodes = 5;
    let cfg = tiny_config(1, 2);
    let model = random_model(chain(nodes), cfg, 5);
    let samples: Vec<Sample> = (0..2).map(|k| congestion_wave(k, nodes, 3, 1.3 * k as f64)).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let data = model.batch(&refs).unwrap();
    let mask = [true, false];
    let (_, grads) = model.loss_and_grads(&data, &mask).unwrap();

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        for i in 0..g.numel() {
            let orig = probe.params().tensors()[k].data()[i];
            probe.params_mut().tensors_mut()[k].data_mut()[i] = orig + STEP;
            let up = probe.loss(&data, &mask).unwrap();
            probe.params_mut().tensors_mut()[k].data_mut()[i] = orig - STEP;
            let down = probe.loss(&data, &mask).unwrap();
            probe.params_mut().tensors_mut()[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let a = g.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
            assert!(
                rel < REL_TOL,
                "{}[{i}]: analytic {a} fd {fd} rel {rel}",
                model.params().names()[k]
            );
        }
    }
    assert!(worst.is_finite());
}

#[test]
fn horizon_matches_decoder_steps() {
    let nodes = 4;
    let cfg = ModelConfig {
        hidden_dim: 4,
        key_dim: 2,
        feature_dim: 4,
        degree_speed: 2,
        degree_flow: 3,
        ..ModelConfig::default()
    };
    assert_eq!((cfg.encoder_steps, cfg.decoder_steps), (20, 15));
    let model = Model::new(chain(nodes), cfg, 1).unwrap();
    let s = congestion_wave(0, nodes, 35, 0.0);
    for mode in [DecodeMode::FreeRun, DecodeMode::TeacherForced] {
        let p = &model.predict(&[&s], mode, 4).unwrap()[0];
        assert_eq!(p.steps, 15);
        assert_eq!(p.speed.len(), 15 * nodes);
        for idx in 0..p.speed.len() {
            let n = p.nig(idx);
            assert!(n.nu > 0.0 && n.alpha > 1.0 && n.beta > 0.0);
            assert!((0.0..=130.0).contains(&p.speed[idx]));
            assert!(p.flow[idx] >= 0.0);
        }
    }
}

#[test]
fn teacher_forcing_isolates_steps_from_later_targets() {
    let nodes = 4;
    let cfg = tiny_config(3, 5);
    let model = random_model(chain(nodes), cfg, 2);
    let base = congestion_wave(0, nodes, 8, 0.5);
    let mut changed = base.clone();
    // Target of decoder step 2 (absolute step 5) becomes the input of step 3.
    for i in 0..nodes {
        changed.speed[5 * nodes + i] += 30.0;
    }
    let tf = |s: &Sample| model.predict(&[s], DecodeMode::TeacherForced, 1).unwrap().remove(0);
    let (a, b) = (tf(&base), tf(&changed));
    for k in 0..5 {
        let same = (0..nodes).all(|i| a.speed[k * nodes + i] == b.speed[k * nodes + i]);
        assert_eq!(same, k <= 2, "decoder step {k}");
    }
    let fr = |s: &Sample| model.predict(&[s], DecodeMode::FreeRun, 1).unwrap().remove(0);
    assert_eq!(fr(&base), fr(&changed));
}

#[test]
fn edge_orientation_changes_predictions() {
    let nodes = 8;
    let graph = chain(nodes);
    let cfg = ModelConfig {
        degree_speed: 2,
        degree_flow: 3,
        ..tiny_config(4, 3)
    };
    let forward = random_model(graph.clone(), cfg.clone(), 9);
    let reversed = Model::from_parts(graph.reversed(), cfg, forward.params().clone()).unwrap();
    let s = congestion_wave(0, nodes, 7, 0.0);
    let a = forward.predict(&[&s], DecodeMode::FreeRun, 1).unwrap().remove(0);
    let b = reversed.predict(&[&s], DecodeMode::FreeRun, 1).unwrap().remove(0);
    let diff: f64 = a.speed.iter().zip(&b.speed).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-3, "orientation had no effect ({diff})");
}

fn small_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 3,
        epochs,
        ..TrainConfig::default()
    }
}

fn wave_corpus(n: usize, nodes: usize, steps: usize) -> Vec<Sample> {
    (0..n).map(|k| congestion_wave(k as u64, nodes, steps, 0.37 * k as f64)).collect()
}

#[test]
fn training_is_deterministic_and_logs_the_schedule() {
    let nodes = 5;
    let cfg = tiny_config(4, 3);
    let samples = wave_corpus(7, nodes, 7);
    let refs: Vec<&Sample> = samples.iter().collect();
    let run = || {
        let mut m = Model::new(chain(nodes), cfg.clone(), 3).unwrap();
        let (state, log) = train(&mut m, &refs, &small_train_config(4), 17, None).unwrap();
        (m, state, log)
    };
    let (m1, s1, l1) = run();
    let (m2, s2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(s1, s2);
    assert_eq!(m1.params(), m2.params());
    let stamp = Stamp::new(17, &cfg);
    assert_eq!(l1.to_csv(&stamp), l2.to_csv(&stamp));
    assert_eq!(l1.records.len(), 4);
    for r in &l1.records {
        assert_eq!(r.batches, 3);
        assert!((r.p - (-1.25e-4 * r.iteration as f64).exp()).abs() < 1e-12);
        assert_eq!(r.p, scheduled_sampling_prob(r.iteration, cfg.decay_c));
    }
}

/// Checkpoints hold 32-bit floats, so a resumed run tracks the uninterrupted
/// one up to that rounding rather than bit for bit.
#[test]
fn resumed_training_tracks_uninterrupted_training() {
    let nodes = 5;
    let cfg = tiny_config(4, 3);
    let samples = wave_corpus(6, nodes, 7);
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut full = Model::new(chain(nodes), cfg.clone(), 4).unwrap();
    let (full_state, full_log) = train(&mut full, &refs, &small_train_config(4), 5, None).unwrap();

    let mut part = Model::new(chain(nodes), cfg, 4).unwrap();
    let (state, _) = train(&mut part, &refs, &small_train_config(2), 5, None).unwrap();
    let ck = Checkpoint {
        model: part,
        train: small_train_config(2),
        state,
        stamp: Stamp::new(5, &0u8),
    };
    let bytes = ck.to_bytes();
    let resume = || {
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        let mut m = back.model;
        let (s, log) = train(&mut m, &refs, &small_train_config(2), 5, Some(back.state)).unwrap();
        (m, s, log)
    };
    let (resumed, resumed_state, resumed_log) = resume();
    let again = resume();
    assert_eq!(again.1, resumed_state);
    assert_eq!(again.0.params(), resumed.params());

    assert_eq!(resumed_state.iteration, full_state.iteration);
    assert_eq!(resumed_state.epoch, full_state.epoch);
    assert_eq!(resumed_log.records.len(), 2);
    for (r, f) in resumed_log.records.iter().zip(&full_log.records[2..]) {
        assert_eq!((r.epoch, r.iteration, r.p, r.batches), (f.epoch, f.iteration, f.p, f.batches));
        assert!((r.mean_loss - f.mean_loss).abs() <= 1e-5 * (1.0 + f.mean_loss.abs()));
    }
    for (a, b) in resumed.params().tensors().iter().zip(full.params().tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-5 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn max_iterations_caps_optimiser_steps() {
    let nodes = 4;
    let samples = wave_corpus(10, nodes, 7);
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut m = Model::new(chain(nodes), tiny_config(4, 3), 1).unwrap();
    let tc = TrainConfig {
        max_iterations: Some(5),
        ..small_train_config(10)
    };
    let (state, log) = train(&mut m, &refs, &tc, 1, None).unwrap();
    assert_eq!(state.iteration, 5);
    assert_eq!(log.records.iter().map(|r| r.batches).sum::<usize>(), 5);
}

#[test]
fn empty_training_set_is_rejected() {
    let mut m = Model::new(chain(3), tiny_config(2, 2), 1).unwrap();
    assert!(matches!(
        train(&mut m, &[], &TrainConfig::default(), 1, None),
        Err(ModelError::Data(_))
    ));
}

#[test]
fn non_finite_loss_reports_the_batch() {
    let nodes = 3;
    let samples = wave_corpus(4, nodes, 4);
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut m = Model::new(chain(nodes), tiny_config(2, 2), 1).unwrap();
    let i = m.params().index_of("head.w").unwrap();
    m.params_mut().tensors_mut()[i].data_mut()[0] = f64::NAN;
    match train(&mut m, &refs, &small_train_config(1), 1, None) {
        Err(ModelError::NonFinite { epoch, batch, iteration }) => assert_eq!((epoch, batch, iteration), (0, 0, 0)),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn overfitting_one_sample_decreases_the_loss() {
    const WARMUP: usize = 20;
    const ITERATIONS: usize = 220;
    let nodes = 4;
    let cfg = ModelConfig {
        decay_c: 1e-12,
        ..tiny_config(4, 3)
    };
    let s = congestion_wave(0, nodes, 7, 0.8);
    let mut m = Model::new(chain(nodes), cfg, 6).unwrap();
    let tc = TrainConfig {
        batch_size: 1,
        epochs: ITERATIONS,
        learning_rate: 3e-4,
        ..TrainConfig::default()
    };
    let (_, log) = train(&mut m, &[&s], &tc, 2, None).unwrap();
    let losses: Vec<f64> = log.records.iter().map(|r| r.mean_loss).collect();
    for w in losses[WARMUP..].windows(2) {
        assert!(w[1] < w[0], "loss rose from {} to {}", w[0], w[1]);
    }
    assert!(losses[ITERATIONS - 1] < losses[0]);
}

#[test]
fn constant_data_gives_constant_forecasts() {
    let nodes = 5;
    let cfg = tiny_config(4, 6);
    let samples: Vec<Sample> = (0..6).map(|k| sample(k, nodes, 10, |_, _| 120.0, |_, _| 900.0)).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut m = Model::new(chain(nodes), cfg, 8).unwrap();
    train(&mut m, &refs, &small_train_config(30), 8, None).unwrap();
    for p in m.predict(&refs, DecodeMode::FreeRun, 6).unwrap() {
        for v in &p.speed {
            assert!((v - 120.0).abs() < 1.0, "forecast {v}");
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let nodes = 5;
    let cfg = tiny_config(4, 3);
    let samples = wave_corpus(5, nodes, 7);
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut m = Model::new(chain(nodes), cfg.clone(), 2).unwrap();
    let tc = small_train_config(2);
    let (state, _) = train(&mut m, &refs, &tc, 3, None).unwrap();
    let ck = Checkpoint {
        model: m.clone(),
        train: tc,
        state: state.clone(),
        stamp: Stamp::new(3, &cfg),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.model.params(), m.params());
    assert_eq!(back.state, state);
    assert_eq!(back.stamp, ck.stamp);
    assert_eq!(back.to_bytes(), ck.to_bytes());
    assert_eq!(
        back.model.predict(&refs, DecodeMode::FreeRun, 2).unwrap(),
        m.predict(&refs, DecodeMode::FreeRun, 2).unwrap()
    );
}

#[test]
fn checkpoint_loader_rejects_mismatches() {
    let m = Model::new(chain(4), tiny_config(2, 2), 1).unwrap();
    let ck = Checkpoint {
        state: TrainState::fresh(&m),
        model: m,
        train: TrainConfig::default(),
        stamp: Stamp::new(1, &0u8),
    };
    let bytes = ck.to_bytes();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::read_from(&mut bad_magic.as_slice()), Err(ModelError::Format(_))));

    let mut bad_version = bytes.clone();
    bad_version[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let err = Checkpoint::read_from(&mut bad_version.as_slice()).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    // Same-length header edit: the blocks no longer fit the declared width.
    let key = b"\"hidden_dim\":3";
    let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
    let mut wrong_shape = bytes.clone();
    wrong_shape[at + 13] = b'4';
    assert!(matches!(Checkpoint::read_from(&mut wrong_shape.as_slice()), Err(ModelError::Shape(_))));

    let truncated = &bytes[..bytes.len() - 3];
    assert!(Checkpoint::read_from(&mut &truncated[..]).is_err());
}

#[test]
fn from_parts_rejects_wrong_layouts() {
    let m = Model::new(chain(4), tiny_config(2, 2), 1).unwrap();
    let mut params = m.params().clone();
    params.tensors_mut()[0] = Tensor::zeros(&[1, 1]);
    assert!(Model::from_parts(chain(4), tiny_config(2, 2), params).is_err());
}

/// Mean `ν + α` over every forecast of the incident-like samples.
fn mean_evidence(m: &Model, samples: &[&Sample]) -> f64 {
    let preds = m.predict(samples, DecodeMode::FreeRun, 8).unwrap();
    let (mut s, mut n) = (0.0, 0usize);
    for p in &preds {
        for (nu, a) in p.nu.iter().zip(&p.alpha) {
            s += nu + a;
            n += 1;
        }
    }
    s / n as f64
}

#[test]
fn regulariser_weight_experiment_is_recorded() {
    let nodes = 5;
    let mut samples = wave_corpus(12, nodes, 7);
    let rare = sample(99, nodes, 7, |t, i| if t >= 3 && i == 2 { 10.0 } else { 110.0 }, |_, _| 1000.0);
    samples.push(rare.clone());
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut out = Vec::new();
    for eps in [0.0, 0.01] {
        let cfg = ModelConfig {
            epsilon: eps,
            ..tiny_config(4, 3)
        };
        let mut m = Model::new(chain(nodes), cfg, 10).unwrap();
        train(&mut m, &refs, &small_train_config(6), 10, None).unwrap();
        let e = mean_evidence(&m, &[&rare]);
        assert!(e.is_finite() && e > 1.0);
        out.push(e);
    }
    println!("mean nu+alpha on the rare sample: eps=0 {:.6}, eps=0.01 {:.6}", out[0], out[1]);
}
