use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use evitraffic::artifact::Stamp;
use evitraffic::distill::{
    calibration_report, evaluate as evaluate_model, score_samples, split_preserve_remove, stream_filter, DistillReport,
    Metrics, SplitMode,
};
use evitraffic::lwr::{reference_corridor, Corpus, CorpusRecipe, Sample};
use evitraffic::model::{train as train_model, Checkpoint, DecodeMode, Model, ModelConfig, TrainConfig};
use evitraffic::roadgraph::{LowerBound, RoadGraph};

use crate::config::{required, DistillArgs, EvaluateArgs, SimulateArgs, StreamArgs, TrainArgs};
use crate::Failure;

const DEFAULT_BATCH: usize = 64;
const DEFAULT_WINDOW: usize = 100;

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> Result<Corpus, Failure> {
    Corpus::load(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn save_corpus(c: &Corpus, path: &Path) -> Result<(), Failure> {
    write(path, c.to_bytes())
}

fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<(), Failure> {
    write(path, c.to_bytes())
}

pub fn simulate(a: SimulateArgs, seed: u64) -> Result<(), Failure> {
    let out = required(a.out, "out")?;
    let graph = match (&a.graph, a.chain_nodes) {
        (Some(p), _) => RoadGraph::load(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?,
        (None, Some(n)) => RoadGraph::corridor(&vec![2; n], 0.4, 2.0)?,
        (None, None) => reference_corridor(),
    };
    let mut recipe = a.recipe.unwrap_or_default();
    if let Some(v) = a.horizon {
        recipe.horizon = v;
    }
    if let Some(v) = a.stride {
        recipe.stride = v;
    }
    if let Some(v) = a.repeats {
        recipe.repeats = v;
    }
    if let Some(v) = a.noise_sigma {
        recipe.noise_sigma = v;
    }
    if let Some(v) = a.speed_noise {
        recipe.speed_noise_kmh = v;
    }
    if let Some(names) = &a.patterns {
        select_patterns(&mut recipe, names)?;
    }
    if let Some(n) = a.incident_count {
        recipe.incidents.iter_mut().for_each(|p| p.count = n);
        recipe.incidents.retain(|p| p.count > 0);
    }
    let corpus = recipe.build(&graph, seed)?;
    save_corpus(&corpus, &out)?;
    if let Some(csv) = &a.csv {
        write(csv, corpus.to_csv())?;
    }
    let rare = corpus.count_rare();
    println!(
        "samples {} recurrent {} rare {}",
        corpus.samples.len(),
        corpus.samples.len() - rare,
        rare
    );
    Ok(())
}

/// Keeps the named patterns, remapping incident plans onto the survivors.
fn select_patterns(recipe: &mut CorpusRecipe, names: &[String]) -> Result<(), Failure> {
    for n in names {
        if !recipe.patterns.iter().any(|p| &p.name == n) {
            return Err(Failure::Usage(format!("unknown demand pattern {n}")));
        }
    }
    let keep: Vec<usize> = (0..recipe.patterns.len())
        .filter(|&i| names.contains(&recipe.patterns[i].name))
        .collect();
    recipe.incidents.retain(|p| keep.contains(&p.pattern));
    for p in &mut recipe.incidents {
        p.pattern = keep.iter().position(|&k| k == p.pattern).expect("retained");
    }
    recipe.patterns = keep.iter().map(|&i| recipe.patterns[i].clone()).collect();
    Ok(())
}

fn apply_train_overrides(a: &TrainArgs, tc: &mut TrainConfig) {
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        tc.learning_rate = v;
    }
    if a.max_iterations.is_some() {
        tc.max_iterations = a.max_iterations;
    }
    if let Some(v) = a.grad_clip {
        tc.grad_clip = v;
    }
}

fn model_config(a: &TrainArgs, corpus: &Corpus) -> Result<ModelConfig, Failure> {
    let bound = if a.closed_bound.unwrap_or(false) {
        LowerBound::Closed
    } else {
        LowerBound::Strict
    };
    let mut cfg = ModelConfig::for_graph(&corpus.graph, bound)?;
    cfg.encoder_steps = corpus.header.window_in;
    cfg.decoder_steps = corpus.header.window_out;
    if let Some(v) = a.hidden_dim {
        cfg.hidden_dim = v;
    }
    if let Some(v) = a.key_dim {
        cfg.key_dim = v;
    }
    if let Some(v) = a.feature_dim {
        cfg.feature_dim = v;
    }
    if let Some(v) = a.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = a.regularizer {
        cfg.regularizer = v.into();
    }
    if let Some(v) = a.decay_c {
        cfg.decay_c = v;
    }
    if let Some(v) = a.flow_loss_weight {
        cfg.flow_loss_weight = v;
    }
    if let Some(v) = a.input_variance {
        cfg.input_total_variance = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn training_stamp(seed: u64, model: &Model, tc: &TrainConfig, corpus: &Corpus) -> Stamp {
    Stamp::new(seed, &(model.config(), tc, corpus.header.stamp.hash_hex()))
}

fn refs(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().collect()
}

pub fn train(a: TrainArgs, seed: u64) -> Result<(), Failure> {
    let corpus_path = required(a.corpus.clone(), "corpus")?;
    let out = required(a.checkpoint.clone(), "checkpoint")?;
    let corpus = load_corpus(&corpus_path)?;
    let (mut model, tc, seed, state) = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if a.hidden_dim.is_some() || a.epsilon.is_some() || a.decay_c.is_some() || a.regularizer.is_some() {
                log::warn!("model options are ignored when resuming; the checkpoint's configuration is used");
            }
            let mut tc = ck.train.clone();
            apply_train_overrides(&a, &mut tc);
            (ck.model, tc, ck.stamp.seed, Some(ck.state))
        }
        None => {
            let cfg = model_config(&a, &corpus)?;
            let mut tc = TrainConfig::default();
            apply_train_overrides(&a, &mut tc);
            (Model::new(corpus.graph.clone(), cfg, seed)?, tc, seed, None)
        }
    };
    model.check_corpus(&corpus)?;
    let (state, log) = train_model(&mut model, &refs(&corpus.samples), &tc, seed, state)?;
    let stamp = training_stamp(seed, &model, &tc, &corpus);
    let log_path = a.log.unwrap_or_else(|| with_suffix(&out, ".log.csv"));
    write(&log_path, log.to_csv(&stamp))?;
    let last = log.records.last().map(|r| r.mean_loss);
    let ck = Checkpoint {
        model,
        train: tc,
        state,
        stamp,
    };
    save_checkpoint(&ck, &out)?;
    println!(
        "epochs {} iteration {} final mean loss {}",
        ck.state.epoch,
        ck.state.iteration,
        last.map_or("n/a".into(), |l| format!("{l:.6}"))
    );
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn metrics_row(out: &mut String, name: &str, mode: DecodeMode, m: &Metrics) {
    let w = m.weighted_mae.map_or(String::new(), |v| format!("{v:e}"));
    let mode = match mode {
        DecodeMode::FreeRun => "free-run",
        DecodeMode::TeacherForced => "teacher-forced",
    };
    let _ = writeln!(out, "{name},{mode},{},{:e},{:e},{:e},{w}", m.points, m.mae, m.mape, m.rmse);
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let ck = load_checkpoint(&required(a.checkpoint, "checkpoint")?)?;
    let corpus = load_corpus(&required(a.corpus, "corpus")?)?;
    let out = required(a.out, "out")?;
    ck.model.check_corpus(&corpus)?;
    let mode: DecodeMode = a.decode.map_or(DecodeMode::FreeRun, Into::into);
    let batch = a.batch_size.unwrap_or(DEFAULT_BATCH);
    let samples = refs(&corpus.samples);
    let e = evaluate_model(&ck.model, &samples, mode, batch)?;
    let stamp = Stamp::new(
        ck.stamp.seed,
        &(ck.stamp.hash_hex(), corpus.header.stamp.hash_hex(), mode),
    );
    let mut csv = stamp.csv_comment();
    csv.push_str("\nquantity,decode,points,mae,mape_pct,rmse,weighted_mae\n");
    metrics_row(&mut csv, "speed_kmh", mode, &e.speed);
    metrics_row(&mut csv, "flow_veh_h_lane", mode, &e.flow);
    write(&out, csv)?;
    if let Some(path) = a.calibration {
        write(&path, calibration_report(&ck.model, &samples, mode, batch)?.to_csv(&stamp))?;
    }
    println!(
        "speed mae {:.4} rmse {:.4} weighted mae {:.4}",
        e.speed.mae,
        e.speed.rmse,
        e.speed.weighted_mae.unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn distill(a: DistillArgs) -> Result<(), Failure> {
    let ck = load_checkpoint(&required(a.checkpoint, "checkpoint")?)?;
    let corpus = load_corpus(&required(a.corpus, "corpus")?)?;
    let report_path = required(a.report, "report")?;
    let (mode, pct) = match (a.preserve_lowest, a.remove_lowest) {
        (Some(p), _) => (SplitMode::PreserveLowest, p),
        (None, Some(p)) => (SplitMode::RemoveLowest, p),
        (None, None) => (
            a.mode.map_or(SplitMode::RemoveLowest, Into::into),
            required(a.pct, "pct")?,
        ),
    };
    ck.model.check_corpus(&corpus)?;
    let decode: DecodeMode = a.decode.map_or(DecodeMode::TeacherForced, Into::into);
    let scores = score_samples(
        &ck.model,
        &refs(&corpus.samples),
        decode,
        a.batch_size.unwrap_or(DEFAULT_BATCH),
    )?;
    let (kept, report) = split_preserve_remove(&corpus.samples, &scores, pct, mode)?;
    let stamp = Stamp::new(
        ck.stamp.seed,
        &(ck.stamp.hash_hex(), corpus.header.stamp.hash_hex(), pct, mode, decode),
    );
    write(&report_path, report.to_text(&stamp))?;
    println!(
        "threshold {:.6} kept {} removed {}",
        report.threshold,
        report.kept.len(),
        report.removed.len()
    );
    let mut subset = corpus.with_samples(kept);
    subset.header.stamp = stamp;
    if let Some(out) = &a.out {
        save_corpus(&subset, out)?;
    }
    if let Some(out) = &a.retrain {
        let seed = ck.stamp.seed;
        let mut model = Model::new(ck.model.graph().clone(), ck.model.config().clone(), seed)?;
        let (state, _) = train_model(&mut model, &refs(&subset.samples), &ck.train, seed, None)?;
        let stamp = training_stamp(seed, &model, &ck.train, &subset);
        save_checkpoint(
            &Checkpoint {
                model,
                train: ck.train.clone(),
                state,
                stamp,
            },
            out,
        )?;
    }
    Ok(())
}

pub fn stream(a: StreamArgs) -> Result<(), Failure> {
    let ck = load_checkpoint(&required(a.checkpoint, "checkpoint")?)?;
    let incoming = load_corpus(&required(a.incoming, "incoming")?)?;
    let out = required(a.out, "out")?;
    let log_path = required(a.log, "log")?;
    let threshold = match (&a.threshold_report, a.threshold) {
        (Some(p), _) => DistillReport::from_text(&read_text(p)?)?.threshold,
        (None, Some(t)) => t,
        (None, None) => {
            return Err(Failure::Usage(
                "missing threshold: pass --threshold or --threshold-report".into(),
            ))
        }
    };
    ck.model.check_corpus(&incoming)?;
    let base = match &a.merge {
        Some(p) => {
            let c = load_corpus(p)?;
            ck.model.check_corpus(&c)?;
            Some(c)
        }
        None => None,
    };
    let window = a.window.unwrap_or(DEFAULT_WINDOW);
    let decode: DecodeMode = a.decode.map_or(DecodeMode::TeacherForced, Into::into);
    let stamp = Stamp::new(
        ck.stamp.seed,
        &(
            ck.stamp.hash_hex(),
            incoming.header.stamp.hash_hex(),
            base.as_ref().map(|c| c.header.stamp.hash_hex()),
            threshold,
            window,
            decode,
        ),
    );
    let total = incoming.samples.len();
    let outcome = stream_filter(&ck.model, threshold, incoming.samples.clone(), window, decode)?;
    write(&log_path, outcome.log_csv(&stamp))?;
    let mut samples: Vec<Sample> = base.map(|c| c.samples).unwrap_or_default();
    samples.extend(outcome.kept.iter().cloned());
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = i as u64;
    }
    let merged = Corpus::new(
        incoming.graph.clone(),
        incoming.header.window_in,
        incoming.header.window_out,
        stamp,
        samples,
    )?;
    save_corpus(&merged, &out)?;
    println!(
        "incoming {total} malformed {} kept {} acceptance {:.4}",
        outcome.malformed,
        outcome.kept.len(),
        outcome.acceptance_rate()
    );
    Ok(())
}
