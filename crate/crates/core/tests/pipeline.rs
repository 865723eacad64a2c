mod common;

use common::*;
use timecast::evaluation::{cross_validate, evaluate_models};
use timecast::ingest::{load_collection, write_atomic, write_collection, DatasetSpec};
use timecast::segmentation::learn_with;
use timecast::streaming::{online_model_update, OnlineOptions, StreamSession, StreamingModel};
use timecast::synthetic::generate_synthetic;
use timecast::{Exec, HyperParams, ModelSet};

fn hyper(k: usize) -> HyperParams {
    HyperParams {
        k_init: k,
        seed: Some(1),
        ..Default::default()
    }
}

#[test]
fn sequential_and_parallel_learning_agree() {
    let (c, _) = generate_synthetic(&three_stage_spec(21, 12)).unwrap();
    let a = learn_with(&c, &hyper(4), Exec::Sequential).unwrap();
    let b = learn_with(&c, &hyper(4), Exec::Parallel).unwrap();
    assert_eq!(a.models, b.models);
    assert_eq!(a.assignments, b.assignments);
    assert_eq!(a.report, b.report);
}

#[test]
fn learning_prunes_surplus_stages_and_stays_monotone() {
    let (c, _) = generate_synthetic(&three_stage_spec(22, 15)).unwrap();
    let out = learn_with(&c, &hyper(6), Exec::default()).unwrap();
    let r = &out.report;
    assert!(r.converged);
    assert_eq!(r.final_k, out.models.k());
    assert_eq!(r.stage_counts.iter().sum::<u64>() as usize, c.total_ticks());
    assert!(r.max_decrease() <= 1e-9 * r.half_step_trace[0].abs());
    assert_eq!(r.objective_trace.len(), r.iterations + 1);
    assert_eq!(r.half_step_trace.len(), 2 * r.iterations + 1);

    let keep = learn_with(
        &c,
        &HyperParams {
            prune_empty_stages: false,
            ..hyper(6)
        },
        Exec::default(),
    )
    .unwrap();
    assert_eq!(keep.models.k(), 6);
}

#[test]
fn model_json_round_trip_keeps_predictions() {
    let (c, _) = generate_synthetic(&three_stage_spec(23, 8)).unwrap();
    let out = learn_with(&c, &hyper(3), Exec::default()).unwrap();
    let text = out.models.to_json().unwrap();
    assert!(text.contains("\"schema_version\""));
    let back = ModelSet::from_json(&text).unwrap();
    let r1 = evaluate_models(&out.models, &c, Some(10), 0, Exec::default()).unwrap();
    let r2 = evaluate_models(&back, &c, Some(10), 0, Exec::default()).unwrap();
    assert_eq!(r1, r2);
    assert!(r1.ibs.unwrap() >= 0.0 && r1.ibs.unwrap() <= 1.0);
}

#[test]
fn csv_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (c, _) = generate_synthetic(&three_stage_spec(24, 3)).unwrap();
    let mut buf = Vec::new();
    write_collection(&c, &mut buf).unwrap();
    let path = dir.path().join("data.csv");
    write_atomic(&path, &buf).unwrap();
    let back = load_collection(&DatasetSpec::new(&path)).unwrap();
    assert_eq!(back, c);
}

#[test]
fn session_growth_keeps_stream_on_same_stage() {
    let (c, _) = generate_synthetic(&three_stage_spec(25, 10)).unwrap();
    let models = learn_with(&c, &hyper(3), Exec::default()).unwrap().models;
    let model = StreamingModel::new(models.clone()).unwrap();
    let mut session = StreamSession::new("live", &models);
    let seq = &c.sequences[0];
    let mut last = None;
    for o in seq.observations.iter().take(30) {
        last = Some(session.push(&o.values, &model).unwrap());
    }
    let before = session.state.current_stage;
    session.state.insert_stage(0);
    assert_eq!(session.state.current_stage, before + 1);
    assert_eq!(session.state.gamma.len(), models.k() + 1);
    assert_eq!(last.unwrap().tick, 30);
    assert_eq!(session.state.history.len(), 30);
}

#[test]
fn online_update_reports_and_respects_adoption_rule() {
    let (train, _) = generate_synthetic(&three_stage_spec(26, 10)).unwrap();
    let h = hyper(2);
    let models = learn_with(&train, &h, Exec::default()).unwrap().models;
    let (streams, _) = generate_synthetic(&three_stage_spec(27, 4)).unwrap();
    for s in &streams.sequences {
        let (grown, report) = online_model_update(&models, s, &h, &OnlineOptions::default()).unwrap();
        assert_eq!(report.k_before, models.k());
        if report.accepted {
            assert!(report.mape_after.unwrap() < report.mape_before.unwrap());
            assert_eq!(grown.k(), models.k() + 1);
            assert_eq!(report.k_after, grown.k());
        } else {
            assert_eq!(grown, models);
        }
    }
}

#[test]
fn cross_validation_reports_every_fold() {
    let (c, _) = generate_synthetic(&three_stage_spec(28, 10)).unwrap();
    let r = cross_validate(&c, &hyper(3), 5, 3, Some(20), Exec::default()).unwrap();
    assert_eq!(r.folds.len(), 5);
    let table = r.table();
    assert_eq!(table.lines().count(), 7);
    assert!(r.mean_mape > 0.0 && r.mean_ibs.unwrap() < 1.0);
}
