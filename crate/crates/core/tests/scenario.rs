//! What-if forecasts against a checkpoint bound to a generated corridor.

use chrono::Duration;
use gcn_rwz::checkpoint::Checkpoint;
use gcn_rwz::corridor::Corridor;
use gcn_rwz::evaluation::{segment_conditions, workzone_map};
use gcn_rwz::features::{FeatureBundle, FeatureOptions, WorkZoneEvent};
use gcn_rwz::graph::Neighbors;
use gcn_rwz::model::{Model, ModelConfig};
use gcn_rwz::scenario::{ScenarioEngine, ScenarioRequest};
use gcn_rwz::synthetic::{generate, SyntheticConfig};
use gcn_rwz::tensor::Tensor;
use gcn_rwz::Error;

fn engine() -> ScenarioEngine {
    let c = generate(&SyntheticConfig {
        segments: 5,
        days: 3,
        seed: 8,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let options = FeatureOptions {
        history: 6,
        horizon: 3,
        ..FeatureOptions::default()
    };
    let bundle = FeatureBundle::build(&c.series, &c.calendar, &c.network, &c.events, options).unwrap();
    let config = ModelConfig {
        heads: 2,
        head_dim: 2,
        channels: 4,
        rnn_hidden: 4,
        time_dim: 2,
        history: 6,
        horizon: 3,
        k_neighbors: Neighbors::Count(2),
        ..ModelConfig::default()
    };
    let model = Model::new(config, 5, c.calendar.slots_per_week()).unwrap();
    let mut params = model.init_params(1);
    // A live construction channel, so injected events matter.
    params.insert("wave.construction", Tensor::full(&[5, 6], -0.5));
    let checkpoint = Checkpoint {
        model,
        feature_options: options,
        segment_ids: bundle.segment_ids.clone(),
        normalizer: bundle.normalizer,
        params,
    };
    ScenarioEngine::new(checkpoint, Corridor { network: c.network, bundle }).unwrap()
}

fn request(engine: &ScenarioEngine, step: usize, events: Vec<WorkZoneEvent>) -> ScenarioRequest {
    ScenarioRequest {
        injected_events: events,
        anchor: engine.corridor.bundle.calendar.time_at(step),
        horizon: 3,
    }
}

#[test]
fn empty_scenario_has_exactly_zero_delta() {
    let e = engine();
    for step in (6..e.corridor.bundle.steps()).step_by(17) {
        let r = e.predict_scenario(&request(&e, step, vec![])).unwrap();
        assert!(r.delta.iter().flatten().all(|d| *d == 0.0));
        assert_eq!(r.baseline, r.scenario);
        assert_eq!(r.delta.len(), 5);
        assert!(r.delta.iter().all(|row| row.len() == 3));
    }
}

#[test]
fn injected_event_saturates_the_construction_window() {
    let e = engine();
    let cal = e.corridor.bundle.calendar;
    let anchor = 100;
    let event = WorkZoneEvent {
        segment_id: "seg002".into(),
        start: cal.time_at(anchor - 10),
        end: cal.time_at(anchor + 10),
    };
    let map = e.scenario_construction(anchor, std::slice::from_ref(&event)).unwrap();
    for t in anchor - 6..anchor {
        assert_eq!(map.at(2, t), 1.0);
        assert!(map.at(1, t) >= (-0.5f64).exp() - 1e-12);
    }
    // Outside the input window the real map is untouched.
    for t in (0..anchor - 6).chain(anchor..cal.len) {
        for i in 0..5 {
            assert_eq!(map.at(i, t), e.corridor.bundle.construction.at(i, t));
        }
    }
    let r = e.predict_scenario(&request(&e, anchor, vec![event])).unwrap();
    assert!(r.delta.iter().flatten().any(|d| *d != 0.0));
    for (row, b) in r.scenario.iter().zip(&r.baseline) {
        for (s, bv) in row.iter().zip(b) {
            assert!(*s >= 0.0 && *bv >= 0.0);
        }
    }
}

#[test]
fn requests_are_validated() {
    let e = engine();
    let cal = e.corridor.bundle.calendar;
    let bad_anchor = ScenarioRequest {
        anchor: cal.time_at(50) + Duration::minutes(7),
        ..request(&e, 50, vec![])
    };
    assert!(matches!(e.predict_scenario(&bad_anchor), Err(Error::OutOfRange(_))));
    assert!(matches!(e.predict_scenario(&request(&e, 3, vec![])), Err(Error::OutOfRange(_))));
    let late = ScenarioRequest {
        anchor: cal.time_at(cal.len + 5),
        ..request(&e, 50, vec![])
    };
    assert!(matches!(e.predict_scenario(&late), Err(Error::OutOfRange(_))));
    let zero = ScenarioRequest {
        horizon: 0,
        ..request(&e, 50, vec![])
    };
    assert!(matches!(e.predict_scenario(&zero), Err(Error::Parameter(_))));
    let unknown = WorkZoneEvent {
        segment_id: "nowhere".into(),
        start: cal.time_at(40),
        end: cal.time_at(60),
    };
    assert!(matches!(e.predict_scenario(&request(&e, 50, vec![unknown])), Err(Error::Schema(_))));
}

#[test]
fn snapshot_events_agree_with_condition_labels() {
    let e = engine();
    let bundle = &e.corridor.bundle;
    let zones = workzone_map(bundle, &e.corridor.network, 0.0).unwrap();
    for step in (0..bundle.steps()).step_by(11) {
        let snap = e.network_snapshot(Some(bundle.calendar.time_at(step))).unwrap();
        let labels = &segment_conditions(&[step], 1, &zones)[0];
        for i in 0..5 {
            let id = &bundle.segment_ids[i];
            let active = snap.active_events.iter().any(|ev| &ev.segment_id == id);
            assert_eq!(active, labels.at(&[i, 0]) == 1.0, "step {step} segment {id}");
        }
    }
}

#[test]
fn history_reports_gaps_as_missing() {
    let e = engine();
    let cal = e.corridor.bundle.calendar;
    let h = e.history("seg001", cal.time_at(0), cal.time_at(cal.len)).unwrap();
    assert_eq!(h.speeds.len(), cal.len);
    for (t, s) in h.speeds.iter().enumerate() {
        assert_eq!(s.is_some(), e.corridor.bundle.mask.at(1, t) == 1.0);
    }
    assert!(matches!(e.history("nope", cal.time_at(0), cal.time_at(4)), Err(Error::OutOfRange(_))));
    assert!(matches!(e.history("seg001", cal.time_at(4), cal.time_at(4)), Err(Error::Parameter(_))));
}
