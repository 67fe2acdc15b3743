//! Compares the full model with one whose construction weights stay at zero,
//! on work-zone and normal test cells of a generated corridor.
//!
//! `cargo run --release -p gcn-rwz --example workzone_value -- <seed> <epochs> <days> <history> <horizon> <zones> <incidents> <inc_max> <zone_min> <zone_max>`

use gcn_rwz::evaluation::{workzone_map, Condition, EvalSet};
use gcn_rwz::features::{windowize, FeatureBundle, FeatureOptions};
use gcn_rwz::graph::{build_hypergraph, hypergraph_operator};
use gcn_rwz::model::{Model, ModelConfig};
use gcn_rwz::synthetic::{generate, SyntheticConfig};
use gcn_rwz::training::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let get = |i: usize, d: usize| a.get(i).copied().unwrap_or(d);
    let (seed, epochs, days, history, horizon) = (get(0, 0) as u64, get(1, 20), get(2, 21), get(3, 6), get(4, 3));
    let corridor = generate(&SyntheticConfig {
        days,
        seed,
        work_zones: get(5, 24),
        incidents: get(6, 200),
        incident_steps: (1, get(7, 8)),
        work_zone_steps: (get(8, 16), get(9, 32)),
        ..SyntheticConfig::default()
    })?;
    let options = FeatureOptions {
        history,
        horizon,
        ..FeatureOptions::default()
    };
    let bundle = FeatureBundle::build(&corridor.series, &corridor.calendar, &corridor.network, &corridor.events, options)?;
    let splits = windowize(&bundle)?;
    let zones = workzone_map(&bundle, &corridor.network, 0.0)?;
    let config = ModelConfig {
        history,
        horizon,
        ..ModelConfig::default()
    };
    let g_op = hypergraph_operator(&build_hypergraph(&corridor.network, config.k_neighbors)?)?;
    let model = Model::new(config, corridor.network.len(), corridor.calendar.slots_per_week())?;
    println!("train {} val {} test {}", splits.train.len(), splits.val.len(), splits.test.len());
    for frozen in [false, true] {
        let started = std::time::Instant::now();
        let tc = TrainConfig {
            epochs,
            seed,
            frozen: if frozen { vec!["wave.construction".into()] } else { vec![] },
            ..TrainConfig::default()
        };
        let out = train(&model, model.init_params(seed), &splits.train, &splits.val, &g_op, bundle.normalizer, &tc)?;
        let set = EvalSet::build(&model, &out.params, &splits.test, &g_op, &bundle, &zones)?;
        let wz = set.metrics(horizon, Condition::Workzone)?;
        let nm = set.metrics(horizon, Condition::Normal)?;
        println!(
            "frozen={frozen} epochs={} best={} wz MAE {:.3} ({} cells) normal MAE {:.3} ({} cells) {:.0}s",
            out.history.epochs.len(),
            out.history.best_epoch,
            wz.mae.unwrap_or(f64::NAN),
            wz.count,
            nm.mae.unwrap_or(f64::NAN),
            nm.count,
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
