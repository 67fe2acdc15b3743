//! Trains on a generated corridor and reports per-epoch timing.
//!
//! `cargo run --release -p gcn-rwz --example train_synthetic -- [epochs] [segments] [days]`

use gcn_rwz::features::{windowize, FeatureBundle, FeatureOptions};
use gcn_rwz::graph::{build_hypergraph, hypergraph_operator};
use gcn_rwz::model::{Model, ModelConfig};
use gcn_rwz::synthetic::{generate, SyntheticConfig};
use gcn_rwz::training::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let epochs = args.first().copied().unwrap_or(2);
    let segments = args.get(1).copied().unwrap_or(8);
    let days = args.get(2).copied().unwrap_or(14);

    let corridor = generate(&SyntheticConfig {
        segments,
        days,
        ..SyntheticConfig::default()
    })?;
    let options = FeatureOptions::default();
    let bundle = FeatureBundle::build(&corridor.series, &corridor.calendar, &corridor.network, &corridor.events, options)?;
    let splits = windowize(&bundle)?;
    let config = ModelConfig::default();
    let g_op = hypergraph_operator(&build_hypergraph(&corridor.network, config.k_neighbors)?)?;
    let model = Model::new(config, segments, corridor.calendar.slots_per_week())?;
    let params = model.init_params(0);
    println!(
        "{} parameters, {} train / {} val / {} test samples",
        params.scalar_count(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    let outcome = train(
        &model,
        params,
        &splits.train,
        &splits.val,
        &g_op,
        bundle.normalizer,
        &TrainConfig {
            epochs,
            ..TrainConfig::default()
        },
    )?;
    for e in &outcome.history.epochs {
        println!(
            "epoch {:>3}  train {:.4}  val MAE {:.3} MPH  {:.1}s",
            e.epoch, e.train_loss, e.val_mae, e.wall_seconds
        );
    }
    Ok(())
}
