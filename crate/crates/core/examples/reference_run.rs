//! Trains on the reference synthetic dataset and prints the epoch log.
//! Optional arguments: flat JSON config overrides, then a synthetic
//! dataset spec as JSON.

use std::time::Instant;

use mlc_core::config::RunConfig;
use mlc_core::data::{generate_synthetic, SynthSpec};
use mlc_core::run::build_model;
use mlc_core::train::{train, validation_map};

fn main() -> mlc_core::Result<()> {
    let overrides = std::env::args().nth(1).unwrap_or_else(|| "{}".into());
    let cfg = RunConfig::from_flat_json(&overrides)?;
    let spec: SynthSpec = match std::env::args().nth(2) {
        Some(json) => serde_json::from_str(&json)?,
        None => SynthSpec::reference(),
    };
    let data = generate_synthetic(&spec)?;
    let (arch, mut store) = build_model(&cfg, &data)?;
    println!("parameters: {}", store.num_scalars());
    println!(
        "untrained val mAP: {:.4}",
        validation_map(&arch, &store, &data.val)?
    );
    let start = Instant::now();
    let out = train(
        &arch,
        &mut store,
        &data.train,
        &data.val,
        &cfg.train,
        cfg.seed,
        |r| {
            println!(
                "epoch {:>2} loss {:.5} lr {:.5} val {:.4} ema {:.4} {:.1}s",
                r.epoch,
                r.train_loss,
                r.lr,
                r.val_map,
                r.ema_val_map,
                start.elapsed().as_secs_f64()
            );
            Ok(())
        },
    )?;
    println!(
        "best ema mAP {:.4} at epoch {}",
        out.best_ema_map, out.best_epoch
    );
    Ok(())
}
