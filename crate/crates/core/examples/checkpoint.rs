//! Trains briefly, saves a checkpoint, reloads it and confirms the reloaded
//! model reproduces the logged validation metrics exactly.
//!
//! ```text
//! cargo run --release --example checkpoint -- [path]
//! ```

use macroformer::data::{GeneratorSpec, Split};
use macroformer::eval::evaluate;
use macroformer::models::{ModelConfig, Variant};
use macroformer::training::{train, Checkpoint, TrainConfig, FROZEN_SET};

fn main() -> macroformer::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "model.ckpt".into());
    let spec = GeneratorSpec { replays: 100, ..GeneratorSpec::default() };
    let data = spec.dataset()?;
    let cfg = ModelConfig::desk(Variant::Full, spec.action_count());
    let out = train(&cfg, &TrainConfig { epochs: 2, ..TrainConfig::default() }, &data)?;

    out.final_checkpoint.save(&path)?;
    let size = std::fs::metadata(&path)?.len();
    let back = Checkpoint::load(&path)?;
    println!("saved {path} ({size} bytes, {} tensors, epoch {})", back.params.len(), back.epoch);
    println!("bytes identical after reload: {}", back.to_bytes()? == out.final_checkpoint.to_bytes()?);
    println!("trunk digest {}", back.digest(&FROZEN_SET));

    let logged = back.metrics.clone().expect("trained checkpoints carry metrics");
    let again = evaluate(&back.to_model()?, &data, Split::Val)?;
    println!(
        "val gsp logged {:.4} / reloaded {:.4}; bop logged {:.4} / reloaded {:.4}",
        logged.val_gsp, again.gsp_mean_acc, logged.val_bop, again.bop_mean_acc
    );
    Ok(())
}
