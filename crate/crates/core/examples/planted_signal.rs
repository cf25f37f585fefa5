//! Trains one variant on the planted-signal desk corpus and reports test
//! accuracy.
//!
//! ```text
//! cargo run --release --example planted_signal -- [variant] [seed] [epochs]
//! ```

use std::time::Instant;

use macroformer::data::{GeneratorSpec, Split};
use macroformer::eval::evaluate;
use macroformer::models::{MacroModel, ModelConfig, Variant};
use macroformer::training::{train_model, TrainConfig};

fn main() -> macroformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().unwrap_or_else(|| "full".into()).parse()?;
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse()).expect("seed must be an integer");
    let epochs: usize = args.next().map_or(Ok(10), |s| s.parse()).expect("epochs must be an integer");

    let spec = GeneratorSpec { seed, ..GeneratorSpec::default() };
    let data = spec.dataset()?;
    let cfg = ModelConfig::desk(variant, spec.action_count());
    let model = MacroModel::new(&cfg, seed)?;
    println!("{variant}: {} parameters, {} replays", model.num_parameters(), data.replays.len());

    let tc = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let start = Instant::now();
    let out = train_model(model, &tc, &data, &mut |r| {
        println!(
            "epoch {} lr {:.2e} loss {:.4} val gsp {:.3} bop {:.3} [{:.1?}]",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_gsp,
            r.val_bop,
            start.elapsed()
        )
    })?;
    let test = evaluate(&out.final_checkpoint.to_model()?, &data, Split::Test)?;
    println!(
        "test gsp {:.3} bop {:.3} (chance {:.3}) over {} steps",
        test.gsp_mean_acc,
        test.bop_mean_acc,
        1.0 / spec.action_count() as f64,
        test.steps
    );
    Ok(())
}
