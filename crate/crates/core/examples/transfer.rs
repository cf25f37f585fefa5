//! Trains the full model on a source matchup, then fine-tunes fresh heads on
//! a second matchup over the frozen trunk, and reports whether test GSP
//! reaches 0.90 within the transfer epoch budget.
//!
//! ```text
//! cargo run --release --example transfer -- [source] [target] [epochs]
//! ```

use macroformer::data::{GeneratorSpec, Matchup, Split};
use macroformer::eval::evaluate;
use macroformer::models::{ModelConfig, Variant};
use macroformer::training::{train, transfer, TrainConfig, TransferConfig};

fn main() -> macroformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let source: Matchup = args.next().unwrap_or_else(|| "TvT".into()).parse()?;
    let target: Matchup = args.next().unwrap_or_else(|| "PvT".into()).parse()?;
    let epochs: usize = args.next().map_or(5, |s| s.parse().expect("epochs must be an integer"));

    let src_spec = GeneratorSpec { matchup: source, seed: 0, ..GeneratorSpec::default() };
    let src_data = src_spec.dataset()?;
    let cfg = ModelConfig::desk(Variant::Full, src_spec.action_count());
    let trained = train(&cfg, &TrainConfig::default(), &src_data)?;
    let before = evaluate(&trained.final_checkpoint.to_model()?, &src_data, Split::Test)?;
    println!("{source}: test gsp {:.3} bop {:.3}", before.gsp_mean_acc, before.bop_mean_acc);

    let tgt_spec = GeneratorSpec { matchup: target, seed: 1, ..GeneratorSpec::default() };
    let tgt_data = tgt_spec.dataset()?;
    let tc = TransferConfig { epochs, ..TransferConfig::default() };
    let out = transfer(&trained.final_checkpoint, &tc, &tgt_data)?;
    for r in &out.outcome.log {
        println!("epoch {} lr {:e} val gsp {:.3} bop {:.3}", r.epoch, r.lr, r.val_gsp, r.val_bop);
    }
    let after = evaluate(&out.outcome.final_checkpoint.to_model()?, &tgt_data, Split::Test)?;
    println!(
        "{source} -> {target}: test gsp {:.3} bop {:.3} after {epochs} epochs ({} 0.90)",
        after.gsp_mean_acc,
        after.bop_mean_acc,
        if after.gsp_mean_acc >= 0.90 { "reaches" } else { "below" }
    );
    println!(
        "frozen trunk {}; {} tensors changed",
        if out.frozen_intact() { "bitwise intact" } else { "CHANGED" },
        out.changed.len()
    );
    Ok(())
}
