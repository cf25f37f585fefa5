//! Trains all five variants on one corpus with one seed and prints the
//! comparison table with deltas against the full model.
//!
//! ```text
//! cargo run --release --example ablation -- [seed] [epochs] [replays]
//! ```

use macroformer::data::{GeneratorSpec, Split};
use macroformer::eval::{compare, evaluate};
use macroformer::models::{ModelConfig, Variant};
use macroformer::training::{train, TrainConfig};

fn main() -> macroformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let epochs: usize = args.next().map_or(10, |s| s.parse().expect("epochs must be an integer"));
    let replays: usize = args.next().map_or(600, |s| s.parse().expect("replays must be an integer"));

    let spec = GeneratorSpec { replays, seed, ..GeneratorSpec::default() };
    let data = spec.dataset()?;
    let tc = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let mut reports = Vec::new();
    for variant in Variant::ALL {
        let cfg = ModelConfig::desk(variant, spec.action_count());
        let out = train(&cfg, &tc, &data)?;
        let report = evaluate(&out.final_checkpoint.to_model()?, &data, Split::Test)?;
        println!("{variant}: test gsp {:.3} bop {:.3}", report.gsp_mean_acc, report.bop_mean_acc);
        reports.push(report);
    }
    let table = compare(&reports)?;
    print!("\n{}", table.to_csv());
    println!("\ndelta vs full:");
    for (label, dg, db) in table.deltas("full")? {
        println!("{label:>15}  gsp {dg:+.3}  bop {db:+.3}");
    }
    Ok(())
}
