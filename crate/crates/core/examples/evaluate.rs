//! Evaluates trained models per split, prints accuracy curves along the
//! replay and inside the window, and tabulates two variants side by side.
//!
//! ```text
//! cargo run --release --example evaluate -- [variant] [epochs]
//! ```

use macroformer::data::{GeneratorSpec, Split};
use macroformer::eval::{compare, evaluate};
use macroformer::models::{ModelConfig, Variant};
use macroformer::training::{train, TrainConfig};

fn main() -> macroformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().unwrap_or_else(|| "full".into()).parse()?;
    let epochs: usize = args.next().map_or(10, |s| s.parse().expect("epochs must be an integer"));

    let spec = GeneratorSpec { replays: 200, ..GeneratorSpec::default() };
    let data = spec.dataset()?;
    let tc = TrainConfig { epochs, ..TrainConfig::default() };
    let mut reports = Vec::new();
    for v in [variant, Variant::GruBaseline] {
        let model = train(&ModelConfig::desk(v, spec.action_count()), &tc, &data)?.final_checkpoint.to_model()?;
        for split in Split::ALL {
            let r = evaluate(&model, &data, split)?;
            println!("{v} {split:>5}: gsp {:.3} bop {:.3} over {} steps", r.gsp_mean_acc, r.bop_mean_acc, r.steps);
        }
        reports.push(evaluate(&model, &data, Split::Test)?);
        if v == Variant::GruBaseline {
            break;
        }
    }

    let test = &reports[0];
    println!("\n{variant} test accuracy by window along the replay:");
    for p in &test.by_window_index {
        println!("  window {}: gsp {:.3} bop {:.3} ({} steps)", p.index, p.gsp, p.bop, p.steps);
    }
    println!("{variant} test accuracy by step inside the window:");
    for p in &test.by_position {
        println!("  t={}: gsp {:.3} bop {:.3} ({} steps)", p.index, p.gsp, p.bop, p.steps);
    }
    if reports.len() > 1 {
        print!("\n{}", compare(&reports)?.to_csv());
    }
    Ok(())
}
