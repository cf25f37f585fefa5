//! Writes a planted-signal corpus to disk, reloads it through the manifest
//! and checks that the planted outcome is recoverable.
//!
//! ```text
//! cargo run --release --example gen_corpus -- [out_dir] [matchup] [replays]
//! ```

use macroformer::data::{generate_synthetic_corpus, Dataset, GeneratorSpec, Matchup, Split};

fn main() -> macroformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "corpus".into());
    let matchup: Matchup = args.next().unwrap_or_else(|| "TvT".into()).parse()?;
    let replays: usize = args.next().map_or(600, |s| s.parse().expect("replays must be an integer"));

    let spec = GeneratorSpec { matchup, replays, ..GeneratorSpec::default() };
    let manifest = generate_synthetic_corpus(&spec, &out)?;
    println!(
        "{} {} replays in {out}: train {}, val {}, test {}",
        manifest.files.len(),
        manifest.matchup,
        manifest.counts.train,
        manifest.counts.val,
        manifest.counts.test
    );
    println!(
        "global {} features, spatial {:?}, {} actions",
        manifest.global_dim, manifest.spatial_shape, manifest.action_count
    );

    let data = Dataset::load(&out)?;
    for split in Split::ALL {
        println!("{split}: {} replays, {} steps", data.split_indices(split).len(), data.steps_in(split));
    }
    let agree = data.replays.iter().filter(|r| spec.oracle_result(r) == r.result).count();
    println!(
        "planted-signal oracle agrees with {agree}/{} labels (expected about {:.0}%)",
        data.replays.len(),
        100.0 * (1.0 - spec.noise)
    );
    Ok(())
}
