//! Encodes one replay to the binary format, shows the header fields and
//! demonstrates that decoding is lossless and corruption is detected.
//!
//! ```text
//! cargo run --release --example replay_format
//! ```

use macroformer::data::{decode_replay, dequantize, encode_replay, quantize, GeneratorSpec, Matchup};

fn main() -> macroformer::Result<()> {
    let spec = GeneratorSpec { matchup: "ZvP".parse::<Matchup>()?, replays: 1, seed: 3, ..GeneratorSpec::default() };
    let replay = spec.generate()?.remove(0);
    let bytes = encode_replay(&replay)?;
    println!("{} replay, result {}, {} steps: {} bytes", replay.matchup, replay.result, replay.len(), bytes.len());
    println!("magic {:?}, version {}", String::from_utf8_lossy(&bytes[..4]), u16::from_le_bytes([bytes[4], bytes[5]]));
    println!("race-pair byte {:#04x}, result byte {}", bytes[6], bytes[7]);

    let back = decode_replay(&bytes)?;
    println!("decoded equal: {}, re-encoded bytes equal: {}", back == replay, encode_replay(&back)? == bytes);

    let mut damaged = bytes.clone();
    damaged[bytes.len() / 2] ^= 0x01;
    match decode_replay(&damaged) {
        Ok(_) => println!("damaged file accepted (unexpected)"),
        Err(e) => println!("damaged file rejected: {e}"),
    }

    // Spatial planes are stored as bytes: 256 levels on [0, 1].
    for v in [0.0f32, 0.1, 0.5, 0.999] {
        let q = quantize(v);
        println!("{v:.3} -> {q:3} -> {:.5} (error {:.2e})", dequantize(q), (dequantize(q) - v).abs());
    }
    Ok(())
}
