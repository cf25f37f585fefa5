//! Replay file layout (little-endian):
//!
//! ```text
//! "MSCR" | u16 version | u8 race pair | u8 result | u32 steps
//! u16 global_dim | u16 C | u16 H | u16 W | u16 action_count
//! per step: f32[global_dim] | u8[C*H*W] | u16 action
//! u32 CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::{Matchup, Replay, ReplayStep};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MSCR";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 4 + 2 * 5;

fn u16_field(name: &str, v: usize) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Data(format!("{name} {v} does not fit the replay header")))
}

pub fn encode_replay(r: &Replay) -> Result<Vec<u8>> {
    r.validate()?;
    let [c, h, w] = r.spatial_shape;
    let step_len = 4 * r.global_dim + r.spatial_len() + 2;
    let mut out = Vec::with_capacity(HEADER_LEN + step_len * r.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(r.matchup.to_byte());
    out.push(r.result);
    let steps = u32::try_from(r.len()).map_err(|_| Error::Data("too many steps".into()))?;
    out.extend_from_slice(&steps.to_le_bytes());
    for (name, v) in
        [("global_dim", r.global_dim), ("channels", c), ("height", h), ("width", w), ("action_count", r.action_count)]
    {
        out.extend_from_slice(&u16_field(name, v)?.to_le_bytes());
    }
    for s in &r.steps {
        for g in &s.global {
            out.extend_from_slice(&g.to_le_bytes());
        }
        out.extend_from_slice(&s.spatial);
        out.extend_from_slice(&s.action.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Format("replay file truncated".into())),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_replay(bytes: &[u8]) -> Result<Replay> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Format("replay file truncated".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let mut rd = Reader { buf: body, pos: 4 };
    let version = rd.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported replay version {version}")));
    }
    let actual = crc32fast::hash(body);
    if actual != stored {
        return Err(Error::Format(format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}")));
    }
    let matchup = Matchup::from_byte(rd.u8()?)?;
    let result = rd.u8()?;
    let n = rd.u32()? as usize;
    let global_dim = rd.u16()? as usize;
    let spatial_shape = [rd.u16()? as usize, rd.u16()? as usize, rd.u16()? as usize];
    let action_count = rd.u16()? as usize;
    let spatial_len: usize = spatial_shape.iter().product();
    let step_len = 4 * global_dim + spatial_len + 2;
    if body.len() - HEADER_LEN != n.saturating_mul(step_len) {
        return Err(Error::Format(format!(
            "body is {} bytes, header promises {n} steps of {step_len}",
            body.len() - HEADER_LEN
        )));
    }
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let global =
            rd.take(4 * global_dim)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let spatial = rd.take(spatial_len)?.to_vec();
        let action = rd.u16()?;
        steps.push(ReplayStep { global, spatial, action });
    }
    let replay = Replay { matchup, result, global_dim, spatial_shape, action_count, steps };
    replay.validate()?;
    Ok(replay)
}

pub fn write_replay(path: impl AsRef<Path>, r: &Replay) -> Result<()> {
    fs::write(path, encode_replay(r)?)?;
    Ok(())
}

pub fn read_replay(path: impl AsRef<Path>) -> Result<Replay> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    decode_replay(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Race;

    fn sample() -> Replay {
        let steps = (0..3)
            .map(|t| ReplayStep::new(vec![0.25 * t as f32, 1.0], &[0.0, 0.4, 1.0, 0.5], t as u16).unwrap())
            .collect();
        Replay {
            matchup: Matchup::new(Race::Zerg, Race::Protoss),
            result: 1,
            global_dim: 2,
            spatial_shape: [1, 2, 2],
            action_count: 74,
            steps,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = encode_replay(&sample()).unwrap();
        let back = decode_replay(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(encode_replay(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_detected() {
        let bytes = encode_replay(&sample()).unwrap();
        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 1] ^= 0x40;
        assert!(matches!(decode_replay(&flipped), Err(Error::Format(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_replay(&magic), Err(Error::Format(_))));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(decode_replay(&version), Err(Error::Format(_))));
        assert!(matches!(decode_replay(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    }

    #[test]
    fn action_outside_vocabulary() {
        let mut r = sample();
        r.steps[1].action = 74;
        assert!(matches!(encode_replay(&r), Err(Error::Data(_))));
    }
}
