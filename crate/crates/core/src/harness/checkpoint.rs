//! Binary checkpoint format.
//!
//! ```text
//! "ADTR"  u32 version  u32 tensor_count
//! per tensor: u16 name_len, name (UTF-8), u8 rank, u32 dims[rank], f64 values
//! u32 snapshot_len, snapshot (UTF-8 `key = value` lines)
//! ```
//! All integers and floats are little-endian. The snapshot holds the run
//! configuration followed by `state.*` keys for the epoch counter and the
//! training RNG position.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"ADTR";
pub const VERSION: u32 = 1;

/// Serialisable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub config: RunConfig,
    pub epoch: usize,
    pub rng: RngState,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint", "invalid UTF-8"))
    }
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: &RunConfig, epoch: usize, rng: &ChaCha8Rng) -> Self {
        Self {
            params: store.named().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            config: config.clone(),
            epoch,
            rng: RngState::capture(rng),
        }
    }

    fn snapshot(&self) -> String {
        let mut s = self.config.to_text();
        s.push_str(&format!("state.epoch = {}\n", self.epoch));
        s.push_str(&format!("state.rng_seed = {}\n", hex(&self.rng.seed)));
        s.push_str(&format!("state.rng_stream = {}\n", self.rng.stream));
        s.push_str(&format!("state.rng_word_pos = {}\n", self.rng.word_pos));
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            let n = u16::try_from(name.len())
                .map_err(|_| Error::format("checkpoint", format!("name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let snap = self.snapshot();
        out.extend_from_slice(&(snap.len() as u32).to_le_bytes());
        out.extend_from_slice(snap.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "missing ADTR magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = r.utf8(len)?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(&dims, values).map_err(|e| Error::format("checkpoint", format!("{name}: {e}")))?;
            params.push((name, t));
        }
        let len = r.u32()? as usize;
        let snap = r.utf8(len)?;
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes after snapshot"));
        }

        let mut config_text = String::new();
        let (mut epoch, mut seed, mut stream, mut word_pos) = (None, None, None, None);
        for line in snap.lines() {
            match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                Some(("state.epoch", v)) => epoch = v.parse().ok(),
                Some(("state.rng_seed", v)) => seed = unhex(v),
                Some(("state.rng_stream", v)) => stream = v.parse().ok(),
                Some(("state.rng_word_pos", v)) => word_pos = v.parse().ok(),
                _ => {
                    config_text.push_str(line);
                    config_text.push('\n');
                }
            }
        }
        let missing = || Error::format("checkpoint", "snapshot lacks training state");
        Ok(Self {
            params,
            config: RunConfig::parse(&config_text)?,
            epoch: epoch.ok_or_else(missing)?,
            rng: RngState {
                seed: seed.ok_or_else(missing)?,
                stream: stream.ok_or_else(missing)?,
                word_pos: word_pos.ok_or_else(missing)?,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.next_u64();
        let mut cfg = RunConfig::tiny();
        cfg.seed = Some(3);
        Checkpoint {
            params: vec![
                ("a".into(), Tensor::new(&[2, 2], vec![1.0, -0.5, f64::MIN_POSITIVE, 3.25]).unwrap()),
                ("b.bias".into(), Tensor::scalar(0.1)),
            ],
            config: cfg,
            epoch: 4,
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ADTR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u32();
        let state = RngState::capture(&rng);
        let mut resumed = state.restore();
        assert_eq!(rng.next_u64(), resumed.next_u64());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
