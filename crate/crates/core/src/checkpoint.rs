//! On-disk snapshot of a run between rounds.
//!
//! Layout: a magic line, a line holding the manifest length in bytes, the
//! JSON manifest, then every tensor as little-endian `f64` in manifest order.
//! Random streams are derived from `(seed, round, ...)` so no generator state
//! needs saving.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::SpaceConfig;
use crate::cost::CostLedger;
use crate::distribution::TrackingState;
use crate::error::{Error, Result};
use crate::orchestrator::SimState;
use crate::supernet::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &str = "superfed-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub space: SpaceConfig,
    pub state: SimState,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    round: usize,
    seed: u64,
    space: SpaceConfig,
    tracking: TrackingState,
    ledger: CostLedger,
    tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let mut offset = 0;
        let tensors = self
            .state
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    dtype: "f64-le".into(),
                    offset,
                    len: t.len(),
                };
                offset += t.len();
                e
            })
            .collect();
        let manifest = Manifest {
            round: self.state.round,
            seed: self.seed,
            space: self.space.clone(),
            tracking: self.state.tracking.clone(),
            ledger: self.state.ledger.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| corrupt(e.to_string()))?;
        writeln!(out, "{MAGIC}")?;
        writeln!(out, "{}", json.len())?;
        out.write_all(&json)?;
        for (_, t) in self.state.params.iter() {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = BufReader::new(input);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        line.clear();
        r.read_line(&mut line)?;
        let n: usize = line
            .trim_end()
            .parse()
            .map_err(|_| corrupt("bad manifest length"))?;
        let mut json = vec![0u8; n];
        r.read_exact(&mut json)
            .map_err(|_| corrupt("truncated manifest"))?;
        let m: Manifest =
            serde_json::from_slice(&json).map_err(|e| corrupt(format!("manifest: {e}")))?;
        m.space
            .validate()
            .map_err(|e| corrupt(format!("manifest space: {e}")))?;

        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0;
        for e in &m.tensors {
            if e.dtype != "f64-le" {
                return Err(corrupt(format!("unsupported dtype {}", e.dtype)));
            }
            if e.offset != expected_offset || e.shape.iter().product::<usize>() != e.len {
                return Err(corrupt(format!("inconsistent entry for {}", e.name)));
            }
            expected_offset += e.len;
            let mut raw = vec![0u8; e.len * 8];
            r.read_exact(&mut raw)
                .map_err(|_| corrupt(format!("truncated data for {}", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if !(1..=2).contains(&e.shape.len()) {
                return Err(corrupt(format!("bad rank for {}", e.name)));
            }
            tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        let params =
            ParamSet::from_tensors(&m.space, tensors).map_err(|e| corrupt(e.to_string()))?;
        if m.tracking.clients() != m.ledger.clients || m.ledger.num_rounds() != m.round {
            return Err(corrupt("tracking/ledger do not match round count"));
        }
        Ok(Checkpoint {
            seed: m.seed,
            space: m.space,
            state: SimState {
                round: m.round,
                params,
                tracking: m.tracking,
                ledger: m.ledger,
            },
        })
    }

    /// Writes via a temporary sibling and renames, so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = std::fs::File::create(&tmp)?;
            self.write_to(std::io::BufWriter::new(f))?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::init_supernet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let space = SpaceConfig {
            stages: 2,
            base_depth: 1,
            max_extra_depth: 1,
            ratio_choices: vec![0.5, 1.0],
            hidden_width: 4,
            max_mid_width: 4,
            input_dim: 3,
            num_classes: 2,
        };
        let params = init_supernet(&space, &mut ChaCha8Rng::seed_from_u64(5));
        Checkpoint {
            seed: 11,
            space,
            state: SimState {
                round: 0,
                params,
                tracking: TrackingState::new(3),
                ledger: CostLedger::new(3),
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"superfed-checkpoint v1\n"));
        assert_eq!(Checkpoint::read_from(&buf[..]).unwrap(), c);
    }

    #[test]
    fn corruption_is_detected() {
        let c = sample();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(&extra[..]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&bad[..]).is_err());
        let text = String::from_utf8_lossy(&buf).replace("\"f64-le\"", "\"f32-le\"");
        assert!(Checkpoint::read_from(text.as_bytes()).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        assert!(!p.with_extension("tmp").exists());
    }
}
