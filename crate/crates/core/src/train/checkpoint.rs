//! Checkpoint files: `"MAVRCKPT"`, version u32, a length-prefixed JSON header
//! (config, epoch, test accuracy, RNG state), then a name-indexed table of
//! `.mvt`-encoded tensors. All integers are little-endian.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::SgdState;
use super::TrainConfig;
use crate::error::{MavrError, Result};
use crate::model::Model;
use crate::numerics::mvt;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"MAVRCKPT";
pub const VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param:";
const MOMENTUM_PREFIX: &str = "momentum:";

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
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

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub test_acc: f64,
    pub rng: RngState,
    pub params: ParamStore<f32>,
    pub momentum: SgdState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    test_acc: f64,
    rng: RngState,
}

fn push_blob(out: &mut Vec<u8>, name: &str, blob: &[u8]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob);
}

/// Little-endian reader over a byte slice with contextual errors.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated while reading {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            test_acc: self.test_acc,
            rng: self.rng,
        };
        let json = serde_json::to_vec(&header).expect("plain header");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(2 * self.params.len() as u32).to_le_bytes());
        for (id, name, t) in self.params.iter() {
            push_blob(&mut out, &format!("{PARAM_PREFIX}{name}"), &mvt::encode(t));
            push_blob(&mut out, &format!("{MOMENTUM_PREFIX}{name}"), &mvt::encode(&self.momentum.velocity[id.0]));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8, "magic")? != MAGIC {
            return Err("bad magic (expected MAVRCKPT)".into());
        }
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let len = c.u64("header length")? as usize;
        let header: Header = serde_json::from_slice(c.take(len, "header")?).map_err(|e| format!("header: {e}"))?;
        let (_, mut params) = Model::new::<f32>(header.config.model.clone(), header.config.seed).map_err(|e| e.to_string())?;
        let mut momentum = SgdState::new(&params);
        let count = c.u32("tensor count")? as usize;
        if count != 2 * params.len() {
            return Err(format!("{count} tensors stored, model needs {}", 2 * params.len()));
        }
        let mut seen = vec![[false; 2]; params.len()];
        for _ in 0..count {
            let n = c.u32("name length")? as usize;
            let name = std::str::from_utf8(c.take(n, "name")?).map_err(|_| "tensor name is not UTF-8".to_string())?;
            let blob_len = c.u64("tensor length")? as usize;
            let (t, used) = mvt::decode::<f32>(c.take(blob_len, name)?).map_err(|e| format!("{name}: {e}"))?;
            if used != blob_len {
                return Err(format!("{name}: trailing bytes in tensor"));
            }
            let (slot, pname) = if let Some(p) = name.strip_prefix(PARAM_PREFIX) {
                (0, p)
            } else if let Some(p) = name.strip_prefix(MOMENTUM_PREFIX) {
                (1, p)
            } else {
                return Err(format!("unexpected tensor {name}"));
            };
            let id = params.id(pname).ok_or_else(|| format!("unknown parameter {pname}"))?;
            if params.get(id).shape() != t.shape() {
                return Err(format!("{name}: shape {:?}, model expects {:?}", t.shape(), params.get(id).shape()));
            }
            if std::mem::replace(&mut seen[id.0][slot], true) {
                return Err(format!("duplicate tensor {name}"));
            }
            if slot == 0 {
                params.set(pname, t).map_err(|e| e.to_string())?;
            } else {
                momentum.velocity[id.0] = t;
            }
        }
        if c.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - c.pos));
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            test_acc: header.test_acc,
            rng: header.rng,
            params,
            momentum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| MavrError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| MavrError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MavrError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| MavrError::Format {
            path: path.to_path_buf(),
            message,
        })
    }

    /// The network described by the stored config, with the stored weights.
    pub fn model(&self) -> Result<(Model, ParamStore<f32>)> {
        let (model, _) = Model::new::<f32>(self.config.model.clone(), self.config.seed)?;
        Ok((model, self.params.clone()))
    }
}
