//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `MTLCKPT1`, u32 version, u32 header length,
//! JSON header, then four tensor groups (parameters, buffers, Adam first and
//! second moments), then the `END.` marker. Each group is a u32 count
//! followed by tensors of the form: u32 name length, name, u32 rank, u32 dims,
//! f32 data.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{AdamConfig, AdamState, NetworkConfig, ParamSet, Tensor};
use crate::vocab::Alphabet;

const MAGIC: &[u8; 8] = b"MTLCKPT1";
const VERSION: u32 = 1;
const END: &[u8; 4] = b"END.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    char_vocab_hash: String,
    word_vocab_hash: String,
    epoch: usize,
    adam: AdamConfig,
    adam_step: u64,
    run: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub char_vocab_hash: String,
    pub word_vocab_hash: String,
    pub epoch: usize,
    /// Echo of the effective run configuration.
    pub run: serde_json::Value,
    pub params: ParamSet<f32>,
    pub buffers: ParamSet<f32>,
    pub adam: AdamState<f32>,
}

fn write_group(w: &mut impl Write, set: &ParamSet<f32>) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(set.tensors.len() as u32)?;
    for t in &set.tensors {
        w.write_u32::<LittleEndian>(t.name.len() as u32)?;
        w.write_all(t.name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
        for &d in &t.shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &x in &t.data {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

const MAX_NAME: usize = 1 << 12;
const MAX_RANK: usize = 8;

fn read_group(r: &mut impl Read, remaining: usize) -> std::io::Result<ParamSet<f32>> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut set = ParamSet::default();
    for _ in 0..n {
        let len = r.read_u32::<LittleEndian>()? as usize;
        if len > MAX_NAME {
            return Err(bad("tensor name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        if rank > MAX_RANK {
            return Err(bad("tensor rank too large"));
        }
        let shape = (0..rank)
            .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor too large"))?;
        if count.saturating_mul(4) > remaining {
            return Err(std::io::ErrorKind::UnexpectedEof.into());
        }
        let mut data = vec![0f32; count];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        set.push(Tensor { name, shape, data });
    }
    Ok(set)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            network: self.network.clone(),
            char_vocab_hash: self.char_vocab_hash.clone(),
            word_vocab_hash: self.word_vocab_hash.clone(),
            epoch: self.epoch,
            adam: self.adam.config,
            adam_step: self.adam.step,
            run: self.run.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        out.write_all(MAGIC).map_err(io)?;
        out.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        out.write_u32::<LittleEndian>(json.len() as u32).map_err(io)?;
        out.write_all(&json).map_err(io)?;
        for set in [&self.params, &self.buffers, &self.adam.first_moment, &self.adam.second_moment] {
            write_group(&mut out, set).map_err(io)?;
        }
        out.write_all(END).map_err(io)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let io = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated checkpoint".into()),
            _ => Error::Checkpoint(e.to_string()),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if len > r.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let header: Header = serde_json::from_slice(&r[..len])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        r = &r[len..];
        let mut groups = Vec::with_capacity(4);
        for _ in 0..4 {
            let remaining = r.len();
            groups.push(read_group(&mut r, remaining).map_err(io)?);
        }
        let mut end = [0u8; 4];
        r.read_exact(&mut end).map_err(io)?;
        if &end != END || !r.is_empty() {
            return Err(Error::Checkpoint("missing end marker".into()));
        }
        let [params, buffers, first_moment, second_moment]: [ParamSet<f32>; 4] =
            groups.try_into().expect("four groups");
        if !params.same_layout(&first_moment) || !params.same_layout(&second_moment) {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        Ok(Self {
            network: header.network,
            char_vocab_hash: header.char_vocab_hash,
            word_vocab_hash: header.word_vocab_hash,
            epoch: header.epoch,
            run: header.run,
            params,
            buffers,
            adam: AdamState {
                config: header.adam,
                step: header.adam_step,
                first_moment,
                second_moment,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads and checks that the checkpoint was built with these vocabularies.
    pub fn load_for(path: &Path, chars: &Alphabet, words: &Alphabet) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_vocab(chars, words)?;
        Ok(ck)
    }

    pub fn check_vocab(&self, chars: &Alphabet, words: &Alphabet) -> Result<()> {
        if self.char_vocab_hash != chars.content_hash() || self.word_vocab_hash != words.content_hash() {
            return Err(Error::VocabularyMismatch);
        }
        Ok(())
    }
}
