//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "NPCKPT\0\x01"
//! version   u32
//! length    u64      payload byte count
//! payload   ...
//! digest    32 bytes SHA-256 of the payload
//! ```
//!
//! The payload holds the config echo, the global step, the generator state, the element
//! type, the named tensor table and the optimizer moments. Nothing is returned unless the
//! whole file parses and the digest matches.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::optim::AdamState;
use super::params::ParamStore;
use super::tensor::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"NPCKPT\0\x01";
pub const VERSION: u32 = 1;

/// Exact state of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    /// Resolved configuration the parameters were trained under.
    pub config: String,
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore<T>,
    pub optimizer: AdamState<T>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.0.extend_from_slice(v);
    }
    fn tensor_data<T: Real>(&mut self, t: &Tensor<T>) {
        for v in t.data() {
            v.write_le(&mut self.0);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("truncated payload".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Format("invalid utf-8 string".into()))
    }
    fn tensor_data<T: Real>(&mut self, rows: usize, cols: usize) -> Result<Tensor<T>> {
        let size = T::DTYPE.size();
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        let raw = self.take(
            n.checked_mul(size)
                .ok_or_else(|| Error::Format("tensor size overflow".into()))?,
        )?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Tensor::from_vec(rows, cols, data)
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.bytes(self.config.as_bytes());
        w.u64(self.step);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.u128(self.rng.word_pos);
        w.u8(T::DTYPE.tag());
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.names().iter().zip(self.params.values()) {
            w.bytes(name.as_bytes());
            w.u64(t.rows() as u64);
            w.u64(t.cols() as u64);
            w.tensor_data(t);
        }
        w.u64(self.optimizer.step);
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            w.tensor_data(m);
            w.tensor_data(v);
        }
        let payload = w.0;

        let mut out = Vec::with_capacity(payload.len() + 52);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic bytes: not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4"));
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8")) as usize;
        if bytes.len() != 20 + len + 32 {
            return Err(Error::Format(
                "checkpoint length does not match header".into(),
            ));
        }
        let payload = &bytes[20..20 + len];
        if Sha256::digest(payload).as_slice() != &bytes[20 + len..] {
            return Err(Error::Format("checkpoint digest mismatch".into()));
        }

        let mut r = Reader {
            buf: payload,
            pos: 0,
        };
        let config = r.string()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32");
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let dtype =
            DType::from_tag(r.u8()?).ok_or_else(|| Error::Format("unknown dtype tag".into()))?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let t = r.tensor_data(rows, cols)?;
            params.push(name, t);
        }
        let opt_step = r.u64()?;
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for t in params.values() {
            m.push(r.tensor_data(t.rows(), t.cols())?);
            v.push(r.tensor_data(t.rows(), t.cols())?);
        }
        if r.pos != payload.len() {
            return Err(Error::Format("trailing bytes in checkpoint payload".into()));
        }
        Ok(Checkpoint {
            config,
            step,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            params,
            optimizer: AdamState {
                step: opt_step,
                m,
                v,
            },
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Init, ParamLayout};
    use rand::Rng;

    fn sample() -> Checkpoint<f32> {
        let mut layout = ParamLayout::new();
        layout.declare("a.weight", 3, 2, Init::FanInUniform { fan_in: 3 });
        layout.declare("a.bias", 1, 2, Init::FanInUniform { fan_in: 3 });
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params: ParamStore<f32> = layout.init(&mut rng);
        let mut optimizer = AdamState::new(&params);
        optimizer.step = 7;
        optimizer.m[0].data_mut()[1] = 0.25;
        optimizer.v[1].data_mut()[0] = 1e-7;
        let _: u64 = rng.random();
        Checkpoint {
            config: "model = \"anp\"".into(),
            step: 7,
            rng: RngState::capture(&rng),
            params,
            optimizer,
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut a = ck.rng.restore();
        let mut b = back.rng.restore();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] ^= 0xff;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn flipped_payload_bit_is_rejected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested").join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::<f32>::load(&path).unwrap(), ck);
    }
}
