//! Binary checkpoint format, all integers little endian:
//!
//! ```text
//! magic        8 bytes  "GEOFLOW\0"
//! version      u32      = 1
//! payload_len  u64
//! payload:
//!   config     u32 length + UTF-8 TOML of TrainConfig
//!   step       u64
//!   rng        32-byte seed, u64 stream, u128 word position
//!   averages   7 × f64 (objective term order)
//!   3 parameter tables (transfer, removal, discriminator):
//!     u32 count, then per tensor: u32 name length, name,
//!     4 × u32 shape, f32 values
//!   3 optimizer states in the same order:
//!     4 × f64 (lr, beta1, beta2, eps), u64 t, first moments, second moments
//! crc32        u32 over the payload
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{TrainConfig, TrainState};
use crate::autodiff::{Adam, AdamConfig, ParamSet};
use crate::error::{Error, Result};
use crate::losses::LossTerms;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 8] = b"GEOFLOW\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, t: &Tensor<f32>) {
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn params(&mut self, p: &ParamSet<f32>) {
        self.u32(p.len() as u32);
        for (name, t) in p.names().iter().zip(p.values()) {
            self.bytes(name.as_bytes());
            for d in t.shape().0 {
                self.u32(d as u32);
            }
            self.floats(t);
        }
    }
    fn adam(&mut self, a: &Adam<f32>) {
        let c = a.config;
        for v in [c.lr, c.beta1, c.beta2, c.eps] {
            self.f64(v);
        }
        self.u64(a.t);
        for t in a.m.iter().chain(&a.v) {
            self.floats(t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self, what: &'static str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }
    fn floats(&mut self, shape: Shape, what: &'static str) -> Result<Tensor<f32>> {
        let raw = self.take(shape.numel() * 4, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::from_vec(shape, data)
    }
    fn params_into(&mut self, p: &mut ParamSet<f32>, module: &str) -> Result<()> {
        let count = self.u32("parameter count")? as usize;
        if count != p.len() {
            return Err(Error::Incompatible(format!(
                "{module}: checkpoint has {count} tensors, network has {}",
                p.len()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for k in 0..count {
            let name = String::from_utf8_lossy(self.bytes("parameter name")?).into_owned();
            if name != p.names()[k] {
                return Err(Error::Incompatible(format!(
                    "{module}: tensor {k} is `{name}`, network expects `{}`",
                    p.names()[k]
                )));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = self.u32("parameter shape")? as usize;
            }
            values.push(self.floats(Shape(dims), "parameter values")?);
        }
        p.load_values(values)
    }
    fn adam_into(&mut self, a: &mut Adam<f32>) -> Result<()> {
        a.config = AdamConfig {
            lr: self.f64("optimizer config")?,
            beta1: self.f64("optimizer config")?,
            beta2: self.f64("optimizer config")?,
            eps: self.f64("optimizer config")?,
        };
        a.t = self.u64("optimizer step")?;
        let shapes: Vec<Shape> = a.m.iter().map(Tensor::shape).collect();
        for (k, &s) in shapes.iter().enumerate() {
            a.m[k] = self.floats(s, "optimizer moments")?;
        }
        for (k, &s) in shapes.iter().enumerate() {
            a.v[k] = self.floats(s, "optimizer moments")?;
        }
        Ok(())
    }
}

pub fn write_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let config = toml::to_string(&state.config).map_err(|e| Error::Config(e.to_string()))?;
    let mut w = Writer(Vec::new());
    w.bytes(config.as_bytes());
    w.u64(state.step);
    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    for v in state.averages.as_array() {
        w.f64(v);
    }
    w.params(&state.nets.transfer.params);
    w.params(&state.nets.removal.params);
    w.params(&state.nets.disc.params);
    w.adam(&state.opt_g);
    w.adam(&state.opt_f);
    w.adam(&state.opt_d);
    let payload = w.0;

    let mut out = Vec::with_capacity(HEADER + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

/// Parses a checkpoint. Integrity (magic, version, length, checksum) is
/// verified before any state is built.
pub fn read_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Truncated("magic"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut head = Reader { buf: bytes, pos: 8 };
    let version = head.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = head.u64("payload length")? as usize;
    if bytes.len() - HEADER < len.saturating_add(4) {
        return Err(Error::Truncated("payload"));
    }
    let payload = &bytes[HEADER..HEADER + len];
    let stored = u32::from_le_bytes(bytes[HEADER + len..HEADER + len + 4].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { buf: payload, pos: 0 };
    let text = std::str::from_utf8(r.bytes("config")?).map_err(|e| Error::Incompatible(e.to_string()))?;
    let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Incompatible(format!("config blob: {e}")))?;
    let mut state = TrainState::new(config)?;
    state.step = r.u64("step")?;
    let seed: [u8; 32] = r.take(32, "rng")?.try_into().expect("32 bytes");
    let stream = r.u64("rng")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng")?.try_into().expect("16 bytes"));
    state.rng = ChaCha8Rng::from_seed(seed);
    state.rng.set_stream(stream);
    state.rng.set_word_pos(word_pos);
    let mut avg = [0.0; 7];
    for v in &mut avg {
        *v = r.f64("averages")?;
    }
    state.averages = LossTerms {
        adv_g: avg[0],
        adv_f: avg[1],
        cls_r: avg[2],
        cls_f: avg[3],
        rec: avg[4],
        lm: avg[5],
        tv: avg[6],
    };
    r.params_into(&mut state.nets.transfer.params, "transfer")?;
    r.params_into(&mut state.nets.removal.params, "removal")?;
    r.params_into(&mut state.nets.disc.params, "discriminator")?;
    r.adam_into(&mut state.opt_g)?;
    r.adam_into(&mut state.opt_f)?;
    r.adam_into(&mut state.opt_d)?;
    if r.pos != payload.len() {
        return Err(Error::Incompatible(format!(
            "{} unread payload bytes",
            payload.len() - r.pos
        )));
    }
    Ok(state)
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = write_checkpoint(state)?;
    // write-then-rename so a crash never leaves a half-written file behind
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset;
    use crate::training::{next_batches, train_step, TrainData};

    fn trained_state() -> TrainState {
        let cfg = TrainConfig {
            image_size: 16,
            batch_size: 2,
            width: 2,
            ..TrainConfig::default()
        };
        let d = generate_dataset(1, 4, 16);
        let mut s = TrainState::new(cfg).unwrap();
        let data = TrainData { a: &d.a, b: &d.b };
        for _ in 0..2 {
            let (a, b) = next_batches(&mut s, &data).unwrap();
            train_step(&mut s, &a, &b).unwrap();
        }
        s
    }

    #[test]
    fn roundtrip_is_lossless() {
        let s = trained_state();
        let bytes = write_checkpoint(&s).unwrap();
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(write_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn integrity_errors_are_distinct() {
        let bytes = write_checkpoint(&trained_state()).unwrap();

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(read_checkpoint(&flipped), Err(Error::Checksum { .. })));

        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 10]), Err(Error::Truncated(_))));
        assert!(matches!(read_checkpoint(&bytes[..5]), Err(Error::Truncated(_))));

        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(
            read_checkpoint(&version),
            Err(Error::VersionMismatch { found: 9, expected: 1 })
        ));

        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(read_checkpoint(&magic), Err(Error::BadMagic)));
    }

    #[test]
    fn size_guard_names_both_sizes() {
        let s = trained_state();
        let want = TrainConfig {
            image_size: 32,
            ..s.config.clone()
        };
        let err = want.check_compatible(&s.config).unwrap_err().to_string();
        assert!(err.contains("16") && err.contains("32"), "{err}");
    }
}
