//! Little-endian binary checkpoints.
//!
//! Layout: magic `PDMC`, `u32` version, length-prefixed config text, `u64`
//! global step, training RNG (32-byte seed, `u64` stream, `u128` word
//! position), `[C, H, W]` as `u32`s, schedule (`u32` T then `f64` betas),
//! `u64` optimizer step count, named `f32` tensors, then optional prototype
//! class labels. Strings are `u32`-length-prefixed UTF-8. Tensors are stored
//! as name, `u32` rank, `u32` dims, payload; optimizer moments are stored as
//! `adam.m.<param>` and `adam.v.<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{PdmError, Result};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::training::ModelState;

pub const MAGIC: &[u8; 4] = b"PDMC";
pub const VERSION: u32 = 1;

const MOMENT_PREFIXES: [&str; 2] = ["adam.m.", "adam.v."];

fn bad(msg: impl Into<String>) -> PdmError {
    PdmError::Checkpoint(msg.into())
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("length fits in u32"));
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor<S: Scalar>(&mut self, name: &str, t: &Tensor<S>) {
        self.str(name);
        self.len(t.shape().len());
        t.shape().iter().for_each(|&d| self.len(d));
        for v in t.data() {
            self.0.extend_from_slice(&v.to_f32().expect("finite scalar").to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8 string"))
    }
    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name = self.str()?;
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect();
        Ok((name, shape, data))
    }
}

/// Serializes `state` together with the training generator.
pub fn encode<S: Scalar>(state: &ModelState<S>, rng: &ChaCha8Rng) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&state.config.to_text());
    w.u64(state.step);
    w.0.extend_from_slice(&rng.get_seed());
    w.u64(rng.get_stream());
    w.0.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    state.image_shape.iter().for_each(|&d| w.len(d));
    w.len(state.schedule.steps());
    state.schedule.betas().iter().for_each(|b| w.0.extend_from_slice(&b.to_le_bytes()));
    w.u64(state.optimizer.steps);

    let mut tensors: Vec<(String, Tensor<S>)> = Vec::new();
    state.visit_params(&mut |name, p| tensors.push((name.to_string(), p.value.clone())));
    let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
    let opt = &state.optimizer;
    if opt.first.len() == names.len() {
        for (prefix, moments) in MOMENT_PREFIXES.iter().zip([&opt.first, &opt.second]) {
            for (name, m) in names.iter().zip(moments) {
                tensors.push((format!("{prefix}{name}"), m.clone()));
            }
        }
    }
    w.len(tensors.len());
    for (name, t) in &tensors {
        w.tensor(name, t);
    }
    match &state.bank.labels {
        Some(labels) => {
            w.0.push(1);
            w.len(labels.len());
            labels.iter().for_each(|&l| w.len(l));
        }
        None => w.0.push(0),
    }
    w.0
}

/// Restores a state and training generator from [`encode`] output.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<(ModelState<S>, ChaCha8Rng)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let config = RunConfig::parse(&r.str()?)?;
    let step = r.u64()?;
    let mut rng = ChaCha8Rng::from_seed(r.array::<32>()?);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(u128::from_le_bytes(r.array()?));
    let image_shape = [r.len()?, r.len()?, r.len()?];
    let steps = r.len()?;
    let betas = (0..steps).map(|_| Ok(f64::from_le_bytes(r.array()?))).collect::<Result<Vec<_>>>()?;
    let adam_steps = r.u64()?;

    let mut tensors = BTreeMap::new();
    for _ in 0..r.len()? {
        let (name, shape, data) = r.tensor()?;
        let t = Tensor::from_vec(&shape, data.into_iter().map(|v| S::of(f64::from(v))).collect())?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }
    let labels = match r.take(1)?[0] {
        0 => None,
        1 => Some((0..r.len()?).map(|_| r.len()).collect::<Result<Vec<_>>>()?),
        f => return Err(bad(format!("bad label flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut state = ModelState::<S>::new(&config, image_shape)?;
    state.schedule = NoiseSchedule::from_betas(betas)?;
    state.step = step;
    state.bank.labels = labels;

    let mut restore = |name: &str, dst: &mut Tensor<S>| -> Result<()> {
        let src = tensors.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if src.shape() != dst.shape() {
            return Err(bad(format!("tensor {name} has shape {:?}, model expects {:?}", src.shape(), dst.shape())));
        }
        *dst = src;
        Ok(())
    };
    let mut names = Vec::new();
    let mut failure = None;
    state.visit_params_mut(&mut |name, p| {
        names.push(name.to_string());
        if failure.is_none() {
            failure = restore(name, &mut p.value).err();
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    state.optimizer.steps = adam_steps;
    if tensors.keys().any(|k| k.starts_with("adam.")) {
        for (i, prefix) in MOMENT_PREFIXES.iter().enumerate() {
            let mut moments = Vec::with_capacity(names.len());
            for name in &names {
                let key = format!("{prefix}{name}");
                moments.push(tensors.remove(&key).ok_or_else(|| bad(format!("missing tensor {key}")))?);
            }
            if i == 0 {
                state.optimizer.first = moments;
            } else {
                state.optimizer.second = moments;
            }
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok((state, rng))
}

pub fn save<S: Scalar>(path: &Path, state: &ModelState<S>, rng: &ChaCha8Rng) -> Result<()> {
    std::fs::write(path, encode(state, rng)).map_err(|e| PdmError::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<(ModelState<S>, ChaCha8Rng)> {
    let bytes = std::fs::read(path).map_err(|e| PdmError::io(path, e))?;
    decode(&bytes)
}

/// Human-readable listing of a checkpoint's header and tensors.
pub fn describe(bytes: &[u8]) -> Result<String> {
    use std::fmt::Write as _;
    let (state, rng) = decode::<f32>(bytes)?;
    let mut out = String::new();
    let _ = writeln!(out, "format: PDMC v{VERSION}");
    let _ = writeln!(out, "step: {}", state.step);
    let _ = writeln!(out, "image_shape: {:?}", state.image_shape);
    let _ = writeln!(out, "rng: stream {} word_pos {}", rng.get_stream(), rng.get_word_pos());
    let _ = writeln!(out, "schedule: T={}", state.schedule.steps());
    let _ = writeln!(out, "optimizer_steps: {}", state.optimizer.steps);
    let _ = writeln!(out, "prototype_labels: {:?}", state.bank.labels);
    let _ = writeln!(out, "[config]");
    out.push_str(&state.config.to_text());
    let _ = writeln!(out, "[tensors]");
    state.visit_params(&mut |name, p| {
        let rms = (p.value.data().iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>() / p.value.len().max(1) as f64).sqrt();
        let _ = writeln!(out, "{name} {:?} rms={rms:.6}", p.value.shape());
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.steps = 10;
        c.k = 2;
        c.dim = 8;
        c.widths = [8, 8, 8, 8];
        c.encoder_widths = [4, 4, 4];
        c.res_blocks = 1;
        c.heads = 2;
        c
    }

    #[test]
    fn round_trip_preserves_everything() {
        let state = ModelState::<f32>::new(&tiny(), [1, 8, 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(1);
        rng.next_u64();
        let bytes = encode(&state, &rng);
        let (back, mut rng2) = decode::<f32>(&bytes).unwrap();
        assert_eq!(encode(&back, &rng2), bytes);
        assert_eq!(rng2.next_u64(), rng.clone().next_u64());
        assert_eq!(back.config, state.config);
    }

    #[test]
    fn rejects_version_mismatch_and_garbage() {
        let state = ModelState::<f32>::new(&tiny(), [1, 8, 8]).unwrap();
        let mut bytes = encode(&state, &ChaCha8Rng::seed_from_u64(0));
        bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        let err = decode::<f32>(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        assert!(decode::<f32>(b"NOPE").is_err());
        let good = encode(&state, &ChaCha8Rng::seed_from_u64(0));
        assert!(decode::<f32>(&good[..good.len() - 3]).is_err());
    }
}
