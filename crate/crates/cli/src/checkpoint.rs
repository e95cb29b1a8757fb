//! Binary training checkpoints.
//!
//! Layout (little-endian): magic `MGCK`, format version (u32), network
//! config (six u32, then the normalization: 0 instance, 1 none), completed
//! iterations (u64), histogram capacity, class count and window length (u32
//! each) followed by the window entries (u64),
//! then a tensor count (u32) and named tensors: name length (u32), UTF-8
//! name, rank (u32), shape (u32 each), f32 payload. Tensor names carry a
//! `student/`, `teacher/` or `momentum/` prefix.

use std::path::Path;

use magicnet_core::blending::ClassHistogram;
use magicnet_core::model::{Grads, NetworkConfig, NetworkParams, Norm, ParamTensor};
use magicnet_core::trainer::TrainState;

use crate::error::{CliError, IoContext, Result};

pub const MAGIC: &[u8; 4] = b"MGCK";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.u32(name.len());
        self.0.extend_from_slice(name.as_bytes());
        self.u32(shape.len());
        for &d in shape {
            self.u32(d);
        }
        for x in data {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION as usize);
    let c = state.student.config();
    for v in [c.num_classes, c.base_width, c.depth, c.cls_hidden, c.cls_grid, c.n_locations] {
        w.u32(v);
    }
    w.u32(match c.norm {
        Norm::Instance => 0,
        Norm::None => 1,
    });
    w.u64(state.iteration);
    let h = &state.histogram;
    let window: Vec<&[u64]> = h.window().collect();
    w.u32(h.capacity());
    w.u32(h.num_classes());
    w.u32(window.len());
    for entry in &window {
        for &v in *entry {
            w.u64(v);
        }
    }
    let n = state.student.tensors().len();
    w.u32(3 * n);
    for (prefix, params) in [("student", &state.student), ("teacher", &state.teacher)] {
        for t in params.tensors() {
            w.tensor(&format!("{prefix}/{}", t.name), &t.shape, &t.data);
        }
    }
    for (t, m) in state.student.tensors().iter().zip(&state.momentum.tensors) {
        w.tensor(&format!("momentum/{}", t.name), &t.shape, m);
    }
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, message: impl Into<String>) -> CliError {
        CliError::Format { path: self.path.to_path_buf(), offset: self.pos as u64, message: message.into() }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} more bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| self.fail("tensor name is not UTF-8"))?;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let count =
            shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| self.fail("shape overflow"))?;
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| self.fail("shape overflow"))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok((name, shape, data))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.fail("missing MGCK magic"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let mut c = [0usize; 6];
    for v in &mut c {
        *v = r.u32()?;
    }
    let norm = match r.u32()? {
        0 => Norm::Instance,
        1 => Norm::None,
        k => return Err(r.fail(format!("unknown normalization {k}"))),
    };
    let config = NetworkConfig {
        num_classes: c[0],
        base_width: c[1],
        depth: c[2],
        cls_hidden: c[3],
        cls_grid: c[4],
        n_locations: c[5],
        norm,
    };
    let iteration = r.u64()?;
    let (capacity, classes, len) = (r.u32()?, r.u32()?, r.u32()?);
    let mut window = Vec::with_capacity(len.min(1 << 16));
    for _ in 0..len {
        window.push((0..classes).map(|_| r.u64()).collect::<Result<Vec<_>>>()?);
    }
    let histogram = ClassHistogram::from_window(classes, capacity, window)?;
    let count = r.u32()?;
    let mut groups: [Vec<ParamTensor>; 3] = Default::default();
    for _ in 0..count {
        let at = r.pos;
        let (name, shape, data) = r.tensor()?;
        let (prefix, rest) = name.split_once('/').ok_or_else(|| r.fail(format!("tensor {name} has no prefix")))?;
        let slot = match prefix {
            "student" => 0,
            "teacher" => 1,
            "momentum" => 2,
            _ => {
                r.pos = at;
                return Err(r.fail(format!("unknown tensor group {prefix}")));
            }
        };
        groups[slot].push(ParamTensor { name: rest.to_string(), shape, data });
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    let [student, teacher, momentum] = groups;
    let student = NetworkParams::from_tensors(config.clone(), student)?;
    let teacher = NetworkParams::from_tensors(config.clone(), teacher)?;
    let momentum = NetworkParams::from_tensors(config, momentum)?;
    let momentum = Grads { tensors: momentum.tensors().iter().map(|t| t.data.clone()).collect() };
    Ok(TrainState { student, teacher, momentum, iteration, histogram })
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(state)).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

pub fn load(path: &Path) -> Result<TrainState> {
    decode(&std::fs::read(path).at(path)?, path)
}
