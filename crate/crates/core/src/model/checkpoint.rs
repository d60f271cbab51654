//! Quantized model checkpoints.
//!
//! Little-endian binary layout:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `b"MPOTACK1"`                     |
//! | 8      | 4    | `u32` layer count `L`                   |
//! | 12     | 4·L  | `u32` layer widths                      |
//! | ..     | 4    | `u32` spec string length `S`            |
//! | ..     | S    | spec string, UTF-8 (e.g. `fx4`)         |
//!
//! followed by one record per tensor, in `[W0, b0, W1, b1, ..]` order:
//!
//! | size | field                 |
//! |------|-----------------------|
//! | 8    | `f64` scale           |
//! | 8    | `u64` code count `n`  |
//! | 8·n  | `i64` codes           |

use std::io::{Read, Write};

use super::{Architecture, QuantizedParams};
use crate::error::{Error, Result};
use crate::quant::{QuantSpec, QuantizedTensor};

pub const MAGIC: &[u8; 8] = b"MPOTACK1";

fn io_err(e: std::io::Error) -> Error {
    Error::io("<checkpoint stream>", e)
}

pub fn write_checkpoint<W: Write>(params: &QuantizedParams, mut w: W) -> Result<()> {
    let arch = params.arch();
    let spec = params.spec().to_string();
    let mut buf = Vec::with_capacity(64 + 8 * arch.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(arch.layer_dims().len() as u32).to_le_bytes());
    for &d in arch.layer_dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    buf.extend_from_slice(spec.as_bytes());
    for t in params.tensors() {
        buf.extend_from_slice(&t.scale().to_le_bytes());
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for &c in t.codes() {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io_err)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::parse(
                "checkpoint",
                format!("byte {}", self.pos),
                format!("truncated while reading {what}"),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<QuantizedParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io_err)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::parse("checkpoint", "byte 0", "bad magic"));
    }
    let layers = c.u32("layer count")? as usize;
    if layers > 1024 {
        return Err(Error::parse("checkpoint", "byte 8", "implausible layer count"));
    }
    let dims = (0..layers)
        .map(|_| c.u32("layer width").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let arch = Architecture::new(dims)?;
    let spec_len = c.u32("spec length")? as usize;
    let spec_text = std::str::from_utf8(c.take(spec_len, "spec")?)
        .map_err(|_| Error::parse("checkpoint", format!("byte {}", c.pos), "spec is not UTF-8"))?;
    let spec: QuantSpec = spec_text.parse()?;
    let mut tensors = Vec::new();
    for slot in arch.layers() {
        for shape in [vec![slot.fan_out, slot.fan_in], vec![slot.fan_out]] {
            let scale = f64::from_le_bytes(c.take(8, "scale")?.try_into().unwrap());
            let n = c.u64("code count")? as usize;
            let expected: usize = shape.iter().product();
            if n != expected {
                return Err(Error::Dimension { expected, actual: n });
            }
            let codes = c
                .take(n * 8, "codes")?
                .chunks_exact(8)
                .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(QuantizedTensor::from_parts(codes, scale, spec, shape)?);
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::parse("checkpoint", format!("byte {}", c.pos), "trailing bytes"));
    }
    QuantizedParams::from_tensors(&arch, tensors)
}
