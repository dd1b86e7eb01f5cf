//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "USCN" | u32 version | u32 layer count
//! per layer:  u32 kernel, u32 in, u32 out, u32 stride, u8 upsample_before, u8 activation
//! per layer:  weights, bias,
//!             u64 step, first moment, second moment   (weights optimizer)
//!             u64 step, first moment, second moment   (bias optimizer)
//! ```
//!
//! Every tensor is a `u32` element count followed by that many `f32` values.

use std::fs;
use std::path::Path;

use crate::adam::AdamState;
use crate::conv::ConvLayer;
use crate::error::{Error, Result};
use crate::network::{EncoderDecoderNet, LayerAdam, LayerSpec, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"USCN";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint(net: &EncoderDecoderNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.specs().len() as u32).to_le_bytes());
    for s in net.specs() {
        for v in [s.kernel, s.in_channels, s.out_channels, s.stride] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(s.upsample_before as u8);
        out.push(s.activation as u8);
    }
    let put = |out: &mut Vec<u8>, t: &Tensor| {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    let put_state = |out: &mut Vec<u8>, s: &AdamState| {
        out.extend_from_slice(&s.step_count.to_le_bytes());
        put(out, &s.first_moment);
        put(out, &s.second_moment);
    };
    for (layer, adam) in net.layers().iter().zip(net.adam_states()) {
        put(&mut out, layer.weights());
        put(&mut out, layer.bias());
        put_state(&mut out, &adam.weights);
        put_state(&mut out, &adam.bias);
    }
    out
}

pub fn save_checkpoint(net: &EncoderDecoderNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderDecoderNet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(Error::Checkpoint {
                expected: format!("{n} bytes of {what} at offset {}", self.pos),
                found: format!("{remaining} bytes (truncated file)"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let n = self.u32(what)? as usize;
        let expected: usize = shape.iter().product();
        if n != expected {
            return Err(Error::Checkpoint {
                expected: format!("{expected} values for {what}"),
                found: format!("{n}"),
            });
        }
        let raw = self.take(4 * n, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(shape, data)
    }

    fn adam(&mut self, shape: &[usize], what: &str) -> Result<AdamState> {
        Ok(AdamState {
            step_count: self.u64(what)?,
            first_moment: self.tensor(shape, what)?,
            second_moment: self.tensor(shape, what)?,
        })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<EncoderDecoderNet> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint {
            expected: "magic \"USCN\"".into(),
            found: format!("{:?}", String::from_utf8_lossy(magic)),
        });
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            expected: format!("format version {FORMAT_VERSION}"),
            found: format!("version {version}"),
        });
    }
    let count = r.u32("layer count")? as usize;
    if count == 0 || count > 1024 {
        return Err(Error::Checkpoint {
            expected: "between 1 and 1024 layers".into(),
            found: format!("{count}"),
        });
    }
    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let mut field = || r.u32("layer table").map(|v| v as usize);
        let (kernel, in_channels, out_channels, stride) = (field()?, field()?, field()?, field()?);
        specs.push(LayerSpec {
            kernel,
            in_channels,
            out_channels,
            stride,
            upsample_before: r.u8("layer table")? != 0,
            activation: r.u8("layer table")? != 0,
        });
    }
    let mut layers = Vec::with_capacity(count);
    let mut adam = Vec::with_capacity(count);
    for (i, s) in specs.iter().enumerate() {
        let wshape = [s.out_channels, s.in_channels, s.kernel, s.kernel];
        let bshape = [s.out_channels];
        let weights = r.tensor(&wshape, &format!("layer {i} weights"))?;
        let bias = r.tensor(&bshape, &format!("layer {i} bias"))?;
        let wstate = r.adam(&wshape, &format!("layer {i} weight optimizer"))?;
        let bstate = r.adam(&bshape, &format!("layer {i} bias optimizer"))?;
        layers.push(ConvLayer::new(weights, bias, s.stride, s.activation)?);
        adam.push(LayerAdam {
            weights: wstate,
            bias: bstate,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint {
            expected: format!("end of file at offset {}", r.pos),
            found: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Network::from_parts(specs, layers, adam)
}
