//! `RFPP1` checkpoint files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "RFPP1"
//! u32            number of layer widths L+1
//! u32 x (L+1)    layer widths
//! u8             activation id (0 = tanh, 1 = relu)
//! u64            init seed
//! for each layer: f64[fan_in * fan_out] weight, f64[fan_out] bias   (raw params)
//! for each layer: f64[fan_in * fan_out] weight, f64[fan_out] bias   (EMA shadow)
//! ```

use std::path::Path;

use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::mlp::{Activation, Layer, MlpParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RFPP1";

/// Raw training parameters together with their EMA shadow.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: MlpParams,
    pub ema: MlpParams,
}

impl Checkpoint {
    /// A fresh checkpoint whose shadow equals the parameters.
    pub fn fresh(params: MlpParams) -> Self {
        Self {
            ema: params.clone(),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        let widths = self.params.widths();
        w.u32(widths.len() as u32);
        for &width in widths {
            w.u32(width as u32);
        }
        w.u8(self.params.activation().id());
        w.u64(self.params.seed());
        for params in [&self.params, &self.ema] {
            for t in params.tensors() {
                w.f64s(t.data());
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let count = r.u32()? as usize;
        if count < 2 {
            return Err(Error::Format(format!("checkpoint lists {count} layer widths")));
        }
        let widths = (0..count)
            .map(|_| r.u32().map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let activation = Activation::from_id(r.u8()?)?;
        let seed = r.u64()?;
        let read_params = |r: &mut ByteReader<'_>| -> Result<MlpParams> {
            let layers = widths
                .windows(2)
                .map(|pair| {
                    let weight = Tensor::new(vec![pair[0], pair[1]], r.f64s(pair[0] * pair[1])?)?;
                    let bias = Tensor::new(vec![pair[1]], r.f64s(pair[1])?)?;
                    Ok(Layer { weight, bias })
                })
                .collect::<Result<Vec<_>>>()?;
            MlpParams::from_layers(activation, seed, layers)
        };
        let params = read_params(&mut r)?;
        let ema = read_params(&mut r)?;
        r.finish()?;
        Ok(Self { params, ema })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
