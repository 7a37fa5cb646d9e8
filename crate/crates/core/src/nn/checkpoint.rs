//! Binary checkpoint format.
//!
//! ```text
//! magic      4 bytes  "FSKN"
//! version    u32 LE   (1)
//! activation u32 LE   (0 = relu, 1 = tanh)
//! n_layers   u32 LE
//! dims       n_layers x u32 LE
//! values     param_count x f64 LE, in shape-map order
//! ```

use std::fs;
use std::path::Path;

use super::{Activation, ModelSpec, ParamVector};
use crate::codec::Reader;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSKN";
pub const VERSION: u32 = 1;

pub fn encoded_len(spec: &ModelSpec) -> usize {
    16 + 4 * spec.layer_sizes.len() + 8 * spec.param_count()
}

pub fn to_bytes(params: &ParamVector, spec: &ModelSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    if params.dims() != spec.layer_sizes.as_slice() {
        return Err(Error::Format(format!(
            "parameter layout {:?} does not match spec {:?}",
            params.dims(),
            spec.layer_sizes
        )));
    }
    let mut out = Vec::with_capacity(encoded_len(spec));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let act: u32 = match spec.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    };
    out.extend_from_slice(&act.to_le_bytes());
    out.extend_from_slice(&(spec.layer_sizes.len() as u32).to_le_bytes());
    for &d in &spec.layer_sizes {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes a checkpoint without a reference spec. The returned spec has seed 0.
pub fn decode(bytes: &[u8]) -> Result<(ModelSpec, ParamVector)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let activation = match r.u32()? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        other => return Err(Error::Format(format!("unknown activation code {other}"))),
    };
    let n_layers = r.u32()? as usize;
    if n_layers > 1 << 16 {
        return Err(Error::Format(format!("implausible layer count {n_layers}")));
    }
    let dims = (0..n_layers)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let spec = ModelSpec {
        layer_sizes: dims,
        activation,
        seed: 0,
    };
    spec.validate().map_err(|e| Error::Format(e.to_string()))?;
    let n = spec.param_count();
    let values = r.f64s(n)?;
    r.finish()?;
    let params = ParamVector::from_values(&spec, values)?;
    Ok((spec, params))
}

/// Decodes a checkpoint and checks it against `spec`.
pub fn from_bytes(bytes: &[u8], spec: &ModelSpec) -> Result<ParamVector> {
    let (found, params) = decode(bytes)?;
    if found.layer_sizes != spec.layer_sizes || found.activation != spec.activation {
        return Err(Error::Format(format!(
            "checkpoint dims {:?} ({}) do not match spec {:?} ({})",
            found.layer_sizes,
            found.activation.name(),
            spec.layer_sizes,
            spec.activation.name()
        )));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamVector, spec: &ModelSpec) -> Result<()> {
    let bytes = to_bytes(params, spec)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, spec: &ModelSpec) -> Result<ParamVector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, spec)
}
