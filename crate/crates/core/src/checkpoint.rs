//! Versioned binary checkpoints: shapes plus flat little-endian f64 weight
//! arrays and the grouping mode. Round-trips are bit-exact.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Architecture, GroupingMode, LayerKind, LayerParams, NetworkParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SGL0CKPT";
const VERSION: u32 = 1;

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&[t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let ndim = read_u8(r)? as usize;
    if ndim == 0 || ndim > 4 {
        return Err(bad(format!("tensor rank {} out of range 1..=4", ndim)));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    if numel > 100_000_000 {
        return Err(bad(format!("tensor of {} elements is implausible", numel)));
    }
    let mut data = vec![0.0f64; numel];
    let mut b = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Tensor::from_vec(&shape, data)
}

/// Serialize the network and its grouping mode.
pub fn write_checkpoint(path: &Path, net: &NetworkParams, grouping: GroupingMode) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    match &net.arch {
        Architecture::LeNet5Caffe => w.write_all(&[0u8])?,
        Architecture::Mlp { sizes } => {
            w.write_all(&[1u8])?;
            w.write_all(&(sizes.len() as u32).to_le_bytes())?;
            for &s in sizes {
                w.write_all(&(s as u32).to_le_bytes())?;
            }
        }
    }
    w.write_all(&[match grouping {
        GroupingMode::Input => 0u8,
        GroupingMode::Output => 1u8,
    }])?;
    w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
    for layer in &net.layers {
        match layer.kind {
            LayerKind::Conv2d { stride } => {
                w.write_all(&[0u8])?;
                w.write_all(&(stride as u32).to_le_bytes())?;
            }
            LayerKind::Linear => w.write_all(&[1u8])?,
        }
        write_tensor(&mut w, &layer.weight)?;
        match &layer.bias {
            Some(b) => {
                w.write_all(&[1u8])?;
                write_tensor(&mut w, b)?;
            }
            None => w.write_all(&[0u8])?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(path: &Path) -> Result<(NetworkParams, GroupingMode)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("{}: bad magic {:?}", path.display(), &magic)));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!(
            "{}: unsupported version {} (supported: {})",
            path.display(),
            version,
            VERSION
        )));
    }
    let arch = match read_u8(&mut r)? {
        0 => Architecture::LeNet5Caffe,
        1 => {
            let n = read_u32(&mut r)? as usize;
            if n < 2 || n > 64 {
                return Err(bad(format!("mlp size list of length {}", n)));
            }
            let mut sizes = Vec::with_capacity(n);
            for _ in 0..n {
                sizes.push(read_u32(&mut r)? as usize);
            }
            Architecture::Mlp { sizes }
        }
        other => return Err(bad(format!("unknown architecture tag {}", other))),
    };
    let grouping = match read_u8(&mut r)? {
        0 => GroupingMode::Input,
        1 => GroupingMode::Output,
        other => return Err(bad(format!("unknown grouping tag {}", other))),
    };
    let layer_count = read_u32(&mut r)? as usize;
    if layer_count == 0 || layer_count > 256 {
        return Err(bad(format!("layer count {} out of range", layer_count)));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for li in 0..layer_count {
        let kind = match read_u8(&mut r)? {
            0 => LayerKind::Conv2d {
                stride: read_u32(&mut r)? as usize,
            },
            1 => LayerKind::Linear,
            other => return Err(bad(format!("layer {}: unknown kind tag {}", li, other))),
        };
        let weight = read_tensor(&mut r)?;
        let want_rank = match kind {
            LayerKind::Conv2d { .. } => 4,
            LayerKind::Linear => 2,
        };
        if weight.shape().len() != want_rank {
            return Err(bad(format!(
                "layer {}: weight rank {} does not match kind",
                li,
                weight.shape().len()
            )));
        }
        let bias = match read_u8(&mut r)? {
            0 => None,
            1 => Some(read_tensor(&mut r)?),
            other => return Err(bad(format!("layer {}: bad bias tag {}", li, other))),
        };
        layers.push(LayerParams { kind, weight, bias });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    Ok((NetworkParams { arch, layers }, grouping))
}
