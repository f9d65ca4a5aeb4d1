//! Model checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "NNIFMDL1"
//! u32     layer count L
//! u32     input dim
//! u32     class count
//! L x (u32 in_dim, u32 out_dim, u8 activation)   0 = relu, 1 = identity
//! f64 ... parameters in canonical flat order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array1;

use super::{Activation, Layer, ModelParams};
use crate::error::{Error, Result};
use crate::io_util::{check_magic, read_f64, read_u32, read_u8, write_f64, write_u32};

const MAGIC: &[u8; 8] = b"NNIFMDL1";

/// Writes a model checkpoint.
pub fn save_model(model: &ModelParams, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    write_u32(&mut w, model.layers().len() as u32).map_err(io)?;
    write_u32(&mut w, model.input_dim() as u32).map_err(io)?;
    write_u32(&mut w, model.class_count() as u32).map_err(io)?;
    for layer in model.layers() {
        write_u32(&mut w, layer.in_dim() as u32).map_err(io)?;
        write_u32(&mut w, layer.out_dim() as u32).map_err(io)?;
        let act = match layer.activation {
            Activation::Relu => 0u8,
            Activation::Identity => 1u8,
        };
        w.write_all(&[act]).map_err(io)?;
    }
    for v in model.flatten() {
        write_f64(&mut w, v).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a model checkpoint, validating magic, dimension chain and
/// finiteness.
pub fn load_model(path: &Path) -> Result<ModelParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    check_magic(&mut r, MAGIC, path)?;
    let io = |e| Error::io(path, e);
    let n_layers = read_u32(&mut r).map_err(io)? as usize;
    let input_dim = read_u32(&mut r).map_err(io)? as usize;
    let class_count = read_u32(&mut r).map_err(io)? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(Error::format(path, format!("layer count {n_layers}")));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = read_u32(&mut r).map_err(io)? as usize;
        let out_dim = read_u32(&mut r).map_err(io)? as usize;
        let act = match read_u8(&mut r).map_err(io)? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            other => {
                return Err(Error::format(path, format!("unknown activation {other}")));
            }
        };
        shapes.push((in_dim, out_dim, act));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for &(in_dim, out_dim, act) in &shapes {
        let mut weight = ndarray::Array2::zeros((out_dim, in_dim));
        for i in 0..out_dim {
            for j in 0..in_dim {
                weight[[i, j]] = read_f64(&mut r).map_err(io)?;
            }
        }
        let mut bias = Array1::zeros(out_dim);
        for i in 0..out_dim {
            bias[i] = read_f64(&mut r).map_err(io)?;
        }
        layers.push(Layer {
            weight,
            bias,
            activation: act,
        });
    }
    let model = ModelParams::new(layers, input_dim)?;
    if model.class_count() != class_count {
        return Err(Error::format(
            path,
            format!(
                "header class count {class_count} != final layer width {}",
                model.class_count()
            ),
        ));
    }
    Ok(model)
}
