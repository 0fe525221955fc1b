//! `TPCKPT1` checkpoint files.
//!
//! Layout: magic, u32 layer count, then tensors in the order
//! `W_1, g_1?, R_1?, ..., W_L, g_L?, R_L?, S, readout`. Each tensor is a u32
//! rank, `rank` u32 dims and a little-endian f32 payload. Optional tensors are
//! present exactly when the receiving network has them, so a checkpoint is
//! loaded into a network built from the same architecture.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::error::{Result, TpError};
use crate::network::TpNetwork;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"TPCKPT1";

fn tensors<T: Scalar>(net: &TpNetwork<T>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    let flat2 = |a: &Array2<T>| a.iter().map(|v| v.to_f32_lossy()).collect::<Vec<f32>>();
    for (i, layer) in net.layers.iter().enumerate() {
        out.push((format!("W_{}", i + 1), layer.weights.shape().to_vec(), flat2(&layer.weights)));
        if let Some(g) = &layer.gain {
            out.push((format!("g_{}", i + 1), vec![g.len()], g.iter().map(|v| v.to_f32_lossy()).collect()));
        }
        if let Some(r) = &layer.recurrent {
            out.push((format!("R_{}", i + 1), r.shape().to_vec(), flat2(r)));
        }
    }
    out.push(("S".into(), net.target_propagator.shape().to_vec(), flat2(&net.target_propagator)));
    out.push(("readout".into(), net.readout.shape().to_vec(), flat2(&net.readout)));
    out
}

pub fn write_checkpoint<T: Scalar, W: Write>(net: &TpNetwork<T>, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
    for (_, dims, data) in tensors(net) {
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in &dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes<T: Scalar>(net: &TpNetwork<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(net, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn save_checkpoint<T: Scalar>(net: &TpNetwork<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(net))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| TpError::format(self.pos as u64, format!("truncated {what}")))?;
        self.pos = end;
        Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| TpError::format(self.pos as u64, format!("{what} too large")))?;
        let chunk = self
            .pos
            .checked_add(len)
            .and_then(|end| self.bytes.get(self.pos..end))
            .ok_or_else(|| TpError::format(self.pos as u64, format!("truncated payload of {what}")))?;
        self.pos += len;
        Ok(chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn tensor(&mut self, name: &str) -> Result<ArrayD<f32>> {
        let at = self.pos as u64;
        let rank = self.u32(&format!("rank of {name}"))? as usize;
        if rank > 8 {
            return Err(TpError::format(at, format!("rank {rank} of {name} is implausible")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32(&format!("dims of {name}"))? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TpError::format(at, format!("dims of {name} overflow")))?;
        let data = self.f32s(n, name)?;
        Ok(ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length checked"))
    }
}

fn assign2<T: Scalar>(dst: &mut Array2<T>, src: ArrayD<f32>, name: &str, at: u64) -> Result<()> {
    if src.shape() != dst.shape() {
        return Err(TpError::format(
            at,
            format!("{name} has shape {:?}, network expects {:?}", src.shape(), dst.shape()),
        ));
    }
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = T::of_f32(*s);
    }
    Ok(())
}

fn assign1<T: Scalar>(dst: &mut Array1<T>, src: ArrayD<f32>, name: &str, at: u64) -> Result<()> {
    if src.shape() != dst.shape() {
        return Err(TpError::format(
            at,
            format!("{name} has shape {:?}, network expects {:?}", src.shape(), dst.shape()),
        ));
    }
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = T::of_f32(*s);
    }
    Ok(())
}

/// Overwrites the parameters of `net` with the checkpoint contents. The
/// network is left untouched when the checkpoint does not match.
pub fn read_checkpoint_into<T: Scalar>(net: &mut TpNetwork<T>, bytes: &[u8]) -> Result<()> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(TpError::format(0, "missing TPCKPT1 magic"));
    }
    let mut cur = Cursor {
        bytes,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let layers = cur.u32("layer count")? as usize;
    if layers != net.layers.len() {
        return Err(TpError::format(
            CHECKPOINT_MAGIC.len() as u64,
            format!("checkpoint has {layers} layers, network has {}", net.layers.len()),
        ));
    }
    let mut staged = net.clone();
    for (i, layer) in staged.layers.iter_mut().enumerate() {
        let at = cur.pos as u64;
        let name = format!("W_{}", i + 1);
        assign2(&mut layer.weights, cur.tensor(&name)?, &name, at)?;
        if let Some(g) = layer.gain.as_mut() {
            let at = cur.pos as u64;
            let name = format!("g_{}", i + 1);
            assign1(g, cur.tensor(&name)?, &name, at)?;
        }
        if let Some(r) = layer.recurrent.as_mut() {
            let at = cur.pos as u64;
            let name = format!("R_{}", i + 1);
            assign2(r, cur.tensor(&name)?, &name, at)?;
        }
        layer.refresh()?;
    }
    let at = cur.pos as u64;
    assign2(&mut staged.target_propagator, cur.tensor("S")?, "S", at)?;
    let at = cur.pos as u64;
    assign2(&mut staged.readout, cur.tensor("readout")?, "readout", at)?;
    if cur.pos != bytes.len() {
        return Err(TpError::format(cur.pos as u64, "trailing bytes after readout"));
    }
    *net = staged;
    Ok(())
}

pub fn load_checkpoint_into<T: Scalar>(net: &mut TpNetwork<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = std::fs::read(path)?;
    read_checkpoint_into(net, &bytes)
}
