//! `TPDATA1` container: magic, then little-endian `u32` sample count, time
//! steps, features and class count, the `u32` labels, and finally the `f32`
//! samples row-major `[sample][time][feature]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;

use super::FrameTensor;
use crate::error::{Result, TpError};

pub const CONTAINER_MAGIC: &[u8; 7] = b"TPDATA1";

pub fn write_container<W: Write>(data: &FrameTensor, mut out: W) -> Result<()> {
    let dims = [data.len(), data.steps(), data.features(), data.num_classes];
    let mut header = Vec::with_capacity(7 + 16 + 4 * data.len());
    header.extend_from_slice(CONTAINER_MAGIC);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| TpError::Input(format!("dimension {d} does not fit in u32")))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    for &l in &data.labels {
        header.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out.write_all(&header)?;
    let mut payload = Vec::with_capacity(4 * data.data.len());
    for &x in data.data.iter() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    out.write_all(&payload)?;
    Ok(())
}

pub fn save_container(data: &FrameTensor, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_container(data, &mut buf)?;
    fs::write(path, buf)?;
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
            .ok_or_else(|| TpError::format(self.pos as u64, format!("truncated while reading {what}")))?;
        self.pos = end;
        Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
    }
}

pub fn read_container(bytes: &[u8]) -> Result<FrameTensor> {
    if bytes.len() < CONTAINER_MAGIC.len() || &bytes[..CONTAINER_MAGIC.len()] != CONTAINER_MAGIC {
        return Err(TpError::format(0, "bad magic, expected TPDATA1"));
    }
    let mut cur = Cursor {
        bytes,
        pos: CONTAINER_MAGIC.len(),
    };
    let samples = cur.u32("sample count")? as usize;
    let steps = cur.u32("time steps")? as usize;
    let features = cur.u32("feature count")? as usize;
    let classes = cur.u32("class count")? as usize;
    let header_end = cur.pos as u64;
    let values = samples
        .checked_mul(steps)
        .and_then(|v| v.checked_mul(features))
        .filter(|v| v.checked_mul(4).is_some())
        .ok_or_else(|| TpError::format(CONTAINER_MAGIC.len() as u64, "dimension overflow"))?;
    let needed = (samples as u64) * 4 + (values as u64) * 4;
    if (bytes.len() as u64) < header_end + needed {
        return Err(TpError::format(
            bytes.len() as u64,
            format!("truncated payload: need {} bytes after header, have {}", needed, bytes.len() as u64 - header_end),
        ));
    }
    let mut labels = Vec::with_capacity(samples);
    for _ in 0..samples {
        let at = cur.pos as u64;
        let l = cur.u32("label")? as usize;
        if l >= classes {
            return Err(TpError::format(at, format!("label {l} outside {classes} classes")));
        }
        labels.push(l);
    }
    let payload = &bytes[cur.pos..cur.pos + values * 4];
    let flat: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if cur.pos + values * 4 != bytes.len() {
        return Err(TpError::format((cur.pos + values * 4) as u64, "trailing bytes after payload"));
    }
    let data = Array3::from_shape_vec((samples, steps, features), flat).map_err(|e| TpError::format(header_end, e.to_string()))?;
    FrameTensor::new(data, labels, classes)
}

pub fn load_container(path: impl AsRef<Path>) -> Result<FrameTensor> {
    read_container(&fs::read(path)?)
}
