//! `<name>.vol` / `<name>.volh` image pairs and `<name>.lab` / `<name>.labh`
//! label pairs. Payloads are raw little-endian samples; headers are TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelVolume, Modality, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: [usize; 4],
    pub spacing: [f64; 3],
    pub modality: Modality,
    pub dtype: String,
    #[serde(default = "little")]
    pub byte_order: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelHeader {
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub dtype: String,
    #[serde(default = "little")]
    pub byte_order: String,
}

fn little() -> String {
    "little".into()
}

/// Resolves `(payload, header)` paths from either file of the pair or the bare stem.
fn pair(path: &Path, payload: &str, header: &str) -> (PathBuf, PathBuf) {
    let ext = path.extension().and_then(|e| e.to_str());
    let stem = if ext == Some(payload) || ext == Some(header) {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    let with = |e: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(e);
        PathBuf::from(s)
    };
    (with(payload), with(header))
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read_header<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| format_err(path, format!("cannot read header: {e}")))?;
    toml::from_str(&text).map_err(|e| format_err(path, format!("garbled header: {e}")))
}

fn check_byte_order(path: &Path, order: &str) -> Result<()> {
    if order != "little" {
        return Err(format_err(
            path,
            format!("unsupported byte order `{order}`"),
        ));
    }
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (payload, header) = pair(path.as_ref(), "vol", "volh");
    let h: VolumeHeader = read_header(&header)?;
    if h.dtype != "f32le" {
        return Err(format_err(
            &header,
            format!("dtype must be \"f32le\", got {:?}", h.dtype),
        ));
    }
    check_byte_order(&header, &h.byte_order)?;
    if h.shape.contains(&0) {
        return Err(format_err(
            &header,
            format!("zero extent in shape {:?}", h.shape),
        ));
    }
    let bytes = fs::read(&payload)?;
    let expected = h.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::PayloadLength {
            path: payload,
            expected,
            actual: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(expected / 4);
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(format_err(
                &payload,
                format!("non-finite voxel at index {i}"),
            ));
        }
        data.push(f64::from(v));
    }
    Volume::new(h.shape, h.spacing, h.modality, data)
        .map_err(|e| format_err(&header, e.to_string()))
}

/// Writes the pair; voxels are narrowed to f32.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (payload, header) = pair(path.as_ref(), "vol", "volh");
    let h = VolumeHeader {
        shape: v.shape(),
        spacing: v.spacing(),
        modality: v.modality(),
        dtype: "f32le".into(),
        byte_order: little(),
    };
    let mut bytes = Vec::with_capacity(v.data().len() * 4);
    for &x in v.data() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(&payload, bytes)?;
    fs::write(&header, toml::to_string(&h).expect("header serializes"))?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let (payload, header) = pair(path.as_ref(), "lab", "labh");
    let h: LabelHeader = read_header(&header)?;
    if h.dtype != "u16le" {
        return Err(format_err(
            &header,
            format!("dtype must be \"u16le\", got {:?}", h.dtype),
        ));
    }
    check_byte_order(&header, &h.byte_order)?;
    let bytes = fs::read(&payload)?;
    let expected = h.shape.iter().product::<usize>() * 2;
    if bytes.len() != expected {
        return Err(Error::PayloadLength {
            path: payload,
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelVolume::new(h.shape, h.num_classes, data).map_err(|e| format_err(&header, e.to_string()))
}

pub fn save_labels(l: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let (payload, header) = pair(path.as_ref(), "lab", "labh");
    let h = LabelHeader {
        shape: l.shape(),
        num_classes: l.num_classes(),
        dtype: "u16le".into(),
        byte_order: little(),
    };
    let bytes: Vec<u8> = l.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&payload, bytes)?;
    fs::write(&header, toml::to_string(&h).expect("header serializes"))?;
    Ok(())
}
