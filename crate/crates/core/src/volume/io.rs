//! Two-file volume format: a raw little-endian payload (`<name>.vol`, or
//! gzip-compressed `<name>.vol.gz`) next to a JSON sidecar `<name>.json`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::{LabelMap, Modality, Volume};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// One of `MRI`, `CT`, `SCT`, `LABEL`.
    pub modality: String,
    /// `f32` for intensity volumes, `u8` for label maps.
    pub dtype: String,
    pub version: u32,
}

struct Paths {
    payload: PathBuf,
    gz_payload: PathBuf,
    sidecar: PathBuf,
}

/// Accepts `dir/name`, `dir/name.vol`, `dir/name.vol.gz` or `dir/name.json`.
fn paths_for(path: &Path) -> (Paths, bool) {
    let s = path.to_string_lossy();
    let (stem, gz) = if let Some(st) = s.strip_suffix(".vol.gz") {
        (st.to_string(), true)
    } else if let Some(st) = s.strip_suffix(".vol") {
        (st.to_string(), false)
    } else if let Some(st) = s.strip_suffix(".json") {
        (st.to_string(), false)
    } else {
        (s.to_string(), false)
    };
    (
        Paths {
            payload: PathBuf::from(format!("{stem}.vol")),
            gz_payload: PathBuf::from(format!("{stem}.vol.gz")),
            sidecar: PathBuf::from(format!("{stem}.json")),
        },
        gz,
    )
}

fn modality_tag(m: Modality) -> &'static str {
    match m {
        Modality::Mri => "MRI",
        Modality::Ct => "CT",
        Modality::Sct => "SCT",
    }
}

fn write_pair(path: &Path, sidecar: &Sidecar, bytes: &[u8]) -> Result<()> {
    let (p, gz) = paths_for(path);
    if let Some(dir) = p.sidecar.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    if gz {
        let file = fs::File::create(&p.gz_payload).map_err(|e| Error::io(&p.gz_payload, e))?;
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)
            .and_then(|_| enc.finish().map(|_| ()))
            .map_err(|e| Error::io(&p.gz_payload, e))?;
    } else {
        fs::write(&p.payload, bytes).map_err(|e| Error::io(&p.payload, e))?;
    }
    let json = serde_json::to_string_pretty(sidecar)?;
    fs::write(&p.sidecar, json).map_err(|e| Error::io(&p.sidecar, e))
}

fn read_pair(path: &Path) -> Result<(Sidecar, Vec<u8>, PathBuf)> {
    let (p, gz_hint) = paths_for(path);
    let text = fs::read_to_string(&p.sidecar).map_err(|e| Error::io(&p.sidecar, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: p.sidecar.clone(),
        reason: e.to_string(),
    })?;
    // Check the version before the full schema so newer layouts report a
    // version error rather than a field mismatch.
    let version = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| Error::Format {
        path: p.sidecar.clone(),
        reason: "missing integer \"version\"".into(),
    })?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let sidecar: Sidecar = serde_json::from_value(raw).map_err(|e| Error::Format {
        path: p.sidecar.clone(),
        reason: e.to_string(),
    })?;
    let use_gz = gz_hint || (!p.payload.exists() && p.gz_payload.exists());
    let (payload_path, bytes) = if use_gz {
        let file = fs::File::open(&p.gz_payload).map_err(|e| Error::io(&p.gz_payload, e))?;
        let mut bytes = Vec::new();
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(&p.gz_payload, e))?;
        (p.gz_payload, bytes)
    } else {
        let bytes = fs::read(&p.payload).map_err(|e| Error::io(&p.payload, e))?;
        (p.payload, bytes)
    };
    Ok((sidecar, bytes, payload_path))
}

/// Writes an intensity volume. A path ending in `.vol.gz` selects gzip.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let sidecar = Sidecar {
        shape: v.shape(),
        spacing_mm: v.spacing_mm(),
        modality: modality_tag(v.modality()).into(),
        dtype: "f32".into(),
        version: FORMAT_VERSION,
    };
    write_pair(path.as_ref(), &sidecar, &bytes)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (sc, bytes, payload) = read_pair(path.as_ref())?;
    let fmt = |reason: String| Error::Format {
        path: payload.clone(),
        reason,
    };
    if sc.dtype != "f32" {
        return Err(fmt(format!("expected dtype f32, found {}", sc.dtype)));
    }
    let modality = match sc.modality.as_str() {
        "MRI" => Modality::Mri,
        "CT" => Modality::Ct,
        "SCT" => Modality::Sct,
        other => return Err(fmt(format!("modality {other} is not an intensity volume"))),
    };
    let expected: usize = sc.shape.iter().product();
    if bytes.len() != expected * 4 {
        return Err(fmt(format!(
            "payload holds {} bytes, header shape {:?} needs {}",
            bytes.len(),
            sc.shape,
            expected * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(data, sc.shape, sc.spacing_mm, modality)
}

pub fn save_labels(l: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let sidecar = Sidecar {
        shape: l.shape(),
        spacing_mm: l.spacing_mm(),
        modality: "LABEL".into(),
        dtype: "u8".into(),
        version: FORMAT_VERSION,
    };
    write_pair(path.as_ref(), &sidecar, l.data())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let (sc, bytes, payload) = read_pair(path.as_ref())?;
    let fmt = |reason: String| Error::Format {
        path: payload.clone(),
        reason,
    };
    if sc.dtype != "u8" || sc.modality != "LABEL" {
        return Err(fmt(format!(
            "expected LABEL/u8, found {}/{}",
            sc.modality, sc.dtype
        )));
    }
    let expected: usize = sc.shape.iter().product();
    if bytes.len() != expected {
        return Err(fmt(format!(
            "payload holds {} bytes, header shape {:?} needs {expected}",
            bytes.len(),
            sc.shape
        )));
    }
    LabelMap::new(bytes, sc.shape, sc.spacing_mm)
}
