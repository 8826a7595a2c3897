//! Patch persistence: a single-file container with a JSON metadata header
//! and a length-prefixed little-endian raw float payload. The JSON header
//! keeps the format readable from any language.
//!
//! Layout: `"ADVP"` magic, u32-LE header length, header JSON, u64-LE payload
//! byte length, then the payload (`f64` little-endian, row-major H x W x 3).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::patch::{PatchKind, PatchMetadata, PatchSpec};
use crate::preprocess::PreprocessConfig;
use crate::training::TrainConfig;

const MAGIC: &[u8; 4] = b"ADVP";
/// Current container format version. Readers reject anything newer.
pub const FORMAT_VERSION: u32 = 1;

/// A patch plus everything needed to reproduce and apply it.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchArtifact {
    pub spec: PatchSpec,
    pub preprocess: Option<PreprocessConfig>,
    pub train_config: Option<TrainConfig>,
    pub toolkit_version: String,
    pub created_utc: String,
}

impl PatchArtifact {
    /// Wrap a patch with the current toolkit version and timestamp.
    pub fn new(
        spec: PatchSpec,
        preprocess: Option<PreprocessConfig>,
        train_config: Option<TrainConfig>,
    ) -> Self {
        Self {
            spec,
            preprocess,
            train_config,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            created_utc: utc_timestamp(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(flatten)]
    kind: PatchKind,
    shape: [usize; 3],
    target_label_id: usize,
    metadata: PatchMetadata,
    preprocess: Option<PreprocessConfig>,
    train_config: Option<TrainConfig>,
    toolkit_version: String,
    created_utc: String,
    payload_sha256: String,
}

/// ISO-8601 UTC timestamp; honors `SOURCE_DATE_EPOCH` for reproducible runs.
pub fn utc_timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse::<u64>().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        });
    format_epoch_seconds(secs)
}

/// Civil-date conversion of Unix seconds (proleptic Gregorian).
fn format_epoch_seconds(secs: u64) -> String {
    let days = secs / 86_400;
    let rem = secs % 86_400;
    let (h, m, s) = (rem / 3600, (rem % 3600) / 60, rem % 60);
    // Days-to-civil algorithm over the era structure of the Gregorian calendar.
    let z = days as i64 + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let mo = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if mo <= 2 { y + 1 } else { y };
    format!("{y:04}-{mo:02}-{d:02}T{h:02}:{m:02}:{s:02}Z")
}

fn payload_bytes(params: &Array3<f64>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for v in params.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Serialize a patch artifact to `path`.
pub fn save_patch<P: AsRef<Path>>(artifact: &PatchArtifact, path: P) -> Result<()> {
    let params = &artifact.spec.params;
    let (h, w, c) = params.dim();
    let payload = payload_bytes(params);
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: artifact.spec.kind.clone(),
        shape: [h, w, c],
        target_label_id: artifact.spec.target_label_id,
        metadata: artifact.spec.metadata.clone(),
        preprocess: artifact.preprocess.clone(),
        train_config: artifact.train_config.clone(),
        toolkit_version: artifact.toolkit_version.clone(),
        created_utc: artifact.created_utc.clone(),
        payload_sha256: sha256_hex(&payload),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut file = std::fs::File::create(path.as_ref())?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&(payload.len() as u64).to_le_bytes())?;
    file.write_all(&payload)?;
    Ok(())
}

fn read_exact_or_integrity(file: &mut std::fs::File, buf: &mut [u8], what: &str) -> Result<()> {
    file.read_exact(buf)
        .map_err(|_| Error::Integrity(format!("truncated artifact while reading {what}")))
}

/// Load a patch artifact, verifying the format version, payload length,
/// shape and checksum.
pub fn load_patch<P: AsRef<Path>>(path: P) -> Result<PatchArtifact> {
    let mut file = std::fs::File::open(path.as_ref())?;
    let mut magic = [0u8; 4];
    read_exact_or_integrity(&mut file, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Integrity("not a patch artifact (bad magic)".into()));
    }
    let mut len4 = [0u8; 4];
    read_exact_or_integrity(&mut file, &mut len4, "header length")?;
    let header_len = u32::from_le_bytes(len4) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact_or_integrity(&mut file, &mut header_bytes, "header")?;

    // Check the declared version before fully parsing, so future formats get
    // a version error rather than a parse error.
    let probe: serde_json::Value = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Integrity(format!("unreadable artifact header: {e}")))?;
    let version = probe
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Integrity("artifact header lacks format_version".into()))?;
    if version as u32 > FORMAT_VERSION {
        return Err(Error::Incompatibility(format!(
            "artifact format version {version} is newer than supported {FORMAT_VERSION}"
        )));
    }
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Integrity(format!("malformed artifact header: {e}")))?;

    let mut len8 = [0u8; 8];
    read_exact_or_integrity(&mut file, &mut len8, "payload length")?;
    let payload_len = u64::from_le_bytes(len8) as usize;
    let mut payload = vec![0u8; payload_len];
    read_exact_or_integrity(&mut file, &mut payload, "payload")?;

    if sha256_hex(&payload) != header.payload_sha256 {
        return Err(Error::Integrity("payload checksum mismatch".into()));
    }
    let [h, w, c] = header.shape;
    if payload_len != h * w * c * 8 {
        return Err(Error::Integrity(format!(
            "payload length {payload_len} does not match shape {h}x{w}x{c}"
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let params = Array3::from_shape_vec((h, w, c), values)
        .map_err(|e| Error::Integrity(format!("payload shape error: {e}")))?;

    let spec = match header.kind.clone() {
        PatchKind::Square => {
            PatchSpec::square(params, header.target_label_id, header.metadata.clone())?
        }
        PatchKind::Frame { width } => {
            PatchSpec::frame(width, params, header.target_label_id, header.metadata.clone())?
        }
        PatchKind::Text {
            text,
            area_fraction,
        } => PatchSpec::text(
            text,
            area_fraction,
            header.target_label_id,
            header.metadata.clone(),
        )?,
    };
    Ok(PatchArtifact {
        spec,
        preprocess: header.preprocess,
        train_config: header.train_config,
        toolkit_version: header.toolkit_version,
        created_utc: header.created_utc,
    })
}
