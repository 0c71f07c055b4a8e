//! Encoder checkpoints: the weights plus a JSON manifest entry carrying the
//! encoder layout and the Lab normalization used during training.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{self, ArchiveEntry};
use crate::data::LabNorm;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};

pub const MANIFEST_ENTRY: &str = "manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    /// `"spatial"` or `"temporal"`.
    pub stage: String,
    pub encoder: EncoderConfig,
    pub lab: LabNorm,
    pub steps: usize,
    pub seed: u64,
}

pub fn save_checkpoint(path: impl AsRef<Path>, encoder: &Encoder, manifest: &CheckpointManifest) -> Result<()> {
    if &manifest.encoder != encoder.config() {
        return Err(Error::invalid("manifest encoder config does not match the encoder"));
    }
    let json = serde_json::to_string(manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut entries = vec![ArchiveEntry::text(MANIFEST_ENTRY, &json)];
    entries.extend(encoder.archive_entries());
    archive::write_archive(path, &entries)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Encoder, CheckpointManifest)> {
    let entries = archive::read_archive(path)?;
    let manifest: CheckpointManifest = serde_json::from_str(archive::find(&entries, MANIFEST_ENTRY)?.as_text()?)
        .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    let encoder = Encoder::from_archive(manifest.encoder.clone(), &entries)?;
    Ok((encoder, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_preserves_outputs() {
        let cfg = EncoderConfig { init_seed: 5, ..EncoderConfig::default() };
        let enc = Encoder::new(cfg.clone()).unwrap();
        let manifest = CheckpointManifest {
            stage: "spatial".into(),
            encoder: cfg,
            lab: LabNorm::default(),
            steps: 3,
            seed: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.tarc");
        save_checkpoint(&path, &enc, &manifest).unwrap();
        let (back, m) = load_checkpoint(&path).unwrap();
        assert_eq!(m, manifest);
        let x = Tensor::from_fn(&[32, 32, 3], |i| ((i % 13) as f64 - 6.0) / 13.0).unwrap();
        let a = enc.encode_pyramid(&x).unwrap();
        let b = back.encode_pyramid(&x).unwrap();
        for (p, q) in a.levels.iter().zip(&b.levels) {
            assert_eq!(p.data(), q.data());
        }
    }

    #[test]
    fn missing_manifest_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bare.tarc");
        archive::write_archive(&path, &[]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
