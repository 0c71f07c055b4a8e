//! Clip directories: `manifest.json`, `frame_NNNN.tarc` (RGB, f64),
//! `mask_NNNN.tarc` (i32 labels) and `flow_NNNN.tarc` (dx, dy).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{ClipConfig, FlowField, LabelMap, SynthClip};
use crate::archive::{self, ArchiveData, ArchiveEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub config: ClipConfig,
}

pub fn label_entry(name: &str, map: &LabelMap) -> ArchiveEntry {
    ArchiveEntry {
        name: name.into(),
        shape: vec![map.height, map.width],
        data: ArchiveData::I32(map.labels.iter().map(|&l| l as i32).collect()),
    }
}

pub fn label_from_entry(e: &ArchiveEntry) -> Result<LabelMap> {
    let (&[h, w], ArchiveData::I32(v)) = (e.shape.as_slice(), &e.data) else {
        return Err(Error::Format(format!("entry {} is not a 2-D i32 label map", e.name)));
    };
    let labels = v
        .iter()
        .map(|&l| u32::try_from(l).map_err(|_| Error::Format(format!("negative label {l}"))))
        .collect::<Result<_>>()?;
    LabelMap::new(h, w, labels)
}

pub fn write_clip_dir(clip: &SynthClip, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (h, w) = (clip.config.height, clip.config.width);
    let manifest = ClipManifest {
        frame_count: clip.frames.len(),
        height: h,
        width: w,
        seed: clip.seed,
        config: clip.config.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    for (t, (frame, mask)) in clip.frames.iter().zip(&clip.masks).enumerate() {
        archive::write_archive(
            dir.join(format!("frame_{t:04}.tarc")),
            &[ArchiveEntry::from_tensor("rgb", frame)],
        )?;
        archive::write_archive(dir.join(format!("mask_{t:04}.tarc")), &[label_entry("labels", mask)])?;
    }
    for (t, flow) in clip.flows.iter().enumerate() {
        let entry = |name: &str, v: &[f64]| ArchiveEntry {
            name: name.into(),
            shape: vec![h, w],
            data: ArchiveData::F64(v.to_vec()),
        };
        archive::write_archive(
            dir.join(format!("flow_{t:04}.tarc")),
            &[entry("dx", &flow.dx), entry("dy", &flow.dy)],
        )?;
    }
    Ok(())
}

pub fn read_clip_dir(dir: impl AsRef<Path>) -> Result<SynthClip> {
    let dir = dir.as_ref();
    let manifest: ClipManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
        .map_err(|e| Error::Format(format!("manifest.json: {e}")))?;
    let mut frames = Vec::with_capacity(manifest.frame_count);
    let mut masks = Vec::with_capacity(manifest.frame_count);
    let mut flows = Vec::new();
    for t in 0..manifest.frame_count {
        let fa = archive::read_archive(dir.join(format!("frame_{t:04}.tarc")))?;
        frames.push(archive::find(&fa, "rgb")?.to_tensor()?);
        let ma = archive::read_archive(dir.join(format!("mask_{t:04}.tarc")))?;
        masks.push(label_from_entry(archive::find(&ma, "labels")?)?);
        let flow_path = dir.join(format!("flow_{t:04}.tarc"));
        if flow_path.exists() {
            let fl = archive::read_archive(flow_path)?;
            let get = |name| -> Result<Vec<f64>> {
                match &archive::find(&fl, name)?.data {
                    ArchiveData::F64(v) => Ok(v.clone()),
                    _ => Err(Error::Format(format!("flow {name} is not f64"))),
                }
            };
            flows.push(FlowField {
                height: manifest.height,
                width: manifest.width,
                dx: get("dx")?,
                dy: get("dy")?,
            });
        }
    }
    Ok(SynthClip {
        frames,
        masks,
        flows,
        seed: manifest.seed,
        config: manifest.config,
    })
}
