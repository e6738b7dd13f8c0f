//! Turning manifest records into model-ready frames.

use serde::{Deserialize, Serialize};

use crate::frames::{
    artifact_mask_from_color, extract_region_mask, inpaint_artifacts, percentile_rescale, read_mask_pbm, read_raster,
    resize_bilinear, resize_nearest, synth_frame, to_grayscale, Frame, FrameError, PreprocessNote, RegionMask,
    SynthConfig,
};
use crate::par::map_indexed;
use crate::sampling::{DatasetManifest, FrameRecord, FrameSource};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{record}: {source}")]
    Frame {
        record: String,
        #[source]
        source: FrameError,
    },
    #[error("{record}: region mask is empty after resizing")]
    EmptyRegion { record: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Square side every frame is resized to.
    pub input_size: usize,
    /// Max-minus-min channel spread above which an RGB pixel counts as an overlay artifact.
    pub chroma_threshold: f64,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            chroma_threshold: 0.15,
            synth: SynthConfig {
                height: 224,
                width: 224,
                ..SynthConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedFrame {
    pub frame: Frame,
    pub region: RegionMask,
    pub label: Option<usize>,
    pub notes: Vec<PreprocessNote>,
}

/// Loads and preprocesses one record.
///
/// Synthetic records are rendered directly at the input size with their
/// ground-truth region. Raster records go through artifact inpainting,
/// grayscale conversion, region extraction (or the cached mask), percentile
/// rescaling and resizing.
pub fn prepare_record(
    record: &FrameRecord,
    manifest: &DatasetManifest,
    cfg: &DataConfig,
) -> Result<PreparedFrame, DataError> {
    let name = record.source.to_string();
    let wrap = |source: FrameError| DataError::Frame {
        record: name.clone(),
        source,
    };
    let size = cfg.input_size;
    match &record.source {
        FrameSource::Synthetic { seed, class } => {
            let synth = SynthConfig {
                height: size,
                width: size,
                ..cfg.synth.clone()
            };
            let s = synth_frame(*class, *seed, &synth).map_err(wrap)?;
            Ok(PreparedFrame {
                frame: s.frame,
                region: s.region,
                label: record.label.or(Some(s.label)),
                notes: Vec::new(),
            })
        }
        FrameSource::Path(path) => {
            let raster = read_raster(&manifest.resolve(path)).map_err(wrap)?;
            let mut notes = Vec::new();
            let frame = if raster.channels == 3 {
                let artifacts = artifact_mask_from_color(&raster, cfg.chroma_threshold);
                let gray = to_grayscale(&raster).map_err(wrap)?;
                let (f, note) = inpaint_artifacts(&gray, &artifacts).map_err(wrap)?;
                notes.extend(note);
                f
            } else {
                raster.into_frame().map_err(wrap)?
            };
            let region = match &record.mask {
                Some(m) => {
                    let mask = read_mask_pbm(&manifest.resolve(m)).map_err(wrap)?;
                    if !mask.matches(&frame) {
                        return Err(wrap(FrameError::Dimensions("cached mask vs frame".into())));
                    }
                    mask
                }
                None => extract_region_mask(&frame).map_err(wrap)?,
            };
            let (frame, note) = percentile_rescale(&frame, &region).map_err(wrap)?;
            notes.extend(note);
            let frame = resize_bilinear(&frame, size, size);
            let region = resize_nearest(&region, size, size);
            if region.is_empty() {
                return Err(DataError::EmptyRegion { record: name });
            }
            Ok(PreparedFrame {
                frame,
                region,
                label: record.label,
                notes,
            })
        }
    }
}

/// Prepares every record of `manifest` in manifest order.
pub fn prepare_manifest(
    manifest: &DatasetManifest,
    cfg: &DataConfig,
    workers: usize,
) -> Result<Vec<PreparedFrame>, DataError> {
    let records: Vec<&FrameRecord> = manifest.records().collect();
    map_indexed(records.len(), workers, |i| prepare_record(records[i], manifest, cfg))
        .into_iter()
        .collect()
}

/// A manifest of `count` synthetic records with balanced labels, all in one dataset.
pub fn synthetic_manifest(dataset_id: &str, count: usize, classes: usize, seed: u64, threshold: usize) -> DatasetManifest {
    let records = (0..count)
        .map(|i| FrameRecord {
            dataset_id: dataset_id.to_string(),
            source: FrameSource::Synthetic {
                seed: crate::rng::derive_seed(seed, &[i as u64]),
                class: i % classes,
            },
            label: Some(i % classes),
            mask: None,
        })
        .collect();
    DatasetManifest::from_records(records, threshold, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::{write_frame_png, write_mask_pbm};

    fn desk() -> DataConfig {
        DataConfig {
            input_size: 32,
            ..DataConfig::default()
        }
    }

    #[test]
    fn synthetic_records_render_at_input_size() {
        let m = synthetic_manifest("synth", 6, 3, 1, 100);
        let frames = prepare_manifest(&m, &desk(), 2).unwrap();
        assert_eq!(frames.len(), 6);
        for (i, f) in frames.iter().enumerate() {
            assert_eq!((f.frame.height(), f.frame.width()), (32, 32));
            assert_eq!(f.label, Some(i % 3));
            assert!(!f.region.is_empty());
        }
        assert_eq!(frames, prepare_manifest(&m, &desk(), 1).unwrap());
    }

    #[test]
    fn raster_records_are_preprocessed() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_frame(0, 4, &SynthConfig::default()).unwrap();
        write_frame_png(&s.frame, &dir.path().join("a.png")).unwrap();
        write_mask_pbm(&s.region, &dir.path().join("a.pbm")).unwrap();
        let mut records = Vec::new();
        for mask in [None, Some("a.pbm".into())] {
            records.push(FrameRecord {
                dataset_id: "disk".into(),
                source: FrameSource::Path("a.png".into()),
                label: Some(1),
                mask,
            });
        }
        let mut m = DatasetManifest::from_records(records, 10, 0);
        m.base_dir = dir.path().to_path_buf();
        let frames = prepare_manifest(&m, &desk(), 1).unwrap();
        for f in &frames {
            assert_eq!(f.frame.height(), 32);
            assert_eq!(f.label, Some(1));
            // rescaling stretches the region to the full range
            let max = f.frame.pixels().iter().cloned().fold(0.0, f64::max);
            assert!(max > 0.99);
        }
        let missing = FrameRecord {
            dataset_id: "disk".into(),
            source: FrameSource::Path("nope.png".into()),
            label: None,
            mask: None,
        };
        assert!(prepare_record(&missing, &m, &desk()).is_err());
    }
}
