//! On-disk split store: `manifest.json` plus two raw blobs per split.
//!
//! * `<role>.images.f32`: `count * H * W * C` little-endian `f32`.
//! * `<role>.meta.bin`: per example `label: u8, spurious: u8, source: 2 x u32 LE`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CollageExample, DataError, DatasetSplit, SplitRole};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "diverse-vit-splits";
const VERSION: u32 = 1;
const META_RECORD: usize = 10;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    splits: Vec<SplitEntry>,
}

#[derive(Serialize, Deserialize)]
struct SplitEntry {
    role: SplitRole,
    correlation: f64,
    seed: u64,
    image_shape: [usize; 3],
    count: usize,
    group_counts: [usize; 4],
    images: String,
    meta: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_splits(dir: &Path, splits: &BTreeMap<SplitRole, DatasetSplit>) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::new();
    for (role, split) in splits {
        let images = format!("{role}.images.f32");
        let meta = format!("{role}.meta.bin");
        let pixels: usize = split.image_shape.iter().product();
        let mut image_bytes = Vec::with_capacity(split.len() * pixels * 4);
        let mut meta_bytes = Vec::with_capacity(split.len() * META_RECORD);
        for e in &split.examples {
            if e.image.len() != pixels {
                return Err(DataError::Invalid {
                    field: "image",
                    reason: format!("{} pixels, expected {pixels}", e.image.len()),
                });
            }
            for v in &e.image {
                image_bytes.extend_from_slice(&v.to_le_bytes());
            }
            meta_bytes.push(e.label);
            meta_bytes.push(e.spurious);
            meta_bytes.extend_from_slice(&e.source[0].to_le_bytes());
            meta_bytes.extend_from_slice(&e.source[1].to_le_bytes());
        }
        let path = dir.join(&images);
        std::fs::write(&path, image_bytes).map_err(io_err(&path))?;
        let path = dir.join(&meta);
        std::fs::write(&path, meta_bytes).map_err(io_err(&path))?;
        entries.push(SplitEntry {
            role: *role,
            correlation: split.correlation,
            seed: split.seed,
            image_shape: split.image_shape,
            count: split.len(),
            group_counts: split.group_counts(),
            images,
            meta,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        splits: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(io_err(&path))
}

pub fn load_splits(dir: &Path) -> Result<BTreeMap<SplitRole, DatasetSplit>, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(DataError::Manifest(format!(
            "unsupported format {:?} version {}",
            manifest.format, manifest.version
        )));
    }
    let mut out = BTreeMap::new();
    for entry in manifest.splits {
        let pixels: usize = entry.image_shape.iter().product();
        let path = dir.join(&entry.images);
        let image_bytes = std::fs::read(&path).map_err(io_err(&path))?;
        if image_bytes.len() != entry.count * pixels * 4 {
            return Err(DataError::Parse {
                format: "split images",
                offset: image_bytes.len(),
                reason: format!("expected {} bytes, got {}", entry.count * pixels * 4, image_bytes.len()),
            });
        }
        let path = dir.join(&entry.meta);
        let meta_bytes = std::fs::read(&path).map_err(io_err(&path))?;
        if meta_bytes.len() != entry.count * META_RECORD {
            return Err(DataError::Parse {
                format: "split meta",
                offset: meta_bytes.len(),
                reason: format!("expected {} bytes, got {}", entry.count * META_RECORD, meta_bytes.len()),
            });
        }
        let examples = image_bytes
            .chunks_exact(pixels * 4)
            .zip(meta_bytes.chunks_exact(META_RECORD))
            .map(|(img, meta)| CollageExample {
                image: img
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
                label: meta[0],
                spurious: meta[1],
                source: [
                    u32::from_le_bytes(meta[2..6].try_into().unwrap()),
                    u32::from_le_bytes(meta[6..10].try_into().unwrap()),
                ],
            })
            .collect();
        let split = DatasetSplit {
            role: entry.role,
            correlation: entry.correlation,
            seed: entry.seed,
            image_shape: entry.image_shape,
            examples,
        };
        if split.group_counts() != entry.group_counts {
            return Err(DataError::Manifest(format!(
                "{}: group counts {:?} disagree with manifest {:?}",
                entry.role,
                split.group_counts(),
                entry.group_counts
            )));
        }
        out.insert(entry.role, split);
    }
    Ok(out)
}
