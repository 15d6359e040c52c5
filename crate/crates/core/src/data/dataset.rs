use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mask::LabelMap;
use super::png_io;
use super::record::FaceRecord;
use super::toyface::{generate_dataset, DataConfig};
use crate::error::{Error, Result};
use crate::nn::{mix, splitmix};

/// Train:test ratio is 14:1.
pub const SPLIT_DENOMINATOR: usize = 15;

/// Class count assumed for external datasets without a `meta.json`
/// (the CelebAMask-HQ label set).
pub const EXTERNAL_DEFAULT_CLASSES: usize = 19;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Toy,
    ExternalMaskDir,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub name: String,
    pub identity_id: u32,
    #[serde(default)]
    pub variation_seed: u64,
}

/// Contents of `meta.json` at the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub identity_count: usize,
    #[serde(default)]
    pub variations: usize,
    pub resolution: usize,
    pub class_names: Vec<String>,
    #[serde(default = "default_true")]
    pub disjoint_identities: bool,
    #[serde(default)]
    pub records: Vec<RecordMeta>,
}

fn default_true() -> bool {
    true
}

/// Deterministic 14:1 split. Units (identities when `disjoint`, otherwise
/// record indices) are ranked by a seeded hash; the first
/// `ceil(units / 15)` ranks form the test split.
pub fn split_indices(identity_ids: &[u32], seed: u64, disjoint: bool) -> (Vec<usize>, Vec<usize>) {
    let units: Vec<u64> = if disjoint {
        let set: BTreeSet<u32> = identity_ids.iter().copied().collect();
        set.into_iter().map(u64::from).collect()
    } else {
        (0..identity_ids.len() as u64).collect()
    };
    let mut ranked: Vec<(u64, u64)> = units.iter().map(|&u| (mix(seed ^ splitmix(u), "split"), u)).collect();
    ranked.sort();
    let n_test = units.len().div_ceil(SPLIT_DENOMINATOR).min(units.len().saturating_sub(1));
    let test_units: BTreeSet<u64> = ranked[..n_test].iter().map(|&(_, u)| u).collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, &id) in identity_ids.iter().enumerate() {
        let unit = if disjoint { id as u64 } else { i as u64 };
        if test_units.contains(&unit) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}

pub fn select_split(records: Vec<FaceRecord>, seed: u64, disjoint: bool, split: Split) -> Vec<FaceRecord> {
    let ids: Vec<u32> = records.iter().map(|r| r.identity_id).collect();
    let (train, test) = split_indices(&ids, seed, disjoint);
    let keep: BTreeSet<usize> = match split {
        Split::Train => train.into_iter().collect(),
        Split::Test => test.into_iter().collect(),
    };
    records.into_iter().enumerate().filter(|(i, _)| keep.contains(i)).map(|(_, r)| r).collect()
}

/// In-memory toy dataset, one split.
pub fn toy_split(cfg: &DataConfig, split: Split) -> Result<Vec<FaceRecord>> {
    Ok(select_split(generate_dataset(cfg)?, cfg.seed, cfg.disjoint_identities, split))
}

fn record_name(i: usize) -> String {
    format!("{i:05}")
}

/// Render the toy dataset into `root/{images,masks}/NNNNN.png` plus `meta.json`.
pub fn write_toy_dataset(root: &Path, cfg: &DataConfig) -> Result<DatasetMeta> {
    let records = generate_dataset(cfg)?;
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    fs::create_dir_all(&img_dir).map_err(Error::io(&img_dir))?;
    fs::create_dir_all(&mask_dir).map_err(Error::io(&mask_dir))?;
    let mut metas = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let name = record_name(i);
        png_io::write_rgb(&img_dir.join(format!("{name}.png")), &r.image)?;
        png_io::write_gray(&mask_dir.join(format!("{name}.png")), r.mask.width, r.mask.height, &r.mask.labels)?;
        metas.push(RecordMeta { name, identity_id: r.identity_id, variation_seed: r.variation_seed });
    }
    let meta = DatasetMeta {
        seed: cfg.seed,
        identity_count: cfg.identity_count,
        variations: cfg.variations,
        resolution: cfg.resolution,
        class_names: cfg.class_names.clone(),
        disjoint_identities: cfg.disjoint_identities,
        records: metas,
    };
    let path = root.join("meta.json");
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(Error::io(&path))?;
    Ok(meta)
}

pub fn read_meta(root: &Path) -> Result<Option<DatasetMeta>> {
    let path = root.join("meta.json");
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path).map_err(Error::io(&path))?;
    Ok(Some(serde_json::from_slice(&bytes)?))
}

fn png_basenames(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(Error::io(dir))?;
    let mut out = BTreeMap::new();
    for e in entries {
        let p = e.map_err(Error::io(dir))?.path();
        if p.extension().and_then(|s| s.to_str()).map(|s| s.eq_ignore_ascii_case("png")) == Some(true) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), p.clone());
            }
        }
    }
    Ok(out)
}

/// Load one split of a dataset directory, in basename order.
pub fn load_dataset(root: &Path, layout: Layout, split: Split) -> Result<Vec<FaceRecord>> {
    let meta = read_meta(root)?;
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    if !img_dir.is_dir() {
        return Err(Error::Ingestion(format!("{} is missing images/", root.display())));
    }
    if !mask_dir.is_dir() {
        return Err(Error::Ingestion(format!("{} is missing masks/", root.display())));
    }
    let meta = match (layout, meta) {
        (Layout::Toy, None) => {
            return Err(Error::Ingestion(format!("toy dataset {} has no meta.json", root.display())))
        }
        (_, m) => m,
    };
    let classes = meta.as_ref().map(|m| m.class_names.len()).unwrap_or(EXTERNAL_DEFAULT_CLASSES);
    let images = png_basenames(&img_dir)?;
    let masks = png_basenames(&mask_dir)?;
    let missing: Vec<&String> = images.keys().filter(|k| !masks.contains_key(*k)).collect();
    if !missing.is_empty() {
        let names: Vec<&str> = missing.iter().map(|s| s.as_str()).collect();
        return Err(Error::Ingestion(format!("no mask for image(s): {}", names.join(", "))));
    }
    let known: BTreeMap<&str, &RecordMeta> = meta
        .as_ref()
        .map(|m| m.records.iter().map(|r| (r.name.as_str(), r)).collect())
        .unwrap_or_default();

    let mut records = Vec::with_capacity(images.len());
    for (i, (name, img_path)) in images.iter().enumerate() {
        let image = png_io::read_rgb(img_path)?;
        let (w, h, labels) = png_io::read_gray(&masks[name])?;
        if (image.dim(1), image.dim(2)) != (h, w) {
            return Err(Error::Ingestion(format!(
                "{name}: image is {}x{} but mask is {h}x{w}",
                image.dim(1),
                image.dim(2)
            )));
        }
        let mask = LabelMap::new(h, w, labels)?;
        mask.check_classes(classes)
            .map_err(|e| Error::Validation(format!("{name}: {e}")))?;
        let (identity_id, variation_seed) = match known.get(name.as_str()) {
            Some(r) => (r.identity_id, r.variation_seed),
            None => (i as u32, 0),
        };
        records.push(FaceRecord { image, mask, identity_id, variation_seed });
    }
    let (seed, disjoint) = meta.as_ref().map(|m| (m.seed, m.disjoint_identities)).unwrap_or((0, false));
    Ok(select_split(records, seed, disjoint, split))
}
