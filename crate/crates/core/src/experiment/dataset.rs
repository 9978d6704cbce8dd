//! Loading images, annotations and (cached) proposals for a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::geometry::Annotation;
use crate::proposals::{selective_search, ProposalSet, SelectiveSearchParams};

#[derive(Clone, Debug)]
pub struct LoadedImage {
    pub id: String,
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
    pub proposals: ProposalSet,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Cache directory for one proposal parameter set.
pub fn proposal_cache_dir(root: &Path, params: &SelectiveSearchParams) -> PathBuf {
    let key = serde_json::to_string(params).expect("params serialise");
    root.join(format!("ss-{:016x}", fnv1a(key.as_bytes())))
}

/// File name of an image's proposal CSV inside a cache directory.
pub fn proposal_file_name(image_id: &str) -> String {
    let safe: String = image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.csv")
}

/// Proposals for one image: read from `cache` when present, otherwise
/// computed (and written to `cache` if given).
pub fn proposals_for(
    id: &str,
    image: &RgbImage,
    params: &SelectiveSearchParams,
    cache: Option<&Path>,
) -> Result<ProposalSet> {
    let file = cache.map(|dir| dir.join(proposal_file_name(id)));
    if let Some(f) = file.as_ref().filter(|f| f.is_file()) {
        return ProposalSet::load(id, f);
    }
    let set = selective_search(id, image, params);
    if let Some(f) = file {
        set.save(&f)?;
    }
    Ok(set)
}

/// Loads every image of a manifest with its proposals. `cache_root` holds
/// per-parameter-set subdirectories of proposal CSVs.
pub fn load_dataset(
    manifest: &DatasetManifest,
    params: &SelectiveSearchParams,
    cache_root: Option<&Path>,
) -> Result<Vec<LoadedImage>> {
    let cache = cache_root.map(|r| proposal_cache_dir(r, params));
    if let Some(dir) = &cache {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    manifest
        .entries
        .par_iter()
        .map(|entry| {
            let image = manifest.load_image(entry)?;
            let proposals = proposals_for(&entry.path, &image, params, cache.as_deref())?;
            Ok(LoadedImage {
                id: entry.path.clone(),
                image,
                annotations: entry.annotations(),
                proposals,
            })
        })
        .collect()
}
