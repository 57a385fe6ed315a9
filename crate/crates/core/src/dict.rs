//! Per-region atlas dictionary.
//!
//! For every region and every shape cluster the dictionary stores the
//! cluster-averaged label probability map (the lookup target) and the
//! cluster-averaged intensity template restricted to the region's candidate
//! mask (the lookup key). A tissue mask gates normalisation when the
//! dictionary is applied.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::apclust::ClusteringResult;
use crate::error::{Error, Result};
use crate::volio::{mask_apply, read_volume, Grid, IntensityVolume, LabelVolume, ProbMap, Volume};

/// Mean-over-clusters threshold for a region's candidate mask (strict `>`).
pub const REGION_MASK_THRESHOLD: f64 = 0.01;
/// Non-background frequency threshold for the tissue mask (strict `>`).
pub const TISSUE_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionalEntry {
    pub cluster: usize,
    /// Training subject indices belonging to this cluster.
    pub members: Vec<usize>,
    pub prob_atlas: ProbMap,
    pub anat_atlas: IntensityVolume,
}

impl RegionalEntry {
    pub fn member_count(&self) -> usize {
        self.members.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionDictionary {
    pub region: u16,
    pub mask: ProbMap,
    pub entries: Vec<RegionalEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub training_set: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasDictionary {
    pub grid: Grid,
    /// Regions `1..=K`, in order.
    pub regions: Vec<RegionDictionary>,
    pub tissue_mask: ProbMap,
    pub provenance: Provenance,
}

impl AtlasDictionary {
    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn region(&self, k: u16) -> Option<&RegionDictionary> {
        self.regions.get((k as usize).checked_sub(1)?)
    }
}

fn indicator_mean(segmentations: &[LabelVolume], k: u16, members: &[usize]) -> Result<Vec<f64>> {
    let first = segmentations
        .get(*members.first().ok_or(Error::EmptyCluster)?)
        .ok_or_else(|| Error::InvalidConfig("member index out of range".into()))?;
    let grid = first.grid();
    let mut acc = vec![0f64; grid.len()];
    for &i in members {
        let seg = segmentations
            .get(i)
            .ok_or_else(|| Error::InvalidConfig(format!("member index {i} out of range")))?;
        grid.ensure_same(seg.grid())?;
        for (a, &l) in acc.iter_mut().zip(seg.voxels()) {
            if l == k {
                *a += 1.0;
            }
        }
    }
    let l = members.len() as f64;
    acc.iter_mut().for_each(|a| *a /= l);
    Ok(acc)
}

/// Fraction of `members` labelling each voxel as region `k`.
pub fn cluster_prob_atlas(segmentations: &[LabelVolume], k: u16, members: &[usize]) -> Result<ProbMap> {
    let mean = indicator_mean(segmentations, k, members)?;
    if mean.iter().all(|&v| v == 0.0) {
        warn!("region {k} is absent from all {} cluster members", members.len());
    }
    let grid = segmentations[members[0]].grid().clone();
    ProbMap::new(grid, mean.into_iter().map(|v| v as f32).collect())
}

/// Voxelwise mean intensity over `members`.
pub fn cluster_anat_template(images: &[IntensityVolume], members: &[usize]) -> Result<IntensityVolume> {
    let first = images
        .get(*members.first().ok_or(Error::EmptyCluster)?)
        .ok_or_else(|| Error::InvalidConfig("member index out of range".into()))?;
    let grid = first.grid().clone();
    let mut acc = vec![0f64; grid.len()];
    for &i in members {
        let img = images
            .get(i)
            .ok_or_else(|| Error::InvalidConfig(format!("member index {i} out of range")))?;
        grid.ensure_same(img.grid())?;
        for (a, &v) in acc.iter_mut().zip(img.voxels()) {
            *a += v as f64;
        }
    }
    let l = members.len() as f64;
    IntensityVolume::new(grid, acc.into_iter().map(|v| (v / l) as f32).collect())
}

/// Binary mask where the unweighted mean of the cluster atlases exceeds 0.01.
pub fn region_mask(cluster_prob_atlases: &[ProbMap]) -> Result<ProbMap> {
    let first = cluster_prob_atlases.first().ok_or(Error::EmptyCluster)?;
    let grid = first.grid().clone();
    for p in &cluster_prob_atlases[1..] {
        grid.ensure_same(p.grid())?;
    }
    let c = cluster_prob_atlases.len() as f64;
    let mask = ProbMap::mask_from_fn(grid, |i| {
        let mean = cluster_prob_atlases.iter().map(|p| p.voxels()[i] as f64).sum::<f64>() / c;
        mean > REGION_MASK_THRESHOLD
    });
    if mask.count_nonzero() == 0 {
        warn!("degenerate region mask: no voxel exceeds {REGION_MASK_THRESHOLD}");
    }
    Ok(mask)
}

/// Voxels labelled non-background in more than 95% of `segmentations`.
pub fn tissue_mask(segmentations: &[LabelVolume]) -> Result<ProbMap> {
    let first = segmentations
        .first()
        .ok_or_else(|| Error::EmptyPopulation("tissue mask needs segmentations".into()))?;
    let grid = first.grid().clone();
    let mut counts = vec![0u32; grid.len()];
    for seg in segmentations {
        grid.ensure_same(seg.grid())?;
        for (c, &l) in counts.iter_mut().zip(seg.voxels()) {
            *c += u32::from(l != 0);
        }
    }
    let n = segmentations.len() as f64;
    Ok(ProbMap::mask_from_fn(grid, |i| counts[i] as f64 / n > TISSUE_THRESHOLD))
}

fn build_region(
    segmentations: &[LabelVolume],
    images: &[IntensityVolume],
    k: u16,
    clustering: &ClusteringResult,
) -> Result<RegionDictionary> {
    if clustering.num_clusters() == 0 {
        return Err(Error::ClusteringFailed {
            region: Some(k),
            reason: "no clusters".into(),
        });
    }
    if clustering.num_subjects() != segmentations.len() {
        return Err(Error::InvalidConfig(format!(
            "clustering of region {k} covers {} subjects, population has {}",
            clustering.num_subjects(),
            segmentations.len()
        )));
    }
    let mut probs = Vec::with_capacity(clustering.num_clusters());
    let mut templates = Vec::with_capacity(clustering.num_clusters());
    let mut member_lists = Vec::with_capacity(clustering.num_clusters());
    for c in 0..clustering.num_clusters() {
        let members = clustering.members(c);
        probs.push(cluster_prob_atlas(segmentations, k, &members)?);
        templates.push(cluster_anat_template(images, &members)?);
        member_lists.push(members);
    }
    let mask = region_mask(&probs)?;
    let entries = probs
        .into_iter()
        .zip(templates)
        .zip(member_lists)
        .enumerate()
        .map(|(c, ((prob_atlas, template), members))| {
            Ok(RegionalEntry {
                cluster: c,
                members,
                prob_atlas,
                anat_atlas: mask_apply(&template, &mask)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RegionDictionary {
        region: k,
        mask,
        entries,
    })
}

/// Build the dictionary for regions `1..=K` where `clusterings[k-1]`
/// partitions the training subjects for region `k`.
pub fn build_dictionary(
    segmentations: &[LabelVolume],
    images: &[IntensityVolume],
    clusterings: &[ClusteringResult],
    provenance: Provenance,
) -> Result<AtlasDictionary> {
    if segmentations.is_empty() {
        return Err(Error::EmptyPopulation("no training subjects".into()));
    }
    if segmentations.len() != images.len() {
        return Err(Error::InvalidConfig(format!(
            "{} segmentations but {} images",
            segmentations.len(),
            images.len()
        )));
    }
    let grid = segmentations[0].grid().clone();
    let num_labels = segmentations[0].num_labels();
    for (s, i) in segmentations.iter().zip(images) {
        grid.ensure_same(s.grid())?;
        grid.ensure_same(i.grid())?;
        if s.num_labels() != num_labels {
            return Err(Error::LabelCountMismatch {
                expected: num_labels,
                found: s.num_labels(),
            });
        }
    }
    let k_regions = num_labels as usize - 1;
    if clusterings.len() != k_regions {
        return Err(Error::InvalidConfig(format!(
            "{} clusterings supplied for {k_regions} regions",
            clusterings.len()
        )));
    }
    let regions = clusterings
        .par_iter()
        .enumerate()
        .map(|(idx, cl)| build_region(segmentations, images, idx as u16 + 1, cl))
        .collect::<Result<Vec<_>>>()?;
    Ok(AtlasDictionary {
        grid,
        regions,
        tissue_mask: tissue_mask(segmentations)?,
        provenance,
    })
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRegion {
    region: u16,
    clusters: usize,
    members: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    num_regions: usize,
    grid: Grid,
    regions: Vec<ManifestRegion>,
    provenance: Provenance,
    files: BTreeMap<String, String>,
    content_hash: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn combined_hash(files: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (path, digest) in files {
        h.update(path.as_bytes());
        h.update(b":");
        h.update(digest.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn region_dir(k: u16) -> String {
    format!("region_{k}")
}

fn cluster_file(k: u16, c: usize, name: &str) -> String {
    format!("{}/cluster_{c}/{name}", region_dir(k))
}

fn put(dir: &Path, rel: &str, vol: Volume, files: &mut BTreeMap<String, String>) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = crate::volio::encode_native(&vol);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    files.insert(rel.to_string(), sha256_hex(&bytes));
    Ok(())
}

pub fn save_dictionary(dict: &AtlasDictionary, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    put(dir, "tissue_mask.vol", dict.tissue_mask.clone().into(), &mut files)?;
    let mut regions = Vec::new();
    for rd in &dict.regions {
        put(
            dir,
            &format!("{}/mask.vol", region_dir(rd.region)),
            rd.mask.clone().into(),
            &mut files,
        )?;
        for e in &rd.entries {
            put(
                dir,
                &cluster_file(rd.region, e.cluster, "prob.vol"),
                e.prob_atlas.clone().into(),
                &mut files,
            )?;
            put(
                dir,
                &cluster_file(rd.region, e.cluster, "anat.vol"),
                e.anat_atlas.clone().into(),
                &mut files,
            )?;
        }
        regions.push(ManifestRegion {
            region: rd.region,
            clusters: rd.entries.len(),
            members: rd.entries.iter().map(|e| e.members.clone()).collect(),
        });
    }
    let content_hash = combined_hash(&files);
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        num_regions: dict.regions.len(),
        grid: dict.grid.clone(),
        regions,
        provenance: dict.provenance.clone(),
        files,
        content_hash,
    };
    let path = dir.join(MANIFEST);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

struct Loader<'a> {
    dir: &'a Path,
    files: &'a BTreeMap<String, String>,
    grid: &'a Grid,
}

impl Loader<'_> {
    fn get(&self, rel: &str) -> Result<Volume> {
        let expected = self
            .files
            .get(rel)
            .ok_or_else(|| Error::Format(format!("manifest does not list {rel}")))?;
        let path: PathBuf = self.dir.join(rel);
        if !path.exists() {
            return Err(Error::Format(format!(
                "manifest references missing file {}",
                path.display()
            )));
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if &actual != expected {
            return Err(Error::Integrity(format!(
                "content hash of {rel} does not match manifest"
            )));
        }
        let vol = read_volume(&path)?;
        self.grid.ensure_same(vol.grid())?;
        Ok(vol)
    }
}

pub fn load_dictionary(dir: impl AsRef<Path>) -> Result<AtlasDictionary> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Err(Error::Format(format!("no {MANIFEST} in {}", dir.display())));
    }
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{MANIFEST}: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    if combined_hash(&manifest.files) != manifest.content_hash {
        return Err(Error::Integrity(
            "manifest content hash does not match its file list".into(),
        ));
    }
    if manifest.regions.len() != manifest.num_regions {
        return Err(Error::Format("region count mismatch in manifest".into()));
    }
    let loader = Loader {
        dir,
        files: &manifest.files,
        grid: &manifest.grid,
    };
    let tissue_mask = loader.get("tissue_mask.vol")?.into_prob()?;
    let mut regions = Vec::new();
    for (idx, mr) in manifest.regions.iter().enumerate() {
        if mr.region as usize != idx + 1 {
            return Err(Error::Format(format!("regions out of order at {}", mr.region)));
        }
        if mr.members.len() != mr.clusters {
            return Err(Error::Format(format!(
                "member lists of region {} incomplete",
                mr.region
            )));
        }
        let mask = loader
            .get(&format!("{}/mask.vol", region_dir(mr.region)))?
            .into_prob()?;
        let entries = (0..mr.clusters)
            .map(|c| {
                Ok(RegionalEntry {
                    cluster: c,
                    members: mr.members[c].clone(),
                    prob_atlas: loader.get(&cluster_file(mr.region, c, "prob.vol"))?.into_prob()?,
                    anat_atlas: loader.get(&cluster_file(mr.region, c, "anat.vol"))?.into_intensity()?,
                })
            })
            .collect::<Result<_>>()?;
        regions.push(RegionDictionary {
            region: mr.region,
            mask,
            entries,
        });
    }
    Ok(AtlasDictionary {
        grid: manifest.grid,
        regions,
        tissue_mask,
        provenance: manifest.provenance,
    })
}
