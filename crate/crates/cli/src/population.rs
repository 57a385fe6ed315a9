//! Population directories: `subject_<i>/{seg,img}.vol` plus `truth.json`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use probatlas::phantom::PhantomConfig;
use probatlas::volio::{read_volume, IntensityVolume, LabelVolume};
use serde::{Deserialize, Serialize};

use crate::manifest::Recorder;

pub const TRUTH: &str = "truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub index: usize,
    pub split: String,
    /// Planted phenotype per region; entry `k-1` is region `k`.
    pub phenotypes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub config: PhantomConfig,
    pub stratified: bool,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub subjects: Vec<SubjectTruth>,
}

pub fn subject_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("subject_{i}"))
}

pub fn load_truth(root: &Path) -> Result<Option<Truth>> {
    let path = root.join(TRUTH);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let truth = serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some(truth))
}

/// Subject indices found as `subject_<i>` directories, ascending.
fn listed_subjects(root: &Path) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).with_context(|| format!("listing {}", root.display()))? {
        let name = entry?.file_name();
        if let Some(i) = name
            .to_str()
            .and_then(|n| n.strip_prefix("subject_"))
            .and_then(|n| n.parse().ok())
        {
            ids.push(i);
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Training subjects: the split in `truth.json`, or every subject directory.
pub fn training_indices(root: &Path) -> Result<Vec<usize>> {
    let ids = match load_truth(root)? {
        Some(t) => t.train,
        None => listed_subjects(root)?,
    };
    if ids.is_empty() {
        bail!("no training subjects under {}", root.display());
    }
    Ok(ids)
}

pub fn test_indices(root: &Path) -> Result<Vec<usize>> {
    let truth = load_truth(root)?.ok_or_else(|| anyhow!("{} has no {TRUTH}", root.display()))?;
    Ok(truth.test)
}

fn read_recorded(path: &Path, rec: &mut Recorder) -> Result<probatlas::volio::Volume> {
    rec.input_file(path)?;
    read_volume(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_seg(path: &Path, rec: &mut Recorder) -> Result<LabelVolume> {
    read_recorded(path, rec)?
        .into_label()
        .with_context(|| format!("{} is not a label volume", path.display()))
}

pub fn read_img(path: &Path, rec: &mut Recorder) -> Result<IntensityVolume> {
    read_recorded(path, rec)?
        .into_intensity()
        .with_context(|| format!("{} is not an intensity volume", path.display()))
}

/// Segmentations and images of the given subjects.
pub fn read_subjects(
    root: &Path,
    ids: &[usize],
    rec: &mut Recorder,
) -> Result<(Vec<LabelVolume>, Vec<IntensityVolume>)> {
    let mut segs = Vec::with_capacity(ids.len());
    let mut imgs = Vec::with_capacity(ids.len());
    for &i in ids {
        let dir = subject_dir(root, i);
        segs.push(read_seg(&dir.join("seg.vol"), rec)?);
        imgs.push(read_img(&dir.join("img.vol"), rec)?);
    }
    Ok((segs, imgs))
}
