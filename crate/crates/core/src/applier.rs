//! Personalised atlas instantiation.
//!
//! Each region independently picks the dictionary cluster whose masked
//! intensity template correlates best with the subject image; the chosen
//! regional probability maps are then stacked and normalised into a full
//! atlas with an explicit background channel.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dict::{AtlasDictionary, RegionDictionary};
use crate::error::{Error, Result};
use crate::volio::{mask_apply, IntensityVolume, ProbMap, ProbabilisticAtlas};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSelection {
    pub region: u16,
    pub chosen_cluster: usize,
    pub score: f64,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalAtlas {
    pub subject: String,
    pub atlas: ProbabilisticAtlas,
    pub selections: Vec<RegionSelection>,
}

/// Pearson correlation of `a` and `b` over voxels where `support` is 1.
pub fn pearson_corr(a: &IntensityVolume, b: &IntensityVolume, support: &ProbMap) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    a.grid().ensure_same(support.grid())?;
    support.ensure_binary()?;
    let idx: Vec<usize> = support
        .voxels()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == 1.0)
        .map(|(i, _)| i)
        .collect();
    if idx.len() < 2 {
        return Err(Error::DegenerateSupport(idx.len()));
    }
    let (av, bv) = (a.voxels(), b.voxels());
    let n = idx.len() as f64;
    let ma = idx.iter().map(|&i| av[i] as f64).sum::<f64>() / n;
    let mb = idx.iter().map(|&i| bv[i] as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let da = av[i] as f64 - ma;
        let db = bv[i] as f64 - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    // sqrt of the product keeps identical inputs at exactly 1
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pick the cluster whose template best correlates with the masked subject.
pub fn select_cluster(subject_img: &IntensityVolume, rd: &RegionDictionary) -> Result<RegionSelection> {
    if rd.entries.is_empty() {
        return Err(Error::ClusteringFailed {
            region: Some(rd.region),
            reason: "dictionary region has no entries".into(),
        });
    }
    let masked = mask_apply(subject_img, &rd.mask)?;
    let mut scores = Vec::with_capacity(rd.entries.len());
    for e in &rd.entries {
        let score = match pearson_corr(&e.anat_atlas, &masked, &rd.mask) {
            Ok(s) => s,
            Err(Error::ZeroVariance) => {
                warn!(
                    "region {} cluster {}: zero variance over the mask, scoring 0",
                    rd.region, e.cluster
                );
                0.0
            }
            Err(e) => return Err(e),
        };
        scores.push(score);
    }
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    Ok(RegionSelection {
        region: rd.region,
        chosen_cluster: best,
        score: scores[best],
        scores,
    })
}

/// Normalise one voxel's region probabilities in place and return the
/// background probability.
///
/// Labels are divided by their sum `Z` when the voxel is inside the tissue
/// mask or `Z > 1`; a zero sum inside the mask leaves every label at zero.
pub fn normalize_voxel(labels: &mut [f64], inside_tissue: bool) -> f64 {
    let z: f64 = labels.iter().sum();
    if (inside_tissue || z > 1.0) && z > 0.0 {
        labels.iter_mut().for_each(|p| *p /= z);
    }
    (1.0 - labels.iter().sum::<f64>()).clamp(0.0, 1.0)
}

/// Stack the selected regional maps and normalise into a K+1 label atlas.
pub fn assemble_atlas(selections: &[RegionSelection], dict: &AtlasDictionary) -> Result<ProbabilisticAtlas> {
    if selections.len() != dict.num_regions() {
        return Err(Error::InvalidConfig(format!(
            "{} selections for {} regions",
            selections.len(),
            dict.num_regions()
        )));
    }
    let grid = dict.grid.clone();
    grid.ensure_same(dict.tissue_mask.grid())?;
    let chosen: Vec<&ProbMap> = selections
        .iter()
        .zip(&dict.regions)
        .map(|(sel, rd)| {
            if sel.region != rd.region {
                return Err(Error::InvalidConfig(format!(
                    "selection for region {} given where region {} expected",
                    sel.region, rd.region
                )));
            }
            let entry = rd.entries.get(sel.chosen_cluster).ok_or_else(|| {
                Error::InvalidConfig(format!("region {} has no cluster {}", rd.region, sel.chosen_cluster))
            })?;
            grid.ensure_same(entry.prob_atlas.grid())?;
            Ok(&entry.prob_atlas)
        })
        .collect::<Result<_>>()?;

    let k = chosen.len();
    let n = grid.len();
    let mut out: Vec<Vec<f32>> = vec![vec![0.0; n]; k + 1];
    let tissue = dict.tissue_mask.voxels();
    let mut labels = vec![0f64; k];
    for v in 0..n {
        for (l, p) in labels.iter_mut().zip(&chosen) {
            *l = p.voxels()[v] as f64;
        }
        normalize_voxel(&mut labels, tissue[v] == 1.0);
        let mut stored = 0.0;
        for (j, &l) in labels.iter().enumerate() {
            let q = l.clamp(0.0, 1.0) as f32;
            out[j + 1][v] = q;
            stored += q as f64;
        }
        out[0][v] = (1.0 - stored).clamp(0.0, 1.0) as f32;
    }
    let maps = out
        .into_iter()
        .map(|v| ProbMap::new(grid.clone(), v))
        .collect::<Result<Vec<_>>>()?;
    ProbabilisticAtlas::new(maps, true)
}

/// Select a cluster for every region, then assemble the personal atlas.
pub fn personalize(
    subject_img: &IntensityVolume,
    dict: &AtlasDictionary,
    subject: impl Into<String>,
) -> Result<PersonalAtlas> {
    dict.grid.ensure_same(subject_img.grid())?;
    let selections = dict
        .regions
        .par_iter()
        .map(|rd| select_cluster(subject_img, rd))
        .collect::<Result<Vec<_>>>()?;
    let atlas = assemble_atlas(&selections, dict)?;
    Ok(PersonalAtlas {
        subject: subject.into(),
        atlas,
        selections,
    })
}
