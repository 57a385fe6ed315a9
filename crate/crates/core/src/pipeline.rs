//! Dictionary training: fuse, extract and propagate vertices, cluster every
//! region, then build the dictionary.

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::apclust::{affinity_propagation, build_similarity_matrix, ApConfig, ClusteringResult, Preference};
use crate::dict::{build_dictionary, AtlasDictionary, Provenance};
use crate::error::{Error, Result};
use crate::fusion::majority_vote;
use crate::shape::{extract_mean_vertices, propagate_vertices, CorrespondenceConfig, Propagation, VertexSet};
use crate::volio::{IntensityVolume, LabelVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub correspondence: CorrespondenceConfig,
    pub ap: ApConfig,
    /// One cluster per region: the conventional population-average atlas.
    pub single_cluster: bool,
    pub training_set: String,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            correspondence: CorrespondenceConfig::default(),
            ap: ApConfig::default(),
            single_cluster: false,
            training_set: "training".into(),
        }
    }
}

impl BuildConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub region: u16,
    pub clusters: usize,
    pub converged: bool,
    pub iterations: usize,
    pub preference: f64,
    pub retries: usize,
}

/// Halving the preference magnitude this many times before giving up.
const MAX_RETRIES: usize = 3;

fn cluster_with_retry(sets: &[VertexSet], cfg: &BuildConfig) -> Result<(ClusteringResult, RegionReport)> {
    let region = sets[0].region;
    let sim = build_similarity_matrix(sets, cfg.ap.preference)?;
    if cfg.single_cluster {
        let result = ClusteringResult::single(&sim);
        let report = RegionReport {
            region,
            clusters: 1,
            converged: true,
            iterations: 0,
            preference: f64::NEG_INFINITY,
            retries: 0,
        };
        return Ok((result, report));
    }
    let mut preference = sim.preference(0);
    let mut ap = cfg.ap.clone();
    let mut sim = sim;
    for retries in 0..=MAX_RETRIES {
        match affinity_propagation(&sim, &ap) {
            Ok(result) => {
                let report = RegionReport {
                    region,
                    clusters: result.num_clusters(),
                    converged: result.converged,
                    iterations: result.iterations_run,
                    preference,
                    retries,
                };
                return Ok((result, report));
            }
            Err(Error::ClusteringFailed { reason, .. }) if retries < MAX_RETRIES => {
                warn!("region {region}: {reason}; retrying with half the preference");
                preference *= 0.5;
                ap.preference = Preference::Value(preference);
                sim = build_similarity_matrix(sets, ap.preference)?;
            }
            Err(Error::ClusteringFailed { reason, .. }) => {
                return Err(Error::ClusteringFailed {
                    region: Some(region),
                    reason,
                })
            }
            Err(e) => return Err(e),
        }
    }
    unreachable!()
}

/// Vertex sets of every training subject for region `k`.
pub fn region_vertex_sets(mean_vertices: &VertexSet, segmentations: &[LabelVolume]) -> Result<Vec<VertexSet>> {
    segmentations
        .par_iter()
        .enumerate()
        .map(|(i, seg)| propagate_vertices(mean_vertices, seg, i, Propagation::BoundaryProjection))
        .collect()
}

/// Train a dictionary from co-registered segmentations and images.
pub fn train_dictionary(
    segmentations: &[LabelVolume],
    images: &[IntensityVolume],
    cfg: &BuildConfig,
) -> Result<(AtlasDictionary, Vec<RegionReport>)> {
    cfg.correspondence.validate()?;
    cfg.ap.validate()?;
    if segmentations.len() < 2 {
        return Err(Error::EmptyPopulation(format!(
            "training needs at least 2 subjects, got {}",
            segmentations.len()
        )));
    }
    let mean = majority_vote(segmentations)?;
    let k_regions = mean.volume.num_labels() as usize - 1;
    let mut clusterings = Vec::with_capacity(k_regions);
    let mut reports = Vec::with_capacity(k_regions);
    for k in 1..=k_regions as u16 {
        let mean_vertices = extract_mean_vertices(&mean, k, &cfg.correspondence)?;
        let sets = region_vertex_sets(&mean_vertices, segmentations)?;
        let (result, report) = cluster_with_retry(&sets, cfg)?;
        info!(
            "region {k}: {} clusters ({} iterations, converged {})",
            report.clusters, report.iterations, report.converged
        );
        clusterings.push(result);
        reports.push(report);
    }
    let provenance = Provenance {
        training_set: cfg.training_set.clone(),
        seed: cfg.correspondence.seed,
        config_hash: cfg.hash(),
    };
    let dict = build_dictionary(segmentations, images, &clusterings, provenance)?;
    Ok((dict, reports))
}
