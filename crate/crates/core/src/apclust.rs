//! Affinity propagation over vertex-set similarities.
//!
//! Similarity between two subjects is the negated mean squared distance
//! between corresponding vertices. The message loop follows the usual
//! responsibility/availability scheme with damping; each sweep reads only the
//! previous iterate, so results are identical at any thread count.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shape::{dist2, VertexSet};

/// Square similarity matrix; the diagonal holds preferences.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    s: Vec<f64>,
}

const SYMMETRY_TOLERANCE: f64 = 1e-9;

impl SimilarityMatrix {
    /// Row-major `n x n` values. Off-diagonals must be finite, non-positive
    /// and symmetric; the diagonal must be finite.
    pub fn new(n: usize, s: Vec<f64>) -> Result<Self> {
        if n == 0 || s.len() != n * n {
            return Err(Error::InvalidConfig(format!(
                "similarity matrix of order {n} needs {} values, got {}",
                n * n,
                s.len()
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("similarities must be finite".into()));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (s[i * n + j], s[j * n + i]);
                if a > 0.0 || b > 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "off-diagonal similarity ({i},{j}) is positive"
                    )));
                }
                if (a - b).abs() > SYMMETRY_TOLERANCE {
                    return Err(Error::InvalidConfig(format!(
                        "similarity is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self { n, s })
    }

    /// Off-diagonal similarities with the diagonal set from `preference`.
    pub fn with_preference(n: usize, mut s: Vec<f64>, preference: Preference) -> Result<Self> {
        if s.len() != n * n {
            return Err(Error::InvalidConfig("similarity matrix shape".into()));
        }
        let p = match preference {
            Preference::Value(v) => v,
            Preference::Median => median_off_diagonal(n, &s),
        };
        for i in 0..n {
            s[i * n + i] = p;
        }
        Self::new(n, s)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.s[i * self.n + k]
    }

    pub fn preference(&self, i: usize) -> f64 {
        self.get(i, i)
    }

    pub fn values(&self) -> &[f64] {
        &self.s
    }
}

/// Median over the upper triangle; zero for a 1x1 matrix.
fn median_off_diagonal(n: usize, s: &[f64]) -> f64 {
    let mut v: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| s[i * n + j])
        .collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Preference {
    Median,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApConfig {
    pub damping: f64,
    pub max_iterations: usize,
    pub convergence_window: usize,
    pub preference: Preference,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            damping: 0.9,
            max_iterations: 1000,
            convergence_window: 50,
            preference: Preference::Median,
        }
    }
}

impl ApConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..1.0).contains(&self.damping) {
            return Err(Error::InvalidConfig(format!(
                "damping must lie in [0.5, 1), got {}",
                self.damping
            )));
        }
        if self.max_iterations == 0 || self.convergence_window == 0 {
            return Err(Error::InvalidConfig("iteration limits must be positive".into()));
        }
        if let Preference::Value(v) = self.preference {
            if !v.is_finite() {
                return Err(Error::InvalidConfig("preference must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    /// Exemplar subject indices, ascending. Cluster `c` is `exemplars[c]`.
    pub exemplars: Vec<usize>,
    /// Exemplar subject index per subject.
    pub assignment: Vec<usize>,
    pub iterations_run: usize,
    pub converged: bool,
}

impl ClusteringResult {
    pub fn num_clusters(&self) -> usize {
        self.exemplars.len()
    }

    pub fn num_subjects(&self) -> usize {
        self.assignment.len()
    }

    /// Cluster id (position of the exemplar) of subject `i`.
    pub fn cluster_of(&self, i: usize) -> usize {
        self.exemplars
            .binary_search(&self.assignment[i])
            .expect("assignment is an exemplar")
    }

    pub fn cluster_ids(&self) -> Vec<usize> {
        (0..self.assignment.len()).map(|i| self.cluster_of(i)).collect()
    }

    pub fn members(&self, c: usize) -> Vec<usize> {
        let e = self.exemplars[c];
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == e)
            .collect()
    }

    /// Everyone in one cluster around the medoid (largest total similarity).
    pub fn single(sim: &SimilarityMatrix) -> Self {
        let n = sim.n();
        let medoid = (0..n)
            .map(|k| {
                let total: f64 = (0..n).filter(|&i| i != k).map(|i| sim.get(i, k)).sum();
                (k, total)
            })
            .fold(
                (0, f64::NEG_INFINITY),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            )
            .0;
        Self {
            exemplars: vec![medoid],
            assignment: vec![medoid; n],
            iterations_run: 0,
            converged: true,
        }
    }

    /// Checks the structural invariants; used by tests and loaders.
    pub fn validate(&self) -> Result<()> {
        let n = self.assignment.len();
        if self.exemplars.is_empty() || self.exemplars.len() > n {
            return Err(Error::Format("cluster count out of range".into()));
        }
        if self.exemplars.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("exemplars must be strictly ascending".into()));
        }
        for &e in &self.exemplars {
            if e >= n || self.assignment[e] != e {
                return Err(Error::Format(format!("exemplar {e} is not self-assigned")));
            }
        }
        if self.assignment.iter().any(|a| self.exemplars.binary_search(a).is_err()) {
            return Err(Error::Format("assignment to a non-exemplar".into()));
        }
        Ok(())
    }

    /// `region k clusters C converged {0|1}` then `i exemplar` per subject.
    pub fn to_text(&self, region: u16) -> String {
        let mut s = format!(
            "region {} clusters {} converged {}\n",
            region,
            self.num_clusters(),
            u8::from(self.converged)
        );
        for (i, e) in self.assignment.iter().enumerate() {
            let _ = writeln!(s, "{i} {e}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<(u16, Self)> {
        let bad = |m: &str| Error::Format(format!("clustering table: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty"))?.split_whitespace().collect();
        if header.len() != 6 || header[0] != "region" || header[2] != "clusters" || header[4] != "converged" {
            return Err(bad("header"));
        }
        let region: u16 = header[1].parse().map_err(|_| bad("region"))?;
        let clusters: usize = header[3].parse().map_err(|_| bad("cluster count"))?;
        let converged = match header[5] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("converged flag")),
        };
        let mut assignment = Vec::new();
        for (row, line) in lines.enumerate() {
            let t: Vec<usize> = line
                .split_whitespace()
                .map(|x| x.parse().map_err(|_| bad(line)))
                .collect::<Result<_>>()?;
            if t.len() != 2 || t[0] != row {
                return Err(bad(line));
            }
            assignment.push(t[1]);
        }
        let mut exemplars = assignment.clone();
        exemplars.sort_unstable();
        exemplars.dedup();
        let result = Self {
            exemplars,
            assignment,
            iterations_run: 0,
            converged,
        };
        result.validate()?;
        if result.num_clusters() != clusters {
            return Err(bad("cluster count does not match assignments"));
        }
        Ok((region, result))
    }
}

/// Negated mean squared distance between corresponding vertices.
pub fn vertex_similarity(a: &VertexSet, b: &VertexSet) -> Result<f64> {
    if a.region != b.region {
        return Err(Error::Correspondence(format!(
            "comparing region {} with region {}",
            a.region, b.region
        )));
    }
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Correspondence(format!(
            "vertex counts differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let total: f64 = a.points.iter().zip(&b.points).map(|(p, q)| dist2(p, q)).sum();
    Ok(-total / a.len() as f64)
}

pub fn build_similarity_matrix(vertex_sets: &[VertexSet], preference: Preference) -> Result<SimilarityMatrix> {
    let n = vertex_sets.len();
    if n < 2 {
        return Err(Error::EmptyPopulation(format!(
            "similarity matrix needs at least 2 subjects, got {n}"
        )));
    }
    let m = vertex_sets[0].len();
    let region = vertex_sets[0].region;
    if let Some(bad) = vertex_sets.iter().find(|v| v.len() != m || v.region != region) {
        return Err(Error::Correspondence(format!(
            "vertex set for region {} has {} points, expected region {region} with {m}",
            bad.region,
            bad.len()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        Ok(0.0)
                    } else {
                        // upper-triangle evaluation keeps the matrix exactly symmetric
                        let (a, b) = if i < j { (i, j) } else { (j, i) };
                        vertex_similarity(&vertex_sets[a], &vertex_sets[b])
                    }
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    SimilarityMatrix::with_preference(n, rows.concat(), preference)
}

/// `Σ_e s(e,e) + Σ_{i ∉ E} max_{e ∈ E} s(i,e)`.
pub fn net_similarity(sim: &SimilarityMatrix, exemplars: &[usize]) -> f64 {
    let n = sim.n();
    let mut total = 0.0;
    for i in 0..n {
        if exemplars.contains(&i) {
            total += sim.get(i, i);
        } else {
            total += exemplars
                .iter()
                .map(|&e| sim.get(i, e))
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    total
}

fn assign(sim: &SimilarityMatrix, exemplars: &[usize]) -> Vec<usize> {
    (0..sim.n())
        .map(|i| {
            if exemplars.binary_search(&i).is_ok() {
                return i;
            }
            let mut best = exemplars[0];
            for &e in &exemplars[1..] {
                if sim.get(i, e) > sim.get(i, best) {
                    best = e;
                }
            }
            best
        })
        .collect()
}

/// Move every exemplar to the member that maximises the summed similarity
/// within its cluster (the final step of the reference implementation).
/// Equal sums are decided by the subjects' row keys rather than their
/// numbering.
fn refine(sim: &SimilarityMatrix, keys: &[u64], exemplars: Vec<usize>) -> Vec<usize> {
    let assignment = assign(sim, &exemplars);
    let mut out: Vec<usize> = exemplars
        .iter()
        .map(|&e| {
            let members: Vec<usize> = (0..sim.n()).filter(|&i| assignment[i] == e).collect();
            let mut buf = Vec::with_capacity(members.len());
            let mut best = e;
            let mut best_sum = f64::NEG_INFINITY;
            for &j in &members {
                buf.clear();
                buf.extend(members.iter().map(|&i| sim.get(i, j)));
                let sum = ordered_sum(&mut buf);
                if sum > best_sum || (sum == best_sum && keys[j] > keys[best]) {
                    best_sum = sum;
                    best = j;
                }
            }
            best
        })
        .collect();
    out.sort_unstable();
    out
}

/// All off-diagonals equal and all preferences equal: messages never break
/// the symmetry, so decide directly.
fn degenerate(sim: &SimilarityMatrix) -> Option<ClusteringResult> {
    let n = sim.n();
    let off = if n > 1 { sim.get(0, 1) } else { 0.0 };
    let pref = sim.preference(0);
    for i in 0..n {
        for k in 0..n {
            let v = sim.get(i, k);
            if (i == k && v != pref) || (i != k && v != off) {
                return None;
            }
        }
    }
    let exemplars: Vec<usize> = if n > 1 && pref > off { (0..n).collect() } else { vec![0] };
    let assignment = assign(sim, &exemplars);
    Some(ClusteringResult {
        exemplars,
        assignment,
        iterations_run: 0,
        converged: true,
    })
}

/// Sum in ascending order, so the result depends only on the multiset of
/// values and not on subject numbering.
fn ordered_sum(v: &mut [f64]) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    v.iter().sum()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Similarities with exact ties broken at the last-bit level.
///
/// Symmetric matrices, and a median preference that equals one of the
/// similarities, leave the message updates with exact ties that can stall
/// them. As in the reference implementation, every entry is nudged by a
/// relative amount of about one machine epsilon. The nudge is not random:
/// it is hashed from the entry's value and from the sorted rows of both
/// endpoints, so it follows the subjects under any relabelling (subjects
/// with identical vertex sets are told apart by order of appearance, which
/// is harmless since they are interchangeable). The row keys are returned
/// as well for later tie-breaks.
fn break_ties(sim: &SimilarityMatrix) -> (Vec<f64>, Vec<u64>) {
    let n = sim.n();
    let s = sim.values();
    let rows: Vec<u64> = (0..n)
        .map(|i| {
            let mut bits: Vec<u64> = s[i * n..(i + 1) * n].iter().map(|v| v.to_bits()).collect();
            bits.sort_unstable();
            bits.into_iter().fold(0x243f_6a88_85a3_08d3, |h, b| splitmix(h ^ b))
        })
        .collect();
    // Subjects with identical vertex sets share a row hash; give each
    // repeat its own key so the pair does not stay exactly symmetric.
    let mut seen: HashMap<u64, u64> = HashMap::new();
    let rows: Vec<u64> = rows
        .into_iter()
        .map(|h| {
            let rank = seen.entry(h).or_insert(0);
            let key = if *rank == 0 {
                h
            } else {
                splitmix(h ^ rank.wrapping_mul(0x9e37_79b9_7f4a_7c15))
            };
            *rank += 1;
            key
        })
        .collect();
    // Zero entries (duplicate subjects) still need a nudge the messages can
    // see, so the floor follows the matrix scale.
    let scale = s.iter().filter(|v| v.is_finite()).fold(0f64, |m, v| m.max(v.abs()));
    let floor = f64::EPSILON * scale.max(f64::MIN_POSITIVE);
    let mut out = s.to_vec();
    for i in 0..n {
        for k in 0..n {
            let h = splitmix(splitmix(rows[i] ^ s[i * n + k].to_bits()) ^ rows[k].rotate_left(17));
            let u = (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0;
            let v = &mut out[i * n + k];
            *v += (f64::EPSILON * v.abs() + floor) * u;
        }
    }
    (out, rows)
}

pub fn affinity_propagation(sim: &SimilarityMatrix, cfg: &ApConfig) -> Result<ClusteringResult> {
    cfg.validate()?;
    if let Some(r) = degenerate(sim) {
        return Ok(r);
    }
    let n = sim.n();
    let lambda = cfg.damping;
    let (s, keys) = break_ties(sim);
    let s = s.as_slice();
    let mut r = vec![0f64; n * n];
    let mut a = vec![0f64; n * n];
    let mut col = vec![0f64; n];
    let mut is_exemplar = vec![false; n];
    let mut stable = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;
    let min_rows = (4096 / n).max(1);

    for _ in 0..cfg.max_iterations {
        iterations += 1;

        // responsibilities, row by row
        r.par_chunks_mut(n)
            .with_min_len(min_rows)
            .enumerate()
            .for_each(|(i, row)| {
                let (mut first, mut second, mut arg) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
                for k in 0..n {
                    let v = a[i * n + k] + s[i * n + k];
                    if v > first {
                        second = first;
                        first = v;
                        arg = k;
                    } else if v > second {
                        second = v;
                    }
                }
                for (k, rik) in row.iter_mut().enumerate() {
                    let competitor = if k == arg { second } else { first };
                    let update = s[i * n + k] - competitor;
                    *rik = lambda * *rik + (1.0 - lambda) * update;
                }
            });

        // positive column support, excluding the diagonal
        col.par_iter_mut().with_min_len(min_rows).enumerate().for_each_init(
            || Vec::with_capacity(n),
            |buf, (k, c)| {
                buf.clear();
                buf.extend((0..n).filter(|&i| i != k).map(|i| r[i * n + k].max(0.0)));
                *c = ordered_sum(buf);
            },
        );

        a.par_chunks_mut(n)
            .with_min_len(min_rows)
            .enumerate()
            .for_each(|(i, row)| {
                for (k, aik) in row.iter_mut().enumerate() {
                    let update = if i == k {
                        col[k]
                    } else {
                        (r[k * n + k] + col[k] - r[i * n + k].max(0.0)).min(0.0)
                    };
                    *aik = lambda * *aik + (1.0 - lambda) * update;
                }
            });

        if r.iter().chain(a.iter()).any(|v| !v.is_finite()) {
            return Err(Error::ClusteringFailed {
                region: None,
                reason: format!("non-finite message at iteration {iterations}"),
            });
        }

        let mut changed = false;
        let mut any = false;
        for (k, flag) in is_exemplar.iter_mut().enumerate() {
            let now = a[k * n + k] + r[k * n + k] > 0.0;
            changed |= now != *flag;
            any |= now;
            *flag = now;
        }
        if !changed && any {
            stable += 1;
        } else {
            stable = 0;
        }
        if stable >= cfg.convergence_window {
            converged = true;
            break;
        }
    }

    let exemplars: Vec<usize> = (0..n).filter(|&k| is_exemplar[k]).collect();
    if exemplars.is_empty() {
        return Err(Error::ClusteringFailed {
            region: None,
            reason: format!("no exemplar emerged after {iterations} iterations"),
        });
    }
    let exemplars = refine(sim, &keys, exemplars);
    let assignment = assign(sim, &exemplars);
    Ok(ClusteringResult {
        exemplars,
        assignment,
        iterations_run: iterations,
        converged,
    })
}

/// Similarity matrix plus affinity propagation for one region.
pub fn cluster_region(vertex_sets: &[VertexSet], cfg: &ApConfig) -> Result<ClusteringResult> {
    let region = vertex_sets.first().map(|v| v.region);
    let sim = build_similarity_matrix(vertex_sets, cfg.preference)?;
    affinity_propagation(&sim, cfg).map_err(|e| match e {
        Error::ClusteringFailed { reason, .. } => Error::ClusteringFailed { region, reason },
        other => other,
    })
}

/// Fraction of subjects whose cluster's majority truth label matches theirs.
pub fn partition_purity(clusters: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(clusters.len(), truth.len());
    if clusters.is_empty() {
        return 1.0;
    }
    let mut ids: Vec<usize> = clusters.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut agree = 0usize;
    for c in ids {
        let mut counts = std::collections::BTreeMap::new();
        for (&ci, &t) in clusters.iter().zip(truth) {
            if ci == c {
                *counts.entry(t).or_insert(0usize) += 1;
            }
        }
        agree += counts.values().max().copied().unwrap_or(0);
    }
    agree as f64 / clusters.len() as f64
}
