//! Synthetic training/testing cohorts with planted shape phenotypes.
//!
//! Each region is an ellipsoid in its own lattice cell. The phenotypes of a
//! region are fixed centre offsets placed on a circle, so any two phenotypes
//! of the region are at least `phenotype_separation` voxels apart (exactly
//! that far when there are three or fewer). Subjects add clamped Gaussian
//! jitter to the semi-axes. Images carry one intensity level per label plus
//! Gaussian noise.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::{Grid, IntensityVolume, LabelVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub num_regions: usize,
    pub phenotypes_per_region: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Per-subject jitter of the semi-axes, voxel units.
    pub shape_noise: f64,
    pub intensity_noise: f64,
    /// Distance between the centres of neighbouring phenotypes, voxel units.
    pub phenotype_separation: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [48, 48, 48],
            num_regions: 8,
            phenotypes_per_region: 3,
            n_train: 60,
            n_test: 20,
            shape_noise: 0.6,
            intensity_noise: 2.0,
            phenotype_separation: 3.0,
            seed: 0,
        }
    }
}

/// Ratio of phenotype separation to jitter the generator guarantees.
pub const MIN_SEPARATION_RATIO: f64 = 5.0;
const JITTER_CLAMP: f64 = 3.0;
const BASE_AXIS_FRACTION: [f64; 3] = [0.24, 0.21, 0.18];
const MIN_SEMI_AXIS: f64 = 1.5;

impl PhantomConfig {
    pub fn n_subjects(&self) -> usize {
        self.n_train + self.n_test
    }

    pub fn num_labels(&self) -> u16 {
        self.num_regions as u16 + 1
    }

    /// Spacing between label intensity levels.
    pub fn level_step(&self) -> f64 {
        10.0 * self.intensity_noise.max(1.0)
    }

    /// Noise-free intensity of label `k` (background is 0).
    pub fn level(&self, k: u16) -> f64 {
        self.level_step() * k as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_regions < 2 || self.num_regions >= u16::MAX as usize {
            return Err(Error::InvalidConfig(format!(
                "num_regions must be at least 2, got {}",
                self.num_regions
            )));
        }
        if self.phenotypes_per_region < 1 {
            return Err(Error::InvalidConfig("need at least one phenotype per region".into()));
        }
        for (name, v) in [
            ("shape_noise", self.shape_noise),
            ("intensity_noise", self.intensity_noise),
            ("phenotype_separation", self.phenotype_separation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.phenotypes_per_region > 1 && self.phenotype_separation < MIN_SEPARATION_RATIO * self.shape_noise {
            return Err(Error::InvalidConfig(format!(
                "phenotype separation {} is below {MIN_SEPARATION_RATIO} x shape noise {}",
                self.phenotype_separation, self.shape_noise
            )));
        }
        if self.n_subjects() == 0 {
            return Err(Error::InvalidConfig("no subjects requested".into()));
        }
        Grid::cube(self.dims)?;
        Ok(())
    }
}

/// Ellipsoid parameters in voxel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Base shapes and phenotype offsets for every region.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub base: Vec<Ellipsoid>,
    cells: Vec<([usize; 3], [usize; 3])>,
}

fn lattice_counts(dims: [usize; 3], k: usize) -> [usize; 3] {
    let mut counts = [1usize; 3];
    while counts.iter().product::<usize>() < k {
        let axis = (0..3)
            .max_by(|&a, &b| {
                let ca = dims[a] as f64 / counts[a] as f64;
                let cb = dims[b] as f64 / counts[b] as f64;
                ca.total_cmp(&cb).then(b.cmp(&a))
            })
            .unwrap();
        counts[axis] += 1;
    }
    counts
}

/// Plane of the phenotype circle for region `k` (1-based).
fn phenotype_axes(k: u16) -> (usize, usize) {
    let r = (k as usize - 1) % 3;
    (r, (r + 1) % 3)
}

/// Radius of the circle whose inscribed regular polygon has side `sep`.
fn phenotype_radius(cfg: &PhantomConfig) -> f64 {
    let p = cfg.phenotypes_per_region;
    if p < 2 {
        0.0
    } else {
        cfg.phenotype_separation / (2.0 * (std::f64::consts::PI / p as f64).sin())
    }
}

impl Layout {
    pub fn new(cfg: &PhantomConfig) -> Result<Self> {
        cfg.validate()?;
        let counts = lattice_counts(cfg.dims, cfg.num_regions);
        let cell: Vec<f64> = (0..3).map(|a| cfg.dims[a] as f64 / counts[a] as f64).collect();
        let radius = phenotype_radius(cfg);
        let jitter = JITTER_CLAMP * cfg.shape_noise;
        let mut base = Vec::with_capacity(cfg.num_regions);
        let mut cells = Vec::with_capacity(cfg.num_regions);
        for r in 0..cfg.num_regions {
            let idx = [r % counts[0], (r / counts[0]) % counts[1], r / (counts[0] * counts[1])];
            let k = r as u16 + 1;
            let (axis_u, axis_v) = phenotype_axes(k);
            let mut center = [0f64; 3];
            let mut semi_axes = [0f64; 3];
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            for a in 0..3 {
                let start = idx[a] as f64 * cell[a];
                center[a] = start + cell[a] / 2.0 - 0.5;
                semi_axes[a] = cell[a] * BASE_AXIS_FRACTION[(a + r) % 3];
                let mut extent = semi_axes[a] + jitter;
                if a == axis_u || a == axis_v {
                    extent += radius;
                }
                if extent > cell[a] / 2.0 - 0.5 {
                    return Err(Error::Layout(format!(
                        "region {k} needs {extent:.2} voxels of half-width on axis {a}, cell allows {:.2}",
                        cell[a] / 2.0 - 0.5
                    )));
                }
                let min_axis = semi_axes[a] - jitter;
                if min_axis < MIN_SEMI_AXIS {
                    return Err(Error::Layout(format!(
                        "region {k} semi-axis on axis {a} can shrink to {min_axis:.2} voxels"
                    )));
                }
                lo[a] = start.floor() as usize;
                hi[a] = ((start + cell[a]).ceil() as usize).min(cfg.dims[a]);
            }
            base.push(Ellipsoid { center, semi_axes });
            cells.push((lo, hi));
        }
        Ok(Self { base, cells })
    }

    /// Noise-free shape of phenotype `p` for region `k`.
    pub fn phenotype_shape(&self, cfg: &PhantomConfig, k: u16, p: usize) -> Ellipsoid {
        let mut e = self.base[k as usize - 1];
        let radius = phenotype_radius(cfg);
        if radius > 0.0 {
            let theta = std::f64::consts::TAU * p as f64 / cfg.phenotypes_per_region as f64;
            let (u, v) = phenotype_axes(k);
            e.center[u] += radius * theta.cos();
            e.center[v] += radius * theta.sin();
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub seg: LabelVolume,
    pub img: IntensityVolume,
    /// Planted phenotype per region; entry `k-1` is region `k`.
    pub phenotypes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypePopulation {
    pub config: PhantomConfig,
    pub subjects: Vec<PhantomSubject>,
}

fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn clamped(normal: &Normal<f64>, rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    normal.sample(rng).clamp(-JITTER_CLAMP * sigma, JITTER_CLAMP * sigma)
}

fn generate_subject(cfg: &PhantomConfig, layout: &Layout, grid: &Grid, index: usize) -> Result<PhantomSubject> {
    let mut rng = subject_rng(cfg.seed, index);
    let shape_noise =
        Normal::new(0.0, cfg.shape_noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut labels = vec![0u16; grid.len()];
    let mut phenotypes = Vec::with_capacity(cfg.num_regions);
    for r in 0..cfg.num_regions {
        let k = r as u16 + 1;
        let p = rng.random_range(0..cfg.phenotypes_per_region);
        phenotypes.push(p);
        let mut e = layout.phenotype_shape(cfg, k, p);
        for a in 0..3 {
            e.semi_axes[a] += clamped(&shape_noise, &mut rng, cfg.shape_noise);
        }
        let (lo, hi) = layout.cells[r];
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    if e.contains([x as f64, y as f64, z as f64]) {
                        labels[grid.index(x, y, z)] = k;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.intensity_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let voxels = labels
        .iter()
        .map(|&l| {
            let eps = if cfg.intensity_noise > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (cfg.level(l) + eps) as f32
        })
        .collect();
    Ok(PhantomSubject {
        seg: LabelVolume::new(grid.clone(), labels, cfg.num_labels())?,
        img: IntensityVolume::new(grid.clone(), voxels)?,
        phenotypes,
    })
}

/// Generate `n_train + n_test` subjects. Subject `i` uses its own random
/// stream derived from `(seed, i)`, so any prefix of a larger cohort is
/// identical to the smaller cohort.
pub fn generate_population(cfg: &PhantomConfig) -> Result<PhenotypePopulation> {
    let layout = Layout::new(cfg)?;
    let grid = Grid::cube(cfg.dims)?;
    let subjects = (0..cfg.n_subjects())
        .into_par_iter()
        .map(|i| generate_subject(cfg, &layout, &grid, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(PhenotypePopulation {
        config: cfg.clone(),
        subjects,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// False when a rare phenotype forced a plain random split.
    pub stratified: bool,
}

fn imbalance(test_counts: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    test_counts
        .iter()
        .zip(targets)
        .flat_map(|(c, t)| c.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
        .sum()
}

/// Seeded train/test split that keeps per-region phenotype proportions
/// close to the population's.
pub fn split_population(pop: &PhenotypePopulation, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = pop.subjects.len();
    if n < 2 {
        return Err(Error::EmptyPopulation(format!("cannot split {n} subjects")));
    }
    let n_test = (((1.0 - train_fraction) * n as f64).round() as usize).clamp(1, n - 1);
    let regions = pop.config.num_regions;
    let phen = pop.config.phenotypes_per_region;

    let mut totals = vec![vec![0f64; phen]; regions];
    for s in &pop.subjects {
        for (r, &p) in s.phenotypes.iter().enumerate() {
            totals[r][p] += 1.0;
        }
    }
    let rare = totals.iter().flatten().any(|&c| c > 0.0 && c < 2.0);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_test = vec![false; n];
    order[..n_test].iter().for_each(|&i| in_test[i] = true);

    if rare {
        warn!("stratification skipped: a phenotype has fewer than 2 members");
    } else {
        let frac = n_test as f64 / n as f64;
        let targets: Vec<Vec<f64>> = totals
            .iter()
            .map(|row| row.iter().map(|c| c * frac).collect())
            .collect();
        let mut counts = vec![vec![0f64; phen]; regions];
        for (i, s) in pop.subjects.iter().enumerate() {
            if in_test[i] {
                for (r, &p) in s.phenotypes.iter().enumerate() {
                    counts[r][p] += 1.0;
                }
            }
        }
        let mut current = imbalance(&counts, &targets);
        for _ in 0..100 {
            let mut improved = false;
            for &i in &order {
                if !in_test[i] {
                    continue;
                }
                for &j in &order {
                    if in_test[j] {
                        continue;
                    }
                    let (pi, pj) = (&pop.subjects[i].phenotypes, &pop.subjects[j].phenotypes);
                    // score the swap incrementally
                    let mut delta = 0.0;
                    for r in 0..regions {
                        if pi[r] == pj[r] {
                            continue;
                        }
                        let (a, b) = (pi[r], pj[r]);
                        let before = (counts[r][a] - targets[r][a]).powi(2) + (counts[r][b] - targets[r][b]).powi(2);
                        let after =
                            (counts[r][a] - 1.0 - targets[r][a]).powi(2) + (counts[r][b] + 1.0 - targets[r][b]).powi(2);
                        delta += after - before;
                    }
                    if delta < -1e-9 {
                        for r in 0..regions {
                            counts[r][pi[r]] -= 1.0;
                            counts[r][pj[r]] += 1.0;
                        }
                        in_test[i] = false;
                        in_test[j] = true;
                        current += delta;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        debug_assert!((current - imbalance(&counts, &targets)).abs() < 1e-6);
    }
    let test: Vec<usize> = (0..n).filter(|&i| in_test[i]).collect();
    let train: Vec<usize> = (0..n).filter(|&i| !in_test[i]).collect();
    Ok(Split {
        train,
        test,
        stratified: !rare,
    })
}
