//! Point-distribution-model vertices.
//!
//! Vertices are boundary face centres of a region, in millimetres
//! (voxel index scaled by spacing). A mean vertex set is sampled from the
//! fused segmentation by farthest-point sampling; each subject then receives
//! a vertex set with the same ordering, so index `m` means the same surface
//! location across the population.
//!
//! Correspondence uses one of two strategies:
//!
//! * boundary projection: the mean set is first translated so the region
//!   centroids agree, then every vertex snaps to the nearest boundary face
//!   centre of the subject's region;
//! * external field: vertices are moved by a dense displacement field
//!   supplied by an external registration tool.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::MeanSegmentation;
use crate::volio::{Grid, IntensityVolume, LabelVolume};

pub type Point = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VertexSource {
    Mean,
    Subject(usize),
}

/// Ordered, corresponding surface points of one region.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexSet {
    pub region: u16,
    pub points: Vec<Point>,
    /// Region centroid (mm) of the segmentation the points came from.
    pub anchor: Point,
    pub source: VertexSource,
}

impl VertexSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Text table: `region k count M anchor x y z`, then one `x y z` line per point.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "region {} count {} anchor {} {} {}\n",
            self.region,
            self.points.len(),
            sig9(self.anchor[0]),
            sig9(self.anchor[1]),
            sig9(self.anchor[2])
        );
        for p in &self.points {
            let _ = writeln!(s, "{} {} {}", sig9(p[0]), sig9(p[1]), sig9(p[2]));
        }
        s
    }

    /// Parse a text table. A header without the anchor is accepted; the
    /// anchor then defaults to the centroid of the points.
    pub fn from_text(text: &str, source: VertexSource) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty vertex table".into()))?;
        let tok: Vec<&str> = header.split_whitespace().collect();
        if tok.len() < 4 || tok[0] != "region" || tok[2] != "count" {
            return Err(Error::Format(format!("bad vertex table header: {header}")));
        }
        let region: u16 = parse_tok(tok[1])?;
        let count: usize = parse_tok(tok[3])?;
        let anchor = match tok.get(4) {
            Some(&"anchor") if tok.len() == 8 => Some([parse_tok(tok[5])?, parse_tok(tok[6])?, parse_tok(tok[7])?]),
            None => None,
            _ => return Err(Error::Format(format!("bad vertex table header: {header}"))),
        };
        let points = lines
            .map(|l| {
                let v: Vec<f64> = l.split_whitespace().map(parse_tok).collect::<Result<_>>()?;
                match v.as_slice() {
                    [x, y, z] => Ok([*x, *y, *z]),
                    _ => Err(Error::Format(format!("bad vertex line: {l}"))),
                }
            })
            .collect::<Result<Vec<Point>>>()?;
        if points.len() != count {
            return Err(Error::Format(format!(
                "header announces {count} vertices, found {}",
                points.len()
            )));
        }
        let anchor = anchor.unwrap_or_else(|| centroid(&points));
        Ok(Self {
            region,
            points,
            anchor,
            source,
        })
    }
}

fn parse_tok<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("cannot parse '{s}'")))
}

/// Nine significant digits in scientific notation.
fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrespondenceStrategy {
    BoundaryProjection,
    ExternalField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceConfig {
    pub vertices_per_region: usize,
    pub strategy: CorrespondenceStrategy,
    pub seed: u64,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        Self {
            vertices_per_region: 128,
            strategy: CorrespondenceStrategy::BoundaryProjection,
            seed: 0,
        }
    }
}

impl CorrespondenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vertices_per_region < 4 {
            return Err(Error::InvalidConfig(format!(
                "vertices_per_region must be >= 4, got {}",
                self.vertices_per_region
            )));
        }
        Ok(())
    }
}

/// Dense displacement field in millimetres, one channel per axis.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    grid: Grid,
    channels: [Vec<f32>; 3],
}

impl DisplacementField {
    pub fn new(dx: IntensityVolume, dy: IntensityVolume, dz: IntensityVolume) -> Result<Self> {
        dx.grid().ensure_same(dy.grid())?;
        dx.grid().ensure_same(dz.grid())?;
        Ok(Self {
            grid: dx.grid().clone(),
            channels: [dx.into_voxels(), dy.into_voxels(), dz.into_voxels()],
        })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Self {
            grid,
            channels: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn uniform(grid: Grid, d: [f32; 3]) -> Self {
        let n = grid.len();
        Self {
            grid,
            channels: [vec![d[0]; n], vec![d[1]; n], vec![d[2]; n]],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Trilinear sample at a millimetre position, clamped to the grid.
    pub fn sample(&self, p: Point) -> Point {
        let g = &self.grid;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [0f64; 3];
        for a in 0..3 {
            let max = (g.dims[a] - 1) as f64;
            let c = (p[a] / g.spacing[a]).clamp(0.0, max);
            let f = c.floor();
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(g.dims[a] - 1);
            t[a] = c - f;
        }
        let mut out = [0f64; 3];
        for (ch, o) in self.channels.iter().zip(out.iter_mut()) {
            let mut acc = 0.0;
            for corner in 0..8 {
                let mut w = 1.0;
                let mut idx = [0usize; 3];
                for a in 0..3 {
                    if corner >> a & 1 == 1 {
                        w *= t[a];
                        idx[a] = hi[a];
                    } else {
                        w *= 1.0 - t[a];
                        idx[a] = lo[a];
                    }
                }
                if w != 0.0 {
                    acc += w * ch[g.index(idx[0], idx[1], idx[2])] as f64;
                }
            }
            *o = acc;
        }
        out
    }
}

/// How subject vertices are derived from the mean vertices.
#[derive(Debug, Clone, Copy)]
pub enum Propagation<'a> {
    BoundaryProjection,
    ExternalField(&'a DisplacementField),
}

const NEIGHBOURS: [(usize, isize); 6] = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)];

/// Centres (mm) of every voxel face separating region `k` from anything else,
/// including the grid border. Ordered by voxel index, then by face.
pub fn boundary_faces(seg: &LabelVolume, k: u16) -> Vec<Point> {
    let g = seg.grid();
    let vox = seg.voxels();
    let mut faces = Vec::new();
    for (idx, &l) in vox.iter().enumerate() {
        if l != k {
            continue;
        }
        let c = g.coords(idx);
        for &(axis, dir) in &NEIGHBOURS {
            let n = c[axis] as isize + dir;
            let exposed = if n < 0 || n >= g.dims[axis] as isize {
                true
            } else {
                let mut nc = c;
                nc[axis] = n as usize;
                vox[g.index(nc[0], nc[1], nc[2])] != k
            };
            if exposed {
                let mut p = [c[0] as f64, c[1] as f64, c[2] as f64];
                p[axis] += 0.5 * dir as f64;
                faces.push([p[0] * g.spacing[0], p[1] * g.spacing[1], p[2] * g.spacing[2]]);
            }
        }
    }
    faces
}

/// Centroid (mm) of the voxel centres labelled `k`, if any.
pub fn region_centroid(seg: &LabelVolume, k: u16) -> Option<Point> {
    let g = seg.grid();
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    for (idx, _) in seg.voxels().iter().enumerate().filter(|(_, &l)| l == k) {
        let c = g.coords(idx);
        for a in 0..3 {
            sum[a] += c[a] as f64;
        }
        n += 1;
    }
    (n > 0).then(|| {
        [
            sum[0] / n as f64 * g.spacing[0],
            sum[1] / n as f64 * g.spacing[1],
            sum[2] / n as f64 * g.spacing[2],
        ]
    })
}

fn centroid(points: &[Point]) -> Point {
    let n = points.len().max(1) as f64;
    let mut c = [0f64; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    [c[0] / n, c[1] / n, c[2] / n]
}

#[inline]
pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn lexicographic_min(points: &[Point]) -> usize {
    (0..points.len())
        .min_by(|&i, &j| {
            points[i]
                .iter()
                .zip(points[j].iter())
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .expect("nonempty")
}

/// Farthest-point sample of `count` indices, starting from the
/// lexicographically smallest point; exact distance ties are broken by `rng`.
fn farthest_point_sample(points: &[Point], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let start = lexicographic_min(points);
    let mut chosen = vec![start];
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, &points[start])).collect();
    let mut ties = Vec::new();
    while chosen.len() < count {
        let best = nearest.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ties.clear();
        ties.extend((0..points.len()).filter(|&i| nearest[i] == best));
        let pick = if ties.len() == 1 {
            ties[0]
        } else {
            ties[rng.random_range(0..ties.len())]
        };
        chosen.push(pick);
        let q = points[pick];
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(dist2(p, &q));
        }
    }
    chosen
}

/// Sample the mean vertex set of region `k` from the fused segmentation.
pub fn extract_mean_vertices(mean: &MeanSegmentation, k: u16, cfg: &CorrespondenceConfig) -> Result<VertexSet> {
    cfg.validate()?;
    let seg = &mean.volume;
    let anchor = region_centroid(seg, k).ok_or(Error::RegionMissing(k))?;
    let faces = boundary_faces(seg, k);
    if faces.len() < cfg.vertices_per_region {
        return Err(Error::InsufficientSurface {
            region: k,
            available: faces.len(),
            requested: cfg.vertices_per_region,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(k as u64);
    let idx = farthest_point_sample(&faces, cfg.vertices_per_region, &mut rng);
    Ok(VertexSet {
        region: k,
        points: idx.into_iter().map(|i| faces[i]).collect(),
        anchor,
        source: VertexSource::Mean,
    })
}

fn nearest_index(faces: &[Point], q: &Point) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, f) in faces.iter().enumerate() {
        let d = dist2(f, q);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Carry the mean vertices over to one subject, preserving order.
pub fn propagate_vertices(
    mean_vertices: &VertexSet,
    subject_seg: &LabelVolume,
    subject: usize,
    method: Propagation<'_>,
) -> Result<VertexSet> {
    let k = mean_vertices.region;
    let anchor = region_centroid(subject_seg, k).ok_or(Error::RegionMissing(k))?;
    let points = match method {
        Propagation::BoundaryProjection => {
            let faces = boundary_faces(subject_seg, k);
            let shift = [
                anchor[0] - mean_vertices.anchor[0],
                anchor[1] - mean_vertices.anchor[1],
                anchor[2] - mean_vertices.anchor[2],
            ];
            mean_vertices
                .points
                .par_iter()
                .map(|p| {
                    let q = [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]];
                    faces[nearest_index(&faces, &q)]
                })
                .collect()
        }
        Propagation::ExternalField(field) => {
            subject_seg.grid().ensure_same(field.grid())?;
            mean_vertices
                .points
                .iter()
                .map(|p| {
                    let d = field.sample(*p);
                    [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
                })
                .collect()
        }
    };
    Ok(VertexSet {
        region: k,
        points,
        anchor,
        source: VertexSource::Subject(subject),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::majority_vote;

    fn single_voxel() -> LabelVolume {
        let g = Grid::cube([11, 11, 11]).unwrap();
        let mut v = vec![0u16; g.len()];
        v[g.index(5, 5, 5)] = 1;
        LabelVolume::new(g, v, 2).unwrap()
    }

    fn mean_of(seg: &LabelVolume) -> MeanSegmentation {
        majority_vote(std::slice::from_ref(seg)).unwrap()
    }

    fn sorted(mut p: Vec<Point>) -> Vec<Point> {
        p.sort_by(|a, b| a.partial_cmp(b).unwrap());
        p
    }

    #[test]
    fn single_voxel_yields_its_six_faces() {
        let cfg = CorrespondenceConfig {
            vertices_per_region: 6,
            ..Default::default()
        };
        let vs = extract_mean_vertices(&mean_of(&single_voxel()), 1, &cfg).unwrap();
        let expected = sorted(vec![
            [4.5, 5.0, 5.0],
            [5.5, 5.0, 5.0],
            [5.0, 4.5, 5.0],
            [5.0, 5.5, 5.0],
            [5.0, 5.0, 4.5],
            [5.0, 5.0, 5.5],
        ]);
        assert_eq!(sorted(vs.points.clone()), expected);
        // first pick is the lexicographically smallest face
        assert_eq!(vs.points[0], [4.5, 5.0, 5.0]);
    }

    #[test]
    fn missing_region_and_small_surface() {
        let cfg = CorrespondenceConfig {
            vertices_per_region: 6,
            ..Default::default()
        };
        let mean = mean_of(&single_voxel());
        let g = Grid::cube([3, 3, 3]).unwrap();
        let empty = LabelVolume::filled(g, 0, 3).unwrap();
        assert!(matches!(
            extract_mean_vertices(&mean_of(&empty), 2, &cfg),
            Err(Error::RegionMissing(2))
        ));
        let cfg7 = CorrespondenceConfig {
            vertices_per_region: 7,
            ..Default::default()
        };
        assert!(matches!(
            extract_mean_vertices(&mean, 1, &cfg7),
            Err(Error::InsufficientSurface { available: 6, .. })
        ));
    }

    #[test]
    fn border_faces_are_exposed() {
        let g = Grid::cube([1, 1, 1]).unwrap();
        let v = LabelVolume::new(g, vec![1], 2).unwrap();
        assert_eq!(boundary_faces(&v, 1).len(), 6);
    }

    #[test]
    fn spacing_scales_coordinates() {
        let g = Grid::new([3, 3, 3], [2.0, 1.0, 0.5]).unwrap();
        let mut v = vec![0u16; 27];
        v[g.index(1, 1, 1)] = 1;
        let seg = LabelVolume::new(g, v, 2).unwrap();
        let faces = boundary_faces(&seg, 1);
        assert!(faces.contains(&[1.0, 1.0, 0.5]));
        assert!(faces.contains(&[3.0, 1.0, 0.5]));
        assert!(faces.contains(&[2.0, 1.0, 0.25]));
        assert_eq!(region_centroid(&seg, 1), Some([2.0, 1.0, 0.5]));
    }

    #[test]
    fn external_field_zero_and_uniform() {
        let seg = single_voxel();
        let cfg = CorrespondenceConfig {
            vertices_per_region: 6,
            ..Default::default()
        };
        let mv = extract_mean_vertices(&mean_of(&seg), 1, &cfg).unwrap();
        let zero = DisplacementField::zeros(seg.grid().clone());
        let out = propagate_vertices(&mv, &seg, 0, Propagation::ExternalField(&zero)).unwrap();
        assert_eq!(out.points, mv.points);
        let shift = DisplacementField::uniform(seg.grid().clone(), [1.0, -0.5, 0.25]);
        let out = propagate_vertices(&mv, &seg, 0, Propagation::ExternalField(&shift)).unwrap();
        for (a, b) in out.points.iter().zip(&mv.points) {
            assert_eq!(*a, [b[0] + 1.0, b[1] - 0.5, b[2] + 0.25]);
        }
        let other = DisplacementField::zeros(Grid::cube([2, 2, 2]).unwrap());
        assert!(matches!(
            propagate_vertices(&mv, &seg, 0, Propagation::ExternalField(&other)),
            Err(Error::GridMismatch { .. })
        ));
    }

    #[test]
    fn trilinear_sampling_interpolates() {
        let g = Grid::cube([2, 1, 1]).unwrap();
        let dx = IntensityVolume::new(g.clone(), vec![0.0, 2.0]).unwrap();
        let z = IntensityVolume::new(g.clone(), vec![0.0, 0.0]).unwrap();
        let f = DisplacementField::new(dx, z.clone(), z).unwrap();
        assert_eq!(f.sample([0.25, 0.0, 0.0])[0], 0.5);
        assert_eq!(f.sample([5.0, 0.0, 0.0])[0], 2.0);
    }

    #[test]
    fn text_table_round_trip() {
        let vs = VertexSet {
            region: 3,
            points: vec![[0.5, 1.0 / 3.0, -2.25], [1e-3, 7.0, 123.456789]],
            anchor: [1.0, 2.0, 3.0],
            source: VertexSource::Mean,
        };
        let text = vs.to_text();
        assert!(text.starts_with("region 3 count 2"));
        let back = VertexSet::from_text(&text, VertexSource::Mean).unwrap();
        assert_eq!(back.region, 3);
        for (a, b) in back.points.iter().zip(&vs.points) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() <= 1e-8 * b[i].abs().max(1.0));
            }
        }
        let bare = "region 1 count 1\n1 2 3\n";
        let parsed = VertexSet::from_text(bare, VertexSource::Mean).unwrap();
        assert_eq!(parsed.anchor, [1.0, 2.0, 3.0]);
        assert!(VertexSet::from_text("region 1 count 2\n1 2 3\n", VertexSource::Mean).is_err());
    }
}
