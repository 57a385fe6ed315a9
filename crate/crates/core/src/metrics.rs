//! Atlas evaluation: Jensen-Shannon divergence, naive max-probability
//! segmentation, Dice overlap and the Wilcoxon signed-rank test.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::volio::{LabelVolume, ProbMap, ProbabilisticAtlas};

fn plogp_ratio(p: f64, m: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / m).log2()
    }
}

/// Base-2 Jensen-Shannon divergence; inputs are renormalised to unit mass.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidDistribution(format!(
            "support sizes differ ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    let check = |d: &[f64], name: &str| -> Result<f64> {
        if let Some(v) = d.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidDistribution(format!("{name} has mass {v}")));
        }
        let total: f64 = d.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution(format!("{name} has zero total mass")));
        }
        Ok(total)
    };
    let (sp, sq) = (check(p, "p")?, check(q, "q")?);
    let mut js = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a / sp, b / sq);
        let m = 0.5 * (a + b);
        js += 0.5 * plogp_ratio(a, m) + 0.5 * plogp_ratio(b, m);
    }
    Ok(js.clamp(0.0, 1.0))
}

/// JS divergence between an atlas label map and the indicator of region `k`
/// in a target segmentation, each treated as a spatial distribution.
/// Zero mass on either side scores 1.
pub fn region_js(atlas_label_map: &ProbMap, target_seg: &LabelVolume, k: u16) -> Result<f64> {
    atlas_label_map.grid().ensure_same(target_seg.grid())?;
    let p: Vec<f64> = atlas_label_map.voxels().iter().map(|&v| v as f64).collect();
    let q: Vec<f64> = target_seg
        .voxels()
        .iter()
        .map(|&l| if l == k { 1.0 } else { 0.0 })
        .collect();
    if p.iter().all(|&v| v == 0.0) || q.iter().all(|&v| v == 0.0) {
        warn!("region {k}: zero mass in atlas or target, JS set to 1");
        return Ok(1.0);
    }
    js_divergence(&p, &q)
}

/// Per-voxel argmax over all label maps including background; ties go to
/// the lowest label.
pub fn naive_segmentation(atlas: &ProbabilisticAtlas) -> Result<LabelVolume> {
    let n = atlas.grid().len();
    let maps = atlas.maps();
    let labels = (0..n)
        .map(|v| {
            let mut best = 0usize;
            for (l, m) in maps.iter().enumerate().skip(1) {
                if m.voxels()[v] > maps[best].voxels()[v] {
                    best = l;
                }
            }
            best as u16
        })
        .collect();
    LabelVolume::new(atlas.grid().clone(), labels, maps.len() as u16)
}

/// Dice overlap of label `k`; two empty sets score 1.
pub fn dice(seg_a: &LabelVolume, seg_b: &LabelVolume, k: u16) -> Result<f64> {
    seg_a.grid().ensure_same(seg_b.grid())?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in seg_a.voxels().iter().zip(seg_b.voxels()) {
        let (ia, ib) = (x == k, y == k);
        a += ia as usize;
        b += ib as usize;
        both += (ia && ib) as usize;
    }
    if a + b == 0 {
        warn!("region {k} absent from both segmentations, Dice set to 1");
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n: usize,
    pub w: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub significant: bool,
    pub exact: bool,
}

impl WilcoxonResult {
    /// `n=,W=,p=,significant=`
    pub fn to_line(&self) -> String {
        format!(
            "n={},W={},p={:.6e},significant={}",
            self.n, self.w, self.p_value, self.significant
        )
    }
}

/// Largest sample size that uses the exact null distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 25;
const MIN_PAIRS: usize = 6;

/// Average ranks (1-based) of `values`, which must be sorted ascending.
fn average_ranks(sorted: &[f64]) -> Vec<f64> {
    let mut ranks = vec![0.0; sorted.len()];
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        ranks[i..=j].iter_mut().for_each(|x| *x = r);
        i = j + 1;
    }
    ranks
}

/// Two-sided signed-rank test on paired samples `x` and `y`.
///
/// Zero differences are dropped. For up to 25 remaining pairs the p value
/// comes from the exact permutation distribution of the (tie-averaged)
/// ranks; above that a normal approximation with tie and continuity
/// correction is used.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], alpha: f64) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::InvalidConfig(format!(
            "paired samples differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let mut diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidConfig("non-finite paired difference".into()));
    }
    let n = diffs.len();
    if n < MIN_PAIRS {
        return Err(Error::InsufficientPairs(n));
    }
    diffs.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = n as f64 * (n as f64 + 1.0) / 2.0;
    // adding 0.0 turns a -0.0 from the subtraction into 0.0
    let w = w_plus.min(total - w_plus) + 0.0;

    let (p, exact) = if n <= WILCOXON_EXACT_MAX_N {
        (exact_two_sided(&ranks, w), true)
    } else {
        (normal_two_sided(&abs, &ranks, w), false)
    };
    let p = p.clamp(0.0, 1.0);
    Ok(WilcoxonResult {
        n,
        w,
        p_value: p,
        alpha,
        significant: p < alpha,
        exact,
    })
}

/// `min(1, 2 P(T <= w))` where `T` sums a random subset of `ranks`.
/// Ranks are doubled so tie-averaged halves stay integral.
fn exact_two_sided(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let limit = (2.0 * w).round() as usize;
    let tail: f64 = counts[..=limit.min(max)].iter().sum();
    let all = 2f64.powi(ranks.len() as i32);
    (2.0 * tail / all).min(1.0)
}

fn normal_two_sided(abs_sorted: &[f64], ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < abs_sorted.len() {
        let mut j = i;
        while j + 1 < abs_sorted.len() && abs_sorted[j + 1] == abs_sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AtlasVariant {
    Group,
    DataDrivenSmall,
    DataDrivenLarge,
}

impl AtlasVariant {
    pub fn tag(self) -> &'static str {
        match self {
            AtlasVariant::Group => "group",
            AtlasVariant::DataDrivenSmall => "data-driven-small",
            AtlasVariant::DataDrivenLarge => "data-driven-large",
        }
    }
}

/// Per-subject evaluation of one atlas variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subject: String,
    pub variant: String,
    pub region_js: Vec<f64>,
    pub region_dice: Vec<f64>,
}

impl EvalReport {
    pub fn mean_js(&self) -> f64 {
        mean(&self.region_js)
    }

    pub fn mean_dice(&self) -> f64 {
        mean(&self.region_dice)
    }

    /// CSV rows (`subject,variant,region,js,dice`) plus a `mean` summary row.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for (i, (j, d)) in self.region_js.iter().zip(&self.region_dice).enumerate() {
            let _ = writeln!(s, "{},{},{},{:.9},{:.9}", self.subject, self.variant, i + 1, j, d);
        }
        let _ = writeln!(
            s,
            "{},{},mean,{:.9},{:.9}",
            self.subject,
            self.variant,
            self.mean_js(),
            self.mean_dice()
        );
        s
    }
}

pub const CSV_HEADER: &str = "subject,variant,region,js,dice";

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// JS per region and Dice of the naive segmentation per region.
pub fn evaluate_atlas(
    atlas: &ProbabilisticAtlas,
    target: &LabelVolume,
    subject: impl Into<String>,
    variant: impl Into<String>,
) -> Result<EvalReport> {
    atlas.grid().ensure_same(target.grid())?;
    let naive = naive_segmentation(atlas)?;
    let k = atlas.num_labels() - 1;
    let mut region_js = Vec::with_capacity(k);
    let mut region_dice = Vec::with_capacity(k);
    for label in 1..=k as u16 {
        region_js.push(self::region_js(atlas.map(label), target, label)?);
        region_dice.push(dice(&naive, target, label)?);
    }
    Ok(EvalReport {
        subject: subject.into(),
        variant: variant.into(),
        region_js,
        region_dice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::Grid;
    use proptest::prelude::*;

    #[test]
    fn js_reference_values() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let v = js_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        // 0.5*(0.5 log2(2/3) + 0.5 log2(2)) + 0.5*log2(4/3)
        let oracle = 0.5 * (0.5 * (0.5f64 / 0.75).log2() + 0.5 * (0.5f64 / 0.25).log2()) + 0.5 * (1.0f64 / 0.75).log2();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.3113).abs() < 1e-4);
    }

    #[test]
    fn js_rejects_negative_mass() {
        assert!(matches!(
            js_divergence(&[-0.1, 1.1], &[0.5, 0.5]),
            Err(Error::InvalidDistribution(_))
        ));
    }

    #[test]
    fn region_js_reduces_to_pointwise_case() {
        let g = Grid::cube([2, 1, 1]).unwrap();
        let atlas = ProbMap::new(g.clone(), vec![0.5, 0.5]).unwrap();
        let target = LabelVolume::new(g.clone(), vec![1, 0], 2).unwrap();
        assert!((region_js(&atlas, &target, 1).unwrap() - 0.3113).abs() < 1e-4);
        let exact = ProbMap::new(g.clone(), vec![0.3, 0.0]).unwrap();
        assert_eq!(region_js(&exact, &target, 1).unwrap(), 0.0);
        let disjoint = ProbMap::new(g.clone(), vec![0.0, 0.9]).unwrap();
        assert_eq!(region_js(&disjoint, &target, 1).unwrap(), 1.0);
        let empty = LabelVolume::new(g, vec![0, 0], 2).unwrap();
        assert_eq!(region_js(&atlas, &empty, 1).unwrap(), 1.0);
    }

    #[test]
    fn naive_segmentation_ties_and_background() {
        let g = Grid::cube([2, 1, 1]).unwrap();
        let mut maps = vec![ProbMap::filled(g.clone(), 0.0).unwrap(); 8];
        maps[0] = ProbMap::new(g.clone(), vec![0.6, 0.0]).unwrap();
        maps[3] = ProbMap::new(g.clone(), vec![0.0, 0.5]).unwrap();
        maps[5] = ProbMap::new(g.clone(), vec![0.4, 0.0]).unwrap();
        maps[7] = ProbMap::new(g, vec![0.0, 0.5]).unwrap();
        let atlas = ProbabilisticAtlas::new(maps, true).unwrap();
        assert_eq!(naive_segmentation(&atlas).unwrap().voxels(), &[0, 3]);
    }

    #[test]
    fn dice_cases() {
        let g = Grid::cube([8, 1, 1]).unwrap();
        let a = LabelVolume::new(g.clone(), vec![1, 1, 1, 1, 0, 0, 0, 0], 2).unwrap();
        let b = LabelVolume::new(g.clone(), vec![0, 0, 1, 1, 1, 1, 0, 0], 2).unwrap();
        let c = LabelVolume::new(g.clone(), vec![0, 0, 0, 0, 1, 1, 1, 1], 2).unwrap();
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.0);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        let z = LabelVolume::filled(g, 0, 2).unwrap();
        assert_eq!(dice(&z, &z, 1).unwrap(), 1.0);
    }

    #[test]
    fn wilcoxon_all_positive_six() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [0.0; 6];
        let r = wilcoxon_signed_rank(&x, &y, 0.05).unwrap();
        assert_eq!(r.n, 6);
        assert_eq!(r.w, 0.0);
        assert_eq!(r.p_value, 0.03125);
        assert!(r.significant && r.exact);
        assert!(r.to_line().starts_with("n=6,W=0,p="));
    }

    #[test]
    fn wilcoxon_needs_nonzero_pairs() {
        let x = [1.0; 10];
        assert!(matches!(
            wilcoxon_signed_rank(&x, &x, 0.01),
            Err(Error::InsufficientPairs(0))
        ));
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn normal_approximation_reference() {
        // 30 differences 1..=30, all positive: W = 0, z = (232.5 - 0.5)/sqrt(2363.75)
        let x: Vec<f64> = (1..=30).map(|v| v as f64).collect();
        let y = vec![0.0; 30];
        let r = wilcoxon_signed_rank(&x, &y, 0.01).unwrap();
        assert!(!r.exact);
        let z: f64 = 232.0 / 2363.75f64.sqrt();
        let p = erfc(z / std::f64::consts::SQRT_2);
        assert!((r.p_value - p).abs() < 1e-15);
        assert!(r.p_value < 1e-5);
    }

    proptest! {
        #[test]
        fn js_symmetric_and_bounded(
            p in proptest::collection::vec(0.0f64..1.0, 2..12),
            q in proptest::collection::vec(0.0f64..1.0, 12),
        ) {
            let q = &q[..p.len()];
            prop_assume!(p.iter().sum::<f64>() > 1e-6 && q.iter().sum::<f64>() > 1e-6);
            let a = js_divergence(&p, q).unwrap();
            let b = js_divergence(q, &p).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(js_divergence(&p, &p).unwrap().abs() < 1e-9);
            let scaled: Vec<f64> = p.iter().map(|v| v * 3.7).collect();
            prop_assert!((js_divergence(&scaled, q).unwrap() - a).abs() < 1e-12);
        }

        #[test]
        fn dice_symmetric(
            a in proptest::collection::vec(0u16..3, 16),
            b in proptest::collection::vec(0u16..3, 16),
            k in 0u16..3,
        ) {
            let g = Grid::cube([16, 1, 1]).unwrap();
            let a = LabelVolume::new(g.clone(), a, 3).unwrap();
            let b = LabelVolume::new(g, b, 3).unwrap();
            let d = dice(&a, &b, k).unwrap();
            prop_assert_eq!(d, dice(&b, &a, k).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
