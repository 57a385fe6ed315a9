//! Majority-vote label fusion.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volio::{LabelVolume, ProbMap};

const CHUNK: usize = 4096;

/// Fused segmentation together with the winning vote fraction per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanSegmentation {
    pub volume: LabelVolume,
    pub vote_margin: ProbMap,
}

/// Per-voxel plurality label across `segmentations`.
///
/// Ties go to the lowest label id, which keeps the result independent of
/// input order.
pub fn majority_vote(segmentations: &[LabelVolume]) -> Result<MeanSegmentation> {
    let first = segmentations
        .first()
        .ok_or_else(|| Error::EmptyPopulation("majority vote needs at least one segmentation".into()))?;
    let grid = first.grid().clone();
    let num_labels = first.num_labels();
    for seg in &segmentations[1..] {
        grid.ensure_same(seg.grid())?;
        if seg.num_labels() != num_labels {
            return Err(Error::LabelCountMismatch {
                expected: num_labels,
                found: seg.num_labels(),
            });
        }
    }

    let n = grid.len();
    let voters = segmentations.len() as f64;
    let mut labels = vec![0u16; n];
    let mut margin = vec![0f32; n];
    labels
        .par_chunks_mut(CHUNK)
        .zip(margin.par_chunks_mut(CHUNK))
        .enumerate()
        .for_each(|(chunk, (lab, mar))| {
            let mut counts = vec![0u32; num_labels as usize];
            let base = chunk * CHUNK;
            for (j, (l, m)) in lab.iter_mut().zip(mar.iter_mut()).enumerate() {
                counts.iter_mut().for_each(|c| *c = 0);
                for seg in segmentations {
                    counts[seg.voxels()[base + j] as usize] += 1;
                }
                let (best, &count) = counts
                    .iter()
                    .enumerate()
                    .rev()
                    .max_by_key(|(_, &c)| c)
                    .expect("num_labels >= 1");
                *l = best as u16;
                *m = (count as f64 / voters) as f32;
            }
        });

    Ok(MeanSegmentation {
        volume: LabelVolume::new(grid.clone(), labels, num_labels)?,
        vote_margin: ProbMap::new(grid, margin)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::Grid;
    use proptest::prelude::*;

    fn vol(v: Vec<u16>) -> LabelVolume {
        let g = Grid::cube([v.len(), 1, 1]).unwrap();
        LabelVolume::new(g, v, 4).unwrap()
    }

    #[test]
    fn single_input_is_identity() {
        let s = vol(vec![0, 1, 2, 3]);
        let m = majority_vote(std::slice::from_ref(&s)).unwrap();
        assert_eq!(m.volume, s);
        assert!(m.vote_margin.voxels().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn two_thirds_majority() {
        let m = majority_vote(&[vol(vec![1]), vol(vec![1]), vol(vec![2])]).unwrap();
        assert_eq!(m.volume.voxels(), &[1]);
        assert_eq!(m.vote_margin.voxels()[0], (2.0f64 / 3.0) as f32);
    }

    #[test]
    fn tie_goes_to_lowest_label() {
        let m = majority_vote(&[vol(vec![2, 3]), vol(vec![1, 0])]).unwrap();
        assert_eq!(m.volume.voxels(), &[1, 0]);
        assert_eq!(m.vote_margin.voxels(), &[0.5, 0.5]);
    }

    #[test]
    fn errors() {
        assert!(matches!(majority_vote(&[]), Err(Error::EmptyPopulation(_))));
        let a = vol(vec![0, 1]);
        let b = vol(vec![0, 1, 2]);
        assert!(matches!(majority_vote(&[a, b]), Err(Error::GridMismatch { .. })));
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_subset(
            raw in proptest::collection::vec(proptest::collection::vec(0u16..4, 12), 1..7),
            rot in 0usize..7,
        ) {
            let vols: Vec<LabelVolume> = raw.into_iter().map(vol).collect();
            let a = majority_vote(&vols).unwrap();
            let mut shuffled = vols.clone();
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
            shuffled.reverse();
            let b = majority_vote(&shuffled).unwrap();
            prop_assert_eq!(&a, &b);
            for i in 0..12 {
                let l = a.volume.voxels()[i];
                prop_assert!(vols.iter().any(|v| v.voxels()[i] == l));
                let m = a.vote_margin.voxels()[i];
                prop_assert!(m > 0.0 && m <= 1.0);
                if vols.iter().all(|v| v.voxels()[i] == vols[0].voxels()[i]) {
                    prop_assert_eq!(l, vols[0].voxels()[i]);
                    prop_assert_eq!(m, 1.0);
                }
            }
        }
    }
}
