use probatlas::apclust::{build_similarity_matrix, Preference};
use probatlas::fusion::majority_vote;
use probatlas::phantom::{generate_population, split_population, PhantomConfig};
use probatlas::pipeline::region_vertex_sets;
use probatlas::shape::{extract_mean_vertices, CorrespondenceConfig};

fn cfg(n_train: usize, seed: u64) -> PhantomConfig {
    PhantomConfig {
        n_train,
        n_test: 0,
        seed,
        ..Default::default()
    }
}

#[test]
fn same_seed_same_population() {
    let c = PhantomConfig {
        n_train: 5,
        n_test: 2,
        seed: 9,
        ..Default::default()
    };
    let a = generate_population(&c).unwrap();
    let b = generate_population(&c).unwrap();
    assert_eq!(a, b);
    let other = generate_population(&PhantomConfig { seed: 10, ..c }).unwrap();
    assert_ne!(a.subjects[0].seg, other.subjects[0].seg);
}

#[test]
fn similarities_have_phenotype_block_structure() {
    let pop = generate_population(&cfg(30, 2)).unwrap();
    let segs: Vec<_> = pop.subjects.iter().map(|s| s.seg.clone()).collect();
    let mean = majority_vote(&segs).unwrap();
    let cc = CorrespondenceConfig::default();
    for k in 1..=pop.config.num_regions as u16 {
        let mv = extract_mean_vertices(&mean, k, &cc).unwrap();
        let sets = region_vertex_sets(&mv, &segs).unwrap();
        let sim = build_similarity_matrix(&sets, Preference::Median).unwrap();
        let ph: Vec<usize> = pop.subjects.iter().map(|s| s.phenotypes[k as usize - 1]).collect();
        let n = segs.len();
        let mut worst_within = f64::INFINITY;
        let mut best_across = f64::NEG_INFINITY;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                if ph[i] == ph[j] {
                    worst_within = worst_within.min(sim.get(i, j));
                } else {
                    best_across = best_across.max(sim.get(i, j));
                }
            }
        }
        assert!(
            worst_within > best_across,
            "region {k}: {worst_within} vs {best_across}"
        );
    }
}

#[test]
fn phenotype_frequencies_fit_a_uniform_prior() {
    let pop = generate_population(&cfg(600, 7)).unwrap();
    let p = pop.config.phenotypes_per_region;
    let n = pop.subjects.len() as f64;
    // binomial 4-sigma band around n/p
    let sd = (n * (1.0 / p as f64) * (1.0 - 1.0 / p as f64)).sqrt();
    for r in 0..pop.config.num_regions {
        for q in 0..p {
            let c = pop.subjects.iter().filter(|s| s.phenotypes[r] == q).count() as f64;
            assert!(
                (c - n / p as f64).abs() < 4.0 * sd,
                "region {} phenotype {q}: {c}",
                r + 1
            );
        }
    }
}

#[test]
fn half_split_of_sixty_is_balanced() {
    let pop = generate_population(&cfg(60, 3)).unwrap();
    let s = split_population(&pop, 0.5, 11).unwrap();
    assert_eq!((s.train.len(), s.test.len()), (30, 30));
    assert!(s.stratified);
    let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..60).collect::<Vec<_>>());
    for r in 0..pop.config.num_regions {
        for q in 0..pop.config.phenotypes_per_region {
            let total = pop.subjects.iter().filter(|x| x.phenotypes[r] == q).count() as f64;
            let test = s.test.iter().filter(|&&i| pop.subjects[i].phenotypes[r] == q).count() as f64;
            assert!(
                (test - total / 2.0).abs() <= 1.0,
                "region {} phenotype {q}: {test} of {total}",
                r + 1
            );
        }
    }
    assert_eq!(split_population(&pop, 0.5, 11).unwrap(), s);
}

#[test]
fn near_one_fraction_keeps_a_test_subject() {
    let pop = generate_population(&cfg(20, 1)).unwrap();
    let s = split_population(&pop, 0.99, 0).unwrap();
    assert_eq!(s.test.len(), 1);
    assert_eq!(s.train.len(), 19);
    assert!(split_population(&pop, 1.0, 0).is_err());
}

#[test]
fn images_sit_on_their_label_levels() {
    let c = PhantomConfig {
        n_train: 2,
        n_test: 0,
        intensity_noise: 0.0,
        ..Default::default()
    };
    let pop = generate_population(&c).unwrap();
    for s in &pop.subjects {
        for (&l, &v) in s.seg.voxels().iter().zip(s.img.voxels()) {
            assert_eq!(v as f64, c.level(l));
        }
    }
}
