use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::info;
use probatlas::apclust::{partition_purity, ApConfig};
use probatlas::applier::personalize;
use probatlas::dict::{load_dictionary, save_dictionary, AtlasDictionary};
use probatlas::fusion::majority_vote;
use probatlas::metrics::{evaluate_atlas, wilcoxon_signed_rank, EvalReport, CSV_HEADER};
use probatlas::phantom::{generate_population, split_population, PhantomConfig, Split};
use probatlas::pipeline::{train_dictionary, BuildConfig, RegionReport};
use probatlas::shape::CorrespondenceConfig;
use probatlas::volio::{encode_native, Volume};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{ApplyArgs, BuildArgs, Cli, Command, EvalArgs, FuseArgs, PhantomArgs};
use crate::manifest::{Recorder, RUN_MANIFEST};
use crate::population::{
    load_truth, read_img, read_seg, read_subjects, subject_dir, test_indices, training_indices, SubjectTruth, Truth,
    TRUTH,
};

/// Why a command stopped. Usage problems exit with 2, everything else with 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(msg.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| anyhow!("setting up {} worker threads: {e}", cli.threads))?;
    }
    match cli.command {
        Command::Phantom(a) => phantom(&a),
        Command::Fuse(a) => fuse(&a),
        Command::Build(a) => build(&a),
        Command::Apply(a) => apply(&a),
        Command::Eval(a) => eval(&a),
    }
}

fn vol_bytes(v: Volume) -> Vec<u8> {
    encode_native(&v)
}

fn json_bytes(v: &impl Serialize) -> anyhow::Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn phantom(a: &PhantomArgs) -> Result<()> {
    let cfg = PhantomConfig {
        dims: a.grid,
        num_regions: a.regions,
        phenotypes_per_region: a.phenotypes,
        n_train: a.train,
        n_test: a.test,
        shape_noise: a.shape_noise,
        intensity_noise: a.intensity_noise,
        phenotype_separation: a.separation,
        seed: a.seed,
    };
    if a.train == 0 {
        return Err(usage("--train must be at least 1"));
    }
    cfg.validate().map_err(usage)?;
    let mut rec = Recorder::start("phantom", a, Some(a.seed))?;
    // Layout problems (regions that do not fit the grid) are flag problems too.
    let pop = generate_population(&cfg).map_err(usage)?;
    let split = if a.test == 0 {
        Split {
            train: (0..a.train).collect(),
            test: Vec::new(),
            stratified: false,
        }
    } else {
        let frac = a.train as f64 / cfg.n_subjects() as f64;
        split_population(&pop, frac, a.seed).map_err(|e| anyhow!(e))?
    };
    if !split.stratified && a.test > 0 {
        log::warn!("a phenotype has fewer than 2 members; the split is not stratified");
    }

    create_dir(&a.out)?;
    let mut subjects = Vec::with_capacity(pop.subjects.len());
    for (i, s) in pop.subjects.iter().enumerate() {
        let dir = format!("subject_{i}");
        rec.write(
            &a.out,
            &format!("{dir}/seg.vol"),
            &vol_bytes(Volume::Label(s.seg.clone())),
        )?;
        rec.write(
            &a.out,
            &format!("{dir}/img.vol"),
            &vol_bytes(Volume::Intensity(s.img.clone())),
        )?;
        subjects.push(SubjectTruth {
            index: i,
            split: if split.test.contains(&i) { "test" } else { "train" }.into(),
            phenotypes: s.phenotypes.clone(),
        });
    }
    let truth = Truth {
        config: cfg,
        stratified: split.stratified,
        train: split.train,
        test: split.test,
        subjects,
    };
    rec.write(&a.out, TRUTH, &json_bytes(&truth)?)?;
    println!(
        "wrote {} subjects ({} train, {} test) to {}",
        truth.subjects.len(),
        truth.train.len(),
        truth.test.len(),
        a.out.display()
    );
    rec.finish(&a.out.join(RUN_MANIFEST))?;
    Ok(())
}

pub fn fuse(a: &FuseArgs) -> Result<()> {
    let mut rec = Recorder::start("fuse", a, None)?;
    let inputs: Vec<PathBuf> = match &a.pop {
        Some(pop) => training_indices(pop)?
            .into_iter()
            .map(|i| subject_dir(pop, i).join("seg.vol"))
            .collect(),
        None => a.inputs.clone(),
    };
    let segs = inputs
        .iter()
        .map(|p| read_seg(p, &mut rec))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let fused = majority_vote(&segs).map_err(|e| anyhow!(e))?;
    create_dir(&a.out)?;
    rec.write(&a.out, "mean_seg.vol", &vol_bytes(Volume::Label(fused.volume)))?;
    rec.write(&a.out, "vote_margin.vol", &vol_bytes(Volume::Prob(fused.vote_margin)))?;
    println!("fused {} segmentations into {}", segs.len(), a.out.display());
    rec.finish(&a.out.join(RUN_MANIFEST))?;
    Ok(())
}

/// Per-region cluster report; purity is filled in when the planted phenotypes are known.
#[derive(Debug, Serialize)]
pub struct ClusterRow {
    #[serde(flatten)]
    pub report: RegionReport,
    pub sizes: Vec<usize>,
    pub purity: Option<f64>,
}

fn cluster_rows(
    dict: &AtlasDictionary,
    reports: Vec<RegionReport>,
    truth: Option<(&Truth, &[usize])>,
) -> Vec<ClusterRow> {
    reports
        .into_iter()
        .zip(&dict.regions)
        .map(|(report, rd)| {
            let n: usize = rd.entries.iter().map(|e| e.members.len()).sum();
            let mut assignment = vec![0; n];
            for e in &rd.entries {
                for &m in &e.members {
                    assignment[m] = e.cluster;
                }
            }
            let purity = truth.map(|(t, ids)| {
                let r = rd.region as usize - 1;
                let planted: Vec<usize> = ids.iter().map(|&i| t.subjects[i].phenotypes[r]).collect();
                partition_purity(&assignment, &planted)
            });
            ClusterRow {
                sizes: rd.entries.iter().map(|e| e.members.len()).collect(),
                report,
                purity,
            }
        })
        .collect()
}

fn cluster_csv(rows: &[ClusterRow]) -> String {
    let mut s = String::from("region,clusters,sizes,converged,iterations,preference,retries,purity\n");
    for r in rows {
        let sizes: Vec<String> = r.sizes.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.report.region,
            r.report.clusters,
            sizes.join(" "),
            r.report.converged,
            r.report.iterations,
            // single-cluster builds have no preference
            if r.report.preference.is_finite() {
                format!("{:.6}", r.report.preference)
            } else {
                String::new()
            },
            r.report.retries,
            r.purity.map(|p| format!("{p:.4}")).unwrap_or_default()
        );
    }
    s
}

pub fn build(a: &BuildArgs) -> Result<()> {
    if a.vertices == 0 {
        return Err(usage("--vertices must be at least 1"));
    }
    if a.max_train == Some(0) {
        return Err(usage("--max-train must be at least 1"));
    }
    let cfg = BuildConfig {
        correspondence: CorrespondenceConfig {
            vertices_per_region: a.vertices,
            seed: a.seed,
            ..Default::default()
        },
        ap: ApConfig {
            damping: a.damping,
            max_iterations: a.max_iterations,
            convergence_window: a.convergence_window,
            preference: a.preference,
        },
        single_cluster: a.single_cluster,
        training_set: String::new(),
    };
    cfg.ap.validate().map_err(usage)?;

    let mut rec = Recorder::start("build", a, Some(a.seed))?;
    let mut ids = training_indices(&a.pop)?;
    if let Some(m) = a.max_train {
        ids.truncate(m);
    }
    let (segs, imgs) = read_subjects(&a.pop, &ids, &mut rec)?;
    let cfg = BuildConfig {
        training_set: format!("{} ({} subjects)", a.pop.display(), ids.len()),
        ..cfg
    };
    info!("training on {} subjects", ids.len());
    let (dict, reports) = train_dictionary(&segs, &imgs, &cfg).map_err(|e| anyhow!(e))?;
    save_dictionary(&dict, &a.out).with_context(|| format!("saving dictionary to {}", a.out.display()))?;

    let truth = load_truth(&a.pop)?;
    let rows = cluster_rows(&dict, reports, truth.as_ref().map(|t| (t, ids.as_slice())));
    let csv = cluster_csv(&rows);
    rec.write(&a.out, "clusters.csv", csv.as_bytes())?;
    rec.write(&a.out, "clusters.json", &json_bytes(&rows)?)?;
    rec.outputs_under(&a.out)?;
    print!("{csv}");
    rec.finish(&a.out.join(RUN_MANIFEST))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Selection {
    c_max: usize,
    score: f64,
    scores: Vec<f64>,
}

pub fn apply(a: &ApplyArgs) -> Result<()> {
    let mut rec = Recorder::start("apply", a, None)?;
    let dict = load_dictionary(&a.dict).with_context(|| format!("loading dictionary {}", a.dict.display()))?;
    let img_path = if a.subject.is_dir() {
        a.subject.join("img.vol")
    } else {
        a.subject.clone()
    };
    let img = read_img(&img_path, &mut rec)?;
    let name = a
        .subject
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "subject".into());
    let pa = personalize(&img, &dict, name)
        .with_context(|| format!("personalising {} with {}", img_path.display(), a.dict.display()))?;

    create_dir(&a.out)?;
    for (k, map) in pa.atlas.maps().iter().enumerate() {
        rec.write(&a.out, &format!("label_{k}.vol"), &vol_bytes(Volume::Prob(map.clone())))?;
    }
    let selections: BTreeMap<u16, Selection> = pa
        .selections
        .iter()
        .map(|s| {
            (
                s.region,
                Selection {
                    c_max: s.chosen_cluster,
                    score: s.score,
                    scores: s.scores.clone(),
                },
            )
        })
        .collect();
    rec.write(&a.out, "selections.json", &json_bytes(&selections)?)?;
    for s in &pa.selections {
        println!(
            "region {} -> cluster {} (r = {:.4})",
            s.region, s.chosen_cluster, s.score
        );
    }
    rec.finish(&a.out.join(RUN_MANIFEST))?;
    Ok(())
}

/// `<dir>/<stem><suffix>` next to the report.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(usage(format!("--alpha must lie in (0, 1), got {}", a.alpha)));
    }
    let variants: Vec<(String, PathBuf)> = a.dicts.0.clone();
    let mut rec = Recorder::start("eval", a, None)?;
    let dicts = variants
        .iter()
        .map(|(name, dir)| {
            load_dictionary(dir).with_context(|| format!("loading dictionary {name} from {}", dir.display()))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let test = test_indices(&a.pop)?;
    if test.is_empty() {
        return Err(Failure::Runtime(anyhow!("{} has no test subjects", a.pop.display())));
    }
    let (segs, imgs) = read_subjects(&a.pop, &test, &mut rec)?;

    // reports[v][s]
    let reports = dicts
        .iter()
        .zip(&variants)
        .map(|(dict, (name, _))| {
            test.par_iter()
                .zip(segs.par_iter().zip(imgs.par_iter()))
                .map(|(&i, (seg, img))| {
                    let subject = format!("subject_{i}");
                    let pa = personalize(img, dict, subject.clone())
                        .with_context(|| format!("personalising {subject} with {name}"))?;
                    evaluate_atlas(&pa.atlas, seg, subject.clone(), name.clone())
                        .with_context(|| format!("evaluating {subject} with {name}"))
                })
                .collect::<anyhow::Result<Vec<EvalReport>>>()
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let mut csv = format!("{CSV_HEADER}\n");
    for s in 0..test.len() {
        for v in &reports {
            csv.push_str(&v[s].csv_rows());
        }
    }

    let mut summary = String::new();
    for ((name, _), v) in variants.iter().zip(&reports) {
        let js: Vec<f64> = v.iter().map(|r| r.mean_js()).collect();
        let dice: Vec<f64> = v.iter().map(|r| r.mean_dice()).collect();
        let _ = writeln!(
            summary,
            "variant={name} subjects={} mean_js={:.6} mean_dice={:.6}",
            v.len(),
            mean(&js),
            mean(&dice)
        );
    }
    for i in 0..variants.len() {
        for j in i + 1..variants.len() {
            for (metric, f) in [
                ("js", EvalReport::mean_js as fn(&EvalReport) -> f64),
                ("dice", EvalReport::mean_dice),
            ] {
                let x: Vec<f64> = reports[i].iter().map(f).collect();
                let y: Vec<f64> = reports[j].iter().map(f).collect();
                let head = format!("wilcoxon metric={metric} a={} b={}", variants[i].0, variants[j].0);
                match wilcoxon_signed_rank(&x, &y, a.alpha) {
                    Ok(w) => {
                        let _ = writeln!(summary, "{head} {}", w.to_line());
                    }
                    Err(probatlas::Error::InsufficientPairs(n)) => {
                        let _ = writeln!(
                            summary,
                            "{head} skipped: {n} nonzero paired differences, need at least 6"
                        );
                    }
                    Err(e) => return Err(Failure::Runtime(anyhow!(e))),
                }
            }
        }
    }

    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let root = a.out.parent().unwrap_or(Path::new(""));
    let file = |p: &Path| {
        p.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let summary_path = sibling(&a.out, ".summary.txt");
    rec.write(root, &file(&a.out), csv.as_bytes())?;
    rec.write(root, &file(&summary_path), summary.as_bytes())?;
    print!("{summary}");
    rec.finish(&sibling(&a.out, ".run.json"))?;
    Ok(())
}
