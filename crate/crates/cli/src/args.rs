use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use probatlas::apclust::Preference;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "probatlas",
    version,
    about = "Train and apply dictionaries of regional probabilistic atlases"
)]
pub struct Cli {
    /// Worker threads; 0 lets the runtime pick one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic population with planted shape phenotypes.
    Phantom(PhantomArgs),
    /// Majority-vote fusion of label volumes.
    Fuse(FuseArgs),
    /// Train a per-region atlas dictionary from a population directory.
    Build(BuildArgs),
    /// Instantiate a personalised atlas for one subject.
    Apply(ApplyArgs),
    /// Compare dictionaries on the test subjects of a population.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct PhantomArgs {
    /// Grid size, either `N` for a cube or `XxYxZ`.
    #[arg(long, default_value = "48", value_parser = parse_grid)]
    pub grid: [usize; 3],
    #[arg(long, default_value_t = 8)]
    pub regions: usize,
    #[arg(long, default_value_t = 3)]
    pub phenotypes: usize,
    #[arg(long, default_value_t = 60)]
    pub train: usize,
    #[arg(long, default_value_t = 20)]
    pub test: usize,
    /// Semi-axis jitter in voxels.
    #[arg(long, default_value_t = 0.6)]
    pub shape_noise: f64,
    #[arg(long, default_value_t = 2.0)]
    pub intensity_noise: f64,
    /// Distance between phenotype centres in voxels.
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct FuseArgs {
    /// Label volumes to fuse.
    #[arg(required_unless_present = "pop", conflicts_with = "pop")]
    pub inputs: Vec<PathBuf>,
    /// Fuse the training subjects of a population directory instead.
    #[arg(long)]
    pub pop: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct BuildArgs {
    #[arg(long)]
    pub pop: PathBuf,
    /// Corresponding boundary vertices per region.
    #[arg(long, default_value_t = 128)]
    pub vertices: usize,
    #[arg(long, default_value_t = 0.9)]
    pub damping: f64,
    /// `median` or a number used for every subject.
    #[arg(long, default_value = "median", value_parser = parse_preference)]
    pub preference: Preference,
    #[arg(long, default_value_t = 1000)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 50)]
    pub convergence_window: usize,
    /// One cluster per region (the conventional group atlas).
    #[arg(long)]
    pub single_cluster: bool,
    /// Use only the first N training subjects.
    #[arg(long)]
    pub max_train: Option<usize>,
    /// Seed for vertex sampling ties.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ApplyArgs {
    #[arg(long)]
    pub dict: PathBuf,
    /// Intensity volume, or a subject directory holding `img.vol`.
    #[arg(long)]
    pub subject: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub pop: PathBuf,
    /// Named dictionaries, `name=dir,name=dir`.
    #[arg(long, value_parser = parse_dicts)]
    pub dicts: DictList,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    /// CSV report path; a summary and a run manifest are written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DictList(pub Vec<(String, PathBuf)>);

fn parse_grid(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let nums = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad grid size {p:?}: {e}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    match nums.as_slice() {
        [n] => Ok([*n; 3]),
        [x, y, z] => Ok([*x, *y, *z]),
        _ => Err(format!("grid must be N or XxYxZ, got {s:?}")),
    }
}

fn parse_preference(s: &str) -> Result<Preference, String> {
    if s.eq_ignore_ascii_case("median") {
        return Ok(Preference::Median);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Preference::Value(v)),
        _ => Err(format!("preference must be `median` or a finite number, got {s:?}")),
    }
}

fn parse_dicts(s: &str) -> Result<DictList, String> {
    let mut out = Vec::new();
    for item in s.split(',').filter(|x| !x.is_empty()) {
        let (name, path) = item
            .split_once('=')
            .ok_or_else(|| format!("expected name=dir, got {item:?}"))?;
        if name.is_empty() || path.is_empty() {
            return Err(format!("expected name=dir, got {item:?}"));
        }
        if out.iter().any(|(n, _)| n == name) {
            return Err(format!("dictionary name {name:?} given twice"));
        }
        out.push((name.to_string(), PathBuf::from(path)));
    }
    if out.is_empty() {
        return Err("no dictionaries given".into());
    }
    Ok(DictList(out))
}
