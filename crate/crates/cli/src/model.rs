//! `cost`, `search`, `train`, `eval` and `match`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use irisnas::cost::{Budget, CostModel};
use irisnas::data::{read_manifest, Dataset, LabelMap, ManifestEntry};
use irisnas::engine::checkpoint;
use irisnas::eval::{eer, frr_at_far, hamming_scores, network_scores, roc, ScoreSet};
use irisnas::iris::{POLAR_COLS, POLAR_ROWS};
use irisnas::iriscode::{match_templates, IrisTemplate};
use irisnas::search::{
    run_search, split_dataset, train_final, LossKind, SearchConfig, SearchTraceRow, Split,
    SplitScheme, SplitSpec, TrainConfig, TrainTraceRow,
};
use irisnas::supernet::{DiscreteArchitecture, HeadKind, NetSpec, OperationSet, Supernet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_polar, resolve};

pub struct NetShape {
    pub nodes: usize,
    pub channels: usize,
    pub ops: OperationSet,
    pub downsample: usize,
}

impl NetShape {
    pub fn input_hw(&self) -> Result<(usize, usize)> {
        input_hw(self.downsample)
    }
}

fn input_hw(factor: usize) -> Result<(usize, usize)> {
    if factor == 0 || POLAR_ROWS % factor != 0 || POLAR_COLS % factor != 0 {
        bail!("--downsample {factor} must divide {POLAR_ROWS} and {POLAR_COLS}");
    }
    Ok((POLAR_ROWS / factor, POLAR_COLS / factor))
}

/// Everything `eval` needs to rebuild a trained network's test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelInfo {
    pub arch: DiscreteArchitecture,
    pub out_dim: usize,
    pub downsample: usize,
    pub split: SplitScheme,
    pub split_seed: u64,
}

pub fn cost(
    out: &mut dyn Write,
    arch: Option<&Path>,
    shape: &NetShape,
    out_dim: usize,
    seed: u64,
) -> Result<()> {
    let (h, w) = shape.input_hw()?;
    let cm = CostModel::new(h, w, out_dim);
    match arch {
        Some(p) => {
            let a = read_arch(p)?;
            cm.write_tsv(out, a.channels, &cm.architecture_rows(&a))?;
        }
        None => {
            let spec = NetSpec {
                nodes: shape.nodes,
                channels: shape.channels,
                head: HeadKind::Softmax,
                out_dim,
                ops: shape.ops.clone(),
            };
            let net = Supernet::<f32>::new(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
            cm.write_tsv(out, shape.channels, &cm.supernet_rows(&net))?;
        }
    }
    Ok(())
}

fn read_arch(p: &Path) -> Result<DiscreteArchitecture> {
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    DiscreteArchitecture::from_json(&text).with_context(|| format!("parsing {}", p.display()))
}

fn write_file(p: &Path, text: &str) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn csv_text<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Builds a dataset, labelling subjects through `labels`.
fn dataset(
    manifest: &Path,
    entries: &[ManifestEntry],
    labels: &LabelMap,
    factor: usize,
) -> Result<Dataset> {
    let (h, w) = input_hw(factor)?;
    let images = load_polar(manifest, entries, factor)?;
    let y = entries
        .iter()
        .map(|e| {
            labels.label(&e.subject_id).ok_or_else(|| {
                anyhow!(
                    "subject {} does not appear in the training split; \
                     classifier heads need subjects seen in training (use --split sample or --loss triplet)",
                    e.subject_id
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(h, w, images, y, labels.len())?)
}

fn load_split(manifest: &Path, scheme: SplitScheme, seed: u64) -> Result<Split> {
    let entries = read_manifest(manifest)?;
    Ok(split_dataset(&entries, &SplitSpec::new(scheme, seed))?)
}

/// Label map for training: the training subjects for a classifier, every
/// subject for an embedding.
fn label_map(split: &Split, loss: LossKind) -> LabelMap {
    match loss {
        LossKind::CrossEntropy => LabelMap::from_entries(&split.train),
        LossKind::Triplet => {
            let all: Vec<ManifestEntry> =
                split.train.iter().chain(&split.val).chain(&split.test).cloned().collect();
            LabelMap::from_entries(&all)
        }
    }
}

pub struct SearchJob {
    pub manifest: PathBuf,
    pub split: SplitScheme,
    pub shape: NetShape,
    pub embedding_dim: usize,
    pub config: SearchConfig,
    pub out: PathBuf,
    pub trace: Option<PathBuf>,
    pub state: Option<PathBuf>,
}

pub fn search(out: &mut dyn Write, job: &SearchJob) -> Result<()> {
    let cfg = &job.config;
    let split = load_split(&job.manifest, job.split, cfg.seed)?;
    let labels = label_map(&split, cfg.loss);
    let out_dim = match cfg.loss {
        LossKind::CrossEntropy => labels.len(),
        LossKind::Triplet => job.embedding_dim,
    };
    let (h, w) = job.shape.input_hw()?;
    let cm = CostModel::new(h, w, out_dim);
    // Fail on an infeasible budget before reading any images.
    irisnas::search::check_fixed_cost(job.shape.channels, &cm, &cfg.budget)?;
    let f = job.shape.downsample;
    let train = dataset(&job.manifest, &split.train, &labels, f)?;
    let val = dataset(&job.manifest, &split.val, &labels, f)?;
    let spec = NetSpec {
        nodes: job.shape.nodes,
        channels: job.shape.channels,
        head: cfg.loss.head(),
        out_dim,
        ops: job.shape.ops.clone(),
    };
    let outcome = run_search(cfg, &spec, &train, &val, &cm)?;
    write_file(&job.out, &outcome.arch.to_json())?;
    let trace = csv_text::<SearchTraceRow>(&outcome.trace)?;
    if let Some(p) = &job.trace {
        write_file(p, &trace)?;
    }
    if let Some(p) = &job.state {
        write_file(p, &outcome.supernet.state(&cm)?.to_json())?;
    }
    out.write_all(trace.as_bytes())?;
    eprintln!(
        "architecture: {} FLOPs, {} params, {} repaired edge(s); budget {}",
        outcome.cost.flops, outcome.cost.params, outcome.repairs, cfg.budget
    );
    Ok(())
}

pub struct TrainJob {
    pub manifest: PathBuf,
    pub arch: PathBuf,
    pub split: SplitScheme,
    pub downsample: usize,
    pub config: TrainConfig,
    pub out: PathBuf,
}

pub fn train(out: &mut dyn Write, job: &TrainJob) -> Result<()> {
    let arch = read_arch(&job.arch)?;
    let mut cfg = job.config.clone();
    cfg.loss = match arch.head {
        HeadKind::Softmax => LossKind::CrossEntropy,
        HeadKind::Embedding => LossKind::Triplet,
    };
    let split = load_split(&job.manifest, job.split, cfg.seed)?;
    let labels = label_map(&split, cfg.loss);
    let ds = dataset(&job.manifest, &split.train, &labels, job.downsample)?;
    let outcome = train_final(&arch, &ds, &cfg)?;
    let dir = &job.out;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    checkpoint::save(&dir.join("weights.irnw"), &outcome.net.to_named_tensors())?;
    write_file(&dir.join("labels.json"), &serde_json::to_string_pretty(&labels)?)?;
    let info = ModelInfo {
        arch,
        out_dim: outcome.net.out_dim(),
        downsample: job.downsample,
        split: job.split,
        split_seed: cfg.seed,
    };
    write_file(&dir.join("model.json"), &serde_json::to_string_pretty(&info)?)?;
    let trace = csv_text::<TrainTraceRow>(&outcome.trace)?;
    write_file(&dir.join("trace.csv"), &trace)?;
    out.write_all(trace.as_bytes())?;
    Ok(())
}

pub enum ScoreSource {
    File(PathBuf),
    Model { dir: PathBuf, manifest: PathBuf },
    Templates { manifest: PathBuf, max_shift: usize },
}

pub struct EvalJob {
    pub source: ScoreSource,
    pub far_target: f64,
    pub roc_points: Option<usize>,
    pub roc_out: Option<PathBuf>,
    pub scores_out: Option<PathBuf>,
    pub seed: u64,
}

fn model_scores(dir: &Path, manifest: &Path, seed: u64) -> Result<ScoreSet> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
    };
    let info: ModelInfo = serde_json::from_str(&read("model.json")?).context("parsing model.json")?;
    let labels: LabelMap = serde_json::from_str(&read("labels.json")?).context("parsing labels.json")?;
    let mut net = Supernet::<f32>::from_architecture(
        &info.arch,
        info.out_dim,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    net.load_named_tensors(&checkpoint::load(&dir.join("weights.irnw"))?)?;
    let split = load_split(manifest, info.split, info.split_seed)?;
    let test_labels = match info.arch.head {
        HeadKind::Softmax => labels,
        HeadKind::Embedding => LabelMap::from_entries(&split.test),
    };
    let ds = dataset(manifest, &split.test, &test_labels, info.downsample)?;
    Ok(network_scores(&net, &ds, seed)?)
}

fn template_scores(manifest: &Path, max_shift: usize, seed: u64) -> Result<ScoreSet> {
    let entries = read_manifest(manifest)?;
    let labels = LabelMap::from_entries(&entries);
    let mut templates = Vec::with_capacity(entries.len());
    let mut y = Vec::with_capacity(entries.len());
    for e in &entries {
        templates.push(IrisTemplate::load(&resolve(manifest, &e.path))?);
        y.push(labels.label(&e.subject_id).expect("map built from these entries"));
    }
    Ok(hamming_scores(&templates, &y, max_shift, seed)?)
}

pub fn eval(out: &mut dyn Write, job: &EvalJob) -> Result<()> {
    let scores = match &job.source {
        ScoreSource::File(p) => ScoreSet::read_csv(p)?,
        ScoreSource::Model { dir, manifest } => model_scores(dir, manifest, job.seed)?,
        ScoreSource::Templates { manifest, max_shift } => {
            template_scores(manifest, *max_shift, job.seed)?
        }
    };
    if let Some(p) = &job.scores_out {
        scores.write_csv(p)?;
    }
    let curve = roc(&scores, job.roc_points)?;
    if let Some(p) = &job.roc_out {
        curve.write_csv(p)?;
    }
    let e = eer(&curve);
    if e.degenerate {
        eprintln!("warning: every score is equal; EER reported as 0.5");
    }
    writeln!(out, "eer,{:?}", e.value)?;
    writeln!(out, "frr_at_far,{:?}", frr_at_far(&curve, job.far_target))?;
    writeln!(out, "far_target,{:?}", job.far_target)?;
    writeln!(out, "genuine,{}", scores.genuine.len())?;
    writeln!(out, "impostor,{}", scores.impostor.len())?;
    Ok(())
}

pub fn match_files(out: &mut dyn Write, a: &Path, b: &Path, max_shift: usize) -> Result<()> {
    let (ta, tb) = (IrisTemplate::load(a)?, IrisTemplate::load(b)?);
    let m = match_templates(&ta, &tb, max_shift)?;
    writeln!(out, "hd,best_shift,valid_bits")?;
    writeln!(out, "{:?},{},{}", m.hd, m.best_shift, m.valid_bits)?;
    Ok(())
}

pub fn budget(flops: Option<f64>, params: Option<f64>) -> Result<Budget> {
    Ok(Budget::new(
        flops.unwrap_or(f64::INFINITY),
        params.unwrap_or(f64::INFINITY),
    )?)
}
