//! End-to-end orchestration and the individually runnable stages.
//!
//! Stage commands exchange artifacts through the output directory:
//! `unify` writes `unified.jsonl`, `embed` reads it and writes
//! `embeddings.jsonl`, `cluster` reads that and writes `cluster_model.json`,
//! and `select` reads the unified pairs plus the cluster model.
//! [`run_pipeline`] runs everything in memory and writes all artifacts.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{kmeans_fit, ClusterModel};
use crate::config::{EmbeddingConfig, RunConfig, SourceSpec};
use crate::embed::{
    load_embeddings, prompt_key, write_embeddings, EmbeddingMap, EmbeddingProvider, HashedEmbedder,
    PrecomputedEmbeddings,
};
use crate::error::{Error, Result};
use crate::evalharness::{evaluate, read_dumps, read_items, MetricReport};
use crate::ingest::{
    parse_binary_dataset, parse_scored_dataset, validate_sources, LoadedSource, SourceRecords,
    Supervision,
};
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::manifest::{canonical_manifest, Stage};
use crate::select::{select_pairs, SelectionReport};
use crate::unify::{convert_source, union, DiscardReport, SourceCount, UnifiedPair};

pub const INGEST_REPORT_FILE: &str = "ingest_report.json";
pub const UNIFIED_FILE: &str = "unified.jsonl";
pub const DISCARD_REPORT_FILE: &str = "discard_report.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const CLUSTER_MODEL_FILE: &str = "cluster_model.json";
pub const D_TRAIN_FILE: &str = "d_train.jsonl";
pub const SELECTION_REPORT_FILE: &str = "selection_report.json";
pub const RUN_LOG_FILE: &str = "run_log.json";
pub const METRICS_FILE: &str = "metrics.json";

pub fn manifest_file_name(stage: Stage) -> String {
    format!("manifest_{stage}.json")
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads every source file. Sources are parsed concurrently.
pub fn load_sources(specs: &[SourceSpec]) -> Result<Vec<LoadedSource>> {
    specs
        .par_iter()
        .map(|spec| {
            let reader = open(&spec.path)?;
            let desc = &spec.descriptor;
            let records = match desc.supervision {
                Supervision::Binary => parse_binary_dataset(reader, desc).map(SourceRecords::Binary),
                Supervision::Scored => parse_scored_dataset(reader, desc).map(SourceRecords::Scored),
            }
            .map_err(|e| e.in_file(&spec.path))?;
            Ok(LoadedSource {
                descriptor: desc.clone(),
                records,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unified {
    pub pairs: Vec<UnifiedPair>,
    pub counts: Vec<SourceCount>,
    pub discards: Vec<DiscardReport>,
}

/// Validates, converts each source to pairs, and takes their union.
pub fn unify_sources(sources: &[LoadedSource]) -> Result<Unified> {
    validate_sources(sources).map_err(Error::InvalidSources)?;
    let converted = sources
        .par_iter()
        .map(convert_source)
        .collect::<Result<Vec<_>>>()?;
    let mut discards = Vec::with_capacity(converted.len());
    let mut per_source = Vec::with_capacity(converted.len());
    for (source, (pairs, discard)) in sources.iter().zip(converted) {
        discards.push(discard);
        per_source.push((source.descriptor.clone(), pairs));
    }
    let (pairs, counts) = union(per_source)?;
    Ok(Unified {
        pairs,
        counts,
        discards,
    })
}

/// Distinct prompts (by key) in order of first appearance.
pub fn unique_prompts(pairs: &[UnifiedPair]) -> Vec<&str> {
    let mut seen = HashSet::new();
    pairs
        .iter()
        .filter(|p| seen.insert(prompt_key(&p.prompt)))
        .map(|p| p.prompt.as_str())
        .collect()
}

pub fn build_provider(cfg: &EmbeddingConfig) -> Result<Box<dyn EmbeddingProvider>> {
    Ok(match cfg {
        EmbeddingConfig::Hashed { dim, seed } => Box::new(HashedEmbedder {
            dim: *dim,
            seed: *seed,
        }),
        EmbeddingConfig::File { path } => Box::new(
            PrecomputedEmbeddings::from_reader(open(path)?).map_err(|e| e.in_file(path))?,
        ),
    })
}

pub fn embed_pairs(pairs: &[UnifiedPair], provider: &dyn EmbeddingProvider) -> Result<EmbeddingMap> {
    provider.embed(&unique_prompts(pairs))
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files into the output directory and can roll them back.
struct OutputDir {
    dir: PathBuf,
    created: bool,
    written: Vec<PathBuf>,
}

impl OutputDir {
    fn open(dir: &Path) -> Result<Self> {
        let created = !dir.exists();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(OutputDir {
            dir: dir.to_owned(),
            created,
            written: Vec::new(),
        })
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.written.push(path.clone());
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    fn write_pairs(&mut self, name: &str, pairs: &[UnifiedPair]) -> Result<(PathBuf, String)> {
        let bytes = pairs_to_bytes(pairs);
        let path = self.write_bytes(name, &bytes)?;
        Ok((path, digest(&bytes)))
    }

    fn rollback(self) {
        for path in &self.written {
            let _ = fs::remove_file(path);
        }
        if self.created {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

/// Line-delimited JSON bytes of `pairs`.
pub fn pairs_to_bytes(pairs: &[UnifiedPair]) -> Vec<u8> {
    let mut bytes = Vec::new();
    write_jsonl(&mut bytes, pairs).expect("writing to memory");
    bytes
}

/// Runs `body` against a fresh output writer, removing everything it wrote on failure.
fn with_output<T>(dir: &Path, body: impl FnOnce(&mut OutputDir) -> Result<T>) -> Result<T> {
    let mut out = OutputDir::open(dir)?;
    match body(&mut out) {
        Ok(v) => Ok(v),
        Err(e) => {
            out.rollback();
            Err(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestCount {
    pub source_id: String,
    pub supervision: Supervision,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingLog {
    pub provider: String,
    pub dim: usize,
    pub prompts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLog {
    pub k: usize,
    pub restarts: usize,
    pub seed: u64,
    pub best_restart: usize,
    pub inertia: f64,
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub ingest: Vec<IngestCount>,
    pub unify: Vec<SourceCount>,
    pub discards: Vec<DiscardReport>,
    pub embedding: EmbeddingLog,
    pub cluster: ClusterLog,
    pub requested_fraction: f64,
    pub achieved_fraction: f64,
    pub input_pairs: usize,
    pub kept_pairs: usize,
    pub d_train_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutputs {
    pub d_train: PathBuf,
    pub selection_report: PathBuf,
    pub run_log: PathBuf,
    pub unified: PathBuf,
    pub cluster_model: PathBuf,
    pub manifests: Vec<PathBuf>,
    pub report: SelectionReport,
    pub log: RunLog,
}

fn ingest_counts(sources: &[LoadedSource]) -> Vec<IngestCount> {
    sources
        .iter()
        .map(|s| IngestCount {
            source_id: s.descriptor.source_id.clone(),
            supervision: s.descriptor.supervision,
            records: s.records.len(),
        })
        .collect()
}

fn provider_name(cfg: &EmbeddingConfig) -> &'static str {
    match cfg {
        EmbeddingConfig::Hashed { .. } => "hashed",
        EmbeddingConfig::File { .. } => "file",
    }
}

/// ingest → unify → embed → cluster → select, then writes D_train, the
/// selection report, the run log, and one manifest per training stage.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutputs> {
    cfg.validate()?;
    let sources = load_sources(&cfg.sources).map_err(|e| e.in_stage("ingest"))?;
    let unified = unify_sources(&sources).map_err(|e| e.in_stage("unify"))?;
    let embeddings = build_provider(&cfg.embedding)
        .and_then(|p| embed_pairs(&unified.pairs, p.as_ref()))
        .map_err(|e| e.in_stage("embed"))?;
    let model = kmeans_fit(&embeddings, &cfg.selection.kmeans_params()).map_err(|e| e.in_stage("cluster"))?;
    let (selected, report) = select_pairs(&unified.pairs, &model.assignments, &cfg.selection, &cfg.policies())
        .map_err(|e| e.in_stage("select"))?;

    with_output(&cfg.output_dir, |out| {
        let (unified_path, _) = out.write_pairs(UNIFIED_FILE, &unified.pairs)?;
        out.write_json(DISCARD_REPORT_FILE, &unified.discards)?;
        let cluster_model = out.write_json(CLUSTER_MODEL_FILE, &model)?;
        let (d_train, d_train_sha256) = out.write_pairs(D_TRAIN_FILE, &selected)?;
        let selection_report = out.write_json(SELECTION_REPORT_FILE, &report)?;
        let dataset = d_train.to_string_lossy().into_owned();
        let manifests = Stage::ALL
            .iter()
            .map(|&stage| out.write_json(&manifest_file_name(stage), &canonical_manifest(stage, &dataset)))
            .collect::<Result<Vec<_>>>()?;
        let log = RunLog {
            ingest: ingest_counts(&sources),
            unify: unified.counts.clone(),
            discards: unified.discards.clone(),
            embedding: EmbeddingLog {
                provider: provider_name(&cfg.embedding).into(),
                dim: model.dim(),
                prompts: embeddings.len(),
            },
            cluster: ClusterLog {
                k: model.k,
                restarts: model.restarts_used,
                seed: model.seed,
                best_restart: model.best_restart,
                inertia: model.inertia,
                sizes: model.sizes(),
            },
            requested_fraction: report.fraction,
            achieved_fraction: report.achieved_fraction,
            input_pairs: report.input_total,
            kept_pairs: report.kept_total,
            d_train_sha256,
        };
        let run_log = out.write_json(RUN_LOG_FILE, &log)?;
        Ok(PipelineOutputs {
            d_train,
            selection_report,
            run_log,
            unified: unified_path,
            cluster_model,
            manifests,
            report: report.clone(),
            log,
        })
    })
}

/// Parses and validates every source; writes per-source record counts.
pub fn run_ingest(cfg: &RunConfig) -> Result<Vec<IngestCount>> {
    cfg.validate()?;
    let sources = load_sources(&cfg.sources).map_err(|e| e.in_stage("ingest"))?;
    validate_sources(&sources).map_err(|v| Error::InvalidSources(v).in_stage("ingest"))?;
    let counts = ingest_counts(&sources);
    with_output(&cfg.output_dir, |out| out.write_json(INGEST_REPORT_FILE, &counts))?;
    Ok(counts)
}

pub fn run_unify(cfg: &RunConfig) -> Result<Unified> {
    cfg.validate()?;
    let sources = load_sources(&cfg.sources).map_err(|e| e.in_stage("ingest"))?;
    let unified = unify_sources(&sources).map_err(|e| e.in_stage("unify"))?;
    with_output(&cfg.output_dir, |out| {
        out.write_pairs(UNIFIED_FILE, &unified.pairs)?;
        out.write_json(DISCARD_REPORT_FILE, &unified.discards)
    })?;
    Ok(unified)
}

fn read_unified(dir: &Path) -> Result<Vec<UnifiedPair>> {
    let path = dir.join(UNIFIED_FILE);
    read_jsonl(open(&path)?).map_err(|e| e.in_file(&path))
}

/// Embeds the prompts of `unified.jsonl`.
pub fn run_embed(cfg: &RunConfig) -> Result<EmbeddingMap> {
    cfg.validate()?;
    let pairs = read_unified(&cfg.output_dir).map_err(|e| e.in_stage("embed"))?;
    let embeddings = build_provider(&cfg.embedding)
        .and_then(|p| embed_pairs(&pairs, p.as_ref()))
        .map_err(|e| e.in_stage("embed"))?;
    with_output(&cfg.output_dir, |out| {
        let mut bytes = Vec::new();
        write_embeddings(&mut bytes, &embeddings)?;
        out.write_bytes(EMBEDDINGS_FILE, &bytes)
    })?;
    Ok(embeddings)
}

/// Clusters the vectors of `embeddings.jsonl` for the prompts of `unified.jsonl`.
pub fn run_cluster(cfg: &RunConfig) -> Result<ClusterModel> {
    cfg.validate()?;
    let pairs = read_unified(&cfg.output_dir).map_err(|e| e.in_stage("cluster"))?;
    let expected: BTreeSet<String> = pairs.iter().map(|p| prompt_key(&p.prompt)).collect();
    let path = cfg.output_dir.join(EMBEDDINGS_FILE);
    let embeddings = open(&path)
        .and_then(|r| load_embeddings(r, &expected).map_err(|e| e.in_file(&path)))
        .map_err(|e| e.in_stage("cluster"))?;
    let model = kmeans_fit(&embeddings, &cfg.selection.kmeans_params()).map_err(|e| e.in_stage("cluster"))?;
    with_output(&cfg.output_dir, |out| out.write_json(CLUSTER_MODEL_FILE, &model))?;
    Ok(model)
}

/// Selects from `unified.jsonl` using `cluster_model.json`.
pub fn run_select(cfg: &RunConfig) -> Result<SelectionReport> {
    cfg.validate()?;
    let pairs = read_unified(&cfg.output_dir).map_err(|e| e.in_stage("select"))?;
    let model_path = cfg.output_dir.join(CLUSTER_MODEL_FILE);
    let model: ClusterModel = open(&model_path)
        .and_then(|r| serde_json::from_reader(r).map_err(|e| Error::Config(e.to_string()).in_file(&model_path)))
        .map_err(|e| e.in_stage("select"))?;
    let (selected, report) =
        select_pairs(&pairs, &model.assignments, &cfg.selection, &cfg.policies()).map_err(|e| e.in_stage("select"))?;
    with_output(&cfg.output_dir, |out| {
        out.write_pairs(D_TRAIN_FILE, &selected)?;
        out.write_json(SELECTION_REPORT_FILE, &report)
    })?;
    Ok(report)
}

/// Scores a dumps file against an items file.
pub fn run_eval(items_path: &Path, dumps_path: &Path) -> Result<MetricReport> {
    let items = read_items(open(items_path)?).map_err(|e| e.in_file(items_path))?;
    let dumps = read_dumps(open(dumps_path)?).map_err(|e| e.in_file(dumps_path))?;
    evaluate(&items, &dumps)
}

/// Writes `report` as JSON into `dir`.
pub fn write_metrics(dir: &Path, report: &MetricReport) -> Result<PathBuf> {
    with_output(dir, |out| out.write_json(METRICS_FILE, report))
}

/// Writes one manifest file to `path`.
pub fn write_manifest(path: &Path, stage: Stage, dataset_path: &str) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(&canonical_manifest(stage, dataset_path))
        .map_err(|e| Error::Config(e.to_string()))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Per-stage summary of a pipeline run, keyed by stage name.
pub fn stage_counts(log: &RunLog) -> BTreeMap<&'static str, usize> {
    BTreeMap::from([
        ("ingest", log.ingest.iter().map(|c| c.records).sum()),
        ("unify", log.unify.iter().map(|c| c.pairs).sum()),
        ("embed", log.embedding.prompts),
        ("cluster", log.cluster.sizes.iter().sum()),
        ("select", log.kept_pairs),
    ])
}
