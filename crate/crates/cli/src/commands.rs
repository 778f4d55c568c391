use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mmnav::checkpoint::{load_mcfn, save_abmil, save_mcfn, CheckpointHeader};
use mmnav::classify::{
    bag_from_regions, cross_validate, evaluate_budgets, train_classifier, write_budget_table, AbmilParams, Bag,
    ClassifyError,
};
use mmnav::encoder::{encode_pyramid, EncoderKind, ToyEncoder};
use mmnav::mcfn::{forward_all, Heatmap, McfnParams};
use mmnav::metrics::{evaluate_slide, write_report};
use mmnav::mst::{
    agent_run, DecisionBackend, HeatmapProvider, HeuristicBackend, MemoryBank, MstError, PrecomputedHeatmaps,
    RemoteBackend, ScriptedBackend, ScriptedPolicy, StopReason, TraceHeader, UreqTransport,
};
use mmnav::ndsl::{train_cmt, write_loss_curve, NdslError};
use mmnav::overlay::{render_level_overlay, OverlayOptions};
use mmnav::pyramid::{
    generate_synthetic_slide, load_pyramid, save_pyramid, MagnificationPyramid, Region, SlideLabel,
};

use crate::config::{BackendConfig, RunConfig};
use crate::error::{backend, missing, validation, CliResult};

pub const INDEX_FILE: &str = "index.json";
pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "mcfn.ckpt";

pub struct RunContext {
    pub config: RunConfig,
    pub hash: String,
    pub force: bool,
    pub allow_mixed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub slide_id: String,
    /// Directory relative to the index.
    pub path: String,
    pub label: Option<SlideLabel>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config_hash: String,
    pub slides: Vec<IndexEntry>,
}

#[derive(Debug, Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: &'a str,
    config: &'a RunConfig,
    inputs: Vec<FileHash>,
    outputs: Vec<String>,
    wall_time_secs: f64,
}

pub fn file_sha256(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    ctx: &RunContext,
    inputs: &[PathBuf],
    outputs: Vec<String>,
    start: Instant,
) -> CliResult<()> {
    let inputs = inputs
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: p.display().to_string(),
                sha256: file_sha256(p)?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let m = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: &ctx.hash,
        config: &ctx.config,
        inputs,
        outputs,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

/// Creates `dir`, refusing a non-empty one unless forced.
fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(validation(anyhow!(
            "output directory {} is not empty (pass --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn validate(ctx: &RunContext) -> CliResult<()> {
    ctx.config.validate().map_err(validation)
}

fn encoder(ctx: &RunContext) -> CliResult<ToyEncoder> {
    match &ctx.config.encoder.kind {
        EncoderKind::Toy => Ok(ToyEncoder::new(&ctx.config.encoder)),
        EncoderKind::External { factory } => Err(validation(anyhow!(
            "encoder factory `{factory}` is not available from the command line; use the library registry"
        ))),
    }
}

pub fn cmd_synth(ctx: &RunContext, out: &Path) -> CliResult<()> {
    let start = Instant::now();
    validate(ctx)?;
    prepare_out(out, ctx.force)?;
    let cfg = &ctx.config;
    let entries: Vec<IndexEntry> = (0..cfg.num_slides)
        .into_par_iter()
        .map(|i| -> CliResult<IndexEntry> {
            let id = format!("slide-{i:04}");
            let mut sc = cfg.synth.clone();
            sc.label = SlideLabel::from_index(i % 4).expect("four labels");
            sc.slide_id = Some(id.clone());
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let p = generate_synthetic_slide(seed, &sc).map_err(validation)?;
            save_pyramid(&p, &out.join(&id))?;
            Ok(IndexEntry {
                slide_id: id.clone(),
                path: id,
                label: p.label,
            })
        })
        .collect::<CliResult<_>>()?;
    let index = DatasetIndex {
        config_hash: ctx.hash.clone(),
        slides: entries,
    };
    fs::write(out.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    log::info!("wrote {} slides to {}", index.slides.len(), out.display());
    write_manifest(out, "synth", ctx, &[], vec![INDEX_FILE.into()], start)
}

pub fn load_index(data: &Path) -> CliResult<DatasetIndex> {
    let path = data.join(INDEX_FILE);
    if !path.exists() {
        return Err(missing(format!("dataset index {}", path.display()), "synth"));
    }
    Ok(serde_json::from_str(&fs::read_to_string(&path)?).with_context(|| format!("parsing {}", path.display()))?)
}

fn load_dataset(data: &Path) -> CliResult<(DatasetIndex, Vec<MagnificationPyramid>)> {
    let index = load_index(data)?;
    let slides = index
        .slides
        .par_iter()
        .map(|e| load_pyramid(&data.join(&e.path)).with_context(|| format!("loading slide {}", e.slide_id)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok((index, slides))
}

pub fn cmd_train(ctx: &RunContext, data: &Path, out: &Path) -> CliResult<()> {
    let start = Instant::now();
    validate(ctx)?;
    let (_, slides) = load_dataset(data)?;
    if slides.is_empty() {
        return Err(validation(anyhow!("dataset {} has no slides", data.display())));
    }
    let enc = encoder(ctx)?;
    prepare_out(out, ctx.force)?;
    let cfg = &ctx.config;
    let params = McfnParams::init(cfg.mcfn.clone());
    let outcome = train_cmt(&slides, params, &cfg.loss, &cfg.train, &cfg.encoder, &enc).map_err(|e| match e {
        NdslError::Dataset(_) | NdslError::Config(_) | NdslError::Shape { .. } => validation(e),
        other => other.into(),
    })?;
    let mut f = BufWriter::new(File::create(out.join(CHECKPOINT))?);
    save_mcfn(&mut f, &outcome.params, &cfg.encoder.hash(), &ctx.hash)?;
    f.flush()?;
    write_loss_curve(BufWriter::new(File::create(out.join("loss_curve.csv"))?), &outcome.curve)?;
    if let Some(last) = outcome.curve.last() {
        log::info!("final training loss {:.6}", last.terms.total);
    }
    write_manifest(
        out,
        "train-cmt",
        ctx,
        &[data.join(INDEX_FILE)],
        vec![CHECKPOINT.into(), "loss_curve.csv".into()],
        start,
    )
}

fn load_checkpoint(ctx: &RunContext, path: &Path) -> CliResult<(McfnParams, CheckpointHeader)> {
    if !path.exists() {
        return Err(missing(format!("checkpoint {}", path.display()), "train-cmt"));
    }
    let (params, header) = load_mcfn(std::io::BufReader::new(File::open(path)?)).map_err(validation)?;
    if header.spec_hash != ctx.config.encoder.hash() {
        return Err(validation(anyhow!(
            "checkpoint {} was trained with encoder spec {}, config has {}",
            path.display(),
            header.spec_hash,
            ctx.config.encoder.hash()
        )));
    }
    Ok((params, header))
}

pub enum HeatSource {
    Oracle,
    Model(McfnParams),
}

impl HeatSource {
    fn resolve(ctx: &RunContext, checkpoint: Option<&Path>, oracle: bool) -> CliResult<(Self, Option<CheckpointHeader>)> {
        match (oracle, checkpoint) {
            (true, _) => Ok((Self::Oracle, None)),
            (false, Some(p)) => {
                let (params, h) = load_checkpoint(ctx, p)?;
                Ok((Self::Model(params), Some(h)))
            }
            (false, None) => Err(validation(anyhow!("pass --checkpoint or --oracle"))),
        }
    }

    fn heatmaps(&self, ctx: &RunContext, p: &MagnificationPyramid, enc: &ToyEncoder) -> CliResult<Vec<Heatmap>> {
        match self {
            Self::Oracle => Ok(PrecomputedHeatmaps::from_annotations(p, ctx.config.mcfn.output_size)
                .map_err(validation)?
                .0),
            Self::Model(params) => {
                let tokens = encode_pyramid(p, &ctx.config.encoder, enc)?;
                Ok(forward_all(params, &tokens).map_err(validation)?)
            }
        }
    }
}

pub fn make_backend(cfg: &BackendConfig, seed: u64) -> CliResult<Box<dyn DecisionBackend>> {
    let sel = cfg.selection.as_str();
    if sel == "heuristic" {
        return Ok(Box::new(HeuristicBackend::default()));
    }
    if sel == "remote" {
        return Ok(Box::new(RemoteBackend::new(cfg.remote.clone(), Arc::new(UreqTransport))));
    }
    if let Some(name) = sel.strip_prefix("scripted:") {
        let policy =
            ScriptedPolicy::parse(name).ok_or_else(|| validation(anyhow!("backend.selection: unknown scripted policy `{name}`")))?;
        return Ok(Box::new(ScriptedBackend::new(policy, seed)));
    }
    Err(validation(anyhow!(
        "backend.selection `{sel}` is not one of heuristic, remote, scripted:<policy>"
    )))
}

#[derive(Debug, Serialize)]
struct NavSummary {
    slide_id: String,
    steps: usize,
    regions: usize,
    stop_reason: StopReason,
}

pub fn cmd_navigate(ctx: &RunContext, data: &Path, checkpoint: Option<&Path>, oracle: bool, out: &Path) -> CliResult<()> {
    let start = Instant::now();
    validate(ctx)?;
    let (_, slides) = load_dataset(data)?;
    let (source, _) = HeatSource::resolve(ctx, checkpoint, oracle)?;
    let enc = encoder(ctx)?;
    make_backend(&ctx.config.backend, 0)?;
    prepare_out(out, ctx.force)?;
    let traces = out.join("traces");
    fs::create_dir_all(&traces)?;
    let cfg = &ctx.config;
    let results: Vec<CliResult<NavSummary>> = slides
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let heat = PrecomputedHeatmaps(source.heatmaps(ctx, p, &enc)?);
            let be = make_backend(&cfg.backend, cfg.seed.wrapping_add(i as u64))?;
            let header = TraceHeader {
                slide_id: p.slide_id.clone(),
                prompt: cfg.backend.prompt.clone(),
                config_hash: ctx.hash.clone(),
            };
            let mut w = BufWriter::new(File::create(traces.join(format!("{}.jsonl", p.slide_id)))?);
            let provider: &dyn HeatmapProvider = &heat;
            let res = agent_run(p, provider, be.as_ref(), &cfg.agent, header, Some(&mut w));
            w.flush()?;
            match res {
                Ok(nav) => Ok(NavSummary {
                    slide_id: p.slide_id.clone(),
                    steps: nav.trace.len(),
                    regions: nav.regions.len(),
                    stop_reason: nav.stop_reason,
                }),
                Err(e @ MstError::Aborted { .. }) => Err(backend(anyhow!("slide {}: {e}", p.slide_id))),
                Err(e @ (MstError::Input(_) | MstError::Partition(_))) => {
                    Err(validation(anyhow!("slide {}: {e}", p.slide_id)))
                }
                Err(e) => Err(anyhow!("slide {}: {e}", p.slide_id).into()),
            }
        })
        .collect();
    let mut summary = Vec::new();
    for r in results {
        summary.push(r?);
    }
    fs::write(out.join("navigation.json"), serde_json::to_string_pretty(&summary)?)?;
    let mut inputs = vec![data.join(INDEX_FILE)];
    inputs.extend(checkpoint.filter(|_| !oracle).map(Path::to_path_buf));
    write_manifest(out, "navigate", ctx, &inputs, vec!["traces".into(), "navigation.json".into()], start)
}

fn classify_err(e: ClassifyError) -> crate::error::CliError {
    match e {
        ClassifyError::Io(_) => e.into(),
        other => validation(other),
    }
}

pub fn cmd_classify(ctx: &RunContext, data: &Path, traces: &Path, out: &Path) -> CliResult<()> {
    let start = Instant::now();
    validate(ctx)?;
    let (_, slides) = load_dataset(data)?;
    let enc = encoder(ctx)?;
    let cfg = &ctx.config;
    let mut inputs = vec![data.join(INDEX_FILE)];
    let mut bags: Vec<Bag> = Vec::with_capacity(slides.len());
    for p in &slides {
        let path = traces.join(format!("{}.jsonl", p.slide_id));
        if !path.exists() {
            return Err(missing(format!("trace {}", path.display()), "navigate"));
        }
        let bank = MemoryBank::from_jsonl(&fs::read_to_string(&path)?).map_err(validation)?;
        let label = p
            .label
            .ok_or_else(|| validation(anyhow!("slide {} has no label", p.slide_id)))?;
        let regions: Vec<Region> = bank.regions().copied().collect();
        let tokens = encode_pyramid(p, &cfg.encoder, &enc)?;
        bags.push(bag_from_regions(p, &tokens, &regions, label).map_err(classify_err)?);
        inputs.push(path);
    }
    prepare_out(out, ctx.force)?;
    let dim = cfg.encoder.token_dim;
    let rows = evaluate_budgets(&bags, dim, &cfg.budgets, &cfg.sampling, cfg.mcfn.ablation, &cfg.classifier)
        .map_err(classify_err)?;
    write_budget_table(BufWriter::new(File::create(out.join("budget_table.csv"))?), &rows)?;
    let report = cross_validate(&bags, dim, &cfg.classifier).map_err(classify_err)?;
    log::info!("cross-validated AUC {:.4} ± {:.4}", report.auc_mean, report.auc_std);
    fs::write(out.join("cv_report.json"), serde_json::to_string_pretty(&report)?)?;
    let init = AbmilParams::init(dim, cfg.classifier.hidden, cfg.classifier.seed);
    let params = train_classifier(&bags, init, &cfg.classifier).map_err(classify_err)?;
    let mut f = BufWriter::new(File::create(out.join("abmil.ckpt"))?);
    save_abmil(&mut f, &params, &cfg.encoder.hash(), cfg.classifier.seed, &ctx.hash)?;
    f.flush()?;
    write_manifest(
        out,
        "classify",
        ctx,
        &inputs,
        vec!["budget_table.csv".into(), "cv_report.json".into(), "abmil.ckpt".into()],
        start,
    )
}

pub fn cmd_evaluate(ctx: &RunContext, data: &Path, checkpoint: Option<&Path>, oracle: bool, out: &Path) -> CliResult<()> {
    let start = Instant::now();
    validate(ctx)?;
    let (index, slides) = load_dataset(data)?;
    let (source, header) = HeatSource::resolve(ctx, checkpoint, oracle)?;
    let mut mismatched = Vec::new();
    if index.config_hash != ctx.hash {
        mismatched.push(format!("dataset index ({})", index.config_hash));
    }
    if let Some(h) = &header {
        if h.run_hash != ctx.hash {
            mismatched.push(format!("checkpoint ({})", h.run_hash));
        }
    }
    if !mismatched.is_empty() {
        let msg = format!("config hash {} differs from {}", ctx.hash, mismatched.join(", "));
        if !ctx.allow_mixed {
            return Err(validation(anyhow!("{msg}; pass --allow-mixed to evaluate anyway")));
        }
        log::warn!("{msg}");
    }
    let enc = encoder(ctx)?;
    prepare_out(out, ctx.force)?;
    let q = ctx.config.q;
    let per_slide: Vec<CliResult<Vec<_>>> = slides
        .par_iter()
        .map(|p| {
            let heat = source.heatmaps(ctx, p, &enc)?;
            evaluate_slide(p, &heat, q).map_err(validation)
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_slide {
        rows.extend(r?);
    }
    write_report(BufWriter::new(File::create(out.join("metrics.csv"))?), &rows)?;
    let mut inputs = vec![data.join(INDEX_FILE)];
    inputs.extend(checkpoint.filter(|_| !oracle).map(Path::to_path_buf));
    write_manifest(out, "evaluate", ctx, &inputs, vec!["metrics.csv".into()], start)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_render(
    ctx: &RunContext,
    data: &Path,
    slide: &str,
    checkpoint: Option<&Path>,
    oracle: bool,
    trace: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    let start = Instant::now();
    validate(ctx)?;
    let index = load_index(data)?;
    let entry = index
        .slides
        .iter()
        .find(|e| e.slide_id == slide)
        .ok_or_else(|| validation(anyhow!("slide `{slide}` is not in {}", data.display())))?;
    let p = load_pyramid(&data.join(&entry.path))?;
    let heat = if oracle || checkpoint.is_some() {
        let (source, _) = HeatSource::resolve(ctx, checkpoint, oracle)?;
        Some(source.heatmaps(ctx, &p, &encoder(ctx)?)?)
    } else {
        None
    };
    let mut inputs = vec![data.join(INDEX_FILE)];
    let regions: Vec<Region> = match trace {
        Some(t) => {
            if !t.exists() {
                return Err(missing(format!("trace {}", t.display()), "navigate"));
            }
            let bank = MemoryBank::from_jsonl(&fs::read_to_string(t)?).map_err(validation)?;
            if let Some(h) = &bank.header {
                if h.slide_id != slide {
                    return Err(validation(anyhow!("trace is for slide `{}`, not `{slide}`", h.slide_id)));
                }
            }
            inputs.push(t.to_path_buf());
            bank.regions().copied().collect()
        }
        None => Vec::new(),
    };
    if let Some(r) = regions.iter().find(|r| r.level_index >= p.num_levels()) {
        return Err(validation(anyhow!(
            "level mismatch: trace region at level {} but slide has {} levels",
            r.level_index,
            p.num_levels()
        )));
    }
    if heat.as_ref().is_some_and(|h| h.len() != p.num_levels()) {
        return Err(validation(anyhow!("level mismatch between heatmaps and slide")));
    }
    prepare_out(out, ctx.force)?;
    let mut outputs = Vec::new();
    for m in 0..p.num_levels() {
        let h = heat.as_ref().map(|h| &h[m]);
        let (img, steps) = render_level_overlay(&p, m, h, &regions, &OverlayOptions::default()).map_err(validation)?;
        let name = format!("{slide}_level{m}.png");
        img.save(out.join(&name))?;
        log::debug!("level {m}: labeled steps {steps:?}");
        outputs.push(name);
    }
    write_manifest(out, "render", ctx, &inputs, outputs, start)
}
