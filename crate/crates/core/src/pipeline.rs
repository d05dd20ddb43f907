//! Stage functions shared by the CLI subcommands and the end-to-end run.
//!
//! Every stage of [`run_pipeline`] records a key over its configuration
//! subset and the bytes of its inputs; a stage whose key and outputs are
//! already on disk is skipped.

use std::collections::HashMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use log::{info, warn};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::curation::{
    annotate_pairs, build_instruction_bank, default_bank, filter_candidates, generate_candidates, read_ranked_file,
    CurationReport, GenerateConfig, GenerationStats, InstructionBank, PredictorFeatureDistance, SyntheticEditor,
};
use crate::diffusion::{smoothed, train_codec, train_editor, CodecTrainReport, EditorNets, LatentCodec};
use crate::domain::manifest::{manifest_base, read_validated, write_atomic, write_jsonl};
use crate::domain::{EditPair, EmotionLabel, ImageBuffer, LabeledImage, PairRecord, SubsetTag};
use crate::error::{Error, Result};
use crate::inference::{iterative_edit_with, save_session, StopReason};
use crate::metrics::{evaluate_batch, ssim, MetricReport, TripleRecord};
use crate::predictor::{train_predictor, PredictorModel, PredictorTrainReport};
use crate::synth::synth_corpus;

/// `to` expressed relative to directory `from`.
pub fn relative_path(from: &Path, to: &Path) -> Result<PathBuf> {
    let abs = |p: &Path| std::path::absolute(p).map_err(|e| Error::io(p, e));
    let (from, to) = (abs(from)?, abs(to)?);
    fn norm(p: &Path) -> Vec<Component<'_>> {
        let mut out: Vec<Component> = Vec::new();
        for c in p.components() {
            match c {
                Component::CurDir => {}
                Component::ParentDir => {
                    out.pop();
                }
                c => out.push(c),
            }
        }
        out
    }
    let (f, t) = (norm(&from), norm(&to));
    let common = f.iter().zip(&t).take_while(|(a, b)| a == b).count();
    let mut rel = PathBuf::new();
    for _ in common..f.len() {
        rel.push("..");
    }
    for c in &t[common..] {
        rel.push(c.as_os_str());
    }
    Ok(rel)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path).map_err(|e| Error::io(path, e))?)?)
}

/// Loads a labeled-image manifest with every image.
pub fn load_labeled(manifest: &Path) -> Result<Vec<(PathBuf, ImageBuffer, EmotionLabel)>> {
    let base = manifest_base(manifest);
    read_validated::<LabeledImage>(manifest)?
        .into_iter()
        .map(|r| {
            let img = ImageBuffer::load(&base.join(&r.path))?;
            Ok((base.join(&r.path), img, r.emotion))
        })
        .collect()
}

pub fn train_predictor_stage(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<PredictorTrainReport> {
    let data: Vec<(ImageBuffer, EmotionLabel)> = load_labeled(corpus)?.into_iter().map(|(_, i, l)| (i, l)).collect();
    let (model, report) = train_predictor(&data, cfg.predictor_config(), &cfg.predictor_train_config())?;
    model.save(out)?;
    write_json(&out.with_extension("report.json"), &report)?;
    Ok(report)
}

pub fn train_codec_stage(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<CodecTrainReport> {
    let images: Vec<ImageBuffer> = load_labeled(corpus)?
        .into_iter()
        .step_by(cfg.codec.image_stride)
        .map(|(_, i, _)| i)
        .collect();
    let (codec, report) = train_codec(&images, cfg.codec_config(), &cfg.codec_train_config())?;
    codec.save(out)?;
    write_json(&out.with_extension("report.json"), &report)?;
    Ok(report)
}

/// The configured bank file, pruned to the top ten per emotion, or the
/// built-in bank.
pub fn load_bank(cfg: &RunConfig, bank_file: Option<&Path>) -> Result<InstructionBank> {
    match bank_file.or(cfg.curation.bank_file.as_deref()) {
        Some(path) => {
            let (raw, ranks) = read_ranked_file(path)?;
            let (bank, warnings) = build_instruction_bank(&raw, &ranks)?;
            for w in warnings {
                warn!("{w}");
            }
            Ok(bank)
        }
        None => Ok(default_bank(cfg.bank_seed())),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpgsReport {
    pub sources: usize,
    pub generation: GenerationStats,
    pub filter: CurationReport,
}

/// Generates candidates from every `source_stride`-th labeled image with the
/// synthetic editor, filters them and writes accepted pairs as an EPGS
/// manifest. Accepted images land in `images/` next to the manifest.
pub fn curate_epgs(
    cfg: &RunConfig,
    sources_manifest: &Path,
    predictor: &PredictorModel,
    bank: &InstructionBank,
    out: &Path,
) -> Result<(Vec<PairRecord>, EpgsReport)> {
    let out_dir = manifest_base(out);
    let sources: Vec<(PathBuf, ImageBuffer, EmotionLabel)> = load_labeled(sources_manifest)?
        .into_iter()
        .step_by(cfg.curation.source_stride)
        .collect();
    bank.save(&out_dir.join("bank.txt"))?;
    let labeled: Vec<(ImageBuffer, EmotionLabel)> = sources.iter().map(|(_, i, l)| (i.clone(), *l)).collect();
    let gen_cfg = GenerateConfig {
        targets: cfg.curation.targets,
        instructions_per_target: cfg.curation.instructions_per_target,
        seed: cfg.generation_seed(),
    };
    let editor = SyntheticEditor::default();
    let (candidates, generation) = generate_candidates(&labeled, bank, &editor, &gen_cfg);
    let images: Vec<ImageBuffer> = labeled.iter().map(|(i, _)| i.clone()).collect();
    let perceptual = PredictorFeatureDistance { model: predictor };
    let (accepted, _, filter) =
        filter_candidates(&images, &candidates, predictor, &cfg.curation.criteria, &perceptual)?;
    let mut records = Vec::with_capacity(accepted.len());
    for (k, &ci) in accepted.iter().enumerate() {
        let c = &candidates[ci];
        let rel = PathBuf::from(format!("images/epgs_{k:05}.png"));
        c.image.save(&out_dir.join(&rel))?;
        records.push(PairRecord {
            source_path: relative_path(&out_dir, &sources[c.source_index].0)?,
            target_path: rel,
            source_emotion: c.source_emotion,
            target_emotion: c.target_emotion,
            instruction: c.instruction.clone(),
            subset_tag: SubsetTag::Generated,
            provenance: c.provenance.clone(),
        });
    }
    write_jsonl(out, &records)?;
    info!(
        "curated {} of {} candidates from {} sources",
        records.len(),
        filter.candidates_in,
        sources.len()
    );
    Ok((
        records,
        EpgsReport {
            sources: sources.len(),
            generation,
            filter,
        },
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpasReport {
    pub pairs_in: usize,
    pub annotated: usize,
    pub skipped: Vec<(usize, String)>,
}

/// Labels existing edit pairs. Output paths are rebased onto the output
/// manifest's directory.
pub fn curate_epas(pairs_manifest: &Path, predictor: &PredictorModel, out: &Path) -> Result<(Vec<PairRecord>, EpasReport)> {
    let pairs: Vec<EditPair> = crate::domain::manifest::read_jsonl(pairs_manifest)?;
    let base = manifest_base(pairs_manifest);
    let (mut records, skipped) = annotate_pairs(&pairs, &base, predictor)?;
    let out_dir = manifest_base(out);
    for r in &mut records {
        r.source_path = relative_path(&out_dir, &base.join(&r.source_path))?;
        r.target_path = relative_path(&out_dir, &base.join(&r.target_path))?;
    }
    write_jsonl(out, &records)?;
    let report = EpasReport {
        pairs_in: pairs.len(),
        annotated: records.len(),
        skipped,
    };
    Ok((records, report))
}

/// At most `per_source` pairs per source image, `max` in total, in
/// manifest order.
pub fn select_editor_pairs(records: &[PairRecord], max: usize, per_source: usize) -> Vec<PairRecord> {
    let mut counts: HashMap<&Path, usize> = HashMap::new();
    let mut out = Vec::new();
    for r in records {
        if out.len() == max {
            break;
        }
        let n = counts.entry(r.source_path.as_path()).or_default();
        if *n < per_source {
            *n += 1;
            out.push(r.clone());
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditorStageReport {
    pub pairs: usize,
    pub steps: u64,
    /// Mean total loss over the first ten steps.
    pub initial_loss: f64,
    /// Trailing 100-step mean of the total loss at the end of training.
    pub final_smoothed_loss: f64,
    pub ratio: f64,
}

pub const INITIAL_LOSS_WINDOW: usize = 10;
pub const SMOOTHING_WINDOW: usize = 100;

pub fn train_editor_stage(cfg: &RunConfig, manifest: &Path, codec_ckpt: &Path, out_dir: &Path) -> Result<EditorStageReport> {
    let records: Vec<PairRecord> = read_validated(manifest)?;
    let codec = LatentCodec::load(codec_ckpt)?;
    let codec_rel = relative_path(out_dir, codec_ckpt)?;
    let trainer = train_editor(
        &records,
        &manifest_base(manifest),
        &codec,
        &cfg.editor_config(),
        &cfg.editor_train_config(),
        out_dir,
        Some(&codec_rel),
    )?;
    let losses = trainer.losses();
    let head = losses.len().min(INITIAL_LOSS_WINDOW).max(1);
    let initial_loss = losses.iter().take(head).map(|l| l.total).sum::<f64>() / head as f64;
    let final_smoothed_loss = smoothed(losses, SMOOTHING_WINDOW).last().copied().unwrap_or(f64::NAN);
    let report = EditorStageReport {
        pairs: records.len(),
        steps: trainer.step_count(),
        initial_loss,
        final_smoothed_loss,
        ratio: final_smoothed_loss / initial_loss,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditRecord {
    pub source_path: PathBuf,
    pub target_emotion: EmotionLabel,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub ssim: f64,
    pub predicted: EmotionLabel,
    pub confidence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditStageReport {
    pub edits: Vec<EditRecord>,
    pub mean_ssim: f64,
    pub criteria_met: usize,
}

/// Edits the first `evaluate.sources` distinct sources of a pair manifest
/// towards their recorded target emotions. Writes `generated/`,
/// `sessions/` and a `triples.jsonl` manifest into `out_dir`.
pub fn edit_stage(
    cfg: &RunConfig,
    pairs_manifest: &Path,
    editor_ckpt: &Path,
    predictor: &PredictorModel,
    out_dir: &Path,
) -> Result<EditStageReport> {
    let records: Vec<PairRecord> = read_validated(pairs_manifest)?;
    let base = manifest_base(pairs_manifest);
    let nets = EditorNets::load(editor_ckpt)?;
    let codec = nets.load_codec(editor_ckpt)?;
    let jobs = select_editor_pairs(&records, cfg.evaluate.sources, 1);
    let sampler = cfg.sampler_config();
    let mut triples = Vec::new();
    let mut edits = Vec::new();
    for (i, job) in jobs.iter().enumerate() {
        let src_path = base.join(&job.source_path);
        let source = ImageBuffer::load(&src_path)?;
        let session = iterative_edit_with(
            &source,
            job.target_emotion,
            &nets,
            &codec,
            predictor,
            &sampler,
            &cfg.critic,
        )?;
        save_session(&session, &sampler, &cfg.critic, &out_dir.join(format!("sessions/{i:02}")))?;
        let gen_rel = PathBuf::from(format!("generated/{i:02}.png"));
        session.final_image().save(&out_dir.join(&gen_rel))?;
        let v = session.final_verdict();
        edits.push(EditRecord {
            source_path: job.source_path.clone(),
            target_emotion: job.target_emotion,
            iterations: session.iterations.len(),
            stop_reason: session.stop_reason,
            ssim: ssim(&source, session.final_image())?,
            predicted: v.predicted,
            confidence: v.confidence,
        });
        info!(
            "edit {i}: {} -> {} in {} iterations ({:?})",
            job.source_emotion,
            job.target_emotion,
            session.iterations.len(),
            session.stop_reason
        );
        triples.push(TripleRecord {
            source_path: relative_path(out_dir, &src_path)?,
            generated_path: gen_rel,
            target_emotion: job.target_emotion,
        });
    }
    write_jsonl(&out_dir.join("triples.jsonl"), &triples)?;
    let mean_ssim = edits.iter().map(|e| e.ssim).sum::<f64>() / edits.len().max(1) as f64;
    let report = EditStageReport {
        criteria_met: edits.iter().filter(|e| e.stop_reason == StopReason::CriteriaMet).count(),
        edits,
        mean_ssim,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

pub fn evaluate_stage(cfg: &RunConfig, triples: &Path, predictor: &PredictorModel, out_dir: &Path) -> Result<MetricReport> {
    let report = evaluate_batch(triples, predictor, &cfg.evaluate.metrics)?;
    write_json(&out_dir.join("metrics.json"), &report)?;
    write_atomic(&out_dir.join("metrics.txt"), report.summary_table().as_bytes())?;
    Ok(report)
}

/// Directory layout of one run.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn corpus_manifest(&self) -> PathBuf {
        self.corpus_dir().join("labels.jsonl")
    }
    pub fn predictor_ckpt(&self) -> PathBuf {
        self.root.join("predictor/predictor.ckpt")
    }
    pub fn codec_ckpt(&self) -> PathBuf {
        self.root.join("codec/codec.ckpt")
    }
    pub fn epgs_manifest(&self) -> PathBuf {
        self.root.join("curation/epgs.jsonl")
    }
    pub fn editor_pairs_manifest(&self) -> PathBuf {
        self.root.join("curation/editor_pairs.jsonl")
    }
    pub fn editor_dir(&self) -> PathBuf {
        self.root.join("editor")
    }
    pub fn editor_ckpt(&self) -> PathBuf {
        self.editor_dir().join("editor.ckpt")
    }
    pub fn edits_dir(&self) -> PathBuf {
        self.root.join("edits")
    }
    pub fn triples_manifest(&self) -> PathBuf {
        self.edits_dir().join("triples.jsonl")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    fn stage_record(&self, name: &str) -> PathBuf {
        self.root.join("stages").join(format!("{name}.json"))
    }
}

/// SHA-256 over the bytes of files, directories walked in sorted order.
pub fn content_hash(paths: &[PathBuf]) -> Result<String> {
    fn visit(h: &mut Sha256, path: &Path, root: &Path) -> Result<()> {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
                .collect::<Result<_>>()?;
            entries.sort();
            for e in entries {
                visit(h, &e, root)?;
            }
        } else {
            let rel = path.strip_prefix(root).unwrap_or(path);
            h.update(rel.to_string_lossy().as_bytes());
            h.update(fs::read(path).map_err(|e| Error::io(path, e))?);
        }
        Ok(())
    }
    let mut h = Sha256::new();
    for p in paths {
        visit(&mut h, p, manifest_base(p).as_path())?;
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageRecord {
    key: String,
    outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Cached,
}

/// Runs `body` unless a record with the same key exists and all outputs are
/// present. Errors are tagged with the stage name.
fn run_stage(
    layout: &RunLayout,
    name: &str,
    config: &impl Serialize,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    body: impl FnOnce() -> Result<()>,
) -> Result<StageStatus> {
    let inner = || -> Result<StageStatus> {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update(serde_json::to_vec(config)?);
        h.update(content_hash(inputs)?.as_bytes());
        let key = hex::encode(h.finalize());
        let record_path = layout.stage_record(name);
        if record_path.exists() {
            let rec: StageRecord = read_json(&record_path)?;
            if rec.key == key && outputs.iter().all(|o| o.exists()) {
                info!("stage {name}: up to date");
                return Ok(StageStatus::Cached);
            }
        }
        info!("stage {name}: running");
        body()?;
        write_json(
            &record_path,
            &StageRecord {
                key,
                outputs: outputs.to_vec(),
            },
        )?;
        Ok(StageStatus::Ran)
    };
    inner().map_err(|e| e.in_stage(name))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub root: PathBuf,
    pub stages: Vec<(String, StageStatus)>,
    pub predictor_train_accuracy: f64,
    pub codec_reconstruction_mae: f64,
    pub curation: EpgsReport,
    pub editor: EditorStageReport,
    pub edit: EditStageReport,
    pub metrics: MetricReport,
}

/// Runs every stage in order under `cfg.artifact_root`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let layout = RunLayout::new(&cfg.artifact_root);
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    write_atomic(&layout.root.join("run_config.toml"), cfg.to_toml()?.as_bytes())?;
    let mut stages = Vec::new();

    let corpus = layout.corpus_manifest();
    let st = run_stage(&layout, "synth-corpus", &(cfg.synth_config()), &[], &[corpus.clone()], || {
        synth_corpus(&cfg.synth_config(), &layout.corpus_dir()).map(|_| ())
    })?;
    stages.push(("synth-corpus".to_string(), st));

    let pred_ckpt = layout.predictor_ckpt();
    let pred_cfg = (cfg.predictor_config(), cfg.predictor_train_config());
    let st = run_stage(&layout, "train-predictor", &pred_cfg, &[layout.corpus_dir()], &[pred_ckpt.clone()], || {
        train_predictor_stage(cfg, &corpus, &pred_ckpt).map(|_| ())
    })?;
    stages.push(("train-predictor".to_string(), st));
    let pred_report: PredictorTrainReport = read_json(&pred_ckpt.with_extension("report.json"))?;

    let codec_ckpt = layout.codec_ckpt();
    let codec_cfg = (cfg.codec_config(), cfg.codec_train_config(), cfg.codec.image_stride);
    let st = run_stage(&layout, "train-codec", &codec_cfg, &[layout.corpus_dir()], &[codec_ckpt.clone()], || {
        train_codec_stage(cfg, &corpus, &codec_ckpt).map(|_| ())
    })?;
    stages.push(("train-codec".to_string(), st));
    let codec_report: CodecTrainReport = read_json(&codec_ckpt.with_extension("report.json"))?;

    let epgs = layout.epgs_manifest();
    let pairs = layout.editor_pairs_manifest();
    let cur_report_path = manifest_base(&epgs).join("report.json");
    let cur_cfg = (&cfg.curation, cfg.generation_seed(), cfg.bank_seed(), cfg.editor.max_pairs, cfg.editor.max_pairs_per_source);
    let mut cur_inputs = vec![layout.corpus_dir(), pred_ckpt.clone()];
    if let Some(b) = &cfg.curation.bank_file {
        cur_inputs.push(b.clone());
    }
    let st = run_stage(&layout, "curate-epgs", &cur_cfg, &cur_inputs, &[epgs.clone(), pairs.clone()], || {
        let predictor = PredictorModel::load(&pred_ckpt)?;
        let bank = load_bank(cfg, None)?;
        let (records, report) = curate_epgs(cfg, &corpus, &predictor, &bank, &epgs)?;
        if records.is_empty() {
            return Err(Error::Validation("curation accepted no pairs".into()));
        }
        write_json(&cur_report_path, &report)?;
        let selected = select_editor_pairs(&records, cfg.editor.max_pairs, cfg.editor.max_pairs_per_source);
        write_jsonl(&pairs, &selected).map(|_| ())
    })?;
    stages.push(("curate-epgs".to_string(), st));
    let curation: EpgsReport = read_json(&cur_report_path)?;

    let editor_dir = layout.editor_dir();
    let editor_cfg = (cfg.editor_config(), cfg.editor_train_config());
    let st = run_stage(
        &layout,
        "train-editor",
        &editor_cfg,
        &[pairs.clone(), codec_ckpt.clone()],
        &[layout.editor_ckpt()],
        || {
            // a fresh key means stale weights; start over
            let state = crate::diffusion::editor_paths(&editor_dir).1;
            if state.exists() {
                fs::remove_file(&state).map_err(|e| Error::io(&state, e))?;
            }
            train_editor_stage(cfg, &pairs, &codec_ckpt, &editor_dir).map(|_| ())
        },
    )?;
    stages.push(("train-editor".to_string(), st));
    let editor: EditorStageReport = read_json(&editor_dir.join("report.json"))?;

    let edits_dir = layout.edits_dir();
    let edit_cfg = (cfg.sampler_config(), cfg.critic, cfg.evaluate.sources);
    let st = run_stage(
        &layout,
        "edit",
        &edit_cfg,
        &[pairs.clone(), layout.editor_ckpt(), pred_ckpt.clone()],
        &[layout.triples_manifest()],
        || {
            let predictor = PredictorModel::load(&pred_ckpt)?;
            edit_stage(cfg, &pairs, &layout.editor_ckpt(), &predictor, &edits_dir).map(|_| ())
        },
    )?;
    stages.push(("edit".to_string(), st));
    let edit: EditStageReport = read_json(&edits_dir.join("report.json"))?;

    let report_dir = layout.report_dir();
    let st = run_stage(
        &layout,
        "evaluate",
        &cfg.evaluate,
        &[edits_dir.join("generated"), layout.triples_manifest(), pred_ckpt.clone()],
        &[report_dir.join("metrics.json")],
        || {
            let predictor = PredictorModel::load(&pred_ckpt)?;
            evaluate_stage(cfg, &layout.triples_manifest(), &predictor, &report_dir).map(|_| ())
        },
    )?;
    stages.push(("evaluate".to_string(), st));
    let metrics: MetricReport = read_json(&report_dir.join("metrics.json"))?;

    let summary = RunSummary {
        root: layout.root.clone(),
        stages,
        predictor_train_accuracy: pred_report.train_accuracy,
        codec_reconstruction_mae: codec_report.reconstruction_mae,
        curation,
        editor,
        edit,
        metrics,
    };
    write_json(&report_dir.join("summary.json"), &summary)?;
    Ok(summary)
}
