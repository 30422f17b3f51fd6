//! Config-driven experiment runner.
//!
//! Stages run in a fixed order (`gen-data`, `train-encoder`, `probe`,
//! `build-kd-data`, `train-backbone`, `evaluate`, `report`), each writing a
//! completion marker carrying the config digest; a rerun with the same
//! config skips completed stages unless forced. A lock file serializes runs
//! on one artifact directory, and every stage's file reads are checked
//! against its declared inputs.
//!
//! The distillation teacher and the text-mode base model are trained during
//! `build-kd-data` (data collection queries the teacher, which therefore has
//! to exist before the student stages run).

pub mod config;
pub mod report;
pub mod tasks;

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::asr::token_accuracy;
use crate::autodiff::ParamSet;
use crate::backbone::{write_stage_metrics, Backbone, BackboneConfig};
use crate::distill::{
    load_kd_examples, read_kd_records, train_student_two_stage, write_kd_records, KdRecord,
};
use crate::error::{Error, Result};
use crate::eval::{eval_mc, GapReport, SpeechScorer, SpeechSource, TextScorer};
use crate::inject::Projector;
use crate::probe::run_probe_cv;
use crate::recon::{train_speech_encoder, write_loss_records, SpeechEncoder};
use crate::synth::{make_dataset, Dataset};
use crate::util::seed_for;
use config::{ExperimentConfig, STAGE_NAMES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Exclusive lock on an artifact directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::input(format!(
                "artifact directory is locked by another run (stale? delete {})",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Per-stage filesystem view with input accounting: reads must fall under
/// the stage's declared inputs.
pub struct StageCtx {
    root: PathBuf,
    stage: &'static str,
    declared_inputs: Vec<&'static str>,
    accessed: Mutex<Vec<String>>,
}

impl StageCtx {
    pub fn new(root: &Path, stage: &'static str, declared_inputs: Vec<&'static str>) -> StageCtx {
        StageCtx {
            root: root.to_path_buf(),
            stage,
            declared_inputs,
            accessed: Mutex::new(Vec::new()),
        }
    }

    /// Resolves an input path, recording the access and rejecting reads
    /// outside the declared inputs.
    pub fn input(&self, rel: &str) -> Result<PathBuf> {
        let allowed = self
            .declared_inputs
            .iter()
            .any(|prefix| rel == *prefix || rel.starts_with(&format!("{prefix}/")));
        if !allowed {
            return Err(Error::config(format!(
                "stage '{}' read '{rel}' outside its declared inputs {:?}",
                self.stage, self.declared_inputs
            )));
        }
        self.accessed.lock().expect("accessed lock").push(rel.to_string());
        Ok(self.root.join(rel))
    }

    /// Resolves an output path under the stage's own directory, creating
    /// parent directories.
    pub fn output(&self, rel: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(path)
    }

    pub fn accessed(&self) -> Vec<String> {
        self.accessed.lock().expect("accessed lock").clone()
    }
}

#[derive(Serialize, Deserialize)]
struct Marker {
    stage: String,
    config_digest: String,
    inputs_read: Vec<String>,
}

fn marker_path(root: &Path, stage: &str) -> PathBuf {
    root.join("markers").join(format!("{stage}.done"))
}

fn stage_inputs(stage: &str) -> Vec<&'static str> {
    match stage {
        "gen-data" => vec![],
        "train-encoder" => vec!["data"],
        "probe" => vec!["data", "encoder"],
        "build-kd-data" => vec!["encoder"],
        "train-backbone" => vec!["kd"],
        "evaluate" => vec!["kd", "backbone"],
        "report" => vec!["data", "encoder", "probe", "kd", "backbone", "eval"],
        other => unreachable!("unknown stage {other}"),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

/// Runs the selected stages in pipeline order. `stage_filter` (from
/// `--stages`) further restricts the config's stage list without reordering.
pub fn run(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    force: bool,
    stage_filter: Option<&[String]>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let _lock = DirLock::acquire(out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml_string())?;
    let digest = cfg.digest();

    let selected: Vec<&str> = STAGE_NAMES
        .iter()
        .copied()
        .filter(|s| cfg.stages.iter().any(|c| c == s))
        .filter(|s| {
            stage_filter
                .map(|f| f.iter().any(|x| x == s))
                .unwrap_or(true)
        })
        .collect();
    if let Some(filter) = stage_filter {
        for stage in filter {
            if !STAGE_NAMES.contains(&stage.as_str()) {
                return Err(Error::config(format!("--stages: unknown stage '{stage}'")));
            }
        }
    }

    let mut outcome = RunOutcome {
        executed: Vec::new(),
        skipped: Vec::new(),
    };
    for stage in selected {
        let marker = marker_path(out_dir, stage);
        if !force && marker.is_file() {
            let text = std::fs::read_to_string(&marker)?;
            if let Ok(m) = serde_json::from_str::<Marker>(&text) {
                if m.config_digest == digest {
                    outcome.skipped.push(stage.to_string());
                    continue;
                }
            }
        }
        let ctx = StageCtx::new(out_dir, stage_static(stage), stage_inputs(stage));
        run_stage(cfg, stage, &ctx)?;
        std::fs::create_dir_all(out_dir.join("markers"))?;
        let marker_body = Marker {
            stage: stage.to_string(),
            config_digest: digest.clone(),
            inputs_read: ctx.accessed(),
        };
        std::fs::write(
            &marker,
            serde_json::to_string_pretty(&marker_body).expect("marker serializes"),
        )?;
        outcome.executed.push(stage.to_string());
    }
    Ok(outcome)
}

fn stage_static(stage: &str) -> &'static str {
    STAGE_NAMES
        .iter()
        .copied()
        .find(|s| *s == stage)
        .expect("stage validated")
}

fn run_stage(cfg: &ExperimentConfig, stage: &str, ctx: &StageCtx) -> Result<()> {
    match stage {
        "gen-data" => stage_gen_data(cfg, ctx),
        "train-encoder" => stage_train_encoder(cfg, ctx),
        "probe" => stage_probe(cfg, ctx),
        "build-kd-data" => stage_build_kd_data(cfg, ctx),
        "train-backbone" => stage_train_backbone(cfg, ctx),
        "evaluate" => stage_evaluate(cfg, ctx),
        "report" => stage_report(cfg, ctx),
        other => Err(Error::config(format!("unknown stage '{other}'"))),
    }
}

fn stage_gen_data(cfg: &ExperimentConfig, ctx: &StageCtx) -> Result<()> {
    let dataset = make_dataset(
        cfg.data.n_items,
        &cfg.data.distribution(),
        &cfg.data.render(),
        seed_for(cfg.master_seed, "dataset"),
        cfg.data.fractions(),
    )?;
    let dir = ctx.output("data/manifest.jsonl")?;
    dataset.save(dir.parent().expect("data dir"))?;
    Ok(())
}

fn stage_train_encoder(cfg: &ExperimentConfig, ctx: &StageCtx) -> Result<()> {
    let dataset = Dataset::load(&ctx.input("data")?)?;
    let (encoder, records) = train_speech_encoder(
        &dataset,
        cfg.asr_config(),
        cfg.recon_config(),
        &cfg.encoder_train_config(),
    )?;
    encoder.save(&ctx.output("encoder/encoder.ckpt")?)?;
    write_loss_records(&ctx.output("encoder/loss.jsonl")?, &records)?;

    // transcription quality over the val split, for the report
    let val = dataset.split_items(crate::synth::Split::Val);
    if !val.is_empty() {
        let accs: Vec<f64> = val
            .iter()
            .map(|item| {
                let hyp = encoder.asr.transcribe(&encoder.params, &item.mel)?;
                Ok(token_accuracy(&item.transcript, &hyp))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        std::fs::write(
            ctx.output("encoder/asr_accuracy.json")?,
            serde_json::to_string(&serde_json::json!({"val_token_accuracy": mean}))
                .expect("serializes"),
        )?;
    }
    Ok(())
}

/// Utterance-level embedding: mean-pooled prosody rows, teacher-forced on the
/// ground-truth transcript.
fn pooled_embeddings(encoder: &SpeechEncoder, dataset: &Dataset) -> Result<ndarray::Array2<f64>> {
    use rayon::prelude::*;
    let rows: Result<Vec<Vec<f64>>> = dataset
        .items
        .par_iter()
        .map(|item| {
            let prosody = encoder.asr.extract_prosody(
                &encoder.params,
                &item.mel,
                &item.transcript,
                encoder.asr.cfg.prosody_layer,
            )?;
            Ok(crate::inject::pool_global(&prosody)?.to_vec())
        })
        .collect();
    let rows = rows?;
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut out = ndarray::Array2::zeros((rows.len(), d));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

fn attribute_labels(dataset: &Dataset, attribute: &str) -> Vec<usize> {
    dataset
        .items
        .iter()
        .map(|item| match attribute {
            "speaker" => item.spec.speaker_id as usize,
            "pitch" => item.spec.pitch_level as usize,
            "energy" => item.spec.energy_level as usize,
            _ => item.spec.emotion as usize,
        })
        .collect()
}

fn stage_probe(cfg: &ExperimentConfig, ctx: &StageCtx) -> Result<()> {
    let dataset = Dataset::load(&ctx.input("data")?)?;
    let encoder = SpeechEncoder::load(&ctx.input("encoder/encoder.ckpt")?)?;
    let embeddings = pooled_embeddings(&encoder, &dataset)?;
    let probe_cfg = cfg.probe.probe_config()?;
    for attribute in &cfg.probe.attributes {
        let labels = attribute_labels(&dataset, attribute);
        let report = run_probe_cv(
            &embeddings,
            &labels,
            &probe_cfg,
            seed_for(cfg.master_seed, &format!("probe-{attribute}")),
        )?;
        report.write(&ctx.output(&format!("probe/{attribute}.jsonl"))?)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EvalItemRecord {
    enc_tokens: Vec<u32>,
    gt_text: Vec<u32>,
    prosody_path: String,
    answer: u32,
    item_seed: u64,
}

/// Student/projector checkpoint config record.
#[derive(Serialize, Deserialize)]
struct LmCheckpointConfig {
    backbone: BackboneConfig,
    proj_in: usize,
    proj_out: usize,
}

fn save_lm(
    path: &Path,
    backbone: &Backbone,
    ps: &ParamSet,
    proj_in: usize,
    proj_out: usize,
) -> Result<()> {
    let cfg = LmCheckpointConfig {
        backbone: backbone.cfg.clone(),
        proj_in,
        proj_out,
    };
    crate::io::save_checkpoint(
        path,
        &serde_json::to_string(&cfg).expect("config serializes"),
        &ps.export_tensors(),
    )
}

fn load_lm(path: &Path, seed: u64) -> Result<(Backbone, Projector, ParamSet)> {
    let ck = crate::io::load_checkpoint(path)?;
    let cfg: LmCheckpointConfig = serde_json::from_str(&ck.config_json)
        .map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
    let mut ps = ParamSet::new();
    let backbone = Backbone::new(&mut ps, cfg.backbone, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, "proj-init"));
    let projector = Projector::new(&mut ps, "proj", cfg.proj_in, cfg.proj_out, &mut rng);
    ps.import_tensors(&ck.tensors)?;
    Ok((backbone, projector, ps))
}

fn stage_build_kd_data(cfg: &ExperimentConfig, ctx: &StageCtx) -> Result<()> {
    let encoder = SpeechEncoder::load(&ctx.input("encoder/encoder.ckpt")?)?;
    let attrs = tasks::TaskAttrs {
        n_speakers: cfg.data.n_speakers,
        n_pitch: cfg.data.n_pitch,
        n_energy: cfg.data.n_energy,
        n_emotion: cfg.data.n_emotion,
    };
    let n_total = cfg.kd.n_examples + cfg.eval.n_benchmark_items;
    let items = tasks::gen_kv_qa_items(n_total, &attrs, seed_for(cfg.master_seed, "qa-items"));
    let channel = cfg.corruption_channel();
    let prepared = tasks::prepare_items(&items, &encoder, &cfg.data.render(), &channel)?;
    let (train_items, eval_items) = prepared.split_at(cfg.kd.n_examples);

    // the distillation teacher and the text-mode base model; training them
    // here keeps them available before responses are collected
    let setting = cfg.kd.setting()?;
    let text_examples: Vec<crate::backbone::StageExample> = train_items
        .iter()
        .map(|item| crate::backbone::StageExample {
            text: item.gt_text.clone(),
            prosody: None,
            response: vec![item.answer],
        })
        .collect();
    let base_plan = crate::backbone::TrainStagePlan {
        stage: 2,
        lr: cfg.backbone_train.base_lr,
        epochs: cfg.backbone_train.base_epochs,
        batch_size: cfg.backbone_train.batch_size,
        batch_nominal: cfg.backbone_train.batch_nominal,
        seed: seed_for(cfg.master_seed, "base-train"),
        injection: cfg.injection.mode()?,
    };

    let mut teacher_ps = ParamSet::new();
    let teacher = Backbone::new(
        &mut teacher_ps,
        cfg.teacher_config(),
        seed_for(cfg.master_seed, "teacher-init"),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.master_seed, "teacher-proj"));
    let teacher_proj = Projector::new(&mut teacher_ps, "proj", cfg.encoder.d, cfg.backbone.teacher_d_llm, &mut rng);
    crate::backbone::train_stage(
        &teacher,
        &teacher_proj,
        &mut teacher_ps,
        &text_examples,
        &base_plan,
        None,
    )?;
    save_lm(
        &ctx.output("kd/teacher.ckpt")?,
        &teacher,
        &teacher_ps,
        cfg.encoder.d,
        cfg.backbone.teacher_d_llm,
    )?;

    let mut base_ps = ParamSet::new();
    let base = Backbone::new(
        &mut base_ps,
        cfg.backbone_config(),
        seed_for(cfg.master_seed, "base-init"),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.master_seed, "base-proj"));
    let base_proj = Projector::new(&mut base_ps, "proj", cfg.encoder.d, cfg.backbone.d_llm, &mut rng);
    crate::backbone::train_stage(&base, &base_proj, &mut base_ps, &text_examples, &base_plan, None)?;
    save_lm(
        &ctx.output("kd/base.ckpt")?,
        &base,
        &base_ps,
        cfg.encoder.d,
        cfg.backbone.d_llm,
    )?;

    // teacher responses, queried on the setting's teacher-side text
    let mut records = Vec::with_capacity(train_items.len());
    for (i, item) in train_items.iter().enumerate() {
        let teacher_text = match setting {
            crate::distill::SourceSetting::AsrqAsra => &item.asr_text,
            _ => &item.gt_text,
        };
        let response = teacher.greedy_response(&teacher_ps, teacher_text, 1)?;
        let prosody_path = format!("kd/prosody/train_{i:05}.mat");
        crate::io::write_matrix_f32(&ctx.output(&prosody_path)?, &item.prosody)?;
        records.push(KdRecord {
            gt_text: item.gt_text.clone(),
            asr_text: item.asr_text.clone(),
            prosody_path,
            response,
            setting,
        });
    }
    write_kd_records(&ctx.output("kd/train.jsonl")?, &records)?;

    let mut eval_records = Vec::with_capacity(eval_items.len());
    for (i, item) in eval_items.iter().enumerate() {
        let prosody_path = format!("kd/prosody/eval_{i:05}.mat");
        crate::io::write_matrix_f32(&ctx.output(&prosody_path)?, &item.prosody)?;
        eval_records.push(EvalItemRecord {
            enc_tokens: item.gt_enc_tokens.clone(),
            gt_text: item.gt_text.clone(),
            prosody_path,
            answer: item.answer,
            item_seed: item.item_seed,
        });
    }
    let mut out = String::new();
    for r in &eval_records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(ctx.output("kd/eval.jsonl")?, out)?;
    Ok(())
}

fn stage_train_backbone(cfg: &ExperimentConfig, ctx: &StageCtx) -> Result<()> {
    let records = read_kd_records(&ctx.input("kd/train.jsonl")?)?;
    let examples = load_kd_examples(&ctx.input("kd")?.parent().expect("root"), &records)?;
    let kd_cfg = cfg.kd.kd_config()?;

    let (student, projector, mut student_ps) = load_lm(
        &ctx.input("kd/base.ckpt")?,
        seed_for(cfg.master_seed, "student"),
    )?;
    let teacher_loaded;
    let teacher_ref = if kd_cfg.alpha > 0.0 {
        teacher_loaded = load_lm(
            &ctx.input("kd/teacher.ckpt")?,
            seed_for(cfg.master_seed, "teacher-load"),
        )?;
        Some((&teacher_loaded.0, &teacher_loaded.2))
    } else {
        None
    };

    let metrics = train_student_two_stage(
        &student,
        &projector,
        &mut student_ps,
        teacher_ref,
        &examples,
        &kd_cfg,
        &cfg.stage_plan(1),
        &cfg.stage_plan(2),
    )?;
    write_stage_metrics(&ctx.output("backbone/metrics.jsonl")?, &metrics)?;
    save_lm(
        &ctx.output("backbone/student.ckpt")?,
        &student,
        &student_ps,
        cfg.encoder.d,
        cfg.backbone.d_llm,
    )?;
    Ok(())
}

fn load_eval_bench(cfg: &ExperimentConfig, ctx: &StageCtx) -> Result<crate::eval::McBenchmark> {
    let text = std::fs::read_to_string(ctx.input("kd/eval.jsonl")?)?;
    let root = ctx.input("kd")?.parent().expect("root").to_path_buf();
    let options: Vec<Vec<u32>> = (0..tasks::QA_N_VALUES).map(|v| vec![v]).collect();
    let mut items = Vec::new();
    for line in text.lines() {
        let r: EvalItemRecord =
            serde_json::from_str(line).map_err(|e| Error::format(format!("eval record: {e}")))?;
        let prosody = crate::io::read_matrix(&root.join(&r.prosody_path))?;
        items.push(crate::eval::McItem {
            prompt: r.gt_text,
            options: options.clone(),
            correct: r.answer as usize,
            audio_ref: None,
            attributes: None,
            speech: Some(crate::eval::SpeechPayload {
                enc_tokens: r.enc_tokens,
                mel: None,
                prosody: Some(prosody),
                item_seed: r.item_seed,
            }),
        });
    }
    let _ = cfg;
    Ok(crate::eval::McBenchmark {
        items,
        class_names: None,
    })
}

fn stage_evaluate(cfg: &ExperimentConfig, ctx: &StageCtx) -> Result<()> {
    let bench = load_eval_bench(cfg, ctx)?;
    let (base, _base_proj, base_ps) = load_lm(
        &ctx.input("kd/base.ckpt")?,
        seed_for(cfg.master_seed, "base-eval"),
    )?;
    let (student, student_proj, student_ps) = load_lm(
        &ctx.input("backbone/student.ckpt")?,
        seed_for(cfg.master_seed, "student-eval"),
    )?;

    let text_scorer = TextScorer::new(&base, &base_ps);
    let acc_text = eval_mc(&text_scorer, &bench)?.accuracy;

    let channel = cfg.corruption_channel();
    let speech_scorer = SpeechScorer::new(
        &student,
        &student_ps,
        &student_proj,
        cfg.injection.mode()?,
        SpeechSource::Channel(&channel),
        cfg.data.vocab_size,
    );
    let acc_speech = eval_mc(&speech_scorer, &bench)?.accuracy;

    let report = GapReport::new(vec![("synthetic-qa".to_string(), acc_text, acc_speech)])?;
    report.check()?;
    report.write(&ctx.output("eval/gap.jsonl")?)?;
    std::fs::write(ctx.output("eval/gap_table.txt")?, report.render_table())?;
    Ok(())
}

fn stage_report(cfg: &ExperimentConfig, ctx: &StageCtx) -> Result<()> {
    // reads are whole-directory; record them against the declared inputs
    for dir in ["probe", "eval", "encoder", "backbone"] {
        let _ = ctx.input(dir)?;
    }
    report::render_run(&ctx.output("report/summary.txt")?.parent().expect("report dir").parent().expect("root").to_path_buf(), true, cfg.eval.plots)?;
    Ok(())
}

/// Runs a sweep: expands the axes over the base config, runs each combo in
/// `out/sweep_NNN/`, and renders the aggregate report.
pub fn run_sweep(
    base_toml: &str,
    axes: &[config::SweepAxis],
    out_dir: &Path,
    force: bool,
) -> Result<Vec<RunOutcome>> {
    let expanded = config::expand_sweep(base_toml, axes)?;
    std::fs::create_dir_all(out_dir)?;
    let mut outcomes = Vec::with_capacity(expanded.len());
    for (i, (assignments, cfg)) in expanded.iter().enumerate() {
        let sub = out_dir.join(format!("sweep_{i:03}"));
        std::fs::create_dir_all(&sub)?;
        std::fs::write(
            sub.join("sweep.json"),
            serde_json::to_string_pretty(&serde_json::json!({ "assignments": assignments }))
                .expect("serializes"),
        )?;
        outcomes.push(run(cfg, &sub, force, None)?);
    }
    report::render_sweep(out_dir, true)?;
    Ok(outcomes)
}
