//! Evaluation harness: multiple-choice scoring in text and speech modes,
//! modality-gap reports, and accent-benchmark construction.
//!
//! Speech-mode scoring composes the full input path — transcription (or a
//! corruption channel standing in for it), prosody extraction, re-
//! segmentation, prosody injection, and the backbone forward — while text
//! mode feeds ground-truth text straight to the backbone. The gap between
//! the two accuracies is the quantity under study.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape};
use crate::backbone::{pair_merge_tokenize, Backbone, TapeSlot};
use crate::distill::CorruptionChannel;
use crate::error::{Error, Result};
use crate::inject::{InjectionMode, Projector};
use crate::recon::SpeechEncoder;
use crate::synth::{MelSpectrogram, UtteranceSpec};

/// Runtime speech inputs for one benchmark item.
#[derive(Debug, Clone)]
pub struct SpeechPayload {
    /// Recognizer-space ground-truth tokens of the spoken question.
    pub enc_tokens: Vec<u32>,
    /// Rendered acoustics (needed by the full encoder path).
    pub mel: Option<MelSpectrogram>,
    /// Precomputed prosody matrix (needed by the channel path).
    pub prosody: Option<Array2<f64>>,
    /// Per-item seed for the corruption channel.
    pub item_seed: u64,
}

#[derive(Debug, Clone)]
pub struct McItem {
    /// Backbone-space prompt tokens (ground-truth text).
    pub prompt: Vec<u32>,
    pub options: Vec<Vec<u32>>,
    pub correct: usize,
    pub audio_ref: Option<String>,
    pub attributes: Option<UtteranceSpec>,
    pub speech: Option<SpeechPayload>,
}

impl McItem {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::input("multiple choice needs at least two options"));
        }
        if self.correct >= self.options.len() {
            return Err(Error::input(format!(
                "correct index {} outside {} options",
                self.correct,
                self.options.len()
            )));
        }
        if self.options.iter().any(|o| o.is_empty()) {
            return Err(Error::input("options must be nonempty token sequences"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct McBenchmark {
    pub items: Vec<McItem>,
    /// Human-readable option labels when the options are fixed classes.
    pub class_names: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct McItemRecord {
    prompt: Vec<u32>,
    options: Vec<Vec<u32>>,
    correct: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    audio_ref: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    attributes: Option<UtteranceSpec>,
}

impl McBenchmark {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::input("benchmark is empty"));
        }
        for item in &self.items {
            item.validate()?;
        }
        Ok(())
    }

    /// Line-structured serialization (runtime speech payloads are not
    /// persisted; audio refs and attributes are).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        if let Some(names) = &self.class_names {
            out.push_str(&serde_json::to_string(&serde_json::json!({"class_names": names})).unwrap());
            out.push('\n');
        }
        for item in &self.items {
            let record = McItemRecord {
                prompt: item.prompt.clone(),
                options: item.options.clone(),
                correct: item.correct,
                audio_ref: item.audio_ref.clone(),
                attributes: item.attributes.clone(),
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<McBenchmark> {
        let text = std::fs::read_to_string(path)?;
        let mut items = Vec::new();
        let mut class_names = None;
        for line in text.lines() {
            if line.contains("\"class_names\"") && class_names.is_none() && items.is_empty() {
                #[derive(Deserialize)]
                struct Header {
                    class_names: Vec<String>,
                }
                let h: Header = serde_json::from_str(line)
                    .map_err(|e| Error::format(format!("benchmark header: {e}")))?;
                class_names = Some(h.class_names);
                continue;
            }
            let r: McItemRecord = serde_json::from_str(line)
                .map_err(|e| Error::format(format!("benchmark item: {e}")))?;
            items.push(McItem {
                prompt: r.prompt,
                options: r.options,
                correct: r.correct,
                audio_ref: r.audio_ref,
                attributes: r.attributes,
                speech: None,
            });
        }
        Ok(McBenchmark { items, class_names })
    }
}

/// Anything that can score an item's options; higher is better.
pub trait OptionScorer: Sync {
    fn score_options(&self, item: &McItem) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct McEval {
    pub accuracy: f64,
    pub picks: Vec<usize>,
}

/// Scores every option of every item, picks the argmax (ties go to the
/// lowest option index), and returns the fraction correct.
pub fn eval_mc(scorer: &dyn OptionScorer, bench: &McBenchmark) -> Result<McEval> {
    bench.validate()?;
    let picks: Result<Vec<usize>> = bench
        .items
        .par_iter()
        .map(|item| {
            let scores = scorer.score_options(item)?;
            if scores.len() != item.options.len() {
                return Err(Error::input(format!(
                    "scorer returned {} scores for {} options",
                    scores.len(),
                    item.options.len()
                )));
            }
            let mut best = 0usize;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = i;
                }
            }
            Ok(best)
        })
        .collect();
    let picks = picks?;
    let correct = picks
        .iter()
        .zip(&bench.items)
        .filter(|(&p, item)| p == item.correct)
        .count();
    Ok(McEval {
        accuracy: correct as f64 / bench.items.len() as f64,
        picks,
    })
}

/// Length-normalized log-likelihood of `option` as the continuation of the
/// assembled QA sequence.
fn option_loglik(
    backbone: &Backbone,
    ps: &ParamSet,
    speech: Option<(&Projector, &Array2<f64>, InjectionMode)>,
    prompt: &[u32],
    option: &[u32],
) -> Result<f64> {
    let mut tape = Tape::new();
    let speech_on_tape = speech.map(|(proj, prosody, mode)| {
        let v = tape.constant(prosody.clone());
        (proj, v, mode)
    });
    let (slots, sep) = backbone.assemble_qa_on_tape(&mut tape, ps, speech_on_tape, prompt, option)?;
    let logits = backbone.forward_slots_on_tape(&mut tape, ps, &slots);
    let lv = tape.value(logits);
    let mut total = 0.0;
    for (k, &t) in option.iter().enumerate() {
        let row = lv.row(sep + k);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        total += row[t as usize] - lse;
    }
    Ok(total / option.len() as f64)
}

/// Text-mode scorer: ground-truth prompt straight into the backbone.
pub struct TextScorer<'a> {
    pub backbone: &'a Backbone,
    pub ps: &'a ParamSet,
    pub trace: std::sync::Mutex<Vec<&'static str>>,
}

impl<'a> TextScorer<'a> {
    pub fn new(backbone: &'a Backbone, ps: &'a ParamSet) -> Self {
        TextScorer {
            backbone,
            ps,
            trace: std::sync::Mutex::new(Vec::new()),
        }
    }

    pub fn take_trace(&self) -> Vec<&'static str> {
        std::mem::take(&mut self.trace.lock().expect("trace lock"))
    }
}

impl OptionScorer for TextScorer<'_> {
    fn score_options(&self, item: &McItem) -> Result<Vec<f64>> {
        self.trace.lock().expect("trace lock").push("backbone_forward");
        item.options
            .iter()
            .map(|opt| option_loglik(self.backbone, self.ps, None, &item.prompt, opt))
            .collect()
    }
}

/// Where the speech-mode scorer gets its recognizer text.
pub enum SpeechSource<'a> {
    /// Run the full recognizer: transcribe the item's mel and extract
    /// prosody from it (conditioned on the model transcript).
    Encoder(&'a SpeechEncoder),
    /// Corruption channel over the item's recognizer-space tokens, with
    /// precomputed prosody.
    Channel(&'a CorruptionChannel),
}

/// Speech-mode scorer: recognizer text (real or corrupted) re-segmented into
/// backbone tokens, prosody injected via the projector.
pub struct SpeechScorer<'a> {
    pub backbone: &'a Backbone,
    pub ps: &'a ParamSet,
    pub projector: &'a Projector,
    pub mode: InjectionMode,
    pub source: SpeechSource<'a>,
    /// Base alphabet of the pair-merging re-segmentation.
    pub merge_base: u32,
    /// Replace every injected embedding with zeros (ablation arm).
    pub zero_embed: bool,
    pub trace: std::sync::Mutex<Vec<&'static str>>,
}

impl<'a> SpeechScorer<'a> {
    pub fn new(
        backbone: &'a Backbone,
        ps: &'a ParamSet,
        projector: &'a Projector,
        mode: InjectionMode,
        source: SpeechSource<'a>,
        merge_base: u32,
    ) -> Self {
        SpeechScorer {
            backbone,
            ps,
            projector,
            mode,
            source,
            merge_base,
            zero_embed: false,
            trace: std::sync::Mutex::new(Vec::new()),
        }
    }

    pub fn take_trace(&self) -> Vec<&'static str> {
        std::mem::take(&mut self.trace.lock().expect("trace lock"))
    }

    /// Derives (backbone text, prosody) from the item's speech payload.
    fn speech_inputs(&self, item: &McItem) -> Result<(Vec<u32>, Array2<f64>)> {
        let payload = item
            .speech
            .as_ref()
            .ok_or_else(|| Error::input("item has no speech payload"))?;
        match &self.source {
            SpeechSource::Encoder(encoder) => {
                let mel = payload
                    .mel
                    .as_ref()
                    .ok_or_else(|| Error::input("encoder path needs the item's mel"))?;
                self.trace.lock().expect("trace lock").push("transcribe");
                let asr_tokens = encoder.asr.transcribe(&encoder.params, mel)?;
                if asr_tokens.is_empty() {
                    // an unusable transcript falls back to a single filler id
                    let text = vec![0u32];
                    let prosody = Array2::zeros((1, encoder.asr.cfg.d));
                    return Ok((text, prosody));
                }
                self.trace.lock().expect("trace lock").push("extract_prosody");
                let prosody = encoder.asr.extract_prosody(
                    &encoder.params,
                    mel,
                    &asr_tokens,
                    encoder.asr.cfg.prosody_layer,
                )?;
                let text = pair_merge_tokenize(&asr_tokens, self.merge_base)?;
                Ok((text, prosody))
            }
            SpeechSource::Channel(channel) => {
                let prosody = payload
                    .prosody
                    .as_ref()
                    .ok_or_else(|| Error::input("channel path needs precomputed prosody"))?;
                let asr_tokens = channel.corrupt(&payload.enc_tokens, payload.item_seed);
                let text = pair_merge_tokenize(&asr_tokens, self.merge_base)?;
                Ok((text, prosody.clone()))
            }
        }
    }
}

impl OptionScorer for SpeechScorer<'_> {
    fn score_options(&self, item: &McItem) -> Result<Vec<f64>> {
        let (text, prosody) = self.speech_inputs(item)?;
        {
            let mut trace = self.trace.lock().expect("trace lock");
            trace.push("inject");
            trace.push("backbone_forward");
        }
        item.options
            .iter()
            .map(|opt| {
                if self.zero_embed {
                    // bypass the projector entirely: zero embedding slots
                    score_with_zero_embeds(
                        self.backbone,
                        self.ps,
                        &text,
                        &prosody,
                        self.mode,
                        opt,
                    )
                } else {
                    option_loglik(
                        self.backbone,
                        self.ps,
                        Some((self.projector, &prosody, self.mode)),
                        &text,
                        opt,
                    )
                }
            })
            .collect()
    }
}

/// Scores with every injected embedding replaced by a zero vector (the
/// "untrained prosody slot" ablation).
fn score_with_zero_embeds(
    backbone: &Backbone,
    ps: &ParamSet,
    text: &[u32],
    prosody: &Array2<f64>,
    mode: InjectionMode,
    option: &[u32],
) -> Result<f64> {
    let mut tape = Tape::new();
    let layout = match mode {
        InjectionMode::Global => crate::inject::InterleaveLayout {
            m: 1,
            text_groups: vec![0..text.len()],
            prosody_groups: vec![0..prosody.nrows()],
        },
        InjectionMode::Interleave { ratio } => {
            crate::inject::interleave_layout(text.len(), prosody.nrows(), ratio)?
        }
    };
    let zero = tape.constant(Array2::zeros((1, backbone.cfg.d_llm)));
    let mut slots = Vec::new();
    for j in 0..layout.m {
        slots.push(TapeSlot::Embed(zero));
        for &t in &text[layout.text_groups[j].clone()] {
            slots.push(TapeSlot::Token(t as usize));
        }
    }
    let sep = slots.len();
    slots.push(TapeSlot::Token(backbone.cfg.sep() as usize));
    slots.extend(option.iter().map(|&t| TapeSlot::Token(t as usize)));
    let logits = backbone.forward_slots_on_tape(&mut tape, ps, &slots);
    let lv = tape.value(logits);
    let mut total = 0.0;
    for (k, &t) in option.iter().enumerate() {
        let row = lv.row(sep + k);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        total += row[t as usize] - lse;
    }
    Ok(total / option.len() as f64)
}

/// The modality gap: text-mode accuracy minus speech-mode accuracy. May be
/// negative.
pub fn modality_gap(acc_text: f64, acc_speech: f64) -> f64 {
    acc_text - acc_speech
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GapRow {
    pub benchmark: String,
    pub acc_text: f64,
    pub acc_speech: f64,
    pub gap: f64,
}

/// Paired text/speech accuracies per benchmark plus averages; gaps are
/// computed at construction so each row's gap is exactly the difference of
/// its accuracies.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
    pub avg_text: f64,
    pub avg_speech: f64,
    pub avg_gap: f64,
}

impl GapReport {
    pub fn new(pairs: Vec<(String, f64, f64)>) -> Result<GapReport> {
        if pairs.is_empty() {
            return Err(Error::input("gap report needs at least one benchmark"));
        }
        let rows: Vec<GapRow> = pairs
            .into_iter()
            .map(|(benchmark, acc_text, acc_speech)| GapRow {
                benchmark,
                acc_text,
                acc_speech,
                gap: modality_gap(acc_text, acc_speech),
            })
            .collect();
        let n = rows.len() as f64;
        let avg_text = rows.iter().map(|r| r.acc_text).sum::<f64>() / n;
        let avg_speech = rows.iter().map(|r| r.acc_speech).sum::<f64>() / n;
        Ok(GapReport {
            avg_text,
            avg_speech,
            avg_gap: rows.iter().map(|r| r.gap).sum::<f64>() / n,
            rows,
        })
    }

    pub fn check(&self) -> Result<()> {
        for row in &self.rows {
            if row.gap != row.acc_text - row.acc_speech {
                return Err(Error::format(format!(
                    "gap row '{}' is inconsistent",
                    row.benchmark
                )));
            }
        }
        Ok(())
    }

    /// Machine record file (one JSON row per benchmark plus a summary row).
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("row serializes"));
            out.push('\n');
        }
        out.push_str(
            &serde_json::to_string(&serde_json::json!({
                "benchmark": "Avg.",
                "acc_text": self.avg_text,
                "acc_speech": self.avg_speech,
                "gap": self.avg_gap,
            }))
            .expect("summary serializes"),
        );
        out.push('\n');
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Rendered text table: one Acc./Gap column pair per benchmark plus the
    /// average, accuracies in percent.
    pub fn render_table(&self) -> String {
        let mut header = String::from("|            |");
        let mut line = String::from("|------------|");
        let mut acc_row = String::from("| Acc. (spk) |");
        let mut gap_row = String::from("| Gap        |");
        for row in self.rows.iter() {
            header.push_str(&format!(" {:>9} |", truncate(&row.benchmark, 9)));
            line.push_str("-----------|");
            acc_row.push_str(&format!(" {:>9.1} |", row.acc_speech * 100.0));
            gap_row.push_str(&format!(" {:>9.1} |", row.gap * 100.0));
        }
        header.push_str("      Avg. |");
        line.push_str("-----------|");
        acc_row.push_str(&format!(" {:>9.1} |", self.avg_speech * 100.0));
        gap_row.push_str(&format!(" {:>9.1} |", self.avg_gap * 100.0));
        format!("{header}\n{line}\n{acc_row}\n{gap_row}\n")
    }
}

fn truncate(s: &str, n: usize) -> &str {
    if s.len() <= n {
        s
    } else {
        &s[..n]
    }
}

/// A raw labeled record feeding the accent benchmark builder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccentRecord {
    pub audio_ref: String,
    pub accent: String,
}

/// Maps raw accent strings to the four benchmark classes: three classes
/// match their label string exactly; a whitelist of regional strings maps to
/// the aggregate class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccentMapping {
    pub classes: Vec<String>,
    pub aggregate_class: usize,
    pub aggregate_strings: Vec<String>,
}

impl AccentMapping {
    /// The benchmark's label set and aggregate-region whitelist.
    pub fn common_voice_default() -> AccentMapping {
        AccentMapping {
            classes: vec![
                "United States English".to_string(),
                "England English".to_string(),
                "India and South Asia (India, Pakistan, Sri Lanka)".to_string(),
                "Europe".to_string(),
            ],
            aggregate_class: 3,
            aggregate_strings: [
                "German",
                "French",
                "Russian",
                "German English",
                "Dutch",
                "Icelandic",
                "Dutch English",
                "Polish",
                "German Accent",
                "French Accent",
                "Slovak",
                "Deutsch English",
                "English with a French accent",
                "German native",
                "native Dutch speaking",
                "Swedish",
                "Finnish",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }

    /// Class index for a raw accent string; `None` when unmapped.
    pub fn map(&self, accent: &str) -> Option<usize> {
        for (i, class) in self.classes.iter().enumerate() {
            if i != self.aggregate_class && class == accent {
                return Some(i);
            }
        }
        if self.aggregate_strings.iter().any(|s| s == accent) {
            return Some(self.aggregate_class);
        }
        None
    }
}

/// Unmapped-record accounting from the accent builder.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SkipReport {
    pub skipped: usize,
    pub by_string: BTreeMap<String, usize>,
}

/// Builds the four-class accent benchmark: maps records through the label
/// mapping, samples each class to its target count with a seeded shuffle,
/// and gives every item the same four options (option token = class index)
/// in fixed order. Unmapped records are skipped and counted.
pub fn build_accent_benchmark(
    records: &[AccentRecord],
    mapping: &AccentMapping,
    per_class_targets: &[usize],
    seed: u64,
) -> Result<(McBenchmark, SkipReport)> {
    if per_class_targets.len() != mapping.classes.len() {
        return Err(Error::config(format!(
            "{} targets for {} classes",
            per_class_targets.len(),
            mapping.classes.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); mapping.classes.len()];
    let mut skip = SkipReport::default();
    for (i, record) in records.iter().enumerate() {
        match mapping.map(&record.accent) {
            Some(class) => by_class[class].push(i),
            None => {
                skip.skipped += 1;
                *skip.by_string.entry(record.accent.clone()).or_insert(0) += 1;
            }
        }
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < per_class_targets[class] {
            return Err(Error::input(format!(
                "class '{}' has {} records, {} short of the target {}",
                mapping.classes[class],
                members.len(),
                per_class_targets[class] - members.len(),
                per_class_targets[class]
            )));
        }
    }
    let options: Vec<Vec<u32>> = (0..mapping.classes.len() as u32).map(|c| vec![c]).collect();
    let mut items = Vec::new();
    for (class, members) in by_class.iter().enumerate() {
        let mut order = members.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::util::derive_seed(seed, class as u64));
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for &idx in order.iter().take(per_class_targets[class]) {
            items.push(McItem {
                prompt: vec![0],
                options: options.clone(),
                correct: class,
                audio_ref: Some(records[idx].audio_ref.clone()),
                attributes: None,
                speech: None,
            });
        }
    }
    Ok((
        McBenchmark {
            items,
            class_names: Some(mapping.classes.clone()),
        },
        skip,
    ))
}
