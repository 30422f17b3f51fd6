//! Synthetic experiment tasks.
//!
//! Key-value QA: the spoken utterance is `[k1, v1, k2, v2, q]` over a 7-id
//! base alphabet (values 0..4, keys 4..7) with `q` one of the two keys; the
//! answer is the queried value. Recognizer errors on any of the relevant
//! tokens destroy information, so a corruption channel opens a modality gap
//! by construction.
//!
//! Emotion task: the transcript is fixed for every item while the emotion
//! factor (and the other prosodic factors, as distractors) vary, so the
//! answer is recoverable only from the prosody stream.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::pair_merge_tokenize;
use crate::distill::{CorruptionChannel, KdExample};
use crate::error::Result;
use crate::eval::{McBenchmark, McItem, SpeechPayload};
use crate::recon::SpeechEncoder;
use crate::synth::{render_mel, RenderConfig, UtteranceSpec};
use crate::util::derive_seed;

/// Answer-value ids occupy `[0, QA_N_VALUES)`.
pub const QA_N_VALUES: u32 = 4;
/// Key ids occupy `[QA_N_VALUES, QA_BASE)`.
pub const QA_N_KEYS: u32 = 3;
/// Base alphabet width of the recognizer-side task tokens.
pub const QA_BASE: u32 = QA_N_VALUES + QA_N_KEYS;

/// One task item: the spoken utterance plus its single-token answer.
#[derive(Debug, Clone)]
pub struct TaskItem {
    pub utterance: UtteranceSpec,
    pub answer: u32,
}

/// Prosodic factor cardinalities for task items.
#[derive(Debug, Clone, Copy)]
pub struct TaskAttrs {
    pub n_speakers: u32,
    pub n_pitch: u32,
    pub n_energy: u32,
    pub n_emotion: u32,
}

impl Default for TaskAttrs {
    fn default() -> Self {
        TaskAttrs {
            n_speakers: 8,
            n_pitch: 3,
            n_energy: 3,
            n_emotion: 4,
        }
    }
}

fn draw_attrs(rng: &mut ChaCha8Rng, attrs: &TaskAttrs) -> (u32, u32, u32, u32) {
    (
        rng.random_range(0..attrs.n_speakers),
        rng.random_range(0..attrs.n_pitch),
        rng.random_range(0..attrs.n_energy),
        rng.random_range(0..attrs.n_emotion),
    )
}

/// Generates key-value QA items: distinct keys `k1, k2`, values `v1, v2`,
/// query `q` in `{k1, k2}`, answer the matching value.
pub fn gen_kv_qa_items(n: usize, attrs: &TaskAttrs, seed: u64) -> Vec<TaskItem> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let k1 = QA_N_VALUES + rng.random_range(0..QA_N_KEYS);
            let mut k2 = QA_N_VALUES + rng.random_range(0..QA_N_KEYS - 1);
            if k2 >= k1 {
                k2 += 1;
            }
            let v1 = rng.random_range(0..QA_N_VALUES);
            let v2 = rng.random_range(0..QA_N_VALUES);
            let ask_first = rng.random_range(0..2u32) == 0;
            let (q, answer) = if ask_first { (k1, v1) } else { (k2, v2) };
            let (speaker_id, pitch_level, energy_level, emotion) = draw_attrs(&mut rng, attrs);
            TaskItem {
                utterance: UtteranceSpec {
                    token_ids: vec![k1, v1, k2, v2, q],
                    speaker_id,
                    pitch_level,
                    energy_level,
                    emotion,
                    seed: rng.random::<u64>(),
                },
                answer,
            }
        })
        .collect()
}

/// Generates emotion items: every transcript is the same fixed sequence, the
/// answer is the emotion class, and the remaining factors vary freely.
pub fn gen_emotion_items(n: usize, attrs: &TaskAttrs, seed: u64) -> Vec<TaskItem> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let (speaker_id, pitch_level, energy_level, _) = draw_attrs(&mut rng, attrs);
            let emotion = rng.random_range(0..attrs.n_emotion);
            TaskItem {
                utterance: UtteranceSpec {
                    token_ids: vec![1, 2, 3, 1],
                    speaker_id,
                    pitch_level,
                    energy_level,
                    emotion,
                    seed: rng.random::<u64>(),
                },
                answer: emotion,
            }
        })
        .collect()
}

/// One task item carried through rendering, recognition, and corruption.
#[derive(Debug, Clone)]
pub struct PreparedItem {
    pub gt_enc_tokens: Vec<u32>,
    pub asr_enc_tokens: Vec<u32>,
    pub gt_text: Vec<u32>,
    pub asr_text: Vec<u32>,
    pub prosody: Array2<f64>,
    pub answer: u32,
    pub mel: crate::synth::MelSpectrogram,
    pub item_seed: u64,
}

/// Renders each item, extracts prosody from the trained encoder (teacher-
/// forced on the ground-truth tokens), passes the tokens through the
/// corruption channel, and re-segments both text versions for the backbone.
pub fn prepare_items(
    items: &[TaskItem],
    encoder: &SpeechEncoder,
    render_cfg: &RenderConfig,
    channel: &CorruptionChannel,
) -> Result<Vec<PreparedItem>> {
    items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mel = render_mel(&item.utterance, render_cfg)?;
            let prosody = encoder.asr.extract_prosody(
                &encoder.params,
                &mel,
                &item.utterance.token_ids,
                encoder.asr.cfg.prosody_layer,
            )?;
            let item_seed = i as u64;
            let asr_enc = channel.corrupt(&item.utterance.token_ids, item_seed);
            Ok(PreparedItem {
                gt_text: pair_merge_tokenize(&item.utterance.token_ids, QA_BASE)?,
                asr_text: pair_merge_tokenize(&asr_enc, QA_BASE)?,
                gt_enc_tokens: item.utterance.token_ids.clone(),
                asr_enc_tokens: asr_enc,
                prosody,
                answer: item.answer,
                mel,
                item_seed,
            })
        })
        .collect()
}

/// Distillation examples from prepared items, with the given responses
/// (usually teacher-collected).
pub fn to_kd_examples(items: &[PreparedItem], responses: &[Vec<u32>]) -> Vec<KdExample> {
    items
        .iter()
        .zip(responses)
        .map(|(item, response)| KdExample {
            gt_text: item.gt_text.clone(),
            asr_text: item.asr_text.clone(),
            prosody: item.prosody.clone(),
            response: response.clone(),
        })
        .collect()
}

/// Four-option benchmark over prepared items: options are the four value
/// tokens in fixed order, the correct index is the answer value.
pub fn to_benchmark(items: &[PreparedItem]) -> McBenchmark {
    let options: Vec<Vec<u32>> = (0..QA_N_VALUES).map(|v| vec![v]).collect();
    McBenchmark {
        items: items
            .iter()
            .map(|item| McItem {
                prompt: item.gt_text.clone(),
                options: options.clone(),
                correct: item.answer as usize,
                audio_ref: None,
                attributes: None,
                speech: Some(SpeechPayload {
                    enc_tokens: item.gt_enc_tokens.clone(),
                    mel: Some(item.mel.clone()),
                    prosody: Some(item.prosody.clone()),
                    item_seed: item.item_seed,
                }),
            })
            .collect(),
        class_names: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_items_are_well_formed_and_deterministic() {
        let attrs = TaskAttrs::default();
        let a = gen_kv_qa_items(50, &attrs, 7);
        let b = gen_kv_qa_items(50, &attrs, 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.utterance, y.utterance);
            assert_eq!(x.answer, y.answer);
        }
        for item in &a {
            let t = &item.utterance.token_ids;
            assert_eq!(t.len(), 5);
            assert!(t[0] >= QA_N_VALUES && t[0] < QA_BASE);
            assert!(t[2] >= QA_N_VALUES && t[2] < QA_BASE);
            assert_ne!(t[0], t[2]);
            assert!(t[1] < QA_N_VALUES && t[3] < QA_N_VALUES);
            assert!(t[4] == t[0] || t[4] == t[2]);
            let expected = if t[4] == t[0] { t[1] } else { t[3] };
            assert_eq!(item.answer, expected);
        }
    }

    #[test]
    fn kv_text_resegments_to_three_tokens() {
        let items = gen_kv_qa_items(5, &TaskAttrs::default(), 1);
        for item in &items {
            let merged = pair_merge_tokenize(&item.utterance.token_ids, QA_BASE).unwrap();
            assert_eq!(merged.len(), 3);
        }
    }

    #[test]
    fn emotion_items_share_a_transcript() {
        let items = gen_emotion_items(20, &TaskAttrs::default(), 3);
        for item in &items {
            assert_eq!(item.utterance.token_ids, items[0].utterance.token_ids);
            assert_eq!(item.answer, item.utterance.emotion);
        }
        // all four classes appear in a modest sample
        let classes: std::collections::BTreeSet<u32> = items.iter().map(|i| i.answer).collect();
        assert_eq!(classes.len(), 4);
    }
}
