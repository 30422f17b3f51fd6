//! Deterministic synthetic spoken-utterance generator.
//!
//! Utterances are token sequences rendered into mel-like feature matrices
//! with controllable, exactly recoverable prosodic factors. The encoding
//! scheme, from the inside out:
//!
//! 1. Each token occupies a contiguous span of `frames_per_token` columns and
//!    contributes a narrow spectral bump centered at a token-specific base
//!    bin, shifted up by `pitch_bin_offset` bins per pitch level.
//! 2. A per-emotion temporal envelope (strictly positive sinusoid with a
//!    class-specific frequency and phase) is added to every bin of each
//!    occupied column.
//! 3. A fixed per-speaker filter vector multiplies the matrix row-wise.
//! 4. The whole occupied region is scaled by `energy_factor ^ energy_level`.
//! 5. Gaussian noise with configurable sigma (seeded from the utterance seed)
//!    is added over the full matrix. Columns past the last token stay at the
//!    noise floor (exactly zero when sigma is zero).
//!
//! With sigma 0 every factor is recoverable in closed form: pitch from the
//! column argmax offset, energy from the magnitude ratio against a reference
//! rendering, speaker from filter correlation, emotion from envelope
//! correlation. The recoverability tests at the bottom of this file hold the
//! hand-written decoders.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{derive_seed, seed_for};

/// One synthetic utterance: token content plus categorical prosodic factors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceSpec {
    pub token_ids: Vec<u32>,
    pub speaker_id: u32,
    pub pitch_level: u32,
    pub energy_level: u32,
    pub emotion: u32,
    pub seed: u64,
}

/// Mel-like feature matrix, `F` bins by `L` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Array2<f64>,
}

impl MelSpectrogram {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() < 4 || values.ncols() < 4 {
            return Err(Error::input(format!(
                "mel must be at least 4x4, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("mel contains non-finite entries"));
        }
        Ok(MelSpectrogram { values })
    }

    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Optional per-attribute sampling weights; uniform when absent.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct AttributeWeights {
    pub speaker: Option<Vec<f64>>,
    pub pitch: Option<Vec<f64>>,
    pub energy: Option<Vec<f64>>,
    pub emotion: Option<Vec<f64>>,
}

/// Cardinalities and length range that `gen_utterance` draws from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpecDistribution {
    pub vocab_size: u32,
    pub n_speakers: u32,
    pub n_pitch: u32,
    pub n_energy: u32,
    pub n_emotion: u32,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default)]
    pub weights: AttributeWeights,
}

impl SpecDistribution {
    pub fn validate(&self) -> Result<()> {
        for (name, card) in [
            ("vocab_size", self.vocab_size),
            ("n_speakers", self.n_speakers),
            ("n_pitch", self.n_pitch),
            ("n_energy", self.n_energy),
            ("n_emotion", self.n_emotion),
        ] {
            if card < 1 {
                return Err(Error::config(format!("{name} must be >= 1, got {card}")));
            }
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "length range {}..={} is empty or zero",
                self.min_len, self.max_len
            )));
        }
        for (name, card, w) in [
            ("speaker", self.n_speakers, &self.weights.speaker),
            ("pitch", self.n_pitch, &self.weights.pitch),
            ("energy", self.n_energy, &self.weights.energy),
            ("emotion", self.n_emotion, &self.weights.emotion),
        ] {
            if let Some(w) = w {
                if w.len() != card as usize {
                    return Err(Error::config(format!(
                        "{name} weights have {} entries for cardinality {card}",
                        w.len()
                    )));
                }
                if w.iter().any(|&x| x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::config(format!("{name} weights must be a nonzero nonnegative vector")));
                }
            }
        }
        Ok(())
    }

    pub fn validate_spec(&self, spec: &UtteranceSpec) -> Result<()> {
        if spec.token_ids.is_empty() {
            return Err(Error::input("token_ids is empty"));
        }
        if let Some(&t) = spec.token_ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::input(format!(
                "token {t} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        for (name, value, card) in [
            ("speaker_id", spec.speaker_id, self.n_speakers),
            ("pitch_level", spec.pitch_level, self.n_pitch),
            ("energy_level", spec.energy_level, self.n_energy),
            ("emotion", spec.emotion, self.n_emotion),
        ] {
            if value >= card {
                return Err(Error::input(format!(
                    "{name} = {value} outside cardinality {card}"
                )));
            }
        }
        Ok(())
    }
}

fn draw_categorical(rng: &mut ChaCha8Rng, card: u32, weights: &Option<Vec<f64>>) -> u32 {
    match weights {
        None => rng.random_range(0..card),
        Some(w) => {
            let total: f64 = w.iter().sum();
            let mut dart = rng.random_range(0.0..total);
            for (i, &p) in w.iter().enumerate() {
                dart -= p;
                if dart <= 0.0 {
                    return i as u32;
                }
            }
            card - 1
        }
    }
}

/// Draws one utterance spec. Pure function of `(dist, seed)`; the draw order
/// is fixed: length, tokens, speaker, pitch, energy, emotion, render seed.
pub fn gen_utterance(dist: &SpecDistribution, seed: u64) -> Result<UtteranceSpec> {
    dist.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(dist.min_len..=dist.max_len);
    let token_ids = (0..len)
        .map(|_| rng.random_range(0..dist.vocab_size))
        .collect();
    let speaker_id = draw_categorical(&mut rng, dist.n_speakers, &dist.weights.speaker);
    let pitch_level = draw_categorical(&mut rng, dist.n_pitch, &dist.weights.pitch);
    let energy_level = draw_categorical(&mut rng, dist.n_energy, &dist.weights.energy);
    let emotion = draw_categorical(&mut rng, dist.n_emotion, &dist.weights.emotion);
    let render_seed = rng.random::<u64>();
    Ok(UtteranceSpec {
        token_ids,
        speaker_id,
        pitch_level,
        energy_level,
        emotion,
        seed: render_seed,
    })
}

/// Rendering parameters. `n_pitch_levels` reserves bin headroom so the
/// highest pitch shift never wraps past the top mel bin.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RenderConfig {
    pub n_mels: usize,
    pub n_frames: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    pub pitch_bin_offset: usize,
    pub energy_factor: f64,
    pub emotion_amp: f64,
    pub n_pitch_levels: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_mels: 16,
            n_frames: 40,
            frames_per_token: 4,
            noise_sigma: 0.0,
            pitch_bin_offset: 3,
            energy_factor: 1.6,
            emotion_amp: 0.4,
            n_pitch_levels: 3,
        }
    }
}

const BUMP_WIDTH: f64 = 0.45;
const BUMP_REACH: i64 = 2;

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels < 4 || self.n_frames < 4 {
            return Err(Error::config("n_mels and n_frames must be >= 4"));
        }
        if self.frames_per_token < 1 {
            return Err(Error::config("frames_per_token must be >= 1"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma must be >= 0"));
        }
        if self.energy_factor <= 0.0 {
            return Err(Error::config("energy_factor must be > 0"));
        }
        if self.n_pitch_levels < 1 {
            return Err(Error::config("n_pitch_levels must be >= 1"));
        }
        if self.usable_bins() < 1 {
            return Err(Error::config(format!(
                "no usable bins: {} mel bins cannot hold {} pitch levels at offset {}",
                self.n_mels, self.n_pitch_levels, self.pitch_bin_offset
            )));
        }
        Ok(())
    }

    fn usable_bins(&self) -> i64 {
        self.n_mels as i64
            - (self.pitch_bin_offset * (self.n_pitch_levels - 1)) as i64
            - 2 * BUMP_REACH
    }

    /// Base bin for a token at pitch level 0 (center of its spectral bump).
    pub fn base_bin(&self, token: u32) -> usize {
        let usable = self.usable_bins() as u64;
        (BUMP_REACH as u64 + (token as u64).wrapping_mul(7) % usable) as usize
    }

    /// Maximum token count that fits in `n_frames`.
    pub fn max_tokens(&self) -> usize {
        self.n_frames / self.frames_per_token
    }
}

/// Fixed per-speaker spectral filter, strictly positive in `[0.5, 1.5)`.
pub fn speaker_filter(speaker_id: u32, n_mels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(speaker_id as u64, "speaker-filter"));
    (0..n_mels)
        .map(|_| 0.5 + rng.random_range(0.0..1.0))
        .collect()
}

/// Per-emotion temporal envelope value at frame `t` of an utterance spanning
/// `used_frames` columns. Strictly positive; each class has its own
/// frequency and phase.
pub fn emotion_envelope(emotion: u32, amp: f64, t: usize, used_frames: usize) -> f64 {
    let freq = (emotion + 1) as f64;
    let phase = emotion as f64 * std::f64::consts::FRAC_PI_4;
    let angle = 2.0 * std::f64::consts::PI * freq * t as f64 / used_frames.max(1) as f64 + phase;
    amp * (1.1 + angle.sin()) / 2.1
}

/// Renders a spec into a mel matrix. Pure function of `(spec, cfg)`.
pub fn render_mel(spec: &UtteranceSpec, cfg: &RenderConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if spec.token_ids.is_empty() {
        return Err(Error::input("cannot render an empty token sequence"));
    }
    if spec.pitch_level as usize >= cfg.n_pitch_levels {
        return Err(Error::input(format!(
            "pitch_level {} exceeds render config's {} levels",
            spec.pitch_level, cfg.n_pitch_levels
        )));
    }
    let used = spec.token_ids.len() * cfg.frames_per_token;
    if used > cfg.n_frames {
        return Err(Error::input(format!(
            "{} tokens need {used} frames at span {}, only {} available",
            spec.token_ids.len(),
            cfg.frames_per_token,
            cfg.n_frames
        )));
    }

    let filter = speaker_filter(spec.speaker_id, cfg.n_mels);
    let gain = cfg.energy_factor.powi(spec.energy_level as i32);
    let mut m = Array2::<f64>::zeros((cfg.n_mels, cfg.n_frames));

    for (i, &token) in spec.token_ids.iter().enumerate() {
        let center = (cfg.base_bin(token) + spec.pitch_level as usize * cfg.pitch_bin_offset) as i64;
        for t in i * cfg.frames_per_token..(i + 1) * cfg.frames_per_token {
            let env = emotion_envelope(spec.emotion, cfg.emotion_amp, t, used);
            for f in 0..cfg.n_mels as i64 {
                let df = f - center;
                let bump = if df.abs() <= BUMP_REACH {
                    (-(df * df) as f64 / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp()
                } else {
                    0.0
                };
                m[[f as usize, t]] = (bump + env) * filter[f as usize] * gain;
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let dist = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        for v in m.iter_mut() {
            *v += dist.sample(&mut rng);
        }
    }

    MelSpectrogram::new(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct DataItem {
    pub index: usize,
    pub spec: UtteranceSpec,
    pub mel: MelSpectrogram,
    pub transcript: Vec<u32>,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<DataItem>,
}

/// Train/val/test fractions. Counts are assigned as
/// `n_test = floor(test*n)`, `n_val = floor(val*n)`, and the remainder to
/// train, so small datasets fill train first and never error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let sum = self.train + self.val + self.test;
        if self.train < 0.0 || self.val < 0.0 || self.test < 0.0 || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions must be nonnegative and sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    fn counts(&self, n: usize) -> (usize, usize, usize) {
        let n_test = (self.test * n as f64).floor() as usize;
        let n_val = (self.val * n as f64).floor() as usize;
        (n - n_val - n_test, n_val, n_test)
    }
}

/// Generates `n` items. Item `i` draws from seed `derive_seed(master, i)`;
/// rendering runs in parallel but assembly order is by item index.
pub fn make_dataset(
    n: usize,
    dist: &SpecDistribution,
    cfg: &RenderConfig,
    master_seed: u64,
    fractions: SplitFractions,
) -> Result<Dataset> {
    if n < 1 {
        return Err(Error::input("dataset size must be >= 1"));
    }
    dist.validate()?;
    cfg.validate()?;
    fractions.validate()?;
    if dist.max_len > cfg.max_tokens() {
        return Err(Error::config(format!(
            "max_len {} cannot fit in {} frames at span {}",
            dist.max_len,
            cfg.n_frames,
            cfg.frames_per_token
        )));
    }
    let (n_train, n_val, _) = fractions.counts(n);
    let items: Result<Vec<DataItem>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let spec = gen_utterance(dist, derive_seed(master_seed, i as u64))?;
            let mel = render_mel(&spec, cfg)?;
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            Ok(DataItem {
                index: i,
                transcript: spec.token_ids.clone(),
                spec,
                mel,
                split,
            })
        })
        .collect();
    Ok(Dataset { items: items? })
}

impl Dataset {
    pub fn split_items(&self, split: Split) -> Vec<&DataItem> {
        self.items.iter().filter(|it| it.split == split).collect()
    }

    /// Writes `manifest.jsonl` plus one mel file per item under `mel/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("mel"))?;
        let mut manifest = String::new();
        for item in &self.items {
            let rel = format!("mel/item_{:05}.mel", item.index);
            crate::io::write_matrix_f32(&dir.join(&rel), item.mel.values())?;
            let record = ManifestRecord {
                index: item.index,
                split: item.split,
                spec: item.spec.clone(),
                transcript: item.transcript.clone(),
                mel_path: rel,
            };
            manifest.push_str(&serde_json::to_string(&record).expect("manifest serializes"));
            manifest.push('\n');
        }
        fs::write(dir.join("manifest.jsonl"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(dir.join("manifest.jsonl"))?;
        let mut items = Vec::new();
        for line in text.lines() {
            let record: ManifestRecord =
                serde_json::from_str(line).map_err(|e| Error::format(format!("manifest: {e}")))?;
            let mel = MelSpectrogram::new(crate::io::read_matrix(&dir.join(&record.mel_path))?)?;
            items.push(DataItem {
                index: record.index,
                spec: record.spec,
                mel,
                transcript: record.transcript,
                split: record.split,
            });
        }
        Ok(Dataset { items })
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    index: usize,
    split: Split,
    spec: UtteranceSpec,
    transcript: Vec<u32>,
    mel_path: String,
}

/// Assigns each value a bin label in `[0, n_bins)` by empirical quantile
/// boundaries. Ranks are split evenly (`label = rank * n_bins / n`); tied
/// values all take the lowest label in their tie group, so the map from
/// value to label is a function of the value alone.
pub fn quantile_bin(values: &[f64], n_bins: usize) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::input("quantile_bin needs at least one value"));
    }
    if n_bins < 2 {
        return Err(Error::config("n_bins must be >= 2"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("quantile_bin values must be finite"));
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite").then(a.cmp(&b)));

    let mut distinct = 1;
    for w in order.windows(2) {
        if values[w[0]] != values[w[1]] {
            distinct += 1;
        }
    }
    if n_bins > distinct {
        return Err(Error::DegenerateBins(format!(
            "{n_bins} bins requested but only {distinct} distinct values"
        )));
    }

    let mut labels = vec![0usize; n];
    let mut run_start = 0;
    while run_start < n {
        let mut run_end = run_start + 1;
        while run_end < n && values[order[run_end]] == values[order[run_start]] {
            run_end += 1;
        }
        let label = run_start * n_bins / n;
        for &i in &order[run_start..run_end] {
            labels[i] = label;
        }
        run_start = run_end;
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_dist() -> SpecDistribution {
        SpecDistribution {
            vocab_size: 16,
            n_speakers: 4,
            n_pitch: 3,
            n_energy: 3,
            n_emotion: 4,
            min_len: 4,
            max_len: 8,
            weights: AttributeWeights::default(),
        }
    }

    #[test]
    fn gen_utterance_is_deterministic() {
        let dist = SpecDistribution {
            min_len: 4,
            max_len: 8,
            ..small_dist()
        };
        let a = gen_utterance(&dist, 7).unwrap();
        let b = gen_utterance(&dist, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gen_utterance_degenerate_length_range() {
        let dist = SpecDistribution {
            min_len: 5,
            max_len: 5,
            ..small_dist()
        };
        let spec = gen_utterance(&dist, 1).unwrap();
        assert_eq!(spec.token_ids.len(), 5);
    }

    #[test]
    fn gen_utterance_rejects_zero_cardinality() {
        let dist = SpecDistribution {
            n_pitch: 0,
            ..small_dist()
        };
        assert!(matches!(
            gen_utterance(&dist, 0).unwrap_err(),
            Error::Config(_)
        ));
    }

    /// Direct-counting frequency check over 10^4 seeds derived from master 0.
    #[test]
    fn pitch_levels_are_near_uniform() {
        let dist = small_dist();
        let mut counts = [0usize; 3];
        for i in 0..10_000u64 {
            let spec = gen_utterance(&dist, derive_seed(0, i)).unwrap();
            counts[spec.pitch_level as usize] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / 10_000.0;
            assert!((0.28..=0.39).contains(&freq), "pitch frequency {freq}");
        }
    }

    #[test]
    fn render_is_deterministic_with_and_without_noise() {
        let cfg = RenderConfig::default();
        let spec = gen_utterance(&small_dist(), 3).unwrap();
        assert_eq!(render_mel(&spec, &cfg).unwrap(), render_mel(&spec, &cfg).unwrap());
        let noisy = RenderConfig {
            noise_sigma: 0.05,
            ..cfg
        };
        assert_eq!(
            render_mel(&spec, &noisy).unwrap(),
            render_mel(&spec, &noisy).unwrap()
        );
    }

    /// Element-wise division oracle for the energy factor.
    #[test]
    fn energy_levels_scale_by_exact_factor() {
        let cfg = RenderConfig::default();
        let mut spec = gen_utterance(&small_dist(), 11).unwrap();
        spec.energy_level = 0;
        let low = render_mel(&spec, &cfg).unwrap();
        spec.energy_level = 1;
        let high = render_mel(&spec, &cfg).unwrap();
        let used = spec.token_ids.len() * cfg.frames_per_token;
        for t in 0..used {
            for f in 0..cfg.n_mels {
                let ratio = high.values()[[f, t]] / low.values()[[f, t]];
                assert!(
                    (ratio - cfg.energy_factor).abs() < 1e-9,
                    "ratio {ratio} at ({f},{t})"
                );
            }
        }
    }

    /// Argmax comparison oracle for the pitch offset.
    #[test]
    fn pitch_levels_shift_argmax_by_offset() {
        let cfg = RenderConfig::default();
        let mut spec = gen_utterance(&small_dist(), 13).unwrap();
        spec.pitch_level = 0;
        let a = render_mel(&spec, &cfg).unwrap();
        spec.pitch_level = 1;
        let b = render_mel(&spec, &cfg).unwrap();
        let used = spec.token_ids.len() * cfg.frames_per_token;
        let argmax = |m: &MelSpectrogram, t: usize| {
            (0..cfg.n_mels)
                .max_by(|&x, &y| m.values()[[x, t]].partial_cmp(&m.values()[[y, t]]).unwrap())
                .unwrap()
        };
        for t in 0..used {
            assert_eq!(argmax(&b, t), argmax(&a, t) + cfg.pitch_bin_offset, "frame {t}");
        }
    }

    #[test]
    fn render_rejects_overlong_sequences() {
        let cfg = RenderConfig {
            n_frames: 8,
            frames_per_token: 4,
            ..RenderConfig::default()
        };
        let spec = UtteranceSpec {
            token_ids: vec![1, 2, 3],
            speaker_id: 0,
            pitch_level: 0,
            energy_level: 0,
            emotion: 0,
            seed: 0,
        };
        assert!(matches!(render_mel(&spec, &cfg).unwrap_err(), Error::Input(_)));
    }

    #[test]
    fn make_dataset_is_bit_identical_across_calls() {
        let cfg = RenderConfig::default();
        let a = make_dataset(20, &small_dist(), &cfg, 42, SplitFractions::default()).unwrap();
        let b = make_dataset(20, &small_dist(), &cfg, 42, SplitFractions::default()).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.spec, y.spec);
            assert_eq!(x.mel, y.mel);
            assert_eq!(x.split, y.split);
        }
    }

    #[test]
    fn make_dataset_split_counts_are_exact() {
        let cfg = RenderConfig::default();
        let ds = make_dataset(100, &small_dist(), &cfg, 42, SplitFractions::default()).unwrap();
        assert_eq!(ds.split_items(Split::Train).len(), 80);
        assert_eq!(ds.split_items(Split::Val).len(), 10);
        assert_eq!(ds.split_items(Split::Test).len(), 10);
    }

    #[test]
    fn make_dataset_single_item_goes_to_train() {
        let cfg = RenderConfig::default();
        let ds = make_dataset(1, &small_dist(), &cfg, 42, SplitFractions::default()).unwrap();
        assert_eq!(ds.items.len(), 1);
        assert_eq!(ds.items[0].split, Split::Train);
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RenderConfig::default();
        let ds = make_dataset(6, &small_dist(), &cfg, 9, SplitFractions::default()).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.items.len(), 6);
        for (a, b) in ds.items.iter().zip(&back.items) {
            assert_eq!(a.spec, b.spec);
            assert_eq!(a.split, b.split);
            // mel bodies round-trip through f32
            for (x, y) in a.mel.values().iter().zip(b.mel.values().iter()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn quantile_bin_sort_and_slice_oracle() {
        let values: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let labels = quantile_bin(&values, 10).unwrap();
        let mut counts = vec![0usize; 10];
        for &l in &labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10), "{counts:?}");
    }

    #[test]
    fn quantile_bin_rank_oracle() {
        assert_eq!(quantile_bin(&[3.0, 1.0, 2.0], 3).unwrap(), vec![2, 0, 1]);
    }

    #[test]
    fn quantile_bin_identical_values_error() {
        assert!(matches!(
            quantile_bin(&[5.0, 5.0, 5.0], 2).unwrap_err(),
            Error::DegenerateBins(_)
        ));
    }

    #[test]
    fn quantile_bin_is_monotone() {
        let values = vec![0.3, -1.0, 7.5, 0.3, 2.0, -0.5, 9.0, 4.4];
        let labels = quantile_bin(&values, 4).unwrap();
        for i in 0..values.len() {
            for j in 0..values.len() {
                if values[i] <= values[j] {
                    assert!(labels[i] <= labels[j]);
                }
            }
        }
    }

    /// Hand-written decoders proving the probing targets are present
    /// (100% recovery at sigma 0).
    mod recoverability {
        use super::*;

        fn column_argmax(m: &MelSpectrogram, t: usize) -> usize {
            (0..m.n_mels())
                .max_by(|&x, &y| m.values()[[x, t]].partial_cmp(&m.values()[[y, t]]).unwrap())
                .unwrap()
        }

        fn decode_pitch(m: &MelSpectrogram, spec: &UtteranceSpec, cfg: &RenderConfig) -> u32 {
            let base = cfg.base_bin(spec.token_ids[0]);
            ((column_argmax(m, 0) - base) / cfg.pitch_bin_offset) as u32
        }

        fn decode_energy(m: &MelSpectrogram, spec: &UtteranceSpec, cfg: &RenderConfig) -> u32 {
            let mut reference = spec.clone();
            reference.energy_level = 0;
            let base = render_mel(&reference, cfg).unwrap();
            let ratio = m.values().sum() / base.values().sum();
            (ratio.ln() / cfg.energy_factor.ln()).round() as u32
        }

        fn pearson(a: &[f64], b: &[f64]) -> f64 {
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let cov: f64 = a.iter().zip(b).map(|(&x, &y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|&x| (x - ma) * (x - ma)).sum();
            let vb: f64 = b.iter().map(|&y| (y - mb) * (y - mb)).sum();
            cov / (va.sqrt() * vb.sqrt()).max(1e-12)
        }

        fn decode_speaker(
            m: &MelSpectrogram,
            spec: &UtteranceSpec,
            cfg: &RenderConfig,
            n_speakers: u32,
        ) -> u32 {
            let used = spec.token_ids.len() * cfg.frames_per_token;
            let row_means: Vec<f64> = (0..cfg.n_mels)
                .map(|f| (0..used).map(|t| m.values()[[f, t]]).sum::<f64>() / used as f64)
                .collect();
            (0..n_speakers)
                .max_by(|&a, &b| {
                    let mut sa = spec.clone();
                    sa.speaker_id = a;
                    let mut sb = spec.clone();
                    sb.speaker_id = b;
                    let ra: Vec<f64> = {
                        let r = render_mel(&sa, cfg).unwrap();
                        (0..cfg.n_mels)
                            .map(|f| (0..used).map(|t| r.values()[[f, t]]).sum::<f64>())
                            .collect()
                    };
                    let rb: Vec<f64> = {
                        let r = render_mel(&sb, cfg).unwrap();
                        (0..cfg.n_mels)
                            .map(|f| (0..used).map(|t| r.values()[[f, t]]).sum::<f64>())
                            .collect()
                    };
                    pearson(&row_means, &ra)
                        .partial_cmp(&pearson(&row_means, &rb))
                        .unwrap()
                })
                .unwrap()
        }

        fn decode_emotion(
            m: &MelSpectrogram,
            spec: &UtteranceSpec,
            cfg: &RenderConfig,
            n_emotion: u32,
        ) -> u32 {
            let used = spec.token_ids.len() * cfg.frames_per_token;
            let col_sums: Vec<f64> = (0..used)
                .map(|t| (0..cfg.n_mels).map(|f| m.values()[[f, t]]).sum())
                .collect();
            (0..n_emotion)
                .max_by(|&a, &b| {
                    let ea: Vec<f64> = (0..used)
                        .map(|t| emotion_envelope(a, cfg.emotion_amp, t, used))
                        .collect();
                    let eb: Vec<f64> = (0..used)
                        .map(|t| emotion_envelope(b, cfg.emotion_amp, t, used))
                        .collect();
                    pearson(&col_sums, &ea)
                        .partial_cmp(&pearson(&col_sums, &eb))
                        .unwrap()
                })
                .unwrap()
        }

        #[test]
        fn all_attributes_recover_exactly_at_zero_sigma() {
            let dist = small_dist();
            let cfg = RenderConfig::default();
            let ds = make_dataset(120, &dist, &cfg, 77, SplitFractions::default()).unwrap();
            for item in &ds.items {
                assert_eq!(
                    decode_pitch(&item.mel, &item.spec, &cfg),
                    item.spec.pitch_level,
                    "pitch, item {}",
                    item.index
                );
                assert_eq!(
                    decode_energy(&item.mel, &item.spec, &cfg),
                    item.spec.energy_level,
                    "energy, item {}",
                    item.index
                );
                assert_eq!(
                    decode_speaker(&item.mel, &item.spec, &cfg, dist.n_speakers),
                    item.spec.speaker_id,
                    "speaker, item {}",
                    item.index
                );
                assert_eq!(
                    decode_emotion(&item.mel, &item.spec, &cfg, dist.n_emotion),
                    item.spec.emotion,
                    "emotion, item {}",
                    item.index
                );
            }
        }
    }

    proptest! {
        /// Binning a permuted list yields the correspondingly permuted labels.
        #[test]
        fn quantile_bin_is_permutation_equivariant(
            mut values in proptest::collection::vec(-100i32..100, 8..40),
            rotation in 0usize..8,
        ) {
            values.dedup();
            prop_assume!(values.len() >= 4);
            let floats: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            let n_bins = 4.min(floats.len());
            let base = quantile_bin(&floats, n_bins);
            prop_assume!(base.is_ok());
            let base = base.unwrap();

            let k = rotation % floats.len();
            let mut rotated = floats.clone();
            rotated.rotate_left(k);
            let rotated_labels = quantile_bin(&rotated, n_bins).unwrap();
            let mut expected = base.clone();
            expected.rotate_left(k);
            prop_assert_eq!(rotated_labels, expected);
        }

        /// Every bin count equals n/n_bins exactly when n_bins divides the
        /// count of distinct values.
        #[test]
        fn quantile_bin_balances_distinct_values(
            start in -1000i64..1000,
            bins in 2usize..8,
            per_bin in 1usize..12,
        ) {
            let n = bins * per_bin;
            let values: Vec<f64> = (0..n).map(|i| (start + i as i64) as f64).collect();
            let labels = quantile_bin(&values, bins).unwrap();
            let mut counts = vec![0usize; bins];
            for &l in &labels { counts[l] += 1; }
            prop_assert!(counts.iter().all(|&c| c == per_bin), "{:?}", counts);
        }
    }
}
