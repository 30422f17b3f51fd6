//! Experiment configuration: a strict TOML schema with documented defaults,
//! environment-variable overrides, and cartesian sweep expansion.
//!
//! Every field that an ablation sweeps (reconstruction weight, distillation
//! alpha/temperature/setting, prosody layer, interleave ratio, probe
//! settings) is reachable from the file, from `PROSOLM_<SECTION>__<FIELD>`
//! environment variables, and from `--set section.field=value` sweep axes.
//! The reconstruction weight has no default and must be stated explicitly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asr::AsrConfig;
use crate::backbone::{BackboneConfig, TrainStagePlan};
use crate::distill::{CorruptionChannel, KdConfig, SourceSetting};
use crate::error::{Error, Result};
use crate::inject::InjectionMode;
use crate::probe::{ProbeConfig, ProbeKind};
use crate::recon::{ReconConfig, TrainConfig};
use crate::synth::{RenderConfig, SpecDistribution, SplitFractions};

pub const ENV_PREFIX: &str = "PROSOLM_";

/// The pipeline's stage names, in execution order.
pub const STAGE_NAMES: [&str; 7] = [
    "gen-data",
    "train-encoder",
    "probe",
    "build-kd-data",
    "train-backbone",
    "evaluate",
    "report",
];

fn default_stages() -> Vec<String> {
    STAGE_NAMES.iter().map(|s| s.to_string()).collect()
}

fn default_master_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_items: usize,
    pub vocab_size: u32,
    pub n_speakers: u32,
    pub n_pitch: u32,
    pub n_energy: u32,
    pub n_emotion: u32,
    pub min_len: usize,
    pub max_len: usize,
    pub n_mels: usize,
    pub n_frames: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    pub pitch_bin_offset: usize,
    pub energy_factor: f64,
    pub emotion_amp: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_items: 256,
            vocab_size: 7,
            n_speakers: 8,
            n_pitch: 3,
            n_energy: 3,
            n_emotion: 4,
            min_len: 4,
            max_len: 8,
            n_mels: 16,
            n_frames: 40,
            frames_per_token: 4,
            noise_sigma: 0.02,
            pitch_bin_offset: 3,
            energy_factor: 1.6,
            emotion_amp: 0.4,
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

impl DataSection {
    pub fn distribution(&self) -> SpecDistribution {
        SpecDistribution {
            vocab_size: self.vocab_size,
            n_speakers: self.n_speakers,
            n_pitch: self.n_pitch,
            n_energy: self.n_energy,
            n_emotion: self.n_emotion,
            min_len: self.min_len,
            max_len: self.max_len,
            weights: Default::default(),
        }
    }

    pub fn render(&self) -> RenderConfig {
        RenderConfig {
            n_mels: self.n_mels,
            n_frames: self.n_frames,
            frames_per_token: self.frames_per_token,
            noise_sigma: self.noise_sigma,
            pitch_bin_offset: self.pitch_bin_offset,
            energy_factor: self.energy_factor,
            emotion_amp: self.emotion_amp,
            n_pitch_levels: self.n_pitch as usize,
        }
    }

    pub fn fractions(&self) -> SplitFractions {
        SplitFractions {
            train: self.train_frac,
            val: self.val_frac,
            test: self.test_frac,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub d: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub max_text_len: usize,
    pub prosody_layer: usize,
    pub stride: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            d: 64,
            n_enc_layers: 2,
            n_dec_layers: 4,
            n_heads: 4,
            max_text_len: 12,
            prosody_layer: 2,
            stride: 2,
        }
    }
}

/// The reconstruction weight `lambda` is deliberately not defaulted.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ReconSection {
    pub lambda: f64,
    #[serde(default = "default_d_r")]
    pub d_r: usize,
    #[serde(default = "default_recon_layers")]
    pub n_enc_layers: usize,
    #[serde(default = "default_recon_layers")]
    pub n_dec_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default)]
    pub dropout: f64,
}

fn default_d_r() -> usize {
    64
}
fn default_recon_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderTrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
}

impl Default for EncoderTrainSection {
    fn default() -> Self {
        EncoderTrainSection {
            steps: 500,
            batch_size: 8,
            lr: 1e-3,
            warmup_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionSection {
    pub mode: String,
    pub ratio: usize,
}

impl Default for InjectionSection {
    fn default() -> Self {
        InjectionSection {
            mode: "global".to_string(),
            ratio: 5,
        }
    }
}

impl InjectionSection {
    pub fn mode(&self) -> Result<InjectionMode> {
        match self.mode.as_str() {
            "global" => Ok(InjectionMode::Global),
            "interleave" => Ok(InjectionMode::Interleave { ratio: self.ratio }),
            other => Err(Error::config(format!(
                "injection.mode must be 'global' or 'interleave', got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub d_llm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub teacher_d_llm: usize,
    pub teacher_n_layers: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            d_llm: 64,
            n_layers: 4,
            n_heads: 4,
            max_len: 48,
            teacher_d_llm: 128,
            teacher_n_layers: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct KdSection {
    pub alpha: f64,
    pub temperature: f64,
    pub setting: String,
    pub corruption_rate: f64,
    pub n_examples: usize,
}

impl Default for KdSection {
    fn default() -> Self {
        KdSection {
            alpha: 0.0,
            temperature: 2.0,
            setting: "ASRQ_ASRA".to_string(),
            corruption_rate: 0.1,
            n_examples: 256,
        }
    }
}

impl KdSection {
    pub fn setting(&self) -> Result<SourceSetting> {
        match self.setting.as_str() {
            "GTQ_GTA" => Ok(SourceSetting::GtqGta),
            "ASRQ_ASRA" => Ok(SourceSetting::AsrqAsra),
            "ASRQ_GTA" => Ok(SourceSetting::AsrqGta),
            other => Err(Error::config(format!(
                "kd.setting must be GTQ_GTA, ASRQ_ASRA, or ASRQ_GTA, got '{other}'"
            ))),
        }
    }

    pub fn kd_config(&self) -> Result<KdConfig> {
        let cfg = KdConfig {
            alpha: self.alpha,
            temperature: self.temperature,
            setting: self.setting()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneTrainSection {
    pub base_epochs: usize,
    pub base_lr: f64,
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    pub batch_size: usize,
    pub batch_nominal: usize,
}

impl Default for BackboneTrainSection {
    fn default() -> Self {
        BackboneTrainSection {
            base_epochs: 30,
            base_lr: 2e-3,
            stage1_epochs: 4,
            stage1_lr: 1e-3,
            stage2_epochs: 8,
            stage2_lr: 5e-4,
            batch_size: 16,
            batch_nominal: 1024,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub kind: String,
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub n_seeds: usize,
    pub n_folds: usize,
    pub attributes: Vec<String>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let d = ProbeConfig::default();
        ProbeSection {
            kind: "two_layer".to_string(),
            hidden: d.hidden,
            dropout: d.dropout,
            lr: d.lr,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            patience: d.patience,
            n_seeds: d.n_seeds,
            n_folds: d.n_folds,
            attributes: ["speaker", "pitch", "energy", "emotion"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl ProbeSection {
    pub fn probe_config(&self) -> Result<ProbeConfig> {
        let kind = match self.kind.as_str() {
            "one_layer" => ProbeKind::OneLayer,
            "two_layer" => ProbeKind::TwoLayer,
            other => {
                return Err(Error::config(format!(
                    "probe.kind must be 'one_layer' or 'two_layer', got '{other}'"
                )))
            }
        };
        let cfg = ProbeConfig {
            kind,
            hidden: self.hidden,
            dropout: self.dropout,
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            n_seeds: self.n_seeds,
            n_folds: self.n_folds,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_benchmark_items: usize,
    pub plots: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_benchmark_items: 200,
            plots: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    #[serde(default = "default_stages")]
    pub stages: Vec<String>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    pub reconstructor: ReconSection,
    #[serde(default)]
    pub encoder_train: EncoderTrainSection,
    #[serde(default)]
    pub injection: InjectionSection,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub kd: KdSection,
    #[serde(default)]
    pub backbone_train: BackboneTrainSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn asr_config(&self) -> AsrConfig {
        AsrConfig {
            d: self.encoder.d,
            n_enc_layers: self.encoder.n_enc_layers,
            n_dec_layers: self.encoder.n_dec_layers,
            n_heads: self.encoder.n_heads,
            vocab_size: self.data.vocab_size,
            max_text_len: self.encoder.max_text_len,
            prosody_layer: self.encoder.prosody_layer,
            n_mels: self.data.n_mels,
            n_frames: self.data.n_frames,
            stride: self.encoder.stride,
        }
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            d_r: self.reconstructor.d_r,
            n_enc_layers: self.reconstructor.n_enc_layers,
            n_dec_layers: self.reconstructor.n_dec_layers,
            n_heads: self.reconstructor.n_heads,
            dropout: self.reconstructor.dropout,
            n_frames: self.data.n_frames,
            n_mels: self.data.n_mels,
            lambda: self.reconstructor.lambda,
        }
    }

    pub fn encoder_train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.encoder_train.steps,
            batch_size: self.encoder_train.batch_size,
            lr: self.encoder_train.lr,
            warmup_frac: self.encoder_train.warmup_frac,
            seed: crate::util::seed_for(self.master_seed, "encoder-train"),
            ablate_recon: false,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            d_llm: self.backbone.d_llm,
            n_layers: self.backbone.n_layers,
            n_heads: self.backbone.n_heads,
            vocab_size: 64,
            max_len: self.backbone.max_len,
        }
    }

    pub fn teacher_config(&self) -> BackboneConfig {
        BackboneConfig {
            d_llm: self.backbone.teacher_d_llm,
            n_layers: self.backbone.teacher_n_layers,
            n_heads: self.backbone.n_heads,
            vocab_size: 64,
            max_len: self.backbone.max_len,
        }
    }

    pub fn corruption_channel(&self) -> CorruptionChannel {
        CorruptionChannel {
            rate: self.kd.corruption_rate,
            vocab: self.data.vocab_size,
            seed: crate::util::seed_for(self.master_seed, "asr-channel"),
        }
    }

    pub fn stage_plan(&self, stage: u8) -> TrainStagePlan {
        let (lr, epochs) = match stage {
            1 => (self.backbone_train.stage1_lr, self.backbone_train.stage1_epochs),
            _ => (self.backbone_train.stage2_lr, self.backbone_train.stage2_epochs),
        };
        TrainStagePlan {
            stage,
            lr,
            epochs,
            batch_size: self.backbone_train.batch_size,
            batch_nominal: self.backbone_train.batch_nominal,
            seed: crate::util::seed_for(self.master_seed, if stage == 1 { "stage1" } else { "stage2" }),
            injection: self.injection.mode().expect("validated"),
        }
    }

    /// Full semantic validation beyond the serde schema; error messages name
    /// the offending config path.
    pub fn validate(&self) -> Result<()> {
        for stage in &self.stages {
            if !STAGE_NAMES.contains(&stage.as_str()) {
                return Err(Error::config(format!(
                    "stages: unknown stage '{stage}' (known: {})",
                    STAGE_NAMES.join(", ")
                )));
            }
        }
        self.data
            .distribution()
            .validate()
            .map_err(|e| Error::config(format!("data: {e}")))?;
        self.data
            .render()
            .validate()
            .map_err(|e| Error::config(format!("data: {e}")))?;
        self.data
            .fractions()
            .validate()
            .map_err(|e| Error::config(format!("data: {e}")))?;
        self.asr_config()
            .validate()
            .map_err(|e| Error::config(format!("encoder: {e}")))?;
        self.recon_config()
            .validate()
            .map_err(|e| Error::config(format!("reconstructor: {e}")))?;
        self.encoder_train_config()
            .validate()
            .map_err(|e| Error::config(format!("encoder_train: {e}")))?;
        self.injection
            .mode()
            .map_err(|e| Error::config(format!("injection: {e}")))?;
        self.backbone_config()
            .validate()
            .map_err(|e| Error::config(format!("backbone: {e}")))?;
        self.teacher_config()
            .validate()
            .map_err(|e| Error::config(format!("backbone (teacher): {e}")))?;
        self.kd
            .kd_config()
            .map_err(|e| Error::config(format!("kd: {e}")))?;
        if !(0.0..=1.0).contains(&self.kd.corruption_rate) {
            return Err(Error::config("kd.corruption_rate must be in [0, 1]"));
        }
        if self.kd.n_examples == 0 {
            return Err(Error::config("kd.n_examples must be >= 1"));
        }
        self.probe
            .probe_config()
            .map_err(|e| Error::config(format!("probe: {e}")))?;
        for attr in &self.probe.attributes {
            if !["speaker", "pitch", "energy", "emotion"].contains(&attr.as_str()) {
                return Err(Error::config(format!(
                    "probe.attributes: unknown attribute '{attr}'"
                )));
            }
        }
        let plan1 = self.stage_plan(1);
        plan1
            .validate()
            .map_err(|e| Error::config(format!("backbone_train: {e}")))?;
        self.stage_plan(2)
            .validate()
            .map_err(|e| Error::config(format!("backbone_train: {e}")))?;
        if self.eval.n_benchmark_items == 0 {
            return Err(Error::config("eval.n_benchmark_items must be >= 1"));
        }
        // pair-merged ids must fit the backbone vocabulary
        let merged_top = self.data.vocab_size + self.data.vocab_size * self.data.vocab_size;
        if merged_top > self.backbone_config().vocab_size {
            return Err(Error::config(format!(
                "data.vocab_size {} re-segments into ids up to {merged_top}, beyond the backbone vocabulary {}",
                self.data.vocab_size,
                self.backbone_config().vocab_size
            )));
        }
        Ok(())
    }

    /// Parses TOML text with environment overrides applied
    /// (`PROSOLM_<SECTION>__<FIELD>`, upper-cased, `__` separating path
    /// segments).
    pub fn from_toml_str(text: &str, env: &[(String, String)]) -> Result<ExperimentConfig> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::config(format!("config parse error: {e}")))?;
        let mut value = toml::Value::Table(table);
        for (key, raw) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<String> = rest.split("__").map(|s| s.to_lowercase()).collect();
            set_by_path(&mut value, &path, raw)?;
        }
        let config: ExperimentConfig = value
            .try_into()
            .map_err(|e| Error::config(format!("config schema error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let env: Vec<(String, String)> = std::env::vars().collect();
        Self::from_toml_str(&text, &env)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Digest of the canonicalized config, used by stage completion markers.
    pub fn digest(&self) -> String {
        crate::util::sha256_hex(self.to_toml_string().as_bytes())
    }
}

/// Parses a raw string as a TOML scalar (bool, integer, float, then string).
fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn set_by_path(root: &mut toml::Value, path: &[String], raw: &str) -> Result<()> {
    if path.is_empty() || path.iter().any(|p| p.is_empty()) {
        return Err(Error::config("empty override path"));
    }
    let mut node = root;
    for segment in &path[..path.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path '{segment}' is not a table")))?;
        node = table
            .entry(segment.clone())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config("override path does not reach a table"))?;
    table.insert(path[path.len() - 1].clone(), parse_scalar(raw));
    Ok(())
}

/// One sweep axis: a config path plus the values to try.
#[derive(Debug, Clone)]
pub struct SweepAxis {
    pub path: Vec<String>,
    pub values: Vec<String>,
}

impl SweepAxis {
    /// Parses `section.field=v1,v2,v3`.
    pub fn parse(spec: &str) -> Result<SweepAxis> {
        let (path, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("sweep axis '{spec}' missing '='")))?;
        let path: Vec<String> = path.split('.').map(|s| s.trim().to_string()).collect();
        let values: Vec<String> = values.split(',').map(|s| s.trim().to_string()).collect();
        if path.is_empty() || values.is_empty() || values.iter().any(|v| v.is_empty()) {
            return Err(Error::config(format!("sweep axis '{spec}' is malformed")));
        }
        Ok(SweepAxis { path, values })
    }
}

/// Expands the cartesian product of the axes over a base config. Returns
/// `(assignment description, config)` pairs in row-major axis order.
pub fn expand_sweep(
    base_toml: &str,
    axes: &[SweepAxis],
) -> Result<Vec<(Vec<(String, String)>, ExperimentConfig)>> {
    let mut combos: Vec<Vec<(Vec<String>, String)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::new();
        for combo in &combos {
            for value in &axis.values {
                let mut c = combo.clone();
                c.push((axis.path.clone(), value.clone()));
                next.push(c);
            }
        }
        combos = next;
    }
    let mut out = Vec::with_capacity(combos.len());
    for combo in combos {
        let table: toml::Table = base_toml
            .parse()
            .map_err(|e| Error::config(format!("config parse error: {e}")))?;
        let mut value = toml::Value::Table(table);
        let mut description = Vec::new();
        for (path, raw) in &combo {
            set_by_path(&mut value, path, raw)?;
            description.push((path.join("."), raw.clone()));
        }
        let config: ExperimentConfig = value
            .try_into()
            .map_err(|e| Error::config(format!("config schema error: {e}")))?;
        config.validate()?;
        out.push((description, config));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[reconstructor]\nlambda = 1.0\n";

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.master_seed, 42);
        assert_eq!(cfg.stages.len(), 7);
        assert_eq!(cfg.reconstructor.lambda, 1.0);
        assert_eq!(cfg.reconstructor.d_r, 64);
    }

    #[test]
    fn missing_lambda_is_a_schema_error_naming_the_field() {
        let err = ExperimentConfig::from_toml_str("[reconstructor]\nd_r = 32\n", &[]).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("lambda"), "message: {msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = ExperimentConfig::from_toml_str(
            "[reconstructor]\nlambda = 1.0\nbogus = 3\n",
            &[],
        )
        .unwrap_err();
        assert!(format!("{err}").contains("bogus"));
    }

    #[test]
    fn env_overrides_apply_by_path() {
        let env = vec![
            ("PROSOLM_KD__ALPHA".to_string(), "0.5".to_string()),
            ("PROSOLM_MASTER_SEED".to_string(), "7".to_string()),
            ("PROSOLM_KD__SETTING".to_string(), "GTQ_GTA".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, &env).unwrap();
        assert_eq!(cfg.kd.alpha, 0.5);
        assert_eq!(cfg.master_seed, 7);
        assert_eq!(cfg.kd.setting, "GTQ_GTA");
    }

    #[test]
    fn config_round_trips_losslessly() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, &[]).unwrap();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text, &[]).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.digest(), back.digest());
    }

    #[test]
    fn semantic_validation_names_the_section() {
        let err = ExperimentConfig::from_toml_str(
            "[reconstructor]\nlambda = 1.0\n[encoder]\nd = 63\nn_enc_layers = 2\nn_dec_layers = 4\nn_heads = 4\nmax_text_len = 12\nprosody_layer = 2\nstride = 2\n",
            &[],
        )
        .unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("encoder"), "{msg}");
    }

    #[test]
    fn unknown_stage_is_rejected() {
        let err = ExperimentConfig::from_toml_str(
            "stages = [\"gen-data\", \"frobnicate\"]\n[reconstructor]\nlambda = 1.0\n",
            &[],
        )
        .unwrap_err();
        assert!(format!("{err}").contains("frobnicate"));
    }

    #[test]
    fn sweep_expands_cartesian_product() {
        let axes = vec![
            SweepAxis::parse("kd.alpha=0,0.5,1").unwrap(),
            SweepAxis::parse("kd.setting=GTQ_GTA,ASRQ_ASRA,ASRQ_GTA").unwrap(),
        ];
        let expanded = expand_sweep(MINIMAL, &axes).unwrap();
        assert_eq!(expanded.len(), 9);
        let descriptions: Vec<String> = expanded
            .iter()
            .map(|(d, _)| {
                d.iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        assert_eq!(descriptions[0], "kd.alpha=0,kd.setting=GTQ_GTA");
        assert_eq!(descriptions[8], "kd.alpha=1,kd.setting=ASRQ_GTA");
        assert_eq!(expanded[4].1.kd.alpha, 0.5);
        assert_eq!(expanded[4].1.kd.setting, "ASRQ_ASRA");
    }
}
