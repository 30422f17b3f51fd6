//! Knowledge distillation under mismatched conditioning.
//!
//! The student consumes recognizer-produced text plus an injected prosody
//! embedding; the teacher consumes clean text. Distillation matches the
//! student's next-token distribution to the teacher's at answer positions
//! with a temperature-scaled forward KL, blended with cross-entropy by a
//! coefficient alpha. Teacher and student sequences differ in length, so
//! positions are aligned by response-token index (the k-th response token on
//! each side), the only coordinate the two sequences share.

use std::path::Path;

use ndarray::{s, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Var};
use crate::backbone::{train_stage, Backbone, KdTerm, StageExample, StageMetric, TapeSlot, TrainStagePlan};
use crate::error::{Error, Result};
use crate::inject::{build_global_input, MixedSequence, Projector, Slot};
use crate::util::derive_seed;

/// Which text source feeds each side of the distillation pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceSetting {
    /// Ground-truth text on both sides.
    #[serde(rename = "GTQ_GTA")]
    GtqGta,
    /// Recognizer text on both sides.
    #[serde(rename = "ASRQ_ASRA")]
    AsrqAsra,
    /// Recognizer text for the student, ground-truth text for the teacher.
    #[serde(rename = "ASRQ_GTA")]
    AsrqGta,
}

impl SourceSetting {
    pub fn all() -> [SourceSetting; 3] {
        [
            SourceSetting::GtqGta,
            SourceSetting::AsrqAsra,
            SourceSetting::AsrqGta,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            SourceSetting::GtqGta => "GTQ_GTA",
            SourceSetting::AsrqAsra => "ASRQ_ASRA",
            SourceSetting::AsrqGta => "ASRQ_GTA",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KdConfig {
    /// Blend weight: `alpha * KL + (1 - alpha) * CE`.
    pub alpha: f64,
    /// Distillation temperature.
    pub temperature: f64,
    pub setting: SourceSetting,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            alpha: 0.0,
            temperature: 2.0,
            setting: SourceSetting::AsrqAsra,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn softmax_with_temp(row: ndarray::ArrayView1<f64>, t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|&z| z / t).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Temperature-scaled forward KL summed over paired answer positions:
/// `T^2 * sum_j KL(softmax(z_t/T) || softmax(z_s/T))`. `answer_positions`
/// pairs a teacher logit row with its student logit row (alignment by
/// response index). The teacher side is a constant.
pub fn kd_kl_loss(
    teacher_logits: &Array2<f64>,
    student_logits: &Array2<f64>,
    answer_positions: &[(usize, usize)],
    t_kd: f64,
) -> Result<f64> {
    if answer_positions.is_empty() {
        return Err(Error::input("no answer positions to distill"));
    }
    if teacher_logits.ncols() != student_logits.ncols() {
        return Err(Error::input(format!(
            "vocabulary widths differ: teacher {} vs student {}",
            teacher_logits.ncols(),
            student_logits.ncols()
        )));
    }
    if t_kd <= 0.0 {
        return Err(Error::config("temperature must be > 0"));
    }
    for &(tr, sr) in answer_positions {
        if tr >= teacher_logits.nrows() || sr >= student_logits.nrows() {
            return Err(Error::input(format!(
                "answer position ({tr}, {sr}) outside logits ({} teacher rows, {} student rows)",
                teacher_logits.nrows(),
                student_logits.nrows()
            )));
        }
    }
    let mut total = 0.0;
    for &(tr, sr) in answer_positions {
        let p = softmax_with_temp(teacher_logits.row(tr), t_kd);
        let q = softmax_with_temp(student_logits.row(sr), t_kd);
        for (pv, qv) in p.iter().zip(&q) {
            if *pv > 0.0 {
                total += pv * (pv.ln() - qv.ln());
            }
        }
    }
    Ok(t_kd * t_kd * total)
}

/// On-tape KL term for training. `teacher_answer_logits` has one row per
/// answer position (already gathered and aligned); `student_answer_logits`
/// is the matching on-tape slice. Gradient flows only through the student.
pub fn kd_kl_on_tape(
    tape: &mut Tape,
    teacher_answer_logits: &Array2<f64>,
    student_answer_logits: Var,
    temperature: f64,
) -> Var {
    let rows = teacher_answer_logits.nrows();
    assert_eq!(
        tape.value(student_answer_logits).nrows(),
        rows,
        "teacher/student answer row counts differ"
    );
    // constant part: sum_j sum_v p ln p
    let mut teacher_probs = Array2::zeros(teacher_answer_logits.raw_dim());
    let mut entropy_term = 0.0;
    for (i, row) in teacher_answer_logits.outer_iter().enumerate() {
        let p = softmax_with_temp(row, temperature);
        for (j, &pv) in p.iter().enumerate() {
            teacher_probs[[i, j]] = pv;
            if pv > 0.0 {
                entropy_term += pv * pv.ln();
            }
        }
    }
    let scaled = tape.scale(student_answer_logits, 1.0 / temperature);
    let ls = tape.log_softmax_rows(scaled);
    let p_const = tape.constant(teacher_probs);
    let cross = tape.mul(p_const, ls);
    let cross_sum = tape.sum_all(cross);
    let c = tape.scalar(entropy_term);
    let diff = tape.sub(c, cross_sum);
    tape.scale(diff, temperature * temperature)
}

/// Affine blend `alpha * l_kl + (1 - alpha) * l_ce`.
pub fn mixed_loss(l_kl: f64, l_ce: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    Ok(alpha * l_kl + (1.0 - alpha) * l_ce)
}

/// One distillation example before pairing: both text sources, the prosody
/// matrix, and the supervision response.
#[derive(Debug, Clone)]
pub struct KdExample {
    pub gt_text: Vec<u32>,
    pub asr_text: Vec<u32>,
    pub prosody: Array2<f64>,
    pub response: Vec<u32>,
}

/// A constructed teacher/student pair. Answer positions index logit rows on
/// each side, paired by response-token index.
#[derive(Debug, Clone)]
pub struct KdPair {
    /// Full teacher input: `[BOS, prompt..., SEP, response...]`.
    pub teacher_tokens: Vec<u32>,
    /// Full student input with one prepended embedding (global mode).
    pub student_seq: MixedSequence,
    /// Student prompt text (before framing), for on-tape rebuilds.
    pub student_text: Vec<u32>,
    pub answer_positions: Vec<(usize, usize)>,
    pub response: Vec<u32>,
}

impl KdExample {
    fn texts_for(&self, setting: SourceSetting) -> (&[u32], &[u32]) {
        match setting {
            SourceSetting::GtqGta => (&self.gt_text, &self.gt_text),
            SourceSetting::AsrqAsra => (&self.asr_text, &self.asr_text),
            SourceSetting::AsrqGta => (&self.gt_text, &self.asr_text),
        }
    }
}

/// Builds the (teacher input, student input, answer positions) triple for a
/// setting. The student sequence is global-mode: exactly one prepended
/// embedding, then text, SEP, response.
pub fn build_kd_pair(
    example: &KdExample,
    setting: SourceSetting,
    projector: &Projector,
    ps: &ParamSet,
    backbone_cfg: &crate::backbone::BackboneConfig,
) -> Result<KdPair> {
    if example.response.is_empty() {
        return Err(Error::input("distillation example has an empty response"));
    }
    if example.gt_text.is_empty() || example.asr_text.is_empty() {
        return Err(Error::input("distillation example has an empty prompt"));
    }
    let (teacher_text, student_text) = example.texts_for(setting);

    let mut teacher_tokens = Vec::with_capacity(teacher_text.len() + example.response.len() + 2);
    teacher_tokens.push(backbone_cfg.bos());
    teacher_tokens.extend_from_slice(teacher_text);
    teacher_tokens.push(backbone_cfg.sep());
    teacher_tokens.extend_from_slice(&example.response);

    let mut student_seq = build_global_input(student_text, &example.prosody, projector, ps)?;
    student_seq.slots.push(Slot::Token(backbone_cfg.sep()));
    student_seq
        .slots
        .extend(example.response.iter().map(|&t| Slot::Token(t)));

    // logit row at each side's SEP predicts response token 0
    let teacher_sep = 1 + teacher_text.len();
    let student_sep = 1 + student_text.len();
    let answer_positions = (0..example.response.len())
        .map(|k| (teacher_sep + k, student_sep + k))
        .collect();

    Ok(KdPair {
        teacher_tokens,
        student_seq,
        student_text: student_text.to_vec(),
        answer_positions,
        response: example.response.clone(),
    })
}

/// Substitution-noise channel standing in for recognizer errors: each token
/// independently flips to a uniformly drawn different id with probability
/// `rate`. Deterministic per (channel seed, item seed).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorruptionChannel {
    pub rate: f64,
    pub vocab: u32,
    pub seed: u64,
}

impl CorruptionChannel {
    pub fn corrupt(&self, tokens: &[u32], item_seed: u64) -> Vec<u32> {
        if self.rate <= 0.0 || self.vocab < 2 {
            return tokens.to_vec();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, item_seed));
        tokens
            .iter()
            .map(|&t| {
                if rng.random_range(0.0..1.0) < self.rate {
                    let mut sub = rng.random_range(0..self.vocab - 1);
                    if sub >= t {
                        sub += 1;
                    }
                    sub
                } else {
                    t
                }
            })
            .collect()
    }
}

/// Teacher logits at the answer rows of `[BOS, prompt, SEP, response]`,
/// teacher-forced; pure inference, no gradient.
pub fn teacher_answer_logits(
    teacher: &Backbone,
    teacher_ps: &ParamSet,
    teacher_tokens: &[u32],
    response_len: usize,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let slots: Vec<TapeSlot> = teacher_tokens
        .iter()
        .map(|&t| TapeSlot::Token(t as usize))
        .collect();
    let logits = teacher.forward_slots_on_tape(&mut tape, teacher_ps, &slots);
    let lv = tape.value(logits);
    let sep = teacher_tokens.len() - 1 - response_len;
    Ok(lv.slice(s![sep..sep + response_len, ..]).to_owned())
}

/// Runs the two-stage pipeline (projector-only, then joint) on distillation
/// data under one source setting and alpha. Teacher parameters are read-only
/// throughout; with `alpha = 0` the teacher distribution is not consulted
/// and training is pure cross-entropy on the responses.
#[allow(clippy::too_many_arguments)]
pub fn train_student_two_stage(
    student: &Backbone,
    projector: &Projector,
    ps: &mut ParamSet,
    teacher: Option<(&Backbone, &ParamSet)>,
    examples: &[KdExample],
    kd_cfg: &KdConfig,
    stage1: &TrainStagePlan,
    stage2: &TrainStagePlan,
) -> Result<Vec<StageMetric>> {
    kd_cfg.validate()?;
    if stage1.stage != 1 || stage2.stage != 2 {
        return Err(Error::config("plans must be stage 1 then stage 2"));
    }
    let mut stage_examples = Vec::with_capacity(examples.len());
    let mut teacher_logit_sets = Vec::with_capacity(examples.len());
    for ex in examples {
        let (teacher_text, student_text) = ex.texts_for(kd_cfg.setting);
        stage_examples.push(StageExample {
            text: student_text.to_vec(),
            prosody: Some(ex.prosody.clone()),
            response: ex.response.clone(),
        });
        if kd_cfg.alpha > 0.0 {
            let (teacher_model, teacher_ps) = teacher.ok_or_else(|| {
                Error::config("alpha > 0 requires a teacher model")
            })?;
            let mut tokens = Vec::with_capacity(teacher_text.len() + ex.response.len() + 2);
            tokens.push(student.cfg.bos());
            tokens.extend_from_slice(teacher_text);
            tokens.push(student.cfg.sep());
            tokens.extend_from_slice(&ex.response);
            teacher_logit_sets.push(teacher_answer_logits(
                teacher_model,
                teacher_ps,
                &tokens,
                ex.response.len(),
            )?);
        }
    }

    let kd_term = (kd_cfg.alpha > 0.0).then(|| KdTerm {
        alpha: kd_cfg.alpha,
        temperature: kd_cfg.temperature,
        teacher_answer_logits: &teacher_logit_sets,
    });

    let mut metrics = train_stage(
        student,
        projector,
        ps,
        &stage_examples,
        stage1,
        kd_term.as_ref(),
    )?;
    metrics.extend(train_stage(
        student,
        projector,
        ps,
        &stage_examples,
        stage2,
        kd_term.as_ref(),
    )?);
    Ok(metrics)
}

/// On-disk record for a distillation example; the prosody matrix lives in a
/// referenced matrix file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KdRecord {
    pub gt_text: Vec<u32>,
    pub asr_text: Vec<u32>,
    pub prosody_path: String,
    pub response: Vec<u32>,
    pub setting: SourceSetting,
}

pub fn write_kd_records(path: &Path, records: &[KdRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_kd_records(path: &Path) -> Result<Vec<KdRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(|line| {
            serde_json::from_str(line).map_err(|e| Error::format(format!("kd record: {e}")))
        })
        .collect()
}

/// Loads records into examples, reading each referenced prosody matrix
/// relative to `root`.
pub fn load_kd_examples(root: &Path, records: &[KdRecord]) -> Result<Vec<KdExample>> {
    records
        .iter()
        .map(|r| {
            Ok(KdExample {
                gt_text: r.gt_text.clone(),
                asr_text: r.asr_text.clone(),
                prosody: crate::io::read_matrix(&root.join(&r.prosody_path))?,
                response: r.response.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use ndarray::array;

    /// Explicit softmax/KL oracle used to pin expected values.
    fn oracle_kl(
        teacher: &Array2<f64>,
        student: &Array2<f64>,
        pairs: &[(usize, usize)],
        t: f64,
    ) -> f64 {
        let mut total = 0.0;
        for &(tr, sr) in pairs {
            let p = softmax_with_temp(teacher.row(tr), t);
            let q = softmax_with_temp(student.row(sr), t);
            for (pv, qv) in p.iter().zip(&q) {
                total += pv * (pv.ln() - qv.ln());
            }
        }
        t * t * total
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let logits = array![[0.3, -1.0, 2.0], [0.0, 0.0, 1.0]];
        let loss = kd_kl_loss(&logits, &logits, &[(0, 0), (1, 1)], 2.0).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    /// Hand case: vocab 2, teacher (ln 2, 0), student (0, 0), T = 1.
    /// KL = (2/3) ln(4/3) + (1/3) ln(2/3).
    #[test]
    fn kl_matches_hand_softmax_case() {
        let teacher = array![[std::f64::consts::LN_2, 0.0]];
        let student = array![[0.0, 0.0]];
        let expected = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
        let got = kd_kl_loss(&teacher, &student, &[(0, 0)], 1.0).unwrap();
        assert!((got - expected).abs() < 1e-7, "got {got}, expected {expected}");
        assert!((got - 0.056633012265132435).abs() < 1e-12);
        let oracle = oracle_kl(&teacher, &student, &[(0, 0)], 1.0);
        assert!((got - oracle).abs() < 1e-12);
    }

    /// Temperature changes re-softmax and rescale by T^2; both temperatures
    /// must match the explicit-formula oracle.
    #[test]
    fn temperature_scaling_matches_oracle() {
        let teacher = array![[1.0, -0.5, 0.25], [2.0, 0.0, -1.0]];
        let student = array![[0.2, 0.1, -0.3], [0.5, 0.5, 0.5]];
        let pairs = [(0usize, 0usize), (1, 1)];
        for t in [1.0, 2.0] {
            let got = kd_kl_loss(&teacher, &student, &pairs, t).unwrap();
            let oracle = oracle_kl(&teacher, &student, &pairs, t);
            assert!((got - oracle).abs() < 1e-12, "T = {t}");
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let teacher = Array2::from_shape_fn((2, 4), |_| rng.random_range(-2.0..2.0));
            let student = Array2::from_shape_fn((2, 4), |_| rng.random_range(-2.0..2.0));
            let pairs = [(0usize, 0usize), (1, 1)];
            let loss = kd_kl_loss(&teacher, &student, &pairs, 2.0).unwrap();
            assert!(loss >= 0.0);
            let oracle = oracle_kl(&teacher, &student, &pairs, 2.0);
            assert!((loss - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn kl_rejects_bad_inputs() {
        let a = Array2::zeros((2, 3));
        let b = Array2::zeros((2, 4));
        assert!(matches!(
            kd_kl_loss(&a, &b, &[(0, 0)], 1.0).unwrap_err(),
            Error::Input(_)
        ));
        let c = Array2::zeros((2, 3));
        assert!(matches!(
            kd_kl_loss(&a, &c, &[], 1.0).unwrap_err(),
            Error::Input(_)
        ));
        assert!(matches!(
            kd_kl_loss(&a, &c, &[(5, 0)], 1.0).unwrap_err(),
            Error::Input(_)
        ));
    }

    #[test]
    fn on_tape_kl_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let teacher = Array2::from_shape_fn((3, 5), |_| rng.random_range(-2.0..2.0));
            let student = Array2::from_shape_fn((3, 5), |_| rng.random_range(-2.0..2.0));
            let pairs: Vec<(usize, usize)> = (0..3).map(|i| (i, i)).collect();
            let reference = kd_kl_loss(&teacher, &student, &pairs, 2.0).unwrap();
            let mut tape = Tape::new();
            let s = tape.input(student.clone());
            let loss = kd_kl_on_tape(&mut tape, &teacher, s, 2.0);
            let got = tape.value(loss)[[0, 0]];
            assert!((got - reference).abs() < 1e-10);
        }
    }

    /// KL gradient check against central finite differences (64-bit, 1e-5).
    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let teacher = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.5..1.5));
        let student0 = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.5..1.5));
        let pairs: Vec<(usize, usize)> = vec![(0, 0), (1, 1)];

        let params = ParamSet::new();
        let mut tape = Tape::new();
        let s = tape.input(student0.clone());
        let loss = kd_kl_on_tape(&mut tape, &teacher, s, 2.0);
        let mut grads = params.grad_store();
        tape.backward(loss, &mut grads);
        let analytic = tape.grad(s).unwrap().clone();

        let step = 1e-5;
        let mut max_rel = 0.0f64;
        for r in 0..2 {
            for c in 0..4 {
                let mut sp = student0.clone();
                sp[[r, c]] += step;
                let mut sm = student0.clone();
                sm[[r, c]] -= step;
                let fd = (kd_kl_loss(&teacher, &sp, &pairs, 2.0).unwrap()
                    - kd_kl_loss(&teacher, &sm, &pairs, 2.0).unwrap())
                    / (2.0 * step);
                let a = analytic[[r, c]];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    /// One gradient step on the KL strictly decreases it (convex in the
    /// student logits).
    #[test]
    fn kl_descends_under_one_gradient_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let teacher = Array2::from_shape_fn((1, 3), |_| rng.random_range(-1.0..1.0));
        let student0 = Array2::from_shape_fn((1, 3), |_| rng.random_range(-1.0..1.0));
        let before = kd_kl_loss(&teacher, &student0, &[(0, 0)], 1.0).unwrap();

        let params = ParamSet::new();
        let mut tape = Tape::new();
        let s = tape.input(student0.clone());
        let loss = kd_kl_on_tape(&mut tape, &teacher, s, 1.0);
        let mut grads = params.grad_store();
        tape.backward(loss, &mut grads);
        let g = tape.grad(s).unwrap();
        let stepped = &student0 - &(g * 0.5);
        let after = kd_kl_loss(&teacher, &stepped, &[(0, 0)], 1.0).unwrap();
        assert!(after < before, "loss went {before} -> {after}");
    }

    #[test]
    fn mixed_loss_endpoints_and_blend() {
        assert_eq!(mixed_loss(7.0, 2.0, 0.0).unwrap(), 2.0);
        assert_eq!(mixed_loss(7.0, 2.0, 1.0).unwrap(), 7.0);
        assert_eq!(mixed_loss(4.0, 2.0, 0.5).unwrap(), 3.0);
        assert!(matches!(
            mixed_loss(1.0, 1.0, 1.5).unwrap_err(),
            Error::Config(_)
        ));
    }

    fn pair_fixture() -> (Projector, ParamSet, BackboneConfig, KdExample) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let projector = Projector::new(&mut ps, "proj", 4, 8, &mut rng);
        let cfg = BackboneConfig {
            d_llm: 8,
            n_layers: 1,
            n_heads: 2,
            vocab_size: 16,
            max_len: 32,
        };
        let example = KdExample {
            gt_text: vec![1, 2, 3],
            asr_text: vec![1, 9, 3],
            prosody: Array2::from_shape_fn((5, 4), |(i, j)| (i + j) as f64 * 0.1),
            response: vec![4, 5],
        };
        (projector, ps, cfg, example)
    }

    #[test]
    fn pair_settings_route_text_sources() {
        let (projector, ps, cfg, example) = pair_fixture();
        let gt = build_kd_pair(&example, SourceSetting::GtqGta, &projector, &ps, &cfg).unwrap();
        assert_eq!(&gt.teacher_tokens[1..4], &[1, 2, 3]);
        assert_eq!(gt.student_text, vec![1, 2, 3]);

        let asr = build_kd_pair(&example, SourceSetting::AsrqAsra, &projector, &ps, &cfg).unwrap();
        assert_eq!(&asr.teacher_tokens[1..4], &[1, 9, 3]);
        assert_eq!(asr.student_text, vec![1, 9, 3]);

        let mixed = build_kd_pair(&example, SourceSetting::AsrqGta, &projector, &ps, &cfg).unwrap();
        assert_eq!(&mixed.teacher_tokens[1..4], &[1, 2, 3]);
        assert_eq!(mixed.student_text, vec![1, 9, 3]);
        // response ids identical on both sides
        let n = mixed.teacher_tokens.len();
        assert_eq!(&mixed.teacher_tokens[n - 2..], &[4, 5]);
        assert_eq!(mixed.response, vec![4, 5]);
    }

    #[test]
    fn identical_sources_collapse_the_settings() {
        let (projector, ps, cfg, mut example) = pair_fixture();
        example.asr_text = example.gt_text.clone();
        let pairs: Vec<KdPair> = SourceSetting::all()
            .iter()
            .map(|&s| build_kd_pair(&example, s, &projector, &ps, &cfg).unwrap())
            .collect();
        for p in &pairs[1..] {
            assert_eq!(p.teacher_tokens, pairs[0].teacher_tokens);
            assert_eq!(p.student_seq, pairs[0].student_seq);
            assert_eq!(p.answer_positions, pairs[0].answer_positions);
        }
    }

    #[test]
    fn student_sequence_has_exactly_one_prepended_embedding() {
        let (projector, ps, cfg, example) = pair_fixture();
        for setting in SourceSetting::all() {
            let pair = build_kd_pair(&example, setting, &projector, &ps, &cfg).unwrap();
            assert_eq!(pair.student_seq.embed_positions(), vec![0]);
        }
    }

    #[test]
    fn pair_rejects_empty_response() {
        let (projector, ps, cfg, mut example) = pair_fixture();
        example.response.clear();
        assert!(matches!(
            build_kd_pair(&example, SourceSetting::GtqGta, &projector, &ps, &cfg).unwrap_err(),
            Error::Input(_)
        ));
    }

    #[test]
    fn answer_positions_align_by_response_index() {
        let (projector, ps, cfg, example) = pair_fixture();
        let pair = build_kd_pair(&example, SourceSetting::AsrqGta, &projector, &ps, &cfg).unwrap();
        // teacher: BOS + 3 prompt tokens -> SEP at row 4; student: E + 3 -> SEP at 4
        assert_eq!(pair.answer_positions, vec![(4, 4), (5, 5)]);

        let mut longer = example.clone();
        longer.asr_text = vec![1, 9, 3, 7];
        let pair = build_kd_pair(&longer, SourceSetting::AsrqGta, &projector, &ps, &cfg).unwrap();
        assert_eq!(pair.answer_positions, vec![(4, 5), (5, 6)]);
    }

    #[test]
    fn corruption_channel_is_seeded_and_rate_bounded() {
        let channel = CorruptionChannel {
            rate: 0.3,
            vocab: 7,
            seed: 42,
        };
        let tokens: Vec<u32> = (0..1000).map(|i| i % 7).collect();
        let a = channel.corrupt(&tokens, 1);
        let b = channel.corrupt(&tokens, 1);
        assert_eq!(a, b);
        let c = channel.corrupt(&tokens, 2);
        assert_ne!(a, c);
        let flips = a.iter().zip(&tokens).filter(|(x, y)| x != y).count();
        let rate = flips as f64 / tokens.len() as f64;
        assert!((0.2..0.4).contains(&rate), "observed flip rate {rate}");
        assert!(a.iter().all(|&t| t < 7));
    }

    /// Teacher parameters receive no update from distillation training.
    #[test]
    fn teacher_is_untouched_by_distillation() {
        let mut teacher_ps = ParamSet::new();
        let teacher = Backbone::new(
            &mut teacher_ps,
            BackboneConfig {
                d_llm: 16,
                n_layers: 1,
                n_heads: 2,
                vocab_size: 16,
                max_len: 32,
            },
            7,
        )
        .unwrap();
        let teacher_digest = teacher_ps.digest_where(|_| true);

        let mut ps = ParamSet::new();
        let student = Backbone::new(
            &mut ps,
            BackboneConfig {
                d_llm: 16,
                n_layers: 1,
                n_heads: 2,
                vocab_size: 16,
                max_len: 32,
            },
            8,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let projector = Projector::new(&mut ps, "proj", 4, 16, &mut rng);

        let examples: Vec<KdExample> = (0..6)
            .map(|i| KdExample {
                gt_text: vec![1, 2, (i % 4) as u32],
                asr_text: vec![1, 9, (i % 4) as u32],
                prosody: Array2::from_shape_fn((4, 4), |(r, c)| (r * c + i) as f64 * 0.05),
                response: vec![(i % 4) as u32],
            })
            .collect();
        let kd_cfg = KdConfig {
            alpha: 1.0,
            temperature: 2.0,
            setting: SourceSetting::AsrqAsra,
        };
        let plan = |stage| TrainStagePlan {
            stage,
            lr: 1e-3,
            epochs: 1,
            batch_size: 3,
            batch_nominal: 1024,
            seed: 10,
            injection: crate::inject::InjectionMode::Global,
        };
        train_student_two_stage(
            &student,
            &projector,
            &mut ps,
            Some((&teacher, &teacher_ps)),
            &examples,
            &kd_cfg,
            &plan(1),
            &plan(2),
        )
        .unwrap();
        assert_eq!(teacher_ps.digest_where(|_| true), teacher_digest);
    }

    /// At alpha = 0 the KL term contributes nothing: gradients match a run
    /// with no distillation term at all.
    #[test]
    fn alpha_zero_gradient_has_no_kl_component() {
        let mut ps = ParamSet::new();
        let cfg = BackboneConfig {
            d_llm: 16,
            n_layers: 1,
            n_heads: 2,
            vocab_size: 16,
            max_len: 32,
        };
        let backbone = Backbone::new(&mut ps, cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let projector = Projector::new(&mut ps, "proj", 4, 16, &mut rng);
        let ex = StageExample {
            text: vec![1, 2],
            prosody: Some(Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64 * 0.1)),
            response: vec![5],
        };
        let teacher_logits = Array2::from_shape_fn((1, 18), |(_, j)| j as f64 * 0.1);

        let mode = crate::inject::InjectionMode::Global;
        let grad_with = {
            let mut tape = Tape::new();
            let loss = crate::backbone::example_loss_on_tape(
                &backbone,
                &projector,
                &ps,
                &mut tape,
                &ex,
                mode,
                Some((0.0, 2.0, &teacher_logits)),
            )
            .unwrap();
            let mut grads = ps.grad_store();
            tape.backward(loss, &mut grads);
            grads
        };
        let grad_without = {
            let mut tape = Tape::new();
            let loss = crate::backbone::example_loss_on_tape(
                &backbone,
                &projector,
                &ps,
                &mut tape,
                &ex,
                mode,
                None,
            )
            .unwrap();
            let mut grads = ps.grad_store();
            tape.backward(loss, &mut grads);
            grads
        };
        for id in ps.ids() {
            assert_eq!(grad_with.grad(id), grad_without.grad(id), "{}", ps.name(id));
        }
    }
}
