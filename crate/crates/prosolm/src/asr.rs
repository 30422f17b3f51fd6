//! Miniature encoder-decoder speech recognizer.
//!
//! Maps a mel matrix to encoder states through a strided linear front end
//! plus transformer encoder, transcribes tokens autoregressively with greedy
//! decoding, and exposes any decoder layer's token-aligned hidden states as
//! prosody embeddings (teacher-forced on a provided token sequence).
//!
//! Internally the vocabulary is extended with two marker ids
//! (`BOS = vocab_size`, `EOS = vocab_size + 1`); public inputs and outputs
//! never contain them.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    causal_mask, normal_init, sinusoidal_pe, CrossAttnBlock, LayerNorm, Linear, SelfAttnBlock,
};
use crate::synth::MelSpectrogram;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AsrConfig {
    /// Hidden width of encoder and decoder.
    pub d: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    /// Size of the public token vocabulary (markers live above it).
    pub vocab_size: u32,
    /// Maximum transcript length emitted by greedy decoding.
    pub max_text_len: usize,
    /// 1-based decoder layer whose hidden states are the prosody embeddings.
    pub prosody_layer: usize,
    pub n_mels: usize,
    pub n_frames: usize,
    /// Front-end downsampling: encoder rows = ceil(n_frames / stride).
    pub stride: usize,
}

impl Default for AsrConfig {
    fn default() -> Self {
        AsrConfig {
            d: 64,
            n_enc_layers: 2,
            n_dec_layers: 4,
            n_heads: 4,
            vocab_size: 64,
            max_text_len: 12,
            prosody_layer: 2,
            n_mels: 16,
            n_frames: 40,
            stride: 2,
        }
    }
}

impl AsrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d = {} must be a positive multiple of n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if self.prosody_layer < 1 || self.prosody_layer > self.n_dec_layers {
            return Err(Error::config(format!(
                "prosody_layer = {} outside 1..={}",
                self.prosody_layer, self.n_dec_layers
            )));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(Error::config("layer counts must be >= 1"));
        }
        if self.vocab_size == 0 || self.max_text_len == 0 {
            return Err(Error::config("vocab_size and max_text_len must be >= 1"));
        }
        if self.stride == 0 || self.n_mels < 4 || self.n_frames < 4 {
            return Err(Error::config("stride must be >= 1 and mel dims >= 4"));
        }
        Ok(())
    }

    pub fn bos(&self) -> usize {
        self.vocab_size as usize
    }

    pub fn eos(&self) -> usize {
        self.vocab_size as usize + 1
    }

    pub fn extended_vocab(&self) -> usize {
        self.vocab_size as usize + 2
    }

    /// Encoder sequence length after the strided front end.
    pub fn encoder_len(&self) -> usize {
        self.n_frames.div_ceil(self.stride)
    }
}

/// Token sequence paired with its token-aligned prosody matrix.
#[derive(Debug, Clone)]
pub struct ProsodyStream {
    pub tokens: Vec<u32>,
    /// N×d, row i aligned with `tokens[i]`.
    pub prosody: Array2<f64>,
}

impl ProsodyStream {
    pub fn new(tokens: Vec<u32>, prosody: Array2<f64>) -> Result<Self> {
        if tokens.len() != prosody.nrows() {
            return Err(Error::input(format!(
                "{} tokens but {} prosody rows",
                tokens.len(),
                prosody.nrows()
            )));
        }
        if prosody.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("prosody matrix contains non-finite entries"));
        }
        Ok(ProsodyStream { tokens, prosody })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Results of a teacher-forced decoder pass used during joint training.
pub struct TeacherForced {
    /// Raw output of each decoder block over `[BOS, y*...]`.
    pub blocks: Vec<Var>,
    /// One logit row per decoder input position.
    pub logits: Var,
    /// `[y*..., EOS]` as extended-vocabulary ids.
    pub targets: Vec<u32>,
}

pub struct AsrModel {
    pub cfg: AsrConfig,
    front: Linear,
    enc_blocks: Vec<SelfAttnBlock>,
    enc_ln: LayerNorm,
    tok_emb: crate::autodiff::ParamId,
    dec_blocks: Vec<CrossAttnBlock>,
    dec_ln: LayerNorm,
    out: Linear,
}

impl AsrModel {
    /// Registers all parameters under the `asr.` prefix.
    pub fn new(ps: &mut ParamSet, cfg: AsrConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ff = 4 * cfg.d;
        let front = Linear::new(ps, "asr.front", cfg.stride * cfg.n_mels, cfg.d, &mut rng);
        let enc_blocks = (0..cfg.n_enc_layers)
            .map(|i| {
                SelfAttnBlock::new(ps, &format!("asr.enc{i}"), cfg.d, cfg.n_heads, ff, &mut rng)
            })
            .collect();
        let enc_ln = LayerNorm::new(ps, "asr.enc_ln", cfg.d);
        let tok_emb = ps.add(
            "asr.tok_emb",
            normal_init(cfg.extended_vocab(), cfg.d, 0.02, &mut rng),
        );
        let dec_blocks = (0..cfg.n_dec_layers)
            .map(|i| {
                CrossAttnBlock::new(ps, &format!("asr.dec{i}"), cfg.d, cfg.n_heads, ff, &mut rng)
            })
            .collect();
        let dec_ln = LayerNorm::new(ps, "asr.dec_ln", cfg.d);
        let out = Linear::new(ps, "asr.out", cfg.d, cfg.extended_vocab(), &mut rng);
        Ok(AsrModel {
            cfg,
            front,
            enc_blocks,
            enc_ln,
            tok_emb,
            dec_blocks,
            dec_ln,
            out,
        })
    }

    fn check_mel(&self, mel: &MelSpectrogram) -> Result<()> {
        if mel.n_mels() != self.cfg.n_mels || mel.n_frames() != self.cfg.n_frames {
            return Err(Error::input(format!(
                "mel is {}x{}, model expects {}x{}",
                mel.n_mels(),
                mel.n_frames(),
                self.cfg.n_mels,
                self.cfg.n_frames
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::input("token sequence is empty"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::input(format!(
                "token {t} outside vocabulary of size {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Strided patchify: groups of `stride` mel columns concatenated into one
    /// front-end input row; the last group is zero-padded.
    fn frontend_input(&self, mel: &MelSpectrogram) -> Array2<f64> {
        let f = self.cfg.n_mels;
        let le = self.cfg.encoder_len();
        let mut x = Array2::zeros((le, self.cfg.stride * f));
        for g in 0..le {
            for k in 0..self.cfg.stride {
                let t = g * self.cfg.stride + k;
                if t >= self.cfg.n_frames {
                    break;
                }
                for row in 0..f {
                    x[[g, k * f + row]] = mel.values()[[row, t]];
                }
            }
        }
        x
    }

    /// Encoder forward on an existing tape; returns the memory (L_e×d).
    pub fn encode_on_tape(&self, tape: &mut Tape, ps: &ParamSet, mel: &MelSpectrogram) -> Var {
        let x0 = self.frontend_input(mel);
        let le = x0.nrows();
        let x = tape.constant(x0);
        let mut h = self.front.forward(tape, ps, x);
        let pe = tape.constant(sinusoidal_pe(le, self.cfg.d));
        h = tape.add(h, pe);
        for block in &self.enc_blocks {
            h = block.forward(tape, ps, h, None);
        }
        self.enc_ln.forward(tape, ps, h)
    }

    /// Teacher-forced decoder pass over internal ids. Returns the raw output
    /// of every decoder block (for prosody taps) plus the final logits.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        memory: Var,
        input_ids: &[usize],
    ) -> (Vec<Var>, Var) {
        let n = input_ids.len();
        let table = tape.param(ps, self.tok_emb);
        let emb = tape.embedding(table, input_ids);
        let pe = tape.constant(sinusoidal_pe(n, self.cfg.d));
        let mut h = tape.add(emb, pe);
        let mask = causal_mask(n);
        let mut block_outputs = Vec::with_capacity(self.dec_blocks.len());
        for block in &self.dec_blocks {
            h = block.forward(tape, ps, h, memory, Some(&mask));
            block_outputs.push(h);
        }
        let normed = self.dec_ln.forward(tape, ps, h);
        let logits = self.out.forward(tape, ps, normed);
        (block_outputs, logits)
    }

    /// Maps a mel to its encoder-state matrix (`ceil(L/stride)` rows).
    pub fn encode(&self, ps: &ParamSet, mel: &MelSpectrogram) -> Result<Array2<f64>> {
        self.check_mel(mel)?;
        let mut tape = Tape::new();
        let m = self.encode_on_tape(&mut tape, ps, mel);
        Ok(tape.value(m).clone())
    }

    /// Greedy transcription. Terminates at EOS or `max_text_len` tokens; the
    /// returned sequence contains no marker ids.
    pub fn transcribe(&self, ps: &ParamSet, mel: &MelSpectrogram) -> Result<Vec<u32>> {
        self.check_mel(mel)?;
        let mut tape = Tape::new();
        let memory = self.encode_on_tape(&mut tape, ps, mel);
        let mut ids = vec![self.cfg.bos()];
        let mut tokens = Vec::new();
        for _ in 0..self.cfg.max_text_len {
            let (_, logits) = self.decode_on_tape(&mut tape, ps, memory, &ids);
            let row = tape.value(logits).row(ids.len() - 1).to_owned();
            let next = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("non-empty vocab");
            if next == self.cfg.eos() {
                break;
            }
            // a stray BOS argmax is clamped into the text vocabulary
            let token = (next as u32).min(self.cfg.vocab_size - 1);
            tokens.push(token);
            ids.push(token as usize);
        }
        Ok(tokens)
    }

    /// Layer-`layer` decoder hidden states aligned one-to-one with `tokens`,
    /// teacher-forced on `tokens`. `layer` is 1-based.
    pub fn extract_prosody(
        &self,
        ps: &ParamSet,
        mel: &MelSpectrogram,
        tokens: &[u32],
        layer: usize,
    ) -> Result<Array2<f64>> {
        self.check_mel(mel)?;
        self.check_tokens(tokens)?;
        if layer < 1 || layer > self.cfg.n_dec_layers {
            return Err(Error::config(format!(
                "layer {layer} outside 1..={}",
                self.cfg.n_dec_layers
            )));
        }
        let mut tape = Tape::new();
        let memory = self.encode_on_tape(&mut tape, ps, mel);
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(self.cfg.bos());
        ids.extend(tokens.iter().map(|&t| t as usize));
        let (blocks, _) = self.decode_on_tape(&mut tape, ps, memory, &ids);
        let states = tape.value(blocks[layer - 1]);
        // row i+1 of the decoder input is token i
        Ok(states.slice(s![1..ids.len(), ..]).to_owned())
    }

    /// Extracts the full synchronized (token, prosody) stream at the
    /// configured prosody layer, teacher-forced on `tokens`.
    pub fn prosody_stream(
        &self,
        ps: &ParamSet,
        mel: &MelSpectrogram,
        tokens: &[u32],
    ) -> Result<ProsodyStream> {
        let prosody = self.extract_prosody(ps, mel, tokens, self.cfg.prosody_layer)?;
        ProsodyStream::new(tokens.to_vec(), prosody)
    }

    /// Teacher-forced training pass: decoder input `[BOS, y*...]`, one logit
    /// row per target in `[y*..., EOS]`. `blocks[l]` is the output of decoder
    /// block `l+1`; the prosody rows for token i live at row `i+1`.
    pub fn teacher_forced_on_tape(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        mel: &MelSpectrogram,
        transcript: &[u32],
    ) -> Result<TeacherForced> {
        self.check_mel(mel)?;
        self.check_tokens(transcript)?;
        let memory = self.encode_on_tape(tape, ps, mel);
        let mut ids = Vec::with_capacity(transcript.len() + 1);
        ids.push(self.cfg.bos());
        ids.extend(transcript.iter().map(|&t| t as usize));
        let (blocks, logits) = self.decode_on_tape(tape, ps, memory, &ids);
        let mut targets: Vec<u32> = transcript.to_vec();
        targets.push(self.cfg.eos() as u32);
        Ok(TeacherForced {
            blocks,
            logits,
            targets,
        })
    }

    /// Saves config plus the `asr.`-prefixed tensors of `ps`.
    pub fn save(&self, ps: &ParamSet, path: &std::path::Path) -> Result<()> {
        let cfg_json = serde_json::to_string(&self.cfg).expect("config serializes");
        let tensors: Vec<(String, Array2<f64>)> = ps
            .export_tensors()
            .into_iter()
            .filter(|(n, _)| n.starts_with("asr."))
            .collect();
        crate::io::save_checkpoint(path, &cfg_json, &tensors)
    }

    /// Loads a standalone encoder checkpoint into a fresh parameter set.
    pub fn load(path: &std::path::Path) -> Result<(AsrModel, ParamSet)> {
        let ck = crate::io::load_checkpoint(path)?;
        let cfg: AsrConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
        let mut ps = ParamSet::new();
        let model = AsrModel::new(&mut ps, cfg, 0)?;
        ps.import_tensors(&ck.tensors)?;
        Ok((model, ps))
    }
}

/// Average token-level cross-entropy of `logits` (N×V) against `targets`
/// (length N): `-(1/N) * sum_i log softmax(logits_i)[targets_i]`.
pub fn asr_loss(logits: &Array2<f64>, targets: &[u32]) -> Result<f64> {
    if logits.nrows() != targets.len() {
        return Err(Error::input(format!(
            "{} logit rows but {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::input("empty target sequence"));
    }
    let v = logits.ncols();
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::input(format!("target {t} outside logit width {v}")));
    }
    let mut total = 0.0;
    for (row, &t) in logits.outer_iter().zip(targets) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        total -= row[t as usize] - lse;
    }
    Ok(total / targets.len() as f64)
}

/// On-tape mean cross-entropy over all logit rows; pairs with [`asr_loss`].
pub fn asr_loss_on_tape(tape: &mut Tape, logits: Var, targets: &[u32]) -> Var {
    let t: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
    let lp = tape.log_softmax_rows(logits);
    let nll = tape.nll_rows(lp, &t);
    tape.scale(nll, 1.0 / targets.len() as f64)
}

/// Token-level accuracy of a hypothesis against a reference:
/// `1 - edit_distance / len(reference)`, floored at zero (the complement of
/// token error rate).
pub fn token_accuracy(reference: &[u32], hypothesis: &[u32]) -> f64 {
    if reference.is_empty() {
        return if hypothesis.is_empty() { 1.0 } else { 0.0 };
    }
    let n = reference.len();
    let m = hypothesis.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    (1.0 - prev[m] as f64 / n as f64).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_mel, RenderConfig, UtteranceSpec};
    use ndarray::array;
    use rand::Rng;

    fn tiny_cfg() -> AsrConfig {
        AsrConfig {
            d: 16,
            n_enc_layers: 1,
            n_dec_layers: 2,
            n_heads: 2,
            vocab_size: 8,
            max_text_len: 6,
            prosody_layer: 1,
            n_mels: 16,
            n_frames: 40,
            stride: 2,
        }
    }

    fn tiny_mel(seed: u64) -> MelSpectrogram {
        let spec = UtteranceSpec {
            token_ids: vec![1, 2, 3, 4],
            speaker_id: 0,
            pitch_level: 0,
            energy_level: 0,
            emotion: 0,
            seed,
        };
        render_mel(&spec, &RenderConfig::default()).unwrap()
    }

    #[test]
    fn encode_shape_follows_stride_arithmetic() {
        let mut ps = ParamSet::new();
        let model = AsrModel::new(&mut ps, tiny_cfg(), 1).unwrap();
        let states = model.encode(&ps, &tiny_mel(0)).unwrap();
        assert_eq!(states.nrows(), 40usize.div_ceil(2));
        assert_eq!(states.ncols(), 16);
    }

    #[test]
    fn encode_all_zero_mel_is_finite() {
        let mut ps = ParamSet::new();
        let model = AsrModel::new(&mut ps, tiny_cfg(), 1).unwrap();
        let mel = MelSpectrogram::new(Array2::zeros((16, 40))).unwrap();
        let states = model.encode(&ps, &mel).unwrap();
        assert!(states.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_rejects_shape_mismatch() {
        let mut ps = ParamSet::new();
        let model = AsrModel::new(&mut ps, tiny_cfg(), 1).unwrap();
        let mel = MelSpectrogram::new(Array2::zeros((8, 40))).unwrap();
        assert!(matches!(
            model.encode(&ps, &mel).unwrap_err(),
            Error::Input(_)
        ));
    }

    #[test]
    fn transcribe_terminates_within_max_len() {
        let mut ps = ParamSet::new();
        let model = AsrModel::new(&mut ps, tiny_cfg(), 2).unwrap();
        let tokens = model.transcribe(&ps, &tiny_mel(1)).unwrap();
        assert!(tokens.len() <= 6);
        assert!(tokens.iter().all(|&t| t < 8));
        // pure padding input also terminates
        let padding = MelSpectrogram::new(Array2::zeros((16, 40))).unwrap();
        let tokens = model.transcribe(&ps, &padding).unwrap();
        assert!(tokens.len() <= 6);
    }

    #[test]
    fn extract_prosody_is_token_aligned_and_deterministic() {
        let mut ps = ParamSet::new();
        let model = AsrModel::new(&mut ps, tiny_cfg(), 3).unwrap();
        let mel = tiny_mel(2);
        let tokens = [1u32, 5, 2, 0, 7];
        let a = model.extract_prosody(&ps, &mel, &tokens, 1).unwrap();
        let b = model.extract_prosody(&ps, &mel, &tokens, 1).unwrap();
        assert_eq!(a.nrows(), 5);
        assert_eq!(a.ncols(), 16);
        assert_eq!(a, b);
    }

    #[test]
    fn extract_prosody_rejects_bad_layer() {
        let mut ps = ParamSet::new();
        let model = AsrModel::new(&mut ps, tiny_cfg(), 3).unwrap();
        let err = model
            .extract_prosody(&ps, &tiny_mel(2), &[1, 2], 3)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn prosody_layers_differ_from_each_other() {
        let mut ps = ParamSet::new();
        let model = AsrModel::new(&mut ps, tiny_cfg(), 4).unwrap();
        let mel = tiny_mel(3);
        let l1 = model.extract_prosody(&ps, &mel, &[1, 2, 3], 1).unwrap();
        let l2 = model.extract_prosody(&ps, &mel, &[1, 2, 3], 2).unwrap();
        assert_ne!(l1, l2);
    }

    /// Perturbing weights above the tapped layer must not change the tap.
    #[test]
    fn extract_prosody_is_independent_of_later_layers() {
        let mut ps = ParamSet::new();
        let model = AsrModel::new(&mut ps, tiny_cfg(), 5).unwrap();
        let mel = tiny_mel(4);
        let before = model.extract_prosody(&ps, &mel, &[3, 1, 4], 1).unwrap();
        for id in ps.ids().collect::<Vec<_>>() {
            if ps.name(id).starts_with("asr.dec1.") || ps.name(id).starts_with("asr.dec_ln") {
                ps.value_mut(id).mapv_inplace(|v| v + 0.37);
            }
        }
        let after = model.extract_prosody(&ps, &mel, &[3, 1, 4], 1).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn asr_loss_uniform_logits_is_log_vocab() {
        let logits = Array2::zeros((4, 5));
        let loss = asr_loss(&logits, &[0, 1, 2, 3]).unwrap();
        assert!((loss - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn asr_loss_approaches_zero_for_confident_correct_logits() {
        let mut logits = Array2::zeros((3, 4));
        for (i, &t) in [1usize, 3, 0].iter().enumerate() {
            logits[[i, t]] = 60.0;
        }
        let loss = asr_loss(&logits, &[1, 3, 0]).unwrap();
        assert!(loss < 1e-12, "loss = {loss}");
    }

    /// Hand-computed two-token, vocab-3 case.
    #[test]
    fn asr_loss_matches_hand_softmax() {
        let logits = array![[1.0, 2.0, 0.5], [-0.5, 0.0, 3.0]];
        let targets = [1u32, 2];
        let hand = {
            let nll = |l: [f64; 3], t: usize| {
                let z: f64 = l.iter().map(|x| x.exp()).sum();
                z.ln() - l[t]
            };
            (nll([1.0, 2.0, 0.5], 1) + nll([-0.5, 0.0, 3.0], 2)) / 2.0
        };
        let got = asr_loss(&logits, &targets).unwrap();
        assert!((got - hand).abs() < 1e-6, "got {got}, hand {hand}");
    }

    #[test]
    fn asr_loss_rejects_length_mismatch() {
        let logits = Array2::zeros((2, 3));
        assert!(matches!(
            asr_loss(&logits, &[0, 1, 2]).unwrap_err(),
            Error::Input(_)
        ));
    }

    /// Tape cross-entropy agrees with the closed-form implementation.
    #[test]
    fn tape_and_reference_asr_loss_agree_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.random_range(1..6);
            let v = rng.random_range(2..7);
            let logits = Array2::from_shape_fn((n, v), |_| rng.random_range(-4.0..4.0));
            let targets: Vec<u32> = (0..n).map(|_| rng.random_range(0..v as u32)).collect();
            let reference = asr_loss(&logits, &targets).unwrap();
            let mut tape = Tape::new();
            let l = tape.input(logits);
            let loss = asr_loss_on_tape(&mut tape, l, &targets);
            let got = tape.value(loss)[[0, 0]];
            let rel = (got - reference).abs() / reference.abs().max(1e-12);
            assert!(rel < 1e-12, "rel error {rel}");
        }
    }

    /// Central finite differences on random 3×5 logits (64-bit, step 1e-5).
    #[test]
    fn asr_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = Array2::from_shape_fn((3, 5), |_| rng.random_range(-2.0..2.0));
        let targets = [4u32, 0, 2];

        let params = ParamSet::new();
        let mut tape = Tape::new();
        let l = tape.input(logits.clone());
        let loss = asr_loss_on_tape(&mut tape, l, &targets);
        let mut grads = params.grad_store();
        tape.backward(loss, &mut grads);
        let analytic = tape.grad(l).unwrap().clone();

        let step = 1e-5;
        let mut max_rel = 0.0f64;
        for r in 0..3 {
            for c in 0..5 {
                let mut lp = logits.clone();
                lp[[r, c]] += step;
                let mut lm = logits.clone();
                lm[[r, c]] -= step;
                let fd = (asr_loss(&lp, &targets).unwrap() - asr_loss(&lm, &targets).unwrap())
                    / (2.0 * step);
                let a = analytic[[r, c]];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_behavior() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("asr.ckpt");
        let mut ps = ParamSet::new();
        let model = AsrModel::new(&mut ps, tiny_cfg(), 6).unwrap();
        let mel = tiny_mel(5);
        let before = model.encode(&ps, &mel).unwrap();
        model.save(&ps, &path).unwrap();
        let (loaded, lps) = AsrModel::load(&path).unwrap();
        let after = loaded.encode(&lps, &mel).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn token_accuracy_counts_edits() {
        assert_eq!(token_accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert!((token_accuracy(&[1, 2, 3], &[1, 9, 3]) - 2.0 / 3.0).abs() < 1e-12);
        assert!((token_accuracy(&[1, 2, 3, 4], &[1, 2, 3]) - 0.75).abs() < 1e-12);
        assert_eq!(token_accuracy(&[1, 2], &[3, 4, 5, 6, 7]), 0.0);
    }
}
