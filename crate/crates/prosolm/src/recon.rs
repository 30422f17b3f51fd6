//! Mel reconstructor and the joint speech-encoder training loop.
//!
//! The reconstructor maps the synchronized (token, prosody) streams back to
//! the full mel matrix: token embeddings and projected prosody vectors are
//! fused token-wise (linear, layer norm, GELU, dropout), contextualized by a
//! transformer encoder, and decoded by learnable frame queries that
//! cross-attend over the encoded memory, one query per output frame. A
//! two-layer projection head emits each frame's mel column.
//!
//! Joint training optimizes the speech recognizer's cross-entropy plus
//! `lambda` times the reconstruction error, so gradients from the mel loss
//! flow back through the prosody tap into the recognizer's decoder — that
//! pathway is what pushes acoustic detail into the token-aligned states.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asr::{asr_loss_on_tape, AsrConfig, AsrModel};
use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    dropout, normal_init, sinusoidal_pe, CrossAttnBlock, LayerNorm, Linear, LinearSchedule,
    SelfAttnBlock,
};
use crate::synth::{Dataset, Split};
use crate::util::{derive_seed, seed_for};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReconConfig {
    /// Reconstructor hidden width.
    pub d_r: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    /// Dropout inside the fusion block; disabled in eval-mode forwards.
    pub dropout: f64,
    /// Frame-query count; must equal the acoustic frame count.
    pub n_frames: usize,
    /// Output mel bins.
    pub n_mels: usize,
    /// Weight on the reconstruction term of the joint objective.
    pub lambda: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            d_r: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            dropout: 0.0,
            n_frames: 40,
            n_mels: 16,
            lambda: 1.0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_r == 0 || self.d_r % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_r = {} must be a positive multiple of n_heads = {}",
                self.d_r, self.n_heads
            )));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(Error::config("reconstructor layer counts must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.lambda <= 0.0 {
            return Err(Error::config(format!(
                "lambda must be > 0, got {} (use TrainConfig::ablate_recon for the no-reconstruction variant)",
                self.lambda
            )));
        }
        Ok(())
    }
}

pub struct MelReconstructor {
    pub cfg: ReconConfig,
    tok_emb: ParamId,
    prosody_proj: Linear,
    fuse: Linear,
    fuse_ln: LayerNorm,
    enc_blocks: Vec<SelfAttnBlock>,
    enc_ln: LayerNorm,
    frame_queries: ParamId,
    dec_blocks: Vec<CrossAttnBlock>,
    dec_ln: LayerNorm,
    head1: Linear,
    head2: Linear,
}

impl MelReconstructor {
    /// Registers all parameters under the `recon.` prefix. `vocab_size` and
    /// `d_in` come from the recognizer this reconstructor is attached to.
    pub fn new(
        ps: &mut ParamSet,
        cfg: ReconConfig,
        vocab_size: u32,
        d_in: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ff = 4 * cfg.d_r;
        let tok_emb = ps.add(
            "recon.tok_emb",
            normal_init(vocab_size as usize, cfg.d_r, 0.02, &mut rng),
        );
        let prosody_proj = Linear::new(ps, "recon.prosody_proj", d_in, cfg.d_r, &mut rng);
        let fuse = Linear::new(ps, "recon.fuse", 2 * cfg.d_r, cfg.d_r, &mut rng);
        let fuse_ln = LayerNorm::new(ps, "recon.fuse_ln", cfg.d_r);
        let enc_blocks = (0..cfg.n_enc_layers)
            .map(|i| {
                SelfAttnBlock::new(ps, &format!("recon.enc{i}"), cfg.d_r, cfg.n_heads, ff, &mut rng)
            })
            .collect();
        let enc_ln = LayerNorm::new(ps, "recon.enc_ln", cfg.d_r);
        let frame_queries = ps.add(
            "recon.frame_queries",
            normal_init(cfg.n_frames, cfg.d_r, 0.02, &mut rng),
        );
        let dec_blocks = (0..cfg.n_dec_layers)
            .map(|i| {
                CrossAttnBlock::new(ps, &format!("recon.dec{i}"), cfg.d_r, cfg.n_heads, ff, &mut rng)
            })
            .collect();
        let dec_ln = LayerNorm::new(ps, "recon.dec_ln", cfg.d_r);
        let head1 = Linear::new(ps, "recon.head1", cfg.d_r, cfg.d_r, &mut rng);
        let head2 = Linear::new(ps, "recon.head2", cfg.d_r, cfg.n_mels, &mut rng);
        Ok(MelReconstructor {
            cfg,
            tok_emb,
            prosody_proj,
            fuse,
            fuse_ln,
            enc_blocks,
            enc_ln,
            frame_queries,
            dec_blocks,
            dec_ln,
            head1,
            head2,
        })
    }

    fn check_alignment(&self, tokens: &[u32], prosody_rows: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::input("fusion needs at least one token"));
        }
        if tokens.len() != prosody_rows {
            return Err(Error::input(format!(
                "{} tokens but {} prosody rows",
                tokens.len(),
                prosody_rows
            )));
        }
        Ok(())
    }

    /// Token-wise fusion `z_i = phi([Emb(y_i); W_p p_i + b_p])` on the tape.
    /// `rng` enables the fusion dropout (training only).
    pub fn fuse_on_tape(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        tokens: &[u32],
        prosody: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = tape.param(ps, self.tok_emb);
        let emb = tape.embedding(table, &ids);
        let proj = self.prosody_proj.forward(tape, ps, prosody);
        let cat = tape.concat_cols(&[emb, proj]);
        let z = self.fuse.forward(tape, ps, cat);
        let z = self.fuse_ln.forward(tape, ps, z);
        let z = tape.gelu(z);
        match rng {
            Some(rng) if self.cfg.dropout > 0.0 => dropout(tape, z, self.cfg.dropout, rng),
            _ => z,
        }
    }

    /// Full reconstruction pipeline on the tape; output is F×L regardless of
    /// the input length N.
    pub fn reconstruct_on_tape(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        tokens: &[u32],
        prosody: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let n = tokens.len();
        let z = self.fuse_on_tape(tape, ps, tokens, prosody, rng);
        let pe = tape.constant(sinusoidal_pe(n, self.cfg.d_r));
        let mut h = tape.add(z, pe);
        for block in &self.enc_blocks {
            h = block.forward(tape, ps, h, None);
        }
        let memory = self.enc_ln.forward(tape, ps, h);

        let queries = tape.param(ps, self.frame_queries);
        let qpe = tape.constant(sinusoidal_pe(self.cfg.n_frames, self.cfg.d_r));
        let mut q = tape.add(queries, qpe);
        for block in &self.dec_blocks {
            q = block.forward(tape, ps, q, memory, None);
        }
        let q = self.dec_ln.forward(tape, ps, q);
        let h1 = self.head1.forward(tape, ps, q);
        let h1 = tape.gelu(h1);
        let frames = self.head2.forward(tape, ps, h1); // L×F
        tape.transpose(frames)
    }

    /// Eval-mode fusion: returns the N×d_r fused matrix.
    pub fn fuse(
        &self,
        ps: &ParamSet,
        tokens: &[u32],
        prosody: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_alignment(tokens, prosody.nrows())?;
        let mut tape = Tape::new();
        let p = tape.constant(prosody.clone());
        let z = self.fuse_on_tape(&mut tape, ps, tokens, p, None);
        Ok(tape.value(z).clone())
    }

    /// Eval-mode reconstruction: returns the F×L mel estimate.
    pub fn reconstruct(
        &self,
        ps: &ParamSet,
        tokens: &[u32],
        prosody: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_alignment(tokens, prosody.nrows())?;
        let mut tape = Tape::new();
        let p = tape.constant(prosody.clone());
        let m = self.reconstruct_on_tape(&mut tape, ps, tokens, p, None);
        Ok(tape.value(m).clone())
    }
}

/// Mean squared error normalized by the full matrix size:
/// `(1/(F*L)) * ||a - b||^2`. Zero exactly when the matrices are equal.
pub fn mel_loss(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.raw_dim() != b.raw_dim() {
        return Err(Error::input(format!(
            "mel_loss shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len() as f64;
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}

/// On-tape version of [`mel_loss`] against a constant target.
pub fn mel_loss_on_tape(tape: &mut Tape, pred: Var, target: &Array2<f64>) -> Var {
    assert_eq!(
        tape.value(pred).raw_dim(),
        target.raw_dim(),
        "mel_loss shapes"
    );
    let n = target.len() as f64;
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t);
    let sq = tape.mul(diff, diff);
    let sum = tape.sum_all(sq);
    tape.scale(sum, 1.0 / n)
}

/// Joint objective `L = L_asr + lambda * L_mel`.
pub fn total_loss(l_asr: f64, l_mel: f64, lambda: f64) -> f64 {
    l_asr + lambda * l_mel
}

/// One per-step record of the joint training losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_asr: f64,
    pub l_mel: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Warmup steps as a fraction of the run length (the schedule shape is
    /// linear warmup then linear decay; absolute warmup counts are a
    /// full-scale setting).
    pub warmup_frac: f64,
    pub seed: u64,
    /// Train the recognizer alone, skipping the reconstruction term (the
    /// "no reconstruction objective" ablation arm).
    pub ablate_recon: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            batch_size: 8,
            lr: 1e-3,
            warmup_frac: 0.1,
            seed: 0,
            ablate_recon: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be >= 1"));
        }
        if self.lr <= 0.0 || !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::config("lr must be > 0 and warmup_frac in [0, 1]"));
        }
        Ok(())
    }
}

/// A trained speech encoder: recognizer plus reconstructor over one shared
/// parameter set.
pub struct SpeechEncoder {
    pub asr: AsrModel,
    pub recon: MelReconstructor,
    pub params: ParamSet,
}

impl SpeechEncoder {
    /// Builds an untrained encoder with consistent configs.
    pub fn init(asr_cfg: AsrConfig, recon_cfg: ReconConfig, seed: u64) -> Result<SpeechEncoder> {
        if recon_cfg.n_mels != asr_cfg.n_mels || recon_cfg.n_frames != asr_cfg.n_frames {
            return Err(Error::config(format!(
                "acoustic dims disagree: recognizer {}x{}, reconstructor {}x{}",
                asr_cfg.n_mels, asr_cfg.n_frames, recon_cfg.n_mels, recon_cfg.n_frames
            )));
        }
        let mut params = ParamSet::new();
        let asr = AsrModel::new(&mut params, asr_cfg.clone(), seed_for(seed, "asr-init"))?;
        let recon = MelReconstructor::new(
            &mut params,
            recon_cfg,
            asr_cfg.vocab_size,
            asr_cfg.d,
            seed_for(seed, "recon-init"),
        )?;
        Ok(SpeechEncoder { asr, recon, params })
    }

    /// Saves one checkpoint holding both configs and both tensor sections.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        #[derive(Serialize)]
        struct JointConfig<'a> {
            asr: &'a AsrConfig,
            recon: &'a ReconConfig,
        }
        let cfg = serde_json::to_string(&JointConfig {
            asr: &self.asr.cfg,
            recon: &self.recon.cfg,
        })
        .expect("config serializes");
        crate::io::save_checkpoint(path, &cfg, &self.params.export_tensors())
    }

    pub fn load(path: &std::path::Path) -> Result<SpeechEncoder> {
        #[derive(Deserialize)]
        struct JointConfig {
            asr: AsrConfig,
            recon: ReconConfig,
        }
        let ck = crate::io::load_checkpoint(path)?;
        let cfg: JointConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
        let mut encoder = SpeechEncoder::init(cfg.asr, cfg.recon, 0)?;
        encoder.params.import_tensors(&ck.tensors)?;
        Ok(encoder)
    }
}

/// Jointly trains recognizer and reconstructor on the dataset's train split.
///
/// Per-item gradient passes run in parallel; reduction order is fixed by
/// batch slot, so runs are bit-reproducible for a given seed. Aborts with a
/// diagnostic if the loss leaves the finite range.
pub fn train_speech_encoder(
    dataset: &Dataset,
    asr_cfg: AsrConfig,
    recon_cfg: ReconConfig,
    train_cfg: &TrainConfig,
) -> Result<(SpeechEncoder, Vec<LossRecord>)> {
    train_cfg.validate()?;
    let mut encoder = SpeechEncoder::init(asr_cfg, recon_cfg, train_cfg.seed)?;
    let records = train_existing_encoder(&mut encoder, dataset, train_cfg)?;
    Ok((encoder, records))
}

/// Training loop over an already-initialized encoder (used by ablations that
/// share one initialization across arms).
pub fn train_existing_encoder(
    encoder: &mut SpeechEncoder,
    dataset: &Dataset,
    train_cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    train_cfg.validate()?;
    let train_items = dataset.split_items(Split::Train);
    if train_items.is_empty() {
        return Err(Error::input("dataset has no train items"));
    }
    let lambda = encoder.recon.cfg.lambda;
    let use_recon = !train_cfg.ablate_recon;
    let prosody_layer = encoder.asr.cfg.prosody_layer;

    let schedule = LinearSchedule {
        base_lr: train_cfg.lr,
        warmup_steps: (train_cfg.warmup_frac * train_cfg.steps as f64).ceil() as usize,
        total_steps: train_cfg.steps,
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed_for(train_cfg.seed, "batch-order"));
    let dropout_master = seed_for(train_cfg.seed, "fusion-dropout");
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(train_cfg.steps);

    for step in 1..=train_cfg.steps {
        let mut batch = Vec::with_capacity(train_cfg.batch_size);
        for _ in 0..train_cfg.batch_size {
            if order.is_empty() {
                order = (0..train_items.len()).collect();
                shuffle(&mut order, &mut order_rng);
            }
            batch.push(order.pop().expect("refilled above"));
        }

        let params = &encoder.params;
        let asr = &encoder.asr;
        let recon = &encoder.recon;
        let per_item: Vec<(crate::autodiff::GradStore, f64, f64)> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let item = train_items[idx];
                let mut tape = Tape::new();
                let tf = asr
                    .teacher_forced_on_tape(&mut tape, params, &item.mel, &item.transcript)
                    .expect("train items validated at dataset construction");
                let l_asr_var = asr_loss_on_tape(&mut tape, tf.logits, &tf.targets);
                let n = item.transcript.len();
                let (l_mel_val, loss_var) = if use_recon {
                    let prosody = tape.slice_rows(tf.blocks[prosody_layer - 1], 1, n);
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        dropout_master,
                        (step * train_cfg.batch_size + slot) as u64,
                    ));
                    let m_hat = recon.reconstruct_on_tape(
                        &mut tape,
                        params,
                        &item.transcript,
                        prosody,
                        Some(&mut drop_rng),
                    );
                    let l_mel = mel_loss_on_tape(&mut tape, m_hat, item.mel.values());
                    let weighted = tape.scale(l_mel, lambda);
                    let total = tape.add(l_asr_var, weighted);
                    (tape.value(l_mel)[[0, 0]], total)
                } else {
                    (0.0, l_asr_var)
                };
                let scaled = tape.scale(loss_var, 1.0 / train_cfg.batch_size as f64);
                let mut grads = params.grad_store();
                tape.backward(scaled, &mut grads);
                let l_asr_val = tape.value(l_asr_var)[[0, 0]];
                (grads, l_asr_val, l_mel_val)
            })
            .collect();

        let mut grads = encoder.params.grad_store();
        let mut l_asr_sum = 0.0;
        let mut l_mel_sum = 0.0;
        for (g, l_asr, l_mel) in &per_item {
            grads.add_from(g);
            l_asr_sum += l_asr;
            l_mel_sum += l_mel;
        }
        let b = train_cfg.batch_size as f64;
        let l_asr = l_asr_sum / b;
        let l_mel = l_mel_sum / b;
        let total = if use_recon {
            total_loss(l_asr, l_mel, lambda)
        } else {
            l_asr
        };
        if !total.is_finite() {
            return Err(Error::Diverged { step, loss: total });
        }
        let lr = schedule.lr(step);
        encoder.params.adam_step(&grads, step, lr, 0.9, 0.999, 1e-8);
        records.push(LossRecord {
            step,
            l_asr,
            l_mel,
            total,
            lr,
        });
    }
    Ok(records)
}

fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

/// Serializes loss records as line-structured JSON.
pub fn write_loss_records(path: &std::path::Path, records: &[LossRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
