//! prosolm: a CPU-scale sandbox for prosody-aware speech language modeling.
//!
//! The crate trains a miniature ASR encoder-decoder jointly with a
//! mel-spectrogram reconstructor so that its decoder states carry prosody,
//! injects those prosody embeddings into a small text LM backbone (global
//! prepending or ratio-based interleaving), distills from a text teacher
//! under mismatched conditioning, probes what the embeddings encode, and
//! measures the text/speech modality gap — all on synthetic utterances with
//! known ground-truth prosodic attributes, deterministic end to end.
//!
//! Module map:
//!
//! - [`synth`] — synthetic spoken-utterance generator with recoverable
//!   pitch / energy / speaker / emotion factors, dataset serialization
//! - [`asr`] — the toy speech encoder-decoder and prosody extraction
//! - [`recon`] — mel reconstructor and the joint training loop
//! - [`inject`] — prosody pooling, projection, and mixed-sequence layouts
//! - [`backbone`] — decoder-only LM over mixed token/embedding inputs with
//!   the two-stage (projector-only, then joint) training pipeline
//! - [`distill`] — temperature-scaled KL distillation and pair construction
//! - [`probe`] — seeded stratified cross-validation probing harness
//! - [`eval`] — multiple-choice scoring, modality-gap reports, accent
//!   benchmark construction
//! - [`pipeline`] — config-driven experiment runner behind the `prosolm`
//!   binary (`run`, `report`, `validate`, `sweep`)
//!
//! Start with the runnable examples (`cargo run --release -p prosolm
//! --example <name>`); each one demonstrates a single capability end to end.

pub mod autodiff;
pub mod error;
pub mod io;
pub mod nn;
pub mod util;

pub mod asr;
pub mod backbone;
pub mod distill;
pub mod eval;
pub mod inject;
pub mod pipeline;
pub mod probe;
pub mod recon;
pub mod synth;

pub use error::{Error, Result};
