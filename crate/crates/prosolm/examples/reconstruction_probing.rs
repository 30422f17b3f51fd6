//! Trains two speech encoders from one initialization — transcription loss
//! only, and transcription plus mel reconstruction — then probes their
//! prosody embeddings for speaker identity with the cross-validated probing
//! harness. The reconstruction objective is what forces speaker information
//! into the token-aligned decoder states, so the probed accuracy gap between
//! the two variants is the quantity of interest; transcription accuracy
//! should stay essentially unchanged.
//!
//! Run with: cargo run --release -p prosolm --example reconstruction_probing

use ndarray::Array2;
use prosolm::asr::{token_accuracy, AsrConfig};
use prosolm::inject::pool_global;
use prosolm::probe::{run_probe_cv, ProbeConfig};
use prosolm::recon::{train_speech_encoder, ReconConfig, SpeechEncoder, TrainConfig};
use prosolm::synth::{make_dataset, Dataset, RenderConfig, SpecDistribution, Split, SplitFractions};
use rayon::prelude::*;

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> prosolm::Result<()> {
    let n_items = env_usize("N_ITEMS", 2000);
    let steps = env_usize("STEPS", 700);
    let seed = env_usize("SEED", 7) as u64;

    let dist = SpecDistribution {
        vocab_size: 16,
        n_speakers: 8,
        n_pitch: 3,
        n_energy: 3,
        n_emotion: 4,
        min_len: 4,
        max_len: 8,
        weights: Default::default(),
    };
    let render = RenderConfig {
        noise_sigma: 0.02,
        n_frames: 32,
        ..RenderConfig::default()
    };
    println!("generating {n_items} utterances ...");
    let dataset = make_dataset(n_items, &dist, &render, seed, SplitFractions::default())?;

    let asr_cfg = AsrConfig {
        vocab_size: dist.vocab_size,
        n_frames: 32,
        ..AsrConfig::default()
    };
    let recon_cfg = ReconConfig {
        lambda: 1.0,
        n_frames: 32,
        ..ReconConfig::default()
    };
    let train = |ablate: bool| -> prosolm::Result<(SpeechEncoder, f64)> {
        let label = if ablate { "transcription only" } else { "with reconstruction" };
        println!("training {label} variant ({steps} steps) ...");
        let t0 = std::time::Instant::now();
        let cfg = TrainConfig {
            steps,
            batch_size: 8,
            lr: 1e-3,
            warmup_frac: 0.1,
            seed,
            ablate_recon: ablate,
        };
        let (encoder, records) = train_speech_encoder(&dataset, asr_cfg.clone(), recon_cfg.clone(), &cfg)?;
        let last = records.last().expect("nonempty run");
        println!(
            "  done in {:.1}s; final asr loss {:.4}, mel loss {:.4}",
            t0.elapsed().as_secs_f64(),
            last.l_asr,
            last.l_mel
        );
        let test_items = dataset.split_items(Split::Test);
        let acc: f64 = test_items
            .par_iter()
            .map(|item| {
                let hyp = encoder.asr.transcribe(&encoder.params, &item.mel).expect("valid mel");
                token_accuracy(&item.transcript, &hyp)
            })
            .sum::<f64>()
            / test_items.len() as f64;
        println!("  test token accuracy {:.3}", acc);
        Ok((encoder, acc))
    };

    let (plain, acc_plain) = train(true)?;
    let (recon, acc_recon) = train(false)?;

    let speaker_labels: Vec<usize> = dataset.items.iter().map(|i| i.spec.speaker_id as usize).collect();
    let probe_cfg = ProbeConfig::default(); // 2-layer, 10 seeds x 5 folds

    for (name, encoder) in [("transcription only", &plain), ("with reconstruction", &recon)] {
        let t0 = std::time::Instant::now();
        let embeddings = pooled_prosody(encoder, &dataset)?;
        let report = run_probe_cv(&embeddings, &speaker_labels, &probe_cfg, seed ^ 0x5eed)?;
        println!(
            "{name}: speaker probe {:.2}% ± {:.2} ({} runs, {:.1}s)",
            report.mean * 100.0,
            report.std * 100.0,
            report.runs.len(),
            t0.elapsed().as_secs_f64()
        );
    }
    println!(
        "token accuracy delta (recon - plain): {:+.3}",
        acc_recon - acc_plain
    );
    Ok(())
}

/// Utterance-level embedding: mean of the token-aligned prosody rows.
fn pooled_prosody(encoder: &SpeechEncoder, dataset: &Dataset) -> prosolm::Result<Array2<f64>> {
    let rows: prosolm::Result<Vec<Vec<f64>>> = dataset
        .items
        .par_iter()
        .map(|item| {
            let prosody = encoder.asr.extract_prosody(
                &encoder.params,
                &item.mel,
                &item.transcript,
                encoder.asr.cfg.prosody_layer,
            )?;
            Ok(pool_global(&prosody)?.to_vec())
        })
        .collect();
    let rows = rows?;
    let d = rows[0].len();
    let mut out = Array2::zeros((rows.len(), d));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}
