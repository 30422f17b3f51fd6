//! Probing harness: small classifiers over frozen embeddings, evaluated with
//! seeded stratified cross-validation.
//!
//! A probe is either dropout→linear (1-layer) or linear→ReLU→dropout→linear
//! (2-layer, hidden 256). Each (seed, fold) run re-initializes the probe,
//! trains with Adam and cross-entropy, early-stops on validation accuracy,
//! and evaluates the best-validation checkpoint on the held-out fold. The
//! report aggregates mean and standard deviation over all runs.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout, Linear};
use crate::util::{derive_seed, seed_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    OneLayer,
    TwoLayer,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    /// Hidden width of the 2-layer probe.
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub n_seeds: usize,
    pub n_folds: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            kind: ProbeKind::TwoLayer,
            hidden: 256,
            dropout: 0.1,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 20,
            patience: 3,
            n_seeds: 10,
            n_folds: 5,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0
            || self.lr <= 0.0
            || self.batch_size == 0
            || self.max_epochs == 0
            || self.patience == 0
            || self.n_seeds == 0
            || self.n_folds < 2
        {
            return Err(Error::config("probe config fields must be positive (n_folds >= 2)"));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::config(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn one_layer() -> Self {
        ProbeConfig {
            kind: ProbeKind::OneLayer,
            ..ProbeConfig::default()
        }
    }
}

/// A probe classifier with its own parameter set.
pub struct ProbeModel {
    pub kind: ProbeKind,
    pub in_dim: usize,
    pub n_classes: usize,
    dropout: f64,
    params: ParamSet,
    l1: Linear,
    l2: Option<Linear>,
}

/// Builds a freshly initialized probe.
pub fn make_probe(
    kind: ProbeKind,
    in_dim: usize,
    n_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeModel> {
    cfg.validate()?;
    if in_dim == 0 || n_classes == 0 {
        return Err(Error::config("probe dimensions must be >= 1"));
    }
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l1, l2) = match kind {
        ProbeKind::OneLayer => (
            Linear::new(&mut params, "probe.l1", in_dim, n_classes, &mut rng),
            None,
        ),
        ProbeKind::TwoLayer => (
            Linear::new(&mut params, "probe.l1", in_dim, cfg.hidden, &mut rng),
            Some(Linear::new(
                &mut params,
                "probe.l2",
                cfg.hidden,
                n_classes,
                &mut rng,
            )),
        ),
    };
    Ok(ProbeModel {
        kind,
        in_dim,
        n_classes,
        dropout: cfg.dropout,
        params,
        l1,
        l2,
    })
}

impl ProbeModel {
    pub fn param_count(&self) -> usize {
        self.params.n_scalars()
    }

    fn logits_on_tape(&self, tape: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>) -> Var {
        match self.kind {
            ProbeKind::OneLayer => {
                let x = match rng {
                    Some(rng) if self.dropout > 0.0 => dropout(tape, x, self.dropout, rng),
                    _ => x,
                };
                self.l1.forward(tape, &self.params, x)
            }
            ProbeKind::TwoLayer => {
                let h = self.l1.forward(tape, &self.params, x);
                let h = tape.relu(h);
                let h = match rng {
                    Some(rng) if self.dropout > 0.0 => dropout(tape, h, self.dropout, rng),
                    _ => h,
                };
                self.l2
                    .as_ref()
                    .expect("two-layer probe has l2")
                    .forward(tape, &self.params, h)
            }
        }
    }

    /// Eval-mode logits (dropout disabled).
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let logits = self.logits_on_tape(&mut tape, xv, None);
        tape.value(logits).clone()
    }

    fn accuracy(&self, x: &Array2<f64>, labels: &[usize]) -> f64 {
        let logits = self.forward(x);
        let mut correct = 0usize;
        for (row, &label) in logits.outer_iter().zip(labels) {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                .map(|(i, _)| i)
                .expect("nonempty");
            if argmax == label {
                correct += 1;
            }
        }
        correct as f64 / labels.len() as f64
    }
}

/// Assigns each item a fold id in `[0, n_folds)`. Per class, indices are
/// shuffled by the seed and dealt round-robin (staggered by class) so every
/// class's counts across folds differ by at most one. Errors name the first
/// class with fewer members than folds.
pub fn stratified_folds(labels: &[usize], n_folds: usize, seed: u64) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::input("no labels to fold"));
    }
    if n_folds < 2 {
        return Err(Error::config("n_folds must be >= 2"));
    }
    let n_classes = labels.iter().max().unwrap() + 1;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &label) in labels.iter().enumerate() {
        per_class[label].push(i);
    }
    for (class, members) in per_class.iter().enumerate() {
        if members.len() < n_folds {
            return Err(Error::input(format!(
                "class {class} has {} members, fewer than {n_folds} folds",
                members.len()
            )));
        }
    }
    let mut assignment = vec![0usize; labels.len()];
    for (class, members) in per_class.iter().enumerate() {
        let mut order = members.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64));
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for (k, &item) in order.iter().enumerate() {
            assignment[item] = (k + class) % n_folds;
        }
    }
    Ok(assignment)
}

/// One cross-validation run's outcome.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeRun {
    pub seed: usize,
    pub fold: usize,
    pub accuracy: f64,
}

/// Aggregated probing results: `n_seeds * n_folds` runs plus mean and
/// population standard deviation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeReport {
    pub config: ProbeConfig,
    pub runs: Vec<ProbeRun>,
    pub mean: f64,
    pub std: f64,
}

impl ProbeReport {
    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        #[derive(Serialize)]
        #[serde(tag = "kind", rename_all = "snake_case")]
        enum Row<'a> {
            Run(&'a ProbeRun),
            Summary {
                mean: f64,
                std: f64,
                runs: usize,
                config: &'a ProbeConfig,
            },
        }
        let mut out = String::new();
        for run in &self.runs {
            out.push_str(&serde_json::to_string(&Row::Run(run)).expect("row serializes"));
            out.push('\n');
        }
        out.push_str(
            &serde_json::to_string(&Row::Summary {
                mean: self.mean,
                std: self.std,
                runs: self.runs.len(),
                config: &self.config,
            })
            .expect("summary serializes"),
        );
        out.push('\n');
        std::fs::write(path, out)?;
        Ok(())
    }
}

struct FoldOutcome {
    accuracy: f64,
    epoch_val_accs: Vec<f64>,
}

fn run_single_fold(
    embeddings: &Array2<f64>,
    labels: &[usize],
    fold_of: &[usize],
    fold: usize,
    n_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<FoldOutcome> {
    let train_idx: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != fold).collect();
    let val_idx: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == fold).collect();
    let gather = |idx: &[usize]| -> (Array2<f64>, Vec<usize>) {
        let mut x = Array2::zeros((idx.len(), embeddings.ncols()));
        let mut y = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            x.row_mut(row).assign(&embeddings.row(i));
            y.push(labels[i]);
        }
        (x, y)
    };
    let (val_x, val_y) = gather(&val_idx);

    let mut probe = make_probe(cfg.kind, embeddings.ncols(), n_classes, cfg, derive_seed(seed, 0))?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));

    let mut best_acc = f64::NEG_INFINITY;
    let mut best_params: Option<ParamSet> = None;
    let mut stall = 0usize;
    let mut epoch_val_accs = Vec::new();
    let mut step = 0usize;

    for _epoch in 1..=cfg.max_epochs {
        let mut order = train_idx.clone();
        for i in (1..order.len()).rev() {
            let j = order_rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let mut x = Array2::zeros((chunk.len(), embeddings.ncols()));
            let mut y = Vec::with_capacity(chunk.len());
            for (row, &i) in chunk.iter().enumerate() {
                x.row_mut(row).assign(&embeddings.row(i));
                y.push(labels[i]);
            }
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let logits = probe.logits_on_tape(&mut tape, xv, Some(&mut drop_rng));
            let lp = tape.log_softmax_rows(logits);
            let nll = tape.nll_rows(lp, &y);
            let loss = tape.scale(nll, 1.0 / chunk.len() as f64);
            let mut grads = probe.params.grad_store();
            tape.backward(loss, &mut grads);
            probe.params.adam_step(&grads, step, cfg.lr, 0.9, 0.999, 1e-8);
        }
        let val_acc = probe.accuracy(&val_x, &val_y);
        epoch_val_accs.push(val_acc);
        if val_acc > best_acc {
            best_acc = val_acc;
            best_params = Some(probe.params.clone());
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        }
    }

    probe.params = best_params.expect("at least one epoch ran");
    let accuracy = probe.accuracy(&val_x, &val_y);
    Ok(FoldOutcome {
        accuracy,
        epoch_val_accs,
    })
}

/// Full cross-validated probing: `n_seeds` seedings of `n_folds` stratified
/// folds, each run independently initialized and early-stopped. Runs execute
/// in parallel; aggregation order is (seed, fold).
pub fn run_probe_cv(
    embeddings: &Array2<f64>,
    labels: &[usize],
    cfg: &ProbeConfig,
    master_seed: u64,
) -> Result<ProbeReport> {
    cfg.validate()?;
    if embeddings.nrows() != labels.len() {
        return Err(Error::input(format!(
            "{} embedding rows but {} labels",
            embeddings.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::input("no items to probe"));
    }
    let n_classes = labels.iter().max().unwrap() + 1;

    // fold assignments per seed, computed up front so errors surface early
    let fold_seed = seed_for(master_seed, "probe-folds");
    let mut assignments = Vec::with_capacity(cfg.n_seeds);
    for s in 0..cfg.n_seeds {
        assignments.push(stratified_folds(labels, cfg.n_folds, derive_seed(fold_seed, s as u64))?);
    }

    let run_seed = seed_for(master_seed, "probe-runs");
    let jobs: Vec<(usize, usize)> = (0..cfg.n_seeds)
        .flat_map(|s| (0..cfg.n_folds).map(move |f| (s, f)))
        .collect();
    let outcomes: Result<Vec<(usize, usize, FoldOutcome)>> = jobs
        .par_iter()
        .map(|&(s, f)| {
            let outcome = run_single_fold(
                embeddings,
                labels,
                &assignments[s],
                f,
                n_classes,
                cfg,
                derive_seed(run_seed, (s * cfg.n_folds + f) as u64),
            )?;
            Ok((s, f, outcome))
        })
        .collect();
    let mut outcomes = outcomes?;
    outcomes.sort_by_key(|&(s, f, _)| (s, f));

    let runs: Vec<ProbeRun> = outcomes
        .iter()
        .map(|(s, f, o)| ProbeRun {
            seed: *s,
            fold: *f,
            accuracy: o.accuracy,
        })
        .collect();
    for (_, _, o) in &outcomes {
        debug_assert!(o.epoch_val_accs.len() <= cfg.max_epochs);
    }
    let mean = runs.iter().map(|r| r.accuracy).sum::<f64>() / runs.len() as f64;
    let var = runs
        .iter()
        .map(|r| (r.accuracy - mean) * (r.accuracy - mean))
        .sum::<f64>()
        / runs.len() as f64;
    Ok(ProbeReport {
        config: cfg.clone(),
        runs,
        mean,
        std: var.sqrt(),
    })
}
