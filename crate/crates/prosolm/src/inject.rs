//! Prosody injection: converting a (token, prosody) stream into the
//! backbone's mixed input sequence.
//!
//! Two layouts are supported. Global prepending pools the whole prosody
//! matrix into one utterance-level vector, projects it into the backbone
//! width, and places it at position 0. Interleaving splits the text into
//! `M = min(ceil(T/r), N)` groups, evenly partitions the prosody rows into
//! `M` consecutive groups, and places each group's projected mean
//! immediately before its text group.

use std::ops::Range;

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::util::vec_digest8;

/// Where an injected embedding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Global,
    Group(usize),
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Global => write!(f, "global"),
            Provenance::Group(j) => write!(f, "{j}"),
        }
    }
}

/// One position of a mixed input sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    Token(u32),
    Embed {
        vector: Vec<f64>,
        provenance: Provenance,
    },
}

/// Ordered mixed sequence of token ids and injected continuous embeddings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MixedSequence {
    pub slots: Vec<Slot>,
}

impl MixedSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn embed_positions(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Slot::Embed { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Debug serialization: one line of slot descriptors, `T:<id>` for
    /// tokens and `E:<provenance>:<8-hex digest>` for embeddings.
    pub fn debug_line(&self) -> String {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Token(id) => format!("T:{id}"),
                Slot::Embed { vector, provenance } => {
                    format!("E:{provenance}:{}", vec_digest8(vector))
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Two affine layers with a GELU between, mapping prosody width `d` into the
/// backbone embedding width `d_llm`.
pub struct Projector {
    pub l1: Linear,
    pub l2: Linear,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Projector {
    /// Registers parameters under `<name>.`; hidden width equals `out_dim`.
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Projector {
            l1: Linear::new(ps, &format!("{name}.l1"), in_dim, out_dim, rng),
            l2: Linear::new(ps, &format!("{name}.l2"), out_dim, out_dim, rng),
            in_dim,
            out_dim,
        }
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Var {
        let h = self.l1.forward(tape, ps, x);
        let h = tape.gelu(h);
        self.l2.forward(tape, ps, h)
    }

    /// Eval-mode projection of a single vector.
    pub fn project(&self, ps: &ParamSet, p: &Array1<f64>) -> Result<Array1<f64>> {
        if p.len() != self.in_dim {
            return Err(Error::config(format!(
                "projector expects width {}, got {}",
                self.in_dim,
                p.len()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(p.clone().insert_axis(Axis(0)));
        let y = self.forward_on_tape(&mut tape, ps, x);
        Ok(tape.value(y).row(0).to_owned())
    }
}

/// Arithmetic mean of the rows of an N×d matrix.
pub fn pool_global(p: &Array2<f64>) -> Result<Array1<f64>> {
    if p.nrows() == 0 {
        return Err(Error::input("cannot pool an empty prosody matrix"));
    }
    Ok(p.mean_axis(Axis(0)).expect("nonempty"))
}

/// Evenly partitions `[0, n)` into `m` consecutive half-open ranges using the
/// floor rule: group `j` spans `[floor(j*n/m), floor((j+1)*n/m))`. Sizes
/// differ by at most one.
pub fn partition_prosody(n: usize, m: usize) -> Result<Vec<Range<usize>>> {
    if n < 1 {
        return Err(Error::input("cannot partition an empty range"));
    }
    if m < 1 || m > n {
        return Err(Error::input(format!("group count {m} outside 1..={n}")));
    }
    Ok((0..m).map(|j| (j * n / m)..((j + 1) * n / m)).collect())
}

/// Group structure of an interleaved input: `m` text groups and `m` prosody
/// groups. When `ceil(t/r)` exceeds the prosody length the group count is
/// clamped to `n` and the text is then partitioned evenly (the fixed-ratio
/// chunking would leave text uncovered).
#[derive(Debug, Clone, PartialEq)]
pub struct InterleaveLayout {
    pub m: usize,
    pub text_groups: Vec<Range<usize>>,
    pub prosody_groups: Vec<Range<usize>>,
}

pub fn interleave_layout(t: usize, n: usize, r: usize) -> Result<InterleaveLayout> {
    if t < 1 || n < 1 {
        return Err(Error::input("interleaving needs nonempty text and prosody"));
    }
    if r < 1 {
        return Err(Error::config("interleave ratio must be >= 1"));
    }
    let wanted = t.div_ceil(r);
    let m = wanted.min(n);
    let text_groups = if m == wanted {
        (0..m).map(|j| (j * r)..(((j + 1) * r).min(t))).collect()
    } else {
        partition_prosody(t, m)?
    };
    let prosody_groups = partition_prosody(n, m)?;
    Ok(InterleaveLayout {
        m,
        text_groups,
        prosody_groups,
    })
}

/// `[project(mean(P)); y_1; ...; y_T]` — length `T + 1`.
pub fn build_global_input(
    text_tokens: &[u32],
    prosody: &Array2<f64>,
    projector: &Projector,
    ps: &ParamSet,
) -> Result<MixedSequence> {
    if text_tokens.is_empty() {
        return Err(Error::input("global injection needs at least one text token"));
    }
    let pooled = pool_global(prosody)?;
    let projected = projector.project(ps, &pooled)?;
    let mut slots = Vec::with_capacity(text_tokens.len() + 1);
    slots.push(Slot::Embed {
        vector: projected.to_vec(),
        provenance: Provenance::Global,
    });
    slots.extend(text_tokens.iter().map(|&t| Slot::Token(t)));
    Ok(MixedSequence { slots })
}

/// `[p~_1; y^(1); ...; p~_M; y^(M)]` — length `T + M` with
/// `M = min(ceil(T/r), N)`; embedding `j` is the projected mean of prosody
/// group `j`.
pub fn build_interleaved_input(
    text_tokens: &[u32],
    prosody: &Array2<f64>,
    ratio: usize,
    projector: &Projector,
    ps: &ParamSet,
) -> Result<MixedSequence> {
    if text_tokens.is_empty() {
        return Err(Error::input(
            "interleaved injection needs at least one text token",
        ));
    }
    let layout = interleave_layout(text_tokens.len(), prosody.nrows(), ratio)?;
    let mut slots = Vec::with_capacity(text_tokens.len() + layout.m);
    for j in 0..layout.m {
        let rows = prosody.slice(ndarray::s![layout.prosody_groups[j].clone(), ..]);
        let pooled = rows.mean_axis(Axis(0)).expect("groups are nonempty");
        let projected = projector.project(ps, &pooled)?;
        slots.push(Slot::Embed {
            vector: projected.to_vec(),
            provenance: Provenance::Group(j),
        });
        slots.extend(
            text_tokens[layout.text_groups[j].clone()]
                .iter()
                .map(|&t| Slot::Token(t)),
        );
    }
    Ok(MixedSequence { slots })
}

/// Which injection layout an experiment uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum InjectionMode {
    Global,
    Interleave { ratio: usize },
}

pub fn build_input(
    mode: InjectionMode,
    text_tokens: &[u32],
    prosody: &Array2<f64>,
    projector: &Projector,
    ps: &ParamSet,
) -> Result<MixedSequence> {
    match mode {
        InjectionMode::Global => build_global_input(text_tokens, prosody, projector, ps),
        InjectionMode::Interleave { ratio } => {
            build_interleaved_input(text_tokens, prosody, ratio, projector, ps)
        }
    }
}

/// On-tape injected embeddings (1×d_llm rows) for training, one per group;
/// global mode is the single-group case. Gradients flow into the projector
/// and, through `prosody`, further upstream.
pub fn embeds_on_tape(
    tape: &mut Tape,
    ps: &ParamSet,
    projector: &Projector,
    prosody: Var,
    mode: InjectionMode,
    t_len: usize,
) -> Result<(Vec<Var>, InterleaveLayout)> {
    let n = tape.value(prosody).nrows();
    let layout = match mode {
        InjectionMode::Global => InterleaveLayout {
            m: 1,
            text_groups: vec![0..t_len],
            prosody_groups: vec![0..n],
        },
        InjectionMode::Interleave { ratio } => interleave_layout(t_len, n, ratio)?,
    };
    let mut embeds = Vec::with_capacity(layout.m);
    for group in &layout.prosody_groups {
        let rows = tape.slice_rows(prosody, group.start, group.end - group.start);
        let pooled = tape.mean_rows(rows);
        embeds.push(projector.forward_on_tape(tape, ps, pooled));
    }
    Ok((embeds, layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;

    fn test_projector(in_dim: usize, out_dim: usize, seed: u64) -> (Projector, ParamSet) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Projector::new(&mut ps, "proj", in_dim, out_dim, &mut rng);
        (proj, ps)
    }

    #[test]
    fn pool_global_mean_cases() {
        let p = array![[2.0, -1.0], [2.0, -1.0], [2.0, -1.0]];
        assert_eq!(pool_global(&p).unwrap(), array![2.0, -1.0]);
        let p = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(pool_global(&p).unwrap(), array![0.5, 0.5]);
        let err = pool_global(&Array2::zeros((0, 4))).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn pool_global_matches_column_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Array2::from_shape_fn((7, 5), |_| rng.random_range(-3.0..3.0));
        let pooled = pool_global(&p).unwrap();
        for j in 0..5 {
            let oracle: f64 = (0..7).map(|i| p[[i, j]]).sum::<f64>() / 7.0;
            assert!((pooled[j] - oracle).abs() < 1e-7);
        }
    }

    #[test]
    fn project_zero_weights_gives_zero() {
        let (proj, mut ps) = test_projector(4, 6, 2);
        for id in ps.ids().collect::<Vec<_>>() {
            ps.value_mut(id).fill(0.0);
        }
        let out = proj.project(&ps, &array![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn project_identity_construction_reduces_to_gelu() {
        let (proj, mut ps) = test_projector(3, 3, 3);
        for id in ps.ids().collect::<Vec<_>>() {
            let name = ps.name(id).to_string();
            let v = ps.value_mut(id);
            if name.ends_with(".w") {
                v.fill(0.0);
                for i in 0..3 {
                    v[[i, i]] = 1.0;
                }
            } else {
                v.fill(0.0);
            }
        }
        let x = array![0.5, -1.0, 2.0];
        let out = proj.project(&ps, &x).unwrap();
        for i in 0..3 {
            let g = 0.5 * x[i] * (1.0 + libm::erf(x[i] / std::f64::consts::SQRT_2));
            assert!((out[i] - g).abs() < 1e-12);
        }
    }

    #[test]
    fn project_matches_layer_by_layer_oracle() {
        let (proj, ps) = test_projector(5, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        let got = proj.project(&ps, &x).unwrap();

        let by_name = |name: &str| {
            let id = ps.ids().find(|&i| ps.name(i) == name).unwrap();
            ps.value(id).clone()
        };
        let w1 = by_name("proj.l1.w");
        let b1 = by_name("proj.l1.b");
        let w2 = by_name("proj.l2.w");
        let b2 = by_name("proj.l2.b");
        let h = x.insert_axis(Axis(0)).dot(&w1) + &b1.row(0);
        let h = h.mapv(|v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)));
        let y = h.dot(&w2) + &b2.row(0);
        for j in 0..4 {
            assert!((got[j] - y[[0, j]]).abs() < 1e-6);
        }
    }

    #[test]
    fn project_rejects_width_mismatch() {
        let (proj, ps) = test_projector(4, 6, 6);
        let err = proj.project(&ps, &array![1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition_prosody(10, 2).unwrap(), vec![0..5, 5..10]);
        assert_eq!(partition_prosody(7, 3).unwrap(), vec![0..2, 2..4, 4..7]);
        assert_eq!(
            partition_prosody(5, 5).unwrap(),
            vec![0..1, 1..2, 2..3, 3..4, 4..5]
        );
        assert!(partition_prosody(3, 4).is_err());
        assert!(partition_prosody(3, 0).is_err());
    }

    /// Brute-force check of the floor formula over a modest range; the
    /// acceptance suite runs the full range.
    #[test]
    fn partition_covers_disjointly_with_balanced_sizes() {
        for n in 1..=32usize {
            for m in 1..=n {
                let parts = partition_prosody(n, m).unwrap();
                assert_eq!(parts.len(), m);
                let mut cursor = 0;
                let mut sizes = Vec::new();
                for p in &parts {
                    assert_eq!(p.start, cursor, "gap before {p:?} (n={n}, m={m})");
                    assert!(p.end > p.start, "empty group (n={n}, m={m})");
                    sizes.push(p.end - p.start);
                    cursor = p.end;
                }
                assert_eq!(cursor, n);
                let min = sizes.iter().min().unwrap();
                let max = sizes.iter().max().unwrap();
                assert!(max - min <= 1, "unbalanced sizes {sizes:?}");
            }
        }
    }

    #[test]
    fn global_input_structure() {
        let (proj, ps) = test_projector(3, 4, 7);
        let prosody = Array2::from_shape_fn((6, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let seq = build_global_input(&[1, 2, 3, 4], &prosody, &proj, &ps).unwrap();
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.embed_positions(), vec![0]);
        match &seq.slots[0] {
            Slot::Embed { provenance, vector } => {
                assert_eq!(*provenance, Provenance::Global);
                assert_eq!(vector.len(), 4);
            }
            _ => panic!("slot 0 is not an embedding"),
        }
    }

    #[test]
    fn global_input_depends_only_on_row_mean() {
        let (proj, ps) = test_projector(2, 3, 8);
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        let b = array![[0.5, 0.5], [0.5, 0.5]];
        let sa = build_global_input(&[1, 2], &a, &proj, &ps).unwrap();
        let sb = build_global_input(&[1, 2], &b, &proj, &ps).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn global_input_single_row_equals_direct_projection() {
        let (proj, ps) = test_projector(3, 3, 9);
        let p = array![[0.3, -0.7, 1.1]];
        let seq = build_global_input(&[5], &p, &proj, &ps).unwrap();
        let direct = proj.project(&ps, &array![0.3, -0.7, 1.1]).unwrap();
        match &seq.slots[0] {
            Slot::Embed { vector, .. } => {
                for (a, b) in vector.iter().zip(direct.iter()) {
                    assert_eq!(a, b);
                }
            }
            _ => panic!("missing embedding"),
        }
    }

    #[test]
    fn interleaved_layout_example() {
        let (proj, ps) = test_projector(2, 3, 10);
        let prosody = Array2::from_shape_fn((8, 2), |(i, j)| (i + j) as f64);
        let tokens: Vec<u32> = (1..=10).collect();
        let seq = build_interleaved_input(&tokens, &prosody, 5, &proj, &ps).unwrap();
        assert_eq!(seq.len(), 12);
        assert_eq!(seq.embed_positions(), vec![0, 6]);
    }

    #[test]
    fn single_group_interleaving_degenerates_to_global() {
        let (proj, ps) = test_projector(2, 3, 11);
        let prosody = Array2::from_shape_fn((4, 2), |(i, j)| (i * 2 + j) as f64 * 0.25);
        let tokens = [7u32, 2, 9];
        let inter = build_interleaved_input(&tokens, &prosody, 5, &proj, &ps).unwrap();
        let global = build_global_input(&tokens, &prosody, &proj, &ps).unwrap();
        assert_eq!(inter.len(), global.len());
        for (a, b) in inter.slots.iter().zip(&global.slots) {
            match (a, b) {
                (Slot::Token(x), Slot::Token(y)) => assert_eq!(x, y),
                (Slot::Embed { vector: va, .. }, Slot::Embed { vector: vb, .. }) => {
                    for (x, y) in va.iter().zip(vb) {
                        assert!((x - y).abs() < 1e-7);
                    }
                }
                _ => panic!("slot kinds differ"),
            }
        }
    }

    #[test]
    fn ratio_one_alternates() {
        let (proj, ps) = test_projector(2, 3, 12);
        let prosody = Array2::from_shape_fn((5, 2), |(i, _)| i as f64);
        let tokens = [1u32, 2, 3, 4, 5];
        let seq = build_interleaved_input(&tokens, &prosody, 1, &proj, &ps).unwrap();
        assert_eq!(seq.len(), 10);
        assert_eq!(seq.embed_positions(), vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn interleaving_is_order_sensitive_but_global_is_not() {
        let (proj, ps) = test_projector(2, 3, 13);
        let prosody = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [3.0, -1.0]];
        let mut permuted = prosody.clone();
        permuted.swap((0, 0), (3, 0));
        permuted.swap((0, 1), (3, 1));
        let tokens = [1u32, 2, 3, 4];

        let a = build_interleaved_input(&tokens, &prosody, 2, &proj, &ps).unwrap();
        let b = build_interleaved_input(&tokens, &permuted, 2, &proj, &ps).unwrap();
        assert_ne!(a, b, "group means should change under row permutation");

        let ga = build_global_input(&tokens, &prosody, &proj, &ps).unwrap();
        let gb = build_global_input(&tokens, &permuted, &proj, &ps).unwrap();
        assert_eq!(ga, gb, "global pooling is permutation invariant");
    }

    #[test]
    fn debug_line_format() {
        let seq = MixedSequence {
            slots: vec![
                Slot::Embed {
                    vector: vec![1.0, 2.0],
                    provenance: Provenance::Global,
                },
                Slot::Token(42),
                Slot::Embed {
                    vector: vec![0.5],
                    provenance: Provenance::Group(3),
                },
            ],
        };
        let line = seq.debug_line();
        let parts: Vec<&str> = line.split(' ').collect();
        assert_eq!(parts.len(), 3);
        assert!(parts[0].starts_with("E:global:"));
        assert_eq!(parts[0].len(), "E:global:".len() + 8);
        assert_eq!(parts[1], "T:42");
        assert!(parts[2].starts_with("E:3:"));
    }

    #[test]
    fn clamped_interleave_still_covers_all_text() {
        // T=12, r=2 wants 6 groups but only N=3 prosody rows exist
        let layout = interleave_layout(12, 3, 2).unwrap();
        assert_eq!(layout.m, 3);
        let covered: usize = layout.text_groups.iter().map(|g| g.end - g.start).sum();
        assert_eq!(covered, 12);
        assert_eq!(layout.prosody_groups.len(), 3);
    }
}
