//! Structural checks that hold for any weights.
//!
//! Each check compares the optimized path against an independent
//! computation: brute-force set enumeration for layouts, the loop-based
//! reference in [`crate::oracle`] for the forward pass, direct recomputation
//! for visibility rules.
//!
//! Comparisons against the oracle run the model in `f64` on an exact cast of
//! the `f32` weights.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decode::{decode, DecodeConfig, DecodeMode};
use crate::layout::{
    build_block_augmented_set, build_dense_set, build_fold_set, build_retention_set, compact_ranks, select_f,
    AnchorAttention, AnchorConfig, BlockPartition, LayoutSelection, PositionMode, RetentionConfig, Role,
};
use crate::model::{
    capture_attention, forward, random_weights, ForwardInputs, ModelConfig, ModelWeights, Scalar, TokenId, Visibility,
};
use crate::oracle::{max_abs_diff, reference_dense_logits, reference_logits};
use crate::rope::{position_for_entry, rotate, RopeParams};

/// Dense pass vs. the loop-based reference.
pub const DENSE_TOLERANCE: f64 = 1e-6;
/// Compressed or visibility-restricted pass vs. the reference.
pub const SUBSEQUENCE_TOLERANCE: f64 = 1e-5;
/// Preserved and compact coordinates must differ by more than this on compressed layouts.
pub const ROPE_LIVENESS_THRESHOLD: f64 = 1e-3;
/// ... and agree within this on dense layouts starting at coordinate 0.
pub const ROPE_DENSE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{status}] {}: {}", self.name, self.detail)
    }
}

/// A random layout with its inputs, built the way the decoder builds them.
#[derive(Debug, Clone)]
pub struct RandomLayout {
    pub partition: BlockPartition,
    pub current_block: usize,
    pub layout: LayoutSelection,
    pub tokens: Vec<TokenId>,
}

impl RandomLayout {
    pub fn preserved_coordinates(&self) -> Vec<usize> {
        self.layout.positions().collect()
    }

    pub fn compact_coordinates(&self) -> Vec<usize> {
        let ranks = compact_ranks(&self.layout);
        self.layout
            .entries()
            .iter()
            .map(|e| position_for_entry(e, PositionMode::CompactRank, &ranks))
            .collect()
    }

    pub fn current_rows(&self) -> Vec<usize> {
        self.layout
            .roles()
            .enumerate()
            .filter(|&(_, r)| r == Role::Current)
            .map(|(i, _)| i)
            .collect()
    }
}

fn random_ordinary(weights: &ModelWeights<f32>, rng: &mut impl Rng) -> TokenId {
    let sp = weights.config.special;
    loop {
        let t = rng.random_range(0..weights.config.vocab_size as TokenId);
        if t != sp.mask {
            return t;
        }
    }
}

/// Draws a partition and block whose elastic or folded layout drops at
/// least one position, with random decoded tokens and `[MASK]` elsewhere.
pub fn random_compressed_layout(weights: &ModelWeights<f32>, rng: &mut impl Rng) -> RandomLayout {
    loop {
        let block_size = rng.random_range(2..=8);
        let num_blocks = rng.random_range(3..=8);
        let prompt_len = rng.random_range(1..=8);
        let partition = BlockPartition::new(prompt_len, block_size * num_blocks, block_size).expect("valid partition");
        let c = rng.random_range(1..=num_blocks);
        let cfg = RetentionConfig {
            r: rng.random_range(1..block_size),
            recent_blocks: rng.random_range(0..3),
            fold_width: 2,
            ..RetentionConfig::default()
        };
        let layout = if rng.random_bool(0.5) {
            build_retention_set(&partition, c, &cfg)
        } else {
            build_fold_set(&partition, c, &cfg)
        }
        .expect("valid block");
        if layout.len() == partition.total_len() {
            continue;
        }
        let current_start = partition.block_start(c);
        let tokens = layout
            .positions()
            .map(|p| {
                if p < current_start || (rng.random_bool(0.3) && p < current_start + block_size) {
                    random_ordinary(weights, rng)
                } else {
                    weights.config.special.mask
                }
            })
            .collect();
        return RandomLayout {
            partition,
            current_block: c,
            layout,
            tokens,
        };
    }
}

fn brute_force_retention(p: &BlockPartition, c: usize, r: usize, fold: Option<(usize, usize)>) -> BTreeSet<usize> {
    let mut set: BTreeSet<usize> = (0..p.prompt_len()).collect();
    let start = |j: usize| p.prompt_len() + (j - 1) * p.block_size();
    let bs = p.block_size();
    for j in 1..c {
        let dense = match fold {
            Some((k, _)) => j + k >= c,
            None => true,
        };
        if dense {
            set.extend(start(j)..start(j) + bs);
        } else {
            let f = fold.expect("fold params").1;
            // Endpoints plus evenly spaced interior picks.
            for k in 0..f.min(bs) {
                let off = if f >= bs { k } else { k * (bs - 1) / (f - 1) };
                set.insert(start(j) + off);
            }
        }
    }
    set.extend(start(c)..start(c) + bs);
    let m = p.num_blocks();
    set.extend(start(m)..start(m) + bs);
    for j in c + 1..m {
        for off in 0..bs {
            // `off` is kept iff some k < r lands on it.
            if (0..r.min(bs)).any(|k| if r >= bs { k == off } else { k * bs / r == off }) {
                set.insert(start(j) + off);
            }
        }
    }
    set
}

fn check_one_layout_config(rng: &mut impl Rng) -> Result<(), String> {
    let prompt_len = rng.random_range(0..=40);
    let block_size = rng.random_range(1..=32);
    let num_blocks = rng.random_range(1..=20);
    let p = BlockPartition::new(prompt_len, block_size * num_blocks, block_size).map_err(|e| e.to_string())?;
    let c = rng.random_range(1..=num_blocks);
    let cfg = RetentionConfig {
        r: rng.random_range(1..=40),
        recent_blocks: rng.random_range(0..=8),
        fold_width: rng.random_range(2..=40),
        fold_enabled: true,
        ..RetentionConfig::default()
    };
    let ctx = format!("prompt={prompt_len} block={block_size} M={num_blocks} c={c} {cfg:?}");
    let s = build_retention_set(&p, c, &cfg).map_err(|e| e.to_string())?;
    let folded = build_fold_set(&p, c, &cfg).map_err(|e| e.to_string())?;
    for (name, sel) in [("retention", &s), ("fold", &folded)] {
        sel.check_invariants().map_err(|e| format!("{name}: {e} ({ctx})"))?;
        let required = (0..prompt_len).chain(p.block_range(c)).chain(p.block_range(num_blocks));
        for pos in required {
            if !sel.contains(pos) {
                return Err(format!("{name} misses required position {pos} ({ctx})"));
            }
        }
    }
    let expected = brute_force_retention(&p, c, cfg.r, None);
    if s.positions().collect::<BTreeSet<_>>() != expected || s.len() != expected.len() {
        return Err(format!("retention set differs from brute-force union ({ctx})"));
    }
    let expected_fold = brute_force_retention(&p, c, cfg.r, Some((cfg.recent_blocks, cfg.fold_width)));
    if folded.positions().collect::<BTreeSet<_>>() != expected_fold || folded.len() != expected_fold.len() {
        return Err(format!("fold set differs from brute-force union ({ctx})"));
    }
    if block_size >= 2 {
        let sel = select_f(p.block_start(1), block_size, cfg.fold_width);
        if sel.first() != Some(&p.block_start(1)) || sel.last() != Some(&(p.block_start(1) + block_size - 1)) {
            return Err(format!("select_f misses an endpoint ({ctx})"));
        }
    }
    if cfg.recent_blocks + 1 >= c && folded != s {
        return Err(format!("fold with K >= c-1 differs from retention ({ctx})"));
    }
    let dense_cfg = RetentionConfig {
        r: block_size + rng.random_range(0..4),
        ..cfg.clone()
    };
    let dense = build_retention_set(&p, c, &dense_cfg).map_err(|e| e.to_string())?;
    if !dense.positions().eq(0..p.total_len()) {
        return Err(format!("r >= block_size is not the dense context ({ctx})"));
    }
    let anchored = build_block_augmented_set(&p, c, Some(&AnchorConfig::default())).map_err(|e| e.to_string())?;
    anchored.check_invariants().map_err(|e| format!("block: {e} ({ctx})"))?;
    let collides = p.block_range(c).contains(&p.terminal_coordinate());
    match anchored.anchor_index() {
        Some(a) if !collides => {
            if anchored.entries()[a].position != p.terminal_coordinate()
                || anchored.len() != p.block_start(c) + block_size + 1
            {
                return Err(format!("anchor layout wrong ({ctx})"));
            }
        }
        None if collides => {}
        _ => return Err(format!("anchor presence wrong ({ctx})")),
    }
    if build_retention_set(&p, c, &cfg).map_err(|e| e.to_string())? != s {
        return Err(format!("retention set is not reproducible ({ctx})"));
    }
    Ok(())
}

/// Randomized layout invariants against brute-force enumeration.
pub fn layout_property_battery(configs: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for _ in 0..configs {
        if let Err(e) = check_one_layout_config(&mut rng) {
            failures.push(e);
        }
    }
    let detail = match failures.first() {
        None => format!("{configs} random configurations, 0 failures"),
        Some(first) => format!("{} of {configs} configurations failed; first: {first}", failures.len()),
    };
    CheckResult::new("layout_property_battery", failures.is_empty(), detail)
}

pub fn dense_path_equivalence(weights: &ModelWeights<f32>, trials: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = weights.cast::<f64>();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(1..=24);
        let tokens: Vec<TokenId> = (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    weights.config.special.mask
                } else {
                    random_ordinary(weights, &mut rng)
                }
            })
            .collect();
        let p = BlockPartition::new(0, n, n).expect("valid partition");
        let layout = build_dense_set(&p, 1).expect("valid block");
        let coords: Vec<usize> = layout.positions().collect();
        let vis = Visibility::full(n);
        let logits = forward(
            &model,
            &ForwardInputs {
                tokens: &tokens,
                coordinates: &coords,
                visibility: &vis,
            },
        );
        let reference = reference_dense_logits(weights, &tokens);
        match logits {
            Ok(l) => worst = worst.max(max_abs_diff(&l, &reference, &(0..n).collect::<Vec<_>>())),
            Err(e) => return CheckResult::new("dense_path_equivalence", false, e.to_string()),
        }
    }
    CheckResult::new(
        "dense_path_equivalence",
        worst <= DENSE_TOLERANCE,
        format!("{trials} dense inputs, max |diff| = {worst:.3e} (tolerance {DENSE_TOLERANCE:.0e})"),
    )
}

/// Largest deviation between `model` on compressed layouts and the
/// reference run over exactly the retained tokens at original coordinates.
/// `model` is `weights` itself or a cast of it.
pub fn subsequence_max_diff<F: Scalar>(
    model: &ModelWeights<F>,
    weights: &ModelWeights<f32>,
    layouts: &[RandomLayout],
) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for l in layouts {
        let coords = l.preserved_coordinates();
        let n = l.tokens.len();
        let vis = Visibility::full(n);
        let logits = forward(
            model,
            &ForwardInputs {
                tokens: &l.tokens,
                coordinates: &coords,
                visibility: &vis,
            },
        )
        .map_err(|e| e.to_string())?;
        let keys = vec![(0..n).collect::<Vec<_>>(); n];
        let reference = reference_logits(weights, &l.tokens, &coords, &keys);
        worst = worst.max(max_abs_diff(&logits, &reference, &l.current_rows()));
    }
    Ok(worst)
}

pub fn subsequence_attention_oracle(weights: &ModelWeights<f32>, layouts: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample: Vec<RandomLayout> = (0..layouts)
        .map(|_| random_compressed_layout(weights, &mut rng))
        .collect();
    match subsequence_max_diff(&weights.cast::<f64>(), weights, &sample) {
        Ok(worst) => CheckResult::new(
            "subsequence_attention_oracle",
            worst <= SUBSEQUENCE_TOLERANCE,
            format!(
                "{layouts} compressed layouts, current-block max |diff| = {worst:.3e} (tolerance {SUBSEQUENCE_TOLERANCE:.0e})"
            ),
        ),
        Err(e) => CheckResult::new("subsequence_attention_oracle", false, e),
    }
}

/// Minimum preserved-vs-compact logit gap over compressed layouts, and the
/// maximum gap over dense zero-offset layouts.
pub fn rope_mode_gaps(weights: &ModelWeights<f32>, layouts: usize, seed: u64) -> Result<(f64, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_compressed = f64::INFINITY;
    for _ in 0..layouts {
        let l = random_compressed_layout(weights, &mut rng);
        let n = l.tokens.len();
        let vis = Visibility::full(n);
        let run = |coords: &[usize]| {
            forward(
                weights,
                &ForwardInputs {
                    tokens: &l.tokens,
                    coordinates: coords,
                    visibility: &vis,
                },
            )
            .map_err(|e| e.to_string())
        };
        let a = run(&l.preserved_coordinates())?;
        let b = run(&l.compact_coordinates())?;
        let gap = (&a - &b).iter().fold(0.0f64, |m, x| m.max(x.abs() as f64));
        min_compressed = min_compressed.min(gap);
    }
    let mut max_dense = 0.0f64;
    for _ in 0..layouts {
        let bs = rng.random_range(1..=6);
        let p = BlockPartition::new(0, bs * rng.random_range(1..=4), bs).expect("valid partition");
        let c = rng.random_range(1..=p.num_blocks());
        let layout = build_dense_set(&p, c).expect("valid block");
        let ranks = compact_ranks(&layout);
        let tokens: Vec<TokenId> = (0..layout.len()).map(|_| random_ordinary(weights, &mut rng)).collect();
        let vis = Visibility::full(layout.len());
        let coords = |mode| -> Vec<usize> {
            layout
                .entries()
                .iter()
                .map(|e| position_for_entry(e, mode, &ranks))
                .collect()
        };
        let (pc, cc) = (coords(PositionMode::Preserved), coords(PositionMode::CompactRank));
        let run = |coords: &[usize]| {
            forward(
                weights,
                &ForwardInputs {
                    tokens: &tokens,
                    coordinates: coords,
                    visibility: &vis,
                },
            )
            .map_err(|e| e.to_string())
        };
        let gap = (&run(&pc)? - &run(&cc)?)
            .iter()
            .fold(0.0f64, |m, x| m.max(x.abs() as f64));
        max_dense = max_dense.max(gap);
    }
    Ok((min_compressed, max_dense))
}

pub fn rope_mode_liveness(weights: &ModelWeights<f32>, layouts: usize, seed: u64) -> CheckResult {
    match rope_mode_gaps(weights, layouts, seed) {
        Ok((min_gap, dense_gap)) => CheckResult::new(
            "rope_mode_liveness",
            min_gap > ROPE_LIVENESS_THRESHOLD && dense_gap <= ROPE_DENSE_TOLERANCE,
            format!(
                "{layouts} compressed layouts: min max|diff| = {min_gap:.3e} (> {ROPE_LIVENESS_THRESHOLD:.0e}); dense: max |diff| = {dense_gap:.3e} (<= {ROPE_DENSE_TOLERANCE:.0e})"
            ),
        ),
        Err(e) => CheckResult::new("rope_mode_liveness", false, e),
    }
}

/// Exact main-only-sees check on every layer and head, plus a recomputation
/// of the anchor's output with the anchor alone.
pub fn anchor_visibility(weights: &ModelWeights<f32>, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = BlockPartition::new(5, 32, 8).expect("valid partition");
    let mut problems = Vec::new();
    let mut worst_recompute = 0.0f64;
    for t in 1..=3 {
        let layout = build_block_augmented_set(&p, t, Some(&AnchorConfig::default())).expect("valid block");
        let a = layout.anchor_index().expect("anchor present before the last block");
        let cur = p.block_start(t);
        let tokens: Vec<TokenId> = layout
            .entries()
            .iter()
            .map(|e| {
                if e.role == Role::Anchor || (e.position >= cur && rng.random_bool(0.7)) {
                    weights.config.special.mask
                } else {
                    random_ordinary(weights, &mut rng)
                }
            })
            .collect();
        let coords: Vec<usize> = layout.positions().collect();
        let vis = Visibility::for_layout(&layout, Some(AnchorAttention::MainOnlySees));
        let inputs = ForwardInputs {
            tokens: &tokens,
            coordinates: &coords,
            visibility: &vis,
        };
        for layer in 0..weights.config.num_layers {
            for head in 0..weights.config.num_heads {
                match capture_attention(weights, &inputs, layer, head) {
                    Ok(probs) => {
                        let row = probs.row(a);
                        if row[a] != 1.0 || row.iter().enumerate().any(|(k, &x)| k != a && x != 0.0) {
                            problems.push(format!("block {t} layer {layer} head {head}: anchor row leaks"));
                        }
                        if (0..layout.len()).any(|q| q != a && probs[[q, a]] <= 0.0) {
                            problems.push(format!("block {t} layer {layer} head {head}: anchor key unseen"));
                        }
                    }
                    Err(e) => problems.push(e.to_string()),
                }
            }
        }
        let full = forward(weights, &inputs);
        let alone_vis = Visibility::full(1);
        let alone = forward(
            weights,
            &ForwardInputs {
                tokens: &tokens[a..=a],
                coordinates: &coords[a..=a],
                visibility: &alone_vis,
            },
        );
        match (full, alone) {
            (Ok(f), Ok(s)) => {
                let d = f
                    .row(a)
                    .iter()
                    .zip(s.row(0))
                    .fold(0.0f64, |m, (x, y)| m.max((x - y).abs() as f64));
                worst_recompute = worst_recompute.max(d);
            }
            (Err(e), _) | (_, Err(e)) => problems.push(e.to_string()),
        }
    }
    if worst_recompute > 1e-6 {
        problems.push(format!(
            "anchor output differs from isolated recomputation by {worst_recompute:.3e}"
        ));
    }
    CheckResult::new(
        "anchor_visibility",
        problems.is_empty(),
        match problems.first() {
            None => format!(
                "anchor rows exactly one-hot on every layer/head; isolated recomputation max |diff| = {worst_recompute:.3e}"
            ),
            Some(p) => p.clone(),
        },
    )
}

/// Attention under a random visibility set equals the reference restricted to the visible keys.
pub fn visibility_restriction_equivalence(weights: &ModelWeights<f32>, trials: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = weights.cast::<f64>();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(1..=16);
        let mut vis = Visibility::from_fn(n, |_, _| rng.random_bool(0.5));
        for q in 0..n {
            if !vis.row(q).iter().any(|&b| b) {
                let k = rng.random_range(0..n);
                vis.set(q, k, true);
            }
        }
        let tokens: Vec<TokenId> = (0..n).map(|_| random_ordinary(weights, &mut rng)).collect();
        let coords: Vec<usize> = (0..n).map(|_| rng.random_range(0..200)).collect();
        let keys: Vec<Vec<usize>> = (0..n).map(|q| (0..n).filter(|&k| vis.allows(q, k)).collect()).collect();
        let logits = match forward(
            &model,
            &ForwardInputs {
                tokens: &tokens,
                coordinates: &coords,
                visibility: &vis,
            },
        ) {
            Ok(l) => l,
            Err(e) => return CheckResult::new("visibility_restriction_equivalence", false, e.to_string()),
        };
        let reference = reference_logits(weights, &tokens, &coords, &keys);
        worst = worst.max(max_abs_diff(&logits, &reference, &(0..n).collect::<Vec<_>>()));
    }
    CheckResult::new(
        "visibility_restriction_equivalence",
        worst <= SUBSEQUENCE_TOLERANCE,
        format!("{trials} random visibility sets, max |diff| = {worst:.3e} (tolerance {SUBSEQUENCE_TOLERANCE:.0e})"),
    )
}

/// Permuting entries together with their coordinates and visibility permutes the logits.
pub fn permutation_equivariance(weights: &ModelWeights<f32>, trials: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = weights.cast::<f64>();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let l = random_compressed_layout(weights, &mut rng);
        let n = l.tokens.len();
        let coords = l.preserved_coordinates();
        let vis = Visibility::full(n);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let ptoks: Vec<TokenId> = perm.iter().map(|&i| l.tokens[i]).collect();
        let pcoords: Vec<usize> = perm.iter().map(|&i| coords[i]).collect();
        let pvis = vis.permuted(&perm);
        let (a, b) = match (
            forward(
                &model,
                &ForwardInputs {
                    tokens: &l.tokens,
                    coordinates: &coords,
                    visibility: &vis,
                },
            ),
            forward(
                &model,
                &ForwardInputs {
                    tokens: &ptoks,
                    coordinates: &pcoords,
                    visibility: &pvis,
                },
            ),
        ) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return CheckResult::new("permutation_equivariance", false, e.to_string()),
        };
        for (i, &src) in perm.iter().enumerate() {
            for (x, y) in b.row(i).iter().zip(a.row(src)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    CheckResult::new(
        "permutation_equivariance",
        worst <= SUBSEQUENCE_TOLERANCE,
        format!("{trials} permuted layouts, max |diff| = {worst:.3e} (tolerance {SUBSEQUENCE_TOLERANCE:.0e})"),
    )
}

pub fn rope_relative_position(head_dim: usize, trials: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = match RopeParams::new(head_dim, crate::rope::DEFAULT_THETA_BASE) {
        Ok(p) => p,
        Err(e) => return CheckResult::new("rope_relative_position", false, e.to_string()),
    };
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let q: Vec<f64> = (0..head_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..head_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (m, n, s) = (
            rng.random_range(0..2048),
            rng.random_range(0..2048),
            rng.random_range(0..2048),
        );
        let dot = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
        let base = dot(rotate(&params, m, &q).unwrap(), rotate(&params, n, &k).unwrap());
        let shifted = dot(rotate(&params, m + s, &q).unwrap(), rotate(&params, n + s, &k).unwrap());
        worst = worst.max((base - shifted).abs());
    }
    CheckResult::new(
        "rope_relative_position",
        worst <= 1e-6,
        format!("{trials} random shifts, max |diff| = {worst:.3e} (tolerance 1e-6)"),
    )
}

/// Elastic decoding with `r = block_size` reproduces baseline decoding token for token.
pub fn degenerate_decode_equivalence(weights: &ModelWeights<f32>, seeds: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_cfg = DecodeConfig {
        mode: DecodeMode::Baseline,
        gen_len: 32,
        block_size: 8,
        steps_per_block: 4,
        ..DecodeConfig::default()
    };
    let elastic_cfg = DecodeConfig {
        mode: DecodeMode::Elastic,
        retention: RetentionConfig {
            r: base_cfg.block_size,
            fold_enabled: false,
            ..RetentionConfig::default()
        },
        ..base_cfg.clone()
    };
    for i in 0..seeds {
        let prompt: Vec<TokenId> = (0..rng.random_range(1..=8))
            .map(|_| random_ordinary(weights, &mut rng))
            .collect();
        match (
            decode(&prompt, weights, &base_cfg),
            decode(&prompt, weights, &elastic_cfg),
        ) {
            (Ok(a), Ok(b)) if a.final_tokens == b.final_tokens => {}
            (Ok(_), Ok(_)) => {
                return CheckResult::new(
                    "degenerate_decode_equivalence",
                    false,
                    format!("prompt {i}: outputs differ"),
                )
            }
            (Err(e), _) | (_, Err(e)) => {
                return CheckResult::new("degenerate_decode_equivalence", false, e.to_string())
            }
        }
    }
    CheckResult::new(
        "degenerate_decode_equivalence",
        true,
        format!("{seeds} prompts, elastic with r = block_size token-identical to baseline"),
    )
}

pub fn forward_determinism(weights: &ModelWeights<f32>, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = random_compressed_layout(weights, &mut rng);
    let coords = l.preserved_coordinates();
    let vis = Visibility::full(l.tokens.len());
    let inputs = ForwardInputs {
        tokens: &l.tokens,
        coordinates: &coords,
        visibility: &vis,
    };
    match (forward(weights, &inputs), forward(weights, &inputs)) {
        (Ok(a), Ok(b)) => {
            let same = a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
            CheckResult::new(
                "forward_determinism",
                same,
                format!("two passes over {} entries bit-identical: {same}", l.tokens.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => CheckResult::new("forward_determinism", false, e.to_string()),
    }
}

/// The full suite run by the `verify` command.
/// Random weights with the given architecture at unit activation scale
/// (std `1/sqrt(d_model)`), used where a check needs attention scores far
/// from uniform.
pub fn unit_scale_weights(config: &ModelConfig, seed: u64) -> Result<ModelWeights<f32>, String> {
    let config = ModelConfig {
        init_seed: seed,
        ..config.clone()
    };
    random_weights(&config, 1.0 / (config.d_model as f64).sqrt()).map_err(|e| e.to_string())
}

/// Liveness on an independent unit-scale draw sharing the architecture of
/// `weights`.
pub fn rope_mode_liveness_unit_scale(weights: &ModelWeights<f32>, layouts: usize, seed: u64) -> CheckResult {
    match unit_scale_weights(&weights.config, seed) {
        Ok(probe) => {
            let mut r = rope_mode_liveness(&probe, layouts, seed);
            r.detail = format!("unit-scale random weights, {}", r.detail);
            r
        }
        Err(e) => CheckResult::new("rope_mode_liveness", false, e),
    }
}

/// Every check; `weights` feeds all of them except RoPE liveness, which
/// draws its own unit-scale weights.
pub fn run_all(weights: &ModelWeights<f32>, seed: u64) -> Vec<CheckResult> {
    vec![
        layout_property_battery(1000, seed),
        dense_path_equivalence(weights, 10, seed),
        subsequence_attention_oracle(weights, 50, seed),
        visibility_restriction_equivalence(weights, 30, seed),
        permutation_equivariance(weights, 10, seed),
        rope_relative_position(weights.config.head_dim(), 200, seed),
        rope_mode_liveness_unit_scale(weights, 10, seed),
        anchor_visibility(weights, seed),
        degenerate_decode_equivalence(weights, 3, seed),
        forward_determinism(weights, seed),
    ]
}
