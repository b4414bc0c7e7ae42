//! Denoising schedulers.
//!
//! Four modes share one step loop and differ only in the layout each
//! forward pass sees:
//!
//! - `baseline`: the full planned context, dense.
//! - `elastic`: prompt, dense history, current and terminal blocks, plus
//!   `r` evenly spaced samples from every middle `[MASK]` block.
//! - `elastic_fold`: as `elastic`, with old decoded blocks folded to `f`
//!   representatives.
//! - `block_anchor`: prompt, decoded history and the current block only,
//!   plus one protected anchor at the final planned coordinate.
//!
//! Each step commits `ceil(remaining / remaining_steps)` masked positions of
//! the current block, highest max-probability first, ties to the lowest
//! position. Commits are irrevocable.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::CostReport;
use crate::layout::{
    build_block_augmented_set, build_dense_set, build_fold_set, build_retention_set, compact_ranks, AnchorAttention,
    AnchorContent, BlockPartition, LayoutError, LayoutSelection, PositionMode, RetentionConfig, Role,
};
use crate::model::{forward, ForwardInputs, ModelError, ModelWeights, TokenId, Visibility};
use crate::rope::position_for_entry;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("invalid remap: {0}")]
    InvalidRemap(String),
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("the current block has no masked positions left")]
    NothingToDecode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Baseline,
    Elastic,
    ElasticFold,
    BlockAnchor,
}

impl DecodeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecodeMode::Baseline => "baseline",
            DecodeMode::Elastic => "elastic",
            DecodeMode::ElasticFold => "elastic_fold",
            DecodeMode::BlockAnchor => "block_anchor",
        }
    }

    pub fn is_full_sequence(&self) -> bool {
        !matches!(self, DecodeMode::BlockAnchor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub retention: RetentionConfig,
    pub gen_len: usize,
    pub block_size: usize,
    pub steps_per_block: usize,
    /// Only greedy decoding (0.0) is supported.
    pub temperature: f32,
    /// Honoured in `block_anchor` mode only.
    pub eos_early_stop: bool,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Baseline,
            retention: RetentionConfig::default(),
            gen_len: 512,
            block_size: 32,
            steps_per_block: 32,
            temperature: 0.0,
            eos_early_stop: false,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn partition(&self, prompt_len: usize) -> Result<BlockPartition, DecodeError> {
        Ok(BlockPartition::new(prompt_len, self.gen_len, self.block_size)?)
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        self.retention.validate()?;
        BlockPartition::new(0, self.gen_len, self.block_size)?;
        if self.steps_per_block == 0 || self.steps_per_block > self.block_size {
            return Err(DecodeError::InvalidConfig(format!(
                "steps_per_block must be in 1..={}, got {}",
                self.block_size, self.steps_per_block
            )));
        }
        if self.temperature != 0.0 {
            return Err(DecodeError::InvalidConfig(
                "only temperature 0 (greedy) is supported".into(),
            ));
        }
        Ok(())
    }

    /// Labels naming every ablation setting in effect, for output metadata.
    pub fn ablation_labels(&self) -> Vec<String> {
        let mut labels = Vec::new();
        if self.retention.position_mode == PositionMode::CompactRank && self.mode != DecodeMode::BlockAnchor {
            labels.push("position_mode=compact_rank".to_string());
        }
        if self.mode == DecodeMode::BlockAnchor {
            match self.retention.anchor {
                Some(anchor) => {
                    if anchor.content == AnchorContent::EosToken {
                        labels.push("anchor_content=eos_token".to_string());
                    }
                    if anchor.attention == AnchorAttention::Bidirectional {
                        labels.push("anchor_attention=bidirectional".to_string());
                    }
                }
                None => labels.push("anchor=none".to_string()),
            }
        }
        labels
    }

    /// Layout of the forward pass while block `c` is being denoised.
    pub fn layout_for_block(&self, partition: &BlockPartition, c: usize) -> Result<LayoutSelection, DecodeError> {
        let layout = match self.mode {
            DecodeMode::Baseline => build_dense_set(partition, c)?,
            DecodeMode::Elastic if self.retention.fold_enabled => build_fold_set(partition, c, &self.retention)?,
            DecodeMode::Elastic => build_retention_set(partition, c, &self.retention)?,
            DecodeMode::ElasticFold => build_fold_set(partition, c, &self.retention)?,
            DecodeMode::BlockAnchor => build_block_augmented_set(partition, c, self.retention.anchor.as_ref())?,
        };
        Ok(layout)
    }
}

/// Replaces the coordinates of whole blocks by those of other blocks.
///
/// Maps a target block index to the source block whose coordinates its
/// entries receive; offsets inside the block are kept.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRemap(pub BTreeMap<usize, usize>);

impl BlockRemap {
    pub fn validate(&self, partition: &BlockPartition) -> Result<(), DecodeError> {
        for (&target, &source) in &self.0 {
            for j in [target, source] {
                partition
                    .check_block(j)
                    .map_err(|e| DecodeError::InvalidRemap(e.to_string()))?;
            }
        }
        Ok(())
    }

    fn coordinate(&self, partition: &BlockPartition, position: usize) -> usize {
        match partition
            .block_of(position)
            .and_then(|j| self.0.get(&j).map(|&s| (j, s)))
        {
            Some((target, source)) => position - partition.block_start(target) + partition.block_start(source),
            None => position,
        }
    }
}

/// Tokens, mask flags and block pointer of one decoding session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiseState {
    partition: BlockPartition,
    tokens: Vec<TokenId>,
    masked: Vec<bool>,
    current_block: usize,
    block_step: usize,
    step: usize,
    finished: bool,
    stopped_early: bool,
}

impl DenoiseState {
    pub fn new(prompt: &[TokenId], partition: BlockPartition, mask: TokenId) -> Self {
        assert_eq!(prompt.len(), partition.prompt_len());
        let mut tokens = prompt.to_vec();
        tokens.resize(partition.total_len(), mask);
        let masked = (0..partition.total_len())
            .map(|i| i >= partition.prompt_len())
            .collect();
        Self {
            partition,
            tokens,
            masked,
            current_block: 1,
            block_step: 0,
            step: 0,
            finished: false,
            stopped_early: false,
        }
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn current_block(&self) -> usize {
        self.current_block
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn masked_in_block(&self, c: usize) -> usize {
        self.partition.block_range(c).filter(|&p| self.masked[p]).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub current_block: usize,
    pub active_token_count: usize,
    pub committed_positions: Vec<usize>,
    pub committed_tokens: Vec<TokenId>,
    /// Highest confidence among this step's commits.
    pub max_confidence: f32,
    pub anchor_present: bool,
}

/// Everything a forward pass saw at one step.
#[derive(Debug, Clone, Copy)]
pub struct StepView<'a> {
    pub step: usize,
    pub current_block: usize,
    pub state: &'a DenoiseState,
    pub layout: &'a LayoutSelection,
    pub inputs: ForwardInputs<'a>,
    pub logits: &'a Array2<f32>,
}

pub trait StepObserver {
    fn on_forward(&mut self, view: &StepView<'_>);
}

impl<T: FnMut(&StepView<'_>)> StepObserver for T {
    fn on_forward(&mut self, view: &StepView<'_>) {
        self(view)
    }
}

pub struct NoObserver;

impl StepObserver for NoObserver {
    fn on_forward(&mut self, _view: &StepView<'_>) {}
}

/// Probabilities over the vocabulary with the `[MASK]` id excluded.
pub fn prediction_probs(logits: ndarray::ArrayView1<'_, f32>, mask: TokenId) -> Vec<f32> {
    let m = mask as usize;
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(v, _)| v != m)
        .fold(f32::NEG_INFINITY, |acc, (_, &x)| acc.max(x));
    let mut probs: Vec<f32> = logits
        .iter()
        .enumerate()
        .map(|(v, &x)| if v == m { 0.0 } else { (x - max).exp() })
        .collect();
    let z: f32 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    probs
}

fn argmax(probs: &[f32]) -> (TokenId, f32) {
    let mut best = 0;
    for (v, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = v;
        }
    }
    (best as TokenId, probs[best])
}

struct Plan {
    layout: LayoutSelection,
    tokens: Vec<TokenId>,
    coordinates: Vec<usize>,
    visibility: Visibility,
}

fn plan_step(
    state: &DenoiseState,
    weights: &ModelWeights<f32>,
    config: &DecodeConfig,
    remap: Option<&BlockRemap>,
) -> Result<Plan, DecodeError> {
    let partition = &state.partition;
    let layout = config.layout_for_block(partition, state.current_block)?;
    let special = weights.config.special;
    let anchor = config
        .retention
        .anchor
        .filter(|_| config.mode == DecodeMode::BlockAnchor);
    let anchor_token = match anchor.map(|a| a.content) {
        Some(AnchorContent::EosToken) => special.eos,
        _ => special.mask,
    };
    let tokens = layout
        .entries()
        .iter()
        .map(|e| {
            if e.role == Role::Anchor {
                anchor_token
            } else {
                state.tokens[e.position]
            }
        })
        .collect();
    let ranks = compact_ranks(&layout);
    let coordinates = layout
        .entries()
        .iter()
        .map(|e| {
            let mut entry = *e;
            if let (Some(remap), true) = (remap, e.role != Role::Anchor) {
                entry.position = remap.coordinate(partition, e.position);
            }
            match config.retention.position_mode {
                PositionMode::Preserved => position_for_entry(&entry, PositionMode::Preserved, &ranks),
                PositionMode::CompactRank => position_for_entry(e, PositionMode::CompactRank, &ranks),
            }
        })
        .collect();
    let visibility = Visibility::for_layout(&layout, anchor.map(|a| a.attention));
    Ok(Plan {
        layout,
        tokens,
        coordinates,
        visibility,
    })
}

/// One forward pass plus the commits it licenses.
pub fn denoise_step(
    state: &mut DenoiseState,
    weights: &ModelWeights<f32>,
    config: &DecodeConfig,
    remap: Option<&BlockRemap>,
    observer: &mut dyn StepObserver,
) -> Result<StepRecord, DecodeError> {
    let c = state.current_block;
    let remaining = state.masked_in_block(c);
    if state.finished || remaining == 0 {
        return Err(DecodeError::NothingToDecode);
    }
    let plan = plan_step(state, weights, config, remap)?;
    let inputs = ForwardInputs {
        tokens: &plan.tokens,
        coordinates: &plan.coordinates,
        visibility: &plan.visibility,
    };
    let logits = forward(weights, &inputs)?;
    observer.on_forward(&StepView {
        step: state.step,
        current_block: c,
        state,
        layout: &plan.layout,
        inputs,
        logits: &logits,
    });

    let mask = weights.config.special.mask;
    // The anchor has role Anchor, never Current, so it is never a candidate.
    let mut candidates: Vec<(usize, TokenId, f32)> = plan
        .layout
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.role == Role::Current && state.masked[e.position])
        .map(|(i, e)| {
            let (token, conf) = argmax(&prediction_probs(logits.row(i), mask));
            (e.position, token, conf)
        })
        .collect();
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let steps_left = config.steps_per_block - state.block_step;
    let k = remaining.div_ceil(steps_left);

    let mut record = StepRecord {
        step: state.step,
        current_block: c,
        active_token_count: plan.layout.len(),
        committed_positions: Vec::with_capacity(k),
        committed_tokens: Vec::with_capacity(k),
        max_confidence: candidates.first().map_or(0.0, |x| x.2),
        anchor_present: plan.layout.anchor_index().is_some(),
    };
    for &(position, token, _) in candidates.iter().take(k) {
        state.tokens[position] = token;
        state.masked[position] = false;
        record.committed_positions.push(position);
        record.committed_tokens.push(token);
    }

    state.step += 1;
    state.block_step += 1;
    if state.masked_in_block(c) == 0 {
        let eos = weights.config.special.eos;
        let block_has_eos = state.partition.block_range(c).any(|p| state.tokens[p] == eos);
        state.block_step = 0;
        if config.mode == DecodeMode::BlockAnchor && config.eos_early_stop && block_has_eos {
            state.finished = true;
            state.stopped_early = true;
        } else if c == state.partition.num_blocks() {
            state.finished = true;
        } else {
            state.current_block += 1;
        }
    }
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub mode: DecodeMode,
    pub records: Vec<StepRecord>,
    /// Generated span; truncated after the first `[EOS]` on early stop.
    pub final_tokens: Vec<TokenId>,
    pub stopped_early: bool,
    pub ablation_labels: Vec<String>,
    pub cost: CostReport,
}

impl DecodeTrace {
    /// One JSON object per step, then a summary object carrying `metadata`.
    pub fn to_jsonl(&self, metadata: &serde_json::Value) -> String {
        let mut out = String::new();
        for r in &self.records {
            let mut v = serde_json::to_value(r).expect("serializable record");
            v["type"] = "step".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let summary = serde_json::json!({
            "type": "summary",
            "mode": self.mode,
            "steps": self.records.len(),
            "final_tokens": self.final_tokens,
            "stopped_early": self.stopped_early,
            "ablation_labels": self.ablation_labels,
            "token_ratio": self.cost.token_ratio,
            "pair_ratio": self.cost.pair_ratio,
            "metadata": metadata,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

fn check_prompt(prompt: &[TokenId], weights: &ModelWeights<f32>) -> Result<(), DecodeError> {
    let c = &weights.config;
    if let Some(&t) = prompt.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(DecodeError::InvalidPrompt(format!("token {t} outside vocabulary")));
    }
    if prompt.contains(&c.special.mask) {
        return Err(DecodeError::InvalidPrompt("prompt contains the [MASK] token".into()));
    }
    Ok(())
}

/// Decodes with an observer called after every forward pass.
pub fn decode_observed(
    prompt: &[TokenId],
    weights: &ModelWeights<f32>,
    config: &DecodeConfig,
    remap: Option<&BlockRemap>,
    observer: &mut dyn StepObserver,
) -> Result<DecodeTrace, DecodeError> {
    config.validate()?;
    check_prompt(prompt, weights)?;
    let partition = config.partition(prompt.len())?;
    if let Some(remap) = remap {
        remap.validate(&partition)?;
        if config.retention.position_mode != PositionMode::Preserved && !remap.0.is_empty() {
            return Err(DecodeError::InvalidRemap(
                "remapping requires preserved coordinates".into(),
            ));
        }
    }
    let mut state = DenoiseState::new(prompt, partition, weights.config.special.mask);
    let mut records = Vec::new();
    while !state.is_finished() {
        records.push(denoise_step(&mut state, weights, config, remap, observer)?);
    }
    let mut final_tokens = state.tokens[partition.gen_range()].to_vec();
    if state.stopped_early {
        let eos = weights.config.special.eos;
        if let Some(i) = final_tokens.iter().position(|&t| t == eos) {
            final_tokens.truncate(i + 1);
        }
    }
    let cost = CostReport::from_records(&partition, config.mode, &records, &weights.config);
    Ok(DecodeTrace {
        mode: config.mode,
        records,
        final_tokens,
        stopped_early: state.stopped_early,
        ablation_labels: config.ablation_labels(),
        cost,
    })
}

pub fn decode(
    prompt: &[TokenId],
    weights: &ModelWeights<f32>,
    config: &DecodeConfig,
) -> Result<DecodeTrace, DecodeError> {
    decode_observed(prompt, weights, config, None, &mut NoObserver)
}

/// Decodes with the coordinates of remapped blocks replaced by those of their source blocks.
pub fn decode_with_remap(
    prompt: &[TokenId],
    weights: &ModelWeights<f32>,
    config: &DecodeConfig,
    remap: &BlockRemap,
) -> Result<DecodeTrace, DecodeError> {
    decode_observed(prompt, weights, config, Some(remap), &mut NoObserver)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::AnchorConfig;
    use crate::model::{init_weights, ModelConfig};

    fn weights() -> ModelWeights<f32> {
        init_weights(&ModelConfig {
            d_model: 32,
            num_heads: 2,
            d_ff: 64,
            init_seed: 5,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn small(mode: DecodeMode) -> DecodeConfig {
        DecodeConfig {
            mode,
            gen_len: 32,
            block_size: 8,
            steps_per_block: 8,
            retention: RetentionConfig {
                r: 2,
                recent_blocks: 1,
                fold_width: 2,
                ..RetentionConfig::default()
            },
            ..DecodeConfig::default()
        }
    }

    const PROMPT: [TokenId; 4] = [1, 10, 11, 12];

    #[test]
    fn commits_per_step_follow_ceiling() {
        let w = weights();
        let cfg = small(DecodeMode::Baseline);
        let t = decode(&PROMPT, &w, &cfg).unwrap();
        assert_eq!(t.records.len(), 32);
        assert!(t.records.iter().all(|r| r.committed_positions.len() == 1));

        let quarter = DecodeConfig {
            steps_per_block: 2,
            ..cfg
        };
        let t = decode(&PROMPT, &w, &quarter).unwrap();
        assert_eq!(t.records.len(), 8);
        assert!(t.records.iter().all(|r| r.committed_positions.len() == 4));

        let uneven = DecodeConfig {
            steps_per_block: 3,
            ..quarter
        };
        let t = decode(&PROMPT, &w, &uneven).unwrap();
        let per_block: Vec<usize> = t.records[..3].iter().map(|r| r.committed_positions.len()).collect();
        assert_eq!(per_block, vec![3, 3, 2]);
    }

    #[test]
    fn commits_are_unique_and_cover_the_span() {
        let w = weights();
        for mode in [
            DecodeMode::Baseline,
            DecodeMode::Elastic,
            DecodeMode::ElasticFold,
            DecodeMode::BlockAnchor,
        ] {
            let t = decode(&PROMPT, &w, &small(mode)).unwrap();
            let mut all: Vec<usize> = t.records.iter().flat_map(|r| r.committed_positions.clone()).collect();
            all.sort_unstable();
            assert_eq!(all, (4..36).collect::<Vec<_>>(), "{mode:?}");
            assert!(!t.final_tokens.contains(&w.config.special.mask));
        }
    }

    #[test]
    fn ties_break_to_lowest_position() {
        // With identical weights everywhere every masked slot gets the same confidence.
        let mut w = weights();
        w.embedding.fill(0.0);
        let cfg = small(DecodeMode::Baseline);
        let t = decode(&PROMPT, &w, &cfg).unwrap();
        let order: Vec<usize> = t.records.iter().map(|r| r.committed_positions[0]).collect();
        assert_eq!(order, (4..36).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_elastic_matches_baseline() {
        let w = weights();
        let base = decode(&PROMPT, &w, &small(DecodeMode::Baseline)).unwrap();
        let mut cfg = small(DecodeMode::Elastic);
        cfg.retention.r = cfg.block_size;
        let elastic = decode(&PROMPT, &w, &cfg).unwrap();
        assert_eq!(base.final_tokens, elastic.final_tokens);
        assert_eq!(base.records, elastic.records);
    }

    #[test]
    fn active_counts_per_mode() {
        let w = weights();
        let t = decode(&PROMPT, &w, &small(DecodeMode::Elastic)).unwrap();
        // c=1: prompt 4 + current 8 + 2 middle blocks × 2 + terminal 8.
        assert_eq!(t.records[0].active_token_count, 24);
        assert_eq!(t.records.last().unwrap().active_token_count, 36);

        let t = decode(&PROMPT, &w, &small(DecodeMode::BlockAnchor)).unwrap();
        for r in &t.records {
            let history = 4 + (r.current_block - 1) * 8;
            let expected = history + 8 + usize::from(r.current_block < 4);
            assert_eq!(r.active_token_count, expected);
            assert_eq!(r.anchor_present, r.current_block < 4);
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        let w = weights();
        for mode in [DecodeMode::Elastic, DecodeMode::BlockAnchor] {
            assert_eq!(
                decode(&PROMPT, &w, &small(mode)).unwrap(),
                decode(&PROMPT, &w, &small(mode)).unwrap()
            );
        }
    }

    #[test]
    fn identity_remap_is_a_no_op_and_remap_moves_coordinates() {
        let w = weights();
        let cfg = small(DecodeMode::Baseline);
        let plain = decode(&PROMPT, &w, &cfg).unwrap();
        let identity = BlockRemap((1..=4).map(|j| (j, j)).collect());
        assert_eq!(decode_with_remap(&PROMPT, &w, &cfg, &identity).unwrap(), plain);

        let remap = BlockRemap([(4, 1)].into_iter().collect());
        let mut seen = Vec::new();
        let mut log = |v: &StepView<'_>| {
            if v.step == 0 {
                seen = v
                    .layout
                    .entries()
                    .iter()
                    .zip(v.inputs.coordinates)
                    .filter(|(e, _)| (28..36).contains(&e.position))
                    .map(|(_, &c)| c)
                    .collect();
            }
        };
        decode_observed(&PROMPT, &w, &cfg, Some(&remap), &mut log).unwrap();
        assert_eq!(seen, (4..12).collect::<Vec<_>>());

        let bad = BlockRemap([(5, 1)].into_iter().collect());
        assert!(matches!(
            decode_with_remap(&PROMPT, &w, &cfg, &bad),
            Err(DecodeError::InvalidRemap(_))
        ));
    }

    #[test]
    fn anchor_never_reaches_output() {
        let w = weights();
        let mut cfg = small(DecodeMode::BlockAnchor);
        cfg.retention.anchor = Some(AnchorConfig {
            content: AnchorContent::EosToken,
            attention: AnchorAttention::Bidirectional,
        });
        let mut anchor_positions = Vec::new();
        let mut obs = |v: &StepView<'_>| {
            if let Some(a) = v.layout.anchor_index() {
                anchor_positions.push(v.layout.entries()[a].position);
                assert_eq!(v.inputs.tokens[a], w.config.special.eos);
            }
        };
        let t = decode_observed(&PROMPT, &w, &cfg, None, &mut obs).unwrap();
        assert!(anchor_positions.iter().all(|&p| p == 35));
        assert_eq!(anchor_positions.len(), 24);
        assert_eq!(
            t.ablation_labels,
            vec![
                "anchor_content=eos_token".to_string(),
                "anchor_attention=bidirectional".to_string()
            ]
        );
    }

    #[test]
    fn early_stop_truncates_after_eos() {
        // Bias the output head towards [EOS] so the first block ends the session.
        let mut w = weights();
        let eos = w.config.special.eos as usize;
        w.embedding.row_mut(eos).fill(0.5);
        let mut cfg = small(DecodeMode::BlockAnchor);
        cfg.eos_early_stop = true;
        let t = decode(&PROMPT, &w, &cfg).unwrap();
        assert!(t.stopped_early);
        assert_eq!(t.records.len(), 8);
        assert_eq!(*t.final_tokens.last().unwrap(), eos as TokenId);
        assert_eq!(t.final_tokens.iter().filter(|&&x| x == eos as TokenId).count(), 1);

        // Early stop is ignored in full-sequence modes.
        let mut full = small(DecodeMode::Baseline);
        full.eos_early_stop = true;
        assert_eq!(decode(&PROMPT, &w, &full).unwrap().records.len(), 32);
    }

    #[test]
    fn config_validation() {
        let w = weights();
        let mut cfg = small(DecodeMode::Baseline);
        cfg.steps_per_block = 9;
        assert!(matches!(decode(&PROMPT, &w, &cfg), Err(DecodeError::InvalidConfig(_))));
        cfg.steps_per_block = 8;
        cfg.temperature = 0.7;
        assert!(decode(&PROMPT, &w, &cfg).is_err());
        cfg.temperature = 0.0;
        cfg.gen_len = 30;
        assert!(matches!(
            decode(&PROMPT, &w, &cfg),
            Err(DecodeError::Layout(LayoutError::NonDivisible { .. }))
        ));
        assert!(matches!(
            decode(&[1, 3], &w, &small(DecodeMode::Baseline)),
            Err(DecodeError::InvalidPrompt(_))
        ));
    }
}
