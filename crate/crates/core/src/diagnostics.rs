//! Cost accounting, EOS traces and attention/hidden-state dumps.
//!
//! Attention cost is modelled analytically: a forward pass over `n` active
//! tokens costs `n²` attention pairs, and
//! `2 × pairs × head_dim × num_heads × num_layers` attention FLOPs. The
//! baseline for every ratio is the dense full-sequence context of
//! `prompt_len + gen_len` tokens.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{decode_observed, prediction_probs, DecodeConfig, DecodeError, DecodeMode, StepRecord, StepView};
use crate::layout::{
    build_block_augmented_set, build_fold_set, build_retention_set, BlockPartition, LayoutError, LayoutSelection,
    RetentionConfig, Role,
};
use crate::model::{
    capture_attention, capture_hidden, ForwardInputs, ModelConfig, ModelError, ModelWeights, TokenId, Visibility,
};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("step {step}: layout recomputation gives {expected} active tokens, trace recorded {recorded}")]
    TraceMismatch {
        step: usize,
        expected: usize,
        recorded: usize,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostStep {
    pub step: usize,
    pub current_block: usize,
    pub active_tokens: usize,
    pub baseline_tokens: usize,
    pub attention_pairs: u64,
    pub estimated_attention_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: DecodeMode,
    pub per_step: Vec<CostStep>,
    pub total_tokens_baseline: u64,
    pub total_tokens_mode: u64,
    pub total_pairs_baseline: u64,
    pub total_pairs_mode: u64,
    pub pair_ratio: f64,
    pub token_ratio: f64,
}

pub fn attention_flops(pairs: u64, model: &ModelConfig) -> u64 {
    2 * pairs * (model.head_dim() * model.num_heads * model.num_layers) as u64
}

impl CostReport {
    pub fn from_records(
        partition: &BlockPartition,
        mode: DecodeMode,
        records: &[StepRecord],
        model: &ModelConfig,
    ) -> Self {
        let counts: Vec<(usize, usize, usize)> = records
            .iter()
            .map(|r| (r.step, r.current_block, r.active_token_count))
            .collect();
        Self::from_counts(partition, mode, &counts, model)
    }

    /// Report over `(step, current_block, active_tokens)` triples.
    pub fn from_counts(
        partition: &BlockPartition,
        mode: DecodeMode,
        counts: &[(usize, usize, usize)],
        model: &ModelConfig,
    ) -> Self {
        let baseline = partition.total_len();
        let per_step: Vec<CostStep> = counts
            .iter()
            .map(|&(step, current_block, active)| {
                let pairs = (active as u64).pow(2);
                CostStep {
                    step,
                    current_block,
                    active_tokens: active,
                    baseline_tokens: baseline,
                    attention_pairs: pairs,
                    estimated_attention_flops: attention_flops(pairs, model),
                }
            })
            .collect();
        let total_tokens_mode: u64 = per_step.iter().map(|s| s.active_tokens as u64).sum();
        let total_pairs_mode: u64 = per_step.iter().map(|s| s.attention_pairs).sum();
        let total_tokens_baseline = baseline as u64 * per_step.len() as u64;
        let total_pairs_baseline = (baseline as u64).pow(2) * per_step.len() as u64;
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            mode,
            pair_ratio: ratio(total_pairs_mode, total_pairs_baseline),
            token_ratio: ratio(total_tokens_mode, total_tokens_baseline),
            per_step,
            total_tokens_baseline,
            total_tokens_mode,
            total_pairs_baseline,
            total_pairs_mode,
        }
    }

    /// CSV with columns `step,mode,current_block,active_tokens,baseline_tokens,attention_pairs,estimated_attention_flops`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,mode,current_block,active_tokens,baseline_tokens,attention_pairs,estimated_attention_flops\n",
        );
        for s in &self.per_step {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.step,
                self.mode.as_str(),
                s.current_block,
                s.active_tokens,
                s.baseline_tokens,
                s.attention_pairs,
                s.estimated_attention_flops
            ));
        }
        out
    }
}

fn expected_active(
    partition: &BlockPartition,
    mode: DecodeMode,
    retention: &RetentionConfig,
    c: usize,
) -> Result<usize, LayoutError> {
    Ok(match mode {
        DecodeMode::Baseline => partition.total_len(),
        DecodeMode::Elastic if retention.fold_enabled => build_fold_set(partition, c, retention)?.len(),
        DecodeMode::Elastic => build_retention_set(partition, c, retention)?.len(),
        DecodeMode::ElasticFold => build_fold_set(partition, c, retention)?.len(),
        DecodeMode::BlockAnchor => build_block_augmented_set(partition, c, retention.anchor.as_ref())?.len(),
    })
}

/// Rebuilds the cost report after checking every recorded active count
/// against the layout module.
pub fn cost_report(
    partition: &BlockPartition,
    config: &DecodeConfig,
    model: &ModelConfig,
    records: &[StepRecord],
) -> Result<CostReport, DiagnosticsError> {
    for r in records {
        let expected = expected_active(partition, config.mode, &config.retention, r.current_block)?;
        if expected != r.active_token_count {
            return Err(DiagnosticsError::TraceMismatch {
                step: r.step,
                expected,
                recorded: r.active_token_count,
            });
        }
    }
    Ok(CostReport::from_records(partition, config.mode, records, model))
}

/// Cost of a full decode without early stopping, from layouts alone.
pub fn planned_cost(
    partition: &BlockPartition,
    config: &DecodeConfig,
    model: &ModelConfig,
) -> Result<CostReport, DiagnosticsError> {
    config.validate()?;
    let mut counts = Vec::with_capacity(partition.num_blocks() * config.steps_per_block);
    for c in 1..=partition.num_blocks() {
        let active = expected_active(partition, config.mode, &config.retention, c)?;
        for _ in 0..config.steps_per_block {
            counts.push((counts.len(), c, active));
        }
    }
    Ok(CostReport::from_counts(partition, config.mode, &counts, model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EosTraceRecord {
    pub step: usize,
    pub current_block: usize,
    /// Masked position with the highest `[EOS]` probability at this step.
    pub argmax_eos_position: usize,
    pub eos_probability: f32,
    pub final_eos_position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EosTrace {
    pub records: Vec<EosTraceRecord>,
    pub final_eos_position: Option<usize>,
    pub final_tokens: Vec<TokenId>,
    /// Share of the first 25% of steps whose argmax lies in the terminal block.
    pub early_terminal_fraction: f64,
}

impl EosTrace {
    /// CSV with columns `step,current_block,argmax_eos_position,eos_probability,final_eos_position`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,current_block,argmax_eos_position,eos_probability,final_eos_position\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step,
                r.current_block,
                r.argmax_eos_position,
                r.eos_probability,
                r.final_eos_position.map_or(String::new(), |p| p.to_string())
            ));
        }
        out
    }
}

pub fn eos_trace(
    prompt: &[TokenId],
    weights: &ModelWeights<f32>,
    config: &DecodeConfig,
) -> Result<EosTrace, DiagnosticsError> {
    if !config.mode.is_full_sequence() {
        return Err(DiagnosticsError::InvalidRequest(
            "EOS traces need a full-sequence mode".into(),
        ));
    }
    let special = weights.config.special;
    let mut records = Vec::new();
    let mut observe = |v: &StepView<'_>| {
        let mut best: Option<(usize, f32)> = None;
        for (i, e) in v.layout.entries().iter().enumerate() {
            if e.role == Role::Anchor || !v.state.masked()[e.position] {
                continue;
            }
            let p = prediction_probs(v.logits.row(i), special.mask)[special.eos as usize];
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((e.position, p));
            }
        }
        let (position, p) = best.expect("the current block always has a masked entry");
        records.push(EosTraceRecord {
            step: v.step,
            current_block: v.current_block,
            argmax_eos_position: position,
            eos_probability: p,
            final_eos_position: None,
        });
    };
    let trace = decode_observed(prompt, weights, config, None, &mut observe)?;
    let partition = config.partition(prompt.len())?;
    let final_eos_position = trace
        .final_tokens
        .iter()
        .position(|&t| t == special.eos)
        .map(|i| partition.prompt_len() + i);
    for r in &mut records {
        r.final_eos_position = final_eos_position;
    }
    let early = records.len().div_ceil(4);
    let terminal = partition.block_range(partition.num_blocks());
    let hits = records[..early]
        .iter()
        .filter(|r| terminal.contains(&r.argmax_eos_position))
        .count();
    Ok(EosTrace {
        early_terminal_fraction: if early == 0 { 0.0 } else { hits as f64 / early as f64 },
        records,
        final_eos_position,
        final_tokens: trace.final_tokens,
    })
}

/// Owned copy of the inputs one decode step fed to the model.
#[derive(Debug, Clone)]
pub struct CapturedStep {
    pub step: usize,
    pub current_block: usize,
    pub layout: LayoutSelection,
    pub tokens: Vec<TokenId>,
    pub coordinates: Vec<usize>,
    pub visibility: Visibility,
}

impl CapturedStep {
    pub fn inputs(&self) -> ForwardInputs<'_> {
        ForwardInputs {
            tokens: &self.tokens,
            coordinates: &self.coordinates,
            visibility: &self.visibility,
        }
    }

    pub fn entries(&self, mask: TokenId) -> Vec<EntryInfo> {
        self.layout
            .entries()
            .iter()
            .enumerate()
            .map(|(index, e)| EntryInfo {
                index,
                role: e.role,
                position: e.position,
                coordinate: self.coordinates[index],
                is_mask: self.tokens[index] == mask,
            })
            .collect()
    }
}

/// Runs a decode and keeps the forward inputs of step `at_step`.
pub fn capture_step(
    prompt: &[TokenId],
    weights: &ModelWeights<f32>,
    config: &DecodeConfig,
    at_step: usize,
) -> Result<CapturedStep, DiagnosticsError> {
    let mut captured = None;
    let mut observe = |v: &StepView<'_>| {
        if v.step == at_step {
            captured = Some(CapturedStep {
                step: v.step,
                current_block: v.current_block,
                layout: v.layout.clone(),
                tokens: v.inputs.tokens.to_vec(),
                coordinates: v.inputs.coordinates.to_vec(),
                visibility: v.inputs.visibility.clone(),
            });
        }
    };
    let trace = decode_observed(prompt, weights, config, None, &mut observe)?;
    captured.ok_or_else(|| {
        DiagnosticsError::InvalidRequest(format!(
            "step {at_step} not reached; decode ran {} steps",
            trace.records.len()
        ))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryInfo {
    pub index: usize,
    pub role: Role,
    pub position: usize,
    pub coordinate: usize,
    /// Whether the entry's input token is `[MASK]`.
    pub is_mask: bool,
}

/// Mean attention between `[MASK]` and non-`[MASK]` entries, by query and key group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrantStats {
    pub mask_to_mask: f64,
    pub mask_to_decoded: f64,
    pub decoded_to_mask: f64,
    pub decoded_to_decoded: f64,
}

pub fn quadrant_stats(matrix: ArrayView2<'_, f32>, is_mask: &[bool]) -> QuadrantStats {
    let mean = |q_mask: bool, k_mask: bool| {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for (q, row) in matrix.outer_iter().enumerate() {
            if is_mask[q] != q_mask {
                continue;
            }
            for (k, &p) in row.iter().enumerate() {
                if is_mask[k] == k_mask {
                    sum += p as f64;
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    };
    QuadrantStats {
        mask_to_mask: mean(true, true),
        mask_to_decoded: mean(true, false),
        decoded_to_mask: mean(false, true),
        decoded_to_decoded: mean(false, false),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub layer: usize,
    pub head: usize,
    pub offset_bytes: u64,
    pub quadrants: QuadrantStats,
}

/// JSON sidecar describing an attention dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSidecar {
    pub format: String,
    pub size: usize,
    pub matrices: Vec<MatrixRecord>,
    pub entries: Vec<EntryInfo>,
    pub config: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `n × n` row-major little-endian `f32` matrices for every
/// `(layer, head)` pair to `path`, and the sidecar to `path.json`.
pub fn attention_dump(
    weights: &ModelWeights<f32>,
    inputs: &ForwardInputs<'_>,
    entries: &[EntryInfo],
    layers: &[usize],
    heads: &[usize],
    path: &Path,
    config: &str,
) -> Result<AttentionSidecar, DiagnosticsError> {
    if entries.len() != inputs.len() {
        return Err(DiagnosticsError::InvalidRequest(
            "entry list does not match inputs".into(),
        ));
    }
    let is_mask: Vec<bool> = entries.iter().map(|e| e.is_mask).collect();
    let mut bytes = Vec::new();
    let mut matrices = Vec::new();
    for &layer in layers {
        for &head in heads {
            let p = capture_attention(weights, inputs, layer, head)?;
            matrices.push(MatrixRecord {
                layer,
                head,
                offset_bytes: bytes.len() as u64,
                quadrants: quadrant_stats(p.view(), &is_mask),
            });
            for x in p.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let sidecar = AttentionSidecar {
        format: "f32le-row-major".into(),
        size: inputs.len(),
        matrices,
        entries: entries.to_vec(),
        config: config.to_string(),
    };
    fs::write(path, &bytes)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(sidecar)
}

pub fn load_attention_dump(path: &Path) -> Result<(AttentionSidecar, Vec<Array2<f32>>), DiagnosticsError> {
    let sidecar: AttentionSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    let n = sidecar.size;
    let mut out = Vec::with_capacity(sidecar.matrices.len());
    for m in &sidecar.matrices {
        let start = m.offset_bytes as usize;
        let end = start + 4 * n * n;
        let chunk = bytes
            .get(start..end)
            .ok_or_else(|| DiagnosticsError::InvalidRequest("attention dump truncated".into()))?;
        let values = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push(Array2::from_shape_vec((n, n), values).expect("n × n values"));
    }
    Ok((sidecar, out))
}

fn config_comment(config: &str) -> String {
    config.lines().map(|l| format!("# {l}\n")).collect()
}

/// CSV of residual-stream vectors after `layer`: `entry_index,role,coordinate,h0..h{d-1}`,
/// preceded by the configuration as `#` comment lines.
pub fn hidden_dump(
    weights: &ModelWeights<f32>,
    inputs: &ForwardInputs<'_>,
    entries: &[EntryInfo],
    layer: usize,
    path: &Path,
    config: &str,
) -> Result<(), DiagnosticsError> {
    let hidden = capture_hidden(weights, inputs, layer)?;
    let mut out = config_comment(config);
    out.push_str("entry_index,role,coordinate");
    for j in 0..hidden.ncols() {
        out.push_str(&format!(",h{j}"));
    }
    out.push('\n');
    for (e, row) in entries.iter().zip(hidden.outer_iter()) {
        out.push_str(&format!("{},{},{}", e.index, e.role, e.coordinate));
        for x in row {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::decode;
    use crate::layout::partition_blocks;
    use crate::model::init_weights;

    fn weights() -> ModelWeights<f32> {
        init_weights(&ModelConfig {
            d_model: 32,
            num_heads: 2,
            d_ff: 64,
            init_seed: 8,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn config(mode: DecodeMode) -> DecodeConfig {
        DecodeConfig {
            mode,
            gen_len: 32,
            block_size: 8,
            steps_per_block: 4,
            retention: RetentionConfig {
                r: 2,
                recent_blocks: 1,
                fold_width: 2,
                ..RetentionConfig::default()
            },
            ..DecodeConfig::default()
        }
    }

    const PROMPT: [TokenId; 3] = [1, 20, 21];

    #[test]
    fn baseline_cost_is_dense() {
        let w = weights();
        let t = decode(&PROMPT, &w, &config(DecodeMode::Baseline)).unwrap();
        assert!(t.cost.per_step.iter().all(|s| s.active_tokens == 35));
        assert_eq!(t.cost.pair_ratio, 1.0);
        assert_eq!(t.cost.token_ratio, 1.0);
        let s = &t.cost.per_step[0];
        assert_eq!(s.attention_pairs, 35 * 35);
        assert_eq!(s.estimated_attention_flops, 2 * 35 * 35 * 16 * 2 * 2);
    }

    #[test]
    fn cost_report_cross_checks_every_mode() {
        let w = weights();
        for mode in [
            DecodeMode::Baseline,
            DecodeMode::Elastic,
            DecodeMode::ElasticFold,
            DecodeMode::BlockAnchor,
        ] {
            let cfg = config(mode);
            let t = decode(&PROMPT, &w, &cfg).unwrap();
            let p = cfg.partition(PROMPT.len()).unwrap();
            let report = cost_report(&p, &cfg, &w.config, &t.records).unwrap();
            assert_eq!(report, t.cost);
            if mode != DecodeMode::Baseline {
                assert!(report.pair_ratio > 0.0 && report.pair_ratio < 1.0, "{mode:?}");
            }
        }
    }

    #[test]
    fn cost_report_flags_mismatch() {
        let w = weights();
        let cfg = config(DecodeMode::Elastic);
        let mut t = decode(&PROMPT, &w, &cfg).unwrap();
        t.records[3].active_token_count += 1;
        let p = cfg.partition(PROMPT.len()).unwrap();
        assert!(matches!(
            cost_report(&p, &cfg, &w.config, &t.records),
            Err(DiagnosticsError::TraceMismatch { step: 3, .. })
        ));
    }

    #[test]
    fn eos_trace_shape() {
        let w = weights();
        let cfg = config(DecodeMode::Elastic);
        let trace = eos_trace(&PROMPT, &w, &cfg).unwrap();
        assert_eq!(trace.records.len(), 16);
        for r in &trace.records {
            assert!((3..35).contains(&r.argmax_eos_position));
            assert_eq!(r.final_eos_position, trace.final_eos_position);
        }
        assert!((0.0..=1.0).contains(&trace.early_terminal_fraction));
        assert!(eos_trace(&PROMPT, &w, &config(DecodeMode::BlockAnchor)).is_err());
    }

    #[test]
    fn eos_argmax_is_always_masked() {
        let w = weights();
        let cfg = config(DecodeMode::Baseline);
        let trace = eos_trace(&PROMPT, &w, &cfg).unwrap();
        let t = decode(&PROMPT, &w, &cfg).unwrap();
        for (r, rec) in trace.records.iter().zip(&t.records) {
            // Positions committed at or after this step were still masked when it was recorded.
            let committed_before: Vec<usize> = t.records[..rec.step]
                .iter()
                .flat_map(|x| x.committed_positions.clone())
                .collect();
            assert!(!committed_before.contains(&r.argmax_eos_position));
        }
    }

    #[test]
    fn capture_step_and_quadrants() {
        let w = weights();
        let cfg = config(DecodeMode::Baseline);
        let cap = capture_step(&PROMPT, &w, &cfg, 5).unwrap();
        assert_eq!(cap.current_block, 2);
        let entries = cap.entries(w.config.special.mask);
        assert_eq!(entries.iter().filter(|e| !e.is_mask).count(), 3 + 8 + 2);
        let p = capture_attention(&w, &cap.inputs(), 0, 0).unwrap();
        let is_mask: Vec<bool> = entries.iter().map(|e| e.is_mask).collect();
        let q = quadrant_stats(p.view(), &is_mask);
        // Rows are stochastic, so the group means weighted by group sizes sum to 1/n per query.
        let masks = is_mask.iter().filter(|&&m| m).count() as f64;
        let others = 35.0 - masks;
        assert!((q.mask_to_mask * masks + q.mask_to_decoded * others - 1.0).abs() < 1e-5);
        assert!(capture_step(&PROMPT, &w, &cfg, 99).is_err());
    }

    #[test]
    fn partition_sanity() {
        let p = partition_blocks(64, 512, 32).unwrap();
        let r = RetentionConfig::default();
        assert_eq!(expected_active(&p, DecodeMode::Elastic, &r, 8).unwrap(), 408);
        assert_eq!(expected_active(&p, DecodeMode::Baseline, &r, 8).unwrap(), 576);
    }
}
