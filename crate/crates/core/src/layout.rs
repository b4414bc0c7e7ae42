//! Retention-set algebra for compressed denoising layouts.
//!
//! Everything here is pure combinatorics over absolute token coordinates:
//! which positions of the planned context enter a forward pass, and in what
//! role. Blocks are 1-indexed (`B_1..B_M`); coordinates are 0-indexed, with
//! the prompt occupying `[0, prompt_len)` and the generation span
//! `[prompt_len, prompt_len + gen_len)`.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("generation length and block size must both be at least 1 (gen_len={gen_len}, block_size={block_size})")]
    ZeroLength { gen_len: usize, block_size: usize },
    #[error("block size {block_size} does not divide generation length {gen_len}")]
    NonDivisible { gen_len: usize, block_size: usize },
    #[error("block {block} is outside 1..={num_blocks}")]
    BlockOutOfRange { block: usize, num_blocks: usize },
    #[error("invalid retention config: {0}")]
    InvalidConfig(String),
}

/// The planned generation span cut into equal blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    prompt_len: usize,
    gen_len: usize,
    block_size: usize,
    num_blocks: usize,
}

impl BlockPartition {
    pub fn new(prompt_len: usize, gen_len: usize, block_size: usize) -> Result<Self, LayoutError> {
        if gen_len == 0 || block_size == 0 {
            return Err(LayoutError::ZeroLength { gen_len, block_size });
        }
        if !gen_len.is_multiple_of(block_size) {
            return Err(LayoutError::NonDivisible { gen_len, block_size });
        }
        Ok(Self {
            prompt_len,
            gen_len,
            block_size,
            num_blocks: gen_len / block_size,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn gen_len(&self) -> usize {
        self.gen_len
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    /// Length of the whole planned context, prompt included.
    pub fn total_len(&self) -> usize {
        self.prompt_len + self.gen_len
    }

    /// The final planned coordinate, where the terminal anchor lives.
    pub fn terminal_coordinate(&self) -> usize {
        self.prompt_len + self.gen_len - 1
    }

    pub fn gen_range(&self) -> Range<usize> {
        self.prompt_len..self.total_len()
    }

    /// Absolute coordinates of block `j` (1-indexed).
    ///
    /// Panics if `j` is not in `1..=num_blocks`; use [`Self::check_block`]
    /// first on untrusted indices.
    pub fn block_range(&self, j: usize) -> Range<usize> {
        assert!(
            (1..=self.num_blocks).contains(&j),
            "block {j} outside 1..={}",
            self.num_blocks
        );
        let start = self.prompt_len + (j - 1) * self.block_size;
        start..start + self.block_size
    }

    pub fn block_start(&self, j: usize) -> usize {
        self.block_range(j).start
    }

    pub fn check_block(&self, j: usize) -> Result<(), LayoutError> {
        if (1..=self.num_blocks).contains(&j) {
            Ok(())
        } else {
            Err(LayoutError::BlockOutOfRange {
                block: j,
                num_blocks: self.num_blocks,
            })
        }
    }

    /// Block index containing an absolute coordinate, if it lies in the generation span.
    pub fn block_of(&self, position: usize) -> Option<usize> {
        if self.gen_range().contains(&position) {
            Some((position - self.prompt_len) / self.block_size + 1)
        } else {
            None
        }
    }
}

pub fn partition_blocks(prompt_len: usize, gen_len: usize, block_size: usize) -> Result<BlockPartition, LayoutError> {
    BlockPartition::new(prompt_len, gen_len, block_size)
}

/// How retained entries are mapped to RoPE coordinates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Every retained entry keeps its original coordinate.
    #[default]
    Preserved,
    /// Entries are re-indexed 0,1,2,... in layout order (ablation only).
    CompactRank,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorContent {
    #[default]
    #[serde(alias = "mask")]
    MaskToken,
    #[serde(alias = "eos")]
    EosToken,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorAttention {
    /// The main sequence sees the anchor; the anchor sees only itself.
    #[default]
    MainOnlySees,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub content: AnchorContent,
    pub attention: AnchorAttention,
}

impl AnchorConfig {
    /// True for any configuration other than the default protected `[MASK]` anchor.
    pub fn is_ablation(&self) -> bool {
        *self != Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionConfig {
    /// Positions kept per middle future `[MASK]` block.
    pub r: usize,
    /// Most recent decoded blocks kept dense when folding.
    pub recent_blocks: usize,
    /// Representatives kept per folded decoded block.
    pub fold_width: usize,
    pub fold_enabled: bool,
    pub position_mode: PositionMode,
    pub anchor: Option<AnchorConfig>,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        Self {
            r: 8,
            recent_blocks: 4,
            fold_width: 8,
            fold_enabled: false,
            position_mode: PositionMode::Preserved,
            anchor: Some(AnchorConfig::default()),
        }
    }
}

impl RetentionConfig {
    pub fn validate(&self) -> Result<(), LayoutError> {
        if self.r < 1 {
            return Err(LayoutError::InvalidConfig("r must be at least 1".into()));
        }
        if self.fold_width < 2 {
            return Err(LayoutError::InvalidConfig(
                "fold_width must be at least 2 (both block endpoints are kept)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prompt,
    DecodedDense,
    DecodedFolded,
    Current,
    MaskSample,
    Terminal,
    Anchor,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Prompt,
        Role::DecodedDense,
        Role::DecodedFolded,
        Role::Current,
        Role::MaskSample,
        Role::Terminal,
        Role::Anchor,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Prompt => "prompt",
            Role::DecodedDense => "decoded_dense",
            Role::DecodedFolded => "decoded_folded",
            Role::Current => "current",
            Role::MaskSample => "mask_sample",
            Role::Terminal => "terminal",
            Role::Anchor => "anchor",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub position: usize,
    pub role: Role,
}

/// Ordered retained positions with their roles.
///
/// Non-anchor entries are strictly increasing in position. An anchor entry,
/// if present, is always last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSelection {
    entries: Vec<LayoutEntry>,
}

impl LayoutSelection {
    fn from_map(map: BTreeMap<usize, Role>, anchor: Option<usize>) -> Self {
        let mut entries: Vec<LayoutEntry> = map
            .into_iter()
            .map(|(position, role)| LayoutEntry { position, role })
            .collect();
        if let Some(position) = anchor {
            entries.push(LayoutEntry {
                position,
                role: Role::Anchor,
            });
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.position)
    }

    pub fn roles(&self) -> impl Iterator<Item = Role> + '_ {
        self.entries.iter().map(|e| e.role)
    }

    pub fn anchor_index(&self) -> Option<usize> {
        self.entries.iter().position(|e| e.role == Role::Anchor)
    }

    pub fn contains(&self, position: usize) -> bool {
        self.entries
            .iter()
            .any(|e| e.position == position && e.role != Role::Anchor)
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.entries.iter().filter(|e| e.role == role).count()
    }

    /// Checks the structural invariants; returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let anchors = self.count_role(Role::Anchor);
        if anchors > 1 {
            return Err(format!("{anchors} anchor entries"));
        }
        if anchors == 1 && self.entries.last().map(|e| e.role) != Some(Role::Anchor) {
            return Err("anchor entry is not last".into());
        }
        let mut prev: Option<usize> = None;
        for e in self.entries.iter().filter(|e| e.role != Role::Anchor) {
            if let Some(p) = prev {
                if e.position <= p {
                    return Err(format!("position {} follows {}", e.position, p));
                }
            }
            prev = Some(e.position);
        }
        Ok(())
    }
}

/// `r` evenly spaced positions from a block: `start + floor(k * len / r)`.
pub fn uniform_sample(block_start: usize, block_len: usize, r: usize) -> Vec<usize> {
    if r >= block_len {
        return (block_start..block_start + block_len).collect();
    }
    (0..r).map(|k| block_start + k * block_len / r).collect()
}

/// `f` representatives of a decoded block, always including both endpoints.
pub fn select_f(block_start: usize, block_len: usize, f: usize) -> Vec<usize> {
    let f = f.max(2);
    if f >= block_len {
        return (block_start..block_start + block_len).collect();
    }
    (0..f).map(|k| block_start + k * (block_len - 1) / (f - 1)).collect()
}

fn insert_range(map: &mut BTreeMap<usize, Role>, range: Range<usize>, role: Role) {
    for p in range {
        map.insert(p, role);
    }
}

/// Current block, sampled middle blocks and the terminal block; shared by
/// the compressed and folded layouts.
fn insert_future(map: &mut BTreeMap<usize, Role>, partition: &BlockPartition, c: usize, r: usize) {
    let m = partition.num_blocks();
    for j in (c + 1)..m {
        let range = partition.block_range(j);
        for p in uniform_sample(range.start, range.len(), r) {
            map.insert(p, Role::MaskSample);
        }
    }
    insert_range(map, partition.block_range(m), Role::Terminal);
    // When c == M the current block is also the terminal block; it is being
    // denoised, so the current role wins.
    insert_range(map, partition.block_range(c), Role::Current);
}

/// Prompt, dense history, current block, terminal block and `Uniform_r` of
/// every middle future block.
pub fn build_retention_set(
    partition: &BlockPartition,
    c: usize,
    config: &RetentionConfig,
) -> Result<LayoutSelection, LayoutError> {
    partition.check_block(c)?;
    let mut map = BTreeMap::new();
    insert_range(&mut map, 0..partition.prompt_len(), Role::Prompt);
    insert_range(
        &mut map,
        partition.prompt_len()..partition.block_start(c),
        Role::DecodedDense,
    );
    insert_future(&mut map, partition, c, config.r);
    Ok(LayoutSelection::from_map(map, None))
}

/// The uncompressed full-sequence layout at block `c`.
pub fn build_dense_set(partition: &BlockPartition, c: usize) -> Result<LayoutSelection, LayoutError> {
    let config = RetentionConfig {
        r: partition.block_size(),
        ..RetentionConfig::default()
    };
    build_retention_set(partition, c, &config)
}

/// Like [`build_retention_set`], but decoded blocks older than the
/// `recent_blocks` most recent ones are reduced to `select_f` representatives.
pub fn build_fold_set(
    partition: &BlockPartition,
    c: usize,
    config: &RetentionConfig,
) -> Result<LayoutSelection, LayoutError> {
    partition.check_block(c)?;
    let mut map = BTreeMap::new();
    insert_range(&mut map, 0..partition.prompt_len(), Role::Prompt);
    // Blocks 1..c-1 are history; the newest `recent_blocks` stay dense.
    let first_dense = c.saturating_sub(config.recent_blocks).max(1);
    for j in 1..first_dense {
        let range = partition.block_range(j);
        for p in select_f(range.start, range.len(), config.fold_width) {
            map.insert(p, Role::DecodedFolded);
        }
    }
    for j in first_dense..c {
        insert_range(&mut map, partition.block_range(j), Role::DecodedDense);
    }
    insert_future(&mut map, partition, c, config.r);
    Ok(LayoutSelection::from_map(map, None))
}

/// Block-decoding layout: prompt and decoded history dense, the current
/// block, and (when `anchor` is given) one protected anchor entry at the
/// final planned coordinate.
///
/// If block `t` itself contains the terminal coordinate the anchor would
/// collide with a real slot, so it is omitted.
pub fn build_block_augmented_set(
    partition: &BlockPartition,
    t: usize,
    anchor: Option<&AnchorConfig>,
) -> Result<LayoutSelection, LayoutError> {
    partition.check_block(t)?;
    let current = partition.block_range(t);
    let mut map = BTreeMap::new();
    insert_range(&mut map, 0..partition.prompt_len(), Role::Prompt);
    insert_range(&mut map, partition.prompt_len()..current.start, Role::DecodedDense);
    let terminal = partition.terminal_coordinate();
    let collides = current.contains(&terminal);
    insert_range(&mut map, current, Role::Current);
    let anchor_position = match anchor {
        Some(_) if !collides => Some(terminal),
        _ => None,
    };
    Ok(LayoutSelection::from_map(map, anchor_position))
}

/// Compact order of every entry: 0, 1, 2, ... in entry order.
pub fn compact_ranks(selection: &LayoutSelection) -> BTreeMap<usize, usize> {
    selection
        .positions()
        .enumerate()
        .map(|(rank, position)| (position, rank))
        .collect()
}
