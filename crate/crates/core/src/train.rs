//! Masked-diffusion training on synthetic sequences.
//!
//! Each example draws a masking rate `t ~ U(0, 1)` and masks every
//! non-prompt token independently with probability `t`; the loss is the
//! unweighted mean cross-entropy over masked positions only. Updates are
//! plain SGD.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    backward, forward_cached, ForwardInputs, ModelError, ModelWeights, Scalar, SpecialTokens, TokenId, Visibility,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("value {value} needs token id {token}, outside vocabulary of {vocab_size}")]
    VocabOverflow {
        value: usize,
        token: usize,
        vocab_size: usize,
    },
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusTask {
    /// `[BOS] a a+1 ... b [EOS] [PAD]...`, prompt `[BOS] a`.
    CountSequence,
    /// `[BOS] x1..xk xk..x1 [EOS] [PAD]...`, prompt `[BOS] x1..xk`.
    CopyReverse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub task: CorpusTask,
    pub seq_len: usize,
    /// Largest value emitted; value `v` maps to token id `FIRST_ORDINARY + v`.
    pub max_value: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            task: CorpusTask::CountSequence,
            seq_len: 34,
            max_value: 59,
            size: 2048,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    /// Leading tokens that are never masked.
    pub prompt_len: usize,
}

pub fn value_token(value: usize) -> TokenId {
    SpecialTokens::FIRST_ORDINARY + value as TokenId
}

/// `[BOS] a..=b [EOS]` padded to `seq_len`.
pub fn count_sequence_example(special: &SpecialTokens, a: usize, b: usize, seq_len: usize) -> Example {
    let mut tokens = vec![special.bos];
    tokens.extend((a..=b).map(value_token));
    tokens.push(special.eos);
    tokens.resize(seq_len.max(tokens.len()), special.pad);
    Example { tokens, prompt_len: 2 }
}

pub fn generate_corpus(
    spec: &SyntheticCorpusSpec,
    special: &SpecialTokens,
    vocab_size: usize,
) -> Result<Vec<Example>, TrainError> {
    let top = value_token(spec.max_value) as usize;
    if top >= vocab_size {
        return Err(TrainError::VocabOverflow {
            value: spec.max_value,
            token: top,
            vocab_size,
        });
    }
    let min_len = match spec.task {
        CorpusTask::CountSequence => 3,
        CorpusTask::CopyReverse => 4,
    };
    if spec.seq_len < min_len {
        return Err(TrainError::InvalidCorpus(format!(
            "seq_len {} shorter than the minimum {min_len}",
            spec.seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let ex = match spec.task {
            CorpusTask::CountSequence => {
                let max_run = (spec.seq_len - 2).min(spec.max_value + 1);
                let run = rng.random_range(1..=max_run);
                let a = rng.random_range(0..=spec.max_value + 1 - run);
                count_sequence_example(special, a, a + run - 1, spec.seq_len)
            }
            CorpusTask::CopyReverse => {
                let k = rng.random_range(1..=(spec.seq_len - 2) / 2);
                let xs: Vec<TokenId> = (0..k)
                    .map(|_| value_token(rng.random_range(0..=spec.max_value)))
                    .collect();
                let mut tokens = vec![special.bos];
                tokens.extend(&xs);
                tokens.extend(xs.iter().rev());
                tokens.push(special.eos);
                tokens.resize(spec.seq_len, special.pad);
                Example {
                    tokens,
                    prompt_len: 1 + k,
                }
            }
        };
        out.push(ex);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::InvalidConfig("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be a finite non-negative number".into(),
            ));
        }
        Ok(())
    }
}

/// An example with its noise applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub masked: Vec<bool>,
}

impl MaskedExample {
    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Draws `t ~ U(0, 1)` and masks each non-prompt token with probability `t`,
/// redrawing `t` until at least one token is masked.
pub fn apply_noise(example: &Example, mask_token: TokenId, rng: &mut impl Rng) -> MaskedExample {
    let n = example.tokens.len();
    assert!(example.prompt_len < n, "example has no maskable tokens");
    loop {
        let t: f64 = rng.random();
        let masked: Vec<bool> = (0..n)
            .map(|i| i >= example.prompt_len && rng.random::<f64>() < t)
            .collect();
        if masked.iter().any(|&m| m) {
            let inputs = example
                .tokens
                .iter()
                .zip(&masked)
                .map(|(&tok, &m)| if m { mask_token } else { tok })
                .collect();
            return MaskedExample {
                inputs,
                targets: example.tokens.clone(),
                masked,
            };
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossAndGrad<F> {
    pub loss: F,
    pub grad: ModelWeights<F>,
    /// Number of cross-entropy terms in the mean.
    pub terms: usize,
}

fn log_softmax_row<F: Scalar>(row: ndarray::ArrayView1<'_, F>) -> Vec<F> {
    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let z = row.iter().fold(F::zero(), |acc, &x| acc + (x - max).exp());
    let lz = z.ln() + max;
    row.iter().map(|&x| x - lz).collect()
}

/// Mean masked cross-entropy of a noised batch, without gradients.
pub fn masked_loss<F: Scalar>(weights: &ModelWeights<F>, batch: &[MaskedExample]) -> Result<F, TrainError> {
    Ok(loss_impl(weights, batch, false)?.loss)
}

pub fn masked_loss_and_grad<F: Scalar>(
    weights: &ModelWeights<F>,
    batch: &[MaskedExample],
) -> Result<LossAndGrad<F>, TrainError> {
    loss_impl(weights, batch, true)
}

fn loss_impl<F: Scalar>(
    weights: &ModelWeights<F>,
    batch: &[MaskedExample],
    with_grad: bool,
) -> Result<LossAndGrad<F>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let terms: usize = batch.iter().map(MaskedExample::masked_count).sum();
    if terms == 0 {
        return Err(TrainError::InvalidCorpus("batch has no masked positions".into()));
    }
    let inv_terms = F::one() / F::from(terms).expect("float conversion");
    let mut grad = ModelWeights::<F>::zeros(&weights.config);
    let mut loss = F::zero();
    for ex in batch {
        let n = ex.inputs.len();
        let coords: Vec<usize> = (0..n).collect();
        let vis = Visibility::full(n);
        let inputs = ForwardInputs {
            tokens: &ex.inputs,
            coordinates: &coords,
            visibility: &vis,
        };
        let cache = forward_cached(weights, &inputs)?;
        let mut d_logits = Array2::<F>::zeros(cache.logits.raw_dim());
        for i in (0..n).filter(|&i| ex.masked[i]) {
            let logp = log_softmax_row(cache.logits.row(i));
            let target = ex.targets[i] as usize;
            loss = loss - logp[target] * inv_terms;
            for (v, lp) in logp.iter().enumerate() {
                let onehot = if v == target { F::one() } else { F::zero() };
                d_logits[[i, v]] = (lp.exp() - onehot) * inv_terms;
            }
        }
        if with_grad {
            backward(weights, &cache, &ex.inputs, d_logits.view(), &mut grad);
        }
    }
    Ok(LossAndGrad { loss, grad, terms })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f32,
    pub masked_terms: usize,
}

/// Noises `batch`, computes the masked loss, and applies one SGD update.
pub fn train_step(
    weights: &mut ModelWeights<f32>,
    batch: &[Example],
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StepOutcome, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mask = weights.config.special.mask;
    let noised: Vec<MaskedExample> = batch.iter().map(|ex| apply_noise(ex, mask, rng)).collect();
    let LossAndGrad { loss, grad, terms } = masked_loss_and_grad(weights, &noised)?;
    weights.sgd_update(&grad, config.learning_rate);
    Ok(StepOutcome {
        loss,
        masked_terms: terms,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights<f32>,
    /// Loss of each step, before that step's update.
    pub losses: Vec<f32>,
}

/// Runs `config.steps` SGD steps over shuffled passes of `corpus`.
pub fn train(
    weights: &ModelWeights<f32>,
    corpus: &[Example],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::InvalidCorpus("empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights = weights.clone();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(corpus[order[cursor]].clone());
            cursor += 1;
        }
        losses.push(train_step(&mut weights, &batch, config, &mut rng)?.loss);
    }
    Ok(TrainOutcome { weights, losses })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Compares analytic gradients with central finite differences in `f64` on
/// `count` randomly chosen parameters of a fixed noised batch.
pub fn gradient_check(
    weights: &ModelWeights<f32>,
    batch: &[Example],
    count: usize,
    seed: u64,
) -> Result<Vec<GradCheckEntry>, TrainError> {
    const STEP: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w64 = weights.cast::<f64>();
    let mask = weights.config.special.mask;
    let noised: Vec<MaskedExample> = batch.iter().map(|ex| apply_noise(ex, mask, &mut rng)).collect();
    let analytic = masked_loss_and_grad(&w64, &noised)?.grad;
    let total = w64.parameter_count();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let index = rng.random_range(0..total);
        let original = w64.param(index);
        *w64.param_mut(index) = original + STEP;
        let plus = masked_loss(&w64, &noised)?;
        *w64.param_mut(index) = original - STEP;
        let minus = masked_loss(&w64, &noised)?;
        *w64.param_mut(index) = original;
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic.param(index);
        let scale = a.abs().max(numeric.abs()).max(1e-8);
        out.push(GradCheckEntry {
            index,
            analytic: a,
            numeric,
            relative_error: (a - numeric).abs() / scale,
        });
    }
    Ok(out)
}
