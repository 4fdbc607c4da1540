//! Tabular order-k class-conditional language model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GediError, Result};
use crate::numeric::log_softmax;
use crate::vocab::{ControlCodeSet, TokenId, Vocab};

/// Upper bound on logit-table entries.
const MAX_TABLE: usize = 1 << 26;

/// How the logit table is filled at construction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    Zeros,
    /// Independent normal noise with the given standard deviation.
    Noise {
        sigma: f64,
    },
}

/// Decoding state of one conditioning stream.
///
/// `context` holds the last `order` tokens, oldest first, BOS-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct LMState {
    code: usize,
    name: Option<usize>,
    context: Vec<TokenId>,
    t: usize,
    cumulative: f64,
}

impl LMState {
    pub fn code(&self) -> usize {
        self.code
    }

    /// Class-name slot the stream is conditioned on (binarized models only).
    pub fn name(&self) -> Option<usize> {
        self.name
    }

    pub fn context(&self) -> &[TokenId] {
        &self.context
    }

    /// Tokens consumed since the control code.
    pub fn t(&self) -> usize {
        self.t
    }

    /// `Σ_j log P(x_j | x_<j, c)` over the consumed tokens.
    pub fn cumulative_logprob(&self) -> f64 {
        self.cumulative
    }

    /// Consumes `token` whose log-probability under this state is `logprob`.
    pub(crate) fn push(&mut self, token: TokenId, logprob: f64) {
        if !self.context.is_empty() {
            self.context.remove(0);
            self.context.push(token);
        }
        self.t += 1;
        self.cumulative += logprob;
    }
}

/// A class-conditional language model with one softmax row per
/// (code, class-name slot, context) cell.
///
/// `α` is stored as `ln α` so gradient steps keep it positive.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularCCLM {
    vocab: Vocab,
    codes: ControlCodeSet,
    order: usize,
    logits: Vec<f64>,
    log_alpha: f64,
}

impl TabularCCLM {
    pub fn new(vocab: Vocab, codes: ControlCodeSet, order: usize, init: InitScheme, seed: u64) -> Result<Self> {
        let len = table_len(&vocab, &codes, order)?;
        let logits = match init {
            InitScheme::Zeros => vec![0.0; len],
            InitScheme::Noise { sigma } => {
                let normal = Normal::new(0.0, sigma)
                    .map_err(|e| GediError::InvalidConfig(format!("bad noise scale {sigma}: {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        Ok(Self {
            vocab,
            codes,
            order,
            logits,
            log_alpha: 0.0,
        })
    }

    /// Builds a model from an explicit logit table in row-major
    /// (code, class-name slot, context, token) order.
    pub fn from_logits(
        vocab: Vocab,
        codes: ControlCodeSet,
        order: usize,
        logits: Vec<f64>,
        log_alpha: f64,
    ) -> Result<Self> {
        let len = table_len(&vocab, &codes, order)?;
        if logits.len() != len {
            return Err(GediError::InvalidConfig(format!(
                "logit table has {} entries, expected {len}",
                logits.len()
            )));
        }
        if !log_alpha.is_finite() {
            return Err(GediError::NumericalInput(format!("ln alpha = {log_alpha}")));
        }
        Ok(Self {
            vocab,
            codes,
            order,
            logits,
            log_alpha,
        })
    }

    /// Builds a model whose rows are the log of the given probabilities.
    pub fn from_probabilities(vocab: Vocab, codes: ControlCodeSet, order: usize, probs: &[f64]) -> Result<Self> {
        let logits = probs.iter().map(|p| p.ln()).collect();
        Self::from_logits(vocab, codes, order, logits, 0.0)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn codes(&self) -> &ControlCodeSet {
        &self.codes
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn log_alpha(&self) -> f64 {
        self.log_alpha
    }

    pub fn set_log_alpha(&mut self, log_alpha: f64) {
        self.log_alpha = log_alpha;
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(GediError::InvalidConfig(format!("alpha must be > 0, got {alpha}")));
        }
        self.log_alpha = alpha.ln();
        Ok(())
    }

    pub fn biases(&self) -> Vec<f64> {
        self.codes.biases()
    }

    pub fn set_bias(&mut self, code: usize, bias: f64) -> Result<()> {
        self.codes.code(code)?;
        self.codes.set_bias(code, bias);
        Ok(())
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Number of distinct contexts per (code, slot): `(|V| + 1)^k`.
    pub fn context_count(&self) -> usize {
        (self.vocab.size() + 1).pow(self.order as u32)
    }

    pub(crate) fn slots(&self) -> usize {
        self.codes.name_slots()
    }

    /// Fresh state conditioned on `class` (a control-code id).
    pub fn init_state(&self, class: usize) -> Result<LMState> {
        if self.codes.is_binarized() {
            return Err(GediError::InvalidConfig(
                "binarized model needs a class name; use init_binarized_state".into(),
            ));
        }
        self.codes.code(class)?;
        Ok(self.fresh(class, None))
    }

    /// Fresh state of a binarized model: `code` is true/false, `name` the
    /// class-name symbol the sequence is paired with.
    pub fn init_binarized_state(&self, code: usize, name: usize) -> Result<LMState> {
        if !self.codes.is_binarized() {
            return Err(GediError::InvalidConfig("model is not binarized".into()));
        }
        self.codes.code(code)?;
        let names = self.codes.class_names().len();
        if name >= names {
            return Err(GediError::ClassOutOfRange {
                class: name,
                classes: names,
            });
        }
        Ok(self.fresh(code, Some(name)))
    }

    fn fresh(&self, code: usize, name: Option<usize>) -> LMState {
        LMState {
            code,
            name,
            context: vec![self.vocab.bos(); self.order],
            t: 0,
            cumulative: 0.0,
        }
    }

    /// Offset of the logit row that `state` reads.
    pub(crate) fn row_offset(&self, state: &LMState) -> usize {
        let base = self.vocab.size() + 1;
        let ctx = state.context.iter().fold(0usize, |acc, &tok| acc * base + tok);
        let slot = state.name.unwrap_or(0);
        ((state.code * self.slots() + slot) * self.context_count() + ctx) * self.vocab.size()
    }

    pub(crate) fn row(&self, state: &LMState) -> &[f64] {
        let off = self.row_offset(state);
        &self.logits[off..off + self.vocab.size()]
    }

    pub fn next_token_logprobs(&self, state: &LMState) -> Vec<f64> {
        log_softmax(self.row(state))
    }

    pub fn advance(&self, state: &LMState, token: TokenId) -> Result<LMState> {
        self.vocab.check(token)?;
        let lp = self.next_token_logprobs(state)[token];
        let mut next = state.clone();
        next.push(token, lp);
        Ok(next)
    }

    /// `log P(tokens | class)`, accumulated token by token.
    pub fn sequence_logprob(&self, class: usize, tokens: &[TokenId]) -> Result<f64> {
        let state = self.init_state(class)?;
        self.continue_logprob(state, tokens)
    }

    pub fn sequence_logprob_binarized(&self, code: usize, name: usize, tokens: &[TokenId]) -> Result<f64> {
        let state = self.init_binarized_state(code, name)?;
        self.continue_logprob(state, tokens)
    }

    fn continue_logprob(&self, mut state: LMState, tokens: &[TokenId]) -> Result<f64> {
        for &tok in tokens {
            state = self.advance(&state, tok)?;
        }
        Ok(state.cumulative_logprob())
    }

    /// Consumes a whole sequence and returns the final state.
    pub fn consume(&self, mut state: LMState, tokens: &[TokenId]) -> Result<LMState> {
        for &tok in tokens {
            state = self.advance(&state, tok)?;
        }
        Ok(state)
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.logits.iter().position(|x| !x.is_finite()) {
            return Err(GediError::NumericalInput(format!(
                "logit table entry {i} is {}",
                self.logits[i]
            )));
        }
        Ok(())
    }
}

fn table_len(vocab: &Vocab, codes: &ControlCodeSet, order: usize) -> Result<usize> {
    let too_big = || GediError::InvalidConfig(format!("logit table too large (order {order})"));
    let ctx = (vocab.size() + 1).checked_pow(order as u32).ok_or_else(too_big)?;
    let len = codes
        .len()
        .checked_mul(codes.name_slots())
        .and_then(|n| n.checked_mul(ctx))
        .and_then(|n| n.checked_mul(vocab.size()))
        .ok_or_else(too_big)?;
    if len > MAX_TABLE {
        return Err(too_big());
    }
    Ok(len)
}
