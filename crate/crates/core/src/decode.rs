//! Contrastive guided decoding.
//!
//! A guide CC-LM scores every candidate next token by the class posterior
//! the sequence would have if that token were appended. Because the guide
//! caches `Σ log P(x_j | x_<j, c)` per class, one next-token evaluation per
//! contrasted class covers the whole vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{GediError, Result};
use crate::model::{LMState, TabularCCLM};
use crate::numeric::{argmax, log_sum_exp};
use crate::vocab::{ControlCodeSet, TokenId};

/// Offset added when shifting a distribution to strictly positive scores.
pub const POSITIVE_SHIFT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Guided,
    Direct,
}

/// Prior-bias source for the guide's class posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorBias {
    /// Use the biases stored in the guide.
    Model,
    /// Guide biases, with the desired code's bias replaced.
    Target(f64),
    /// One bias per guide control code.
    PerCode(Vec<f64>),
}

/// Named hyperparameter presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// ω = 30, ρ = 0.2, τ = 0.8, r = 1.2.
    PaperDefault,
    /// Defaults plus a +2 prior bias on the desired class and τ = 0.97.
    DetoxStyle,
    /// Defaults with r = 1.5.
    StrongPenalty,
}

impl Preset {
    pub const NAMES: [&'static str; 3] = ["paper-default", "detox-style", "strong-penalty"];

    pub fn name(self) -> &'static str {
        match self {
            Preset::PaperDefault => "paper-default",
            Preset::DetoxStyle => "detox-style",
            Preset::StrongPenalty => "strong-penalty",
        }
    }

    pub fn config(self) -> GenerationConfig {
        let base = GenerationConfig::default();
        match self {
            Preset::PaperDefault => base,
            Preset::DetoxStyle => GenerationConfig {
                tau: 0.97,
                prior_bias: PriorBias::Target(2.0),
                ..base
            },
            Preset::StrongPenalty => GenerationConfig {
                repetition_penalty: 1.5,
                ..base
            },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = GediError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-default" => Ok(Preset::PaperDefault),
            "detox-style" => Ok(Preset::DetoxStyle),
            "strong-penalty" => Ok(Preset::StrongPenalty),
            other => Err(GediError::InvalidConfig(format!(
                "unknown preset `{other}` (expected one of {})",
                Preset::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Posterior exponent ω.
    pub omega: f64,
    /// Cumulative-mass floor ρ.
    pub rho: f64,
    /// Posterior keep threshold τ.
    pub tau: f64,
    /// Repetition penalty r.
    pub repetition_penalty: f64,
    pub prior_bias: PriorBias,
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
    pub filter: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            omega: 30.0,
            rho: 0.2,
            tau: 0.8,
            repetition_penalty: 1.2,
            prior_bias: PriorBias::Model,
            max_new_tokens: 16,
            mode: DecodeMode::Guided,
            filter: true,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GediError::InvalidConfig(msg));
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return bad(format!("omega must be a finite value >= 0, got {}", self.omega));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return bad(format!(
                "repetition penalty must be >= 1, got {}",
                self.repetition_penalty
            ));
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive".into());
        }
        match &self.prior_bias {
            PriorBias::Target(b) if !b.is_finite() => bad(format!("bias {b} is not finite")),
            PriorBias::PerCode(v) if v.iter().any(|b| !b.is_finite()) => bad("per-code biases must be finite".into()),
            _ => Ok(()),
        }
    }
}

/// Per-class decoding states of the guide for one generation stream.
#[derive(Debug, Clone)]
pub struct GuideState {
    states: Vec<LMState>,
    contrast: Vec<usize>,
    target: usize,
    t: usize,
}

impl GuideState {
    /// Contrast set for `target_class`.
    ///
    /// Binarized guides contrast `true` against `false`, both conditioned on
    /// the target's class name. Standard guides contrast the target with its
    /// anti-code when one is set, else with every other code.
    pub fn new(guide: &TabularCCLM, target_class: usize) -> Result<Self> {
        let codes = guide.codes();
        if codes.is_binarized() {
            let states = vec![
                guide.init_binarized_state(ControlCodeSet::TRUE, target_class)?,
                guide.init_binarized_state(ControlCodeSet::FALSE, target_class)?,
            ];
            return Ok(Self {
                states,
                contrast: vec![ControlCodeSet::TRUE, ControlCodeSet::FALSE],
                target: 0,
                t: 0,
            });
        }
        if codes.len() < 2 {
            return Err(GediError::InvalidConfig(
                "guide needs at least two control codes".into(),
            ));
        }
        let code = codes.code(target_class)?;
        let (contrast, target) = match code.anti {
            Some(anti) => (vec![target_class, anti], 0),
            None => ((0..codes.len()).collect(), target_class),
        };
        let states = contrast
            .iter()
            .map(|&c| guide.init_state(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            states,
            contrast,
            target,
            t: 0,
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Control-code ids in the contrast set.
    pub fn contrast(&self) -> &[usize] {
        &self.contrast
    }

    /// Position of the desired code within [`Self::contrast`].
    pub fn target_index(&self) -> usize {
        self.target
    }

    pub fn states(&self) -> &[LMState] {
        &self.states
    }

    /// Consumes prompt tokens into every per-class state.
    pub fn consume(&mut self, guide: &TabularCCLM, tokens: &[TokenId]) -> Result<usize> {
        let mut passes = 0;
        for &tok in tokens {
            let rows: Vec<Vec<f64>> = self.states.iter().map(|s| guide.next_token_logprobs(s)).collect();
            passes += rows.len();
            guide.vocab().check(tok)?;
            self.push(tok, &rows);
        }
        Ok(passes)
    }

    fn push(&mut self, token: TokenId, rows: &[Vec<f64>]) {
        for (state, row) in self.states.iter_mut().zip(rows) {
            state.push(token, row[token]);
        }
        self.t += 1;
    }
}

/// Class posteriors of every candidate next token, stored as log-probabilities
/// in a `vocab × contrast` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePosteriors {
    log_post: Vec<f64>,
    classes: usize,
    target: usize,
}

impl CandidatePosteriors {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn vocab_size(&self) -> usize {
        self.log_post.len() / self.classes
    }

    pub fn log_posterior(&self, token: TokenId, class: usize) -> f64 {
        self.log_post[token * self.classes + class]
    }

    pub fn posterior(&self, token: TokenId, class: usize) -> f64 {
        self.log_posterior(token, class).exp()
    }

    /// Posterior row over the contrast set for one candidate.
    pub fn row(&self, token: TokenId) -> Vec<f64> {
        self.log_post[token * self.classes..(token + 1) * self.classes]
            .iter()
            .map(|x| x.exp())
            .collect()
    }

    pub fn target_log_posteriors(&self) -> Vec<f64> {
        (0..self.vocab_size())
            .map(|x| self.log_posterior(x, self.target))
            .collect()
    }

    pub fn target_posteriors(&self) -> Vec<f64> {
        (0..self.vocab_size()).map(|x| self.posterior(x, self.target)).collect()
    }
}

/// Resolves the per-code prior biases for a guide under `bias`.
pub fn resolve_biases(guide: &TabularCCLM, target_code: usize, bias: &PriorBias) -> Result<Vec<f64>> {
    let mut biases = guide.biases();
    match bias {
        PriorBias::Model => {}
        PriorBias::Target(b) => biases[target_code] = *b,
        PriorBias::PerCode(v) => {
            if v.len() != biases.len() {
                return Err(GediError::InvalidConfig(format!(
                    "expected {} per-code biases, got {}",
                    biases.len(),
                    v.len()
                )));
            }
            biases.clone_from(v);
        }
    }
    Ok(biases)
}

/// Evaluates `P(c' | x_<t, x)` for every candidate `x` over the contrast set.
///
/// `biases` is indexed by control-code id and defaults to the guide's own;
/// `alpha_override` replaces the guide's `α`. The exponent is `α / t` with
/// `t` counting the candidate itself.
pub fn candidate_class_posteriors(
    guide: &TabularCCLM,
    gstate: &GuideState,
    biases: Option<&[f64]>,
    alpha_override: Option<f64>,
) -> Result<CandidatePosteriors> {
    let rows: Vec<Vec<f64>> = gstate.states.iter().map(|s| guide.next_token_logprobs(s)).collect();
    let biases = match biases {
        Some(b) => {
            if b.len() != guide.codes().len() {
                return Err(GediError::InvalidConfig(format!(
                    "expected {} biases, got {}",
                    guide.codes().len(),
                    b.len()
                )));
            }
            b.to_vec()
        }
        None => guide.biases(),
    };
    posteriors_from_rows(&rows, gstate, &biases, alpha_override.unwrap_or(guide.alpha()))
}

fn posteriors_from_rows(
    rows: &[Vec<f64>],
    gstate: &GuideState,
    biases: &[f64],
    alpha: f64,
) -> Result<CandidatePosteriors> {
    let classes = gstate.contrast.len();
    if classes < 2 {
        return Err(GediError::InvalidConfig("contrast set needs >= 2 codes".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(GediError::NumericalInput(format!("alpha = {alpha}")));
    }
    let vocab = rows[0].len();
    for (state, row) in gstate.states.iter().zip(rows) {
        if !state.cumulative_logprob().is_finite() || row.iter().any(|x| !x.is_finite()) {
            return Err(GediError::NumericalInput(
                "guide produced a non-finite log-probability".into(),
            ));
        }
    }
    let scale = alpha / (gstate.t + 1) as f64;
    let prior: Vec<f64> = gstate.contrast.iter().map(|&c| biases[c]).collect();
    let mut log_post = Vec::with_capacity(vocab * classes);
    let mut z = vec![0.0; classes];
    #[allow(clippy::needless_range_loop)]
    for x in 0..vocab {
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = prior[j] + scale * (gstate.states[j].cumulative_logprob() + rows[j][x]);
        }
        let lse = log_sum_exp(&z);
        log_post.extend(z.iter().map(|&v| v - lse));
    }
    Ok(CandidatePosteriors {
        log_post,
        classes,
        target: gstate.target,
    })
}

/// `P_LM(x) · P(c | x)^ω`, normalized over the vocabulary.
pub fn weighted_posterior(base_logprobs: &[f64], target_posteriors: &[f64], omega: f64) -> Result<Vec<f64>> {
    if let Some(p) = target_posteriors.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(GediError::ContractViolation(format!("posterior {p} outside [0, 1]")));
    }
    let log_post: Vec<f64> = target_posteriors.iter().map(|p| p.ln()).collect();
    weighted_posterior_log(base_logprobs, &log_post, omega)
}

/// [`weighted_posterior`] taking log-posteriors.
pub fn weighted_posterior_log(base_logprobs: &[f64], target_log_posteriors: &[f64], omega: f64) -> Result<Vec<f64>> {
    if base_logprobs.len() != target_log_posteriors.len() {
        return Err(GediError::ContractViolation(format!(
            "base has {} entries, posterior {}",
            base_logprobs.len(),
            target_log_posteriors.len()
        )));
    }
    if base_logprobs
        .iter()
        .chain(target_log_posteriors)
        .any(|x| x.is_nan() || *x == f64::INFINITY)
    {
        return Err(GediError::NumericalInput(
            "NaN or +inf in weighted posterior input".into(),
        ));
    }
    let scores: Vec<f64> = base_logprobs
        .iter()
        .zip(target_log_posteriors)
        .map(|(&b, &p)| if omega == 0.0 { b } else { b + omega * p })
        .collect();
    let lse = log_sum_exp(&scores);
    if !lse.is_finite() {
        return Err(GediError::DegenerateDistribution(
            "every candidate has zero weighted probability".into(),
        ));
    }
    Ok(scores.iter().map(|&s| (s - lse).exp()).collect())
}

/// Result of the posterior-based candidate filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    /// Tokens kept by the cumulative-mass rule, in descending-posterior order.
    pub mass_set: Vec<TokenId>,
    /// Tokens whose posterior exceeds τ, ascending.
    pub threshold_set: Vec<TokenId>,
    /// Union of the two sets, ascending.
    pub kept: Vec<TokenId>,
    /// Weighted mass of `kept` before renormalization.
    pub kept_mass: f64,
    /// Weighted distribution restricted to `kept` and renormalized.
    pub distribution: Vec<f64>,
}

/// Keeps the highest-posterior head carrying at least `rho` weighted mass,
/// plus every token with posterior above `tau`; zeroes the rest.
///
/// The head is built by sorting candidates on descending posterior (ties to
/// the lower id). With `rho = 0` the head is the single top-posterior token.
pub fn filter_candidates(weighted: &[f64], target_posteriors: &[f64], rho: f64, tau: f64) -> Result<Filtered> {
    if weighted.len() != target_posteriors.len() || weighted.is_empty() {
        return Err(GediError::ContractViolation(
            "weighted and posterior vectors must be nonempty and of equal length".into(),
        ));
    }
    let mut order: Vec<TokenId> = (0..weighted.len()).collect();
    order.sort_by(|&a, &b| target_posteriors[b].total_cmp(&target_posteriors[a]).then(a.cmp(&b)));

    let mut mass = 0.0;
    let mut head = 0;
    for &tok in &order {
        mass += weighted[tok];
        head += 1;
        if mass >= rho {
            break;
        }
    }
    let mass_set = order[..head].to_vec();
    let threshold_set: Vec<TokenId> = (0..weighted.len()).filter(|&x| target_posteriors[x] > tau).collect();

    let mut keep = vec![false; weighted.len()];
    for &x in mass_set.iter().chain(&threshold_set) {
        keep[x] = true;
    }
    let kept: Vec<TokenId> = (0..weighted.len()).filter(|&x| keep[x]).collect();
    let kept_mass: f64 = kept.iter().map(|&x| weighted[x]).sum();
    if !(kept_mass > 0.0 && kept_mass.is_finite()) {
        return Err(GediError::DegenerateDistribution(
            "kept candidates carry no probability mass".into(),
        ));
    }
    let distribution = (0..weighted.len())
        .map(|x| if keep[x] { weighted[x] / kept_mass } else { 0.0 })
        .collect();
    Ok(Filtered {
        mass_set,
        threshold_set,
        kept,
        kept_mass,
        distribution,
    })
}

/// Shifts a score vector so every entry is strictly positive: entries are
/// moved up by `max(0, -min)` plus [`POSITIVE_SHIFT_EPS`]. Ordering is preserved.
pub fn positive_scores(p: &[f64]) -> Vec<f64> {
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = (-min).max(0.0) + POSITIVE_SHIFT_EPS;
    p.iter().map(|&x| x + shift).collect()
}

/// Divides the score of every token present in `history` by `r`, once.
pub fn apply_repetition_penalty(scores: &[f64], history: &[TokenId], r: f64) -> Result<Vec<f64>> {
    if !(r >= 1.0 && r.is_finite()) {
        return Err(GediError::ContractViolation(format!(
            "repetition penalty must be >= 1, got {r}"
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan() || **s <= 0.0) {
        return Err(GediError::ContractViolation(format!(
            "repetition penalty needs positive scores, got {s}"
        )));
    }
    let mut seen = vec![false; scores.len()];
    for &tok in history {
        if tok >= scores.len() {
            return Err(GediError::TokenOutOfRange {
                token: tok,
                vocab: scores.len(),
            });
        }
        seen[tok] = true;
    }
    Ok(scores
        .iter()
        .zip(&seen)
        .map(|(&s, &hit)| if hit { s / r } else { s })
        .collect())
}

/// Record of one guided decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// `P(c | x_<t, x)` of the desired class for every candidate `x`.
    pub target_posterior: Vec<f64>,
    pub kept: Vec<TokenId>,
    /// Weighted posterior before filtering.
    pub weighted: Vec<f64>,
    pub chosen: TokenId,
    pub guide_passes: usize,
    pub base_passes: usize,
    pub contrast_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    /// Newly generated tokens (prompt excluded).
    pub tokens: Vec<TokenId>,
    pub trace: Vec<StepTrace>,
    pub prompt_base_passes: usize,
    pub prompt_guide_passes: usize,
    pub stopped_at_eos: bool,
}

/// Greedy GeDi-guided generation from `base`, steered toward `target_class`
/// of `guide`.
///
/// Per step: candidate posteriors, weighted posterior, optional filtering,
/// positive shift, repetition penalty, then argmax with ties to the lowest id.
/// The penalty history covers the prompt and the generated tokens.
pub fn gedi_generate(
    base: &TabularCCLM,
    guide: &TabularCCLM,
    target_class: usize,
    prompt: &[TokenId],
    config: &GenerationConfig,
) -> Result<GenerationOutput> {
    config.validate()?;
    if base.vocab() != guide.vocab() {
        return Err(GediError::VocabMismatch(
            "base model and guide must share one vocabulary".into(),
        ));
    }
    if base.codes().len() != 1 {
        return Err(GediError::InvalidConfig(
            "base model must be unconditional (a single control code)".into(),
        ));
    }
    let mut gstate = GuideState::new(guide, target_class)?;
    let target_code = gstate.contrast[gstate.target];
    let biases = resolve_biases(guide, target_code, &config.prior_bias)?;
    let alpha = guide.alpha();

    let mut base_state = base.init_state(0)?;
    for &tok in prompt {
        base_state = base.advance(&base_state, tok)?;
    }
    let prompt_guide_passes = gstate.consume(guide, prompt)?;

    let eos = base.vocab().eos();
    let mut history = prompt.to_vec();
    let mut out = GenerationOutput {
        tokens: Vec::with_capacity(config.max_new_tokens),
        trace: Vec::with_capacity(config.max_new_tokens),
        prompt_base_passes: prompt.len(),
        prompt_guide_passes,
        stopped_at_eos: false,
    };

    for _ in 0..config.max_new_tokens {
        let base_lp = base.next_token_logprobs(&base_state);
        let base_passes = 1;
        let rows: Vec<Vec<f64>> = gstate.states.iter().map(|s| guide.next_token_logprobs(s)).collect();
        let guide_passes = rows.len();

        let post = posteriors_from_rows(&rows, &gstate, &biases, alpha)?;
        let target_posterior = post.target_posteriors();
        let weighted = weighted_posterior_log(&base_lp, &post.target_log_posteriors(), config.omega)?;
        let (kept, dist) = if config.filter {
            let f = filter_candidates(&weighted, &target_posterior, config.rho, config.tau)?;
            (f.kept, f.distribution)
        } else {
            ((0..weighted.len()).collect(), weighted.clone())
        };
        let scores = apply_repetition_penalty(&positive_scores(&dist), &history, config.repetition_penalty)?;
        let chosen = argmax(&scores);

        base_state.push(chosen, base_lp[chosen]);
        gstate.push(chosen, &rows);
        history.push(chosen);
        out.tokens.push(chosen);
        out.trace.push(StepTrace {
            target_posterior,
            kept,
            weighted,
            chosen,
            guide_passes,
            base_passes,
            contrast_size: gstate.contrast.len(),
        });
        if Some(chosen) == eos {
            out.stopped_at_eos = true;
            break;
        }
    }
    Ok(out)
}

/// Greedy class-conditional generation straight from a CC-LM.
///
/// For a binarized model `class_id` names a class and generation conditions
/// on `true` paired with that class name.
pub fn direct_generate(
    cclm: &TabularCCLM,
    class_id: usize,
    prompt: &[TokenId],
    config: &GenerationConfig,
) -> Result<Vec<TokenId>> {
    config.validate()?;
    let state = if cclm.codes().is_binarized() {
        cclm.init_binarized_state(ControlCodeSet::TRUE, class_id)?
    } else {
        cclm.init_state(class_id)?
    };
    let mut state = cclm.consume(state, prompt)?;
    let eos = cclm.vocab().eos();
    let mut history = prompt.to_vec();
    let mut tokens = Vec::with_capacity(config.max_new_tokens);
    for _ in 0..config.max_new_tokens {
        let lp = cclm.next_token_logprobs(&state);
        let probs: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        let scores = apply_repetition_penalty(&positive_scores(&probs), &history, config.repetition_penalty)?;
        let chosen = argmax(&scores);
        state.push(chosen, lp[chosen]);
        history.push(chosen);
        tokens.push(chosen);
        if Some(chosen) == eos {
            break;
        }
    }
    Ok(tokens)
}
