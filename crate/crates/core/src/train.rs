//! Hybrid generative/discriminative training of tabular CC-LMs.
//!
//! The objective is `λ·L_g + (1 − λ)·L_d`: `L_g` is the per-token average
//! negative log-likelihood given the true code, `L_d` the negative log of the
//! length-normalized Bayes posterior of the true code. Gradients are exact
//! through the log-softmax rows, `ln α`, and the code biases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GediError, Result};
use crate::eval;
use crate::model::{LMState, TabularCCLM};
use crate::numeric::{log_softmax, softmax};
use crate::synth::LabeledCorpus;
use crate::vocab::{ControlCodeSet, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Plain gradient descent.
    Sgd,
    /// Adaptive moments.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Update the code biases `b_c` (leave off for balanced classes).
    pub learn_bias: bool,
    /// Train with true/false pairings; must match the model's code set.
    pub binarized: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            optimizer: Optimizer::adam(),
            learn_bias: false,
            binarized: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GediError::InvalidConfig(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(GediError::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(GediError::InvalidConfig(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )))
    }
}

/// One training sequence.
///
/// `class` is the control code the sequence is conditioned on. `paired`
/// restricts the discriminative posterior to `{class, paired}`; without it
/// the posterior runs over every code. `name` is the class-name slot of a
/// binarized model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub tokens: Vec<TokenId>,
    pub class: usize,
    pub paired: Option<usize>,
    pub name: Option<usize>,
}

impl TrainingExample {
    pub fn standard(tokens: Vec<TokenId>, class: usize) -> Self {
        Self {
            tokens,
            class,
            paired: None,
            name: None,
        }
    }

    fn contrast(&self, codes: usize) -> Vec<usize> {
        match self.paired {
            Some(p) => {
                let mut set = vec![self.class, p];
                set.sort_unstable();
                set
            }
            None => (0..codes).collect(),
        }
    }

    fn start(&self, model: &TabularCCLM, code: usize) -> Result<LMState> {
        match self.name {
            Some(name) => model.init_binarized_state(code, name),
            None => model.init_state(code),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingBatch {
    pub examples: Vec<TrainingExample>,
}

impl TrainingBatch {
    pub fn new(examples: Vec<TrainingExample>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn validate(&self, model: &TabularCCLM) -> Result<()> {
        if self.examples.is_empty() {
            return Err(GediError::EmptyInput("training batch is empty"));
        }
        let codes = model.codes().len();
        for ex in &self.examples {
            if ex.tokens.is_empty() {
                return Err(GediError::EmptyInput("training sequence has no tokens"));
            }
            for &c in std::iter::once(&ex.class).chain(ex.paired.iter()) {
                if c >= codes {
                    return Err(GediError::ClassOutOfRange {
                        class: c,
                        classes: codes,
                    });
                }
            }
            if ex.paired == Some(ex.class) {
                return Err(GediError::InvalidConfig("paired class equals the true class".into()));
            }
            if model.codes().is_binarized() != ex.name.is_some() {
                return Err(GediError::InvalidConfig(
                    "binarized models need class-name slots on every example (and only they do)".into(),
                ));
            }
            for &t in &ex.tokens {
                model.vocab().check(t)?;
            }
        }
        Ok(())
    }
}

/// Loss values of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridLoss {
    pub total: f64,
    pub generative: f64,
    pub discriminative: f64,
}

/// Gradients of `λ·L_g + (1 − λ)·L_d` for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// Same layout as [`TabularCCLM::logits`].
    pub logits: Vec<f64>,
    /// With respect to `ln α`.
    pub log_alpha: f64,
    /// One per control code.
    pub biases: Vec<f64>,
    pub loss: HybridLoss,
}

/// `−(1/N) Σ_i (1/T_i) Σ_t log P(x_t | x_<t, c_i)`.
pub fn generative_loss(model: &TabularCCLM, batch: &TrainingBatch) -> Result<f64> {
    batch.validate(model)?;
    let mut total = 0.0;
    for ex in &batch.examples {
        let state = model.consume(ex.start(model, ex.class)?, &ex.tokens)?;
        total -= state.cumulative_logprob() / ex.tokens.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Offline class posterior of a full sequence under a standard model,
/// normalized over every control code, with exponent `α / T` and the code
/// biases as log-prior.
pub fn class_posterior_offline(model: &TabularCCLM, tokens: &[TokenId]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(GediError::EmptyInput("cannot classify an empty sequence"));
    }
    let scale = model.alpha() / tokens.len() as f64;
    let biases = model.biases();
    let z = (0..model.codes().len())
        .map(|c| Ok(biases[c] + scale * model.sequence_logprob(c, tokens)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax(&z))
}

/// `[P(true | name, x), P(false | name, x)]` under a binarized model.
pub fn binarized_posterior(model: &TabularCCLM, name: usize, tokens: &[TokenId]) -> Result<[f64; 2]> {
    if tokens.is_empty() {
        return Err(GediError::EmptyInput("cannot classify an empty sequence"));
    }
    let scale = model.alpha() / tokens.len() as f64;
    let biases = model.biases();
    let z_true =
        biases[ControlCodeSet::TRUE] + scale * model.sequence_logprob_binarized(ControlCodeSet::TRUE, name, tokens)?;
    let z_false = biases[ControlCodeSet::FALSE]
        + scale * model.sequence_logprob_binarized(ControlCodeSet::FALSE, name, tokens)?;
    let p = softmax(&[z_true, z_false]);
    Ok([p[0], p[1]])
}

fn example_posterior(model: &TabularCCLM, ex: &TrainingExample) -> Result<(Vec<usize>, Vec<f64>)> {
    let set = ex.contrast(model.codes().len());
    let scale = model.alpha() / ex.tokens.len() as f64;
    let biases = model.biases();
    let z = set
        .iter()
        .map(|&c| {
            let state = model.consume(ex.start(model, c)?, &ex.tokens)?;
            Ok(biases[c] + scale * state.cumulative_logprob())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((set, softmax(&z)))
}

/// `−(1/N) Σ_i log P(c_i | x_i)`.
pub fn discriminative_loss(model: &TabularCCLM, batch: &TrainingBatch) -> Result<f64> {
    batch.validate(model)?;
    let mut total = 0.0;
    for ex in &batch.examples {
        let (set, post) = example_posterior(model, ex)?;
        let j = set
            .iter()
            .position(|&c| c == ex.class)
            .expect("true class in its contrast set");
        total -= post[j].ln();
    }
    Ok(total / batch.len() as f64)
}

pub fn hybrid_loss(model: &TabularCCLM, batch: &TrainingBatch, lambda: f64) -> Result<HybridLoss> {
    check_lambda(lambda)?;
    let generative = generative_loss(model, batch)?;
    let discriminative = discriminative_loss(model, batch)?;
    Ok(HybridLoss {
        total: lambda * generative + (1.0 - lambda) * discriminative,
        generative,
        discriminative,
    })
}

/// Per-position view of one sequence under one code: the logit row offset,
/// the observed token, and the row's softmax.
struct Walk {
    steps: Vec<(usize, TokenId, Vec<f64>)>,
    loglik: f64,
}

fn walk(model: &TabularCCLM, ex: &TrainingExample, code: usize) -> Result<Walk> {
    let mut state = ex.start(model, code)?;
    let mut steps = Vec::with_capacity(ex.tokens.len());
    let mut loglik = 0.0;
    for &tok in &ex.tokens {
        let off = model.row_offset(&state);
        let lp = log_softmax(model.row(&state));
        loglik += lp[tok];
        state.push(tok, lp[tok]);
        steps.push((off, tok, lp.into_iter().map(f64::exp).collect()));
    }
    Ok(Walk { steps, loglik })
}

/// Exact gradients of the hybrid loss.
pub fn loss_gradients(model: &TabularCCLM, batch: &TrainingBatch, lambda: f64) -> Result<GradientBundle> {
    check_lambda(lambda)?;
    batch.validate(model)?;
    let n = batch.len() as f64;
    let alpha = model.alpha();
    let biases = model.biases();
    let codes = model.codes().len();
    let vocab = model.vocab().size();

    let mut g_logits = vec![0.0; model.logits().len()];
    let mut g_log_alpha = 0.0;
    let mut g_biases = vec![0.0; codes];
    let (mut l_g, mut l_d) = (0.0, 0.0);

    for ex in &batch.examples {
        let t = ex.tokens.len() as f64;
        let set = ex.contrast(codes);
        let walks = set.iter().map(|&c| walk(model, ex, c)).collect::<Result<Vec<_>>>()?;
        let z: Vec<f64> = set
            .iter()
            .zip(&walks)
            .map(|(&c, w)| biases[c] + alpha / t * w.loglik)
            .collect();
        let post = softmax(&z);
        let y = set
            .iter()
            .position(|&c| c == ex.class)
            .expect("true class in its contrast set");

        l_g -= walks[y].loglik / t;
        l_d -= post[y].ln();

        for (j, (&c, w)) in set.iter().zip(&walks).enumerate() {
            let indicator = if j == y { 1.0 } else { 0.0 };
            let d_z = (1.0 - lambda) * (post[j] - indicator) / n;
            g_biases[c] += d_z;
            g_log_alpha += d_z * alpha / t * w.loglik;
            let coef = d_z * alpha / t - lambda * indicator / (t * n);
            if coef == 0.0 {
                continue;
            }
            for (off, tok, probs) in &w.steps {
                let row = &mut g_logits[*off..*off + vocab];
                for (v, g) in row.iter_mut().enumerate() {
                    *g -= coef * probs[v];
                }
                row[*tok] += coef;
            }
        }
    }

    let loss = HybridLoss {
        total: (lambda * l_g + (1.0 - lambda) * l_d) / n,
        generative: l_g / n,
        discriminative: l_d / n,
    };
    let bundle = GradientBundle {
        logits: g_logits,
        log_alpha: g_log_alpha,
        biases: g_biases,
        loss,
    };
    if !bundle.loss.total.is_finite()
        || !bundle.log_alpha.is_finite()
        || bundle.logits.iter().chain(&bundle.biases).any(|g| !g.is_finite())
    {
        return Err(GediError::NumericalInput("non-finite gradient".into()));
    }
    Ok(bundle)
}

/// A binarized training pairing: `name` is the class-name slot the text is
/// paired with, `label` whether that pairing is the true one.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedExample {
    pub label: bool,
    pub name: usize,
    pub tokens: Vec<TokenId>,
}

impl BinarizedExample {
    pub fn code(&self) -> usize {
        if self.label {
            ControlCodeSet::TRUE
        } else {
            ControlCodeSet::FALSE
        }
    }

    pub fn to_training(&self) -> TrainingExample {
        let code = self.code();
        TrainingExample {
            tokens: self.tokens.clone(),
            class: code,
            paired: Some(1 - code),
            name: Some(self.name),
        }
    }
}

/// Which pairing [`binarize_with`] emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    True,
    /// The `k`-th class other than the true one.
    False(usize),
}

/// Pairs `tokens` of class `true_class` (out of `class_count`) with a class
/// name: the true one with probability 1/2, else a uniformly drawn wrong one.
pub fn binarize_example(
    tokens: &[TokenId],
    true_class: usize,
    class_count: usize,
    rng: &mut impl Rng,
) -> Result<BinarizedExample> {
    if class_count < 2 {
        return Err(GediError::NoFalseClass);
    }
    let pairing = if rng.gen_bool(0.5) {
        Pairing::True
    } else {
        Pairing::False(rng.gen_range(0..class_count - 1))
    };
    binarize_with(tokens, true_class, class_count, pairing)
}

pub fn binarize_with(
    tokens: &[TokenId],
    true_class: usize,
    class_count: usize,
    pairing: Pairing,
) -> Result<BinarizedExample> {
    if class_count < 2 {
        return Err(GediError::NoFalseClass);
    }
    if true_class >= class_count {
        return Err(GediError::ClassOutOfRange {
            class: true_class,
            classes: class_count,
        });
    }
    let (label, name) = match pairing {
        Pairing::True => (true, true_class),
        Pairing::False(k) => {
            if k >= class_count - 1 {
                return Err(GediError::ClassOutOfRange {
                    class: k,
                    classes: class_count - 1,
                });
            }
            (false, if k < true_class { k } else { k + 1 })
        }
    };
    Ok(BinarizedExample {
        label,
        name,
        tokens: tokens.to_vec(),
    })
}

/// Metrics recorded after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Size-weighted means of the minibatch losses seen during the epoch.
    pub l_g: f64,
    pub l_d: f64,
    pub l_gd: f64,
    pub heldout_accuracy: Option<f64>,
    pub heldout_perplexity: Option<f64>,
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, lr: f64, len: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [&mut f64], grads: &[f64]) {
        self.step += 1;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    **p -= self.lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    **p -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

fn check_corpus(model: &TabularCCLM, corpus: &LabeledCorpus) -> Result<()> {
    if model.vocab() != &corpus.vocab {
        return Err(GediError::VocabMismatch(
            "corpus vocabulary differs from the model's".into(),
        ));
    }
    let codes = model.codes();
    let expected: Vec<String> = if codes.is_binarized() {
        codes.class_names().to_vec()
    } else {
        codes.codes().iter().map(|c| c.name.clone()).collect()
    };
    if codes.len() == 1 {
        return Ok(());
    }
    if corpus.classes != expected {
        return Err(GediError::VocabMismatch(format!(
            "corpus classes {:?} differ from model classes {:?}",
            corpus.classes, expected
        )));
    }
    Ok(())
}

/// Examples for one epoch. Unconditional models see every record under code 0.
fn epoch_examples(model: &TabularCCLM, corpus: &LabeledCorpus, rng: &mut ChaCha8Rng) -> Result<Vec<TrainingExample>> {
    let codes = model.codes();
    corpus
        .records
        .iter()
        .map(|r| {
            if codes.is_binarized() {
                Ok(binarize_example(&r.tokens, r.class, codes.class_names().len(), rng)?.to_training())
            } else if codes.len() == 1 {
                Ok(TrainingExample::standard(r.tokens.clone(), 0))
            } else {
                Ok(TrainingExample::standard(r.tokens.clone(), r.class))
            }
        })
        .collect()
}

/// Minibatch training on `corpus`; held-out metrics are measured on
/// `heldout` after every epoch when given.
///
/// Deterministic for a fixed seed. Aborts with [`GediError::Divergence`] as
/// soon as a minibatch loss is non-finite.
pub fn train(
    model: &TabularCCLM,
    corpus: &LabeledCorpus,
    heldout: Option<&LabeledCorpus>,
    config: &TrainConfig,
) -> Result<(TabularCCLM, Vec<EpochMetrics>)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(GediError::EmptyInput("training corpus is empty"));
    }
    if config.binarized != model.codes().is_binarized() {
        return Err(GediError::InvalidConfig(
            "binarized flag does not match the model's control codes".into(),
        ));
    }
    check_corpus(model, corpus)?;
    if let Some(h) = heldout {
        check_corpus(model, h)?;
    }

    let mut model = model.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_params = model.logits().len() + 1 + model.codes().len();
    let mut opt = OptimizerState::new(config.optimizer, config.learning_rate, n_params);
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let examples = epoch_examples(&model, corpus, &mut rng)?;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let (mut sum_g, mut sum_d, mut sum_gd) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch = TrainingBatch::new(chunk.iter().map(|&i| examples[i].clone()).collect());
            let grads = match loss_gradients(&model, &batch, config.lambda) {
                Ok(g) => g,
                Err(GediError::NumericalInput(_)) => {
                    return Err(GediError::Divergence {
                        epoch,
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !grads.loss.total.is_finite() {
                return Err(GediError::Divergence {
                    epoch,
                    step,
                    loss: grads.loss.total,
                });
            }
            let w = batch.len() as f64;
            sum_g += grads.loss.generative * w;
            sum_d += grads.loss.discriminative * w;
            sum_gd += grads.loss.total * w;

            let mut flat_grads = grads.logits;
            flat_grads.push(grads.log_alpha);
            if config.learn_bias {
                flat_grads.extend(&grads.biases);
            } else {
                flat_grads.resize(flat_grads.len() + grads.biases.len(), 0.0);
            }
            let mut biases = model.biases();
            let mut log_alpha = model.log_alpha();
            {
                let mut params: Vec<&mut f64> = model.logits_mut().iter_mut().collect();
                params.push(&mut log_alpha);
                params.extend(biases.iter_mut());
                opt.update(&mut params, &flat_grads);
            }
            model.set_log_alpha(log_alpha);
            if config.learn_bias {
                for (c, b) in biases.into_iter().enumerate() {
                    model.set_bias(c, b)?;
                }
            }
            let alpha = model.alpha();
            if !(alpha > 0.0 && alpha.is_finite())
                || model.check_finite().is_err()
                || model.biases().iter().any(|b| !b.is_finite())
            {
                return Err(GediError::Divergence {
                    epoch,
                    step,
                    loss: grads.loss.total,
                });
            }
        }
        let n = examples.len() as f64;
        let (heldout_accuracy, heldout_perplexity) = match heldout {
            Some(h) if !h.is_empty() => (
                if model.codes().len() > 1 {
                    Some(eval::classification_accuracy(&model, h)?)
                } else {
                    None
                },
                Some(eval::conditional_perplexity(&model, h)?),
            ),
            _ => (None, None),
        };
        history.push(EpochMetrics {
            epoch,
            l_g: sum_g / n,
            l_d: sum_d / n,
            l_gd: sum_gd / n,
            heldout_accuracy,
            heldout_perplexity,
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::{s1, uniform};
    use crate::model::InitScheme;
    use crate::synth::{sample_corpus, SourceSpec};
    use crate::vocab::Vocab;
    use approx::assert_abs_diff_eq;

    const A: TokenId = 0;
    const B: TokenId = 1;

    fn one(tokens: &[TokenId], class: usize) -> TrainingBatch {
        TrainingBatch::new(vec![TrainingExample::standard(tokens.to_vec(), class)])
    }

    fn s1_alpha2() -> TabularCCLM {
        let mut m = s1();
        m.set_alpha(2.0).unwrap();
        m
    }

    #[test]
    fn generative_loss_examples() {
        let m = s1();
        assert_abs_diff_eq!(generative_loss(&m, &one(&[A, A], 0)).unwrap(), 0.22314, epsilon = 1e-5);
        let u = uniform(2, 0);
        assert_abs_diff_eq!(
            generative_loss(&u, &one(&[A, B, B, A, A], 1)).unwrap(),
            2f64.ln(),
            epsilon = 1e-12
        );
        let two = TrainingBatch::new(vec![
            TrainingExample::standard(vec![A, A], 0),
            TrainingExample::standard(vec![B, B], 1),
        ]);
        assert_abs_diff_eq!(generative_loss(&m, &two).unwrap(), 0.22314, epsilon = 1e-5);
        assert!(matches!(
            generative_loss(&m, &TrainingBatch::default()),
            Err(GediError::EmptyInput(_))
        ));
    }

    #[test]
    fn offline_posterior_examples() {
        let m = s1_alpha2();
        let p = class_posterior_offline(&m, &[A, A]).unwrap();
        assert_abs_diff_eq!(p[0], 0.941176, epsilon = 1e-6);
        assert_abs_diff_eq!(p[1], 0.058824, epsilon = 1e-6);
        let p = class_posterior_offline(&m, &[A, B]).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
        let u = uniform(3, 1);
        let p = class_posterior_offline(&u, &[2, 1, 0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn discriminative_and_hybrid_examples() {
        let m = s1_alpha2();
        let b = one(&[A, A], 0);
        assert_abs_diff_eq!(discriminative_loss(&m, &b).unwrap(), 0.06062, epsilon = 1e-5);
        assert_abs_diff_eq!(
            discriminative_loss(&m, &one(&[A, B], 0)).unwrap(),
            2f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            discriminative_loss(&uniform(2, 0), &b).unwrap(),
            2f64.ln(),
            epsilon = 1e-12
        );

        let h = hybrid_loss(&m, &b, 0.5).unwrap();
        assert_abs_diff_eq!(h.total, 0.14188, epsilon = 1e-5);
        assert_eq!(hybrid_loss(&m, &b, 1.0).unwrap().total, h.generative);
        assert_eq!(hybrid_loss(&m, &b, 0.0).unwrap().total, h.discriminative);
        assert!(matches!(hybrid_loss(&m, &b, 1.5), Err(GediError::InvalidConfig(_))));
    }

    #[test]
    fn gradient_loss_matches_forward_loss() {
        let m = s1_alpha2();
        let b = one(&[A, B, A], 1);
        let h = hybrid_loss(&m, &b, 0.3).unwrap();
        let g = loss_gradients(&m, &b, 0.3).unwrap();
        assert_abs_diff_eq!(g.loss.total, h.total, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_batch_has_zero_bias_gradient() {
        let m = uniform(2, 0);
        let b = TrainingBatch::new(vec![
            TrainingExample::standard(vec![A, A, B], 0),
            TrainingExample::standard(vec![B, B, A], 1),
        ]);
        let g = loss_gradients(&m, &b, 0.4).unwrap();
        assert_abs_diff_eq!(g.biases[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.biases[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn alpha_gradient_vanishes_at_lambda_one() {
        let m = s1_alpha2();
        let g = loss_gradients(&m, &one(&[A, B, B], 0), 1.0).unwrap();
        assert_eq!(g.log_alpha, 0.0);
        assert!(g.biases.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn binarize_examples() {
        let text = [A, B];
        assert!(matches!(
            binarize_with(&text, 0, 1, Pairing::True),
            Err(GediError::NoFalseClass)
        ));
        let t = binarize_with(&text, 2, 4, Pairing::True).unwrap();
        assert!(t.label);
        assert_eq!(t.name, 2);
        assert_eq!(t.code(), ControlCodeSet::TRUE);
        let f = binarize_with(&text, 0, 2, Pairing::False(0)).unwrap();
        assert!(!f.label);
        assert_eq!(f.name, 1);
        let f = binarize_with(&text, 1, 3, Pairing::False(1)).unwrap();
        assert_eq!(f.name, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            binarize_example(&text, 0, 1, &mut rng),
            Err(GediError::NoFalseClass)
        ));
    }

    #[test]
    fn binarization_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 20_000;
        let mut trues = 0usize;
        for i in 0..n {
            let ex = binarize_example(&[A], i % 4, 4, &mut rng).unwrap();
            if ex.label {
                trues += 1;
            } else {
                assert_ne!(ex.name, i % 4);
            }
        }
        // 99% two-sided binomial bound: 2.576 σ
        let sigma = (n as f64 * 0.25).sqrt();
        assert!(
            (trues as f64 - n as f64 / 2.0).abs() <= 2.576 * sigma,
            "trues = {trues}"
        );
    }

    #[test]
    fn zero_epochs_leave_the_model_untouched() {
        let corpus = sample_corpus(&SourceSpec::s1(), 20, 3).unwrap();
        let m = TabularCCLM::new(
            corpus.vocab.clone(),
            ControlCodeSet::new(&corpus.classes).unwrap(),
            0,
            InitScheme::Noise { sigma: 0.1 },
            1,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (trained, history) = train(&m, &corpus, None, &cfg).unwrap();
        assert!(history.is_empty());
        assert_eq!(trained, m);
        assert!(trained
            .logits()
            .iter()
            .zip(m.logits())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn generative_training_recovers_s1_frequencies() {
        let corpus = sample_corpus(&SourceSpec::s1(), 2000, 3).unwrap();
        let m = TabularCCLM::new(
            corpus.vocab.clone(),
            ControlCodeSet::new(&corpus.classes).unwrap(),
            0,
            InitScheme::Zeros,
            0,
        )
        .unwrap();
        // 2000 records / 100 per batch × 10 epochs = 200 steps
        let cfg = TrainConfig {
            lambda: 1.0,
            epochs: 10,
            batch_size: 100,
            seed: 3,
            ..TrainConfig::default()
        };
        let (trained, history) = train(&m, &corpus, None, &cfg).unwrap();
        assert_eq!(history.len(), 10);
        let p_a = trained.next_token_logprobs(&trained.init_state(0).unwrap())[A].exp();

        let (mut a, mut total) = (0usize, 0usize);
        for r in corpus.records.iter().filter(|r| r.class == 0) {
            a += r.tokens.iter().filter(|&&t| t == A).count();
            total += r.tokens.len();
        }
        let empirical = a as f64 / total as f64;
        assert!((p_a - 0.8).abs() <= 0.05, "P(A|c0) = {p_a}");
        assert!(
            (p_a - empirical).abs() <= 0.05,
            "P(A|c0) = {p_a}, counts give {empirical}"
        );
        assert_eq!(trained.alpha(), 1.0);
    }

    #[test]
    fn training_rejects_mismatched_inputs() {
        let corpus = sample_corpus(&SourceSpec::s1(), 10, 3).unwrap();
        let other = TabularCCLM::new(
            Vocab::new(&["A", "B", "C"]).unwrap(),
            ControlCodeSet::new(&["c0", "c1"]).unwrap(),
            0,
            InitScheme::Zeros,
            0,
        )
        .unwrap();
        assert!(matches!(
            train(&other, &corpus, None, &TrainConfig::default()),
            Err(GediError::VocabMismatch(_))
        ));
        let m = s1();
        let cfg = TrainConfig {
            binarized: true,
            ..TrainConfig::default()
        };
        assert!(train(&m, &corpus, None, &cfg).is_err());
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(&m, &corpus, None, &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let corpus = sample_corpus(&SourceSpec::s1(), 40, 3).unwrap();
        let m = s1();
        let cfg = TrainConfig {
            lambda: 0.0,
            learning_rate: 1e300,
            optimizer: Optimizer::Sgd,
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&m, &corpus, None, &cfg),
            Err(GediError::Divergence { .. })
        ));
    }
}
