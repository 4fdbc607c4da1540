//! Label fidelity, classification accuracy, conditional perplexity, decoding
//! cost, and λ sweeps.

use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::decode::{direct_generate, GenerationConfig, StepTrace};
use crate::error::{GediError, Result};
use crate::model::{InitScheme, TabularCCLM};
use crate::numeric::argmax;
use crate::synth::{half_split, oracle_posterior, LabeledCorpus, SourceSpec, Split};
use crate::train::{binarized_posterior, class_posterior_offline, train, TrainConfig};
use crate::vocab::{ControlCodeSet, TokenId};

pub const REPORT_MAGIC: &str = "#gedi-report";
pub const REPORT_VERSION: &str = "1";

/// Something that maps a sequence to a class posterior.
#[derive(Debug, Clone, Copy)]
pub enum Classifier<'a> {
    /// A trained CC-LM applied through Bayes rule.
    Model(&'a TabularCCLM),
    /// The exact source the data came from.
    Oracle(&'a SourceSpec),
}

impl Classifier<'_> {
    pub fn identity(&self) -> String {
        match self {
            Classifier::Model(m) if m.codes().is_binarized() => "cclm-binarized".into(),
            Classifier::Model(_) => "cclm".into(),
            Classifier::Oracle(s) => format!("oracle:{}:{}", s.name, s.hash()),
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            Classifier::Model(m) => m.codes().class_count(),
            Classifier::Oracle(s) => s.classes.len(),
        }
    }

    pub fn classify(&self, tokens: &[TokenId]) -> Result<Classification> {
        match self {
            Classifier::Model(m) => classify(m, tokens),
            Classifier::Oracle(s) => {
                let posterior = oracle_posterior(s, tokens)?;
                Ok(Classification {
                    class: argmax(&posterior),
                    posterior,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub class: usize,
    pub posterior: Vec<f64>,
}

/// Bayes-rule classification with ties broken toward the lowest class id.
///
/// A binarized model scores each class name k by `P(true | k, x)`; the
/// returned posterior is those scores normalized to sum to one.
pub fn classify(model: &TabularCCLM, tokens: &[TokenId]) -> Result<Classification> {
    let codes = model.codes();
    let posterior = if codes.is_binarized() {
        let scores = (0..codes.class_names().len())
            .map(|k| Ok(binarized_posterior(model, k, tokens)?[0]))
            .collect::<Result<Vec<_>>>()?;
        let total: f64 = scores.iter().sum();
        scores.into_iter().map(|s| s / total).collect()
    } else if codes.len() == 1 {
        return Err(GediError::InvalidConfig(
            "an unconditional model cannot classify".into(),
        ));
    } else {
        class_posterior_offline(model, tokens)?
    };
    Ok(Classification {
        class: argmax(&posterior),
        posterior,
    })
}

/// Fraction of `corpus` records whose predicted class is their label.
pub fn classification_accuracy(model: &TabularCCLM, corpus: &LabeledCorpus) -> Result<f64> {
    accuracy_with(Classifier::Model(model), corpus)
}

pub fn accuracy_with(classifier: Classifier<'_>, corpus: &LabeledCorpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(GediError::EmptyInput("cannot measure accuracy on an empty corpus"));
    }
    let mut correct = 0usize;
    for r in &corpus.records {
        if classifier.classify(&r.tokens)?.class == r.class {
            correct += 1;
        }
    }
    Ok(correct as f64 / corpus.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFidelity {
    pub class: usize,
    pub samples: usize,
    pub matched: usize,
    /// `None` when the class had no generations.
    pub fidelity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub per_class: Vec<ClassFidelity>,
    pub overall: f64,
    pub samples: usize,
    pub classifier: String,
}

/// Share of `(control class, tokens)` generations the classifier assigns to
/// their control class.
pub fn label_fidelity(generations: &[(usize, Vec<TokenId>)], classifier: Classifier<'_>) -> Result<FidelityReport> {
    if generations.is_empty() {
        return Err(GediError::EmptyInput("no generations to score"));
    }
    let classes = classifier.class_count();
    let mut samples = vec![0usize; classes];
    let mut matched = vec![0usize; classes];
    for (class, tokens) in generations {
        if *class >= classes {
            return Err(GediError::ClassOutOfRange { class: *class, classes });
        }
        samples[*class] += 1;
        if classifier.classify(tokens)?.class == *class {
            matched[*class] += 1;
        }
    }
    let per_class = (0..classes)
        .map(|c| ClassFidelity {
            class: c,
            samples: samples[c],
            matched: matched[c],
            fidelity: (samples[c] > 0).then(|| matched[c] as f64 / samples[c] as f64),
        })
        .collect();
    Ok(FidelityReport {
        per_class,
        overall: matched.iter().sum::<usize>() as f64 / generations.len() as f64,
        samples: generations.len(),
        classifier: classifier.identity(),
    })
}

/// `exp` of the token-weighted mean negative log-likelihood of `corpus`
/// under its true labels. Binarized models condition on `true` plus the
/// label's class name; unconditional models ignore labels.
pub fn conditional_perplexity(model: &TabularCCLM, corpus: &LabeledCorpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(GediError::EmptyInput("cannot measure perplexity on an empty corpus"));
    }
    let codes = model.codes();
    let (mut nll, mut tokens) = (0.0, 0usize);
    for r in &corpus.records {
        let lp = if codes.is_binarized() {
            model.sequence_logprob_binarized(ControlCodeSet::TRUE, r.class, &r.tokens)?
        } else if codes.len() == 1 {
            model.sequence_logprob(0, &r.tokens)?
        } else {
            model.sequence_logprob(r.class, &r.tokens)?
        };
        nll -= lp;
        tokens += r.tokens.len();
    }
    if tokens == 0 {
        return Err(GediError::EmptyInput("corpus has no tokens"));
    }
    Ok((nll / tokens as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub tokens: usize,
    pub base_passes: usize,
    pub guide_passes: usize,
    pub contrast_size: usize,
    pub prompt_base_passes: usize,
    pub prompt_guide_passes: usize,
    /// Left out of deterministic reports.
    #[serde(skip)]
    pub wall_time_per_token: Option<Duration>,
}

impl CostReport {
    pub fn guide_passes_per_token(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.guide_passes as f64 / self.tokens as f64
        }
    }

    pub fn with_wall_time(mut self, elapsed: Duration) -> Self {
        if self.tokens > 0 {
            self.wall_time_per_token = Some(elapsed / self.tokens as u32);
        }
        self
    }

    /// Adds another run's counts; both runs must share a contrast size.
    pub fn merge(&mut self, other: &CostReport) -> Result<()> {
        if self.tokens > 0 && other.tokens > 0 && self.contrast_size != other.contrast_size {
            return Err(GediError::InvariantViolation(format!(
                "cannot merge runs with contrast sizes {} and {}",
                self.contrast_size, other.contrast_size
            )));
        }
        if self.tokens == 0 {
            self.contrast_size = other.contrast_size;
        }
        self.tokens += other.tokens;
        self.base_passes += other.base_passes;
        self.guide_passes += other.guide_passes;
        self.prompt_base_passes += other.prompt_base_passes;
        self.prompt_guide_passes += other.prompt_guide_passes;
        Ok(())
    }
}

/// Totals the forward passes of one run and checks that each step cost one
/// base pass and exactly one guide pass per contrasted class.
pub fn audit_cost(traces: &[StepTrace]) -> Result<CostReport> {
    let contrast_size = traces.first().map_or(0, |t| t.contrast_size);
    let mut report = CostReport {
        tokens: traces.len(),
        base_passes: 0,
        guide_passes: 0,
        contrast_size,
        prompt_base_passes: 0,
        prompt_guide_passes: 0,
        wall_time_per_token: None,
    };
    for (i, t) in traces.iter().enumerate() {
        if t.contrast_size != contrast_size {
            return Err(GediError::InvariantViolation(format!(
                "step {i}: contrast size {} differs from {contrast_size}",
                t.contrast_size
            )));
        }
        if t.guide_passes != contrast_size {
            return Err(GediError::InvariantViolation(format!(
                "step {i}: {} guide passes for a contrast set of {contrast_size}",
                t.guide_passes
            )));
        }
        if t.base_passes != 1 {
            return Err(GediError::InvariantViolation(format!(
                "step {i}: {} base passes (expected 1)",
                t.base_passes
            )));
        }
        report.base_passes += t.base_passes;
        report.guide_passes += t.guide_passes;
    }
    Ok(report)
}

/// Settings of a λ sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// λ is overridden per row.
    pub train: TrainConfig,
    pub order: usize,
    pub init: InitScheme,
    /// λ of the split-B classifier.
    pub classifier_lambda: f64,
    pub generation: GenerationConfig,
    pub generations_per_class: usize,
    /// Prompts are the first `prompt_len` tokens of validation records;
    /// only continuations are classified.
    pub prompt_len: usize,
    pub split_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            order: 1,
            init: InitScheme::Zeros,
            classifier_lambda: 0.5,
            generation: GenerationConfig::default(),
            generations_per_class: 20,
            prompt_len: 2,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub accuracy: f64,
    pub fidelity: f64,
    pub perplexity: f64,
}

/// Fresh model matching a corpus's vocabulary and classes.
pub fn fresh_model(
    corpus: &LabeledCorpus,
    order: usize,
    binarized: bool,
    init: InitScheme,
    seed: u64,
) -> Result<TabularCCLM> {
    let codes = if binarized {
        ControlCodeSet::binarized(&corpus.classes)?
    } else {
        ControlCodeSet::new(&corpus.classes)?
    };
    TabularCCLM::new(corpus.vocab.clone(), codes, order, init, seed)
}

/// Splits `corpus` into (A, B, validation): existing split tags are used
/// when every record carries one, otherwise a fresh stratified split.
pub fn sweep_splits(corpus: &LabeledCorpus, seed: u64) -> Result<(LabeledCorpus, LabeledCorpus, LabeledCorpus)> {
    if corpus.records.iter().all(|r| r.split != Split::Unsplit) {
        let parts = (
            corpus.split(Split::A),
            corpus.split(Split::B),
            corpus.split(Split::Validation),
        );
        if !parts.0.is_empty() && !parts.1.is_empty() && !parts.2.is_empty() {
            return Ok(parts);
        }
    }
    half_split(corpus, seed)
}

/// Trains one model per λ on split A. Accuracy and perplexity are measured
/// on validation; label fidelity of direct generations is judged by a
/// classifier trained on split B.
pub fn lambda_sweep(corpus: &LabeledCorpus, lambdas: &[f64], config: &SweepConfig) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(GediError::EmptyInput("no lambda values to sweep"));
    }
    for &l in lambdas {
        if !(0.0..=1.0).contains(&l) {
            return Err(GediError::InvalidConfig(format!("lambda must lie in [0, 1], got {l}")));
        }
    }
    let (split_a, split_b, validation) = sweep_splits(corpus, config.split_seed)?;
    let binarized = config.train.binarized;

    let classifier_init = fresh_model(corpus, config.order, binarized, config.init, config.train.seed)?;
    let classifier_cfg = TrainConfig {
        lambda: config.classifier_lambda,
        ..config.train.clone()
    };
    let (classifier, _) = train(&classifier_init, &split_b, None, &classifier_cfg)?;

    let prompts: Vec<Vec<TokenId>> = validation
        .records
        .iter()
        .take(config.generations_per_class)
        .map(|r| r.tokens[..config.prompt_len.min(r.tokens.len())].to_vec())
        .collect();

    let init = fresh_model(corpus, config.order, binarized, config.init, config.train.seed)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let cfg = TrainConfig {
            lambda,
            ..config.train.clone()
        };
        let (model, _) = train(&init, &split_a, None, &cfg)?;
        let accuracy = classification_accuracy(&model, &validation)?;
        let perplexity = conditional_perplexity(&model, &validation)?;
        let mut generations = Vec::new();
        for class in 0..corpus.classes.len() {
            for prompt in &prompts {
                let tokens = direct_generate(&model, class, prompt, &config.generation)?;
                generations.push((class, tokens));
            }
        }
        let fidelity = if generations.is_empty() {
            f64::NAN
        } else {
            label_fidelity(&generations, Classifier::Model(&classifier))?.overall
        };
        rows.push(SweepRow {
            lambda,
            accuracy,
            fidelity,
            perplexity,
        });
    }
    Ok(rows)
}

/// A named group of `key value` lines in a report file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricBlock {
    pub name: String,
    pub fields: Vec<(String, String)>,
}

impl MetricBlock {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            fields: Vec::new(),
        }
    }

    pub fn field(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn fidelity(report: &FidelityReport, class_names: &[String]) -> Self {
        let mut block = MetricBlock::new("fidelity")
            .field("classifier", &report.classifier)
            .field("samples", report.samples)
            .field("overall", report.overall);
        for c in &report.per_class {
            let name = class_names.get(c.class).map_or("?", String::as_str);
            let value = c.fidelity.map_or("-".to_string(), |f| f.to_string());
            block = block.field(format!("class.{name}"), format!("{} {} {value}", c.samples, c.matched));
        }
        block
    }

    pub fn cost(report: &CostReport) -> Self {
        MetricBlock::new("cost")
            .field("tokens", report.tokens)
            .field("base-passes", report.base_passes)
            .field("guide-passes", report.guide_passes)
            .field("contrast-size", report.contrast_size)
            .field("guide-passes-per-token", report.guide_passes_per_token())
            .field("prompt-base-passes", report.prompt_base_passes)
            .field("prompt-guide-passes", report.prompt_guide_passes)
    }
}

/// Writes metric blocks:
///
/// ```text
/// #gedi-report 1
/// [fidelity]
/// classifier oracle:s1:0123456789abcdef
/// samples 400
/// overall 0.9975
/// class.c0 200 200 1
/// ```
///
/// A blank line separates blocks. Values never contain newlines.
pub fn write_report<W: Write>(blocks: &[MetricBlock], mut out: W) -> Result<()> {
    writeln!(out, "{REPORT_MAGIC} {REPORT_VERSION}")?;
    for (i, block) in blocks.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        writeln!(out, "[{}]", block.name)?;
        for (k, v) in &block.fields {
            writeln!(out, "{k} {v}")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes the sweep as a tab-separated table with a header row.
pub fn write_sweep_table<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "lambda\taccuracy\tfidelity\tperplexity")?;
    for r in rows {
        writeln!(out, "{}\t{}\t{}\t{}", r.lambda, r.accuracy, r.fidelity, r.perplexity)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::{s1, uniform};
    use crate::synth::{sample_corpus, Provenance, Record};
    use crate::vocab::Vocab;
    use approx::assert_abs_diff_eq;

    const A: TokenId = 0;
    const B: TokenId = 1;

    fn s1_alpha2() -> TabularCCLM {
        let mut m = s1();
        m.set_alpha(2.0).unwrap();
        m
    }

    fn trace(guide: usize, contrast: usize) -> StepTrace {
        StepTrace {
            target_posterior: vec![],
            kept: vec![],
            weighted: vec![],
            chosen: 0,
            guide_passes: guide,
            base_passes: 1,
            contrast_size: contrast,
        }
    }

    fn corpus_of(records: Vec<(Vec<TokenId>, usize)>) -> LabeledCorpus {
        LabeledCorpus {
            vocab: Vocab::new(&["A", "B"]).unwrap(),
            classes: vec!["c0".into(), "c1".into()],
            records: records
                .into_iter()
                .map(|(tokens, class)| Record {
                    tokens,
                    class,
                    split: Split::Unsplit,
                })
                .collect(),
            provenance: Provenance {
                source_hash: None,
                seed: None,
            },
        }
    }

    #[test]
    fn classify_examples() {
        let m = s1_alpha2();
        let c = classify(&m, &[A, A]).unwrap();
        assert_eq!(c.class, 0);
        assert_abs_diff_eq!(c.posterior[0], 0.941176, epsilon = 1e-6);
        let c = classify(&m, &[A, B]).unwrap();
        assert_eq!(c.class, 0);
        assert_abs_diff_eq!(c.posterior[0], 0.5, epsilon = 1e-12);
        let c = classify(&m, &[B, B]).unwrap();
        assert_eq!(c.class, 1);
        assert_abs_diff_eq!(c.posterior[1], 0.941176, epsilon = 1e-6);

        let spec = SourceSpec::s1();
        let c = Classifier::Oracle(&spec).classify(&[B, B]).unwrap();
        assert_eq!(c.class, 1);
    }

    #[test]
    fn fidelity_examples() {
        let spec = SourceSpec::s1();
        let oracle = Classifier::Oracle(&spec);
        let all = vec![(0, vec![A, A]), (0, vec![A]), (1, vec![B]), (1, vec![B, B, A])];
        assert_eq!(label_fidelity(&all, oracle).unwrap().overall, 1.0);
        let three = vec![(0, vec![A, A]), (0, vec![B]), (1, vec![B]), (1, vec![B, B, A])];
        let r = label_fidelity(&three, oracle).unwrap();
        assert_eq!(r.overall, 0.75);
        assert_eq!(r.per_class[0].fidelity, Some(0.5));
        assert_eq!(r.per_class[1].fidelity, Some(1.0));
        assert!(matches!(label_fidelity(&[], oracle), Err(GediError::EmptyInput(_))));
    }

    #[test]
    fn perplexity_examples() {
        let one = corpus_of(vec![(vec![A, A], 0)]);
        assert_abs_diff_eq!(conditional_perplexity(&s1(), &one).unwrap(), 1.25, epsilon = 1e-12);
        let mixed = corpus_of(vec![(vec![A, B, A], 0), (vec![B], 1)]);
        assert_abs_diff_eq!(
            conditional_perplexity(&uniform(2, 1), &mixed).unwrap(),
            2.0,
            epsilon = 1e-12
        );

        let big = sample_corpus(&SourceSpec::s1(), 4000, 11).unwrap();
        let class0 = LabeledCorpus {
            records: big.records.iter().filter(|r| r.class == 0).cloned().collect(),
            ..big.clone()
        };
        let limit = 1.0 / (0.8f64.powf(0.8) * 0.2f64.powf(0.2));
        let ppl = conditional_perplexity(&s1(), &class0).unwrap();
        assert!((ppl - limit).abs() < 0.03, "{ppl} vs {limit}");

        let empty = corpus_of(vec![]);
        assert!(conditional_perplexity(&s1(), &empty).is_err());
    }

    #[test]
    fn audit_examples() {
        let ten: Vec<StepTrace> = (0..10).map(|_| trace(2, 2)).collect();
        let r = audit_cost(&ten).unwrap();
        assert_eq!((r.base_passes, r.guide_passes), (10, 20));
        assert_eq!(r.guide_passes_per_token(), 2.0);

        let bad: Vec<StepTrace> = (0..10).map(|_| trace(3, 2)).collect();
        assert!(matches!(audit_cost(&bad), Err(GediError::InvariantViolation(_))));
        assert_eq!(audit_cost(&[]).unwrap().tokens, 0);
    }

    #[test]
    fn binarized_classification_uses_true_scores() {
        let vocab = Vocab::new(&["A", "B"]).unwrap();
        let codes = ControlCodeSet::binarized(&["x", "y", "z"]).unwrap();
        let mut m = TabularCCLM::new(vocab, codes, 0, InitScheme::Zeros, 0).unwrap();
        // true|y favours B, false|y favours A
        let slots = m.slots();
        let row = |code: usize, name: usize| (code * slots + name) * 2;
        let (ty, fy) = (row(ControlCodeSet::TRUE, 1), row(ControlCodeSet::FALSE, 1));
        m.logits_mut()[ty + 1] = 2.0;
        m.logits_mut()[fy] = 2.0;
        let c = classify(&m, &[B, B]).unwrap();
        assert_eq!(c.class, 1);
        assert_abs_diff_eq!(c.posterior.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn report_format_is_stable() {
        let block = MetricBlock::new("run").field("seed", 3).field("omega", 30.0);
        let mut out = Vec::new();
        write_report(&[block, MetricBlock::new("empty")], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "#gedi-report 1\n[run]\nseed 3\nomega 30\n\n[empty]\n"
        );
        let mut out = Vec::new();
        write_sweep_table(
            &[SweepRow {
                lambda: 0.5,
                accuracy: 0.75,
                fidelity: 1.0,
                perplexity: 1.5,
            }],
            &mut out,
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "lambda\taccuracy\tfidelity\tperplexity\n0.5\t0.75\t1\t1.5\n"
        );
    }

    #[test]
    fn sweep_at_lambda_one_is_generative_baseline() {
        let corpus = sample_corpus(&SourceSpec::s1(), 200, 5).unwrap();
        let cfg = SweepConfig {
            order: 0,
            generations_per_class: 3,
            train: TrainConfig {
                epochs: 2,
                batch_size: 32,
                ..TrainConfig::default()
            },
            ..SweepConfig::default()
        };
        let rows = lambda_sweep(&corpus, &[1.0], &cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows, lambda_sweep(&corpus, &[1.0], &cfg).unwrap());

        let (a, _, val) = sweep_splits(&corpus, cfg.split_seed).unwrap();
        let init = fresh_model(&corpus, 0, false, InitScheme::Zeros, cfg.train.seed).unwrap();
        let (baseline, _) = train(
            &init,
            &a,
            None,
            &TrainConfig {
                lambda: 1.0,
                ..cfg.train.clone()
            },
        )
        .unwrap();
        assert_eq!(rows[0].perplexity, conditional_perplexity(&baseline, &val).unwrap());
        assert!(lambda_sweep(&corpus, &[1.2], &cfg).is_err());
    }
}
