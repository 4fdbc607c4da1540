//! Synthetic class-labelled corpora drawn from known Markov sources, the
//! half-split protocol, and corpus files.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GediError, Result};
use crate::model::TabularCCLM;
use crate::numeric::{log_sum_exp, softmax};
use crate::vocab::{check_symbol, ControlCodeSet, TokenId, Vocab};

pub const SOURCE_FORMAT: &str = "gedi-source";
pub const SOURCE_VERSION: u32 = 1;
pub const CORPUS_MAGIC: &str = "#gedi-corpus";
pub const CORPUS_VERSION: &str = "1";
/// Share of a corpus held out for validation by [`half_split`].
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthSpec {
    pub min: usize,
    pub max: usize,
    /// Per-token stop probability once `min` is reached; `None` means
    /// lengths are uniform on `[min, max]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<f64>,
}

/// A known probabilistic source: one order-k Markov chain per class.
///
/// `probs[c]` is row-major over (context, token) with the same context
/// indexing as [`TabularCCLM`]: the last `order` tokens, BOS-padded, read as
/// base-`(|V|+1)` digits with the newest token least significant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub vocab: Vec<String>,
    pub classes: Vec<String>,
    pub order: usize,
    pub length: LengthSpec,
    pub probs: Vec<Vec<f64>>,
}

impl SourceSpec {
    /// Two classes over {A, B}, order 0, P(A | c0) = 0.8, P(A | c1) = 0.2,
    /// lengths uniform on [8, 16].
    pub fn s1() -> Self {
        Self {
            format: SOURCE_FORMAT.into(),
            version: SOURCE_VERSION,
            name: "s1".into(),
            seed: 0,
            vocab: vec!["A".into(), "B".into()],
            classes: vec!["c0".into(), "c1".into()],
            order: 0,
            length: LengthSpec {
                min: 8,
                max: 16,
                stop: None,
            },
            probs: vec![vec![0.8, 0.2], vec![0.2, 0.8]],
        }
    }

    /// Four classes over eight tokens, order 1, with parameters drawn from `seed`.
    ///
    /// Every row is `softmax(shared + class_shift)`: a context-dependent
    /// component common to all classes plus a smaller class-specific one.
    pub fn s2(seed: u64) -> Self {
        const VOCAB: usize = 8;
        const CLASSES: usize = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0002);
        let shared_scale = Normal::new(0.0, 1.5).expect("valid normal");
        let class_scale = Normal::new(0.0, 0.7).expect("valid normal");
        let contexts = VOCAB + 1;
        let shared: Vec<f64> = (0..contexts * VOCAB).map(|_| shared_scale.sample(&mut rng)).collect();
        let probs = (0..CLASSES)
            .map(|_| {
                let mut row_logits: Vec<f64> = shared.iter().map(|s| s + class_scale.sample(&mut rng)).collect();
                let mut out = Vec::with_capacity(row_logits.len());
                for row in row_logits.chunks_mut(VOCAB) {
                    out.extend(softmax(row));
                }
                out
            })
            .collect();
        Self {
            format: SOURCE_FORMAT.into(),
            version: SOURCE_VERSION,
            name: "s2".into(),
            seed,
            vocab: (0..VOCAB).map(|i| ((b'A' + i as u8) as char).to_string()).collect(),
            classes: (0..CLASSES).map(|c| format!("c{c}")).collect(),
            order: 1,
            length: LengthSpec {
                min: 6,
                max: 18,
                stop: Some(0.12),
            },
            probs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GediError::InvalidConfig(m));
        if self.format != SOURCE_FORMAT || self.version != SOURCE_VERSION {
            return Err(GediError::Version {
                found: format!("{}/{}", self.format, self.version),
                expected: format!("{SOURCE_FORMAT}/{SOURCE_VERSION}"),
            });
        }
        Vocab::new(&self.vocab)?;
        if self.classes.len() < 2 {
            return bad("a source needs at least two classes".into());
        }
        for c in &self.classes {
            check_symbol(c)?;
        }
        if self.length.min == 0 || self.length.max < self.length.min {
            return bad(format!(
                "length range [{}, {}] is invalid",
                self.length.min, self.length.max
            ));
        }
        if let Some(s) = self.length.stop {
            if !(s > 0.0 && s <= 1.0) {
                return bad(format!("stop probability {s} outside (0, 1]"));
            }
        }
        let v = self.vocab.len();
        let cells = (v + 1).pow(self.order as u32) * v;
        if self.probs.len() != self.classes.len() {
            return bad("one distribution table per class is required".into());
        }
        for (c, table) in self.probs.iter().enumerate() {
            if table.len() != cells {
                return bad(format!("class {c}: expected {cells} probabilities"));
            }
            for (r, row) in table.chunks(v).enumerate() {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|p| p.is_nan() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return bad(format!("class {c} row {r} is not a distribution (sum {sum})"));
                }
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(&self.vocab)
    }

    /// Exact model of this source.
    pub fn to_model(&self) -> Result<TabularCCLM> {
        let codes = ControlCodeSet::new(&self.classes)?;
        let flat: Vec<f64> = self.probs.iter().flatten().copied().collect();
        TabularCCLM::from_probabilities(self.vocab()?, codes, self.order, &flat)
    }

    /// Short content hash identifying this parameter set.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("source spec serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text =
            toml::to_string(self).map_err(|e| GediError::InvalidConfig(format!("cannot serialize source: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0);
            GediError::parse(line, e.message().to_string())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    fn context_index(&self, context: &[TokenId]) -> usize {
        let base = self.vocab.len() + 1;
        context.iter().fold(0, |acc, &t| acc * base + t)
    }

    fn sample_length(&self, rng: &mut impl Rng) -> usize {
        let LengthSpec { min, max, stop } = self.length;
        match stop {
            None => rng.gen_range(min..=max),
            Some(stop) => {
                let mut len = min;
                while len < max && rng.gen::<f64>() >= stop {
                    len += 1;
                }
                len
            }
        }
    }

    fn sample_sequence(&self, class: usize, len: usize, rng: &mut impl Rng) -> Vec<TokenId> {
        let v = self.vocab.len();
        let mut context = vec![v; self.order];
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let off = self.context_index(&context) * v;
            let row = &self.probs[class][off..off + v];
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut tok = v - 1;
            for (i, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    tok = i;
                    break;
                }
            }
            if !context.is_empty() {
                context.remove(0);
                context.push(tok);
            }
            out.push(tok);
        }
        out
    }

    /// `log P(tokens | class)` under the true source parameters.
    pub fn sequence_logprob(&self, class: usize, tokens: &[TokenId]) -> Result<f64> {
        let v = self.vocab.len();
        let mut context = vec![v; self.order];
        let mut total = 0.0;
        for &tok in tokens {
            if tok >= v {
                return Err(GediError::TokenOutOfRange { token: tok, vocab: v });
            }
            let off = self.context_index(&context) * v;
            total += self.probs[class][off + tok].ln();
            if !context.is_empty() {
                context.remove(0);
                context.push(tok);
            }
        }
        Ok(total)
    }
}

/// Exact Bayes class posterior under the source, uniform class prior.
pub fn oracle_posterior(spec: &SourceSpec, tokens: &[TokenId]) -> Result<Vec<f64>> {
    let ll = (0..spec.classes.len())
        .map(|c| spec.sequence_logprob(c, tokens))
        .collect::<Result<Vec<_>>>()?;
    if log_sum_exp(&ll) == f64::NEG_INFINITY {
        return Err(GediError::DegenerateDistribution(
            "sequence has zero probability under every class".into(),
        ));
    }
    Ok(softmax(&ll))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    A,
    B,
    Validation,
    Unsplit,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::A => "A",
            Split::B => "B",
            Split::Validation => "val",
            Split::Unsplit => "-",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = GediError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Split::A),
            "B" => Ok(Split::B),
            "val" => Ok(Split::Validation),
            "-" => Ok(Split::Unsplit),
            other => Err(GediError::InvalidConfig(format!("unknown split tag `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub tokens: Vec<TokenId>,
    pub class: usize,
    pub split: Split,
}

/// Where a corpus came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub source_hash: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    pub vocab: Vocab,
    pub classes: Vec<String>,
    pub records: Vec<Record>,
    pub provenance: Provenance,
}

impl LabeledCorpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records carrying the given split tag.
    pub fn split(&self, split: Split) -> LabeledCorpus {
        LabeledCorpus {
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
            ..self.clone_header()
        }
    }

    /// Same sequences with every label collapsed onto one unconditional class.
    pub fn unlabeled(&self) -> LabeledCorpus {
        LabeledCorpus {
            vocab: self.vocab.clone(),
            classes: vec![ControlCodeSet::unconditional().codes()[0].name.clone()],
            records: self.records.iter().map(|r| Record { class: 0, ..r.clone() }).collect(),
            provenance: self.provenance.clone(),
        }
    }

    fn clone_header(&self) -> LabeledCorpus {
        LabeledCorpus {
            vocab: self.vocab.clone(),
            classes: self.classes.clone(),
            records: Vec::new(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            counts[r.class] += 1;
        }
        counts
    }

    pub fn class_id(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| GediError::UnknownClass(name.to_string()))
    }
}

/// Draws `n` sequences with uniformly chosen classes.
///
/// Sequence `i` uses its own ChaCha stream `i` under `seed`, so output does
/// not depend on how sampling is scheduled.
pub fn sample_corpus(spec: &SourceSpec, n: usize, seed: u64) -> Result<LabeledCorpus> {
    spec.validate()?;
    if n == 0 {
        return Err(GediError::EmptyInput("sample size must be at least 1"));
    }
    let records = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let class = rng.gen_range(0..spec.classes.len());
            let len = spec.sample_length(&mut rng);
            Record {
                tokens: spec.sample_sequence(class, len, &mut rng),
                class,
                split: Split::Unsplit,
            }
        })
        .collect();
    Ok(LabeledCorpus {
        vocab: spec.vocab()?,
        classes: spec.classes.clone(),
        records,
        provenance: Provenance {
            source_hash: Some(spec.hash()),
            seed: Some(seed),
        },
    })
}

/// Tags every record A, B or validation with a class-stratified shuffle.
///
/// Validation takes `max(1, round(n / 10))` records, apportioned across
/// classes by largest remainder; the rest alternate A, B in class order so
/// the halves differ by at most one record overall and per class.
pub fn assign_splits(corpus: &LabeledCorpus, seed: u64) -> Result<LabeledCorpus> {
    let n = corpus.len();
    if n < 3 {
        return Err(GediError::CorpusTooSmall { n, min: 3 });
    }
    let n_val = ((n as f64 * VALIDATION_FRACTION).round() as usize).max(1);
    let counts = corpus.class_counts();

    let exact: Vec<f64> = counts.iter().map(|&c| n_val as f64 * c as f64 / n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut by_remainder: Vec<usize> = (0..counts.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut missing = n_val - quota.iter().sum::<usize>();
    for &c in by_remainder.iter().cycle() {
        if missing == 0 {
            break;
        }
        if quota[c] < counts[c] {
            quota[c] += 1;
            missing -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = corpus.clone();
    let mut alternate = false;
    for (class, &q) in quota.iter().enumerate() {
        let mut members: Vec<usize> = (0..n).filter(|&i| corpus.records[i].class == class).collect();
        shuffle(&mut members, &mut rng);
        for (k, &i) in members.iter().enumerate() {
            out.records[i].split = if k < q {
                Split::Validation
            } else {
                alternate = !alternate;
                if alternate {
                    Split::A
                } else {
                    Split::B
                }
            };
        }
    }
    Ok(out)
}

/// Class-stratified split into (A, B, validation).
pub fn half_split(corpus: &LabeledCorpus, seed: u64) -> Result<(LabeledCorpus, LabeledCorpus, LabeledCorpus)> {
    let tagged = assign_splits(corpus, seed)?;
    Ok((
        tagged.split(Split::A),
        tagged.split(Split::B),
        tagged.split(Split::Validation),
    ))
}

fn shuffle(xs: &mut [usize], rng: &mut impl Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

/// Writes the line-delimited corpus format:
///
/// ```text
/// #gedi-corpus 1
/// #vocab A B
/// #classes c0 c1
/// #source 1f2e3d4c5b6a7980 seed 3
/// #records 2
/// A c0 A A B A A A A B
/// val c1 B B A B B B B B B
/// ```
///
/// Each record line is `<split> <class> <token>...`, with split one of
/// `A`, `B`, `val` or `-` (unsplit).
pub fn write_corpus<W: Write>(corpus: &LabeledCorpus, mut out: W) -> Result<()> {
    writeln!(out, "{CORPUS_MAGIC} {CORPUS_VERSION}")?;
    writeln!(out, "#vocab {}", corpus.vocab.names().join(" "))?;
    writeln!(out, "#classes {}", corpus.classes.join(" "))?;
    let hash = corpus.provenance.source_hash.as_deref().unwrap_or("-");
    let seed = corpus
        .provenance
        .seed
        .map_or_else(|| "-".to_string(), |s| s.to_string());
    writeln!(out, "#source {hash} seed {seed}")?;
    writeln!(out, "#records {}", corpus.len())?;
    for r in &corpus.records {
        write!(out, "{} {}", r.split, corpus.classes[r.class])?;
        for &t in &r.tokens {
            write!(out, " {}", corpus.vocab.name(t))?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_corpus(corpus: &LabeledCorpus, path: impl AsRef<Path>) -> Result<()> {
    write_corpus(corpus, BufWriter::new(File::create(path)?))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<LabeledCorpus> {
    read_corpus(BufReader::new(File::open(path)?))
}

pub fn read_corpus<R: BufRead>(input: R) -> Result<LabeledCorpus> {
    let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut header = |key: &str| -> Result<(usize, Vec<String>)> {
        let (no, line) = lines
            .next()
            .ok_or_else(|| GediError::parse(0, format!("missing `{key}` header")))?;
        let line = line?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some(k) if k == key => Ok((no, parts.map(str::to_string).collect())),
            _ => Err(GediError::parse(no, format!("expected `{key}` header"))),
        }
    };
    let (_, version) = header(CORPUS_MAGIC)?;
    if version != [CORPUS_VERSION] {
        return Err(GediError::Version {
            found: version.join(" "),
            expected: CORPUS_VERSION.into(),
        });
    }
    let (vl, vocab) = header("#vocab")?;
    let vocab = Vocab::new(&vocab).map_err(|e| GediError::parse(vl, e.to_string()))?;
    let (cl, classes) = header("#classes")?;
    if classes.is_empty() {
        return Err(GediError::parse(cl, "no classes declared"));
    }
    let (sl, source) = header("#source")?;
    let provenance = match source.as_slice() {
        [hash, kw, seed] if kw == "seed" => Provenance {
            source_hash: (hash != "-").then(|| hash.clone()),
            seed: if seed == "-" {
                None
            } else {
                Some(
                    seed.parse()
                        .map_err(|_| GediError::parse(sl, format!("bad seed `{seed}`")))?,
                )
            },
        },
        _ => return Err(GediError::parse(sl, "expected `#source <hash> seed <seed>`")),
    };
    let (rl, count) = header("#records")?;
    let expected: usize = match count.as_slice() {
        [n] => n
            .parse()
            .map_err(|_| GediError::parse(rl, format!("bad record count `{n}`")))?,
        _ => return Err(GediError::parse(rl, "expected `#records <count>`")),
    };

    let mut records = Vec::with_capacity(expected);
    let mut last_line = rl;
    for (no, line) in lines {
        let line = line?;
        last_line = no;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let split: Split = parts
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|e: GediError| GediError::parse(no, e.to_string()))?;
        let class_name = parts
            .next()
            .ok_or_else(|| GediError::parse(no, "record is missing its class"))?;
        let class = classes
            .iter()
            .position(|c| c == class_name)
            .ok_or_else(|| GediError::parse(no, format!("unknown class `{class_name}`")))?;
        let tokens = parts
            .map(|t| vocab.id(t))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| GediError::parse(no, e.to_string()))?;
        if tokens.is_empty() {
            return Err(GediError::parse(no, "record has no tokens"));
        }
        records.push(Record { tokens, class, split });
    }
    if records.len() != expected {
        return Err(GediError::parse(
            last_line,
            format!(
                "file truncated or padded: header declares {expected} records, found {}",
                records.len()
            ),
        ));
    }
    Ok(LabeledCorpus {
        vocab,
        classes,
        records,
        provenance,
    })
}
