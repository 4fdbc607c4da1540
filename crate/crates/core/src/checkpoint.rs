//! Model checkpoint files.
//!
//! A checkpoint is a UTF-8 key/value preamble, one `key value...` pair per
//! line, terminated by a line containing only `---`, followed by the logit
//! table as little-endian 64-bit floats in row-major
//! (code, class-name slot, context, token) order:
//!
//! ```text
//! gedi-checkpoint 1
//! vocab A B
//! eos -
//! order 0
//! codes c0 c1
//! anti - -
//! biases 0 0
//! class-names -
//! alpha 1
//! log-alpha 0
//! logits 4 f64-le
//! ---
//! <4 * 8 bytes>
//! ```
//!
//! Optional `meta.<key> <value>` lines before `logits` record how the
//! checkpoint was produced; readers ignore them.
//!
//! `-` marks an absent value. `alpha` is informational; `log-alpha` is the
//! stored parameter. Floats in the preamble use Rust's shortest round-trip
//! formatting, so a save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{GediError, Result};
use crate::model::TabularCCLM;
use crate::vocab::{ControlCodeSet, Vocab};

pub const CHECKPOINT_MAGIC: &str = "gedi-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

pub fn write_checkpoint<W: Write>(model: &TabularCCLM, out: W) -> Result<()> {
    write_checkpoint_with_meta(model, &[], out)
}

pub fn write_checkpoint_with_meta<W: Write>(model: &TabularCCLM, meta: &[(String, String)], mut out: W) -> Result<()> {
    let codes = model.codes();
    let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(" ");
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
    writeln!(out, "vocab {}", model.vocab().names().join(" "))?;
    match model.vocab().eos() {
        Some(e) => writeln!(out, "eos {}", model.vocab().name(e))?,
        None => writeln!(out, "eos -")?,
    }
    writeln!(out, "order {}", model.order())?;
    writeln!(out, "codes {}", join(&mut codes.codes().iter().map(|c| c.name.clone())))?;
    writeln!(
        out,
        "anti {}",
        join(&mut codes.codes().iter().map(|c| match c.anti {
            Some(a) => a.to_string(),
            None => "-".into(),
        }))
    )?;
    writeln!(
        out,
        "biases {}",
        join(&mut codes.codes().iter().map(|c| c.bias.to_string()))
    )?;
    if codes.is_binarized() {
        writeln!(out, "class-names {}", codes.class_names().join(" "))?;
    } else {
        writeln!(out, "class-names -")?;
    }
    writeln!(out, "alpha {}", model.alpha())?;
    writeln!(out, "log-alpha {}", model.log_alpha())?;
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(GediError::InvalidConfig(format!("bad checkpoint metadata key `{k}`")));
        }
        writeln!(out, "meta.{k} {v}")?;
    }
    writeln!(out, "logits {} f64-le", model.logits().len())?;
    writeln!(out, "---")?;
    for x in model.logits() {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint(model: &TabularCCLM, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_checkpoint(model, BufWriter::new(file))
}

pub fn save_checkpoint_with_meta(model: &TabularCCLM, meta: &[(String, String)], path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_checkpoint_with_meta(model, meta, BufWriter::new(file))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TabularCCLM> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<TabularCCLM> {
    let mut header: Vec<(usize, String, Vec<String>)> = Vec::new();
    let mut line_no = 0;
    let mut buf = String::new();
    loop {
        buf.clear();
        line_no += 1;
        if input.read_line(&mut buf)? == 0 {
            return Err(GediError::parse(line_no, "unexpected end of header (missing `---`)"));
        }
        let line = buf.trim_end_matches(['\n', '\r']);
        if line == "---" {
            break;
        }
        let mut parts = line.split_whitespace().map(str::to_string);
        let Some(key) = parts.next() else {
            return Err(GediError::parse(line_no, "empty header line"));
        };
        header.push((line_no, key, parts.collect()));
    }

    let first = header.first().ok_or_else(|| GediError::parse(1, "empty checkpoint"))?;
    if first.1 != CHECKPOINT_MAGIC {
        return Err(GediError::parse(1, format!("not a checkpoint (found `{}`)", first.1)));
    }
    let version = first.2.join(" ");
    if version != CHECKPOINT_VERSION {
        return Err(GediError::Version {
            found: version,
            expected: CHECKPOINT_VERSION.into(),
        });
    }

    let field = |key: &str| -> Result<(usize, &[String])> {
        header
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(l, _, v)| (*l, v.as_slice()))
            .ok_or_else(|| GediError::parse(line_no, format!("missing header field `{key}`")))
    };
    let single = |key: &str| -> Result<(usize, &str)> {
        let (l, v) = field(key)?;
        match v {
            [x] => Ok((l, x.as_str())),
            _ => Err(GediError::parse(l, format!("`{key}` expects one value"))),
        }
    };
    let number = |l: usize, s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| GediError::parse(l, format!("bad number `{s}`")))
    };

    let (vl, names) = field("vocab")?;
    let mut vocab = Vocab::new(names).map_err(|e| GediError::parse(vl, e.to_string()))?;
    let (el, eos) = single("eos")?;
    if eos != "-" {
        vocab = vocab.with_eos(eos).map_err(|e| GediError::parse(el, e.to_string()))?;
    }
    let (ol, order) = single("order")?;
    let order: usize = order
        .parse()
        .map_err(|_| GediError::parse(ol, format!("bad order `{order}`")))?;

    let (cl, code_names) = field("codes")?;
    let (nl, class_names) = field("class-names")?;
    let mut codes = if class_names == ["-"] {
        if code_names.len() == 1 {
            ControlCodeSet::unconditional()
        } else {
            ControlCodeSet::new(code_names).map_err(|e| GediError::parse(cl, e.to_string()))?
        }
    } else {
        let set = ControlCodeSet::binarized(class_names).map_err(|e| GediError::parse(nl, e.to_string()))?;
        let expected: Vec<&str> = set.codes().iter().map(|c| c.name.as_str()).collect();
        if code_names != expected.as_slice() {
            return Err(GediError::parse(
                cl,
                "binarized checkpoints must use codes `true false`",
            ));
        }
        set
    };
    if code_names.len() == 1 && codes.codes()[0].name != code_names[0] {
        return Err(GediError::parse(cl, "unknown single-code name"));
    }

    let (al, anti) = field("anti")?;
    if anti.len() != codes.len() {
        return Err(GediError::parse(al, "anti-code count does not match codes"));
    }
    for (code, a) in anti.iter().enumerate() {
        if a != "-" {
            let a: usize = a
                .parse()
                .map_err(|_| GediError::parse(al, format!("bad anti-code `{a}`")))?;
            if codes.codes()[code].anti != Some(a) {
                codes = codes
                    .with_anti(code, a)
                    .map_err(|e| GediError::parse(al, e.to_string()))?;
            }
        }
    }
    let (bl, biases) = field("biases")?;
    let biases = biases.iter().map(|b| number(bl, b)).collect::<Result<Vec<_>>>()?;
    codes = codes
        .with_biases(&biases)
        .map_err(|e| GediError::parse(bl, e.to_string()))?;

    let (ll, log_alpha) = single("log-alpha")?;
    let log_alpha = number(ll, log_alpha)?;

    let (tl, table) = field("logits")?;
    let count: usize = match table {
        [n, enc] if enc == "f64-le" => n
            .parse()
            .map_err(|_| GediError::parse(tl, format!("bad logit count `{n}`")))?,
        _ => return Err(GediError::parse(tl, "expected `logits <count> f64-le`")),
    };
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(GediError::parse(
            line_no + 1,
            format!("logit payload has {} bytes, expected {}", bytes.len(), count * 8),
        ));
    }
    let logits = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    TabularCCLM::from_logits(vocab, codes, order, logits, log_alpha).map_err(|e| GediError::parse(tl, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitScheme;

    fn noisy(codes: ControlCodeSet) -> TabularCCLM {
        let vocab = Vocab::new(&["A", "B", "C"]).unwrap().with_eos("C").unwrap();
        let mut m = TabularCCLM::new(vocab, codes, 1, InitScheme::Noise { sigma: 1.0 }, 3).unwrap();
        m.set_log_alpha(0.3141592653589793);
        m
    }

    fn round_trip(m: &TabularCCLM) -> TabularCCLM {
        let mut buf = Vec::new();
        write_checkpoint(m, &mut buf).unwrap();
        read_checkpoint(&buf[..]).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let codes = ControlCodeSet::new(&["neg", "neu", "pos"])
            .unwrap()
            .with_anti(2, 0)
            .unwrap()
            .with_biases(&[0.1, -2.5e-7, 2.0])
            .unwrap();
        let m = noisy(codes);
        assert_eq!(round_trip(&m), m);

        let b = noisy(ControlCodeSet::binarized(&["x", "y"]).unwrap());
        assert_eq!(round_trip(&b), b);

        let vocab = Vocab::new(&["A"]).unwrap();
        let u = TabularCCLM::new(vocab, ControlCodeSet::unconditional(), 0, InitScheme::Zeros, 0).unwrap();
        assert_eq!(round_trip(&u), u);

        let mut buf = Vec::new();
        write_checkpoint_with_meta(&m, &[("seed".into(), "3".into())], &mut buf).unwrap();
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), m);
    }

    #[test]
    fn rejects_bad_files() {
        let m = noisy(ControlCodeSet::new(&["a", "b"]).unwrap());
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();

        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint(truncated), Err(GediError::Parse { .. })));

        let text = String::from_utf8_lossy(&buf[..40]).replace("gedi-checkpoint 1", "gedi-checkpoint 9");
        let mut other = text.into_bytes();
        other.extend_from_slice(&buf[40..]);
        assert!(matches!(read_checkpoint(&other[..]), Err(GediError::Version { .. })));

        assert!(matches!(
            read_checkpoint(&b"gedi-checkpoint 1\nvocab A\n"[..]),
            Err(GediError::Parse { .. })
        ));
    }
}
