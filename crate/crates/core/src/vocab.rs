//! Token vocabularies and control-code sets.

use std::collections::HashMap;

use crate::error::{GediError, Result};

pub type TokenId = usize;

const BOS_NAME: &str = "<bos>";
const PAD_NAME: &str = "<pad>";

/// An atomic-symbol vocabulary.
///
/// Emittable tokens occupy the dense range `[0, size)`. BOS and PAD are
/// reserved ids just past that range: they may appear in a model's context
/// but never in a next-token distribution. EOS, when present, is an ordinary
/// emittable token that stops generation.
#[derive(Debug, Clone)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: Option<TokenId>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.eos == other.eos
    }
}

impl Vocab {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(GediError::InvalidConfig("vocab must not be empty".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        let mut owned = Vec::with_capacity(names.len());
        for (id, name) in names.iter().enumerate() {
            let name = name.as_ref();
            check_symbol(name)?;
            if name == BOS_NAME || name == PAD_NAME {
                return Err(GediError::InvalidConfig(format!("`{name}` is a reserved token name")));
            }
            if index.insert(name.to_string(), id).is_some() {
                return Err(GediError::InvalidConfig(format!("duplicate token name `{name}`")));
            }
            owned.push(name.to_string());
        }
        Ok(Self {
            names: owned,
            index,
            eos: None,
        })
    }

    /// Marks an existing token as end-of-sequence.
    pub fn with_eos(mut self, name: &str) -> Result<Self> {
        self.eos = Some(self.id(name)?);
        Ok(self)
    }

    /// Number of emittable tokens.
    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn bos(&self) -> TokenId {
        self.names.len()
    }

    pub fn pad(&self) -> TokenId {
        self.names.len() + 1
    }

    pub fn eos(&self) -> Option<TokenId> {
        self.eos
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: TokenId) -> &str {
        if id == self.bos() {
            BOS_NAME
        } else if id == self.pad() {
            PAD_NAME
        } else {
            &self.names[id]
        }
    }

    pub fn id(&self, name: &str) -> Result<TokenId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| GediError::UnknownToken(name.to_string()))
    }

    pub fn check(&self, token: TokenId) -> Result<()> {
        if token < self.size() {
            Ok(())
        } else {
            Err(GediError::TokenOutOfRange {
                token,
                vocab: self.size(),
            })
        }
    }

    /// Parses whitespace-separated token names.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn encode_names<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<TokenId>> {
        names.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Vec<String> {
        tokens.iter().map(|&t| self.name(t).to_string()).collect()
    }
}

pub(crate) fn check_symbol(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) || name.starts_with('#') {
        return Err(GediError::InvalidConfig(format!(
            "invalid symbol name `{name}`: must be nonempty, without whitespace, not starting with '#'"
        )));
    }
    Ok(())
}

/// One control code: the conditioning variable of a class-conditional model.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlCode {
    pub name: String,
    /// Code contrasted against this one during guided decoding.
    pub anti: Option<usize>,
    /// Log-prior bias `b_c`.
    pub bias: f64,
}

/// The set of control codes a model is conditioned on.
///
/// In binarized mode the codes are exactly `true` and `false`, and every
/// sequence is additionally conditioned on a class-name symbol drawn from
/// `class_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlCodeSet {
    codes: Vec<ControlCode>,
    class_names: Vec<String>,
}

impl ControlCodeSet {
    pub const TRUE: usize = 0;
    pub const FALSE: usize = 1;

    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.len() < 2 {
            return Err(GediError::InvalidConfig(
                "a control-code set needs at least two classes".into(),
            ));
        }
        Self::from_names(names, Vec::new())
    }

    /// Single-code set for an unconditional language model.
    pub fn unconditional() -> Self {
        Self {
            codes: vec![ControlCode {
                name: "<lm>".into(),
                anti: None,
                bias: 0.0,
            }],
            class_names: Vec::new(),
        }
    }

    /// Binarized set: codes `true`/`false` (each the other's anti-code),
    /// with the given class names as conditioning symbols.
    pub fn binarized<S: AsRef<str>>(class_names: &[S]) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(GediError::InvalidConfig(
                "binarized codes need at least two class names".into(),
            ));
        }
        let mut names = Vec::with_capacity(class_names.len());
        for n in class_names {
            let n = n.as_ref();
            check_symbol(n)?;
            if names.iter().any(|m: &String| m == n) {
                return Err(GediError::InvalidConfig(format!("duplicate class name `{n}`")));
            }
            names.push(n.to_string());
        }
        let mut set = Self::from_names(&["true", "false"], names)?;
        set.codes[Self::TRUE].anti = Some(Self::FALSE);
        set.codes[Self::FALSE].anti = Some(Self::TRUE);
        Ok(set)
    }

    fn from_names<S: AsRef<str>>(names: &[S], class_names: Vec<String>) -> Result<Self> {
        let mut codes: Vec<ControlCode> = Vec::with_capacity(names.len());
        for n in names {
            let n = n.as_ref();
            check_symbol(n)?;
            if codes.iter().any(|c| c.name == n) {
                return Err(GediError::InvalidConfig(format!("duplicate control code `{n}`")));
            }
            codes.push(ControlCode {
                name: n.to_string(),
                anti: None,
                bias: 0.0,
            });
        }
        Ok(Self { codes, class_names })
    }

    pub fn with_anti(mut self, code: usize, anti: usize) -> Result<Self> {
        let n = self.codes.len();
        if code >= n || anti >= n {
            return Err(GediError::ClassOutOfRange {
                class: code.max(anti),
                classes: n,
            });
        }
        if code == anti {
            return Err(GediError::InvalidConfig("a code cannot be its own anti-code".into()));
        }
        self.codes[code].anti = Some(anti);
        Ok(self)
    }

    pub fn with_biases(mut self, biases: &[f64]) -> Result<Self> {
        if biases.len() != self.codes.len() {
            return Err(GediError::InvalidConfig(format!(
                "expected {} biases, got {}",
                self.codes.len(),
                biases.len()
            )));
        }
        for (c, &b) in self.codes.iter_mut().zip(biases) {
            c.bias = b;
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn is_binarized(&self) -> bool {
        !self.class_names.is_empty()
    }

    pub fn codes(&self) -> &[ControlCode] {
        &self.codes
    }

    pub fn code(&self, id: usize) -> Result<&ControlCode> {
        self.codes.get(id).ok_or(GediError::ClassOutOfRange {
            class: id,
            classes: self.codes.len(),
        })
    }

    pub fn code_id(&self, name: &str) -> Result<usize> {
        self.codes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| GediError::UnknownClass(name.to_string()))
    }

    /// Class-name symbols of a binarized set (empty otherwise).
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_name_id(&self, name: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| GediError::UnknownClass(name.to_string()))
    }

    /// Number of user-facing classes: class names when binarized, codes otherwise.
    pub fn class_count(&self) -> usize {
        if self.is_binarized() {
            self.class_names.len()
        } else {
            self.codes.len()
        }
    }

    pub fn class_label(&self, class: usize) -> &str {
        if self.is_binarized() {
            &self.class_names[class]
        } else {
            &self.codes[class].name
        }
    }

    pub fn class_id(&self, name: &str) -> Result<usize> {
        if self.is_binarized() {
            self.class_name_id(name)
        } else {
            self.code_id(name)
        }
    }

    /// Parameter slots per code: one per class name when binarized, else one.
    pub(crate) fn name_slots(&self) -> usize {
        self.class_names.len().max(1)
    }

    pub fn biases(&self) -> Vec<f64> {
        self.codes.iter().map(|c| c.bias).collect()
    }

    pub(crate) fn set_bias(&mut self, code: usize, bias: f64) {
        self.codes[code].bias = bias;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_sit_past_the_emittable_range() {
        let v = Vocab::new(&["A", "B"]).unwrap();
        assert_eq!(v.size(), 2);
        assert_eq!(v.bos(), 2);
        assert_eq!(v.pad(), 3);
        assert_ne!(v.bos(), v.pad());
        assert_eq!(v.name(v.bos()), "<bos>");
        let v = v.with_eos("B").unwrap();
        assert_eq!(v.eos(), Some(1));
    }

    #[test]
    fn rejects_bad_names() {
        assert!(Vocab::new(&["A", "A"]).is_err());
        assert!(Vocab::new(&["a b"]).is_err());
        assert!(Vocab::new(&["<bos>"]).is_err());
        assert!(Vocab::new::<&str>(&[]).is_err());
        assert!(matches!(
            Vocab::new(&["A"]).unwrap().encode("A C"),
            Err(GediError::UnknownToken(_))
        ));
    }

    #[test]
    fn binarized_set_has_true_false_codes() {
        let set = ControlCodeSet::binarized(&["science", "sports"]).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.code(ControlCodeSet::TRUE).unwrap().name, "true");
        assert_eq!(set.code(ControlCodeSet::TRUE).unwrap().anti, Some(1));
        assert_eq!(set.class_count(), 2);
        assert!(ControlCodeSet::binarized(&["x"]).is_err());
        assert!(ControlCodeSet::new(&["only"]).is_err());
        assert!(ControlCodeSet::new(&["a", "a"]).is_err());
    }
}
