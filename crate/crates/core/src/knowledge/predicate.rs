use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::KnowledgeError;

/// Variable substitution: variable name (without `?`) to constant.
pub type Binding = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Var(String),
    Const(String),
}

impl Term {
    pub fn is_var(&self) -> bool {
        matches!(self, Term::Var(_))
    }

    pub fn name(&self) -> &str {
        match self {
            Term::Var(v) | Term::Const(v) => v,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(v) => write!(f, "?{v}"),
            Term::Const(c) => f.write_str(c),
        }
    }
}

/// Atom or negated atom. String form: `[not ]name(arg, ...)`, `?x` for variables.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Predicate {
    pub name: String,
    pub args: Vec<Term>,
    pub negated: bool,
}

fn valid_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '$'))
}

impl Predicate {
    pub fn new(name: &str, args: &[&str]) -> Self {
        let args = args
            .iter()
            .map(|a| match a.strip_prefix('?') {
                Some(v) => Term::Var(v.to_string()),
                None => Term::Const(a.to_string()),
            })
            .collect();
        Self {
            name: name.to_string(),
            args,
            negated: false,
        }
    }

    pub fn negate(mut self) -> Self {
        self.negated = !self.negated;
        self
    }

    pub fn arity(&self) -> usize {
        self.args.len()
    }

    pub fn is_ground(&self) -> bool {
        self.args.iter().all(|t| !t.is_var())
    }

    pub fn vars(&self) -> impl Iterator<Item = &str> {
        self.args.iter().filter_map(|t| match t {
            Term::Var(v) => Some(v.as_str()),
            Term::Const(_) => None,
        })
    }

    /// Positive version of this literal.
    pub fn atom(&self) -> Predicate {
        Predicate {
            negated: false,
            ..self.clone()
        }
    }

    /// Replaces bound variables; unbound ones stay variables.
    pub fn substitute(&self, binding: &Binding) -> Predicate {
        let args = self
            .args
            .iter()
            .map(|t| match t {
                Term::Var(v) => match binding.get(v) {
                    Some(c) => Term::Const(c.clone()),
                    None => t.clone(),
                },
                Term::Const(_) => t.clone(),
            })
            .collect();
        Predicate {
            name: self.name.clone(),
            args,
            negated: self.negated,
        }
    }

    /// Replaces `$slot` constants with slot values; missing slots become `?slot` variables.
    pub fn fill_slots(&self, slots: &BTreeMap<String, String>) -> Predicate {
        let args = self
            .args
            .iter()
            .map(|t| match t {
                Term::Const(c) if c.starts_with('$') => match slots.get(&c[1..]) {
                    Some(v) => Term::Const(v.clone()),
                    None => Term::Var(c[1..].to_string()),
                },
                _ => t.clone(),
            })
            .collect();
        Predicate {
            name: self.name.clone(),
            args,
            negated: self.negated,
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.negated {
            f.write_str("not ")?;
        }
        f.write_str(&self.name)?;
        f.write_str("(")?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str(")")
    }
}

impl FromStr for Predicate {
    type Err = KnowledgeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why: &str| KnowledgeError::Parse(format!("{s:?}: {why}"));
        let mut rest = s.trim();
        let mut negated = false;
        if let Some(r) = rest.strip_prefix("not ") {
            negated = true;
            rest = r.trim_start();
        } else if let Some(r) = rest.strip_prefix('¬').or_else(|| rest.strip_prefix('!')) {
            negated = true;
            rest = r.trim_start();
        }
        let (name, args) = match rest.find('(') {
            Some(open) => {
                let close = rest.rfind(')').ok_or_else(|| bad("missing ')'"))?;
                if close != rest.len() - 1 || close < open {
                    return Err(bad("trailing input after ')'"));
                }
                let inner = rest[open + 1..close].trim();
                let mut args = Vec::new();
                if !inner.is_empty() {
                    for raw in inner.split(',') {
                        let raw = raw.trim();
                        let term = match raw.strip_prefix('?') {
                            Some(v) if valid_ident(v) => Term::Var(v.to_string()),
                            Some(_) => return Err(bad("bad variable")),
                            None if valid_ident(raw) => Term::Const(raw.to_string()),
                            None => return Err(bad("bad argument")),
                        };
                        args.push(term);
                    }
                }
                (rest[..open].trim(), args)
            }
            None => (rest, Vec::new()),
        };
        if !valid_ident(name) || name.starts_with('$') {
            return Err(bad("bad predicate name"));
        }
        Ok(Predicate {
            name: name.to_string(),
            args,
            negated,
        })
    }
}

impl TryFrom<String> for Predicate {
    type Error = KnowledgeError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Predicate> for String {
    fn from(p: Predicate) -> String {
        p.to_string()
    }
}
