use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Binding, KnowledgeError, Predicate};

/// `name:type` pair. Used for both operator parameters and tool-schema fields.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TypedName {
    pub name: String,
    pub ty: String,
}

pub type Param = TypedName;
pub type SchemaField = TypedName;

impl TypedName {
    pub fn new(name: &str, ty: &str) -> Self {
        Self {
            name: name.to_string(),
            ty: ty.to_string(),
        }
    }
}

impl fmt::Display for TypedName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, self.ty)
    }
}

impl FromStr for TypedName {
    type Err = KnowledgeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (n, t) = s
            .split_once(':')
            .ok_or_else(|| KnowledgeError::Parse(format!("{s:?}: expected name:type")))?;
        let (n, t) = (n.trim(), t.trim());
        if n.is_empty() || t.is_empty() {
            return Err(KnowledgeError::Parse(format!("{s:?}: empty name or type")));
        }
        Ok(Self::new(n, t))
    }
}

impl TryFrom<String> for TypedName {
    type Error = KnowledgeError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TypedName> for String {
    fn from(t: TypedName) -> String {
        t.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub version: String,
    #[serde(default)]
    pub fields: Vec<SchemaField>,
}

impl ToolSchema {
    pub fn has_field(&self, name: &str) -> bool {
        self.fields.iter().any(|f| f.name == name)
    }

    pub fn bump_version(&mut self) {
        let digits: String = self
            .version
            .chars()
            .rev()
            .take_while(|c| c.is_ascii_digit())
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        self.version = match digits.parse::<u64>() {
            Ok(n) => format!(
                "{}{}",
                &self.version[..self.version.len() - digits.len()],
                n + 1
            ),
            Err(_) => format!("{}.1", self.version),
        };
    }
}

impl Default for ToolSchema {
    fn default() -> Self {
        Self {
            version: "v1".into(),
            fields: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Operator {
    pub name: String,
    #[serde(default)]
    pub params: Vec<Param>,
    #[serde(default)]
    pub pre: Vec<Predicate>,
    #[serde(default)]
    pub eff: Vec<Predicate>,
    #[serde(default = "default_cost")]
    pub cost: f64,
    #[serde(default)]
    pub tool_schema: ToolSchema,
}

fn default_cost() -> f64 {
    1.0
}

impl Operator {
    pub fn param_type(&self, var: &str) -> Option<&str> {
        self.params
            .iter()
            .find(|p| p.name == var)
            .map(|p| p.ty.as_str())
    }

    pub fn check_bound(&self, p: &Predicate) -> Result<(), KnowledgeError> {
        for v in p.vars() {
            if self.param_type(v).is_none() {
                return Err(KnowledgeError::UnboundVariable {
                    operator: self.name.clone(),
                    var: v.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), KnowledgeError> {
        if self.name.is_empty() {
            return Err(KnowledgeError::Invalid("operator with empty name".into()));
        }
        if !(self.cost >= 0.0 && self.cost.is_finite()) {
            return Err(KnowledgeError::Invalid(format!(
                "{}: negative cost",
                self.name
            )));
        }
        let mut seen = BTreeSet::new();
        for p in &self.params {
            if !seen.insert(&p.name) {
                return Err(KnowledgeError::Invalid(format!(
                    "{}: duplicate param {}",
                    self.name, p.name
                )));
            }
        }
        for p in self.pre.iter().chain(&self.eff) {
            self.check_bound(p)?;
        }
        let mut seen = BTreeSet::new();
        for f in &self.tool_schema.fields {
            if !seen.insert(&f.name) {
                return Err(KnowledgeError::Invalid(format!(
                    "{}: duplicate schema field {}",
                    self.name, f.name
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, args: &[String]) -> Result<Binding, KnowledgeError> {
        if args.len() != self.params.len() {
            return Err(KnowledgeError::Arity {
                operator: self.name.clone(),
                expected: self.params.len(),
                got: args.len(),
            });
        }
        Ok(self
            .params
            .iter()
            .zip(args)
            .map(|(p, a)| (p.name.clone(), a.clone()))
            .collect())
    }

    pub fn ground_pre(&self, b: &Binding) -> Vec<Predicate> {
        self.pre.iter().map(|p| p.substitute(b)).collect()
    }

    pub fn ground_eff(&self, b: &Binding) -> Vec<Predicate> {
        self.eff.iter().map(|p| p.substitute(b)).collect()
    }

    pub fn add_effect_names(&self) -> BTreeSet<&str> {
        self.eff
            .iter()
            .filter(|e| !e.negated)
            .map(|e| e.name.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book_hotel() -> Operator {
        serde_json::from_str(
            r#"{"name":"BookHotel","params":["city:city","dates:dates","card:card"],
                "pre":["hotel_available(?city, ?dates)","payment_method_present(?card)"],
                "eff":["hotel_booked(?city, ?dates)"],"cost":3,
                "tool_schema":{"version":"v1","fields":["city:city"]}}"#,
        )
        .unwrap()
    }

    #[test]
    fn parses_and_validates() {
        let op = book_hotel();
        op.validate().unwrap();
        assert_eq!(op.param_type("card"), Some("card"));
    }

    #[test]
    fn rejects_unbound_var() {
        let mut op = book_hotel();
        op.pre.push("blocked(?who)".parse().unwrap());
        assert!(matches!(
            op.validate(),
            Err(KnowledgeError::UnboundVariable { .. })
        ));
    }

    #[test]
    fn version_bump() {
        let mut s = ToolSchema::default();
        s.bump_version();
        assert_eq!(s.version, "v2");
        s.version = "api".into();
        s.bump_version();
        assert_eq!(s.version, "api.1");
        s.version = "2024.9".into();
        s.bump_version();
        assert_eq!(s.version, "2024.10");
    }
}
