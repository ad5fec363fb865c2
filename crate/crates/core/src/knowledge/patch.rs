use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{KnowledgeError, Operator, Predicate, SchemaField, ToolSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EditType {
    AddPrecondition,
    RefineEffect,
    UpdateToolSchema,
}

impl EditType {
    pub fn as_str(&self) -> &'static str {
        match self {
            EditType::AddPrecondition => "ADD_PRECONDITION",
            EditType::RefineEffect => "REFINE_EFFECT",
            EditType::UpdateToolSchema => "UPDATE_TOOL_SCHEMA",
        }
    }
}

impl fmt::Display for EditType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditAction {
    Add,
    Replace,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchBody {
    Predicate(Predicate),
    Field(SchemaField),
}

impl PatchBody {
    pub fn name(&self) -> &str {
        match self {
            PatchBody::Predicate(p) => &p.name,
            PatchBody::Field(f) => &f.name,
        }
    }

    pub fn predicate(&self) -> Option<&Predicate> {
        match self {
            PatchBody::Predicate(p) => Some(p),
            PatchBody::Field(_) => None,
        }
    }
}

/// Typed edit to a single operator.
///
/// `target` names the slot being modified: `pre` for precondition edits,
/// the replaced effect name (or `eff`) for effect edits, and the schema
/// field name for tool-schema edits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub scope: String,
    pub edit_type: EditType,
    #[serde(flatten)]
    pub body: PatchBody,
    pub target: String,
    pub action: EditAction,
    #[serde(default)]
    pub rationale: String,
}

impl fmt::Display for Patch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let body = match &self.body {
            PatchBody::Predicate(p) => p.to_string(),
            PatchBody::Field(fl) => fl.to_string(),
        };
        write!(
            f,
            "{}[{}] {:?} {} @ {}",
            self.scope, self.edit_type, self.action, body, self.target
        )
    }
}

/// Inverse edit recorded at commit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RollbackOp {
    RemovePrecondition { index: usize, predicate: Predicate },
    InsertPrecondition { index: usize, predicate: Predicate },
    RemoveEffect { index: usize, predicate: Predicate },
    InsertEffect { index: usize, predicate: Predicate },
    RestoreSchema { schema: ToolSchema },
}

fn patch_err(p: &Patch, why: impl Into<String>) -> KnowledgeError {
    KnowledgeError::Patch {
        patch: p.to_string(),
        reason: why.into(),
    }
}

impl Patch {
    fn expect_predicate(&self) -> Result<&Predicate, KnowledgeError> {
        match &self.body {
            PatchBody::Predicate(p) => Ok(p),
            PatchBody::Field(_) => Err(patch_err(self, "edit type needs a predicate body")),
        }
    }

    fn expect_field(&self) -> Result<&SchemaField, KnowledgeError> {
        match &self.body {
            PatchBody::Field(f) => Ok(f),
            PatchBody::Predicate(_) => Err(patch_err(self, "schema edit needs a field body")),
        }
    }

    /// Type-checks against `op`, returning the inverse edit list.
    pub fn rollback_set(&self, op: &Operator) -> Result<Vec<RollbackOp>, KnowledgeError> {
        if self.scope != op.name {
            return Err(patch_err(self, format!("scope mismatch with {}", op.name)));
        }
        match self.edit_type {
            EditType::AddPrecondition => {
                let p = self.expect_predicate()?;
                op.check_bound(p)?;
                if self.target != "pre" {
                    return Err(patch_err(self, "precondition edits target `pre`"));
                }
                match self.action {
                    EditAction::Add => {
                        if op.pre.contains(p) {
                            return Err(patch_err(self, "precondition already present"));
                        }
                        if op.pre.contains(&p.clone().negate()) {
                            return Err(patch_err(self, "contradicts existing precondition"));
                        }
                        Ok(vec![RollbackOp::RemovePrecondition {
                            index: op.pre.len(),
                            predicate: p.clone(),
                        }])
                    }
                    EditAction::Remove => {
                        let index = op
                            .pre
                            .iter()
                            .position(|q| q == p)
                            .ok_or_else(|| patch_err(self, "no such precondition"))?;
                        Ok(vec![RollbackOp::InsertPrecondition {
                            index,
                            predicate: p.clone(),
                        }])
                    }
                    EditAction::Replace => {
                        Err(patch_err(self, "replace is not a precondition action"))
                    }
                }
            }
            EditType::RefineEffect => {
                let p = self.expect_predicate()?;
                op.check_bound(p)?;
                match self.action {
                    EditAction::Replace => {
                        let index = op
                            .eff
                            .iter()
                            .position(|e| e.name == self.target)
                            .ok_or_else(|| patch_err(self, "no effect with target name"))?;
                        Ok(vec![
                            RollbackOp::RemoveEffect {
                                index,
                                predicate: p.clone(),
                            },
                            RollbackOp::InsertEffect {
                                index,
                                predicate: op.eff[index].clone(),
                            },
                        ])
                    }
                    EditAction::Add => {
                        if self.target != "eff" {
                            return Err(patch_err(self, "effect add targets `eff`"));
                        }
                        if op.eff.contains(p) {
                            return Err(patch_err(self, "effect already present"));
                        }
                        Ok(vec![RollbackOp::RemoveEffect {
                            index: op.eff.len(),
                            predicate: p.clone(),
                        }])
                    }
                    EditAction::Remove => {
                        if self.target != "eff" {
                            return Err(patch_err(self, "effect remove targets `eff`"));
                        }
                        let index = op
                            .eff
                            .iter()
                            .position(|q| q == p)
                            .ok_or_else(|| patch_err(self, "no such effect"))?;
                        Ok(vec![RollbackOp::InsertEffect {
                            index,
                            predicate: p.clone(),
                        }])
                    }
                }
            }
            EditType::UpdateToolSchema => {
                let f = self.expect_field()?;
                let schema = &op.tool_schema;
                match self.action {
                    EditAction::Replace => {
                        if !schema.has_field(&self.target) {
                            return Err(patch_err(self, "no such schema field"));
                        }
                        if f.name != self.target && schema.has_field(&f.name) {
                            return Err(patch_err(self, "replacement field already exists"));
                        }
                    }
                    EditAction::Add => {
                        if f.name != self.target {
                            return Err(patch_err(self, "added field must match target"));
                        }
                        if schema.has_field(&f.name) {
                            return Err(patch_err(self, "field already exists"));
                        }
                    }
                    EditAction::Remove => {
                        if f.name != self.target || !schema.has_field(&f.name) {
                            return Err(patch_err(self, "no such schema field"));
                        }
                    }
                }
                Ok(vec![RollbackOp::RestoreSchema {
                    schema: schema.clone(),
                }])
            }
        }
    }

    /// Structural negation test used for reverse-conflict detection.
    pub fn negates(&self, other: &Patch) -> bool {
        if self.scope != other.scope || edit_key(self) != edit_key(other) {
            return false;
        }
        use EditAction::*;
        match (&self.body, &other.body) {
            (PatchBody::Predicate(a), PatchBody::Predicate(b)) => match (self.action, other.action)
            {
                (Add, Remove) | (Remove, Add) => a == b && self.target == other.target,
                (Add, Add) => a.atom() == b.atom() && a.negated != b.negated,
                (Replace, Replace) => a.name == other.target && b.name == self.target,
                _ => false,
            },
            (PatchBody::Field(a), PatchBody::Field(b)) => match (self.action, other.action) {
                (Add, Remove) | (Remove, Add) => a.name == b.name,
                (Replace, Replace) => a.name == other.target && b.name == self.target,
                _ => false,
            },
            _ => false,
        }
    }
}

/// Applies a patch, returning the new operator. The input is left untouched.
pub fn apply_patch(op: &Operator, patch: &Patch) -> Result<Operator, KnowledgeError> {
    patch.rollback_set(op)?;
    let mut out = op.clone();
    match (&patch.edit_type, &patch.body, patch.action) {
        (EditType::AddPrecondition, PatchBody::Predicate(p), EditAction::Add) => {
            out.pre.push(p.clone())
        }
        (EditType::AddPrecondition, PatchBody::Predicate(p), EditAction::Remove) => {
            out.pre.retain(|q| q != p)
        }
        (EditType::RefineEffect, PatchBody::Predicate(p), EditAction::Replace) => {
            let i = out
                .eff
                .iter()
                .position(|e| e.name == patch.target)
                .expect("checked");
            out.eff[i] = p.clone();
        }
        (EditType::RefineEffect, PatchBody::Predicate(p), EditAction::Add) => {
            out.eff.push(p.clone())
        }
        (EditType::RefineEffect, PatchBody::Predicate(p), EditAction::Remove) => {
            let i = out.eff.iter().position(|e| e == p).expect("checked");
            out.eff.remove(i);
        }
        (EditType::UpdateToolSchema, PatchBody::Field(f), action) => {
            let fields = &mut out.tool_schema.fields;
            match action {
                EditAction::Replace => {
                    let i = fields
                        .iter()
                        .position(|x| x.name == patch.target)
                        .expect("checked");
                    fields[i] = f.clone();
                }
                EditAction::Add => fields.push(f.clone()),
                EditAction::Remove => fields.retain(|x| x.name != f.name),
            }
            out.tool_schema.bump_version();
        }
        _ => return Err(patch_err(patch, "unsupported edit shape")),
    }
    Ok(out)
}

fn remove_at(list: &mut Vec<Predicate>, index: usize, p: &Predicate) -> Result<(), KnowledgeError> {
    if list.get(index) == Some(p) {
        list.remove(index);
        return Ok(());
    }
    match list.iter().rposition(|q| q == p) {
        Some(i) => {
            list.remove(i);
            Ok(())
        }
        None => Err(KnowledgeError::Rollback(format!("{p} not present"))),
    }
}

pub fn apply_rollback(op: &Operator, ops: &[RollbackOp]) -> Result<Operator, KnowledgeError> {
    let mut out = op.clone();
    for r in ops {
        match r {
            RollbackOp::RemovePrecondition { index, predicate } => {
                remove_at(&mut out.pre, *index, predicate)?
            }
            RollbackOp::RemoveEffect { index, predicate } => {
                remove_at(&mut out.eff, *index, predicate)?
            }
            RollbackOp::InsertPrecondition { index, predicate } => {
                let i = (*index).min(out.pre.len());
                out.pre.insert(i, predicate.clone());
            }
            RollbackOp::InsertEffect { index, predicate } => {
                let i = (*index).min(out.eff.len());
                out.eff.insert(i, predicate.clone());
            }
            RollbackOp::RestoreSchema { schema } => out.tool_schema = schema.clone(),
        }
    }
    Ok(out)
}

/// Canonical subject of an edit: predicate name/arity, or the unordered
/// pair of field or effect names touched by a rename.
fn subject(patch: &Patch) -> String {
    match (&patch.body, patch.action) {
        (PatchBody::Predicate(p), EditAction::Replace) => pair(&patch.target, &p.name),
        (PatchBody::Predicate(p), _) => format!("{}/{}", p.name.to_lowercase(), p.arity()),
        (PatchBody::Field(f), _) => pair(&patch.target, &f.name),
    }
}

fn pair(a: &str, b: &str) -> String {
    let (a, b) = (a.to_lowercase(), b.to_lowercase());
    match a.cmp(&b) {
        std::cmp::Ordering::Equal => a,
        std::cmp::Ordering::Less => format!("{a}~{b}"),
        std::cmp::Ordering::Greater => format!("{b}~{a}"),
    }
}

pub fn edit_key_preimage(patch: &Patch) -> String {
    format!(
        "scope={}\nsubject={}\n",
        patch.scope.to_lowercase(),
        subject(patch)
    )
}

/// Content hash identifying the slot a patch edits. Ignores action,
/// polarity and rationale so that an edit and its reversal collide.
pub fn edit_key(patch: &Patch) -> String {
    hex::encode(Sha256::digest(edit_key_preimage(patch).as_bytes()))
}
