//! Stakeholder preference language and its compilation into ranking targets.
//!
//! ```text
//! income > age > debt      # chain: strict descending importance
//! sign(debt) = -           # expected attribution sign
//! rank: income, debt, age  # explicit ranking, remaining features follow
//! ```
//!
//! Statements are separated by newlines or `;`. Feature names match
//! case-insensitively. Natural-language elicitation goes through a
//! [`PreferenceBackend`] whose output is validated by the same resolver.

use std::collections::{BTreeSet, BinaryHeap};
use std::cmp::Reverse;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::Ranking;
use crate::error::check_len;
use crate::saem::{StakeholderTarget, TargetSource};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PreferenceError {
    #[error("syntax error at offset {position}: {message}")]
    Syntax { position: usize, message: String },

    #[error("unknown feature {name:?}{}", suggestion.as_ref().map(|s| format!(", did you mean {s:?}?")).unwrap_or_default())]
    UnknownFeature { name: String, suggestion: Option<String> },

    #[error("contradictory signs declared for {0:?}")]
    ContradictorySign(String),

    #[error("feature {0:?} appears more than once in a rank statement")]
    DuplicateInRank(String),

    #[error("only one rank statement is allowed")]
    MultipleRank,

    #[error("cyclic preference involving {0:?}")]
    Cyclic(Vec<String>),

    #[error("invalid sign {0:?}: expected + or -")]
    InvalidSign(String),

    #[error("preference backend failed after {attempts} attempt(s): {message}")]
    Backend { message: String, attempts: usize },
}

type PResult<T> = std::result::Result<T, PreferenceError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Statement {
    Chain { features: Vec<usize> },
    Sign { feature: usize, sign: i8 },
    FullRank { features: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceProgram {
    pub statements: Vec<Statement>,
    pub source_text: String,
    pub feature_names: Vec<String>,
}

/// Wire form of a statement, as exchanged with a natural-language backend.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RawStatement {
    Chain { features: Vec<String> },
    Sign { feature: String, sign: String },
    Rank { features: Vec<String> },
}

struct Resolver<'a> {
    names: &'a [String],
    lower: Vec<String>,
}

impl<'a> Resolver<'a> {
    fn new(names: &'a [String]) -> Self {
        Self {
            names,
            lower: names.iter().map(|n| n.to_lowercase()).collect(),
        }
    }

    fn resolve(&self, name: &str) -> PResult<usize> {
        let key = name.trim().to_lowercase();
        if let Some(i) = self.lower.iter().position(|n| *n == key) {
            return Ok(i);
        }
        let suggestion = self
            .lower
            .iter()
            .enumerate()
            .map(|(i, n)| (strsim::levenshtein(&key, n), i))
            .min()
            .filter(|(d, _)| *d <= key.len().max(3) / 2 + 1)
            .map(|(_, i)| self.names[i].clone());
        Err(PreferenceError::UnknownFeature {
            name: name.trim().to_string(),
            suggestion,
        })
    }
}

fn parse_sign(s: &str) -> PResult<i8> {
    match s.trim() {
        "+" | "+1" | "positive" => Ok(1),
        "-" | "-1" | "negative" => Ok(-1),
        other => Err(PreferenceError::InvalidSign(other.to_string())),
    }
}

fn syntax(position: usize, message: impl Into<String>) -> PreferenceError {
    PreferenceError::Syntax {
        position,
        message: message.into(),
    }
}

fn parse_statement(seg: &str, offset: usize, r: &Resolver) -> PResult<Statement> {
    let lower = seg.to_lowercase();
    let names = |list: &str, at: usize, sep: char| -> PResult<Vec<usize>> {
        let mut out = Vec::new();
        let mut pos = at;
        for part in list.split(sep) {
            if part.trim().is_empty() {
                return Err(syntax(pos, "expected a feature name"));
            }
            out.push(r.resolve(part)?);
            pos += part.len() + 1;
        }
        Ok(out)
    };
    if let Some(rest) = lower.strip_prefix("rank:") {
        let _ = rest;
        let list = &seg[5..];
        let features = names(list, offset + 5, ',')?;
        let mut seen = BTreeSet::new();
        for &f in &features {
            if !seen.insert(f) {
                return Err(PreferenceError::DuplicateInRank(r.names[f].clone()));
            }
        }
        return Ok(Statement::FullRank { features });
    }
    if lower.starts_with("sign(") {
        let close = seg.find(')').ok_or_else(|| syntax(offset + seg.len(), "expected ')'"))?;
        let feature = r.resolve(&seg[5..close])?;
        let rest = seg[close + 1..].trim_start();
        let value = rest
            .strip_prefix('=')
            .ok_or_else(|| syntax(offset + close + 1, "expected '=' after sign(...)"))?;
        return Ok(Statement::Sign {
            feature,
            sign: parse_sign(value)?,
        });
    }
    if seg.contains('>') {
        let features = names(seg, offset, '>')?;
        return Ok(Statement::Chain { features });
    }
    Err(syntax(offset, format!("expected a chain, sign or rank statement, found {seg:?}")))
}

fn validate(statements: &[Statement], names: &[String]) -> PResult<()> {
    let mut signs: Vec<i8> = vec![0; names.len()];
    let mut ranks = 0;
    for s in statements {
        match s {
            Statement::Sign { feature, sign } => {
                if signs[*feature] != 0 && signs[*feature] != *sign {
                    return Err(PreferenceError::ContradictorySign(names[*feature].clone()));
                }
                signs[*feature] = *sign;
            }
            Statement::FullRank { .. } => {
                ranks += 1;
                if ranks > 1 {
                    return Err(PreferenceError::MultipleRank);
                }
            }
            Statement::Chain { .. } => {}
        }
    }
    Ok(())
}

pub fn parse_preferences(text: &str, feature_names: &[String]) -> PResult<PreferenceProgram> {
    let r = Resolver::new(feature_names);
    let mut statements = Vec::new();
    let mut start = 0;
    for seg in text.split([';', '\n']) {
        let body = seg.split('#').next().unwrap_or("");
        let lead = body.len() - body.trim_start().len();
        let trimmed = body.trim();
        if !trimmed.is_empty() {
            statements.push(parse_statement(trimmed, start + lead, &r)?);
        }
        start += seg.len() + 1;
    }
    validate(&statements, feature_names)?;
    Ok(PreferenceProgram {
        statements,
        source_text: text.to_string(),
        feature_names: feature_names.to_vec(),
    })
}

/// Canonical text for a program; parses back to the same statements.
pub fn render(prog: &PreferenceProgram) -> String {
    let n = |i: &usize| prog.feature_names[*i].clone();
    prog.statements
        .iter()
        .map(|s| match s {
            Statement::Chain { features } => features.iter().map(n).collect::<Vec<_>>().join(" > "),
            Statement::Sign { feature, sign } => {
                format!("sign({}) = {}", n(feature), if *sign > 0 { "+" } else { "-" })
            }
            Statement::FullRank { features } => {
                format!("rank: {}", features.iter().map(n).collect::<Vec<_>>().join(", "))
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn compile_target(prog: &PreferenceProgram, reference: &Ranking) -> crate::error::Result<StakeholderTarget> {
    let p = prog.feature_names.len();
    check_len(p, reference.len())?;
    let mut signs = vec![0i8; p];
    for s in &prog.statements {
        if let Statement::Sign { feature, sign } = s {
            signs[*feature] = *sign;
        }
    }
    let ref_order = reference.order();
    let mut order: Vec<usize> = Vec::with_capacity(p);
    let full = prog.statements.iter().find_map(|s| match s {
        Statement::FullRank { features } => Some(features),
        _ => None,
    });
    if let Some(features) = full {
        order.extend(features);
    } else {
        let mut constrained = BTreeSet::new();
        let mut edges: Vec<Vec<usize>> = vec![Vec::new(); p];
        let mut indeg = vec![0usize; p];
        for s in &prog.statements {
            if let Statement::Chain { features } = s {
                constrained.extend(features.iter().copied());
                for w in features.windows(2) {
                    if !edges[w[0]].contains(&w[1]) {
                        edges[w[0]].push(w[1]);
                        indeg[w[1]] += 1;
                    }
                }
            }
        }
        let mut ready: BinaryHeap<Reverse<(usize, usize)>> = constrained
            .iter()
            .filter(|&&f| indeg[f] == 0)
            .map(|&f| Reverse((reference.rank(f), f)))
            .collect();
        while let Some(Reverse((_, f))) = ready.pop() {
            order.push(f);
            for &g in &edges[f] {
                indeg[g] -= 1;
                if indeg[g] == 0 {
                    ready.push(Reverse((reference.rank(g), g)));
                }
            }
        }
        if order.len() < constrained.len() {
            let stuck = constrained
                .iter()
                .filter(|f| !order.contains(f))
                .map(|&f| prog.feature_names[f].clone())
                .collect();
            return Err(PreferenceError::Cyclic(stuck).into());
        }
    }
    let placed: BTreeSet<usize> = order.iter().copied().collect();
    order.extend(ref_order.into_iter().filter(|f| !placed.contains(f)));
    Ok(StakeholderTarget {
        target_ranking: Ranking::from_order(&order)?,
        target_signs: signs.iter().any(|&s| s != 0).then_some(signs),
        source: TargetSource::Dsl,
        stakeholder_id: String::new(),
    })
}

/// A natural-language elicitation service.
pub trait PreferenceBackend {
    fn elicit(&self, text: &str, feature_names: &[String]) -> PResult<Vec<RawStatement>>;
}

/// Treats the text as preference-language source.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubBackend;

impl PreferenceBackend for StubBackend {
    fn elicit(&self, text: &str, feature_names: &[String]) -> PResult<Vec<RawStatement>> {
        let prog = parse_preferences(text, feature_names)?;
        Ok(to_raw(&prog))
    }
}

pub fn to_raw(prog: &PreferenceProgram) -> Vec<RawStatement> {
    let n = |i: &usize| prog.feature_names[*i].clone();
    prog.statements
        .iter()
        .map(|s| match s {
            Statement::Chain { features } => RawStatement::Chain {
                features: features.iter().map(n).collect(),
            },
            Statement::Sign { feature, sign } => RawStatement::Sign {
                feature: n(feature),
                sign: if *sign > 0 { "+" } else { "-" }.into(),
            },
            Statement::FullRank { features } => RawStatement::Rank {
                features: features.iter().map(n).collect(),
            },
        })
        .collect()
}

/// Resolve backend output against the feature names. Invalid output is
/// rejected as a whole.
pub fn from_raw(raw: &[RawStatement], text: &str, feature_names: &[String]) -> PResult<PreferenceProgram> {
    let r = Resolver::new(feature_names);
    let mut statements = Vec::with_capacity(raw.len());
    for s in raw {
        statements.push(match s {
            RawStatement::Chain { features } => {
                if features.len() < 2 {
                    return Err(syntax(0, "a chain needs at least two features"));
                }
                Statement::Chain {
                    features: features.iter().map(|f| r.resolve(f)).collect::<PResult<_>>()?,
                }
            }
            RawStatement::Sign { feature, sign } => Statement::Sign {
                feature: r.resolve(feature)?,
                sign: parse_sign(sign)?,
            },
            RawStatement::Rank { features } => {
                let features: Vec<usize> = features.iter().map(|f| r.resolve(f)).collect::<PResult<_>>()?;
                let mut seen = BTreeSet::new();
                if let Some(&d) = features.iter().find(|&&f| !seen.insert(f)) {
                    return Err(PreferenceError::DuplicateInRank(feature_names[d].clone()));
                }
                Statement::FullRank { features }
            }
        });
    }
    validate(&statements, feature_names)?;
    Ok(PreferenceProgram {
        statements,
        source_text: text.to_string(),
        feature_names: feature_names.to_vec(),
    })
}

pub fn llm_elicit<B: PreferenceBackend + ?Sized>(text: &str, feature_names: &[String], backend: &B) -> PResult<PreferenceProgram> {
    let raw = backend.elicit(text, feature_names)?;
    from_raw(&raw, text, feature_names)
}
