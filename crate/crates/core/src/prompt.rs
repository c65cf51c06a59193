//! Hierarchical prompt trees: parsing, level rewriting, validation, and
//! synthesis-plan derivation.
//!
//! A tree is at most three levels deep: root → subjects → attributes. Two
//! input forms are supported hermetically: the structured record schema
//! (serde), and a brief template grammar of the form
//!
//! `a <subject> [wearing <attr>] [with <attr>] [, holding <attr>]`,
//!
//! subject phrases joined by connector phrases from a known lexicon.
//! Free-form text is out of scope; anything outside the grammar is rejected
//! with the offending span.

use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

pub const TREE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributeKind {
    Clothing,
    Holding,
    Accessory,
    Other,
}

impl AttributeKind {
    /// Marker phrase introducing this kind in the template grammar, in
    /// render order.
    pub fn marker(&self) -> &'static str {
        match self {
            AttributeKind::Clothing => " wearing ",
            AttributeKind::Accessory => " with ",
            AttributeKind::Holding => ", holding ",
            AttributeKind::Other => ", featuring ",
        }
    }

    /// Render order: clothing, accessory, holding, other.
    pub fn render_rank(&self) -> usize {
        match self {
            AttributeKind::Clothing => 0,
            AttributeKind::Accessory => 1,
            AttributeKind::Holding => 2,
            AttributeKind::Other => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeNode {
    pub kind: AttributeKind,
    /// Category token, e.g. "book".
    pub category: String,
    /// Detailed surface text (verbatim; this is also the attribute's level
    /// prompt). For brief trees this is the captured phrase.
    pub text: String,
    /// Qualifier tokens that must stay out of higher-level prompts.
    #[serde(default)]
    pub qualifiers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectNode {
    /// Canonical label, unique within the tree.
    pub label: String,
    /// Level prompt: categorical only, filled by [`rewrite_levels`].
    #[serde(default)]
    pub level_prompt: String,
    pub attributes: Vec<AttributeNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTree {
    /// Flat prompt text.
    pub root_text: String,
    /// Level prompt of the root, filled by [`rewrite_levels`].
    #[serde(default)]
    pub root_level_prompt: String,
    pub subjects: Vec<SubjectNode>,
    /// Connector phrases between consecutive subjects (len = subjects - 1).
    pub connectors: Vec<String>,
}

/// Versioned container for standalone tree files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeDocument {
    pub schema_version: u32,
    pub tree: PromptTree,
}

impl TreeDocument {
    pub fn new(tree: PromptTree) -> Self {
        Self {
            schema_version: TREE_SCHEMA_VERSION,
            tree,
        }
    }
}

/// Node address within a tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeId {
    Root,
    Subject(usize),
    Attribute(usize, usize),
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Root => write!(f, "root"),
            NodeId::Subject(i) => write!(f, "subjects[{i}]"),
            NodeId::Attribute(i, j) => write!(f, "subjects[{i}].attributes[{j}]"),
        }
    }
}

fn article_for(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a') | Some('e') | Some('i') | Some('o') | Some('u') => "an",
        _ => "a",
    }
}

fn attrs_in_render_order(subject: &SubjectNode) -> Vec<&AttributeNode> {
    let mut attrs: Vec<&AttributeNode> = subject.attributes.iter().collect();
    attrs.sort_by_key(|a| a.kind.render_rank());
    attrs
}

/// Surface rendering of a subject phrase with its attribute texts verbatim.
pub fn render_subject_phrase(subject: &SubjectNode) -> String {
    let mut out = format!("{} {}", article_for(&subject.label), subject.label);
    for attr in attrs_in_render_order(subject) {
        out.push_str(attr.kind.marker());
        out.push_str(&attr.text);
    }
    out
}

/// Surface rendering of the whole prompt: subject phrases joined by
/// connectors. Concatenating node texts this way is the lossless inverse of
/// the template parse.
pub fn render_flat(tree: &PromptTree) -> String {
    let mut out = String::new();
    for (i, subject) in tree.subjects.iter().enumerate() {
        if i > 0 {
            out.push(' ');
            out.push_str(&tree.connectors[i - 1]);
            out.push(' ');
        }
        out.push_str(&render_subject_phrase(subject));
    }
    out
}

fn strip_article(s: &str) -> &str {
    for art in ["a ", "an ", "the "] {
        if let Some(rest) = s.strip_prefix(art) {
            return rest;
        }
    }
    s
}

/// Connector lexicon shipped with the template grammar.
pub fn default_connectors() -> Vec<String> {
    [
        "standing next to",
        "sitting beside",
        "next to",
        "beside",
        "in front of",
        "behind",
        "facing",
        "leaning on",
        "walking past",
        "across from",
        "looking at",
        "underneath",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn parse_subject_phrase(phrase: &str) -> Result<SubjectNode> {
    let trimmed = phrase.trim();
    if trimmed.is_empty() {
        return Err(CoreError::Parse {
            span: phrase.to_string(),
            reason: "empty subject phrase".into(),
        });
    }
    // markers in render order; each may occur at most once
    let markers: [(AttributeKind, &str); 3] = [
        (AttributeKind::Clothing, " wearing "),
        (AttributeKind::Accessory, " with "),
        (AttributeKind::Holding, ", holding "),
    ];
    let mut cuts: Vec<(usize, AttributeKind, usize)> = Vec::new();
    for (kind, marker) in markers {
        let hits: Vec<usize> = trimmed.match_indices(marker).map(|(i, _)| i).collect();
        if hits.len() > 1 {
            return Err(CoreError::Parse {
                span: trimmed.to_string(),
                reason: format!("marker {marker:?} occurs more than once"),
            });
        }
        if let Some(&i) = hits.first() {
            cuts.push((i, kind, marker.len()));
        }
    }
    cuts.sort_by_key(|c| c.0);
    let head_end = cuts.first().map_or(trimmed.len(), |c| c.0);
    let head = strip_article(&trimmed[..head_end]).trim();
    if head.is_empty() {
        return Err(CoreError::Parse {
            span: trimmed.to_string(),
            reason: "missing subject label".into(),
        });
    }
    let mut attributes = Vec::new();
    for (idx, &(pos, kind, mlen)) in cuts.iter().enumerate() {
        let end = cuts.get(idx + 1).map_or(trimmed.len(), |c| c.0);
        let text = trimmed[pos + mlen..end].trim();
        if text.is_empty() {
            return Err(CoreError::Parse {
                span: trimmed.to_string(),
                reason: format!("empty attribute after {:?}", kind.marker().trim()),
            });
        }
        attributes.push(AttributeNode {
            kind,
            category: strip_article(text).to_string(),
            text: text.to_string(),
            qualifiers: Vec::new(),
        });
    }
    Ok(SubjectNode {
        label: head.to_string(),
        level_prompt: String::new(),
        attributes,
    })
}

/// Parse a brief templated prompt against a connector lexicon. The parse is
/// lossless: [`render_flat`] reconstructs the input up to whitespace.
pub fn parse_templated(text: &str, connectors: &[String]) -> Result<PromptTree> {
    let mut segments: Vec<(String, Option<String>)> = Vec::new(); // (phrase, connector after)
    let mut rest = text.trim();
    loop {
        // earliest connector occurrence that is not inside the first word
        let mut first: Option<(usize, &str)> = None;
        for c in connectors {
            let pat = format!(" {c} ");
            if let Some(i) = rest.find(&pat) {
                if first.map_or(true, |(j, fc)| i < j || (i == j && c.len() > fc.len())) {
                    first = Some((i, c));
                }
            }
        }
        match first {
            Some((i, c)) => {
                segments.push((rest[..i].to_string(), Some(c.to_string())));
                rest = rest[i + c.len() + 2..].trim_start();
            }
            None => {
                segments.push((rest.to_string(), None));
                break;
            }
        }
    }
    let mut subjects = Vec::new();
    let mut conns = Vec::new();
    for (phrase, conn) in &segments {
        subjects.push(parse_subject_phrase(phrase)?);
        if let Some(c) = conn {
            conns.push(c.clone());
        }
    }
    let tree = PromptTree {
        root_text: text.trim().to_string(),
        root_level_prompt: String::new(),
        subjects,
        connectors: conns,
    };
    let violations = validate_tree(&tree);
    if !violations.is_empty() {
        return Err(CoreError::Parse {
            span: text.trim().to_string(),
            reason: violations[0].to_string(),
        });
    }
    Ok(tree)
}

/// Parse with the shipped connector lexicon.
pub fn parse_prompt(text: &str) -> Result<PromptTree> {
    parse_templated(text, &default_connectors())
}

/// A single validation failure, addressed by node path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeViolation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for TreeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Check all tree invariants; returns the complete violation list.
pub fn validate_tree(tree: &PromptTree) -> Vec<TreeViolation> {
    let mut out = Vec::new();
    if tree.subjects.is_empty() {
        out.push(TreeViolation {
            path: "root".into(),
            message: "tree has no subjects".into(),
        });
    }
    if tree.connectors.len() + 1 != tree.subjects.len() && !tree.subjects.is_empty() {
        out.push(TreeViolation {
            path: "root".into(),
            message: format!(
                "{} connectors for {} subjects",
                tree.connectors.len(),
                tree.subjects.len()
            ),
        });
    }
    for (i, s) in tree.subjects.iter().enumerate() {
        if s.label.trim().is_empty() {
            out.push(TreeViolation {
                path: NodeId::Subject(i).to_string(),
                message: "empty label".into(),
            });
        }
        for (j, a) in s.attributes.iter().enumerate() {
            if a.text.trim().is_empty() {
                out.push(TreeViolation {
                    path: NodeId::Attribute(i, j).to_string(),
                    message: "empty attribute text".into(),
                });
            }
            if a.category.trim().is_empty() {
                out.push(TreeViolation {
                    path: NodeId::Attribute(i, j).to_string(),
                    message: "empty attribute category".into(),
                });
            }
        }
    }
    for i in 0..tree.subjects.len() {
        for j in (i + 1)..tree.subjects.len() {
            if tree.subjects[i].label == tree.subjects[j].label {
                out.push(TreeViolation {
                    path: format!("{} and {}", NodeId::Subject(i), NodeId::Subject(j)),
                    message: format!("duplicate label {:?}", tree.subjects[i].label),
                });
            }
        }
    }
    out
}

/// Lowercased word tokens (alphanumeric plus in-word apostrophes/hyphens).
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

fn qualifier_tokens(attr: &AttributeNode) -> BTreeSet<String> {
    attr.qualifiers.iter().flat_map(|q| tokenize(q)).collect()
}

/// Produces per-level prompts. Implemented by the deterministic template
/// backend and by the remote LLM backend.
pub trait LevelRewriter {
    /// Categorical prompt for one subject (no attribute details).
    fn subject_level(&self, subject: &SubjectNode) -> Result<String>;
    /// Categorical prompt for the whole scene.
    fn root_level(&self, tree: &PromptTree) -> Result<String>;
}

/// Deterministic rewriter: level prompts carry the label and attribute
/// *categories* only, so the whole pipeline runs hermetically.
#[derive(Debug, Clone, Default)]
pub struct TemplateRewriter;

impl LevelRewriter for TemplateRewriter {
    fn subject_level(&self, subject: &SubjectNode) -> Result<String> {
        let mut out = subject.label.clone();
        for attr in attrs_in_render_order(subject) {
            out.push_str(attr.kind.marker());
            out.push_str(&attr.category);
        }
        Ok(out)
    }

    fn root_level(&self, tree: &PromptTree) -> Result<String> {
        let mut out = String::new();
        for (i, s) in tree.subjects.iter().enumerate() {
            if i > 0 {
                out.push(' ');
                out.push_str(&tree.connectors[i - 1]);
                out.push(' ');
            }
            out.push_str(&self.subject_level(s)?);
        }
        Ok(out)
    }
}

/// Fill every node's level prompt and enforce the containment rule: a level
/// prompt must not contain any descendant attribute's qualifier tokens
/// (details live only at their own level). Topology never changes.
pub fn rewrite_levels<R: LevelRewriter>(tree: &PromptTree, rewriter: &R) -> Result<PromptTree> {
    let mut out = tree.clone();
    for (i, subject) in out.subjects.iter_mut().enumerate() {
        let level = rewriter.subject_level(subject)?;
        let level_tokens: BTreeSet<String> = tokenize(&level).into_iter().collect();
        for (j, attr) in subject.attributes.iter().enumerate() {
            for tok in qualifier_tokens(attr) {
                if level_tokens.contains(&tok) {
                    return Err(CoreError::RewriteRejected(format!(
                        "subject level prompt for {} contains qualifier token {:?} of {}",
                        NodeId::Subject(i),
                        tok,
                        NodeId::Attribute(i, j),
                    )));
                }
            }
        }
        subject.level_prompt = level;
    }
    let root = rewriter.root_level(&out)?;
    let root_tokens: BTreeSet<String> = tokenize(&root).into_iter().collect();
    for (i, subject) in out.subjects.iter().enumerate() {
        for (j, attr) in subject.attributes.iter().enumerate() {
            for tok in qualifier_tokens(attr) {
                if root_tokens.contains(&tok) {
                    return Err(CoreError::RewriteRejected(format!(
                        "root level prompt contains qualifier token {tok:?} of {}",
                        NodeId::Attribute(i, j),
                    )));
                }
            }
        }
        let _ = i;
    }
    out.root_level_prompt = root;
    Ok(out)
}

/// Level prompt of a node (attributes use their detailed text).
pub fn level_prompt_of<'t>(tree: &'t PromptTree, node: NodeId) -> &'t str {
    match node {
        NodeId::Root => &tree.root_level_prompt,
        NodeId::Subject(i) => &tree.subjects[i].level_prompt,
        NodeId::Attribute(i, j) => &tree.subjects[i].attributes[j].text,
    }
}

/// One generation step of a synthesis plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub target: NodeId,
    /// Outputs of these earlier steps become reference latents, in order.
    pub deps: Vec<NodeId>,
    pub level_prompt: String,
}

/// Ordered generation steps derived from a tree: dependencies always appear
/// before their dependents, and the final step targets the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisPlan {
    pub steps: Vec<PlanStep>,
    pub folded: bool,
}

impl SynthesisPlan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Derive the synthesis plan. With `fold_attributes`, attribute nodes are
/// merged into their subject's step and the subject conditions on its full
/// detailed sub-prompt instead of references.
pub fn synthesis_plan(tree: &PromptTree, fold_attributes: bool) -> Result<SynthesisPlan> {
    let violations = validate_tree(tree);
    if !violations.is_empty() {
        return Err(CoreError::InvalidTree(violations[0].to_string()));
    }
    let mut steps = Vec::new();
    for (i, subject) in tree.subjects.iter().enumerate() {
        if fold_attributes {
            steps.push(PlanStep {
                target: NodeId::Subject(i),
                deps: Vec::new(),
                level_prompt: render_subject_phrase(subject),
            });
        } else {
            let mut deps = Vec::new();
            for (j, attr) in subject.attributes.iter().enumerate() {
                steps.push(PlanStep {
                    target: NodeId::Attribute(i, j),
                    deps: Vec::new(),
                    level_prompt: attr.text.clone(),
                });
                deps.push(NodeId::Attribute(i, j));
            }
            let level = if subject.level_prompt.is_empty() {
                TemplateRewriter.subject_level(subject)?
            } else {
                subject.level_prompt.clone()
            };
            steps.push(PlanStep {
                target: NodeId::Subject(i),
                deps,
                level_prompt: level,
            });
        }
    }
    let root_level = if tree.root_level_prompt.is_empty() {
        TemplateRewriter.root_level(tree)?
    } else {
        tree.root_level_prompt.clone()
    };
    steps.push(PlanStep {
        target: NodeId::Root,
        deps: (0..tree.subjects.len()).map(NodeId::Subject).collect(),
        level_prompt: root_level,
    });

    // topological guard: every dependency must appear earlier
    let mut seen = BTreeSet::new();
    for step in &steps {
        for dep in &step.deps {
            if !seen.contains(dep) {
                return Err(CoreError::InvalidTree(format!(
                    "step {} depends on {} which is not scheduled earlier",
                    step.target, dep
                )));
            }
        }
        seen.insert(step.target);
    }
    Ok(SynthesisPlan {
        steps,
        folded: fold_attributes,
    })
}
