//! The chain-of-thought controller: hierarchical question chains built from
//! scene ground truth, relevance verification, and the four prompting modes
//! used by the ablation protocol.

pub mod pool;

use serde::{Deserialize, Serialize};

use crate::data::{ClassTaxonomy, SegSample};
use crate::error::{CpSegError, Result};
use crate::rng::Rng;

pub use pool::{PoolEntry, PromptPool};

/// Hierarchy level of a thought. The derived order is the chain order:
/// overarching scene descriptors first, then class presence, then counts and
/// conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PromptLevel {
    Scene,
    ClassPresence,
    QuantityCondition,
}

/// One thought: a question about the scene and its ground-truth answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptNode {
    pub level: PromptLevel,
    pub question: String,
    pub answer: String,
    pub target_class: Option<usize>,
}

impl PromptNode {
    /// The sentence fed to the text encoder: question plus answer.
    pub fn sentence(&self) -> String {
        format!("{} {}", self.question, self.answer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptChain {
    pub nodes: Vec<PromptNode>,
}

/// Longest chain the controller will emit.
pub const MAX_CHAIN_LEN: usize = 12;

/// Prompting mode for the ablation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptMode {
    Standard,
    Two,
    Random,
    ChainOfThought,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [
        PromptMode::Standard,
        PromptMode::Two,
        PromptMode::Random,
        PromptMode::ChainOfThought,
    ];

    /// Row label used in the ablation report.
    pub fn label(&self) -> &'static str {
        match self {
            PromptMode::Standard => "Standard prompt",
            PromptMode::Two => "Two prompts",
            PromptMode::Random => "Random prompt",
            PromptMode::ChainOfThought => "Chain-of-thought prompt",
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = CpSegError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Ok(PromptMode::Standard),
            "two" => Ok(PromptMode::Two),
            "random" => Ok(PromptMode::Random),
            "chainofthought" | "chain-of-thought" | "cot" => Ok(PromptMode::ChainOfThought),
            other => Err(CpSegError::Config(format!("unknown prompt mode {other}"))),
        }
    }
}

// ── question templates ──────────────────────────────────────────────

fn plural(base: &str) -> String {
    match base {
        "water" | "grass" => base.to_string(),
        _ => format!("{base}s"),
    }
}

fn uncountable(base: &str) -> bool {
    matches!(base, "water" | "grass")
}

pub fn scene_question() -> String {
    "is the area flooded".into()
}

pub fn presence_question(base: &str) -> String {
    if uncountable(base) {
        format!("is there any {} in the scene", plural(base))
    } else {
        format!("are there any {} in the scene", plural(base))
    }
}

pub fn quantity_question(base: &str) -> String {
    format!("how many {} are flooded", plural(base))
}

/// Quantity phrasing after a merge removes the flooded variant.
pub fn quantity_question_merged(base: &str) -> String {
    format!("how many {} are there", plural(base))
}

fn yes_no(b: bool) -> String {
    if b { "yes".into() } else { "no".into() }
}

/// Every sentence the controller can emit for this taxonomy, used to build
/// the tokenizer vocabulary.
pub fn template_corpus(taxonomy: &ClassTaxonomy) -> Vec<String> {
    let mut out = vec![scene_question(), "yes".into(), "no".into()];
    for (base, _) in taxonomy.bases() {
        out.push(presence_question(&base));
        out.push(quantity_question(&base));
        out.push(quantity_question_merged(&base));
    }
    out.extend(taxonomy.class_sentences());
    for n in 0..=16 {
        out.push(n.to_string());
    }
    out
}

// ── ground-truth answer extraction ──────────────────────────────────

/// Count 4-connected components of `class_id` in the mask.
pub fn count_components(mask: &[u8], width: usize, height: usize, class_id: u8) -> usize {
    let mut visited = vec![false; mask.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] != class_id || visited[start] {
            continue;
        }
        count += 1;
        visited[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            let mut push = |nx: usize, ny: usize| {
                let np = ny * width + nx;
                if mask[np] == class_id && !visited[np] {
                    visited[np] = true;
                    stack.push(np);
                }
            };
            if x > 0 {
                push(x - 1, y);
            }
            if x + 1 < width {
                push(x + 1, y);
            }
            if y > 0 {
                push(x, y - 1);
            }
            if y + 1 < height {
                push(x, y + 1);
            }
        }
    }
    count
}

fn base_present(sample: &SegSample, taxonomy: &ClassTaxonomy, base: &str) -> bool {
    let ids: Vec<u8> = taxonomy
        .classes
        .iter()
        .enumerate()
        .filter(|(_, c)| c.base == base)
        .map(|(i, _)| i as u8)
        .collect();
    sample.mask.iter().any(|m| ids.contains(m))
}

// ── chain construction ──────────────────────────────────────────────

/// Build the full hierarchical chain for a sample: the scene question, one
/// presence question per non-background base, and count questions for
/// floodable bases whose presence answer is affirmative.
pub fn build_chain(sample: &SegSample, taxonomy: &ClassTaxonomy) -> Result<PromptChain> {
    let k = taxonomy.len();
    if let Some(bad) = sample.mask.iter().find(|&&m| m as usize >= k) {
        return Err(CpSegError::Taxonomy(format!(
            "mask value {bad} outside taxonomy of {k} classes"
        )));
    }

    let mut nodes = vec![PromptNode {
        level: PromptLevel::Scene,
        question: scene_question(),
        answer: yes_no(sample.scene_flooded),
        target_class: None,
    }];

    let mut present = Vec::new();
    for (base, ids) in taxonomy.bases() {
        if base == taxonomy.background {
            continue;
        }
        let here = base_present(sample, taxonomy, &base);
        present.push((base.clone(), here));
        nodes.push(PromptNode {
            level: PromptLevel::ClassPresence,
            question: presence_question(&base),
            answer: yes_no(here),
            target_class: Some(ids[0]),
        });
    }

    for (base, flooded_id) in taxonomy.floodable_bases() {
        let affirmed = present.iter().any(|(b, p)| *b == base && *p);
        if !affirmed {
            continue;
        }
        let count = count_components(&sample.mask, sample.width, sample.height, flooded_id as u8);
        nodes.push(PromptNode {
            level: PromptLevel::QuantityCondition,
            question: quantity_question(&base),
            answer: count.to_string(),
            target_class: Some(flooded_id),
        });
    }

    nodes.truncate(MAX_CHAIN_LEN);
    Ok(PromptChain { nodes })
}

impl PromptChain {
    /// Structural invariants: scene-first, monotone levels, presence-gated
    /// quantity nodes, bounded length.
    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        if self.nodes.is_empty() || self.nodes.len() > MAX_CHAIN_LEN {
            return Err(CpSegError::Validation(format!(
                "chain length {} outside 1..={MAX_CHAIN_LEN}",
                self.nodes.len()
            )));
        }
        if self.nodes[0].level != PromptLevel::Scene {
            return Err(CpSegError::Validation("chain must start at scene level".into()));
        }
        for pair in self.nodes.windows(2) {
            if pair[1].level < pair[0].level {
                return Err(CpSegError::Validation("chain levels must be non-decreasing".into()));
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.level == PromptLevel::QuantityCondition {
                let Some(target) = node.target_class else {
                    return Err(CpSegError::Validation(
                        "quantity node without a target class".into(),
                    ));
                };
                if target >= taxonomy.len() {
                    return Err(CpSegError::Validation(format!(
                        "quantity node targets class {target} outside taxonomy"
                    )));
                }
                let base = &taxonomy.classes[target].base;
                let gated = self.nodes[..i].iter().any(|n| {
                    n.level == PromptLevel::ClassPresence
                        && n.answer == "yes"
                        && n.target_class
                            .map(|t| taxonomy.classes[t].base == *base)
                            .unwrap_or(false)
                });
                if !gated {
                    return Err(CpSegError::Validation(format!(
                        "quantity node for base {base} lacks a preceding affirmative presence node"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Check a node's answer against the answer recomputed from ground truth.
/// Malformed nodes verify false rather than erroring.
pub fn verify_relevance(node: &PromptNode, sample: &SegSample, taxonomy: &ClassTaxonomy) -> bool {
    match node.level {
        PromptLevel::Scene => node.answer == yes_no(sample.scene_flooded),
        PromptLevel::ClassPresence => {
            let Some(target) = node.target_class else {
                return false;
            };
            if target >= taxonomy.len() {
                return false;
            }
            let base = &taxonomy.classes[target].base;
            node.answer == yes_no(base_present(sample, taxonomy, base))
        }
        PromptLevel::QuantityCondition => {
            let Some(target) = node.target_class else {
                return false;
            };
            if target >= taxonomy.len() {
                return false;
            }
            let Ok(stated) = node.answer.parse::<usize>() else {
                return false;
            };
            count_components(&sample.mask, sample.width, sample.height, target as u8) == stated
        }
    }
}

/// Select the chain for a prompting mode from the sample's stored records.
///
/// Standard keeps only the macro scene cue; Two adds the first presence
/// question; Random draws one node uniformly; ChainOfThought keeps the full
/// chain.
pub fn chain_modes(mode: PromptMode, sample: &SegSample, rng: &mut Rng) -> PromptChain {
    let records = &sample.prompt_records;
    if records.is_empty() {
        return PromptChain::default();
    }
    let nodes = match mode {
        PromptMode::Standard => vec![records[0].clone()],
        PromptMode::Two => {
            let mut nodes = vec![records[0].clone()];
            if let Some(p) = records.iter().find(|n| n.level == PromptLevel::ClassPresence) {
                nodes.push(p.clone());
            }
            nodes
        }
        PromptMode::Random => vec![records[rng.below(records.len())].clone()],
        PromptMode::ChainOfThought => records.clone(),
    };
    PromptChain { nodes }
}

/// A question-only chain for images without annotations: the scene question
/// plus one presence question per non-background base. Answers are left
/// empty, so `sentence()` degrades to the bare question.
pub fn generic_chain(taxonomy: &ClassTaxonomy) -> PromptChain {
    let mut nodes = vec![PromptNode {
        level: PromptLevel::Scene,
        question: scene_question(),
        answer: String::new(),
        target_class: None,
    }];
    for (base, ids) in taxonomy.bases() {
        if base == taxonomy.background {
            continue;
        }
        nodes.push(PromptNode {
            level: PromptLevel::ClassPresence,
            question: presence_question(&base),
            answer: String::new(),
            target_class: Some(ids[0]),
        });
    }
    nodes.truncate(MAX_CHAIN_LEN);
    PromptChain { nodes }
}
