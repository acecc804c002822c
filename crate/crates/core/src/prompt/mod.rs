//! Prompt rendering for each strategy, the token estimator and the
//! entity-list trim rule.

mod template;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ClinicalDocument, EntityLabel, SampleSet};
use crate::response::ENTITY_LINE_GRAMMAR;

pub use template::{
    FewShotTemplates, PromptTemplate, FEW_SHOT_PLACEHOLDER, OUTPUT_GRAMMAR_PLACEHOLDER, TEST_INPUT_PLACEHOLDER,
};

/// Default fraction removed from each entity list per trim.
pub const DEFAULT_TRIM_FRACTION: f64 = 0.10;

/// Prompting strategies. Variant order matches the order of their short
/// names (`doc` < `ent` < `sent` < `zero`), which is the canonical ordering
/// for ensemble inputs and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PromptStrategy {
    #[serde(rename = "doc")]
    FewShotDocument,
    #[serde(rename = "ent")]
    FewShotEntities,
    #[serde(rename = "sent")]
    FewShotSentences,
    #[serde(rename = "zero")]
    ZeroShot,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 4] = [
        PromptStrategy::ZeroShot,
        PromptStrategy::FewShotDocument,
        PromptStrategy::FewShotSentences,
        PromptStrategy::FewShotEntities,
    ];

    /// The ensemble's default members.
    pub const FEW_SHOT: [PromptStrategy; 3] =
        [PromptStrategy::FewShotDocument, PromptStrategy::FewShotSentences, PromptStrategy::FewShotEntities];

    pub fn name(self) -> &'static str {
        match self {
            PromptStrategy::ZeroShot => "zero",
            PromptStrategy::FewShotDocument => "doc",
            PromptStrategy::FewShotSentences => "sent",
            PromptStrategy::FewShotEntities => "ent",
        }
    }

    /// Row label used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            PromptStrategy::ZeroShot => "Zero-shot",
            PromptStrategy::FewShotDocument => "Few-shot 1",
            PromptStrategy::FewShotSentences => "Few-shot 2",
            PromptStrategy::FewShotEntities => "Few-shot 3",
        }
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "zero" | "zero_shot" => Ok(PromptStrategy::ZeroShot),
            "doc" | "few_shot_document" => Ok(PromptStrategy::FewShotDocument),
            "sent" | "few_shot_sentences" => Ok(PromptStrategy::FewShotSentences),
            "ent" | "few_shot_entities" => Ok(PromptStrategy::FewShotEntities),
            other => Err(format!("unknown strategy `{other}` (expected zero, doc, sent or ent)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("samples were drawn for {samples} but the prompt is for {prompt}")]
    StrategyMismatch { prompt: PromptStrategy, samples: PromptStrategy },
    #[error("test document `{0}` is empty")]
    EmptyTestDocument(String),
    #[error("prompt needs {estimate} tokens after trimming, budget is {budget}")]
    BudgetUnsatisfiable { estimate: usize, budget: usize },
    #[error("template: {0}")]
    Template(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionName {
    TaskDefinition,
    Context,
    CategoryDefinitions,
    OutputFormat,
    UnknownInstruction,
    FewShotBlock,
    TestInput,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSection {
    pub name: SectionName,
    pub text: String,
}

/// A rendered prompt. `trims_applied` counts entity-list trims performed
/// while fitting the budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptArtifact {
    pub strategy: PromptStrategy,
    pub sections: Vec<PromptSection>,
    pub token_estimate: usize,
    pub template_version: String,
    pub trims_applied: u32,
}

impl PromptArtifact {
    pub fn text(&self) -> String {
        self.sections.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n\n")
    }

    pub fn section(&self, name: SectionName) -> Option<&str> {
        self.sections.iter().find(|s| s.name == name).map(|s| s.text.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub max_tokens: Option<usize>,
    pub trim_fraction: f64,
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self { max_tokens: None, trim_fraction: DEFAULT_TRIM_FRACTION }
    }
}

/// `ceil(bytes / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// Removes `ceil(fraction * n)` items from the tail of every entity list.
/// Other collections are left alone.
pub fn trim_entity_samples(samples: &SampleSet, fraction: f64) -> SampleSet {
    let mut out = samples.clone();
    for label in EntityLabel::GOLD {
        if let Some(list) = out.entities.get_mut(label) {
            let remove = trim_count(list.len(), fraction).min(list.len());
            list.truncate(list.len() - remove);
        }
    }
    out
}

fn trim_count(n: usize, fraction: f64) -> usize {
    let exact = fraction * n as f64;
    // 0.1 * 30 is 3.0000000000000004 in binary floating point
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

/// Renders the prompt for `strategy`. An over-budget entity-list prompt is
/// trimmed once by `budget.trim_fraction`; if it is still over budget, or
/// any other strategy is over budget, rendering fails.
pub fn build_prompt(
    strategy: PromptStrategy,
    samples: &SampleSet,
    test_document: &ClinicalDocument,
    template: &PromptTemplate,
    budget: &TokenBudget,
) -> Result<PromptArtifact, PromptError> {
    fit_prompt(strategy, samples, test_document, template, budget).map(|(artifact, _)| artifact)
}

/// Like [`build_prompt`] but also returns the samples actually rendered.
pub(crate) fn fit_prompt(
    strategy: PromptStrategy,
    samples: &SampleSet,
    test_document: &ClinicalDocument,
    template: &PromptTemplate,
    budget: &TokenBudget,
) -> Result<(PromptArtifact, SampleSet), PromptError> {
    if samples.strategy != strategy {
        return Err(PromptError::StrategyMismatch { prompt: strategy, samples: samples.strategy });
    }
    if test_document.is_empty() {
        return Err(PromptError::EmptyTestDocument(test_document.doc_id.clone()));
    }
    let artifact = render(strategy, samples, test_document, template, 0);
    let Some(max) = budget.max_tokens else {
        return Ok((artifact, samples.clone()));
    };
    if artifact.token_estimate <= max {
        return Ok((artifact, samples.clone()));
    }
    if strategy != PromptStrategy::FewShotEntities {
        return Err(PromptError::BudgetUnsatisfiable { estimate: artifact.token_estimate, budget: max });
    }
    let trimmed = trim_entity_samples(samples, budget.trim_fraction);
    let artifact = render(strategy, &trimmed, test_document, template, 1);
    if artifact.token_estimate > max {
        return Err(PromptError::BudgetUnsatisfiable { estimate: artifact.token_estimate, budget: max });
    }
    Ok((artifact, trimmed))
}

fn render(
    strategy: PromptStrategy,
    samples: &SampleSet,
    test_document: &ClinicalDocument,
    template: &PromptTemplate,
    trims_applied: u32,
) -> PromptArtifact {
    let mut sections = vec![
        section(SectionName::TaskDefinition, &template.task_definition),
        section(SectionName::Context, &template.context),
        section(SectionName::CategoryDefinitions, &template.category_definitions),
        section(
            SectionName::OutputFormat,
            &template.output_format.replace(OUTPUT_GRAMMAR_PLACEHOLDER, ENTITY_LINE_GRAMMAR),
        ),
        section(SectionName::UnknownInstruction, &template.unknown_instruction),
    ];
    let few_shot = match strategy {
        PromptStrategy::ZeroShot => None,
        PromptStrategy::FewShotDocument => Some((
            &template.few_shot.document,
            samples.documents.iter().map(|d| d.text.as_str()).collect::<Vec<_>>().join("\n\n"),
        )),
        PromptStrategy::FewShotSentences => Some((
            &template.few_shot.sentences,
            samples.sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n"),
        )),
        PromptStrategy::FewShotEntities => Some((&template.few_shot.entities, render_entity_lists(samples))),
    };
    if let Some((wrapper, body)) = few_shot {
        let block = format!("\"\"\"\n{body}\n\"\"\"");
        sections.push(section(SectionName::FewShotBlock, &wrapper.replace(FEW_SHOT_PLACEHOLDER, &block)));
    }
    sections.push(section(
        SectionName::TestInput,
        &template.test_input.replace(TEST_INPUT_PLACEHOLDER, &test_document.text()),
    ));

    let mut artifact = PromptArtifact {
        strategy,
        sections,
        token_estimate: 0,
        template_version: template.version.clone(),
        trims_applied,
    };
    artifact.token_estimate = estimate_tokens(&artifact.text());
    artifact
}

fn render_entity_lists(samples: &SampleSet) -> String {
    EntityLabel::GOLD
        .iter()
        .map(|&label| {
            let tag = label.as_str();
            let items: Vec<String> =
                samples.entities.get(label).iter().map(|e| format!("<{tag}>{e}</{tag}>")).collect();
            format!("{}: {}", label.title(), items.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn section(name: SectionName, text: &str) -> PromptSection {
    PromptSection { name, text: text.trim().to_string() }
}
