//! Accuracy evaluation harness: the three question families over pluggable
//! judges, plus the shipped question/prompt templates for remote VLM
//! backends.

use crate::benchgen::DatasetRecord;
use crate::prompt::{NodeId, PromptTree};
use crate::remote::{JsonlClient, JudgeRequest};
use crate::scene::SceneDomain;
use crate::{CoreError, Result};
use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

/// Prompt templates shipped for remote backends; `{placeholders}` are
/// filled with [`fill_template`].
pub mod templates {
    pub const SUBJECT_GENERATION: &str =
        include_str!("../assets/prompts/subject_generation.txt");
    pub const ATTRIBUTE_REWRITE: &str = include_str!("../assets/prompts/attribute_rewrite.txt");
    pub const PROMPT_REFRAMING: &str = include_str!("../assets/prompts/prompt_reframing.txt");
    pub const SUBJECT_REWARD: &str = include_str!("../assets/prompts/subject_reward.txt");
    pub const RELATION_REWARD: &str = include_str!("../assets/prompts/relation_reward.txt");
    pub const EVAL_EXIST: &str = include_str!("../assets/prompts/eval_exist.txt");
    pub const EVAL_ATTRIBUTE: &str = include_str!("../assets/prompts/eval_attribute.txt");
    pub const EVAL_RELATIONSHIP: &str = include_str!("../assets/prompts/eval_relationship.txt");
}

/// Replace `{key}` placeholders.
pub fn fill_template(template: &str, fields: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in fields {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Answer {
    Yes,
    No,
    Unclear,
}

impl Answer {
    pub fn parse(s: &str) -> Result<Answer> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" => Ok(Answer::Yes),
            "no" => Ok(Answer::No),
            "unclear" => Ok(Answer::Unclear),
            other => Err(CoreError::Judge(format!("unparseable answer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionFamily {
    Exist,
    Attribute,
    Relationship,
}

/// One evaluation question, addressed to a tree node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub family: QuestionFamily,
    pub node: NodeId,
    /// Filled question text (what a remote judge sees).
    pub text: String,
}

/// The question set of a record: existence per subject, attribute match per
/// attribute node, relationship per subject (its interaction with the
/// scene, the first subject checking its own grounding).
pub fn questions_for(tree: &PromptTree) -> Vec<Question> {
    let mut out = Vec::new();
    for (i, subject) in tree.subjects.iter().enumerate() {
        out.push(Question {
            family: QuestionFamily::Exist,
            node: NodeId::Subject(i),
            text: fill_template(templates::EVAL_EXIST, &[("user_prompt", &subject.label)]),
        });
        for (j, attr) in subject.attributes.iter().enumerate() {
            out.push(Question {
                family: QuestionFamily::Attribute,
                node: NodeId::Attribute(i, j),
                text: fill_template(templates::EVAL_ATTRIBUTE, &[("user_prompt", &attr.text)]),
            });
        }
    }
    for (i, subject) in tree.subjects.iter().enumerate() {
        out.push(Question {
            family: QuestionFamily::Relationship,
            node: NodeId::Subject(i),
            text: fill_template(
                templates::EVAL_RELATIONSHIP,
                &[("user_prompt", &subject.label)],
            ),
        });
    }
    out
}

/// Resolves one question to Yes/No/Unclear.
pub trait Judge {
    fn answer(&self, tree: &PromptTree, sample: ArrayView1<f64>, question: &Question)
        -> Result<Answer>;
}

/// Pure oracle judge over the scene domain. Non-finite samples answer
/// Unclear; rubric families answer Yes at rubric >= 3.
#[derive(Debug, Clone)]
pub struct OracleJudge {
    pub scene: SceneDomain,
}

impl Judge for OracleJudge {
    fn answer(
        &self,
        tree: &PromptTree,
        sample: ArrayView1<f64>,
        question: &Question,
    ) -> Result<Answer> {
        if !sample.iter().all(|x| x.is_finite()) {
            return Ok(Answer::Unclear);
        }
        match (question.family, question.node) {
            (QuestionFamily::Exist, NodeId::Subject(i)) => Ok(
                if self.scene.exist_ok(sample, tree, i)? {
                    Answer::Yes
                } else {
                    Answer::No
                },
            ),
            (QuestionFamily::Attribute, NodeId::Attribute(i, j)) => Ok(
                if self.scene.attribute_ok(sample, tree, i, j)? {
                    Answer::Yes
                } else {
                    Answer::No
                },
            ),
            (QuestionFamily::Relationship, NodeId::Subject(i)) => Ok(
                if self.scene.relationship_rubric(sample, tree, i)? >= 3 {
                    Answer::Yes
                } else {
                    Answer::No
                },
            ),
            (family, node) => Err(CoreError::Judge(format!(
                "question family {family:?} does not apply to node {node}"
            ))),
        }
    }
}

/// Remote judge over the shared wire contract; raw responses are kept by
/// the transport layer for audit.
pub struct RemoteJudge {
    pub client: JsonlClient,
}

impl Judge for RemoteJudge {
    fn answer(
        &self,
        _tree: &PromptTree,
        sample: ArrayView1<f64>,
        question: &Question,
    ) -> Result<Answer> {
        let family = match question.family {
            QuestionFamily::Exist => "exist",
            QuestionFamily::Attribute => "attribute",
            QuestionFamily::Relationship => "relationship",
        };
        let resp = self.client.judge(&JudgeRequest {
            family: family.to_string(),
            prompt: question.text.clone(),
            payload: sample.to_vec(),
        })?;
        Answer::parse(&resp.answer)
    }
}

/// Per-question verdict of one record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordVerdict {
    pub record_id: u64,
    pub answers: Vec<(Question, Answer)>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct FamilyCounts {
    pub yes: usize,
    pub no: usize,
    pub unclear: usize,
}

impl FamilyCounts {
    fn add(&mut self, a: Answer) {
        match a {
            Answer::Yes => self.yes += 1,
            Answer::No => self.no += 1,
            Answer::Unclear => self.unclear += 1,
        }
    }

    /// Yes-fraction with Unclear excluded from the numerator only.
    pub fn accuracy(&self) -> f64 {
        let total = self.yes + self.no + self.unclear;
        if total == 0 {
            1.0
        } else {
            self.yes as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub acc_exist: f64,
    pub acc_attribute: f64,
    pub acc_relationship: f64,
    pub exist: FamilyCounts,
    pub attribute: FamilyCounts,
    pub relationship: FamilyCounts,
    pub verdicts: Vec<RecordVerdict>,
    /// Records dropped because the judge failed; never silently scored.
    pub skipped: Vec<(u64, String)>,
}

/// Evaluate accuracies over `(record, sample)` pairs. A judge failure on
/// any question skips the whole record and logs it.
pub fn evaluate_accuracy<J: Judge>(
    items: &[(&DatasetRecord, ndarray::Array1<f64>)],
    judge: &J,
) -> Result<AccuracyReport> {
    let mut exist = FamilyCounts::default();
    let mut attribute = FamilyCounts::default();
    let mut relationship = FamilyCounts::default();
    let mut verdicts = Vec::new();
    let mut skipped = Vec::new();
    for (record, sample) in items {
        let questions = questions_for(&record.tree);
        let mut answers = Vec::with_capacity(questions.len());
        let mut failed = None;
        for q in &questions {
            match judge.answer(&record.tree, sample.view(), q) {
                Ok(a) => answers.push((q.clone(), a)),
                Err(e) => {
                    failed = Some(e.to_string());
                    break;
                }
            }
        }
        match failed {
            Some(reason) => skipped.push((record.id, reason)),
            None => {
                for (q, a) in &answers {
                    match q.family {
                        QuestionFamily::Exist => exist.add(*a),
                        QuestionFamily::Attribute => attribute.add(*a),
                        QuestionFamily::Relationship => relationship.add(*a),
                    }
                }
                verdicts.push(RecordVerdict {
                    record_id: record.id,
                    answers,
                });
            }
        }
    }
    Ok(AccuracyReport {
        acc_exist: exist.accuracy(),
        acc_attribute: attribute.accuracy(),
        acc_relationship: relationship.accuracy(),
        exist,
        attribute,
        relationship,
        verdicts,
        skipped,
    })
}
