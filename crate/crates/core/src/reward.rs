//! Three-level reward algebra over pluggable scorers.
//!
//! `R_total = R_global + R_subject + R_relationship` with all weighting
//! inside the levels: the global level combines alignment and preference
//! channels, the subject level averages per-subject embedding-similarity
//! and rubric channels, and the relationship level averages per-subject
//! rubric scores. Rubrics are integers 0..=4 normalized by /4 before they
//! enter the averages, so every channel lives on [0, 1] and the default
//! weights stay meaningful.

use crate::grpo::RewardFn;
use crate::prompt::{NodeId, PromptTree};
use crate::scene::SceneDomain;
use crate::{CoreError, Result};
use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w_clip: f64,
    pub w_hps: f64,
    pub w_dino: f64,
    pub w_vlm: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_clip: 0.7,
            w_hps: 1.4,
            w_dino: 0.7,
            w_vlm: 0.7,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_clip", self.w_clip),
            ("w_hps", self.w_hps),
            ("w_dino", self.w_dino),
            ("w_vlm", self.w_vlm),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(CoreError::InvalidConfig(format!("{name} = {w} invalid")));
            }
        }
        Ok(())
    }
}

/// Integer rubric score on the 0..=4 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricScore(pub u8);

impl RubricScore {
    pub fn new(score: u8) -> Result<Self> {
        if score > 4 {
            return Err(CoreError::Scorer(format!("rubric score {score} > 4")));
        }
        Ok(Self(score))
    }

    /// Normalized to [0, 1] by /4.
    pub fn normalized(self) -> f64 {
        self.0 as f64 / 4.0
    }
}

/// `⟨a,b⟩ / (‖a‖·‖b‖)`, clamped into [-1, 1]. Zero vectors are rejected.
pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(CoreError::Scorer("cosine similarity of zero vector".into()));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `w_clip·S_clip + w_hps·S_hps`.
pub fn global_reward(s_clip: f64, s_hps: f64, weights: &RewardWeights) -> f64 {
    weights.w_clip * s_clip + weights.w_hps * s_hps
}

/// `(1/N)·Σ (w_dino·S_dino + w_vlm·S_vlm)` over per-subject channel pairs.
/// Rubric inputs must already be normalized to [0, 1].
pub fn subject_reward(per_subject: &[(f64, f64)], weights: &RewardWeights) -> Result<f64> {
    if per_subject.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let sum: f64 = per_subject
        .iter()
        .map(|&(dino, vlm)| weights.w_dino * dino + weights.w_vlm * vlm)
        .sum();
    Ok(sum / per_subject.len() as f64)
}

/// `(1/N)·Σ S_vlm_rel`, scores normalized to [0, 1].
pub fn relationship_reward(s_vlm_rel: &[f64]) -> Result<f64> {
    if s_vlm_rel.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    Ok(s_vlm_rel.iter().sum::<f64>() / s_vlm_rel.len() as f64)
}

/// All component scores with the three level rewards and their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    pub s_clip: f64,
    pub s_hps: f64,
    /// Per subject: (S_dino, normalized S_vlm).
    pub per_subject: Vec<(f64, f64)>,
    /// Per subject normalized relationship rubric.
    pub s_vlm_rel: Vec<f64>,
    pub r_global: f64,
    pub r_subject: f64,
    pub r_relationship: f64,
    pub r_total: f64,
}

/// Populate a bundle; `r_total = r_global + r_subject + r_relationship`
/// exactly.
pub fn total_reward(
    s_clip: f64,
    s_hps: f64,
    per_subject: Vec<(f64, f64)>,
    s_vlm_rel: Vec<f64>,
    weights: &RewardWeights,
) -> Result<RewardBundle> {
    weights.validate()?;
    for v in [s_clip, s_hps] {
        if !v.is_finite() {
            return Err(CoreError::non_finite("global score"));
        }
    }
    let r_global = global_reward(s_clip, s_hps, weights);
    let r_subject = subject_reward(&per_subject, weights)?;
    let r_relationship = relationship_reward(&s_vlm_rel)?;
    Ok(RewardBundle {
        s_clip,
        s_hps,
        per_subject,
        s_vlm_rel,
        r_global,
        r_subject,
        r_relationship,
        r_total: r_global + r_subject + r_relationship,
    })
}

/// Score range a backend declares per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub lo: f64,
    pub hi: f64,
}

/// Channels of the scorer interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreChannel {
    Clip,
    Hps,
    Dino,
    SubjectVlm,
    RelationVlm,
}

/// Bundle-producing scorer backend. Implementations must be pure for
/// concurrent read-only use.
pub trait Scorer {
    /// Declared range of a channel's raw scores.
    fn declared_range(&self, channel: ScoreChannel) -> ScoreRange;

    /// Score a composite sample against its prompt tree. `references`
    /// optionally maps subject index → intermediate latent (chain outputs);
    /// absent entries fall back to the oracle's ideal intermediates.
    fn score_bundle(
        &self,
        sample: ArrayView1<f64>,
        tree: &PromptTree,
        references: Option<&BTreeMap<usize, Array1<f64>>>,
    ) -> Result<RewardBundle>;
}

/// Deterministic scorer over the scene oracle: alignment is distance to the
/// prompt's joint target, similarity compares the designated coordinate
/// block against the reference component latent, and rubric channels use
/// the domain's band tables.
#[derive(Debug, Clone)]
pub struct ToyScorer {
    pub scene: SceneDomain,
    pub weights: RewardWeights,
}

impl ToyScorer {
    pub fn new(scene: SceneDomain, weights: RewardWeights) -> Self {
        Self { scene, weights }
    }
}

impl Scorer for ToyScorer {
    fn declared_range(&self, channel: ScoreChannel) -> ScoreRange {
        match channel {
            ScoreChannel::Clip | ScoreChannel::Hps => ScoreRange { lo: 0.0, hi: 1.0 },
            ScoreChannel::Dino => ScoreRange { lo: -1.0, hi: 1.0 },
            ScoreChannel::SubjectVlm | ScoreChannel::RelationVlm => {
                ScoreRange { lo: 0.0, hi: 4.0 }
            }
        }
    }

    fn score_bundle(
        &self,
        sample: ArrayView1<f64>,
        tree: &PromptTree,
        references: Option<&BTreeMap<usize, Array1<f64>>>,
    ) -> Result<RewardBundle> {
        let s_clip = self.scene.clip_score(sample, tree)?;
        let s_hps = self.scene.hps_score(sample, tree)?;
        let mut per_subject = Vec::with_capacity(tree.subjects.len());
        let mut s_vlm_rel = Vec::with_capacity(tree.subjects.len());
        for i in 0..tree.subjects.len() {
            let block = self.scene.subject_content_of(sample, i)?;
            let reference = match references.and_then(|m| m.get(&i)) {
                Some(latent) => self.scene.subject_content_of(latent.view(), 0)?,
                None => {
                    let ideal = self.scene.subject_step_target(tree, i)?;
                    self.scene.subject_content_of(ideal.view(), 0)?
                }
            };
            let s_dino = cosine_similarity(block.view(), reference.view())?;
            let rubric = RubricScore::new(self.scene.subject_rubric(sample, tree, i)?)?;
            per_subject.push((s_dino, rubric.normalized()));
            let rel = RubricScore::new(self.scene.relationship_rubric(sample, tree, i)?)?;
            s_vlm_rel.push(rel.normalized());
        }
        total_reward(s_clip, s_hps, per_subject, s_vlm_rel, &self.weights)
    }
}

/// Terminal-reward adapter: scores a rollout's final latent against a fixed
/// tree with the toy scorer and returns `r_total`.
pub struct BundleReward {
    pub scorer: ToyScorer,
    pub tree: PromptTree,
}

impl RewardFn for BundleReward {
    fn reward(&self, terminal: ArrayView1<f64>) -> Result<f64> {
        self.scorer
            .score_bundle(terminal, &self.tree, None)
            .map(|b| b.r_total)
    }
}

/// Remote scorer client speaking the line-delimited wire contract. Timeouts
/// and transport failures surface as errors (never silent zeros, which
/// would corrupt group advantage normalization).
pub struct RemoteScorer {
    pub client: crate::remote::JsonlClient,
    pub weights: RewardWeights,
}

impl RemoteScorer {
    fn channel_name(channel: ScoreChannel) -> &'static str {
        match channel {
            ScoreChannel::Clip => "clip",
            ScoreChannel::Hps => "hps",
            ScoreChannel::Dino => "dino",
            ScoreChannel::SubjectVlm => "subject-vlm",
            ScoreChannel::RelationVlm => "relation-vlm",
        }
    }

    fn score_channel(
        &self,
        channel: ScoreChannel,
        prompt: &str,
        payload: &[f64],
        reference: Option<&[f64]>,
    ) -> Result<crate::remote::ScoreResponse> {
        self.client.score(&crate::remote::ScoreRequest {
            channel: Self::channel_name(channel).to_string(),
            prompt: prompt.to_string(),
            payload: payload.to_vec(),
            reference: reference.map(|r| r.to_vec()),
        })
    }
}

impl Scorer for RemoteScorer {
    fn declared_range(&self, channel: ScoreChannel) -> ScoreRange {
        match channel {
            ScoreChannel::SubjectVlm | ScoreChannel::RelationVlm => {
                ScoreRange { lo: 0.0, hi: 4.0 }
            }
            // raw model outputs pass through with their declared range
            _ => ScoreRange { lo: -1.0, hi: 1.0 },
        }
    }

    fn score_bundle(
        &self,
        sample: ArrayView1<f64>,
        tree: &PromptTree,
        references: Option<&BTreeMap<usize, Array1<f64>>>,
    ) -> Result<RewardBundle> {
        let flat = sample.to_vec();
        let s_clip = self
            .score_channel(ScoreChannel::Clip, &tree.root_text, &flat, None)?
            .score;
        let s_hps = self
            .score_channel(ScoreChannel::Hps, &tree.root_text, &flat, None)?
            .score;
        let mut per_subject = Vec::new();
        let mut s_vlm_rel = Vec::new();
        for (i, subject) in tree.subjects.iter().enumerate() {
            let reference: Option<Vec<f64>> = references
                .and_then(|m| m.get(&i))
                .map(|z| z.to_vec());
            let level = crate::prompt::level_prompt_of(tree, NodeId::Subject(i)).to_string();
            let dino = self
                .score_channel(ScoreChannel::Dino, &level, &flat, reference.as_deref())?
                .score;
            let subj = self.score_channel(ScoreChannel::SubjectVlm, &level, &flat, None)?;
            let rubric = RubricScore::new(subj.rubric.ok_or_else(|| {
                CoreError::Scorer("subject-vlm response missing rubric".into())
            })?)?;
            per_subject.push((dino, rubric.normalized()));
            let rel = self.score_channel(ScoreChannel::RelationVlm, &subject.label, &flat, None)?;
            let rel_rubric = RubricScore::new(rel.rubric.ok_or_else(|| {
                CoreError::Scorer("relation-vlm response missing rubric".into())
            })?)?;
            s_vlm_rel.push(rel_rubric.normalized());
        }
        total_reward(s_clip, s_hps, per_subject, s_vlm_rel, &self.weights)
    }
}
