//! Synthetic scene domain: the deterministic "image space" the chained
//! pipeline generates into and the oracle that scores it.
//!
//! A scene latent is a fixed-length concatenation of per-subject blocks.
//! Each block has five slots of `content_dim` coordinates:
//!
//! `[ core | clothing | holding | accessory | position ]`
//!
//! Content vectors are assigned deterministically from the label pools
//! (labels spread on circles, qualifier offsets from seeded hashes), so the
//! domain doubles as the ground-truth oracle: a subject "exists" when its
//! core slot sits near the subject's content vector, an attribute "matches"
//! when its slot sits near the category-plus-qualifiers vector, and a
//! relationship "holds" when consecutive position slots differ by the
//! connector's shift. The designated coordinate block plays the detector
//! crop's role.

use crate::prompt::{
    render_flat, render_subject_phrase, tokenize, AttributeKind, AttributeNode, NodeId,
    PromptTree, TemplateRewriter, LevelRewriter,
};
use crate::rng::{bag_embedding, derive_seed, hash_embedding};
use crate::{CoreError, Result};
use ndarray::{s, Array1, ArrayView1};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Slot order within a subject block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Core,
    Clothing,
    Holding,
    Accessory,
    Position,
}

pub const SLOT_COUNT: usize = 5;

impl Slot {
    fn index(self) -> usize {
        match self {
            Slot::Core => 0,
            Slot::Clothing => 1,
            Slot::Holding => 2,
            Slot::Accessory => 3,
            Slot::Position => 4,
        }
    }

    pub fn for_kind(kind: AttributeKind) -> Result<Slot> {
        match kind {
            AttributeKind::Clothing => Ok(Slot::Clothing),
            AttributeKind::Holding => Ok(Slot::Holding),
            AttributeKind::Accessory => Ok(Slot::Accessory),
            AttributeKind::Other => Err(CoreError::InvalidConfig(
                "scene domain has no slot for attribute kind 'other'".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub max_subjects: usize,
    pub content_dim: usize,
    pub embed_dim: usize,
    pub seed: u64,
    /// Radius of the content circles for subject cores and categories.
    pub content_scale: f64,
    /// Norm of one qualifier token's content offset.
    pub qualifier_scale: f64,
    /// Radius of the connector shift circle.
    pub shift_scale: f64,
    /// Generation std around target contents.
    pub sigma_gen: f64,
    /// Existence region radius around the subject core content.
    pub r_exist: f64,
    /// Attribute region radius around the detailed content.
    pub r_attr: f64,
    /// Relationship tolerance on position differences.
    pub r_rel: f64,
    /// Distance scale of the toy global alignment score.
    pub clip_scale: f64,
    /// Distance scale of the toy preference score.
    pub hps_scale: f64,
    /// Width of one rubric band outside the target region.
    pub band_width: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            max_subjects: 3,
            content_dim: 2,
            embed_dim: 96,
            seed: 0x5ce7e,
            content_scale: 1.6,
            qualifier_scale: 0.4,
            shift_scale: 1.0,
            sigma_gen: 0.15,
            r_exist: 0.9,
            r_attr: 0.7,
            r_rel: 0.7,
            clip_scale: 6.0,
            hps_scale: 2.0,
            band_width: 0.4,
        }
    }
}

/// Deterministic label→content assignment plus the oracle predicates.
#[derive(Debug, Clone)]
pub struct SceneDomain {
    pub config: SceneConfig,
    subject_core: BTreeMap<String, Array1<f64>>,
    category_content: BTreeMap<(usize, String), Array1<f64>>,
    connector_shift: BTreeMap<String, Array1<f64>>,
    /// Fixed projection from the condition-embedding space to content
    /// space. Qualifier offsets are its image of the qualifier tokens'
    /// embedding vectors, so detailed contents are an exact linear readout
    /// of the visible condition bag and generalize to unseen qualifier
    /// combinations.
    qualifier_projection: ndarray::Array2<f64>,
}

fn circle_points(n: usize, radius: f64, phase: f64, dim: usize) -> Vec<Array1<f64>> {
    (0..n)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64 + phase;
            let mut v = Array1::zeros(dim);
            v[0] = radius * a.cos();
            if dim > 1 {
                v[1] = radius * a.sin();
            }
            v
        })
        .collect()
}

fn kind_id(kind: AttributeKind) -> usize {
    match kind {
        AttributeKind::Clothing => 0,
        AttributeKind::Holding => 1,
        AttributeKind::Accessory => 2,
        AttributeKind::Other => 3,
    }
}

impl SceneDomain {
    /// Assign contents for the given pools. Labels are spread on circles so
    /// distinct labels stay separated by construction.
    pub fn new(
        config: SceneConfig,
        subjects: &[String],
        clothing: &[String],
        holding: &[String],
        accessory: &[String],
        connectors: &[String],
    ) -> Result<Self> {
        if config.content_dim < 2 {
            return Err(CoreError::InvalidConfig("content_dim must be >= 2".into()));
        }
        let dim = config.content_dim;
        let mut subject_core = BTreeMap::new();
        for (label, v) in subjects
            .iter()
            .zip(circle_points(subjects.len().max(1), config.content_scale, 0.0, dim))
        {
            subject_core.insert(label.clone(), v);
        }
        let mut category_content = BTreeMap::new();
        for (k, pool) in [(0usize, clothing), (1, holding), (2, accessory)] {
            let phase = 0.7 + k as f64; // decorrelate kind circles
            for (label, v) in pool
                .iter()
                .zip(circle_points(pool.len().max(1), config.content_scale, phase, dim))
            {
                category_content.insert((k, label.clone()), v);
            }
        }
        let mut connector_shift = BTreeMap::new();
        for (label, v) in connectors
            .iter()
            .zip(circle_points(connectors.len().max(1), config.shift_scale, 0.3, dim))
        {
            connector_shift.insert(label.clone(), v);
        }
        let proj_seed = derive_seed(config.seed, "qualifier-projection");
        let qualifier_projection = ndarray::Array2::from_shape_fn((dim, config.embed_dim), |(i, j)| {
            hash_embedding(proj_seed, &format!("row{i}"), config.embed_dim)[j]
                * (config.embed_dim as f64).sqrt()
        });
        Ok(Self {
            config,
            subject_core,
            category_content,
            connector_shift,
            qualifier_projection,
        })
    }

    /// Build from benchmark word pools.
    pub fn from_pools(config: SceneConfig, pools: &crate::benchgen::WordPools) -> Result<Self> {
        Self::new(
            config,
            &pools.subjects,
            &pools.clothing,
            &pools.holding,
            &pools.accessory,
            &pools.connectors,
        )
    }

    pub fn block_dim(&self) -> usize {
        SLOT_COUNT * self.config.content_dim
    }

    pub fn composite_dim(&self) -> usize {
        self.config.max_subjects * self.block_dim()
    }

    fn slot_range(&self, subject_idx: usize, slot: Slot) -> Result<std::ops::Range<usize>> {
        if subject_idx >= self.config.max_subjects {
            return Err(CoreError::InvalidConfig(format!(
                "subject index {subject_idx} outside the {}-block layout",
                self.config.max_subjects
            )));
        }
        let d = self.config.content_dim;
        let start = subject_idx * self.block_dim() + slot.index() * d;
        Ok(start..start + d)
    }

    /// Slot view of a composite sample.
    pub fn slot_of<'a>(
        &self,
        sample: ArrayView1<'a, f64>,
        subject_idx: usize,
        slot: Slot,
    ) -> Result<ArrayView1<'a, f64>> {
        if sample.len() != self.composite_dim() {
            return Err(CoreError::DimensionMismatch {
                expected: self.composite_dim(),
                got: sample.len(),
            });
        }
        let r = self.slot_range(subject_idx, slot)?;
        Ok(sample.slice_move(s![r.start..r.end]))
    }

    /// Content portion of a subject block (all slots except position);
    /// this is what the embedding-similarity scorer compares.
    pub fn subject_content_of(
        &self,
        sample: ArrayView1<f64>,
        subject_idx: usize,
    ) -> Result<Array1<f64>> {
        let mut out = Vec::with_capacity(4 * self.config.content_dim);
        for slot in [Slot::Core, Slot::Clothing, Slot::Holding, Slot::Accessory] {
            out.extend(self.slot_of(sample, subject_idx, slot)?.iter().cloned());
        }
        Ok(Array1::from_vec(out))
    }

    pub fn subject_core(&self, label: &str) -> Result<&Array1<f64>> {
        self.subject_core
            .get(label)
            .ok_or_else(|| CoreError::InvalidConfig(format!("unknown subject label {label:?}")))
    }

    pub fn category_content(&self, kind: AttributeKind, category: &str) -> Result<&Array1<f64>> {
        self.category_content
            .get(&(kind_id(kind), category.to_string()))
            .ok_or_else(|| {
                CoreError::InvalidConfig(format!("unknown {kind:?} category {category:?}"))
            })
    }

    pub fn connector_shift(&self, connector: &str) -> Result<&Array1<f64>> {
        self.connector_shift
            .get(connector)
            .ok_or_else(|| CoreError::InvalidConfig(format!("unknown connector {connector:?}")))
    }

    /// Embedding vector of one condition token (the same vectors
    /// [`Self::condition_embedding`] sums).
    fn token_vector(&self, token: &str) -> Array1<f64> {
        hash_embedding(
            derive_seed(self.config.seed, "condition-embedding"),
            token,
            self.config.embed_dim,
        )
    }

    /// Detailed content of an attribute: category content plus the fixed
    /// projection of each qualifier token's condition-embedding vector.
    /// The offsets are therefore a linear readout of the visible condition
    /// bag, which is what lets a conditional generator generalize to unseen
    /// qualifier combinations.
    pub fn attr_detail_content(&self, attr: &AttributeNode) -> Result<Array1<f64>> {
        let mut v = self.category_content(attr.kind, &attr.category)?.clone();
        for q in &attr.qualifiers {
            for tok in tokenize(q) {
                let offset = self.qualifier_projection.dot(&self.token_vector(&tok));
                v.scaled_add(self.config.qualifier_scale, &offset);
            }
        }
        Ok(v)
    }

    /// Cumulative placement of each subject: v_0 = 0, v_{i+1} = v_i + shift.
    pub fn placements(&self, tree: &PromptTree) -> Result<Vec<Array1<f64>>> {
        let mut out = vec![Array1::zeros(self.config.content_dim)];
        for (i, conn) in tree.connectors.iter().enumerate() {
            let next = &out[i] + self.connector_shift(conn)?;
            out.push(next);
        }
        Ok(out)
    }

    fn check_tree_fits(&self, tree: &PromptTree) -> Result<()> {
        if tree.subjects.len() > self.config.max_subjects {
            return Err(CoreError::InvalidConfig(format!(
                "{} subjects exceed the {}-block layout",
                tree.subjects.len(),
                self.config.max_subjects
            )));
        }
        Ok(())
    }

    fn write_slot(&self, target: &mut Array1<f64>, idx: usize, slot: Slot, v: &Array1<f64>) {
        let r = self.slot_range(idx, slot).expect("validated index");
        target.slice_mut(s![r.start..r.end]).assign(v);
    }

    /// Target latent of an attribute step: the detailed content in the
    /// canonical (first) block's kind slot, everything else zero.
    pub fn attr_step_target(&self, tree: &PromptTree, i: usize, j: usize) -> Result<Array1<f64>> {
        self.check_tree_fits(tree)?;
        let attr = &tree.subjects[i].attributes[j];
        let mut out = Array1::zeros(self.composite_dim());
        let content = self.attr_detail_content(attr)?;
        self.write_slot(&mut out, 0, Slot::for_kind(attr.kind)?, &content);
        Ok(out)
    }

    /// Target latent of a subject step: the subject rendered alone in the
    /// canonical block, with its attributes' detailed contents in their
    /// slots.
    pub fn subject_step_target(&self, tree: &PromptTree, i: usize) -> Result<Array1<f64>> {
        self.check_tree_fits(tree)?;
        let subject = &tree.subjects[i];
        let mut out = Array1::zeros(self.composite_dim());
        self.write_slot(&mut out, 0, Slot::Core, self.subject_core(&subject.label)?);
        for attr in &subject.attributes {
            let content = self.attr_detail_content(attr)?;
            self.write_slot(&mut out, 0, Slot::for_kind(attr.kind)?, &content);
        }
        Ok(out)
    }

    /// Target latent of the full scene: every subject in its own block with
    /// placements accumulated along the connector chain.
    pub fn composite_target(&self, tree: &PromptTree) -> Result<Array1<f64>> {
        self.check_tree_fits(tree)?;
        let placements = self.placements(tree)?;
        let mut out = Array1::zeros(self.composite_dim());
        for (i, subject) in tree.subjects.iter().enumerate() {
            self.write_slot(&mut out, i, Slot::Core, self.subject_core(&subject.label)?);
            for attr in &subject.attributes {
                let content = self.attr_detail_content(attr)?;
                self.write_slot(&mut out, i, Slot::for_kind(attr.kind)?, &content);
            }
            self.write_slot(&mut out, i, Slot::Position, &placements[i]);
        }
        Ok(out)
    }

    fn dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// Subject existence: core slot within `r_exist` of the subject content.
    pub fn exist_ok(&self, sample: ArrayView1<f64>, tree: &PromptTree, i: usize) -> Result<bool> {
        let core = self.slot_of(sample, i, Slot::Core)?;
        let target = self.subject_core(&tree.subjects[i].label)?;
        Ok(Self::dist(core, target.view()) <= self.config.r_exist)
    }

    /// Attribute accuracy: the kind slot within `r_attr` of the detailed
    /// content.
    pub fn attribute_ok(
        &self,
        sample: ArrayView1<f64>,
        tree: &PromptTree,
        i: usize,
        j: usize,
    ) -> Result<bool> {
        let attr = &tree.subjects[i].attributes[j];
        let got = self.slot_of(sample, i, Slot::for_kind(attr.kind)?)?;
        let target = self.attr_detail_content(attr)?;
        Ok(Self::dist(got, target.view()) <= self.config.r_attr)
    }

    /// Relationship between consecutive subjects `k` and `k+1`: the position
    /// difference within `r_rel` of the connector's shift.
    pub fn relationship_ok(
        &self,
        sample: ArrayView1<f64>,
        tree: &PromptTree,
        k: usize,
    ) -> Result<bool> {
        if k + 1 >= tree.subjects.len() {
            return Err(CoreError::InvalidConfig(format!(
                "relationship index {k} for {} subjects",
                tree.subjects.len()
            )));
        }
        let p0 = self.slot_of(sample, k, Slot::Position)?;
        let p1 = self.slot_of(sample, k + 1, Slot::Position)?;
        let shift = self.connector_shift(&tree.connectors[k])?;
        let diff = &p1.to_owned() - &p0.to_owned();
        Ok(Self::dist(diff.view(), shift.view()) <= self.config.r_rel)
    }

    /// Rubric band score: 4 inside the region, one less per `band_width`
    /// outside, floored at 0.
    pub fn rubric_from_distance(&self, dist: f64, radius: f64) -> u8 {
        if dist <= radius {
            4
        } else {
            let bands = ((dist - radius) / self.config.band_width).ceil() as i64;
            (4 - bands).max(0) as u8
        }
    }

    /// Subject-consistency rubric on the core slot distance.
    pub fn subject_rubric(&self, sample: ArrayView1<f64>, tree: &PromptTree, i: usize) -> Result<u8> {
        let core = self.slot_of(sample, i, Slot::Core)?;
        let target = self.subject_core(&tree.subjects[i].label)?;
        Ok(self.rubric_from_distance(Self::dist(core, target.view()), self.config.r_exist))
    }

    /// Relationship rubric on the position-difference distance. For the
    /// first subject (no incoming connector) the rubric checks its absolute
    /// placement at the origin.
    pub fn relationship_rubric(
        &self,
        sample: ArrayView1<f64>,
        tree: &PromptTree,
        i: usize,
    ) -> Result<u8> {
        if i == 0 {
            let p0 = self.slot_of(sample, 0, Slot::Position)?;
            let zero = Array1::zeros(self.config.content_dim);
            return Ok(
                self.rubric_from_distance(Self::dist(p0, zero.view()), self.config.r_rel)
            );
        }
        let p0 = self.slot_of(sample, i - 1, Slot::Position)?;
        let p1 = self.slot_of(sample, i, Slot::Position)?;
        let shift = self.connector_shift(&tree.connectors[i - 1])?;
        let diff = &p1.to_owned() - &p0.to_owned();
        Ok(self.rubric_from_distance(Self::dist(diff.view(), shift.view()), self.config.r_rel))
    }

    /// Toy text-image alignment: `1 - min(1, ‖sample - target‖/clip_scale)`.
    /// Radially monotone toward the prompt's joint target.
    pub fn clip_score(&self, sample: ArrayView1<f64>, tree: &PromptTree) -> Result<f64> {
        let target = self.composite_target(tree)?;
        let d = Self::dist(sample, target.view());
        Ok(1.0 - (d / self.config.clip_scale).min(1.0))
    }

    /// Toy preference score: well-formedness of occupied slots measured as
    /// mean distance to the *nearest* valid content of each slot type
    /// (prompt-independent, unlike the alignment score).
    pub fn hps_score(&self, sample: ArrayView1<f64>, tree: &PromptTree) -> Result<f64> {
        self.check_tree_fits(tree)?;
        let mut acc = 0.0;
        let mut count = 0usize;
        for i in 0..tree.subjects.len() {
            let core = self.slot_of(sample, i, Slot::Core)?;
            let best = self
                .subject_core
                .values()
                .map(|v| Self::dist(core, v.view()))
                .fold(f64::INFINITY, f64::min);
            acc += best;
            count += 1;
            for attr in &tree.subjects[i].attributes {
                let kid = kind_id(attr.kind);
                let slot = self.slot_of(sample, i, Slot::for_kind(attr.kind)?)?;
                let best = self
                    .category_content
                    .iter()
                    .filter(|((k, _), _)| *k == kid)
                    .map(|(_, v)| Self::dist(slot, v.view()))
                    .fold(f64::INFINITY, f64::min);
                acc += best;
                count += 1;
            }
        }
        let mean = if count == 0 { 0.0 } else { acc / count as f64 };
        Ok(1.0 - (mean / self.config.hps_scale).min(1.0))
    }

    /// Condition tokens of a plan node. Attribute steps see the detailed
    /// text; subject steps see the categorical level prompt (details arrive
    /// through references); the root step sees subject labels plus
    /// position-tagged connector tokens (relational structure only).
    pub fn condition_tokens(&self, tree: &PromptTree, node: NodeId, folded: bool) -> Result<Vec<String>> {
        Ok(match node {
            NodeId::Attribute(i, j) => tokenize(&tree.subjects[i].attributes[j].text),
            NodeId::Subject(i) => {
                if folded {
                    tokenize(&render_subject_phrase(&tree.subjects[i]))
                } else if tree.subjects[i].level_prompt.is_empty() {
                    tokenize(&TemplateRewriter.subject_level(&tree.subjects[i])?)
                } else {
                    tokenize(&tree.subjects[i].level_prompt)
                }
            }
            NodeId::Root => {
                let mut toks: Vec<String> = tree
                    .subjects
                    .iter()
                    .flat_map(|s| tokenize(&s.label))
                    .collect();
                for (k, conn) in tree.connectors.iter().enumerate() {
                    toks.push(format!("relation{k}:{conn}"));
                }
                toks
            }
        })
    }

    /// Bag embedding of a node's condition tokens.
    pub fn condition_embedding(&self, tree: &PromptTree, node: NodeId, folded: bool) -> Result<Array1<f64>> {
        let tokens = self.condition_tokens(tree, node, folded)?;
        Ok(bag_embedding(
            derive_seed(self.config.seed, "condition-embedding"),
            &tokens,
            self.config.embed_dim,
        ))
    }

    /// Flat-text bag embedding for the monolithic baseline: plain word
    /// tokens of the whole detailed prompt, order- and binding-free, the
    /// desk-scale analogue of an entangled text encoding.
    pub fn monolithic_embedding(&self, tree: &PromptTree) -> Array1<f64> {
        let text = if tree.root_text.is_empty() {
            render_flat(tree)
        } else {
            tree.root_text.clone()
        };
        bag_embedding(
            derive_seed(self.config.seed, "condition-embedding"),
            &tokenize(&text),
            self.config.embed_dim,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::WordPools;
    use crate::prompt::parse_prompt;

    fn domain() -> SceneDomain {
        SceneDomain::from_pools(SceneConfig::default(), &WordPools::hard_domain()).unwrap()
    }

    fn tree2() -> PromptTree {
        parse_prompt("a dog wearing a space suit standing next to a cat, holding a sign").unwrap()
    }

    #[test]
    fn layout_dimensions() {
        let d = domain();
        assert_eq!(d.block_dim(), 10);
        assert_eq!(d.composite_dim(), 30);
        assert!(d.slot_of(Array1::zeros(30).view(), 3, Slot::Core).is_err());
        assert!(d.slot_of(Array1::zeros(7).view(), 0, Slot::Core).is_err());
    }

    #[test]
    fn composite_target_satisfies_all_predicates() {
        let d = domain();
        let tree = tree2();
        let target = d.composite_target(&tree).unwrap();
        for i in 0..2 {
            assert!(d.exist_ok(target.view(), &tree, i).unwrap());
        }
        assert!(d.attribute_ok(target.view(), &tree, 0, 0).unwrap());
        assert!(d.attribute_ok(target.view(), &tree, 1, 0).unwrap());
        assert!(d.relationship_ok(target.view(), &tree, 0).unwrap());
        assert_eq!(d.subject_rubric(target.view(), &tree, 0).unwrap(), 4);
        assert_eq!(d.relationship_rubric(target.view(), &tree, 1).unwrap(), 4);
        assert!((d.clip_score(target.view(), &tree).unwrap() - 1.0).abs() < 1e-12);
        assert!(d.hps_score(target.view(), &tree).unwrap() > 0.99);
    }

    #[test]
    fn predicates_fail_independently() {
        let d = domain();
        let tree = tree2();
        let target = d.composite_target(&tree).unwrap();

        // break subject 0 existence only
        let mut broken = target.clone();
        {
            let r = d.slot_range(0, Slot::Core).unwrap();
            broken[r.start] += 5.0;
        }
        assert!(!d.exist_ok(broken.view(), &tree, 0).unwrap());
        assert!(d.exist_ok(broken.view(), &tree, 1).unwrap());
        assert!(d.attribute_ok(broken.view(), &tree, 0, 0).unwrap());
        assert!(d.relationship_ok(broken.view(), &tree, 0).unwrap());

        // break the relationship only (shift both positions apart)
        let mut broken = target.clone();
        {
            let r = d.slot_range(1, Slot::Position).unwrap();
            broken[r.start] += 2.0;
        }
        assert!(!d.relationship_ok(broken.view(), &tree, 0).unwrap());
        assert!(d.exist_ok(broken.view(), &tree, 0).unwrap());
        assert!(d.attribute_ok(broken.view(), &tree, 1, 0).unwrap());

        // break attribute only: nudge the clothing slot past r_attr but the
        // core stays put
        let mut broken = target.clone();
        {
            let r = d.slot_range(0, Slot::Clothing).unwrap();
            broken[r.start] += d.config.r_attr + 0.2;
        }
        assert!(!d.attribute_ok(broken.view(), &tree, 0, 0).unwrap());
        assert!(d.exist_ok(broken.view(), &tree, 0).unwrap());
    }

    #[test]
    fn rubric_band_table() {
        let d = domain();
        // distance exactly in-region
        assert_eq!(d.rubric_from_distance(0.0, 0.9), 4);
        assert_eq!(d.rubric_from_distance(0.9, 0.9), 4);
        // one band out
        assert_eq!(d.rubric_from_distance(0.9 + 0.3, 0.9), 3);
        // two bands out -> rubric 2 -> normalized 0.5
        assert_eq!(d.rubric_from_distance(0.9 + 0.75, 0.9), 2);
        assert_eq!(d.rubric_from_distance(10.0, 0.9), 0);
    }

    #[test]
    fn clip_score_is_radially_monotone() {
        let d = domain();
        let tree = tree2();
        let target = d.composite_target(&tree).unwrap();
        let mut prev = 1.0;
        for k in 1..=10 {
            let mut sample = target.clone();
            sample[0] += 0.5 * k as f64;
            let s = d.clip_score(sample.view(), &tree).unwrap();
            assert!(s <= prev + 1e-12);
            prev = s;
        }
    }

    #[test]
    fn qualifier_offsets_shift_detail_content() {
        let d = domain();
        let tree = tree2();
        let attr = &tree.subjects[0].attributes[0];
        let plain = d.attr_detail_content(attr).unwrap();
        let mut detailed = attr.clone();
        detailed.qualifiers = vec!["crimson".into(), "leather-bound".into()];
        let shifted = d.attr_detail_content(&detailed).unwrap();
        let diff = (&shifted - &plain).mapv(f64::abs).sum();
        assert!(diff > 0.05, "qualifiers had no effect");
        // deterministic
        assert_eq!(shifted, d.attr_detail_content(&detailed).unwrap());
    }

    #[test]
    fn root_condition_binds_connector_order() {
        let d = domain();
        let t1 = parse_prompt("a dog standing next to a cat behind a king").unwrap();
        let t2 = parse_prompt("a dog behind a cat standing next to a king").unwrap();
        let e1 = d.condition_embedding(&t1, NodeId::Root, false).unwrap();
        let e2 = d.condition_embedding(&t2, NodeId::Root, false).unwrap();
        assert_ne!(e1, e2);
        // while the monolithic bag of the same word multiset is identical
        let m1 = d.monolithic_embedding(&t1);
        let m2 = d.monolithic_embedding(&t2);
        let diff = (&m1 - &m2).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "plain bags should not bind order");
    }

    #[test]
    fn unknown_labels_are_rejected() {
        let d = domain();
        let tree = parse_prompt("a unicorn").unwrap();
        assert!(d.composite_target(&tree).is_err());
    }
}
