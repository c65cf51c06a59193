//! Benchmark record generation: the three-stage template pipeline
//! (subject generation → attribute rewriting → sub-prompt reframing) and the
//! line-delimited dataset format.
//!
//! The hermetic backend draws from shipped word pools sized so that
//! duplicate flat prompts stay below 1% per split at 12k records; remote
//! LLM backends implement the same traits using the shipped prompt
//! templates.

use crate::prompt::{
    render_flat, rewrite_levels, validate_tree, AttributeKind, AttributeNode, PromptTree,
    SubjectNode, TemplateRewriter,
};
use crate::rng::{derive_indexed, derive_seed, fnv1a, stream};
use crate::{CoreError, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};

/// Shipped word pools for the hermetic template backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordPools {
    pub subjects: Vec<String>,
    pub clothing: Vec<String>,
    pub holding: Vec<String>,
    pub accessory: Vec<String>,
    /// First qualifier slot (condition/color/style adjectives).
    pub adjectives: Vec<String>,
    /// Second qualifier slot (surface/material adjectives).
    pub materials: Vec<String>,
    /// Trailing detail phrases ("with <detail>").
    pub details: Vec<String>,
    pub connectors: Vec<String>,
}

fn strs(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for WordPools {
    fn default() -> Self {
        Self {
            subjects: strs(&[
                "dog", "cat", "astronaut", "king", "queen", "knight", "pirate", "robot",
                "wizard", "chef", "firefighter", "ballerina", "cowboy", "detective",
                "scientist", "painter", "drummer", "gardener", "librarian", "magician",
                "nurse", "pilot", "sailor", "samurai", "viking", "acrobat", "archer",
                "barista", "beekeeper", "blacksmith", "clown", "diver", "falconer",
                "fisherman", "jeweler", "juggler", "lumberjack", "mime", "monk",
                "mountaineer", "photographer", "plumber", "postman", "shepherd", "skater",
                "sculptor", "surfer", "violinist",
            ]),
            clothing: strs(&[
                "superman's costume", "space suit", "lab coat", "trench coat", "kimono",
                "tuxedo", "raincoat", "leather jacket", "wool sweater", "denim vest",
                "silk robe", "chain mail", "poncho", "parka", "overalls", "cardigan",
                "windbreaker", "blazer", "flannel shirt", "tracksuit", "apron", "cape",
                "toga", "hoodie", "waistcoat", "duffle coat", "bathrobe", "jumpsuit",
                "tunic", "anorak", "bomber jacket", "peacoat", "sarong", "gown", "cloak",
                "uniform",
            ]),
            holding: strs(&[
                "sign", "book", "lantern", "umbrella", "telescope", "map", "paintbrush",
                "trophy", "basket", "camera", "guitar", "ledger", "compass", "kettle",
                "flashlight", "hammer", "megaphone", "notebook", "pickaxe", "pitcher",
                "rope", "satchel", "shield", "shovel", "sketchpad", "staff", "suitcase",
                "tambourine", "teapot", "torch", "violin", "wand", "wrench", "flag",
                "fan", "broom",
            ]),
            accessory: strs(&[
                "goggles", "glasses", "scarf", "crown", "beret", "monocle", "necklace",
                "bracelet", "earrings", "gloves", "headphones", "helmet", "bandana",
                "bow tie", "brooch", "cufflinks", "eyepatch", "hairpin", "medal",
                "pendant", "pocket watch", "ring", "sash", "sunglasses", "tiara",
                "turban", "visor", "wristband", "anklet", "armband", "badge", "belt",
                "cap", "charm", "locket", "pin",
            ]),
            adjectives: strs(&[
                "ancient", "crimson", "weathered", "gilded", "polished", "tattered",
                "luminous", "midnight-blue", "emerald", "ivory", "rustic", "ornate",
                "sleek", "frosted", "braided", "checkered", "dusty", "embroidered",
                "faded", "glossy", "hand-painted", "iridescent", "jet-black",
                "lacquered", "marbled", "matte", "neon", "oversized", "patched",
                "pearl-white", "pinstriped", "quilted", "ribbed", "scorched", "speckled",
                "striped", "sunbleached", "translucent", "vermilion", "woven",
            ]),
            materials: strs(&[
                "leather-bound", "copper-plated", "velvet-lined", "oak-framed",
                "wax-sealed", "silver-threaded", "clay-fired", "glass-blown",
                "iron-wrought", "silk-trimmed", "bronze-cast", "pine-carved",
                "linen-wrapped", "stone-ground", "tin-stamped", "cork-backed",
                "wool-felted", "bamboo-ribbed", "pewter-edged", "maple-inlaid",
                "canvas-backed", "rubber-soled", "ceramic-glazed", "brass-fitted",
                "cotton-padded", "marble-dusted", "rattan-woven", "steel-riveted",
                "suede-patched", "teak-panelled", "chrome-tipped", "granite-flecked",
                "ash-handled", "felt-capped", "nickel-clasped", "porcelain-white",
                "quartz-studded", "walnut-stained", "zinc-coated", "birch-veneered",
            ]),
            details: strs(&[
                "brass rivets", "frayed edges", "silver stitching", "carved runes",
                "tiny bells", "glowing trim", "copper buckles", "faded lettering",
                "pressed flowers", "woven tassels", "painted stars", "studded seams",
                "curled ribbons", "cracked enamel", "stamped initials", "inked patterns",
                "beaded fringe", "etched spirals", "soft padding", "hidden pockets",
                "polished clasps", "twisted cords", "checkered lining",
                "embossed crests", "feathered edges", "mother-of-pearl inlay",
                "hand-stitched hems", "burnished studs", "antique buttons",
                "tin charms", "crystal droplets", "chalk smudges", "knotted drawstrings",
                "mismatched patches", "crimped borders", "dangling keys",
                "smoked-glass panels", "rolled cuffs", "spiral engravings",
                "woven lanyards",
            ]),
            connectors: crate::prompt::default_connectors(),
        }
    }
}

impl WordPools {
    /// Small pools for the shipped hard three-subject domain.
    pub fn hard_domain() -> Self {
        let full = Self::default();
        let take = |v: &[String], n: usize| v.iter().take(n).cloned().collect::<Vec<_>>();
        Self {
            subjects: take(&full.subjects, 6),
            clothing: take(&full.clothing, 4),
            holding: take(&full.holding, 4),
            accessory: take(&full.accessory, 4),
            adjectives: take(&full.adjectives, 12),
            materials: take(&full.materials, 12),
            details: take(&full.details, 12),
            connectors: take(&full.connectors, 4),
        }
    }

    pub fn pool_for(&self, kind: AttributeKind) -> &[String] {
        match kind {
            AttributeKind::Clothing => &self.clothing,
            AttributeKind::Holding => &self.holding,
            AttributeKind::Accessory => &self.accessory,
            AttributeKind::Other => &self.details,
        }
    }

    /// Stable content hash over the pool words; recorded in manifests.
    pub fn version_hash(&self) -> u64 {
        let joined = serde_json::to_string(self).expect("pools serialize");
        fnv1a(joined.as_bytes())
    }

    /// All tokens that act as categories or labels; qualifier pools must not
    /// collide with these or the containment rule would trip.
    pub fn category_tokens(&self) -> BTreeSet<String> {
        let mut set = BTreeSet::new();
        for pool in [&self.subjects, &self.clothing, &self.holding, &self.accessory] {
            for word in pool {
                for tok in crate::prompt::tokenize(word) {
                    set.insert(tok);
                }
            }
        }
        set
    }
}

/// One subject with category-level attribute assignments (stage 1 output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub subject: String,
    pub clothing: Option<String>,
    pub holding: Option<String>,
    pub accessory: Option<String>,
}

impl SubjectSpec {
    pub fn assigned(&self) -> Vec<(AttributeKind, &str)> {
        let mut out = Vec::new();
        if let Some(c) = &self.clothing {
            out.push((AttributeKind::Clothing, c.as_str()));
        }
        if let Some(h) = &self.holding {
            out.push((AttributeKind::Holding, h.as_str()));
        }
        if let Some(a) = &self.accessory {
            out.push((AttributeKind::Accessory, a.as_str()));
        }
        out
    }
}

/// Stage 1: pick `n` distinct subjects and assign attribute categories from
/// the pools without intra-prompt repetition.
pub fn generate_subjects(pools: &WordPools, n: usize, rng: &mut impl Rng) -> Result<Vec<SubjectSpec>> {
    if pools.subjects.len() < n {
        return Err(CoreError::PoolExhausted(format!(
            "need {n} subjects, pool has {}",
            pools.subjects.len()
        )));
    }
    for (name, pool) in [
        ("clothing", &pools.clothing),
        ("holding", &pools.holding),
        ("accessory", &pools.accessory),
    ] {
        if pool.len() < n {
            return Err(CoreError::PoolExhausted(format!(
                "need {n} {name} items, pool has {}",
                pool.len()
            )));
        }
    }
    let pick_distinct = |pool: &[String], k: usize, rng: &mut dyn rand::RngCore| {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(rng);
        idx[..k].iter().map(|&i| pool[i].clone()).collect::<Vec<_>>()
    };
    let subjects = pick_distinct(&pools.subjects, n, rng);
    let clothing = pick_distinct(&pools.clothing, n, rng);
    let holding = pick_distinct(&pools.holding, n, rng);
    let accessory = pick_distinct(&pools.accessory, n, rng);
    Ok((0..n)
        .map(|i| SubjectSpec {
            subject: subjects[i].clone(),
            clothing: Some(clothing[i].clone()),
            holding: Some(holding[i].clone()),
            accessory: Some(accessory[i].clone()),
        })
        .collect())
}

/// Stage 2 backend: turn a category into a detailed description plus the
/// qualifier tokens that must stay out of higher-level prompts.
pub trait AttributeRewriter {
    /// Rewrite every attribute of a record's specs; implementations manage
    /// their own intra-record no-repetition policy. Returns subject nodes
    /// with detailed attributes attached.
    fn rewrite_record(&self, specs: &[SubjectSpec], seed: u64) -> Result<Vec<SubjectNode>>;
}

/// Deterministic template rewriter:
/// `a[n] <adjective> <material> <category> with <detail>`.
/// The category token is preserved verbatim (containment by construction)
/// and the description stays far below the 40-word bound.
#[derive(Debug, Clone)]
pub struct TemplateAttributeRewriter {
    pub pools: WordPools,
}

impl TemplateAttributeRewriter {
    fn article(word: &str) -> &'static str {
        match word.chars().next().map(|c| c.to_ascii_lowercase()) {
            Some('a') | Some('e') | Some('i') | Some('o') | Some('u') => "an",
            _ => "a",
        }
    }
}

impl AttributeRewriter for TemplateAttributeRewriter {
    fn rewrite_record(&self, specs: &[SubjectSpec], seed: u64) -> Result<Vec<SubjectNode>> {
        let mut rng = stream(derive_seed(seed, "attribute-rewrite"));
        let total: usize = specs.iter().map(|s| s.assigned().len()).sum();
        let draw_distinct = |pool: &[String], k: usize, rng: &mut dyn rand::RngCore| -> Result<Vec<String>> {
            if pool.len() < k {
                return Err(CoreError::PoolExhausted(format!(
                    "qualifier pool of {} too small for {k} attributes",
                    pool.len()
                )));
            }
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(rng);
            Ok(idx[..k].iter().map(|&i| pool[i].clone()).collect())
        };
        let adjectives = draw_distinct(&self.pools.adjectives, total, &mut rng)?;
        let materials = draw_distinct(&self.pools.materials, total, &mut rng)?;
        let details = draw_distinct(&self.pools.details, total, &mut rng)?;

        let mut out = Vec::new();
        let mut k = 0;
        for spec in specs {
            let mut attributes = Vec::new();
            for (kind, category) in spec.assigned() {
                let adj = &adjectives[k];
                let mat = &materials[k];
                let det = &details[k];
                k += 1;
                let text = format!("{} {adj} {mat} {category} with {det}", Self::article(adj));
                let word_count = text.split_whitespace().count();
                debug_assert!(word_count <= 40);
                attributes.push(AttributeNode {
                    kind,
                    category: category.to_string(),
                    text,
                    qualifiers: vec![adj.clone(), mat.clone(), det.clone()],
                });
            }
            out.push(SubjectNode {
                label: spec.subject.clone(),
                level_prompt: String::new(),
                attributes,
            });
        }
        Ok(out)
    }
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Descriptive statistics recorded per prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordStats {
    pub subjects: usize,
    pub attributes: usize,
    pub total_nodes: usize,
    /// Whitespace word count × 1.3.
    pub approx_tokens: f64,
}

pub fn stats_of(tree: &PromptTree, flat: &str) -> RecordStats {
    let subjects = tree.subjects.len();
    let attributes = tree.subjects.iter().map(|s| s.attributes.len()).sum();
    RecordStats {
        subjects,
        attributes,
        total_nodes: 1 + subjects + attributes,
        approx_tokens: flat.split_whitespace().count() as f64 * 1.3,
    }
}

/// One benchmark prompt with its tree, flat text, and statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub split: Split,
    pub seed: u64,
    pub tree: PromptTree,
    pub flat_prompt: String,
    pub stats: RecordStats,
}

/// Stage 3: join detailed subject sub-prompts with sampled connectors,
/// build the tree, fill level prompts, and compute statistics.
pub fn reframe_prompt(
    subjects: Vec<SubjectNode>,
    connectors: &[String],
    id: u64,
    split: Split,
    seed: u64,
    rng: &mut impl Rng,
) -> Result<DatasetRecord> {
    if subjects.is_empty() {
        return Err(CoreError::InvalidConfig("no subject specs".into()));
    }
    if connectors.is_empty() {
        return Err(CoreError::PoolExhausted("connector pool empty".into()));
    }
    let conns: Vec<String> = (0..subjects.len().saturating_sub(1))
        .map(|_| connectors[rng.random_range(0..connectors.len())].clone())
        .collect();
    let tree = PromptTree {
        root_text: String::new(),
        root_level_prompt: String::new(),
        subjects,
        connectors: conns,
    };
    let flat = render_flat(&tree);
    let mut tree = rewrite_levels(&tree, &TemplateRewriter)?;
    tree.root_text = flat.clone();
    let violations = validate_tree(&tree);
    if !violations.is_empty() {
        return Err(CoreError::InvalidTree(violations[0].to_string()));
    }
    let stats = stats_of(&tree, &flat);
    Ok(DatasetRecord {
        id,
        split,
        seed,
        tree,
        flat_prompt: flat,
        stats,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub train_size: usize,
    pub test_size: usize,
    /// Inclusive subject-count band per prompt.
    pub subjects_min: usize,
    pub subjects_max: usize,
    pub seed: u64,
    pub pools: WordPools,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            train_size: 12_000,
            test_size: 3_000,
            subjects_min: 4,
            subjects_max: 12,
            seed: 0,
            pools: WordPools::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub pool_version: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub subjects_min: usize,
    pub subjects_max: usize,
}

/// Generate one record deterministically from its split/id/seed triple.
pub fn generate_record(config: &BenchConfig, split: Split, id: u64) -> Result<DatasetRecord> {
    let tag = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let record_seed = derive_indexed(derive_seed(config.seed, tag), id);
    let mut rng = stream(record_seed);
    let n = rng.random_range(config.subjects_min..=config.subjects_max);
    let specs = generate_subjects(&config.pools, n, &mut rng)?;
    let rewriter = TemplateAttributeRewriter {
        pools: config.pools.clone(),
    };
    let subjects = rewriter.rewrite_record(&specs, record_seed)?;
    reframe_prompt(subjects, &config.pools.connectors, id, split, record_seed, &mut rng)
}

/// Generate both splits. Test ids live in a disjoint range.
pub fn generate_dataset(config: &BenchConfig) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>, DatasetManifest)> {
    if config.subjects_min < 1 || config.subjects_max < config.subjects_min {
        return Err(CoreError::InvalidConfig(format!(
            "bad subject range [{}, {}]",
            config.subjects_min, config.subjects_max
        )));
    }
    let train: Result<Vec<_>> = (0..config.train_size as u64)
        .map(|id| generate_record(config, Split::Train, id))
        .collect();
    let test: Result<Vec<_>> = (0..config.test_size as u64)
        .map(|id| generate_record(config, Split::Test, 1_000_000 + id))
        .collect();
    let manifest = DatasetManifest {
        schema_version: crate::prompt::TREE_SCHEMA_VERSION,
        seed: config.seed,
        pool_version: config.pools.version_hash(),
        train_size: config.train_size,
        test_size: config.test_size,
        subjects_min: config.subjects_min,
        subjects_max: config.subjects_max,
    };
    Ok((train?, test?, manifest))
}

/// Fraction of records whose flat prompt duplicates an earlier one.
pub fn duplicate_rate(records: &[DatasetRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let mut seen = BTreeSet::new();
    let mut dups = 0usize;
    for r in records {
        if !seen.insert(r.flat_prompt.as_str()) {
            dups += 1;
        }
    }
    dups as f64 / records.len() as f64
}

pub fn write_records_jsonl<W: Write>(records: &[DatasetRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_records_jsonl<R: BufRead>(r: R) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
