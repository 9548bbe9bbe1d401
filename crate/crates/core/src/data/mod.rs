//! Synthetic multi-concept scenarios and instruction-tuning samples.

pub mod io;
pub mod render;
pub mod templates;

use std::collections::HashMap;
use std::fmt;

use image::RgbImage;
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::token_init::ConceptTokenBlock;
use crate::vision::{ConceptMask, FeatureGrid, VisionTower};
use crate::vlm::{SequenceBatch, Slot, Vocabulary, EOS};
pub use render::{NamedColor, Placement, Shape, CONCEPT_COLORS, DISTRACTOR_COLORS};
pub use templates::TemplatePool;

pub const IMAGE_SIZE: u32 = 64;
pub const MAX_CONCEPTS: usize = 4;

/// Horizontal third (0 = left, 1 = middle, 2 = right) of pixel column `x`;
/// a coordinate on a boundary belongs to the lower third.
pub fn third_of(x: f64, width: f64) -> usize {
    if x <= width / 3.0 {
        0
    } else if x <= 2.0 * width / 3.0 {
        1
    } else {
        2
    }
}

/// Reference to one image of a scenario; doubles as its relative file path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ImageRef {
    Train { concept: usize, index: usize },
    External(usize),
    TestSingle { concept: usize, index: usize },
    TestMulti(usize),
    EvalExternalSingle(usize),
    EvalExternalMulti(usize),
}

pub fn concept_dir_id(concept: usize) -> String {
    format!("c{}", concept + 1)
}

impl ImageRef {
    pub fn path(&self) -> String {
        match *self {
            ImageRef::Train { concept, index } => format!("concepts/{}/train/{index:03}.png", concept_dir_id(concept)),
            ImageRef::External(i) => format!("externals/{i:03}.png"),
            ImageRef::TestSingle { concept, index } => {
                format!("test/single/{}_{index:03}.png", concept_dir_id(concept))
            }
            ImageRef::TestMulti(i) => format!("test/multi/{i:03}.png"),
            ImageRef::EvalExternalSingle(i) => format!("test/external_single/{i:03}.png"),
            ImageRef::EvalExternalMulti(i) => format!("test/external_multi/{i:03}.png"),
        }
    }

    pub fn mask_path(&self) -> Option<String> {
        match *self {
            ImageRef::Train { concept, index } => Some(format!("concepts/{}/masks/{index:03}.png", concept_dir_id(concept))),
            _ => None,
        }
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.path())
    }
}

impl From<ImageRef> for String {
    fn from(r: ImageRef) -> Self {
        r.path()
    }
}

fn parse_index(s: &str) -> Option<usize> {
    s.strip_suffix(".png")?.parse().ok()
}

fn parse_concept(s: &str) -> Option<usize> {
    s.strip_prefix('c')?.parse::<usize>().ok()?.checked_sub(1)
}

impl TryFrom<String> for ImageRef {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split('/').collect();
        let parsed = match parts.as_slice() {
            ["concepts", c, "train", f] => parse_concept(c).zip(parse_index(f)).map(|(concept, index)| ImageRef::Train { concept, index }),
            ["externals", f] => parse_index(f).map(ImageRef::External),
            ["test", "single", f] => f.split_once('_').and_then(|(c, i)| {
                parse_concept(c).zip(parse_index(i)).map(|(concept, index)| ImageRef::TestSingle { concept, index })
            }),
            ["test", "multi", f] => parse_index(f).map(ImageRef::TestMulti),
            ["test", "external_single", f] => parse_index(f).map(ImageRef::EvalExternalSingle),
            ["test", "external_multi", f] => parse_index(f).map(ImageRef::EvalExternalMulti),
            _ => None,
        };
        parsed.ok_or_else(|| format!("unrecognized image path {s}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub identifier: String,
    pub color: String,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Index of the depicted concept, `None` for distractors.
    pub concept: Option<usize>,
    pub color: String,
    pub shape: Shape,
    pub placement: Placement,
}

impl SceneObject {
    pub fn third(&self) -> usize {
        third_of(self.placement.center().0, IMAGE_SIZE as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub image: RgbImage,
    pub objects: Vec<SceneObject>,
}

impl SceneImage {
    pub fn concepts(&self) -> Vec<usize> {
        self.objects.iter().filter_map(|o| o.concept).collect()
    }

    pub fn object_of(&self, concept: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.concept == Some(concept))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub seed: u64,
    pub concepts: Vec<Concept>,
    pub train: Vec<Vec<SceneImage>>,
    pub masks: Vec<Vec<ConceptMask>>,
    pub externals: Vec<SceneImage>,
    pub test_single: Vec<Vec<SceneImage>>,
    pub test_multi: Vec<SceneImage>,
    pub eval_external_single: Vec<SceneImage>,
    pub eval_external_multi: Vec<SceneImage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub externals: usize,
    pub test_single: usize,
    pub test_multi: usize,
    pub eval_externals: usize,
}

impl ScenarioSpec {
    pub fn new(m: usize, n: usize, seed: u64) -> Self {
        Self { m, n, seed, externals: 100, test_single: 5, test_multi: 5, eval_externals: 50 }
    }
}

/// `(concept, rgb, colour name, shape)` of an object to draw.
pub type ObjectDesc = (Option<usize>, [u8; 3], String, Shape);

/// One object at a random size and location.
pub fn single_scene<R: Rng>(rng: &mut R, obj: ObjectDesc, sizes: std::ops::RangeInclusive<u32>) -> (SceneImage, ConceptMask) {
    let mut img = render::background(rng, IMAGE_SIZE, IMAGE_SIZE);
    let mut mask = ConceptMask::new(IMAGE_SIZE as usize, IMAGE_SIZE as usize, vec![false; (IMAGE_SIZE * IMAGE_SIZE) as usize]).expect("static dims");
    let size = rng.gen_range(sizes);
    let at = render::place_in(rng, size, 0, IMAGE_SIZE, 0, IMAGE_SIZE);
    render::draw_shape(&mut img, Some(&mut mask), obj.3, obj.1, at);
    let objects = vec![SceneObject { concept: obj.0, color: obj.2, shape: obj.3, placement: at }];
    (SceneImage { image: img, objects }, mask)
}

/// Up to four objects in distinct horizontal thirds (the fourth shares a
/// column with the first, split into top and bottom halves).
pub fn multi_scene<R: Rng>(rng: &mut R, objs: Vec<ObjectDesc>) -> SceneImage {
    assert!(!objs.is_empty() && objs.len() <= 4);
    let mut img = render::background(rng, IMAGE_SIZE, IMAGE_SIZE);
    let bounds = [(0u32, 21u32), (22, 42), (43, 64)];
    let mut cols = [0usize, 1, 2];
    cols.shuffle(rng);
    let four = objs.len() == 4;
    let size_max = if four { 16 } else { 18 };
    let half = IMAGE_SIZE / 2;
    let mut objects = Vec::with_capacity(objs.len());
    for (i, (concept, rgb, name, shape)) in objs.into_iter().enumerate() {
        let size = rng.gen_range(15..=size_max);
        let (x_lo, x_hi) = bounds[cols[i % 3]];
        let (y_lo, y_hi) = match i {
            0 if four => (0, half),
            3 => (half, IMAGE_SIZE),
            _ => (0, IMAGE_SIZE),
        };
        let at = render::place_in(rng, size, x_lo, x_hi, y_lo, y_hi);
        render::draw_shape(&mut img, None, shape, rgb, at);
        objects.push(SceneObject { concept, color: name, shape, placement: at });
    }
    SceneImage { image: img, objects }
}

fn distractor_objects<R: Rng>(rng: &mut R, count: usize) -> Vec<ObjectDesc> {
    (0..count)
        .map(|_| {
            let c = DISTRACTOR_COLORS.choose(rng).expect("non-empty palette");
            let s = *Shape::ALL.choose(rng).expect("non-empty shapes");
            (None, c.rgb, c.name.to_string(), s)
        })
        .collect()
}

impl Scenario {
    pub fn m(&self) -> usize {
        self.concepts.len()
    }

    /// Training images per concept.
    pub fn n(&self) -> usize {
        self.train.first().map_or(0, Vec::len)
    }

    pub fn identifiers(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.identifier.clone()).collect()
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.identifiers())
    }

    pub fn image(&self, r: &ImageRef) -> Result<&SceneImage> {
        let found = match *r {
            ImageRef::Train { concept, index } => self.train.get(concept).and_then(|v| v.get(index)),
            ImageRef::External(i) => self.externals.get(i),
            ImageRef::TestSingle { concept, index } => self.test_single.get(concept).and_then(|v| v.get(index)),
            ImageRef::TestMulti(i) => self.test_multi.get(i),
            ImageRef::EvalExternalSingle(i) => self.eval_external_single.get(i),
            ImageRef::EvalExternalMulti(i) => self.eval_external_multi.get(i),
        };
        found.ok_or_else(|| Error::input(format!("scenario {} has no image {r}", self.id)))
    }

    pub fn external_refs(&self) -> Vec<ImageRef> {
        (0..self.externals.len()).map(ImageRef::External).collect()
    }

    pub fn concept_object(&self, j: usize) -> ObjectDesc {
        let c = &self.concepts[j];
        let rgb = render::color_by_name(&c.color).expect("concept colour").rgb;
        (Some(j), rgb, c.color.clone(), c.shape)
    }

    /// A fresh image holding every concept, not part of the stored suites.
    pub fn render_multi(&self, seed: u64) -> SceneImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3417_11);
        let objs = (0..self.m()).map(|j| self.concept_object(j)).collect();
        multi_scene(&mut rng, objs)
    }

    /// A fresh image holding `count` distractor objects and no concept.
    pub fn render_distractor(&self, seed: u64, count: usize) -> SceneImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD157_AC);
        let objs = distractor_objects(&mut rng, count.clamp(1, 3));
        multi_scene(&mut rng, objs)
    }
}

/// Generates a scenario: `m` coloured-shape concepts with `n` training images
/// and exact masks each, training distractors, and the evaluation images.
pub fn generate_synthetic_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    if spec.m == 0 || spec.m > MAX_CONCEPTS {
        return Err(Error::input(format!("concept count must be 1..={MAX_CONCEPTS}, got {}", spec.m)));
    }
    if spec.n == 0 {
        return Err(Error::input("at least one training image per concept is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut shapes = Shape::ALL;
    shapes.shuffle(&mut rng);
    let concepts: Vec<Concept> = (0..spec.m)
        .map(|j| Concept {
            id: concept_dir_id(j),
            identifier: format!("<sks{}>", j + 1),
            color: CONCEPT_COLORS[j].name.to_string(),
            shape: shapes[j],
        })
        .collect();
    let mut scenario = Scenario {
        id: format!("synthetic-m{}-n{}-s{}", spec.m, spec.n, spec.seed),
        seed: spec.seed,
        concepts,
        train: Vec::new(),
        masks: Vec::new(),
        externals: Vec::new(),
        test_single: Vec::new(),
        test_multi: Vec::new(),
        eval_external_single: Vec::new(),
        eval_external_multi: Vec::new(),
    };
    for j in 0..spec.m {
        let (imgs, masks): (Vec<_>, Vec<_>) =
            (0..spec.n).map(|_| single_scene(&mut rng, scenario.concept_object(j), 20..=28)).unzip();
        scenario.train.push(imgs);
        scenario.masks.push(masks);
    }
    for _ in 0..spec.externals {
        let count = rng.gen_range(1..=3);
        let objs = distractor_objects(&mut rng, count);
        scenario.externals.push(multi_scene(&mut rng, objs));
    }
    for j in 0..spec.m {
        let imgs = (0..spec.test_single).map(|_| single_scene(&mut rng, scenario.concept_object(j), 18..=26).0).collect();
        scenario.test_single.push(imgs);
    }
    for _ in 0..spec.test_multi {
        let objs = (0..spec.m).map(|j| scenario.concept_object(j)).collect();
        scenario.test_multi.push(multi_scene(&mut rng, objs));
    }
    for _ in 0..spec.eval_externals {
        let obj = distractor_objects(&mut rng, 1).pop().expect("one object");
        scenario.eval_external_single.push(single_scene(&mut rng, obj, 18..=26).0);
    }
    for _ in 0..spec.eval_externals {
        let count = rng.gen_range(2..=3);
        let objs = distractor_objects(&mut rng, count);
        scenario.eval_external_multi.push(multi_scene(&mut rng, objs));
    }
    Ok(scenario)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PositiveRec,
    RandomRec,
    JointRec,
    Conversation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSample {
    pub image: Option<ImageRef>,
    pub question: String,
    pub answer: String,
    pub kind: TaskKind,
    /// Concepts named in the question.
    pub concepts: Vec<usize>,
}

/// How many QA pairs each inter-concept negative image receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointMode {
    /// One QA pair per (ordered concept pair, image).
    #[default]
    Base,
    /// Ten QA pairs per image.
    Appendix,
}

impl JointMode {
    pub fn per_image(self) -> usize {
        match self {
            JointMode::Base => 1,
            JointMode::Appendix => 10,
        }
    }
}

pub const POSITIVE_QA_PER_IMAGE: usize = 5;
pub const MAX_RANDOM_NEGATIVES: usize = 100;

/// Personalized system prompt: for each concept in order, its identifier,
/// the literal `" is "`, its `k` soft tokens and `"."`.
pub fn system_prompt(vocab: &Vocabulary, blocks: &[ConceptTokenBlock]) -> Result<Vec<Slot>> {
    if blocks.len() != vocab.concepts() {
        return Err(Error::input(format!(
            "system prompt needs one block per concept ({} concepts, {} blocks)",
            vocab.concepts(),
            blocks.len()
        )));
    }
    let is = vocab.encode(" is ");
    let dot = vocab.encode(".");
    let mut out = Vec::new();
    for (j, b) in blocks.iter().enumerate() {
        out.push(Slot::Token(vocab.identifier_id(j)));
        out.extend(is.iter().map(|&t| Slot::Token(t)));
        out.extend((0..b.k()).map(|index| Slot::Soft { concept: j, index }));
        out.extend(dot.iter().map(|&t| Slot::Token(t)));
    }
    Ok(out)
}

pub fn build_positive(scenario: &Scenario, pool: &TemplatePool, seed: u64) -> Result<Vec<TrainSample>> {
    if pool.positive.len() < POSITIVE_QA_PER_IMAGE {
        return Err(Error::input("positive template pool is too small"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9051);
    let mut out = Vec::new();
    for (j, c) in scenario.concepts.iter().enumerate() {
        for index in 0..scenario.train[j].len() {
            for t in sample_indices(&mut rng, pool.positive.len(), POSITIVE_QA_PER_IMAGE) {
                out.push(TrainSample {
                    image: Some(ImageRef::Train { concept: j, index }),
                    question: templates::fill(&pool.positive[t], &c.identifier),
                    answer: "Yes".into(),
                    kind: TaskKind::PositiveRec,
                    concepts: vec![j],
                });
            }
        }
    }
    Ok(out)
}

/// For every concept, up to 100 randomly chosen external images with one
/// negative question each.
pub fn build_random_negatives(
    scenario: &Scenario,
    externals: &[ImageRef],
    pool: &TemplatePool,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    if externals.is_empty() {
        return Err(Error::input("random negatives need at least one external image"));
    }
    if pool.negative.is_empty() {
        return Err(Error::input("negative template pool is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4A4D);
    let take = externals.len().min(MAX_RANDOM_NEGATIVES);
    let mut out = Vec::new();
    for (j, c) in scenario.concepts.iter().enumerate() {
        let mut picks = sample_indices(&mut rng, externals.len(), take).into_vec();
        picks.sort_unstable();
        for i in picks {
            let t = rng.gen_range(0..pool.negative.len());
            out.push(TrainSample {
                image: Some(externals[i]),
                question: templates::fill(&pool.negative[t], &c.identifier),
                answer: "No".into(),
                kind: TaskKind::RandomRec,
                concepts: vec![j],
            });
        }
    }
    Ok(out)
}

/// Inter-concept negatives: an image of concept `a` with a question about
/// every other concept `b`.
pub fn build_joint_negatives(scenario: &Scenario, pool: &TemplatePool, seed: u64, mode: JointMode) -> Result<Vec<TrainSample>> {
    let per = mode.per_image();
    if pool.negative.len() < per {
        return Err(Error::input("negative template pool is too small for the joint mode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x701);
    let mut out = Vec::new();
    for a in 0..scenario.m() {
        for b in (0..scenario.m()).filter(|&b| b != a) {
            for index in 0..scenario.train[a].len() {
                for t in sample_indices(&mut rng, pool.negative.len(), per) {
                    out.push(TrainSample {
                        image: Some(ImageRef::Train { concept: a, index }),
                        question: templates::fill(&pool.negative[t], &scenario.concepts[b].identifier),
                        answer: "No".into(),
                        kind: TaskKind::JointRec,
                        concepts: vec![b],
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Every conversation template for every training image of every concept,
/// with answers rendered from the image metadata.
pub fn build_conversation(scenario: &Scenario, pool: &TemplatePool) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for (j, c) in scenario.concepts.iter().enumerate() {
        for (q, a) in &pool.conversation {
            for (index, img) in scenario.train[j].iter().enumerate() {
                let obj = img
                    .object_of(j)
                    .ok_or_else(|| Error::input(format!("training image {index} of {} lacks metadata", c.id)))?;
                let answer = templates::fill(a, &c.identifier)
                    .replace("{color}", &obj.color)
                    .replace("{shape}", obj.shape.name())
                    .replace("{position}", templates::position_phrase(obj.third()));
                out.push(TrainSample {
                    image: Some(ImageRef::Train { concept: j, index }),
                    question: templates::fill(q, &c.identifier),
                    answer,
                    kind: TaskKind::Conversation,
                    concepts: vec![j],
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataConfig {
    pub joint_mode: JointMode,
    pub seed: u64,
}

/// All four sample kinds, in kind order.
pub fn build_all(scenario: &Scenario, pool: &TemplatePool, cfg: &DataConfig) -> Result<Vec<TrainSample>> {
    let mut out = build_positive(scenario, pool, cfg.seed)?;
    out.extend(build_random_negatives(scenario, &scenario.external_refs(), pool, cfg.seed)?);
    out.extend(build_joint_negatives(scenario, pool, cfg.seed, cfg.joint_mode)?);
    out.extend(build_conversation(scenario, pool)?);
    Ok(out)
}

/// Turns samples into model inputs, caching projected image grids.
pub struct BatchBuilder<'a> {
    pub scenario: &'a Scenario,
    pub tower: &'a VisionTower,
    pub vocab: Vocabulary,
    pub prompt: Vec<Slot>,
    cache: HashMap<ImageRef, FeatureGrid>,
}

impl<'a> BatchBuilder<'a> {
    pub fn new(scenario: &'a Scenario, tower: &'a VisionTower, blocks: &[ConceptTokenBlock]) -> Result<Self> {
        let vocab = scenario.vocabulary()?;
        let prompt = system_prompt(&vocab, blocks)?;
        Ok(Self { scenario, tower, vocab, prompt, cache: HashMap::new() })
    }

    pub fn grid(&mut self, r: &ImageRef) -> Result<FeatureGrid> {
        if let Some(g) = self.cache.get(r) {
            return Ok(g.clone());
        }
        let g = self.tower.encode_projected(&self.scenario.image(r)?.image)?;
        self.cache.insert(*r, g.clone());
        Ok(g)
    }

    pub fn batch(&mut self, image: Option<&ImageRef>, question: &str, answer: &str) -> Result<SequenceBatch> {
        let image = image.map(|r| self.grid(r)).transpose()?;
        Ok(self.raw_batch(image, &[], question, answer))
    }

    /// Batch over an arbitrary projected grid, with extra system-prompt
    /// tokens appended after the concept clauses.
    pub fn raw_batch(&self, image: Option<FeatureGrid>, extra_prompt: &[u32], question: &str, answer: &str) -> SequenceBatch {
        let mut prompt = self.prompt.clone();
        prompt.extend(extra_prompt.iter().map(|&t| Slot::Token(t)));
        let mut ans = self.vocab.encode(answer);
        ans.push(EOS);
        SequenceBatch { image, prompt, question: self.vocab.encode(question), answer: ans }
    }

    pub fn sample(&mut self, s: &TrainSample) -> Result<SequenceBatch> {
        self.batch(s.image.as_ref(), &s.question, &s.answer)
    }
}
