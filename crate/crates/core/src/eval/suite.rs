//! Test-suite composition.

use serde::{Deserialize, Serialize};

use crate::data::{templates, ImageRef, Scenario};
use crate::error::{Error, Result};

pub const TEST_IMAGES: usize = 5;
pub const EXTERNALS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognitionItem {
    pub id: String,
    pub image: ImageRef,
    pub concepts: Vec<usize>,
    pub expected: bool,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    Left,
    Middle,
    Right,
}

impl Choice {
    pub fn from_third(t: usize) -> Self {
        match t {
            0 => Choice::Left,
            1 => Choice::Middle,
            _ => Choice::Right,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Choice::Left => "A. Left",
            Choice::Middle => "B. Middle",
            Choice::Right => "C. Right",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingItem {
    pub id: String,
    pub image: ImageRef,
    pub concept: usize,
    pub expected: Choice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceItem {
    pub id: String,
    pub image: Option<ImageRef>,
    pub question: String,
    pub options: Vec<String>,
    pub correct: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaItem {
    pub id: String,
    pub image: Option<ImageRef>,
    pub question: String,
    pub reference: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionItem {
    pub id: String,
    pub image: ImageRef,
    pub required: Vec<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub recognition: Vec<RecognitionItem>,
    pub grounding: Vec<GroundingItem>,
    pub choice: Vec<ChoiceItem>,
    pub vqa: Vec<VqaItem>,
    pub caption: Vec<CaptionItem>,
}

pub const CAPTION_PROMPT: &str = "Can you see {X} in the image? Don't answer the question, but remember it, and only respond with a detailed caption for the image. Your caption:";

pub fn recognition_query(identifiers: &[&str]) -> Result<String> {
    if identifiers.is_empty() {
        return Err(Error::input("recognition query needs at least one identifier"));
    }
    Ok(templates::fill("Can you see {X} in this photo? Answer with a single word: Yes or No.", &identifiers.join(" and ")))
}

pub fn grounding_query(identifier: &str) -> String {
    format!("Where is {identifier} located in this photo? A. Left. B. Middle. C. Right.")
}

pub fn caption_query(identifiers: &[&str]) -> String {
    CAPTION_PROMPT.replace("{X}", &identifiers.join(" and "))
}

fn check_test_images(s: &Scenario) -> Result<()> {
    let short = s.test_single.iter().any(|v| v.len() < TEST_IMAGES)
        || s.test_single.len() != s.m()
        || s.test_multi.len() < TEST_IMAGES
        || s.eval_external_single.len() < EXTERNALS
        || s.eval_external_multi.len() < EXTERNALS;
    if short {
        return Err(Error::input(format!(
            "scenario {} needs {TEST_IMAGES} single and multi test images per concept and {EXTERNALS}+{EXTERNALS} external images",
            s.id
        )));
    }
    Ok(())
}

/// Recognition items: positives on single-concept images and on
/// multi-concept images (every concept alone plus all of them together),
/// inter-concept negatives and one query per external image.
pub fn compose_recognition(s: &Scenario) -> Result<Vec<RecognitionItem>> {
    check_test_images(s)?;
    let m = s.m();
    let mut out = Vec::new();
    let mut push = |image: ImageRef, concepts: Vec<usize>, expected: bool, split: Split| {
        let id = format!("rec-{:04}", out.len());
        out.push(RecognitionItem { id, image, concepts, expected, split });
    };
    for j in 0..m {
        for index in 0..TEST_IMAGES {
            push(ImageRef::TestSingle { concept: j, index }, vec![j], true, Split::Single);
        }
    }
    for i in 0..TEST_IMAGES {
        for j in 0..m {
            push(ImageRef::TestMulti(i), vec![j], true, Split::Multi);
        }
        push(ImageRef::TestMulti(i), (0..m).collect(), true, Split::Multi);
    }
    for a in 0..m {
        for b in (0..m).filter(|&b| b != a) {
            for index in 0..TEST_IMAGES {
                push(ImageRef::TestSingle { concept: a, index }, vec![b], false, Split::Single);
            }
        }
    }
    for i in 0..EXTERNALS {
        push(ImageRef::EvalExternalSingle(i), vec![i % m], false, Split::Single);
    }
    for i in 0..EXTERNALS {
        push(ImageRef::EvalExternalMulti(i), vec![i % m], false, Split::Multi);
    }
    Ok(out)
}

/// Location items for every concept on every multi-concept test image.
pub fn compose_grounding(s: &Scenario) -> Result<Vec<GroundingItem>> {
    check_test_images(s)?;
    let mut out = Vec::new();
    for i in 0..TEST_IMAGES {
        let img = &s.test_multi[i];
        for j in 0..s.m() {
            let obj = img
                .object_of(j)
                .ok_or_else(|| Error::input(format!("multi-concept test image {i} has no location for concept {j}")))?;
            out.push(GroundingItem {
                id: format!("gnd-{:04}", out.len()),
                image: ImageRef::TestMulti(i),
                concept: j,
                expected: Choice::from_third(obj.third()),
            });
        }
    }
    Ok(out)
}

fn options_for(correct: &str, pool: &[String], slot: usize) -> (Vec<String>, usize) {
    let mut others: Vec<&String> = pool.iter().filter(|p| p.as_str() != correct).collect();
    others.truncate(2);
    let mut opts: Vec<String> = others.into_iter().cloned().collect();
    let at = slot % (opts.len() + 1);
    opts.insert(at, correct.to_string());
    (opts, at)
}

/// Visual multiple-choice items (one colour question per concept per
/// single-concept test image, and one question per non-empty concept subset
/// per multi-concept test image) and text-only open questions (five per
/// concept plus five about the whole scenario).
pub fn compose_qa(s: &Scenario) -> Result<(Vec<ChoiceItem>, Vec<VqaItem>)> {
    check_test_images(s)?;
    let m = s.m();
    if m > 4 {
        return Err(Error::input("at most four concepts are supported"));
    }
    let colors: Vec<String> = s.concepts.iter().map(|c| c.color.clone()).chain(["white", "cyan", "orange"].map(String::from)).collect();
    let mut choice = Vec::new();
    for (j, c) in s.concepts.iter().enumerate() {
        for index in 0..TEST_IMAGES {
            let correct = format!("{} is {}.", c.identifier, c.color);
            let pool: Vec<String> = colors.iter().map(|col| format!("{} is {col}.", c.identifier)).collect();
            let (options, at) = options_for(&correct, &pool, j + index);
            choice.push(ChoiceItem {
                id: format!("chv-{:04}", choice.len()),
                image: Some(ImageRef::TestSingle { concept: j, index }),
                question: format!("What color is {}?", c.identifier),
                options,
                correct: at,
                split: Split::Single,
            });
        }
    }
    for i in 0..TEST_IMAGES {
        let img = &s.test_multi[i];
        for subset in 1u32..(1 << m) {
            let members: Vec<usize> = (0..m).filter(|j| subset >> j & 1 == 1).collect();
            let (question, options, correct) = if members.len() == 1 {
                let j = members[0];
                let ident = &s.concepts[j].identifier;
                let obj = img.object_of(j).ok_or_else(|| Error::input("multi-concept image lacks a concept"))?;
                let opts: Vec<String> = (0..3).map(|t| format!("{ident} is {}.", templates::position_phrase(t))).collect();
                (grounding_query(ident), opts, obj.third())
            } else {
                let names: Vec<&str> = members.iter().map(|&j| s.concepts[j].identifier.as_str()).collect();
                let joined = names.join(" and ");
                let correct = format!("Yes, {joined} are in this photo.");
                let pool = vec![correct.clone(), format!("No, {joined} are not in this photo."), "There is nothing in this photo.".to_string()];
                let (opts, at) = options_for(&correct, &pool, i + subset as usize);
                (format!("Are {joined} in this photo?"), opts, at)
            };
            choice.push(ChoiceItem {
                id: format!("chv-{:04}", choice.len()),
                image: Some(ImageRef::TestMulti(i)),
                question,
                options,
                correct,
                split: Split::Multi,
            });
        }
    }
    const TEXT: [(&str, &str); 5] = [
        ("What color is {X}?", "{X} is {color}."),
        ("What shape is {X}?", "{X} is a {shape}."),
        ("What does {X} look like?", "{X} is a {color} {shape}."),
        ("Describe {X} in a few words.", "A {color} {shape}."),
        ("What is the shape of {X}?", "The shape of {X} is a {shape}."),
    ];
    const SCENE: [&str; 5] = [
        "Who do you know?",
        "Which concepts have you learned?",
        "List everything you can recognize.",
        "Name all of the concepts.",
        "What can you identify?",
    ];
    let mut vqa = Vec::new();
    for c in &s.concepts {
        for (q, a) in TEXT {
            let reference = templates::fill(a, &c.identifier).replace("{color}", &c.color).replace("{shape}", c.shape.name());
            vqa.push(VqaItem {
                id: format!("vqa-{:04}", vqa.len()),
                image: None,
                question: templates::fill(q, &c.identifier),
                reference,
                split: Split::Single,
            });
        }
    }
    let all = s.identifiers().join(" and ");
    for q in SCENE {
        vqa.push(VqaItem {
            id: format!("vqa-{:04}", vqa.len()),
            image: None,
            question: q.to_string(),
            reference: format!("I know {all}."),
            split: Split::Multi,
        });
    }
    Ok((choice, vqa))
}

/// One caption request per single- and multi-concept test image.
pub fn compose_captions(s: &Scenario) -> Result<Vec<CaptionItem>> {
    check_test_images(s)?;
    let mut out = Vec::new();
    for j in 0..s.m() {
        for index in 0..TEST_IMAGES {
            out.push(CaptionItem {
                id: format!("cap-{:04}", out.len()),
                image: ImageRef::TestSingle { concept: j, index },
                required: vec![j],
                split: Split::Single,
            });
        }
    }
    for i in 0..TEST_IMAGES {
        out.push(CaptionItem {
            id: format!("cap-{:04}", out.len()),
            image: ImageRef::TestMulti(i),
            required: (0..s.m()).collect(),
            split: Split::Multi,
        });
    }
    Ok(out)
}

pub fn compose_suite(s: &Scenario) -> Result<EvalSuite> {
    let (choice, vqa) = compose_qa(s)?;
    Ok(EvalSuite {
        recognition: compose_recognition(s)?,
        grounding: compose_grounding(s)?,
        choice,
        vqa,
        caption: compose_captions(s)?,
    })
}

/// Checks the suite against the composition formulas for `m` concepts.
pub fn validate_suite(suite: &EvalSuite, m: usize) -> Result<()> {
    let pos = suite.recognition.iter().filter(|r| r.expected).count();
    let checks = [
        ("recognition items", suite.recognition.len(), 5 * m * m + 5 * (m + 1) + 100),
        ("recognition positives", pos, 5 * m + 5 * (m + 1)),
        ("visual QA items", suite.choice.len(), 5 * (m + (1 << m) - 1)),
        ("text-only QA items", suite.vqa.len(), 5 * m + 5),
    ];
    for (what, got, want) in checks {
        if got != want {
            return Err(Error::Validation(format!("{what}: expected {want}, found {got}")));
        }
    }
    Ok(())
}
