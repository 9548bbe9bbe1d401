//! On-disk scenario layout: `meta.json`, PNG images and masks, `qa/*.json`.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{Concept, ImageRef, Scenario, SceneImage, SceneObject};
use crate::error::{Error, Result};
use crate::vision::{load_mask, load_rgb, ConceptMask};

pub const META_FILE: &str = "meta.json";
const META_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageMeta {
    pub file: ImageRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub version: u32,
    pub id: String,
    pub seed: u64,
    pub concepts: Vec<Concept>,
    pub images: Vec<ImageMeta>,
}

fn all_images(s: &Scenario) -> Vec<(ImageRef, &SceneImage)> {
    let mut out = Vec::new();
    for (concept, imgs) in s.train.iter().enumerate() {
        out.extend(imgs.iter().enumerate().map(|(index, i)| (ImageRef::Train { concept, index }, i)));
    }
    out.extend(s.externals.iter().enumerate().map(|(i, x)| (ImageRef::External(i), x)));
    for (concept, imgs) in s.test_single.iter().enumerate() {
        out.extend(imgs.iter().enumerate().map(|(index, i)| (ImageRef::TestSingle { concept, index }, i)));
    }
    out.extend(s.test_multi.iter().enumerate().map(|(i, x)| (ImageRef::TestMulti(i), x)));
    out.extend(s.eval_external_single.iter().enumerate().map(|(i, x)| (ImageRef::EvalExternalSingle(i), x)));
    out.extend(s.eval_external_multi.iter().enumerate().map(|(i, x)| (ImageRef::EvalExternalMulti(i), x)));
    out
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_scenario(s: &Scenario, dir: &Path) -> Result<()> {
    let mut images = Vec::new();
    for (r, img) in all_images(s) {
        let path = dir.join(r.path());
        ensure_parent(&path)?;
        img.image.save(&path)?;
        let mask = r.mask_path();
        if let (Some(mp), ImageRef::Train { concept, index }) = (&mask, r) {
            let path = dir.join(mp);
            ensure_parent(&path)?;
            s.masks[concept][index].to_gray().save(&path)?;
        }
        images.push(ImageMeta { file: r, mask, objects: img.objects.clone() });
    }
    let meta = ScenarioMeta { version: META_VERSION, id: s.id.clone(), seed: s.seed, concepts: s.concepts.clone(), images };
    write_json(&dir.join(META_FILE), &meta)
}

fn slot<T: Default>(v: &mut Vec<T>, i: usize) -> &mut T {
    if v.len() <= i {
        v.resize_with(i + 1, T::default);
    }
    &mut v[i]
}

fn placeholder() -> SceneImage {
    SceneImage { image: image::RgbImage::new(0, 0), objects: Vec::new() }
}

fn put(v: &mut Vec<SceneImage>, i: usize, img: SceneImage) {
    while v.len() <= i {
        v.push(placeholder());
    }
    v[i] = img;
}

pub fn load_scenario(dir: &Path) -> Result<Scenario> {
    let meta: ScenarioMeta = read_json(&dir.join(META_FILE))?;
    if meta.version != META_VERSION {
        return Err(Error::Format(format!("unsupported scenario version {}", meta.version)));
    }
    let m = meta.concepts.len();
    let mut s = Scenario {
        id: meta.id,
        seed: meta.seed,
        concepts: meta.concepts,
        train: vec![Vec::new(); m],
        masks: vec![Vec::new(); m],
        externals: Vec::new(),
        test_single: vec![Vec::new(); m],
        test_multi: Vec::new(),
        eval_external_single: Vec::new(),
        eval_external_multi: Vec::new(),
    };
    let check = |c: usize| {
        if c < m {
            Ok(c)
        } else {
            Err(Error::Format(format!("image references concept {c} of {m}")))
        }
    };
    let mut masks: Vec<Vec<Option<ConceptMask>>> = vec![Vec::new(); m];
    for im in meta.images {
        let img = SceneImage { image: load_rgb(&dir.join(im.file.path()))?, objects: im.objects };
        match im.file {
            ImageRef::Train { concept, index } => {
                let c = check(concept)?;
                put(&mut s.train[c], index, img);
                let mp = im.mask.ok_or_else(|| Error::Format(format!("training image {} has no mask", im.file)))?;
                *slot(&mut masks[c], index) = Some(load_mask(&dir.join(mp))?);
            }
            ImageRef::External(i) => put(&mut s.externals, i, img),
            ImageRef::TestSingle { concept, index } => put(&mut s.test_single[check(concept)?], index, img),
            ImageRef::TestMulti(i) => put(&mut s.test_multi, i, img),
            ImageRef::EvalExternalSingle(i) => put(&mut s.eval_external_single, i, img),
            ImageRef::EvalExternalMulti(i) => put(&mut s.eval_external_multi, i, img),
        }
    }
    for (c, ms) in masks.into_iter().enumerate() {
        s.masks[c] = ms.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| Error::Format("missing mask entry".into()))?;
        if s.masks[c].len() != s.train[c].len() {
            return Err(Error::Format(format!("concept {c} has mismatched image and mask counts")));
        }
    }
    let groups = s.train.iter().chain(&s.test_single).chain([&s.externals, &s.test_multi, &s.eval_external_single, &s.eval_external_multi]);
    for g in groups {
        if g.iter().any(|i| i.image.width() == 0) {
            return Err(Error::Format("scenario metadata skips an image index".into()));
        }
    }
    if s.train.iter().any(Vec::is_empty) {
        return Err(Error::Format("a concept has no training images".into()));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_scenario, ScenarioSpec};

    #[test]
    fn scenario_round_trips_through_disk() {
        let mut spec = ScenarioSpec::new(2, 3, 5);
        spec.externals = 4;
        spec.eval_externals = 2;
        let s = generate_synthetic_scenario(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scenario(&s, dir.path()).unwrap();
        assert!(dir.path().join("concepts/c1/train/000.png").exists());
        assert!(dir.path().join("concepts/c2/masks/002.png").exists());
        let back = load_scenario(dir.path()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn missing_meta_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_scenario(dir.path()).is_err());
    }
}
