//! GCD data model: samples, labeled/unlabeled splits, scene annotations and
//! the object x scene ambiguity quadrants.

mod annotations;
mod manifest;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decouple::SaliencyMask;
use crate::image::Image;
use crate::{Error, Result};

pub use annotations::{attach_scene_annotations, load_scene_annotations, SceneAnnotations};
pub use manifest::{
    conventional_mask_path, load_dataset, write_dataset, DatasetFiles, LoadedDataset,
    DEFAULT_MASK_SUFFIX, MANIFEST_HEADER,
};
pub use synthetic::{gen_synthetic, home_scene, SyntheticConfig};

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub object_label: usize,
    pub scene_label: Option<usize>,
    pub is_labeled: bool,
    pub oracle_mask: Option<SaliencyMask>,
    /// Mask file on disk, when the sample was loaded from a manifest.
    pub mask_path: Option<PathBuf>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, object_label: usize) -> Self {
        Self {
            id: id.into(),
            image,
            object_label,
            scene_label: None,
            is_labeled: false,
            oracle_mask: None,
            mask_path: None,
        }
    }

    pub fn with_scene(mut self, scene: usize) -> Self {
        self.scene_label = Some(scene);
        self
    }

    pub fn with_oracle_mask(mut self, mask: SaliencyMask) -> Result<Self> {
        if mask.shape() != self.image.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.image.shape()),
                actual: format!("{:?}", mask.shape()),
            });
        }
        self.oracle_mask = Some(mask);
        Ok(self)
    }
}

#[derive(Debug, Clone)]
pub struct GcdSplit {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub base_classes: BTreeSet<usize>,
    pub all_classes: BTreeSet<usize>,
    pub base_scenes: Option<BTreeSet<usize>>,
}

impl GcdSplit {
    /// Number of prototypes the model needs: labels are dense ids `0..K`.
    pub fn num_classes(&self) -> usize {
        self.all_classes.iter().next_back().map_or(0, |&m| m + 1)
    }

    pub fn novel_classes(&self) -> BTreeSet<usize> {
        self.all_classes
            .difference(&self.base_classes)
            .copied()
            .collect()
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.labeled.iter().chain(&self.unlabeled)
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Check the split invariants: labeled classes are base, ids are disjoint.
    pub fn validate(&self) -> Result<()> {
        if !self.base_classes.is_subset(&self.all_classes) {
            return Err(Error::DegenerateSplit("base classes not within all classes".into()));
        }
        let mut ids = BTreeSet::new();
        for s in &self.labeled {
            if !s.is_labeled || !self.base_classes.contains(&s.object_label) {
                return Err(Error::DegenerateSplit(format!(
                    "labeled sample `{}` has non-base class {}",
                    s.id, s.object_label
                )));
            }
            ids.insert(s.id.as_str());
        }
        for s in &self.unlabeled {
            if s.is_labeled || !ids.insert(s.id.as_str()) {
                return Err(Error::DegenerateSplit(format!(
                    "sample `{}` appears in both partitions",
                    s.id
                )));
            }
        }
        Ok(())
    }
}

/// Object x scene base/novel membership of an unlabeled sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    BaseObjBaseScene,
    NovelObjBaseScene,
    BaseObjNovelScene,
    NovelObjNovelScene,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::BaseObjBaseScene,
        Quadrant::NovelObjBaseScene,
        Quadrant::BaseObjNovelScene,
        Quadrant::NovelObjNovelScene,
    ];

    pub fn from_membership(base_object: bool, base_scene: bool) -> Self {
        match (base_object, base_scene) {
            (true, true) => Quadrant::BaseObjBaseScene,
            (false, true) => Quadrant::NovelObjBaseScene,
            (true, false) => Quadrant::BaseObjNovelScene,
            (false, false) => Quadrant::NovelObjNovelScene,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::BaseObjBaseScene => "BaseObj-BaseScene",
            Quadrant::NovelObjBaseScene => "NovelObj-BaseScene",
            Quadrant::BaseObjNovelScene => "BaseObj-NovelScene",
            Quadrant::NovelObjNovelScene => "NovelObj-NovelScene",
        }
    }

    /// Short column tag used in metrics files.
    pub fn tag(self) -> &'static str {
        match self {
            Quadrant::BaseObjBaseScene => "bb",
            Quadrant::NovelObjBaseScene => "nb",
            Quadrant::BaseObjNovelScene => "bn",
            Quadrant::NovelObjNovelScene => "nn",
        }
    }
}

impl std::fmt::Display for Quadrant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::config(name, format!("must be in (0, 1], got {v}")));
    }
    Ok(())
}

/// Partition samples into labeled/unlabeled sets.
///
/// Base classes are the first `ceil(base_class_fraction * |C|)` ids of a seeded
/// shuffle; within each base class a seeded `labeled_fraction` share (rounded) is
/// labeled. Everything else, including every novel-class sample, is unlabeled.
pub fn make_gcd_split(
    samples: Vec<Sample>,
    base_class_fraction: f64,
    labeled_fraction: f64,
    seed: u64,
) -> Result<GcdSplit> {
    check_fraction("base_class_fraction", base_class_fraction)?;
    let mut classes: Vec<usize> = samples
        .iter()
        .map(|s| s.object_label)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    classes.shuffle(&mut rng);
    let n_base = ((base_class_fraction * classes.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let base: BTreeSet<usize> = classes[..n_base.min(classes.len())].iter().copied().collect();
    split_with_base_classes(samples, base, labeled_fraction, &mut rng)
}

/// Same as [`make_gcd_split`] with an explicit base-class list (e.g. published benchmark splits).
pub fn make_gcd_split_with_base(
    samples: Vec<Sample>,
    base_classes: BTreeSet<usize>,
    labeled_fraction: f64,
    seed: u64,
) -> Result<GcdSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    split_with_base_classes(samples, base_classes, labeled_fraction, &mut rng)
}

fn split_with_base_classes(
    mut samples: Vec<Sample>,
    base: BTreeSet<usize>,
    labeled_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GcdSplit> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty sample list".into()));
    }
    check_fraction("labeled_fraction", labeled_fraction)?;

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.object_label).or_default().push(i);
    }
    if let Some((c, idx)) = by_class.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "class {c} has {} sample(s); at least 2 required",
            idx.len()
        )));
    }
    if let Some(c) = base.iter().find(|c| !by_class.contains_key(c)) {
        return Err(Error::InvalidArgument(format!("base class {c} has no samples")));
    }

    let mut labeled_mask = vec![false; samples.len()];
    for (&class, idx) in by_class.iter_mut() {
        if !base.contains(&class) {
            continue;
        }
        idx.shuffle(rng);
        let take = (labeled_fraction * idx.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::DegenerateSplit(format!(
                "base class {class} receives no labeled samples"
            )));
        }
        for &i in &idx[..take] {
            labeled_mask[i] = true;
        }
    }

    let all_classes: BTreeSet<usize> = by_class.keys().copied().collect();
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (s, is_lab) in samples.drain(..).zip(labeled_mask) {
        let mut s = s;
        s.is_labeled = is_lab;
        if is_lab {
            labeled.push(s);
        } else {
            unlabeled.push(s);
        }
    }
    let split = GcdSplit {
        labeled,
        unlabeled,
        base_classes: base,
        all_classes,
        base_scenes: None,
    };
    split.validate()?;
    Ok(split)
}

pub fn quadrant_of(sample: &Sample, split: &GcdSplit) -> Result<Quadrant> {
    let scene = sample
        .scene_label
        .ok_or_else(|| Error::Unannotated(sample.id.clone()))?;
    let base_scenes = split
        .base_scenes
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("split has no base scenes defined".into()))?;
    Ok(Quadrant::from_membership(
        split.base_classes.contains(&sample.object_label),
        base_scenes.contains(&scene),
    ))
}

/// Scenes seen at least `min_labeled_count` times among labeled samples are base scenes.
pub fn derive_base_scenes(split: &GcdSplit, min_labeled_count: usize) -> Result<BTreeSet<usize>> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut any = false;
    for s in split.samples() {
        if let Some(scene) = s.scene_label {
            any = true;
            let c = counts.entry(scene).or_default();
            if s.is_labeled {
                *c += 1;
            }
        }
    }
    if !any {
        return Err(Error::InvalidArgument("no scene labels present".into()));
    }
    Ok(counts
        .into_iter()
        .filter(|&(_, n)| n >= min_labeled_count)
        .map(|(scene, _)| scene)
        .collect())
}
