//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.csv     # optional `#oracle_masks=true`, then the header row
//! <dir>/scenes.txt       # `<sample_id>,<scene_name>`
//! <dir>/images/<id>.png
//! <dir>/images/<id>_mask.png
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{GcdSplit, Sample};
use crate::decouple::{load_mask, save_mask, MaskSource};
use crate::image::Image;
use crate::{Error, Result};

pub const MANIFEST_HEADER: &str = "id,image,object_label,scene,labeled,mask";
const ORACLE_MARKER: &str = "#oracle_masks=true";
pub const DEFAULT_MASK_SUFFIX: &str = "_mask";

#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub manifest: PathBuf,
    pub scenes: PathBuf,
    pub images: usize,
    pub masks: usize,
}

/// A dataset read back from a manifest.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub split: GcdSplit,
    pub scene_names: Vec<String>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn check_token(kind: &str, v: &str) -> Result<()> {
    if v.is_empty() || v.contains([',', '\n', '\r']) {
        return Err(Error::InvalidArgument(format!("{kind} `{v}` cannot be stored in a manifest")));
    }
    Ok(())
}

/// Write images, masks, manifest and scene annotations for a split.
///
/// `scene_names[i]` names scene id `i`; masks attached to samples are written as
/// oracle masks.
pub fn write_dataset(dir: &Path, split: &GcdSplit, scene_names: &[String]) -> Result<DatasetFiles> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| Error::io(format!("creating {}", images_dir.display()), e))?;

    // Keep the generator's sample order regardless of partition.
    let mut samples: Vec<&Sample> = split.samples().collect();
    samples.sort_by(|a, b| a.id.cmp(&b.id));

    let all_oracle = samples.iter().all(|s| s.oracle_mask.is_some());
    let mut manifest = String::new();
    if all_oracle {
        manifest.push_str(ORACLE_MARKER);
        manifest.push('\n');
    }
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    let mut scenes = String::new();
    let mut n_masks = 0;
    for s in &samples {
        check_token("sample id", &s.id)?;
        let image_rel = format!("images/{}.png", s.id);
        s.image.save_png(&dir.join(&image_rel))?;
        let mask_rel = match &s.oracle_mask {
            Some(m) => {
                let rel = format!("images/{}{DEFAULT_MASK_SUFFIX}.png", s.id);
                save_mask(&dir.join(&rel), m)?;
                n_masks += 1;
                rel
            }
            None => String::new(),
        };
        let scene = match s.scene_label {
            Some(id) => {
                let name = scene_names
                    .get(id)
                    .ok_or_else(|| Error::InvalidArgument(format!("no name for scene {id}")))?;
                check_token("scene name", name)?;
                writeln!(scenes, "{},{}", s.id, name).unwrap();
                name.as_str()
            }
            None => "",
        };
        writeln!(
            manifest,
            "{},{},{},{},{},{}",
            s.id, image_rel, s.object_label, scene, s.is_labeled as u8, mask_rel
        )
        .unwrap();
    }
    let manifest_path = dir.join("manifest.csv");
    let scenes_path = dir.join("scenes.txt");
    write_file(&manifest_path, &manifest)?;
    write_file(&scenes_path, &scenes)?;
    Ok(DatasetFiles {
        manifest: manifest_path,
        scenes: scenes_path,
        images: samples.len(),
        masks: n_masks,
    })
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

/// Read a manifest, loading every image. Mask files are loaded eagerly only when
/// the manifest declares them to be oracle masks; otherwise their paths are kept
/// for file-based mask lookup.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut oracle = false;
    let mut header_seen = false;
    let mut scene_names: Vec<String> = Vec::new();
    let mut scene_ids: HashMap<String, usize> = HashMap::new();
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut ids = BTreeSet::new();

    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |reason: String| Error::Parse {
            path: manifest_path.to_path_buf(),
            line: i + 1,
            reason,
        };
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if line == ORACLE_MARKER {
                oracle = true;
            }
            continue;
        }
        if !header_seen {
            if line != MANIFEST_HEADER {
                return Err(err(format!("expected header `{MANIFEST_HEADER}`")));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let id = fields[0];
        if id.is_empty() || !ids.insert(id.to_string()) {
            return Err(err(format!("empty or duplicate id `{id}`")));
        }
        let label: usize = fields[2]
            .parse()
            .map_err(|_| err(format!("bad object label `{}`", fields[2])))?;
        let is_labeled = parse_bool(fields[4]).ok_or_else(|| err(format!("bad labeled flag `{}`", fields[4])))?;
        let image = Image::load(&root.join(fields[1]))?;
        let mut sample = Sample::new(id, image, label);
        sample.is_labeled = is_labeled;
        if !fields[3].is_empty() {
            let next = scene_names.len();
            let scene = *scene_ids.entry(fields[3].to_string()).or_insert_with(|| {
                scene_names.push(fields[3].to_string());
                next
            });
            sample.scene_label = Some(scene);
        }
        if !fields[5].is_empty() {
            let path = root.join(fields[5]);
            if oracle {
                let m = load_mask(&path, sample.image.shape())?.with_source(MaskSource::Oracle);
                sample.oracle_mask = Some(m);
            }
            sample.mask_path = Some(path);
        }
        if is_labeled {
            labeled.push(sample);
        } else {
            unlabeled.push(sample);
        }
    }
    if !header_seen {
        return Err(Error::Parse {
            path: manifest_path.to_path_buf(),
            line: 1,
            reason: "missing header".into(),
        });
    }

    let base_classes: BTreeSet<usize> = labeled.iter().map(|s: &Sample| s.object_label).collect();
    let all_classes: BTreeSet<usize> = labeled
        .iter()
        .chain(&unlabeled)
        .map(|s| s.object_label)
        .collect();
    let split = GcdSplit {
        labeled,
        unlabeled,
        base_classes,
        all_classes,
        base_scenes: None,
    };
    split.validate()?;
    Ok(LoadedDataset { split, scene_names })
}

/// Mask path following the `<image stem><suffix>.png` convention.
pub fn conventional_mask_path(image_path: &Path, suffix: &str) -> PathBuf {
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    image_path.with_file_name(format!("{stem}{suffix}.png"))
}
