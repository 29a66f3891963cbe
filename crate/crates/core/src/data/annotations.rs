use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::Sample;
use crate::{Error, Result};

/// `<sample_id>,<scene_name>` records with scene names interned in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneAnnotations {
    pub names: Vec<String>,
    pub by_id: BTreeMap<String, usize>,
}

impl SceneAnnotations {
    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn scene_id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut out = SceneAnnotations::default();
        let mut interned: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                reason,
            };
            let (id, name) = line
                .split_once(',')
                .ok_or_else(|| err("expected `<sample_id>,<scene_name>`".into()))?;
            let (id, name) = (id.trim(), name.trim());
            if id.is_empty() || name.is_empty() || name.contains(',') {
                return Err(err(format!("malformed record `{line}`")));
            }
            let next = interned.len();
            let scene = *interned.entry(name.to_string()).or_insert_with(|| {
                out.names.push(name.to_string());
                next
            });
            if out.by_id.insert(id.to_string(), scene).is_some() {
                return Err(err(format!("duplicate sample id `{id}`")));
            }
        }
        Ok(out)
    }
}

pub fn load_scene_annotations(path: &Path) -> Result<SceneAnnotations> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    SceneAnnotations::parse(&text, path)
}

/// Set `scene_label` on every annotated sample; annotations for unknown ids are rejected.
pub fn attach_scene_annotations<'a>(
    samples: impl IntoIterator<Item = &'a mut Sample>,
    ann: &SceneAnnotations,
) -> Result<usize> {
    let mut seen = 0usize;
    let mut index: HashMap<&str, usize> = ann.by_id.iter().map(|(k, &v)| (k.as_str(), v)).collect();
    for s in samples {
        if let Some(scene) = index.remove(s.id.as_str()) {
            s.scene_label = Some(scene);
            seen += 1;
        }
    }
    if let Some(unknown) = index.keys().min() {
        return Err(Error::InvalidArgument(format!(
            "scene annotation for unknown sample `{unknown}`"
        )));
    }
    Ok(seen)
}
