use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{DiskSpace, SpaceDescriptor, SpaceSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
}

/// Dataset description, usually read from TOML:
///
/// ```toml
/// eval_split = "test"          # optional, default "test"
///
/// [[spaces]]
/// name = "BF"
/// root = "bf"                  # relative to the manifest file
///
/// [[spaces]]
/// name = "SHG"
/// root = "shg"
/// preprocessing = ["log_transform"]
/// expected_count = 206
///
/// [splits]                     # optional; pair id -> train | test | val
/// "0001" = "train"
/// "0002" = "test"
/// ```
///
/// Pairs are the file stems shared by every space. Without a `splits`
/// table every pair is evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spaces: Vec<SpaceDescriptor>,
    #[serde(default)]
    pub splits: BTreeMap<String, Split>,
    #[serde(default = "default_split")]
    pub eval_split: Split,
}

fn default_split() -> Split {
    Split::Test
}

impl DatasetManifest {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut m: DatasetManifest = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        for sd in &mut m.spaces {
            if sd.root.is_relative() {
                sd.root = base.join(&sd.root);
            }
        }
        let mut names = BTreeSet::new();
        for sd in &m.spaces {
            if !names.insert(sd.name.as_str()) {
                return Err(Error::Manifest(format!("space `{}` declared twice", sd.name)));
            }
        }
        if m.spaces.is_empty() {
            return Err(Error::Manifest("no spaces declared".into()));
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        DatasetManifest::from_toml(&text, &base)
    }

    /// Scans every space and checks that all of them hold the same pair ids.
    pub fn open(&self) -> Result<OpenedDataset> {
        let spaces = self
            .spaces
            .iter()
            .map(|sd| DiskSpace::open(sd.clone()))
            .collect::<Result<Vec<_>>>()?;
        let reference: BTreeSet<String> = spaces[0].ids().into_iter().collect();
        for s in &spaces[1..] {
            let ids: BTreeSet<String> = s.ids().into_iter().collect();
            if ids != reference {
                let diff: Vec<&String> = ids.symmetric_difference(&reference).take(5).collect();
                return Err(Error::Manifest(format!(
                    "spaces `{}` and `{}` disagree on pair ids (e.g. {diff:?})",
                    spaces[0].name(),
                    s.name()
                )));
            }
        }
        for id in self.splits.keys() {
            if !reference.contains(id) {
                return Err(Error::Manifest(format!("split lists unknown pair `{id}`")));
            }
        }
        let pairs: Vec<String> = spaces[0].ids();
        let eval_pairs = if self.splits.is_empty() {
            pairs.clone()
        } else {
            pairs
                .iter()
                .filter(|id| self.splits.get(*id) == Some(&self.eval_split))
                .cloned()
                .collect()
        };
        if eval_pairs.is_empty() {
            return Err(Error::Manifest(format!("no pairs in the {:?} split", self.eval_split)));
        }
        Ok(OpenedDataset {
            spaces,
            pairs,
            eval_pairs,
            split_sizes: self.split_sizes(),
        })
    }

    pub fn split_sizes(&self) -> BTreeMap<Split, usize> {
        let mut out = BTreeMap::new();
        for s in self.splits.values() {
            *out.entry(*s).or_insert(0) += 1;
        }
        out
    }
}

/// Spaces of a manifest after scanning.
#[derive(Debug)]
pub struct OpenedDataset {
    pub spaces: Vec<DiskSpace>,
    /// All pair ids, in listing order.
    pub pairs: Vec<String>,
    /// The pairs that are indexed and queried.
    pub eval_pairs: Vec<String>,
    pub split_sizes: BTreeMap<Split, usize>,
}

impl OpenedDataset {
    pub fn sources(&self) -> Vec<&dyn SpaceSource> {
        self.spaces.iter().map(|s| s as &dyn SpaceSource).collect()
    }

    pub fn space_names(&self) -> Vec<String> {
        self.spaces.iter().map(|s| s.name().to_string()).collect()
    }
}
