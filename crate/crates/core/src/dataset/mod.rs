//! On-disk datasets: one MRS1 file per sample plus a TOML manifest.
//!
//! ```text
//! <root>/manifest.toml
//! <root>/samples/<id>.mrs
//! ```

mod format;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use format::{decode_sample, encode_sample, read_sample, write_sample, SAMPLE_MAGIC, SAMPLE_VERSION};
pub(crate) use format::Reader;

use crate::config::SubsetShape;
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SAMPLE_DIR: &str = "samples";

/// One scene: K band-subset stacks and a binary label vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[bands_k × H_k × W_k]` per resolution group.
    pub subsets: Vec<Tensor<f32>>,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn label_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(self.labels.iter().map(|&v| f32::from(v)).collect())
    }

    pub fn positive_labels(&self) -> usize {
        self.labels.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::usage(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Provenance of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub profile: String,
    pub noise: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub subsets: Vec<SubsetShape>,
    pub classes: Vec<String>,
    pub splits: Splits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
}

impl DatasetManifest {
    pub fn k(&self) -> usize {
        self.subsets.len()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("manifest: {e}")))
    }

    /// Splits must be pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        if self.format != "MRS1" {
            return Err(Error::config(format!("manifest format {:?} is not MRS1", self.format)));
        }
        let mut seen = std::collections::HashSet::new();
        for split in Split::ALL {
            for id in self.splits.get(split) {
                if !seen.insert(id.as_str()) {
                    return Err(Error::config(format!("sample {id} listed in more than one split")));
                }
            }
        }
        Ok(())
    }

    /// Checks a decoded sample against the manifest geometry.
    pub fn check_sample(&self, s: &Sample) -> Result<(), FormatError> {
        if s.subsets.len() != self.k() {
            return Err(FormatError::ShapeMismatch(format!(
                "{} subsets, manifest has {}",
                s.subsets.len(),
                self.k()
            )));
        }
        for (k, (t, shape)) in s.subsets.iter().zip(&self.subsets).enumerate() {
            let want = [shape.bands.len(), shape.height, shape.width];
            if t.shape() != want {
                return Err(FormatError::ShapeMismatch(format!(
                    "subset {k} is {:?}, manifest has {want:?}",
                    t.shape()
                )));
            }
        }
        if s.labels.len() != self.class_count() {
            return Err(FormatError::ShapeMismatch(format!(
                "{} labels, manifest has {} classes",
                s.labels.len(),
                self.class_count()
            )));
        }
        Ok(())
    }
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = DatasetManifest::from_toml(&text)?;
        manifest.validate()?;
        let ds = Self { root, manifest };
        for split in Split::ALL {
            for id in ds.manifest.splits.get(split) {
                let p = ds.sample_path(id);
                if !p.is_file() {
                    return Err(Error::config(format!("sample {id} has no file at {}", p.display())));
                }
            }
        }
        Ok(ds)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn sample_path(&self, id: &str) -> PathBuf {
        self.root.join(SAMPLE_DIR).join(format!("{id}.mrs"))
    }

    /// Reads one sample and checks it against the manifest.
    pub fn read(&self, id: &str) -> Result<Sample> {
        let path = self.sample_path(id);
        let s = read_sample(&path)?;
        self.manifest.check_sample(&s).map_err(|source| Error::Format { path, source })?;
        Ok(s)
    }

    pub fn ids(&self, split: Split) -> &[String] {
        self.manifest.splits.get(split)
    }

    /// Samples of `split` in manifest order.
    pub fn load_split(&self, split: Split) -> impl Iterator<Item = Result<Sample>> + '_ {
        self.ids(split).iter().map(move |id| self.read(id))
    }

    /// Samples of `split` in a seeded shuffled order.
    pub fn load_split_shuffled(&self, split: Split, seed: u64) -> impl Iterator<Item = Result<Sample>> + '_ {
        let mut ids: Vec<&String> = self.ids(split).iter().collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        ids.into_iter().map(move |id| self.read(id))
    }
}

/// Split sizes for `n` samples under integer `weights`: each split gets the
/// floor of its share, then leftover samples go one at a time to the splits
/// with the largest fractional remainders (earlier split on ties).
pub fn split_counts(n: usize, weights: [u32; 3]) -> Result<[usize; 3]> {
    let total: u64 = weights.iter().map(|&w| u64::from(w)).sum();
    if total == 0 {
        return Err(Error::usage("split weights must not all be zero"));
    }
    let mut counts = [0usize; 3];
    let mut rems = [0u64; 3];
    for i in 0..3 {
        let share = n as u64 * u64::from(weights[i]);
        counts[i] = (share / total) as usize;
        rems[i] = share % total;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if weights[i] > 0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rounding() {
        assert_eq!(split_counts(100, [60, 20, 20]).unwrap(), [60, 20, 20]);
        assert_eq!(split_counts(64, [60, 20, 20]).unwrap(), [38, 13, 13]);
        assert_eq!(split_counts(1, [60, 20, 20]).unwrap(), [1, 0, 0]);
        assert_eq!(split_counts(768, [4, 1, 1]).unwrap(), [512, 128, 128]);
        assert_eq!(split_counts(10, [1, 0, 0]).unwrap(), [10, 0, 0]);
        for n in 0..200 {
            assert_eq!(split_counts(n, [60, 20, 20]).unwrap().iter().sum::<usize>(), n);
        }
        assert!(split_counts(5, [0, 0, 0]).is_err());
    }

    #[test]
    fn split_names_parse() {
        assert_eq!("test".parse::<Split>().unwrap(), Split::Test);
        assert!(matches!("holdout".parse::<Split>(), Err(Error::Usage(_))));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let m = DatasetManifest {
            format: "MRS1".into(),
            subsets: vec![],
            classes: vec!["a".into()],
            splits: Splits { train: vec!["s1".into()], val: vec![], test: vec!["s1".into()] },
            generator: None,
        };
        assert!(matches!(m.validate(), Err(Error::Config(_))));
    }
}
