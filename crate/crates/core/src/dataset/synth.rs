//! Deterministic synthetic multi-resolution, multi-label scenes.
//!
//! Each class owns a spectral signature (one mean per band, across all
//! resolution groups) and a footprint measured in patch-grid cells. A scene
//! places up to four non-overlapping class regions on the patch grid, paints
//! every cell of every resolution group with its class signature (cells
//! without a region get the zero background), and adds Gaussian noise. The
//! label vector is the set of classes that ended up on the grid.

use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{split_counts, write_sample, Dataset, DatasetManifest, GeneratorInfo, Sample, Splits};
use super::{MANIFEST_FILE, SAMPLE_DIR};
use crate::config::{sentinel2_subsets, SubsetShape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Patch grid side shared by both profiles (16 patches).
pub const GRID: usize = 4;
const MAX_REGIONS: usize = 4;
const MIN_SIGNATURE_GAP: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// 4×24×24, 6×12×12, 2×4×4; at most 16 classes.
    Tiny,
    /// 4×120×120, 6×60×60, 2×20×20.
    BigEarthNetShaped,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Tiny => "tiny",
            Profile::BigEarthNetShaped => "bigearthnet-shaped",
        }
    }

    pub fn subsets(self) -> Vec<SubsetShape> {
        match self {
            Profile::Tiny => sentinel2_subsets([24, 12, 4]),
            Profile::BigEarthNetShaped => sentinel2_subsets([120, 60, 20]),
        }
    }

    pub fn default_classes(self) -> usize {
        match self {
            Profile::Tiny => 8,
            Profile::BigEarthNetShaped => 43,
        }
    }

    pub fn max_classes(self) -> usize {
        match self {
            Profile::Tiny => 16,
            Profile::BigEarthNetShaped => 43,
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "bigearthnet-shaped" | "bigearthnet" => Ok(Profile::BigEarthNetShaped),
            other => Err(Error::usage(format!(
                "unknown profile {other:?} (expected tiny or bigearthnet-shaped)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    pub n_samples: usize,
    pub profile: Profile,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub classes: usize,
    /// Integer train/val/test weights.
    pub split: [u32; 3],
}

impl SynthParams {
    pub fn new(seed: u64, n_samples: usize, profile: Profile) -> Self {
        Self {
            seed,
            n_samples,
            profile,
            noise: 0.1,
            classes: profile.default_classes(),
            split: [60, 20, 20],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples < 1 {
            return Err(Error::usage("n_samples must be at least 1"));
        }
        if self.classes < 1 || self.classes > self.profile.max_classes() {
            return Err(Error::usage(format!(
                "{} classes outside 1..={} for the {} profile",
                self.classes,
                self.profile.max_classes(),
                self.profile.name()
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::usage(format!("noise {} must be finite and >= 0", self.noise)));
        }
        Ok(())
    }
}

/// Class signatures and footprints shared by every scene of a dataset.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub subsets: Vec<SubsetShape>,
    /// `signatures[c][b]` is the mean of band `b` (bands numbered across all
    /// subsets in order) for class `c`.
    pub signatures: Vec<Vec<f64>>,
    /// `(rows, cols)` in grid cells.
    pub footprints: Vec<(usize, usize)>,
    pub noise: f64,
}

impl SyntheticWorld {
    pub fn new(params: &SynthParams) -> Result<Self> {
        params.validate()?;
        let subsets = params.profile.subsets();
        let bands: usize = subsets.iter().map(|s| s.bands.len()).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut signatures: Vec<Vec<f64>> = Vec::with_capacity(params.classes);
        while signatures.len() < params.classes {
            let cand: Vec<f64> = (0..bands).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let far_from = |other: &[f64]| {
                cand.iter().zip(other).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= MIN_SIGNATURE_GAP
            };
            if far_from(&vec![0.0; bands]) && signatures.iter().all(|s| far_from(s)) {
                signatures.push(cand);
            }
        }
        let footprints = (0..params.classes).map(|c| (1 + c % 2, 1 + (c / 2) % 2)).collect();
        Ok(Self { subsets, signatures, footprints, noise: params.noise })
    }

    pub fn classes(&self) -> usize {
        self.signatures.len()
    }

    /// Cell-to-class map of one scene (`None` = background), row-major.
    pub fn layout(&self, rng: &mut impl Rng) -> Vec<Option<usize>> {
        let c = self.classes();
        let regions = rng.gen_range(1..=MAX_REGIONS.min(c));
        let chosen = sample_indices(rng, c, regions).into_vec();
        let mut cells = vec![None; GRID * GRID];
        for class in chosen {
            let (fh, fw) = self.footprints[class];
            let spots: Vec<(usize, usize)> = (0..=GRID - fh)
                .flat_map(|r| (0..=GRID - fw).map(move |q| (r, q)))
                .filter(|&(r, q)| (r..r + fh).all(|y| (q..q + fw).all(|x| cells[y * GRID + x].is_none())))
                .collect();
            if spots.is_empty() {
                continue;
            }
            let (r, q) = spots[rng.gen_range(0..spots.len())];
            for y in r..r + fh {
                for x in q..q + fw {
                    cells[y * GRID + x] = Some(class);
                }
            }
        }
        cells
    }

    /// Renders a scene for a given cell layout.
    pub fn render(&self, id: String, cells: &[Option<usize>], rng: &mut impl Rng) -> Sample {
        let mut band_offset = 0;
        let mut subsets = Vec::with_capacity(self.subsets.len());
        for shape in &self.subsets {
            let (h, w) = (shape.height, shape.width);
            let (ch, cw) = (h / GRID, w / GRID);
            let mut data = Vec::with_capacity(shape.bands.len() * h * w);
            for b in 0..shape.bands.len() {
                for y in 0..h {
                    for x in 0..w {
                        let mean = match cells[(y / ch) * GRID + x / cw] {
                            Some(class) => self.signatures[class][band_offset + b],
                            None => 0.0,
                        };
                        let eps: f64 = if self.noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                        data.push((mean + self.noise * eps) as f32);
                    }
                }
            }
            band_offset += shape.bands.len();
            subsets.push(Tensor::new([shape.bands.len(), h, w], data).expect("subset shape"));
        }
        let mut labels = vec![0u8; self.classes()];
        for class in cells.iter().flatten() {
            labels[*class] = 1;
        }
        Sample { id, subsets, labels }
    }

    /// Scene `index` of the dataset; each index draws from its own stream.
    pub fn sample(&self, seed: u64, index: usize) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64 + 1);
        let cells = self.layout(&mut rng);
        self.render(sample_id(index), &cells, &mut rng)
    }
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Writes `params.n_samples` scenes and a manifest under `out`.
pub fn generate_synthetic(out: &Path, params: &SynthParams) -> Result<Dataset> {
    let world = SyntheticWorld::new(params)?;
    let counts = split_counts(params.n_samples, params.split)?;
    let sample_dir = out.join(SAMPLE_DIR);
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;

    for i in 0..params.n_samples {
        let s = world.sample(params.seed, i);
        write_sample(&sample_dir.join(format!("{}.mrs", s.id)), &s)?;
    }

    let mut ids: Vec<String> = (0..params.n_samples).map(sample_id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(0x5_911);
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
    let mut rest = ids.into_iter();
    let mut take = |n: usize| {
        let mut v: Vec<String> = rest.by_ref().take(n).collect();
        v.sort();
        v
    };
    let splits = Splits { train: take(counts[0]), val: take(counts[1]), test: take(counts[2]) };

    let manifest = DatasetManifest {
        format: "MRS1".into(),
        subsets: world.subsets.clone(),
        classes: (0..world.classes()).map(|c| format!("class_{c:02}")).collect(),
        splits,
        generator: Some(GeneratorInfo {
            seed: params.seed,
            profile: params.profile.name().into(),
            noise: params.noise,
            n_samples: params.n_samples,
        }),
    };
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_toml()).map_err(|e| Error::io(&path, e))?;
    Dataset::open(out)
}
