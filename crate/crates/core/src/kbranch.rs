//! Local descriptor extraction: patch tiling, per-resolution CNN branches and
//! the fusion layer that merges branch outputs into one descriptor per patch.

use crate::config::BranchSpec;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// The R patches of every band subset of one image. Subset `k` is stored as
/// a single `[R × bands_k × h_k × w_k]` tensor with patches in row-major grid
/// order, which is also the sequence order seen by the recurrent module.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<F> {
    grid: usize,
    subsets: Vec<Tensor<F>>,
}

/// Tiles each `[bands × H × W]` subset into `patches` non-overlapping
/// patches on a square grid.
pub fn split_patches<F: Real>(subsets: &[Tensor<F>], patches: usize) -> Result<PatchSet<F>> {
    let grid = (patches as f64).sqrt().round() as usize;
    if patches == 0 || grid * grid != patches {
        return Err(Error::config(format!("patch count {patches} is not a perfect square")));
    }
    let mut out = Vec::with_capacity(subsets.len());
    for (k, img) in subsets.iter().enumerate() {
        let [c, h, w] = match img.shape() {
            [c, h, w] => [*c, *h, *w],
            s => return Err(Error::dim(format!("subset {k}: expected bands x H x W, got {s:?}"))),
        };
        if h % grid != 0 || w % grid != 0 {
            return Err(Error::config(format!(
                "subset {k}: {h}x{w} is not divisible into a {grid}x{grid} grid"
            )));
        }
        let (ph, pw) = (h / grid, w / grid);
        let src = img.data();
        let mut data = Vec::with_capacity(src.len());
        for gr in 0..grid {
            for gc in 0..grid {
                for band in 0..c {
                    for y in 0..ph {
                        let start = (band * h + gr * ph + y) * w + gc * pw;
                        data.extend_from_slice(&src[start..start + pw]);
                    }
                }
            }
        }
        out.push(Tensor::new([patches, c, ph, pw], data)?);
    }
    Ok(PatchSet { grid, subsets: out })
}

impl<F: Real> PatchSet<F> {
    pub fn patch_count(&self) -> usize {
        self.grid * self.grid
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn subset_count(&self) -> usize {
        self.subsets.len()
    }

    /// All patches of subset `k`, shape `[R × bands × h × w]`.
    pub fn subset(&self, k: usize) -> &Tensor<F> {
        &self.subsets[k]
    }

    /// Patch `r` of subset `k`, shape `[bands × h × w]`.
    pub fn patch(&self, k: usize, r: usize) -> Tensor<F> {
        let s = &self.subsets[k];
        let inner: usize = s.shape()[1..].iter().product();
        Tensor::new(s.shape()[1..].to_vec(), s.data()[r * inner..(r + 1) * inner].to_vec())
            .expect("patch shape")
    }

    /// Exchanges patches `a` and `b` in every subset.
    pub fn swap_patches(&mut self, a: usize, b: usize) {
        for s in &mut self.subsets {
            let inner: usize = s.shape()[1..].iter().product();
            let data = s.data_mut();
            for i in 0..inner {
                data.swap(a * inner + i, b * inner + i);
            }
        }
    }

    /// Inverse of [`split_patches`].
    pub fn reassemble(&self) -> Vec<Tensor<F>> {
        let g = self.grid;
        self.subsets
            .iter()
            .map(|s| {
                let (c, ph, pw) = (s.shape()[1], s.shape()[2], s.shape()[3]);
                let (h, w) = (ph * g, pw * g);
                let mut img = vec![F::zero(); c * h * w];
                for (r, patch) in s.data().chunks(c * ph * pw).enumerate() {
                    let (gr, gc) = (r / g, r % g);
                    for band in 0..c {
                        for y in 0..ph {
                            let dst = (band * h + gr * ph + y) * w + gc * pw;
                            let src = (band * ph + y) * pw;
                            img[dst..dst + pw].copy_from_slice(&patch[src..src + pw]);
                        }
                    }
                }
                Tensor::new([c, h, w], img).expect("image shape")
            })
            .collect()
    }
}

/// Graph handles of one branch's parameters.
#[derive(Clone, Debug)]
pub struct BranchVars {
    /// `(kernels, bias)` per conv layer.
    pub convs: Vec<(Var, Var)>,
    pub fc_weight: Var,
    pub fc_bias: Var,
}

/// Runs one CNN branch on a patch `[bands × h × w]` or on a batch of patches
/// `[N × bands × h × w]`: every conv is followed by ReLU and, where flagged,
/// 2×2 max-pooling; the flattened map then goes through the branch FC layer.
/// Returns `[fc_out]` or `[N × fc_out]`.
pub fn branch_forward<F: Real>(
    g: &mut Graph<'_, F>,
    patch: Var,
    spec: &BranchSpec,
    p: &BranchVars,
    fc_relu: bool,
) -> Result<Var> {
    let shape = g.shape(patch).to_vec();
    let batched = match shape.len() {
        3 => false,
        4 => true,
        _ => return Err(Error::dim(format!("branch input must be rank 3 or 4, got {shape:?}"))),
    };
    let channels = shape[shape.len() - 3];
    if channels != spec.channels() {
        return Err(Error::dim(format!(
            "branch expects {} channels ({:?}), patch has {channels}",
            spec.channels(),
            spec.bands
        )));
    }
    if p.convs.len() != spec.layers.len() {
        return Err(Error::Internal("branch parameter count does not match its layers".into()));
    }
    let mut x = patch;
    for (i, (layer, (k, b))) in spec.layers.iter().zip(&p.convs).enumerate() {
        x = g.conv2d(x, *k, *b)?;
        x = g.relu(x);
        if layer.pool {
            let s = g.shape(x);
            if s[s.len() - 2] < 2 || s[s.len() - 1] < 2 {
                return Err(Error::config(format!(
                    "pooling after layer {} would shrink a {}x{} map to zero",
                    i + 1,
                    s[s.len() - 2],
                    s[s.len() - 1]
                )));
            }
            x = g.maxpool2(x)?;
        }
    }
    let s = g.shape(x).to_vec();
    let flat = if batched { vec![s[0], s[1..].iter().product()] } else { vec![s.iter().product()] };
    x = g.reshape(x, flat)?;
    let y = g.linear(x, p.fc_weight, p.fc_bias)?;
    Ok(if fc_relu { g.relu(y) } else { y })
}

/// Concatenates the K branch outputs of each patch and maps them through the
/// shared fusion FC layer. Inputs are `[fc_out_k]` or `[R × fc_out_k]`;
/// the result is `[d_ψ]` or `[R × d_ψ]`.
pub fn fuse_descriptors<F: Real>(
    g: &mut Graph<'_, F>,
    branch_outputs: &[Var],
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let expected = g.shape(weight)[1];
    if branch_outputs.is_empty() {
        return Err(Error::Internal("no branch outputs to fuse".into()));
    }
    let axis = g.shape(branch_outputs[0]).len() - 1;
    let joined = g.concat(branch_outputs, axis)?;
    if g.shape(joined)[axis] != expected {
        return Err(Error::Internal(format!(
            "fused width {} does not match fusion layer input {expected}",
            g.shape(joined)[axis]
        )));
    }
    g.linear(joined, weight, bias)
}
