//! Spectrogram to patch-sequence conversion for the transformer models.

use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchLayout {
    /// Non-overlapping `patch_h × patch_w` tiles, row-major over the grid,
    /// each tile flattened row-major.
    Grid { patch_h: usize, patch_w: usize },
    /// Full-height windows `width` frames wide, every `stride` frames, each
    /// flattened time-major (one mel column after another).
    Vertical { width: usize, stride: usize },
}

impl PatchLayout {
    /// `(n_patches, patch_dim)` for an `n_mels × n_frames` input.
    pub fn geometry(&self, n_mels: usize, n_frames: usize) -> Result<(usize, usize)> {
        match *self {
            PatchLayout::Grid { patch_h, patch_w } => {
                if patch_h == 0 || patch_w == 0 || patch_h > n_mels || patch_w > n_frames {
                    return Err(Error::invalid(format!(
                        "patch {patch_h}x{patch_w} does not fit a {n_mels}x{n_frames} spectrogram"
                    )));
                }
                Ok(((n_mels / patch_h) * (n_frames / patch_w), patch_h * patch_w))
            }
            PatchLayout::Vertical { width, stride } => {
                if width == 0 || stride == 0 || width > n_frames {
                    return Err(Error::invalid(format!(
                        "vertical patch width {width} stride {stride} does not fit {n_frames} frames"
                    )));
                }
                Ok(((n_frames - width) / stride + 1, n_mels * width))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence<T = f32> {
    /// `[n_patches × patch_dim]`, row-major.
    pub patches: Vec<T>,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub layout: PatchLayout,
}

impl<T: Copy> PatchSequence<T> {
    pub fn patch(&self, i: usize) -> &[T] {
        &self.patches[i * self.patch_dim..(i + 1) * self.patch_dim]
    }
}

/// Patchify a row-major `n_mels × n_frames` matrix.
pub fn patchify<T: Copy>(values: &[T], n_mels: usize, n_frames: usize, layout: PatchLayout) -> Result<PatchSequence<T>> {
    if values.len() != n_mels * n_frames {
        return Err(Error::invalid(format!(
            "{} values do not form a {n_mels}x{n_frames} matrix",
            values.len()
        )));
    }
    let (n_patches, patch_dim) = layout.geometry(n_mels, n_frames)?;
    let mut patches = Vec::with_capacity(n_patches * patch_dim);
    match layout {
        PatchLayout::Grid { patch_h, patch_w } => {
            for gy in 0..n_mels / patch_h {
                for gx in 0..n_frames / patch_w {
                    for r in 0..patch_h {
                        let row = (gy * patch_h + r) * n_frames + gx * patch_w;
                        patches.extend_from_slice(&values[row..row + patch_w]);
                    }
                }
            }
        }
        PatchLayout::Vertical { width, stride } => {
            for p in 0..n_patches {
                for t in p * stride..p * stride + width {
                    patches.extend((0..n_mels).map(|m| values[m * n_frames + t]));
                }
            }
        }
    }
    Ok(PatchSequence {
        patches,
        n_patches,
        patch_dim,
        layout,
    })
}

pub fn grid_patchify(spec: &MelSpectrogram, patch_h: usize, patch_w: usize) -> Result<PatchSequence> {
    patchify(&spec.values, spec.n_mels, spec.n_frames, PatchLayout::Grid { patch_h, patch_w })
}

pub fn vertical_patchify(spec: &MelSpectrogram, width: usize, stride: usize) -> Result<PatchSequence> {
    patchify(&spec.values, spec.n_mels, spec.n_frames, PatchLayout::Vertical { width, stride })
}

/// Inverse of [`patchify`] over the region the patches cover. Returns
/// `(values, rows, cols)`; for grid layouts this is the input cropped to a
/// whole number of tiles, for vertical layouts all mel rows and the frames
/// up to the end of the last window (windows must not leave gaps).
pub fn unpatchify<T: Copy + Default>(seq: &PatchSequence<T>, n_mels: usize) -> Result<(Vec<T>, usize, usize)> {
    match seq.layout {
        PatchLayout::Grid { patch_h, patch_w } => {
            let cols = patch_w * (n_frames_from_grid(seq, n_mels, patch_h)?);
            let gx_n = cols / patch_w;
            let rows = (n_mels / patch_h) * patch_h;
            let mut out = vec![T::default(); rows * cols];
            for p in 0..seq.n_patches {
                let (gy, gx) = (p / gx_n, p % gx_n);
                for r in 0..patch_h {
                    let dst = (gy * patch_h + r) * cols + gx * patch_w;
                    out[dst..dst + patch_w].copy_from_slice(&seq.patch(p)[r * patch_w..(r + 1) * patch_w]);
                }
            }
            Ok((out, rows, cols))
        }
        PatchLayout::Vertical { width, stride } => {
            if stride > width {
                return Err(Error::invalid("vertical patches with stride > width leave gaps"));
            }
            let cols = (seq.n_patches - 1) * stride + width;
            let mut out = vec![T::default(); n_mels * cols];
            for p in 0..seq.n_patches {
                for (k, t) in (p * stride..p * stride + width).enumerate() {
                    for m in 0..n_mels {
                        out[m * cols + t] = seq.patch(p)[k * n_mels + m];
                    }
                }
            }
            Ok((out, n_mels, cols))
        }
    }
}

fn n_frames_from_grid<T>(seq: &PatchSequence<T>, n_mels: usize, patch_h: usize) -> Result<usize> {
    let gy_n = n_mels / patch_h;
    if gy_n == 0 || !seq.n_patches.is_multiple_of(gy_n) {
        return Err(Error::invalid("patch count does not match the mel extent"));
    }
    Ok(seq.n_patches / gy_n)
}
