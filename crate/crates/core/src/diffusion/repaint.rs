use serde::{Deserialize, Serialize};

use super::{reverse_step, stream, Denoiser, LatentGrid, LatentMask, NoiseSchedule};
use crate::error::{Error, Result};
use crate::scene::DensityLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepaintParams {
    /// Jump length `J`.
    pub jump: usize,
    /// Passes per jump window `R`; 1 disables resampling.
    pub resample: usize,
}

impl Default for RepaintParams {
    fn default() -> Self {
        Self { jump: 10, resample: 10 }
    }
}

/// Sequence of states visited after `z_S`: each entry is the state reached
/// by one down (`t → t−1`) or up (`t → t+1`) transition. After reaching a
/// jump point `s ∈ {J, 2J, …}` with `s + J ≤ S`, the chain goes up `J`
/// steps and back down, `R − 1` times.
pub fn jump_schedule(steps: usize, params: RepaintParams) -> Vec<usize> {
    let (j, r) = (params.jump.max(1), params.resample.max(1));
    let mut remaining = vec![r - 1; steps + 1];
    let mut out = Vec::new();
    let mut t = steps;
    while t > 0 {
        t -= 1;
        out.push(t);
        if t > 0 && t.is_multiple_of(j) && t + j <= steps && remaining[t] > 0 {
            remaining[t] -= 1;
            for _ in 0..j {
                t += 1;
                out.push(t);
            }
        }
    }
    out
}

/// Masked sampling: entries where `mask` is set are synthesized, the rest
/// follow the forward-noised `known` latent and end at `known` exactly.
/// Resampling is skipped when the mask has no known or no unknown entries.
pub fn repaint(
    denoiser: &dyn Denoiser,
    known: &LatentGrid,
    mask: &LatentMask,
    label: Option<DensityLabel>,
    sched: &NoiseSchedule,
    params: RepaintParams,
    seed: u64,
) -> Result<LatentGrid> {
    if (mask.h, mask.w, mask.c) != known.shape() || mask.data.len() != known.data.len() {
        return Err(Error::config(format!(
            "mask shape {:?} differs from latent shape {:?}",
            (mask.h, mask.w, mask.c),
            known.shape()
        )));
    }
    if params.jump == 0 || params.resample == 0 {
        return Err(Error::config("jump length and resample count must be positive"));
    }
    let (h, w, c) = known.shape();
    let unknown = mask.unknown_count();
    let mixed = unknown > 0 && unknown < mask.data.len();
    let plan = if mixed {
        jump_schedule(sched.len(), params)
    } else {
        (0..sched.len()).rev().collect()
    };

    let mut main = stream(seed, 0);
    let mut known_rng = stream(seed, 1);
    let mut jump_rng = stream(seed, 2);
    let mut z = LatentGrid::gaussian(h, w, c, &mut main);
    z.split = known.split;
    let mut t = sched.len();
    for next in plan {
        if next + 1 == t {
            let noise = LatentGrid::gaussian(h, w, c, &mut main);
            let down = reverse_step(denoiser, &z, t, label, &noise, sched)?;
            let eps = LatentGrid::gaussian(h, w, c, &mut known_rng);
            let ab = sched.alpha_bar(next);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            for i in 0..z.data.len() {
                z.data[i] = if mask.data[i] {
                    down.data[i]
                } else if next == 0 {
                    known.data[i]
                } else {
                    a * known.data[i] + b * eps.data[i]
                };
            }
        } else {
            let eps = LatentGrid::gaussian(h, w, c, &mut jump_rng);
            let (a, b) = (sched.alpha(next).sqrt(), sched.beta(next).sqrt());
            for (v, e) in z.data.iter_mut().zip(&eps.data) {
                *v = a * *v + b * e;
            }
        }
        t = next;
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelGroup {
    Ground,
    Object,
}

/// Region to synthesize. Rectangles are half-open cell ranges over all
/// channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSpec {
    Half(Side),
    Channels(ChannelGroup),
    Rect { rows: [usize; 2], cols: [usize; 2] },
}

/// Builds the binary mask for `spec` on an `h × w × c` latent whose ground
/// channels are `[0, split)`.
pub fn build_mask(spec: MaskSpec, h: usize, w: usize, c: usize, split: usize) -> Result<LatentMask> {
    if split > c {
        return Err(Error::config(format!("split {split} exceeds {c} channels")));
    }
    let (rows, cols, chans) = match spec {
        MaskSpec::Half(Side::Left) => (0..h, 0..w / 2, 0..c),
        MaskSpec::Half(Side::Right) => (0..h, w / 2..w, 0..c),
        MaskSpec::Half(Side::Top) => (0..h / 2, 0..w, 0..c),
        MaskSpec::Half(Side::Bottom) => (h / 2..h, 0..w, 0..c),
        MaskSpec::Channels(ChannelGroup::Ground) => (0..h, 0..w, 0..split),
        MaskSpec::Channels(ChannelGroup::Object) => (0..h, 0..w, split..c),
        MaskSpec::Rect { rows, cols } => {
            if rows[1] > h || cols[1] > w {
                return Err(Error::config(format!("rectangle {rows:?}x{cols:?} exceeds {h}x{w}")));
            }
            (rows[0]..rows[1], cols[0]..cols[1], 0..c)
        }
    };
    if rows.is_empty() || cols.is_empty() || chans.is_empty() {
        return Err(Error::config(format!("mask {spec:?} selects an empty region")));
    }
    let mut mask = LatentMask::all(h, w, c, false);
    for y in rows {
        for x in cols.clone() {
            for ch in chans.clone() {
                mask.data[(y * w + x) * c + ch] = true;
            }
        }
    }
    Ok(mask)
}
