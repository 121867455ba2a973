use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{repaint, Denoiser, LatentGrid, LatentMask, NoiseSchedule, RepaintParams};
use crate::error::{Error, Result};
use crate::scene::DensityLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Right,
    Left,
    Down,
    Up,
}

impl Direction {
    /// Step in half-block units as `(rows, cols)`.
    pub fn step(self) -> (i64, i64) {
        match self {
            Direction::Right => (0, 1),
            Direction::Left => (0, -1),
            Direction::Down => (1, 0),
            Direction::Up => (-1, 0),
        }
    }
}

/// A generated window. `offset` is in half-block units relative to the seed
/// latent, so neighbours overlap by 50%.
#[derive(Debug, Clone, PartialEq)]
pub struct OutpaintBlock {
    pub offset: (i64, i64),
    pub latent: LatentGrid,
}

/// Sparse union of placed blocks, keyed by global cell.
#[derive(Debug, Clone)]
pub struct Canvas {
    h: usize,
    w: usize,
    c: usize,
    split: usize,
    cells: BTreeMap<(i64, i64), Vec<f64>>,
}

impl Canvas {
    fn new(template: &LatentGrid) -> Result<Self> {
        if !template.h.is_multiple_of(2) || !template.w.is_multiple_of(2) || template.h == 0 || template.w == 0 {
            return Err(Error::config(format!(
                "outpainting needs even, non-zero block sides (got {}x{})",
                template.h, template.w
            )));
        }
        Ok(Self {
            h: template.h,
            w: template.w,
            c: template.c,
            split: template.split,
            cells: BTreeMap::new(),
        })
    }

    fn origin(&self, offset: (i64, i64)) -> (i64, i64) {
        (offset.0 * self.h as i64 / 2, offset.1 * self.w as i64 / 2)
    }

    /// Writes a block, failing if it disagrees with cells already present.
    fn place(&mut self, block: &OutpaintBlock) -> Result<()> {
        let z = &block.latent;
        if z.shape() != (self.h, self.w, self.c) {
            return Err(Error::config(format!(
                "block shape {:?} differs from the seed",
                z.shape()
            )));
        }
        let (oy, ox) = self.origin(block.offset);
        for y in 0..self.h {
            for x in 0..self.w {
                let start = z.index(y, x, 0);
                let values = &z.data[start..start + self.c];
                let key = (oy + y as i64, ox + x as i64);
                match self.cells.get(&key) {
                    Some(old) if old.as_slice() != values => {
                        return Err(Error::InconsistentOverlap { y: key.0, x: key.1 });
                    }
                    Some(_) => {}
                    None => {
                        self.cells.insert(key, values.to_vec());
                    }
                }
            }
        }
        Ok(())
    }

    /// Known latent and mask for a window: placed cells are known.
    fn window(&self, offset: (i64, i64)) -> (LatentGrid, LatentMask) {
        let (oy, ox) = self.origin(offset);
        let mut known = LatentGrid::zeros(self.h, self.w, self.c);
        known.split = self.split;
        let mut mask = LatentMask::all(self.h, self.w, self.c, true);
        for y in 0..self.h {
            for x in 0..self.w {
                if let Some(values) = self.cells.get(&(oy + y as i64, ox + x as i64)) {
                    let start = known.index(y, x, 0);
                    known.data[start..start + self.c].copy_from_slice(values);
                    mask.data[start..start + self.c].fill(false);
                }
            }
        }
        (known, mask)
    }

    /// Dense grid over the bounding box of all placed cells, with its
    /// top-left global cell. Cells never written are zero.
    pub fn to_grid(&self) -> (LatentGrid, (i64, i64)) {
        let (Some(&(y0, _)), Some(&(y1, _))) = (self.cells.keys().next(), self.cells.keys().next_back()) else {
            return (LatentGrid::zeros(0, 0, self.c), (0, 0));
        };
        let x0 = self.cells.keys().map(|k| k.1).min().unwrap_or(0);
        let x1 = self.cells.keys().map(|k| k.1).max().unwrap_or(0);
        let (h, w) = ((y1 - y0 + 1) as usize, (x1 - x0 + 1) as usize);
        let mut grid = LatentGrid::zeros(h, w, self.c);
        grid.split = self.split;
        for (&(y, x), values) in &self.cells {
            let start = grid.index((y - y0) as usize, (x - x0) as usize, 0);
            grid.data[start..start + self.c].copy_from_slice(values);
        }
        (grid, (y0, x0))
    }
}

/// Derives an independent seed for window `index`.
fn window_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[allow(clippy::too_many_arguments)]
fn run_windows(
    denoiser: &dyn Denoiser,
    seed_latent: &LatentGrid,
    offsets: &[(i64, i64)],
    label: Option<DensityLabel>,
    sched: &NoiseSchedule,
    params: RepaintParams,
    seed: u64,
) -> Result<Vec<OutpaintBlock>> {
    let mut canvas = Canvas::new(seed_latent)?;
    canvas.place(&OutpaintBlock {
        offset: (0, 0),
        latent: seed_latent.clone(),
    })?;
    let mut out = Vec::with_capacity(offsets.len());
    for (i, &offset) in offsets.iter().enumerate() {
        let (known, mask) = canvas.window(offset);
        let latent = repaint(
            denoiser,
            &known,
            &mask,
            label,
            sched,
            params,
            window_seed(seed, i as u64),
        )?;
        let block = OutpaintBlock { offset, latent };
        canvas.place(&block)?;
        out.push(block);
        log::debug!("outpainted window {} of {} at {offset:?}", i + 1, offsets.len());
    }
    Ok(out)
}

/// Extends the seed latent `blocks` times in one direction; each window
/// keeps the half it shares with its predecessor and synthesizes the other.
#[allow(clippy::too_many_arguments)]
pub fn outpaint_chain(
    denoiser: &dyn Denoiser,
    seed_latent: &LatentGrid,
    direction: Direction,
    blocks: usize,
    label: Option<DensityLabel>,
    sched: &NoiseSchedule,
    params: RepaintParams,
    seed: u64,
) -> Result<Vec<OutpaintBlock>> {
    let (dy, dx) = direction.step();
    let offsets: Vec<_> = (1..=blocks as i64).map(|k| (k * dy, k * dx)).collect();
    run_windows(denoiser, seed_latent, &offsets, label, sched, params, seed)
}

/// Fills the 3×3 half-stride neighbourhood of the seed: four cardinal
/// windows, then four corners, each conditioned on an L-shaped region
/// covered by its two adjacent cardinal windows.
pub fn outpaint_neighborhood(
    denoiser: &dyn Denoiser,
    seed_latent: &LatentGrid,
    label: Option<DensityLabel>,
    sched: &NoiseSchedule,
    params: RepaintParams,
    seed: u64,
) -> Result<Vec<OutpaintBlock>> {
    let offsets = [(0, 1), (0, -1), (1, 0), (-1, 0), (-1, -1), (-1, 1), (1, -1), (1, 1)];
    run_windows(denoiser, seed_latent, &offsets, label, sched, params, seed)
}

/// Merges blocks into one canvas, checking that every shared cell agrees
/// exactly. Returns the dense grid and the global cell of its top-left.
pub fn assemble(blocks: &[OutpaintBlock]) -> Result<(LatentGrid, (i64, i64))> {
    let first = blocks.first().ok_or_else(|| Error::config("nothing to assemble"))?;
    let mut canvas = Canvas::new(&first.latent)?;
    for b in blocks {
        canvas.place(b)?;
    }
    Ok(canvas.to_grid())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;

    impl Denoiser for Zero {
        fn predict_noise(&self, z: &LatentGrid, _t: usize, _y: Option<DensityLabel>) -> Result<LatentGrid> {
            Ok(LatentGrid::zeros(z.h, z.w, z.c))
        }
    }

    #[test]
    fn chain_preserves_overlap() {
        let sched = NoiseSchedule::linear(20, 0.01, 0.2).unwrap();
        let mut seed = LatentGrid::zeros(4, 6, 2);
        for (i, v) in seed.data.iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        let params = RepaintParams { jump: 3, resample: 2 };
        let blocks = outpaint_chain(&Zero, &seed, Direction::Right, 2, None, &sched, params, 5).unwrap();
        assert_eq!(blocks.len(), 2);
        for y in 0..4 {
            for x in 0..3 {
                for ch in 0..2 {
                    assert_eq!(blocks[0].latent.get(y, x, ch), seed.get(y, x + 3, ch));
                    assert_eq!(blocks[1].latent.get(y, x, ch), blocks[0].latent.get(y, x + 3, ch));
                }
            }
        }
        let (grid, origin) = assemble(&[
            OutpaintBlock {
                offset: (0, 0),
                latent: seed,
            },
            blocks[0].clone(),
            blocks[1].clone(),
        ])
        .unwrap();
        assert_eq!((grid.h, grid.w, origin), (4, 12, (0, 0)));
    }

    #[test]
    fn assemble_detects_disagreement() {
        let a = OutpaintBlock {
            offset: (0, 0),
            latent: LatentGrid::zeros(2, 2, 1),
        };
        let b = OutpaintBlock {
            offset: (0, 1),
            latent: LatentGrid::filled(2, 2, 1, 1.0),
        };
        assert!(matches!(
            assemble(&[a, b]),
            Err(Error::InconsistentOverlap { y: 0, x: 1 })
        ));
    }

    #[test]
    fn odd_blocks_rejected() {
        let sched = NoiseSchedule::linear(2, 0.01, 0.2).unwrap();
        let seed = LatentGrid::zeros(3, 4, 1);
        assert!(outpaint_neighborhood(&Zero, &seed, None, &sched, RepaintParams::default(), 0).is_err());
    }
}
