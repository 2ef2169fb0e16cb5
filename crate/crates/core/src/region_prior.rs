//! Integer region maps built from binary mask stacks, plus region utilities.
//!
//! Masks are painted largest-area first so that smaller (nested) masks win
//! at overlaps; ids are then renumbered `1..=R` in area order and pixels
//! covered by no mask keep id 0.

use std::collections::{BTreeMap, VecDeque};

use crate::composite::FusedRgb;
use crate::error::{ensure, Result};
use crate::rng::SeededRng;
use crate::tensor_io::TensorContainer;

pub const BACKGROUND: i32 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMap {
    height: usize,
    width: usize,
    labels: Vec<i32>,
}

impl RegionMap {
    pub fn new(height: usize, width: usize, labels: Vec<i32>) -> Result<Self> {
        ensure!(
            height >= 1 && width >= 1,
            Validation,
            "region map extents must be at least 1"
        );
        ensure!(
            labels.len() == height * width,
            Validation,
            "region map {}x{} needs {} labels, got {}",
            height,
            width,
            height * width,
            labels.len()
        );
        Ok(Self { height, width, labels })
    }

    /// Relabels an arbitrary partition to ids `1..=R` ordered by descending
    /// area, ties broken by first occurrence in raster order.
    pub fn from_partition<T: Ord + Copy>(height: usize, width: usize, parts: &[T]) -> Result<Self> {
        ensure!(
            parts.len() == height * width,
            Validation,
            "partition has {} entries for a {}x{} map",
            parts.len(),
            height,
            width
        );
        let mut first: BTreeMap<T, (usize, usize)> = BTreeMap::new();
        for (i, &p) in parts.iter().enumerate() {
            first.entry(p).or_insert((i, 0)).1 += 1;
        }
        let mut order: Vec<(T, usize, usize)> = first.into_iter().map(|(k, (f, a))| (k, f, a)).collect();
        order.sort_by(|a, b| b.2.cmp(&a.2).then(a.1.cmp(&b.1)));
        let ids: BTreeMap<T, i32> = order
            .iter()
            .enumerate()
            .map(|(r, &(k, _, _))| (k, r as i32 + 1))
            .collect();
        Self::new(height, width, parts.iter().map(|p| ids[p]).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<i32> {
        self.labels
    }

    /// Sorted unique ids present.
    pub fn region_ids(&self) -> Vec<i32> {
        let mut ids = self.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Number of regions excluding the background id.
    pub fn region_count(&self) -> usize {
        self.region_ids().into_iter().filter(|&i| i != BACKGROUND).count()
    }

    pub fn to_tensor(&self) -> TensorContainer {
        TensorContainer::i32(vec![self.height, self.width], self.labels.clone())
            .expect("region map shape is validated at construction")
    }

    pub fn from_tensor(t: &TensorContainer) -> Result<Self> {
        ensure!(
            t.ndim() == 2,
            Validation,
            "region map must be [H, W], got shape {:?}",
            t.shape()
        );
        Self::new(t.shape()[0], t.shape()[1], t.to_i32_vec()?)
    }
}

/// Stack of `Q` binary masks sharing one `[H, W]` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskStack {
    pub height: usize,
    pub width: usize,
    masks: Vec<Vec<bool>>,
}

impl MaskStack {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            masks: Vec::new(),
        }
    }

    pub fn from_masks(height: usize, width: usize, masks: Vec<Vec<bool>>) -> Result<Self> {
        for (i, m) in masks.iter().enumerate() {
            ensure!(
                m.len() == height * width,
                Validation,
                "mask {} has {} pixels, expected {}x{}",
                i,
                m.len(),
                height,
                width
            );
        }
        Ok(Self { height, width, masks })
    }

    pub fn push(&mut self, mask: Vec<bool>) -> Result<()> {
        ensure!(
            mask.len() == self.height * self.width,
            Validation,
            "mask has {} pixels, expected {}x{}",
            mask.len(),
            self.height,
            self.width
        );
        self.masks.push(mask);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    /// Reads a u8 `[Q, H, W]` (or `[H, W]`, one mask) tensor; nonzero is set.
    pub fn from_tensor(t: &TensorContainer) -> Result<Self> {
        let (q, h, w) = match *t.shape() {
            [q, h, w] => (q, h, w),
            [h, w] => (1, h, w),
            _ => {
                return Err(crate::Error::Validation(format!(
                    "mask stack must be [Q, H, W], got shape {:?}",
                    t.shape()
                )))
            }
        };
        let vals = t.to_i32_vec()?;
        let masks = vals
            .chunks(h * w)
            .map(|m| m.iter().map(|&v| v != 0).collect())
            .collect();
        debug_assert_eq!(q, vals.len() / (h * w));
        Self::from_masks(h, w, masks)
    }

    pub fn to_tensor(&self) -> Result<TensorContainer> {
        let data = self.masks.iter().flatten().map(|&b| b as u8).collect();
        TensorContainer::u8(vec![self.masks.len(), self.height, self.width], data)
    }
}

/// Flattens a mask stack into one region map (area-descending paint).
pub fn build_region_map(stack: &MaskStack) -> Result<RegionMap> {
    let (h, w) = (stack.height, stack.width);
    let areas: Vec<usize> = stack.masks.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();
    let mut order: Vec<usize> = (0..stack.len()).filter(|&i| areas[i] > 0).collect();
    order.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(a.cmp(&b)));

    let mut painted = vec![BACKGROUND; h * w];
    for (rank, &i) in order.iter().enumerate() {
        let id = rank as i32 + 1;
        for (p, &on) in painted.iter_mut().zip(&stack.masks[i]) {
            if on {
                *p = id;
            }
        }
    }

    // Masks fully covered by smaller ones vanish; close the gaps.
    let mut present = vec![false; order.len() + 1];
    for &p in &painted {
        present[p as usize] = true;
    }
    let mut remap = vec![0i32; order.len() + 1];
    let mut next = 1;
    for (rank, &seen) in present.iter().enumerate().skip(1) {
        if seen {
            remap[rank] = next;
            next += 1;
        }
    }
    for p in painted.iter_mut() {
        *p = remap[*p as usize];
    }
    RegionMap::new(h, w, painted)
}

/// Nearest-neighbour resampling; output index `i` samples
/// `floor((i + 0.5) * in / out)` on each axis.
pub fn resize_nearest(map: &RegionMap, height: usize, width: usize) -> Result<RegionMap> {
    ensure!(
        height >= 1 && width >= 1,
        Validation,
        "target size must be at least 1x1"
    );
    let src = |i: usize, n_in: usize, n_out: usize| ((2 * i + 1) * n_in) / (2 * n_out);
    let rows: Vec<usize> = (0..height).map(|y| src(y, map.height, height)).collect();
    let cols: Vec<usize> = (0..width).map(|x| src(x, map.width, width)).collect();
    let mut labels = Vec::with_capacity(height * width);
    for &sy in &rows {
        let row = &map.labels[sy * map.width..(sy + 1) * map.width];
        labels.extend(cols.iter().map(|&sx| row[sx]));
    }
    RegionMap::new(height, width, labels)
}

/// 4-connected components of equal values; returns a component index per
/// cell, numbered in raster order of first appearance.
pub fn connected_components<T: PartialEq>(values: &[T], height: usize, width: usize) -> Vec<usize> {
    const UNSET: usize = usize::MAX;
    let mut comp = vec![UNSET; values.len()];
    let mut queue = VecDeque::new();
    let mut next = 0;
    for start in 0..values.len() {
        if comp[start] != UNSET {
            continue;
        }
        comp[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / width, i % width);
            let mut visit = |j: usize| {
                if comp[j] == UNSET && values[j] == values[i] {
                    comp[j] = next;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
        }
        next += 1;
    }
    comp
}

/// Number of grey levels used by [`fallback_regions`].
pub const FALLBACK_LEVELS: usize = 8;

/// Mask-free region source: the fused image is averaged over `grid x grid`
/// cells, each cell's grey value quantised to 8 levels, and 4-connected runs
/// of equal-level cells merged into one region.
pub fn fallback_regions(rgb: &FusedRgb, grid: usize) -> Result<RegionMap> {
    ensure!(grid >= 1, Validation, "grid cell size must be at least 1");
    let (h, w) = (rgb.height, rgb.width);
    let levels = quantized_cells(&rgb.gray(), h, w, grid);
    let (ch, cw) = (h.div_ceil(grid), w.div_ceil(grid));
    let comp = connected_components(&levels, ch, cw);
    let parts: Vec<usize> = (0..h * w).map(|i| comp[(i / w / grid) * cw + (i % w) / grid]).collect();
    RegionMap::from_partition(h, w, &parts)
}

/// Cell-mean grey value mapped to `min(7, floor(8 * mean))`.
pub fn quantized_cells(gray: &[f32], h: usize, w: usize, grid: usize) -> Vec<u8> {
    let (ch, cw) = (h.div_ceil(grid), w.div_ceil(grid));
    let mut sum = vec![0.0f64; ch * cw];
    let mut count = vec![0usize; ch * cw];
    for y in 0..h {
        for x in 0..w {
            let c = (y / grid) * cw + x / grid;
            sum[c] += gray[y * w + x] as f64;
            count[c] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &n)| {
            let mean = (s / n as f64).clamp(0.0, 1.0);
            ((mean * FALLBACK_LEVELS as f64).floor() as usize).min(FALLBACK_LEVELS - 1) as u8
        })
        .collect()
}

/// Non-semantic control regions: Voronoi cells of `sites` uniformly drawn
/// seed points (squared Euclidean distance, ties to the lower site index).
pub fn random_superpixels(height: usize, width: usize, sites: usize, seed: u64) -> Result<RegionMap> {
    ensure!(sites >= 1, Validation, "need at least one superpixel site");
    let mut rng = SeededRng::new(seed);
    let pts: Vec<(usize, usize)> = (0..sites).map(|_| (rng.below(height), rng.below(width))).collect();
    let parts: Vec<usize> = (0..height * width)
        .map(|i| nearest_site(i / width, i % width, &pts))
        .collect();
    RegionMap::from_partition(height, width, &parts)
}

pub(crate) fn nearest_site(y: usize, x: usize, pts: &[(usize, usize)]) -> usize {
    let mut best = 0;
    let mut best_d = usize::MAX;
    for (k, &(py, px)) in pts.iter().enumerate() {
        let d = y.abs_diff(py).pow(2) + x.abs_diff(px).pow(2);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPixels {
    pub id: i32,
    /// Flat pixel indices `y * W + x`, ascending.
    pub pixels: Vec<u32>,
    /// Fewer than two pixels: no variance is defined.
    pub skippable: bool,
}

/// Per-id pixel lists, sorted by id.
pub fn region_index(map: &RegionMap) -> Vec<RegionPixels> {
    region_index_labels(&map.labels)
}

pub(crate) fn region_index_labels(labels: &[i32]) -> Vec<RegionPixels> {
    let mut groups: BTreeMap<i32, Vec<u32>> = BTreeMap::new();
    for (i, &id) in labels.iter().enumerate() {
        groups.entry(id).or_default().push(i as u32);
    }
    groups
        .into_iter()
        .map(|(id, pixels)| RegionPixels {
            id,
            skippable: pixels.len() < 2,
            pixels,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Vec<bool> {
        (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                (y0..y1).contains(&y) && (x0..x1).contains(&x)
            })
            .collect()
    }

    #[test]
    fn empty_stack_is_background() {
        let m = build_region_map(&MaskStack::new(3, 3)).unwrap();
        assert_eq!(m.labels(), &[0; 9]);
        assert_eq!(m.region_ids(), vec![0]);
    }

    #[test]
    fn larger_mask_gets_id_one() {
        let small = rect(4, 5, 0, 0, 2, 2); // area 4
        let large = rect(4, 5, 2, 0, 4, 5); // area 10
        let stack = MaskStack::from_masks(4, 5, vec![small, large]).unwrap();
        let m = build_region_map(&stack).unwrap();
        assert_eq!(m.labels()[0], 2);
        assert_eq!(m.labels()[19], 1);
        assert_eq!(m.labels()[4], 0);
        assert_eq!(m.region_ids(), vec![0, 1, 2]);
    }

    #[test]
    fn nested_mask_wins_overlap() {
        let large = rect(6, 6, 0, 0, 6, 6);
        let inner = rect(6, 6, 2, 2, 4, 4);
        let stack = MaskStack::from_masks(6, 6, vec![inner.clone(), large]).unwrap();
        let m = build_region_map(&stack).unwrap();
        for (i, &on) in inner.iter().enumerate() {
            assert_eq!(m.labels()[i], if on { 2 } else { 1 });
        }
    }

    #[test]
    fn covered_mask_is_dropped_and_ids_close_up() {
        let a = rect(4, 4, 0, 0, 4, 4); // 16
        let b = rect(4, 4, 0, 0, 2, 2); // 4, hidden under c and d
        let c = rect(4, 4, 0, 0, 1, 2); // 2
        let d = rect(4, 4, 1, 0, 2, 2); // 2
        let m = build_region_map(&MaskStack::from_masks(4, 4, vec![a, b, c, d]).unwrap()).unwrap();
        assert_eq!(m.region_ids(), vec![1, 2, 3]);
    }

    #[test]
    fn mismatched_mask_rejected() {
        assert!(MaskStack::from_masks(2, 2, vec![vec![true; 4], vec![true; 6]]).is_err());
        assert!(MaskStack::new(2, 2).push(vec![false; 3]).is_err());
    }

    #[test]
    fn resize_cases() {
        let m = RegionMap::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(resize_nearest(&m, 2, 2).unwrap(), m);
        let up = resize_nearest(&m, 4, 4).unwrap();
        assert_eq!(up.labels(), &[1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
        let c = RegionMap::new(4, 4, vec![7; 16]).unwrap();
        assert!(resize_nearest(&c, 3, 9).unwrap().labels().iter().all(|&v| v == 7));
        assert!(resize_nearest(&c, 0, 3).is_err());
    }

    fn rgb(h: usize, w: usize, gray: impl Fn(usize, usize) -> f32) -> FusedRgb {
        let plane: Vec<f32> = (0..h * w).map(|i| gray(i / w, i % w)).collect();
        FusedRgb {
            height: h,
            width: w,
            values: [plane.clone(), plane.clone(), plane].concat(),
            source_frames: vec![0],
            weights: vec![1.0],
        }
    }

    #[test]
    fn fallback_constant_and_halves() {
        let m = fallback_regions(&rgb(8, 8, |_, _| 0.4), 8).unwrap();
        assert_eq!(m.region_ids(), vec![1]);
        let m = fallback_regions(&rgb(8, 8, |_, x| if x < 4 { 0.1 } else { 0.9 }), 2).unwrap();
        assert_eq!(m.region_count(), 2);
        assert!(fallback_regions(&rgb(2, 2, |_, _| 0.0), 0).is_err());
    }

    #[test]
    fn region_index_cases() {
        let idx = region_index(&RegionMap::new(2, 2, vec![0; 4]).unwrap());
        assert_eq!(idx.len(), 1);
        assert_eq!(idx[0].pixels.len(), 4);
        assert!(!idx[0].skippable);

        let idx = region_index(&RegionMap::new(1, 3, vec![5, 5, 9]).unwrap());
        assert!(idx[1].skippable);

        let idx = region_index(&RegionMap::new(2, 4, vec![1, 1, 1, 2, 2, 2, 2, 2]).unwrap());
        let sizes: Vec<usize> = idx.iter().map(|r| r.pixels.len()).collect();
        assert_eq!(sizes, vec![3, 5]);
    }

    #[test]
    fn partition_relabels_by_area() {
        let m = RegionMap::from_partition(1, 6, &[9, 4, 4, 4, 9, 2]).unwrap();
        assert_eq!(m.labels(), &[2, 1, 1, 1, 2, 3]);
    }

    #[test]
    fn superpixels_cover_image() {
        let m = random_superpixels(16, 16, 10, 3).unwrap();
        assert!(m.region_count() <= 10 && m.region_count() >= 1);
        assert!(!m.labels().contains(&0));
    }
}
