//! Multi-modal ground truth per coarse pixel, derived from superpixels.
//!
//! Inside each 8×8 window the valid ground-truth disparities are grouped by
//! segment. Each segment contributes its median; segments whose medians are
//! close are merged into the larger one, and the four most populated survive.

use std::collections::BTreeMap;

pub const MAX_MODALS: usize = 4;
/// Segments whose medians differ by less than this are merged.
pub const MERGE_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Modal {
    pub disparity: f32,
    pub count: usize,
}

/// Lower median of an unsorted slice (`None` when empty).
pub fn lower_median(values: &[f32]) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

/// Modals of one window from `(disparity, segment)` samples of its valid
/// pixels, most populated first.
pub fn window_modals(samples: &[(f32, u32)]) -> Vec<Modal> {
    let mut by_segment: BTreeMap<u32, Vec<f32>> = BTreeMap::new();
    for &(d, s) in samples {
        by_segment.entry(s).or_default().push(d);
    }
    // Most populated first, ties by segment id.
    let mut segs: Vec<(u32, Vec<f32>)> = by_segment.into_iter().collect();
    segs.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    let medians: Vec<f32> = segs.iter().map(|(_, v)| lower_median(v).unwrap()).collect();

    let mut suppressed = vec![false; segs.len()];
    let mut groups: Vec<(u32, Vec<f32>)> = Vec::new();
    for a in 0..segs.len() {
        if suppressed[a] {
            continue;
        }
        let mut union = segs[a].1.clone();
        for c in a + 1..segs.len() {
            if !suppressed[c] && (medians[c] - medians[a]).abs() < MERGE_THRESHOLD {
                suppressed[c] = true;
                union.extend_from_slice(&segs[c].1);
            }
        }
        groups.push((segs[a].0, union));
    }
    groups.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    groups
        .into_iter()
        .take(MAX_MODALS)
        .map(|(_, v)| Modal {
            disparity: lower_median(&v).unwrap(),
            count: v.len(),
        })
        .collect()
}

/// Ground-truth modals of every coarse pixel, `(B, h, w)` row-major, each
/// padded with `None` up to [`MAX_MODALS`].
#[derive(Debug, Clone, PartialEq)]
pub struct GtModals {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub modals: Vec<[Option<Modal>; MAX_MODALS]>,
}

impl GtModals {
    pub fn pixel(&self, b: usize, i: usize, j: usize) -> &[Option<Modal>; MAX_MODALS] {
        &self.modals[(b * self.height + i) * self.width + j]
    }

    pub fn disparities(&self, n: usize) -> Vec<f32> {
        self.modals[n].iter().flatten().map(|m| m.disparity).collect()
    }

    pub fn pixels_with_modals(&self) -> usize {
        self.modals.iter().filter(|m| m[0].is_some()).count()
    }
}

/// Downsamples a full-resolution `(B, H, W)` ground truth. `valid` marks
/// pixels with a usable disparity; `segments` holds the superpixel ids.
/// `H` and `W` must be multiples of 8.
pub fn superpixel_downsample(
    disparity: &[f32],
    valid: &[bool],
    segments: &[u32],
    batch: usize,
    height: usize,
    width: usize,
) -> GtModals {
    let (h, w) = (height / 8, width / 8);
    let mut modals = Vec::with_capacity(batch * h * w);
    let mut samples = Vec::with_capacity(64);
    for b in 0..batch {
        for i in 0..h {
            for j in 0..w {
                samples.clear();
                for u in 0..8 {
                    for v in 0..8 {
                        let n = (b * height + i * 8 + u) * width + j * 8 + v;
                        if valid[n] && disparity[n].is_finite() {
                            samples.push((disparity[n], segments[n]));
                        }
                    }
                }
                let mut slot = [None; MAX_MODALS];
                for (s, m) in window_modals(&samples).into_iter().enumerate() {
                    slot[s] = Some(m);
                }
                modals.push(slot);
            }
        }
    }
    GtModals {
        batch,
        height: h,
        width: w,
        modals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn close_medians_merge_into_larger_segment() {
        // Segment 1: 40 px at 10.0, segment 2: 20 px at 10.3, segment 3: 4 px at 30.
        let mut s = Vec::new();
        s.extend(std::iter::repeat_n((10.0, 1), 40));
        s.extend(std::iter::repeat_n((10.3, 2), 20));
        s.extend(std::iter::repeat_n((30.0, 3), 4));
        let m = window_modals(&s);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].count, 60);
        assert_eq!(m[0].disparity, 10.0);
        assert_eq!(m[1], Modal { disparity: 30.0, count: 4 });
    }

    #[test]
    fn keeps_at_most_four() {
        let s: Vec<(f32, u32)> = (0..6).flat_map(|g| std::iter::repeat_n((g as f32 * 5.0, g), 10 - g as usize)).collect();
        let m = window_modals(&s);
        assert_eq!(m.len(), 4);
        assert_eq!(m.iter().map(|x| x.disparity).collect::<Vec<_>>(), vec![0.0, 5.0, 10.0, 15.0]);
    }

    #[test]
    fn empty_window_has_no_modals() {
        let g = superpixel_downsample(&[1.0; 64], &[false; 64], &[0; 64], 1, 8, 8);
        assert_eq!(g.modals[0], [None; 4]);
    }
}
