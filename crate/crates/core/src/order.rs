//! Panel reading-order estimation by recursive cutting.
//!
//! A region is split along the widest gutter that no panel crosses by more
//! than `gap_tolerance` pixels. Horizontal cuts are tried first and the top
//! part is read first; otherwise vertical cuts, reading the right part first
//! (manga runs right-to-left). Regions that cannot be cut fall back to a sort
//! by (center y ascending, center x descending, index).

use serde::Serialize;

use crate::bbox::BBox;
use crate::error::{Error, Result};

/// Default jitter tolerance in pixels at the reference page height.
pub const DEFAULT_GAP_TOLERANCE: f64 = 2.0;
/// Page height the default tolerance was set for.
pub const REFERENCE_PAGE_HEIGHT: f64 = 1170.0;

/// Default tolerance scaled to a page of the given height.
pub fn default_gap_tolerance(page_height: u32) -> f64 {
    DEFAULT_GAP_TOLERANCE * page_height as f64 / REFERENCE_PAGE_HEIGHT
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// A cut line of constant y.
    Horizontal,
    /// A cut line of constant x.
    Vertical,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CutTree {
    Leaf {
        index: usize,
    },
    Cut {
        axis: Axis,
        position: f64,
        /// In reading order: top then bottom, or right then left.
        children: Vec<CutTree>,
    },
    /// Region with no legal cut, ordered by the center sort.
    Fallback {
        order: Vec<usize>,
    },
}

impl CutTree {
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn collect(&self, out: &mut Vec<usize>) {
        match self {
            CutTree::Leaf { index } => out.push(*index),
            CutTree::Cut { children, .. } => children.iter().for_each(|c| c.collect(out)),
            CutTree::Fallback { order } => out.extend_from_slice(order),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderResult {
    /// Panel indices in reading order.
    pub permutation: Vec<usize>,
    pub cut_tree: CutTree,
}

fn span(b: &BBox, axis: Axis) -> (f64, f64) {
    match axis {
        Axis::Horizontal => (b.ymin as f64, b.ymax as f64),
        Axis::Vertical => (b.xmin as f64, b.xmax as f64),
    }
}

fn center(b: &BBox, axis: Axis) -> f64 {
    let (lo, hi) = span(b, axis);
    (lo + hi) / 2.0
}

/// Finds the cut coordinate with maximal clearance along `axis`.
///
/// A box blocks the open interval `(lo + tol, hi - tol)`; a cut is legal if it
/// lies strictly inside `region`, outside every blocked interval, and leaves
/// at least one box center on each side. Among the free gaps the widest one
/// wins (first on ties) and its midpoint is returned.
pub fn find_cut(boxes: &[BBox], region: &BBox, axis: Axis, gap_tolerance: f64) -> Option<f64> {
    if boxes.len() < 2 {
        return None;
    }
    let (rlo, rhi) = span(region, axis);
    let mut blocked: Vec<(f64, f64)> = boxes
        .iter()
        .map(|b| span(b, axis))
        .map(|(lo, hi)| (lo + gap_tolerance, hi - gap_tolerance))
        .filter(|(lo, hi)| lo < hi)
        .collect();
    blocked.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Complement of the blocked union inside the region.
    let mut gaps = Vec::new();
    let mut cursor = rlo;
    for (lo, hi) in blocked {
        if lo > cursor {
            gaps.push((cursor, lo.min(rhi)));
        }
        cursor = cursor.max(hi);
        if cursor >= rhi {
            break;
        }
    }
    if cursor < rhi {
        gaps.push((cursor, rhi));
    }

    let centers: Vec<f64> = boxes.iter().map(|b| center(b, axis)).collect();
    let mut best: Option<(f64, f64)> = None;
    for (g0, g1) in gaps {
        let c = (g0 + g1) / 2.0;
        if c <= rlo || c >= rhi {
            continue;
        }
        let before = centers.iter().filter(|&&m| m < c).count();
        if before == 0 || before == centers.len() {
            continue;
        }
        let width = g1 - g0;
        if best.is_none_or(|(w, _)| width > w) {
            best = Some((width, c));
        }
    }
    best.map(|(_, c)| c)
}

fn bounding(boxes: &[BBox]) -> BBox {
    boxes.iter().skip(1).fold(boxes[0], |acc, b| {
        BBox::new(
            acc.xmin.min(b.xmin),
            acc.ymin.min(b.ymin),
            acc.xmax.max(b.xmax),
            acc.ymax.max(b.ymax),
        )
    })
}

fn fallback_sort(boxes: &[BBox], idx: &mut [usize]) {
    idx.sort_by(|&a, &b| {
        let (ax, ay) = boxes[a].center();
        let (bx, by) = boxes[b].center();
        ay.total_cmp(&by).then(bx.total_cmp(&ax)).then(a.cmp(&b))
    });
}

fn order_region(all: &[BBox], idx: Vec<usize>, region: BBox, tol: f64) -> CutTree {
    if idx.len() == 1 {
        return CutTree::Leaf { index: idx[0] };
    }
    let sub: Vec<BBox> = idx.iter().map(|&i| all[i]).collect();
    for axis in [Axis::Horizontal, Axis::Vertical] {
        let Some(c) = find_cut(&sub, &region, axis, tol) else {
            continue;
        };
        let (mut low, mut high): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| center(&all[i], axis) < c);
        // Regions are integer boxes; the cut may be fractional, and the
        // sub-regions only need to contain their boxes.
        let region_of = |part: &[usize]| {
            let b: Vec<BBox> = part.iter().map(|&i| all[i]).collect();
            bounding(&b)
        };
        let (first, second) = match axis {
            Axis::Horizontal => (std::mem::take(&mut low), std::mem::take(&mut high)),
            Axis::Vertical => (std::mem::take(&mut high), std::mem::take(&mut low)),
        };
        let r1 = region_of(&first);
        let r2 = region_of(&second);
        return CutTree::Cut {
            axis,
            position: c,
            children: vec![
                order_region(all, first, r1, tol),
                order_region(all, second, r2, tol),
            ],
        };
    }
    let mut order = idx;
    fallback_sort(all, &mut order);
    CutTree::Fallback { order }
}

/// Estimates the reading order of `boxes` on a page of size `page = (width, height)`.
pub fn order_panels(boxes: &[BBox], page: (u32, u32), gap_tolerance: f64) -> Result<OrderResult> {
    if boxes.is_empty() {
        return Err(Error::InvalidArgument("no panel boxes to order".into()));
    }
    let (width, height) = page;
    if let Some((i, b)) = boxes
        .iter()
        .enumerate()
        .find(|(_, b)| !b.is_valid() || !b.fits_in(width, height))
    {
        return Err(Error::InvalidArgument(format!(
            "panel {i} box {b} is empty or outside the {width}x{height} page"
        )));
    }
    if gap_tolerance.is_nan() || gap_tolerance < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gap tolerance must be non-negative, got {gap_tolerance}"
        )));
    }
    let region = BBox::new(0, 0, width, height);
    let cut_tree = order_region(boxes, (0..boxes.len()).collect(), region, gap_tolerance);
    Ok(OrderResult {
        permutation: cut_tree.leaves(),
        cut_tree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_grid_reads_right_to_left() {
        let boxes = [
            BBox::new(0, 0, 50, 50),
            BBox::new(50, 0, 100, 50),
            BBox::new(0, 50, 50, 100),
            BBox::new(50, 50, 100, 100),
        ];
        let r = order_panels(&boxes, (100, 100), 2.0).unwrap();
        assert_eq!(r.permutation, vec![1, 0, 3, 2]);
    }

    #[test]
    fn single_box() {
        let r = order_panels(&[BBox::new(3, 3, 10, 10)], (20, 20), 2.0).unwrap();
        assert_eq!(r.permutation, vec![0]);
        assert_eq!(r.cut_tree, CutTree::Leaf { index: 0 });
    }

    #[test]
    fn stacked_rows_read_top_down() {
        let boxes = [
            BBox::new(0, 0, 90, 30),
            BBox::new(0, 30, 90, 60),
            BBox::new(0, 60, 90, 90),
        ];
        let r = order_panels(&boxes, (90, 90), 2.0).unwrap();
        assert_eq!(r.permutation, vec![0, 1, 2]);
        match &r.cut_tree {
            CutTree::Cut { axis, .. } => assert_eq!(*axis, Axis::Horizontal),
            other => panic!("unexpected tree {other:?}"),
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(order_panels(&[], (10, 10), 2.0).is_err());
    }

    #[test]
    fn cut_at_gap_midpoint() {
        let boxes = [BBox::new(0, 0, 100, 45), BBox::new(0, 55, 100, 100)];
        let region = BBox::new(0, 0, 100, 100);
        assert_eq!(find_cut(&boxes, &region, Axis::Horizontal, 2.0), Some(50.0));
    }

    #[test]
    fn no_cut_through_overlap() {
        let boxes = [BBox::new(0, 0, 100, 60), BBox::new(0, 30, 100, 100)];
        let region = BBox::new(0, 0, 100, 100);
        assert_eq!(find_cut(&boxes, &region, Axis::Horizontal, 2.0), None);
    }

    #[test]
    fn no_cut_for_one_box() {
        let region = BBox::new(0, 0, 100, 100);
        assert_eq!(
            find_cut(&[BBox::new(10, 10, 50, 50)], &region, Axis::Horizontal, 2.0),
            None
        );
    }

    #[test]
    fn widest_gap_wins() {
        let boxes = [
            BBox::new(0, 0, 100, 20),
            BBox::new(0, 24, 100, 60),
            BBox::new(0, 80, 100, 100),
        ];
        let region = BBox::new(0, 0, 100, 100);
        assert_eq!(find_cut(&boxes, &region, Axis::Horizontal, 0.0), Some(70.0));
    }

    #[test]
    fn jitter_within_tolerance_still_cuts() {
        // Second row starts 1px above the first row's bottom edge.
        let boxes = [
            BBox::new(0, 0, 50, 50),
            BBox::new(50, 0, 100, 51),
            BBox::new(0, 49, 100, 100),
        ];
        let r = order_panels(&boxes, (100, 100), 2.0).unwrap();
        assert_eq!(r.permutation, vec![1, 0, 2]);
    }

    #[test]
    fn duplicate_boxes_ordered_by_index() {
        let b = BBox::new(10, 10, 40, 40);
        let r = order_panels(&[b, b, b], (50, 50), 2.0).unwrap();
        assert_eq!(r.permutation, vec![0, 1, 2]);
        assert!(matches!(r.cut_tree, CutTree::Fallback { .. }));
    }

    #[test]
    fn pinwheel_falls_back_to_center_sort() {
        // Classic non-guillotine layout: no straight gutter spans the page.
        let boxes = [
            BBox::new(0, 0, 60, 30),
            BBox::new(60, 0, 90, 60),
            BBox::new(30, 60, 90, 90),
            BBox::new(0, 30, 30, 90),
            BBox::new(30, 30, 60, 60),
        ];
        let r = order_panels(&boxes, (90, 90), 0.0).unwrap();
        assert_eq!(r.permutation, vec![0, 1, 4, 3, 2]);
    }

    #[test]
    fn tolerance_scales_with_height() {
        assert!((default_gap_tolerance(1170) - 2.0).abs() < 1e-12);
        assert!((default_gap_tolerance(585) - 1.0).abs() < 1e-12);
    }
}
