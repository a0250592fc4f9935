//! Model-ready training records built from annotated pages.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::caption::CaptionResult;
use crate::error::{Error, Result};
use crate::order::OrderResult;
use crate::panelize::{split_page, PageImage};
use crate::annotation::PageAnnotation;
use crate::EMPTY_CAPTION;

/// Pixel size of one model token (2×2 latent patch at 8× downsampling).
pub const TOKEN_STRIDE: u32 = 16;
pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.5;

/// Boolean grid at token resolution; `true` means masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<bool>,
}

impl MaskGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        MaskGrid {
            rows,
            cols,
            cells: vec![false; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.cols + c]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.cells.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.cells.len() as f64
        }
    }

    pub fn any(&self) -> bool {
        self.cells.iter().any(|&b| b)
    }

    fn to_bits(&self) -> String {
        self.cells.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    fn from_bits(rows: usize, cols: usize, bits: &str) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Data(format!(
                "mask has {} cells, expected {rows}x{cols}",
                bits.len()
            )));
        }
        let cells = bits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Data(format!("bad mask character {other:?}"))),
            })
            .collect::<Result<_>>()?;
        Ok(MaskGrid { rows, cols, cells })
    }
}

/// Area of the union of axis-aligned rectangles, by coordinate compression.
fn union_area(rects: &[BBox]) -> u64 {
    if rects.is_empty() {
        return 0;
    }
    let mut xs: Vec<u32> = rects.iter().flat_map(|r| [r.xmin, r.xmax]).collect();
    let mut ys: Vec<u32> = rects.iter().flat_map(|r| [r.ymin, r.ymax]).collect();
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();
    let mut area = 0u64;
    for yw in ys.windows(2) {
        for xw in xs.windows(2) {
            let covered = rects
                .iter()
                .any(|r| r.xmin <= xw[0] && r.xmax >= xw[1] && r.ymin <= yw[0] && r.ymax >= yw[1]);
            if covered {
                area += (xw[1] - xw[0]) as u64 * (yw[1] - yw[0]) as u64;
            }
        }
    }
    area
}

/// Marks each `stride`×`stride` cell whose overlap with the union of
/// `bubble_boxes` exceeds `coverage_threshold · stride²`.
///
/// `page_size` is `(width, height)`; a trailing partial cell counts only its
/// in-page pixels against the full-cell threshold.
pub fn rasterize_bubble_mask(
    bubble_boxes: &[BBox],
    page_size: (u32, u32),
    token_stride: u32,
    coverage_threshold: f64,
) -> MaskGrid {
    let (width, height) = page_size;
    let cols = width.div_ceil(token_stride) as usize;
    let rows = height.div_ceil(token_stride) as usize;
    let mut grid = MaskGrid::new(rows, cols);
    let limit = coverage_threshold * (token_stride * token_stride) as f64;
    for r in 0..rows {
        for c in 0..cols {
            let cell = BBox::new(
                c as u32 * token_stride,
                r as u32 * token_stride,
                ((c as u32 + 1) * token_stride).min(width),
                ((r as u32 + 1) * token_stride).min(height),
            );
            let clipped: Vec<BBox> = bubble_boxes.iter().filter_map(|b| b.intersect(&cell)).collect();
            grid.cells[r * cols + c] = union_area(&clipped) as f64 > limit;
        }
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterParams {
    pub token_stride: u32,
    pub coverage_threshold: f64,
}

impl Default for RasterParams {
    fn default() -> Self {
        RasterParams {
            token_stride: TOKEN_STRIDE,
            coverage_threshold: DEFAULT_COVERAGE_THRESHOLD,
        }
    }
}

/// One page, padded to `k_max` panels, ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub page_id: String,
    /// Full-page images, white outside each panel; pads are all white.
    pub panel_images: Vec<PageImage>,
    pub captions: Vec<String>,
    /// Bubble mask per panel at token resolution.
    pub intra_mask: Vec<MaskGrid>,
    /// True for padded panels.
    pub inter_mask: Vec<bool>,
    pub boxes: Vec<Option<BBox>>,
}

impl TrainingRecord {
    pub fn k_max(&self) -> usize {
        self.inter_mask.len()
    }

    pub fn real_panels(&self) -> usize {
        self.inter_mask.iter().filter(|&&p| !p).count()
    }

    pub fn height(&self) -> usize {
        self.panel_images[0].height()
    }

    pub fn width(&self) -> usize {
        self.panel_images[0].width()
    }

    /// Checks the padding invariants.
    pub fn check(&self) -> Result<()> {
        let k_max = self.inter_mask.len();
        let bad = |m: &str| Err(Error::Data(format!("record {}: {m}", self.page_id)));
        if self.panel_images.len() != k_max
            || self.captions.len() != k_max
            || self.intra_mask.len() != k_max
            || self.boxes.len() != k_max
        {
            return bad("field lengths disagree with K_max");
        }
        let k = self.real_panels();
        if k == 0 {
            return bad("no real panels");
        }
        if self.inter_mask[..k].iter().any(|&p| p) {
            return bad("padded panels must follow real panels");
        }
        for i in k..k_max {
            if self.captions[i] != EMPTY_CAPTION
                || self.panel_images[i].data().iter().any(|&v| v != 1.0)
                || self.intra_mask[i].any()
                || self.boxes[i].is_some()
            {
                return bad("padded panel is not white/EMPTY/unmasked");
            }
        }
        Ok(())
    }
}

/// Builds a padded record from a page, its reading order and captions.
pub fn build_record(
    page_image: &PageImage,
    annotation: &PageAnnotation,
    order: &OrderResult,
    captions: &CaptionResult,
    bubble_boxes: &[BBox],
    k_max: usize,
    raster: RasterParams,
) -> Result<TrainingRecord> {
    let n = annotation.panels.len();
    if n > k_max {
        return Err(Error::Data(format!(
            "page {} has {n} panels, more than K_max={k_max}",
            annotation.page_id
        )));
    }
    if n == 0 {
        return Err(Error::Data(format!("page {} has no panels", annotation.page_id)));
    }
    if captions.panel_captions.len() != n {
        return Err(Error::Data(format!(
            "page {}: {} captions for {n} panels",
            annotation.page_id,
            captions.panel_captions.len()
        )));
    }
    if order.permutation.len() != n {
        return Err(Error::Data(format!(
            "page {}: order covers {} panels, page has {n}",
            annotation.page_id,
            order.permutation.len()
        )));
    }
    if page_image.width() != annotation.width as usize || page_image.height() != annotation.height as usize {
        return Err(Error::Shape(format!(
            "page {}: image is {}x{}, annotation says {}x{}",
            annotation.page_id,
            page_image.width(),
            page_image.height(),
            annotation.width,
            annotation.height
        )));
    }
    let page_size = (annotation.width, annotation.height);
    let ordered: Vec<BBox> = order
        .permutation
        .iter()
        .map(|&i| annotation.panels[i].bbox)
        .collect();
    let stack = split_page(page_image, &ordered)?;

    let mut intra_mask = Vec::with_capacity(k_max);
    for b in &ordered {
        let clipped: Vec<BBox> = bubble_boxes.iter().filter_map(|bb| bb.intersect(b)).collect();
        intra_mask.push(rasterize_bubble_mask(
            &clipped,
            page_size,
            raster.token_stride,
            raster.coverage_threshold,
        ));
    }
    let empty_mask = rasterize_bubble_mask(&[], page_size, raster.token_stride, raster.coverage_threshold);
    intra_mask.resize(k_max, empty_mask);

    let mut panel_images = stack.images;
    panel_images.resize(
        k_max,
        PageImage::white(page_image.height(), page_image.width()),
    );
    let mut caps = captions.panel_captions.clone();
    caps.resize(k_max, EMPTY_CAPTION.to_string());
    let mut boxes: Vec<Option<BBox>> = ordered.into_iter().map(Some).collect();
    boxes.resize(k_max, None);
    let mut inter_mask = vec![false; n];
    inter_mask.resize(k_max, true);

    let record = TrainingRecord {
        page_id: annotation.page_id.clone(),
        panel_images,
        captions: caps,
        intra_mask,
        inter_mask,
        boxes,
    };
    record.check()?;
    Ok(record)
}

/// Entry of the dataset manifest (one JSON object per line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub page_id: String,
    pub image_path: String,
    pub xml_path: String,
    pub captions: Vec<String>,
    pub story: String,
    pub bubble_boxes: Vec<BBox>,
    pub order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MaskLine {
    rows: usize,
    cols: usize,
    bits: String,
}

/// On-disk form of a record: one JSON line, pixels in a side-car PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordLine {
    page_id: String,
    /// Relative to the records file. Holds the page whitened outside the
    /// panels; panel images are re-cut from it with `boxes`.
    image: String,
    height: usize,
    width: usize,
    captions: Vec<String>,
    inter_mask: Vec<bool>,
    boxes: Vec<Option<BBox>>,
    intra_mask: Vec<MaskLine>,
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Appends records to `dir/records.jsonl`, images under `dir/images/`.
///
/// Pixel values survive the round trip exactly when they lie on the 8-bit
/// lattice (`k / 255`), which holds for anything loaded from PNG.
pub struct RecordWriter {
    dir: PathBuf,
    out: BufWriter<fs::File>,
    count: usize,
}

impl RecordWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("images"))?;
        let out = BufWriter::new(fs::File::create(dir.join(RECORDS_FILE))?);
        Ok(RecordWriter {
            dir: dir.to_path_buf(),
            out,
            count: 0,
        })
    }

    pub fn write(&mut self, rec: &TrainingRecord) -> Result<()> {
        rec.check()?;
        let image = format!("images/{:05}_{}.png", self.count, sanitize(&rec.page_id));
        let real: Vec<BBox> = rec.boxes.iter().flatten().copied().collect();
        // Overlapping panels agree on shared pixels, so the min-composite
        // carries every panel's content.
        let composite = crate::panelize::compose_page(&crate::panelize::PanelImageStack {
            images: rec.panel_images[..rec.real_panels()].to_vec(),
            boxes: rec.boxes[..rec.real_panels()].to_vec(),
        })?;
        debug_assert_eq!(composite, composite.whitened(&real));
        composite.save_png(&self.dir.join(&image))?;
        let line = RecordLine {
            page_id: rec.page_id.clone(),
            image,
            height: rec.height(),
            width: rec.width(),
            captions: rec.captions.clone(),
            inter_mask: rec.inter_mask.clone(),
            boxes: rec.boxes.clone(),
            intra_mask: rec
                .intra_mask
                .iter()
                .map(|m| MaskLine {
                    rows: m.rows,
                    cols: m.cols,
                    bits: m.to_bits(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut self.out, &line)?;
        self.out.write_all(b"\n")?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush()?;
        Ok(self.count)
    }
}

fn record_from_line(dir: &Path, line: RecordLine) -> Result<TrainingRecord> {
    let page = PageImage::load_png(&dir.join(&line.image))?;
    if page.height() != line.height || page.width() != line.width {
        return Err(Error::Data(format!(
            "record {}: image size disagrees with header",
            line.page_id
        )));
    }
    let real: Vec<BBox> = line.boxes.iter().flatten().copied().collect();
    let mut panel_images = split_page(&page, &real)?.images;
    panel_images.resize(line.boxes.len(), PageImage::white(line.height, line.width));
    let intra_mask = line
        .intra_mask
        .iter()
        .map(|m| MaskGrid::from_bits(m.rows, m.cols, &m.bits))
        .collect::<Result<_>>()?;
    let rec = TrainingRecord {
        page_id: line.page_id,
        panel_images,
        captions: line.captions,
        intra_mask,
        inter_mask: line.inter_mask,
        boxes: line.boxes,
    };
    rec.check()?;
    Ok(rec)
}

/// Reads every record under `dir` (written by [`RecordWriter`]).
pub fn read_records(dir: &Path) -> Result<Vec<TrainingRecord>> {
    let f = fs::File::open(dir.join(RECORDS_FILE))
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", dir.join(RECORDS_FILE).display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{RECORDS_FILE} line {}: {e}", i + 1)))?;
        out.push(record_from_line(dir, parsed)?);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::PanelAnnotation;
    use crate::order::CutTree;

    fn identity_order(n: usize) -> OrderResult {
        OrderResult {
            permutation: (0..n).collect(),
            cut_tree: CutTree::Fallback {
                order: (0..n).collect(),
            },
        }
    }

    fn two_panel_page() -> (PageImage, PageAnnotation) {
        let mut a = PageAnnotation::new("two", 64, 32);
        a.panels.push(PanelAnnotation {
            bbox: BBox::new(0, 0, 32, 32),
            order_index: None,
            caption: None,
        });
        a.panels.push(PanelAnnotation {
            bbox: BBox::new(32, 0, 64, 32),
            order_index: None,
            caption: None,
        });
        let mut img = PageImage::white(32, 64);
        img.fill_box(&BBox::new(4, 4, 28, 28), 0.0);
        img.fill_box(&BBox::new(36, 4, 60, 28), 0.4);
        (img, a)
    }

    fn caps(n: usize) -> CaptionResult {
        CaptionResult {
            panel_captions: (0..n).map(|i| format!("c{}", i + 1)).collect(),
            story: String::new(),
        }
    }

    #[test]
    fn one_cell_box_masks_one_cell() {
        let g = rasterize_bubble_mask(&[BBox::new(16, 16, 32, 32)], (64, 48), 16, 0.5);
        assert_eq!((g.rows, g.cols), (3, 4));
        assert_eq!(g.count(), 1);
        assert!(g.get(1, 1));
    }

    #[test]
    fn quarter_coverage_stays_unmasked() {
        let g = rasterize_bubble_mask(&[BBox::new(0, 0, 8, 8)], (32, 32), 16, 0.5);
        assert_eq!(g.count(), 0);
        let g = rasterize_bubble_mask(&[BBox::new(0, 0, 16, 9)], (32, 32), 16, 0.5);
        assert_eq!(g.count(), 1);
    }

    #[test]
    fn no_boxes_no_mask() {
        assert!(!rasterize_bubble_mask(&[], (64, 64), 16, 0.5).any());
    }

    #[test]
    fn overlapping_boxes_count_union_once() {
        let boxes = [BBox::new(0, 0, 16, 6), BBox::new(0, 4, 16, 10)];
        assert_eq!(union_area(&boxes), 160);
        // 96 + 96 = 192 > 128 if summed; the union is only 112.
        let boxes = [BBox::new(0, 0, 16, 6), BBox::new(0, 1, 16, 7)];
        assert_eq!(union_area(&boxes), 112);
        assert!(!rasterize_bubble_mask(&boxes, (16, 16), 16, 0.5).any());
    }

    #[test]
    fn two_panels_padded_to_four() {
        let (img, a) = two_panel_page();
        let rec = build_record(&img, &a, &identity_order(2), &caps(2), &[], 4, RasterParams::default()).unwrap();
        assert_eq!(rec.inter_mask, vec![false, false, true, true]);
        assert_eq!(rec.captions, vec!["c1", "c2", "EMPTY", "EMPTY"]);
        assert!(rec.intra_mask.iter().all(|m| !m.any()));
        assert!(rec.panel_images[3].data().iter().all(|&v| v == 1.0));
        assert_eq!(rec.panel_images[0].get(10, 10, 0), 0.0);
        assert_eq!(rec.panel_images[0].get(10, 40, 0), 1.0);
    }

    #[test]
    fn bubble_over_whole_panel_masks_its_footprint() {
        let (img, a) = two_panel_page();
        let rec = build_record(
            &img,
            &a,
            &identity_order(2),
            &caps(2),
            &[BBox::new(0, 0, 32, 32)],
            4,
            RasterParams::default(),
        )
        .unwrap();
        let m = &rec.intra_mask[0];
        for r in 0..2 {
            for c in 0..4 {
                assert_eq!(m.get(r, c), c < 2);
            }
        }
        assert!(!rec.intra_mask[1].any());
    }

    #[test]
    fn bubble_is_restricted_to_each_panel() {
        let (img, a) = two_panel_page();
        // Straddles both panels: 24px into panel 0, 8px into panel 1. Cell
        // x=0..16 gets exactly half coverage, which is not above threshold.
        let rec = build_record(
            &img,
            &a,
            &identity_order(2),
            &caps(2),
            &[BBox::new(8, 0, 40, 16)],
            4,
            RasterParams::default(),
        )
        .unwrap();
        assert_eq!(rec.intra_mask[0].count(), 1);
        assert!(rec.intra_mask[0].get(0, 1));
        assert_eq!(rec.intra_mask[1].count(), 0);
    }

    #[test]
    fn order_is_applied() {
        let (img, a) = two_panel_page();
        let order = OrderResult {
            permutation: vec![1, 0],
            cut_tree: CutTree::Fallback { order: vec![1, 0] },
        };
        let rec = build_record(&img, &a, &order, &caps(2), &[], 2, RasterParams::default()).unwrap();
        assert_eq!(rec.boxes[0], Some(BBox::new(32, 0, 64, 32)));
        assert_eq!(rec.panel_images[0].get(10, 40, 0), 0.4);
    }

    #[test]
    fn errors_for_bad_inputs() {
        let (img, a) = two_panel_page();
        let err = build_record(&img, &a, &identity_order(2), &caps(3), &[], 4, RasterParams::default());
        assert!(err.is_err());
        let err = build_record(&img, &a, &identity_order(2), &caps(2), &[], 1, RasterParams::default())
            .unwrap_err();
        assert!(err.to_string().contains("two"), "{err}");
    }

    #[test]
    fn records_round_trip_through_disk() {
        let (img, a) = two_panel_page();
        let rec = build_record(
            &img,
            &a,
            &identity_order(2),
            &caps(2),
            &[BBox::new(0, 0, 20, 20)],
            3,
            RasterParams::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut w = RecordWriter::create(dir.path()).unwrap();
        w.write(&rec).unwrap();
        w.write(&rec).unwrap();
        assert_eq!(w.finish().unwrap(), 2);
        let back = read_records(dir.path()).unwrap();
        assert_eq!(back, vec![rec.clone(), rec]);
    }

    #[test]
    fn manifest_round_trip() {
        let e = ManifestEntry {
            page_id: "p".into(),
            image_path: "images/p.png".into(),
            xml_path: "ann/p.xml".into(),
            captions: vec!["a".into()],
            story: "s".into(),
            bubble_boxes: vec![BBox::new(1, 2, 3, 4)],
            order: vec![0],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, std::slice::from_ref(&e)).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), vec![e]);
        let line = fs::read_to_string(&p).unwrap();
        assert!(line.contains(r#""bubble_boxes":[[1,2,3,4]]"#), "{line}");
    }
}
