//! Synthetic annotated manga pages for tests and overfit runs.
//!
//! Pages are white with black-bordered rectangular panels. Each panel gets a
//! flat or striped fill whose description is written as the panel's dialogue
//! line, so captions derived from the dialogue describe the panel content.
//! Bubbles are white boxes with a black border placed over the text box.

use rand::Rng;

use crate::annotation::{DialogLink, NamedBox, PageAnnotation, PanelAnnotation, TextBox};
use crate::bbox::BBox;
use crate::panelize::PageImage;
use crate::seed::{rng_for, Stream};

const SHADES: [(&str, f64); 3] = [("dark", 0.1), ("gray", 0.45), ("pale", 0.75)];
const PATTERNS: [&str; 3] = ["flat", "stripes", "checks"];
const NAMES: [&str; 4] = ["Aki", "Ben", "Chie", "Dan"];
const MARGIN: u32 = 2;
const GUTTER: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPage {
    pub image: PageImage,
    pub annotation: PageAnnotation,
    pub bubble_boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    pub height: u32,
    pub width: u32,
    pub k_max: usize,
    /// Probability that a panel carries a speech bubble.
    pub bubble_rate: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            height: 64,
            width: 48,
            k_max: 4,
            bubble_rate: 0.5,
        }
    }
}

/// Splits `[lo, hi)` into `parts` spans separated by `gap`, with jitter.
fn spans<R: Rng>(lo: u32, hi: u32, parts: u32, gap: u32, rng: &mut R) -> Vec<(u32, u32)> {
    let total = hi - lo;
    let base = (total - gap * (parts - 1)) / parts;
    let mut out = Vec::new();
    let mut start = lo;
    for i in 0..parts {
        let end = if i + 1 == parts {
            hi
        } else {
            let jitter = (base / 4) as i64;
            let j = if jitter > 0 { rng.random_range(-jitter..=jitter) } else { 0 };
            (start as i64 + base as i64 + j) as u32
        };
        out.push((start, end));
        start = end + gap;
    }
    out
}

fn paint_panel(img: &mut PageImage, b: &BBox, shade: f64, pattern: &str) {
    for y in b.ymin..b.ymax {
        for x in b.xmin..b.xmax {
            let (ly, lx) = (y - b.ymin, x - b.xmin);
            let v = match pattern {
                "stripes" if (ly / 3) % 2 == 1 => (shade + 0.2).min(1.0),
                "checks" if ((ly / 4) + (lx / 4)) % 2 == 1 => (shade + 0.2).min(1.0),
                _ => shade,
            };
            let border = y == b.ymin || y + 1 == b.ymax || x == b.xmin || x + 1 == b.xmax;
            img.set_rgb(y as usize, x as usize, if border { 0.0 } else { v });
        }
    }
}

fn paint_bubble(img: &mut PageImage, b: &BBox) {
    for y in b.ymin..b.ymax {
        for x in b.xmin..b.xmax {
            let border = y == b.ymin || y + 1 == b.ymax || x == b.xmin || x + 1 == b.xmax;
            img.set_rgb(y as usize, x as usize, if border { 0.0 } else { 1.0 });
        }
    }
}

fn random_sub_box<R: Rng>(b: &BBox, min: u32, max: u32, rng: &mut R) -> Option<BBox> {
    let (bw, bh) = (b.width(), b.height());
    if bw < min + 2 || bh < min + 2 {
        return None;
    }
    let w = rng.random_range(min..=max.min(bw - 2));
    let h = rng.random_range(min..=max.min(bh - 2));
    let x0 = b.xmin + 1 + rng.random_range(0..=(bw - 2 - w));
    let y0 = b.ymin + 1 + rng.random_range(0..=(bh - 2 - h));
    Some(BBox::new(x0, y0, x0 + w, y0 + h))
}

/// Page number `index` of the synthetic corpus with root `seed`.
pub fn synth_page(seed: u64, index: u64, params: SynthParams) -> SynthPage {
    let mut rng = rng_for(seed, Stream::Synthetic, index);
    let (w, h) = (params.width, params.height);
    let k_max = params.k_max.max(1) as u32;

    let rows = rng.random_range(1..=k_max.min(3));
    let mut cols: Vec<u32> = (0..rows).map(|_| rng.random_range(1..=2)).collect();
    while cols.iter().sum::<u32>() > k_max {
        let i = cols.iter().position(|&c| c > 1).expect("rows <= k_max");
        cols[i] -= 1;
    }

    let mut image = PageImage::white(h as usize, w as usize);
    let mut ann = PageAnnotation::new(format!("synth_{index:05}"), w, h);
    let mut bubbles = Vec::new();
    for (r, (y0, y1)) in spans(MARGIN, h - MARGIN, rows, GUTTER, &mut rng).into_iter().enumerate() {
        for (x0, x1) in spans(MARGIN, w - MARGIN, cols[r], GUTTER, &mut rng) {
            let b = BBox::new(x0, y0, x1, y1);
            let (shade_name, shade) = SHADES[rng.random_range(0..SHADES.len())];
            let pattern = PATTERNS[rng.random_range(0..PATTERNS.len())];
            paint_panel(&mut image, &b, shade, pattern);
            ann.panels.push(PanelAnnotation {
                bbox: b,
                order_index: None,
                caption: None,
            });
            let name = NAMES[rng.random_range(0..NAMES.len())];
            if let Some(cb) = random_sub_box(&b, 4, 10, &mut rng) {
                if !ann.characters.iter().any(|c| c.name == name) {
                    ann.faces.push(NamedBox {
                        name: name.to_string(),
                        bbox: BBox::new(cb.xmin, cb.ymin, cb.xmin + cb.width().div_ceil(2), cb.ymin + cb.height().div_ceil(2)),
                    });
                }
                ann.characters.push(NamedBox {
                    name: name.to_string(),
                    bbox: cb,
                });
            }
            let speaks = rng.random_bool(params.bubble_rate);
            let content = format!("{shade_name} {pattern}");
            let text_box = if speaks {
                random_sub_box(&b, 8, 18, &mut rng)
            } else {
                None
            };
            match text_box {
                Some(tb) => {
                    paint_bubble(&mut image, &tb);
                    bubbles.push(tb);
                    ann.texts.push(TextBox { content, bbox: tb });
                    if ann.characters.last().is_some_and(|c| c.name == name && b.contains_point(c.bbox.center().0, c.bbox.center().1)) {
                        ann.dialog_links.push(DialogLink {
                            text_index: ann.texts.len() - 1,
                            character: name.to_string(),
                        });
                    }
                }
                None => {
                    // a caption-less line in the panel corner keeps the content described
                    let tb = BBox::new(b.xmin + 1, b.ymin + 1, b.xmin + 3, b.ymin + 3);
                    ann.texts.push(TextBox { content, bbox: tb });
                }
            }
        }
    }
    SynthPage {
        image,
        annotation: ann,
        bubble_boxes: bubbles,
    }
}
