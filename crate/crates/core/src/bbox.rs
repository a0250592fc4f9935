use serde::{Deserialize, Serialize};

/// Axis-aligned pixel box, origin top-left, half-open: covers pixels
/// `xmin..xmax` by `ymin..ymax`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub xmin: u32,
    pub ymin: u32,
    pub xmax: u32,
    pub ymax: u32,
}

impl From<[u32; 4]> for BBox {
    fn from(v: [u32; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.xmin, b.ymin, b.xmax, b.ymax]
    }
}

impl BBox {
    pub const fn new(xmin: u32, ymin: u32, xmax: u32, ymax: u32) -> Self {
        BBox {
            xmin,
            ymin,
            xmax,
            ymax,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.xmin < self.xmax && self.ymin < self.ymax
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.xmax <= width && self.ymax <= height
    }

    pub fn width(&self) -> u32 {
        self.xmax.saturating_sub(self.xmin)
    }

    pub fn height(&self) -> u32 {
        self.ymax.saturating_sub(self.ymin)
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.xmin as f64 + self.xmax as f64) / 2.0,
            (self.ymin as f64 + self.ymax as f64) / 2.0,
        )
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.xmin as f64 && x < self.xmax as f64 && y >= self.ymin as f64 && y < self.ymax as f64
    }

    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        x >= self.xmin && x < self.xmax && y >= self.ymin && y < self.ymax
    }

    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let b = BBox::new(
            self.xmin.max(other.xmin),
            self.ymin.max(other.ymin),
            self.xmax.min(other.xmax),
            self.ymax.min(other.ymax),
        );
        b.is_valid().then_some(b)
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        self.intersect(other).map_or(0, |b| b.area())
    }

    pub fn translate(&self, dx: u32, dy: u32) -> BBox {
        BBox::new(self.xmin + dx, self.ymin + dy, self.xmax + dx, self.ymax + dy)
    }
}

impl std::fmt::Display for BBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.xmin, self.ymin, self.xmax, self.ymax)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intersection_of_adjacent_boxes_is_empty() {
        let a = BBox::new(0, 0, 50, 50);
        let b = BBox::new(50, 0, 100, 50);
        assert_eq!(a.intersection_area(&b), 0);
        assert_eq!(a.intersection_area(&BBox::new(25, 25, 75, 75)), 625);
    }

    #[test]
    fn center_is_half_open_inside() {
        let a = BBox::new(0, 0, 2, 2);
        let (cx, cy) = a.center();
        assert!(a.contains_point(cx, cy));
        assert!(!a.contains_point(2.0, 1.0));
    }

    #[test]
    fn serde_as_array() {
        let b = BBox::new(1, 2, 3, 4);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[1,2,3,4]");
        assert_eq!(serde_json::from_str::<BBox>(&s).unwrap(), b);
    }
}
