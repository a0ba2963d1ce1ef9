//! Axis-aligned boxes and the two overlap measures used for suppression,
//! matching, and mining.

/// Axis-aligned rectangle in original-image pixels, top-left anchored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: Option<f64>,
}

/// Which overlap ratio to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapKind {
    /// Intersection over union.
    Iou,
    /// Intersection over the area of the second box.
    Io2,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h, score: None }
    }

    pub fn scored(x: f64, y: f64, w: f64, h: f64, score: f64) -> Self {
        BBox { x, y, w, h, score: Some(score) }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    /// Score, or negative infinity for unscored boxes.
    pub fn score_or_min(&self) -> f64 {
        self.score.unwrap_or(f64::NEG_INFINITY)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    /// Box with the same center and extents multiplied by `factor`.
    pub fn scaled_about_center(&self, factor: f64) -> BBox {
        let (cx, cy) = self.center();
        let (w, h) = (self.w * factor, self.h * factor);
        BBox { x: cx - 0.5 * w, y: cy - 0.5 * h, w, h, score: self.score }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox { x: self.x + dx, y: self.y + dy, ..*self }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    /// Intersection divided by the area of `other`.
    pub fn io2(&self, other: &BBox) -> f64 {
        let a2 = other.area();
        if a2 <= 0.0 {
            0.0
        } else {
            (self.intersection_area(other) / a2).clamp(0.0, 1.0)
        }
    }
}

/// Overlap of `b1` and `b2` under the requested measure.
pub fn overlap(b1: &BBox, b2: &BBox, kind: OverlapKind) -> f64 {
    match kind {
        OverlapKind::Iou => b1.iou(b2),
        OverlapKind::Io2 => b1.io2(b2),
    }
}
