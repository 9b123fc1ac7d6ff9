use crate::error::{contract, Result};

/// Axis-aligned box: top-left corner and extents, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(contract(format!("box {self:?} must have finite coordinates and positive extents")))
        }
    }

    pub fn intersection(&self, o: &Self) -> f64 {
        let w = (self.right().min(o.right()) - self.x.max(o.x)).max(0.0);
        let h = (self.bottom().min(o.bottom()) - self.y.max(o.y)).max(0.0);
        w * h
    }

    pub fn iou(&self, o: &Self) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Smallest box containing both.
    pub fn enclosing(&self, o: &Self) -> Self {
        let x = self.x.min(o.x);
        let y = self.y.min(o.y);
        Self::new(x, y, self.right().max(o.right()) - x, self.bottom().max(o.bottom()) - y)
    }

    /// Intersection with `[0, width] x [0, height]`, keeping at least one
    /// pixel of extent so the box stays valid.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        let x1 = self.x.clamp(0.0, width - 1.0);
        let y1 = self.y.clamp(0.0, height - 1.0);
        let x2 = self.right().clamp(x1 + 1.0, width);
        let y2 = self.bottom().clamp(y1 + 1.0, height);
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }
}
