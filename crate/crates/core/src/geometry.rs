//! Axis-aligned boxes in normalized center/size form, with IoU, GIoU and L1.

use serde::{Deserialize, Serialize};

use crate::tensor::{self, Graph, Var};

/// Normalized `(cx, cy, w, h)` box. Serialized as a 4-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Corner form `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Corners {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn to_box(self) -> BBox {
        BBox {
            cx: 0.5 * (self.x1 + self.x2),
            cy: 0.5 * (self.y1 + self.y2),
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    fn intersection(&self, o: &Corners) -> f64 {
        let w = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let h = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        w * h
    }

    fn enclosing(&self, o: &Corners) -> Corners {
        Corners {
            x1: self.x1.min(o.x1),
            y1: self.y1.min(o.y1),
            x2: self.x2.max(o.x2),
            y2: self.y2.max(o.y2),
        }
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Corners::new(x1, y1, x2, y2).to_box()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Positive finite extent.
    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    /// Valid and entirely inside the unit square.
    pub fn is_normalized(&self) -> bool {
        let c = self.to_corners();
        self.is_valid() && c.x1 >= -1e-12 && c.y1 >= -1e-12 && c.x2 <= 1.0 + 1e-12 && c.y2 <= 1.0 + 1e-12
    }

    pub fn to_corners(self) -> Corners {
        Corners {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Mirror around the vertical center line of the image.
    pub fn hflip(self) -> BBox {
        BBox { cx: 1.0 - self.cx, ..self }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let inter = ca.intersection(&cb);
    let union = ca.area() + cb.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - (|C| - |A u B|) / |C|` with `C` the smallest enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let inter = ca.intersection(&cb);
    let union = ca.area() + cb.area() - inter;
    let hull = ca.enclosing(&cb).area();
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if hull <= 0.0 {
        return iou;
    }
    // hull >= union exactly; clamp away rounding so GIoU never exceeds IoU
    iou - ((hull - union) / hull).max(0.0)
}

pub fn box_l1(a: &BBox, b: &BBox) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

/// Per-row box regression terms over `[M, 4]` predicted and target boxes on a
/// tape: returns `(sum of (1 - GIoU), sum of L1)` as two scalar nodes.
pub fn box_losses(g: &mut Graph, pred: Var, target: Var) -> tensor::Result<(Var, Var)> {
    let diff = g.sub(pred, target)?;
    let diff = g.abs(diff);
    let l1 = g.sum(diff);

    let corners = |g: &mut Graph, b: Var| -> tensor::Result<[Var; 4]> {
        let cx = g.slice(b, 1, 0, 1)?;
        let cy = g.slice(b, 1, 1, 1)?;
        let w = g.slice(b, 1, 2, 1)?;
        let h = g.slice(b, 1, 3, 1)?;
        let hw = g.scale(w, 0.5);
        let hh = g.scale(h, 0.5);
        Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
    };
    let [px1, py1, px2, py2] = corners(g, pred)?;
    let [tx1, ty1, tx2, ty2] = corners(g, target)?;

    let area = |g: &mut Graph, x1: Var, y1: Var, x2: Var, y2: Var| -> tensor::Result<Var> {
        let w = g.sub(x2, x1)?;
        let h = g.sub(y2, y1)?;
        g.mul(w, h)
    };
    let area_p = area(g, px1, py1, px2, py2)?;
    let area_t = area(g, tx1, ty1, tx2, ty2)?;

    let ix1 = g.maximum(px1, tx1)?;
    let iy1 = g.maximum(py1, ty1)?;
    let ix2 = g.minimum(px2, tx2)?;
    let iy2 = g.minimum(py2, ty2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let sum_areas = g.add(area_p, area_t)?;
    let union = g.sub(sum_areas, inter)?;
    let iou = g.div(inter, union)?;

    let ex1 = g.minimum(px1, tx1)?;
    let ey1 = g.minimum(py1, ty1)?;
    let ex2 = g.maximum(px2, tx2)?;
    let ey2 = g.maximum(py2, ty2)?;
    let hull = area(g, ex1, ey1, ex2, ey2)?;
    let empty = g.sub(hull, union)?;
    let penalty = g.div(empty, hull)?;
    let giou = g.sub(iou, penalty)?;
    let one_minus = g.scale(giou, -1.0);
    let one_minus = g.offset(one_minus, 1.0);
    let giou_loss = g.sum(one_minus);
    Ok((giou_loss, l1))
}
