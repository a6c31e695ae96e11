//! Positional-vector algebra: decoding `(x, y, z, r)` into boxes, the
//! per-stage positional update, the IoF attention bias and GIoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN2: f64 = std::f64::consts::LN_2;

/// Default IoF bias floor.
pub const IOF_EPS: f64 = 1e-7;

/// Query position: center `(x, y)` in units of `s_base` pixels, `z` the log₂
/// scale and `r` the log₂ aspect ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryPos {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl QueryPos {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.z, self.r]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Axis-aligned box in pixel corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Orders the corners so that `x1 ≤ x2` and `y1 ≤ y2`.
    pub fn canonical(self) -> Self {
        Self::new(
            self.x1.min(self.x2),
            self.y1.min(self.y2),
            self.x1.max(self.x2),
            self.y1.max(self.y2),
        )
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// `(cx, cy, w, h)`.
    pub fn to_cxcywh(self) -> [f64; 4] {
        [
            0.5 * (self.x1 + self.x2),
            0.5 * (self.y1 + self.y2),
            self.width(),
            self.height(),
        ]
    }

    fn intersection(&self, o: &BoxXYXY) -> f64 {
        let iw = self.x2.min(o.x2) - self.x1.max(o.x1);
        let ih = self.y2.min(o.y2) - self.y1.max(o.y1);
        iw.max(0.0) * ih.max(0.0)
    }
}

pub fn decode_box(p: QueryPos, s_base: f64) -> Result<BoxXYXY> {
    if !p.is_finite() {
        return Err(Error::Value(format!("non-finite query position {p:?}")));
    }
    if !(s_base > 0.0) {
        return Err(Error::Config(format!("s_base must be positive, got {s_base}")));
    }
    let (cx, cy) = (s_base * p.x, s_base * p.y);
    let w = s_base * (p.z - p.r).exp2();
    let h = s_base * (p.z + p.r).exp2();
    Ok(BoxXYXY::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h))
}

/// Gradient of `<grad_box, decode_box(p)>` with respect to `(x, y, z, r)`.
pub fn decode_box_backward(p: QueryPos, s_base: f64, grad_box: [f64; 4]) -> [f64; 4] {
    let w = s_base * (p.z - p.r).exp2();
    let h = s_base * (p.z + p.r).exp2();
    let [g1, g2, g3, g4] = grad_box;
    let gw = 0.5 * (g3 - g1);
    let gh = 0.5 * (g4 - g2);
    [
        s_base * (g1 + g3),
        s_base * (g2 + g4),
        LN2 * (gw * w + gh * h),
        LN2 * (-gw * w + gh * h),
    ]
}

/// Inverse of [`decode_box`] for a positive-area box.
pub fn box_to_pos(b: BoxXYXY, s_base: f64) -> Result<QueryPos> {
    let b = b.canonical();
    let (w, h) = (b.width(), b.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::Value(format!("box {b:?} has no area")));
    }
    let [cx, cy, _, _] = b.to_cxcywh();
    let lw = (w / s_base).log2();
    let lh = (h / s_base).log2();
    Ok(QueryPos::new(
        cx / s_base,
        cy / s_base,
        0.5 * (lw + lh),
        0.5 * (lh - lw),
    ))
}

/// Positional update: centers move in units of the query scale `2^z`.
pub fn update_pos(p: QueryPos, d: [f64; 4]) -> QueryPos {
    let s = p.z.exp2();
    QueryPos::new(p.x + d[0] * s, p.y + d[1] * s, p.z + d[2], p.r + d[3])
}

/// Returns `(∂/∂p, ∂/∂d)` of `<grad_out, update_pos(p, d)>`.
pub fn update_pos_backward(p: QueryPos, d: [f64; 4], grad_out: [f64; 4]) -> ([f64; 4], [f64; 4]) {
    let s = p.z.exp2();
    let [gx, gy, gz, gr] = grad_out;
    (
        [gx, gy, gz + LN2 * s * (gx * d[0] + gy * d[1]), gr],
        [gx * s, gy * s, gz, gr],
    )
}

/// `B_ij = ln(|box_i ∩ box_j| / |box_i| + eps)`. A zero-area `box_i` gives
/// `ln(eps)` across its row.
pub fn iof_bias(boxes: &[BoxXYXY], eps: f64) -> Tensor {
    let n = boxes.len();
    let mut out = Tensor::zeros(&[n, n]);
    for (i, bi) in boxes.iter().enumerate() {
        let area = bi.area();
        let row = out.row_mut(i);
        for (j, bj) in boxes.iter().enumerate() {
            row[j] = if area <= 0.0 {
                eps.ln()
            } else if i == j {
                (1.0 + eps).ln()
            } else {
                (bi.intersection(bj) / area + eps).ln()
            };
        }
    }
    out
}

/// Gradient of `<grad, iof_bias(boxes)>` with respect to every box corner.
pub fn iof_bias_backward(boxes: &[BoxXYXY], eps: f64, grad: &Tensor) -> Vec<[f64; 4]> {
    let n = boxes.len();
    let mut out = vec![[0.0; 4]; n];
    for i in 0..n {
        let bi = boxes[i];
        let area = bi.area();
        if area <= 0.0 {
            continue;
        }
        let (aw, ah) = (bi.width(), bi.height());
        for j in 0..n {
            let g = grad.get2(i, j);
            if i == j || g == 0.0 {
                continue;
            }
            let bj = boxes[j];
            let (ix, x1_from_i, x2_from_i) = overlap(bi.x1, bi.x2, bj.x1, bj.x2);
            let (iy, y1_from_i, y2_from_i) = overlap(bi.y1, bi.y2, bj.y1, bj.y2);
            let inter = ix.max(0.0) * iy.max(0.0);
            let ratio = inter / area;
            let denom = ratio + eps;
            let g_inter = g / (area * denom);
            let g_area = -g * inter / (area * area * denom);

            let mut gi = [0.0; 4];
            let mut gj = [0.0; 4];
            // area = aw · ah
            gi[0] -= g_area * ah;
            gi[2] += g_area * ah;
            gi[1] -= g_area * aw;
            gi[3] += g_area * aw;
            if ix > 0.0 && iy > 0.0 {
                let gix = g_inter * iy;
                let giy = g_inter * ix;
                pick(&mut gi, &mut gj, x1_from_i)[0] -= gix;
                pick(&mut gi, &mut gj, x2_from_i)[2] += gix;
                pick(&mut gi, &mut gj, y1_from_i)[1] -= giy;
                pick(&mut gi, &mut gj, y2_from_i)[3] += giy;
            }
            for k in 0..4 {
                out[i][k] += gi[k];
                out[j][k] += gj[k];
            }
        }
    }
    out
}

/// Overlap length of `[a1, a2]` and `[b1, b2]` and which interval supplied
/// each bound (`true` = the first). Ties go to the first interval.
fn overlap(a1: f64, a2: f64, b1: f64, b2: f64) -> (f64, bool, bool) {
    let lo_a = a1 >= b1;
    let hi_a = a2 <= b2;
    let lo = if lo_a { a1 } else { b1 };
    let hi = if hi_a { a2 } else { b2 };
    (hi - lo, lo_a, hi_a)
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU and whether both boxes were degenerate (zero area), in
/// which case `value` is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Giou {
    pub value: f64,
    pub degenerate: bool,
}

pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> Giou {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Giou {
            value: 0.0,
            degenerate: true,
        };
    }
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclosing = cw * ch;
    Giou {
        value: inter / union - (enclosing - union) / enclosing,
        degenerate: false,
    }
}

/// Gradients of `giou(a, b).value` with respect to the corners of `a` and `b`.
/// Canonical boxes are assumed; degenerate pairs get zero gradient.
pub fn giou_backward(a: &BoxXYXY, b: &BoxXYXY) -> ([f64; 4], [f64; 4]) {
    let mut ga = [0.0; 4];
    let mut gb = [0.0; 4];
    let (ix, x1a, x2a) = overlap(a.x1, a.x2, b.x1, b.x2);
    let (iy, y1a, y2a) = overlap(a.y1, a.y2, b.y1, b.y2);
    let (ix, iy) = (ix.max(0.0), iy.max(0.0));
    let inter = ix * iy;
    let (aa, ab) = (a.area(), b.area());
    let union = aa + ab - inter;
    if union <= 0.0 {
        return (ga, gb);
    }
    let cx1a = a.x1 <= b.x1;
    let cx2a = a.x2 >= b.x2;
    let cy1a = a.y1 <= b.y1;
    let cy2a = a.y2 >= b.y2;
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enc = cw * ch;

    // giou = I/U + U/C - 1 with U = Aa + Ab - I
    let d_inter = (union + inter) / (union * union) - 1.0 / enc;
    let d_area = -inter / (union * union) + 1.0 / enc;
    let d_enc = -union / (enc * enc);

    for (g, w, h) in [(&mut ga, a.width(), a.height()), (&mut gb, b.width(), b.height())] {
        g[0] -= d_area * h;
        g[2] += d_area * h;
        g[1] -= d_area * w;
        g[3] += d_area * w;
    }
    if ix > 0.0 && iy > 0.0 {
        let gix = d_inter * iy;
        let giy = d_inter * ix;
        pick(&mut ga, &mut gb, x1a)[0] -= gix;
        pick(&mut ga, &mut gb, x2a)[2] += gix;
        pick(&mut ga, &mut gb, y1a)[1] -= giy;
        pick(&mut ga, &mut gb, y2a)[3] += giy;
    }
    let gcw = d_enc * ch;
    let gch = d_enc * cw;
    pick(&mut ga, &mut gb, cx1a)[0] -= gcw;
    pick(&mut ga, &mut gb, cx2a)[2] += gcw;
    pick(&mut ga, &mut gb, cy1a)[1] -= gch;
    pick(&mut ga, &mut gb, cy2a)[3] += gch;
    (ga, gb)
}

fn pick<'a>(a: &'a mut [f64; 4], b: &'a mut [f64; 4], first: bool) -> &'a mut [f64; 4] {
    if first {
        a
    } else {
        b
    }
}
