//! Oriented 3D boxes and their generalized IoU.
//!
//! The computation is generic over [`Scalar`] so the same code yields values
//! (`f64`) and exact forward-mode derivatives ([`Dual`]).

use std::cmp::Ordering;
use std::f64::consts::{PI, TAU};
use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum GiouError {
    #[error("degenerate box: size {0:?}")]
    Degenerate([f64; 3]),
}

/// Center in meters, size `(w, l, h)` in meters, yaw in radians. Length runs
/// along the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Vec3, size: [f64; 3], yaw: f64) -> Self {
        Self {
            center: [center.x, center.y, center.z],
            size,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn center_vec(&self) -> Vec3 {
        Vec3::from(self.center)
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn validate(&self) -> Result<(), GiouError> {
        if self.size.iter().all(|s| *s > 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err(GiouError::Degenerate(self.size))
        }
    }

    /// True when `p` lies inside the box (boundary included).
    pub fn contains(&self, p: &Vec3) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p.x - self.center[0], p.y - self.center[1]);
        let along = c * dx + s * dy;
        let across = -s * dx + c * dy;
        along.abs() <= self.size[1] / 2.0
            && across.abs() <= self.size[0] / 2.0
            && (p.z - self.center[2]).abs() <= self.size[2] / 2.0
    }

    fn params(&self) -> [f64; 7] {
        [
            self.center[0],
            self.center[1],
            self.center[2],
            self.size[0],
            self.size[1],
            self.size[2],
            self.yaw,
        ]
    }
}

/// Minimal real-number interface for the box geometry.
pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;

    fn max(self, other: Self) -> Self {
        if self.val() >= other.val() {
            self
        } else {
            other
        }
    }

    fn min(self, other: Self) -> Self {
        if self.val() <= other.val() {
            self
        } else {
            other
        }
    }
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// Forward-mode dual number with `N` tangent directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; N];
        d[i] = 1.0;
        Self { v, d }
    }

    fn map(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let v = self.v / o.v;
        Self {
            v,
            d: std::array::from_fn(|i| (self.d[i] - v * o.d[i]) / o.v),
        }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl<const N: usize> Scalar for Dual<N> {
    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        self.map(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.map(self.v.cos(), -self.v.sin())
    }
}

#[derive(Clone, Copy)]
struct GBox<T> {
    c: [T; 3],
    s: [T; 3],
    yaw: T,
}

type Pt<T> = (T, T);

fn cross<T: Scalar>(a: Pt<T>, b: Pt<T>) -> T {
    a.0 * b.1 - a.1 * b.0
}

fn sub<T: Scalar>(a: Pt<T>, b: Pt<T>) -> Pt<T> {
    (a.0 - b.0, a.1 - b.1)
}

fn wrap<T: Scalar>(x: T) -> T {
    let turns = (x.val() / TAU).round();
    let mut w = x - T::cst(turns * TAU);
    if w.val() <= -PI {
        w = w + T::cst(TAU);
    }
    w
}

impl<T: Scalar> GBox<T> {
    /// BEV corners, counter-clockwise.
    fn corners(&self) -> [Pt<T>; 4] {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let half_l = self.s[1] * T::cst(0.5);
        let half_w = self.s[0] * T::cst(0.5);
        let local = [(half_l, half_w), (-half_l, half_w), (-half_l, -half_w), (half_l, -half_w)];
        local.map(|(x, y)| (self.c[0] + c * x - s * y, self.c[1] + s * x + c * y))
    }

    fn bottom(&self) -> T {
        self.c[2] - self.s[2] * T::cst(0.5)
    }

    fn top(&self) -> T {
        self.c[2] + self.s[2] * T::cst(0.5)
    }

    fn volume(&self) -> T {
        self.s[0] * self.s[1] * self.s[2]
    }
}

/// Sutherland–Hodgman clip of `subject` against a convex CCW `clip` polygon.
fn clip_polygon<T: Scalar>(subject: &[Pt<T>], clip: &[Pt<T>]) -> Vec<Pt<T>> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (p1, p2) = (clip[i], clip[(i + 1) % clip.len()]);
        let d = sub(p2, p1);
        let input = std::mem::take(&mut output);
        for k in 0..input.len() {
            let (s, e) = (input[k], input[(k + 1) % input.len()]);
            let cs = cross(d, sub(s, p1));
            let ce = cross(d, sub(e, p1));
            let (s_in, e_in) = (cs.val() >= 0.0, ce.val() >= 0.0);
            if e_in {
                if !s_in {
                    output.push(intersect(s, e, cs, ce));
                }
                output.push(e);
            } else if s_in {
                output.push(intersect(s, e, cs, ce));
            }
        }
    }
    output
}

fn intersect<T: Scalar>(s: Pt<T>, e: Pt<T>, cs: T, ce: T) -> Pt<T> {
    let t = cs / (cs - ce);
    (s.0 + t * (e.0 - s.0), s.1 + t * (e.1 - s.1))
}

fn polygon_area<T: Scalar>(poly: &[Pt<T>]) -> T {
    if poly.len() < 3 {
        return T::cst(0.0);
    }
    let mut twice = T::cst(0.0);
    for i in 0..poly.len() {
        twice = twice + cross(poly[i], poly[(i + 1) % poly.len()]);
    }
    twice * T::cst(0.5)
}

/// Returns `(iou, giou)`.
fn overlap<T: Scalar>(a: &GBox<T>, b: &GBox<T>) -> (T, T) {
    let (ca, cb) = (a.corners(), b.corners());
    let area = polygon_area(&clip_polygon(&ca, &cb));
    let dz = (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(T::cst(0.0));
    let (va, vb) = (a.volume(), b.volume());
    let inter = (area * dz).min(va).min(vb).max(T::cst(0.0));
    let union = va + vb - inter;
    let iou = inter / union;

    // enclosing box aligned to the mean heading of the pair
    let mean = a.yaw + wrap(b.yaw - a.yaw) * T::cst(0.5);
    let (ux, uy) = (mean.cos(), mean.sin());
    let mut bounds: Option<[T; 4]> = None;
    for p in ca.iter().chain(cb.iter()) {
        let u = p.0 * ux + p.1 * uy;
        let v = p.1 * ux - p.0 * uy;
        bounds = Some(match bounds {
            None => [u, u, v, v],
            Some([u0, u1, v0, v1]) => [u0.min(u), u1.max(u), v0.min(v), v1.max(v)],
        });
    }
    let [u0, u1, v0, v1] = bounds.expect("eight corners");
    let height = a.top().max(b.top()) - a.bottom().min(b.bottom());
    let hull = ((u1 - u0) * (v1 - v0) * height).max(union);
    (iou, iou - (hull - union) / hull)
}

fn canonical(a: &Box3D, b: &Box3D) -> bool {
    let (pa, pb) = (a.params(), b.params());
    for (x, y) in pa.iter().zip(&pb) {
        match x.total_cmp(y) {
            Ordering::Less => return false,
            Ordering::Greater => return true,
            Ordering::Equal => {}
        }
    }
    false
}

fn bitwise_equal(a: &Box3D, b: &Box3D) -> bool {
    a.params().iter().zip(b.params().iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn lift(b: &Box3D) -> GBox<f64> {
    GBox {
        c: b.center,
        s: b.size,
        yaw: b.yaw,
    }
}

/// Generalized IoU in `(-1, 1]`; exactly symmetric.
pub fn giou_3d(a: &Box3D, b: &Box3D) -> Result<f64, GiouError> {
    Ok(iou_giou(a, b)?.1)
}

/// Volumetric IoU in `[0, 1]`.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> Result<f64, GiouError> {
    Ok(iou_giou(a, b)?.0)
}

pub fn iou_giou(a: &Box3D, b: &Box3D) -> Result<(f64, f64), GiouError> {
    a.validate()?;
    b.validate()?;
    if bitwise_equal(a, b) {
        return Ok((1.0, 1.0));
    }
    let (a, b) = if canonical(a, b) { (b, a) } else { (a, b) };
    Ok(overlap(&lift(a), &lift(b)))
}

/// GIoU and its gradient with respect to `pred`'s
/// `(cx, cy, cz, w, l, h, yaw)`; `gt` is held constant.
pub fn giou_3d_with_grad(pred: &Box3D, gt: &Box3D) -> Result<(f64, [f64; 7]), GiouError> {
    pred.validate()?;
    gt.validate()?;
    if bitwise_equal(pred, gt) {
        return Ok((1.0, [0.0; 7]));
    }
    let p = pred.params();
    let pv: [Dual<7>; 7] = std::array::from_fn(|i| Dual::var(p[i], i));
    let pb = GBox {
        c: [pv[0], pv[1], pv[2]],
        s: [pv[3], pv[4], pv[5]],
        yaw: pv[6],
    };
    let gb = GBox {
        c: gt.center.map(Dual::cst),
        s: gt.size.map(Dual::cst),
        yaw: Dual::cst(gt.yaw),
    };
    let (_, g) = if canonical(pred, gt) {
        overlap(&gb, &pb)
    } else {
        overlap(&pb, &gb)
    };
    Ok((g.v, g.d))
}
