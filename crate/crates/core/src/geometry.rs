//! Points, pixel grids and invertible 2-D transforms.
//!
//! Coordinates follow the pixel-center convention: pixel `(i, j)` has its
//! center at `x = j`, `y = i`, origin top-left, `x` rightward, `y` downward.
//! A transform maps points of the input image to points of the output image;
//! image warping samples the input through the inverse mapping.

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        self.dist_sq(other).sqrt()
    }

    pub fn dist_sq(&self, other: &Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
}

impl PixelGrid {
    pub const fn new(height: usize, width: usize) -> Self {
        PixelGrid { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Closed-interval containment in `[0, W-1] x [0, H-1]`.
    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width as f64 - 1.0) && p.y <= (self.height as f64 - 1.0)
    }
}

/// Row-major 2x3 affine matrix: `[a b tx; c d ty]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: [f64; 6],
}

impl Affine {
    pub const IDENTITY: Affine = Affine { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0] };

    #[inline]
    pub fn apply(&self, p: Point2) -> Point2 {
        let m = &self.m;
        Point2 { x: m[0] * p.x + m[1] * p.y + m[2], y: m[3] * p.x + m[4] * p.y + m[5] }
    }

    pub fn det(&self) -> f64 {
        self.m[0] * self.m[4] - self.m[1] * self.m[3]
    }

    pub fn inverse(&self) -> Result<Affine> {
        let det = self.det();
        if !(det.abs() >= 1e-12) {
            return Err(Error::SingularTransform { det });
        }
        let [a, b, tx, c, d, ty] = self.m;
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Ok(Affine { m: [ia, ib, -(ia * tx + ib * ty), ic, id, -(ic * tx + id * ty)] })
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &Affine) -> Affine {
        let [a, b, tx, c, d, ty] = self.m;
        let [e, f, ux, g, h, uy] = first.m;
        Affine {
            m: [
                a * e + b * g,
                a * f + b * h,
                a * ux + b * uy + tx,
                c * e + d * g,
                c * f + d * h,
                c * ux + d * uy + ty,
            ],
        }
    }
}

/// Thin-plate spline expressed as a displacement field:
/// `T(p) = p + a0 + a1 x + a2 y + Σ w_i U(|p - c_i|)` with
/// `U(r) = r² log r²`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tps {
    grid_size: usize,
    control: Vec<Point2>,
    displacement: Vec<Point2>,
    regularization: f64,
    weights: Vec<[f64; 2]>,
    affine: [[f64; 2]; 3],
}

pub const DEFAULT_TPS_REGULARIZATION: f64 = 1e-6;

#[inline]
fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

impl Tps {
    /// Fits the spline through `control[i] -> control[i] + displacement[i]`.
    pub fn fit(
        grid_size: usize,
        control: Vec<Point2>,
        displacement: Vec<Point2>,
        regularization: f64,
    ) -> Result<Tps> {
        let n = control.len();
        if n != displacement.len() {
            return Err(Error::InvalidTransform("control and displacement lengths differ".into()));
        }
        if n < 3 {
            return Err(Error::InvalidTransform("thin-plate spline needs at least 3 control points".into()));
        }
        if control.iter().chain(&displacement).any(|p| !p.is_finite()) || !(regularization >= 0.0) {
            return Err(Error::InvalidTransform("non-finite thin-plate spline parameters".into()));
        }
        for i in 0..n {
            for j in i + 1..n {
                if control[i] == control[j] {
                    return Err(Error::InvalidTransform(format!("control points {i} and {j} coincide")));
                }
            }
        }
        let size = n + 3;
        let mut a = DMatrix::<f64>::zeros(size, size);
        let mut rhs = DMatrix::<f64>::zeros(size, 2);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = tps_kernel(control[i].dist_sq(&control[j]));
            }
            a[(i, i)] += regularization;
            a[(i, n)] = 1.0;
            a[(i, n + 1)] = control[i].x;
            a[(i, n + 2)] = control[i].y;
            a[(n, i)] = 1.0;
            a[(n + 1, i)] = control[i].x;
            a[(n + 2, i)] = control[i].y;
            rhs[(i, 0)] = displacement[i].x;
            rhs[(i, 1)] = displacement[i].y;
        }
        let sol = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidTransform("degenerate thin-plate spline control points".into()))?;
        let weights = (0..n).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect();
        let affine = [
            [sol[(n, 0)], sol[(n, 1)]],
            [sol[(n + 1, 0)], sol[(n + 1, 1)]],
            [sol[(n + 2, 0)], sol[(n + 2, 1)]],
        ];
        Ok(Tps { grid_size, control, displacement, regularization, weights, affine })
    }

    /// Regular `k x k` control grid spanning `grid` with the given displacements
    /// (row-major over the control grid).
    pub fn on_grid(grid: PixelGrid, k: usize, displacement: Vec<Point2>, regularization: f64) -> Result<Tps> {
        if k < 2 {
            return Err(Error::InvalidTransform("control grid must be at least 2x2".into()));
        }
        let control = control_grid(grid, k);
        Tps::fit(k, control, displacement, regularization)
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn control(&self) -> &[Point2] {
        &self.control
    }

    pub fn displacement(&self) -> &[Point2] {
        &self.displacement
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    fn displacement_at(&self, p: Point2) -> (Point2, Matrix2<f64>) {
        let a = &self.affine;
        let mut dx = a[0][0] + a[1][0] * p.x + a[2][0] * p.y;
        let mut dy = a[0][1] + a[1][1] * p.x + a[2][1] * p.y;
        let mut jac = Matrix2::new(a[1][0], a[2][0], a[1][1], a[2][1]);
        for (c, w) in self.control.iter().zip(&self.weights) {
            let ex = p.x - c.x;
            let ey = p.y - c.y;
            let r2 = ex * ex + ey * ey;
            if r2 > 0.0 {
                let u = r2 * r2.ln();
                dx += w[0] * u;
                dy += w[1] * u;
                let g = 2.0 * (r2.ln() + 1.0);
                jac[(0, 0)] += w[0] * g * ex;
                jac[(0, 1)] += w[0] * g * ey;
                jac[(1, 0)] += w[1] * g * ex;
                jac[(1, 1)] += w[1] * g * ey;
            }
        }
        (Point2::new(dx, dy), jac)
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let (d, _) = self.displacement_at(p);
        Point2::new(p.x + d.x, p.y + d.y)
    }

    /// Newton inversion of `q + d(q) = p`; `None` if it fails to converge.
    pub fn apply_inverse(&self, p: Point2) -> Option<Point2> {
        let (d0, _) = self.displacement_at(p);
        let mut q = Point2::new(p.x - d0.x, p.y - d0.y);
        for _ in 0..50 {
            let (d, jd) = self.displacement_at(q);
            let rx = q.x + d.x - p.x;
            let ry = q.y + d.y - p.y;
            if rx.abs() < 1e-11 && ry.abs() < 1e-11 {
                return Some(q);
            }
            let j = Matrix2::identity() + jd;
            let inv = j.try_inverse()?;
            q.x -= inv[(0, 0)] * rx + inv[(0, 1)] * ry;
            q.y -= inv[(1, 0)] * rx + inv[(1, 1)] * ry;
            if !q.is_finite() {
                return None;
            }
        }
        let (d, _) = self.displacement_at(q);
        ((q.x + d.x - p.x).hypot(q.y + d.y - p.y) < 1e-6).then_some(q)
    }
}

/// Control points of a regular `k x k` grid covering the pixel-center extent.
pub fn control_grid(grid: PixelGrid, k: usize) -> Vec<Point2> {
    let sx = (grid.width as f64 - 1.0) / (k as f64 - 1.0);
    let sy = (grid.height as f64 - 1.0) / (k as f64 - 1.0);
    let mut out = Vec::with_capacity(k * k);
    for r in 0..k {
        for c in 0..k {
            out.push(Point2::new(c as f64 * sx, r as f64 * sy));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRecord", into = "TransformRecord")]
pub enum GeometricTransform {
    Affine(Affine),
    Tps(Tps),
}

/// On-disk form: affine as six row-major numbers, tps as control grid plus
/// displacements (weights are refit on load).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformRecord {
    Affine {
        params: [f64; 6],
    },
    Tps {
        grid_size: usize,
        control_points: Vec<[f64; 2]>,
        displacements: Vec<[f64; 2]>,
        regularization: f64,
    },
}

impl From<GeometricTransform> for TransformRecord {
    fn from(t: GeometricTransform) -> Self {
        match t {
            GeometricTransform::Affine(a) => TransformRecord::Affine { params: a.m },
            GeometricTransform::Tps(t) => TransformRecord::Tps {
                grid_size: t.grid_size,
                control_points: t.control.iter().map(|p| [p.x, p.y]).collect(),
                displacements: t.displacement.iter().map(|p| [p.x, p.y]).collect(),
                regularization: t.regularization,
            },
        }
    }
}

impl TryFrom<TransformRecord> for GeometricTransform {
    type Error = Error;

    fn try_from(r: TransformRecord) -> Result<Self> {
        match r {
            TransformRecord::Affine { params } => GeometricTransform::affine(params),
            TransformRecord::Tps { grid_size, control_points, displacements, regularization } => {
                let c = control_points.into_iter().map(|[x, y]| Point2::new(x, y)).collect();
                let d = displacements.into_iter().map(|[x, y]| Point2::new(x, y)).collect();
                Ok(GeometricTransform::Tps(Tps::fit(grid_size, c, d, regularization)?))
            }
        }
    }
}

impl GeometricTransform {
    pub fn identity() -> Self {
        GeometricTransform::Affine(Affine::IDENTITY)
    }

    /// Affine from six row-major parameters; the linear part must be invertible.
    pub fn affine(params: [f64; 6]) -> Result<Self> {
        let a = Affine { m: params };
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite affine parameters".into()));
        }
        if a.det() == 0.0 {
            return Err(Error::SingularTransform { det: 0.0 });
        }
        Ok(GeometricTransform::Affine(a))
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        GeometricTransform::Affine(Affine { m: [1.0, 0.0, dx, 0.0, 1.0, dy] })
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        GeometricTransform::Affine(Affine { m: [sx, 0.0, 0.0, 0.0, sy, 0.0] })
    }

    /// Rotation by `angle` radians and isotropic `scale` about `center`,
    /// followed by a translation `(tx, ty)`.
    pub fn similarity_about(center: Point2, angle: f64, scale: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let a = scale * c;
        let b = -scale * s;
        let cc = scale * s;
        let d = scale * c;
        let ox = center.x - a * center.x - b * center.y + tx;
        let oy = center.y - cc * center.x - d * center.y + ty;
        GeometricTransform::Affine(Affine { m: [a, b, ox, cc, d, oy] })
    }

    pub fn as_affine(&self) -> Option<&Affine> {
        match self {
            GeometricTransform::Affine(a) => Some(a),
            GeometricTransform::Tps(_) => None,
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, GeometricTransform::Affine(_))
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        match self {
            GeometricTransform::Affine(a) => a.apply(p),
            GeometricTransform::Tps(t) => t.apply(p),
        }
    }

    /// Composition `self ∘ first` for affine transforms.
    pub fn compose(&self, first: &GeometricTransform) -> Result<GeometricTransform> {
        match (self, first) {
            (GeometricTransform::Affine(a), GeometricTransform::Affine(b)) => {
                Ok(GeometricTransform::Affine(a.compose(b)))
            }
            _ => Err(Error::InvalidTransform("only affine transforms compose in closed form".into())),
        }
    }

    /// A callable inverse mapping: exact for affine, Newton-iterated for tps.
    pub fn inverse_map(&self) -> Result<InverseMap<'_>> {
        match self {
            GeometricTransform::Affine(a) => Ok(InverseMap::Affine(a.inverse()?)),
            GeometricTransform::Tps(t) => Ok(InverseMap::Tps(t)),
        }
    }
}

/// Pre-computed inverse of a [`GeometricTransform`].
pub enum InverseMap<'a> {
    Affine(Affine),
    Tps(&'a Tps),
}

impl InverseMap<'_> {
    pub fn apply(&self, p: Point2) -> Option<Point2> {
        match self {
            InverseMap::Affine(a) => Some(a.apply(p)),
            InverseMap::Tps(t) => t.apply_inverse(p),
        }
    }
}

pub fn apply_transform(t: &GeometricTransform, p: Point2) -> Point2 {
    t.apply(p)
}

pub fn invert_affine(t: &GeometricTransform) -> Result<GeometricTransform> {
    match t {
        GeometricTransform::Affine(a) => Ok(GeometricTransform::Affine(a.inverse()?)),
        GeometricTransform::Tps(_) => Err(Error::InvalidTransform("invert_affine needs an affine transform".into())),
    }
}

/// Bilinear sample at a continuous position; `None` outside `[0, W-1] x [0, H-1]`.
#[inline]
pub fn sample_bilinear(img: &Image, x: f64, y: f64) -> Option<[f32; 3]> {
    let w = img.width();
    let h = img.height();
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let p00 = img.pixel(x0, y0);
    let p10 = img.pixel(x1, y0);
    let p01 = img.pixel(x0, y1);
    let p11 = img.pixel(x1, y1);
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        out[c] = (1.0 - fx) * (1.0 - fy) * p00[c]
            + fx * (1.0 - fy) * p10[c]
            + (1.0 - fx) * fy * p01[c]
            + fx * fy * p11[c];
    }
    Some(out)
}

/// Resamples `img` onto `grid` through the inverse of `t` with bilinear
/// interpolation; pixels whose pre-image leaves the input are zero.
pub fn warp_image(img: &Image, t: &GeometricTransform, grid: PixelGrid) -> Result<Image> {
    if img.is_empty() {
        return Err(Error::InvalidArgument("cannot warp an empty image".into()));
    }
    let inv = t.inverse_map()?;
    let mut out = Image::new(grid.width, grid.height);
    for y in 0..grid.height {
        for x in 0..grid.width {
            let q = Point2::new(x as f64, y as f64);
            if let Some(p) = inv.apply(q) {
                if let Some(v) = sample_bilinear(img, p.x, p.y) {
                    out.set_pixel(x, y, v);
                }
            }
        }
    }
    Ok(out)
}

pub fn warp_points_batch(t: &GeometricTransform, pts: &[Point2], grid: PixelGrid) -> Vec<(Point2, bool)> {
    pts.iter()
        .map(|p| {
            let q = t.apply(*p);
            (q, grid.contains(&q))
        })
        .collect()
}
