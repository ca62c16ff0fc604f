//! Polygon representation and overlap computation for text regions.
//!
//! Polygons are stored counter-clockwise (positive shoelace sign) starting at
//! the lexicographically smallest vertex, so equal regions serialize equally.
//! Degenerate (zero-area) polygons are representable — early training steps
//! emit them — and score IoU 0 against everything; the full invariants
//! (simple, nonzero area) are enforced by [`Polygon::validate`].

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

const AREA_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon is self-intersecting")]
    SelfIntersecting,
    #[error("polygon has zero area")]
    ZeroArea,
    #[error("polygons mix normalized and pixel coordinate spaces")]
    MixedCoordinateSpaces,
    #[error("resample count must be even and >= 4, got {0}")]
    BadResampleCount(usize),
    #[error("polygon perimeter is degenerate")]
    DegeneratePerimeter,
}

/// Ordered vertex list, canonicalized to counter-clockwise orientation with a
/// lexicographically smallest start vertex. `normalized` marks [0,1]² space.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    points: Vec<[f64; 2]>,
    normalized: bool,
}

impl Polygon {
    /// Polygon in pixel coordinates.
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self, GeometryError> {
        Self::with_space(points, false)
    }

    /// Polygon in normalized [0,1]² coordinates.
    pub fn normalized(points: Vec<[f64; 2]>) -> Result<Self, GeometryError> {
        Self::with_space(points, true)
    }

    fn with_space(mut points: Vec<[f64; 2]>, normalized: bool) -> Result<Self, GeometryError> {
        if points.len() < 3 {
            return Err(GeometryError::TooFewVertices(points.len()));
        }
        canonicalize(&mut points);
        Ok(Polygon { points, normalized })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Full invariant check: simple (no self-intersection) and nonzero area.
    pub fn validate(&self) -> Result<(), GeometryError> {
        // Intersection first: a bowtie has zero signed area too, and
        // "self-intersecting" is the more useful diagnosis.
        if self_intersects(&self.points) {
            return Err(GeometryError::SelfIntersecting);
        }
        if self.area() <= AREA_EPS {
            return Err(GeometryError::ZeroArea);
        }
        Ok(())
    }

    /// Shoelace absolute area.
    pub fn area(&self) -> f64 {
        shoelace(&self.points).abs()
    }

    pub fn perimeter(&self) -> f64 {
        let n = self.points.len();
        (0..n)
            .map(|i| dist(self.points[i], self.points[(i + 1) % n]))
            .sum()
    }

    pub fn is_convex(&self) -> bool {
        is_convex(&self.points)
    }

    /// Map normalized coordinates into a pixel frame of the given size.
    pub fn denormalize(&self, width: f64, height: f64) -> Polygon {
        let points = self
            .points
            .iter()
            .map(|p| [p[0] * width, p[1] * height])
            .collect();
        Polygon { points, normalized: false }
    }

    /// Map pixel coordinates into normalized [0,1]² for the given frame size.
    pub fn to_normalized(&self, width: f64, height: f64) -> Polygon {
        let points = self
            .points
            .iter()
            .map(|p| [p[0] / width, p[1] / height])
            .collect();
        Polygon { points, normalized: true }
    }

    /// Apply an affine map `p -> scale * p + offset` staying in the same space.
    pub fn affine(&self, scale: f64, offset: [f64; 2]) -> Polygon {
        let points = self
            .points
            .iter()
            .map(|p| [p[0] * scale + offset[0], p[1] * scale + offset[1]])
            .collect();
        Polygon { points, normalized: self.normalized }
    }
}

// Serialized form is the bare vertex list; interchange files carry pixel-space
// coordinates, so the flag is not part of the wire format.
impl Serialize for Polygon {
    fn serialize<T: Serializer>(&self, ser: T) -> Result<T::Ok, T::Error> {
        self.points.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Polygon {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let points = Vec::<[f64; 2]>::deserialize(de)?;
        Polygon::new(points).map_err(serde::de::Error::custom)
    }
}

fn canonicalize(points: &mut [[f64; 2]]) {
    if shoelace(points) < 0.0 {
        points.reverse();
    }
    let start = points
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.partial_cmp(b).expect("non-finite vertex"))
        .map(|(i, _)| i)
        .unwrap_or(0);
    points.rotate_left(start);
}

fn shoelace(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    let mut acc = 0.0;
    for i in 0..n {
        let p = points[i];
        let q = points[(i + 1) % n];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    acc / 2.0
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn is_convex(points: &[[f64; 2]]) -> bool {
    let n = points.len();
    let mut sign = 0.0f64;
    for i in 0..n {
        let c = cross(points[i], points[(i + 1) % n], points[(i + 2) % n]);
        if c.abs() > AREA_EPS {
            if sign != 0.0 && c.signum() != sign {
                return false;
            }
            sign = c.signum();
        }
    }
    true
}

/// Segment-pair test over non-adjacent edges.
fn self_intersects(points: &[[f64; 2]]) -> bool {
    let n = points.len();
    for i in 0..n {
        let (a1, a2) = (points[i], points[(i + 1) % n]);
        for j in (i + 1)..n {
            // adjacent edges share an endpoint, skip them
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let (b1, b2) = (points[j], points[(j + 1) % n]);
            if segments_properly_intersect(a1, a2, b1, b2) {
                return true;
            }
        }
    }
    false
}

fn segments_properly_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// Shoelace absolute area of a polygon.
pub fn polygon_area(p: &Polygon) -> f64 {
    p.area()
}

/// Intersection-over-union of two polygons in the same coordinate space.
///
/// Convex pairs clip directly (Sutherland–Hodgman); non-convex inputs are
/// ear-clipped into triangles and clipped pairwise. Degenerate polygons score
/// 0 against everything.
pub fn polygon_iou(a: &Polygon, b: &Polygon) -> Result<f64, GeometryError> {
    if a.is_normalized() != b.is_normalized() {
        return Err(GeometryError::MixedCoordinateSpaces);
    }
    // clipping is not numerically symmetric in its arguments; fix an argument
    // order from the canonical vertex lists so iou(a,b) == iou(b,a) exactly
    if point_list_cmp(&b.points, &a.points) == std::cmp::Ordering::Less {
        return polygon_iou(b, a);
    }
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= AREA_EPS || area_b <= AREA_EPS {
        return Ok(0.0);
    }
    let inter = if a.is_convex() && b.is_convex() {
        clip_area(&a.points, &b.points)
    } else {
        a.validate()?;
        b.validate()?;
        let tris_a = triangulate(&a.points)?;
        let tris_b = triangulate(&b.points)?;
        let mut acc = 0.0;
        for ta in &tris_a {
            for tb in &tris_b {
                acc += clip_area(ta, tb);
            }
        }
        acc
    };
    let union = area_a + area_b - inter;
    if union <= AREA_EPS {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Area of `subject ∩ clip` where `clip` is convex.
fn clip_area(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> f64 {
    shoelace(&clip_polygon(subject, clip)).abs()
}

/// Sutherland–Hodgman: clip `subject` by the convex CCW polygon `clip`.
/// Returns the raw (possibly empty) vertex chain of the intersection.
pub(crate) fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            return output;
        }
        let e1 = clip[i];
        let e2 = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let next = input[(j + 1) % m];
            let cur_in = cross(e1, e2, cur) >= 0.0;
            let next_in = cross(e1, e2, next) >= 0.0;
            if cur_in {
                output.push(cur);
                if !next_in {
                    output.push(line_intersection(e1, e2, cur, next));
                }
            } else if next_in {
                output.push(line_intersection(e1, e2, cur, next));
            }
        }
    }
    output
}

fn point_list_cmp(a: &[[f64; 2]], b: &[[f64; 2]]) -> std::cmp::Ordering {
    for (p, q) in a.iter().zip(b.iter()) {
        match p.partial_cmp(q) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(ord) => return ord,
        }
    }
    a.len().cmp(&b.len())
}

fn line_intersection(a1: [f64; 2], a2: [f64; 2], b1: [f64; 2], b2: [f64; 2]) -> [f64; 2] {
    let d1 = [a2[0] - a1[0], a2[1] - a1[1]];
    let d2 = [b2[0] - b1[0], b2[1] - b1[1]];
    let denom = d1[0] * d2[1] - d1[1] * d2[0];
    if denom.abs() < 1e-30 {
        return b1;
    }
    let t = ((b1[0] - a1[0]) * d2[1] - (b1[1] - a1[1]) * d2[0]) / denom;
    [a1[0] + t * d1[0], a1[1] + t * d1[1]]
}

/// Ear-clipping triangulation of a simple CCW polygon.
fn triangulate(points: &[[f64; 2]]) -> Result<Vec<[[f64; 2]; 3]>, GeometryError> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    let mut tris = Vec::with_capacity(points.len().saturating_sub(2));
    let mut guard = 0usize;
    while idx.len() > 3 {
        let n = idx.len();
        let mut clipped = false;
        for i in 0..n {
            let prev = points[idx[(i + n - 1) % n]];
            let cur = points[idx[i]];
            let next = points[idx[(i + 1) % n]];
            let c = cross(prev, cur, next);
            if c < -AREA_EPS {
                continue; // reflex vertex, not an ear
            }
            let mut contains = false;
            for &j in &idx {
                let p = points[j];
                if p == prev || p == cur || p == next {
                    continue;
                }
                if point_in_triangle(p, prev, cur, next) {
                    contains = true;
                    break;
                }
            }
            if !contains {
                tris.push([prev, cur, next]);
                idx.remove(i);
                clipped = true;
                break;
            }
        }
        if !clipped {
            return Err(GeometryError::SelfIntersecting);
        }
        guard += 1;
        if guard > points.len() * points.len() + 16 {
            return Err(GeometryError::SelfIntersecting);
        }
    }
    tris.push([points[idx[0]], points[idx[1]], points[idx[2]]]);
    Ok(tris)
}

fn point_in_triangle(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let d1 = cross(a, b, p);
    let d2 = cross(b, c, p);
    let d3 = cross(c, a, p);
    let has_neg = d1 < -AREA_EPS || d2 < -AREA_EPS || d3 < -AREA_EPS;
    let has_pos = d1 > AREA_EPS || d2 > AREA_EPS || d3 > AREA_EPS;
    !(has_neg && has_pos)
}

/// Resample the boundary to exactly `k` points equally spaced by arc length,
/// starting at the canonical (lexicographically smallest) vertex.
pub fn resample_polygon(p: &Polygon, k: usize) -> Result<Polygon, GeometryError> {
    if k < 4 || k % 2 != 0 {
        return Err(GeometryError::BadResampleCount(k));
    }
    let pts = p.points();
    let n = pts.len();
    let mut edge_len = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let l = dist(pts[i], pts[(i + 1) % n]);
        edge_len.push(l);
        total += l;
    }
    if total <= 1e-12 {
        return Err(GeometryError::DegeneratePerimeter);
    }
    // A k-gon is its own k-point resampling: walking a fixed arc-length step
    // cannot reproduce unequal chord spacing, so re-walking an already
    // resampled boundary would drift at every corner. Treating count-match as
    // identity makes resampling idempotent in the vertex count, exactly.
    if n == k {
        return Ok(p.clone());
    }
    let step = total / k as f64;
    let mut out = Vec::with_capacity(k);
    let mut edge = 0usize;
    let mut consumed = 0.0; // arc length already walked on current edge
    for i in 0..k {
        let mut target = i as f64 * step - consumed;
        loop {
            let l = edge_len[edge % n];
            if target <= l || edge >= 2 * n {
                let t = if l > 0.0 { target / l } else { 0.0 };
                let a = pts[edge % n];
                let b = pts[(edge + 1) % n];
                out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
                break;
            }
            target -= l;
            consumed += l;
            edge += 1;
        }
    }
    let resampled = Polygon { points: out, normalized: p.normalized };
    // keep canonical form (start vertex may shift if the original start was
    // not the lexicographic minimum of the resampled set)
    Polygon::with_space(resampled.points, p.normalized)
}
