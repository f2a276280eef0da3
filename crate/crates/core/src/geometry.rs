//! Oriented-box geometry kernel: footprints, rotated-rectangle intersection,
//! 3D IoU, hard/soft rasterization, signed distances and farthest-point
//! sampling of free space.
//!
//! Boxes rotate only about the up axis, so 3D IoU factors into a 2D
//! rotated-rectangle intersection (convex polygon clipping) times a vertical
//! interval overlap.

use crate::error::{Error, Result};
use crate::scene::{GridMask, ObjectInstance, Scene, SceneConfig, GRID_RES};

/// 2D point in the horizontal x-z plane.
pub type P2 = [f64; 2];

#[inline]
fn rot2(p: P2, theta: f64) -> P2 {
    let (s, c) = theta.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Four CCW corners of an object's horizontal projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub corners: [P2; 4],
}

impl Footprint {
    pub fn area(&self) -> f64 {
        polygon_area(&self.corners)
    }

    pub fn aabb(&self) -> (P2, P2) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for c in &self.corners {
            for a in 0..2 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        (lo, hi)
    }

    pub fn contains(&self, p: P2) -> bool {
        // CCW convex polygon: inside iff left of (or on) every edge.
        for i in 0..4 {
            let a = self.corners[i];
            let b = self.corners[(i + 1) % 4];
            let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            if cross < 0.0 {
                return false;
            }
        }
        true
    }
}

/// Horizontal footprint of a non-EMPTY object.
pub fn footprint(obj: &ObjectInstance, cfg: &SceneConfig) -> Result<Footprint> {
    if obj.is_empty(cfg) {
        return Err(Error::DegenerateInput("footprint of EMPTY object".into()));
    }
    Ok(footprint_unchecked(obj))
}

pub(crate) fn footprint_unchecked(obj: &ObjectInstance) -> Footprint {
    let hw = obj.size[0] / 2.0;
    let hd = obj.size[2] / 2.0;
    let local = [[hw, hd], [-hw, hd], [-hw, -hd], [hw, -hd]];
    let mut corners = [[0.0; 2]; 4];
    for (i, l) in local.iter().enumerate() {
        let r = rot2(*l, obj.yaw);
        corners[i] = [obj.location[0] + r[0], obj.location[2] + r[1]];
    }
    Footprint { corners }
}

pub fn polygon_area(poly: &[P2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clip of a convex subject polygon against a convex CCW
/// clip polygon.
pub fn clip_convex(subject: &[P2], clip: &[P2]) -> Vec<P2> {
    let mut out: Vec<P2> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut out);
        let inside = |p: P2| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        let intersect = |p: P2, q: P2| -> P2 {
            let dx = b[0] - a[0];
            let dz = b[1] - a[1];
            let t_num = dx * (a[1] - p[1]) - dz * (a[0] - p[0]);
            let t_den = dx * (p[1] - q[1]) - dz * (p[0] - q[0]);
            let t = -t_num / t_den;
            [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
        };
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            match (inside(p), inside(q)) {
                (true, true) => out.push(q),
                (true, false) => out.push(intersect(p, q)),
                (false, true) => {
                    out.push(intersect(p, q));
                    out.push(q);
                }
                (false, false) => {}
            }
        }
    }
    out
}

/// Intersection area of two object footprints.
pub fn footprint_intersection_area(a: &Footprint, b: &Footprint) -> f64 {
    polygon_area(&clip_convex(&a.corners, &b.corners))
}

/// Overlap length of the vertical extents of two boxes.
pub fn vertical_overlap(a: &ObjectInstance, b: &ObjectInstance) -> f64 {
    let (a_lo, a_hi) = (a.location[1] - a.size[1] / 2.0, a.location[1] + a.size[1] / 2.0);
    let (b_lo, b_hi) = (b.location[1] - b.size[1] / 2.0, b.location[1] + b.size[1] / 2.0);
    (a_hi.min(b_hi) - a_lo.max(b_lo)).max(0.0)
}

/// 3D IoU of two yaw-oriented boxes.
pub fn iou3d(a: &ObjectInstance, b: &ObjectInstance) -> Result<f64> {
    if a.volume() <= 0.0 || b.volume() <= 0.0 {
        return Err(Error::DegenerateInput("zero-volume box in iou3d".into()));
    }
    let fa = footprint_unchecked(a);
    let fb = footprint_unchecked(b);
    let inter = footprint_intersection_area(&fa, &fb) * vertical_overlap(a, b);
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Signed distance from a 2D point to an oriented rectangle boundary
/// (negative inside), computed in the rectangle's local frame.
pub fn sdf2d(p: P2, obj: &ObjectInstance) -> f64 {
    let rel = [p[0] - obj.location[0], p[1] - obj.location[2]];
    let q = rot2(rel, -obj.yaw);
    let hx = obj.size[0] / 2.0;
    let hz = obj.size[2] / 2.0;
    let ax = q[0].abs() - hx;
    let az = q[1].abs() - hz;
    let gx = ax.max(0.0);
    let gz = az.max(0.0);
    (gx * gx + gz * gz).sqrt() + ax.max(az).min(0.0)
}

/// Gradient of `sdf2d` with respect to the object's (x, z, yaw). Piecewise
/// smooth away from the medial axis; adequate for guidance gradients.
pub fn sdf2d_grad(p: P2, obj: &ObjectInstance) -> [f64; 3] {
    let rel = [p[0] - obj.location[0], p[1] - obj.location[2]];
    let q = rot2(rel, -obj.yaw);
    let hx = obj.size[0] / 2.0;
    let hz = obj.size[2] / 2.0;
    let ax = q[0].abs() - hx;
    let az = q[1].abs() - hz;
    // d(sdf)/dq in local frame
    let dq = if ax > 0.0 || az > 0.0 {
        let gx = ax.max(0.0);
        let gz = az.max(0.0);
        let n = (gx * gx + gz * gz).sqrt().max(1e-12);
        [q[0].signum() * gx / n, q[1].signum() * gz / n]
    } else if ax >= az {
        [q[0].signum(), 0.0]
    } else {
        [0.0, q[1].signum()]
    };
    // q = R(-yaw) (p - c):   dq/dc = -R(-yaw),   dq/dyaw = R'(-yaw)*(-1)*(p-c)
    let d_world = rot2(dq, obj.yaw);
    let (s, c) = obj.yaw.sin_cos();
    // derivative of R(-yaw) wrt yaw applied to rel
    let dq_dyaw = [-s * rel[0] + c * rel[1], -c * rel[0] - s * rel[1]];
    let dyaw = dq[0] * dq_dyaw[0] + dq[1] * dq_dyaw[1];
    [-d_world[0], -d_world[1], dyaw]
}

/// Signed distance from a 3D point to a single oriented box.
pub fn sdf_point_box(p: [f64; 3], obj: &ObjectInstance) -> f64 {
    let rel2 = rot2(
        [p[0] - obj.location[0], p[2] - obj.location[2]],
        -obj.yaw,
    );
    let q = [
        rel2[0].abs() - obj.size[0] / 2.0,
        (p[1] - obj.location[1]).abs() - obj.size[1] / 2.0,
        rel2[1].abs() - obj.size[2] / 2.0,
    ];
    let out = (q[0].max(0.0).powi(2) + q[1].max(0.0).powi(2) + q[2].max(0.0).powi(2)).sqrt();
    out + q[0].max(q[1]).max(q[2]).min(0.0)
}

/// Signed distance from a point to the nearest non-EMPTY box in the scene.
pub fn sdf_point_scene(p: [f64; 3], scene: &Scene, cfg: &SceneConfig) -> Result<f64> {
    let mut best = f64::INFINITY;
    let mut any = false;
    for obj in scene.non_empty(cfg) {
        any = true;
        best = best.min(sdf_point_box(p, obj));
    }
    if !any {
        return Err(Error::DegenerateInput("sdf over all-EMPTY scene".into()));
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RasterMode {
    Hard,
    /// Sigmoid ramp of the given temperature (meters) around the footprint
    /// boundary; differentiable with respect to location/yaw/size.
    Soft(f64),
}

/// Rasterize an object's footprint onto the full 256x256 grid geometry.
pub fn rasterize(obj: &ObjectInstance, world_extent: f64, mode: RasterMode) -> Result<Vec<f64>> {
    if obj.size[0] <= 0.0 || obj.size[2] <= 0.0 {
        return Err(Error::DegenerateInput("rasterize of degenerate object".into()));
    }
    if let RasterMode::Soft(tau) = mode {
        if tau <= 0.0 {
            return Err(Error::Config("soft raster temperature must be > 0".into()));
        }
    }
    let grid = GridMask::zeros(world_extent);
    let mut out = vec![0.0; GRID_RES * GRID_RES];
    let fp = footprint_unchecked(obj);
    for (row, col) in raster_window(&fp, world_extent, raster_margin(mode, &grid)) {
        let (x, z) = grid.pixel_center(row, col);
        let v = match mode {
            RasterMode::Hard => {
                if fp.contains([x, z]) {
                    1.0
                } else {
                    0.0
                }
            }
            RasterMode::Soft(tau) => sigmoid(-sdf2d([x, z], obj) / tau),
        };
        out[row * GRID_RES + col] = v;
    }
    Ok(out)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn raster_margin(mode: RasterMode, grid: &GridMask) -> f64 {
    match mode {
        RasterMode::Hard => grid.pixel_size(),
        // beyond ~20 tau the sigmoid tail is < 2e-9
        RasterMode::Soft(tau) => 20.0 * tau + grid.pixel_size(),
    }
}

/// Pixel window covering a footprint's AABB expanded by `margin` meters.
pub(crate) fn raster_window(
    fp: &Footprint,
    world_extent: f64,
    margin: f64,
) -> impl Iterator<Item = (usize, usize)> {
    let (lo, hi) = fp.aabb();
    let half = world_extent / 2.0;
    let px = world_extent / GRID_RES as f64;
    let clampi = move |v: f64| -> isize { ((v + half) / px).floor() as isize };
    let c0 = clampi(lo[0] - margin).max(0) as usize;
    let c1 = (clampi(hi[0] + margin) + 1).clamp(0, GRID_RES as isize) as usize;
    let r0 = clampi(lo[1] - margin).max(0) as usize;
    let r1 = (clampi(hi[1] + margin) + 1).clamp(0, GRID_RES as isize) as usize;
    (r0..r1).flat_map(move |r| (c0..c1).map(move |c| (r, c)))
}

/// Greedy farthest-point sampling over the centers of free pixels, seeded by
/// the lexicographically first free pixel. Points are lifted to y = 0. When
/// fewer than `n` free pixels exist the selection cycles (sampling with
/// replacement).
pub fn farthest_point_sample(free: &GridMask, n: usize) -> Result<Vec<[f64; 3]>> {
    let mut candidates: Vec<(f64, f64)> = Vec::new();
    for row in 0..GRID_RES {
        for col in 0..GRID_RES {
            if free.get(row, col) != 0 {
                candidates.push(free.pixel_center(row, col));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::DegenerateInput(
            "free-space region is empty; floor plan unusable".into(),
        ));
    }
    let m = candidates.len();
    let mut selected: Vec<usize> = Vec::with_capacity(n.min(m));
    let mut dist = vec![f64::INFINITY; m];
    let mut current = 0usize; // lexicographically first free pixel
    selected.push(current);
    while selected.len() < n.min(m) {
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        let (cx, cz) = candidates[current];
        for (i, &(x, z)) in candidates.iter().enumerate() {
            let d = (x - cx).powi(2) + (z - cz).powi(2);
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best_d {
                best_d = dist[i];
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    let mut out: Vec<[f64; 3]> = Vec::with_capacity(n);
    for i in 0..n {
        let (x, z) = candidates[selected[i % selected.len()]];
        out.push([x, 0.0, z]);
    }
    Ok(out)
}
