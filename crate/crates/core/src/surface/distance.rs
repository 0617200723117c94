use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::mesh::TriangleMesh;
use crate::error::{Error, Result};

pub const DEFAULT_METRIC_SAMPLES: usize = 10_000;
const METRIC_SEED: u64 = 0x5eed;
const LEAF_SIZE: usize = 4;

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Point3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

pub fn point_triangle_distance(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> f64 {
    (p - closest_point_on_triangle(p, a, b, c)).norm()
}

#[derive(Debug, Clone)]
struct Node {
    min: Point3<f64>,
    max: Point3<f64>,
    // leaf: triangles [start, start + count); inner: children at `start` and `start + 1` in `nodes`
    start: usize,
    count: usize,
}

impl Node {
    fn distance_sq(&self, p: &Point3<f64>) -> f64 {
        let d = Vector3::from_fn(|i, _| (self.min[i] - p[i]).max(0.0).max(p[i] - self.max[i]));
        d.norm_squared()
    }
}

/// Bounding-volume hierarchy over a mesh for exact nearest-surface queries.
#[derive(Debug, Clone)]
pub struct MeshBvh {
    tris: Vec<[Point3<f64>; 3]>,
    nodes: Vec<Node>,
}

impl MeshBvh {
    pub fn new(mesh: &TriangleMesh) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::Mesh("distance query against an empty mesh".into()));
        }
        let mut tris: Vec<[Point3<f64>; 3]> =
            (0..mesh.triangles.len()).map(|t| mesh.corners(t)).collect();
        let mut nodes = vec![Node {
            min: Point3::origin(),
            max: Point3::origin(),
            start: 0,
            count: tris.len(),
        }];
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let (start, count) = (nodes[n].start, nodes[n].count);
            let slice = &mut tris[start..start + count];
            let (mut lo, mut hi) = (
                Point3::from([f64::INFINITY; 3]),
                Point3::from([f64::NEG_INFINITY; 3]),
            );
            for t in slice.iter() {
                for v in t {
                    lo = lo.inf(v);
                    hi = hi.sup(v);
                }
            }
            nodes[n].min = lo;
            nodes[n].max = hi;
            if count <= LEAF_SIZE {
                continue;
            }
            let axis = (hi - lo).imax();
            let centroid = |t: &[Point3<f64>; 3]| t[0][axis] + t[1][axis] + t[2][axis];
            let mid = count / 2;
            slice.select_nth_unstable_by(mid, |a, b| centroid(a).total_cmp(&centroid(b)));
            let child = nodes.len();
            nodes.push(Node {
                min: lo,
                max: hi,
                start,
                count: mid,
            });
            nodes.push(Node {
                min: lo,
                max: hi,
                start: start + mid,
                count: count - mid,
            });
            nodes[n].start = child;
            nodes[n].count = 0;
            stack.push(child);
            stack.push(child + 1);
        }
        Ok(Self { tris, nodes })
    }

    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.distance_sq(p) >= best * best {
                continue;
            }
            if node.count > 0 {
                for t in &self.tris[node.start..node.start + node.count] {
                    best = best.min(point_triangle_distance(p, &t[0], &t[1], &t[2]));
                }
            } else {
                let (a, b) = (node.start, node.start + 1);
                let (da, db) = (self.nodes[a].distance_sq(p), self.nodes[b].distance_sq(p));
                // visit the nearer child first
                if da < db {
                    stack.push(b);
                    stack.push(a);
                } else {
                    stack.push(a);
                    stack.push(b);
                }
            }
        }
        best
    }

    pub fn brute_force_distance(&self, p: &Point3<f64>) -> f64 {
        self.tris
            .iter()
            .map(|t| point_triangle_distance(p, &t[0], &t[1], &t[2]))
            .fold(f64::INFINITY, f64::min)
    }

    fn mean_distance(&self, points: &[Point3<f64>]) -> f64 {
        let d: Vec<f64> = points.par_iter().map(|p| self.distance(p)).collect();
        d.iter().sum::<f64>() / d.len() as f64
    }
}

/// Mean exact distance from `points` to `target`, in centimetres.
pub fn point_to_surface(points: &[Point3<f64>], target: &TriangleMesh) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Mesh("no query points".into()));
    }
    Ok(100.0 * MeshBvh::new(target)?.mean_distance(points))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceMetrics {
    pub p2s_cm: f64,
    pub chamfer_cm: f64,
}

impl std::fmt::Display for SurfaceMetrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "p2s_cm={:.6} chamfer_cm={:.6}",
            self.p2s_cm, self.chamfer_cm
        )
    }
}

/// P2S is the recon-to-gt mean over area-weighted recon samples; chamfer
/// averages both directed means. Sampling uses a fixed seed.
pub fn chamfer(
    recon: &TriangleMesh,
    gt: &TriangleMesh,
    samples_per_side: usize,
) -> Result<SurfaceMetrics> {
    if recon.is_empty() || gt.is_empty() {
        return Err(Error::Mesh("chamfer needs two non-empty meshes".into()));
    }
    if samples_per_side == 0 {
        return Err(Error::Config("samples_per_side must be > 0".into()));
    }
    let sample = |m: &TriangleMesh| {
        m.sample_surface(
            samples_per_side,
            &mut ChaCha8Rng::seed_from_u64(METRIC_SEED),
        )
    };
    let (rs, gs) = (sample(recon)?, sample(gt)?);
    let to_gt = point_to_surface(&rs, gt)?;
    let to_recon = point_to_surface(&gs, recon)?;
    Ok(SurfaceMetrics {
        p2s_cm: to_gt,
        chamfer_cm: 0.5 * (to_gt + to_recon),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::{evaluate_field, marching_cubes, OracleField, ReconGrid};
    use crate::synth::{Primitive, SdfScene};
    use proptest::prelude::*;
    use rand::Rng;

    fn square(z: f64) -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Point3::new(0.0, 0.0, z),
                Point3::new(1.0, 0.0, z),
                Point3::new(1.0, 1.0, z),
                Point3::new(0.0, 1.0, z),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    fn sphere_mesh(r: f64, n: usize) -> TriangleMesh {
        let c = Point3::new(0.0, 0.0, 2.0);
        let scene = SdfScene::new(vec![Primitive::Sphere {
            center: c,
            radius: r,
        }])
        .unwrap();
        let grid =
            ReconGrid::new(c - Vector3::repeat(0.8), c + Vector3::repeat(0.8), [n; 3]).unwrap();
        marching_cubes(&evaluate_field(&OracleField(&scene), &grid), 0.5)
    }

    #[test]
    fn plane_offset() {
        let pts: Vec<_> = (0..25)
            .map(|i| Point3::new((i % 5) as f64 / 4.0, (i / 5) as f64 / 4.0, 3.0))
            .collect();
        assert!((point_to_surface(&pts, &square(2.0)).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn points_on_target_are_at_zero() {
        let m = sphere_mesh(0.5, 24);
        let pts = m
            .sample_surface(500, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert!(point_to_surface(&pts, &m).unwrap() < 1e-9);
    }

    #[test]
    fn concentric_spheres() {
        let inner = sphere_mesh(0.5, 48);
        let outer = sphere_mesh(0.6, 48);
        let d = point_to_surface(&inner.vertices, &outer).unwrap();
        // both meshes sit within half a cell diagonal of their spheres
        let tol = 100.0 * (1.6 / 47.0) * 3f64.sqrt();
        assert!((d - 10.0).abs() <= tol, "{d}");
    }

    #[test]
    fn chamfer_identity_symmetry_translation() {
        let a = square(2.0);
        let m = chamfer(&a, &a, 2000).unwrap();
        assert!(m.p2s_cm.abs() < 1e-9 && m.chamfer_cm.abs() < 1e-9);
        let b = a.transformed(1.0, &Vector3::new(0.0, 0.0, 0.03));
        let ab = chamfer(&a, &b, 2000).unwrap();
        let ba = chamfer(&b, &a, 2000).unwrap();
        assert!((ab.chamfer_cm - ba.chamfer_cm).abs() <= 1e-12);
        assert!((ab.p2s_cm - 3.0).abs() < 1e-9 && (ab.chamfer_cm - 3.0).abs() < 1e-9);
        assert!(chamfer(&a, &TriangleMesh::default(), 10).is_err());
    }

    #[test]
    fn metrics_scale_linearly() {
        let a = sphere_mesh(0.4, 16);
        let b = sphere_mesh(0.45, 20);
        let m = chamfer(&a, &b, 3000).unwrap();
        let z = Vector3::zeros();
        let ms = chamfer(&a.transformed(2.0, &z), &b.transformed(2.0, &z), 3000).unwrap();
        assert!((ms.chamfer_cm - 2.0 * m.chamfer_cm).abs() < 1e-9 * m.chamfer_cm.max(1.0));
        assert!(m.chamfer_cm >= 0.0);
        assert_eq!(format!("{m}").split(' ').count(), 2);
    }

    #[test]
    fn bvh_matches_brute_force() {
        let m = sphere_mesh(0.5, 20);
        let bvh = MeshBvh::new(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p = Point3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.0..3.0),
            );
            assert!((bvh.distance(&p) - bvh.brute_force_distance(&p)).abs() <= 1e-9);
        }
    }

    proptest! {
        #[test]
        fn closest_point_is_not_beaten_by_samples(
            p in prop::array::uniform3(-2.0f64..2.0),
            q in prop::array::uniform9(-1.0f64..1.0),
            u in 0.0f64..1.0, v in 0.0f64..1.0,
        ) {
            let (a, b, c) = (Point3::new(q[0], q[1], q[2]), Point3::new(q[3], q[4], q[5]), Point3::new(q[6], q[7], q[8]));
            let p = Point3::from(p);
            let (u, v) = if u + v > 1.0 { (1.0 - u, 1.0 - v) } else { (u, v) };
            let s = a + (b - a) * u + (c - a) * v;
            let d = point_triangle_distance(&p, &a, &b, &c);
            prop_assert!(d <= (p - s).norm() + 1e-9);
        }
    }
}
