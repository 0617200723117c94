use std::collections::HashMap;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use super::mesh::TriangleMesh;
use super::tables::{EDGE_TABLE, TRI_TABLE};
use crate::error::{Error, Result};
use crate::synth::SdfScene;

/// Axis-aligned extraction box with per-axis node counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconGrid {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
    pub resolution: [usize; 3],
    pub iso: f64,
}

impl ReconGrid {
    pub fn new(min: Point3<f64>, max: Point3<f64>, resolution: [usize; 3]) -> Result<Self> {
        let g = Self {
            min,
            max,
            resolution,
            iso: 0.5,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_iso(mut self, iso: f64) -> Self {
        self.iso = iso;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution.iter().any(|r| *r < 2) {
            return Err(Error::Config(format!(
                "grid resolution {:?} needs >= 2 per axis",
                self.resolution
            )));
        }
        if (0..3).any(|i| !(self.max[i] > self.min[i])) {
            return Err(Error::Config("grid box must have positive extent".into()));
        }
        if !(self.min.z > 0.0) {
            return Err(Error::Config(
                "grid box must lie in front of the camera (z > 0)".into(),
            ));
        }
        if !(self.iso > 0.0 && self.iso < 1.0) {
            return Err(Error::Config(format!(
                "iso level {} must lie in (0, 1)",
                self.iso
            )));
        }
        Ok(())
    }

    pub fn spacing(&self) -> Vector3<f64> {
        Vector3::from_fn(|i, _| (self.max[i] - self.min[i]) / (self.resolution[i] - 1) as f64)
    }

    /// Node positions, x fastest.
    pub fn nodes(&self) -> Vec<Point3<f64>> {
        let s = self.spacing();
        let [nx, ny, nz] = self.resolution;
        let mut out = Vec::with_capacity(nx * ny * nz);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out.push(
                        self.min + Vector3::new(i as f64 * s.x, j as f64 * s.y, k as f64 * s.z),
                    );
                }
            }
        }
        out
    }

    /// Wraps interior values (as from [`ReconGrid::nodes`]) in one zero layer on every face.
    pub fn padded(&self, interior: &[f64]) -> Lattice {
        let [nx, ny, nz] = self.resolution;
        assert_eq!(interior.len(), nx * ny * nz);
        let dims = [nx + 2, ny + 2, nz + 2];
        let mut values = vec![0.0; dims[0] * dims[1] * dims[2]];
        for k in 0..nz {
            for j in 0..ny {
                let src = nx * (j + ny * k);
                let dst = 1 + dims[0] * (j + 1 + dims[1] * (k + 1));
                values[dst..dst + nx].copy_from_slice(&interior[src..src + nx]);
            }
        }
        Lattice {
            dims,
            origin: self.min - self.spacing(),
            spacing: self.spacing(),
            values,
        }
    }
}

/// Scalar samples on a regular grid, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub dims: [usize; 3],
    pub origin: Point3<f64>,
    pub spacing: Vector3<f64>,
    pub values: Vec<f64>,
}

impl Lattice {
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.idx(i, j, k)]
    }

    pub fn position(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        self.origin
            + self
                .spacing
                .component_mul(&Vector3::new(i as f64, j as f64, k as f64))
    }
}

/// A scalar occupancy field in `[0, 1]` queried in batches.
pub trait OccupancyField: Sync {
    fn occupancy(&self, points: &[Point3<f64>]) -> Vec<f64>;
}

/// Ground-truth occupancy of an SDF scene.
pub struct OracleField<'a>(pub &'a SdfScene);

impl OccupancyField for OracleField<'_> {
    fn occupancy(&self, points: &[Point3<f64>]) -> Vec<f64> {
        points
            .iter()
            .map(|p| if self.0.occupancy(p) { 1.0 } else { 0.0 })
            .collect()
    }
}

const EVAL_CHUNK: usize = 4096;

/// Dense evaluation of `field` on the grid nodes, padded with zeros.
pub fn evaluate_field(field: &dyn OccupancyField, grid: &ReconGrid) -> Lattice {
    let nodes = grid.nodes();
    let values: Vec<f64> = nodes
        .par_chunks(EVAL_CHUNK)
        .map(|c| field.occupancy(c))
        .collect::<Vec<_>>()
        .concat();
    grid.padded(&values)
}

/// High-accuracy mesh of an analytic scene: marching cubes on `−sdf` over a
/// cube enclosing the bounding sphere with `resolution` nodes per axis.
pub fn mesh_scene(scene: &SdfScene, resolution: usize) -> TriangleMesh {
    let (c, r) = scene.bounding_sphere();
    let n = resolution.max(4);
    let h = 2.0 * r / (n - 5) as f64;
    let origin = c - Vector3::repeat(r + 2.0 * h);
    let dims = [n; 3];
    let values: Vec<f64> = (0..n * n * n)
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = (idx % n, (idx / n) % n, idx / (n * n));
            -scene.sdf(&(origin + Vector3::new(i as f64, j as f64, k as f64) * h))
        })
        .collect();
    let lattice = Lattice {
        dims,
        origin,
        spacing: Vector3::repeat(h),
        values,
    };
    marching_cubes(&lattice, 0.0)
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Edge as (lower corner, upper corner, axis).
const EDGES: [(usize, usize, usize); 12] = [
    (0, 1, 0),
    (1, 2, 1),
    (3, 2, 0),
    (0, 3, 1),
    (4, 5, 0),
    (5, 6, 1),
    (7, 6, 0),
    (4, 7, 1),
    (0, 4, 2),
    (1, 5, 2),
    (2, 6, 2),
    (3, 7, 2),
];

/// Vertices keep this fraction of a cell away from lattice nodes, so no triangle
/// collapses; the smallest possible area is about 0.87 (EDGE_MARGIN h)^2.
pub const EDGE_MARGIN: f64 = 1e-3;

/// Extracts the `iso` level set; values at or above `iso` count as inside.
/// Triangles face outward (toward decreasing values).
pub fn marching_cubes(lattice: &Lattice, iso: f64) -> TriangleMesh {
    let [nx, ny, nz] = lattice.dims;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut lookup: HashMap<(usize, usize), usize> = HashMap::new();
    if nx < 2 || ny < 2 || nz < 2 {
        return TriangleMesh::default();
    }
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let node = |c: usize| {
                    let o = CORNERS[c];
                    lattice.idx(i + o[0], j + o[1], k + o[2])
                };
                let mut case = 0usize;
                for c in 0..8 {
                    if lattice.values[node(c)] < iso {
                        case |= 1 << c;
                    }
                }
                let mask = EDGE_TABLE[case];
                if mask == 0 {
                    continue;
                }
                let mut edge_vertex = [usize::MAX; 12];
                for (e, &(a, b, axis)) in EDGES.iter().enumerate() {
                    if mask & (1 << e) == 0 {
                        continue;
                    }
                    let na = node(a);
                    let (va, vb) = (lattice.values[na], lattice.values[node(b)]);
                    let t = (iso - va) / (vb - va);
                    edge_vertex[e] = *lookup.entry((na, axis)).or_insert_with(|| {
                        let oa = CORNERS[a];
                        let pa = lattice.position(i + oa[0], j + oa[1], k + oa[2]);
                        let mut p = pa;
                        p[axis] += t.clamp(EDGE_MARGIN, 1.0 - EDGE_MARGIN) * lattice.spacing[axis];
                        vertices.push(p);
                        vertices.len() - 1
                    });
                }
                for tri in TRI_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [
                        edge_vertex[tri[0] as usize],
                        edge_vertex[tri[1] as usize],
                        edge_vertex[tri[2] as usize],
                    ];
                    triangles.push(t);
                }
            }
        }
    }
    TriangleMesh {
        vertices,
        triangles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::DEGENERATE_AREA;
    use crate::synth::Primitive;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere_grid(n: usize) -> (ReconGrid, SdfScene) {
        let c = Point3::new(0.0, 0.0, 1.5);
        let grid =
            ReconGrid::new(c - Vector3::repeat(1.0), c + Vector3::repeat(1.0), [n; 3]).unwrap();
        let scene = SdfScene::new(vec![Primitive::Sphere {
            center: c,
            radius: 0.5,
        }])
        .unwrap();
        (grid, scene)
    }

    fn lattice_trilinear(l: &Lattice, p: &Point3<f64>) -> f64 {
        let q = (p - l.origin).component_div(&l.spacing);
        let base = [0, 1, 2].map(|a| (q[a].floor() as usize).min(l.dims[a] - 2));
        let f = [0, 1, 2].map(|a| q[a] - base[a] as f64);
        let mut acc = 0.0;
        for c in 0..8 {
            let o = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let w: f64 = (0..3)
                .map(|a| if o[a] == 1 { f[a] } else { 1.0 - f[a] })
                .product();
            acc += w * l.at(base[0] + o[0], base[1] + o[1], base[2] + o[2]);
        }
        acc
    }

    #[test]
    fn oracle_sphere_mesh() {
        let (grid, scene) = sphere_grid(64);
        let lat = evaluate_field(&OracleField(&scene), &grid);
        let mesh = marching_cubes(&lat, grid.iso);
        let half_diag = grid.spacing().norm() / 2.0;
        let c = Point3::new(0.0, 0.0, 1.5);
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            assert!(((v - c).norm() - 0.5).abs() <= half_diag);
        }
        assert!(mesh.is_closed());
        assert!(mesh.is_consistently_oriented());
        assert_eq!(mesh.euler_characteristic(), 2);
        assert!(mesh.signed_volume() > 0.0);
    }

    #[test]
    fn oracle_injection_is_exact() {
        let (grid, scene) = sphere_grid(9);
        let lat = evaluate_field(&OracleField(&scene), &grid);
        let nodes = grid.nodes();
        let [nx, ny, _] = grid.resolution;
        for (n, p) in nodes.iter().enumerate() {
            let (i, j, k) = (n % nx, (n / nx) % ny, n / (nx * ny));
            assert_eq!(
                lat.at(i + 1, j + 1, k + 1),
                f64::from(u8::from(scene.occupancy(p)))
            );
            assert_eq!(lat.position(i + 1, j + 1, k + 1), *p);
        }
        assert!(lat.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn uniform_lattices_give_empty_meshes() {
        let (grid, _) = sphere_grid(5);
        let zero = grid.padded(&vec![0.0; 125]);
        assert!(marching_cubes(&zero, 0.5).is_empty());
        let mut full = zero.clone();
        full.values.iter_mut().for_each(|v| *v = 1.0);
        assert!(marching_cubes(&full, 0.5).is_empty());
    }

    #[test]
    fn random_padded_lattices_are_closed_and_on_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let n = rng.random_range(2..7);
            let grid = ReconGrid::new(
                Point3::new(0.0, 0.0, 1.0),
                Point3::new(1.0, 1.0, 2.0),
                [n; 3],
            )
            .unwrap();
            let vals: Vec<f64> = (0..n * n * n).map(|_| rng.random::<f64>()).collect();
            let lat = grid.padded(&vals);
            let mesh = marching_cubes(&lat, 0.5);
            assert!(mesh.is_closed(), "open mesh for n = {n}");
            assert!(mesh.is_consistently_oriented());
            for v in &mesh.vertices {
                assert!((lattice_trilinear(&lat, v) - 0.5).abs() <= EDGE_MARGIN);
            }
        }
    }

    #[test]
    fn near_iso_nodes_stay_closed_without_slivers() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let levels = [0.0, 0.5, 0.5 - 1e-13, 0.5 + 1e-13, 1.0];
        for _ in 0..40 {
            let n = 11;
            let grid = ReconGrid::new(
                Point3::new(0.0, 0.0, 1.0),
                Point3::new(0.1, 0.1, 1.1),
                [n; 3],
            )
            .unwrap();
            let vals: Vec<f64> = (0..n * n * n)
                .map(|_| levels[rng.random_range(0..levels.len())])
                .collect();
            let mesh = marching_cubes(&grid.padded(&vals), 0.5);
            assert!(mesh.is_closed() && mesh.is_consistently_oriented());
            assert!((0..mesh.triangles.len()).all(|t| mesh.triangle_area(t) >= DEGENERATE_AREA));
        }
    }

    #[test]
    fn single_node_is_a_closed_octahedron() {
        let grid = ReconGrid::new(
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(1.0, 1.0, 2.0),
            [2; 3],
        )
        .unwrap();
        let mut vals = vec![0.0; 8];
        vals[0] = 1.0;
        let mesh = marching_cubes(&grid.padded(&vals), 0.5);
        assert_eq!(mesh.vertices.len(), 6);
        assert_eq!(mesh.triangles.len(), 8);
        assert_eq!(mesh.euler_characteristic(), 2);
        assert!(mesh.signed_volume() > 0.0);
    }

    #[test]
    fn analytic_scene_mesh_is_accurate() {
        let (_, scene) = sphere_grid(4);
        let mesh = mesh_scene(&scene, 96);
        let c = Point3::new(0.0, 0.0, 1.5);
        let worst = mesh
            .vertices
            .iter()
            .map(|v| ((v - c).norm() - 0.5).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "{worst}");
        assert!(mesh.is_closed() && mesh.euler_characteristic() == 2);
    }

    #[test]
    fn grid_validation() {
        let o = Point3::new(0.0, 0.0, 1.0);
        assert!(ReconGrid::new(o, o + Vector3::repeat(1.0), [1, 2, 2]).is_err());
        assert!(ReconGrid::new(Point3::new(0.0, 0.0, -1.0), o, [2; 3]).is_err());
        assert!(ReconGrid::new(o, o, [2; 3]).is_err());
    }
}
