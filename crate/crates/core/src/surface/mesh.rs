use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

/// Zero-area threshold for emitted triangles.
/// Triangles below this area (m^2) count as degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::Mesh(format!(
                "triangle {t:?} indexes past {n} vertices"
            )));
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalised normal (twice the area, right-hand winding).
    pub fn cross(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        0.5 * self.cross(t).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| self.triangle_area(t))
            .sum()
    }

    /// Signed enclosed volume; positive for outward-facing closed meshes.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|&[a, b, c]| {
                let (a, b, c) = (
                    self.vertices[a].coords,
                    self.vertices[b].coords,
                    self.vertices[c].coords,
                );
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    fn edge_counts(&self) -> HashMap<(usize, usize), (usize, usize)> {
        // (forward, backward) occurrences keyed by the sorted pair
        let mut m: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let e = m.entry((a.min(b), a.max(b))).or_default();
                if a < b {
                    e.0 += 1;
                } else {
                    e.1 += 1;
                }
            }
        }
        m
    }

    pub fn edge_count(&self) -> usize {
        self.edge_counts().len()
    }

    /// Every undirected edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        self.edge_counts().values().all(|(f, b)| f + b == 2)
    }

    /// Closed, and each edge is traversed once in each direction.
    pub fn is_consistently_oriented(&self) -> bool {
        self.edge_counts().values().all(|&(f, b)| f == 1 && b == 1)
    }

    pub fn euler_characteristic(&self) -> i64 {
        let used = {
            let mut u = vec![false; self.vertices.len()];
            self.triangles.iter().flatten().for_each(|&i| u[i] = true);
            u.iter().filter(|x| **x).count()
        };
        used as i64 - self.edge_count() as i64 + self.triangles.len() as i64
    }

    pub fn transformed(&self, scale: f64, shift: &Vector3<f64>) -> Self {
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|p| Point3::from(p.coords * scale + shift))
                .collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Area-weighted uniform samples on the surface.
    pub fn sample_surface<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<Point3<f64>>> {
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for t in 0..self.triangles.len() {
            acc += self.triangle_area(t);
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::Mesh("cannot sample a mesh with zero area".into()));
        }
        Ok((0..n)
            .map(|_| {
                let r = rng.random::<f64>() * acc;
                let t = cdf.partition_point(|c| *c <= r).min(cdf.len() - 1);
                let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                let [a, b, c] = self.corners(t);
                a + (b - a) * u + (c - a) * v
            })
            .collect())
    }

    pub fn to_obj(&self) -> String {
        let mut s = format!(
            "# triangle mesh: {} vertices, {} faces\n",
            self.vertices.len(),
            self.triangles.len()
        );
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn save_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj())?;
        Ok(())
    }

    /// Parses `v` and `f` records; polygons are fan-triangulated, other records ignored.
    pub fn parse_obj(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut vertices = Vec::new();
        let mut faces: Vec<(usize, Vec<i64>)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("");
            let mut tok = body.split_whitespace();
            match tok.next() {
                Some("v") => {
                    let c: Vec<f64> = tok
                        .take(3)
                        .map(|t| {
                            t.parse::<f64>()
                                .map_err(|e| err(line, format!("bad coordinate {t:?}: {e}")))
                        })
                        .collect::<Result<_>>()?;
                    if c.len() != 3 || c.iter().any(|x| !x.is_finite()) {
                        return Err(err(line, "vertex needs three finite coordinates".into()));
                    }
                    vertices.push(Point3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx: Vec<i64> = tok
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or("");
                            head.parse::<i64>()
                                .map_err(|_| err(line, format!("bad face index {t:?}")))
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(err(line, "face needs at least three vertices".into()));
                    }
                    faces.push((line, idx));
                }
                _ => {}
            }
        }
        let n = vertices.len() as i64;
        let mut triangles = Vec::new();
        for (line, idx) in faces {
            let resolved: Vec<usize> = idx
                .iter()
                .map(|&k| {
                    let r = if k > 0 { k - 1 } else { n + k };
                    if k == 0 || r < 0 || r >= n {
                        Err(err(line, format!("face index {k} out of range (1..={n})")))
                    } else {
                        Ok(r as usize)
                    }
                })
                .collect::<Result<_>>()?;
            for w in 1..resolved.len() - 1 {
                triangles.push([resolved[0], resolved[w], resolved[w + 1]]);
            }
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn load_obj(path: &Path) -> Result<Self> {
        Self::parse_obj(&std::fs::read_to_string(path)?, path)
    }
}
