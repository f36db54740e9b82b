//! Planar triangular surface meshes, their refinement and text serialisation,
//! and the uniform time grid completing the tensor-product space-time mesh.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::MeshError;
use crate::scalar::{cross, norm, scale, sub, Real, Vec3};

/// Closed (or open, when loaded from file) triangulated surface.
///
/// Triangles are stored counter-clockwise when viewed from outside, so the
/// normal `(v1 - v0) x (v2 - v0)` points out of the enclosed body.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceMesh<T: Real> {
    vertices: Vec<Vec3<T>>,
    triangles: Vec<[usize; 3]>,
    areas: Vec<T>,
    normals: Vec<Vec3<T>>,
}

impl<T: Real> SurfaceMesh<T> {
    /// Builds a mesh and its per-triangle geometry. Rejects out-of-range
    /// indices, repeated vertices within a triangle and zero-area triangles.
    pub fn new(vertices: Vec<Vec3<T>>, triangles: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        if vertices.is_empty() {
            return Err(MeshError::Empty("vertices"));
        }
        if triangles.is_empty() {
            return Err(MeshError::Empty("triangles"));
        }
        let mut areas = Vec::with_capacity(triangles.len());
        let mut normals = Vec::with_capacity(triangles.len());
        for (e, tri) in triangles.iter().enumerate() {
            for &v in tri {
                if v >= vertices.len() {
                    return Err(MeshError::IndexOutOfRange {
                        element: e,
                        index: v,
                        n_vertices: vertices.len(),
                    });
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(MeshError::Degenerate(e));
            }
            let a = sub(&vertices[tri[1]], &vertices[tri[0]]);
            let b = sub(&vertices[tri[2]], &vertices[tri[0]]);
            let c = cross(&a, &b);
            let len = norm(&c);
            if !(len > T::zero()) {
                return Err(MeshError::Degenerate(e));
            }
            areas.push(len * T::lit(0.5));
            normals.push(scale(&c, T::one() / len));
        }
        Ok(Self {
            vertices,
            triangles,
            areas,
            normals,
        })
    }

    pub fn vertices(&self) -> &[Vec3<T>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn areas(&self) -> &[T] {
        &self.areas
    }

    pub fn normals(&self) -> &[Vec3<T>] {
        &self.normals
    }

    /// Number of nodes, `N_x`.
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Number of triangles, `E_x`.
    pub fn n_elements(&self) -> usize {
        self.triangles.len()
    }

    pub fn area(&self, e: usize) -> T {
        self.areas[e]
    }

    pub fn normal(&self, e: usize) -> Vec3<T> {
        self.normals[e]
    }

    pub fn triangle_vertices(&self, e: usize) -> [Vec3<T>; 3] {
        let t = self.triangles[e];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    pub fn total_area(&self) -> T {
        self.areas.iter().copied().sum()
    }

    pub fn centroid(&self, e: usize) -> Vec3<T> {
        let [a, b, c] = self.triangle_vertices(e);
        let third = T::one() / T::lit(3.0);
        [
            (a[0] + b[0] + c[0]) * third,
            (a[1] + b[1] + c[1]) * third,
            (a[2] + b[2] + c[2]) * third,
        ]
    }

    /// Longest edge of triangle `e`.
    pub fn element_diameter(&self, e: usize) -> T {
        let [a, b, c] = self.triangle_vertices(e);
        norm(&sub(&a, &b))
            .max(norm(&sub(&b, &c)))
            .max(norm(&sub(&c, &a)))
    }

    /// Diagonal of the axis-aligned bounding box.
    pub fn diameter(&self) -> T {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        norm(&sub(&hi, &lo))
    }

    /// Maps reference coordinates `(u, v)` of the unit triangle onto element `e`.
    #[inline]
    pub fn map_reference(&self, e: usize, u: T, v: T) -> Vec3<T> {
        let [a, b, c] = self.triangle_vertices(e);
        [
            a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
            a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
            a[2] + u * (b[2] - a[2]) + v * (c[2] - a[2]),
        ]
    }

    /// Counts how many triangles use each undirected edge.
    fn edge_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::with_capacity(self.triangles.len() * 3 / 2);
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// True when every edge is shared by exactly two triangles.
    pub fn is_closed_manifold(&self) -> bool {
        self.edge_counts().values().all(|&c| c == 2)
    }

    /// Splits every triangle into four congruent children through its edge
    /// midpoints. Parent vertices keep their indices; midpoints are appended
    /// and deduplicated by the (sorted) pair of parent vertex indices.
    pub fn refine(&self) -> Result<Self, MeshError> {
        if !self.is_closed_manifold() {
            return Err(MeshError::NonManifold);
        }
        let mut vertices = self.vertices.clone();
        let mut midpoints: HashMap<(usize, usize), usize> =
            HashMap::with_capacity(self.triangles.len() * 3 / 2);
        let half = T::lit(0.5);
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vec3<T>>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let (p, q) = (vertices[key.0], vertices[key.1]);
                vertices.push([
                    (p[0] + q[0]) * half,
                    (p[1] + q[1]) * half,
                    (p[2] + q[2]) * half,
                ]);
                vertices.len() - 1
            })
        };
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        for &[a, b, c] in &self.triangles {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            triangles.push([a, ab, ca]);
            triangles.push([ab, b, bc]);
            triangles.push([ca, bc, c]);
            triangles.push([ab, bc, ca]);
        }
        Self::new(vertices, triangles)
    }

    /// Writes the `heatbem-mesh 1` text format.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(64 * (self.vertices.len() + self.triangles.len()));
        out.push_str("heatbem-mesh 1\n");
        let _ = writeln!(out, "vertices {}", self.vertices.len());
        for v in &self.vertices {
            let _ = writeln!(out, "{} {} {}", v[0], v[1], v[2]);
        }
        let _ = writeln!(out, "triangles {}", self.triangles.len());
        for t in &self.triangles {
            let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
        }
        out
    }

    /// Parses the `heatbem-mesh 1` text format.
    pub fn from_text(text: &str) -> Result<LoadedMesh<T>, MeshError> {
        let mut lines = text
            .split('\n')
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim_start().starts_with('#') && !l.trim().is_empty());

        let parse_err = |line: usize, msg: &str| MeshError::Parse {
            line,
            message: msg.to_string(),
        };

        let (ln, header) = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
        if header.trim() != "heatbem-mesh 1" {
            return Err(parse_err(ln, "expected header `heatbem-mesh 1`"));
        }
        let count = |ln: usize, line: &str, keyword: &str| -> Result<usize, MeshError> {
            let mut it = line.split_whitespace();
            if it.next() != Some(keyword) {
                return Err(parse_err(ln, &format!("expected `{keyword} <count>`")));
            }
            let n = it
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| parse_err(ln, &format!("invalid {keyword} count")))?;
            if it.next().is_some() {
                return Err(parse_err(ln, "trailing tokens"));
            }
            Ok(n)
        };

        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(ln + 1, "missing vertices section"))?;
        let n_vertices = count(ln, line, "vertices")?;
        if n_vertices == 0 {
            return Err(parse_err(ln, "empty vertex section"));
        }
        let mut last = ln;
        let mut vertices = Vec::with_capacity(n_vertices);
        for _ in 0..n_vertices {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| parse_err(last + 1, "unexpected end of vertex section"))?;
            last = ln;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| parse_err(ln, "invalid vertex coordinate"))?;
            if vals.len() != 3 {
                return Err(parse_err(ln, "expected three coordinates"));
            }
            vertices.push([T::lit(vals[0]), T::lit(vals[1]), T::lit(vals[2])]);
        }

        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(last + 1, "missing triangles section"))?;
        let n_triangles = count(ln, line, "triangles")?;
        last = ln;
        let mut triangles = Vec::with_capacity(n_triangles);
        for _ in 0..n_triangles {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| parse_err(last + 1, "unexpected end of triangle section"))?;
            last = ln;
            let idx: Vec<usize> = line
                .split_whitespace()
                .map(|s| s.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| parse_err(ln, "invalid triangle index"))?;
            if idx.len() != 3 {
                return Err(parse_err(ln, "expected three indices"));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= n_vertices) {
                return Err(MeshError::IndexOutOfRangeAt {
                    line: ln,
                    index: bad,
                    n_vertices,
                });
            }
            triangles.push([idx[0], idx[1], idx[2]]);
        }
        if let Some((ln, _)) = lines.next() {
            return Err(parse_err(ln, "unexpected content after triangle section"));
        }
        let mesh = Self::new(vertices, triangles)?;
        let non_manifold = !mesh.is_closed_manifold();
        Ok(LoadedMesh { mesh, non_manifold })
    }
}

/// Result of reading a mesh file. Open or non-manifold surfaces load but are
/// flagged; refinement and assembly expect closed meshes.
#[derive(Clone, Debug)]
pub struct LoadedMesh<T: Real> {
    pub mesh: SurfaceMesh<T>,
    pub non_manifold: bool,
}

pub fn save_mesh<T: Real>(mesh: &SurfaceMesh<T>, path: impl AsRef<Path>) -> Result<(), MeshError> {
    std::fs::write(path, mesh.to_text())?;
    Ok(())
}

pub fn load_mesh<T: Real>(path: impl AsRef<Path>) -> Result<LoadedMesh<T>, MeshError> {
    let text = std::fs::read_to_string(path)?;
    SurfaceMesh::from_text(&text)
}

/// Surface of the cube `[-w, w]^3` with `n x n` squares per face, each split
/// into two triangles along the same diagonal: `12 n^2` triangles and
/// `6 n^2 + 2` vertices.
pub fn generate_cube_surface<T: Real>(
    subdivisions_per_edge: usize,
    half_width: T,
) -> Result<SurfaceMesh<T>, MeshError> {
    let n = subdivisions_per_edge;
    if n == 0 {
        return Err(MeshError::InvalidParameter(
            "subdivisions_per_edge must be at least 1".into(),
        ));
    }
    if !(half_width > T::zero()) {
        return Err(MeshError::InvalidParameter(
            "half_width must be positive".into(),
        ));
    }
    // (fixed axis, fixed lattice value, u axis, v axis), with u x v outward.
    let faces: [(usize, usize, usize, usize); 6] = [
        (0, 0, 2, 1),
        (0, n, 1, 2),
        (1, 0, 0, 2),
        (1, n, 2, 0),
        (2, 0, 1, 0),
        (2, n, 0, 1),
    ];
    let coord = |i: usize| -> T {
        -half_width + T::lit(2.0) * half_width * T::from_usize_lossy(i) / T::from_usize_lossy(n)
    };
    let mut index: HashMap<[usize; 3], usize> = HashMap::new();
    let mut vertices = Vec::with_capacity(6 * n * n + 2);
    let mut triangles = Vec::with_capacity(12 * n * n);
    for &(fixed, value, ua, va) in &faces {
        let mut node = |i: usize, j: usize| -> usize {
            let mut key = [0usize; 3];
            key[fixed] = value;
            key[ua] = i;
            key[va] = j;
            *index.entry(key).or_insert_with(|| {
                vertices.push([coord(key[0]), coord(key[1]), coord(key[2])]);
                vertices.len() - 1
            })
        };
        for i in 0..n {
            for j in 0..n {
                let p00 = node(i, j);
                let p10 = node(i + 1, j);
                let p11 = node(i + 1, j + 1);
                let p01 = node(i, j + 1);
                triangles.push([p00, p10, p11]);
                triangles.push([p00, p11, p01]);
            }
        }
    }
    SurfaceMesh::new(vertices, triangles)
}

/// Uniform partition of `(0, T)` into `E_t` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid<T: Real> {
    end_time: T,
    n_steps: usize,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(end_time: T, n_steps: usize) -> Result<Self, MeshError> {
        if !(end_time > T::zero()) || n_steps == 0 {
            return Err(MeshError::InvalidParameter(
                "time grid needs end_time > 0 and at least one step".into(),
            ));
        }
        Ok(Self { end_time, n_steps })
    }

    pub fn end_time(&self) -> T {
        self.end_time
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// `h_t = T / E_t`.
    pub fn step(&self) -> T {
        self.end_time / T::from_usize_lossy(self.n_steps)
    }

    /// `t_i = i h_t`.
    pub fn node(&self, i: usize) -> T {
        T::from_usize_lossy(i) * self.step()
    }

    /// Bisects every step.
    pub fn refine(&self) -> Self {
        Self {
            end_time: self.end_time,
            n_steps: 2 * self.n_steps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::dot;

    fn cube(n: usize) -> SurfaceMesh<f64> {
        generate_cube_surface(n, 1.0).unwrap()
    }

    #[test]
    fn cube_counts() {
        let m = cube(4);
        assert_eq!(m.n_elements(), 192);
        assert_eq!(m.n_vertices(), 6 * 16 + 2);
        let m1 = cube(1);
        assert_eq!(m1.n_elements(), 12);
        assert_eq!(m1.n_vertices(), 8);
    }

    #[test]
    fn cube_area_and_element_areas() {
        for n in 1..6 {
            let w = 0.75;
            let m = generate_cube_surface(n, w).unwrap();
            let expected = (2.0 * w) * (2.0 * w) / (2.0 * (n * n) as f64);
            for &a in m.areas() {
                assert!((a - expected).abs() < 1e-13);
            }
        }
        assert!((cube(4).total_area() - 24.0).abs() < 1e-12);
    }

    #[test]
    fn cube_normals_point_outward() {
        let m = cube(3);
        for e in 0..m.n_elements() {
            let n = m.normal(e);
            assert!((dot(&n, &n).sqrt() - 1.0).abs() < 1e-14);
            assert!(dot(&n, &m.centroid(e)) > 0.0);
        }
        assert!(m.is_closed_manifold());
    }

    #[test]
    fn refine_quadrisects_and_keeps_vertices() {
        let m = cube(4);
        let r = m.refine().unwrap();
        assert_eq!(r.n_elements(), 768);
        assert_eq!(&r.vertices()[..m.n_vertices()], m.vertices());
        assert!(((r.total_area() - m.total_area()) / m.total_area()).abs() < 1e-13);
        for e in 0..m.n_elements() {
            let children: f64 = (0..4).map(|k| r.area(4 * e + k)).sum();
            assert!((children - m.area(e)).abs() < 1e-13 * m.area(e));
            for k in 0..4 {
                assert_eq!(r.normal(4 * e + k), m.normal(e));
            }
        }
        assert!(r.is_closed_manifold());
        let twice = cube(1).refine().unwrap().refine().unwrap();
        assert_eq!(twice.n_elements(), 192);
        assert_eq!(twice.n_vertices(), 98);
    }

    #[test]
    fn refine_rejects_open_surface() {
        let m = SurfaceMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(matches!(m.refine(), Err(MeshError::NonManifold)));
    }

    #[test]
    fn text_round_trip_is_exact() {
        let m = generate_cube_surface(3, 0.3).unwrap().refine().unwrap();
        let back = SurfaceMesh::<f64>::from_text(&m.to_text()).unwrap();
        assert!(!back.non_manifold);
        assert_eq!(back.mesh.vertices(), m.vertices());
        assert_eq!(back.mesh.triangles(), m.triangles());
    }

    #[test]
    fn text_errors() {
        let bad_index = "heatbem-mesh 1\nvertices 3\n0 0 0\n1 0 0\n0 1 0\ntriangles 1\n0 1 3\n";
        match SurfaceMesh::<f64>::from_text(bad_index) {
            Err(e @ MeshError::IndexOutOfRangeAt { line: 7, .. }) => {
                assert!(e.to_string().contains("index out of range"))
            }
            other => panic!("unexpected {other:?}"),
        }
        let empty = "heatbem-mesh 1\nvertices 0\ntriangles 0\n";
        assert!(matches!(
            SurfaceMesh::<f64>::from_text(empty),
            Err(MeshError::Parse { line: 2, .. })
        ));
        let garbage = "heatbem-mesh 1\n# comment\nvertices 1\n0 x 0\n";
        assert!(matches!(
            SurfaceMesh::<f64>::from_text(garbage),
            Err(MeshError::Parse { line: 4, .. })
        ));
        let open = "heatbem-mesh 1\nvertices 3\n0 0 0\n1 0 0\n0 1 0\ntriangles 1\n0 1 2\n";
        assert!(SurfaceMesh::<f64>::from_text(open).unwrap().non_manifold);
    }

    #[test]
    fn time_grid() {
        let g = TimeGrid::<f64>::new(1.0, 8).unwrap();
        assert_eq!(g.step(), 0.125);
        assert_eq!(g.node(3), 0.375);
        assert!((g.step() * 8.0 - 1.0).abs() <= 1e-15);
        assert_eq!(g.refine().n_steps(), 16);
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }
}
