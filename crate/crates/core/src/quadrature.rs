//! Quadrature over pairs of planar triangles.
//!
//! Separated pairs use a product of symmetric triangle rules; pairs sharing a
//! vertex, an edge, or the whole element use Duffy-type substitutions of the
//! unit 4-cube that cancel the `|x - y|` singularity (Sauter–Schwab
//! decompositions with 6, 5 and 2 subdomains).
//!
//! The reference triangle is `{(u, v) : u, v >= 0, u + v <= 1}` with the map
//! `x = v0 + u (v1 - v0) + v (v2 - v0)` and surface Jacobian `2 Delta`.

use crate::error::QuadratureError;
use crate::mesh::SurfaceMesh;
use crate::scalar::{norm, sub, Real, Vec3};

/// One-dimensional rule on `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rule1D<T: Real> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

/// Gauss–Legendre rule with `n_points` nodes shifted to `[0, 1]`; exact for
/// polynomials of degree `2 n - 1`.
pub fn gauss01<T: Real>(n_points: usize) -> Rule1D<T> {
    let n = n_points.max(1);
    let mut nodes = vec![T::zero(); n];
    let mut weights = vec![T::zero(); n];
    for i in 0..n.div_ceil(2) {
        // Newton iteration on P_n from the Tricomi initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // x is descending from ~1; map [-1, 1] -> [0, 1].
        nodes[n - 1 - i] = T::lit(0.5 * (1.0 + x));
        nodes[i] = T::lit(0.5 * (1.0 - x));
        weights[i] = T::lit(0.5 * w);
        weights[n - 1 - i] = T::lit(0.5 * w);
    }
    Rule1D { nodes, weights }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Quadrature rule on the reference triangle; weights sum to 1/2.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleRule<T: Real> {
    pub order: usize,
    pub nodes: Vec<[T; 2]>,
    pub weights: Vec<T>,
}

impl<T: Real> TriangleRule<T> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

// Symmetric rules with positive weights (Dunavant). Each orbit is
// (weight, barycentric coordinates); weights sum to one.
type Orbit = (f64, [f64; 3]);

const DEG1: &[Orbit] = &[(1.0, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])];
const DEG2: &[Orbit] = &[(1.0 / 3.0, [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0])];
const DEG4: &[Orbit] = &[
    (0.223381589678011, [0.108103018168070, 0.445948490915965, 0.445948490915965]),
    (0.109951743655322, [0.816847572980459, 0.091576213509771, 0.091576213509771]),
];
const DEG5: &[Orbit] = &[
    (0.225, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
    (0.132394152788506, [0.059715871789770, 0.470142064105115, 0.470142064105115]),
    (0.125939180544827, [0.797426985353087, 0.101286507323456, 0.101286507323456]),
];
const DEG6: &[Orbit] = &[
    (0.116786275726379, [0.501426509658179, 0.249286745170910, 0.249286745170910]),
    (0.050844906370207, [0.873821971016996, 0.063089014491502, 0.063089014491502]),
    (0.082851075618374, [0.053145049844817, 0.310352451033784, 0.636502499121399]),
];
const DEG8: &[Orbit] = &[
    (0.144315607677787, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
    (0.095091634267285, [0.081414823414554, 0.459292588292723, 0.459292588292723]),
    (0.103217370534718, [0.658861384496480, 0.170569307751760, 0.170569307751760]),
    (0.032458497623198, [0.898905543365938, 0.050547228317031, 0.050547228317031]),
    (0.027230314174435, [0.008394777409958, 0.263112829634638, 0.728492392955404]),
];
const DEG9: &[Orbit] = &[
    (0.097135796282799, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
    (0.031334700227139, [0.020634961602525, 0.489682519198738, 0.489682519198738]),
    (0.077827541004774, [0.125820817014127, 0.437089591492937, 0.437089591492937]),
    (0.079647738927210, [0.623592928761935, 0.188203535619033, 0.188203535619033]),
    (0.025577675658698, [0.910540973211095, 0.044729513394453, 0.044729513394453]),
    (0.043283539377289, [0.036838412054736, 0.221962989160766, 0.741198598784498]),
];

fn expand_orbits<T: Real>(order: usize, orbits: &[Orbit]) -> TriangleRule<T> {
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for &(w, b) in orbits {
        let mut pts: Vec<[f64; 3]> = Vec::with_capacity(6);
        for p in PERMUTATIONS {
            let q = [b[p[0]], b[p[1]], b[p[2]]];
            if !pts.contains(&q) {
                pts.push(q);
            }
        }
        for q in pts {
            nodes.push([T::lit(q[1]), T::lit(q[2])]);
            weights.push(w);
        }
    }
    // The tables are given to 15 digits; renormalise so the rule integrates
    // constants exactly.
    let total: f64 = weights.iter().sum();
    let weights = weights.iter().map(|w| T::lit(0.5 * w / total)).collect();
    TriangleRule {
        order,
        nodes,
        weights,
    }
}

const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [1, 2, 0],
    [2, 0, 1],
    [0, 2, 1],
    [2, 1, 0],
    [1, 0, 2],
];

/// Collapsed Gauss product rule symmetrised over the six barycentric
/// permutations; exact for degree `degree` with positive weights.
fn symmetrised_conical<T: Real>(order: usize, degree: usize) -> TriangleRule<T> {
    let n = (degree + 2).div_ceil(2);
    let g = gauss01::<f64>(n);
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for (s, ws) in g.nodes.iter().zip(&g.weights) {
        for (t, wt) in g.nodes.iter().zip(&g.weights) {
            let u = *s;
            let v = t * (1.0 - s);
            let w = ws * wt * (1.0 - s);
            let b = [1.0 - u - v, u, v];
            for p in PERMUTATIONS {
                nodes.push([T::lit(b[p[1]]), T::lit(b[p[2]])]);
                weights.push(T::lit(w / 6.0));
            }
        }
    }
    TriangleRule {
        order,
        nodes,
        weights,
    }
}

/// Symmetric rule on the reference triangle exact for polynomials of degree
/// `order` (1 to 10). Orders without a dedicated table use the next higher one.
pub fn triangle_rule<T: Real>(order: usize) -> Result<TriangleRule<T>, QuadratureError> {
    Ok(match order {
        1 => expand_orbits(order, DEG1),
        2 => expand_orbits(order, DEG2),
        3 | 4 => expand_orbits(order, DEG4),
        5 => expand_orbits(order, DEG5),
        6 => expand_orbits(order, DEG6),
        7 | 8 => expand_orbits(order, DEG8),
        9 => expand_orbits(order, DEG9),
        10 => symmetrised_conical(order, 10),
        _ => return Err(QuadratureError::UnsupportedOrder(order)),
    })
}

/// Orders used for regular and singular pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuadratureConfig {
    /// Triangle rule order for separated pairs.
    pub regular_order: usize,
    /// Gauss points per axis of the 4-cube for touching pairs.
    pub singular_order: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            regular_order: 4,
            singular_order: 4,
        }
    }
}

impl QuadratureConfig {
    pub fn new(regular_order: usize, singular_order: usize) -> Result<Self, QuadratureError> {
        if regular_order == 0 || singular_order == 0 {
            return Err(QuadratureError::InvalidParameter(
                "quadrature orders must be at least 1".into(),
            ));
        }
        if regular_order + 2 > 10 {
            return Err(QuadratureError::UnsupportedOrder(regular_order + 2));
        }
        Ok(Self {
            regular_order,
            singular_order,
        })
    }
}

/// Adjacency of two triangles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairCase {
    Separated,
    CommonVertex,
    CommonEdge,
    Identical,
}

/// Adjacency class plus the local vertex orders that put the shared vertices
/// first (in increasing global index for a shared edge).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairClass {
    pub case: PairCase,
    pub test_perm: [usize; 3],
    pub trial_perm: [usize; 3],
}

pub fn classify_pair<T: Real>(mesh: &SurfaceMesh<T>, i_test: usize, i_trial: usize) -> PairClass {
    classify_triangles(&mesh.triangles()[i_test], &mesh.triangles()[i_trial], i_test == i_trial)
}

pub(crate) fn classify_triangles(test: &[usize; 3], trial: &[usize; 3], same: bool) -> PairClass {
    const ID: [usize; 3] = [0, 1, 2];
    if same {
        return PairClass {
            case: PairCase::Identical,
            test_perm: ID,
            trial_perm: ID,
        };
    }
    let mut shared = [0usize; 3];
    let mut n_shared = 0;
    for &v in test {
        if trial.contains(&v) {
            shared[n_shared] = v;
            n_shared += 1;
        }
    }
    let pos = |tri: &[usize; 3], v: usize| tri.iter().position(|&w| w == v).unwrap();
    match n_shared {
        0 => PairClass {
            case: PairCase::Separated,
            test_perm: ID,
            trial_perm: ID,
        },
        1 => {
            let cyc = |tri: &[usize; 3]| {
                let p = pos(tri, shared[0]);
                [p, (p + 1) % 3, (p + 2) % 3]
            };
            PairClass {
                case: PairCase::CommonVertex,
                test_perm: cyc(test),
                trial_perm: cyc(trial),
            }
        }
        2 => {
            let (a, b) = (shared[0].min(shared[1]), shared[0].max(shared[1]));
            let order = |tri: &[usize; 3]| {
                let pa = pos(tri, a);
                let pb = pos(tri, b);
                [pa, pb, 3 - pa - pb]
            };
            PairClass {
                case: PairCase::CommonEdge,
                test_perm: order(test),
                trial_perm: order(trial),
            }
        }
        // Distinct triangles with the same vertex set.
        _ => PairClass {
            case: PairCase::Identical,
            test_perm: ID,
            trial_perm: [pos(trial, test[0]), pos(trial, test[1]), pos(trial, test[2])],
        },
    }
}

/// Precomputed regularised rule for one adjacency case: point pairs in the
/// reference triangle and weights including the substitution Jacobian.
/// For an integrand equal to one the weights sum to 1/4.
#[derive(Clone, Debug, PartialEq)]
pub struct DuffyRule<T: Real> {
    pub case: PairCase,
    pub n_subdomains: usize,
    pub test_points: Vec<[T; 2]>,
    pub trial_points: Vec<[T; 2]>,
    pub weights: Vec<T>,
}

impl<T: Real> DuffyRule<T> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Builds the Duffy rule for `case` with `singular_order` Gauss points per
/// axis of `[0, 1]^4`.
///
/// The maps are written on the triangle `{0 <= s2 <= s1 <= 1}` and moved to
/// the reference triangle by `(u, v) = (s1 - s2, s2)`, which sends the local
/// vertices (0,0), (1,0), (1,1) to v0, v1, v2. Shared vertices therefore sit
/// at the first local positions, matching [`classify_pair`].
pub fn duffy_rule<T: Real>(case: PairCase, singular_order: usize) -> Result<DuffyRule<T>, QuadratureError> {
    let g = gauss01::<f64>(singular_order.max(1));
    type Map = fn(f64, f64, f64, f64) -> ([f64; 2], [f64; 2], f64);
    let maps: &[Map] = match case {
        PairCase::Separated => {
            return Err(QuadratureError::InvalidParameter(
                "separated pairs use the regular product rule".into(),
            ))
        }
        PairCase::Identical => &[
            |e1, e2, e3, xi| {
                ([xi, xi * (1.0 - e1 + e1 * e2)], [xi * (1.0 - e1 * e2 * e3), xi * (1.0 - e1)], xi.powi(3) * e1 * e1 * e2)
            },
            |e1, e2, e3, xi| {
                ([xi * (1.0 - e1 * e2 * e3), xi * (1.0 - e1)], [xi, xi * (1.0 - e1 + e1 * e2)], xi.powi(3) * e1 * e1 * e2)
            },
            |e1, e2, e3, xi| {
                ([xi, xi * e1 * (1.0 - e2 + e2 * e3)], [xi * (1.0 - e1 * e2), xi * e1 * (1.0 - e2)], xi.powi(3) * e1 * e1 * e2)
            },
            |e1, e2, e3, xi| {
                ([xi * (1.0 - e1 * e2), xi * e1 * (1.0 - e2)], [xi, xi * e1 * (1.0 - e2 + e2 * e3)], xi.powi(3) * e1 * e1 * e2)
            },
            |e1, e2, e3, xi| {
                ([xi * (1.0 - e1 * e2 * e3), xi * e1 * (1.0 - e2 * e3)], [xi, xi * e1 * (1.0 - e2)], xi.powi(3) * e1 * e1 * e2)
            },
            |e1, e2, e3, xi| {
                ([xi, xi * e1 * (1.0 - e2)], [xi * (1.0 - e1 * e2 * e3), xi * e1 * (1.0 - e2 * e3)], xi.powi(3) * e1 * e1 * e2)
            },
        ],
        PairCase::CommonEdge => &[
            |e1, e2, e3, xi| {
                ([xi, xi * e1 * e3], [xi * (1.0 - e1 * e2), xi * e1 * (1.0 - e2)], xi.powi(3) * e1 * e1)
            },
            |e1, e2, e3, xi| {
                ([xi, xi * e1], [xi * (1.0 - e1 * e2 * e3), xi * e1 * e2 * (1.0 - e3)], xi.powi(3) * e1 * e1 * e2)
            },
            |e1, e2, e3, xi| {
                ([xi * (1.0 - e1 * e2), xi * e1 * (1.0 - e2)], [xi, xi * e1 * e2 * e3], xi.powi(3) * e1 * e1 * e2)
            },
            |e1, e2, e3, xi| {
                ([xi * (1.0 - e1 * e2 * e3), xi * e1 * e2 * (1.0 - e3)], [xi, xi * e1], xi.powi(3) * e1 * e1 * e2)
            },
            |e1, e2, e3, xi| {
                ([xi * (1.0 - e1 * e2 * e3), xi * e1 * (1.0 - e2 * e3)], [xi, xi * e1 * e2], xi.powi(3) * e1 * e1 * e2)
            },
        ],
        PairCase::CommonVertex => &[
            |e1, e2, e3, xi| ([xi, xi * e1], [xi * e2, xi * e2 * e3], xi.powi(3) * e2),
            |e1, e2, e3, xi| ([xi * e2, xi * e2 * e3], [xi, xi * e1], xi.powi(3) * e2),
        ],
    };
    // The common-edge decomposition is not closed under swapping test and
    // trial roles; averaging it with its mirror image makes the rule exactly
    // symmetric, so symmetric kernels give symmetric matrices.
    let mirror = case == PairCase::CommonEdge;
    let n = g.nodes.len();
    let cap = maps.len() * n.pow(4) * if mirror { 2 } else { 1 };
    let mut test_points = Vec::with_capacity(cap);
    let mut trial_points = Vec::with_capacity(cap);
    let mut weights = Vec::with_capacity(cap);
    let to_ref = |s: [f64; 2]| [T::lit(s[0] - s[1]), T::lit(s[1])];
    for map in maps {
        for i1 in 0..n {
            for i2 in 0..n {
                for i3 in 0..n {
                    for i4 in 0..n {
                        let (x, y, jac) = map(g.nodes[i1], g.nodes[i2], g.nodes[i3], g.nodes[i4]);
                        let w = g.weights[i1] * g.weights[i2] * g.weights[i3] * g.weights[i4] * jac;
                        if mirror {
                            test_points.push(to_ref(x));
                            trial_points.push(to_ref(y));
                            weights.push(T::lit(0.5 * w));
                            test_points.push(to_ref(y));
                            trial_points.push(to_ref(x));
                            weights.push(T::lit(0.5 * w));
                        } else {
                            test_points.push(to_ref(x));
                            trial_points.push(to_ref(y));
                            weights.push(T::lit(w));
                        }
                    }
                }
            }
        }
    }
    Ok(DuffyRule {
        case,
        n_subdomains: maps.len(),
        test_points,
        trial_points,
        weights,
    })
}

/// Rules for one quadrature configuration, built once and shared.
#[derive(Clone, Debug)]
pub struct QuadratureTables<T: Real> {
    pub config: QuadratureConfig,
    pub regular: TriangleRule<T>,
    /// Used for separated pairs closer than twice the larger element diameter.
    pub near: TriangleRule<T>,
    pub identical: DuffyRule<T>,
    pub common_edge: DuffyRule<T>,
    pub common_vertex: DuffyRule<T>,
}

impl<T: Real> QuadratureTables<T> {
    pub fn new(config: QuadratureConfig) -> Result<Self, QuadratureError> {
        Ok(Self {
            config,
            regular: triangle_rule(config.regular_order)?,
            near: triangle_rule(config.regular_order + 2)?,
            identical: duffy_rule(PairCase::Identical, config.singular_order)?,
            common_edge: duffy_rule(PairCase::CommonEdge, config.singular_order)?,
            common_vertex: duffy_rule(PairCase::CommonVertex, config.singular_order)?,
        })
    }

    pub fn duffy(&self, case: PairCase) -> Option<&DuffyRule<T>> {
        match case {
            PairCase::Identical => Some(&self.identical),
            PairCase::CommonEdge => Some(&self.common_edge),
            PairCase::CommonVertex => Some(&self.common_vertex),
            PairCase::Separated => None,
        }
    }

    /// Largest number of point pairs any element pair can produce.
    pub fn max_batch(&self) -> usize {
        [
            self.regular.len() * self.regular.len(),
            self.near.len() * self.near.len(),
            self.identical.len(),
            self.common_edge.len(),
            self.common_vertex.len(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
    }
}

/// Quadrature nodes of one element pair in structure-of-arrays layout.
///
/// `weights` already carry the factor `4 Delta_test Delta_trial`, so summing
/// them gives the product of the two areas.
#[derive(Clone, Debug, Default)]
pub struct PairBatch<T: Real> {
    pub class: Option<PairClass>,
    pub x: [Vec<T>; 3],
    pub y: [Vec<T>; 3],
    pub weights: Vec<T>,
    /// Reference coordinates of the test points w.r.t. the permuted vertices.
    pub test_ref: [Vec<T>; 2],
    pub trial_ref: [Vec<T>; 2],
    /// Global node of local hat function `a` (after permutation).
    pub test_nodes: [usize; 3],
    pub trial_nodes: [usize; 3],
}

impl<T: Real> PairBatch<T> {
    pub fn with_capacity(n: usize) -> Self {
        let v = || Vec::with_capacity(n);
        Self {
            class: None,
            x: [v(), v(), v()],
            y: [v(), v(), v()],
            weights: v(),
            test_ref: [v(), v()],
            trial_ref: [v(), v()],
            test_nodes: [0; 3],
            trial_nodes: [0; 3],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn clear(&mut self) {
        for k in 0..3 {
            self.x[k].clear();
            self.y[k].clear();
        }
        self.weights.clear();
        for k in 0..2 {
            self.test_ref[k].clear();
            self.trial_ref[k].clear();
        }
    }

    /// Value of local p1 hat `a` at test point `k`.
    #[inline(always)]
    pub fn test_hat(&self, a: usize, k: usize) -> T {
        hat(a, self.test_ref[0][k], self.test_ref[1][k])
    }

    #[inline(always)]
    pub fn trial_hat(&self, a: usize, k: usize) -> T {
        hat(a, self.trial_ref[0][k], self.trial_ref[1][k])
    }
}

/// Reference p1 hat functions `1 - u - v`, `u`, `v`.
#[inline(always)]
pub fn hat<T: Real>(a: usize, u: T, v: T) -> T {
    match a {
        0 => T::one() - u - v,
        1 => u,
        _ => v,
    }
}

/// Mesh-bound quadrature: rules plus the physical images of the regular
/// rules on every element.
#[derive(Clone, Debug)]
pub struct MeshQuadrature<'a, T: Real> {
    mesh: &'a SurfaceMesh<T>,
    tables: QuadratureTables<T>,
    regular_points: Vec<Vec3<T>>,
    near_points: Vec<Vec3<T>>,
    centroids: Vec<Vec3<T>>,
    diameters: Vec<T>,
}

impl<'a, T: Real> MeshQuadrature<'a, T> {
    pub fn new(mesh: &'a SurfaceMesh<T>, config: QuadratureConfig) -> Result<Self, QuadratureError> {
        let tables = QuadratureTables::new(config)?;
        let map_all = |rule: &TriangleRule<T>| {
            let mut pts = Vec::with_capacity(mesh.n_elements() * rule.len());
            for e in 0..mesh.n_elements() {
                for p in &rule.nodes {
                    pts.push(mesh.map_reference(e, p[0], p[1]));
                }
            }
            pts
        };
        let regular_points = map_all(&tables.regular);
        let near_points = map_all(&tables.near);
        Ok(Self {
            mesh,
            regular_points,
            near_points,
            centroids: (0..mesh.n_elements()).map(|e| mesh.centroid(e)).collect(),
            diameters: (0..mesh.n_elements()).map(|e| mesh.element_diameter(e)).collect(),
            tables,
        })
    }

    pub fn mesh(&self) -> &'a SurfaceMesh<T> {
        self.mesh
    }

    pub fn tables(&self) -> &QuadratureTables<T> {
        &self.tables
    }

    pub fn is_near(&self, i: usize, j: usize) -> bool {
        let dist = norm(&sub(&self.centroids[i], &self.centroids[j]));
        dist < T::lit(2.0) * self.diameters[i].max(self.diameters[j])
    }

    /// Fills `batch` with the quadrature nodes for the pair `(i_test, i_trial)`.
    pub fn fill(&self, i_test: usize, i_trial: usize, batch: &mut PairBatch<T>) -> PairClass {
        batch.clear();
        let mesh = self.mesh;
        let tt = mesh.triangles()[i_test];
        let tr = mesh.triangles()[i_trial];
        let class = classify_triangles(&tt, &tr, i_test == i_trial);
        let scale = T::lit(4.0) * mesh.area(i_test) * mesh.area(i_trial);
        for a in 0..3 {
            batch.test_nodes[a] = tt[class.test_perm[a]];
            batch.trial_nodes[a] = tr[class.trial_perm[a]];
        }
        match class.case {
            PairCase::Separated => {
                let (rule, pts) = if self.is_near(i_test, i_trial) {
                    (&self.tables.near, &self.near_points)
                } else {
                    (&self.tables.regular, &self.regular_points)
                };
                let n = rule.len();
                let xs = &pts[i_test * n..(i_test + 1) * n];
                let ys = &pts[i_trial * n..(i_trial + 1) * n];
                for a in 0..n {
                    for b in 0..n {
                        for k in 0..3 {
                            batch.x[k].push(xs[a][k]);
                            batch.y[k].push(ys[b][k]);
                        }
                        batch.weights.push(scale * rule.weights[a] * rule.weights[b]);
                        batch.test_ref[0].push(rule.nodes[a][0]);
                        batch.test_ref[1].push(rule.nodes[a][1]);
                        batch.trial_ref[0].push(rule.nodes[b][0]);
                        batch.trial_ref[1].push(rule.nodes[b][1]);
                    }
                }
            }
            case => {
                let rule = self.tables.duffy(case).expect("touching pair");
                let vx = permuted(mesh, i_test, class.test_perm);
                let vy = permuted(mesh, i_trial, class.trial_perm);
                for k in 0..rule.len() {
                    let p = rule.test_points[k];
                    let q = rule.trial_points[k];
                    let x = affine(&vx, p[0], p[1]);
                    let y = affine(&vy, q[0], q[1]);
                    for c in 0..3 {
                        batch.x[c].push(x[c]);
                        batch.y[c].push(y[c]);
                    }
                    batch.weights.push(scale * rule.weights[k]);
                    batch.test_ref[0].push(p[0]);
                    batch.test_ref[1].push(p[1]);
                    batch.trial_ref[0].push(q[0]);
                    batch.trial_ref[1].push(q[1]);
                }
            }
        }
        batch.class = Some(class);
        class
    }

    /// `int_{gamma_test} int_{gamma_trial} k(x, y, n_x, n_y) ds_y ds_x`.
    pub fn integrate_pair<F>(&self, kernel: F, i_test: usize, i_trial: usize) -> T
    where
        F: Fn(&Vec3<T>, &Vec3<T>, &Vec3<T>, &Vec3<T>) -> T,
    {
        let mut batch = PairBatch::with_capacity(self.tables.max_batch());
        self.fill(i_test, i_trial, &mut batch);
        let nx = self.mesh.normal(i_test);
        let ny = self.mesh.normal(i_trial);
        let mut sum = T::zero();
        for k in 0..batch.len() {
            let x = [batch.x[0][k], batch.x[1][k], batch.x[2][k]];
            let y = [batch.y[0][k], batch.y[1][k], batch.y[2][k]];
            sum += batch.weights[k] * kernel(&x, &y, &nx, &ny);
        }
        sum
    }
}

fn permuted<T: Real>(mesh: &SurfaceMesh<T>, e: usize, perm: [usize; 3]) -> [Vec3<T>; 3] {
    let v = mesh.triangle_vertices(e);
    [v[perm[0]], v[perm[1]], v[perm[2]]]
}

#[inline(always)]
fn affine<T: Real>(v: &[Vec3<T>; 3], u: T, w: T) -> Vec3<T> {
    [
        v[0][0] + u * (v[1][0] - v[0][0]) + w * (v[2][0] - v[0][0]),
        v[0][1] + u * (v[1][1] - v[0][1]) + w * (v[2][1] - v[0][1]),
        v[0][2] + u * (v[1][2] - v[0][2]) + w * (v[2][2] - v[0][2]),
    ]
}

/// Convenience wrapper building the rules for a single pair integral.
pub fn integrate_pair<T: Real, F>(
    kernel: F,
    mesh: &SurfaceMesh<T>,
    i_test: usize,
    i_trial: usize,
    config: QuadratureConfig,
) -> Result<T, QuadratureError>
where
    F: Fn(&Vec3<T>, &Vec3<T>, &Vec3<T>, &Vec3<T>) -> T,
{
    Ok(MeshQuadrature::new(mesh, config)?.integrate_pair(kernel, i_test, i_trial))
}
