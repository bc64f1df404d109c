//! Lebedev grid, phantom media and assembly of the discrete operator
//! `A = Cᵀ Lᵀ W L C` for `−c ∇⊥ (∇⊥ · c ψ)` with perfectly conducting walls.
//!
//! Layout: family A holds vector nodes at `(iℓ, jℓ)` for `i < n1, j < n2`;
//! family B holds vector nodes at `((i+½)ℓ, (j+½)ℓ)` for `i < n1−1, j < n2−1`.
//! Both field components live on every node. The rotated divergence is
//! evaluated on two sets of scalar nodes:
//!
//! * `P` nodes at `((i+½)ℓ, jℓ)` combine `(cψ)₂` on family A with `(cψ)₁` on family B,
//! * `Q` nodes at `(iℓ, (j+½)ℓ)` combine `(cψ)₁` on family A with `(cψ)₂` on family B.
//!
//! On the walls the tangential component of `cψ` vanishes. Boundary A nodes
//! drop it from the stencil; boundary scalar nodes reach outside the domain
//! through a mirror ghost (tangential component odd across the wall) and carry
//! half the quadrature weight.

use nalgebra::{DMatrix, Matrix2};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid grid dimension {n1}x{n2} with spacing {spacing} (need n1, n2 >= 8 and spacing > 0)")]
    InvalidDimension { n1: usize, n2: usize, spacing: f64 },
    #[error("region {index} lies outside the admissible part of the domain")]
    RegionOutsideDomain { index: usize },
    #[error("region {index} has a speed tensor that is not SPD")]
    NonSpdContrast { index: usize },
    #[error("raster has {got} values, grid has {expected} nodes")]
    RasterSize { got: usize, expected: usize },
    #[error("medium is not c_o I at node {node} inside the homogeneous collar")]
    CollarViolation { node: usize },
}

pub type Result<T> = std::result::Result<T, GridError>;

/// Node family of the Lebedev grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LebedevGrid {
    pub n1: usize,
    pub n2: usize,
    pub spacing: f64,
}

impl LebedevGrid {
    pub fn new(n1: usize, n2: usize, spacing: f64) -> Result<Self> {
        if n1 < 8 || n2 < 8 || !(spacing > 0.0) {
            return Err(GridError::InvalidDimension { n1, n2, spacing });
        }
        Ok(LebedevGrid { n1, n2, spacing })
    }

    pub fn num_a(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn num_b(&self) -> usize {
        (self.n1 - 1) * (self.n2 - 1)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_a() + self.num_b()
    }

    /// Two field components per node.
    pub fn num_dofs(&self) -> usize {
        2 * self.num_nodes()
    }

    pub fn node_a(&self, i: usize, j: usize) -> usize {
        i * self.n2 + j
    }

    pub fn node_b(&self, i: usize, j: usize) -> usize {
        self.num_a() + i * (self.n2 - 1) + j
    }

    /// Family and lattice indices of a node.
    pub fn locate(&self, node: usize) -> (Family, usize, usize) {
        if node < self.num_a() {
            (Family::A, node / self.n2, node % self.n2)
        } else {
            let k = node - self.num_a();
            (Family::B, k / (self.n2 - 1), k % (self.n2 - 1))
        }
    }

    pub fn position(&self, node: usize) -> (f64, f64) {
        let h = self.spacing;
        match self.locate(node) {
            (Family::A, i, j) => (i as f64 * h, j as f64 * h),
            (Family::B, i, j) => ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h),
        }
    }

    /// Quadrature weight of every vector node.
    pub fn weight(&self) -> f64 {
        0.5 * self.spacing * self.spacing
    }

    /// Extent `((n1−1)ℓ, (n2−1)ℓ)` of the domain.
    pub fn extent(&self) -> (f64, f64) {
        ((self.n1 - 1) as f64 * self.spacing, (self.n2 - 1) as f64 * self.spacing)
    }

    /// Family-A node closest to a point (clamped to the grid).
    pub fn nearest_a(&self, x1: f64, x2: f64) -> usize {
        let clamp = |v: f64, n: usize| (v / self.spacing).round().clamp(0.0, (n - 1) as f64) as usize;
        self.node_a(clamp(x1, self.n1), clamp(x2, self.n2))
    }

    /// Whether the DOF is a tangential component on a wall (held at zero).
    pub fn is_pinned(&self, dof: usize) -> bool {
        match self.locate(dof / 2) {
            (Family::A, i, j) => {
                if dof % 2 == 1 {
                    i == 0 || i == self.n1 - 1
                } else {
                    j == 0 || j == self.n2 - 1
                }
            }
            (Family::B, _, _) => false,
        }
    }

    /// Rotated-divergence stencils: each row lists `(node, component, coefficient)`
    /// acting on `cψ`, with its quadrature weight relative to a vector node.
    pub(crate) fn curl_rows(&self) -> Vec<CurlRow> {
        let (n1, n2) = (self.n1, self.n2);
        let inv = 1.0 / self.spacing;
        let mut rows = Vec::with_capacity((n1 - 1) * n2 + n1 * (n2 - 1));
        // P rows at (i+1/2, j): D1 of A.(cψ)2 minus D2 of B.(cψ)1
        for i in 0..n1 - 1 {
            for j in 0..n2 {
                let mut terms = Vec::with_capacity(4);
                if i > 0 {
                    terms.push((self.node_a(i, j), 1, -inv));
                }
                if i + 1 < n1 - 1 {
                    terms.push((self.node_a(i + 1, j), 1, inv));
                }
                let mut weight = 1.0;
                if j == 0 {
                    terms.push((self.node_b(i, 0), 0, -2.0 * inv));
                    weight = 0.5;
                } else if j == n2 - 1 {
                    terms.push((self.node_b(i, n2 - 2), 0, 2.0 * inv));
                    weight = 0.5;
                } else {
                    terms.push((self.node_b(i, j), 0, -inv));
                    terms.push((self.node_b(i, j - 1), 0, inv));
                }
                rows.push(CurlRow { weight, terms });
            }
        }
        // Q rows at (i, j+1/2): D1 of B.(cψ)2 minus D2 of A.(cψ)1
        for i in 0..n1 {
            for j in 0..n2 - 1 {
                let mut terms = Vec::with_capacity(4);
                let mut weight = 1.0;
                if i == 0 {
                    terms.push((self.node_b(0, j), 1, 2.0 * inv));
                    weight = 0.5;
                } else if i == n1 - 1 {
                    terms.push((self.node_b(n1 - 2, j), 1, -2.0 * inv));
                    weight = 0.5;
                } else {
                    terms.push((self.node_b(i, j), 1, inv));
                    terms.push((self.node_b(i - 1, j), 1, -inv));
                }
                if j + 1 < n2 - 1 {
                    terms.push((self.node_a(i, j + 1), 0, -inv));
                }
                if j > 0 {
                    terms.push((self.node_a(i, j), 0, inv));
                }
                rows.push(CurlRow { weight, terms });
            }
        }
        rows
    }
}

pub(crate) struct CurlRow {
    pub weight: f64,
    pub terms: Vec<(usize, usize, f64)>,
}

/// Symmetric 2×2 wave speed tensor (one stored off-diagonal value).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedTensor {
    pub c11: f64,
    pub c22: f64,
    pub c12: f64,
}

impl SpeedTensor {
    pub fn isotropic(c: f64) -> Self {
        SpeedTensor { c11: c, c22: c, c12: 0.0 }
    }

    pub fn new(c11: f64, c22: f64, c12: f64) -> Self {
        SpeedTensor { c11, c22, c12 }
    }

    pub fn is_spd(&self) -> bool {
        self.c11 > 0.0 && self.c11 * self.c22 - self.c12 * self.c12 > 0.0
    }

    pub fn scaled(&self, s: f64) -> Self {
        SpeedTensor { c11: s * self.c11, c22: s * self.c22, c12: s * self.c12 }
    }

    pub fn matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.c11, self.c12, self.c12, self.c22)
    }

    pub fn from_matrix(m: &Matrix2<f64>) -> Self {
        SpeedTensor { c11: m[(0, 0)], c22: m[(1, 1)], c12: 0.5 * (m[(0, 1)] + m[(1, 0)]) }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        match (r, c) {
            (0, 0) => self.c11,
            (1, 1) => self.c22,
            _ => self.c12,
        }
    }
}

/// Geometric region; coordinates are in units of the cutoff wavelength `λ_c`.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Axis-aligned rectangle `[x1_min, x1_max] × [x2_min, x2_max]`.
    Rect { x1: (f64, f64), x2: (f64, f64) },
    Ellipse { center: (f64, f64), semi_axes: (f64, f64) },
    /// Thick line segment (cracks).
    Segment { start: (f64, f64), end: (f64, f64), thickness: f64 },
}

impl Shape {
    fn contains(&self, p: (f64, f64)) -> bool {
        match *self {
            Shape::Rect { x1, x2 } => p.0 >= x1.0 && p.0 <= x1.1 && p.1 >= x2.0 && p.1 <= x2.1,
            Shape::Ellipse { center, semi_axes } => {
                let a = (p.0 - center.0) / semi_axes.0;
                let b = (p.1 - center.1) / semi_axes.1;
                a * a + b * b <= 1.0
            }
            Shape::Segment { start, end, thickness } => segment_distance(p, start, end) <= 0.5 * thickness,
        }
    }

    /// Bounding box `((x1_min, x1_max), (x2_min, x2_max))`.
    pub fn bounds(&self) -> ((f64, f64), (f64, f64)) {
        match *self {
            Shape::Rect { x1, x2 } => (x1, x2),
            Shape::Ellipse { center, semi_axes } => (
                (center.0 - semi_axes.0, center.0 + semi_axes.0),
                (center.1 - semi_axes.1, center.1 + semi_axes.1),
            ),
            Shape::Segment { start, end, thickness } => {
                let h = 0.5 * thickness;
                (
                    (start.0.min(end.0) - h, start.0.max(end.0) + h),
                    (start.1.min(end.1) - h, start.1.max(end.1) + h),
                )
            }
        }
    }

    /// Distance from a point to the shape (zero inside), in λ_c units.
    pub fn distance(&self, p: (f64, f64)) -> f64 {
        match *self {
            Shape::Rect { x1, x2 } => {
                let d1 = (x1.0 - p.0).max(p.0 - x1.1).max(0.0);
                let d2 = (x2.0 - p.1).max(p.1 - x2.1).max(0.0);
                d1.hypot(d2)
            }
            Shape::Ellipse { .. } => {
                if self.contains(p) {
                    return 0.0;
                }
                // sampled boundary is accurate enough for metrics
                let Shape::Ellipse { center, semi_axes } = *self else { unreachable!() };
                (0..720)
                    .map(|k| {
                        let t = k as f64 * std::f64::consts::PI / 360.0;
                        let q = (center.0 + semi_axes.0 * t.cos(), center.1 + semi_axes.1 * t.sin());
                        (p.0 - q.0).hypot(p.1 - q.1)
                    })
                    .fold(f64::INFINITY, f64::min)
            }
            Shape::Segment { start, end, thickness } => {
                (segment_distance(p, start, end) - 0.5 * thickness).max(0.0)
            }
        }
    }

    pub fn scaled(&self, s: f64) -> Shape {
        let sc = |p: (f64, f64)| (p.0 * s, p.1 * s);
        match *self {
            Shape::Rect { x1, x2 } => Shape::Rect { x1: sc(x1), x2: sc(x2) },
            Shape::Ellipse { center, semi_axes } => Shape::Ellipse { center: sc(center), semi_axes: sc(semi_axes) },
            Shape::Segment { start, end, thickness } => {
                Shape::Segment { start: sc(start), end: sc(end), thickness: thickness * s }
            }
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

/// Region with a speed tensor relative to `c_o` (`c = c_o · contrast`).
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub shape: Shape,
    pub contrast: SpeedTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PhantomKind {
    Homogeneous,
    Crack(Region),
    MultiCrack(Vec<Region>),
    AnisoInclusions(Vec<Region>),
    RectangleInclusion(Region),
    /// One tensor per node in grid order, relative to `c_o`.
    CustomRaster(Vec<SpeedTensor>),
}

/// Part of the domain that must stay homogeneous: a layer of width
/// `boundary` along all walls and the band `x₁ < array_band` around the array.
/// Both are length units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Collar {
    pub boundary: f64,
    pub array_band: f64,
}

impl Collar {
    pub fn contains(&self, grid: &LebedevGrid, p: (f64, f64)) -> bool {
        let (l1, l2) = grid.extent();
        p.0 < self.array_band
            || p.0 < self.boundary
            || p.1 < self.boundary
            || p.0 > l1 - self.boundary
            || p.1 > l2 - self.boundary
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    /// Length of one geometry unit (the cutoff wavelength).
    pub lambda_c: f64,
    pub collar: Collar,
}

impl PhantomSpec {
    pub fn regions(&self) -> &[Region] {
        match &self.kind {
            PhantomKind::Homogeneous | PhantomKind::CustomRaster(_) => &[],
            PhantomKind::Crack(r) | PhantomKind::RectangleInclusion(r) => std::slice::from_ref(r),
            PhantomKind::MultiCrack(v) | PhantomKind::AnisoInclusions(v) => v,
        }
    }

    /// Region shapes in length units.
    pub fn shapes_in_length_units(&self) -> Vec<Shape> {
        self.regions().iter().map(|r| r.shape.scaled(self.lambda_c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MediumField {
    pub grid: LebedevGrid,
    pub c_o: f64,
    /// One tensor per node, family A then family B.
    pub tensors: Vec<SpeedTensor>,
}

impl MediumField {
    pub fn homogeneous(grid: LebedevGrid, c_o: f64) -> Self {
        MediumField { grid, c_o, tensors: vec![SpeedTensor::isotropic(c_o); grid.num_nodes()] }
    }

    pub fn from_fn(grid: LebedevGrid, c_o: f64, f: impl Fn((f64, f64)) -> SpeedTensor) -> Self {
        let tensors = (0..grid.num_nodes()).map(|k| f(grid.position(k))).collect();
        MediumField { grid, c_o, tensors }
    }

    pub fn tensor(&self, node: usize) -> SpeedTensor {
        self.tensors[node]
    }

    pub fn is_spd(&self) -> bool {
        self.tensors.iter().all(SpeedTensor::is_spd)
    }

    /// Fails on the first node in the collar that is not `c_o I`.
    pub fn check_collar(&self, collar: &Collar) -> Result<()> {
        let iso = SpeedTensor::isotropic(self.c_o);
        for (k, t) in self.tensors.iter().enumerate() {
            if collar.contains(&self.grid, self.grid.position(k)) && *t != iso {
                return Err(GridError::CollarViolation { node: k });
            }
        }
        Ok(())
    }

    /// Distinct tensors in the field, in order of first appearance.
    pub fn distinct_tensors(&self) -> Vec<SpeedTensor> {
        let mut out: Vec<SpeedTensor> = Vec::new();
        for t in &self.tensors {
            if !out.contains(t) {
                out.push(*t);
            }
        }
        out
    }

    /// CSV rows `x1,x2,c11,c22,c12` for family-A nodes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x1,x2,c11,c22,c12\n");
        for k in 0..self.grid.num_a() {
            let (x1, x2) = self.grid.position(k);
            let t = self.tensors[k];
            s.push_str(&format!("{x1},{x2},{},{},{}\n", t.c11, t.c22, t.c12));
        }
        s
    }
}

/// Rasterizes a phantom onto the grid (nearest node, later regions win).
pub fn build_medium(spec: &PhantomSpec, grid: &LebedevGrid, c_o: f64) -> Result<MediumField> {
    let mut medium = MediumField::homogeneous(*grid, c_o);
    if let PhantomKind::CustomRaster(values) = &spec.kind {
        if values.len() != grid.num_nodes() {
            return Err(GridError::RasterSize { got: values.len(), expected: grid.num_nodes() });
        }
        for (k, v) in values.iter().enumerate() {
            if !v.is_spd() {
                return Err(GridError::NonSpdContrast { index: k });
            }
            medium.tensors[k] = v.scaled(c_o);
        }
        medium.check_collar(&spec.collar)?;
        return Ok(medium);
    }
    let (l1, l2) = grid.extent();
    let collar = spec.collar;
    for (index, region) in spec.regions().iter().enumerate() {
        if !region.contrast.is_spd() {
            return Err(GridError::NonSpdContrast { index });
        }
        let shape = region.shape.scaled(spec.lambda_c);
        let (b1, b2) = shape.bounds();
        let lo1 = collar.boundary.max(collar.array_band);
        if b1.0 < lo1 || b1.1 > l1 - collar.boundary || b2.0 < collar.boundary || b2.1 > l2 - collar.boundary {
            return Err(GridError::RegionOutsideDomain { index });
        }
        let value = region.contrast.scaled(c_o);
        for k in 0..grid.num_nodes() {
            if shape.contains(grid.position(k)) {
                medium.tensors[k] = value;
            }
        }
    }
    Ok(medium)
}

/// Symmetric sparse matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            *out = acc;
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.cols[range.clone()].binary_search(&c) {
            Ok(k) => self.vals[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                d[(r, self.cols[k])] = self.vals[k];
            }
        }
        d
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Whether the stored pattern and values equal those of the transpose.
    pub fn is_exactly_symmetric(&self) -> bool {
        (0..self.n).all(|r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).all(|k| self.get(self.cols[k], r) == self.vals[k])
        })
    }

    fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        // stable sort keeps the accumulation order of each entry deterministic
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len() / 4);
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len() / 4);
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }
}

/// The assembled operator with its grid and node quadrature weight.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub grid: LebedevGrid,
    pub matrix: CsrMatrix,
    pub weight: f64,
}

impl DiscreteOperator {
    pub fn dim(&self) -> usize {
        self.matrix.n
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.mul_vec(x, y);
    }

    /// Largest eigenvalue estimate by power iteration from a fixed start vector.
    pub fn lambda_max_estimate(&self, iterations: usize) -> f64 {
        let n = self.dim();
        let mut x: Vec<f64> = (0..n).map(|k| 1.0 + ((k * 7919) % 113) as f64 / 113.0).collect();
        let mut y = vec![0.0; n];
        let mut lambda = 0.0;
        for _ in 0..iterations {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            x.iter_mut().for_each(|v| *v /= norm);
            self.apply(&x, &mut y);
            lambda = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            std::mem::swap(&mut x, &mut y);
        }
        lambda
    }

    /// Weighted inner product `Σ w xᵀy` over all nodes.
    pub fn inner(&self, x: &[f64], y: &[f64]) -> f64 {
        self.weight * x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Assembles `A = Cᵀ Lᵀ W L C` from the curl stencils. Only the upper
/// triangle is computed; the lower one is a mirror copy, so the result is
/// bit-exactly symmetric.
pub fn assemble_operator(medium: &MediumField) -> DiscreteOperator {
    let grid = medium.grid;
    let rows = grid.curl_rows();
    let mut triplets = Vec::with_capacity(rows.len() * 40);
    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(8);
    for row in &rows {
        entries.clear();
        for &(node, comp, coeff) in &row.terms {
            let c = medium.tensors[node];
            for q in 0..2 {
                let v = coeff * c.get(comp, q);
                if v != 0.0 {
                    entries.push((2 * node + q, v));
                }
            }
        }
        entries.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for &(d, v) in &entries {
            match merged.last_mut() {
                Some(last) if last.0 == d => last.1 += v,
                _ => merged.push((d, v)),
            }
        }
        for a in 0..merged.len() {
            for b in a..merged.len() {
                let v = row.weight * merged[a].1 * merged[b].1;
                triplets.push((merged[a].0, merged[b].0, v));
                if a != b {
                    triplets.push((merged[b].0, merged[a].0, v));
                }
            }
        }
    }
    DiscreteOperator { grid, matrix: CsrMatrix::from_triplets(grid.num_dofs(), triplets), weight: grid.weight() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigen_desc;

    fn open_collar() -> Collar {
        Collar { boundary: 0.0, array_band: 0.0 }
    }

    #[test]
    fn grid_counts_and_positions() {
        let g = LebedevGrid::new(8, 8, 1.0).unwrap();
        assert_eq!(g.num_a(), 64);
        assert_eq!(g.num_b(), 49);
        assert_eq!(g.position(g.node_b(0, 0)), (0.5, 0.5));
        let g = LebedevGrid::new(10, 20, 0.5).unwrap();
        assert_eq!(g.position(g.node_a(9, 19)), (4.5, 9.5));
        assert!(LebedevGrid::new(7, 8, 1.0).is_err());
        assert!(LebedevGrid::new(8, 8, 0.0).is_err());
        for k in 0..g.num_nodes() {
            let (f, i, j) = g.locate(k);
            let back = if f == Family::A { g.node_a(i, j) } else { g.node_b(i, j) };
            assert_eq!(back, k);
        }
    }

    #[test]
    fn homogeneous_and_rectangle_phantoms() {
        let g = LebedevGrid::new(40, 30, 1.0).unwrap();
        let spec = PhantomSpec { kind: PhantomKind::Homogeneous, lambda_c: 16.0, collar: open_collar() };
        let m = build_medium(&spec, &g, 1.0).unwrap();
        assert!(m.tensors.iter().all(|t| *t == SpeedTensor::isotropic(1.0)));

        let region = Region {
            shape: Shape::Rect { x1: (1.0, 2.0), x2: (0.5, 1.2) },
            contrast: SpeedTensor::new(1.3, 0.9, 0.1),
        };
        let spec = PhantomSpec {
            kind: PhantomKind::RectangleInclusion(region),
            lambda_c: 16.0,
            collar: Collar { boundary: 4.0, array_band: 12.0 },
        };
        let m = build_medium(&spec, &g, 2.0).unwrap();
        assert_eq!(m.distinct_tensors().len(), 2);
        assert!(m.check_collar(&spec.collar).is_ok());
        assert!(m.is_spd());
    }

    #[test]
    fn phantom_errors() {
        let g = LebedevGrid::new(40, 30, 1.0).unwrap();
        let collar = Collar { boundary: 4.0, array_band: 12.0 };
        let shallow = Region { shape: Shape::Rect { x1: (0.5, 1.0), x2: (0.5, 1.0) }, contrast: SpeedTensor::isotropic(2.0) };
        let spec = PhantomSpec { kind: PhantomKind::RectangleInclusion(shallow), lambda_c: 16.0, collar };
        assert_eq!(build_medium(&spec, &g, 1.0), Err(GridError::RegionOutsideDomain { index: 0 }));
        let bad = Region { shape: Shape::Rect { x1: (1.0, 2.0), x2: (0.5, 1.0) }, contrast: SpeedTensor::new(1.0, 1.0, 2.0) };
        let spec = PhantomSpec { kind: PhantomKind::AnisoInclusions(vec![bad]), lambda_c: 16.0, collar };
        assert_eq!(build_medium(&spec, &g, 1.0), Err(GridError::NonSpdContrast { index: 0 }));
    }

    #[test]
    fn operator_symmetric_and_psd() {
        let g = LebedevGrid::new(16, 16, 1.0).unwrap();
        let m = MediumField::from_fn(g, 1.0, |(x1, x2)| {
            if (x1 - 8.0).hypot(x2 - 8.0) < 3.0 {
                SpeedTensor::new(1.4, 0.8, 0.2)
            } else {
                SpeedTensor::isotropic(1.0)
            }
        });
        let op = assemble_operator(&m);
        assert!(op.matrix.is_exactly_symmetric());
        let dense = op.matrix.to_dense();
        assert_eq!(dense, dense.transpose());
        let (values, _) = sym_eigen_desc(&dense);
        let norm = dense.norm();
        assert!(values[values.len() - 1] >= -1e-10 * norm);
    }

    #[test]
    fn pinned_dofs_have_empty_columns() {
        let g = LebedevGrid::new(9, 11, 1.0).unwrap();
        let op = assemble_operator(&MediumField::homogeneous(g, 1.0));
        for d in 0..g.num_dofs() {
            let row_empty = op.matrix.row_ptr[d] == op.matrix.row_ptr[d + 1];
            assert_eq!(g.is_pinned(d), row_empty, "dof {d}");
        }
    }

    #[test]
    fn constant_field_is_annihilated_away_from_walls() {
        let g = LebedevGrid::new(12, 12, 1.0).unwrap();
        let op = assemble_operator(&MediumField::homogeneous(g, 1.0));
        let x: Vec<f64> = (0..g.num_dofs()).map(|d| if d % 2 == 0 && !g.is_pinned(d) { 1.0 } else { 0.0 }).collect();
        let mut y = vec![0.0; x.len()];
        op.apply(&x, &mut y);
        for (d, v) in y.iter().enumerate() {
            let (x1, x2) = g.position(d / 2);
            if x1 > 1.5 && x2 > 1.5 && x1 < 9.5 && x2 < 9.5 {
                assert!(v.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn plane_wave_reproduces_stencil_symbol() {
        let h = 0.7;
        let g = LebedevGrid::new(20, 20, h).unwrap();
        let c = 1.3;
        let op = assemble_operator(&MediumField::homogeneous(g, c));
        let (k1, k2, phase) = (0.9, -0.6, 0.3);
        let amp = [0.4, 1.1];
        let x: Vec<f64> = (0..g.num_dofs())
            .map(|d| {
                if g.is_pinned(d) {
                    return 0.0;
                }
                let (x1, x2) = g.position(d / 2);
                amp[d % 2] * (k1 * x1 + k2 * x2 + phase).cos()
            })
            .collect();
        let mut y = vec![0.0; x.len()];
        op.apply(&x, &mut y);
        let s1 = 2.0 * (k1 * h / 2.0).sin() / h;
        let s2 = 2.0 * (k2 * h / 2.0).sin() / h;
        let symbol = [[s2 * s2, -s1 * s2], [-s1 * s2, s1 * s1]];
        for (d, v) in y.iter().enumerate() {
            let (x1, x2) = g.position(d / 2);
            if x1 < 2.0 * h || x2 < 2.0 * h || x1 > 16.0 * h || x2 > 16.0 * h {
                continue;
            }
            let comp = d % 2;
            let expect = (symbol[comp][0] * amp[0] + symbol[comp][1] * amp[1]) * (k1 * x1 + k2 * x2 + phase).cos();
            assert!((v / (c * c) - expect).abs() < 1e-12, "dof {d}");
        }
    }
}
