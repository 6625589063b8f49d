//! Staggered (MAC) grids: cell-centered scalars, face-centered velocities,
//! the discrete operators between them, and masked norms.
//!
//! x-velocities live on vertical faces `(i h, (j + 1/2) h)`, y-velocities on
//! horizontal faces `((i + 1/2) h, j h)`. On a periodic grid face `i` sits
//! between cell `i - 1` (wrapped) and cell `i`, so both components have
//! `nx * ny` entries. On a bounded grid the outermost faces lie on the
//! square's boundary and carry the normal component of the boundary data;
//! the tangential boundary data is stored separately as a [`WallTrace`].

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Uniform grid of `nx x ny` cells of side `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    pub periodic: bool,
}

/// Velocity component, named by the axis it points along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Comp {
    X,
    Y,
}

impl Comp {
    pub const BOTH: [Comp; 2] = [Comp::X, Comp::Y];

    pub fn index(self) -> usize {
        match self {
            Comp::X => 0,
            Comp::Y => 1,
        }
    }
}

/// Sides of the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Bottom, Side::Top];

    /// Outward unit normal.
    pub fn normal(self) -> [f64; 2] {
        match self {
            Side::Left => [-1.0, 0.0],
            Side::Right => [1.0, 0.0],
            Side::Bottom => [0.0, -1.0],
            Side::Top => [0.0, 1.0],
        }
    }

    /// Velocity component normal to this side.
    pub fn normal_comp(self) -> Comp {
        match self {
            Side::Left | Side::Right => Comp::X,
            Side::Bottom | Side::Top => Comp::Y,
        }
    }
}

impl Grid {
    pub fn periodic(m: usize) -> Self {
        Self {
            nx: m,
            ny: m,
            h: 1.0 / m as f64,
            periodic: true,
        }
    }

    pub fn unit_square(n: usize) -> Self {
        Self {
            nx: n,
            ny: n,
            h: 1.0 / n as f64,
            periodic: false,
        }
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Faces per row/column along the component's own axis.
    pub fn face_dims(&self, c: Comp) -> (usize, usize) {
        let extra = usize::from(!self.periodic);
        match c {
            Comp::X => (self.nx + extra, self.ny),
            Comp::Y => (self.nx, self.ny + extra),
        }
    }

    pub fn face_count(&self, c: Comp) -> usize {
        let (a, b) = self.face_dims(c);
        a * b
    }

    pub fn face_index(&self, c: Comp, i: usize, j: usize) -> usize {
        let (w, _) = self.face_dims(c);
        j * w + i
    }

    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.h, (j as f64 + 0.5) * self.h)
    }

    pub fn face_position(&self, c: Comp, i: usize, j: usize) -> (f64, f64) {
        match c {
            Comp::X => (i as f64 * self.h, (j as f64 + 0.5) * self.h),
            Comp::Y => ((i as f64 + 0.5) * self.h, j as f64 * self.h),
        }
    }

    /// The two cells sharing a face; `None` for a cell outside a bounded grid.
    pub fn face_cells(&self, c: Comp, i: usize, j: usize) -> (Option<usize>, Option<usize>) {
        match (c, self.periodic) {
            (Comp::X, true) => (
                Some(self.cell_index((i + self.nx - 1) % self.nx, j)),
                Some(self.cell_index(i, j)),
            ),
            (Comp::Y, true) => (
                Some(self.cell_index(i, (j + self.ny - 1) % self.ny)),
                Some(self.cell_index(i, j)),
            ),
            (Comp::X, false) => (
                (i > 0).then(|| self.cell_index(i - 1, j)),
                (i < self.nx).then(|| self.cell_index(i, j)),
            ),
            (Comp::Y, false) => (
                (j > 0).then(|| self.cell_index(i, j - 1)),
                (j < self.ny).then(|| self.cell_index(i, j)),
            ),
        }
    }

    fn check_same(&self, other: &Grid) -> Result<()> {
        if self.nx != other.nx || self.ny != other.ny || self.periodic != other.periodic {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} (periodic {}) vs {}x{} (periodic {})",
                self.nx, self.ny, self.periodic, other.nx, other.ny, other.periodic
            )));
        }
        Ok(())
    }
}

/// Cell-centered values.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![0.0; grid.cells()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut out = Self::zeros(grid);
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let (x, y) = grid.cell_center(i, j);
                out.data[grid.cell_index(i, j)] = f(x, y);
            }
        }
        out
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[self.grid.cell_index(i, j)]
    }

    /// Mean over cells where `mask` is true (all cells when `None`).
    pub fn mean(&self, mask: Option<&[bool]>) -> f64 {
        let (mut s, mut c) = (0.0, 0usize);
        for (k, &v) in self.data.iter().enumerate() {
            if mask.map_or(true, |m| m[k]) {
                s += v;
                c += 1;
            }
        }
        if c == 0 {
            0.0
        } else {
            s / c as f64
        }
    }

    pub fn sub(&self, other: &ScalarField) -> Result<ScalarField> {
        self.grid.check_same(&other.grid)?;
        Ok(ScalarField {
            grid: self.grid,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }
}

/// Tangential boundary values at grid vertices on each side of the square.
///
/// `left`/`right` hold the y-velocity at `(0, j h)` / `(1, j h)`,
/// `bottom`/`top` the x-velocity at `(i h, 0)` / `(i h, 1)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WallTrace {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub bottom: Vec<f64>,
    pub top: Vec<f64>,
}

impl WallTrace {
    pub fn zeros(grid: &Grid) -> Self {
        if grid.periodic {
            return Self::default();
        }
        Self {
            left: vec![0.0; grid.ny + 1],
            right: vec![0.0; grid.ny + 1],
            bottom: vec![0.0; grid.nx + 1],
            top: vec![0.0; grid.nx + 1],
        }
    }

    pub fn side(&self, s: Side) -> &[f64] {
        match s {
            Side::Left => &self.left,
            Side::Right => &self.right,
            Side::Bottom => &self.bottom,
            Side::Top => &self.top,
        }
    }

    pub fn side_mut(&mut self, s: Side) -> &mut Vec<f64> {
        match s {
            Side::Left => &mut self.left,
            Side::Right => &mut self.right,
            Side::Bottom => &mut self.bottom,
            Side::Top => &mut self.top,
        }
    }
}

/// Face-centered vector field with its tangential wall trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StaggeredField {
    pub grid: Grid,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub wall: WallTrace,
}

impl StaggeredField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            u: vec![0.0; grid.face_count(Comp::X)],
            v: vec![0.0; grid.face_count(Comp::Y)],
            wall: WallTrace::zeros(&grid),
        }
    }

    /// Samples a vector function at face centers and on the walls.
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> [f64; 2]) -> Self {
        let mut out = Self::zeros(grid);
        for c in Comp::BOTH {
            let (w, hgt) = grid.face_dims(c);
            for j in 0..hgt {
                for i in 0..w {
                    let (x, y) = grid.face_position(c, i, j);
                    let k = grid.face_index(c, i, j);
                    out.comp_mut(c)[k] = f(x, y)[c.index()];
                }
            }
        }
        if !grid.periodic {
            for k in 0..=grid.ny {
                let y = k as f64 * grid.h;
                out.wall.left[k] = f(0.0, y)[1];
                out.wall.right[k] = f(1.0, y)[1];
            }
            for k in 0..=grid.nx {
                let x = k as f64 * grid.h;
                out.wall.bottom[k] = f(x, 0.0)[0];
                out.wall.top[k] = f(x, 1.0)[0];
            }
        }
        out
    }

    pub fn comp(&self, c: Comp) -> &[f64] {
        match c {
            Comp::X => &self.u,
            Comp::Y => &self.v,
        }
    }

    pub fn comp_mut(&mut self, c: Comp) -> &mut Vec<f64> {
        match c {
            Comp::X => &mut self.u,
            Comp::Y => &mut self.v,
        }
    }

    pub fn at(&self, c: Comp, i: usize, j: usize) -> f64 {
        self.comp(c)[self.grid.face_index(c, i, j)]
    }

    /// `a * self + b * other`, wall traces included.
    pub fn combine(&self, a: f64, other: &StaggeredField, b: f64) -> Result<StaggeredField> {
        self.grid.check_same(&other.grid)?;
        let lin = |x: &[f64], y: &[f64]| -> Vec<f64> {
            x.iter().zip(y).map(|(p, q)| a * p + b * q).collect()
        };
        Ok(StaggeredField {
            grid: self.grid,
            u: lin(&self.u, &other.u),
            v: lin(&self.v, &other.v),
            wall: WallTrace {
                left: lin(&self.wall.left, &other.wall.left),
                right: lin(&self.wall.right, &other.wall.right),
                bottom: lin(&self.wall.bottom, &other.wall.bottom),
                top: lin(&self.wall.top, &other.wall.top),
            },
        })
    }

    pub fn sub(&self, other: &StaggeredField) -> Result<StaggeredField> {
        self.combine(1.0, other, -1.0)
    }

    pub fn add(&self, other: &StaggeredField) -> Result<StaggeredField> {
        self.combine(1.0, other, 1.0)
    }

    pub fn scaled(&self, a: f64) -> StaggeredField {
        let s = |x: &[f64]| x.iter().map(|v| a * v).collect::<Vec<_>>();
        StaggeredField {
            grid: self.grid,
            u: s(&self.u),
            v: s(&self.v),
            wall: WallTrace {
                left: s(&self.wall.left),
                right: s(&self.wall.right),
                bottom: s(&self.wall.bottom),
                top: s(&self.wall.top),
            },
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.u
            .iter()
            .chain(&self.v)
            .chain(&self.wall.left)
            .chain(&self.wall.right)
            .chain(&self.wall.bottom)
            .chain(&self.wall.top)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Normal component on the boundary faces of one side, in order along
    /// the side (bounded grids only).
    pub fn normal_trace(&self, side: Side) -> Vec<f64> {
        let g = self.grid;
        match side {
            Side::Left => (0..g.ny).map(|j| self.at(Comp::X, 0, j)).collect(),
            Side::Right => (0..g.ny).map(|j| self.at(Comp::X, g.nx, j)).collect(),
            Side::Bottom => (0..g.nx).map(|i| self.at(Comp::Y, i, 0)).collect(),
            Side::Top => (0..g.nx).map(|i| self.at(Comp::Y, i, g.ny)).collect(),
        }
    }
}

/// Classification of a face against a solid mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceKind {
    /// Both neighbouring cells are fluid: the velocity is an unknown.
    Interior,
    /// Exactly one neighbouring cell is solid: the face lies on an obstacle
    /// wall and the velocity is zero.
    Wall,
    /// On the outer boundary of a bounded grid: prescribed normal velocity.
    Boundary,
    /// Both neighbouring cells are solid.
    Solid,
}

/// Where the far end of a stencil edge sits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgeEnd {
    /// Another face at distance `h`.
    Face(usize),
    /// A no-slip obstacle wall at distance `h/2` (value zero).
    ObstacleWall,
    /// The square's boundary at distance `h/2`: entry `k` of the side's
    /// wall trace.
    DomainWall(Side, usize),
}

/// A grid together with its solid cells: the layout every staggered
/// operator with walls is defined on.
#[derive(Debug, Clone)]
pub struct MacLayout {
    pub grid: Grid,
    pub solid: Vec<bool>,
}

impl MacLayout {
    pub fn new(grid: Grid, solid: Vec<bool>) -> Result<Self> {
        if solid.len() != grid.cells() {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} cells, grid {}",
                solid.len(),
                grid.cells()
            )));
        }
        Ok(Self { grid, solid })
    }

    pub fn fluid(grid: Grid) -> Self {
        Self {
            grid,
            solid: vec![false; grid.cells()],
        }
    }

    pub fn fluid_mask(&self) -> Vec<bool> {
        self.solid.iter().map(|&s| !s).collect()
    }

    pub fn face_kind(&self, c: Comp, i: usize, j: usize) -> FaceKind {
        match self.grid.face_cells(c, i, j) {
            (Some(a), Some(b)) => match (self.solid[a], self.solid[b]) {
                (false, false) => FaceKind::Interior,
                (true, true) => FaceKind::Solid,
                _ => FaceKind::Wall,
            },
            _ => FaceKind::Boundary,
        }
    }

    /// Edges of the 5-point stencil around face `(i, j)` of component `c`.
    ///
    /// Each entry is `(weight, end)`: weight 1 for a neighbour at distance
    /// `h`, weight 2 for a wall at distance `h/2` (ghost value `2w - u`).
    /// Solid cells make the far end an obstacle wall.
    pub fn stencil_edges(&self, c: Comp, i: usize, j: usize) -> Vec<(f64, EdgeEnd)> {
        let g = &self.grid;
        let (w, hgt) = g.face_dims(c);
        let mut out = Vec::with_capacity(4);
        // along the component axis the neighbours of an interior face are
        // always real faces
        let cross_len = match c {
            Comp::X => hgt,
            Comp::Y => w,
        };
        for step in [-1isize, 1] {
            // along-axis neighbour
            let (ai, aj) = match c {
                Comp::X => (wrap(i, step, w, g.periodic), Some(j)),
                Comp::Y => (Some(i), wrap(j, step, hgt, g.periodic)),
            };
            if let (Some(a), Some(b)) = (ai, aj) {
                out.push((1.0, EdgeEnd::Face(g.face_index(c, a, b))));
            }
            // cross-axis neighbour
            let (ci, cj) = match c {
                Comp::X => (Some(i), wrap(j, step, cross_len, g.periodic)),
                Comp::Y => (wrap(i, step, cross_len, g.periodic), Some(j)),
            };
            match (ci, cj) {
                (Some(a), Some(b)) => match self.face_kind(c, a, b) {
                    FaceKind::Solid => out.push((2.0, EdgeEnd::ObstacleWall)),
                    _ => out.push((1.0, EdgeEnd::Face(g.face_index(c, a, b)))),
                },
                _ => {
                    let (side, k) = match (c, step) {
                        (Comp::X, -1) => (Side::Bottom, i),
                        (Comp::X, _) => (Side::Top, i),
                        (Comp::Y, -1) => (Side::Left, j),
                        (Comp::Y, _) => (Side::Right, j),
                    };
                    out.push((2.0, EdgeEnd::DomainWall(side, k)));
                }
            }
        }
        out
    }

    /// Value at the far end of an edge.
    pub fn edge_value(&self, field: &StaggeredField, c: Comp, end: EdgeEnd) -> f64 {
        match end {
            EdgeEnd::Face(k) => field.comp(c)[k],
            EdgeEnd::ObstacleWall => 0.0,
            EdgeEnd::DomainWall(s, k) => field.wall.side(s)[k],
        }
    }

    /// Faces of component `c` with unknown velocity, in index order.
    pub fn interior_faces(&self, c: Comp) -> Vec<(usize, usize)> {
        let (w, hgt) = self.grid.face_dims(c);
        let mut out = Vec::new();
        for j in 0..hgt {
            for i in 0..w {
                if self.face_kind(c, i, j) == FaceKind::Interior {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Zeroes every face that is not interior or on the outer boundary.
    pub fn zero_solid_faces(&self, field: &mut StaggeredField) {
        for c in Comp::BOTH {
            let (w, hgt) = self.grid.face_dims(c);
            for j in 0..hgt {
                for i in 0..w {
                    if matches!(self.face_kind(c, i, j), FaceKind::Wall | FaceKind::Solid) {
                        let k = self.grid.face_index(c, i, j);
                        field.comp_mut(c)[k] = 0.0;
                    }
                }
            }
        }
    }
}

fn wrap(i: usize, step: isize, len: usize, periodic: bool) -> Option<usize> {
    let k = i as isize + step;
    if periodic {
        Some(k.rem_euclid(len as isize) as usize)
    } else if k < 0 || k >= len as isize {
        None
    } else {
        Some(k as usize)
    }
}

/// Cell divergence `(u_E - u_W + v_N - v_S) / h`; zero on `solid` cells.
pub fn divergence(u: &StaggeredField, solid: Option<&[bool]>) -> Result<ScalarField> {
    let g = u.grid;
    if let Some(s) = solid {
        if s.len() != g.cells() {
            return Err(Error::DimensionMismatch("divergence mask".into()));
        }
    }
    let mut out = ScalarField::zeros(g);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.cell_index(i, j);
            if solid.is_some_and(|s| s[k]) {
                continue;
            }
            let (ie, jn) = if g.periodic {
                ((i + 1) % g.nx, (j + 1) % g.ny)
            } else {
                (i + 1, j + 1)
            };
            out.data[k] = (u.at(Comp::X, ie, j) - u.at(Comp::X, i, j) + u.at(Comp::Y, i, jn)
                - u.at(Comp::Y, i, j))
                / g.h;
        }
    }
    Ok(out)
}

/// Face gradient `(p_right - p_left) / h` on faces between two cells; faces
/// on the outer boundary of a bounded grid are left at zero.
pub fn gradient(p: &ScalarField) -> StaggeredField {
    let g = p.grid;
    let mut out = StaggeredField::zeros(g);
    for c in Comp::BOTH {
        let (w, hgt) = g.face_dims(c);
        for j in 0..hgt {
            for i in 0..w {
                if let (Some(a), Some(b)) = g.face_cells(c, i, j) {
                    let k = g.face_index(c, i, j);
                    out.comp_mut(c)[k] = (p.data[b] - p.data[a]) / g.h;
                }
            }
        }
    }
    out
}

/// Vector Laplacian on interior faces of `layout`, with obstacle and
/// domain walls entering through ghost elimination. Other faces get zero.
pub fn laplacian(u: &StaggeredField, layout: &MacLayout) -> Result<StaggeredField> {
    layout.grid.check_same(&u.grid)?;
    let g = layout.grid;
    let h2 = g.h * g.h;
    let mut out = StaggeredField::zeros(g);
    for c in Comp::BOTH {
        for (i, j) in layout.interior_faces(c) {
            let k = g.face_index(c, i, j);
            let centre = u.comp(c)[k];
            let mut acc = 0.0;
            for (w, end) in layout.stencil_edges(c, i, j) {
                acc += w * (layout.edge_value(u, c, end) - centre);
            }
            out.comp_mut(c)[k] = acc / h2;
        }
    }
    Ok(out)
}

/// `sqrt(sum h^2 v^2)` over cells where `mask` is true (all when `None`).
pub fn l2_norm(field: &ScalarField, mask: Option<&[bool]>) -> f64 {
    let h2 = field.grid.h * field.grid.h;
    field
        .data
        .iter()
        .enumerate()
        .filter(|(k, _)| mask.map_or(true, |m| m[*k]))
        .map(|(_, v)| h2 * v * v)
        .sum::<f64>()
        .sqrt()
}

/// Quadrature weight of a face: `h^2`, halved on the outer boundary.
pub fn face_weight(grid: &Grid, c: Comp, i: usize, j: usize) -> f64 {
    let h2 = grid.h * grid.h;
    if grid.periodic {
        return h2;
    }
    let on_boundary = match c {
        Comp::X => i == 0 || i == grid.nx,
        Comp::Y => j == 0 || j == grid.ny,
    };
    if on_boundary {
        0.5 * h2
    } else {
        h2
    }
}

/// L2 norm of a staggered field; `cell_mask` restricts to faces touching at
/// least one selected cell.
pub fn l2_norm_staggered(field: &StaggeredField, cell_mask: Option<&[bool]>) -> f64 {
    let g = field.grid;
    let mut s = 0.0;
    for c in Comp::BOTH {
        let (w, hgt) = g.face_dims(c);
        let vals = field.comp(c);
        for j in 0..hgt {
            for i in 0..w {
                if let Some(m) = cell_mask {
                    let (a, b) = g.face_cells(c, i, j);
                    let hit = a.is_some_and(|a| m[a]) || b.is_some_and(|b| m[b]);
                    if !hit {
                        continue;
                    }
                }
                let v = vals[g.face_index(c, i, j)];
                s += face_weight(&g, c, i, j) * v * v;
            }
        }
    }
    s.sqrt()
}

/// Inner product over faces with the quadrature weights of
/// [`l2_norm_staggered`].
pub fn inner_staggered(a: &StaggeredField, b: &StaggeredField) -> Result<f64> {
    a.grid.check_same(&b.grid)?;
    let g = a.grid;
    let mut s = 0.0;
    for c in Comp::BOTH {
        let (w, hgt) = g.face_dims(c);
        for j in 0..hgt {
            for i in 0..w {
                let k = g.face_index(c, i, j);
                s += face_weight(&g, c, i, j) * a.comp(c)[k] * b.comp(c)[k];
            }
        }
    }
    Ok(s)
}

pub fn inner_scalar(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    a.grid.check_same(&b.grid)?;
    let h2 = a.grid.h * a.grid.h;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| h2 * x * y).sum())
}

/// Boundary values of a bounded-grid field, one entry per boundary face:
/// `(side, normal component, tangential component)`. The tangential value
/// at a face midpoint is the mean of the two wall-trace vertices around it.
pub fn boundary_samples(u: &StaggeredField) -> Vec<(Side, f64, f64)> {
    let g = u.grid;
    let mut out = Vec::new();
    for side in Side::ALL {
        let normal = u.normal_trace(side);
        let t = u.wall.side(side);
        for (k, nv) in normal.into_iter().enumerate() {
            out.push((side, nv, 0.5 * (t[k] + t[k + 1])));
        }
    }
    debug_assert_eq!(out.len(), 2 * (g.nx + g.ny));
    out
}

/// `sqrt(sum_{boundary faces} h |u|^2)` over the four sides.
pub fn boundary_trace_norm(u: &StaggeredField) -> f64 {
    let h = u.grid.h;
    boundary_samples(u)
        .into_iter()
        .map(|(_, n, t)| h * (n * n + t * t))
        .sum::<f64>()
        .sqrt()
}

/// Discrete Dirichlet energy `||grad u||^2` on the fluid part of `layout`.
///
/// Sums squared differences over every stencil edge (weight 1 between
/// faces, weight 2 for half-spacing wall edges), so for fields vanishing on
/// all prescribed faces it equals `-<laplacian(u), u>`.
pub fn gradient_energy(u: &StaggeredField, layout: &MacLayout) -> f64 {
    let mut total = 0.0;
    for_each_edge(layout, |c, a, w, end| {
        let ua = u.comp(c)[a];
        let ub = layout.edge_value(u, c, end);
        total += w * (ub - ua) * (ub - ua);
    });
    total
}

/// Polarized form of [`gradient_energy`]: `sum w (da)(db)` over stencil
/// edges. Symmetric in its arguments bit for bit.
pub fn gradient_inner(a: &StaggeredField, b: &StaggeredField, layout: &MacLayout) -> f64 {
    let mut total = 0.0;
    for_each_edge(layout, |c, k, w, end| {
        let da = layout.edge_value(a, c, end) - a.comp(c)[k];
        let db = layout.edge_value(b, c, end) - b.comp(c)[k];
        total += w * (da * db);
    });
    total
}

/// Visits every edge of the velocity stencil graph once.
///
/// Callback arguments: component, index of the near face, edge weight, far
/// end. Faces at distance `h` are visited from the lower-indexed end; wall
/// edges from the face next to the wall. Edges inside solid cells are
/// skipped (both ends are zero).
pub fn for_each_edge(layout: &MacLayout, mut f: impl FnMut(Comp, usize, f64, EdgeEnd)) {
    let g = &layout.grid;
    for c in Comp::BOTH {
        let (w, hgt) = g.face_dims(c);
        for j in 0..hgt {
            for i in 0..w {
                let kind = layout.face_kind(c, i, j);
                if kind == FaceKind::Solid {
                    continue;
                }
                let k = g.face_index(c, i, j);
                // forward neighbours only: +1 along each axis
                for axis in [Comp::X, Comp::Y] {
                    let (ni, nj) = match axis {
                        Comp::X => (wrap(i, 1, w, g.periodic), Some(j)),
                        Comp::Y => (Some(i), wrap(j, 1, hgt, g.periodic)),
                    };
                    let along = axis == c;
                    match (ni, nj) {
                        (Some(a), Some(b)) => {
                            let nk = layout.face_kind(c, a, b);
                            if along {
                                // the cell between the two faces must be fluid
                                if !layout.solid[g.cell_index(i, j)] {
                                    f(c, k, 1.0, EdgeEnd::Face(g.face_index(c, a, b)));
                                }
                            } else if nk == FaceKind::Solid {
                                f(c, k, 2.0, EdgeEnd::ObstacleWall);
                            } else {
                                f(c, k, 1.0, EdgeEnd::Face(g.face_index(c, a, b)));
                            }
                        }
                        _ => {
                            if !along {
                                let side = match c {
                                    Comp::X => Side::Top,
                                    Comp::Y => Side::Right,
                                };
                                let idx = match c {
                                    Comp::X => i,
                                    Comp::Y => j,
                                };
                                f(c, k, 2.0, EdgeEnd::DomainWall(side, idx));
                            }
                        }
                    }
                }
                // backward cross-axis neighbour that is a wall
                let back = match c {
                    Comp::X => wrap(j, -1, hgt, g.periodic).map(|b| (i, b)),
                    Comp::Y => wrap(i, -1, w, g.periodic).map(|a| (a, j)),
                };
                match back {
                    Some((a, b)) => {
                        if layout.face_kind(c, a, b) == FaceKind::Solid {
                            f(c, k, 2.0, EdgeEnd::ObstacleWall);
                        }
                    }
                    None => {
                        let (side, idx) = match c {
                            Comp::X => (Side::Bottom, i),
                            Comp::Y => (Side::Left, j),
                        };
                        f(c, k, 2.0, EdgeEnd::DomainWall(side, idx));
                    }
                }
            }
        }
    }
}

const MAGIC: &[u8; 4] = b"DHF1";

/// Writes a scalar field: magic, kind 0, nx, ny, periodic flag, h, then
/// row-major little-endian `f64` values.
pub fn write_scalar(path: &Path, f: &ScalarField) -> Result<()> {
    let mut out = header(0, &f.grid);
    for v in &f.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &out)
}

/// Writes a staggered field: header with kind 1, x-faces, y-faces, then the
/// left, right, bottom and top wall traces (empty on periodic grids).
pub fn write_staggered(path: &Path, f: &StaggeredField) -> Result<()> {
    let mut out = header(1, &f.grid);
    for v in f
        .u
        .iter()
        .chain(&f.v)
        .chain(&f.wall.left)
        .chain(&f.wall.right)
        .chain(&f.wall.bottom)
        .chain(&f.wall.top)
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &out)
}

fn header(kind: u32, g: &Grid) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&(g.nx as u64).to_le_bytes());
    out.extend_from_slice(&(g.ny as u64).to_le_bytes());
    out.extend_from_slice(&u32::from(g.periodic).to_le_bytes());
    out.extend_from_slice(&g.h.to_le_bytes());
    out
}

/// Writes through a temporary file and a rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_header(bytes: &mut &[u8]) -> Result<(u32, Grid)> {
    let mut magic = [0u8; 4];
    bytes.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Io("not a field container".into()));
    }
    let kind = read_u32(bytes)?;
    let nx = read_u64(bytes)? as usize;
    let ny = read_u64(bytes)? as usize;
    let periodic = read_u32(bytes)? != 0;
    let h = read_f64(bytes)?;
    Ok((kind, Grid { nx, ny, h, periodic }))
}

fn read_u32(b: &mut &[u8]) -> Result<u32> {
    let mut x = [0u8; 4];
    b.read_exact(&mut x)?;
    Ok(u32::from_le_bytes(x))
}

fn read_u64(b: &mut &[u8]) -> Result<u64> {
    let mut x = [0u8; 8];
    b.read_exact(&mut x)?;
    Ok(u64::from_le_bytes(x))
}

fn read_f64(b: &mut &[u8]) -> Result<f64> {
    let mut x = [0u8; 8];
    b.read_exact(&mut x)?;
    Ok(f64::from_le_bytes(x))
}

fn read_vec(b: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(b)).collect()
}

pub fn read_scalar(path: &Path) -> Result<ScalarField> {
    let raw = std::fs::read(path)?;
    let mut b = raw.as_slice();
    let (kind, grid) = read_header(&mut b)?;
    if kind != 0 {
        return Err(Error::Io("expected a scalar field".into()));
    }
    let data = read_vec(&mut b, grid.cells())?;
    Ok(ScalarField { grid, data })
}

pub fn read_staggered(path: &Path) -> Result<StaggeredField> {
    let raw = std::fs::read(path)?;
    let mut b = raw.as_slice();
    let (kind, grid) = read_header(&mut b)?;
    if kind != 1 {
        return Err(Error::Io("expected a staggered field".into()));
    }
    let u = read_vec(&mut b, grid.face_count(Comp::X))?;
    let v = read_vec(&mut b, grid.face_count(Comp::Y))?;
    let mut wall = WallTrace::zeros(&grid);
    for s in Side::ALL {
        let n = wall.side(s).len();
        *wall.side_mut(s) = read_vec(&mut b, n)?;
    }
    Ok(StaggeredField { grid, u, v, wall })
}

/// CSV dump `i,j,x,y,value` for inspection.
pub fn scalar_csv(f: &ScalarField) -> String {
    let mut s = String::from("i,j,x,y,value\n");
    for j in 0..f.grid.ny {
        for i in 0..f.grid.nx {
            let (x, y) = f.grid.cell_center(i, j);
            s.push_str(&format!("{i},{j},{x},{y},{:e}\n", f.at(i, j)));
        }
    }
    s
}

/// CSV dump `component,i,j,x,y,value` over faces.
pub fn staggered_csv(f: &StaggeredField) -> String {
    let mut s = String::from("component,i,j,x,y,value\n");
    for c in Comp::BOTH {
        let (w, hgt) = f.grid.face_dims(c);
        let name = match c {
            Comp::X => "x",
            Comp::Y => "y",
        };
        for j in 0..hgt {
            for i in 0..w {
                let (x, y) = f.grid.face_position(c, i, j);
                s.push_str(&format!("{name},{i},{j},{x},{y},{:e}\n", f.at(c, i, j)));
            }
        }
    }
    s
}
