//! Admissible finite-volume meshes and piecewise-constant fields.
//!
//! The mesh stores generic two-point flux data (cell measures, edge
//! transmissibilities, boundary flags) so that any admissible mesh fits the
//! same type. Only uniform rectangular meshes are built here: cells are
//! axis-aligned, indexed row-major with `y` outer (`id = j * nx + i`), and the
//! cell centre is the centroid.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KsError, Result};

/// Axis-aligned rectangle `(x_min, x_max) x (y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Self { x_min, x_max, y_min, y_max }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    /// Open-set membership.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] > self.x_min && p[0] < self.x_max && p[1] > self.y_min && p[1] < self.y_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub measure: f64,
    pub center: [f64; 2],
}

/// Edge `sigma = K|L` shared by two control volumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteriorEdge {
    pub k: usize,
    pub l: usize,
    pub length: f64,
    pub center_distance: f64,
    /// `m(sigma) / d(x_K, x_L)`
    pub transmissibility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    pub k: usize,
    pub length: f64,
    /// `d(x_K, sigma)`
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    cells: Vec<Cell>,
    interior_edges: Vec<InteriorEdge>,
    boundary_edges: Vec<BoundaryEdge>,
    /// Interior edge ids touching each cell.
    adjacency: Vec<Vec<usize>>,
    domain: Rect,
    nx: usize,
    ny: usize,
}

impl Mesh {
    /// Builds the uniform `nx x ny` rectangular mesh of `domain`.
    pub fn rect(domain: Rect, nx: usize, ny: usize) -> Result<Self> {
        let finite = [domain.x_min, domain.x_max, domain.y_min, domain.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || domain.x_max <= domain.x_min {
            return Err(KsError::InvalidDomain(format!(
                "need a < b, got a={}, b={}",
                domain.x_min, domain.x_max
            )));
        }
        if domain.y_max <= domain.y_min {
            return Err(KsError::InvalidDomain(format!(
                "need c < d, got c={}, d={}",
                domain.y_min, domain.y_max
            )));
        }
        if nx == 0 || ny == 0 {
            return Err(KsError::ZeroCount { nx, ny });
        }

        let dx = (domain.x_max - domain.x_min) / nx as f64;
        let dy = (domain.y_max - domain.y_min) / ny as f64;
        let id = |i: usize, j: usize| j * nx + i;

        let mut cells = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                cells.push(Cell {
                    measure: dx * dy,
                    center: [
                        domain.x_min + (i as f64 + 0.5) * dx,
                        domain.y_min + (j as f64 + 0.5) * dy,
                    ],
                });
            }
        }

        let mut interior_edges = Vec::with_capacity(ny * (nx - 1) + nx * (ny - 1));
        let mut boundary_edges = Vec::with_capacity(2 * (nx + ny));
        for j in 0..ny {
            for i in 0..nx {
                let k = id(i, j);
                if i + 1 < nx {
                    interior_edges.push(InteriorEdge {
                        k,
                        l: id(i + 1, j),
                        length: dy,
                        center_distance: dx,
                        transmissibility: dy / dx,
                    });
                }
                if j + 1 < ny {
                    interior_edges.push(InteriorEdge {
                        k,
                        l: id(i, j + 1),
                        length: dx,
                        center_distance: dy,
                        transmissibility: dx / dy,
                    });
                }
                if i == 0 {
                    boundary_edges.push(BoundaryEdge { k, length: dy, distance: dx / 2.0 });
                }
                if i + 1 == nx {
                    boundary_edges.push(BoundaryEdge { k, length: dy, distance: dx / 2.0 });
                }
                if j == 0 {
                    boundary_edges.push(BoundaryEdge { k, length: dx, distance: dy / 2.0 });
                }
                if j + 1 == ny {
                    boundary_edges.push(BoundaryEdge { k, length: dx, distance: dy / 2.0 });
                }
            }
        }

        let mut adjacency = vec![Vec::with_capacity(4); nx * ny];
        for (e, edge) in interior_edges.iter().enumerate() {
            adjacency[edge.k].push(e);
            adjacency[edge.l].push(e);
        }

        Ok(Self { cells, interior_edges, boundary_edges, adjacency, domain, nx, ny })
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn interior_edges(&self) -> &[InteriorEdge] {
        &self.interior_edges
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    /// Interior edge ids incident to cell `k`.
    pub fn cell_edges(&self, k: usize) -> &[usize] {
        &self.adjacency[k]
    }

    pub fn measure(&self, k: usize) -> f64 {
        self.cells[k].measure
    }

    pub fn center(&self, k: usize) -> [f64; 2] {
        self.cells[k].center
    }

    pub fn domain(&self) -> Rect {
        self.domain
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn total_measure(&self) -> f64 {
        self.cells.iter().map(|c| c.measure).sum()
    }

    /// `(sum_K m(K) |v_K|^p)^(1/p)`
    pub fn lp_norm(&self, v: &[f64], p: f64) -> Result<f64> {
        if !(p.is_finite() && p >= 1.0) {
            return Err(KsError::InvalidParameter(format!("p must be finite and >= 1, got {p}")));
        }
        self.check_len(v.len())?;
        let s: f64 = self
            .cells
            .iter()
            .zip(v)
            .map(|(c, x)| c.measure * x.abs().powf(p))
            .sum();
        Ok(s.powf(1.0 / p))
    }

    /// Discrete L2 norm; the workhorse of the error and selection criteria.
    pub fn l2_norm(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.cells.len());
        self.cells
            .iter()
            .zip(v)
            .map(|(c, x)| c.measure * x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Discrete L2 norm of `a - b`.
    pub fn l2_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        self.cells
            .iter()
            .zip(a.iter().zip(b))
            .map(|(c, (x, y))| c.measure * (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// `(sum_sigma tau_sigma |D_sigma v|^2)^(1/2)`; boundary edges contribute zero.
    pub fn h1_seminorm(&self, v: &[f64]) -> Result<f64> {
        self.check_len(v.len())?;
        let s: f64 = self
            .interior_edges
            .iter()
            .map(|e| {
                let d = v[e.k] - v[e.l];
                e.transmissibility * d * d
            })
            .sum();
        Ok(s.sqrt())
    }

    /// `||v||_2 + |v|_1`
    pub fn h1_norm(&self, v: &[f64]) -> Result<f64> {
        Ok(self.lp_norm(v, 2.0)? + self.h1_seminorm(v)?)
    }

    /// Measure-weighted sum of the field (the "mass").
    pub fn integral(&self, v: &[f64]) -> f64 {
        self.cells.iter().zip(v).map(|(c, x)| c.measure * x).sum()
    }

    #[cfg(test)]
    pub(crate) fn with_reversed_edges(&self) -> Self {
        let mut m = self.clone();
        m.interior_edges.reverse();
        for adj in m.adjacency.iter_mut() {
            adj.clear();
        }
        for (e, edge) in m.interior_edges.iter().enumerate() {
            m.adjacency[edge.k].push(e);
            m.adjacency[edge.l].push(e);
        }
        m
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len != self.cells.len() {
            return Err(KsError::DimensionMismatch { expected: self.cells.len(), got: len });
        }
        Ok(())
    }
}

/// Instantiates the uniform rectangular mesh.
pub fn build_rect_mesh(domain: Rect, nx: usize, ny: usize) -> Result<Mesh> {
    Mesh::rect(domain, nx, ny)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    CellDensity,
    Concentration,
}

/// One value per control volume at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub values: Vec<f64>,
    pub quantity: Quantity,
}

impl Field {
    pub fn new(values: Vec<f64>, quantity: Quantity) -> Self {
        Self { values, quantity }
    }

    pub fn density(values: Vec<f64>) -> Self {
        Self::new(values, Quantity::CellDensity)
    }

    pub fn concentration(values: Vec<f64>) -> Self {
        Self::new(values, Quantity::Concentration)
    }

    pub fn constant(mesh: &Mesh, value: f64, quantity: Quantity) -> Self {
        Self::new(vec![value; mesh.num_cells()], quantity)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn check_mesh(&self, mesh: &Mesh) -> Result<()> {
        mesh.check_len(self.values.len())
    }
}

/// Discrete L^p norm of a field.
pub fn discrete_lp_norm(mesh: &Mesh, v: &Field, p: f64) -> Result<f64> {
    mesh.lp_norm(&v.values, p)
}

pub fn h1_seminorm(mesh: &Mesh, v: &Field) -> Result<f64> {
    mesh.h1_seminorm(&v.values)
}

pub fn h1_norm(mesh: &Mesh, v: &Field) -> Result<f64> {
    mesh.h1_norm(&v.values)
}

/// Writes `x,y,value` rows in cell order with 17 significant digits.
pub fn write_field_csv<W: Write>(mesh: &Mesh, field: &Field, mut out: W) -> Result<()> {
    field.check_mesh(mesh)?;
    out.write_all(b"x,y,value\n")?;
    for (cell, v) in mesh.cells().iter().zip(&field.values) {
        writeln!(out, "{:.16e},{:.16e},{:.16e}", cell.center[0], cell.center[1], v)?;
    }
    Ok(())
}

pub fn save_field_csv(mesh: &Mesh, field: &Field, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_field_csv(mesh, field, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`save_field_csv`] back for the same mesh.
pub fn load_field_csv(mesh: &Mesh, path: &Path, quantity: Quantity) -> Result<Field> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("x,y,value") {
        return Err(KsError::Io(format!("{}: missing x,y,value header", path.display())));
    }
    let mut values = Vec::with_capacity(mesh.num_cells());
    for (i, line) in lines.enumerate() {
        let v = line
            .rsplit(',')
            .next()
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| KsError::Io(format!("{}: bad row {}", path.display(), i + 2)))?;
        values.push(v);
    }
    let field = Field::new(values, quantity);
    field.check_mesh(mesh)?;
    Ok(field)
}
