//! Actuator layouts and their node-vector evaluations.
//!
//! The domain is tiled by `M^d` congruent cells. In 2-D each cell is split
//! into 2×2 quadrants, in 1-D into 3 sub-intervals. Every sub-cell carries one
//! actuator box centred in it with a quarter of the sub-cell side per axis, so
//! the boxes cover `(1/4)^d` of the domain whatever `M` is. Per cell, the
//! top-right quadrant (rightmost sub-interval in 1-D) drives the heat equation
//! and the others drive the order parameter, listed bottom-left, bottom-right,
//! top-left. Cells are enumerated with `x₁` fastest.
//!
//! Indicator columns use the closed box. The auxiliary columns evaluate the
//! sine bump `φ(z) = ∏ sin(π (z_n + l_n) / (2 l_n))` in box-centred
//! coordinates: `φ²` for the order family and `φ` for the heat family.

use std::fmt::Write as _;
use std::f64::consts::PI;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridOperators, GridSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Order-parameter actuators `U_M`.
    Order,
    /// Heat actuators `V_M`.
    Heat,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Order => "order",
            Family::Heat => "heat",
        }
    }
}

/// Axis-aligned box; unused coordinates are zero in 1-D.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    pub fn half_widths(&self) -> [f64; 2] {
        [
            0.5 * (self.max[0] - self.min[0]),
            0.5 * (self.max[1] - self.min[1]),
        ]
    }

    pub fn measure(&self, d: usize) -> f64 {
        (0..d).map(|k| self.max[k] - self.min[k]).product()
    }

    fn contains_closed(&self, x: [f64; 2], d: usize, tol: f64) -> bool {
        (0..d).all(|k| x[k] >= self.min[k] - tol && x[k] <= self.max[k] + tol)
    }

    fn contains_strictly(&self, x: [f64; 2], d: usize, tol: f64) -> bool {
        (0..d).all(|k| x[k] > self.min[k] + tol && x[k] < self.max[k] - tol)
    }

    fn overlaps(&self, other: &Rect, d: usize) -> bool {
        (0..d).all(|k| self.min[k] < other.max[k] && other.min[k] < self.max[k])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActuatorLayout {
    pub level: usize,
    pub dim: usize,
    pub domain: [f64; 2],
    pub order: Vec<Rect>,
    pub heat: Vec<Rect>,
}

impl ActuatorLayout {
    /// `M_σ = (d+1) M^d`
    pub fn m_sigma(&self) -> usize {
        self.order.len()
    }

    /// `M_ς = M^d`
    pub fn m_varsigma(&self) -> usize {
        self.heat.len()
    }

    pub fn rects(&self, family: Family) -> &[Rect] {
        match family {
            Family::Order => &self.order,
            Family::Heat => &self.heat,
        }
    }

    pub fn domain_volume(&self) -> f64 {
        self.domain[..self.dim].iter().product()
    }

    pub fn covered_volume(&self) -> f64 {
        self.order
            .iter()
            .chain(&self.heat)
            .map(|r| r.measure(self.dim))
            .sum()
    }

    pub fn coverage(&self) -> f64 {
        self.covered_volume() / self.domain_volume()
    }

    /// One line per box: `family index min... max...`, preceded by a header.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# dim {} level {} domain {:.17e} {:.17e}",
            self.dim, self.level, self.domain[0], self.domain[1]
        );
        let _ = writeln!(s, "family index min_x1 min_x2 max_x1 max_x2");
        for family in [Family::Order, Family::Heat] {
            for (i, r) in self.rects(family).iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{} {} {:.17e} {:.17e} {:.17e} {:.17e}",
                    family.as_str(),
                    i,
                    r.min[0],
                    r.min[1],
                    r.max[0],
                    r.max[1]
                );
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::InvalidLayout(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty layout file"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 8 || h[0] != "#" || h[1] != "dim" || h[3] != "level" || h[5] != "domain" {
            return Err(bad(1, "malformed header"));
        }
        let num = |s: &str, line: usize| s.parse::<f64>().map_err(|_| bad(line, "bad number"));
        let dim = h[2].parse().map_err(|_| bad(1, "bad dimension"))?;
        let level = h[4].parse().map_err(|_| bad(1, "bad level"))?;
        let domain = [num(h[6], 1)?, num(h[7], 1)?];
        let mut layout = ActuatorLayout {
            level,
            dim,
            domain,
            order: Vec::new(),
            heat: Vec::new(),
        };
        for (i, line) in lines {
            let ln = i + 1;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() || f[0] == "family" {
                continue;
            }
            if f.len() != 6 {
                return Err(bad(ln, "expected 6 fields"));
            }
            let rect = Rect {
                min: [num(f[2], ln)?, num(f[3], ln)?],
                max: [num(f[4], ln)?, num(f[5], ln)?],
            };
            match f[0] {
                "order" => layout.order.push(rect),
                "heat" => layout.heat.push(rect),
                other => return Err(bad(ln, &format!("unknown family `{other}`"))),
            }
        }
        Ok(layout)
    }
}

/// Builds the level-`level` layout on the domain of `spec` and checks that
/// the mesh of `spec` resolves every box.
pub fn build_layout(level: usize, spec: &GridSpec) -> Result<ActuatorLayout> {
    spec.validate()?;
    if level == 0 {
        return Err(Error::InvalidLayout("level M must be at least 1".into()));
    }
    let d = spec.dim();
    let mut domain = [0.0; 2];
    domain[..d].copy_from_slice(&spec.lengths);
    let mut order = Vec::new();
    let mut heat = Vec::new();
    let m = level as f64;

    if d == 1 {
        let cell = domain[0] / m;
        let sub = cell / 3.0;
        for c in 0..level {
            for s in 0..3 {
                let centre = c as f64 * cell + (s as f64 + 0.5) * sub;
                let r = Rect {
                    min: [centre - sub / 8.0, 0.0],
                    max: [centre + sub / 8.0, 0.0],
                };
                if s == 2 {
                    heat.push(r);
                } else {
                    order.push(r);
                }
            }
        }
    } else {
        let cell = [domain[0] / m, domain[1] / m];
        let quad = [cell[0] / 2.0, cell[1] / 2.0];
        // bottom-left, bottom-right, top-left, then top-right (heat)
        const QUADRANTS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
        for cy in 0..level {
            for cx in 0..level {
                for (q, &(qx, qy)) in QUADRANTS.iter().enumerate() {
                    let centre = [
                        cx as f64 * cell[0] + (qx as f64 + 0.5) * quad[0],
                        cy as f64 * cell[1] + (qy as f64 + 0.5) * quad[1],
                    ];
                    let half = [quad[0] / 8.0, quad[1] / 8.0];
                    let r = Rect {
                        min: [centre[0] - half[0], centre[1] - half[1]],
                        max: [centre[0] + half[0], centre[1] + half[1]],
                    };
                    if q == 3 {
                        heat.push(r);
                    } else {
                        order.push(r);
                    }
                }
            }
        }
    }

    let layout = ActuatorLayout {
        level,
        dim: d,
        domain,
        order,
        heat,
    };
    check_layout(&layout)?;
    check_resolution(&layout, spec)?;
    Ok(layout)
}

fn check_layout(layout: &ActuatorLayout) -> Result<()> {
    let d = layout.dim;
    let all: Vec<&Rect> = layout.order.iter().chain(&layout.heat).collect();
    for (i, a) in all.iter().enumerate() {
        for k in 0..d {
            if a.min[k] < 0.0 || a.max[k] > layout.domain[k] || a.min[k] >= a.max[k] {
                return Err(Error::InvalidLayout(format!("box {i} is not inside the domain")));
            }
        }
        for b in &all[i + 1..] {
            if a.overlaps(b, d) {
                return Err(Error::InvalidLayout(format!("box {i} overlaps another box")));
            }
        }
    }
    // the d+1 order actuators of each cell must not share a hyperplane
    let per_cell = d + 1;
    for (c, group) in layout.order.chunks(per_cell).enumerate() {
        let p: Vec<[f64; 2]> = group.iter().map(Rect::center).collect();
        let scale = layout.domain[0].max(layout.domain[1]);
        let degenerate = if d == 1 {
            (p[1][0] - p[0][0]).abs() <= 1e-12 * scale
        } else {
            let cross = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
                - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
            cross.abs() <= 1e-12 * scale * scale
        };
        if degenerate {
            return Err(Error::InvalidLayout(format!(
                "order actuator centres of cell {c} lie on a common hyperplane"
            )));
        }
    }
    Ok(())
}

fn node_tolerance(spec: &GridSpec) -> f64 {
    1e-9 * (0..spec.dim()).map(|k| spec.spacing(k)).fold(f64::INFINITY, f64::min)
}

fn check_resolution(layout: &ActuatorLayout, spec: &GridSpec) -> Result<()> {
    let d = layout.dim;
    let tol = node_tolerance(spec);
    for family in [Family::Order, Family::Heat] {
        for (i, r) in layout.rects(family).iter().enumerate() {
            // a node strictly inside exists iff some grid line falls strictly
            // between the box faces along every axis
            let resolved = (0..d).all(|k| {
                let h = spec.spacing(k);
                let first = ((r.min[k] + tol) / h).floor() as i64 + 1;
                (first as f64) * h < r.max[k] - tol
            });
            if !resolved {
                return Err(Error::InvalidLayout(format!(
                    "{} actuator {i} contains no interior grid node; refine the mesh or lower M",
                    family.as_str()
                )));
            }
        }
    }
    Ok(())
}

/// Node-vector matrices of one layout on one grid.
#[derive(Clone, Debug)]
pub struct ActuatorFamily {
    pub layout: ActuatorLayout,
    /// `[U_M]`, indicators of the order boxes.
    pub u: Mat<f64>,
    /// `[V_M]`, indicators of the heat boxes.
    pub v: Mat<f64>,
    /// `[Ũ_M]`, `φ²` bumps.
    pub u_tilde: Mat<f64>,
    /// `[Ṽ_M]`, `φ` bumps.
    pub v_tilde: Mat<f64>,
}

impl ActuatorFamily {
    pub fn indicators(&self, family: Family) -> &Mat<f64> {
        match family {
            Family::Order => &self.u,
            Family::Heat => &self.v,
        }
    }

    pub fn auxiliary(&self, family: Family) -> &Mat<f64> {
        match family {
            Family::Order => &self.u_tilde,
            Family::Heat => &self.v_tilde,
        }
    }

    pub fn count(&self, family: Family) -> usize {
        self.indicators(family).ncols()
    }
}

/// The bump `φ` of box `r` at `x`; zero outside the closed box.
pub fn bump(r: &Rect, x: [f64; 2], d: usize) -> f64 {
    let c = r.center();
    let l = r.half_widths();
    let mut v = 1.0;
    for k in 0..d {
        let z = x[k] - c[k];
        if z.abs() >= l[k] {
            return 0.0;
        }
        v *= (PI * (z + l[k]) / (2.0 * l[k])).sin();
    }
    v
}

pub fn evaluate_family(layout: &ActuatorLayout, ops: &GridOperators) -> Result<ActuatorFamily> {
    if layout.dim != ops.dim() {
        return Err(Error::InvalidLayout(format!(
            "layout is {}-D but the grid is {}-D",
            layout.dim,
            ops.dim()
        )));
    }
    check_resolution(layout, &ops.spec)?;
    let d = layout.dim;
    let n = ops.n_nodes();
    let tol = node_tolerance(&ops.spec);
    let eval = |rects: &[Rect], squared: bool| {
        let mut ind = Mat::<f64>::zeros(n, rects.len());
        let mut aux = Mat::<f64>::zeros(n, rects.len());
        for (j, r) in rects.iter().enumerate() {
            for (i, &x) in ops.coords.iter().enumerate() {
                if r.contains_closed(x, d, tol) {
                    ind[(i, j)] = 1.0;
                    if r.contains_strictly(x, d, tol) {
                        let phi = bump(r, x, d);
                        aux[(i, j)] = if squared { phi * phi } else { phi };
                    }
                }
            }
        }
        (ind, aux)
    };
    let (u, u_tilde) = eval(&layout.order, true);
    let (v, v_tilde) = eval(&layout.heat, false);
    Ok(ActuatorFamily {
        layout: layout.clone(),
        u,
        v,
        u_tilde,
        v_tilde,
    })
}
