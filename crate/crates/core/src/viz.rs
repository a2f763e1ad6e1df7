//! Projection of high-dimensional samples onto the plane through
//! `a = e1`, `b = e2`, `c = e3`, with critic contour grids, written as CSV
//! and SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Matrix, Network, Vector};

pub const DEFAULT_RESOLUTION: usize = 64;

/// Origin `a` and orthonormal in-plane axes `u`, `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionFrame {
    pub origin: Vector,
    pub u: Vector,
    pub v: Vector,
}

impl ProjectionFrame {
    pub fn dim(&self) -> usize {
        self.origin.len()
    }
}

/// Frame of the plane through the first three standard basis vectors:
/// `u` along `b - a`, `v` the normalized part of `c - a` orthogonal to `u`,
/// so `c` has positive `y`.
pub fn plane_basis(dim: usize) -> Result<ProjectionFrame> {
    if dim < 3 {
        return Err(Error::InvalidArgument(format!("projection needs dim >= 3, got {dim}")));
    }
    let e = |i: usize| {
        let mut v = Vector::zeros(dim);
        v[i] = 1.0;
        v
    };
    let (a, b, c) = (e(0), e(1), e(2));
    let ba = &b - &a;
    let u = &ba / ba.dot(&ba).sqrt();
    let ca = &c - &a;
    let resid = &ca - &(&u * ca.dot(&u));
    let v = &resid / resid.dot(&resid).sqrt();
    Ok(ProjectionFrame { origin: a, u, v })
}

/// `(x, y) = ((p - a) . u, (p - a) . v)` per row.
pub fn project(points: &Matrix, frame: &ProjectionFrame) -> Result<Matrix> {
    if points.ncols() != frame.dim() {
        return Err(Error::DimensionMismatch { expected: frame.dim(), got: points.ncols(), context: "projection" });
    }
    let centered = points - &frame.origin;
    let mut out = Matrix::zeros((points.nrows(), 2));
    out.column_mut(0).assign(&centered.dot(&frame.u));
    out.column_mut(1).assign(&centered.dot(&frame.v));
    Ok(out)
}

/// `a + x u + y v` per row of an `n x 2` matrix.
pub fn lift(coords: &Matrix, frame: &ProjectionFrame) -> Result<Matrix> {
    if coords.ncols() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: coords.ncols(), context: "plane coordinates" });
    }
    let mut out = Matrix::from_shape_fn((coords.nrows(), frame.dim()), |(_, c)| frame.origin[c]);
    for (mut row, xy) in out.outer_iter_mut().zip(coords.outer_iter()) {
        row.scaled_add(xy[0], &frame.u);
        row.scaled_add(xy[1], &frame.v);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    /// Min/max of all projected points per axis, widened by 10% of the
    /// range on each side (by 1 when the range is zero).
    pub fn around(projected: &[&Matrix]) -> Result<Self> {
        let mut b = Bounds {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for m in projected {
            for r in m.outer_iter() {
                b.x_min = b.x_min.min(r[0]);
                b.x_max = b.x_max.max(r[0]);
                b.y_min = b.y_min.min(r[1]);
                b.y_max = b.y_max.max(r[1]);
            }
        }
        if !b.x_min.is_finite() || !b.y_min.is_finite() || !b.x_max.is_finite() || !b.y_max.is_finite() {
            return Err(Error::EmptyBatch("projection bounds"));
        }
        let pad = |lo: f64, hi: f64| if hi > lo { 0.1 * (hi - lo) } else { 1.0 };
        let (px, py) = (pad(b.x_min, b.x_max), pad(b.y_min, b.y_max));
        Ok(Bounds { x_min: b.x_min - px, x_max: b.x_max + px, y_min: b.y_min - py, y_max: b.y_max + py })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }
}

/// Critic values on a regular grid; `values[[iy, ix]]` is the value at
/// `(xs[ix], ys[iy])`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Matrix,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Evaluates `sum_j v_j D_j` at grid points lifted into the ambient space.
pub fn contour_grid(
    critics: &[Network],
    weights: &[f64],
    frame: &ProjectionFrame,
    bounds: &Bounds,
    resolution: usize,
) -> Result<ContourGrid> {
    if resolution < 2 {
        return Err(Error::InvalidArgument("grid resolution must be at least 2".into()));
    }
    if critics.len() != weights.len() || critics.is_empty() {
        return Err(Error::InvalidArgument("one weight per critic".into()));
    }
    let xs = linspace(bounds.x_min, bounds.x_max, resolution);
    let ys = linspace(bounds.y_min, bounds.y_max, resolution);
    let coords = Matrix::from_shape_fn((resolution * resolution, 2), |(k, c)| {
        if c == 0 {
            xs[k % resolution]
        } else {
            ys[k / resolution]
        }
    });
    let points = lift(&coords, frame)?;
    let mut flat = Vector::zeros(points.nrows());
    for (d, w) in critics.iter().zip(weights) {
        if d.output_dim() != 1 {
            return Err(Error::InvalidArgument("contours need scalar critics".into()));
        }
        flat.scaled_add(*w, &d.forward(&points)?.column(0));
    }
    let values = flat.into_shape_with_order((resolution, resolution)).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok(ContourGrid { xs, ys, values })
}

/// Everything one projection figure shows.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionPlot {
    /// Projected real samples, `n x 2`.
    pub real: Matrix,
    /// Projected generated samples, `m x 2`.
    pub fake: Matrix,
    /// Generator (0-based) of each generated sample.
    pub fake_generator: Vec<usize>,
    pub grid: Option<ContourGrid>,
}

impl ProjectionPlot {
    /// Rows `kind,generator_index,x,y,value`; fields that do not apply are
    /// empty. Generator indices are 1-based.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,generator_index,x,y,value\n");
        for r in self.real.outer_iter() {
            let _ = writeln!(s, "real,,{},{},", r[0], r[1]);
        }
        for (r, g) in self.fake.outer_iter().zip(&self.fake_generator) {
            let _ = writeln!(s, "fake,{},{},{},", g + 1, r[0], r[1]);
        }
        if let Some(grid) = &self.grid {
            for (iy, y) in grid.ys.iter().enumerate() {
                for (ix, x) in grid.xs.iter().enumerate() {
                    let _ = writeln!(s, "grid,,{x},{y},{}", grid.values[[iy, ix]]);
                }
            }
        }
        s
    }

    /// Self-contained SVG: contour cells on a blue-white-red scale, real
    /// samples as red dots, generated samples as blue dots.
    pub fn to_svg(&self) -> Result<String> {
        let size = 480.0;
        let bounds = match &self.grid {
            Some(g) => Bounds {
                x_min: g.xs[0],
                x_max: *g.xs.last().expect("resolution >= 2"),
                y_min: g.ys[0],
                y_max: *g.ys.last().expect("resolution >= 2"),
            },
            None => Bounds::around(&[&self.real, &self.fake])?,
        };
        let sx = |x: f64| (x - bounds.x_min) / (bounds.x_max - bounds.x_min) * size;
        let sy = |y: f64| size - (y - bounds.y_min) / (bounds.y_max - bounds.y_min) * size;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
        );
        let _ = writeln!(s, r##"<rect width="{size}" height="{size}" fill="#ffffff"/>"##);
        if let Some(g) = &self.grid {
            let (lo, hi) = g.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let (nx, ny) = (g.xs.len(), g.ys.len());
            let (cw, ch) = (size / nx as f64, size / ny as f64);
            for iy in 0..ny {
                for ix in 0..nx {
                    let t = if hi > lo { (g.values[[iy, ix]] - lo) / (hi - lo) } else { 0.5 };
                    let _ = writeln!(
                        s,
                        r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                        ix as f64 * cw,
                        size - (iy + 1) as f64 * ch,
                        cw + 0.5,
                        ch + 0.5,
                        diverging(t)
                    );
                }
            }
        }
        for (m, color) in [(&self.real, "#d62728"), (&self.fake, "#1f77b4")] {
            for r in m.outer_iter() {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{color}" fill-opacity="0.6"/>"#,
                    sx(r[0]),
                    sy(r[1])
                );
            }
        }
        s.push_str("</svg>\n");
        Ok(s)
    }

    pub fn write(&self, csv_path: &Path, svg_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv())?;
        fs::write(svg_path, self.to_svg()?)?;
        Ok(())
    }
}

/// Blue (0) through white (0.5) to red (1).
fn diverging(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let k = t / 0.5;
        (59.0 + k * 196.0, 76.0 + k * 179.0, 192.0 + k * 63.0)
    } else {
        let k = (t - 0.5) / 0.5;
        (255.0 - k * 75.0, 255.0 - k * 251.0, 255.0 - k * 217.0)
    };
    format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Layer, NetworkSpec};
    use crate::rng;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn basis_is_orthonormal() {
        let f = plane_basis(10).unwrap();
        assert!((f.u.dot(&f.u) - 1.0).abs() < 1e-15);
        assert!((f.v.dot(&f.v) - 1.0).abs() < 1e-15);
        assert!(f.u.dot(&f.v).abs() < 1e-15);
        assert!(plane_basis(2).is_err());
    }

    #[test]
    fn anchor_points() {
        let f = plane_basis(5).unwrap();
        let pts = Matrix::from_shape_fn((3, 5), |(r, c)| (r == c) as u8 as f64);
        let p = project(&pts, &f).unwrap();
        assert!(p.row(0).iter().all(|v| v.abs() < 1e-15));
        assert!((p[[1, 0]] - 2f64.sqrt()).abs() < 1e-12 && p[[1, 1]].abs() < 1e-12);
        assert!((p[[2, 0]] - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((p[[2, 1]] - 1.5f64.sqrt()).abs() < 1e-12);
        let inplane = (&f.origin + &(&f.u * 3.0) + &(&f.v * 4.0)).insert_axis(ndarray::Axis(0));
        let q = project(&inplane, &f).unwrap();
        assert!((q[[0, 0]] - 3.0).abs() < 1e-12 && (q[[0, 1]] - 4.0).abs() < 1e-12);
        assert!(project(&Matrix::zeros((1, 4)), &f).is_err());
    }

    fn orthogonal_direction(f: &ProjectionFrame, r: &mut rng::Rng) -> Array1<f64> {
        let mut w = Array1::from_shape_simple_fn(f.dim(), || r.random_range(-1.0..1.0));
        w = &w - &(&f.u * w.dot(&f.u));
        &w - &(&f.v * w.dot(&f.v))
    }

    proptest! {
        #[test]
        fn project_lift_roundtrip_and_isometry(xy in prop::collection::vec(-5.0f64..5.0, 4), seed in 0u64..1000, t in -3.0f64..3.0) {
            let f = plane_basis(7).unwrap();
            let coords = Matrix::from_shape_vec((2, 2), xy).unwrap();
            let lifted = lift(&coords, &f).unwrap();
            let back = project(&lifted, &f).unwrap();
            prop_assert!((&back - &coords).iter().all(|d| d.abs() < 1e-12));
            let d2 = (&coords.row(0) - &coords.row(1)).mapv(|v| v * v).sum();
            let d_amb = (&lifted.row(0) - &lifted.row(1)).mapv(|v| v * v).sum();
            prop_assert!((d2 - d_amb).abs() < 1e-9);
            let w = orthogonal_direction(&f, &mut rng::from_seed(seed));
            let moved = &lifted + &(&w * t);
            let p = project(&moved, &f).unwrap();
            prop_assert!((&p - &coords).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn constant_critic_gives_uniform_grid() {
        let mut d = Network::glorot(&NetworkSpec::new(4, 1, 3, 5)).unwrap();
        let last = d.layers().len() - 1;
        d.layers_mut()[last].weight.fill(0.0);
        d.layers_mut()[last].bias.fill(2.5);
        let f = plane_basis(4).unwrap();
        let b = Bounds { x_min: -1.0, x_max: 1.0, y_min: -2.0, y_max: 2.0 };
        let g = contour_grid(&[d], &[1.0], &f, &b, 8).unwrap();
        assert!(g.values.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn linear_critic_gives_affine_grid() {
        let f = plane_basis(4).unwrap();
        let w = &f.u * 2.0 - &f.v * 0.5;
        let d = Network::from_layers(
            vec![Layer { weight: w.clone().insert_axis(ndarray::Axis(0)), bias: array![0.3] }],
            0.2,
        )
        .unwrap();
        let b = Bounds { x_min: -1.0, x_max: 2.0, y_min: 0.0, y_max: 1.0 };
        let g = contour_grid(&[d.clone(), d], &[0.25, 0.75], &f, &b, 5).unwrap();
        let base = w.dot(&f.origin) + 0.3;
        for (iy, y) in g.ys.iter().enumerate() {
            for (ix, x) in g.xs.iter().enumerate() {
                assert!((g.values[[iy, ix]] - (base + 2.0 * x - 0.5 * y)).abs() < 1e-12);
            }
        }
        assert!(contour_grid(&[], &[], &f, &b, 5).is_err());
    }

    #[test]
    fn default_bounds_contain_samples() {
        let mut r = rng::from_seed(4);
        let a = Matrix::from_shape_simple_fn((50, 2), || r.random_range(-3.0..3.0));
        let c = Matrix::from_shape_simple_fn((50, 2), || r.random_range(0.0..7.0));
        let b = Bounds::around(&[&a, &c]).unwrap();
        assert!(a.outer_iter().chain(c.outer_iter()).all(|p| b.contains(p[0], p[1])));
        let single = array![[1.0, 1.0]];
        let b1 = Bounds::around(&[&single]).unwrap();
        assert!(b1.x_max > b1.x_min);
        assert!(Bounds::around(&[&Matrix::zeros((0, 2))]).is_err());
    }

    #[test]
    fn csv_and_svg_output() {
        let f = plane_basis(3).unwrap();
        let d = Network::glorot(&NetworkSpec::new(3, 1, 2, 0)).unwrap();
        let real = array![[0.0, 0.0], [1.0, 1.0]];
        let fake = array![[0.5, 0.2]];
        let b = Bounds::around(&[&real, &fake]).unwrap();
        let plot = ProjectionPlot {
            grid: Some(contour_grid(&[d], &[1.0], &f, &b, 3).unwrap()),
            real,
            fake,
            fake_generator: vec![1],
        };
        let csv = plot.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "kind,generator_index,x,y,value");
        assert_eq!(lines.len(), 1 + 2 + 1 + 9);
        assert_eq!(lines[3], "fake,2,0.5,0.2,");
        assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 5));
        let svg = plot.to_svg().unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 3);
    }
}
