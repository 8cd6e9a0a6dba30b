//! Stateless 2D bandits: toy behavior distributions, reconstructed Q-fields
//! and density-grid utilities.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::BehaviorDataset;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Half-width of the canonical action box `[-4, 4]^2`.
pub const BOX: f64 = 4.0;
pub const DEFAULT_RESOLUTION: usize = 64;

const GAUSS_SCALE: f64 = 4.0;
const GAUSS_SHRINK: f64 = std::f64::consts::SQRT_2;
const ROLL_SHRINK: f64 = 5.0;
/// Quadrature nodes along a curve parameter for the arc-shaped densities.
const CURVE_NODES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    #[serde(rename = "8gaussians")]
    EightGaussians,
    Swissroll,
    Moons,
}

impl Distribution {
    pub fn default_noise(self) -> f64 {
        match self {
            Distribution::EightGaussians => 0.5,
            Distribution::Swissroll => 1.0,
            Distribution::Moons => 0.05,
        }
    }

    pub fn default_q(self) -> QField {
        match self {
            Distribution::EightGaussians => QField::Angular,
            Distribution::Swissroll => QField::ArcLength,
            Distribution::Moons => QField::Linear { w: [1.0, 0.0] },
        }
    }
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "8gaussians" => Ok(Distribution::EightGaussians),
            "swissroll" => Ok(Distribution::Swissroll),
            "moons" => Ok(Distribution::Moons),
            other => Err(Error::Config(format!("unknown distribution `{other}`"))),
        }
    }
}

/// Reconstructed Q-fields over 2D actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum QField {
    /// `cos(atan2(a_y, a_x))`, favoring modes on the right.
    Angular,
    /// Normalized arc length of the swiss-roll spiral through `a`, in `[-1, 1]` on the roll.
    #[serde(rename = "arclength")]
    ArcLength,
    Linear { w: [f64; 2] },
    /// `-||a - center||`.
    Radial { center: [f64; 2] },
}

/// Arc length of the spiral `r = theta` from 0 to `theta`.
fn spiral_arc(theta: f64) -> f64 {
    0.5 * (theta * (1.0 + theta * theta).sqrt() + theta.asinh())
}

impl QField {
    pub fn eval(&self, a: [f64; 2]) -> f64 {
        match *self {
            QField::Angular => {
                let r = a[0].hypot(a[1]);
                if r == 0.0 {
                    1.0
                } else {
                    a[0] / r
                }
            }
            QField::ArcLength => {
                // The roll has radius t / 5 at curve parameter t, so 5 ||a|| recovers t.
                let t = ROLL_SHRINK * a[0].hypot(a[1]);
                let (lo, hi) = (spiral_arc(1.5 * PI), spiral_arc(4.5 * PI));
                2.0 * (spiral_arc(t) - lo) / (hi - lo) - 1.0
            }
            QField::Linear { w } => w[0] * a[0] + w[1] * a[1],
            QField::Radial { center } => -(a[0] - center[0]).hypot(a[1] - center[1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bandit2dSpec {
    pub distribution: Distribution,
    pub count: usize,
    /// Generator noise; `None` picks the distribution default.
    pub noise: Option<f64>,
    /// `None` picks the distribution's reconstructed field.
    pub q_field: Option<QField>,
    pub seed: u64,
}

impl Default for Bandit2dSpec {
    fn default() -> Self {
        Self {
            distribution: Distribution::EightGaussians,
            count: 10_000,
            noise: None,
            q_field: None,
            seed: 0,
        }
    }
}

impl Bandit2dSpec {
    pub fn noise(&self) -> f64 {
        self.noise.unwrap_or(self.distribution.default_noise())
    }

    pub fn q_field(&self) -> QField {
        self.q_field.unwrap_or(self.distribution.default_q())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.noise();
        if !(n >= 0.0 && n.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {n}")));
        }
        Ok(())
    }

    /// Unnormalized-free behavior density at `a` (ignores the box truncation).
    pub fn behavior_density(&self, a: [f64; 2]) -> f64 {
        let noise = self.noise();
        match self.distribution {
            Distribution::EightGaussians => {
                let sd = noise / GAUSS_SHRINK;
                gaussian_centers()
                    .iter()
                    .map(|c| gauss2(a, [c[0] * GAUSS_SCALE / GAUSS_SHRINK, c[1] * GAUSS_SCALE / GAUSS_SHRINK], sd))
                    .sum::<f64>()
                    / 8.0
            }
            Distribution::Swissroll => {
                let sd = noise / ROLL_SHRINK;
                curve_average(|u| {
                    let t = 1.5 * PI * (1.0 + 2.0 * u);
                    gauss2(a, [t * t.cos() / ROLL_SHRINK, t * t.sin() / ROLL_SHRINK], sd)
                })
            }
            Distribution::Moons => {
                let sd = 2.0 * noise;
                curve_average(|u| {
                    let th = PI * u;
                    let outer = moon_point(true, th);
                    let inner = moon_point(false, th);
                    0.5 * (gauss2(a, outer, sd) + gauss2(a, inner, sd))
                })
            }
        }
    }

    pub fn behavior_log_density(&self, a: [f64; 2]) -> f64 {
        self.behavior_density(a).ln()
    }
}

fn gaussian_centers() -> [[f64; 2]; 8] {
    let h = FRAC_1_SQRT_2;
    [
        [1.0, 0.0],
        [-1.0, 0.0],
        [0.0, 1.0],
        [0.0, -1.0],
        [h, h],
        [h, -h],
        [-h, h],
        [-h, -h],
    ]
}

/// Centers of the 8gaussians mixture in action space.
pub fn eight_gaussian_means() -> [[f64; 2]; 8] {
    gaussian_centers().map(|c| [c[0] * GAUSS_SCALE / GAUSS_SHRINK, c[1] * GAUSS_SCALE / GAUSS_SHRINK])
}

/// Per-coordinate standard deviation of each 8gaussians component.
pub fn eight_gaussian_std(noise: f64) -> f64 {
    noise / GAUSS_SHRINK
}

/// Moon curve point after the `x2 + (-1, -0.2)` rescale.
fn moon_point(outer: bool, th: f64) -> [f64; 2] {
    let (x, y) = if outer {
        (th.cos(), th.sin())
    } else {
        (1.0 - th.cos(), 1.0 - th.sin() - 0.5)
    };
    [2.0 * x - 1.0, 2.0 * y - 0.2]
}

fn gauss2(a: [f64; 2], m: [f64; 2], sd: f64) -> f64 {
    let d2 = (a[0] - m[0]).powi(2) + (a[1] - m[1]).powi(2);
    (-0.5 * d2 / (sd * sd)).exp() / (2.0 * PI * sd * sd)
}

/// Midpoint rule for `int_0^1 g(u) du`.
fn curve_average(g: impl Fn(f64) -> f64) -> f64 {
    (0..CURVE_NODES)
        .map(|i| g((i as f64 + 0.5) / CURVE_NODES as f64))
        .sum::<f64>()
        / CURVE_NODES as f64
}

fn draw_point(spec: &Bandit2dSpec, rng: &mut Rng) -> [f64; 2] {
    let noise = spec.noise();
    match spec.distribution {
        Distribution::EightGaussians => {
            let c = gaussian_centers()[rng::index(rng, 8)];
            let z = [rng::normal(rng), rng::normal(rng)];
            [
                (GAUSS_SCALE * c[0] + noise * z[0]) / GAUSS_SHRINK,
                (GAUSS_SCALE * c[1] + noise * z[1]) / GAUSS_SHRINK,
            ]
        }
        Distribution::Swissroll => {
            let t = 1.5 * PI * (1.0 + 2.0 * rng::uniform(rng, 0.0, 1.0));
            let z = [rng::normal(rng), rng::normal(rng)];
            [
                (t * t.cos() + noise * z[0]) / ROLL_SHRINK,
                (t * t.sin() + noise * z[1]) / ROLL_SHRINK,
            ]
        }
        Distribution::Moons => {
            let outer = rng::uniform(rng, 0.0, 1.0) < 0.5;
            let th = PI * rng::uniform(rng, 0.0, 1.0);
            let p = moon_point(outer, th);
            let z = [rng::normal(rng), rng::normal(rng)];
            [p[0] + 2.0 * noise * z[0], p[1] + 2.0 * noise * z[1]]
        }
    }
}

/// `spec.count` iid behavior actions; points outside the box are redrawn.
pub fn generate(spec: &Bandit2dSpec) -> Result<BehaviorDataset> {
    spec.validate()?;
    let mut rng = rng::substream(spec.seed, "data");
    let mut actions = Array2::zeros((spec.count, 2));
    for i in 0..spec.count {
        let p = loop {
            let p = draw_point(spec, &mut rng);
            if p[0].abs() <= BOX && p[1].abs() <= BOX {
                break p;
            }
        };
        actions[[i, 0]] = p[0];
        actions[[i, 1]] = p[1];
    }
    BehaviorDataset::stateless(actions)
}

pub fn true_q(spec: &Bandit2dSpec, a: [f64; 2]) -> f64 {
    spec.q_field().eval(a)
}

/// Axis-aligned rectangle `[xmin, xmax] x [ymin, ymax]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ranges {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Default for Ranges {
    fn default() -> Self {
        Self {
            xmin: -BOX,
            xmax: BOX,
            ymin: -BOX,
            ymax: BOX,
        }
    }
}

impl Ranges {
    fn validate(&self) -> Result<()> {
        let ok = [self.xmin, self.xmax, self.ymin, self.ymax].iter().all(|v| v.is_finite());
        if !ok || self.xmin >= self.xmax || self.ymin >= self.ymax {
            return Err(Error::Input(format!("invalid grid ranges {self:?}")));
        }
        Ok(())
    }
}

/// Cell-centered `R x R` grid. `values[j * R + i]` is the cell at column `i`
/// (x ascending) and row `j` (y ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub ranges: Ranges,
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn cell_centers(ranges: Ranges, resolution: usize) -> Vec<[f64; 2]> {
        let r = resolution as f64;
        let dx = (ranges.xmax - ranges.xmin) / r;
        let dy = (ranges.ymax - ranges.ymin) / r;
        let mut out = Vec::with_capacity(resolution * resolution);
        for j in 0..resolution {
            for i in 0..resolution {
                out.push([
                    ranges.xmin + (i as f64 + 0.5) * dx,
                    ranges.ymin + (j as f64 + 0.5) * dy,
                ]);
            }
        }
        out
    }

    pub fn from_values(ranges: Ranges, resolution: usize, values: Vec<f64>) -> Result<Self> {
        ranges.validate()?;
        if resolution < 2 {
            return Err(Error::Input(format!("grid resolution must be >= 2, got {resolution}")));
        }
        if values.len() != resolution * resolution {
            return Err(Error::Shape {
                expected: resolution * resolution,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite grid value".into()));
        }
        Ok(Self {
            ranges,
            resolution,
            values,
        })
    }

    pub fn cell_area(&self) -> f64 {
        let r = self.resolution as f64;
        (self.ranges.xmax - self.ranges.xmin) * (self.ranges.ymax - self.ranges.ymin) / (r * r)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.resolution + i]
    }

    /// Cells strictly greater than all 8 neighbors (borders excluded).
    pub fn local_maxima(&self) -> Vec<(usize, usize)> {
        let r = self.resolution;
        let mut out = Vec::new();
        for j in 1..r - 1 {
            for i in 1..r - 1 {
                let v = self.get(i, j);
                let mut is_max = true;
                for dj in [-1i64, 0, 1] {
                    for di in [-1i64, 0, 1] {
                        if (di, dj) != (0, 0) {
                            let n = self.get((i as i64 + di) as usize, (j as i64 + dj) as usize);
                            is_max &= v > n;
                        }
                    }
                }
                if is_max {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let r = &self.ranges;
        let io = |e| Error::Input(format!("grid write: {e}"));
        writeln!(w, "# {:?},{:?},{:?},{:?},{}", r.xmin, r.xmax, r.ymin, r.ymax, self.resolution).map_err(io)?;
        writeln!(w, "# row j has y ascending from ymin; column i has x ascending from xmin; cell centers").map_err(io)?;
        for row in self.values.chunks(self.resolution) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(",")).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let bad = |m: &str| Error::Input(format!("grid csv: {m}"));
        let head = lines.next().ok_or_else(|| bad("empty file"))?.map_err(|e| bad(&e.to_string()))?;
        let fields: Vec<&str> = head
            .strip_prefix('#')
            .ok_or_else(|| bad("missing `#` header"))?
            .split(',')
            .map(str::trim)
            .collect();
        if fields.len() != 5 {
            return Err(bad("header needs xmin,xmax,ymin,ymax,R"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
        let ranges = Ranges {
            xmin: num(fields[0])?,
            xmax: num(fields[1])?,
            ymin: num(fields[2])?,
            ymax: num(fields[3])?,
        };
        let res: usize = fields[4].parse().map_err(|_| bad("bad resolution"))?;
        let mut values = Vec::new();
        for line in lines {
            let line = line.map_err(|e| bad(&e.to_string()))?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            for v in line.split(',') {
                values.push(num(v.trim())?);
            }
        }
        Self::from_values(ranges, res, values)
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Binary 8-bit PGM, min-max normalized, top row = largest y.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        let r = self.resolution;
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut bytes = format!("P5\n{r} {r}\n255\n").into_bytes();
        for j in (0..r).rev() {
            for i in 0..r {
                bytes.push((255.0 * (self.get(i, j) - lo) / span).round() as u8);
            }
        }
        w.write_all(&bytes).map_err(|e| Error::Input(format!("pgm write: {e}")))
    }

    pub fn write_pgm_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_pgm(std::io::BufWriter::new(f))
    }
}

/// Evaluates `field` at every cell center.
pub fn density_grid<F>(field: F, ranges: Ranges, resolution: usize) -> Result<DensityGrid>
where
    F: Fn([f64; 2]) -> f64,
{
    ranges.validate()?;
    if resolution < 2 {
        return Err(Error::Input(format!("grid resolution must be >= 2, got {resolution}")));
    }
    let values = DensityGrid::cell_centers(ranges, resolution)
        .into_iter()
        .map(field)
        .collect();
    DensityGrid::from_values(ranges, resolution, values)
}

/// `mu * exp(q / beta)` normalized to sum to one; computed in log space.
pub fn tilt_weights(mu: &[f64], q: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    if mu.len() != q.len() {
        return Err(Error::Shape {
            expected: mu.len(),
            got: q.len(),
        });
    }
    let logs: Vec<f64> = mu.iter().zip(q).map(|(m, q)| m.ln() + q / beta).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / z).collect())
}

/// The tilted target density on a grid, normalized so that the Riemann sum
/// of density times cell area is one.
pub fn tilted_grid(spec: &Bandit2dSpec, beta: f64, ranges: Ranges, resolution: usize) -> Result<DensityGrid> {
    let mu = density_grid(|a| spec.behavior_density(a), ranges, resolution)?;
    let q: Vec<f64> = DensityGrid::cell_centers(ranges, resolution)
        .into_iter()
        .map(|a| true_q(spec, a))
        .collect();
    let w = tilt_weights(&mu.values, &q, beta)?;
    let area = mu.cell_area();
    DensityGrid::from_values(ranges, resolution, w.into_iter().map(|v| v / area).collect())
}

/// `pi*(a) = mu(a) e^{Q(a)/beta} / Z` with `Z` a Riemann sum over the
/// default 64 x 64 grid of the canonical box.
pub fn tilted_density(spec: &Bandit2dSpec, beta: f64, a: [f64; 2]) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let ranges = Ranges::default();
    let centers = DensityGrid::cell_centers(ranges, DEFAULT_RESOLUTION);
    let logs: Vec<f64> = centers
        .iter()
        .map(|c| spec.behavior_log_density(*c) + true_q(spec, *c) / beta)
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let r = DEFAULT_RESOLUTION as f64;
    let area = (2.0 * BOX / r).powi(2);
    let z: f64 = logs.iter().map(|l| (l - top).exp()).sum::<f64>() * area;
    let la = spec.behavior_log_density(a) + true_q(spec, a) / beta;
    Ok((la - top).exp() / z)
}
