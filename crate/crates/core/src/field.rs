//! Spatiotemporal disturbance (flow) fields.
//!
//! A [`DisturbanceField`] stores a time-ordered stack of 2D vector-field
//! frames on a regular grid and answers point queries anywhere in space and
//! time by bilinear interpolation in space and linear interpolation between
//! the bracketing frames. Queries outside the stored extent clamp to the
//! nearest edge / frame, so [`DisturbanceField::sample`] is a total function.
//!
//! Fields come from two sources: analytic patterns ([`generate`]) and
//! gridded current data ingested from CSV ([`ingest_currents`]).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Header line of the current CSV schema.
pub const CSV_HEADER: &str = "t_sec,ix,iy,u_east,v_north";

/// Ratio of the meander's cross-channel amplitude to its downstream speed.
pub const MEANDER_AMPLITUDE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("grid dimensions {0}x{1} too small (need at least 4x4)")]
    InvalidDimensions(usize, usize),
    #[error("field needs at least one frame")]
    NoFrames,
    #[error("frame {0} timestamp does not strictly increase")]
    NonIncreasingTimestamps(usize),
    #[error("frame {0} grid size does not match {1}x{2}")]
    FrameShape(usize, usize, usize),
    #[error("invalid pattern: {0}")]
    InvalidPattern(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("crop window {x0},{y0} {w}x{h} exceeds grid {gw}x{gh}")]
    CropOutOfBounds {
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
        gw: usize,
        gh: usize,
    },
    #[error("unknown pattern kind '{0}'")]
    UnknownKind(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FieldError> = std::result::Result<T, E>;

/// One stored time slice of the field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFrame {
    /// Timestamp in seconds.
    pub t: f64,
    /// Flow x-component per cell, row-major (`iy * grid_w + ix`).
    pub u: Vec<f64>,
    /// Flow y-component per cell, row-major.
    pub v: Vec<f64>,
}

/// Time-indexed 2D flow field on a regular grid.
///
/// Cell `(ix, iy)` holds the flow sampled at world point
/// `(ix * cell_size, iy * cell_size)`. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceField {
    grid_w: usize,
    grid_h: usize,
    cell_size: f64,
    strength_cap: f64,
    frames: Vec<FieldFrame>,
}

/// Spatial partial derivatives of the flow at a query point (units 1/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldJacobian {
    pub dwx_dx: f64,
    pub dwx_dy: f64,
    pub dwy_dx: f64,
    pub dwy_dy: f64,
}

impl DisturbanceField {
    /// Builds a field from raw frames, validating invariants and clamping
    /// every stored flow vector to `strength_cap`.
    pub fn from_frames(
        grid_w: usize,
        grid_h: usize,
        cell_size: f64,
        strength_cap: f64,
        mut frames: Vec<FieldFrame>,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(FieldError::NoFrames);
        }
        for (i, f) in frames.iter().enumerate() {
            if f.u.len() != grid_w * grid_h || f.v.len() != grid_w * grid_h {
                return Err(FieldError::FrameShape(i, grid_w, grid_h));
            }
            if i > 0 && f.t <= frames[i - 1].t {
                return Err(FieldError::NonIncreasingTimestamps(i));
            }
        }
        for f in &mut frames {
            clamp_magnitudes(&mut f.u, &mut f.v, strength_cap);
        }
        Ok(Self {
            grid_w,
            grid_h,
            cell_size,
            strength_cap,
            frames,
        })
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn strength_cap(&self) -> f64 {
        self.strength_cap
    }

    pub fn frames(&self) -> &[FieldFrame] {
        &self.frames
    }

    /// World-space extent along x, i.e. the coordinate of the last cell.
    pub fn extent_x(&self) -> f64 {
        (self.grid_w - 1) as f64 * self.cell_size
    }

    pub fn extent_y(&self) -> f64 {
        (self.grid_h - 1) as f64 * self.cell_size
    }

    /// Largest stored flow magnitude across all frames.
    pub fn max_magnitude(&self) -> f64 {
        let mut m: f64 = 0.0;
        for f in &self.frames {
            for (u, v) in f.u.iter().zip(&f.v) {
                m = m.max(u.hypot(*v));
            }
        }
        m
    }

    /// Flow at world point `(x, y)` and time `t`.
    ///
    /// Bilinear in space, linear between bracketing frames in time;
    /// clamp-to-edge beyond the grid, clamp-to-nearest-frame beyond the
    /// stored time range.
    pub fn sample(&self, x: f64, y: f64, t: f64) -> Vector2<f64> {
        let (ia, ib, w) = self.time_bracket(t);
        let a = self.bilinear(ia, x, y);
        if ia == ib {
            return a;
        }
        let b = self.bilinear(ib, x, y);
        // this lerp form is exact when both frames agree
        a + (b - a) * w
    }

    /// Spatial Jacobian of [`Self::sample`] by central differences with
    /// step `cell_size / 2`.
    pub fn jacobian(&self, x: f64, y: f64, t: f64) -> FieldJacobian {
        let h = self.cell_size * 0.5;
        let xp = self.sample(x + h, y, t);
        let xm = self.sample(x - h, y, t);
        let yp = self.sample(x, y + h, t);
        let ym = self.sample(x, y - h, t);
        let inv = 1.0 / (2.0 * h);
        FieldJacobian {
            dwx_dx: (xp.x - xm.x) * inv,
            dwx_dy: (yp.x - ym.x) * inv,
            dwy_dx: (xp.y - xm.y) * inv,
            dwy_dy: (yp.y - ym.y) * inv,
        }
    }

    /// Sub-field of `w x h` cells starting at cell `(x0, y0)`.
    ///
    /// Frame timestamps are preserved; the cropped region's world origin
    /// moves to `(0, 0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.grid_w || y0 + h > self.grid_h {
            return Err(FieldError::CropOutOfBounds {
                x0,
                y0,
                w,
                h,
                gw: self.grid_w,
                gh: self.grid_h,
            });
        }
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let mut u = Vec::with_capacity(w * h);
                let mut v = Vec::with_capacity(w * h);
                for iy in y0..y0 + h {
                    for ix in x0..x0 + w {
                        u.push(f.u[iy * self.grid_w + ix]);
                        v.push(f.v[iy * self.grid_w + ix]);
                    }
                }
                FieldFrame { t: f.t, u, v }
            })
            .collect();
        Ok(Self {
            grid_w: w,
            grid_h: h,
            cell_size: self.cell_size,
            strength_cap: self.strength_cap,
            frames,
        })
    }

    /// Serializes the field in the current CSV schema.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        out.push('\n');
        for f in &self.frames {
            for iy in 0..self.grid_h {
                for ix in 0..self.grid_w {
                    let idx = iy * self.grid_w + ix;
                    let _ = writeln!(out, "{},{},{},{},{}", f.t, ix, iy, f.u[idx], f.v[idx]);
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    fn time_bracket(&self, t: f64) -> (usize, usize, f64) {
        let n = self.frames.len();
        if n == 1 || t <= self.frames[0].t {
            return (0, 0, 0.0);
        }
        if t >= self.frames[n - 1].t {
            return (n - 1, n - 1, 0.0);
        }
        let hi = self.frames.partition_point(|f| f.t <= t);
        let lo = hi - 1;
        let ta = self.frames[lo].t;
        let tb = self.frames[hi].t;
        (lo, hi, (t - ta) / (tb - ta))
    }

    fn bilinear(&self, frame: usize, x: f64, y: f64) -> Vector2<f64> {
        let f = &self.frames[frame];
        let gx = (x / self.cell_size).clamp(0.0, (self.grid_w - 1) as f64);
        let gy = (y / self.cell_size).clamp(0.0, (self.grid_h - 1) as f64);
        let i0 = (gx.floor() as usize).min(self.grid_w.saturating_sub(2));
        let j0 = (gy.floor() as usize).min(self.grid_h.saturating_sub(2));
        let i1 = (i0 + 1).min(self.grid_w - 1);
        let j1 = (j0 + 1).min(self.grid_h - 1);
        let fx = gx - i0 as f64;
        let fy = gy - j0 as f64;
        let at = |ix: usize, iy: usize| {
            let idx = iy * self.grid_w + ix;
            Vector2::new(f.u[idx], f.v[idx])
        };
        at(i0, j0) * (1.0 - fx) * (1.0 - fy)
            + at(i1, j0) * fx * (1.0 - fy)
            + at(i0, j1) * (1.0 - fx) * fy
            + at(i1, j1) * fx * fy
    }
}

fn clamp_magnitudes(u: &mut [f64], v: &mut [f64], cap: f64) {
    if !cap.is_finite() {
        return;
    }
    for (a, b) in u.iter_mut().zip(v.iter_mut()) {
        let m = a.hypot(*b);
        if m > cap {
            let s = cap / m;
            *a *= s;
            *b *= s;
        }
    }
}

/// Analytic flow-pattern family used for artificial disturbances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    Vortex,
    Meander,
    Spin,
    Centripetal,
    Uniform,
}

impl PatternKind {
    pub const ALL: [PatternKind; 5] = [
        PatternKind::Vortex,
        PatternKind::Meander,
        PatternKind::Spin,
        PatternKind::Centripetal,
        PatternKind::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PatternKind::Vortex => "vortex",
            PatternKind::Meander => "meander",
            PatternKind::Spin => "spin",
            PatternKind::Centripetal => "centripetal",
            PatternKind::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for PatternKind {
    type Err = FieldError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vortex" => Ok(PatternKind::Vortex),
            "meander" => Ok(PatternKind::Meander),
            "spin" => Ok(PatternKind::Spin),
            "centripetal" => Ok(PatternKind::Centripetal),
            "uniform" => Ok(PatternKind::Uniform),
            other => Err(FieldError::UnknownKind(other.to_string())),
        }
    }
}

/// Parametric trajectory of a pattern's center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CenterPath {
    Static { x: f64, y: f64 },
    /// Back-and-forth linear translation between two points, one full
    /// round trip per `period` seconds.
    Bounce {
        from: (f64, f64),
        to: (f64, f64),
        period: f64,
    },
}

impl CenterPath {
    pub fn position(&self, t: f64) -> (f64, f64) {
        match *self {
            CenterPath::Static { x, y } => (x, y),
            CenterPath::Bounce { from, to, period } => {
                let phase = (t / period).rem_euclid(1.0);
                let s = if phase < 0.5 {
                    2.0 * phase
                } else {
                    2.0 - 2.0 * phase
                };
                (from.0 + s * (to.0 - from.0), from.1 + s * (to.1 - from.1))
            }
        }
    }

    fn is_static(&self) -> bool {
        match *self {
            CenterPath::Static { .. } => true,
            CenterPath::Bounce { from, to, .. } => from == to,
        }
    }
}

/// Parameters of one analytic disturbance pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPatternSpec {
    pub kind: PatternKind,
    pub center_path: CenterPath,
    /// Peak flow magnitude for vortex/centripetal/uniform and the
    /// downstream speed of the meander; angular rate (1/s) for spin.
    pub strength: f64,
    /// Spatial decay length (vortex, centripetal) or wavelength (meander),
    /// in world units.
    pub scale: f64,
    pub seed: u64,
}

impl FieldPatternSpec {
    /// Pattern centered in a `grid_w x grid_h` grid with unit cells.
    pub fn centered(kind: PatternKind, grid_w: usize, grid_h: usize) -> Self {
        Self {
            kind,
            center_path: CenterPath::Static {
                x: (grid_w - 1) as f64 / 2.0,
                y: (grid_h - 1) as f64 / 2.0,
            },
            strength: 0.5,
            scale: (grid_w.min(grid_h) as f64 / 4.0).max(1.0),
            seed: 0,
        }
    }

    /// Draws a random pattern for a grid, reproducible from `seed`.
    pub fn random(seed: u64, grid_w: usize, grid_h: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = PatternKind::ALL[rng.random_range(0..PatternKind::ALL.len())];
        let cx = rng.random_range(0.2..0.8) * (grid_w - 1) as f64;
        let cy = rng.random_range(0.2..0.8) * (grid_h - 1) as f64;
        let max_r = ((grid_w * grid_w + grid_h * grid_h) as f64).sqrt();
        let strength = match kind {
            // spin strength is an angular rate; keep rim speed moderate
            PatternKind::Spin => rng.random_range(0.1..0.6) / max_r,
            _ => rng.random_range(0.1..0.6),
        };
        Self {
            kind,
            center_path: CenterPath::Static { x: cx, y: cy },
            strength,
            scale: rng.random_range(0.15..0.5) * grid_w.min(grid_h) as f64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strength < 0.0 || !self.strength.is_finite() {
            return Err(FieldError::InvalidPattern(format!(
                "strength must be finite and >= 0, got {}",
                self.strength
            )));
        }
        if self.scale <= 0.0 || !self.scale.is_finite() {
            return Err(FieldError::InvalidPattern(format!(
                "scale must be finite and > 0, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Analytic flow of the pattern at world point `(x, y)` and time `t`.
    pub fn flow(&self, x: f64, y: f64, t: f64) -> Vector2<f64> {
        let (cx, cy) = self.center_path.position(t);
        let rx = x - cx;
        let ry = y - cy;
        let d = rx.hypot(ry);
        let s = self.strength;
        match self.kind {
            PatternKind::Uniform => Vector2::new(s, 0.0),
            // tangential, counterclockwise; |flow| peaks at s when d == scale
            PatternKind::Vortex => {
                let g = s / self.scale * (1.0 - d / self.scale).exp();
                Vector2::new(-ry * g, rx * g)
            }
            // rigid rotation at angular rate s about the center
            PatternKind::Spin => Vector2::new(-ry * s, rx * s),
            // unit vector toward the center, magnitude s away from the core
            PatternKind::Centripetal => {
                if d == 0.0 {
                    return Vector2::zeros();
                }
                let f = 1.0 - (-(d / self.scale).powi(2)).exp();
                Vector2::new(-s * f * rx / d, -s * f * ry / d)
            }
            // sinusoidal channel flow along +x
            PatternKind::Meander => Vector2::new(
                s,
                MEANDER_AMPLITUDE * s * (std::f64::consts::TAU * x / self.scale).cos(),
            ),
        }
    }
}

/// Samples an analytic pattern at every cell center for `n_frames` frames
/// spaced `dt_frame` seconds apart. Generated fields are not magnitude
/// clamped; the pattern strength already bounds them.
pub fn generate(
    spec: &FieldPatternSpec,
    grid_w: usize,
    grid_h: usize,
    n_frames: usize,
    dt_frame: f64,
) -> Result<DisturbanceField> {
    if grid_w < 4 || grid_h < 4 {
        return Err(FieldError::InvalidDimensions(grid_w, grid_h));
    }
    if n_frames == 0 {
        return Err(FieldError::NoFrames);
    }
    spec.validate()?;
    let first = build_frame(spec, grid_w, grid_h, 0.0);
    let mut frames = Vec::with_capacity(n_frames);
    frames.push(first);
    for k in 1..n_frames {
        let t = k as f64 * dt_frame;
        if spec.center_path.is_static() {
            // time-invariant pattern: reuse the first frame's values
            let mut f = frames[0].clone();
            f.t = t;
            frames.push(f);
        } else {
            frames.push(build_frame(spec, grid_w, grid_h, t));
        }
    }
    DisturbanceField::from_frames(grid_w, grid_h, 1.0, f64::INFINITY, frames)
}

fn build_frame(spec: &FieldPatternSpec, grid_w: usize, grid_h: usize, t: f64) -> FieldFrame {
    let mut u = Vec::with_capacity(grid_w * grid_h);
    let mut v = Vec::with_capacity(grid_w * grid_h);
    for iy in 0..grid_h {
        for ix in 0..grid_w {
            let flow = spec.flow(ix as f64, iy as f64, t);
            u.push(flow.x);
            v.push(flow.y);
        }
    }
    FieldFrame { t, u, v }
}

/// Ingestion parameters for the current CSV schema.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurrentCsvSchema {
    /// World units per grid cell.
    pub cell_size: f64,
    /// Magnitude clamp applied to ingested vectors; defaults to the
    /// nominal vehicle speed.
    pub strength_cap: f64,
}

impl Default for CurrentCsvSchema {
    fn default() -> Self {
        Self {
            cell_size: 1.0,
            strength_cap: 1.0,
        }
    }
}

/// Reads a `t_sec,ix,iy,u_east,v_north` CSV file into a field.
///
/// Rows are grouped into frames by timestamp; cells absent from a frame are
/// filled from their nearest populated neighbor.
pub fn ingest_currents(path: &Path, schema: &CurrentCsvSchema) -> Result<DisturbanceField> {
    let text = fs::read_to_string(path)?;
    ingest_currents_str(&text, schema)
}

/// [`ingest_currents`] over an in-memory CSV document.
pub fn ingest_currents_str(text: &str, schema: &CurrentCsvSchema) -> Result<DisturbanceField> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(FieldError::Parse {
                line: 1,
                message: format!("expected header '{CSV_HEADER}', got '{}'", header.trim()),
            })
        }
        None => return Err(FieldError::NoFrames),
    }

    struct Row {
        t: f64,
        ix: usize,
        iy: usize,
        u: f64,
        v: f64,
    }
    let mut rows: Vec<Row> = Vec::new();
    for (i, raw) in lines {
        let line = i + 1; // 1-based
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parts: Vec<&str> = trimmed.split(',').collect();
        if parts.len() != 5 {
            return Err(FieldError::Parse {
                line,
                message: format!("expected 5 fields, got {}", parts.len()),
            });
        }
        let field = |j: usize, what: &str| -> Result<f64> {
            parts[j].trim().parse::<f64>().map_err(|e| FieldError::Parse {
                line,
                message: format!("bad {what} '{}': {e}", parts[j].trim()),
            })
        };
        let index = |j: usize, what: &str| -> Result<usize> {
            parts[j]
                .trim()
                .parse::<usize>()
                .map_err(|e| FieldError::Parse {
                    line,
                    message: format!("bad {what} '{}': {e}", parts[j].trim()),
                })
        };
        rows.push(Row {
            t: field(0, "t_sec")?,
            ix: index(1, "ix")?,
            iy: index(2, "iy")?,
            u: field(3, "u_east")?,
            v: field(4, "v_north")?,
        });
    }
    if rows.is_empty() {
        return Err(FieldError::NoFrames);
    }

    let mut times: Vec<f64> = rows.iter().map(|r| r.t).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();

    // per-frame extent, checked for consistency below
    let mut extent: Option<(usize, usize)> = None;
    let mut frames = Vec::with_capacity(times.len());
    for &t in &times {
        let frame_rows: Vec<&Row> = rows.iter().filter(|r| r.t == t).collect();
        let w = frame_rows.iter().map(|r| r.ix).max().unwrap() + 1;
        let h = frame_rows.iter().map(|r| r.iy).max().unwrap() + 1;
        match extent {
            None => extent = Some((w, h)),
            Some(e) if e != (w, h) => {
                return Err(FieldError::Schema(format!(
                    "frame at t={t} has extent {w}x{h}, earlier frames {}x{}",
                    e.0, e.1
                )))
            }
            _ => {}
        }
        let mut u = vec![f64::NAN; w * h];
        let mut v = vec![f64::NAN; w * h];
        for r in &frame_rows {
            let idx = r.iy * w + r.ix;
            if !u[idx].is_nan() && (u[idx] != r.u || v[idx] != r.v) {
                return Err(FieldError::Schema(format!(
                    "conflicting duplicate for t={t} cell ({},{})",
                    r.ix, r.iy
                )));
            }
            u[idx] = r.u;
            v[idx] = r.v;
        }
        fill_nearest(&mut u, &mut v, w, h);
        frames.push(FieldFrame { t, u, v });
    }
    let (w, h) = extent.unwrap();
    DisturbanceField::from_frames(w, h, schema.cell_size, schema.strength_cap, frames)
}

/// Fills NaN cells from the nearest populated cell (Euclidean distance,
/// ties broken by scan order).
fn fill_nearest(u: &mut [f64], v: &mut [f64], w: usize, h: usize) {
    let filled: Vec<(usize, usize)> = (0..h)
        .flat_map(|iy| (0..w).map(move |ix| (ix, iy)))
        .filter(|&(ix, iy)| !u[iy * w + ix].is_nan())
        .collect();
    if filled.is_empty() || filled.len() == w * h {
        return;
    }
    for iy in 0..h {
        for ix in 0..w {
            let idx = iy * w + ix;
            if !u[idx].is_nan() {
                continue;
            }
            let (bx, by) = filled
                .iter()
                .copied()
                .min_by(|&(ax, ay), &(cx, cy)| {
                    let da = (ax as f64 - ix as f64).hypot(ay as f64 - iy as f64);
                    let dc = (cx as f64 - ix as f64).hypot(cy as f64 - iy as f64);
                    da.total_cmp(&dc)
                })
                .unwrap();
            u[idx] = u[by * w + bx];
            v[idx] = v[by * w + bx];
        }
    }
}
