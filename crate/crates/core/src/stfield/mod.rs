//! Spatio-temporal fields and their light cones.
//!
//! Space-time points are enumerated time-major: all sites of time 1, then all
//! sites of time 2, and so on. Under this order the past cone of a point only
//! ever contains points with a smaller index, which is what makes the
//! per-point conditional factorization of the field likelihood valid.

mod io;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{read_field, read_matrix_csv, write_field, write_matrix_csv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    #[default]
    Periodic,
    Truncate,
}

/// Lattice size plus the cone shape used to read it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldGeometry {
    pub spatial_size: usize,
    pub time_steps: usize,
    pub boundary: Boundary,
    /// Sites per time step that information can travel.
    pub speed: usize,
    pub past_horizon: usize,
    pub future_horizon: usize,
}

impl FieldGeometry {
    pub fn new(spatial_size: usize, time_steps: usize) -> Self {
        FieldGeometry {
            spatial_size,
            time_steps,
            boundary: Boundary::Periodic,
            speed: 1,
            past_horizon: 2,
            future_horizon: 0,
        }
    }

    pub fn with_cone(mut self, past_horizon: usize, future_horizon: usize, speed: usize) -> Self {
        self.past_horizon = past_horizon;
        self.future_horizon = future_horizon;
        self.speed = speed;
        self
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn with_time_steps(mut self, time_steps: usize) -> Self {
        self.time_steps = time_steps;
        self
    }

    pub fn num_points(&self) -> usize {
        self.spatial_size * self.time_steps
    }

    /// Checks the invariants needed to extract non-empty, non-self-wrapping cones.
    pub fn validate(&self) -> Result<()> {
        if self.spatial_size == 0 || self.time_steps == 0 {
            return Err(Error::domain("field must have at least one site and one time step"));
        }
        if self.speed == 0 {
            return Err(Error::domain("speed must be positive"));
        }
        if self.past_horizon == 0 {
            return Err(Error::domain("past horizon must be at least 1"));
        }
        if self.boundary == Boundary::Periodic {
            let reach = 2 * self.speed * self.past_horizon.max(self.future_horizon);
            if self.spatial_size <= reach {
                return Err(Error::domain(format!(
                    "periodic lattice of {} sites is too small for a cone spanning {} sites",
                    self.spatial_size,
                    reach + 1
                )));
            }
        }
        Ok(())
    }

    /// 1-based time-major index of site `r`, time `t` (both 1-based).
    pub fn canonical_index(&self, r: usize, t: usize) -> Result<usize> {
        if r == 0 || r > self.spatial_size || t == 0 || t > self.time_steps {
            return Err(Error::domain(format!(
                "coordinates (r={r}, t={t}) outside {}x{} grid",
                self.spatial_size, self.time_steps
            )));
        }
        Ok((t - 1) * self.spatial_size + r)
    }

    /// Number of cells in a past cone: slices t-1 .. t-h_p, widening by
    /// `2c` sites per step back.
    pub fn plc_dimension(&self) -> usize {
        (1..=self.past_horizon).map(|s| 2 * self.speed * s + 1).sum()
    }

    /// Number of cells in a future cone, the present included.
    pub fn flc_dimension(&self) -> usize {
        (0..=self.future_horizon).map(|s| 2 * self.speed * s + 1).sum()
    }

    /// Past-cone cells as (time lag, spatial offset), oldest slice first,
    /// leftmost offset first. This is the serialized column layout.
    pub fn plc_offsets(&self) -> Vec<(usize, isize)> {
        let c = self.speed as isize;
        (1..=self.past_horizon)
            .rev()
            .flat_map(|lag| {
                let w = c * lag as isize;
                (-w..=w).map(move |off| (lag, off))
            })
            .collect()
    }

    /// Future-cone cells as (time lead, spatial offset), present first.
    pub fn flc_offsets(&self) -> Vec<(usize, isize)> {
        let c = self.speed as isize;
        (0..=self.future_horizon)
            .flat_map(|lead| {
                let w = c * lead as isize;
                (-w..=w).map(move |off| (lead, off))
            })
            .collect()
    }

    fn spatial_reach(&self, horizon: usize) -> usize {
        self.speed * horizon
    }

    /// True when the past cone at 0-based (site, time) lies inside the observed grid.
    pub fn has_full_past(&self, site: usize, time: usize) -> bool {
        if time < self.past_horizon {
            return false;
        }
        match self.boundary {
            Boundary::Periodic => true,
            Boundary::Truncate => {
                let reach = self.spatial_reach(self.past_horizon);
                site >= reach && site + reach < self.spatial_size
            }
        }
    }

    fn has_full_future(&self, site: usize, time: usize) -> bool {
        if time + self.future_horizon >= self.time_steps {
            return false;
        }
        match self.boundary {
            Boundary::Periodic => true,
            Boundary::Truncate => {
                let reach = self.spatial_reach(self.future_horizon);
                site >= reach && site + reach < self.spatial_size
            }
        }
    }

    /// Resolves a spatial offset from `site`, wrapping if periodic.
    fn neighbour(&self, site: usize, offset: isize) -> usize {
        let s = self.spatial_size as isize;
        let raw = site as isize + offset;
        match self.boundary {
            Boundary::Periodic => raw.rem_euclid(s) as usize,
            Boundary::Truncate => {
                debug_assert!((0..s).contains(&raw));
                raw as usize
            }
        }
    }
}

/// A 0-based space-time coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpaceTime {
    pub site: usize,
    pub time: usize,
}

/// Observed values X(r, t); rows are sites, columns time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    geometry: FieldGeometry,
    values: DMatrix<f64>,
}

impl Field {
    pub fn new(geometry: FieldGeometry, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != geometry.spatial_size || values.ncols() != geometry.time_steps {
            return Err(Error::domain(format!(
                "field is {}x{} but geometry says {}x{}",
                values.nrows(),
                values.ncols(),
                geometry.spatial_size,
                geometry.time_steps
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, t) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::domain(format!("non-finite value at site {r}, time {t}")));
        }
        Ok(Field { geometry, values })
    }

    pub fn zeros(geometry: FieldGeometry) -> Self {
        let values = DMatrix::zeros(geometry.spatial_size, geometry.time_steps);
        Field { geometry, values }
    }

    pub fn geometry(&self) -> &FieldGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn get(&self, site: usize, time: usize) -> f64 {
        self.values[(site, time)]
    }

    /// Reinterprets the same values under a different cone/boundary setting.
    pub fn with_geometry(mut self, geometry: FieldGeometry) -> Result<Self> {
        if geometry.spatial_size != self.geometry.spatial_size
            || geometry.time_steps != self.geometry.time_steps
        {
            return Err(Error::domain("geometry does not match field shape"));
        }
        self.geometry = geometry;
        Ok(self)
    }

    /// Columns `start..end` (0-based, exclusive end) as a new field.
    pub fn time_window(&self, start: usize, end: usize) -> Result<Field> {
        if start >= end || end > self.geometry.time_steps {
            return Err(Error::domain(format!(
                "time window {start}..{end} outside 0..{}",
                self.geometry.time_steps
            )));
        }
        let values = self.values.columns(start, end - start).into_owned();
        Field::new(self.geometry.with_time_steps(end - start), values)
    }

    /// Writes the past cone at (site, time) into `out`, in `plc_offsets` order.
    /// The caller guarantees the cone is fully observed.
    pub fn read_plc(&self, site: usize, time: usize, offsets: &[(usize, isize)], out: &mut [f64]) {
        for (slot, &(lag, off)) in out.iter_mut().zip(offsets) {
            *slot = self.values[(self.geometry.neighbour(site, off), time - lag)];
        }
    }
}

/// Aligned past/future cone matrices for every point with a fully observed cone.
#[derive(Debug, Clone, PartialEq)]
pub struct LightConeSet {
    geometry: FieldGeometry,
    plc: Vec<f64>,
    plc_dim: usize,
    flc: Vec<f64>,
    flc_dim: usize,
    index: Vec<SpaceTime>,
    margin_mask: Vec<bool>,
}

impl LightConeSet {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn geometry(&self) -> &FieldGeometry {
        &self.geometry
    }

    pub fn plc_dim(&self) -> usize {
        self.plc_dim
    }

    pub fn flc_dim(&self) -> usize {
        self.flc_dim
    }

    pub fn plc_row(&self, i: usize) -> &[f64] {
        &self.plc[i * self.plc_dim..(i + 1) * self.plc_dim]
    }

    pub fn flc_row(&self, i: usize) -> &[f64] {
        &self.flc[i * self.flc_dim..(i + 1) * self.flc_dim]
    }

    /// Row-major past cones, `len() * plc_dim()` values.
    pub fn plc(&self) -> &[f64] {
        &self.plc
    }

    /// Row-major future cones, `len() * flc_dim()` values.
    pub fn flc(&self) -> &[f64] {
        &self.flc
    }

    /// The present value of each row (first future-cone cell).
    pub fn present_values(&self) -> Vec<f64> {
        self.flc.chunks(self.flc_dim).map(|row| row[0]).collect()
    }

    pub fn index(&self) -> &[SpaceTime] {
        &self.index
    }

    /// One flag per grid point in canonical order; `true` means the point
    /// lacks a fully observed past cone.
    pub fn margin_mask(&self) -> &[bool] {
        &self.margin_mask
    }

    pub fn margin_size(&self) -> usize {
        self.margin_mask.iter().filter(|&&m| m).count()
    }

    /// Keeps the rows whose flag is set, preserving order.
    fn select(&self, keep: impl Fn(&SpaceTime) -> bool) -> LightConeSet {
        let mut out = LightConeSet {
            geometry: self.geometry,
            plc: Vec::new(),
            plc_dim: self.plc_dim,
            flc: Vec::new(),
            flc_dim: self.flc_dim,
            index: Vec::new(),
            margin_mask: self.margin_mask.clone(),
        };
        for (i, st) in self.index.iter().enumerate() {
            if keep(st) {
                out.plc.extend_from_slice(self.plc_row(i));
                out.flc.extend_from_slice(self.flc_row(i));
                out.index.push(*st);
            }
        }
        out
    }

    /// Builds a cone set directly from matrices; used for synthetic inputs.
    pub fn from_rows(
        geometry: FieldGeometry,
        plc: Vec<f64>,
        plc_dim: usize,
        flc: Vec<f64>,
        index: Vec<SpaceTime>,
    ) -> Result<Self> {
        let n = index.len();
        if plc_dim == 0 || plc.len() != n * plc_dim || flc.len() != n {
            return Err(Error::domain("cone matrices do not match the row count"));
        }
        Ok(LightConeSet {
            geometry,
            plc,
            plc_dim,
            flc,
            flc_dim: 1,
            index,
            margin_mask: Vec::new(),
        })
    }
}

/// Extracts past and future cones for every point whose cones are fully
/// observed. Rows come out in canonical order.
pub fn extract_light_cones(field: &Field) -> Result<LightConeSet> {
    let geometry = *field.geometry();
    geometry.validate()?;
    let plc_offsets = geometry.plc_offsets();
    let flc_offsets = geometry.flc_offsets();
    let (plc_dim, flc_dim) = (plc_offsets.len(), flc_offsets.len());

    let mut out = LightConeSet {
        geometry,
        plc: Vec::new(),
        plc_dim,
        flc: Vec::new(),
        flc_dim,
        index: Vec::new(),
        margin_mask: Vec::with_capacity(geometry.num_points()),
    };
    let mut plc_buf = vec![0.0; plc_dim];
    for time in 0..geometry.time_steps {
        for site in 0..geometry.spatial_size {
            let full_past = geometry.has_full_past(site, time);
            out.margin_mask.push(!full_past);
            if !full_past || !geometry.has_full_future(site, time) {
                continue;
            }
            field.read_plc(site, time, &plc_offsets, &mut plc_buf);
            out.plc.extend_from_slice(&plc_buf);
            out.flc.extend(
                flc_offsets
                    .iter()
                    .map(|&(lead, off)| field.get(geometry.neighbour(site, off), time + lead)),
            );
            out.index.push(SpaceTime { site, time });
        }
    }
    Ok(out)
}

/// First 0-based time step of the test block: `round(fraction * T)`.
pub fn split_time(geometry: &FieldGeometry, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::domain(format!("split fraction {fraction} not in (0, 1)")));
    }
    let cut = (fraction * geometry.time_steps as f64).round() as usize;
    if cut < geometry.past_horizon + 1 {
        return Err(Error::domain(format!(
            "training block of {cut} steps leaves no fully observed past cones"
        )));
    }
    Ok(cut)
}

/// Splits cones along the time axis: rows with 1-based time at or before
/// `round(fraction * T)` train, the rest test.
pub fn split_train_test(cones: &LightConeSet, fraction: f64) -> Result<(LightConeSet, LightConeSet)> {
    let cut = split_time(cones.geometry(), fraction)?;
    let train = cones.select(|st| st.time < cut);
    let test = cones.select(|st| st.time >= cut);
    if train.is_empty() || test.is_empty() {
        return Err(Error::domain(format!(
            "split at t={cut} leaves an empty {} set",
            if train.is_empty() { "training" } else { "test" }
        )));
    }
    Ok((train, test))
}
