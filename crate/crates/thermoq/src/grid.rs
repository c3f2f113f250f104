//! Domain geometry, region masks, rasters, and temperature normalization.
//!
//! Conventions used throughout the crate: zero-based row-major indexing with
//! pixel (0,0) at the top-left; `r` (or `y`) indexes rows, `c` (or `x`)
//! columns. Component rectangles are half-open pixel ranges
//! `[x0, x1) × [y0, y1)`. The square physical domain has side `L` in both
//! directions, so cell spacing is `dx = L/W`, `dy = L/H`, and sensors sit at
//! cell centers.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stochastic::PowerDistribution;

/// Reference temperature subtracted during normalization (Kelvin).
pub const T_REF: f64 = 298.0;
/// Temperature scale dividing the shifted value during normalization (Kelvin).
pub const T_SCALE: f64 = 50.0;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid must be at least 4x4, got {h}x{w}")]
    GridTooSmall { h: usize, w: usize },
    #[error("sink width must lie in (0, L), got delta = {delta}, L = {side}")]
    BadSinkWidth { delta: f64, side: f64 },
    #[error("domain side length must be positive, got {0}")]
    BadSideLength(f64),
    #[error("sink temperature must be positive, got {0}")]
    BadSinkTemp(f64),
    #[error("heat sink spans zero cells at this resolution (delta = {delta}, cell width = {cell})")]
    SinkUnresolved { delta: f64, cell: f64 },
    #[error("component {id}: rectangle x[{x0},{x1}) y[{y0},{y1}) is empty or exceeds the {h}x{w} grid")]
    BadComponentRect { id: String, x0: usize, x1: usize, y0: usize, y1: usize, h: usize, w: usize },
    #[error("duplicate component id {0}")]
    DuplicateComponentId(String),
    #[error("components {a} and {b} overlap")]
    OverlappingComponents { a: String, b: String },
    #[error("sensor {index} at ({r},{c}) lies outside the {h}x{w} grid")]
    SensorOutOfBounds { index: usize, r: usize, c: usize, h: usize, w: usize },
    #[error("duplicate sensor at ({r},{c})")]
    DuplicateSensor { r: usize, c: usize },
    #[error("noise sigma must be nonnegative, got {0}")]
    NegativeSigma(f64),
    #[error("noise sensor id {id} out of range (have {count} sensors)")]
    NoiseIdOutOfRange { id: usize, count: usize },
    #[error("noise plan must name sensor_ids or a region, not both")]
    AmbiguousNoisePlan,
    #[error("field shape ({fh},{fw}) does not match domain grid ({h},{w})")]
    ShapeMismatch { fh: usize, fw: usize, h: usize, w: usize },
}

/// Square plate geometry, discretization, and heat-sink boundary condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Physical side length of the square domain in meters.
    #[serde(rename = "L")]
    pub side_length: f64,
    /// Grid rows.
    #[serde(rename = "H")]
    pub grid_h: usize,
    /// Grid columns.
    #[serde(rename = "W")]
    pub grid_w: usize,
    /// Width of the isothermal heat sink on the top boundary, meters.
    #[serde(rename = "delta")]
    pub sink_width: f64,
    /// Sink (Dirichlet) temperature, Kelvin.
    #[serde(rename = "T0")]
    pub sink_temp: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), GridError> {
        if self.grid_h < 4 || self.grid_w < 4 {
            return Err(GridError::GridTooSmall { h: self.grid_h, w: self.grid_w });
        }
        if !(self.side_length > 0.0) {
            return Err(GridError::BadSideLength(self.side_length));
        }
        if !(self.sink_width > 0.0 && self.sink_width < self.side_length) {
            return Err(GridError::BadSinkWidth { delta: self.sink_width, side: self.side_length });
        }
        if !(self.sink_temp > 0.0) {
            return Err(GridError::BadSinkTemp(self.sink_temp));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    /// Cell width in meters.
    pub fn dx(&self) -> f64 {
        self.side_length / self.grid_w as f64
    }

    /// Cell height in meters.
    pub fn dy(&self) -> f64 {
        self.side_length / self.grid_h as f64
    }

    /// Columns `[start, start + len)` of the heat sink, centered on the top
    /// row. Errors when the sink is narrower than half a cell.
    pub fn sink_span(&self) -> Result<(usize, usize), GridError> {
        self.validate()?;
        let len = (self.grid_w as f64 * self.sink_width / self.side_length).round() as usize;
        if len == 0 {
            return Err(GridError::SinkUnresolved { delta: self.sink_width, cell: self.dx() });
        }
        let len = len.min(self.grid_w);
        Ok(((self.grid_w - len) / 2, len))
    }
}

/// A rectangular heat-generating component with its power distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub id: String,
    /// Half-open pixel column range `[x0, x1)`.
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub dist: PowerDistribution,
}

impl ComponentSpec {
    /// Pixel footprint as (rows, cols) ranges.
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.y0..self.y1
    }

    pub fn cols(&self) -> std::ops::Range<usize> {
        self.x0..self.x1
    }

    fn overlaps(&self, other: &ComponentSpec) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

/// A pixel rectangle, used to select sensor subsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectSpec {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl RectSpec {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.y0 && r < self.y1 && c >= self.x0 && c < self.x1
    }
}

/// Gaussian measurement noise applied to a subset of sensors.
///
/// The subset is named either by `sensor_ids` (indices into the sensor list)
/// or by a pixel `region`; with neither, every sensor is noisy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor_ids: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<RectSpec>,
    /// Noise standard deviation in Kelvin.
    pub sigma: f64,
}

/// Component placement, sensor positions, and the noise plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub components: Vec<ComponentSpec>,
    /// Sensor pixels as `[row, col]` pairs.
    pub sensors: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoisePlan>,
}

/// On-disk layout document: domain plus layout in one JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutFile {
    pub domain: DomainSpec,
    #[serde(flatten)]
    pub layout: LayoutSpec,
}

impl LayoutSpec {
    pub fn validate(&self, domain: &DomainSpec) -> Result<(), GridError> {
        domain.validate()?;
        let (h, w) = domain.shape();
        let mut ids = std::collections::HashSet::new();
        for comp in &self.components {
            if comp.x0 >= comp.x1 || comp.y0 >= comp.y1 || comp.x1 > w || comp.y1 > h {
                return Err(GridError::BadComponentRect {
                    id: comp.id.clone(),
                    x0: comp.x0,
                    x1: comp.x1,
                    y0: comp.y0,
                    y1: comp.y1,
                    h,
                    w,
                });
            }
            comp.dist.validate().map_err(|_| GridError::BadComponentRect {
                id: comp.id.clone(),
                x0: comp.x0,
                x1: comp.x1,
                y0: comp.y0,
                y1: comp.y1,
                h,
                w,
            })?;
            if !ids.insert(comp.id.clone()) {
                return Err(GridError::DuplicateComponentId(comp.id.clone()));
            }
        }
        for i in 0..self.components.len() {
            for j in i + 1..self.components.len() {
                if self.components[i].overlaps(&self.components[j]) {
                    return Err(GridError::OverlappingComponents {
                        a: self.components[i].id.clone(),
                        b: self.components[j].id.clone(),
                    });
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (index, &[r, c]) in self.sensors.iter().enumerate() {
            if r >= h || c >= w {
                return Err(GridError::SensorOutOfBounds { index, r, c, h, w });
            }
            if !seen.insert((r, c)) {
                return Err(GridError::DuplicateSensor { r, c });
            }
        }
        if let Some(noise) = &self.noise {
            if noise.sigma < 0.0 {
                return Err(GridError::NegativeSigma(noise.sigma));
            }
            if noise.sensor_ids.is_some() && noise.region.is_some() {
                return Err(GridError::AmbiguousNoisePlan);
            }
            if let Some(ids) = &noise.sensor_ids {
                for &id in ids {
                    if id >= self.sensors.len() {
                        return Err(GridError::NoiseIdOutOfRange { id, count: self.sensors.len() });
                    }
                }
            }
        }
        Ok(())
    }

    /// Indices (into `sensors`) of the sensors that receive noise, in
    /// ascending order. Empty when no noise plan is present or sigma is 0.
    pub fn noisy_sensor_indices(&self) -> Vec<usize> {
        let Some(noise) = &self.noise else { return Vec::new() };
        if noise.sigma == 0.0 {
            return Vec::new();
        }
        let mut out: Vec<usize> = if let Some(ids) = &noise.sensor_ids {
            let mut v = ids.clone();
            v.sort_unstable();
            v.dedup();
            v
        } else if let Some(region) = &noise.region {
            self.sensors
                .iter()
                .enumerate()
                .filter(|(_, &[r, c])| region.contains(r, c))
                .map(|(i, _)| i)
                .collect()
        } else {
            (0..self.sensors.len()).collect()
        };
        out.sort_unstable();
        out
    }
}

/// A dense temperature raster with its physical cell spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    /// Temperatures (Kelvin, or dimensionless after normalization), H×W.
    pub values: Array2<f64>,
    pub dx: f64,
    pub dy: f64,
}

impl FieldGrid {
    pub fn new(domain: &DomainSpec, values: Array2<f64>) -> Result<Self, GridError> {
        let (fh, fw) = values.dim();
        let (h, w) = domain.shape();
        if (fh, fw) != (h, w) {
            return Err(GridError::ShapeMismatch { fh, fw, h, w });
        }
        Ok(FieldGrid { values, dx: domain.dx(), dy: domain.dy() })
    }

    /// Constant field at temperature `t`.
    pub fn constant(domain: &DomainSpec, t: f64) -> Self {
        FieldGrid {
            values: Array2::from_elem(domain.shape(), t),
            dx: domain.dx(),
            dy: domain.dy(),
        }
    }

    /// Kelvin → dimensionless: `(T − 298) / 50` at every pixel.
    pub fn normalized(&self) -> FieldGrid {
        FieldGrid { values: self.values.mapv(|v| (v - T_REF) / T_SCALE), dx: self.dx, dy: self.dy }
    }

    /// Dimensionless → Kelvin: inverse of [`FieldGrid::normalized`].
    pub fn denormalized(&self) -> FieldGrid {
        FieldGrid { values: self.values.mapv(|v| v * T_SCALE + T_REF), dx: self.dx, dy: self.dy }
    }
}

/// Sparse raster carrying sensor temperatures at monitor pixels, 0 elsewhere.
pub type MpImage = Array2<f64>;

/// Kelvin → dimensionless on a sparse monitor image: nonzero pixels map
/// through `(T − 298) / 50`; zero (non-monitor) pixels stay exactly 0.
pub fn normalize_mp(mp: &MpImage) -> MpImage {
    mp.mapv(|v| if v != 0.0 { (v - T_REF) / T_SCALE } else { 0.0 })
}

/// Boolean rasters naming the role of every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    /// Monitor (sensor) pixels.
    pub mp: Array2<bool>,
    /// Component-free area.
    pub nc: Array2<bool>,
    /// Dirichlet heat-sink pixels on the top boundary.
    pub bc: Array2<bool>,
    /// Per-component footprints, in layout order.
    pub components: Vec<(String, Array2<bool>)>,
}

impl RegionMasks {
    pub fn count(mask: &Array2<bool>) -> usize {
        mask.iter().filter(|&&b| b).count()
    }
}

/// Construct all region masks from the layout. Deterministic: identical
/// inputs yield bit-identical masks.
pub fn build_masks(domain: &DomainSpec, layout: &LayoutSpec) -> Result<RegionMasks, GridError> {
    layout.validate(domain)?;
    let (h, w) = domain.shape();

    let mut bc = Array2::from_elem((h, w), false);
    let (start, len) = domain.sink_span()?;
    for c in start..start + len {
        bc[[0, c]] = true;
    }

    let mut nc = Array2::from_elem((h, w), true);
    let mut components = Vec::with_capacity(layout.components.len());
    for comp in &layout.components {
        let mut mask = Array2::from_elem((h, w), false);
        for r in comp.rows() {
            for c in comp.cols() {
                mask[[r, c]] = true;
                nc[[r, c]] = false;
            }
        }
        components.push((comp.id.clone(), mask));
    }

    let mut mp = Array2::from_elem((h, w), false);
    for &[r, c] in &layout.sensors {
        mp[[r, c]] = true;
    }

    Ok(RegionMasks { mp, nc, bc, components })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::PowerDistribution;

    fn domain() -> DomainSpec {
        DomainSpec { side_length: 0.1, grid_h: 10, grid_w: 10, sink_width: 0.02, sink_temp: 298.0 }
    }

    fn comp(id: &str, x0: usize, y0: usize, x1: usize, y1: usize) -> ComponentSpec {
        ComponentSpec {
            id: id.to_string(),
            x0,
            y0,
            x1,
            y1,
            dist: PowerDistribution::Normal { mean: 10000.0, std: 1000.0 },
        }
    }

    #[test]
    fn domain_invariants_enforced() {
        assert!(domain().validate().is_ok());
        let mut d = domain();
        d.grid_h = 3;
        assert!(matches!(d.validate(), Err(GridError::GridTooSmall { .. })));
        let mut d = domain();
        d.sink_width = 0.1;
        assert!(matches!(d.validate(), Err(GridError::BadSinkWidth { .. })));
        let mut d = domain();
        d.sink_temp = 0.0;
        assert!(matches!(d.validate(), Err(GridError::BadSinkTemp(_))));
    }

    #[test]
    fn sink_spanning_two_cells_gives_two_bc_pixels() {
        // delta/L * W = 0.02/0.1 * 10 = 2 cells, centered: columns 4 and 5.
        let layout = LayoutSpec { components: vec![], sensors: vec![], noise: None };
        let masks = build_masks(&domain(), &layout).unwrap();
        assert_eq!(RegionMasks::count(&masks.bc), 2);
        assert!(masks.bc[[0, 4]] && masks.bc[[0, 5]]);
    }

    #[test]
    fn sink_narrower_than_cell_is_resolution_error() {
        let mut d = domain();
        d.grid_w = 4;
        d.grid_h = 4;
        d.sink_width = 0.01; // 0.4 cells -> rounds to 0
        assert!(matches!(d.sink_span(), Err(GridError::SinkUnresolved { .. })));
    }

    #[test]
    fn single_sensor_sets_single_mp_pixel() {
        let layout = LayoutSpec { components: vec![], sensors: vec![[3, 3]], noise: None };
        let masks = build_masks(&domain(), &layout).unwrap();
        assert_eq!(RegionMasks::count(&masks.mp), 1);
        assert!(masks.mp[[3, 3]]);
    }

    #[test]
    fn component_footprint_excluded_from_nc() {
        let layout = LayoutSpec { components: vec![comp("C1", 2, 3, 4, 5)], sensors: vec![], noise: None };
        let masks = build_masks(&domain(), &layout).unwrap();
        assert_eq!(RegionMasks::count(&masks.nc), 100 - 4);
        for r in 3..5 {
            for c in 2..4 {
                assert!(!masks.nc[[r, c]]);
                assert!(masks.components[0].1[[r, c]]);
            }
        }
        assert_eq!(masks.components[0].0, "C1");
    }

    #[test]
    fn overlapping_components_rejected() {
        let layout = LayoutSpec {
            components: vec![comp("A", 2, 2, 5, 5), comp("B", 4, 4, 7, 7)],
            sensors: vec![],
            noise: None,
        };
        assert!(matches!(
            layout.validate(&domain()),
            Err(GridError::OverlappingComponents { .. })
        ));
        // Touching edges do not overlap.
        let layout = LayoutSpec {
            components: vec![comp("A", 2, 2, 5, 5), comp("B", 5, 2, 7, 5)],
            sensors: vec![],
            noise: None,
        };
        assert!(layout.validate(&domain()).is_ok());
    }

    #[test]
    fn out_of_bounds_and_duplicates_rejected() {
        let layout = LayoutSpec { components: vec![comp("A", 8, 8, 11, 11)], sensors: vec![], noise: None };
        assert!(matches!(layout.validate(&domain()), Err(GridError::BadComponentRect { .. })));
        let layout = LayoutSpec { components: vec![], sensors: vec![[2, 2], [2, 2]], noise: None };
        assert!(matches!(layout.validate(&domain()), Err(GridError::DuplicateSensor { .. })));
        let layout = LayoutSpec { components: vec![], sensors: vec![[10, 0]], noise: None };
        assert!(matches!(layout.validate(&domain()), Err(GridError::SensorOutOfBounds { .. })));
        let layout = LayoutSpec {
            components: vec![comp("A", 0, 0, 2, 2), comp("A", 4, 4, 6, 6)],
            sensors: vec![],
            noise: None,
        };
        assert!(matches!(layout.validate(&domain()), Err(GridError::DuplicateComponentId(_))));
    }

    #[test]
    fn noise_plan_selection_modes() {
        let sensors = vec![[1, 1], [1, 8], [8, 1], [8, 8]];
        let mk = |noise| LayoutSpec { components: vec![], sensors: sensors.clone(), noise };

        let all = mk(Some(NoisePlan { sensor_ids: None, region: None, sigma: 0.25 }));
        assert_eq!(all.noisy_sensor_indices(), vec![0, 1, 2, 3]);

        let ids = mk(Some(NoisePlan { sensor_ids: Some(vec![3, 1, 1]), region: None, sigma: 0.25 }));
        assert_eq!(ids.noisy_sensor_indices(), vec![1, 3]);

        let region = mk(Some(NoisePlan {
            sensor_ids: None,
            region: Some(RectSpec { x0: 0, y0: 0, x1: 5, y1: 5 }),
            sigma: 0.25,
        }));
        assert_eq!(region.noisy_sensor_indices(), vec![0]);

        let none = mk(None);
        assert!(none.noisy_sensor_indices().is_empty());

        let zero_sigma = mk(Some(NoisePlan { sensor_ids: None, region: None, sigma: 0.0 }));
        assert!(zero_sigma.noisy_sensor_indices().is_empty());

        let both = mk(Some(NoisePlan {
            sensor_ids: Some(vec![0]),
            region: Some(RectSpec { x0: 0, y0: 0, x1: 5, y1: 5 }),
            sigma: 0.25,
        }));
        assert!(matches!(both.validate(&domain()), Err(GridError::AmbiguousNoisePlan)));

        let bad_id = mk(Some(NoisePlan { sensor_ids: Some(vec![9]), region: None, sigma: 0.25 }));
        assert!(matches!(bad_id.validate(&domain()), Err(GridError::NoiseIdOutOfRange { .. })));
    }

    #[test]
    fn normalization_fixed_points_and_round_trip() {
        let d = domain();
        let f = FieldGrid::constant(&d, 298.0);
        assert_eq!(f.normalized().values[[0, 0]], 0.0);
        let f = FieldGrid::constant(&d, 348.0);
        assert_eq!(f.normalized().values[[0, 0]], 1.0);

        let mut values = Array2::zeros(d.shape());
        for (i, v) in values.iter_mut().enumerate() {
            *v = 298.0 + (i as f64 * 0.37) % 60.0;
        }
        let f = FieldGrid::new(&d, values.clone()).unwrap();
        let rt = f.normalized().denormalized();
        for (a, b) in rt.values.iter().zip(values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_mp_preserves_zeros() {
        let mut mp: MpImage = Array2::zeros((6, 6));
        mp[[2, 3]] = 348.0;
        mp[[4, 4]] = 298.0 - 25.0;
        let n = normalize_mp(&mp);
        assert_eq!(n[[2, 3]], 1.0);
        assert_eq!(n[[4, 4]], -0.5);
        assert_eq!(n.iter().filter(|&&v| v != 0.0).count(), 2);
    }

    #[test]
    fn masks_are_deterministic() {
        let layout = LayoutSpec {
            components: vec![comp("A", 1, 1, 4, 4), comp("B", 6, 6, 9, 9)],
            sensors: vec![[0, 0], [5, 5]],
            noise: None,
        };
        let a = build_masks(&domain(), &layout).unwrap();
        let b = build_masks(&domain(), &layout).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layout_json_schema_round_trips() {
        let text = r#"{
            "domain": {"L": 0.1, "H": 10, "W": 10, "delta": 0.02, "T0": 298.0},
            "components": [
                {"id": "C1", "x0": 1, "y0": 2, "x1": 4, "y1": 5,
                 "dist": {"kind": "gumbel", "mean": 30000.0, "std": 6000.0}},
                {"id": "C2", "x0": 6, "y0": 6, "x1": 9, "y1": 9,
                 "dist": {"kind": "uniform", "lo": 100.0, "hi": 12000.0}}
            ],
            "sensors": [[1, 1], [8, 8]],
            "noise": {"sensor_ids": [0], "sigma": 0.25}
        }"#;
        let file: LayoutFile = serde_json::from_str(text).unwrap();
        assert_eq!(file.domain.grid_h, 10);
        assert_eq!(file.layout.components[0].id, "C1");
        assert!(matches!(
            file.layout.components[0].dist,
            PowerDistribution::Gumbel { .. }
        ));
        assert_eq!(file.layout.sensors, vec![[1, 1], [8, 8]]);
        file.layout.validate(&file.domain).unwrap();

        let redone: LayoutFile =
            serde_json::from_str(&serde_json::to_string(&file).unwrap()).unwrap();
        assert_eq!(redone, file);
    }
}
