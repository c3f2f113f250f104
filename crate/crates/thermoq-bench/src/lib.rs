//! Shared fixtures for the pipeline benchmarks.

use thermoq::grid::{ComponentSpec, DomainSpec, LayoutSpec};
use thermoq::stochastic::PowerDistribution;

/// 32×32 two-component layout with a 5×5 sensor grid.
pub fn bench_fixture() -> (DomainSpec, LayoutSpec) {
    let domain = DomainSpec {
        side_length: 0.1,
        grid_h: 32,
        grid_w: 32,
        sink_width: 0.04,
        sink_temp: 298.0,
    };
    let comp = |id: &str, x0, y0, x1, y1| ComponentSpec {
        id: id.into(),
        x0,
        y0,
        x1,
        y1,
        dist: PowerDistribution::Uniform { lo: 2.0, hi: 10.0 },
    };
    let mut sensors = Vec::new();
    for r in [3usize, 9, 15, 21, 27] {
        for c in [3usize, 9, 15, 21, 27] {
            sensors.push([r, c]);
        }
    }
    let layout = LayoutSpec {
        components: vec![comp("C1", 4, 18, 12, 26), comp("C2", 20, 6, 28, 14)],
        sensors,
        noise: None,
    };
    (domain, layout)
}
