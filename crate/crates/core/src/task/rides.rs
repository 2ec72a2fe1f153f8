//! Ride records: a seeded synthetic demand model and CSV ingestion.

use std::io;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::{CityGrid, State};
use super::TaskError;
use crate::seed::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RideRecord {
    pub pickup: State,
    pub dropoff: State,
    pub fare: f64,
}

impl RideRecord {
    /// The action taken: the dropoff cell.
    pub fn action(&self) -> usize {
        self.dropoff.cell
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub cell: usize,
    pub peak_slot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemandConfig {
    pub hotspots: usize,
    /// Share of pickups drawn from hotspot cells.
    pub hotspot_weight: f64,
    /// Share of dropoffs drawn from hotspot cells.
    pub dropoff_hotspot_weight: f64,
    /// Standard deviation of a hotspot's daily demand peak, in slots.
    pub peak_width_slots: f64,
    /// Off-peak intensity of a hotspot relative to its peak.
    pub peak_floor: f64,
    pub base_fare: f64,
    pub per_cell_rate: f64,
    /// Cells travelled per time slot.
    pub cells_per_slot: f64,
    /// Share of a stream's rides that start and end near that stream's home
    /// cell (0 makes every stream an i.i.d. sample of the city).
    pub home_share: f64,
    /// Manhattan radius of the home area.
    pub home_radius: usize,
}

impl Default for DemandConfig {
    fn default() -> Self {
        Self {
            hotspots: 4,
            hotspot_weight: 0.7,
            dropoff_hotspot_weight: 0.6,
            peak_width_slots: 8.0,
            peak_floor: 0.05,
            base_fare: 3.0,
            per_cell_rate: 1.5,
            cells_per_slot: 2.0,
            home_share: 0.0,
            home_radius: 2,
        }
    }
}

/// Hotspot layout plus the per-slot hotspot mixture, fixed per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandModel {
    grid: CityGrid,
    config: DemandConfig,
    hotspots: Vec<Hotspot>,
    /// `mixture[slot][h]`: cumulative probability of hotspot `h` at `slot`.
    mixture: Vec<Vec<f64>>,
}

impl DemandModel {
    pub fn new(grid: CityGrid, config: DemandConfig, seed: u64) -> Result<Self, TaskError> {
        if config.hotspots == 0 || config.hotspots > grid.cells() {
            return Err(TaskError::Config(format!("hotspot count {} out of range", config.hotspots)));
        }
        for (name, w) in [("hotspot_weight", config.hotspot_weight), ("dropoff_hotspot_weight", config.dropoff_hotspot_weight)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(TaskError::Config(format!("{name} {w} outside [0, 1]")));
            }
        }
        if !(config.base_fare >= 0.0 && config.per_cell_rate >= 0.0 && config.cells_per_slot > 0.0) {
            return Err(TaskError::Config("fares must be nonnegative and travel speed positive".into()));
        }
        if !(0.0..=1.0).contains(&config.home_share) {
            return Err(TaskError::Config(format!("home_share {} outside [0, 1]", config.home_share)));
        }
        if !(config.peak_width_slots > 0.0 && config.peak_floor >= 0.0) {
            return Err(TaskError::Config("peak width must be positive and floor nonnegative".into()));
        }
        let mut rng = seed::stream(seed, &[seed::tag::INIT, 0xDE]);
        let mut cells: Vec<usize> = (0..grid.cells()).collect();
        cells.shuffle(&mut rng);
        let hotspots: Vec<Hotspot> = (0..config.hotspots)
            .map(|h| Hotspot { cell: cells[h], peak_slot: h * grid.slots() / config.hotspots })
            .collect();
        let mixture = (0..grid.slots())
            .map(|slot| {
                let w: Vec<f64> = hotspots
                    .iter()
                    .map(|h| {
                        let d = grid.slot_distance(slot, h.peak_slot) as f64;
                        config.peak_floor + (-d * d / (2.0 * config.peak_width_slots.powi(2))).exp()
                    })
                    .collect();
                let total: f64 = w.iter().sum();
                w.iter()
                    .scan(0.0, |acc, x| {
                        *acc += x / total;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { grid, config, hotspots, mixture })
    }

    pub fn grid(&self) -> CityGrid {
        self.grid
    }

    pub fn config(&self) -> &DemandConfig {
        &self.config
    }

    pub fn hotspots(&self) -> &[Hotspot] {
        &self.hotspots
    }

    pub fn is_hotspot(&self, cell: usize) -> bool {
        self.hotspots.iter().any(|h| h.cell == cell)
    }

    pub fn fare(&self, from: usize, to: usize) -> f64 {
        self.config.base_fare + self.config.per_cell_rate * self.grid.manhattan(from, to) as f64
    }

    pub fn travel_slots(&self, from: usize, to: usize) -> usize {
        ((self.grid.manhattan(from, to) as f64 / self.config.cells_per_slot).ceil() as usize).max(1)
    }

    fn draw_cell(&self, rng: &mut StreamRng, slot: usize, hotspot_weight: f64) -> usize {
        if rng.gen::<f64>() < hotspot_weight {
            let u = rng.gen::<f64>();
            let h = self.mixture[slot].iter().position(|&c| u < c).unwrap_or(self.hotspots.len() - 1);
            self.hotspots[h].cell
        } else {
            rng.gen_range(0..self.grid.cells())
        }
    }

    pub fn draw_ride(&self, rng: &mut StreamRng) -> RideRecord {
        let slot = rng.gen_range(0..self.grid.slots());
        let from = self.draw_cell(rng, slot, self.config.hotspot_weight);
        let to = self.draw_cell(rng, slot, self.config.dropoff_hotspot_weight);
        let dropoff_slot = self.grid.advance(slot, self.travel_slots(from, to));
        RideRecord {
            pickup: State { cell: from, slot },
            dropoff: State { cell: to, slot: dropoff_slot },
            fare: self.fare(from, to),
        }
    }
}

const HOME_DRAW_ATTEMPTS: usize = 10_000;

/// Home cell of a ride stream, fixed per seed.
pub fn home_cell(grid: &CityGrid, stream: u64, seed: u64) -> usize {
    (seed::derive(seed, &[seed::tag::RIDES, u64::MAX, stream]) % grid.cells() as u64) as usize
}

/// Ride set observed by `stream` (an agent id, or any other label) in `round`.
/// A `home_share` of them are drawn conditioned on both endpoints lying in
/// the stream's home area.
pub fn generate_rides(demand: &DemandModel, count: usize, stream: u64, round: u64, seed: u64) -> Vec<RideRecord> {
    let mut rng = seed::stream(seed, &[seed::tag::RIDES, stream, round]);
    let cfg = &demand.config;
    let home = home_cell(&demand.grid, stream, seed);
    (0..count)
        .map(|_| {
            let mut ride = demand.draw_ride(&mut rng);
            if cfg.home_share > 0.0 && rng.gen::<f64>() < cfg.home_share {
                for _ in 0..HOME_DRAW_ATTEMPTS {
                    let near = |c: usize| demand.grid.manhattan(c, home) <= cfg.home_radius;
                    if near(ride.pickup.cell) && near(ride.dropoff.cell) {
                        break;
                    }
                    ride = demand.draw_ride(&mut rng);
                }
            }
            ride
        })
        .collect()
}

/// Held-out rides used only for evaluation.
pub fn generate_test_rides(demand: &DemandModel, count: usize, seed: u64) -> Vec<RideRecord> {
    let mut rng = seed::stream(seed, &[seed::tag::TEST_RIDES]);
    (0..count).map(|_| demand.draw_ride(&mut rng)).collect()
}

pub const CSV_COLUMNS: [&str; 5] = ["pickup_cell", "pickup_slot", "dropoff_cell", "dropoff_slot", "fare"];

/// Parse rides from CSV with the columns in [`CSV_COLUMNS`] (any order).
pub fn read_rides_csv<R: io::Read>(grid: &CityGrid, reader: R) -> Result<Vec<RideRecord>, TaskError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| TaskError::Format(e.to_string()))?.clone();
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TaskError::Format(format!("missing column `{name}`")))?;
    }
    let mut rides = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| TaskError::Format(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let row = |message: String| TaskError::Row { line, message };
        let field = |i: usize| record.get(cols[i]).unwrap_or("");
        let int = |i: usize| {
            field(i).parse::<usize>().map_err(|_| row(format!("{} `{}` is not a nonnegative integer", CSV_COLUMNS[i], field(i))))
        };
        let pickup = State { cell: int(0)?, slot: int(1)? };
        let dropoff = State { cell: int(2)?, slot: int(3)? };
        let fare: f64 = field(4).parse().map_err(|_| row(format!("fare `{}` is not a number", field(4))))?;
        if !fare.is_finite() || fare < 0.0 {
            return Err(row(format!("fare {fare} must be finite and nonnegative")));
        }
        for (what, s) in [("pickup", pickup), ("dropoff", dropoff)] {
            if !grid.contains(s) {
                return Err(row(format!("{what} ({}, {}) lies outside the grid", s.cell, s.slot)));
            }
        }
        rides.push(RideRecord { pickup, dropoff, fare });
    }
    Ok(rides)
}

pub fn ingest_rides_csv(grid: &CityGrid, path: &std::path::Path) -> Result<Vec<RideRecord>, TaskError> {
    let file = std::fs::File::open(path).map_err(|e| TaskError::Io(format!("{}: {e}", path.display())))?;
    read_rides_csv(grid, io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::grid::DEFAULT_SLOTS;

    fn demand() -> DemandModel {
        DemandModel::new(CityGrid::new(8, DEFAULT_SLOTS).unwrap(), DemandConfig::default(), 3).unwrap()
    }

    #[test]
    fn generator_basics() {
        let d = demand();
        assert!(generate_rides(&d, 0, 0, 0, 1).is_empty());
        assert_eq!(generate_rides(&d, 50, 2, 7, 1), generate_rides(&d, 50, 2, 7, 1));
        assert_ne!(generate_rides(&d, 50, 2, 7, 1), generate_rides(&d, 50, 2, 8, 1));
        assert_eq!(d.fare(5, 5), 3.0);
        for r in generate_rides(&d, 1_000, 0, 0, 9) {
            assert!(r.fare >= 3.0);
            assert_eq!(r.fare, d.fare(r.pickup.cell, r.dropoff.cell));
            assert_eq!(r.dropoff.slot, d.grid().advance(r.pickup.slot, d.travel_slots(r.pickup.cell, r.dropoff.cell)));
        }
    }

    #[test]
    fn pickups_concentrate_on_hotspots() {
        let d = demand();
        let rides = generate_rides(&d, 10_000, 0, 0, 4);
        let share = rides.iter().filter(|r| d.is_hotspot(r.pickup.cell)).count() as f64 / 1e4;
        // 0.7 from hotspots plus uniform draws that land on one of 4/64 cells.
        let expected = 0.7 + 0.3 * 4.0 / 64.0;
        assert!(share >= 0.6 && (share - expected).abs() < 0.02, "{share}");
    }

    #[test]
    fn csv_ingestion() {
        let g = CityGrid::new(8, DEFAULT_SLOTS).unwrap();
        let header = "pickup_cell,pickup_slot,dropoff_cell,dropoff_slot,fare\n";
        assert!(read_rides_csv(&g, header.as_bytes()).unwrap().is_empty());
        let one = format!("{header}3,10,4,11,7.5\n");
        let rides = read_rides_csv(&g, one.as_bytes()).unwrap();
        assert_eq!(rides, vec![RideRecord {
            pickup: State { cell: 3, slot: 10 },
            dropoff: State { cell: 4, slot: 11 },
            fare: 7.5
        }]);
        let neg = format!("{header}3,10,4,11,7.5\n1,1,1,1,-3\n");
        assert!(matches!(read_rides_csv(&g, neg.as_bytes()), Err(TaskError::Row { line: 3, .. })));
        let missing = "pickup_cell,pickup_slot,dropoff_cell,fare\n1,1,1,2\n";
        assert!(matches!(read_rides_csv(&g, missing.as_bytes()), Err(TaskError::Format(m)) if m.contains("dropoff_slot")));
        let outside = format!("{header}64,0,1,1,2\n");
        assert!(matches!(read_rides_csv(&g, outside.as_bytes()), Err(TaskError::Row { line: 2, .. })));
    }
}
