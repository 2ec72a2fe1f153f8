//! Aggregated simulation revenue: total fare collected by a set of simulated
//! taxi trajectories driven by a relocation policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::{CityGrid, State};
use super::qnet::QNet;
use super::rides::RideRecord;
use super::TaskError;
use crate::seed;

/// Decides where an idle taxi goes for the next slot.
pub trait Policy: Sync {
    /// `None` idles in place; `Some(cell)` relocates there.
    fn relocate(&self, s: State) -> Option<usize>;
}

/// Waits in place whenever no ride is available.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoLearning;

impl Policy for NoLearning {
    fn relocate(&self, _: State) -> Option<usize> {
        None
    }
}

/// Relocates to the argmax-Q cell. The argmax for every state is computed
/// once up front.
#[derive(Debug, Clone)]
pub struct QPolicy {
    grid: CityGrid,
    table: Vec<u32>,
}

impl QPolicy {
    pub fn new(grid: &CityGrid, net: &QNet, params: &[f32]) -> Self {
        let mut scratch = net.scratch();
        let mut table = vec![0u32; grid.state_count()];
        for cell in 0..grid.cells() {
            for slot in 0..grid.slots() {
                let s = State { cell, slot };
                table[grid.state_index(s)] = QNet::argmax(net.forward(params, s, &mut scratch)) as u32;
            }
        }
        Self { grid: *grid, table }
    }
}

impl Policy for QPolicy {
    fn relocate(&self, s: State) -> Option<usize> {
        Some(self.table[self.grid.state_index(s)] as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub starts: Vec<State>,
    pub max_rides: usize,
    pub horizon_slots: usize,
}

impl Benchmark {
    /// Start states drawn from the pickups of `test` rides.
    pub fn sample(
        test: &[RideRecord],
        trajectories: usize,
        max_rides: usize,
        horizon_slots: usize,
        seed: u64,
        repetition: u64,
    ) -> Result<Self, TaskError> {
        if test.is_empty() {
            return Err(TaskError::Benchmark("no test rides to seed trajectories from".into()));
        }
        let mut rng = seed::stream(seed, &[seed::tag::TRAJECTORIES, repetition]);
        let starts = (0..trajectories).map(|_| test[rng.gen_range(0..test.len())].pickup).collect();
        Ok(Self { starts, max_rides, horizon_slots })
    }
}

/// Test rides indexed by pickup state.
#[derive(Debug, Clone)]
pub struct RideBook {
    grid: CityGrid,
    rides: Vec<RideRecord>,
    bins: Vec<Vec<u32>>,
}

impl RideBook {
    pub fn new(grid: &CityGrid, rides: Vec<RideRecord>) -> Result<Self, TaskError> {
        let mut bins = vec![Vec::new(); grid.state_count()];
        for (i, r) in rides.iter().enumerate() {
            if !grid.contains(r.pickup) || !grid.contains(r.dropoff) {
                return Err(TaskError::Benchmark(format!("ride {i} lies outside the grid")));
            }
            bins[grid.state_index(r.pickup)].push(i as u32);
        }
        Ok(Self { grid: *grid, rides, bins })
    }

    pub fn rides(&self) -> &[RideRecord] {
        &self.rides
    }

    fn duration(&self, r: &RideRecord) -> usize {
        let slots = self.grid.slots();
        ((r.dropoff.slot + slots - r.pickup.slot) % slots).max(1)
    }
}

/// Fare collected by one taxi from `start`, consuming rides from its own pool.
fn trajectory(policy: &dyn Policy, book: &RideBook, start: State, b: &Benchmark, taken: &mut [u32], touched: &mut Vec<usize>) -> f64 {
    let grid = &book.grid;
    let mut s = start;
    let (mut elapsed, mut rides, mut fare) = (0usize, 0usize, 0.0f64);
    while rides < b.max_rides && elapsed < b.horizon_slots {
        let bin = grid.state_index(s);
        let k = taken[bin] as usize;
        if let Some(&id) = book.bins[bin].get(k) {
            if k == 0 {
                touched.push(bin);
            }
            taken[bin] += 1;
            let r = &book.rides[id as usize];
            fare += r.fare;
            elapsed += book.duration(r);
            rides += 1;
            s = r.dropoff;
        } else {
            let slot = grid.advance(s.slot, 1);
            s = State { cell: policy.relocate(s).unwrap_or(s.cell), slot };
            elapsed += 1;
        }
    }
    for bin in touched.drain(..) {
        taken[bin] = 0;
    }
    fare
}

/// ASR of `policy`: total fare over each benchmark's trajectories, averaged
/// over benchmarks.
pub fn asr_evaluate(policy: &dyn Policy, benchmarks: &[Benchmark], book: &RideBook) -> Result<f64, TaskError> {
    if benchmarks.is_empty() {
        return Err(TaskError::Benchmark("no benchmark trajectories".into()));
    }
    let mut taken = vec![0u32; book.grid.state_count()];
    let mut touched = Vec::new();
    let mut total = 0.0;
    for b in benchmarks {
        if b.starts.is_empty() || b.max_rides == 0 || b.horizon_slots == 0 {
            return Err(TaskError::Benchmark("benchmark needs trajectories, a ride cap and a horizon".into()));
        }
        for &start in &b.starts {
            if !book.grid.contains(start) {
                return Err(TaskError::Benchmark(format!("start {start:?} lies outside the grid")));
            }
            if let Some(c) = policy.relocate(start).filter(|&c| c >= book.grid.cells()) {
                return Err(TaskError::Benchmark(format!("policy relocates to unknown cell {c}")));
            }
            total += trajectory(policy, book, start, b, &mut taken, &mut touched);
        }
    }
    Ok(total / benchmarks.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ride(cell: usize, slot: usize, to: usize, dslot: usize, fare: f64) -> RideRecord {
        RideRecord { pickup: State { cell, slot }, dropoff: State { cell: to, slot: dslot }, fare }
    }

    struct Always(usize);
    impl Policy for Always {
        fn relocate(&self, _: State) -> Option<usize> {
            Some(self.0)
        }
    }

    #[test]
    fn saturated_city_makes_policies_equal() {
        let g = CityGrid::new(2, 4).unwrap();
        let mut rides = Vec::new();
        for cell in 0..4 {
            for slot in 0..4 {
                for _ in 0..10 {
                    rides.push(ride(cell, slot, (cell + 1) % 4, (slot + 1) % 4, 2.0));
                }
            }
        }
        let book = RideBook::new(&g, rides.clone()).unwrap();
        let b = vec![Benchmark::sample(&rides, 5, 3, 12, 0, 0).unwrap()];
        let nl = asr_evaluate(&NoLearning, &b, &book).unwrap();
        assert_eq!(nl, 5.0 * 3.0 * 2.0);
        assert_eq!(asr_evaluate(&Always(3), &b, &book).unwrap(), nl);
    }

    #[test]
    fn relocation_finds_rides_idling_misses() {
        let g = CityGrid::new(2, 8).unwrap();
        let rides: Vec<_> = (0..8).map(|s| ride(3, s, 3, (s + 1) % 8, 5.0)).collect();
        let book = RideBook::new(&g, rides).unwrap();
        let b = vec![Benchmark { starts: vec![State { cell: 0, slot: 0 }], max_rides: 50, horizon_slots: 8 }];
        assert_eq!(asr_evaluate(&NoLearning, &b, &book).unwrap(), 0.0);
        // Relocate during slot 0, then ride every slot from 1 to 7.
        assert_eq!(asr_evaluate(&Always(3), &b, &book).unwrap(), 35.0);
    }

    #[test]
    fn pools_are_per_trajectory() {
        let g = CityGrid::new(2, 4).unwrap();
        let book = RideBook::new(&g, vec![ride(0, 0, 1, 1, 4.0)]).unwrap();
        let start = State { cell: 0, slot: 0 };
        let b = vec![Benchmark { starts: vec![start, start], max_rides: 5, horizon_slots: 4 }];
        assert_eq!(asr_evaluate(&NoLearning, &b, &book).unwrap(), 8.0);
    }

    #[test]
    fn zero_q_is_deterministic() {
        let g = CityGrid::new(3, 6).unwrap();
        let net = QNet::new(&g, 4);
        let zeros = vec![0.0; net.param_count()];
        let p = QPolicy::new(&g, &net, &zeros);
        assert_eq!(p.relocate(State { cell: 7, slot: 2 }), Some(0));
        let rides: Vec<_> = (0..30).map(|i| ride(i % 9, i % 6, (i + 4) % 9, (i + 1) % 6, 1.0 + i as f64)).collect();
        let book = RideBook::new(&g, rides.clone()).unwrap();
        let b = vec![Benchmark::sample(&rides, 10, 50, 6, 3, 0).unwrap()];
        assert_eq!(asr_evaluate(&p, &b, &book).unwrap(), asr_evaluate(&p, &b, &book).unwrap());
    }

    #[test]
    fn malformed_benchmarks() {
        let g = CityGrid::new(2, 4).unwrap();
        let book = RideBook::new(&g, vec![ride(0, 0, 1, 1, 4.0)]).unwrap();
        assert!(asr_evaluate(&NoLearning, &[], &book).is_err());
        let bad = Benchmark { starts: vec![State { cell: 9, slot: 0 }], max_rides: 1, horizon_slots: 1 };
        assert!(asr_evaluate(&NoLearning, &[bad], &book).is_err());
        assert!(Benchmark::sample(&[], 1, 1, 1, 0, 0).is_err());
    }
}
