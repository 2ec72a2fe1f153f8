//! Q-network over (cell, slot) states and the fitted-Q update.
//!
//! Input is one-hot cell ⊕ one-hot slot, two ReLU hidden layers of width `H`,
//! and one linear output per destination cell. Parameters are laid out
//! layer-major in a flat vector:
//!
//! ```text
//! W1[H × in] row-major | b1[H] | W2[H × H] | b2[H] | W3[out × H] | b3[out]
//! ```
//!
//! Only two input units are ever active, so the first layer reads two
//! columns of `W1` instead of a full product.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::{CityGrid, State};
use super::rides::RideRecord;
use crate::agent::{TrainError, TrainStats};
use crate::params::ParamVector;
use crate::seed::{self, StreamRng};

pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QNet {
    cells: usize,
    slots: usize,
    hidden: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Scratch {
    z1: Vec<f32>,
    h1: Vec<f32>,
    z2: Vec<f32>,
    h2: Vec<f32>,
    q: Vec<f32>,
    dz2: Vec<f32>,
    dz1: Vec<f32>,
}

/// Regression target for one ride: `Q(state, action) ≈ value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub state: State,
    pub action: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Rescale each batch gradient to at most this L2 norm; 0 disables.
    pub max_grad_norm: f32,
    /// L2 shrinkage applied with every step, `w ← w − η λ w`.
    pub weight_decay: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, epochs: 4, batch_size: 32, max_grad_norm: 1.0, weight_decay: 0.0 }
    }
}

impl QNet {
    pub fn new(grid: &CityGrid, hidden: usize) -> Self {
        Self { cells: grid.cells(), slots: grid.slots(), hidden: hidden.max(1) }
    }

    pub fn inputs(&self) -> usize {
        self.cells + self.slots
    }

    pub fn outputs(&self) -> usize {
        self.cells
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn b1(&self) -> usize {
        self.hidden * self.inputs()
    }

    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }

    fn b2(&self) -> usize {
        self.w2() + self.hidden * self.hidden
    }

    fn w3(&self) -> usize {
        self.b2() + self.hidden
    }

    fn b3(&self) -> usize {
        self.w3() + self.outputs() * self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.b3() + self.outputs()
    }

    pub fn scratch(&self) -> Scratch {
        let h = self.hidden;
        Scratch {
            z1: vec![0.0; h],
            h1: vec![0.0; h],
            z2: vec![0.0; h],
            h2: vec![0.0; h],
            q: vec![0.0; self.outputs()],
            dz2: vec![0.0; h],
            dz1: vec![0.0; h],
        }
    }

    /// Uniform fan-scaled weights, zero output bias and a small positive
    /// hidden bias so that units start active.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = seed::stream(seed, &[seed::tag::INIT, 0x0E7]);
        let h = self.hidden;
        let mut p = vec![0.0f32; self.param_count()];
        let mut fill = |range: std::ops::Range<usize>, bound: f32, rng: &mut StreamRng| {
            for w in &mut p[range] {
                *w = rng.gen_range(-bound..bound);
            }
        };
        fill(0..self.b1(), 0.5, &mut rng);
        fill(self.w2()..self.b2(), (6.0 / (2 * h) as f32).sqrt(), &mut rng);
        fill(self.w3()..self.b3(), (6.0 / (h + self.outputs()) as f32).sqrt(), &mut rng);
        p[self.b1()..self.w2()].fill(0.01);
        p[self.b2()..self.w3()].fill(0.01);
        ParamVector::new(p).expect("finite initial weights")
    }

    fn check_state(&self, s: State) {
        assert!(s.cell < self.cells && s.slot < self.slots, "state {s:?} outside the network's grid");
    }

    /// Q-values of every action at `s`, left in `scratch.q`.
    pub fn forward<'a>(&self, params: &[f32], s: State, scratch: &'a mut Scratch) -> &'a [f32] {
        self.check_state(s);
        let (h, inputs) = (self.hidden, self.inputs());
        let slot_col = self.cells + s.slot;
        let b1 = &params[self.b1()..self.w2()];
        for i in 0..h {
            let row = i * inputs;
            let z = params[row + s.cell] + params[row + slot_col] + b1[i];
            scratch.z1[i] = z;
            scratch.h1[i] = z.max(0.0);
        }
        let w2 = &params[self.w2()..self.b2()];
        let b2 = &params[self.b2()..self.w3()];
        for i in 0..h {
            let row = &w2[i * h..(i + 1) * h];
            let z = row.iter().zip(&scratch.h1).map(|(w, x)| w * x).sum::<f32>() + b2[i];
            scratch.z2[i] = z;
            scratch.h2[i] = z.max(0.0);
        }
        let w3 = &params[self.w3()..self.b3()];
        let b3 = &params[self.b3()..];
        for (a, q) in scratch.q.iter_mut().enumerate() {
            let row = &w3[a * h..(a + 1) * h];
            *q = row.iter().zip(&scratch.h2).map(|(w, x)| w * x).sum::<f32>() + b3[a];
        }
        &scratch.q
    }

    pub fn q_values(&self, params: &[f32], s: State) -> Vec<f32> {
        let mut scratch = self.scratch();
        self.forward(params, s, &mut scratch).to_vec()
    }

    /// Add the gradient of `½ (Q(s, a) − target)²` to `grad`; returns the loss.
    pub fn accumulate_grad(
        &self,
        params: &[f32],
        s: State,
        action: usize,
        target: f32,
        grad: &mut [f32],
        scratch: &mut Scratch,
    ) -> f32 {
        let (h, inputs) = (self.hidden, self.inputs());
        let err = self.forward(params, s, scratch)[action] - target;
        let w3_row = self.w3() + action * h;
        for i in 0..h {
            grad[w3_row + i] += err * scratch.h2[i];
        }
        grad[self.b3() + action] += err;
        for i in 0..h {
            scratch.dz2[i] = if scratch.z2[i] > 0.0 { err * params[w3_row + i] } else { 0.0 };
        }
        let w2 = self.w2();
        scratch.dz1.fill(0.0);
        for i in 0..h {
            let d = scratch.dz2[i];
            if d == 0.0 {
                continue;
            }
            let row = w2 + i * h;
            for j in 0..h {
                grad[row + j] += d * scratch.h1[j];
                scratch.dz1[j] += d * params[row + j];
            }
            grad[self.b2() + i] += d;
        }
        let slot_col = self.cells + s.slot;
        for j in 0..h {
            let d = if scratch.z1[j] > 0.0 { scratch.dz1[j] } else { 0.0 };
            grad[j * inputs + s.cell] += d;
            grad[j * inputs + slot_col] += d;
            grad[self.b1() + j] += d;
        }
        0.5 * err * err
    }

    /// Highest-valued action, ties broken toward the lowest cell index.
    pub fn argmax(q: &[f32]) -> usize {
        let mut best = 0;
        for (a, &v) in q.iter().enumerate() {
            if v > q[best] {
                best = a;
            }
        }
        best
    }
}

/// Fitted-Q targets `r + γ · max_b Q(s', b)`, one per ride.
pub fn bellman_update(net: &QNet, params: &[f32], rides: &[RideRecord], gamma: f64) -> Vec<Target> {
    let mut scratch = net.scratch();
    rides
        .iter()
        .map(|r| {
            let continuation = if gamma == 0.0 {
                0.0
            } else {
                let q = net.forward(params, r.dropoff, &mut scratch);
                f64::from(q[QNet::argmax(q)])
            };
            Target { state: r.pickup, action: r.action(), value: r.fare + gamma * continuation }
        })
        .collect()
}

/// Mean of `½ (Q(s, a) − target)²` over `targets`.
pub fn batch_loss(net: &QNet, params: &[f32], targets: &[Target]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let mut scratch = net.scratch();
    let total: f64 = targets
        .iter()
        .map(|t| {
            let e = f64::from(net.forward(params, t.state, &mut scratch)[t.action]) - t.value;
            0.5 * e * e
        })
        .sum();
    total / targets.len() as f64
}

/// Mini-batch gradient descent on the squared error to `targets`. The
/// returned loss is the mean over the final epoch's samples, each measured
/// before its batch's update.
pub fn train_step(
    net: &QNet,
    params: &mut [f32],
    targets: &[Target],
    config: &TrainConfig,
    rng: &mut StreamRng,
    iteration: u64,
) -> Result<TrainStats, TrainError> {
    if !(config.learning_rate > 0.0) || config.batch_size == 0 {
        return Err(TrainError::Data("learning rate and batch size must be positive".into()));
    }
    let mut stats = TrainStats::default();
    if targets.is_empty() {
        return Ok(stats);
    }
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut grad = vec![0.0f32; params.len()];
    let mut scratch = net.scratch();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            grad.fill(0.0);
            for &i in batch {
                let t = &targets[i];
                epoch_loss +=
                    f64::from(net.accumulate_grad(params, t.state, t.action, t.value as f32, &mut grad, &mut scratch));
            }
            let mut step = config.learning_rate / batch.len() as f32;
            if config.max_grad_norm > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f32>().sqrt() / batch.len() as f32;
                if norm > config.max_grad_norm {
                    step *= config.max_grad_norm / norm;
                }
            }
            let shrink = 1.0 - config.learning_rate * config.weight_decay;
            for (w, g) in params.iter_mut().zip(&grad) {
                *w = shrink * *w - step * g;
            }
            stats.steps += 1;
        }
        stats.loss = epoch_loss / targets.len() as f64;
        if !stats.loss.is_finite() || stats.loss > DIVERGENCE_LOSS || params.iter().any(|w| !w.is_finite()) {
            return Err(TrainError::Divergence { iteration, loss: stats.loss });
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::grid::DEFAULT_SLOTS;

    fn toy() -> (QNet, ParamVector) {
        let g = CityGrid::new(2, 3).unwrap();
        let net = QNet::new(&g, 5);
        let p = net.init(1);
        (net, p)
    }

    #[test]
    fn layout() {
        let net = QNet::new(&CityGrid::new(8, DEFAULT_SLOTS).unwrap(), 64);
        assert_eq!(net.inputs(), 160);
        assert_eq!(net.param_count(), 64 * 160 + 64 + 64 * 64 + 64 + 64 * 64 + 64);
        assert_eq!(net.param_count(), 18_624);
    }

    #[test]
    fn bellman_examples() {
        let (net, _) = toy();
        let zeros = vec![0.0; net.param_count()];
        let ride = RideRecord { pickup: State { cell: 0, slot: 0 }, dropoff: State { cell: 1, slot: 1 }, fare: 10.0 };
        assert_eq!(bellman_update(&net, &zeros, &[ride], 0.9)[0].value, 10.0);
        let (_, p) = toy();
        let t = bellman_update(&net, p.as_slice(), &[ride], 0.0);
        assert_eq!((t[0].value, t[0].action, t[0].state), (10.0, 1, ride.pickup));
        // Continuation is the max over the dropoff state's actions.
        let q = net.q_values(p.as_slice(), ride.dropoff);
        let best = q.iter().copied().fold(f32::MIN, f32::max);
        let t = bellman_update(&net, p.as_slice(), &[RideRecord { fare: 2.0, ..ride }], 0.5);
        assert!((t[0].value - (2.0 + 0.5 * f64::from(best))).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(QNet::argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(QNet::argmax(&[1.0, 5.0, 3.0, 5.0]), 1);
    }

    #[test]
    fn zero_network_zero_targets() {
        let (net, _) = toy();
        let mut p = vec![0.0; net.param_count()];
        let targets = vec![Target { state: State { cell: 1, slot: 2 }, action: 3, value: 0.0 }];
        let mut rng = seed::stream(0, &[]);
        let stats = train_step(&net, &mut p, &targets, &TrainConfig::default(), &mut rng, 0).unwrap();
        assert_eq!(stats.loss, 0.0);
        assert!(p.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn overfits_one_sample() {
        let (net, p) = toy();
        let mut p = p.into_inner();
        let targets = vec![Target { state: State { cell: 2, slot: 1 }, action: 0, value: 3.0 }];
        let cfg = TrainConfig { learning_rate: 0.05, epochs: 500, batch_size: 1, max_grad_norm: 0.0, weight_decay: 0.0 };
        let mut rng = seed::stream(0, &[]);
        train_step(&net, &mut p, &targets, &cfg, &mut rng, 0).unwrap();
        assert!((net.q_values(&p, targets[0].state)[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn loss_decreases_over_epochs() {
        let g = CityGrid::new(3, 4).unwrap();
        let net = QNet::new(&g, 8);
        let mut p = net.init(5).into_inner();
        let mut rng = seed::stream(1, &[]);
        let targets: Vec<Target> = (0..40)
            .map(|_| Target {
                state: State { cell: rng.gen_range(0..9), slot: rng.gen_range(0..4) },
                action: rng.gen_range(0..9),
                value: rng.gen_range(0.0..5.0),
            })
            .collect();
        let cfg = TrainConfig { learning_rate: 0.01, epochs: 1, batch_size: 40, max_grad_norm: 0.0, weight_decay: 0.0 };
        let mut prev = batch_loss(&net, &p, &targets);
        for _ in 0..50 {
            train_step(&net, &mut p, &targets, &cfg, &mut rng, 0).unwrap();
            let now = batch_loss(&net, &p, &targets);
            assert!(now <= prev + 1e-9, "{now} > {prev}");
            prev = now;
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (net, p) = toy();
        let mut p = p.into_inner();
        let targets = vec![Target { state: State { cell: 0, slot: 0 }, action: 0, value: 1e5 }];
        let cfg = TrainConfig { learning_rate: 10.0, epochs: 20, batch_size: 1, max_grad_norm: 0.0, weight_decay: 0.0 };
        let mut rng = seed::stream(0, &[]);
        assert!(matches!(train_step(&net, &mut p, &targets, &cfg, &mut rng, 4), Err(TrainError::Divergence { iteration: 4, .. })));
    }

    #[test]
    fn clipping_bounds_the_step() {
        let (net, p) = toy();
        let p0 = p.into_inner();
        let targets = vec![Target { state: State { cell: 0, slot: 0 }, action: 0, value: 100.0 }];
        let cfg = TrainConfig { learning_rate: 0.1, epochs: 1, batch_size: 1, max_grad_norm: 1.0, weight_decay: 0.0 };
        let mut p = p0.clone();
        train_step(&net, &mut p, &targets, &cfg, &mut seed::stream(0, &[]), 0).unwrap();
        let moved = p.iter().zip(&p0).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt();
        assert!(moved <= 0.1 * 1.0 + 1e-5, "{moved}");
        assert!(moved > 0.09);
    }
}
