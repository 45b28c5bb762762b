//! Exact event simulation of the class population process.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::allocators::Allocator;
use crate::error::{check_dim, Error, Result};
use crate::format::FloatFormat;
use crate::traffic::TrafficModel;

/// One jump of the population process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transition {
    /// External arrival to class `r`.
    Arrival(usize),
    /// Class `r` completes and rejoins as class `s`.
    Route(usize, usize),
    /// Class `r` completes and leaves.
    Departure(usize),
}

impl Transition {
    pub fn kind(&self) -> &'static str {
        match self {
            Transition::Arrival(_) => "arrival",
            Transition::Route(..) => "route",
            Transition::Departure(_) => "departure",
        }
    }

    /// `(from_class, to_class)`, either of which may be absent.
    pub fn classes(&self) -> (Option<usize>, Option<usize>) {
        match *self {
            Transition::Arrival(r) => (None, Some(r)),
            Transition::Route(r, s) => (Some(r), Some(s)),
            Transition::Departure(r) => (Some(r), None),
        }
    }

    /// Applies the jump to `x`; panics on a departure from an empty class.
    pub fn apply(&self, x: &mut [u32]) {
        let (from, to) = self.classes();
        if let Some(r) = from {
            assert!(x[r] > 0, "completion from empty class {r}");
            x[r] -= 1;
        }
        if let Some(s) = to {
            x[s] += 1;
        }
    }
}

/// Outgoing transitions of state `x` with positive rate, given the
/// allocation `rates` at `x`: arrivals `ν̄_r`, routed completions
/// `μ_r λ_r p_rs` and exits `μ_r λ_r (1 - Σ_s p_rs)`.
pub fn transitions_with(model: &TrafficModel, rates: &[f64], x: &[u32]) -> Vec<(Transition, f64)> {
    let n = model.num_classes();
    let mut out = Vec::with_capacity(n * (n + 2));
    for r in 0..n {
        if model.nu_bar()[r] > 0.0 {
            out.push((Transition::Arrival(r), model.nu_bar()[r]));
        }
    }
    for r in 0..n {
        if x[r] == 0 || rates[r] <= 0.0 {
            continue;
        }
        let service = model.mu()[r] * rates[r];
        for s in 0..n {
            let p = model.routing()[(r, s)];
            if p > 0.0 {
                out.push((Transition::Route(r, s), service * p));
            }
        }
        let exit = model.exit_probability(r);
        if exit > 0.0 {
            out.push((Transition::Departure(r), service * exit));
        }
    }
    out
}

/// Generator row of `x`: [`transitions_with`] at the allocator's rates.
pub fn transition_rates(model: &TrafficModel, allocator: &dyn Allocator, x: &[u32]) -> Result<Vec<(Transition, f64)>> {
    check_dim(model.num_classes(), x.len())?;
    let rates = allocator
        .rates(x)
        .map_err(|e| Error::AllocatorAt { state: x.to_vec(), source: Box::new(e) })?;
    Ok(transitions_with(model, &rates, x))
}

/// A logged jump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub transition: Transition,
}

/// Simulation settings beyond model, allocator and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    /// Occupancy is recorded on `[0, box_bound]^R`; time elsewhere is leakage.
    pub box_bound: u32,
    /// Occupancy accumulates from this time on.
    pub burn_in: f64,
    /// Keep the full event log (needed for replays and path sampling).
    pub record_events: bool,
    /// Replication index; runs with the same seed and different streams are independent.
    pub stream: u64,
    /// Memoised allocations kept before the cache is flushed.
    pub cache_capacity: usize,
    /// Abort after this many events.
    pub max_events: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            box_bound: 30,
            burn_in: 0.0,
            record_events: true,
            stream: 0,
            cache_capacity: 1 << 20,
            max_events: u64::MAX,
        }
    }
}

/// Result of [`simulate`].
#[derive(Debug, Clone)]
pub struct SimulationRun {
    pub allocator: String,
    pub t_end: f64,
    pub seed: u64,
    pub options: SimOptions,
    pub x0: Vec<u32>,
    pub final_state: Vec<u32>,
    pub events: Vec<Event>,
    pub event_count: u64,
    /// Time spent in each box state after burn-in.
    pub occupancy: HashMap<Vec<u32>, f64>,
    /// Time spent outside the box after burn-in.
    pub leakage: f64,
}

impl SimulationRun {
    /// Recorded post-burn-in time, `Σ occupancy + leakage`.
    pub fn recorded_time(&self) -> f64 {
        self.occupancy.values().sum::<f64>() + self.leakage
    }

    /// Per-class totals of the event log: `(arrivals, routed_in, routed_out, departures)`.
    pub fn flow_counts(&self) -> Vec<[u64; 4]> {
        let mut c = vec![[0u64; 4]; self.x0.len()];
        for e in &self.events {
            match e.transition {
                Transition::Arrival(r) => c[r][0] += 1,
                Transition::Route(r, s) => {
                    c[s][1] += 1;
                    c[r][2] += 1;
                }
                Transition::Departure(r) => c[r][3] += 1,
            }
        }
        c
    }

    /// Piecewise-constant path: `(time, state)` after each event, starting at `(0, x0)`.
    pub fn path(&self) -> Vec<(f64, Vec<u32>)> {
        let mut x = self.x0.clone();
        let mut out = Vec::with_capacity(self.events.len() + 1);
        out.push((0.0, x.clone()));
        for e in &self.events {
            e.transition.apply(&mut x);
            out.push((e.time, x.clone()));
        }
        out
    }

    /// State at each of the given nondecreasing times.
    pub fn sample(&self, times: &[f64]) -> Result<Vec<Vec<u32>>> {
        if !self.options.record_events {
            return Err(Error::InvalidArgument("path sampling needs the event log".into()));
        }
        let mut x = self.x0.clone();
        let mut next = 0usize;
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            while next < self.events.len() && self.events[next].time <= t {
                self.events[next].transition.apply(&mut x);
                next += 1;
            }
            out.push(x.clone());
        }
        Ok(out)
    }
}

impl SimulationRun {
    /// CSV with columns `time, kind, from_class, to_class` (empty when absent).
    pub fn write_events_csv<W: std::io::Write>(&self, out: W, fmt: FloatFormat) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "kind", "from_class", "to_class"])?;
        let opt = |c: Option<usize>| c.map_or(String::new(), |v| v.to_string());
        for e in &self.events {
            let (from, to) = e.transition.classes();
            w.write_record([fmt.fmt(e.time), e.transition.kind().to_string(), opt(from), opt(to)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Simulates the population process on `[0, t_end]` from `x0`.
///
/// The next event is drawn by competing exponentials: an exponential
/// holding time at the total rate, then a categorical pick among the
/// transitions of [`transition_rates`]. Allocations are memoised per state.
pub fn simulate(
    model: &TrafficModel,
    allocator: &dyn Allocator,
    t_end: f64,
    seed: u64,
    x0: &[u32],
    options: SimOptions,
) -> Result<SimulationRun> {
    let n = model.num_classes();
    check_dim(n, x0.len())?;
    check_dim(n, allocator.num_classes())?;
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {t_end}")));
    }
    if !(options.burn_in >= 0.0 && options.burn_in < t_end) {
        return Err(Error::InvalidArgument("burn-in must lie in [0, horizon)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(options.stream);

    let mut cache: HashMap<Vec<u32>, Vec<(Transition, f64)>> = HashMap::new();
    let mut x = x0.to_vec();
    let mut t = 0.0f64;
    let mut events = Vec::new();
    let mut event_count = 0u64;
    let mut occupancy: HashMap<Vec<u32>, f64> = HashMap::new();
    let mut leakage = 0.0;
    let in_box = |x: &[u32]| x.iter().all(|&v| v <= options.box_bound);

    loop {
        if !cache.contains_key(&x) {
            if cache.len() >= options.cache_capacity {
                cache.clear();
            }
            let row = transition_rates(model, allocator, &x)?;
            cache.insert(x.clone(), row);
        }
        let row = &cache[&x];
        let total: f64 = row.iter().map(|(_, q)| q).sum();
        let hold = if total > 0.0 { rng.sample::<f64, _>(Exp1) / total } else { f64::INFINITY };
        let t_next = t + hold;

        // Credit the holding interval to the occupancy after burn-in.
        let from = t.max(options.burn_in);
        let to = t_next.min(t_end);
        if to > from {
            if in_box(&x) {
                *occupancy.entry(x.clone()).or_insert(0.0) += to - from;
            } else {
                leakage += to - from;
            }
        }
        if t_next > t_end {
            break;
        }
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = row[row.len() - 1].0;
        for &(tr, q) in row {
            if pick < q {
                chosen = tr;
                break;
            }
            pick -= q;
        }
        chosen.apply(&mut x);
        t = t_next;
        event_count += 1;
        if options.record_events {
            events.push(Event { time: t, transition: chosen });
        }
        if event_count >= options.max_events {
            return Err(Error::InvalidArgument(format!("event limit {} reached at t = {t}", options.max_events)));
        }
    }
    Ok(SimulationRun {
        allocator: allocator.label(),
        t_end,
        seed,
        options,
        x0: x0.to_vec(),
        final_state: x,
        events,
        event_count,
        occupancy,
        leakage,
    })
}

/// `z⁻¹ X(z t)` on the grid `t_k = k T / steps`, for `X(0) = round(z · direction)`.
#[derive(Debug, Clone)]
pub struct ScaledPath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

/// Simulates the process started at `round(z · direction)` for time `z T`
/// and returns the rescaled path on a grid of step `T / 1000`.
pub fn scaled_path(
    model: &TrafficModel,
    allocator: &dyn Allocator,
    z: f64,
    direction: &[f64],
    t_end: f64,
    seed: u64,
    stream: u64,
) -> Result<ScaledPath> {
    if !(z >= 1.0) {
        return Err(Error::InvalidArgument(format!("scale must be at least 1, got {z}")));
    }
    if direction.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("initial direction must be nonnegative".into()));
    }
    let x0: Vec<u32> = direction.iter().map(|v| (v * z).round() as u32).collect();
    let opts = SimOptions { stream, ..SimOptions::default() };
    let run = simulate(model, allocator, z * t_end, seed, &x0, opts)?;
    let steps = 1000;
    let times: Vec<f64> = (0..=steps).map(|k| t_end * k as f64 / steps as f64).collect();
    let scaled: Vec<f64> = times.iter().map(|t| t * z).collect();
    let states = run.sample(&scaled)?.into_iter().map(|x| x.iter().map(|&v| v as f64 / z).collect()).collect();
    Ok(ScaledPath { times, states })
}
