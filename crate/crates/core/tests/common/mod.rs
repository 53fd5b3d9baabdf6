//! Independent reference computations for the closed-form models.
//!
//! Every oracle reaches its number by a different route than the library: log
//! domains instead of powers, micro-step simulation instead of closed-form
//! splits, quadrature instead of the expanded cube. Each returns the worst
//! error seen over its instances so callers can both assert and report.
#![allow(dead_code)]

use mec_core::battery::{self, PowerTrace};
use mec_core::channel::{self, LinkInstance, LinkKind};
use mec_core::compute::{self, DvfsTable};
use mec_core::policies::{run_episode, RandomPolicy};
use mec_core::{rng_stream, BatteryParams, Config, LinkParams, MecEnv};
use rand::Rng;

pub const REL_TOL: f64 = 1e-6;
pub const TIME_TOL: f64 = 1e-4;

/// Worst error of one oracle comparison.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub name: &'static str,
    pub instances: usize,
    /// Relative error, or absolute seconds when `absolute` is set.
    pub worst: f64,
    pub absolute: bool,
}

impl OracleReport {
    fn new(name: &'static str, absolute: bool) -> Self {
        Self {
            name,
            instances: 0,
            worst: 0.0,
            absolute,
        }
    }

    fn record(&mut self, got: f64, want: f64) {
        let err = if self.absolute {
            (got - want).abs()
        } else {
            rel(got, want)
        };
        assert!(err.is_finite(), "{}: got {got}, want {want}", self.name);
        self.worst = self.worst.max(err);
        self.instances += 1;
    }

    pub fn tolerance(&self) -> f64 {
        if self.absolute {
            TIME_TOL
        } else {
            REL_TOL
        }
    }

    pub fn passed(&self) -> bool {
        self.worst < self.tolerance()
    }
}

pub fn rel(got: f64, want: f64) -> f64 {
    if got == want {
        return 0.0;
    }
    (got - want).abs() / want.abs().max(1e-300)
}

fn kind_of(cellular: bool) -> LinkKind {
    if cellular {
        LinkKind::Cellular
    } else {
        LinkKind::D2d
    }
}

fn ln_sinr(pt: f64, dist: f64, alpha: f64, n0: f64) -> f64 {
    pt.ln() - alpha * dist.ln() - n0.ln()
}

/// Link equations: SINR, rate, threshold, success probability, and the
/// time/energy of a delivered payload against a bit-accumulating stepper.
pub fn link_oracles(instances: usize, seed: u64) -> Vec<OracleReport> {
    let mut rng = rng_stream(seed, "oracle/link");
    let params = LinkParams::default();
    let mut r_sinr = OracleReport::new("sinr", false);
    let mut r_rate = OracleReport::new("tx_rate", false);
    let mut r_eps = OracleReport::new("success_threshold", false);
    let mut r_psuc = OracleReport::new("success_prob", false);
    let mut r_ttra = OracleReport::new("t_tra", true);
    let mut r_etra = OracleReport::new("e_tra", false);
    let mut r_erec = OracleReport::new("e_rec", false);

    let mut done = 0;
    while done < instances {
        let cellular = rng.gen_bool(0.5);
        let kind = kind_of(cellular);
        let dist: f64 = if cellular {
            rng.gen_range(1.0..300.0)
        } else {
            rng.gen_range(1.0..30.0)
        };
        let alpha = rng.gen_range(2.0..4.5);
        let n0 = 10f64.powf(rng.gen_range(-15.0..-12.0));
        let pt = params.tx_power(kind);
        let n_tra = rng.gen_range(1..=12u32);
        let link = LinkInstance::new(0, 1, kind, dist, n_tra, params.n_tot);
        let size: f64 = rng.gen_range(5e6..6e6);

        // Alternate routes: SINR from the log domain, rate via log2 of the
        // per-subchannel share, threshold via powf, p_suc via the log SINR.
        let f = sinr_or_skip(pt, dist, alpha, n0);
        let got_sinr = channel::sinr(pt, dist, alpha, n0).unwrap();
        r_sinr.record(got_sinr, f);

        let per_sub = params.bandwidth / params.n_tot as f64;
        let rate = per_sub * link.n_sub as f64 * (1.0 + f).log2();
        let got_rate = channel::tx_rate(params.bandwidth, link.n_sub, params.n_tot, got_sinr);
        r_rate.record(got_rate, rate);

        let slot = 1.0;
        let bits_per_sub = size / (per_sub * link.n_sub as f64 * slot);
        let eps = 2f64.powf(bits_per_sub) - 1.0;
        let got_eps = channel::success_threshold(size, slot, params.bandwidth, link.n_sub, params.n_tot);
        r_eps.record(got_eps, eps);

        let psuc = (-(eps.ln() - ln_sinr(pt, dist, alpha, n0)).exp()).exp();
        let got_psuc = channel::success_prob(pt, dist, alpha, n0, got_eps);
        // Relative error in p is dominated by eps/F; skip the underflow tail.
        if psuc > 1e-200 {
            r_psuc.record(got_psuc, psuc);
        }

        // Delivered payload: accumulate bits in fixed micro-steps.
        let local = LinkParams {
            path_loss_exp: alpha,
            noise: n0,
            ..params
        };
        let out = channel::transmit_with_draw(size, &link, &local, slot, 30.0, -1.0);
        if out.dropped || size / rate > 2.0 {
            continue;
        }
        let (t, e_tx, e_rx) = stream_transmission(size, rate, pt, params.rx_power(kind), 1e-5);
        r_ttra.record(out.t_tra, t);
        r_etra.record(out.e_tra, e_tx);
        r_erec.record(out.e_rec, e_rx);
        done += 1;
    }
    vec![r_sinr, r_rate, r_eps, r_psuc, r_ttra, r_etra, r_erec]
}

fn sinr_or_skip(pt: f64, dist: f64, alpha: f64, n0: f64) -> f64 {
    ln_sinr(pt, dist, alpha, n0).exp()
}

/// Pushes `size` bits at `rate` in steps of `dt`, the last one partial.
/// Returns elapsed time and the energy drawn at both ends.
pub fn stream_transmission(size: f64, rate: f64, p_tx: f64, p_rx: f64, dt: f64) -> (f64, f64, f64) {
    let mut left = size;
    let mut t = 0.0;
    let mut e_tx = 0.0;
    let mut e_rx = 0.0;
    while left > 0.0 {
        let step = if rate * dt >= left { left / rate } else { dt };
        left = if step < dt { 0.0 } else { left - rate * step };
        t += step;
        e_tx += p_tx * step;
        e_rx += p_rx * step;
    }
    (t, e_tx, e_rx)
}

/// Runs `cycles` of work in `dt` micro-steps starting at `start`: frequency
/// `freq` until the absolute `deadline`, `f_max` afterwards. Steps are cut at
/// the deadline and at completion. Returns (in-deadline time, overtime, energy).
pub fn micro_execute(
    cycles: f64,
    deadline: f64,
    start: f64,
    freq: f64,
    p_freq: f64,
    f_max: f64,
    p_max: f64,
    dt: f64,
) -> (f64, f64, f64) {
    let mut left = cycles;
    let mut t = start;
    let mut in_deadline = 0.0;
    let mut overtime = 0.0;
    let mut energy = 0.0;
    while left > 0.0 {
        let before = t < deadline;
        let (f, p) = if before { (freq, p_freq) } else { (f_max, p_max) };
        let mut step = dt;
        if before && deadline - t < step {
            step = deadline - t;
        }
        if f * step >= left {
            step = left / f;
            left = 0.0;
        } else {
            left -= f * step;
        }
        t += step;
        energy += p * step;
        if before {
            in_deadline += step;
        } else {
            overtime += step;
        }
    }
    (in_deadline, overtime, energy)
}

fn dvfs_power(table: &DvfsTable<f64>, mode: usize) -> f64 {
    let m = table.modes[mode];
    table.k_dyn * (1.0 + table.k_stat) * m.freq * m.voltage * m.voltage
}

/// Execution time split and energy against the micro-step simulator.
pub fn exec_oracles(instances: usize, seed: u64) -> Vec<OracleReport> {
    let mut rng = rng_stream(seed, "oracle/exec");
    let mut r_time = OracleReport::new("exec_time", true);
    let mut r_energy = OracleReport::new("exec_energy", false);
    for k in 0..instances {
        let table = if k % 2 == 0 {
            DvfsTable::default_md()
        } else {
            DvfsTable::default_ed()
        };
        let mode = rng.gen_range(0..table.num_modes());
        let cycles = rng.gen_range(2e8..6e8);
        let start = rng.gen_range(0.0..100.0);
        // Deadlines from already-passed to comfortably loose.
        let deadline = start + rng.gen_range(-0.2..0.6);
        let freq = table.modes[mode].freq;
        let f_max = table.f_max();
        let split = compute::exec_time(cycles, deadline, start, freq, f_max);
        let (energy, _) = compute::exec_energy(&table, mode, &split);
        let (t_in, t_over, e) = micro_execute(
            cycles,
            deadline,
            start,
            freq,
            dvfs_power(&table, mode),
            f_max,
            dvfs_power(&table, table.max_mode()),
            1e-6,
        );
        r_time.record(split.in_deadline, t_in);
        r_time.record(split.overtime, t_over);
        r_energy.record(energy, e);
    }
    r_time.instances /= 2;
    vec![r_time, r_energy]
}

/// Random discharge trace of 1 to 6 segments with nonnegative powers.
pub fn random_trace(rng: &mut impl Rng) -> PowerTrace<f64> {
    let b_max = rng.gen_range(200.0..2000.0);
    let b_start = b_max * rng.gen_range(0.3..1.0);
    let mut trace = PowerTrace::new(rng.gen_range(0.0..50.0), b_start, b_max);
    let segments = rng.gen_range(1..=6);
    let mut budget: f64 = b_start * 0.9;
    for _ in 0..segments {
        let dur = rng.gen_range(0.01..2.0);
        let p = if rng.gen_bool(0.15) {
            0.0
        } else {
            rng.gen_range(0.0..(budget / dur).min(60.0))
        };
        budget -= p * dur;
        trace.push(p, dur);
    }
    trace
}

/// SoC at sampled times: (time, soc) pairs walking the trace with `n` points per segment.
fn soc_samples(trace: &PowerTrace<f64>, n: usize) -> Vec<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    let mut b = trace.b_start;
    for s in &trace.segments {
        let pts = (0..=n)
            .map(|i| {
                let tau = s.duration * i as f64 / n as f64;
                (tau, (b - s.power * tau) / trace.b_max)
            })
            .collect();
        b -= s.power * s.duration;
        out.push(pts);
    }
    out
}

/// Streaming trapezoid average of the sampled SoC.
pub fn streamed_soc_avg(trace: &PowerTrace<f64>) -> f64 {
    let mut area = 0.0;
    let mut total = 0.0;
    for seg in soc_samples(trace, 64) {
        for w in seg.windows(2) {
            let dt = w[1].0 - w[0].0;
            area += 0.5 * (w[0].1 + w[1].1) * dt;
            total += dt;
        }
    }
    area / total
}

/// `2 sqrt(3/T integral (SoC - avg)^2 dt)` by composite Simpson per segment.
pub fn quadrature_soc_dev(trace: &PowerTrace<f64>, avg: f64) -> f64 {
    let n = 32;
    let mut integral = 0.0;
    let mut total = 0.0;
    for seg in soc_samples(trace, n) {
        let h = seg[n].0 / n as f64;
        let g = |i: usize| (seg[i].1 - avg).powi(2);
        let mut s = g(0) + g(n);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(i);
        }
        integral += s * h / 3.0;
        total += seg[n].0;
    }
    2.0 * (3.0 * integral / total).sqrt()
}

/// Half the discharged fraction, streamed segment by segment.
pub fn streamed_cycles(trace: &PowerTrace<f64>) -> f64 {
    trace
        .segments
        .iter()
        .map(|s| s.power.abs() * s.duration / (2.0 * trace.b_max))
        .sum()
}

/// Degradation recomputed in the log domain from streamed statistics.
pub fn streamed_degradation(trace: &PowerTrace<f64>, p: &BatteryParams) -> f64 {
    let avg = streamed_soc_avg(trace);
    let dev = quadrature_soc_dev(trace, avg);
    let n = streamed_cycles(trace);
    let duration: f64 = trace.segments.iter().map(|s| s.duration).sum();
    let common = p.c.ln() + p.d * (avg - 0.5);
    let cycle = if n > 0.0 {
        (p.a.ln() + n.ln() + p.b * (dev - 1.0) + common).exp()
    } else {
        0.0
    };
    let calendar = ((0.2f64).ln() + duration.ln() - p.t_life.ln() + common).exp();
    cycle + calendar
}

/// SoC statistics and degradation against streaming and quadrature routes.
pub fn battery_oracles(instances: usize, seed: u64) -> Vec<OracleReport> {
    let mut rng = rng_stream(seed, "oracle/battery");
    let mut r_avg = OracleReport::new("soc_avg", false);
    let mut r_dev = OracleReport::new("soc_dev", false);
    let mut r_cyc = OracleReport::new("effective_cycles", false);
    let mut r_bd = OracleReport::new("degradation", false);
    for _ in 0..instances {
        let trace = random_trace(&mut rng);
        let params = BatteryParams {
            a: rng.gen_range(1e-4..1e-2),
            b: rng.gen_range(0.5..3.0),
            c: rng.gen_range(0.5..2.0),
            d: rng.gen_range(0.1..1.0),
            ..Default::default()
        };
        let got = battery::assess(&trace, &params);
        let avg = streamed_soc_avg(&trace);
        r_avg.record(got.soc_avg, avg);
        let dev = quadrature_soc_dev(&trace, avg);
        if dev > 1e-6 {
            r_dev.record(got.soc_dev, dev);
        } else {
            // A flat trace: compare on the absolute scale of SoC.
            r_dev.record(1.0 + got.soc_dev, 1.0 + dev);
        }
        let n = streamed_cycles(&trace);
        if n > 0.0 {
            r_cyc.record(got.n_cyc, n);
        } else {
            r_cyc.record(1.0 + got.n_cyc, 1.0);
        }
        r_bd.record(got.bd, streamed_degradation(&trace, &params));
    }
    vec![r_avg, r_dev, r_cyc, r_bd]
}

/// Every closed-form oracle at `instances` random draws each.
pub fn all_oracles(instances: usize, seed: u64) -> Vec<OracleReport> {
    let mut out = link_oracles(instances, seed);
    out.extend(exec_oracles(instances, seed));
    out.extend(battery_oracles(instances, seed));
    out
}

/// Empirical drop rate at one link geometry.
#[derive(Debug, Clone)]
pub struct DropCheck {
    pub kind: LinkKind,
    pub distance: f64,
    pub n_tra: u32,
    pub p_drop: f64,
    pub observed: f64,
    pub trials: usize,
    /// |observed - p_drop| in standard errors.
    pub z: f64,
}

/// (cellular, distance m, co-targeting transmitters, payload bits), chosen so the
/// drop probability sits well inside (0, 1).
pub const DROP_GEOMETRIES: [(bool, f64, u32, f64); 3] =
    [(false, 28.0, 32, 6e6), (true, 60.0, 32, 5.5e6), (true, 75.0, 32, 5.5e6)];

pub fn drop_statistics(trials: usize, seed: u64) -> Vec<DropCheck> {
    let params = LinkParams::default();
    DROP_GEOMETRIES
        .iter()
        .enumerate()
        .map(|(g, &(cellular, distance, n_tra, size))| {
            let kind = kind_of(cellular);
            let link = LinkInstance::new(0, 1, kind, distance, n_tra, params.n_tot);
            let budget = channel::link_budget(size, &link, &params, 1.0).unwrap();
            let p_drop = 1.0 - budget.p_success;
            let mut rng = rng_stream(seed, &format!("oracle/drop/{g}"));
            let drops = (0..trials)
                .filter(|_| channel::transmit(size, &link, &params, 1.0, 30.0, &mut rng).dropped)
                .count();
            let observed = drops as f64 / trials as f64;
            let se = (p_drop * (1.0 - p_drop) / trials as f64).sqrt();
            DropCheck {
                kind,
                distance,
                n_tra,
                p_drop,
                observed,
                trials,
                z: (observed - p_drop).abs() / se,
            }
        })
        .collect()
}

/// Worst ledger mismatch and constraint check over random-policy episodes.
#[derive(Debug, Clone, Default)]
pub struct ConservationReport {
    pub episodes: usize,
    /// Max |B_initial - B_final - ledger| over devices, joules.
    pub drain_vs_ledger: f64,
    /// Max |ledger - per-task energies attributed to the device|, joules.
    pub ledger_vs_records: f64,
    pub negative_battery: usize,
    pub overspent: usize,
    pub depleted_devices: usize,
}

impl ConservationReport {
    pub fn passed(&self) -> bool {
        self.drain_vs_ledger <= 1e-9 && self.ledger_vs_records <= 1e-9 && self.negative_battery == 0 && self.overspent == 0
    }
}

/// Half the episodes at the default capacity, half with a battery small enough to run flat.
pub fn conservation(episodes: usize, seed: u64) -> ConservationReport {
    let mut report = ConservationReport::default();
    for ep in 0..episodes {
        let mut cfg = Config::default();
        if ep % 2 == 1 {
            cfg.sim.battery_capacity = 40.0;
        }
        let b_max = cfg.sim.battery_capacity;
        let mut env = MecEnv::new(cfg, seed);
        let h = env.num_devices();
        let mut attributed = vec![0.0; h];
        let mut policy = RandomPolicy;
        let ep_seed = seed.wrapping_add(ep as u64);
        run_episode(&mut env, &mut policy, ep_seed, |r| {
            attributed[r.agent()] += r.e_tra;
            if !r.dropped {
                attributed[r.target] += r.e_rec + r.e_exe;
            }
        });
        for (d, (dev, ledger)) in env.devices().iter().zip(env.ledgers()).enumerate() {
            let drain = b_max - dev.battery;
            report.drain_vs_ledger = report.drain_vs_ledger.max((drain - ledger.total()).abs());
            report.ledger_vs_records = report.ledger_vs_records.max((attributed[d] - ledger.total()).abs());
            report.negative_battery += (dev.battery < 0.0) as usize;
            report.overspent += (ledger.total() > b_max + 1e-9) as usize;
            report.depleted_devices += (dev.battery <= 1e-9) as usize;
        }
        report.episodes += 1;
    }
    report
}
