//! The linear-speedup experiment, run on the simulator in virtual time so
//! that a thousand volunteers and a minute per run fit on one machine.

use std::io::{self, Write};
use std::time::{Duration, Instant};

use pando_core::from_iter;
use pando_overlay::config::OverlayConfig;
use pando_overlay::sim::{JobCost, Sim, SimConfig};
use pando_worker::Builtin;

#[derive(Debug, Clone)]
pub struct SpeedupConfig {
    pub overlay: OverlayConfig,
    pub seed: u64,
    /// Jobs per volunteer; with one-second jobs and the usual ratio this
    /// makes every run last about a minute.
    pub jobs_per_volunteer: u64,
    /// Volunteers start joining uniformly over this period.
    pub join_spread: Duration,
    /// Simulated time after which a run counts as failed.
    pub limit: Duration,
}

impl Default for SpeedupConfig {
    fn default() -> Self {
        Self {
            overlay: OverlayConfig::default(),
            seed: 7,
            jobs_per_volunteer: 50,
            join_spread: Duration::from_secs(1),
            limit: Duration::from_secs(3600),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupPoint {
    pub volunteers: usize,
    pub jobs: u64,
    /// Simulated time from start to the last result, setup included.
    pub elapsed: Duration,
    pub overall_rate: f64,
    /// One job per second per volunteer.
    pub perfect_rate: f64,
    pub ratio: f64,
    /// The run completed with every result correct.
    pub ok: bool,
    /// Host time spent simulating.
    pub wall: Duration,
}

/// One run of `sleep-square` jobs with `volunteers` volunteers.
pub fn run_point(cfg: &SpeedupConfig, volunteers: usize) -> SpeedupPoint {
    let wall = Instant::now();
    let jobs = cfg.jobs_per_volunteer * volunteers as u64;
    let sim_cfg = SimConfig {
        overlay: cfg.overlay.clone(),
        seed: cfg.seed ^ volunteers as u64,
        function: Builtin::SleepSquare(Builtin::SLEEP_SQUARE_DELAY),
        cost: JobCost::Intrinsic,
        ..SimConfig::default()
    };
    let mut sim = Sim::new(sim_cfg, from_iter((0..jobs).map(|i| i.to_string())));
    sim.add_volunteers(volunteers, Duration::ZERO, cfg.join_spread);
    let finished = sim.run(cfg.limit);
    let correct = sim.output().count() as u64 == jobs
        && sim
            .output()
            .enumerate()
            .all(|(i, l)| l == ((i as u128) * (i as u128)).to_string());
    let ok = finished && correct && sim.finished().is_some_and(|(_, r)| r.is_ok());
    let elapsed = sim.output_times().last().unwrap_or(sim.now());
    let overall_rate = if elapsed.is_zero() {
        0.0
    } else {
        jobs as f64 / elapsed.as_secs_f64()
    };
    let perfect_rate = volunteers as f64;
    SpeedupPoint {
        volunteers,
        jobs,
        elapsed,
        overall_rate,
        perfect_rate,
        ratio: overall_rate / perfect_rate,
        ok,
        wall: wall.elapsed(),
    }
}

pub fn run_grid(
    cfg: &SpeedupConfig,
    grid: &[usize],
    mut progress: impl FnMut(&SpeedupPoint),
) -> Vec<SpeedupPoint> {
    grid.iter()
        .map(|&n| {
            let p = run_point(cfg, n);
            progress(&p);
            p
        })
        .collect()
}

pub fn write_csv(out: &mut impl Write, points: &[SpeedupPoint]) -> io::Result<()> {
    writeln!(
        out,
        "volunteers,jobs,elapsed_s,overall_rate,perfect_rate,ratio,status"
    )?;
    for p in points {
        writeln!(
            out,
            "{},{},{:.3},{:.4},{:.1},{:.4},{}",
            p.volunteers,
            p.jobs,
            p.elapsed.as_secs_f64(),
            p.overall_rate,
            p.perfect_rate,
            p.ratio,
            if p.ok { "ok" } else { "failed" }
        )?;
    }
    Ok(())
}

/// Whitespace-separated columns for gnuplot; failed runs are left out.
pub fn write_gnuplot(out: &mut impl Write, points: &[SpeedupPoint]) -> io::Result<()> {
    writeln!(out, "# volunteers overall_rate perfect_rate ratio")?;
    for p in points.iter().filter(|p| p.ok) {
        writeln!(
            out,
            "{} {:.4} {:.1} {:.4}",
            p.volunteers, p.overall_rate, p.perfect_rate, p.ratio
        )?;
    }
    Ok(())
}
