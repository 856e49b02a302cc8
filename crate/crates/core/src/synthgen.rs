//! Synthetic elevator runs with a hidden per-frame mass oracle.
//!
//! Rods drop onto a moving elevator at a per-time feed rate, so a slower
//! elevator carries more material per unit length. Each frame shows the
//! rods currently in view, drawn as bright oriented strokes over a moving
//! slat pattern, then dimmed by a lighting multiplier, flickered and
//! corrupted by noise.
//!
//! The visible volume `V_j` is the summed volume of the in-view parts of
//! the rods. The oracle frame mass is the on-screen mass
//! `m_j = rho(V_j) V_j` with `rho(V) = rho0 (1 + c V)^(-gamma)`, and the
//! run total is `sum_j m_j v_j t`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::baseline::{save_clouds, CloudRun, PointCloudFrame};
use crate::data::{
    encode_run, read_file, save_encoded, split_dataset_with, to_hex, DatasetIndex, Frame, Image, ImageDims,
    IndexEntry, Run, RunMeta, SplitRatios, DATASET_FILE, DEFAULT_CAPTURE_INTERVAL, MANIFEST_FILE,
};
use crate::error::{Error, Result};

/// Manifest key holding the oracle frame masses. Run loading ignores it.
pub const ORACLE_KEY: &str = "oracle_frame_masses";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub image: ImageDims,
    /// Mean number of rods in view at the reference speed, drawn per run.
    pub rod_count: (f64, f64),
    /// Rod thickness in pixels.
    pub rod_thickness: (f64, f64),
    /// Rod length in pixels.
    pub rod_length: (f64, f64),
    /// Maximum rod angle from horizontal, degrees.
    pub max_angle_deg: f64,
    pub rho0: f64,
    pub decay_c: f64,
    pub gamma: f64,
    /// Volume units per cubic pixel.
    pub volume_scale: f64,
    pub lighting: (f64, f64),
    pub low_lighting: (f64, f64),
    /// Relative per-frame lighting jitter.
    pub flicker: f64,
    pub speed: (f64, f64),
    /// Relative amplitude of the slow speed oscillation within a run.
    pub speed_wobble: f64,
    pub frames: (usize, usize),
    pub noise_std: f64,
    /// Image pixels per metre of elevator travel.
    pub pixels_per_metre: f64,
    pub capture_interval: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image: ImageDims::new(48, 48, 1),
            rod_count: (4.0, 12.0),
            rod_thickness: (1.5, 3.0),
            rod_length: (10.0, 24.0),
            max_angle_deg: 30.0,
            rho0: 1.0,
            decay_c: 0.15,
            gamma: 1.0,
            volume_scale: 0.01,
            lighting: (0.75, 1.2),
            low_lighting: (0.3, 0.5),
            flicker: 0.04,
            speed: (0.6, 1.4),
            speed_wobble: 0.05,
            frames: (40, 120),
            noise_std: 0.03,
            pixels_per_metre: 45.0,
            capture_interval: DEFAULT_CAPTURE_INTERVAL,
            seed: 0,
        }
    }
}

fn range_ok(r: (f64, f64)) -> bool {
    r.0.is_finite() && r.1.is_finite() && r.0 <= r.1
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        self.image.validate()?;
        if !(self.rho0 > 0.0 && self.rho0.is_finite()) {
            return bad("rho0 must be > 0");
        }
        if !(self.decay_c >= 0.0) || !(self.gamma >= 0.0) {
            return bad("decay_c and gamma must be >= 0");
        }
        for (name, r) in [
            ("rod_count", self.rod_count),
            ("rod_thickness", self.rod_thickness),
            ("rod_length", self.rod_length),
            ("lighting", self.lighting),
            ("low_lighting", self.low_lighting),
            ("speed", self.speed),
        ] {
            if !range_ok(r) {
                return Err(Error::config(format!("{name} must be a nonempty finite range")));
            }
        }
        if self.rod_count.0 < 0.0 || self.rod_thickness.0 <= 0.0 || self.rod_length.0 <= 0.0 {
            return bad("rod ranges must be positive");
        }
        for r in [self.lighting, self.low_lighting] {
            if !(r.0 > 0.0 && r.1 <= 1.5) {
                return bad("lighting multipliers must lie in (0, 1.5]");
            }
        }
        if self.speed.0 <= 0.0 {
            return bad("speeds must be > 0");
        }
        if self.frames.0 == 0 || self.frames.0 > self.frames.1 {
            return bad("frames must be a nonempty range of positive lengths");
        }
        if !(self.volume_scale > 0.0) || !(self.pixels_per_metre > 0.0) || !(self.capture_interval > 0.0) {
            return bad("volume_scale, pixels_per_metre and capture_interval must be > 0");
        }
        if !(self.noise_std >= 0.0) || !(self.flicker >= 0.0) || !(0.0..1.0).contains(&self.speed_wobble) {
            return bad("noise_std and flicker must be >= 0, speed_wobble in [0, 1)");
        }
        Ok(())
    }

    fn reference_speed(&self) -> f64 {
        0.5 * (self.speed.0 + self.speed.1)
    }
}

/// Packing density at visible volume `v`.
pub fn density_law(v: f64, cfg: &SceneConfig) -> Result<f64> {
    if !(v >= 0.0) {
        return Err(Error::Domain(format!("volume must be >= 0, got {v}")));
    }
    Ok(cfg.rho0 * (1.0 + cfg.decay_c * v).powf(-cfg.gamma))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Steady,
    Ramp,
    Intermittent,
    #[serde(rename = "lowlight", alias = "low-light", alias = "low_light")]
    LowLight,
    Empty,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Steady,
        Scenario::Ramp,
        Scenario::Intermittent,
        Scenario::LowLight,
        Scenario::Empty,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Steady => "steady",
            Scenario::Ramp => "ramp",
            Scenario::Intermittent => "intermittent",
            Scenario::LowLight => "lowlight",
            Scenario::Empty => "empty",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "steady" => Ok(Scenario::Steady),
            "ramp" => Ok(Scenario::Ramp),
            "intermittent" => Ok(Scenario::Intermittent),
            "lowlight" => Ok(Scenario::LowLight),
            "empty" => Ok(Scenario::Empty),
            _ => Err(Error::config(format!("unknown scenario {s:?}"))),
        }
    }
}

/// Scenario proportions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMix(pub BTreeMap<Scenario, f64>);

impl Default for ScenarioMix {
    fn default() -> Self {
        ScenarioMix(BTreeMap::from([
            (Scenario::Steady, 0.3),
            (Scenario::Ramp, 0.25),
            (Scenario::Intermittent, 0.2),
            (Scenario::LowLight, 0.15),
            (Scenario::Empty, 0.1),
        ]))
    }
}

impl ScenarioMix {
    pub fn only(s: Scenario) -> Self {
        ScenarioMix(BTreeMap::from([(s, 1.0)]))
    }

    /// Parses `steady=0.5,ramp=0.5`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for part in text.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once(['=', ':'])
                .ok_or_else(|| Error::config(format!("mix entry {part:?} is not name=weight")))?;
            let w: f64 = v.trim().parse().map_err(|_| Error::config(format!("bad weight in {part:?}")))?;
            if m.insert(k.trim().parse::<Scenario>()?, w).is_some() {
                return Err(Error::config(format!("scenario {k:?} listed twice")));
            }
        }
        let mix = ScenarioMix(m);
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.values().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("mix weights must be finite and >= 0"));
        }
        let total: f64 = self.0.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("mix proportions sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Run counts per scenario: floors, with the remainder going to the
    /// largest fractional parts (ties in scenario order).
    pub fn counts(&self, n: usize) -> Result<BTreeMap<Scenario, usize>> {
        self.validate()?;
        let mut out: BTreeMap<Scenario, usize> = BTreeMap::new();
        let mut frac = Vec::new();
        for (&s, &w) in &self.0 {
            let exact = w * n as f64;
            let base = (exact + 1e-9).floor() as usize;
            out.insert(s, base);
            frac.push((exact - base as f64, s));
        }
        let mut left = n - out.values().sum::<usize>().min(n);
        frac.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, s) in frac.iter().cycle() {
            if left == 0 {
                break;
            }
            *out.get_mut(s).expect("present") += 1;
            left -= 1;
        }
        Ok(out)
    }
}

/// A generated run together with its hidden per-frame masses.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    pub run: Run,
    /// On-screen mass per frame.
    pub frame_masses: Vec<f64>,
    /// Visible volume per frame.
    pub volumes: Vec<f64>,
    pub scenario: Scenario,
}

impl OracleRun {
    /// `sum_j m_j v_j t`
    pub fn oracle_total(&self) -> f64 {
        oracle_total(&self.frame_masses, &self.run)
    }
}

fn oracle_total(masses: &[f64], run: &Run) -> f64 {
    masses
        .iter()
        .zip(&run.frames)
        .map(|(m, f)| m * f.speed * f.capture_interval)
        .sum()
}

#[derive(Debug, Clone, Copy)]
struct Rod {
    /// Centre in screen coordinates at spawn; `y` grows with travel.
    x: f64,
    y: f64,
    half_len: f64,
    thickness: f64,
    /// Direction unit vector.
    dx: f64,
    dy: f64,
    brightness: f64,
}

impl Rod {
    fn endpoints(&self, travel: f64) -> ((f64, f64), (f64, f64)) {
        let (cx, cy) = (self.x, self.y + travel);
        (
            (cx - self.dx * self.half_len, cy - self.dy * self.half_len),
            (cx + self.dx * self.half_len, cy + self.dy * self.half_len),
        )
    }

    fn volume_px(&self) -> f64 {
        2.0 * self.half_len * PI * self.thickness * self.thickness / 4.0
    }
}

/// Fraction of the segment `a-b` inside `[0,w] x [0,h]` (Liang-Barsky).
fn visible_fraction(a: (f64, f64), b: (f64, f64), w: f64, h: f64) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-dx, a.0), (dx, w - a.0), (-dy, a.1), (dy, h - a.1)] {
        if p == 0.0 {
            if q < 0.0 {
                return 0.0;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t1 - t0).max(0.0)
}

fn seg_dist(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((px - a.0) * vx + (py - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * vx, a.1 + t * vy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// The state of one run's simulation at one frame.
struct FrameScene {
    rods: Vec<(Rod, f64)>,
    /// Belt travel in pixels, for the slat pattern.
    offset: f64,
    speed: f64,
    volume: f64,
}

/// Feed profile `q_j` in `[0, 1]` for each frame.
fn feed_profile(s: Scenario, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match s {
        Scenario::Steady | Scenario::LowLight => vec![1.0; n],
        Scenario::Empty => vec![0.0; n],
        Scenario::Ramp => {
            let (lo, hi) = (rng.random_range(0.05..0.3), rng.random_range(0.9..1.1));
            let (a, b) = if rng.random::<bool>() { (lo, hi) } else { (hi, lo) };
            (0..n).map(|j| a + (b - a) * j as f64 / (n.max(2) - 1) as f64).collect()
        }
        Scenario::Intermittent => {
            let mut q = Vec::with_capacity(n);
            let mut on = rng.random::<bool>();
            while q.len() < n {
                let len = rng.random_range(6..=18);
                q.extend(std::iter::repeat_n(if on { 1.0 } else { 0.0 }, len));
                on = !on;
            }
            q.truncate(n);
            q
        }
    }
}

/// Runs the belt simulation and returns per-frame scenes.
fn simulate(cfg: &SceneConfig, scenario: Scenario, rng: &mut ChaCha8Rng) -> (Vec<FrameScene>, f64) {
    let n = rng.random_range(cfg.frames.0..=cfg.frames.1);
    let (w, h) = (cfg.image.width as f64, cfg.image.height as f64);
    let base_speed = uniform(rng, cfg.speed);
    let phase = rng.random_range(0.0..2.0 * PI);
    let period = rng.random_range(20.0..60.0);
    let speed_at = |j: isize| base_speed * (1.0 + cfg.speed_wobble * (2.0 * PI * j as f64 / period + phase).sin());
    let target = if scenario == Scenario::Empty { 0.0 } else { uniform(rng, cfg.rod_count) };
    let mean_len = 0.5 * (cfg.rod_length.0 + cfg.rod_length.1);
    let d_ref = cfg.reference_speed() * cfg.capture_interval * cfg.pixels_per_metre;
    // rods per frame so that `target` rods are in view at reference speed
    let rate = target * d_ref / (h + mean_len);
    let q = feed_profile(scenario, n, rng);
    let max_angle = cfg.max_angle_deg.to_radians();
    let warmup = ((h + cfg.rod_length.1) / (cfg.speed.0 * cfg.capture_interval * cfg.pixels_per_metre)).ceil() as isize;

    let mut rods: Vec<(Rod, f64)> = Vec::new();
    let mut offset = 0.0;
    let mut frames = Vec::with_capacity(n);
    for j in -warmup..n as isize {
        let qj = q[j.max(0) as usize];
        let v = speed_at(j);
        let d = v * cfg.capture_interval * cfg.pixels_per_metre;
        offset += d;
        for (_, travel) in rods.iter_mut() {
            *travel += d;
        }
        let mean = rate * qj;
        let count = if mean > 0.0 {
            Poisson::new(mean).map(|p| p.sample(rng) as usize).unwrap_or(0)
        } else {
            0
        };
        for _ in 0..count {
            let half_len = 0.5 * uniform(rng, cfg.rod_length);
            let angle = rng.random_range(-max_angle..=max_angle);
            let (dx, dy) = (angle.cos(), angle.sin());
            let thickness = uniform(rng, cfg.rod_thickness);
            let extent = half_len * dy.abs() + thickness;
            rods.push((
                Rod {
                    x: rng.random_range(0.0..w),
                    y: -extent - rng.random_range(0.0..d.max(1e-9)),
                    half_len,
                    thickness,
                    dx,
                    dy,
                    brightness: rng.random_range(0.75..1.0),
                },
                0.0,
            ));
        }
        rods.retain(|(r, t)| r.y + t - r.half_len * r.dy.abs() - r.thickness < h);
        if j < 0 {
            continue;
        }
        let mut volume = 0.0;
        let mut visible = Vec::new();
        for (r, t) in &rods {
            let (a, b) = r.endpoints(*t);
            let frac = visible_fraction(a, b, w, h);
            if frac > 0.0 {
                volume += frac * r.volume_px() * cfg.volume_scale;
            }
            // strokes may show a little beyond the clipped segment
            if a.1.max(b.1) > -r.thickness && a.1.min(b.1) < h + r.thickness {
                visible.push((*r, *t));
            }
        }
        frames.push(FrameScene { rods: visible, offset, speed: v, volume });
    }
    (frames, base_speed)
}

fn render(cfg: &SceneConfig, scene: &FrameScene, light: f64, rng: &mut ChaCha8Rng) -> Result<Image> {
    let dims = cfg.image;
    let (w, h) = (dims.width, dims.height);
    let flick = 1.0 + cfg.flicker * rng.random_range(-1.0..1.0);
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).map_err(|e| Error::config(e.to_string()))?;
    let mut px = vec![0f32; dims.len().expect("validated")];
    let plane = w * h;
    for y in 0..h {
        // slats every 12 px, 3 px wide, moving with the belt
        let yy = (y as f64 - scene.offset).rem_euclid(12.0);
        let bg = if yy < 3.0 { 0.22 } else { 0.12 };
        for x in 0..w {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut cover = 0.0f64;
            let mut bright = 0.0;
            for (r, t) in &scene.rods {
                let (a, b) = r.endpoints(*t);
                let c = (r.thickness / 2.0 + 0.5 - seg_dist(cx, cy, a, b)).clamp(0.0, 1.0);
                if c > cover {
                    cover = c;
                    bright = r.brightness;
                }
            }
            let value = bg * (1.0 - cover) + bright * cover;
            for ch in 0..dims.channels {
                // colour channels get a fixed tint so that they differ
                let tint = 1.0 - 0.08 * ch as f64;
                let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                px[ch * plane + y * w + x] = (light * flick * value * tint + n).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image::new(dims, px)
}

/// Per-run generation state shared by image and point-cloud output.
struct Generated {
    oracle: OracleRun,
    scenes: Vec<FrameScene>,
}

fn generate(cfg: &SceneConfig, scenario: Scenario, seed: u64, id: &str, light_override: Option<f64>) -> Result<Generated> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (scenes, base_speed) = simulate(cfg, scenario, &mut rng);
    let light_range = if scenario == Scenario::LowLight { cfg.low_lighting } else { cfg.lighting };
    let drawn = uniform(&mut rng, light_range);
    let light = light_override.unwrap_or(drawn);
    let mut frames = Vec::with_capacity(scenes.len());
    let mut masses = Vec::with_capacity(scenes.len());
    let mut volumes = Vec::with_capacity(scenes.len());
    for s in &scenes {
        frames.push(Frame::new(render(cfg, s, light, &mut rng)?, s.speed, cfg.capture_interval)?);
        masses.push(density_law(s.volume, cfg)? * s.volume);
        volumes.push(s.volume);
    }
    let mut tags = vec![scenario.as_str().to_string()];
    if scenario == Scenario::LowLight {
        tags.push("low-light".into());
    }
    let meta = RunMeta {
        lighting: Some(light),
        mean_speed: Some(base_speed),
        tags,
    };
    let mut run = Run::new(id, frames, 0.0, meta)?;
    run.total_mass = oracle_total(&masses, &run);
    Ok(Generated {
        oracle: OracleRun {
            run,
            frame_masses: masses,
            volumes,
            scenario,
        },
        scenes,
    })
}

/// Generates one run of the given scenario.
pub fn generate_scenario_run(cfg: &SceneConfig, scenario: Scenario, seed: u64) -> Result<OracleRun> {
    Ok(generate(cfg, scenario, seed, &format!("run-{seed:016x}"), None)?.oracle)
}

/// Generates one steady run.
pub fn generate_run(cfg: &SceneConfig, seed: u64) -> Result<OracleRun> {
    generate_scenario_run(cfg, Scenario::Steady, seed)
}

/// As [`generate_scenario_run`] with the lighting multiplier fixed.
pub fn generate_run_with_lighting(cfg: &SceneConfig, scenario: Scenario, seed: u64, light: f64) -> Result<OracleRun> {
    if !(light > 0.0 && light <= 1.5) {
        return Err(Error::config("lighting multiplier must lie in (0, 1.5]"));
    }
    Ok(generate(cfg, scenario, seed, &format!("run-{seed:016x}"), Some(light))?.oracle)
}

/// Seed of the `i`-th run derived from a master seed.
pub fn run_seed(master: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(i as u64 + 1);
    rng.random()
}

/// Scenario of each run, shuffled deterministically.
fn plan(n_runs: usize, mix: &ScenarioMix, seed: u64) -> Result<Vec<Scenario>> {
    use rand::seq::SliceRandom;
    if n_runs == 0 {
        return Err(Error::config("n_runs must be >= 1"));
    }
    let mut list: Vec<Scenario> = mix
        .counts(n_runs)?
        .into_iter()
        .flat_map(|(s, c)| std::iter::repeat_n(s, c))
        .collect();
    list.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(list)
}

pub fn generate_dataset(cfg: &SceneConfig, n_runs: usize, mix: &ScenarioMix, seed: u64) -> Result<Vec<OracleRun>> {
    use rayon::prelude::*;
    cfg.validate()?;
    let list = plan(n_runs, mix, seed)?;
    list.par_iter()
        .enumerate()
        .map(|(i, &s)| Ok(generate(cfg, s, run_seed(seed, i), &format!("run{i:04}"), None)?.oracle))
        .collect()
}

/// Settings of the synthetic stereo point clouds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloudConfig {
    /// Points per square pixel.
    pub points_per_pixel: usize,
    /// Height noise, pixels.
    pub z_noise: f64,
    pub outlier_rate: f64,
    /// Outlier heights are drawn from `[-outlier_z, outlier_z]` pixels.
    pub outlier_z: f64,
    /// Fraction of bin-sized cells whose points are dropped.
    pub sparse_rate: f64,
    pub sparse_cell: f64,
    /// Fraction of material points collapsed onto the plane in low light,
    /// at lighting multiplier 0; decreases linearly to zero at `drag_light`.
    pub low_light_drag: f64,
    pub drag_light: f64,
    /// Volume added to every frame through a height offset.
    pub volume_bias: f64,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            points_per_pixel: 1,
            z_noise: 0.05,
            outlier_rate: 0.0,
            outlier_z: 30.0,
            sparse_rate: 0.0,
            sparse_cell: 4.0,
            low_light_drag: 0.0,
            drag_light: 0.6,
            volume_bias: 0.0,
        }
    }
}

impl CloudConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, r) in [
            ("outlier_rate", self.outlier_rate),
            ("sparse_rate", self.sparse_rate),
            ("low_light_drag", self.low_light_drag),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("{n} must lie in [0, 1]")));
            }
        }
        if self.points_per_pixel == 0 || !(self.z_noise >= 0.0) || !(self.sparse_cell > 0.0) || !self.volume_bias.is_finite() {
            return Err(Error::config("invalid point-cloud settings"));
        }
        Ok(())
    }
}

/// Height field of one scene, scaled so that it integrates to the visible
/// volume (in pixel units).
fn height_field(cfg: &SceneConfig, scene: &FrameScene) -> Vec<f64> {
    let (w, h) = (cfg.image.width, cfg.image.height);
    let mut hf = vec![0.0; w * h];
    for (r, t) in &scene.rods {
        let (a, b) = r.endpoints(*t);
        let rad = r.thickness / 2.0;
        for y in 0..h {
            for x in 0..w {
                let d = seg_dist(x as f64 + 0.5, y as f64 + 0.5, a, b);
                if d < rad {
                    hf[y * w + x] += 2.0 * (rad * rad - d * d).sqrt();
                }
            }
        }
    }
    let target = scene.volume / cfg.volume_scale;
    let sum: f64 = hf.iter().sum();
    if sum > 0.0 {
        hf.iter_mut().for_each(|v| *v *= target / sum);
    }
    hf
}

fn cloud_frame(cfg: &SceneConfig, cc: &CloudConfig, scene: &FrameScene, light: f64, rng: &mut ChaCha8Rng) -> PointCloudFrame {
    let (w, h) = (cfg.image.width, cfg.image.height);
    let unit = cfg.volume_scale.sqrt();
    let hf = height_field(cfg, scene);
    let bias_z = cc.volume_bias / (w as f64 * h as f64 * cfg.volume_scale);
    let drag = if light < cc.drag_light {
        cc.low_light_drag * (1.0 - light / cc.drag_light)
    } else {
        0.0
    };
    let cells_x = (w as f64 / cc.sparse_cell).ceil() as usize;
    let cells_y = (h as f64 / cc.sparse_cell).ceil() as usize;
    let dropped: Vec<bool> = (0..cells_x * cells_y).map(|_| rng.random::<f64>() < cc.sparse_rate).collect();
    let noise = Normal::new(0.0, cc.z_noise.max(1e-12)).expect("valid std");
    let mut points = Vec::with_capacity(w * h * cc.points_per_pixel);
    for y in 0..h {
        for x in 0..w {
            let cell = (y as f64 / cc.sparse_cell) as usize * cells_x + (x as f64 / cc.sparse_cell) as usize;
            for _ in 0..cc.points_per_pixel {
                let px = x as f64 + rng.random::<f64>();
                let py = y as f64 + rng.random::<f64>();
                let mut z = hf[y * w + x];
                if rng.random::<f64>() < drag && z > 0.0 {
                    z = 0.0;
                }
                z += bias_z + if cc.z_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                // both draws always happen so that the rates do not shift
                // the random stream
                let (u, wild) = (rng.random::<f64>(), rng.random_range(-cc.outlier_z..=cc.outlier_z));
                if u < cc.outlier_rate {
                    z = wild;
                }
                if dropped[cell] {
                    continue;
                }
                points.push([px * unit, py * unit, z]);
            }
        }
    }
    PointCloudFrame {
        points,
        speed: scene.speed,
        capture_interval: cfg.capture_interval,
    }
}

/// Point clouds of a run's scenes, with the clouds' own random stream.
fn clouds_for(cfg: &SceneConfig, cc: &CloudConfig, g: &Generated, seed: u64) -> CloudRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636c_6f75_6473);
    let light = g.oracle.run.meta.lighting.unwrap_or(1.0);
    CloudRun {
        id: g.oracle.run.id.clone(),
        total_mass: g.oracle.run.total_mass,
        tags: g.oracle.run.meta.tags.clone(),
        frames: g.scenes.iter().map(|s| cloud_frame(cfg, cc, s, light, &mut rng)).collect(),
    }
}

/// Plane extent of the clouds in cloud units, `[x0, y0, x1, y1]`.
pub fn cloud_extent(cfg: &SceneConfig) -> [f64; 4] {
    let unit = cfg.volume_scale.sqrt();
    [0.0, 0.0, cfg.image.width as f64 * unit, cfg.image.height as f64 * unit]
}

pub fn generate_pointcloud_run(cfg: &SceneConfig, cc: &CloudConfig, scenario: Scenario, seed: u64) -> Result<(Vec<PointCloudFrame>, OracleRun)> {
    cc.validate()?;
    let g = generate(cfg, scenario, seed, &format!("run-{seed:016x}"), None)?;
    let clouds = clouds_for(cfg, cc, &g, seed);
    Ok((clouds.frames, g.oracle))
}

/// As [`generate_dataset`], also returning the point clouds of every run.
pub fn generate_dataset_with_clouds(
    cfg: &SceneConfig,
    cc: &CloudConfig,
    n_runs: usize,
    mix: &ScenarioMix,
    seed: u64,
) -> Result<Vec<(OracleRun, CloudRun)>> {
    use rayon::prelude::*;
    cfg.validate()?;
    cc.validate()?;
    let list = plan(n_runs, mix, seed)?;
    list.par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let rs = run_seed(seed, i);
            let g = generate(cfg, s, rs, &format!("run{i:04}"), None)?;
            let c = clouds_for(cfg, cc, &g, rs);
            Ok((g.oracle, c))
        })
        .collect()
}

/// Hash of a generated dataset's contents.
pub fn dataset_hash(runs: &[OracleRun]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for r in runs {
        h.update(r.run.content_hash());
    }
    to_hex(&h.finalize())
}

/// Writes a run archive whose manifest also carries the oracle masses.
pub fn save_oracle_run(o: &OracleRun, dir: &Path) -> Result<()> {
    let (mut manifest, blob) = encode_run(&o.run)?;
    manifest[ORACLE_KEY] = serde_json::to_value(&o.frame_masses)?;
    manifest["oracle_volumes"] = serde_json::to_value(&o.volumes)?;
    save_encoded(dir, &manifest, &blob)
}

/// Reads the oracle masses of an archived run. Only diagnostics call this.
pub fn load_oracle_masses(dir: &Path) -> Result<Vec<f64>> {
    let v: serde_json::Value = serde_json::from_slice(&read_file(&dir.join(MANIFEST_FILE))?)?;
    let masses = v
        .get(ORACLE_KEY)
        .ok_or_else(|| Error::corrupt(format!("{} has no oracle masses", dir.display())))?;
    serde_json::from_value(masses.clone()).map_err(|e| Error::corrupt(e.to_string()))
}

/// Splits and writes generated runs under `out`, with `dataset.json`
/// listing them. Returns the index.
pub fn write_dataset(out: &Path, runs: &[OracleRun], ratios: SplitRatios, seed: u64, stratify_empty: bool) -> Result<DatasetIndex> {
    let plain: Vec<Run> = runs.iter().map(|o| o.run.clone()).collect();
    let ds = split_dataset_with(plain, ratios, seed, stratify_empty)?;
    let mut entries = Vec::with_capacity(runs.len());
    for o in runs {
        let dir = format!("runs/{}", o.run.id);
        save_oracle_run(o, &out.join(&dir))?;
        entries.push(IndexEntry {
            id: o.run.id.clone(),
            dir,
            split: ds.split[&o.run.id],
            scenario: Some(o.scenario.as_str().to_string()),
        });
    }
    let mut idx = DatasetIndex::new(entries);
    idx.seed = Some(seed);
    idx.hash = Some(dataset_hash(runs));
    idx.write(&out.join(DATASET_FILE))?;
    Ok(idx)
}

/// Writes the point clouds of generated runs.
pub fn write_clouds(out: &Path, clouds: &[CloudRun]) -> Result<()> {
    save_clouds(out, clouds)
}
