//! Volume baseline: point-cloud volume by robust binning, and a learned
//! density correction fitted to run totals.
//!
//! The mass of one capture is
//!
//! ```text
//! m = f(u; theta) * u * v * t,    u = max(V - beta, 0)
//! ```
//!
//! where `f` is a one-hidden-layer tanh network with three units. Fitting
//! minimizes `sum_runs (1/n) (y - sum_j m_j)^2` with Levenberg-Marquardt.
//! Volume units are arbitrary; only the fitted product carries kg.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_file, write_file, write_json, DEFAULT_CAPTURE_INTERVAL};
use crate::error::{Error, Result};

pub const HIDDEN: usize = 3;
pub const CLOUD_FORMAT: &str = "massflow-clouds/1";
pub const CLOUD_JSON: &str = "clouds.json";
pub const CLOUD_BLOB: &str = "clouds.f32";

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudFrame {
    /// `(x, y, z)` with `z` the height above the elevator plane.
    pub points: Vec<[f64; 3]>,
    pub speed: f64,
    pub capture_interval: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpreadKind {
    /// `1.4826 * median absolute deviation`, a standard-deviation estimate
    /// that ignores isolated outliers.
    #[default]
    Mad,
    /// Population standard deviation.
    Std,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinningConfig {
    pub bin_side: f64,
    pub min_points: usize,
    /// Bins whose height spread exceeds this are unreliable.
    pub max_spread: f64,
    pub spread: SpreadKind,
    /// `[x0, y0, x1, y1]` of the binned plane region.
    pub extent: [f64; 4],
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            bin_side: 0.4,
            min_points: 4,
            max_spread: 2.5,
            spread: SpreadKind::Mad,
            extent: [0.0, 0.0, 4.8, 4.8],
        }
    }
}

impl BinningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bin_side > 0.0 && self.bin_side.is_finite()) {
            return Err(Error::config("bin_side must be > 0"));
        }
        if self.min_points == 0 {
            return Err(Error::config("min_points must be >= 1"));
        }
        if !(self.max_spread >= 0.0) {
            return Err(Error::config("max_spread must be >= 0"));
        }
        let [x0, y0, x1, y1] = self.extent;
        if !(x1 > x0 && y1 > y0) || self.extent.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("extent must be a nonempty finite rectangle"));
        }
        Ok(())
    }

    fn grid(&self) -> (usize, usize) {
        let [x0, y0, x1, y1] = self.extent;
        (
            ((x1 - x0) / self.bin_side).ceil() as usize,
            ((y1 - y0) / self.bin_side).ceil() as usize,
        )
    }

    pub fn bin_area(&self) -> f64 {
        self.bin_side * self.bin_side
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub volume: f64,
    pub reliable_bins: usize,
    pub excluded_bins: usize,
    /// No reliable bin was found.
    pub sparse: bool,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn spread(zs: &[f64], med: f64, kind: SpreadKind) -> f64 {
    match kind {
        SpreadKind::Mad => {
            let mut dev: Vec<f64> = zs.iter().map(|z| (z - med).abs()).collect();
            1.4826 * median(&mut dev)
        }
        SpreadKind::Std => {
            let m = zs.iter().sum::<f64>() / zs.len() as f64;
            (zs.iter().map(|z| (z - m) * (z - m)).sum::<f64>() / zs.len() as f64).sqrt()
        }
    }
}

/// Volume of one cloud: the sum over reliable bins of median height times
/// bin area. Points outside the extent are ignored.
pub fn estimate_volume(pc: &PointCloudFrame, cfg: &BinningConfig) -> Result<VolumeEstimate> {
    cfg.validate()?;
    let (gx, gy) = cfg.grid();
    let [x0, y0, x1, y1] = cfg.extent;
    let mut bins: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for p in &pc.points {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite point coordinate".into()));
        }
        let [x, y, z] = *p;
        if x < x0 || x >= x1 || y < y0 || y >= y1 {
            continue;
        }
        let i = (((x - x0) / cfg.bin_side) as usize).min(gx - 1);
        let j = (((y - y0) / cfg.bin_side) as usize).min(gy - 1);
        bins.entry((i, j)).or_default().push(z);
    }
    let (mut volume, mut reliable, mut excluded) = (0.0, 0, 0);
    for zs in bins.values_mut() {
        if zs.len() < cfg.min_points {
            excluded += 1;
            continue;
        }
        let med = median(zs);
        if spread(zs, med, cfg.spread) > cfg.max_spread {
            excluded += 1;
            continue;
        }
        reliable += 1;
        volume += med * cfg.bin_area();
    }
    Ok(VolumeEstimate {
        volume,
        reliable_bins: reliable,
        excluded_bins: excluded,
        sparse: reliable == 0,
    })
}

/// Parameters of the density correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityModelParams {
    pub w1: [f64; HIDDEN],
    pub b1: [f64; HIDDEN],
    pub w2: [f64; HIDDEN],
    pub b2: f64,
    pub beta: f64,
    /// Fixed input scaling applied to `u` before the hidden layer.
    pub input_scale: f64,
}

impl DensityModelParams {
    /// A model with `f == rho` everywhere.
    pub fn constant(rho: f64, beta: f64) -> Self {
        Self {
            w1: [0.0; HIDDEN],
            b1: [0.0; HIDDEN],
            w2: [0.0; HIDDEN],
            b2: rho,
            beta,
            input_scale: 1.0,
        }
    }

    const N: usize = 3 * HIDDEN + 2;

    fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::N);
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v.push(self.beta);
        v
    }

    fn from_vec(v: &[f64], input_scale: f64) -> Self {
        let mut p = Self::constant(v[3 * HIDDEN], v[3 * HIDDEN + 1]);
        p.w1.copy_from_slice(&v[..HIDDEN]);
        p.b1.copy_from_slice(&v[HIDDEN..2 * HIDDEN]);
        p.w2.copy_from_slice(&v[2 * HIDDEN..3 * HIDDEN]);
        p.input_scale = input_scale;
        p
    }

    /// Density `f(u)` for a bias-corrected volume `u`.
    pub fn density(&self, u: f64) -> f64 {
        let x = u * self.input_scale;
        self.b2 + (0..HIDDEN).map(|k| self.w2[k] * (self.w1[k] * x + self.b1[k]).tanh()).sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite()) && self.input_scale.is_finite()
    }
}

pub fn predict_mass_increment(volume: f64, p: &DensityModelParams, v_elev: f64, t: f64) -> f64 {
    let u = (volume - p.beta).max(0.0);
    if u == 0.0 || v_elev == 0.0 {
        return 0.0;
    }
    p.density(u) * u * v_elev * t
}

/// Per-frame volumes and speeds of one run with its measured total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRun {
    pub id: String,
    pub volumes: Vec<f64>,
    pub speeds: Vec<f64>,
    pub capture_interval: f64,
    pub total_mass: f64,
}

impl VolumeRun {
    pub fn validate(&self) -> Result<()> {
        if self.volumes.len() != self.speeds.len() {
            return Err(Error::corrupt(format!("run {}: volume and speed counts differ", self.id)));
        }
        if !(self.capture_interval > 0.0) || !self.total_mass.is_finite() || self.total_mass < 0.0 {
            return Err(Error::corrupt(format!("run {}: invalid interval or total", self.id)));
        }
        if self.volumes.iter().chain(&self.speeds).any(|v| !v.is_finite()) {
            return Err(Error::corrupt(format!("run {}: non-finite value", self.id)));
        }
        Ok(())
    }

    pub fn predict_total(&self, p: &DensityModelParams) -> f64 {
        self.volumes
            .iter()
            .zip(&self.speeds)
            .map(|(&v, &s)| predict_mass_increment(v, p, s, self.capture_interval))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Stop when the relative loss decrease of an accepted step falls below
    /// this.
    pub tol: f64,
    pub initial_damping: f64,
    /// Number of random restarts besides the deterministic starts.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-12,
            initial_damping: 1e-3,
            restarts: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: DensityModelParams,
    /// `sum_runs (1/n) (y - y_hat)^2`
    pub loss: f64,
    /// `y - y_hat` per run, in input order.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Warnings: non-convergence, negative beta, negative fitted density.
    pub diagnostics: Vec<String>,
}

struct Problem<'a> {
    runs: &'a [VolumeRun],
    input_scale: f64,
}

impl Problem<'_> {
    /// Scaled residuals `(y - y_hat) / sqrt(n)` and, optionally, their
    /// Jacobian.
    fn eval(&self, theta: &[f64], jac: Option<&mut DMatrix<f64>>) -> DVector<f64> {
        let p = DensityModelParams::from_vec(theta, self.input_scale);
        let mut r = DVector::zeros(self.runs.len());
        let mut jac = jac;
        for (i, run) in self.runs.iter().enumerate() {
            let w = 1.0 / (run.volumes.len().max(1) as f64).sqrt();
            let mut pred = 0.0;
            let mut d = [0.0; DensityModelParams::N];
            for (&vol, &speed) in run.volumes.iter().zip(&run.speeds) {
                let u = vol - p.beta;
                if u <= 0.0 {
                    continue;
                }
                let st = speed * run.capture_interval;
                let x = u * p.input_scale;
                let mut f = p.b2;
                let mut df_du = 0.0;
                for k in 0..HIDDEN {
                    let th = (p.w1[k] * x + p.b1[k]).tanh();
                    let sech2 = 1.0 - th * th;
                    f += p.w2[k] * th;
                    df_du += p.w2[k] * sech2 * p.w1[k] * p.input_scale;
                    let c = u * st;
                    d[k] += c * p.w2[k] * sech2 * x;
                    d[HIDDEN + k] += c * p.w2[k] * sech2;
                    d[2 * HIDDEN + k] += c * th;
                }
                d[3 * HIDDEN] += u * st;
                d[3 * HIDDEN + 1] -= (df_du * u + f) * st;
                pred += f * u * st;
            }
            r[i] = w * (run.total_mass - pred);
            if let Some(j) = jac.as_deref_mut() {
                for (c, dv) in d.iter().enumerate() {
                    j[(i, c)] = -w * dv;
                }
            }
        }
        r
    }
}

fn levenberg_marquardt(problem: &Problem, start: Vec<f64>, cfg: &FitConfig) -> (Vec<f64>, f64, usize, bool) {
    let m = problem.runs.len();
    let n = DensityModelParams::N;
    let mut theta = start;
    let mut jac = DMatrix::zeros(m, n);
    let mut r = problem.eval(&theta, Some(&mut jac));
    let mut cost = r.norm_squared();
    let mut mu = cfg.initial_damping;
    let mut converged = false;
    let mut it = 0;
    while it < cfg.max_iter {
        it += 1;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.amax() < 1e-15 * (1.0 + cost) {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += mu * (jtj[(k, k)] + 1e-12);
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    mu *= 4.0;
                    continue;
                }
            };
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            if cand.iter().any(|v| !v.is_finite()) {
                mu *= 4.0;
                continue;
            }
            let rc = problem.eval(&cand, None);
            let c = rc.norm_squared();
            if c.is_finite() && c < cost {
                let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                theta = cand;
                r = problem.eval(&theta, Some(&mut jac));
                cost = c;
                mu = (mu / 3.0).max(1e-15);
                accepted = true;
                if rel < cfg.tol {
                    converged = true;
                }
                break;
            }
            mu *= 2.0;
        }
        if !accepted {
            // No step along any damping improves the cost: a stationary
            // point to working precision.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    (theta, cost, it, converged)
}

/// Fits the density correction to run totals.
pub fn fit_baseline(runs: &[VolumeRun], init: Option<&DensityModelParams>, cfg: &FitConfig) -> Result<FitResult> {
    for r in runs {
        r.validate()?;
    }
    if runs.iter().filter(|r| r.total_mass > 0.0).count() < 2 {
        return Err(Error::config("fitting needs at least two runs with nonzero mass"));
    }
    let mut all_v: Vec<f64> = runs.iter().flat_map(|r| r.volumes.iter().copied()).filter(|v| *v > 0.0).collect();
    if all_v.is_empty() {
        return Err(Error::Domain("no positive volumes to fit".into()));
    }
    let vmax = all_v.iter().cloned().fold(0.0, f64::max);
    let low = {
        all_v.sort_by(f64::total_cmp);
        all_v[all_v.len() / 20]
    };
    let input_scale = init.map_or(2.0 / vmax, |p| p.input_scale);
    let problem = Problem { runs, input_scale };
    let ys: f64 = runs.iter().map(|r| r.total_mass).sum();
    let vs: f64 = runs
        .iter()
        .map(|r| r.volumes.iter().zip(&r.speeds).map(|(v, s)| v.max(0.0) * s * r.capture_interval).sum::<f64>())
        .sum();
    let rho = if vs > 0.0 { ys / vs } else { 1.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(p) = init {
        starts.push(p.to_vec());
    }
    for (k, beta) in [0.0, 0.5 * low].into_iter().chain((0..cfg.restarts).map(|i| low * i as f64 / cfg.restarts.max(1) as f64)).enumerate() {
        let mut p = DensityModelParams::constant(rho, beta);
        p.input_scale = input_scale;
        for h in 0..HIDDEN {
            p.w1[h] = rng.random_range(-1.5..1.5);
            p.b1[h] = rng.random_range(-1.0..1.0);
            p.w2[h] = rho * if k < 2 { 0.01 } else { rng.random_range(-0.3..0.3) };
        }
        starts.push(p.to_vec());
    }

    let mut best: Option<(Vec<f64>, f64, usize, bool)> = None;
    for s in starts {
        let out = levenberg_marquardt(&problem, s, cfg);
        if best.as_ref().is_none_or(|b| out.1 < b.1) {
            best = Some(out);
        }
    }
    let (theta, cost, iterations, converged) = best.expect("at least one start");
    let params = DensityModelParams::from_vec(&theta, input_scale);
    let residuals: Vec<f64> = runs.iter().map(|r| r.total_mass - r.predict_total(&params)).collect();
    let mut diagnostics = Vec::new();
    if !converged {
        diagnostics.push(format!("no convergence after {iterations} iterations; returning best so far"));
    }
    if params.beta < 0.0 {
        diagnostics.push(format!("negative beta {:.4}: volume estimate may miss material", params.beta));
    }
    let umax = (vmax - params.beta).max(0.0);
    if (0..=50).any(|i| params.density(umax * i as f64 / 50.0) < 0.0) {
        diagnostics.push("fitted density is negative somewhere on the observed range".into());
    }
    Ok(FitResult {
        params,
        loss: cost,
        residuals,
        iterations,
        converged,
        diagnostics,
    })
}

// ---------------------------------------------------------------------------
// Volume CSVs

#[derive(Debug, Serialize, Deserialize)]
struct VolumeRow {
    frame_index: usize,
    volume: f64,
    speed: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    run_id: String,
    total_mass: f64,
    capture_interval: f64,
    file: String,
}

fn csv_err(e: csv::Error) -> Error {
    Error::corrupt(format!("csv: {e}"))
}

/// Parses one per-run CSV with columns `frame_index,volume,speed`.
pub fn parse_volume_csv(text: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text);
    let mut volumes = Vec::new();
    let mut speeds = Vec::new();
    for (i, row) in rdr.deserialize::<VolumeRow>().enumerate() {
        let row = row.map_err(csv_err)?;
        if row.frame_index != i {
            return Err(Error::corrupt(format!("frame_index {} at row {i}", row.frame_index)));
        }
        if !row.volume.is_finite() || !row.speed.is_finite() {
            return Err(Error::corrupt(format!("non-finite value at row {i}")));
        }
        volumes.push(row.volume);
        speeds.push(row.speed);
    }
    Ok((volumes, speeds))
}

/// Reads `index.csv` (`run_id,total_mass,capture_interval,file`) and the
/// per-run CSVs it lists.
pub fn read_volume_dir(dir: &Path) -> Result<Vec<VolumeRun>> {
    let index = read_file(&dir.join("index.csv"))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(index.as_slice());
    let mut runs = Vec::new();
    for row in rdr.deserialize::<IndexRow>() {
        let row = row.map_err(csv_err)?;
        if Path::new(&row.file).components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
            return Err(Error::corrupt(format!("file `{}` must be a plain relative path", row.file)));
        }
        let (volumes, speeds) = parse_volume_csv(&read_file(&dir.join(&row.file))?)?;
        let run = VolumeRun {
            id: row.run_id,
            volumes,
            speeds,
            capture_interval: row.capture_interval,
            total_mass: row.total_mass,
        };
        run.validate()?;
        runs.push(run);
    }
    Ok(runs)
}

pub fn write_volume_dir(dir: &Path, runs: &[VolumeRun]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut idx = csv::Writer::from_writer(Vec::new());
    for r in runs {
        let file = format!("{}.csv", r.id);
        let mut w = csv::Writer::from_writer(Vec::new());
        for (i, (v, s)) in r.volumes.iter().zip(&r.speeds).enumerate() {
            w.serialize(VolumeRow { frame_index: i, volume: *v, speed: *s }).map_err(csv_err)?;
        }
        write_file(&dir.join(&file), &w.into_inner().map_err(|e| Error::io(dir, e.into_error()))?)?;
        idx.serialize(IndexRow {
            run_id: r.id.clone(),
            total_mass: r.total_mass,
            capture_interval: r.capture_interval,
            file,
        })
        .map_err(csv_err)?;
    }
    write_file(&dir.join("index.csv"), &idx.into_inner().map_err(|e| Error::io(dir, e.into_error()))?)
}

// ---------------------------------------------------------------------------
// Point-cloud archives

/// The point clouds of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudRun {
    pub id: String,
    pub total_mass: f64,
    pub tags: Vec<String>,
    pub frames: Vec<PointCloudFrame>,
}

impl CloudRun {
    pub fn volumes(&self, cfg: &BinningConfig) -> Result<VolumeRun> {
        let volumes = self
            .frames
            .iter()
            .map(|f| estimate_volume(f, cfg).map(|e| e.volume))
            .collect::<Result<Vec<_>>>()?;
        Ok(VolumeRun {
            id: self.id.clone(),
            volumes,
            speeds: self.frames.iter().map(|f| f.speed).collect(),
            capture_interval: self.frames.first().map_or(DEFAULT_CAPTURE_INTERVAL, |f| f.capture_interval),
            total_mass: self.total_mass,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CloudIndex {
    format: String,
    runs: Vec<CloudRunEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CloudRunEntry {
    id: String,
    total_mass: f64,
    capture_interval: f64,
    #[serde(default)]
    tags: Vec<String>,
    speeds: Vec<f64>,
    /// Points per frame.
    counts: Vec<usize>,
}

pub fn encode_clouds(runs: &[CloudRun]) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(runs.len());
    for r in runs {
        for f in &r.frames {
            for p in &f.points {
                for c in p {
                    blob.extend_from_slice(&(*c as f32).to_le_bytes());
                }
            }
        }
        entries.push(CloudRunEntry {
            id: r.id.clone(),
            total_mass: r.total_mass,
            capture_interval: r.frames.first().map_or(DEFAULT_CAPTURE_INTERVAL, |f| f.capture_interval),
            tags: r.tags.clone(),
            speeds: r.frames.iter().map(|f| f.speed).collect(),
            counts: r.frames.iter().map(|f| f.points.len()).collect(),
        });
    }
    let json = serde_json::to_vec_pretty(&CloudIndex {
        format: CLOUD_FORMAT.into(),
        runs: entries,
    })?;
    Ok((json, blob))
}

/// Decodes a point-cloud archive. Structural problems are corrupt-archive
/// errors.
pub fn decode_clouds(json: &[u8], blob: &[u8]) -> Result<Vec<CloudRun>> {
    let idx: CloudIndex = serde_json::from_slice(json).map_err(|e| Error::corrupt(format!("cloud index: {e}")))?;
    if idx.format != CLOUD_FORMAT {
        return Err(Error::corrupt(format!("unknown format `{}`", idx.format)));
    }
    let mut total: usize = 0;
    for r in &idx.runs {
        if r.speeds.len() != r.counts.len() {
            return Err(Error::corrupt(format!("run {}: speeds and counts differ", r.id)));
        }
        for c in &r.counts {
            total = total.checked_add(*c).ok_or_else(|| Error::corrupt("point count overflows"))?;
        }
    }
    let want = total.checked_mul(12).ok_or_else(|| Error::corrupt("point count overflows"))?;
    if blob.len() != want {
        return Err(Error::corrupt(format!("blob is {} bytes, index implies {want}", blob.len())));
    }
    let mut floats = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let mut runs = Vec::with_capacity(idx.runs.len());
    for r in idx.runs {
        if !(r.capture_interval > 0.0 && r.capture_interval.is_finite()) || !(r.total_mass >= 0.0 && r.total_mass.is_finite()) {
            return Err(Error::corrupt(format!("run {}: invalid interval or total", r.id)));
        }
        let mut frames = Vec::with_capacity(r.counts.len());
        for (&count, &speed) in r.counts.iter().zip(&r.speeds) {
            if !(speed >= 0.0 && speed.is_finite()) {
                return Err(Error::corrupt(format!("run {}: invalid speed", r.id)));
            }
            let mut points = Vec::with_capacity(count);
            for _ in 0..count {
                let p = [floats.next(), floats.next(), floats.next()];
                let p = p.map(|v| v.expect("length checked"));
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::corrupt(format!("run {}: non-finite point", r.id)));
                }
                points.push(p);
            }
            frames.push(PointCloudFrame {
                points,
                speed,
                capture_interval: r.capture_interval,
            });
        }
        runs.push(CloudRun {
            id: r.id,
            total_mass: r.total_mass,
            tags: r.tags,
            frames,
        });
    }
    Ok(runs)
}

pub fn save_clouds(dir: &Path, runs: &[CloudRun]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (json, blob) = encode_clouds(runs)?;
    write_file(&dir.join(CLOUD_BLOB), &blob)?;
    write_file(&dir.join(CLOUD_JSON), &json)
}

pub fn load_clouds(dir: &Path) -> Result<Vec<CloudRun>> {
    decode_clouds(&read_file(&dir.join(CLOUD_JSON))?, &read_file(&dir.join(CLOUD_BLOB))?)
}

pub fn save_fit(path: &Path, fit: &FitResult) -> Result<()> {
    write_json(path, fit)
}
