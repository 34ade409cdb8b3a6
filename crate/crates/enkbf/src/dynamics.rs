//! Truth-trajectory simulation and the observation increment stream.
//!
//! The truth follows an Euler-Maruyama discretization of
//! `dX = f(X) dt + sqrt(2) dW`, and each step emits the increment
//! `dY = X dt + sqrt(eps dt) Omega^{-1/2} eta`. Both streams can be
//! persisted in a small binary format so a filter run can replay recorded
//! observations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{DriftModel, ObsNoiseSpec};

/// Noise stream indices carved out of one seed: the truth and observation
/// Wiener processes are independent.
pub const STREAM_TRUTH: u64 = 0;
pub const STREAM_OBS: u64 = 1;
pub const STREAM_ENSEMBLE: u64 = 2;
pub const STREAM_SPINUP: u64 = 3;

const OBS_MAGIC: &[u8; 4] = b"ENKB";
const TRUTH_MAGIC: &[u8; 4] = b"ENKT";
const FORMAT_VERSION: u32 = 1;

/// Step size of the deterministic spin-up integration.
const SPINUP_DT: f64 = 1e-3;

/// Deterministic RNG for one noise stream of a seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_vector(n: usize, rng: &mut ChaCha12Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Simulation setup for one truth/observation pair.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n: usize,
    pub dt: f64,
    pub steps: u64,
    pub seed: u64,
    pub spinup_time: f64,
    /// Subsampling stride for the persisted truth trajectory.
    pub stride: u64,
    pub obs: ObsNoiseSpec,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Validation(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.steps < 1 {
            return Err(Error::Validation("steps must be >= 1".into()));
        }
        if self.spinup_time < 0.0 {
            return Err(Error::Validation("spinup_time must be >= 0".into()));
        }
        if self.stride < 1 {
            return Err(Error::Validation("stride must be >= 1".into()));
        }
        if self.obs.n() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "obs spec has dimension {} but state has {}",
                self.obs.n(),
                self.n
            )));
        }
        Ok(())
    }
}

/// Truth state at one time point.
#[derive(Debug, Clone)]
pub struct TruthState {
    pub t: f64,
    pub x: DVector<f64>,
}

impl TruthState {
    fn check_finite(&self, step: u64, context: &str) -> Result<()> {
        if self.x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                step,
                context: context.to_string(),
            })
        }
    }
}

/// One observation increment over a single step.
#[derive(Debug, Clone)]
pub struct ObservationRecord {
    pub step_index: u64,
    pub delta_y: DVector<f64>,
}

/// Integrate the deterministic model from a seeded perturbation of the
/// uniform equilibrium to land on the attractor.
pub fn spinup_init(n: usize, forcing: f64, spinup_time: f64, seed: u64) -> Result<TruthState> {
    let model = DriftModel::lorenz96(n, forcing)?;
    let mut rng = stream_rng(seed, STREAM_SPINUP);
    let mut x = DVector::from_element(n, forcing);
    x[0] += 0.01;
    // Tiny seeded jitter so different seeds explore the attractor
    // independently.
    for v in x.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += 1e-4 * z;
    }
    let mut state = TruthState { t: 0.0, x };
    let steps = (spinup_time / SPINUP_DT).round() as u64;
    for k in 0..steps {
        let f = model.eval(&state.x)?;
        state.x += f * SPINUP_DT;
        state.check_finite(k, "spin-up integration")?;
    }
    state.t = 0.0;
    Ok(state)
}

/// One Euler-Maruyama step of the truth SDE.
pub fn step_truth(
    state: &TruthState,
    dt: f64,
    model: &DriftModel,
    rng: &mut ChaCha12Rng,
) -> Result<TruthState> {
    if !(dt > 0.0) {
        return Err(Error::Validation(format!("dt must be > 0, got {dt}")));
    }
    let f = model.eval(&state.x)?;
    let xi = normal_vector(state.x.len(), rng);
    let x = &state.x + f * dt + xi * (2.0 * dt).sqrt();
    let next = TruthState {
        t: state.t + dt,
        x,
    };
    next.check_finite(0, "truth step")?;
    Ok(next)
}

/// Observation increment of the current state:
/// `dY = X dt + sqrt(eps dt) Omega^{-1/2} eta`.
pub fn observe_increment(
    state: &TruthState,
    dt: f64,
    obs: &ObsNoiseSpec,
    rng: &mut ChaCha12Rng,
) -> Result<ObservationRecord> {
    if !(dt > 0.0) {
        return Err(Error::Validation(format!("dt must be > 0, got {dt}")));
    }
    let n = state.x.len();
    if obs.n() != n {
        return Err(Error::DimensionMismatch(format!(
            "obs spec has dimension {} but state has {}",
            obs.n(),
            n
        )));
    }
    let eta = normal_vector(n, rng);
    let scale = (obs.epsilon() * dt).sqrt();
    let delta_y = DVector::from_fn(n, |i, _| {
        state.x[i] * dt + scale * eta[i] / obs.omega()[i].sqrt()
    });
    Ok(ObservationRecord {
        step_index: 0,
        delta_y,
    })
}

/// Header shared by the on-disk streams.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub n: usize,
    pub dt: f64,
    pub steps: u64,
    pub epsilon: f64,
}

/// Lazily coupled truth/observation generator. Each `next()` advances the
/// truth one step and yields the observation increment accumulated over
/// that step; sampled truth states go to the optional sink.
pub struct TwinSim<'a> {
    model: &'a DriftModel,
    obs: ObsNoiseSpec,
    dt: f64,
    steps: u64,
    stride: u64,
    step: u64,
    state: TruthState,
    truth_rng: ChaCha12Rng,
    obs_rng: ChaCha12Rng,
    sink: Option<Box<dyn FnMut(u64, f64, &DVector<f64>) + 'a>>,
    /// Largest l-infinity norm seen, for the empirical boundedness check.
    pub max_abs_state: f64,
}

impl<'a> TwinSim<'a> {
    pub fn new(config: &SimConfig, model: &'a DriftModel, init: TruthState) -> Result<Self> {
        config.validate()?;
        if model.n() != config.n {
            return Err(Error::DimensionMismatch(format!(
                "model dimension {} does not match config {}",
                model.n(),
                config.n
            )));
        }
        Ok(TwinSim {
            model,
            obs: config.obs.clone(),
            dt: config.dt,
            steps: config.steps,
            stride: config.stride,
            step: 0,
            state: init,
            truth_rng: stream_rng(config.seed, STREAM_TRUTH),
            obs_rng: stream_rng(config.seed, STREAM_OBS),
            sink: None,
            max_abs_state: 0.0,
        })
    }

    /// Receive every stride-th truth state `(step_index, t, x)`.
    pub fn with_truth_sink<F>(mut self, sink: F) -> Self
    where
        F: FnMut(u64, f64, &DVector<f64>) + 'a,
    {
        self.sink = Some(Box::new(sink));
        self
    }

    pub fn initial_state(&self) -> &TruthState {
        &self.state
    }
}

impl Iterator for TwinSim<'_> {
    type Item = Result<ObservationRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.step >= self.steps {
            return None;
        }
        self.step += 1;
        // The increment dY over [t, t+dt] is driven by the state at the
        // start of the step.
        let rec = match observe_increment(&self.state, self.dt, &self.obs, &mut self.obs_rng) {
            Ok(mut r) => {
                r.step_index = self.step;
                r
            }
            Err(e) => return Some(Err(e.at_step(self.step))),
        };
        match step_truth(&self.state, self.dt, self.model, &mut self.truth_rng) {
            Ok(next) => self.state = next,
            Err(e) => return Some(Err(e.at_step(self.step))),
        }
        let amax = self.state.x.amax();
        self.max_abs_state = self.max_abs_state.max(amax);
        if self.step % self.stride == 0 {
            if let Some(sink) = self.sink.as_mut() {
                sink(self.step, self.state.t, &self.state.x);
            }
        }
        Some(Ok(rec))
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// Streaming writer for the observation file: little-endian header
/// `{magic "ENKB", version, n, dt, steps, epsilon}` followed by `steps`
/// records of `n` consecutive increments.
pub struct ObsStreamWriter {
    w: BufWriter<File>,
    n: usize,
    written: u64,
    expected: u64,
}

impl ObsStreamWriter {
    pub fn create(path: &Path, header: &StreamHeader) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(OBS_MAGIC)?;
        write_u32(&mut w, FORMAT_VERSION)?;
        write_u32(&mut w, header.n as u32)?;
        write_f64(&mut w, header.dt)?;
        write_u64(&mut w, header.steps)?;
        write_f64(&mut w, header.epsilon)?;
        Ok(ObsStreamWriter {
            w,
            n: header.n,
            written: 0,
            expected: header.steps,
        })
    }

    pub fn write_record(&mut self, rec: &ObservationRecord) -> Result<()> {
        if rec.delta_y.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "record has length {} but stream expects {}",
                rec.delta_y.len(),
                self.n
            )));
        }
        for v in rec.delta_y.iter() {
            write_f64(&mut self.w, *v)?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.expected {
            return Err(Error::Format(format!(
                "stream declared {} records but {} were written",
                self.expected, self.written
            )));
        }
        self.w.flush()?;
        Ok(())
    }
}

/// Reader for the observation stream; iterates `ObservationRecord`s.
pub struct ObsStreamReader {
    r: BufReader<File>,
    header: StreamHeader,
    next_step: u64,
}

impl ObsStreamReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != OBS_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {magic:?}, expected {OBS_MAGIC:?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported stream version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        let dt = read_f64(&mut r)?;
        let steps = read_u64(&mut r)?;
        let epsilon = read_f64(&mut r)?;
        Ok(ObsStreamReader {
            r,
            header: StreamHeader { n, dt, steps, epsilon },
            next_step: 1,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }
}

impl Iterator for ObsStreamReader {
    type Item = Result<ObservationRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next_step > self.header.steps {
            return None;
        }
        let n = self.header.n;
        let mut delta_y = DVector::zeros(n);
        for i in 0..n {
            match read_f64(&mut self.r) {
                Ok(v) => delta_y[i] = v,
                Err(e) => return Some(Err(e)),
            }
        }
        let rec = ObservationRecord {
            step_index: self.next_step,
            delta_y,
        };
        self.next_step += 1;
        Some(Ok(rec))
    }
}

/// Write a subsampled truth trajectory: header `{magic "ENKT", version, n,
/// dt, stride, count}` then `count` records of `(step u64, n f64)`.
pub fn write_truth_trajectory(
    path: &Path,
    n: usize,
    dt: f64,
    stride: u64,
    samples: &[(u64, DVector<f64>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRUTH_MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_u32(&mut w, n as u32)?;
    write_f64(&mut w, dt)?;
    write_u64(&mut w, stride)?;
    write_u64(&mut w, samples.len() as u64)?;
    for (step, x) in samples {
        write_u64(&mut w, *step)?;
        for v in x.iter() {
            write_f64(&mut w, *v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a truth trajectory written by [`write_truth_trajectory`].
pub fn read_truth_trajectory(path: &Path) -> Result<(f64, u64, Vec<(u64, DVector<f64>)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TRUTH_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {TRUTH_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported trajectory version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let dt = read_f64(&mut r)?;
    let stride = read_u64(&mut r)?;
    let count = read_u64(&mut r)?;
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let step = read_u64(&mut r)?;
        let mut x = DVector::zeros(n);
        for i in 0..n {
            x[i] = read_f64(&mut r)?;
        }
        samples.push((step, x));
    }
    Ok((dt, stride, samples))
}

/// Outcome summary of a file-producing simulation.
#[derive(Debug, Clone)]
pub struct SimSummary {
    pub initial_state: DVector<f64>,
    pub max_abs_state: f64,
    /// Set when the trajectory left the empirical boundedness envelope.
    pub exceeded_cap: bool,
}

/// Run the truth simulation and write both the truth trajectory and the
/// observation stream. Deterministic for a fixed seed.
pub fn simulate(
    config: &SimConfig,
    model: &DriftModel,
    truth_path: &Path,
    obs_path: &Path,
) -> Result<SimSummary> {
    config.validate()?;
    let init = spinup_init(config.n, crate::model::L96_FORCING, config.spinup_time, config.seed)?;
    let initial_state = init.x.clone();
    let mut samples: Vec<(u64, DVector<f64>)> = Vec::new();
    let mut writer = ObsStreamWriter::create(
        obs_path,
        &StreamHeader {
            n: config.n,
            dt: config.dt,
            steps: config.steps,
            epsilon: config.obs.epsilon(),
        },
    )?;
    let mut max_abs = 0.0f64;
    {
        let sim = TwinSim::new(config, model, init)?.with_truth_sink(|step, _t, x| {
            samples.push((step, x.clone()));
        });
        let mut sim = sim;
        while let Some(rec) = sim.next() {
            writer.write_record(&rec?)?;
        }
        max_abs = max_abs.max(sim.max_abs_state);
    }
    writer.finish()?;
    write_truth_trajectory(truth_path, config.n, config.dt, config.stride, &samples)?;
    Ok(SimSummary {
        initial_state,
        max_abs_state: max_abs,
        exceeded_cap: max_abs > crate::model::L96_CAP,
    })
}
