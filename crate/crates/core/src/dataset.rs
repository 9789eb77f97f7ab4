//! Episode files, scalers and the replay buffer.
//!
//! File layout (little-endian):
//!
//! ```text
//! "TTW1" | version u32 | obs_dim u32 | act_dim u32 | episodes u64
//! per episode: trajectory [f64; 9] | steps u64 | steps × transition
//! transition: obs [f64; obs_dim] | action [f64; act_dim] | reward f64
//!             | next_obs [f64; obs_dim] | terminated u8 | truncated u8
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::control::{Controller, EpisodeStats};
use crate::error::{Error, Result};
use crate::sim::{Env, ReferenceTrajectory, ACT_DIM, OBS_DIM};

pub const MAGIC: [u8; 4] = *b"TTW1";
pub const VERSION: u32 = 1;
const SCALER_MAGIC: [u8; 4] = *b"TTWS";
const HEADER_LEN: u64 = 4 + 4 + 4 + 4 + 8;
/// Smallest scale a fitted scaler will use.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: [f64; OBS_DIM],
    pub action: [f64; ACT_DIM],
    pub reward: f64,
    pub next_obs: [f64; OBS_DIM],
    pub terminated: bool,
    pub truncated: bool,
}

impl Transition {
    pub fn is_finite(&self) -> bool {
        self.obs.iter().chain(&self.action).chain(&self.next_obs).all(|v| v.is_finite()) && self.reward.is_finite()
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for v in self.obs.iter().chain(&self.action).chain(std::iter::once(&self.reward)).chain(&self.next_obs) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[u8::from(self.terminated), u8::from(self.truncated)])
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut t = Transition {
            obs: [0.0; OBS_DIM],
            action: [0.0; ACT_DIM],
            reward: 0.0,
            next_obs: [0.0; OBS_DIM],
            terminated: false,
            truncated: false,
        };
        for v in t.obs.iter_mut() {
            *v = read_f64(r)?;
        }
        for v in t.action.iter_mut() {
            *v = read_f64(r)?;
        }
        t.reward = read_f64(r)?;
        for v in t.next_obs.iter_mut() {
            *v = read_f64(r)?;
        }
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        t.terminated = read_flag(flags[0])?;
        t.truncated = read_flag(flags[1])?;
        Ok(t)
    }
}

fn read_flag(b: u8) -> Result<bool> {
    match b {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(Error::Format(format!("flag byte {other} is not 0 or 1"))),
    }
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub trajectory: ReferenceTrajectory,
    pub transitions: Vec<Transition>,
}

impl EpisodeRecord {
    pub fn episode_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

/// Streaming writer. Counts are written as zero and patched when an episode
/// or the file is closed, so a finalized file is always self-consistent.
pub struct EpisodeWriter<W: Write + Seek> {
    inner: W,
    episodes: u64,
    open: Option<(u64, u64)>,
}

impl EpisodeWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write + Seek> EpisodeWriter<W> {
    pub fn new(mut inner: W) -> Result<Self> {
        inner.write_all(&MAGIC)?;
        inner.write_all(&VERSION.to_le_bytes())?;
        inner.write_all(&(OBS_DIM as u32).to_le_bytes())?;
        inner.write_all(&(ACT_DIM as u32).to_le_bytes())?;
        inner.write_all(&0u64.to_le_bytes())?;
        Ok(EpisodeWriter {
            inner,
            episodes: 0,
            open: None,
        })
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn begin_episode(&mut self, traj: &ReferenceTrajectory) -> Result<()> {
        if self.open.is_some() {
            self.end_episode()?;
        }
        for v in traj.to_array() {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        let count_pos = self.inner.stream_position()?;
        self.inner.write_all(&0u64.to_le_bytes())?;
        self.open = Some((count_pos, 0));
        Ok(())
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        let Some((_, steps)) = self.open.as_mut() else {
            return Err(Error::Format("transition pushed outside an episode".into()));
        };
        t.write_to(&mut self.inner)?;
        *steps += 1;
        Ok(())
    }

    pub fn end_episode(&mut self) -> Result<()> {
        if let Some((pos, steps)) = self.open.take() {
            let end = self.inner.stream_position()?;
            self.inner.seek(SeekFrom::Start(pos))?;
            self.inner.write_all(&steps.to_le_bytes())?;
            self.inner.seek(SeekFrom::Start(end))?;
            self.episodes += 1;
        }
        Ok(())
    }

    pub fn write_episode(&mut self, episode: &EpisodeRecord) -> Result<()> {
        self.begin_episode(&episode.trajectory)?;
        for t in &episode.transitions {
            self.push(t)?;
        }
        self.end_episode()
    }

    /// Close any open episode, patch the episode count and flush.
    pub fn finish(mut self) -> Result<W> {
        self.end_episode()?;
        let end = self.inner.stream_position()?;
        self.inner.seek(SeekFrom::Start(HEADER_LEN - 8))?;
        self.inner.write_all(&self.episodes.to_le_bytes())?;
        self.inner.seek(SeekFrom::Start(end))?;
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub fn write_dataset<W: Write + Seek>(inner: W, episodes: &[EpisodeRecord]) -> Result<W> {
    let mut w = EpisodeWriter::new(inner)?;
    for e in episodes {
        w.write_episode(e)?;
    }
    w.finish()
}

pub fn write_dataset_file(path: impl AsRef<Path>, episodes: &[EpisodeRecord]) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), episodes)?;
    Ok(())
}

/// Parse a whole episode file, validating header dimensions, flags and that
/// nothing trails the declared payload.
pub fn read_dataset<R: Read>(mut r: R) -> Result<Vec<EpisodeRecord>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let obs_dim = read_u32(&mut r)? as usize;
    let act_dim = read_u32(&mut r)? as usize;
    for (expected, got) in [(OBS_DIM, obs_dim), (ACT_DIM, act_dim)] {
        if expected != got {
            return Err(Error::DimensionMismatch { expected, got });
        }
    }
    let count = read_u64(&mut r)?;
    let mut episodes = Vec::new();
    for _ in 0..count {
        let mut arr = [0.0; 9];
        for v in arr.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        let trajectory = ReferenceTrajectory::from_array(arr)?;
        let steps = read_u64(&mut r)?;
        let transitions = (0..steps).map(|_| Transition::read_from(&mut r)).collect::<Result<Vec<_>>>()?;
        episodes.push(EpisodeRecord {
            trajectory,
            transitions,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after declared episodes".into()));
    }
    Ok(episodes)
}

pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<Vec<EpisodeRecord>> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Summary of one recorded episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode_return: f64,
    pub length: usize,
    pub terminated_early: bool,
    pub stats: EpisodeStats,
}

/// Run `controller` for one episode on `traj`, streaming each transition to
/// `sink`. If the simulation fails mid-episode the episode is closed at the
/// last complete transition before the error is returned.
pub fn record_episode<C, W>(
    env: &mut Env,
    controller: &mut C,
    traj: ReferenceTrajectory,
    sink: &mut EpisodeWriter<W>,
) -> Result<EpisodeSummary>
where
    C: Controller + ?Sized,
    W: Write + Seek,
{
    controller.reset();
    let mut obs = env.reset_with(traj).to_array();
    sink.begin_episode(&traj)?;
    let mut stats = EpisodeStats::default();
    while !env.is_done() {
        let out = match controller.act(env).and_then(|a| env.step(a)) {
            Ok(out) => out,
            Err(e) => {
                sink.end_episode()?;
                return Err(e);
            }
        };
        let next_obs = out.obs.to_array();
        sink.push(&Transition {
            obs,
            action: out.applied,
            reward: out.reward,
            next_obs,
            terminated: out.terminated,
            truncated: out.truncated && !out.terminated,
        })?;
        stats.record(&out);
        obs = next_obs;
    }
    sink.end_episode()?;
    Ok(EpisodeSummary {
        episode_return: stats.episode_return,
        length: stats.steps,
        terminated_early: stats.terminated,
        stats,
    })
}

/// Per-dimension `y = (x − shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineScaler {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AffineScaler {
    pub fn new(shift: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if shift.len() != scale.len() {
            return Err(Error::DimensionMismatch {
                expected: shift.len(),
                got: scale.len(),
            });
        }
        if let Some(s) = scale.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Format(format!("scaler scale {s} is not strictly positive")));
        }
        Ok(AffineScaler { shift, scale })
    }

    pub fn identity(dim: usize) -> Self {
        AffineScaler {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and standard deviation (population) with the scale floored.
    pub fn fit<'a, I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            n += 1;
            for d in 0..dim {
                let delta = row[d] - mean[d];
                mean[d] += delta / n as f64;
                m2[d] += delta * (row[d] - mean[d]);
            }
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let scale = m2.iter().map(|v| (v / n as f64).sqrt().max(SCALE_FLOOR)).collect();
        Ok(AffineScaler { shift: mean, scale })
    }

    /// Map `[−bound, bound]` onto `[−1, 1]` in every dimension.
    pub fn symmetric(dim: usize, bound: f64) -> Self {
        AffineScaler {
            shift: vec![0.0; dim],
            scale: vec![bound; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.shift.iter().zip(&self.scale)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn transform_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (v, (m, s))) in out.iter_mut().zip(x.iter().zip(self.shift.iter().zip(&self.scale))) {
            *o = (v - m) / s;
        }
    }

    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(self.shift.iter().zip(&self.scale)).map(|(v, (m, s))| v * s + m).collect()
    }
}

/// Observation and action scalers shared by offline and online training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scalers {
    pub obs: AffineScaler,
    pub act: AffineScaler,
}

impl Scalers {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&SCALER_MAGIC)?;
        for s in [&self.obs, &self.act] {
            w.write_all(&(s.dim() as u32).to_le_bytes())?;
            for v in s.shift.iter().chain(&s.scale) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != SCALER_MAGIC {
            return Err(Error::Format("not a scaler file".into()));
        }
        let mut read_one = || -> Result<AffineScaler> {
            let dim = read_u32(&mut r)? as usize;
            let shift = (0..dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            let scale = (0..dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            AffineScaler::new(shift, scale)
        };
        let obs = read_one()?;
        let act = read_one()?;
        for (expected, got) in [(OBS_DIM, obs.dim()), (ACT_DIM, act.dim())] {
            if expected != got {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        Ok(Scalers { obs, act })
    }
}

/// Observation scaler fitted on every stored `obs`; action scaler fixed by
/// the voltage bound.
pub fn fit_scalers(episodes: &[EpisodeRecord], v_max: f64) -> Result<Scalers> {
    let rows = episodes.iter().flat_map(|e| e.transitions.iter().map(|t| &t.obs[..]));
    Ok(Scalers {
        obs: AffineScaler::fit(OBS_DIM, rows)?,
        act: AffineScaler::symmetric(ACT_DIM, v_max),
    })
}

/// Fixed-capacity ring buffer of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            data: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            next: 0,
        }
    }

    pub fn from_episodes(episodes: &[EpisodeRecord], capacity: usize) -> Self {
        let mut buf = Self::new(capacity);
        for t in episodes.iter().flat_map(|e| &e.transitions) {
            buf.push(*t);
        }
        buf
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.data.get(i)
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok((0..batch_size).map(|_| rng.random_range(0..self.data.len())).collect())
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<Transition>> {
        Ok(self.sample_indices(batch_size, rng)?.into_iter().map(|i| self.data[i]).collect())
    }
}

pub fn sample_batch<R: Rng + ?Sized>(buffer: &ReplayBuffer, batch_size: usize, rng: &mut R) -> Result<Vec<Transition>> {
    buffer.sample_batch(batch_size, rng)
}
