//! Replay reservoir of annotated episodes. It doubles as the context set the
//! interpolators condition on: every stored experience contributes one
//! `(state, improved mean)` pair.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::Rng;

use crate::env::EnvSpec;
use crate::error::{check_len, Error, Result};
use crate::policy::GaussianStats;
use crate::rng::{self, standard_normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub mc_return: f64,
    pub advantage: f64,
    pub improved_mean: Vec<f64>,
}

/// One time step: what was seen, what was sampled and from which Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub state: Vec<f64>,
    /// Unclipped sample, so the score function matches the sampling density.
    pub action: Vec<f64>,
    pub behavior: GaussianStats,
    pub reward: f64,
    annotation: Option<Annotation>,
}

impl Experience {
    pub fn new(state: Vec<f64>, action: Vec<f64>, behavior: GaussianStats, reward: f64) -> Self {
        Experience {
            state,
            action,
            behavior,
            reward,
            annotation: None,
        }
    }

    pub fn annotation(&self) -> Option<&Annotation> {
        self.annotation.as_ref()
    }

    pub fn improved_mean(&self) -> Option<&[f64]> {
        self.annotation.as_ref().map(|a| a.improved_mean.as_slice())
    }

    /// Annotations are written once.
    pub fn annotate(&mut self, annotation: Annotation) -> Result<()> {
        if self.annotation.is_some() {
            return Err(Error::AlreadyAnnotated);
        }
        check_len(
            "improved mean",
            self.action.len(),
            annotation.improved_mean.len(),
        )?;
        if !annotation.improved_mean.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("improved mean"));
        }
        self.annotation = Some(annotation);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    experiences: Vec<Experience>,
    /// Iteration `k` that produced the episode (0 for the initial context).
    pub iteration: u64,
    /// Step size used for the improvement; `None` before annotation or when
    /// the episode had no improvement direction.
    pub eta: Option<f64>,
    /// Fingerprint of the interpolator parameters that generated the rollout.
    pub model_hash: u64,
    initial: bool,
}

impl Episode {
    pub fn new(experiences: Vec<Experience>, iteration: u64) -> Self {
        Episode {
            experiences,
            iteration,
            eta: None,
            model_hash: 0,
            initial: false,
        }
    }

    pub fn experiences(&self) -> &[Experience] {
        &self.experiences
    }

    pub fn experiences_mut(&mut self) -> &mut [Experience] {
        &mut self.experiences
    }

    pub fn len(&self) -> usize {
        self.experiences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiences.is_empty()
    }

    pub fn is_initial(&self) -> bool {
        self.initial
    }

    pub fn episode_return(&self) -> f64 {
        self.experiences.iter().map(|e| e.reward).sum()
    }

    pub fn is_annotated(&self) -> bool {
        self.experiences.iter().all(|e| e.annotation.is_some())
    }

    pub fn is_partially_annotated(&self) -> bool {
        self.experiences.iter().any(|e| e.annotation.is_some())
    }

    pub fn points(&self) -> impl Iterator<Item = ContextPoint<'_>> {
        self.experiences.iter().map(ContextPoint::from_experience)
    }
}

/// A borrowed `(state, improved mean)` pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextPoint<'a> {
    pub state: &'a [f64],
    pub target: &'a [f64],
}

impl<'a> ContextPoint<'a> {
    fn from_experience(e: &'a Experience) -> Self {
        ContextPoint {
            state: &e.state,
            target: e.improved_mean().expect("stored experiences are annotated"),
        }
    }
}

/// Anything that can enumerate context points in insertion order.
pub trait PointSource {
    fn collect_points(&self) -> Vec<ContextPoint<'_>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayMemory {
    state_dim: usize,
    action_dim: usize,
    /// Maximum number of rollout episodes; `None` keeps everything.
    capacity: Option<usize>,
    initial: Vec<Episode>,
    episodes: VecDeque<Episode>,
    total_points: usize,
}

/// Synthesizes the initial context: `count` states uniform over the EnvSpec
/// state box, each paired with an action drawn from `N(mean, std)` which
/// doubles as its improved mean.
pub fn initial_context(
    spec: &EnvSpec,
    count: usize,
    mean: &[f64],
    std: &[f64],
    capacity: Option<usize>,
    seed: u64,
) -> Result<ReplayMemory> {
    if count == 0 {
        return Err(Error::Config(
            "initial context needs at least one point".into(),
        ));
    }
    check_len("initial context mean", spec.action_dim, mean.len())?;
    let behavior = GaussianStats::new(mean.to_vec(), std.to_vec())?;
    let mut rng = rng::stream(seed, rng::Stream::InitialContext, 0);
    let mut experiences = Vec::with_capacity(count);
    for _ in 0..count {
        let state: Vec<f64> = spec
            .state_low
            .iter()
            .zip(&spec.state_high)
            .map(|(l, h)| l + (h - l) * rng.random::<f64>())
            .collect();
        let action: Vec<f64> = mean
            .iter()
            .zip(std)
            .map(|(m, s)| m + s * standard_normal(&mut rng))
            .collect();
        let mut e = Experience::new(state, action.clone(), behavior.clone(), 0.0);
        e.annotate(Annotation {
            mc_return: 0.0,
            advantage: 0.0,
            improved_mean: action,
        })?;
        experiences.push(e);
    }
    let mut episode = Episode::new(experiences, 0);
    episode.initial = true;
    let mut memory = ReplayMemory::new(spec.state_dim, spec.action_dim, capacity);
    memory.total_points = episode.len();
    memory.initial.push(episode);
    Ok(memory)
}

impl ReplayMemory {
    pub fn new(state_dim: usize, action_dim: usize, capacity: Option<usize>) -> Self {
        ReplayMemory {
            state_dim,
            action_dim,
            capacity,
            initial: Vec::new(),
            episodes: VecDeque::new(),
            total_points: 0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn total_points(&self) -> usize {
        self.total_points
    }

    /// Initial-context episodes followed by rollout episodes, oldest first.
    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.initial.iter().chain(self.episodes.iter())
    }

    pub fn num_episodes(&self) -> usize {
        self.initial.len() + self.episodes.len()
    }

    pub fn num_rollout_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episode(&self, index: usize) -> Option<&Episode> {
        if index < self.initial.len() {
            self.initial.get(index)
        } else {
            self.episodes.get(index - self.initial.len())
        }
    }

    pub fn last_episode(&self) -> Option<&Episode> {
        self.episodes.back()
    }

    /// Splits the initial context into `parts` contiguous pseudo-episodes so
    /// leave-one-out training has something to hold out from the start.
    pub fn split_initial(&mut self, parts: usize) {
        let parts = parts.max(1);
        let experiences: Vec<Experience> =
            self.initial.drain(..).flat_map(|e| e.experiences).collect();
        if experiences.is_empty() {
            return;
        }
        let parts = parts.min(experiences.len());
        let base = experiences.len() / parts;
        let extra = experiences.len() % parts;
        let mut iter = experiences.into_iter();
        for p in 0..parts {
            let n = base + usize::from(p < extra);
            let mut ep = Episode::new(iter.by_ref().take(n).collect(), 0);
            ep.initial = true;
            self.initial.push(ep);
        }
    }

    /// Appends a fully annotated episode, evicting the oldest rollout episode
    /// when over capacity. Initial-context episodes are never evicted.
    pub fn push_episode(&mut self, episode: Episode) -> Result<Option<Episode>> {
        if episode.is_empty() || !episode.is_annotated() {
            return Err(Error::NotAnnotated);
        }
        for e in episode.experiences() {
            check_len("episode state", self.state_dim, e.state.len())?;
            check_len("episode action", self.action_dim, e.action.len())?;
        }
        self.total_points += episode.len();
        self.episodes.push_back(episode);
        let mut evicted = None;
        if let Some(cap) = self.capacity {
            while self.episodes.len() > cap {
                let old = self.episodes.pop_front().expect("non-empty");
                self.total_points -= old.len();
                evicted = Some(old);
            }
        }
        Ok(evicted)
    }

    /// Context/target partition that holds out episode `m`.
    pub fn leave_one_out(&self, m: usize) -> Result<LeaveOneOut<'_>> {
        let n = self.num_episodes();
        if n < 2 {
            return Err(Error::InsufficientEpisodes(n));
        }
        if m >= n {
            return Err(Error::EpisodeIndex { index: m, len: n });
        }
        Ok(LeaveOneOut {
            memory: self,
            held_out: m,
        })
    }

    /// Writes the memory in the little-endian dump format described in the
    /// README (episode-major, 64-bit reals).
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&(self.state_dim as u64).to_le_bytes())?;
        w.write_all(&(self.action_dim as u64).to_le_bytes())?;
        w.write_all(&(self.capacity.unwrap_or(0) as u64).to_le_bytes())?;
        w.write_all(&(self.num_episodes() as u64).to_le_bytes())?;
        for ep in self.episodes() {
            w.write_all(&[u8::from(ep.initial)])?;
            w.write_all(&ep.iteration.to_le_bytes())?;
            w.write_all(&ep.model_hash.to_le_bytes())?;
            w.write_all(&ep.eta.unwrap_or(f64::NAN).to_le_bytes())?;
            w.write_all(&(ep.len() as u64).to_le_bytes())?;
            for e in ep.experiences() {
                let ann = e
                    .annotation
                    .as_ref()
                    .expect("stored experiences are annotated");
                let reals = e
                    .state
                    .iter()
                    .chain(&e.action)
                    .chain(&e.behavior.mean)
                    .chain(&e.behavior.std)
                    .chain(std::iter::once(&e.reward))
                    .chain(std::iter::once(&ann.mc_return))
                    .chain(std::iter::once(&ann.advantage))
                    .chain(&ann.improved_mean);
                for v in reals {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |detail: String| Error::format("memory dump", detail);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut rd = DumpReader { r };
        let version = rd.u64()?;
        if version != DUMP_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let state_dim = rd.u64()? as usize;
        let action_dim = rd.u64()? as usize;
        let capacity = match rd.u64()? {
            0 => None,
            c => Some(c as usize),
        };
        let n_episodes = rd.u64()? as usize;
        let mut memory = ReplayMemory::new(state_dim, action_dim, capacity);
        for _ in 0..n_episodes {
            let initial = rd.u8()? == 1;
            let iteration = rd.u64()?;
            let model_hash = rd.u64()?;
            let eta = rd.f64()?;
            let len = rd.u64()? as usize;
            let mut experiences = Vec::with_capacity(len);
            for _ in 0..len {
                let state = rd.reals(state_dim)?;
                let action = rd.reals(action_dim)?;
                let mean = rd.reals(action_dim)?;
                let std = rd.reals(action_dim)?;
                let reward = rd.f64()?;
                let mc_return = rd.f64()?;
                let advantage = rd.f64()?;
                let improved_mean = rd.reals(action_dim)?;
                let mut e = Experience::new(state, action, GaussianStats::new(mean, std)?, reward);
                e.annotate(Annotation {
                    mc_return,
                    advantage,
                    improved_mean,
                })?;
                experiences.push(e);
            }
            let mut ep = Episode::new(experiences, iteration);
            ep.model_hash = model_hash;
            ep.eta = if eta.is_nan() { None } else { Some(eta) };
            ep.initial = initial;
            memory.total_points += ep.len();
            if initial {
                memory.initial.push(ep);
            } else {
                memory.episodes.push_back(ep);
            }
        }
        Ok(memory)
    }
}

const MAGIC: &[u8; 8] = b"IMELMEM\0";
const DUMP_VERSION: u64 = 1;

struct DumpReader<'a, R: Read> {
    r: &'a mut R,
}

impl<R: Read> DumpReader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.r
            .read_exact(&mut buf)
            .map_err(|e| Error::format("memory dump", e.to_string()))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

impl PointSource for ReplayMemory {
    fn collect_points(&self) -> Vec<ContextPoint<'_>> {
        let mut out = Vec::with_capacity(self.total_points);
        for ep in self.episodes() {
            out.extend(ep.points());
        }
        out
    }
}

/// Borrowed view of the memory with one episode held out as the target set.
#[derive(Clone, Copy, Debug)]
pub struct LeaveOneOut<'a> {
    memory: &'a ReplayMemory,
    held_out: usize,
}

impl<'a> LeaveOneOut<'a> {
    pub fn held_out(&self) -> usize {
        self.held_out
    }

    pub fn target_episode(&self) -> &'a Episode {
        self.memory.episode(self.held_out).expect("validated index")
    }

    pub fn targets(&self) -> Vec<ContextPoint<'a>> {
        self.target_episode().points().collect()
    }

    pub fn context_len(&self) -> usize {
        self.memory.total_points - self.target_episode().len()
    }

    pub fn target_len(&self) -> usize {
        self.target_episode().len()
    }
}

impl PointSource for LeaveOneOut<'_> {
    fn collect_points(&self) -> Vec<ContextPoint<'_>> {
        let mut out = Vec::with_capacity(self.context_len());
        for (i, ep) in self.memory.episodes().enumerate() {
            if i != self.held_out {
                out.extend(ep.points());
            }
        }
        out
    }
}

/// All points when they fit in `max_points`, otherwise a uniform subsample
/// without replacement kept in insertion order.
pub fn sample_context<S: PointSource + ?Sized>(
    source: &S,
    max_points: usize,
    seed: u64,
) -> Result<Vec<ContextPoint<'_>>> {
    if max_points == 0 {
        return Err(Error::Config(
            "max_context_points must be at least 1".into(),
        ));
    }
    let points = source.collect_points();
    if points.is_empty() {
        return Err(Error::EmptyMemory);
    }
    if points.len() <= max_points {
        return Ok(points);
    }
    let mut rng = rng::seeded(seed);
    let mut idx = rand::seq::index::sample(&mut rng, points.len(), max_points).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| points[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::make_env;

    pub(crate) fn annotated_episode(len: usize, iteration: u64, offset: f64) -> Episode {
        let experiences = (0..len)
            .map(|t| {
                let mut e = Experience::new(
                    vec![offset + t as f64, 0.0],
                    vec![0.1 * t as f64],
                    GaussianStats::new(vec![0.0], vec![1.0]).unwrap(),
                    1.0,
                );
                e.annotate(Annotation {
                    mc_return: 0.0,
                    advantage: 0.0,
                    improved_mean: vec![offset + t as f64],
                })
                .unwrap();
                e
            })
            .collect();
        Episode::new(experiences, iteration)
    }

    fn spec() -> EnvSpec {
        make_env("point_mass_1d").unwrap().spec().clone()
    }

    #[test]
    fn degenerate_box_gives_that_state() {
        let mut s = spec();
        s.state_low = vec![0.5, -0.25];
        s.state_high = vec![0.5, -0.25];
        let m = initial_context(&s, 1, &[0.0], &[0.3], None, 0).unwrap();
        let e = &m.episode(0).unwrap().experiences()[0];
        assert_eq!(e.state, vec![0.5, -0.25]);
        assert_eq!(e.improved_mean().unwrap(), e.action.as_slice());
    }

    #[test]
    fn initial_states_inside_box() {
        let s = spec();
        let m = initial_context(&s, 500, &[0.0], &[0.3], None, 7).unwrap();
        assert_eq!(m.total_points(), 500);
        for e in m.episode(0).unwrap().experiences() {
            assert!(s.contains_state(&e.state));
        }
    }

    #[test]
    fn eviction_keeps_newest_and_initial() {
        let mut m = initial_context(&spec(), 4, &[0.0], &[0.3], Some(2), 1).unwrap();
        for k in 1..=3 {
            m.push_episode(annotated_episode(3, k, 0.0)).unwrap();
        }
        let iters: Vec<u64> = m.episodes().map(|e| e.iteration).collect();
        assert_eq!(iters, vec![0, 2, 3]);
        assert!(m.episode(0).unwrap().is_initial());
        assert_eq!(m.total_points(), 4 + 6);
    }

    #[test]
    fn push_rejects_unannotated() {
        let mut m = ReplayMemory::new(2, 1, None);
        let e = Experience::new(
            vec![0.0, 0.0],
            vec![0.0],
            GaussianStats::new(vec![0.0], vec![1.0]).unwrap(),
            0.0,
        );
        assert!(matches!(
            m.push_episode(Episode::new(vec![e], 1)),
            Err(Error::NotAnnotated)
        ));
    }

    #[test]
    fn leave_one_out_partitions() {
        let mut m = ReplayMemory::new(2, 1, None);
        m.push_episode(annotated_episode(3, 1, 0.0)).unwrap();
        assert!(matches!(
            m.leave_one_out(0),
            Err(Error::InsufficientEpisodes(1))
        ));
        m.push_episode(annotated_episode(2, 2, 100.0)).unwrap();
        m.push_episode(annotated_episode(4, 3, 200.0)).unwrap();
        let loo = m.leave_one_out(0).unwrap();
        assert_eq!(loo.context_len() + loo.target_len(), m.total_points());
        assert_eq!(loo.targets()[0].state[0], 0.0);
        assert!(m.leave_one_out(3).is_err());
        let mut seen = 0;
        for i in 0..m.num_episodes() {
            let loo = m.leave_one_out(i).unwrap();
            let ctx = loo.collect_points();
            assert_eq!(ctx.len() + loo.targets().len(), m.total_points());
            for t in loo.targets() {
                assert!(!ctx.iter().any(|c| c.state == t.state));
            }
            seen += loo.target_len();
        }
        assert_eq!(seen, m.total_points());
    }

    #[test]
    fn two_episode_loo() {
        let mut m = ReplayMemory::new(2, 1, None);
        m.push_episode(annotated_episode(2, 1, 0.0)).unwrap();
        m.push_episode(annotated_episode(2, 2, 10.0)).unwrap();
        let loo = m.leave_one_out(0).unwrap();
        let ctx: Vec<f64> = loo.collect_points().iter().map(|p| p.state[0]).collect();
        assert_eq!(ctx, vec![10.0, 11.0]);
    }

    #[test]
    fn sample_context_sizes_and_identity() {
        let mut m = ReplayMemory::new(2, 1, None);
        assert!(matches!(sample_context(&m, 3, 0), Err(Error::EmptyMemory)));
        m.push_episode(annotated_episode(5, 1, 0.0)).unwrap();
        m.push_episode(annotated_episode(5, 2, 10.0)).unwrap();
        let all = sample_context(&m, 100, 0).unwrap();
        assert_eq!(all, m.collect_points());
        let sub = sample_context(&m, 4, 3).unwrap();
        assert_eq!(sub.len(), 4);
        assert_eq!(sub, sample_context(&m, 4, 3).unwrap());
    }

    #[test]
    fn split_initial_makes_pseudo_episodes() {
        let mut m = initial_context(&spec(), 32, &[0.0], &[0.3], Some(64), 1).unwrap();
        let before = m
            .collect_points()
            .iter()
            .map(|p| p.state.to_vec())
            .collect::<Vec<_>>();
        m.split_initial(4);
        assert_eq!(m.num_episodes(), 4);
        assert!(m.episodes().all(|e| e.len() == 8 && e.is_initial()));
        let after = m
            .collect_points()
            .iter()
            .map(|p| p.state.to_vec())
            .collect::<Vec<_>>();
        assert_eq!(before, after);
    }

    #[test]
    fn dump_round_trips() {
        let mut m = initial_context(&spec(), 6, &[0.0], &[0.3], Some(5), 2).unwrap();
        m.split_initial(2);
        let mut ep = annotated_episode(3, 1, 0.5);
        ep.eta = Some(0.25);
        ep.model_hash = 42;
        m.push_episode(ep).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = ReplayMemory::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert!(ReplayMemory::read_from(&mut &buf[..20]).is_err());
    }
}
