//! Conditional density estimates for the balance residual.
//!
//! Two regimes share one output type, [`DensityCache`]:
//!
//! * discrete states (grid cells): ratios of occurrence counts,
//!   `T̂(s'|s,a) = η(s,a,s') / η(s,a)` and `P̂(s',a'|s,a) = η(s,a,s',a') / η(s,a)`,
//!   with a uniform conditional for unvisited `(s,a)`;
//! * continuous states: conditional kernel density estimates
//!
//!   ```text
//!   T̂(s'|s,a)    = Σ_l K3(d3(s', s'_l)) K2(d2((s,a),(s_l,a_l))) / Σ_l K2(d2((s,a),(s_l,a_l)))
//!   P̂(s',a'|s,a) = Σ_l K1(d1((s',a'),(s'_l,a'_l))) K2(...) / Σ_l K2(...)
//!   ```
//!
//!   with Gaussian kernels `K_i(d) = (2π h_i)^{-m_i/2} exp(-d² / (2 h_i))`,
//!   i.e. bandwidth matrix `H_i = h_i I` applied to a scalar Euclidean distance.
//!
//! The training objective only ever needs the estimates at buffer tuples, so
//! they are computed once up front.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demos::TupleBuffer;
use crate::env::GridSpec;
use crate::error::{Error, Result};

pub const DEFAULT_BANDWIDTH: f64 = 0.25;
pub const DEFAULT_DENOMINATOR_FLOOR: f64 = 1e-12;

/// How discrete actions enter the `(s, a)` and `(s', a')` metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionDistance {
    /// Kernel factor 1 when actions agree and 0 otherwise.
    ExactMatch,
    /// Actions embedded as scaled one-hot vectors inside the Euclidean metric.
    OneHot,
}

impl fmt::Display for ActionDistance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionDistance::ExactMatch => "exact_match",
            ActionDistance::OneHot => "one_hot",
        })
    }
}

impl FromStr for ActionDistance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_match" | "exact-match" | "exact" => Ok(ActionDistance::ExactMatch),
            "one_hot" | "one-hot" | "onehot" => Ok(ActionDistance::OneHot),
            other => Err(Error::Config(format!("unknown action distance `{other}`"))),
        }
    }
}

/// Selects one of the three kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelSlot {
    /// Over `(s', a')`.
    NextPair,
    /// Over `(s, a)`.
    Pair,
    /// Over `s'`.
    NextState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
    pub action_distance: ActionDistance,
    /// Length of the one-hot action embedding in `one_hot` mode.
    pub one_hot_scale: f64,
    pub denominator_floor: f64,
    pub m1: usize,
    pub m2: usize,
    pub m3: usize,
}

impl KernelConfig {
    pub fn new(h1: f64, h2: f64, h3: f64, action_distance: ActionDistance, state_dim: usize, action_count: usize) -> Result<Self> {
        let cfg = Self {
            h1,
            h2,
            h3,
            action_distance,
            one_hot_scale: 1.0,
            denominator_floor: DEFAULT_DENOMINATOR_FLOOR,
            m1: 0,
            m2: 0,
            m3: 0,
        };
        cfg.with_space(state_dim, action_count)
    }

    pub fn default_for(state_dim: usize, action_count: usize) -> Self {
        Self::new(
            DEFAULT_BANDWIDTH,
            DEFAULT_BANDWIDTH,
            DEFAULT_BANDWIDTH,
            ActionDistance::ExactMatch,
            state_dim,
            action_count,
        )
        .expect("default bandwidths are positive")
    }

    /// Recomputes the kernel dimensions for a state/action space and validates.
    pub fn with_space(mut self, state_dim: usize, action_count: usize) -> Result<Self> {
        let width = match self.action_distance {
            ActionDistance::ExactMatch => 0,
            ActionDistance::OneHot => action_count,
        };
        self.m3 = state_dim;
        self.m1 = state_dim + width;
        self.m2 = state_dim + width;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, h) in [("h1", self.h1), ("h2", self.h2), ("h3", self.h3)] {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config(format!("bandwidth {name} must be positive and finite, got {h}")));
            }
        }
        if !(self.denominator_floor > 0.0) {
            return Err(Error::Config("denominator floor must be positive".into()));
        }
        if !(self.one_hot_scale > 0.0 && self.one_hot_scale.is_finite()) {
            return Err(Error::Config("one-hot scale must be positive".into()));
        }
        if self.m3 == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        Ok(())
    }

    fn slot(&self, which: KernelSlot) -> (f64, usize) {
        match which {
            KernelSlot::NextPair => (self.h1, self.m1),
            KernelSlot::Pair => (self.h2, self.m2),
            KernelSlot::NextState => (self.h3, self.m3),
        }
    }

    /// Squared distance contribution of an action pair, or `None` when
    /// exact matching zeroes the kernel.
    fn action_sq_distance(&self, a: usize, b: usize) -> Option<f64> {
        match self.action_distance {
            ActionDistance::ExactMatch => (a == b).then_some(0.0),
            ActionDistance::OneHot => Some(if a == b { 0.0 } else { 2.0 * self.one_hot_scale * self.one_hot_scale }),
        }
    }
}

/// Gaussian kernel of dimension `m` and variance-scale bandwidth `h`,
/// evaluated at a squared distance.
#[inline]
pub fn gaussian_kernel_sq(h: f64, m: usize, sq_distance: f64) -> f64 {
    (2.0 * PI * h).powf(-(m as f64) / 2.0) * (-sq_distance / (2.0 * h)).exp()
}

pub fn kernel_value(config: &KernelConfig, distance: f64, which: KernelSlot) -> f64 {
    let (h, m) = config.slot(which);
    gaussian_kernel_sq(h, m, distance * distance)
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Arguments of a conditional density query, in standardized feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPoint {
    pub s: Vec<f64>,
    pub a: usize,
    pub s_next: Vec<f64>,
    pub a_next: Option<usize>,
}

impl QueryPoint {
    /// The query at buffer tuple `i`, including its `a'`.
    pub fn at_tuple(buffer: &TupleBuffer, i: usize) -> Self {
        let t = &buffer.tuples[i];
        Self {
            s: buffer.feature(i).to_vec(),
            a: t.a,
            s_next: buffer.next_feature(i).to_vec(),
            a_next: Some(t.a_next),
        }
    }

    /// Builds a query from raw states using the buffer's preprocessing.
    pub fn from_raw(buffer: &TupleBuffer, s: &[f64], a: usize, s_next: &[f64], a_next: Option<usize>) -> Self {
        let pre = &buffer.preprocessor;
        Self { s: pre.features(s), a, s_next: pre.features(s_next), a_next }
    }
}

/// Kernel sums for one query: `Σ K2`, `Σ K3·K2` and `Σ K1·K2`.
#[derive(Debug, Clone, Copy, Default)]
struct KernelSums {
    den: f64,
    num_t: f64,
    num_p: f64,
}

fn kernel_sums(buffer: &TupleBuffer, q: &QueryPoint, config: &KernelConfig) -> KernelSums {
    let mut sums = KernelSums::default();
    for l in 0..buffer.len() {
        let t = &buffer.tuples[l];
        let Some(da) = config.action_sq_distance(q.a, t.a) else { continue };
        let k2 = gaussian_kernel_sq(config.h2, config.m2, sq_dist(&q.s, buffer.feature(l)) + da);
        if k2 == 0.0 {
            continue;
        }
        let ds = sq_dist(&q.s_next, buffer.next_feature(l));
        sums.den += k2;
        sums.num_t += k2 * gaussian_kernel_sq(config.h3, config.m3, ds);
        if let Some(a_next) = q.a_next {
            if let Some(dan) = config.action_sq_distance(a_next, t.a_next) {
                sums.num_p += k2 * gaussian_kernel_sq(config.h1, config.m1, ds + dan);
            }
        }
    }
    sums
}

/// Kernel estimate of `T̂(s'|s,a)`.
pub fn ckde_t(buffer: &TupleBuffer, q: &QueryPoint, config: &KernelConfig) -> f64 {
    let sums = kernel_sums(buffer, q, config);
    sums.num_t / sums.den.max(config.denominator_floor)
}

/// Kernel estimate of `P̂(s',a'|s,a)`. Requires `q.a_next`.
pub fn ckde_p(buffer: &TupleBuffer, q: &QueryPoint, config: &KernelConfig) -> Result<f64> {
    if q.a_next.is_none() {
        return Err(Error::Input("P̂ query needs a next action".into()));
    }
    let sums = kernel_sums(buffer, q, config);
    Ok(sums.num_p / sums.den.max(config.denominator_floor))
}

/// Occurrence counts over grid cells and the ratios derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDensityTable {
    pub cell_count: usize,
    pub action_count: usize,
    pub eta_sa: BTreeMap<(usize, usize), u64>,
    pub eta_sas: BTreeMap<(usize, usize, usize), u64>,
    pub eta_sasa: BTreeMap<(usize, usize, usize, usize), u64>,
}

impl DiscreteDensityTable {
    /// Counts over `(cell(s), a, cell(s'), a')` keys.
    pub fn from_keys(keys: impl IntoIterator<Item = (usize, usize, usize, usize)>, cell_count: usize, action_count: usize) -> Self {
        let mut table = Self {
            cell_count,
            action_count,
            eta_sa: BTreeMap::new(),
            eta_sas: BTreeMap::new(),
            eta_sasa: BTreeMap::new(),
        };
        for (s, a, sn, an) in keys {
            *table.eta_sa.entry((s, a)).or_default() += 1;
            *table.eta_sas.entry((s, a, sn)).or_default() += 1;
            *table.eta_sasa.entry((s, a, sn, an)).or_default() += 1;
        }
        table
    }

    pub fn visited(&self, s: usize, a: usize) -> bool {
        self.eta_sa.contains_key(&(s, a))
    }

    pub fn t_hat(&self, s: usize, a: usize, s_next: usize) -> f64 {
        match self.eta_sa.get(&(s, a)) {
            Some(&n) => self.eta_sas.get(&(s, a, s_next)).copied().unwrap_or(0) as f64 / n as f64,
            None => 1.0 / self.cell_count as f64,
        }
    }

    pub fn p_hat(&self, s: usize, a: usize, s_next: usize, a_next: usize) -> f64 {
        match self.eta_sa.get(&(s, a)) {
            Some(&n) => self.eta_sasa.get(&(s, a, s_next, a_next)).copied().unwrap_or(0) as f64 / n as f64,
            None => 1.0 / (self.cell_count * self.action_count) as f64,
        }
    }
}

/// Counting estimates over the grid the buffer was built on (or `grid`, when
/// the buffer holds raw continuous states).
pub fn count_estimates(buffer: &TupleBuffer, grid: &GridSpec) -> DiscreteDensityTable {
    let keys = buffer
        .tuples
        .iter()
        .map(|t| (grid.discretize(&t.s), t.a, grid.discretize(&t.s_next), t.a_next));
    DiscreteDensityTable::from_keys(keys, grid.cell_count(), buffer.action_count)
}

/// `P̂` and `T̂` evaluated at every buffer tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityCache {
    pub p_hat: Vec<f64>,
    pub t_hat: Vec<f64>,
    /// Fingerprint of the buffer the values belong to.
    pub buffer_digest: u64,
}

/// FNV-1a over tuple actions and feature bits.
pub fn buffer_digest(buffer: &TupleBuffer) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(buffer.len() as u64);
    for (i, t) in buffer.tuples.iter().enumerate() {
        eat(t.a as u64);
        eat(t.a_next as u64);
        buffer.feature(i).iter().chain(buffer.next_feature(i)).for_each(|x| eat(x.to_bits()));
    }
    h
}

impl DensityCache {
    pub fn from_values(buffer: &TupleBuffer, p_hat: Vec<f64>, t_hat: Vec<f64>) -> Result<Self> {
        let cache = Self { p_hat, t_hat, buffer_digest: buffer_digest(buffer) };
        cache.check_values()?;
        cache.check_aligned(buffer)?;
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.p_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_hat.is_empty()
    }

    fn check_values(&self) -> Result<()> {
        if self.p_hat.len() != self.t_hat.len() {
            return Err(Error::Integrity("P̂ and T̂ columns differ in length".into()));
        }
        if let Some(x) = self.p_hat.iter().chain(&self.t_hat).find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::Numeric(format!("density estimate {x} is not a finite non-negative value")));
        }
        Ok(())
    }

    pub fn check_aligned(&self, buffer: &TupleBuffer) -> Result<()> {
        if self.len() != buffer.len() || self.buffer_digest != buffer_digest(buffer) {
            return Err(Error::Integrity(format!(
                "density cache ({} entries) does not belong to this buffer ({} tuples)",
                self.len(),
                buffer.len()
            )));
        }
        Ok(())
    }

    /// Multiplies every estimate by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            p_hat: self.p_hat.iter().map(|x| x * c).collect(),
            t_hat: self.t_hat.iter().map(|x| x * c).collect(),
            buffer_digest: self.buffer_digest,
        }
    }

    /// Line-delimited `{"index", "p_hat", "t_hat"}` records.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}", serde_json::json!({ "buffer_digest": format!("{:016x}", self.buffer_digest), "len": self.len() }))?;
        for i in 0..self.len() {
            writeln!(w, "{}", serde_json::json!({ "index": i, "p_hat": self.p_hat[i], "t_hat": self.t_hat[i] }))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            buffer_digest: String,
            len: usize,
        }
        #[derive(Deserialize)]
        struct Row {
            index: usize,
            p_hat: f64,
            t_hat: f64,
        }
        let parse_err = |line: usize, e: &dyn fmt::Display| Error::Parse { line, message: e.to_string() };
        let mut lines = BufReader::new(File::open(path)?).lines();
        let first = lines.next().ok_or_else(|| parse_err(1, &"empty cache file"))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(1, &e))?;
        let digest = u64::from_str_radix(&header.buffer_digest, 16).map_err(|e| parse_err(1, &e))?;
        let (mut p_hat, mut t_hat) = (Vec::with_capacity(header.len), Vec::with_capacity(header.len));
        for (i, line) in lines.enumerate() {
            let row: Row = serde_json::from_str(&line?).map_err(|e| parse_err(i + 2, &e))?;
            if row.index != i {
                return Err(parse_err(i + 2, &format!("field `index` is {} but {i} was expected", row.index)));
            }
            p_hat.push(row.p_hat);
            t_hat.push(row.t_hat);
        }
        if p_hat.len() != header.len {
            return Err(Error::Integrity(format!("cache header promises {} rows, found {}", header.len, p_hat.len())));
        }
        let cache = Self { p_hat, t_hat, buffer_digest: digest };
        cache.check_values()?;
        Ok(cache)
    }
}

/// Kernel estimates at every buffer tuple; `O(n²)` kernel evaluations,
/// each row reduced in buffer order.
pub fn precompute_densities(buffer: &TupleBuffer, config: &KernelConfig) -> Result<DensityCache> {
    config.validate()?;
    if buffer.is_empty() {
        return Err(Error::Input("cannot estimate densities from an empty buffer".into()));
    }
    let rows: Vec<(f64, f64)> = (0..buffer.len())
        .into_par_iter()
        .map(|i| {
            let sums = kernel_sums(buffer, &QueryPoint::at_tuple(buffer, i), config);
            let den = sums.den.max(config.denominator_floor);
            (sums.num_p / den, sums.num_t / den)
        })
        .collect();
    let (p_hat, t_hat) = rows.into_iter().unzip();
    DensityCache::from_values(buffer, p_hat, t_hat)
}

/// Counting estimates at every buffer tuple.
pub fn precompute_counts(buffer: &TupleBuffer, grid: &GridSpec) -> Result<DensityCache> {
    if buffer.is_empty() {
        return Err(Error::Input("cannot estimate densities from an empty buffer".into()));
    }
    let table = count_estimates(buffer, grid);
    let (p_hat, t_hat) = buffer
        .tuples
        .iter()
        .map(|t| {
            let (s, sn) = (grid.discretize(&t.s), grid.discretize(&t.s_next));
            (table.p_hat(s, t.a, sn, t.a_next), table.t_hat(s, t.a, sn))
        })
        .unzip();
    DensityCache::from_values(buffer, p_hat, t_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::{to_buffer, to_buffer_with, Trajectory};
    use approx::assert_relative_eq;

    fn one_dim_traj(id: u64, states: &[f64], actions: &[usize]) -> Trajectory {
        Trajectory {
            episode_id: id,
            steps: states.iter().zip(actions).map(|(&s, &a)| (vec![s], a)).collect(),
            terminal: false,
        }
    }

    fn cfg1(h: f64, mode: ActionDistance) -> KernelConfig {
        KernelConfig::new(h, h, h, mode, 1, 2).unwrap()
    }

    #[test]
    fn kernel_peak_and_closed_form() {
        let c = cfg1(1.0, ActionDistance::ExactMatch);
        assert_relative_eq!(kernel_value(&c, 0.0, KernelSlot::NextState), 0.398_942_280_401_432_7, epsilon = 1e-15);
        let c2 = KernelConfig::new(0.25, 0.25, 0.25, ActionDistance::ExactMatch, 2, 2).unwrap();
        assert_relative_eq!(kernel_value(&c2, 0.0, KernelSlot::Pair), 1.0 / (2.0 * PI * 0.25), epsilon = 1e-15);
        assert_relative_eq!(kernel_value(&c2, 0.0, KernelSlot::Pair), 0.636_619_772_367_581_4, epsilon = 1e-15);
    }

    #[test]
    fn kernel_monotone_decreasing() {
        let c = cfg1(0.5, ActionDistance::ExactMatch);
        let vals: Vec<f64> = (0..50).map(|i| kernel_value(&c, i as f64 * 0.1, KernelSlot::Pair)).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn one_hot_widens_dimensions() {
        let c = KernelConfig::new(0.25, 0.25, 0.25, ActionDistance::OneHot, 4, 2).unwrap();
        assert_eq!((c.m1, c.m2, c.m3), (6, 6, 4));
        let c = KernelConfig::new(0.25, 0.25, 0.25, ActionDistance::ExactMatch, 4, 2).unwrap();
        assert_eq!((c.m1, c.m2, c.m3), (4, 4, 4));
    }

    #[test]
    fn nonpositive_bandwidth_rejected() {
        assert!(matches!(KernelConfig::new(0.25, 0.0, 0.25, ActionDistance::ExactMatch, 2, 2), Err(Error::Config(_))));
        assert!(KernelConfig::new(-1.0, 0.1, 0.25, ActionDistance::ExactMatch, 2, 2).is_err());
    }

    #[test]
    fn counting_oracle() {
        // Multiset {(0,0,1,0), (0,0,1,0), (0,0,2,1)}.
        let keys = [(0, 0, 1, 0), (0, 0, 1, 0), (0, 0, 2, 1)];
        let t = DiscreteDensityTable::from_keys(keys, 225, 3);
        assert_eq!(t.t_hat(0, 0, 1), 2.0 / 3.0);
        assert_eq!(t.p_hat(0, 0, 1, 0), 2.0 / 3.0);
        assert_eq!(t.p_hat(0, 0, 2, 1), 1.0 / 3.0);
        assert_eq!(t.t_hat(0, 0, 2), 1.0 / 3.0);
        assert_eq!(t.p_hat(0, 0, 2, 0), 0.0);
        // Unvisited pair: uniform fallback.
        assert_eq!(t.t_hat(5, 1, 17), 1.0 / 225.0);
        assert_eq!(t.p_hat(5, 1, 17, 2), 1.0 / 675.0);
        let single = DiscreteDensityTable::from_keys([(3, 1, 4, 0)], 225, 3);
        assert_eq!(single.t_hat(3, 1, 4), 1.0);
    }

    #[test]
    fn single_tuple_self_query() {
        let b = to_buffer(&[one_dim_traj(0, &[0.3, 0.9], &[1, 0])], 2, false).unwrap();
        let c = cfg1(0.25, ActionDistance::ExactMatch);
        let q = QueryPoint::at_tuple(&b, 0);
        let k0 = (2.0 * PI * 0.25f64).powf(-0.5);
        assert_relative_eq!(ckde_t(&b, &q, &c), k0, epsilon = 1e-15);
        assert_relative_eq!(ckde_p(&b, &q, &c).unwrap(), k0, epsilon = 1e-15);
    }

    #[test]
    fn two_tuple_termwise() {
        // Tuples (s, a, s', a'): (0.0, 0, 0.5, 1) and (1.0, 0, 1.2, 1); h2 = h3 = h1 = 1.
        let b = to_buffer(&[one_dim_traj(0, &[0.0, 0.5], &[0, 1]), one_dim_traj(1, &[1.0, 1.2], &[0, 1])], 2, false).unwrap();
        let c = cfg1(1.0, ActionDistance::ExactMatch);
        let q = QueryPoint { s: vec![0.4], a: 0, s_next: vec![0.7], a_next: Some(1) };
        let g = |d: f64| (2.0 * PI).powf(-0.5) * (-d * d / 2.0).exp();
        let w = [g(0.4), g(0.6)];
        let expected = (g(0.2) * w[0] + g(0.5) * w[1]) / (w[0] + w[1]);
        assert_relative_eq!(ckde_t(&b, &q, &c), expected, epsilon = 1e-12);
        assert_relative_eq!(ckde_p(&b, &q, &c).unwrap(), expected, epsilon = 1e-12);
        let q0 = QueryPoint { a_next: Some(0), ..q.clone() };
        assert_eq!(ckde_p(&b, &q0, &c).unwrap(), 0.0);
        // Query action that never appears: both sums vanish, floor keeps it finite.
        let q1 = QueryPoint { a: 1, ..q };
        assert_eq!(ckde_t(&b, &q1, &c), 0.0);
    }

    #[test]
    fn far_query_is_finite() {
        let b = to_buffer(&[one_dim_traj(0, &[0.0, 0.1, 0.2], &[0, 0, 1])], 2, false).unwrap();
        let c = cfg1(0.01, ActionDistance::OneHot);
        let q = QueryPoint { s: vec![1e3], a: 0, s_next: vec![1e3], a_next: Some(0) };
        let p = ckde_p(&b, &q, &c).unwrap();
        let t = ckde_t(&b, &q, &c);
        assert!(p.is_finite() && p >= 0.0);
        assert!(t.is_finite() && t >= 0.0);
        let no_next = QueryPoint { a_next: None, ..q };
        assert!(ckde_p(&b, &no_next, &c).is_err());
    }

    #[test]
    fn exact_match_single_action_is_state_nadaraya_watson() {
        let states = [0.1, -0.4, 0.3, 0.9, 0.2, -0.1];
        let b = to_buffer(&[one_dim_traj(0, &states, &[1; 6])], 2, false).unwrap();
        let c = cfg1(0.3, ActionDistance::ExactMatch);
        let q = QueryPoint { s: vec![0.05], a: 1, s_next: vec![0.25], a_next: None };
        let k = |d: f64| gaussian_kernel_sq(0.3, 1, d * d);
        let (mut num, mut den) = (0.0, 0.0);
        for w in states.windows(2) {
            num += k(q.s_next[0] - w[1]) * k(q.s[0] - w[0]);
            den += k(q.s[0] - w[0]);
        }
        assert_relative_eq!(ckde_t(&b, &q, &c), num / den, epsilon = 1e-14);
    }

    #[test]
    fn counts_sum_to_one() {
        use crate::env::{env_spec, EnvId};
        let grid = GridSpec::uniform(&env_spec(EnvId::MountainCar), 15).unwrap();
        let e = crate::demos::ScriptedExpert::new(EnvId::MountainCar, 0.2).unwrap();
        let trajs = crate::demos::generate_dataset(EnvId::MountainCar, &e, 5, 9).unwrap();
        let b = to_buffer_with(&trajs, 3, true, Some(grid.clone())).unwrap();
        let table = count_estimates(&b, &grid);
        for (&(s, a), _) in &table.eta_sa {
            let t_sum: f64 = (0..225).map(|sn| table.t_hat(s, a, sn)).sum();
            let p_sum: f64 = (0..225).flat_map(|sn| (0..3).map(move |an| (sn, an))).map(|(sn, an)| table.p_hat(s, a, sn, an)).sum();
            assert!((t_sum - 1.0).abs() < 1e-12);
            assert!((p_sum - 1.0).abs() < 1e-12);
        }
        let cache = precompute_counts(&b, &grid).unwrap();
        assert_eq!(cache.len(), b.len());
    }

    #[test]
    fn misaligned_cache_detected() {
        let b1 = to_buffer(&[one_dim_traj(0, &[0.0, 0.5, 0.7], &[0, 1, 1])], 2, false).unwrap();
        let b2 = to_buffer(&[one_dim_traj(0, &[0.0, 0.5, 0.8], &[0, 1, 1])], 2, false).unwrap();
        let c = cfg1(0.25, ActionDistance::ExactMatch);
        let cache = precompute_densities(&b1, &c).unwrap();
        assert!(cache.check_aligned(&b1).is_ok());
        assert!(matches!(cache.check_aligned(&b2), Err(Error::Integrity(_))));
    }

    #[test]
    fn cache_file_roundtrip() {
        let b = to_buffer(&[one_dim_traj(0, &[0.0, 0.5, 0.7, 0.1], &[0, 1, 1, 0])], 2, false).unwrap();
        let cache = precompute_densities(&b, &cfg1(0.25, ActionDistance::OneHot)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        cache.save(&path).unwrap();
        let back = DensityCache::load(&path).unwrap();
        assert_eq!(back, cache);
        back.check_aligned(&b).unwrap();
    }
}
