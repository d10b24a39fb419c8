//! Streaming weighted occupation measures.
//!
//! [`WeightedEmpiricalMeasure`] consumes a stream of `(state, weight)` pairs
//! and maintains, without storing the stream:
//!
//! * exact weighted averages `nu_n(f) = (1/H_n) sum eta_k f(x_{k-1})` for a
//!   fixed registry of functionals, via the numerically stable recursion
//!   `nu_n = nu_{n-1} + (eta_n / H_n) (f(x) - nu_{n-1})`;
//! * a bounded reservoir of representative states for quantile and
//!   transport-distance diagnostics, using exponential-key weighted
//!   reservoir sampling (an item with weight `w` receives key `E/w`,
//!   `E ~ Exp(1)`; the reservoir keeps the smallest keys, which makes
//!   merging two reservoirs exact: keep the jointly smallest keys).
//!
//! The constant functional `1` is always registered at slot 0 and its
//! average stays exactly `1.0`, a cheap self-test of the normalisation.
//!
//! Accumulators over disjoint streams merge by mass-weighted averaging;
//! the result agrees with single-stream accumulation to ~1e-12 relative,
//! independent of the merge order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::KahanSum;

pub type Functional = Arc<dyn Fn(&[f64], Option<usize>) -> f64 + Send + Sync>;

/// Default reservoir capacity.
pub const DEFAULT_RESERVOIR_CAPACITY: usize = 100_000;

#[derive(Clone)]
struct RegisteredFunctional {
    name: String,
    func: Functional,
}

/// One retained state.
#[derive(Debug, Clone)]
pub struct ReservoirItem {
    pub x: Vec<f64>,
    pub regime: Option<usize>,
    pub weight: f64,
    /// Exponential sampling key; smaller keys win. Kept so that merges
    /// reproduce what a single reservoir over the concatenated stream
    /// would have retained.
    pub key: f64,
}

impl PartialEq for ReservoirItem {
    fn eq(&self, other: &Self) -> bool {
        self.key.total_cmp(&other.key) == Ordering::Equal
    }
}
impl Eq for ReservoirItem {}
impl PartialOrd for ReservoirItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for ReservoirItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.total_cmp(&other.key)
    }
}

#[derive(Clone)]
struct WeightedReservoir {
    capacity: usize,
    // max-heap on key: the root is the first item to evict
    heap: BinaryHeap<ReservoirItem>,
    rng: ChaCha8Rng,
}

impl WeightedReservoir {
    fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        Self {
            capacity,
            heap: BinaryHeap::with_capacity(capacity.saturating_add(1)),
            rng,
        }
    }

    fn offer(&mut self, x: &[f64], regime: Option<usize>, weight: f64) {
        if weight <= 0.0 || self.capacity == 0 {
            return;
        }
        let u: f64 = self.rng.gen();
        let key = -(1.0 - u).ln() / weight;
        if self.heap.len() == self.capacity {
            match self.heap.peek() {
                Some(worst) if key < worst.key => {
                    self.heap.pop();
                }
                _ => return,
            }
        }
        self.heap.push(ReservoirItem {
            x: x.to_vec(),
            regime,
            weight,
            key,
        });
    }

    fn absorb(&mut self, other: &WeightedReservoir) {
        for item in other.heap.iter() {
            if self.heap.len() == self.capacity {
                match self.heap.peek() {
                    Some(worst) if item.key < worst.key => {
                        self.heap.pop();
                    }
                    _ => continue,
                }
            }
            self.heap.push(item.clone());
        }
    }
}

/// Point-in-time copy of the functional averages, used for convergence
/// diagnostics along a run.
#[derive(Debug, Clone)]
pub struct MeasureSnapshot {
    /// Number of stream items consumed.
    pub n: u64,
    /// Weight mass `H_n`.
    pub mass: f64,
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl MeasureSnapshot {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// Sorted quantile view of a reservoir coordinate.
#[derive(Debug, Clone)]
pub struct QuantileTable {
    values: Vec<f64>,
    /// Cumulative weights, last entry equals the total mass.
    cum: Vec<f64>,
    total: f64,
}

impl QuantileTable {
    /// Builds a table from `(value, weight)` pairs (sorted internally).
    pub fn from_pairs(mut pairs: Vec<(f64, f64)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyReservoir {
                context: "quantile table".into(),
            });
        }
        if pairs.iter().any(|(v, w)| !v.is_finite() || !(*w >= 0.0)) {
            return Err(Error::invalid("pairs", "values must be finite and weights >= 0"));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cum = Vec::with_capacity(pairs.len());
        let mut acc = KahanSum::new();
        for (_, w) in &pairs {
            acc.add(*w);
            cum.push(acc.value());
        }
        if !(acc.value() > 0.0) {
            return Err(Error::invalid("pairs", "total weight must be > 0"));
        }
        Ok(QuantileTable {
            values: pairs.into_iter().map(|(v, _)| v).collect(),
            total: acc.value(),
            cum,
        })
    }

    /// Left-continuous inverse of the weighted empirical distribution:
    /// the smallest retained value whose cumulative weight reaches
    /// `u * total`.
    pub fn query(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let target = u * self.total;
        let idx = self.cum.partition_point(|c| *c < target);
        self.values[idx.min(self.values.len() - 1)]
    }
}

pub struct WeightedEmpiricalMeasure {
    functionals: Vec<RegisteredFunctional>,
    values: Vec<f64>,
    /// Update index at which slot first went non-finite, if ever.
    tainted: Vec<Option<u64>>,
    mass: KahanSum,
    count: u64,
    reservoir: WeightedReservoir,
}

impl WeightedEmpiricalMeasure {
    /// Fresh accumulator. `reservoir_rng` drives sampling keys and is the
    /// only source of randomness in this type; pass a stream derived from
    /// the master seed to keep runs reproducible.
    pub fn new(reservoir_capacity: usize, reservoir_rng: ChaCha8Rng) -> Self {
        let one: Functional = Arc::new(|_, _| 1.0);
        Self {
            functionals: vec![RegisteredFunctional {
                name: "one".into(),
                func: one,
            }],
            values: vec![0.0],
            tainted: vec![None],
            mass: KahanSum::new(),
            count: 0,
            reservoir: WeightedReservoir::new(reservoir_capacity, reservoir_rng),
        }
    }

    /// Registers a named functional. The registry freezes at the first
    /// update so that averages never mix functional sets.
    pub fn register(&mut self, name: impl Into<String>, func: Functional) -> Result<usize> {
        let name = name.into();
        if self.count > 0 {
            return Err(Error::invalid("name", "cannot register functionals after updates began"));
        }
        if self.functionals.iter().any(|f| f.name == name) {
            return Err(Error::invalid("name", format!("duplicate functional name `{name}`")));
        }
        self.functionals.push(RegisteredFunctional { name, func });
        self.values.push(0.0);
        self.tainted.push(None);
        Ok(self.functionals.len() - 1)
    }

    pub fn names(&self) -> Vec<String> {
        self.functionals.iter().map(|f| f.name.clone()).collect()
    }

    /// Number of updates consumed.
    pub fn count(&self) -> u64 {
        self.count
    }

    /// Total weight mass `H_n`.
    pub fn mass(&self) -> f64 {
        self.mass.value()
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.functionals
            .iter()
            .position(|f| f.name == name)
            .map(|i| self.values[i])
    }

    pub fn value_at(&self, slot: usize) -> f64 {
        self.values[slot]
    }

    pub fn tainted(&self, name: &str) -> Option<Option<u64>> {
        self.functionals
            .iter()
            .position(|f| f.name == name)
            .map(|i| self.tainted[i])
    }

    /// Feeds one `(state, weight)` pair.
    pub fn update(&mut self, x: &[f64], regime: Option<usize>, eta: f64) -> Result<()> {
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::invalid("eta", format!("weights must be finite and >= 0, got {eta}")));
        }
        self.count += 1;
        if eta > 0.0 {
            self.mass.add(eta);
            let ratio = eta / self.mass.value();
            for (i, rf) in self.functionals.iter().enumerate() {
                let v = (rf.func)(x, regime);
                if !v.is_finite() {
                    if self.tainted[i].is_none() {
                        self.tainted[i] = Some(self.count);
                    }
                    self.values[i] = v;
                } else {
                    self.values[i] += ratio * (v - self.values[i]);
                }
            }
            self.reservoir.offer(x, regime, eta);
        }
        Ok(())
    }

    /// Mass-weighted merge with an accumulator over a disjoint stream.
    /// Registries (names, in order) and reservoir capacities must agree.
    pub fn merge_from(&mut self, other: &WeightedEmpiricalMeasure) -> Result<()> {
        if self.functionals.len() != other.functionals.len()
            || self
                .functionals
                .iter()
                .zip(&other.functionals)
                .any(|(a, b)| a.name != b.name)
        {
            return Err(Error::RegistryMismatch {
                details: format!("{:?} vs {:?}", self.names(), other.names()),
            });
        }
        if self.reservoir.capacity != other.reservoir.capacity {
            return Err(Error::RegistryMismatch {
                details: format!(
                    "reservoir capacities differ: {} vs {}",
                    self.reservoir.capacity, other.reservoir.capacity
                ),
            });
        }
        let ha = self.mass.value();
        let hb = other.mass.value();
        if hb > 0.0 {
            let total = ha + hb;
            for i in 0..self.values.len() {
                if ha > 0.0 {
                    self.values[i] = (ha * self.values[i] + hb * other.values[i]) / total;
                } else {
                    self.values[i] = other.values[i];
                }
                self.tainted[i] = match (self.tainted[i], other.tainted[i]) {
                    (Some(a), _) => Some(a),
                    (None, Some(b)) => Some(self.count + b),
                    (None, None) => None,
                };
            }
            self.mass.add(hb);
        }
        self.count += other.count;
        self.reservoir.absorb(&other.reservoir);
        Ok(())
    }

    pub fn snapshot(&self) -> MeasureSnapshot {
        MeasureSnapshot {
            n: self.count,
            mass: self.mass.value(),
            names: self.names(),
            values: self.values.clone(),
        }
    }

    pub fn reservoir_len(&self) -> usize {
        self.reservoir.heap.len()
    }

    /// Retained states sorted by sampling key (deterministic given the
    /// update stream and seed).
    pub fn reservoir_items(&self) -> Vec<ReservoirItem> {
        let mut items: Vec<ReservoirItem> = self.reservoir.heap.iter().cloned().collect();
        items.sort_by(|a, b| a.key.total_cmp(&b.key));
        items
    }

    /// Weighted quantile view of one state coordinate.
    pub fn quantile_table(&self, coord: usize) -> Result<QuantileTable> {
        if self.reservoir.heap.is_empty() {
            return Err(Error::EmptyReservoir {
                context: "quantile table".into(),
            });
        }
        let mut pairs: Vec<(f64, f64)> = self
            .reservoir
            .heap
            .iter()
            .map(|item| (item.x[coord], item.weight))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cum = Vec::with_capacity(pairs.len());
        let mut acc = KahanSum::new();
        for (_, w) in &pairs {
            acc.add(*w);
            cum.push(acc.value());
        }
        Ok(QuantileTable {
            values: pairs.into_iter().map(|(v, _)| v).collect(),
            total: acc.value(),
            cum,
        })
    }

    /// Quantile-grid estimate of the 1-Wasserstein distance between the
    /// reservoir's marginal on `coord` and a reference law given by its
    /// quantile function:
    ///
    /// ```text
    /// W1 ~ (1/G) sum_{j=1..G} | Q_res(u_j) - Q_ref(u_j) |,  u_j = (j - 1/2)/G
    /// ```
    pub fn wasserstein1_vs_quantile(
        &self,
        coord: usize,
        reference_quantile: &dyn Fn(f64) -> f64,
        grid: usize,
    ) -> Result<f64> {
        if grid == 0 {
            return Err(Error::invalid("grid", "must be >= 1"));
        }
        let table = self.quantile_table(coord)?;
        let mut acc = KahanSum::new();
        for j in 1..=grid {
            let u = (j as f64 - 0.5) / grid as f64;
            acc.add((table.query(u) - reference_quantile(u)).abs());
        }
        Ok(acc.value() / grid as f64)
    }
}

impl std::fmt::Debug for WeightedEmpiricalMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WeightedEmpiricalMeasure")
            .field("count", &self.count)
            .field("mass", &self.mass.value())
            .field("functionals", &self.names())
            .field("reservoir_len", &self.reservoir.heap.len())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn measure(cap: usize, seed: u64) -> WeightedEmpiricalMeasure {
        WeightedEmpiricalMeasure::new(cap, stream_rng(seed, 0))
    }

    fn coord0() -> Functional {
        Arc::new(|x: &[f64], _| x[0])
    }

    #[test]
    fn unit_weight_average_of_integers() {
        let mut m = measure(16, 1);
        m.register("m1", coord0()).unwrap();
        for k in 1..=10_000u64 {
            m.update(&[k as f64], None, 1.0).unwrap();
        }
        assert_eq!(m.count(), 10_000);
        assert!((m.mass() - 10_000.0).abs() < 1e-9);
        assert!((m.value("m1").unwrap() - 5000.5).abs() < 1e-9);
        assert_eq!(m.value("one").unwrap(), 1.0);
    }

    #[test]
    fn recursive_matches_batch() {
        let mut rng = stream_rng(7, 1);
        let mut m = measure(8, 2);
        m.register("m1", coord0()).unwrap();
        let mut num = KahanSum::new();
        let mut den = KahanSum::new();
        for _ in 0..5_000 {
            let x: f64 = rng.gen::<f64>() * 10.0 - 5.0;
            let w: f64 = rng.gen::<f64>();
            m.update(&[x], None, w).unwrap();
            num.add(w * x);
            den.add(w);
        }
        let batch = num.value() / den.value();
        let rel = (m.value("m1").unwrap() - batch).abs() / batch.abs().max(1.0);
        assert!(rel < 1e-12, "rel = {rel:e}");
    }

    #[test]
    fn zero_weight_updates_change_nothing() {
        let mut m = measure(8, 3);
        m.register("m1", coord0()).unwrap();
        m.update(&[2.0], None, 1.0).unwrap();
        let before = m.value("m1").unwrap();
        m.update(&[1e9], None, 0.0).unwrap();
        assert_eq!(m.value("m1").unwrap(), before);
        assert_eq!(m.count(), 2);
        assert!(m.update(&[0.0], None, -1.0).is_err());
        assert!(m.update(&[0.0], None, f64::NAN).is_err());
    }

    #[test]
    fn single_update_is_a_point_mass() {
        let mut m = measure(8, 4);
        m.register("m1", coord0()).unwrap();
        m.update(&[3.25], None, 0.7).unwrap();
        assert_eq!(m.value("m1").unwrap(), 3.25);
        assert_eq!(m.value("one").unwrap(), 1.0);
    }

    #[test]
    fn nonfinite_functional_tainted_without_stopping_others() {
        let mut m = measure(8, 5);
        m.register("inv", Arc::new(|x: &[f64], _| 1.0 / x[0])).unwrap();
        m.register("m1", coord0()).unwrap();
        m.update(&[1.0], None, 1.0).unwrap();
        m.update(&[0.0], None, 1.0).unwrap();
        m.update(&[2.0], None, 1.0).unwrap();
        assert_eq!(m.tainted("inv").unwrap(), Some(2));
        assert!(!m.value("inv").unwrap().is_finite());
        assert_eq!(m.tainted("m1").unwrap(), None);
        assert!((m.value("m1").unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn registration_after_updates_rejected() {
        let mut m = measure(8, 6);
        m.update(&[0.0], None, 1.0).unwrap();
        assert!(m.register("late", coord0()).is_err());
    }

    #[test]
    fn merge_matches_single_stream() {
        let mut rng = stream_rng(11, 2);
        let data: Vec<(f64, f64)> = (0..4_000)
            .map(|_| (rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<f64>() + 0.01))
            .collect();
        let mut whole = measure(64, 7);
        whole.register("m1", coord0()).unwrap();
        for (x, w) in &data {
            whole.update(&[*x], None, *w).unwrap();
        }
        let mut left = measure(64, 8);
        left.register("m1", coord0()).unwrap();
        let mut right = measure(64, 9);
        right.register("m1", coord0()).unwrap();
        for (i, (x, w)) in data.iter().enumerate() {
            let half = if i < 2_000 { &mut left } else { &mut right };
            half.update(&[*x], None, *w).unwrap();
        }
        left.merge_from(&right).unwrap();
        let rel = (left.value("m1").unwrap() - whole.value("m1").unwrap()).abs()
            / whole.value("m1").unwrap().abs().max(1.0);
        assert!(rel < 1e-12, "rel = {rel:e}");
        assert!((left.mass() - whole.mass()).abs() / whole.mass() < 1e-12);
        assert_eq!(left.count(), whole.count());
        assert_eq!(left.value("one").unwrap(), 1.0);
    }

    #[test]
    fn merge_commutes_and_associates() {
        let make = |seed: u64, lo: i32| {
            let mut m = measure(32, seed);
            m.register("m1", coord0()).unwrap();
            for k in 0..500 {
                m.update(&[(lo + k) as f64 * 0.01], None, 0.5 + (k % 7) as f64).unwrap();
            }
            m
        };
        let (a, b, c) = (make(20, 0), make(21, 300), make(22, 900));

        let mut ab = measure(32, 20);
        ab.register("m1", coord0()).unwrap();
        ab.merge_from(&a).unwrap();
        ab.merge_from(&b).unwrap();
        let mut ba = measure(32, 21);
        ba.register("m1", coord0()).unwrap();
        ba.merge_from(&b).unwrap();
        ba.merge_from(&a).unwrap();
        let d = (ab.value("m1").unwrap() - ba.value("m1").unwrap()).abs();
        assert!(d < 1e-12, "commutativity defect {d:e}");

        let mut ab_c = ab;
        ab_c.merge_from(&c).unwrap();
        let mut bc = measure(32, 23);
        bc.register("m1", coord0()).unwrap();
        bc.merge_from(&b).unwrap();
        bc.merge_from(&c).unwrap();
        let mut a_bc = measure(32, 24);
        a_bc.register("m1", coord0()).unwrap();
        a_bc.merge_from(&a).unwrap();
        a_bc.merge_from(&bc).unwrap();
        let d = (ab_c.value("m1").unwrap() - a_bc.value("m1").unwrap()).abs();
        assert!(d < 1e-12, "associativity defect {d:e}");
    }

    #[test]
    fn merge_rejects_mismatched_registries() {
        let mut a = measure(8, 30);
        a.register("m1", coord0()).unwrap();
        let mut b = measure(8, 31);
        b.register("m2", Arc::new(|x: &[f64], _| x[0] * x[0])).unwrap();
        assert!(a.merge_from(&b).is_err());
    }

    #[test]
    fn reservoir_keeps_everything_below_capacity() {
        let mut m = measure(1000, 40);
        for k in 0..500 {
            m.update(&[k as f64], None, 1.0).unwrap();
        }
        assert_eq!(m.reservoir_len(), 500);
        let t = m.quantile_table(0).unwrap();
        // left-continuous inverse of a uniform atom set
        assert_eq!(t.query(0.0), 0.0);
        assert_eq!(t.query(1.0), 499.0);
        assert_eq!(t.query(0.5), 249.0);
    }

    #[test]
    fn reservoir_respects_weights() {
        // two atoms with 9:1 weights: the median must be the heavy atom
        let mut m = measure(10_000, 41);
        for k in 0..10_000 {
            let (x, w) = if k % 2 == 0 { (0.0, 9.0) } else { (1.0, 1.0) };
            m.update(&[x], None, w).unwrap();
        }
        let t = m.quantile_table(0).unwrap();
        assert_eq!(t.query(0.5), 0.0);
        assert_eq!(t.query(0.95), 1.0);
    }

    #[test]
    fn reservoir_subsamples_proportionally_to_weight() {
        // stream of 0s with weight 1 and 1s with weight 3, capacity far
        // below the stream length: retained fraction of 1s ~ 3/4.
        let mut m = measure(2_000, 42);
        for k in 0..40_000 {
            let (x, w) = if k % 2 == 0 { (0.0, 1.0) } else { (1.0, 3.0) };
            m.update(&[x], None, w).unwrap();
        }
        assert_eq!(m.reservoir_len(), 2_000);
        let ones: usize = m.reservoir_items().iter().filter(|it| it.x[0] == 1.0).count();
        let frac = ones as f64 / 2_000.0;
        assert!((frac - 0.75).abs() < 0.05, "frac = {frac}");
    }

    #[test]
    fn wasserstein_point_masses() {
        let mut m = measure(8, 43);
        m.update(&[0.0], None, 1.0).unwrap();
        let w = m.wasserstein1_vs_quantile(0, &|_| 0.0, 100).unwrap();
        assert_eq!(w, 0.0);
        let w = m.wasserstein1_vs_quantile(0, &|_| 1.0, 100).unwrap();
        assert_eq!(w, 1.0);
    }

    #[test]
    fn wasserstein_translation_distance() {
        // atoms 0..n-1 uniform vs the same atoms shifted by c: W1 = c
        let mut a = measure(4_000, 44);
        for k in 0..2_000 {
            a.update(&[k as f64 / 2_000.0], None, 1.0).unwrap();
        }
        let shift = 0.35;
        let b_table = {
            let mut b = measure(4_000, 45);
            for k in 0..2_000 {
                b.update(&[k as f64 / 2_000.0 + shift], None, 1.0).unwrap();
            }
            b.quantile_table(0).unwrap()
        };
        let w = a
            .wasserstein1_vs_quantile(0, &|u| b_table.query(u), 1_000)
            .unwrap();
        assert!((w - shift).abs() < 1e-9, "w = {w}");
    }

    #[test]
    fn empty_reservoir_errors() {
        let m = measure(8, 46);
        assert!(m.quantile_table(0).is_err());
        assert!(m.wasserstein1_vs_quantile(0, &|_| 0.0, 10).is_err());
    }
}
