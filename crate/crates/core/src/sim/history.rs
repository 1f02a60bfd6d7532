use std::borrow::Cow;
use std::cell::Cell;
use std::collections::VecDeque;

use crate::anomaly::HistoryView;

/// Block layout of the flattened per-subsystem vectors in a record.
#[derive(Debug, Clone)]
pub struct Layout {
    state_off: Vec<usize>,
    state_len: Vec<usize>,
    theta_off: Vec<usize>,
    theta_len: Vec<usize>,
}

impl Layout {
    pub fn new(orders: &[usize], theta_lens: &[usize]) -> Self {
        fn offsets(lens: &[usize]) -> Vec<usize> {
            lens.iter()
                .scan(0, |acc, l| {
                    let o = *acc;
                    *acc += l;
                    Some(o)
                })
                .collect()
        }
        Self {
            state_off: offsets(orders),
            state_len: orders.to_vec(),
            theta_off: offsets(theta_lens),
            theta_len: theta_lens.to_vec(),
        }
    }

    pub fn subsystems(&self) -> usize {
        self.state_len.len()
    }

    pub fn state_width(&self) -> usize {
        self.state_len.iter().sum()
    }

    pub fn theta_width(&self) -> usize {
        self.theta_len.iter().sum()
    }

    pub fn state_range(&self, i: usize) -> std::ops::Range<usize> {
        self.state_off[i]..self.state_off[i] + self.state_len[i]
    }

    pub fn theta_range(&self, i: usize) -> std::ops::Range<usize> {
        self.theta_off[i]..self.theta_off[i] + self.theta_len[i]
    }
}

/// One grid instant. All vectors flattened per [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub step: u64,
    pub states: Vec<f64>,
    pub z: Vec<f64>,
    pub theta: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Control actually applied.
    pub applied: Vec<f64>,
    /// Control law evaluated on fresh signals; equals `applied` outside anomalies.
    pub law: Vec<f64>,
}

/// Ring of records on the uniform grid `t = step · dt`.
///
/// Lookups at grid instants return stored records verbatim; off-grid lookups
/// interpolate linearly between the two neighboring records.
#[derive(Debug)]
pub struct HistoryBuffer {
    dt: f64,
    capacity: usize,
    layout: Layout,
    records: VecDeque<HistoryRecord>,
    lookups: Cell<u64>,
}

/// Relative tolerance for treating `t / dt` as an integer.
const GRID_TOL: f64 = 1e-9;

enum Position {
    Exact(usize),
    Between(usize, f64),
}

impl HistoryBuffer {
    pub fn new(dt: f64, capacity: usize, layout: Layout) -> Self {
        let capacity = capacity.max(2);
        Self {
            dt,
            capacity,
            layout,
            records: VecDeque::with_capacity(capacity),
            lookups: Cell::new(0),
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of delayed lookups served so far.
    pub fn lookups(&self) -> u64 {
        self.lookups.get()
    }

    /// Append a record, recycling the oldest allocation once full. Steps must
    /// increase by one.
    pub fn push_with(&mut self, step: u64, fill: impl FnOnce(&mut HistoryRecord)) {
        if let Some(last) = self.records.back() {
            assert_eq!(step, last.step + 1, "history steps must be consecutive");
        }
        let mut rec = if self.records.len() == self.capacity {
            self.records.pop_front().expect("nonempty")
        } else {
            let m = self.layout.subsystems();
            HistoryRecord {
                step,
                states: vec![0.0; self.layout.state_width()],
                z: vec![0.0; self.layout.state_width()],
                theta: vec![0.0; self.layout.theta_width()],
                lambda: vec![0.0; m],
                applied: vec![0.0; m],
                law: vec![0.0; m],
            }
        };
        rec.step = step;
        fill(&mut rec);
        self.records.push_back(rec);
    }

    pub fn last_mut(&mut self) -> Option<&mut HistoryRecord> {
        self.records.back_mut()
    }

    pub fn record(&self, step: u64) -> Option<&HistoryRecord> {
        let first = self.records.front()?.step;
        let idx = step.checked_sub(first)?;
        self.records.get(usize::try_from(idx).ok()?)
    }

    fn locate(&self, t: f64) -> Option<Position> {
        let first = self.records.front()?.step as f64;
        let last = self.records.back()?.step as f64;
        let pos = t / self.dt;
        let k = pos.round();
        if (pos - k).abs() <= GRID_TOL * pos.abs().max(1.0) {
            if k < first || k > last {
                return None;
            }
            return Some(Position::Exact((k - first) as usize));
        }
        let lo = pos.floor();
        if lo < first || lo + 1.0 > last {
            return None;
        }
        Some(Position::Between((lo - first) as usize, pos - lo))
    }

    fn fetch<'a>(&'a self, t: f64, pick: impl Fn(&'a HistoryRecord) -> &'a [f64]) -> Option<Cow<'a, [f64]>> {
        self.lookups.set(self.lookups.get() + 1);
        match self.locate(t)? {
            Position::Exact(k) => Some(Cow::Borrowed(pick(&self.records[k]))),
            Position::Between(k, w) => {
                let a = pick(&self.records[k]);
                let b = pick(&self.records[k + 1]);
                Some(Cow::Owned(
                    a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect(),
                ))
            }
        }
    }

    pub fn z(&self, i: usize, t: f64) -> Option<Cow<'_, [f64]>> {
        let r = self.layout.state_range(i);
        self.fetch(t, move |rec| &rec.z[r.clone()])
    }

    /// Control law evaluated on the fresh signals of time `t`.
    pub fn law(&self, i: usize, t: f64) -> Option<f64> {
        self.fetch(t, move |rec| &rec.law[i..=i]).map(|v| v[0])
    }

    pub fn applied(&self, i: usize, t: f64) -> Option<f64> {
        self.fetch(t, move |rec| &rec.applied[i..=i]).map(|v| v[0])
    }
}

impl HistoryView for HistoryBuffer {
    fn earliest(&self) -> f64 {
        self.records
            .front()
            .map_or(f64::INFINITY, |r| r.step as f64 * self.dt)
    }

    fn state(&self, i: usize, t: f64) -> Option<Cow<'_, [f64]>> {
        let r = self.layout.state_range(i);
        self.fetch(t, move |rec| &rec.states[r.clone()])
    }

    fn estimates(&self, i: usize, t: f64) -> Option<(Cow<'_, [f64]>, f64)> {
        let r = self.layout.theta_range(i);
        let th = self.fetch(t, move |rec| &rec.theta[r.clone()])?;
        let l = self.fetch(t, move |rec| &rec.lambda[i..=i])?;
        Some((th, l[0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn buffer(cap: usize) -> HistoryBuffer {
        let mut h = HistoryBuffer::new(0.01, cap, Layout::new(&[2, 1], &[1, 1]));
        for step in 0..20u64 {
            h.push_with(step, |r| {
                let s = step as f64;
                r.states.copy_from_slice(&[s, 2.0 * s, -s]);
                r.theta.copy_from_slice(&[s, 0.0]);
                r.lambda.copy_from_slice(&[0.5 * s, 0.0]);
            });
        }
        h
    }

    #[test]
    fn ring_keeps_latest() {
        let h = buffer(5);
        assert_eq!(h.len(), 5);
        assert!(h.record(14).is_none());
        assert_eq!(h.record(15).unwrap().states[0], 15.0);
        assert!((h.earliest() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn exact_lookup_is_bitwise() {
        let h = buffer(30);
        let x = h.state(0, 0.07).unwrap();
        assert!(matches!(x, Cow::Borrowed(_)));
        assert_eq!(&*x, &[7.0, 14.0]);
        assert_eq!(&*h.state(1, 0.07).unwrap(), &[-7.0]);
        let (th, l) = h.estimates(0, 0.07).unwrap();
        assert_eq!((&*th, l), (&[7.0][..], 3.5));
        assert_eq!(h.lookups(), 4);
    }

    #[test]
    fn off_grid_interpolates() {
        let h = buffer(30);
        let x = h.state(0, 0.0725).unwrap();
        assert!((x[0] - 7.25).abs() < 1e-9);
        assert!((x[1] - 14.5).abs() < 1e-9);
        assert!(h.state(0, 0.195).is_none());
        assert!(h.state(0, -0.01).is_none());
    }
}
