//! Dense storage for per-path, per-time-step vector data.

/// Values indexed by (time slot, path, component), stored slot-major so that
/// the cross-section at one time index is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTensor {
    slots: usize,
    paths: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PathTensor {
    pub fn zeros(slots: usize, paths: usize, dim: usize) -> Self {
        Self { slots, paths, dim, data: vec![0.0; slots * paths * dim] }
    }

    pub fn filled(slots: usize, paths: usize, dim: usize, value: f64) -> Self {
        Self { slots, paths, dim, data: vec![value; slots * paths * dim] }
    }

    /// Builds a tensor from per-path rows, each holding `slots * dim` values in time order.
    pub fn from_path_major(slots: usize, dim: usize, rows: &[Vec<f64>]) -> Self {
        let paths = rows.len();
        let mut out = Self::zeros(slots, paths, dim);
        for (p, row) in rows.iter().enumerate() {
            debug_assert_eq!(row.len(), slots * dim);
            for k in 0..slots {
                out.get_mut(k, p).copy_from_slice(&row[k * dim..(k + 1) * dim]);
            }
        }
        out
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn offset(&self, k: usize, p: usize) -> usize {
        debug_assert!(k < self.slots && p < self.paths);
        (k * self.paths + p) * self.dim
    }

    #[inline]
    pub fn get(&self, k: usize, p: usize) -> &[f64] {
        let o = self.offset(k, p);
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn get_mut(&mut self, k: usize, p: usize) -> &mut [f64] {
        let o = self.offset(k, p);
        &mut self.data[o..o + self.dim]
    }

    /// First component at (k, p); convenient for scalar tensors.
    #[inline]
    pub fn scalar(&self, k: usize, p: usize) -> f64 {
        self.data[self.offset(k, p)]
    }

    #[inline]
    pub fn set_scalar(&mut self, k: usize, p: usize, v: f64) {
        let o = self.offset(k, p);
        self.data[o] = v;
    }

    /// All paths at time slot `k`, path-major within the slot.
    pub fn slot(&self, k: usize) -> &[f64] {
        let w = self.paths * self.dim;
        &self.data[k * w..(k + 1) * w]
    }

    pub fn slot_mut(&mut self, k: usize) -> &mut [f64] {
        let w = self.paths * self.dim;
        &mut self.data[k * w..(k + 1) * w]
    }

    /// Component `c` of every path at slot `k`.
    pub fn component(&self, k: usize, c: usize) -> Vec<f64> {
        (0..self.paths).map(|p| self.get(k, p)[c]).collect()
    }

    /// Time series of component `c` along path `p`.
    pub fn series(&self, p: usize, c: usize) -> Vec<f64> {
        (0..self.slots).map(|k| self.get(k, p)[c]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First (slot, path) holding a non-finite value, scanning in time order.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        let pos = self.data.iter().position(|v| !v.is_finite())?;
        let cell = pos / self.dim;
        Some((cell / self.paths, cell % self.paths))
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
