/// Binary indexed tree over non-negative weights for weighted sampling with updates.
pub(crate) struct Fenwick {
    tree: Vec<f64>,
    weights: Vec<f64>,
}

impl Fenwick {
    pub(crate) fn new(weights: &[f64]) -> Fenwick {
        let mut f = Fenwick {
            tree: vec![0.0; weights.len() + 1],
            weights: vec![0.0; weights.len()],
        };
        for (i, &w) in weights.iter().enumerate() {
            f.set(i, w);
        }
        f
    }

    pub(crate) fn set(&mut self, i: usize, w: f64) {
        let delta = w - self.weights[i];
        self.weights[i] = w;
        let mut j = i + 1;
        while j < self.tree.len() {
            self.tree[j] += delta;
            j += j & j.wrapping_neg();
        }
    }

    pub(crate) fn total(&self) -> f64 {
        let mut s = 0.0;
        let mut j = self.weights.len();
        while j > 0 {
            s += self.tree[j];
            j -= j & j.wrapping_neg();
        }
        s
    }

    /// Smallest index whose prefix sum exceeds `u`.
    pub(crate) fn find(&self, mut u: f64) -> usize {
        let n = self.weights.len();
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= u {
                u -= self.tree[next];
                pos = next;
            }
            step >>= 1;
        }
        // Guards against rounding landing on a zero-weight tail entry.
        let mut i = pos.min(n - 1);
        while self.weights[i] <= 0.0 && i > 0 {
            i -= 1;
        }
        i
    }
}
