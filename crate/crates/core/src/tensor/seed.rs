use super::Tensor;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Counter-based random stream. Draw `k` of a stream is a pure function of
/// its key and `k`, so results do not depend on platform or thread layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedStream {
    key: u64,
    counter: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { key: splitmix64(seed ^ 0x5eed), counter: 0 }
    }

    /// Independent stream keyed by `name`; does not consume draws from `self`.
    pub fn child(&self, name: &str) -> SeedStream {
        SeedStream { key: splitmix64(self.key ^ fnv1a(name.as_bytes())), counter: 0 }
    }

    pub fn child_index(&self, index: u64) -> SeedStream {
        SeedStream { key: splitmix64(self.key.wrapping_add(splitmix64(index ^ 0xc0ffee))), counter: 0 }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        splitmix64(self.key ^ self.counter.wrapping_mul(GOLDEN))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box–Muller (cosine branch only, one draw per pair).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform_open().ln()).ln()
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.normal()).collect()).expect("count matches")
    }

    pub fn gumbel_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.gumbel()).collect()).expect("count matches")
    }

    /// `k` distinct indices from `0..n`, in draw order (partial Fisher–Yates).
    pub fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    /// Index drawn from unnormalized non-negative `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = { let mut s = SeedStream::new(7); (0..5).map(|_| s.next_u64()).collect() };
        let b: Vec<u64> = { let mut s = SeedStream::new(7); (0..5).map(|_| s.next_u64()).collect() };
        assert_eq!(a, b);
        let root = SeedStream::new(7);
        assert_ne!(root.child("x"), root.child("y"));
        assert_eq!(root.child("x"), root.child("x"));
        assert_ne!(root.child_index(0), root.child_index(1));
    }

    #[test]
    fn normal_moments() {
        let mut s = SeedStream::new(1);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        // 3 standard errors
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn choose_is_distinct_and_in_range() {
        let mut s = SeedStream::new(3);
        let c = s.choose(10, 6);
        let mut sorted = c.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 6);
        assert!(c.iter().all(|&i| i < 10));
        assert_eq!(s.choose(3, 9).len(), 3);
    }

    #[test]
    fn below_covers_range() {
        let mut s = SeedStream::new(11);
        let mut seen = [0usize; 5];
        for _ in 0..5000 {
            seen[s.below(5)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800));
    }
}
