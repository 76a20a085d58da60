//! Counter-based random numbers.
//!
//! Every draw is a pure hash of `(seed, stream, counter)`, so results are
//! bit-identical under any execution order or sharding — the particle
//! simulator relies on this for reproducibility across thread counts.

/// SplitMix64 finalizer: a bijective avalanche mix.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stateless generator keyed by a seed and a stream id (e.g. particle index).
/// Draw `i` of the stream is `value(counter = i)`.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: mix(seed ^ mix(stream)),
        }
    }

    #[inline]
    pub fn u64_at(&self, counter: u64) -> u64 {
        mix(self.key ^ mix(counter.wrapping_mul(0xd1342543de82ef95)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform_at(&self, counter: u64) -> f64 {
        (self.u64_at(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Pair of independent standard normals from counters `c` and `c+1`
    /// (Box-Muller).
    #[inline]
    pub fn normal_pair_at(&self, counter: u64) -> (f64, f64) {
        // keep u1 away from 0 so ln is finite
        let u1 = (self.u64_at(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u1 = u1.max(f64::MIN_POSITIVE);
        let u2 = self.uniform_at(counter.wrapping_add(1));
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        (r * th.cos(), r * th.sin())
    }
}

/// Sequential convenience wrapper over [`CounterRng`].
#[derive(Debug, Clone)]
pub struct SeqRng {
    rng: CounterRng,
    counter: u64,
}

impl SeqRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            rng: CounterRng::new(seed, stream),
            counter: 0,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        let v = self.rng.uniform_at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n
    }

    pub fn normal(&mut self) -> f64 {
        let (a, _) = self.rng.normal_pair_at(self.counter);
        self.counter += 2;
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_stream_separated() {
        let a = CounterRng::new(7, 0);
        let b = CounterRng::new(7, 0);
        let c = CounterRng::new(7, 1);
        assert_eq!(a.u64_at(5), b.u64_at(5));
        assert_ne!(a.u64_at(5), c.u64_at(5));
        assert_ne!(a.u64_at(5), a.u64_at(6));
    }

    #[test]
    fn uniform_in_range_with_sane_moments() {
        let rng = CounterRng::new(123, 9);
        let n = 20_000;
        let mut sum = 0.0;
        for i in 0..n {
            let u = rng.uniform_at(i);
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn normals_have_unit_variance() {
        let rng = CounterRng::new(5, 3);
        let n = 20_000u64;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for i in 0..n {
            let (a, b) = rng.normal_pair_at(2 * i);
            sum += a + b;
            sq += a * a + b * b;
        }
        let cnt = (2 * n) as f64;
        let mean = sum / cnt;
        let var = sq / cnt - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
