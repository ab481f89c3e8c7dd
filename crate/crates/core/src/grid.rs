use serde::{Deserialize, Serialize};

/// Uniform master-time grid: tick `k` sits at `t_start_us + k * 1e6 / rate_hz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid {
    pub t_start_us: i64,
    pub rate_hz: f64,
    pub count: usize,
}

impl UniformGrid {
    pub fn new(t_start_us: i64, rate_hz: f64, count: usize) -> Option<Self> {
        (rate_hz > 0.0 && rate_hz.is_finite()).then_some(Self { t_start_us, rate_hz, count })
    }

    /// Grid covering `[0, duration_s]` inclusive of both ends where they fall on a tick.
    pub fn covering(duration_s: f64, rate_hz: f64) -> Self {
        let count = (duration_s * rate_hz + 1e-9).floor() as usize + 1;
        Self { t_start_us: 0, rate_hz, count }
    }

    pub fn period_us(&self) -> f64 {
        1e6 / self.rate_hz
    }

    pub fn tick_us(&self, k: usize) -> f64 {
        self.t_start_us as f64 + k as f64 * 1e6 / self.rate_hz
    }

    pub fn tick_s(&self, k: usize) -> f64 {
        self.tick_us(k) * 1e-6
    }

    /// Tick time rounded to the integer microsecond used on the wire.
    pub fn tick_us_int(&self, k: usize) -> i64 {
        self.tick_us(k).round() as i64
    }

    pub fn ticks_us(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).map(move |k| self.tick_us(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covering_grid_counts() {
        let g = UniformGrid::covering(140.0, 800.0);
        assert_eq!(g.count, 112_001);
        assert_eq!(g.tick_us_int(g.count - 1), 140_000_000);
        assert_eq!(g.tick_us(1), 1250.0);
        assert!(UniformGrid::new(0, 0.0, 3).is_none());
    }
}
