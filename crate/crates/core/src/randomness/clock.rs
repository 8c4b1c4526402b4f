use super::RngStream;

/// Jump times of a Poisson process with intensity `1/ε`, up to a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Clock {
    eps: f64,
    t_max: f64,
    jump_times: Vec<f64>,
}

impl Clock {
    /// Times `S_n = ε (T_1 + … + T_n)` for all `S_n ≤ t_max`.
    pub fn build(eps: f64, t_max: f64, stream: &mut RngStream) -> Self {
        assert!(eps > 0.0, "clock step must be positive");
        let mut jump_times = Vec::new();
        if t_max > 0.0 {
            jump_times.reserve((t_max / eps * 1.1) as usize + 8);
            let mut t = 0.0;
            loop {
                t += eps * stream.exponential();
                if t > t_max {
                    break;
                }
                // Exp(1) can return exactly 0; keep times strictly increasing.
                if jump_times.last().is_some_and(|&last| t <= last) {
                    continue;
                }
                jump_times.push(t);
            }
        }
        Self {
            eps,
            t_max,
            jump_times,
        }
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn horizon(&self) -> f64 {
        self.t_max
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn is_empty(&self) -> bool {
        self.jump_times.is_empty()
    }

    /// `N_t = max{n : S_n ≤ t}` (right-continuous).
    pub fn count(&self, t: f64) -> usize {
        self.jump_times.partition_point(|&s| s <= t)
    }
}

/// Event budget `⌈(e−1)t/ε⌉ + n_slack`; exceeding it has probability at most
/// `e^{-n_slack}`.
pub fn required_iterations(eps: f64, t: f64, n_slack: u64) -> u64 {
    assert!(eps > 0.0, "step must be positive");
    let base = (std::f64::consts::E - 1.0) * t / eps;
    base.ceil().max(0.0) as u64 + n_slack
}
