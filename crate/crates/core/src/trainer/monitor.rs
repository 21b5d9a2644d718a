use serde::Serialize;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Improving,
    Converged,
    Diverging,
}

/// Sliding-window view of the per-cycle mean reward.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceMonitor {
    window: usize,
    slope_tol: f64,
    var_tol: f64,
    ratio: f64,
    patience: usize,
    history: Vec<f64>,
    running_max: f64,
    below: usize,
}

/// Guard trip: the reward stayed under `ratio · running_max` too long.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceTrip {
    pub cycle: usize,
    pub reward: f64,
    pub running_max: f64,
}

impl ConvergenceMonitor {
    pub fn new(window: usize, slope_tol: f64, var_tol: f64, ratio: f64, patience: usize) -> Result<Self, TrainError> {
        if window < 10 {
            return Err(TrainError::Config("monitor window must cover at least 10 cycles".into()));
        }
        Ok(Self {
            window,
            slope_tol,
            var_tol,
            ratio,
            patience,
            history: Vec::new(),
            running_max: f64::NEG_INFINITY,
            below: 0,
        })
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn running_max(&self) -> f64 {
        self.running_max
    }

    /// Records one cycle; reports a guard trip once the reward has been below
    /// the threshold for `patience` consecutive cycles.
    pub fn push(&mut self, reward: f64) -> Option<DivergenceTrip> {
        self.history.push(reward);
        self.running_max = self.running_max.max(reward);
        if reward < self.ratio * self.running_max {
            self.below += 1;
        } else {
            self.below = 0;
        }
        (self.below >= self.patience).then(|| DivergenceTrip {
            cycle: self.history.len() - 1,
            reward,
            running_max: self.running_max,
        })
    }

    /// Least-squares slope and variance of the last `window` rewards.
    pub fn window_stats(&self) -> Option<(f64, f64, f64)> {
        let n = self.window;
        if self.history.len() < n {
            return None;
        }
        let w = &self.history[self.history.len() - n..];
        let mean = w.iter().sum::<f64>() / n as f64;
        let tbar = (n - 1) as f64 / 2.0;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (t, &y) in w.iter().enumerate() {
            let dt = t as f64 - tbar;
            sxy += dt * (y - mean);
            sxx += dt * dt;
        }
        let var = w.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n as f64;
        Some((mean, sxy / sxx, var))
    }
}

/// Diverging when the window mean sits below `ratio` of the running maximum
/// or the reward trends down; converged when both the slope and the variance
/// are within tolerance; improving otherwise.
pub fn convergence_check(monitor: &ConvergenceMonitor) -> Result<Verdict, TrainError> {
    let (mean, slope, var) = monitor.window_stats().ok_or(TrainError::TooFewCycles {
        have: monitor.history.len(),
        need: monitor.window,
    })?;
    if mean < monitor.ratio * monitor.running_max || slope < -monitor.slope_tol && var >= monitor.var_tol {
        return Ok(Verdict::Diverging);
    }
    if slope.abs() < monitor.slope_tol && var < monitor.var_tol {
        return Ok(Verdict::Converged);
    }
    Ok(Verdict::Improving)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn monitor() -> ConvergenceMonitor {
        ConvergenceMonitor::new(10, 1e-3, 1e-4, 0.5, 20).unwrap()
    }

    #[test]
    fn constant_sequence_converges() {
        let mut m = monitor();
        for _ in 0..12 {
            m.push(0.7);
        }
        assert_eq!(convergence_check(&m).unwrap(), Verdict::Converged);
    }

    #[test]
    fn ramp_is_improving() {
        let mut m = monitor();
        for i in 0..15 {
            m.push(0.1 + 0.05 * i as f64);
        }
        assert_eq!(convergence_check(&m).unwrap(), Verdict::Improving);
    }

    #[test]
    fn sixty_percent_drop_is_diverging() {
        let mut m = monitor();
        m.push(0.9);
        for _ in 0..10 {
            m.push(0.36);
        }
        assert_eq!(convergence_check(&m).unwrap(), Verdict::Diverging);
    }

    #[test]
    fn short_history_has_no_verdict() {
        let mut m = monitor();
        for _ in 0..9 {
            m.push(0.5);
        }
        assert!(matches!(convergence_check(&m), Err(TrainError::TooFewCycles { have: 9, need: 10 })));
    }

    #[test]
    fn window_below_ten_is_rejected() {
        assert!(ConvergenceMonitor::new(5, 1e-3, 1e-4, 0.5, 20).is_err());
    }

    #[test]
    fn guard_trips_after_patience() {
        let mut m = monitor();
        m.push(1.0);
        for i in 0..19 {
            assert!(m.push(0.4).is_none(), "cycle {i}");
        }
        let trip = m.push(0.4).unwrap();
        assert_eq!(trip.cycle, 20);
        assert_eq!(trip.running_max, 1.0);
        // recovery resets the count
        m.push(0.9);
        assert!(m.push(0.4).is_none());
    }
}
