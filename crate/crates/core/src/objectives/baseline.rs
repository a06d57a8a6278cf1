use serde::{Deserialize, Serialize};

/// Running means of logged rewards and of estimated sample rewards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub logged_mean: f64,
    pub logged_count: u64,
    pub estimated_mean: f64,
    pub estimated_count: u64,
}

fn push(mean: f64, count: u64, value: f64) -> (f64, u64) {
    let count = count + 1;
    (mean + (value - mean) / count as f64, count)
}

impl BaselineState {
    /// Starts the logged-reward mean at `mean` as if one reward had been seen.
    pub fn with_logged_mean(mean: f64) -> Self {
        BaselineState {
            logged_mean: mean,
            logged_count: 1,
            ..Default::default()
        }
    }

    pub fn update_logged(&mut self, reward: f64) {
        (self.logged_mean, self.logged_count) = push(self.logged_mean, self.logged_count, reward);
    }

    pub fn update_estimated(&mut self, reward: f64) {
        (self.estimated_mean, self.estimated_count) =
            push(self.estimated_mean, self.estimated_count, reward);
    }
}

/// Returns the state after folding one logged reward into the running mean.
pub fn update_baseline(mut state: BaselineState, reward: f64) -> BaselineState {
    state.update_logged(reward);
    state
}
