/// Advantages of one reward stream with terminal value 0:
/// `delta_d = r_d + gamma V_{d+1} - V_d`, `A_d = delta_d + gamma lambda A_{d+1}`.
pub fn gae_stream(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for d in (0..n).rev() {
        let next_v = if d + 1 < n { values[d + 1] } else { 0.0 };
        let delta = rewards[d] + gamma * next_v - values[d];
        next_adv = delta + gamma * lambda * next_adv;
        adv[d] = next_adv;
    }
    adv
}

/// Advantages and returns `A + V` for an episode stored decision-major
/// (`index = d * n + i`), one stream per intersection.
pub fn compute_gae(rewards: &[f64], values: &[f64], n: usize, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let decisions = rewards.len() / n;
    let mut adv = vec![0.0; rewards.len()];
    for i in 0..n {
        let r: Vec<f64> = (0..decisions).map(|d| rewards[d * n + i]).collect();
        let v: Vec<f64> = (0..decisions).map(|d| values[d * n + i]).collect();
        for (d, a) in gae_stream(&r, &v, gamma, lambda).into_iter().enumerate() {
            adv[d * n + i] = a;
        }
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Discounted reward-to-go with terminal value 0.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for d in (0..rewards.len()).rev() {
        acc = rewards[d] + gamma * acc;
        out[d] = acc;
    }
    out
}

/// Shifts and scales to mean 0, std 1 (population); leaves a constant batch centred.
pub fn normalize(xs: &mut [f64]) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in xs.iter_mut() {
        *x = if std > 1e-12 { (*x - mean) / std } else { *x - mean };
    }
}
