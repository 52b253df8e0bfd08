//! Clipped surrogate and value regression losses with their gradients
//! with respect to the network outputs.

use ndarray::{Array2, ArrayView2};

/// `(1 + eps) * a` for `a >= 0`, else `(1 - eps) * a`.
pub fn clip_advantage(a: f64, eps: f64) -> f64 {
    if a >= 0.0 {
        (1.0 + eps) * a
    } else {
        (1.0 - eps) * a
    }
}

pub fn log_softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PolicyLossStats {
    /// Negated mean surrogate minus the entropy bonus.
    pub loss: f64,
    /// Share of samples whose surrogate is the clipped branch.
    pub clip_frac: f64,
    pub entropy: f64,
    /// Mean of `old_logp - logp`.
    pub approx_kl: f64,
}

/// Loss `-mean(min(ratio * A, B_eps(A))) - c * mean(entropy)` over rows and
/// its gradient with respect to `logits`.
pub fn ppo_policy_loss(
    logits: ArrayView2<'_, f64>,
    actions: &[usize],
    old_logp: &[f64],
    advantages: &[f64],
    eps: f64,
    entropy_coef: f64,
) -> (PolicyLossStats, Array2<f64>) {
    let rows = logits.nrows();
    let logp = log_softmax_rows(logits);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut stats = PolicyLossStats::default();
    let inv = 1.0 / rows as f64;
    for r in 0..rows {
        let lp = logp.row(r);
        let a = actions[r];
        let ratio = (lp[a] - old_logp[r]).exp();
        let adv = advantages[r];
        let unclipped = ratio * adv;
        let clipped = clip_advantage(adv, eps);
        let entropy: f64 = -lp.iter().map(|&l| l.exp() * l).sum::<f64>();
        stats.entropy += entropy * inv;
        stats.approx_kl += (old_logp[r] - lp[a]) * inv;
        let mut g = grad.row_mut(r);
        if unclipped <= clipped {
            stats.loss -= unclipped * inv;
            // d(ratio)/d(logit_k) = ratio * (1[k = a] - p_k)
            for (k, gk) in g.iter_mut().enumerate() {
                let ind = if k == a { 1.0 } else { 0.0 };
                *gk -= inv * adv * ratio * (ind - lp[k].exp());
            }
        } else {
            stats.loss -= clipped * inv;
            stats.clip_frac += inv;
        }
        if entropy_coef != 0.0 {
            stats.loss -= entropy_coef * entropy * inv;
            // dH/d(logit_k) = -p_k (log p_k + H)
            for (k, gk) in g.iter_mut().enumerate() {
                let p = lp[k].exp();
                *gk += entropy_coef * inv * p * (lp[k] + entropy);
            }
        }
    }
    (stats, grad)
}

/// `mean((v - target)^2)` over rows of a one-column output, and its gradient.
pub fn value_loss(values: ArrayView2<'_, f64>, targets: &[f64]) -> (f64, Array2<f64>) {
    let rows = values.nrows();
    let inv = 1.0 / rows as f64;
    let mut grad = Array2::zeros(values.raw_dim());
    let mut loss = 0.0;
    for r in 0..rows {
        let e = values[[r, 0]] - targets[r];
        loss += e * e * inv;
        grad[[r, 0]] = 2.0 * e * inv;
    }
    (loss, grad)
}
