//! Central finite-difference checks of tape gradients.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::NlTsc;
use super::tape::Tape;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over the probed
    /// entries and one random whole-group direction, as vector norms.
    pub rel_error: f64,
    pub probes: usize,
    /// Probes dropped because a ReLU switched inside the difference interval.
    pub skipped: usize,
}

/// Loss `sum(output ⊙ weights)` and its relu pattern.
fn eval(model: &NlTsc, x: &Array2<f64>, weights: &Array2<f64>) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new(model.params());
    let out = model.forward_on(&mut tape, x.clone())?;
    let loss = (&tape.value(out) * weights).sum();
    Ok((loss, tape.relu_pattern()))
}

/// Compares the tape gradient of `sum(output ⊙ weights)` with central
/// differences of step `h`: up to `probes` random entries per parameter
/// group plus one random direction over the whole group.
pub fn check_gradients(
    model: &NlTsc,
    x: &Array2<f64>,
    weights: &Array2<f64>,
    h: f64,
    probes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GroupCheck>> {
    let mut tape = Tape::new(model.params());
    let out = model.forward_on(&mut tape, x.clone())?;
    let grads = tape.backward(out, weights.clone())?;
    drop(tape);

    let mut work = model.clone();
    let mut report = Vec::new();
    for (p, g) in grads.iter().enumerate() {
        let name = model.params().names[p].clone();
        let len = g.len();
        let mut entries: Vec<usize> = if len <= probes {
            (0..len).collect()
        } else {
            (0..probes).map(|_| rng.random_range(0..len)).collect()
        };
        entries.sort_unstable();
        entries.dedup();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut skipped = 0;
        let base = model.params().values[p].clone();
        let mut directions: Vec<Array2<f64>> = entries
            .iter()
            .map(|&k| {
                let mut d = Array2::zeros(base.raw_dim());
                d.as_slice_mut().expect("standard layout")[k] = 1.0;
                d
            })
            .collect();
        directions.push(Array2::from_shape_fn(base.raw_dim(), |_| rng.random_range(-1.0..1.0)));
        for dir in &directions {
            work.params_mut().values[p] = &base + &(dir * h);
            let (plus, pat_plus) = eval(&work, x, weights)?;
            work.params_mut().values[p] = &base - &(dir * h);
            let (minus, pat_minus) = eval(&work, x, weights)?;
            if pat_plus != pat_minus {
                skipped += 1;
                continue;
            }
            numeric.push((plus - minus) / (2.0 * h));
            analytic.push((g * dir).sum());
        }
        work.params_mut().values[p] = base;
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        report.push(GroupCheck {
            name,
            rel_error: if scale == 0.0 { diff } else { diff / scale },
            probes: directions.len(),
            skipped,
        });
    }
    Ok(report)
}
