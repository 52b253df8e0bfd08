//! The non-local policy/value network.
//!
//! Per intersection row: an embedding layer, two rounds of intersection
//! mixing each followed by a residual two-layer block, a separate two-layer
//! local branch on the raw input, and a final layer over the concatenation.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tape::{softmax_rows, NodeId, ParamSet, Tape};
use crate::error::{Result, TscError};
use crate::features::AUGMENTED_DIM;
use crate::network::{IntersectionId, RoadNetwork};

pub const HIDDEN: usize = 64;
pub const MIX_ROUNDS: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MixingMode {
    /// Trainable `W = W_a · W_b`.
    #[default]
    Learned,
    /// Trainable, row-wise softmax of `W_a · W_b`.
    LearnedSoftmax,
    /// Constant averaging over intersections within `hops` grid steps.
    FixedHop { hops: usize },
    /// No mixing; each intersection sees only its own input.
    Disabled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Policy,
    Value,
}

impl Head {
    pub fn out_dim(self) -> usize {
        match self {
            Head::Policy => crate::network::PHASES_PER_INTERSECTION,
            Head::Value => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_intersections: usize,
    /// Inner dimension `M` of the factorized mixing weights; `None` means `n_intersections`.
    pub rank: Option<usize>,
    pub input_dim: usize,
    pub hidden: usize,
    pub mixing: MixingMode,
}

impl NetConfig {
    pub fn new(n_intersections: usize) -> Self {
        NetConfig {
            n_intersections,
            rank: None,
            input_dim: AUGMENTED_DIM,
            hidden: HIDDEN,
            mixing: MixingMode::Learned,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank.unwrap_or(self.n_intersections)
    }

    fn validate(&self) -> Result<()> {
        if self.n_intersections == 0 || self.rank() == 0 || self.input_dim == 0 || self.hidden == 0 {
            return Err(TscError::invalid(format!("degenerate network configuration {self:?}")));
        }
        if let MixingMode::FixedHop { hops } = self.mixing {
            if !(1..=2).contains(&hops) {
                return Err(TscError::invalid(format!("fixed mixing supports 1 or 2 hops, got {hops}")));
            }
        }
        Ok(())
    }
}

/// Row `i` averages intersection `i` and every intersection within `hops`
/// grid steps of it.
pub fn fixed_hop_weights(net: &RoadNetwork, hops: usize) -> Result<Array2<f64>> {
    if !(1..=2).contains(&hops) {
        return Err(TscError::invalid(format!("fixed mixing supports 1 or 2 hops, got {hops}")));
    }
    let n = net.num_intersections();
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        let near: Vec<usize> = (0..n)
            .filter(|&j| net.hops(IntersectionId(i), IntersectionId(j)) <= hops)
            .collect();
        for &j in &near {
            w[[i, j]] = 1.0 / near.len() as f64;
        }
    }
    Ok(w)
}

/// Orthogonal rows or columns (whichever are fewer) scaled by `gain`.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (long, short) = (rows.max(cols), rows.min(cols));
    // Modified Gram-Schmidt on `short` Gaussian vectors of length `long`.
    let mut q = Array2::<f64>::zeros((short, long));
    for k in 0..short {
        loop {
            let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
            for j in 0..k {
                let dot: f64 = v.iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(q.row(j)) {
                    *a -= dot * b;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for (dst, a) in q.row_mut(k).iter_mut().zip(&v) {
                    *dst = a / norm;
                }
                break;
            }
        }
    }
    let q = if rows <= cols { q } else { q.reversed_axes() };
    q * gain
}

/// Parameter indices of one linear layer.
#[derive(Clone, Copy, Debug)]
struct LinearIdx {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct RoundIdx {
    wa: Option<usize>,
    wb: Option<usize>,
    process: [LinearIdx; 2],
}

#[derive(Clone, Debug)]
struct Layout {
    embed: LinearIdx,
    rounds: Vec<RoundIdx>,
    local: [LinearIdx; 2],
    output: LinearIdx,
}

/// Policy or value network over all intersections of one grid.
#[derive(Clone, Debug)]
pub struct NlTsc {
    config: NetConfig,
    head: Head,
    params: ParamSet,
    layout: Layout,
    fixed_w: Option<Array2<f64>>,
}

fn add_linear(params: &mut ParamSet, name: &str, inp: usize, out: usize, gain: f64, rng: &mut ChaCha8Rng) -> LinearIdx {
    LinearIdx {
        w: params.push(format!("{name}.weight"), orthogonal(out, inp, gain, rng)),
        b: params.push(format!("{name}.bias"), Array2::zeros((1, out))),
    }
}

impl NlTsc {
    /// Fresh parameters. `net` is only read for fixed-hop mixing.
    pub fn new(config: NetConfig, head: Head, net: Option<&RoadNetwork>, seed: u64) -> Result<NlTsc> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let (f, h, n, m) = (config.input_dim, config.hidden, config.n_intersections, config.rank());
        let gain = 2f64.sqrt();
        let embed = add_linear(&mut params, "embed", f, h, gain, &mut rng);
        let trainable = matches!(config.mixing, MixingMode::Learned | MixingMode::LearnedSoftmax);
        let mut rounds = Vec::new();
        for r in 0..MIX_ROUNDS {
            let (wa, wb) = if trainable {
                let wa = params.push(format!("mix{r}.wa"), Array2::zeros((n, m)));
                let wb = params.push(format!("mix{r}.wb"), orthogonal(m, n, 1.0, &mut rng));
                (Some(wa), Some(wb))
            } else {
                (None, None)
            };
            let process = [
                add_linear(&mut params, &format!("process{r}.0"), h, h, gain, &mut rng),
                add_linear(&mut params, &format!("process{r}.1"), h, h, gain, &mut rng),
            ];
            rounds.push(RoundIdx { wa, wb, process });
        }
        let local = [
            add_linear(&mut params, "local.0", f, h, gain, &mut rng),
            add_linear(&mut params, "local.1", h, h, gain, &mut rng),
        ];
        let out_gain = match head {
            Head::Policy => 0.01,
            Head::Value => 1.0,
        };
        let output = add_linear(&mut params, "output", 2 * h, head.out_dim(), out_gain, &mut rng);
        let fixed_w = match config.mixing {
            MixingMode::FixedHop { hops } => {
                let net = net.ok_or_else(|| TscError::invalid("fixed-hop mixing needs the road network"))?;
                if net.num_intersections() != n {
                    return Err(TscError::invalid(format!(
                        "network has {} intersections, configuration expects {n}",
                        net.num_intersections()
                    )));
                }
                Some(fixed_hop_weights(net, hops)?)
            }
            _ => None,
        };
        Ok(NlTsc {
            config,
            head,
            params,
            layout: Layout {
                embed,
                rounds,
                local,
                output,
            },
            fixed_w,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces all parameter values; shapes and names must match.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        if params.names != self.params.names
            || params.values.iter().zip(&self.params.values).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(TscError::Checkpoint(format!(
                "parameter layout differs:\n{}",
                super::checkpoint::manifest_diff(&self.params, &params)
            )));
        }
        self.params = params;
        Ok(())
    }

    fn lin(&self, tape: &mut Tape<'_>, x: NodeId, l: LinearIdx) -> Result<NodeId> {
        let (w, b) = (tape.param(l.w), tape.param(l.b));
        tape.linear(x, w, b)
    }

    fn mixing_node(&self, tape: &mut Tape<'_>, round: &RoundIdx) -> Result<Option<NodeId>> {
        match self.config.mixing {
            MixingMode::Disabled => Ok(None),
            MixingMode::FixedHop { .. } => {
                let w = self.fixed_w.clone().expect("built with fixed weights");
                Ok(Some(tape.input(w)))
            }
            MixingMode::Learned | MixingMode::LearnedSoftmax => {
                let wa = tape.param(round.wa.expect("trainable mixing"));
                let wb = tape.param(round.wb.expect("trainable mixing"));
                let w = tape.matmul(wa, wb)?;
                Ok(Some(if self.config.mixing == MixingMode::LearnedSoftmax {
                    tape.softmax_rows(w)
                } else {
                    w
                }))
            }
        }
    }

    /// Records the forward pass. `x` has one row per (sample, intersection),
    /// sample-major, and `input_dim` columns.
    pub fn forward_on(&self, tape: &mut Tape<'_>, x: Array2<f64>) -> Result<NodeId> {
        let n = self.config.n_intersections;
        if x.ncols() != self.config.input_dim || x.nrows() % n != 0 || x.nrows() == 0 {
            return Err(TscError::invalid(format!(
                "input of shape {:?} does not hold whole samples of {n} intersections × {} features",
                x.shape(),
                self.config.input_dim
            )));
        }
        let x = tape.input(x);
        let e = self.lin(tape, x, self.layout.embed)?;
        let mut h = tape.relu(e);
        for round in &self.layout.rounds {
            let h_mixed = match self.mixing_node(tape, round)? {
                Some(w) => {
                    let m = tape.mix(h, w)?;
                    tape.add(h, m)?
                }
                None => h,
            };
            let p0 = self.lin(tape, h_mixed, round.process[0])?;
            let p0 = tape.relu(p0);
            let p1 = self.lin(tape, p0, round.process[1])?;
            h = tape.add(h_mixed, p1)?;
        }
        let l0 = self.lin(tape, x, self.layout.local[0])?;
        let l0 = tape.relu(l0);
        let l1 = self.lin(tape, l0, self.layout.local[1])?;
        let local = tape.relu(l1);
        let fused = tape.concat_cols(h, local)?;
        self.lin(tape, fused, self.layout.output)
    }

    /// Forward pass without keeping the tape: `[rows × out_dim]`.
    pub fn forward(&self, x: Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward_on(&mut tape, x)?;
        Ok(tape.into_value(out))
    }

    /// Effective mixing matrix of each round (`None` when mixing is disabled).
    pub fn mixing_matrices(&self) -> Vec<Option<Array2<f64>>> {
        self.layout
            .rounds
            .iter()
            .map(|round| match self.config.mixing {
                MixingMode::Disabled => None,
                MixingMode::FixedHop { .. } => self.fixed_w.clone(),
                MixingMode::Learned | MixingMode::LearnedSoftmax => {
                    let w = self.params.values[round.wa.unwrap()].dot(&self.params.values[round.wb.unwrap()]);
                    Some(if self.config.mixing == MixingMode::LearnedSoftmax {
                        softmax_rows(w.view())
                    } else {
                        w
                    })
                }
            })
            .collect()
    }

    /// Index of the named parameter, e.g. `mix0.wa`.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.index_of(name)
    }
}

/// One residual mixing step `h + mix(h, W_a · W_b)` on `h` with one row
/// per (sample, intersection).
pub fn dcl_forward(h: ArrayView2<'_, f64>, wa: ArrayView2<'_, f64>, wb: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut params = ParamSet::default();
    params.push("wa", wa.to_owned());
    params.push("wb", wb.to_owned());
    let mut tape = Tape::new(&params);
    let (a, b) = (tape.param(0), tape.param(1));
    let w = tape.matmul(a, b)?;
    let h = tape.input(h.to_owned());
    let m = tape.mix(h, w)?;
    let out = tape.add(h, m)?;
    Ok(tape.into_value(out))
}

/// CSV of one mixing matrix, `i,w_0,..,w_{n-1}` per row.
pub fn mixing_csv(w: ArrayView2<'_, f64>) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("i");
    for j in 0..w.ncols() {
        let _ = write!(out, ",w_{j}");
    }
    out.push('\n');
    for (i, row) in w.rows().into_iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}
