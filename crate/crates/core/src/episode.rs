//! Drives a simulation to the horizon while recording rewards.

use crate::error::Result;
use crate::rewards::{PressureForm, RewardLedger};
use crate::sim::SimState;

/// Runs the remaining decision steps of `state`. `decide(state, d)` returns
/// one phase per intersection for decision `d`.
pub fn run_episode<F>(state: &mut SimState, pressure_form: PressureForm, mut decide: F) -> Result<RewardLedger>
where
    F: FnMut(&SimState, usize) -> Result<Vec<usize>>,
{
    let mut ledger = RewardLedger::for_state(state, pressure_form);
    let t_phase = state.config().t_phase_s;
    while !state.is_finished() {
        let d = (state.clock() / t_phase) as usize;
        let phases = decide(state, d)?;
        let timeloss = RewardLedger::timeloss_at(state);
        let record = state.run_decision_step(&phases)?;
        ledger.record_step(&record, &timeloss, state);
    }
    ledger.finish(state.clock());
    Ok(ledger)
}
