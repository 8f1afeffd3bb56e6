//! LSTM conditioner mapping the noise sequence to per-generator inputs.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{CganError, Result};
use crate::nets::params::{ConvParams, ParamSet};
use crate::tensor::Tensor;

/// Hidden and memory-cell state of the recurrent unit, each `[B, hidden_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionerState {
    pub hidden: Tensor,
    pub cell: Tensor,
}

impl ConditionerState {
    pub fn zeros(batch: usize, hidden_dim: usize) -> Self {
        ConditionerState {
            hidden: Tensor::zeros(&[batch, hidden_dim]),
            cell: Tensor::zeros(&[batch, hidden_dim]),
        }
    }

    pub fn batch(&self) -> usize {
        self.hidden.batch()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub hidden: Var,
    pub cell: Var,
}

#[derive(Clone, Debug)]
pub struct Conditioner {
    pub(crate) params: ParamSet,
    gates: ConvParams,
    latent_dim: usize,
    hidden_dim: usize,
}

impl Conditioner {
    pub fn new(latent_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let gates = ConvParams::linear(&mut params, "lstm", latent_dim + hidden_dim, 4 * hidden_dim, rng);
        Conditioner {
            params,
            gates,
            latent_dim,
            hidden_dim,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// One recurrent step. Gate order in the packed weight is input, forget, cell, output.
    pub fn step_graph(&self, tape: &mut Tape, v: &[Var], state: StateVars, z: Var) -> StateVars {
        let h = self.hidden_dim;
        let joined = tape.concat_channels(&[z, state.hidden]);
        let pre = self.gates.apply_linear(tape, v, joined);
        let i = tape.slice_channels(pre, 0, h);
        let f = tape.slice_channels(pre, h, h);
        let g = tape.slice_channels(pre, 2 * h, h);
        let o = tape.slice_channels(pre, 3 * h, h);
        let (i, f, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o));
        let g = tape.tanh(g);
        let kept = tape.mul(f, state.cell);
        let written = tape.mul(i, g);
        let cell = tape.add(kept, written);
        let squashed = tape.tanh(cell);
        let hidden = tape.mul(o, squashed);
        StateVars { hidden, cell }
    }

    /// Runs the recurrence from a zero state over `zs`, returning `h_1..h_n`.
    pub fn unroll_graph(&self, tape: &mut Tape, v: &[Var], zs: &[Var]) -> Vec<StateVars> {
        let batch = tape.shape(zs[0])[0];
        let zero = ConditionerState::zeros(batch, self.hidden_dim);
        let mut state = StateVars {
            hidden: tape.constant(zero.hidden),
            cell: tape.constant(zero.cell),
        };
        zs.iter()
            .map(|&z| {
                state = self.step_graph(tape, v, state, z);
                state
            })
            .collect()
    }

    pub fn step(&self, state: &ConditionerState, z: &Tensor) -> Result<ConditionerState> {
        let batch = state.batch();
        let expect_state = [batch, self.hidden_dim];
        if state.hidden.shape() != expect_state || state.cell.shape() != expect_state {
            return Err(CganError::Dimension(format!(
                "conditioner state must be {expect_state:?}, got {:?} / {:?}",
                state.hidden.shape(),
                state.cell.shape()
            )));
        }
        if z.shape() != [batch, self.latent_dim] {
            return Err(CganError::Dimension(format!(
                "latent must be [{batch}, {}], got {:?}",
                self.latent_dim,
                z.shape()
            )));
        }
        let mut tape = Tape::new();
        let v = self.params.bind(&mut tape, false);
        let s = StateVars {
            hidden: tape.constant(state.hidden.clone()),
            cell: tape.constant(state.cell.clone()),
        };
        let zv = tape.constant(z.clone());
        let out = self.step_graph(&mut tape, &v, s, zv);
        Ok(ConditionerState {
            hidden: tape.value(out.hidden).clone(),
            cell: tape.value(out.cell).clone(),
        })
    }
}
