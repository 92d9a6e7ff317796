use super::params::{ParamId, ParamStore};
use super::rng::RngStream;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Parameters of one GRU cell:
///
/// ```text
/// z = σ(x W_z + h U_z + b_z)
/// r = σ(x W_r + h U_r + b_r)
/// ĥ = tanh(x W_h + (r ⊙ h) U_h + b_h)
/// h' = (1 - z) ⊙ h + z ⊙ ĥ
/// ```
///
/// `w` stacks `[W_z | W_r | W_h]`, `u_zr` stacks `[U_z | U_r]`, and `b`
/// stacks the three biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruCell {
    pub w: ParamId,
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// A [`GruCell`] whose parameters have been placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundGru {
    w: Var,
    u_zr: Var,
    u_h: Var,
    b: Var,
    hidden: usize,
}

impl GruCell {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        std: f64,
        rng: &mut RngStream,
    ) -> Self {
        GruCell {
            w: store.add_normal(format!("{prefix}.w"), input, 3 * hidden, std, rng),
            u_zr: store.add_normal(format!("{prefix}.u_zr"), hidden, 2 * hidden, std, rng),
            u_h: store.add_normal(format!("{prefix}.u_h"), hidden, hidden, std, rng),
            b: store.add_constant(format!("{prefix}.b"), 1, 3 * hidden, 0.0),
            input,
            hidden,
        }
    }

    pub fn bind(&self, tape: &mut Tape<'_>) -> BoundGru {
        BoundGru {
            w: tape.param(self.w),
            u_zr: tape.param(self.u_zr),
            u_h: tape.param(self.u_h),
            b: tape.param(self.b),
            hidden: self.hidden,
        }
    }
}

impl BoundGru {
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `x W + b` for every row of `x` at once.
    pub fn project_inputs(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.w)?;
        tape.add(xw, self.b)
    }

    /// One step given already projected inputs `xw` (`b×3h`) and state `h`
    /// (`b×h`).
    pub fn step_projected(&self, tape: &mut Tape<'_>, xw: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let hu = tape.matmul(h, self.u_zr)?;
        let xw_zr = tape.slice_cols(xw, 0, 2 * hd)?;
        let pre = tape.add(xw_zr, hu)?;
        let gates = tape.sigmoid(pre)?;
        let z = tape.slice_cols(gates, 0, hd)?;
        let r = tape.slice_cols(gates, hd, 2 * hd)?;
        let rh = tape.mul(r, h)?;
        let rhu = tape.matmul(rh, self.u_h)?;
        let xw_h = tape.slice_cols(xw, 2 * hd, 3 * hd)?;
        let cand_pre = tape.add(xw_h, rhu)?;
        let cand = tape.tanh(cand_pre)?;
        let delta = tape.sub(cand, h)?;
        let moved = tape.mul(z, delta)?;
        tape.add(h, moved)
    }

    /// `gru_step`: one cell update for a batch of rows.
    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Result<Var> {
        let xw = self.project_inputs(tape, x)?;
        self.step_projected(tape, xw, h)
    }

    /// Treats the rows of `x` as consecutive time steps of one sequence and
    /// returns the final hidden state (`1×h`) starting from zeros.
    pub fn run_sequence(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let steps = tape.shape(x)[0];
        let xw = self.project_inputs(tape, x)?;
        let mut h = tape.zeros(1, self.hidden);
        for t in 0..steps {
            let xt = tape.slice_rows(xw, t, t + 1)?;
            h = self.step_projected(tape, xt, h)?;
        }
        Ok(h)
    }
}
