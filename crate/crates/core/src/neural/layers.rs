use rand::Rng;

use super::array::Array;
use super::params::{ParamId, ParameterSet};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Weight initialization bound; biases start at zero.
pub const INIT_BOUND: f64 = 0.08;

/// One GRU cell in the original gating form:
///
/// ```text
/// z  = σ(x·Wz + h·Uz + bz)
/// r  = σ(x·Wr + h·Ur + br)
/// h~ = tanh(x·Wh + (r ⊙ h)·Uh + bh)
/// h' = (1 - z) ⊙ h + z ⊙ h~
/// ```
///
/// `w_x` packs `[Wz | Wr | Wh]`, `u_zr` packs `[Uz | Ur]` and `b` packs the three biases.
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub w_x: ParamId,
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub b: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl GruLayer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h = hidden_size;
        Ok(GruLayer {
            w_x: params.insert_uniform(format!("{prefix}.w_x"), input_size, 3 * h, INIT_BOUND, rng)?,
            u_zr: params.insert_uniform(format!("{prefix}.u_zr"), h, 2 * h, INIT_BOUND, rng)?,
            u_h: params.insert_uniform(format!("{prefix}.u_h"), h, h, INIT_BOUND, rng)?,
            b: params.insert_zeros(format!("{prefix}.b"), 1, 3 * h)?,
            input_size,
            hidden_size,
        })
    }

    /// One step for a batch: `x` is `n × input`, `h` is `n × hidden`.
    pub fn step(&self, tape: &mut Tape, params: &ParameterSet, x: Var, h: Var) -> Var {
        let hs = self.hidden_size;
        let w_x = tape.param(params, self.w_x);
        let u_zr = tape.param(params, self.u_zr);
        let u_h = tape.param(params, self.u_h);
        let b = tape.param(params, self.b);

        let xw = tape.matmul(x, w_x);
        let xw = tape.add_row(xw, b);
        let hu = tape.matmul(h, u_zr);

        let xz = tape.slice_cols(xw, 0, hs);
        let hz = tape.slice_cols(hu, 0, hs);
        let z = tape.add(xz, hz);
        let z = tape.sigmoid(z);

        let xr = tape.slice_cols(xw, hs, hs);
        let hr = tape.slice_cols(hu, hs, hs);
        let r = tape.add(xr, hr);
        let r = tape.sigmoid(r);

        let rh = tape.mul(r, h);
        let rhu = tape.matmul(rh, u_h);
        let xh = tape.slice_cols(xw, 2 * hs, hs);
        let cand = tape.add(xh, rhu);
        let cand = tape.tanh(cand);

        let delta = tape.sub(cand, h);
        let delta = tape.mul(z, delta);
        tape.add(h, delta)
    }
}

/// Stacked GRU cells; layer `l > 0` reads the hidden state of layer `l - 1`.
#[derive(Clone, Debug)]
pub struct GruStack {
    layers: Vec<GruLayer>,
}

impl GruStack {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        num_layers: usize,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("a GRU stack needs at least one layer".into()));
        }
        let layers = (0..num_layers)
            .map(|l| {
                let input = if l == 0 { input_size } else { hidden_size };
                GruLayer::new(params, &format!("{prefix}.l{l}"), input, hidden_size, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GruStack { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].hidden_size
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size
    }

    pub fn layers(&self) -> &[GruLayer] {
        &self.layers
    }

    /// Advances every layer by one step. Rows whose `mask` entry is 0 keep their state.
    pub fn step(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        x: Var,
        state: &[Var],
        mask: Option<&[f64]>,
    ) -> Vec<Var> {
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, &h) in self.layers.iter().zip(state) {
            let mut h_new = layer.step(tape, params, input, h);
            if let Some(m) = mask {
                if m.iter().any(|&v| v != 1.0) {
                    h_new = tape.row_blend(h_new, h, m.to_vec());
                }
            }
            next.push(h_new);
            input = h_new;
        }
        next
    }

    /// Runs the stack over `inputs` (one `n × input` node per step).
    ///
    /// Returns the top-layer state after every step and the final per-layer states.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        inputs: &[Var],
        init: &[Var],
        masks: Option<&[Vec<f64>]>,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        if init.len() != self.layers.len() {
            return Err(Error::Dimension(format!(
                "{} initial states for {} layers",
                init.len(),
                self.layers.len()
            )));
        }
        for &x in inputs {
            let w = tape.value(x).cols();
            if w != self.input_size() {
                return Err(Error::Dimension(format!(
                    "input width {w} but the stack expects {}",
                    self.input_size()
                )));
            }
        }
        for &h in init {
            if tape.value(h).cols() != self.hidden_size() {
                return Err(Error::Dimension("initial state width differs from hidden size".into()));
            }
        }
        let mut state = init.to_vec();
        let mut tops = Vec::with_capacity(inputs.len());
        for (t, &x) in inputs.iter().enumerate() {
            let mask = masks.map(|m| m[t].as_slice());
            state = self.step(tape, params, x, &state, mask);
            tops.push(*state.last().expect("non-empty stack"));
        }
        Ok((tops, state))
    }
}

/// Runs a stack over a single `T × input` sequence outside of any training graph.
pub fn gru_stack_forward(
    stack: &GruStack,
    params: &ParameterSet,
    inputs: &Array,
    init: &[Array],
) -> Result<(Array, Vec<Array>)> {
    let mut tape = Tape::new();
    let steps: Vec<Var> = (0..inputs.rows())
        .map(|t| tape.constant(Array::row_vector(inputs.row(t).to_vec())))
        .collect();
    let init: Vec<Var> = init.iter().map(|a| tape.constant(a.clone())).collect();
    let (tops, finals) = stack.forward(&mut tape, params, &steps, &init, None)?;
    let mut out = Array::zeros(inputs.rows(), stack.hidden_size());
    for (t, &v) in tops.iter().enumerate() {
        out.row_mut(t).copy_from_slice(tape.value(v).data());
    }
    let finals = finals.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((out, finals))
}

/// Row lookup into an embedding table.
pub fn embed(table: &Array, ids: &[usize]) -> Result<Array> {
    let mut out = Array::zeros(ids.len(), table.cols());
    for (r, &id) in ids.iter().enumerate() {
        if id >= table.rows() {
            return Err(Error::Index {
                index: id,
                size: table.rows(),
            });
        }
        out.row_mut(r).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Graph form of [`embed`]: gathers rows of a table node.
pub fn embed_var(tape: &mut Tape, table: Var, ids: &[usize]) -> Result<Var> {
    let size = tape.value(table).rows();
    if let Some(&bad) = ids.iter().find(|&&id| id >= size) {
        return Err(Error::Index { index: bad, size });
    }
    Ok(tape.gather(table, ids.to_vec()))
}

/// Per-word mean log-likelihood of `targets` under `logits` (`T × V`).
///
/// `mask[t]` is 1 for counted steps and 0 for steps after EOS; the mean is
/// taken over counted steps.
pub fn sequence_log_prob(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[f64]) -> Result<Var> {
    let (rows, vocab) = (tape.value(logits).rows(), tape.value(logits).cols());
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Dimension(format!(
            "{} logit rows, {} targets, {} mask entries",
            rows,
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Index { index: bad, size: vocab });
    }
    let counted: f64 = mask.iter().sum();
    if counted <= 0.0 {
        return Err(Error::Domain("log-likelihood of a fully masked sequence is undefined".into()));
    }
    let picked = tape.log_softmax_pick(logits, targets.to_vec());
    let weighted = tape.row_scale(picked, mask.iter().map(|m| m / counted).collect());
    Ok(tape.sum(weighted))
}
