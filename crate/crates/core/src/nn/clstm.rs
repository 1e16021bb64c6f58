//! Convolutional LSTM cell and its unrolled layer.
//!
//! Gate equations (no peepholes), with `*` a same-padded convolution and `∘`
//! the elementwise product:
//!
//! ```text
//! i  = σ(W_xi * x + W_hi * h + b_i)
//! f  = σ(W_xf * x + W_hf * h + b_f)
//! c' = f ∘ c + i ∘ tanh(W_xc * x + W_hc * h + b_c)
//! o  = σ(W_xo * x + W_ho * h + b_o)
//! h' = o ∘ tanh(c')
//! ```

use rand::Rng;

use super::init::glorot_uniform;
use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Padding};
use crate::tensor::Tensor;

/// Gate suffixes in the order the fused kernel expects.
pub const GATES: [&str; 4] = ["i", "f", "c", "o"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClstmSpec {
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
}

impl ClstmSpec {
    pub fn new(in_channels: usize, hidden: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("C-LSTM kernel must be odd, got {kernel}")));
        }
        if in_channels == 0 || hidden == 0 {
            return Err(Error::Config("C-LSTM channels must be positive".into()));
        }
        Ok(Self { in_channels, hidden, kernel })
    }

    /// 4·(k²·(Cin+Ch)·Ch + Ch)
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        4 * (k2 * (self.in_channels + self.hidden) * self.hidden + self.hidden)
    }

    /// Register `w_x{g}`, `w_h{g}` and `b_{g}` for each gate under `prefix`.
    /// Forget-gate bias starts at 1, the others at 0.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        let k = self.kernel;
        for gate in GATES {
            store.insert(
                format!("{prefix}/w_x{gate}"),
                glorot_uniform(&[k, k, self.in_channels, self.hidden], rng),
                true,
            );
        }
        for gate in GATES {
            store.insert(
                format!("{prefix}/w_h{gate}"),
                glorot_uniform(&[k, k, self.hidden, self.hidden], rng),
                true,
            );
        }
        for gate in GATES {
            let v = if gate == "f" { 1.0 } else { 0.0 };
            store.insert(format!("{prefix}/b_{gate}"), Tensor::full(&[self.hidden], v), true);
        }
    }

    /// Fuse the per-gate parameters into the three tensors one step uses.
    pub fn bind(&self, g: &mut Graph, bound: &Bound, prefix: &str) -> Result<ClstmNodes> {
        let fetch = |kind: &str| -> Result<Vec<NodeId>> {
            GATES
                .iter()
                .map(|gate| bound.node(&format!("{prefix}/{kind}{gate}")))
                .collect()
        };
        let (wx, wh, b) = (fetch("w_x")?, fetch("w_h")?, fetch("b_")?);
        Ok(ClstmNodes {
            w_x: g.concat(&wx, 3)?,
            w_h: g.concat(&wh, 3)?,
            bias: g.concat(&b, 0)?,
            hidden: self.hidden,
        })
    }
}

/// Gate-fused weights: `w_x` is `[k, k, Cin, 4·Ch]`, `w_h` is
/// `[k, k, Ch, 4·Ch]`, `bias` is `[4·Ch]`.
#[derive(Debug, Clone, Copy)]
pub struct ClstmNodes {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub bias: NodeId,
    pub hidden: usize,
}

impl ClstmNodes {
    /// Fuse explicit per-gate nodes (order i, f, c̃, o).
    pub fn from_gates(g: &mut Graph, w_x: [NodeId; 4], w_h: [NodeId; 4], b: [NodeId; 4]) -> Result<Self> {
        let hidden = g.shape(b[0])[0];
        Ok(Self {
            w_x: g.concat(&w_x, 3)?,
            w_h: g.concat(&w_h, 3)?,
            bias: g.concat(&b, 0)?,
            hidden,
        })
    }
}

/// Hidden and cell maps, both `[.., H, W, Ch]`.
#[derive(Debug, Clone, Copy)]
pub struct ClstmState {
    pub h: NodeId,
    pub c: NodeId,
}

/// One recurrence step on `x_t` (`[H, W, Cin]` or `[N, H, W, Cin]`).
/// `state == None` is the all-zero initial state.
pub fn clstm_step(g: &mut Graph, x_t: NodeId, state: Option<ClstmState>, w: &ClstmNodes) -> Result<ClstmState> {
    let zx = g.conv2d(x_t, w.w_x, Some(w.bias), Padding::Same)?;
    let (z, c_prev) = match state {
        None => (zx, None),
        Some(s) => {
            let zh = g.conv2d(s.h, w.w_h, None, Padding::Same)?;
            if g.shape(zh) != g.shape(zx) {
                return Err(Error::dim(
                    "clstm_step",
                    format!("state {:?} vs input {:?}", g.shape(s.h), g.shape(x_t)),
                ));
            }
            (g.add(zx, zh)?, Some(s.c))
        }
    };
    let hc = g.lstm_gates(z, c_prev, w.hidden)?;
    let axis = g.shape(hc).len() - 1;
    let h = g.slice(hc, axis, 0, w.hidden)?;
    let c = g.slice(hc, axis, w.hidden, w.hidden)?;
    Ok(ClstmState { h, c })
}

/// Unroll over the time axis from a zero state, returning every hidden map.
///
/// `seq` is `[N, T, H, W, Cin]` (or `[T, H, W, Cin]`); the result has the
/// same layout with `Ch` channels.
pub fn clstm_layer(g: &mut Graph, seq: NodeId, w: &ClstmNodes) -> Result<NodeId> {
    let shape = g.shape(seq).to_vec();
    let time_axis = match shape.len() {
        4 => 0,
        5 => 1,
        _ => return Err(Error::dim("clstm_layer", format!("need [N, T, H, W, C], got {shape:?}"))),
    };
    let steps = shape[time_axis];
    if steps == 0 {
        return Err(Error::EmptyInput("clstm_layer over zero timesteps".into()));
    }
    let mut state = None;
    let mut hs = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = g.select(seq, time_axis, t)?;
        let s = clstm_step(g, x_t, state, w)?;
        hs.push(s.h);
        state = Some(s);
    }
    g.stack(&hs, time_axis)
}
