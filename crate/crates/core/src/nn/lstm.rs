use rand::Rng;

use super::{xavier_uniform, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// One unidirectional LSTM layer. Gate blocks are laid out `[i | f | o | g]`
/// along the columns of `wx`, `wh` and `b`.
#[derive(Debug, Clone, Copy)]
pub struct LstmLayer {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        LstmLayer {
            wx: store.add(format!("{name}.wx"), xavier_uniform(input, 4 * hidden, rng)),
            wh: store.add(format!("{name}.wh"), xavier_uniform(hidden, 4 * hidden, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(1, 4 * hidden)),
            input,
            hidden,
        }
    }

    /// Runs over the rows of `xs` (`T x input`), backwards in time when
    /// `reverse`. Returns `T x hidden` states aligned with the input rows.
    /// `h_mask` (`1 x hidden`) is applied to the recurrent input at every step.
    pub fn run(&self, tape: &mut Tape, xs: Var, reverse: bool, h_mask: Option<&Tensor>) -> Result<Var> {
        let wx = tape.param(self.wx);
        let wh = tape.param(self.wh);
        let b = tape.param(self.b);
        let xw = tape.matmul(xs, wx)?;
        let xw = tape.add_row(xw, b)?;
        tape.lstm(xw, wh, reverse, h_mask)
    }
}

/// Affine layer `x · w + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Dense {
            w: store.add(format!("{name}.w"), xavier_uniform(input, output, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(1, output)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}
