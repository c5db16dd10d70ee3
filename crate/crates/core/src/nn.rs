//! Layer building blocks over the autodiff tape.

use lanepred_autodiff::{ParamId, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = ps.uniform(format!("{name}.w"), fan_in, fan_out, fan_in, rng);
        let b = ps.uniform(format!("{name}.b"), 1, fan_out, fan_in, rng);
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(ps, self.w);
        let b = t.param(ps, self.b);
        let y = t.matmul(x, w)?;
        Ok(t.add_row(y, b)?)
    }
}

/// Two linear layers with a relu between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: [usize; 3]) -> Self {
        Mlp {
            l1: Linear::new(ps, rng, &format!("{name}.0"), dims[0], dims[1]),
            l2: Linear::new(ps, rng, &format!("{name}.1"), dims[1], dims[2]),
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(t, ps, x)?;
        let h = t.relu(h);
        self.l2.forward(t, ps, h)
    }
}

#[derive(Clone, Debug)]
pub struct GruCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
}

impl GruCell {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        GruCell {
            wx: ps.uniform(format!("{name}.wx"), input, 3 * hidden, hidden, rng),
            wh: ps.uniform(format!("{name}.wh"), hidden, 3 * hidden, hidden, rng),
            bx: ps.uniform(format!("{name}.bx"), 1, 3 * hidden, hidden, rng),
            bh: ps.uniform(format!("{name}.bh"), 1, 3 * hidden, hidden, rng),
        }
    }

    pub fn step(&self, t: &mut Tape, ps: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let wx = t.param(ps, self.wx);
        let wh = t.param(ps, self.wh);
        let bx = t.param(ps, self.bx);
        let bh = t.param(ps, self.bh);
        Ok(t.gru_cell(x, h, wx, wh, bx, bh)?)
    }
}

/// Two stacked GRU cells; the second consumes the first's new state.
#[derive(Clone, Debug)]
pub struct GruStack {
    pub layers: [GruCell; 2],
}

impl GruStack {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        GruStack {
            layers: [
                GruCell::new(ps, rng, &format!("{name}.l0"), input, hidden),
                GruCell::new(ps, rng, &format!("{name}.l1"), hidden, hidden),
            ],
        }
    }

    pub fn step(&self, t: &mut Tape, ps: &ParamStore, x: Var, h: [Var; 2]) -> Result<[Var; 2]> {
        let h0 = self.layers[0].step(t, ps, x, h[0])?;
        let h1 = self.layers[1].step(t, ps, h0, h[1])?;
        Ok([h0, h1])
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
    ) -> Self {
        let fan_in = kernel * cin;
        Conv1d {
            w: ps.uniform(format!("{name}.w"), fan_in, cout, fan_in, rng),
            b: ps.uniform(format!("{name}.b"), 1, cout, fan_in, rng),
            kernel,
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(ps, self.w);
        let b = t.param(ps, self.b);
        Ok(t.conv1d(x, w, b, self.kernel)?)
    }
}

/// Parallel same-padded convolutions with kernels 3, 5 and 7, each producing
/// `d/2` channels, concatenated and projected to `d`.
#[derive(Clone, Debug)]
pub struct MultiScaleConv {
    pub convs: Vec<Conv1d>,
    pub proj: Linear,
}

pub const SCALES: [usize; 3] = [3, 5, 7];

impl MultiScaleConv {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        d: usize,
    ) -> Self {
        let convs = SCALES
            .iter()
            .map(|&k| Conv1d::new(ps, rng, &format!("{name}.conv{k}"), k, cin, d / 2))
            .collect();
        let proj = Linear::new(ps, rng, &format!("{name}.proj"), SCALES.len() * d / 2, d);
        MultiScaleConv { convs, proj }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let mut branches = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let y = c.forward(t, ps, x)?;
            branches.push(t.relu(y));
        }
        let cat = t.concat_cols(&branches)?;
        self.proj.forward(t, ps, cat)
    }
}
