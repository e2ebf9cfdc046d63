use rand::Rng;

use super::config::DecoderConfig;
use crate::diffcore::{
    positional_encoding, time_features, Activation, AttentionBlock, Conv1d, Graph, LayerNorm, Linear, ParamId,
    ParamStore, Tensor, TransposedConv1d, Var,
};
use crate::error::{Error, Result};
use crate::Scalar;

/// What the field is conditioned on.
#[derive(Clone, Copy, Debug)]
pub enum Condition {
    /// Per-frame conditioning `[T, cond_dim]`.
    Mu(Var),
    /// The learned unconditional token.
    Null,
}

/// Anything that predicts a velocity `[T, d]` from `(x_t, condition, t)`.
/// Implemented by the network and by analytic test fields.
pub trait ConditionalField<S: Scalar> {
    fn forward(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var, cond: Condition, t: S) -> Result<Var>;

    /// Width of `x` for a given condition; by default the condition's own width.
    fn data_dim(&self, cond: &Tensor<S>) -> usize {
        cond.cols()
    }

    /// Evaluates on a fresh graph and returns the velocity.
    fn velocity(&self, ps: &ParamStore<S>, x: &Tensor<S>, cond: Option<&Tensor<S>>, t: S) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let c = match cond {
            Some(m) => Condition::Mu(g.constant(m.clone())),
            None => Condition::Null,
        };
        let v = self.forward(&mut g, ps, xv, c, t)?;
        Ok(g.value(v).clone())
    }
}

/// conv → LN → SiLU → (+ time) → conv → LN → SiLU, plus a residual path.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv1d,
    norm1: LayerNorm,
    time: Linear,
    conv2: Conv1d,
    norm2: LayerNorm,
    skip: Option<Conv1d>,
}

impl ResBlock {
    fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        t_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv1d::new(ps, &format!("{name}.conv1"), c_in, c_out, kernel, rng)?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), c_out),
            time: Linear::new(ps, &format!("{name}.time"), t_dim, c_out, rng),
            conv2: Conv1d::new(ps, &format!("{name}.conv2"), c_out, c_out, kernel, rng)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), c_out),
            skip: if c_in == c_out { None } else { Some(Conv1d::new(ps, &format!("{name}.skip"), c_in, c_out, 1, rng)?) },
        })
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var, temb: Var) -> Result<Var> {
        let h = self.conv1.forward(g, ps, x)?;
        let h = self.norm1.forward(g, ps, h)?;
        let h = g.silu(h);
        let te = self.time.forward_vec(g, ps, temb)?;
        let h = g.add_bias(h, te)?;
        let h = self.conv2.forward(g, ps, h)?;
        let h = self.norm2.forward(g, ps, h)?;
        let h = g.silu(h);
        let r = match &self.skip {
            Some(c) => c.forward(g, ps, x)?,
            None => x,
        };
        g.add(h, r)
    }
}

/// Two-level 1-D U-Net over mel frames with a Transformer bottleneck.
#[derive(Clone, Debug)]
pub struct VectorFieldNet {
    pub cfg: DecoderConfig,
    pub data_dim: usize,
    pub cond_dim: usize,
    pub null_cond: ParamId,
    time_in: Linear,
    time_out: Linear,
    res1: ResBlock,
    down: Conv1d,
    res2: ResBlock,
    mid: AttentionBlock,
    up: TransposedConv1d,
    res3: ResBlock,
    out: Conv1d,
}

impl VectorFieldNet {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        cfg: &DecoderConfig,
        data_dim: usize,
        cond_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if data_dim == 0 || cond_dim == 0 {
            return Err(Error::Config("decoder data and condition widths must be positive".into()));
        }
        let [c1, c2] = cfg.channels;
        let td = cfg.time_dim;
        let k = cfg.kernel;
        Ok(Self {
            cfg: cfg.clone(),
            data_dim,
            cond_dim,
            null_cond: ps.add("dec.null_cond", Tensor::zeros(&[cond_dim])),
            time_in: Linear::new(ps, "dec.time_in", td, 4 * td, rng),
            time_out: Linear::new(ps, "dec.time_out", 4 * td, td, rng),
            res1: ResBlock::new(ps, "dec.res1", data_dim + cond_dim, c1, k, td, rng)?,
            down: Conv1d::strided(ps, "dec.down", c1, c1, 3, 2, rng)?,
            res2: ResBlock::new(ps, "dec.res2", c1, c2, k, td, rng)?,
            mid: AttentionBlock::new(ps, "dec.mid", c2, cfg.heads, 2 * c2, Activation::Snake, rng)?,
            up: TransposedConv1d::new(ps, "dec.up", c2, c1, rng),
            res3: ResBlock::new(ps, "dec.res3", 2 * c1, c1, k, td, rng)?,
            out: Conv1d::new(ps, "dec.out", c1, data_dim, 1, rng)?,
        })
    }

    /// Time embedding: sinusoidal features through Linear → SiLU → Linear.
    fn time_embedding<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, t: S) -> Result<Var> {
        let f = g.constant(time_features(t, self.cfg.time_dim));
        let h = self.time_in.forward_vec(g, ps, f)?;
        let h = g.silu(h);
        self.time_out.forward_vec(g, ps, h)
    }

    fn condition<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, cond: Condition, frames: usize) -> Result<Var> {
        match cond {
            Condition::Mu(m) => {
                if g.shape(m) != [frames, self.cond_dim] {
                    return Err(Error::dim(
                        "vector_field",
                        format!("condition {:?}, expected [{frames}, {}]", g.shape(m), self.cond_dim),
                    ));
                }
                Ok(m)
            }
            Condition::Null => {
                let n = g.param(ps, self.null_cond);
                Ok(g.broadcast_rows(n, frames))
            }
        }
    }
}

impl<S: Scalar> ConditionalField<S> for VectorFieldNet {
    fn data_dim(&self, _: &Tensor<S>) -> usize {
        self.data_dim
    }

    fn forward(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var, cond: Condition, t: S) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.data_dim || shape[0] == 0 {
            return Err(Error::dim("vector_field", format!("input {:?}, expected [T>0, {}]", shape, self.data_dim)));
        }
        let frames = shape[0];
        let c = self.condition(g, ps, cond, frames)?;
        let temb = self.time_embedding(g, ps, t)?;
        let h = g.concat_cols(&[x, c])?;

        let skip = self.res1.forward(g, ps, h, temb)?;
        let h = self.down.forward(g, ps, skip)?;
        let h = self.res2.forward(g, ps, h, temb)?;
        let half = g.shape(h)[0];
        let pe = g.constant(positional_encoding(half, self.cfg.channels[1]));
        let h = g.add(h, pe)?;
        let h = self.mid.forward(g, ps, h)?;
        let h = self.up.forward(g, ps, h)?;
        let h = g.slice_rows(h, 0, frames)?;
        let h = g.concat_cols(&[h, skip])?;
        let h = self.res3.forward(g, ps, h, temb)?;
        self.out.forward(g, ps, h)
    }
}
