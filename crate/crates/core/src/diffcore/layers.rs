//! Trainable building blocks. Every layer stores only parameter handles; the
//! values live in a [`ParamStore`] and forwards record onto a [`Graph`].

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::Scalar;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add_uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        let bias = Some(ps.add_uniform(format!("{name}.bias"), &[d_out], d_in, rng));
        Self { weight, bias, d_in, d_out }
    }

    pub fn without_bias<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add_uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        Self { weight, bias: None, d_in, d_out }
    }

    /// `out[t] = x[t]·W + b`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.d_in {
            return Err(Error::dim("linear", format!("input {:?}, expected [_, {}]", g.shape(x), self.d_in)));
        }
        g.require_finite(x, "linear input")?;
        let w = g.param(ps, self.weight);
        let h = g.matmul(x, w)?;
        match self.bias {
            Some(id) => {
                let b = g.param(ps, id);
                g.add_bias(h, b)
            }
            None => Ok(h),
        }
    }

    /// Applies the layer to a single `[d_in]` vector, returning `[d_out]`.
    pub fn forward_vec<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, v: Var) -> Result<Var> {
        let row = g.reshape(v, &[1, self.d_in])?;
        let out = self.forward(g, ps, row)?;
        g.reshape(out, &[self.d_out])
    }
}

/// Stride-`s` 1-D convolution over a `[T, C_in]` sequence with zero padding.
/// Taps are listed as frame offsets relative to the output frame center.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub offsets: Vec<isize>,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1d {
    /// Same-padded stride-1 convolution. The kernel must be odd.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let offsets = centered_offsets(kernel)?;
        Ok(Self::with_offsets(ps, name, c_in, c_out, offsets, 1, rng))
    }

    /// Convolution whose center tap is structurally absent: output frame `t`
    /// never reads input frame `t`.
    pub fn masked<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel < 3 {
            return Err(Error::Config(format!("masked convolution needs kernel >= 3, got {kernel}")));
        }
        let offsets: Vec<isize> = centered_offsets(kernel)?.into_iter().filter(|&o| o != 0).collect();
        Ok(Self::with_offsets(ps, name, c_in, c_out, offsets, 1, rng))
    }

    /// Downsampling convolution with output length `ceil(T / stride)`.
    pub fn strided<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        let offsets = centered_offsets(kernel)?;
        Ok(Self::with_offsets(ps, name, c_in, c_out, offsets, stride, rng))
    }

    fn with_offsets<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        offsets: Vec<isize>,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = offsets.len() * c_in;
        let weight = ps.add_uniform(format!("{name}.weight"), &[fan_in, c_out], fan_in, rng);
        let bias = ps.add_uniform(format!("{name}.bias"), &[c_out], fan_in, rng);
        Self { weight, bias, offsets, stride, c_in, c_out }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.c_in {
            return Err(Error::dim("conv1d", format!("input {:?}, expected [_, {}]", g.shape(x), self.c_in)));
        }
        g.require_finite(x, "conv1d input")?;
        let cols = if self.offsets == [0] && self.stride == 1 { x } else { g.unfold(x, &self.offsets, self.stride)? };
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let h = g.matmul(cols, w)?;
        g.add_bias(h, b)
    }

    /// Row of the weight matrix belonging to `(tap, input channel)`.
    pub fn weight_row(&self, tap: usize, channel: usize) -> usize {
        tap * self.c_in + channel
    }
}

fn centered_offsets(kernel: usize) -> Result<Vec<isize>> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Config(format!("convolution kernel must be odd, got {kernel}")));
    }
    let half = (kernel / 2) as isize;
    Ok((-half..=half).collect())
}

/// Transposed convolution with kernel 2 and stride 2: every input frame
/// emits two output frames, so `T` frames become exactly `2T`.
#[derive(Clone, Debug)]
pub struct TransposedConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl TransposedConv1d {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add_uniform(format!("{name}.weight"), &[c_in, 2 * c_out], c_in, rng);
        let bias = ps.add_uniform(format!("{name}.bias"), &[c_out], c_in, rng);
        Self { weight, bias, c_in, c_out }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.c_in {
            return Err(Error::dim("transposed_conv1d", format!("input {:?}, expected [_, {}]", shape, self.c_in)));
        }
        g.require_finite(x, "transposed_conv1d input")?;
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let h = g.matmul(x, w)?;
        // row t holds frames 2t and 2t+1 side by side
        let h = g.reshape(h, &[2 * shape[0], self.c_out])?;
        g.add_bias(h, b)
    }
}

/// Per-frame layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Tensor::full(&[dim], S::one()));
        let shift = ps.add(format!("{name}.shift"), Tensor::zeros(&[dim]));
        Self { gain, shift }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, S::lit(NORM_EPS))?;
        let gain = g.param(ps, self.gain);
        let shift = g.param(ps, self.shift);
        let h = g.mul_cols(n, gain)?;
        g.add_bias(h, shift)
    }
}

/// Periodic activation `x + sin²(αx)/(β + 1e-9)` with per-channel α, β kept
/// in log scale.
#[derive(Clone, Debug)]
pub struct SnakeBeta {
    pub log_alpha: ParamId,
    pub log_beta: ParamId,
}

impl SnakeBeta {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        let log_alpha = ps.add(format!("{name}.log_alpha"), Tensor::zeros(&[channels]));
        let log_beta = ps.add(format!("{name}.log_beta"), Tensor::zeros(&[channels]));
        Self { log_alpha, log_beta }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var> {
        let a = g.param(ps, self.log_alpha);
        let b = g.param(ps, self.log_beta);
        g.snake_beta(x, a, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Snake,
}

#[derive(Clone, Debug)]
enum FfnAct {
    Silu,
    Snake(SnakeBeta),
}

/// Pre-norm Transformer layer: multi-head self-attention then a feed-forward
/// sublayer, each wrapped in a residual connection. No positional information
/// is added here.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    norm_attn: LayerNorm,
    query: Linear,
    // a key bias shifts every score of a row equally, so it is omitted
    key: Linear,
    value: Linear,
    out: Linear,
    norm_ff: LayerNorm,
    ff_in: Linear,
    act: FfnAct,
    ff_out: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("attention width {dim} not divisible by {heads} heads")));
        }
        let act = match activation {
            Activation::Silu => FfnAct::Silu,
            Activation::Snake => FfnAct::Snake(SnakeBeta::new(ps, &format!("{name}.ff_act"), ff_dim)),
        };
        Ok(Self {
            norm_attn: LayerNorm::new(ps, &format!("{name}.norm_attn"), dim),
            query: Linear::new(ps, &format!("{name}.query"), dim, dim, rng),
            key: Linear::without_bias(ps, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(ps, &format!("{name}.value"), dim, dim, rng),
            out: Linear::new(ps, &format!("{name}.out"), dim, dim, rng),
            norm_ff: LayerNorm::new(ps, &format!("{name}.norm_ff"), dim),
            ff_in: Linear::new(ps, &format!("{name}.ff_in"), dim, ff_dim, rng),
            act,
            ff_out: Linear::new(ps, &format!("{name}.ff_out"), ff_dim, dim, rng),
            dim,
            heads,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, ps, x)?.0)
    }

    /// Also returns each head's `[T, T]` attention matrix (rows sum to 1).
    pub fn forward_with_attention<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::dim("attention_block", format!("input {:?}, expected [_, {}]", shape, self.dim)));
        }
        let dh = self.dim / self.heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();

        let h = self.norm_attn.forward(g, ps, x)?;
        let qs = self.query.forward(g, ps, h)?;
        let ks = self.key.forward(g, ps, h)?;
        let vs = self.value.forward(g, ps, h)?;
        let mut heads = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let q = g.slice_cols(qs, i * dh, dh)?;
            let k = g.slice_cols(ks, i * dh, dh)?;
            let v = g.slice_cols(vs, i * dh, dh)?;
            let scores = g.matmul_ext(q, k, true)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores)?;
            maps.push(attn);
            heads.push(g.matmul(attn, v)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let attn_out = self.out.forward(g, ps, merged)?;
        let x1 = g.add(x, attn_out)?;

        let h = self.norm_ff.forward(g, ps, x1)?;
        let h = self.ff_in.forward(g, ps, h)?;
        let h = match &self.act {
            FfnAct::Silu => g.silu(h),
            FfnAct::Snake(s) => s.forward(g, ps, h)?,
        };
        let h = self.ff_out.forward(g, ps, h)?;
        Ok((g.add(x1, h)?, maps))
    }
}

/// Stack of attention blocks with sinusoidal positions added once at the input
/// (unless disabled).
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub blocks: Vec<AttentionBlock>,
    pub dim: usize,
    pub positions: bool,
}

impl TransformerStack {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| AttentionBlock::new(ps, &format!("{name}.{i}"), dim, heads, 2 * dim, activation, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, dim, positions: true })
    }

    pub fn without_positions(mut self) -> Self {
        self.positions = false;
        self
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var> {
        let mut h = x;
        if self.positions {
            let pe = g.constant(positional_encoding(g.shape(x)[0], self.dim));
            h = g.add(x, pe)?;
        }
        for b in &self.blocks {
            h = b.forward(g, ps, h)?;
        }
        Ok(h)
    }
}

/// Standard sinusoidal table: even columns `sin(t/10000^(2i/d))`, odd `cos`.
pub fn positional_encoding<S: Scalar>(frames: usize, dim: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); frames * dim];
    for t in 0..frames {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let a = t as f64 * freq;
            data[t * dim + i] = S::lit(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::matrix(frames, dim, data).expect("sized")
}

/// Sinusoidal features of a scalar time `t ∈ [0, 1]` (scaled by 1000), `[dim]`.
pub fn time_features<S: Scalar>(t: S, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let x = 1000.0 * t.as_f64();
    let mut out = vec![S::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
        out[i] = S::lit((x * freq).sin());
        out[half + i] = S::lit((x * freq).cos());
    }
    Tensor::vector(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn even_kernel_is_rejected() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(Conv1d::new(&mut ps, "c", 2, 2, 4, &mut rng), Err(Error::Config(_))));
        assert!(matches!(Conv1d::masked(&mut ps, "m", 2, 2, 1, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = AttentionBlock::new(&mut ps, "a", 6, 4, 8, Activation::Silu, &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut ps, "l", 3, 2, &mut rng);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[4, 2]));
        assert!(matches!(l.forward(&mut g, &ps, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut ps, "l", 2, 2, &mut rng);
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(l.forward(&mut g, &ps, x), Err(Error::NonFinite(_))));
    }
}
