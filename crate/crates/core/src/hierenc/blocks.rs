use rand::Rng;

use crate::diffcore::{Activation, Conv1d, Graph, Linear, ParamId, ParamStore, Tensor, TransformerStack, Var};
use crate::error::{Error, Result};
use crate::Scalar;

/// Softmax-weighted combination of per-layer feature matrices.
#[derive(Clone, Debug)]
pub struct WeightedLayerSum {
    pub weights: ParamId,
    pub layers: usize,
}

impl WeightedLayerSum {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, layers: usize) -> Self {
        let weights = ps.add(format!("{name}.weights"), Tensor::zeros(&[layers]));
        Self { weights, layers }
    }

    /// `Σ_ℓ softmax(w)_ℓ · layer_ℓ`, or the last layer verbatim when
    /// `enabled` is false.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, layers: &[Var], enabled: bool) -> Result<Var> {
        if layers.len() != self.layers {
            return Err(Error::dim("weighted_layer_sum", format!("expected {} layers, got {}", self.layers, layers.len())));
        }
        let last = layers[layers.len() - 1];
        if !enabled {
            return Ok(last);
        }
        let shape = g.shape(last).to_vec();
        if layers.iter().any(|&l| g.shape(l) != shape.as_slice()) {
            return Err(Error::dim("weighted_layer_sum", "layers differ in shape"));
        }
        let n = shape.iter().product::<usize>();
        let cols = layers.iter().map(|&l| g.reshape(l, &[n, 1])).collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_cols(&cols)?;
        let w = g.param(ps, self.weights);
        let w = g.reshape(w, &[1, self.layers])?;
        let p = g.softmax_rows(w)?;
        let out = g.matmul_ext(stacked, p, true)?;
        g.reshape(out, &shape)
    }

    pub fn softmax_weights<S: Scalar>(&self, ps: &ParamStore<S>) -> Vec<f64> {
        let w: Vec<f64> = ps.value(self.weights).data().iter().map(|v| v.as_f64()).collect();
        let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = w.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }
}

/// Residual same-width convolution blocks: `h ← h + SiLU(conv(h))`.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub convs: Vec<Conv1d>,
}

impl ConvStack {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        blocks: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let convs = (0..blocks)
            .map(|i| Conv1d::new(ps, &format!("{name}.{i}"), dim, dim, kernel, rng))
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.convs {
            let y = c.forward(g, ps, h)?;
            let y = g.silu(y);
            h = g.add(h, y)?;
        }
        Ok(h)
    }
}

/// Convolution blocks followed by a per-frame linear head.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub body: ConvStack,
    pub head: Linear,
}

impl Predictor {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        out: usize,
        blocks: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            body: ConvStack::new(ps, &format!("{name}.body"), dim, blocks, kernel, rng)?,
            head: Linear::new(ps, &format!("{name}.head"), dim, out, rng),
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.body.forward(g, ps, x)?;
        self.head.forward(g, ps, h)
    }
}

/// One center-masked convolution, SiLU, then a per-frame linear head; the
/// prediction at frame `t` depends only on neighbouring frames.
#[derive(Clone, Debug)]
pub struct MaskedPredictor {
    pub conv: Conv1d,
    pub head: Linear,
}

impl MaskedPredictor {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::masked(ps, &format!("{name}.conv"), dim, dim, kernel, rng)?,
            head: Linear::new(ps, &format!("{name}.head"), dim, out, rng),
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, ps, x)?;
        let h = g.silu(h);
        self.head.forward(g, ps, h)
    }
}

/// Channel concatenation of two `[T, D]` streams projected back to `D` by a
/// convolution, followed by a residual convolution block.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub project: Conv1d,
    pub refine: Conv1d,
    pub dim: usize,
}

impl Fusion {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            project: Conv1d::new(ps, &format!("{name}.project"), 2 * dim, dim, kernel, rng)?,
            refine: Conv1d::new(ps, &format!("{name}.refine"), dim, dim, kernel, rng)?,
            dim,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
        if sa != sb {
            return Err(Error::dim("fusion", format!("{sa:?} vs {sb:?}")));
        }
        let x = g.concat_cols(&[a, b])?;
        let y = self.project.forward(g, ps, x)?;
        let z = g.silu(y);
        let z = self.refine.forward(g, ps, z)?;
        g.add(y, z)
    }

    /// Sets the projection to copy the first input and zeroes everything else,
    /// so `forward(a, b) == a`.
    pub fn init_passthrough<S: Scalar>(&self, ps: &mut ParamStore<S>) {
        let centre = self.project.offsets.iter().position(|&o| o == 0).expect("odd kernel");
        let w = ps.value_mut(self.project.weight);
        w.data_mut().iter_mut().for_each(|v| *v = S::zero());
        for c in 0..self.dim {
            let r = self.project.weight_row(centre, c);
            w.set(r, c, S::one());
        }
        for id in [self.project.bias, self.refine.weight, self.refine.bias] {
            ps.value_mut(id).data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }
}

/// Attention mapper between stages; identity when disabled.
#[derive(Clone, Debug)]
pub struct Mapper {
    pub stack: TransformerStack,
}

impl Mapper {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self { stack: TransformerStack::new(ps, name, dim, heads, layers, Activation::Silu, rng)? })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var, enabled: bool) -> Result<Var> {
        if enabled {
            self.stack.forward(g, ps, x)
        } else {
            Ok(x)
        }
    }
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows<S: Scalar>(t: &Tensor<S>) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
        })
        .collect()
}
