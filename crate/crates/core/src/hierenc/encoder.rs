use rand::Rng;

use super::blocks::{argmax_rows, Fusion, MaskedPredictor, Mapper, Predictor, WeightedLayerSum};
use super::config::{EncoderConfig, EncoderDims};
use crate::diffcore::{
    mae_loss, one_hot, uniform_rows, Conv1d, Graph, Linear, ParamStore, Tensor, TransformerStack, TransposedConv1d,
    Var, Activation,
};
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Attribute embeddings read the ground-truth targets.
    Train,
    /// Attribute embeddings read the predictors' outputs.
    Infer,
}

/// Oracle visual features of one clip, at video rate.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput<S> {
    /// `L` matrices of `[T_video, D_l]`.
    pub lip_layers: Vec<Tensor<S>>,
    pub face_id: Vec<S>,
    /// `[T_video, D_e]`.
    pub expr: Tensor<S>,
}

impl<S: Scalar> EncoderInput<S> {
    pub fn video_frames(&self) -> usize {
        self.lip_layers.first().map_or(0, |l| l.rows())
    }
}

/// Attribute targets at mel rate (`2 · T_video` frames).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTargets<S> {
    pub content_units: Vec<usize>,
    pub timbre: Vec<S>,
    /// Standardized pitch.
    pub pitch: Vec<S>,
    /// Raw per-frame energy.
    pub energy: Vec<S>,
}

pub struct ContentOut {
    pub h: Var,
    pub unit_embedding: Var,
    pub logits: Var,
    pub loss: Option<Var>,
    pub units: Vec<usize>,
}

pub struct TimbreOut {
    pub h: Var,
    pub embedding: Var,
    pub prediction: Var,
    pub loss: Option<Var>,
}

pub struct ProsodyOut {
    pub h: Var,
    pub pitch_embedding: Var,
    pub energy_embedding: Var,
    pub pitch: Var,
    /// In raw energy units.
    pub energy: Var,
    pub loss: Option<Var>,
}

/// Everything an encoder pass recorded on the graph.
pub struct EncoderTrace {
    pub mu: Var,
    pub l_c: Var,
    pub l_t: Var,
    pub l_p: Var,
    pub h_l: Var,
    pub content: ContentOut,
    pub timbre: Option<TimbreOut>,
    pub prosody: Option<ProsodyOut>,
}

#[derive(Clone, Debug)]
struct ProsodyHeads {
    pp: Predictor,
    pp_m: MaskedPredictor,
    embed: Conv1d,
}

/// Content → timbre → prosody conditioning encoder producing the mel-rate
/// visual encoding `μ`.
#[derive(Clone, Debug)]
pub struct HierEncoder {
    pub cfg: EncoderConfig,
    pub dims: EncoderDims,
    pub layer_sum: WeightedLayerSum,
    lip_up: TransposedConv1d,
    face_proj: Linear,
    expr_up: TransposedConv1d,
    pub cp: Predictor,
    pub cp_m: MaskedPredictor,
    unit_table: crate::diffcore::ParamId,
    pub c2t: Mapper,
    pub timbre_fusion: Fusion,
    pub tp: Predictor,
    timbre_embed: Linear,
    pub t2p: Mapper,
    pub prosody_fusion: Fusion,
    pitch: ProsodyHeads,
    energy: ProsodyHeads,
    final_stack: TransformerStack,
    out: Linear,
}

fn column<S: Scalar>(g: &mut Graph<S>, v: &[S]) -> Var {
    g.constant(Tensor::matrix(v.len(), 1, v.to_vec()).expect("sized"))
}

fn add_opt<S: Scalar>(g: &mut Graph<S>, terms: &[Option<Var>]) -> Result<Var> {
    let vars: Vec<Var> = terms.iter().flatten().copied().collect();
    match vars.len() {
        0 => Ok(g.constant(Tensor::scalar(S::zero()))),
        1 => Ok(vars[0]),
        _ => g.add_all(&vars),
    }
}

impl HierEncoder {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        cfg: &EncoderConfig,
        dims: EncoderDims,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if dims.lip_layers == 0 || dims.n_units < 2 || !(dims.energy_std > 0.0) {
            return Err(Error::Config("encoder needs lip layers, >= 2 units and a positive energy std".into()));
        }
        let d = cfg.dim;
        let (k, nb) = (cfg.kernel, cfg.conv_blocks);
        let heads = |ps: &mut ParamStore<S>, name: &str, rng: &mut R| -> Result<ProsodyHeads> {
            Ok(ProsodyHeads {
                pp: Predictor::new(ps, &format!("enc.{name}.pp"), d, 1, nb, k, rng)?,
                pp_m: MaskedPredictor::new(ps, &format!("enc.{name}.pp_m"), d, 1, k, rng)?,
                embed: Conv1d::new(ps, &format!("enc.{name}.embed"), 1, d, k, rng)?,
            })
        };
        let unit_table = ps.add(
            "enc.unit_table",
            Tensor::new(
                &[dims.n_units, d],
                (0..dims.n_units * d).map(|_| S::lit(rng.random_range(-1.0..1.0))).collect(),
            )?,
        );
        Ok(Self {
            layer_sum: WeightedLayerSum::new(ps, "enc.layer_sum", dims.lip_layers),
            lip_up: TransposedConv1d::new(ps, "enc.lip_up", dims.d_lip, d, rng),
            face_proj: Linear::new(ps, "enc.face_proj", dims.d_face, d, rng),
            expr_up: TransposedConv1d::new(ps, "enc.expr_up", dims.d_expr, d, rng),
            cp: Predictor::new(ps, "enc.cp", d, dims.n_units, nb, k, rng)?,
            cp_m: MaskedPredictor::new(ps, "enc.cp_m", d, dims.n_units, k, rng)?,
            unit_table,
            c2t: Mapper::new(ps, "enc.c2t", d, cfg.heads, cfg.mapper_layers, rng)?,
            timbre_fusion: Fusion::new(ps, "enc.timbre_fusion", d, k, rng)?,
            tp: Predictor::new(ps, "enc.tp", d, dims.d_timbre, nb, k, rng)?,
            timbre_embed: Linear::new(ps, "enc.timbre_embed", dims.d_timbre, d, rng),
            t2p: Mapper::new(ps, "enc.t2p", d, cfg.heads, cfg.mapper_layers, rng)?,
            prosody_fusion: Fusion::new(ps, "enc.prosody_fusion", d, k, rng)?,
            pitch: heads(ps, "pitch", rng)?,
            energy: heads(ps, "energy", rng)?,
            final_stack: TransformerStack::new(ps, "enc.final", d, cfg.heads, cfg.final_layers, Activation::Silu, rng)?
                .without_positions(),
            out: Linear::new(ps, "enc.out", d, dims.n_mels, rng),
            cfg: cfg.clone(),
            dims,
        })
    }

    fn check_input<S: Scalar>(&self, input: &EncoderInput<S>) -> Result<usize> {
        let tv = input.video_frames();
        if input.lip_layers.len() != self.dims.lip_layers {
            return Err(Error::dim("encode", format!("expected {} lip layers, got {}", self.dims.lip_layers, input.lip_layers.len())));
        }
        if tv == 0 {
            return Err(Error::Validation("empty clip".into()));
        }
        if input.expr.rows() != tv || input.expr.cols() != self.dims.d_expr {
            return Err(Error::dim("encode", format!("expression features {:?} for {tv} frames", input.expr.shape())));
        }
        if input.face_id.len() != self.dims.d_face {
            return Err(Error::dim("encode", format!("face id of width {}", input.face_id.len())));
        }
        Ok(tv)
    }

    /// `h_l`: upsampled weighted sum of the lip layers, `[2·T_video, D]`.
    pub fn lip_front<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, lip_layers: &[Var]) -> Result<Var> {
        let h = self.layer_sum.forward(g, ps, lip_layers, self.cfg.ablation.weighted_sum)?;
        self.lip_up.forward(g, ps, h)
    }

    /// Face identity projected to `D` and broadcast over `frames`; zeros when
    /// the face-id input is ablated.
    pub fn face_stream<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, face: Var, frames: usize) -> Result<Var> {
        if !self.cfg.ablation.face_id {
            return Ok(g.constant(Tensor::zeros(&[frames, self.cfg.dim])));
        }
        let v = self.face_proj.forward_vec(g, ps, face)?;
        Ok(g.broadcast_rows(v, frames))
    }

    pub fn expr_stream<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, expr: Var) -> Result<Var> {
        if !self.cfg.ablation.expr {
            let frames = 2 * g.shape(expr)[0];
            return Ok(g.constant(Tensor::zeros(&[frames, self.cfg.dim])));
        }
        self.expr_up.forward(g, ps, expr)
    }

    pub fn content_stage<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        h_l: Var,
        targets: Option<&[usize]>,
        mode: Mode,
    ) -> Result<ContentOut> {
        let t = g.shape(h_l)[0];
        let logits = self.cp.forward(g, ps, h_l)?;
        let masked = if self.cfg.ablation.masked_pred { Some(self.cp_m.forward(g, ps, h_l)?) } else { None };
        let loss = match targets {
            Some(c) => {
                if c.len() != t {
                    return Err(Error::Validation(format!("{} content targets for {t} frames", c.len())));
                }
                let k = self.dims.n_units;
                let a = S::lit(self.cfg.alpha);
                let hard = one_hot::<S>(c, k)?;
                let mut terms = Vec::new();
                for l in std::iter::once(logits).chain(masked) {
                    let ce = g.cross_entropy(l, hard.clone())?;
                    terms.push(g.scale(ce, a));
                    let ce_u = g.cross_entropy(l, uniform_rows(t, k))?;
                    terms.push(g.scale(ce_u, S::one() - a));
                }
                Some(g.add_all(&terms)?)
            }
            None => None,
        };
        let units = match mode {
            Mode::Train => targets.ok_or_else(|| Error::Validation("train mode needs content targets".into()))?.to_vec(),
            Mode::Infer => argmax_rows(g.value(logits)),
        };
        let table = g.param(ps, self.unit_table);
        let unit_embedding = g.gather(table, &units)?;
        let h = g.add(h_l, unit_embedding)?;
        Ok(ContentOut { h, unit_embedding, logits, loss, units })
    }

    /// `h_c2t` is the mapper output (or the shared pre-stage feature when the
    /// hierarchy is ablated).
    #[allow(clippy::too_many_arguments)]
    pub fn timbre_stage<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        h_fid: Var,
        h_c2t: Var,
        unit_embedding: Var,
        target: Option<&[S]>,
        mode: Mode,
    ) -> Result<TimbreOut> {
        let t = g.shape(h_c2t)[0];
        let fused = self.timbre_fusion.forward(g, ps, h_fid, h_c2t)?;
        let per_frame = self.tp.forward(g, ps, fused)?;
        let prediction = g.mean_rows(per_frame)?;
        let target_var = match target {
            Some(v) => {
                if v.len() != self.dims.d_timbre {
                    return Err(Error::dim("timbre_stage", format!("target of width {}", v.len())));
                }
                Some(g.constant(Tensor::vector(v.to_vec())))
            }
            None => None,
        };
        let loss = match target_var {
            Some(tv) => Some(mae_loss(g, prediction, tv)?),
            None => None,
        };
        let source = match mode {
            Mode::Train => target_var.ok_or_else(|| Error::Validation("train mode needs a timbre target".into()))?,
            Mode::Infer => prediction,
        };
        let e = self.timbre_embed.forward_vec(g, ps, source)?;
        let embedding = g.broadcast_rows(e, t);
        let h = g.add_all(&[h_c2t, embedding, unit_embedding])?;
        Ok(TimbreOut { h, embedding, prediction, loss })
    }

    fn prosody_head<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        heads: &ProsodyHeads,
        fused: Var,
        target: Option<&[S]>,
        norm: (f64, f64),
    ) -> Result<(Var, Var, Option<Var>, Option<Var>)> {
        let t = g.shape(fused)[0];
        let (mean, std) = (S::lit(norm.0), S::lit(norm.1));
        let denorm = |g: &mut Graph<S>, v: Var| -> Result<Var> {
            if norm == (0.0, 1.0) {
                return Ok(v);
            }
            let scaled = g.scale(v, std);
            let offset = g.constant(Tensor::full(&[t, 1], mean));
            g.add(scaled, offset)
        };
        let raw = heads.pp.forward(g, ps, fused)?;
        let pred = denorm(g, raw)?;
        let masked = if self.cfg.ablation.masked_pred {
            let m = heads.pp_m.forward(g, ps, fused)?;
            Some(denorm(g, m)?)
        } else {
            None
        };
        let loss = match target {
            Some(p) => {
                if p.len() != t {
                    return Err(Error::Validation(format!("contour of {} frames for {t} frames", p.len())));
                }
                let tv = column(g, p);
                let a = mae_loss(g, pred, tv)?;
                let b = match masked {
                    Some(m) => Some(mae_loss(g, m, tv)?),
                    None => None,
                };
                Some(add_opt(g, &[Some(a), b])?)
            }
            None => None,
        };
        // embeddings read the normalized contour
        let normalized = target.map(|p| column(g, &p.iter().map(|&v| (v - mean) / std).collect::<Vec<_>>()));
        Ok((pred, raw, normalized, loss))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn prosody_stage<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        h_fe: Var,
        h_c2p: Var,
        timbre_embedding: Option<Var>,
        targets: Option<(&[S], &[S])>,
        mode: Mode,
    ) -> Result<ProsodyOut> {
        let fused = self.prosody_fusion.forward(g, ps, h_fe, h_c2p)?;
        let (pt, et) = match (mode, targets) {
            (Mode::Train, None) => return Err(Error::Validation("train mode needs prosody targets".into())),
            (_, Some((p, e))) => (Some(p), Some(e)),
            (_, None) => (None, None),
        };
        let (pitch, pitch_raw, pitch_tf, lp) = self.prosody_head(g, ps, &self.pitch, fused, pt, (0.0, 1.0))?;
        let en = (self.dims.energy_mean, self.dims.energy_std);
        let (energy, energy_raw, energy_tf, le) = self.prosody_head(g, ps, &self.energy, fused, et, en)?;
        let (pitch_in, energy_in) = match (mode, pitch_tf, energy_tf) {
            (Mode::Train, Some(p), Some(e)) => (p, e),
            _ => (pitch_raw, energy_raw),
        };
        let pitch_embedding = self.pitch.embed.forward(g, ps, pitch_in)?;
        let energy_embedding = self.energy.embed.forward(g, ps, energy_in)?;
        let mut terms = vec![h_c2p, pitch_embedding, energy_embedding];
        terms.extend(timbre_embedding);
        let h = g.add_all(&terms)?;
        let loss = match (lp, le) {
            (Some(a), Some(b)) => Some(g.add(a, b)?),
            _ => None,
        };
        Ok(ProsodyOut { h, pitch_embedding, energy_embedding, pitch, energy, loss })
    }

    /// Attention stack then projection to mel width. The stack is
    /// position-free, so a constant hidden sequence yields identical rows.
    pub fn finalize<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, h: Var) -> Result<Var> {
        let h = self.final_stack.forward(g, ps, h)?;
        self.out.forward(g, ps, h)
    }

    /// Full pass in the fixed order content → timbre → prosody. Train mode
    /// requires `targets`; infer mode never reads them and reports zero losses.
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        input: &EncoderInput<S>,
        targets: Option<&EncoderTargets<S>>,
        mode: Mode,
    ) -> Result<EncoderTrace> {
        let tv = self.check_input(input)?;
        let targets = match mode {
            Mode::Train => Some(targets.ok_or_else(|| Error::Validation("train mode needs attribute targets".into()))?),
            Mode::Infer => None,
        };
        if let Some(tg) = targets {
            let n = 2 * tv;
            if tg.content_units.len() != n || tg.pitch.len() != n || tg.energy.len() != n {
                return Err(Error::Validation(format!("targets must cover {n} mel frames ({tv} video frames)")));
            }
        }
        let ab = self.cfg.ablation;
        let lips: Vec<Var> = input.lip_layers.iter().map(|l| g.constant(l.clone())).collect();
        let h_l = self.lip_front(g, ps, &lips)?;
        let t = g.shape(h_l)[0];

        let content = self.content_stage(g, ps, h_l, targets.map(|x| x.content_units.as_slice()), mode)?;
        let mut h = content.h;

        let timbre = if ab.timbre_stage {
            let face = g.constant(Tensor::vector(input.face_id.clone()));
            let h_fid = self.face_stream(g, ps, face, t)?;
            let h_c2t = if ab.hier { self.c2t.forward(g, ps, h, true)? } else { h_l };
            let out = self.timbre_stage(g, ps, h_fid, h_c2t, content.unit_embedding, targets.map(|x| x.timbre.as_slice()), mode)?;
            if ab.hier {
                h = out.h;
            }
            Some(out)
        } else {
            None
        };

        let prosody = if ab.prosody_stage {
            let expr = g.constant(input.expr.clone());
            let h_fe = self.expr_stream(g, ps, expr)?;
            let h_c2p = if ab.hier { self.t2p.forward(g, ps, h, true)? } else { h_l };
            let emb_t = if ab.hier { timbre.as_ref().map(|x| x.embedding) } else { None };
            let tg = targets.map(|x| (x.pitch.as_slice(), x.energy.as_slice()));
            let out = self.prosody_stage(g, ps, h_fe, h_c2p, emb_t, tg, mode)?;
            if ab.hier {
                h = out.h;
            }
            Some(out)
        } else {
            None
        };

        if !ab.hier {
            // attributes modeled in parallel from the shared lip feature
            let mut terms = vec![h_l, content.unit_embedding];
            terms.extend(timbre.as_ref().map(|x| x.embedding));
            if let Some(p) = &prosody {
                terms.push(p.pitch_embedding);
                terms.push(p.energy_embedding);
            }
            h = g.add_all(&terms)?;
        }

        let mu = self.finalize(g, ps, h)?;
        let l_c = add_opt(g, &[content.loss])?;
        let l_t = add_opt(g, &[timbre.as_ref().and_then(|x| x.loss)])?;
        let l_p = add_opt(g, &[prosody.as_ref().and_then(|x| x.loss)])?;
        Ok(EncoderTrace { mu, l_c, l_t, l_p, h_l, content, timbre, prosody })
    }

    pub fn layer_weights<S: Scalar>(&self, ps: &ParamStore<S>) -> Vec<f64> {
        self.layer_sum.softmax_weights(ps)
    }
}

/// Loss values of one encoder pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EncoderLosses {
    pub l_c: f64,
    pub l_t: f64,
    pub l_p: f64,
}

/// Convenience wrapper: runs [`HierEncoder::encode`] on a fresh graph and
/// returns `μ` with the loss values.
pub fn encode<S: Scalar>(
    enc: &HierEncoder,
    ps: &ParamStore<S>,
    input: &EncoderInput<S>,
    targets: Option<&EncoderTargets<S>>,
    mode: Mode,
) -> Result<(Tensor<S>, EncoderLosses)> {
    let mut g = Graph::new();
    let tr = enc.encode(&mut g, ps, input, targets, mode)?;
    let v = |x: Var| g.value(x).data()[0].as_f64();
    let losses = EncoderLosses { l_c: v(tr.l_c), l_t: v(tr.l_t), l_p: v(tr.l_p) };
    Ok((g.value(tr.mu).clone(), losses))
}
