//! Point-to-point refiner. Coarse points are embedded once; each stage runs
//! a transformer block (self-attention over points, cross-attention to image
//! tokens, feed-forward) and a per-point offset head, and the offsets are
//! accumulated onto the coordinates.

use rand::Rng;

use crate::autodiff::nn::{Init, Linear, MultiHeadAttention, RmsNorm};
use crate::autodiff::{Graph, Matrix, ParamStore, Real, Var};
use crate::config::RefinerConfig;
use crate::encoder::ImageTokens;
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::i2p::CoarseCompletion;

/// Per-stage point sets and the offsets between them.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementTrace {
    /// `stages[0]` is the coarse cloud, `stages[L]` the completion.
    pub stages: Vec<PointCloud>,
    pub offsets: Vec<Vec<Point3>>,
}

impl RefinementTrace {
    pub fn final_cloud(&self) -> &PointCloud {
        self.stages.last().expect("trace has at least one stage")
    }

    /// Checks `stages[l + 1] == stages[l] + offsets[l]` exactly.
    pub fn is_consistent(&self) -> bool {
        self.stages.len() == self.offsets.len() + 1
            && self.offsets.iter().enumerate().all(|(l, off)| {
                let (a, b) = (self.stages[l].points(), self.stages[l + 1].points());
                a.len() == off.len()
                    && b.len() == off.len()
                    && a.iter().zip(off).zip(b).all(|((p, d), q)| (0..3).all(|k| p[k] + d[k] == q[k]))
            })
    }
}

#[derive(Clone, Debug)]
pub struct RefineBlock {
    pub self_norm: RmsNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: RmsNorm,
    pub context_norm: RmsNorm,
    pub cross_attn: MultiHeadAttention,
    pub ffn_norm: RmsNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl RefineBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &RefinerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.embed_width;
        Self {
            self_norm: RmsNorm::new(store, &format!("{name}.self_norm"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, d, cfg.heads, Init::FanIn, rng),
            cross_norm: RmsNorm::new(store, &format!("{name}.cross_norm"), d),
            context_norm: RmsNorm::new(store, &format!("{name}.context_norm"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, d, cfg.heads, Init::FanIn, rng),
            ffn_norm: RmsNorm::new(store, &format!("{name}.ffn_norm"), d),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, cfg.ffn_width, true, Init::FanIn, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), cfg.ffn_width, d, true, Init::FanIn, rng),
        }
    }

    /// `x` is `[n, D]`, `context` the `[m, D]` projected image tokens.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, context: Var) -> Var {
        let h = self.self_norm.forward(g, x);
        let a = self.self_attn.forward(g, h, h);
        let x = g.add(x, a);

        let h = self.cross_norm.forward(g, x);
        let c = self.context_norm.forward(g, context);
        let a = self.cross_attn.forward(g, h, c);
        let x = g.add(x, a);

        let h = self.ffn_norm.forward(g, x);
        let h = self.ffn_in.forward(g, h);
        let h = g.silu(h);
        let h = self.ffn_out.forward(g, h);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct OffsetHead {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct Refiner {
    cfg: RefinerConfig,
    pub embed: Linear,
    pub token_proj: Option<Linear>,
    pub blocks: Vec<RefineBlock>,
    pub heads: Vec<OffsetHead>,
}

/// Tape nodes of a refinement pass.
#[derive(Clone, Debug)]
pub struct RefineVars {
    pub stages: Vec<Var>,
    pub offsets: Vec<Var>,
}

impl Refiner {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &RefinerConfig,
        token_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.n_stages == 0 {
            return Err(Error::config("refiner needs at least one stage"));
        }
        if cfg.heads == 0 || cfg.embed_width % cfg.heads != 0 {
            return Err(Error::config(format!(
                "refiner: {} heads do not divide embed width {}",
                cfg.heads, cfg.embed_width
            )));
        }
        let d = cfg.embed_width;
        let embed = Linear::new(store, "refiner.embed", 3, d, true, Init::FanIn, rng);
        let token_proj = (token_width != d)
            .then(|| Linear::new(store, "refiner.token_proj", token_width, d, true, Init::FanIn, rng));
        let blocks = (0..cfg.n_stages)
            .map(|l| RefineBlock::new(store, &format!("refiner.block{l}"), cfg, rng))
            .collect();
        let n_heads = if cfg.share_offset_heads { 1 } else { cfg.n_stages };
        let heads = (0..n_heads)
            .map(|l| OffsetHead {
                hidden: Linear::new(store, &format!("refiner.offset{l}.hidden"), d, cfg.ffn_width, true, Init::FanIn, rng),
                out: Linear::new(store, &format!("refiner.offset{l}.out"), cfg.ffn_width, 3, true, Init::Zero, rng),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            token_proj,
            blocks,
            heads,
        })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.cfg
    }

    /// Per-point affine map from coordinates to `[n, D]` embeddings.
    pub fn embed_points<T: Real>(&self, g: &mut Graph<T>, points: Var) -> Var {
        self.embed.forward(g, points)
    }

    /// Projects image tokens to the embedding width when they differ.
    pub fn project_tokens<T: Real>(&self, g: &mut Graph<T>, tokens: Var) -> Result<Var> {
        let c = g.shape(tokens).1;
        match &self.token_proj {
            Some(p) if p.in_dim == c => Ok(p.forward(g, tokens)),
            None if c == self.cfg.embed_width => Ok(tokens),
            _ => Err(Error::config(format!(
                "refiner was built for {}-wide tokens, got {c}",
                self.token_proj.as_ref().map_or(self.cfg.embed_width, |p| p.in_dim)
            ))),
        }
    }

    pub fn refine_block<T: Real>(&self, g: &mut Graph<T>, stage: usize, x: Var, context: Var) -> Result<Var> {
        let block = self
            .blocks
            .get(stage)
            .ok_or_else(|| Error::invalid(format!("stage {stage} out of range 0..{}", self.cfg.n_stages)))?;
        let (xw, cw) = (g.shape(x).1, g.shape(context).1);
        if xw != self.cfg.embed_width || cw != self.cfg.embed_width {
            return Err(Error::config(format!(
                "refine block expects width {}, got points {xw} and tokens {cw}",
                self.cfg.embed_width
            )));
        }
        Ok(block.forward(g, x, context))
    }

    pub fn predict_offsets<T: Real>(&self, g: &mut Graph<T>, x: Var, stage: usize) -> Result<Var> {
        if stage >= self.cfg.n_stages {
            return Err(Error::invalid(format!("stage {stage} out of range 0..{}", self.cfg.n_stages)));
        }
        let head = &self.heads[if self.cfg.share_offset_heads { 0 } else { stage }];
        let h = head.hidden.forward(g, x);
        let h = g.silu(h);
        Ok(head.out.forward(g, h))
    }

    /// Runs all stages on the tape starting from `coarse` (`[n, 3]`).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, coarse: Var, tokens: Var) -> Result<RefineVars> {
        if g.shape(coarse).1 != 3 || g.shape(coarse).0 == 0 {
            return Err(Error::invalid(format!("coarse points must be [n, 3], got {:?}", g.shape(coarse))));
        }
        let context = self.project_tokens(g, tokens)?;
        let mut x = self.embed_points(g, coarse);
        let mut stages = vec![coarse];
        let mut offsets = Vec::with_capacity(self.cfg.n_stages);
        for l in 0..self.cfg.n_stages {
            x = self.refine_block(g, l, x, context)?;
            g.ensure_finite(x, &format!("refiner stage {l}"))?;
            let d = self.predict_offsets(g, x, l)?;
            let p = g.add(*stages.last().expect("nonempty"), d);
            offsets.push(d);
            stages.push(p);
        }
        Ok(RefineVars { stages, offsets })
    }
}

/// Builds the trace from tape values. Coordinates are accumulated in `f64`
/// so each stage is exactly the previous stage plus its offsets.
pub fn trace_from_graph<T: Real>(g: &Graph<T>, coarse: &PointCloud, vars: &RefineVars) -> Result<RefinementTrace> {
    let mut stages = vec![coarse.clone()];
    let mut offsets = Vec::with_capacity(vars.offsets.len());
    for &d in &vars.offsets {
        let off: Vec<Point3> = g
            .value(d)
            .to_f64()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let prev = stages.last().expect("nonempty").points();
        let next = prev
            .iter()
            .zip(&off)
            .map(|(p, o)| [p[0] + o[0], p[1] + o[1], p[2] + o[2]])
            .collect();
        stages.push(PointCloud::new(next).map_err(|e| Error::numerical("refiner update", e.to_string()))?);
        offsets.push(off);
    }
    let trace = RefinementTrace { stages, offsets };
    debug_assert!(trace.is_consistent());
    Ok(trace)
}

/// Inference refinement of a coarse completion with the given tokens.
pub fn p2p_refine<T: Real>(
    store: &ParamStore<T>,
    refiner: &Refiner,
    coarse: &CoarseCompletion,
    tokens: &ImageTokens<T>,
) -> Result<RefinementTrace> {
    let mut g = Graph::inference(store);
    let p0 = g.input(Matrix::from_cloud(&coarse.points));
    let t = g.input(tokens.tokens.clone());
    let vars = refiner.forward(&mut g, p0, t)?;
    trace_from_graph(&g, &coarse.points, &vars)
}
