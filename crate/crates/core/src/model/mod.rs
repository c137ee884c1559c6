//! Toy pre-norm Transformer (classifier and causal LM) and an MLP
//! classifier, with every normalization site configurable as LayerNorm,
//! RMSNorm, BatchNorm or DyT.
//!
//! Blocks are pre-norm residual: `x <- x + Attn(N(x)); x <- x + FFN(N(x))`,
//! with a final norm before the output head. A DyT site replaces the norm
//! layer one-for-one; nothing else in the block changes.

pub mod checkpoint;
mod config;

pub use config::{alpha0_policy, parse_site, Arch, ModelConfig, NormSite, SiteGroup, SitePos};

use crate::norm::{Mode, NormLayer, NormOut};
use crate::params::{Bindings, ParamId, ParamSet};
use crate::rng::ChaCha8Rng;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

const WEIGHT_INIT_STD: f64 = 0.02;
const MASK_NEG: f64 = -1e9;

/// Inputs a model can consume.
pub enum ModelInput<'a> {
    /// `(B, T, P)` patch vectors or `(B, 1, In)` flat features.
    Continuous(&'a Tensor),
    /// Token ids for the LM, row-major `(B, T)`.
    Tokens { ids: &'a [usize], b: usize, t: usize },
}

/// One capture tap: the tensor entering a norm site and the site's
/// pre-affine output, recorded when taps are requested.
#[derive(Clone, Debug)]
pub struct Tap {
    pub site: NormSite,
    pub input: Tensor,
    pub pre_affine: Tensor,
}

pub struct ForwardOut {
    pub logits: Var,
    pub binds: Bindings,
    pub taps: Vec<Tap>,
}

struct Block {
    norm_attn: NormLayer,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    norm_ffn: NormLayer,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

enum EmbedKind {
    /// Linear patch projection + class token + learned positions.
    Patch { proj: ParamId, bias: ParamId, cls: ParamId, pos: ParamId },
    /// Token table + learned positions, optional learnable output scalar.
    Token { table: ParamId, pos: ParamId, scale: Option<ParamId> },
}

struct Transformer {
    embed: EmbedKind,
    blocks: Vec<Block>,
    final_norm: NormLayer,
    head_w: ParamId,
    head_b: ParamId,
    causal: bool,
}

struct MlpLayer {
    w: ParamId,
    b: ParamId,
    norm: NormLayer,
}

struct Mlp {
    layers: Vec<MlpLayer>,
    head_w: ParamId,
    head_b: ParamId,
}

enum Structure {
    Transformer(Transformer),
    Mlp(Mlp),
}

pub struct Model {
    pub cfg: ModelConfig,
    pub set: ParamSet,
    structure: Structure,
    sites: Vec<NormSite>,
}

fn make_norm(set: &mut ParamSet, cfg: &ModelConfig, site: NormSite, c: usize) -> NormLayer {
    NormLayer::create(
        set,
        &format!("norm.{site}"),
        c,
        cfg.site_kind(site),
        cfg.squasher,
        cfg.site_alpha0(site),
        cfg.learnable_alpha,
    )
}

/// Build a model with deterministic, seed-driven initialization: weights are
/// normal(0, 0.02), biases zero, gamma ones, beta zeros, alpha per site group.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> std::result::Result<Model, String> {
    cfg.validate()?;
    let mut rng = crate::rng::stream(seed, "init");
    let mut set = ParamSet::new();
    let d = cfg.width;
    let mut sites = Vec::new();
    let w = |set: &mut ParamSet, rng: &mut ChaCha8Rng, name: String, shape: Vec<usize>| {
        set.insert(name, Tensor::randn(rng, shape, WEIGHT_INIT_STD))
    };

    let structure = match cfg.arch {
        Arch::TransformerClassifier | Arch::TransformerLm => {
            let causal = cfg.arch == Arch::TransformerLm;
            let embed = if causal {
                let table = w(&mut set, &mut rng, "embed.table".into(), vec![cfg.vocab, d]);
                let pos = w(&mut set, &mut rng, "embed.pos".into(), vec![cfg.seq_len, d]);
                let scale = cfg
                    .embedding_scalar
                    .then(|| set.insert("embed.scale", Tensor::scalar((d as f64).sqrt())));
                EmbedKind::Token { table, pos, scale }
            } else {
                let proj = w(&mut set, &mut rng, "embed.proj".into(), vec![cfg.input_dim, d]);
                let bias = set.insert("embed.bias", Tensor::zeros(vec![d]));
                let cls = w(&mut set, &mut rng, "embed.cls".into(), vec![d]);
                let pos = w(&mut set, &mut rng, "embed.pos".into(), vec![cfg.seq_len + 1, d]);
                EmbedKind::Patch { proj, bias, cls, pos }
            };
            let f = (d as f64 * cfg.ffn_mult) as usize;
            let mut blocks = Vec::with_capacity(cfg.depth);
            for i in 0..cfg.depth {
                let attn_site = NormSite { block: i, pos: SitePos::PreAttn };
                let ffn_site = NormSite { block: i, pos: SitePos::PreFfn };
                sites.push(attn_site);
                sites.push(ffn_site);
                let norm_attn = make_norm(&mut set, cfg, attn_site, d);
                let wq = w(&mut set, &mut rng, format!("blocks.{i}.attn.wq"), vec![d, d]);
                let wk = w(&mut set, &mut rng, format!("blocks.{i}.attn.wk"), vec![d, d]);
                let wv = w(&mut set, &mut rng, format!("blocks.{i}.attn.wv"), vec![d, d]);
                let wo = w(&mut set, &mut rng, format!("blocks.{i}.attn.wo"), vec![d, d]);
                let norm_ffn = make_norm(&mut set, cfg, ffn_site, d);
                let w1 = w(&mut set, &mut rng, format!("blocks.{i}.ffn.w1"), vec![d, f]);
                let b1 = set.insert(format!("blocks.{i}.ffn.b1"), Tensor::zeros(vec![f]));
                let w2 = w(&mut set, &mut rng, format!("blocks.{i}.ffn.w2"), vec![f, d]);
                let b2 = set.insert(format!("blocks.{i}.ffn.b2"), Tensor::zeros(vec![d]));
                blocks.push(Block { norm_attn, wq, wk, wv, wo, norm_ffn, w1, b1, w2, b2 });
            }
            let final_site = NormSite { block: 0, pos: SitePos::Final };
            sites.push(final_site);
            let final_norm = make_norm(&mut set, cfg, final_site, d);
            let out_dim = if causal { cfg.vocab } else { cfg.num_classes };
            let head_w = w(&mut set, &mut rng, "head.w".into(), vec![d, out_dim]);
            let head_b = set.insert("head.b", Tensor::zeros(vec![out_dim]));
            Structure::Transformer(Transformer { embed, blocks, final_norm, head_w, head_b, causal })
        }
        Arch::MlpClassifier => {
            let mut layers = Vec::with_capacity(cfg.depth);
            let mut in_dim = cfg.input_dim;
            for i in 0..cfg.depth {
                let site = NormSite { block: i, pos: SitePos::Hidden };
                sites.push(site);
                let wt = w(&mut set, &mut rng, format!("layers.{i}.w"), vec![in_dim, d]);
                let b = set.insert(format!("layers.{i}.b"), Tensor::zeros(vec![d]));
                let norm = make_norm(&mut set, cfg, site, d);
                layers.push(MlpLayer { w: wt, b, norm });
                in_dim = d;
            }
            let head_w = w(&mut set, &mut rng, "head.w".into(), vec![in_dim, cfg.num_classes]);
            let head_b = set.insert("head.b", Tensor::zeros(vec![cfg.num_classes]));
            Structure::Mlp(Mlp { layers, head_w, head_b })
        }
    };

    Ok(Model { cfg: cfg.clone(), set, structure, sites })
}

impl Model {
    /// Norm sites in forward order; identical across norm kinds by
    /// construction (swapping kinds only changes the per-site computation).
    pub fn norm_sites(&self) -> &[NormSite] {
        &self.sites
    }

    pub fn norm_layer(&self, site: NormSite) -> Option<&NormLayer> {
        match &self.structure {
            Structure::Transformer(t) => {
                for (i, b) in t.blocks.iter().enumerate() {
                    if (NormSite { block: i, pos: SitePos::PreAttn }) == site {
                        return Some(&b.norm_attn);
                    }
                    if (NormSite { block: i, pos: SitePos::PreFfn }) == site {
                        return Some(&b.norm_ffn);
                    }
                }
                (site.pos == SitePos::Final).then_some(&t.final_norm)
            }
            Structure::Mlp(m) => m.layers.iter().enumerate().find_map(|(i, l)| {
                ((NormSite { block: i, pos: SitePos::Hidden }) == site).then_some(&l.norm)
            }),
        }
    }

    pub fn num_trainable_params(&self) -> usize {
        self.set.trainable_scalars()
    }

    /// Run the model. `rng` drives dropout masks (train mode only); taps
    /// record every norm site's (input, pre-affine) pair when requested.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        input: &ModelInput,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        want_taps: bool,
    ) -> Result<ForwardOut> {
        let mut binds = Bindings::new();
        let mut taps = Vec::new();
        let logits = match &self.structure {
            Structure::Transformer(_) => {
                self.forward_transformer(g, input, mode, rng, want_taps, &mut binds, &mut taps)?
            }
            Structure::Mlp(_) => {
                self.forward_mlp(g, input, mode, rng, want_taps, &mut binds, &mut taps)?
            }
        };
        Ok(ForwardOut { logits, binds, taps })
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_site_forward(
        set: &mut ParamSet,
        layer: &NormLayer,
        site: NormSite,
        g: &mut Graph,
        binds: &mut Bindings,
        x: Var,
        mode: Mode,
        want_taps: bool,
        taps: &mut Vec<Tap>,
    ) -> Result<Var> {
        let input = want_taps.then(|| g.value(x).clone());
        let NormOut { y, pre_affine } = layer.forward(g, set, binds, x, mode)?;
        if let Some(input) = input {
            taps.push(Tap { site, input, pre_affine });
        }
        Ok(y)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_transformer(
        &mut self,
        g: &mut Graph,
        input: &ModelInput,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        want_taps: bool,
        binds: &mut Bindings,
        taps: &mut Vec<Tap>,
    ) -> Result<Var> {
        let Structure::Transformer(tf) = &self.structure else { unreachable!() };
        let dropout = if mode == Mode::Train { self.cfg.dropout } else { 0.0 };
        let heads = self.cfg.heads;
        let dh = self.cfg.width / heads;

        let mut x = match (&tf.embed, input) {
            (EmbedKind::Patch { proj, bias, cls, pos }, ModelInput::Continuous(t)) => {
                if t.rank() != 3
                    || t.shape()[2] != self.cfg.input_dim
                    || t.shape()[1] != self.cfg.seq_len
                {
                    return Err(TensorError::ShapeMismatch {
                        op: "forward",
                        detail: format!(
                            "expected (B,{},{}), got {:?}",
                            self.cfg.seq_len,
                            self.cfg.input_dim,
                            t.shape()
                        ),
                    });
                }
                let xv = g.leaf(t);
                let proj = binds.bind(g, &self.set, *proj);
                let bias = binds.bind(g, &self.set, *bias);
                let cls = binds.bind(g, &self.set, *cls);
                let pos = binds.bind(g, &self.set, *pos);
                let h = g.matmul(xv, proj)?;
                let h = g.add(h, bias)?;
                let h = g.prepend_token(h, cls)?;
                g.add(h, pos)?
            }
            (EmbedKind::Token { table, pos, scale }, ModelInput::Tokens { ids, b, t }) => {
                if *t != self.cfg.seq_len {
                    return Err(TensorError::ShapeMismatch {
                        op: "forward",
                        detail: format!("expected T={}, got {t}", self.cfg.seq_len),
                    });
                }
                let table = binds.bind(g, &self.set, *table);
                let pos = binds.bind(g, &self.set, *pos);
                let scale = scale.map(|s| binds.bind(g, &self.set, s));
                let mut h = g.embed(table, ids, *b, *t)?;
                if let Some(sv) = scale {
                    h = g.mul(h, sv)?;
                }
                g.add(h, pos)?
            }
            _ => {
                return Err(TensorError::Invalid(
                    "input kind does not match model architecture".into(),
                ))
            }
        };
        x = g.dropout(x, dropout, rng)?;

        let t_len = g.shape(x)[1];
        let mask = if tf.causal {
            let mut m = Tensor::zeros(vec![t_len, t_len]);
            for i in 0..t_len {
                for j in i + 1..t_len {
                    m.data_mut()[i * t_len + j] = MASK_NEG;
                }
            }
            Some(g.leaf_owned(m))
        } else {
            None
        };

        let blocks: Vec<BlockIds> = tf.blocks.iter().map(BlockIds::from).collect();
        let final_norm = tf.final_norm.clone();
        let (head_w, head_b, causal) = (tf.head_w, tf.head_b, tf.causal);

        for (i, blk) in blocks.iter().enumerate() {
            // attention sub-block
            let site = NormSite { block: i, pos: SitePos::PreAttn };
            let h = Self::norm_site_forward(
                &mut self.set, &blk.norm_attn, site, g, binds, x, mode, want_taps, taps,
            )?;
            let wq = binds.bind(g, &self.set, blk.wq);
            let wk = binds.bind(g, &self.set, blk.wk);
            let wv = binds.bind(g, &self.set, blk.wv);
            let wo = binds.bind(g, &self.set, blk.wo);
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let mut head_outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (from, to) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice_c(q, from, to)?;
                let kh = g.slice_c(k, from, to)?;
                let vh = g.slice_c(v, from, to)?;
                let kt = g.transpose_last(kh)?;
                let mut scores = g.matmul(qh, kt)?;
                scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
                if let Some(mask) = mask {
                    scores = g.add(scores, mask)?;
                }
                let attn = g.softmax(scores, 2)?;
                head_outs.push(g.matmul(attn, vh)?);
            }
            let concat = g.concat_c(&head_outs)?;
            let mut attn_out = g.matmul(concat, wo)?;
            attn_out = g.dropout(attn_out, dropout, rng)?;
            x = g.add(x, attn_out)?;

            // FFN sub-block
            let site = NormSite { block: i, pos: SitePos::PreFfn };
            let h = Self::norm_site_forward(
                &mut self.set, &blk.norm_ffn, site, g, binds, x, mode, want_taps, taps,
            )?;
            let w1 = binds.bind(g, &self.set, blk.w1);
            let b1 = binds.bind(g, &self.set, blk.b1);
            let w2 = binds.bind(g, &self.set, blk.w2);
            let b2 = binds.bind(g, &self.set, blk.b2);
            let h = g.matmul(h, w1)?;
            let h = g.add(h, b1)?;
            let h = g.gelu(h)?;
            let h = g.matmul(h, w2)?;
            let mut ffn_out = g.add(h, b2)?;
            ffn_out = g.dropout(ffn_out, dropout, rng)?;
            x = g.add(x, ffn_out)?;
        }

        let site = NormSite { block: 0, pos: SitePos::Final };
        let h = Self::norm_site_forward(
            &mut self.set, &final_norm, site, g, binds, x, mode, want_taps, taps,
        )?;
        let head_w = binds.bind(g, &self.set, head_w);
        let head_b = binds.bind(g, &self.set, head_b);
        let pooled = if causal { h } else { g.take_token(h, 0)? };
        let logits = g.matmul(pooled, head_w)?;
        g.add(logits, head_b)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_mlp(
        &mut self,
        g: &mut Graph,
        input: &ModelInput,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        want_taps: bool,
        binds: &mut Bindings,
        taps: &mut Vec<Tap>,
    ) -> Result<Var> {
        let Structure::Mlp(mlp) = &self.structure else { unreachable!() };
        let ModelInput::Continuous(t) = input else {
            return Err(TensorError::Invalid("mlp takes continuous input".into()));
        };
        if t.rank() != 3 || t.shape()[1] != 1 || t.shape()[2] != self.cfg.input_dim {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                detail: format!("expected (B,1,{}), got {:?}", self.cfg.input_dim, t.shape()),
            });
        }
        let dropout = if mode == Mode::Train { self.cfg.dropout } else { 0.0 };
        let layers: Vec<_> = mlp.layers.iter().map(|l| (l.w, l.b, l.norm.clone())).collect();
        let (head_w, head_b) = (mlp.head_w, mlp.head_b);

        let mut x = g.leaf(t);
        for (i, (wid, bid, norm)) in layers.iter().enumerate() {
            let w = binds.bind(g, &self.set, *wid);
            let b = binds.bind(g, &self.set, *bid);
            let h = g.matmul(x, w)?;
            let h = g.add(h, b)?;
            let site = NormSite { block: i, pos: SitePos::Hidden };
            let h = Self::norm_site_forward(
                &mut self.set, norm, site, g, binds, h, mode, want_taps, taps,
            )?;
            let h = g.gelu(h)?;
            x = g.dropout(h, dropout, rng)?;
        }
        let head_w = binds.bind(g, &self.set, head_w);
        let head_b = binds.bind(g, &self.set, head_b);
        let pooled = g.take_token(x, 0)?;
        let logits = g.matmul(pooled, head_w)?;
        g.add(logits, head_b)
    }
}

/// Detached copy of a block's handles so the forward loop can mutate
/// `self.set` (BatchNorm running stats) while iterating.
struct BlockIds {
    norm_attn: NormLayer,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    norm_ffn: NormLayer,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl From<&Block> for BlockIds {
    fn from(b: &Block) -> Self {
        BlockIds {
            norm_attn: b.norm_attn.clone(),
            wq: b.wq,
            wk: b.wk,
            wv: b.wv,
            wo: b.wo,
            norm_ffn: b.norm_ffn.clone(),
            w1: b.w1,
            b1: b.b1,
            w2: b.w2,
            b2: b.b2,
        }
    }
}
