//! Action-conditioned denoiser.
//!
//! Two stream tokens (the noisy target and the current context frame) pass
//! through pre-norm residual blocks. Each block has an attention sublayer,
//! where both stream tokens attend over themselves and the projected memory
//! of past frames, and an MLP sublayer. The action and the diffusion timestep
//! share one condition vector which drives per-block scale, shift and gate
//! modulation. The model predicts the clean target directly.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Group, ParamId, ParamStore, Real, Tensor, Var};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::sim::Action;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// Past frames attended to, in addition to the current context frame.
    pub memory: usize,
    pub embed: usize,
    pub init_seed: u64,
    /// Action bounds used to normalize actions before embedding.
    pub v_max: f64,
    pub w_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { obs_dim: 32, hidden: 128, blocks: 4, memory: 3, embed: 32, init_seed: 0, v_max: 0.5, w_max: 0.5 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.hidden == 0 || self.blocks == 0 || self.embed == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.embed % 2 == 1 || self.embed < 4 {
            return Err(Error::Config(format!("embedding width must be even and at least 4, got {}", self.embed)));
        }
        if !(self.v_max > 0.0 && self.w_max > 0.0) {
            return Err(Error::Config("action bounds must be positive".into()));
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;
/// Normalized actions in [-1, 1] are spread over this many radians before
/// the sinusoidal bands.
const ACTION_GAIN: f64 = std::f64::consts::PI;

/// Interleaved `[sin(f_0 x), cos(f_0 x), sin(f_1 x), ...]` with `width / 2`
/// frequencies spaced geometrically from 1 down to 1e-4 (wavelengths 1..1e4).
pub fn sincos_features(x: f64, width: usize) -> Vec<f64> {
    let bands = width / 2;
    let mut out = Vec::with_capacity(width);
    for i in 0..bands {
        let f = if bands == 1 { 1.0 } else { 1e-4f64.powf(i as f64 / (bands - 1) as f64) };
        out.push((x * f).sin());
        out.push((x * f).cos());
    }
    out
}

/// Raw condition features `[sincos(v) | sincos(w) | sincos(t)]`, one row per action.
pub fn condition_features<T: Real>(cfg: &ModelConfig, actions: &[Action], t: usize) -> Tensor<T> {
    let e = cfg.embed;
    let tf = sincos_features(t as f64, e);
    let mut data = Vec::with_capacity(actions.len() * 3 * e);
    for a in actions {
        data.extend(sincos_features(a.v / cfg.v_max * ACTION_GAIN, e).into_iter().map(T::lit));
        data.extend(sincos_features(a.w / cfg.w_max * ACTION_GAIN, e).into_iter().map(T::lit));
        data.extend(tf.iter().map(|&v| T::lit(v)));
    }
    Tensor::new(actions.len(), 3 * e, data).expect("non-empty batch")
}

/// Everything the denoiser conditions on besides the noisy target.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning<T> {
    /// Current frame, `B x D`.
    pub context: Tensor<T>,
    /// Past frames, most recent first, each `B x D`; exactly `memory` entries.
    pub memory: Vec<Tensor<T>>,
    pub actions: Vec<Action>,
}

impl<T: Real> Conditioning<T> {
    /// Build from per-sample history, oldest first and ending with the current
    /// frame. Short histories are zero-padded at the far end.
    pub fn from_histories(histories: &[Vec<Vec<T>>], actions: &[Action], memory: usize) -> Result<Self> {
        let b = histories.len();
        if b == 0 || actions.len() != b {
            return Err(Error::shape("Conditioning", format!("{b} histories vs {} actions", actions.len())));
        }
        let dim = histories[0].last().map(Vec::len).ok_or_else(|| Error::shape("Conditioning", "empty history"))?;
        let mut ctx = Vec::with_capacity(b * dim);
        let mut mem: Vec<Vec<T>> = vec![Vec::with_capacity(b * dim); memory];
        for h in histories {
            let n = h.len();
            if n == 0 || h.iter().any(|f| f.len() != dim) {
                return Err(Error::shape("Conditioning", "ragged history"));
            }
            ctx.extend_from_slice(&h[n - 1]);
            for (j, slot) in mem.iter_mut().enumerate() {
                match n.checked_sub(2 + j) {
                    Some(i) => slot.extend_from_slice(&h[i]),
                    None => slot.extend(std::iter::repeat_n(T::zero(), dim)),
                }
            }
        }
        Ok(Conditioning {
            context: Tensor::new(b, dim, ctx)?,
            memory: mem.into_iter().map(|d| Tensor::new(b, dim, d)).collect::<Result<_>>()?,
            actions: actions.to_vec(),
        })
    }

    pub fn batch(&self) -> usize {
        self.actions.len()
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    mod_w: ParamId,
    mod_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    cond_w1: ParamId,
    cond_b1: ParamId,
    cond_w2: ParamId,
    cond_b2: ParamId,
    in_w: ParamId,
    in_b: ParamId,
    ctx_w: ParamId,
    ctx_b: ParamId,
    mem_w: ParamId,
    mem_b: ParamId,
    mem_pos: Vec<ParamId>,
    blocks: Vec<BlockIds>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Denoiser with its parameters.
#[derive(Clone, Debug)]
pub struct WorldModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    ids: Ids,
}

struct Init {
    r: Rng,
}

impl Init {
    fn gauss<T: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Tensor<T> {
        let n = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| T::lit(n.sample(&mut self.r))).collect();
        Tensor::new(rows, cols, data).expect("positive extents")
    }

    fn fan_in<T: Real>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        self.gauss(rows, cols, (1.0 / rows as f64).sqrt())
    }
}

impl<T: Real> WorldModel<T> {
    /// Fresh model with weights drawn from `N(0, 1/fan_in)`, zero biases and
    /// zero-gate modulation, so every block starts as the identity.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, h, e) = (config.obs_dim, config.hidden, config.embed);
        let mut init = Init { r: Rng::seed_from_u64(rng::substream_seed(config.init_seed, "model/init")) };
        let mut p = ParamStore::new();
        let bb = Group::Backbone;
        let ad = Group::AdaLn;
        let zeros_row = |n: usize| Tensor::<T>::zeros(1, n);

        let cond_w1 = p.insert("adaln.cond.w1", ad, init.fan_in(3 * e, h))?;
        let cond_b1 = p.insert("adaln.cond.b1", ad, zeros_row(h))?;
        let cond_w2 = p.insert("adaln.cond.w2", ad, init.fan_in(h, h))?;
        let cond_b2 = p.insert("adaln.cond.b2", ad, zeros_row(h))?;
        let in_w = p.insert("backbone.in.w", bb, init.fan_in(d, h))?;
        let in_b = p.insert("backbone.in.b", bb, zeros_row(h))?;
        let ctx_w = p.insert("backbone.ctx.w", bb, init.fan_in(d, h))?;
        let ctx_b = p.insert("backbone.ctx.b", bb, zeros_row(h))?;
        let mem_w = p.insert("backbone.mem.w", bb, init.fan_in(d, h))?;
        let mem_b = p.insert("backbone.mem.b", bb, zeros_row(h))?;
        let mut mem_pos = Vec::with_capacity(config.memory);
        for j in 0..config.memory {
            mem_pos.push(p.insert(&format!("backbone.mem.pos{j}"), bb, init.gauss(1, h, 0.5))?);
        }
        let mut blocks = Vec::with_capacity(config.blocks);
        for k in 0..config.blocks {
            let name = |s: &str| format!("block{k}.{s}");
            // scale | shift | gate for the attention and MLP sublayers
            let mut mod_bias = vec![T::zero(); 6 * h];
            for i in (0..h).chain(3 * h..4 * h) {
                mod_bias[i] = T::one();
            }
            blocks.push(BlockIds {
                mod_w: p.insert(&format!("adaln.{}", name("mod.w")), ad, Tensor::zeros(h, 6 * h))?,
                mod_b: p.insert(&format!("adaln.{}", name("mod.b")), ad, Tensor::row(mod_bias))?,
                wq: p.insert(&format!("backbone.{}", name("attn.wq")), bb, init.fan_in(h, h))?,
                wk: p.insert(&format!("backbone.{}", name("attn.wk")), bb, init.fan_in(h, h))?,
                wv: p.insert(&format!("backbone.{}", name("attn.wv")), bb, init.fan_in(h, h))?,
                wo: p.insert(&format!("backbone.{}", name("attn.wo")), bb, init.fan_in(h, h))?,
                bo: p.insert(&format!("backbone.{}", name("attn.bo")), bb, zeros_row(h))?,
                w1: p.insert(&format!("backbone.{}", name("mlp.w1")), bb, init.fan_in(h, 4 * h))?,
                b1: p.insert(&format!("backbone.{}", name("mlp.b1")), bb, zeros_row(4 * h))?,
                w2: p.insert(&format!("backbone.{}", name("mlp.w2")), bb, init.fan_in(4 * h, h))?,
                b2: p.insert(&format!("backbone.{}", name("mlp.b2")), bb, zeros_row(h))?,
            });
        }
        let out_w = p.insert("backbone.out.w", bb, init.fan_in(h, d))?;
        let out_b = p.insert("backbone.out.b", bb, zeros_row(d))?;
        let ids = Ids {
            cond_w1,
            cond_b1,
            cond_w2,
            cond_b2,
            in_w,
            in_b,
            ctx_w,
            ctx_b,
            mem_w,
            mem_b,
            mem_pos,
            blocks,
            out_w,
            out_b,
        };
        Ok(WorldModel { config, params: p, ids })
    }

    /// Same architecture with parameters taken from `params`, which must
    /// match this configuration name-for-name and shape-for-shape.
    pub fn with_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let template = WorldModel::<T>::new(config)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((_, a), (_, b)) in template.params.iter().zip(params.iter()) {
            if a.name != b.name || a.group != b.group || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!("tensor {} does not match the model layout", b.name)));
            }
        }
        Ok(WorldModel { params, ..template })
    }

    pub fn cast<U: Real>(&self) -> WorldModel<U> {
        WorldModel { config: self.config.clone(), params: self.params.cast(), ids: self.ids.clone() }
    }

    /// Condition vector `c` for each row: a two-layer network over the
    /// sinusoidal action and timestep features.
    pub fn embed_condition(&self, g: &mut Graph<T>, actions: &[Action], t: usize) -> Result<Var> {
        let feats = g.constant(condition_features(&self.config, actions, t));
        let w1 = g.param(&self.params, self.ids.cond_w1);
        let b1 = g.param(&self.params, self.ids.cond_b1);
        let w2 = g.param(&self.params, self.ids.cond_w2);
        let b2 = g.param(&self.params, self.ids.cond_b2);
        let h = g.matmul(feats, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let c = g.matmul(h, w2)?;
        g.add_row(c, b2)
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = g.param(&self.params, w);
        let bv = g.param(&self.params, b);
        let y = g.matmul(x, wv)?;
        g.add_row(y, bv)
    }

    /// Clean-target estimate for a batch: `noisy` is `B x D`.
    pub fn forward(&self, g: &mut Graph<T>, noisy: Var, t: usize, cond: &Conditioning<T>) -> Result<Var> {
        let cfg = &self.config;
        let (b, h) = (cond.batch(), cfg.hidden);
        let expect = (b, cfg.obs_dim);
        if g.shape(noisy) != expect || cond.context.shape() != expect {
            return Err(Error::shape(
                "denoise",
                format!("noisy {:?} / context {:?}, expected {expect:?}", g.shape(noisy), cond.context.shape()),
            ));
        }
        if cond.memory.len() != cfg.memory || cond.memory.iter().any(|m| m.shape() != expect) {
            return Err(Error::shape("denoise", format!("memory must be {} frames of {expect:?}", cfg.memory)));
        }

        let c = self.embed_condition(g, &cond.actions, t)?;
        let c_act = g.gelu(c);

        let x_tok = self.linear(g, noisy, self.ids.in_w, self.ids.in_b)?;
        let ctx = g.constant(cond.context.clone());
        let c_tok = self.linear(g, ctx, self.ids.ctx_w, self.ids.ctx_b)?;
        let mut mem_tok = Vec::with_capacity(cfg.memory);
        for (j, m) in cond.memory.iter().enumerate() {
            let mv = g.constant(m.clone());
            let tok = self.linear(g, mv, self.ids.mem_w, self.ids.mem_b)?;
            let pos = g.param(&self.params, self.ids.mem_pos[j]);
            let tok = g.add_row(tok, pos)?;
            mem_tok.push(g.layer_norm(tok, LN_EPS));
        }
        let mut stream = g.concat_rows(&[x_tok, c_tok])?;
        let inv_sqrt_h = 1.0 / (h as f64).sqrt();

        for blk in &self.ids.blocks {
            let m = self.linear(g, c_act, blk.mod_w, blk.mod_b)?;
            let chunk = |i: usize, g: &mut Graph<T>| -> Result<Var> {
                let s = g.slice_cols(m, i * h, (i + 1) * h)?;
                g.concat_rows(&[s, s])
            };
            let (scale1, shift1, gate1) = (chunk(0, g)?, chunk(1, g)?, chunk(2, g)?);
            let (scale2, shift2, gate2) = (chunk(3, g)?, chunk(4, g)?, chunk(5, g)?);

            // attention
            let n = g.layer_norm(stream, LN_EPS);
            let n = g.mul(n, scale1)?;
            let hdn = g.add(n, shift1)?;
            let wq = g.param(&self.params, blk.wq);
            let wk = g.param(&self.params, blk.wk);
            let wv = g.param(&self.params, blk.wv);
            let q = g.matmul(hdn, wq)?;
            let ks = g.matmul(hdn, wk)?;
            let vs = g.matmul(hdn, wv)?;
            let mut keys = Vec::with_capacity(2 + cfg.memory);
            let mut vals = Vec::with_capacity(2 + cfg.memory);
            for (lo, hi) in [(0, b), (b, 2 * b)] {
                let k = g.slice_rows(ks, lo, hi)?;
                let v = g.slice_rows(vs, lo, hi)?;
                keys.push(g.concat_rows(&[k, k])?);
                vals.push(g.concat_rows(&[v, v])?);
            }
            for &mt in &mem_tok {
                let k = g.matmul(mt, wk)?;
                let v = g.matmul(mt, wv)?;
                keys.push(g.concat_rows(&[k, k])?);
                vals.push(g.concat_rows(&[v, v])?);
            }
            let mut scores = Vec::with_capacity(keys.len());
            for &k in &keys {
                let qk = g.mul(q, k)?;
                let s = g.sum_rows(qk);
                scores.push(g.scale(s, inv_sqrt_h));
            }
            let scores = g.concat_cols(&scores)?;
            let probs = g.softmax(scores);
            let mut attn: Option<Var> = None;
            for (j, &v) in vals.iter().enumerate() {
                let pj = g.slice_cols(probs, j, j + 1)?;
                let term = g.mul_col(v, pj)?;
                attn = Some(match attn {
                    None => term,
                    Some(acc) => g.add(acc, term)?,
                });
            }
            let attn = self.linear(g, attn.expect("at least two keys"), blk.wo, blk.bo)?;
            let gated = g.mul(attn, gate1)?;
            stream = g.add(stream, gated)?;

            // MLP
            let n = g.layer_norm(stream, LN_EPS);
            let n = g.mul(n, scale2)?;
            let hdn = g.add(n, shift2)?;
            let u = self.linear(g, hdn, blk.w1, blk.b1)?;
            let u = g.gelu(u);
            let u = self.linear(g, u, blk.w2, blk.b2)?;
            let gated = g.mul(u, gate2)?;
            stream = g.add(stream, gated)?;
        }

        let x_final = g.slice_rows(stream, 0, b)?;
        let x_final = g.layer_norm(x_final, LN_EPS);
        self.linear(g, x_final, self.ids.out_w, self.ids.out_b)
    }

    /// Backbone and AdaLN parameter ids. Names encode the group; a parameter
    /// whose tag disagrees with its name is reported as untagged.
    pub fn partition_params(&self) -> Result<(Vec<ParamId>, Vec<ParamId>)> {
        partition_params(&self.params)
    }
}

pub fn partition_params<T: Real>(params: &ParamStore<T>) -> Result<(Vec<ParamId>, Vec<ParamId>)> {
    let mut backbone = Vec::new();
    let mut adaln = Vec::new();
    for (id, p) in params.iter() {
        match (p.group, p.name.starts_with("adaln."), p.name.starts_with("backbone.")) {
            (Group::AdaLn, true, false) => adaln.push(id),
            (Group::Backbone, false, true) => backbone.push(id),
            _ => return Err(Error::InvalidArgument(format!("parameter {} has no consistent group tag", p.name))),
        }
    }
    Ok((backbone, adaln))
}

impl<T: Real> Denoiser<T> for WorldModel<T> {
    type Cond = Conditioning<T>;

    fn denoise(&self, g: &mut Graph<T>, noisy: &Tensor<T>, t: usize, cond: &Conditioning<T>) -> Result<Var> {
        let x = g.constant(noisy.clone());
        self.forward(g, x, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { obs_dim: 6, hidden: 8, blocks: 2, memory: 2, embed: 4, init_seed: 5, ..ModelConfig::default() }
    }

    fn cond(b: usize, d: usize, m: usize) -> Conditioning<f64> {
        let mut r = rng::seeded(1);
        let ctx = crate::diffusion::standard_normal(b, d, &mut r);
        let memory = (0..m).map(|_| crate::diffusion::standard_normal(b, d, &mut r)).collect();
        let actions = (0..b).map(|i| Action::new(0.1 * i as f64, -0.2)).collect();
        Conditioning { context: ctx, memory, actions }
    }

    #[test]
    fn timestep_zero_features_alternate() {
        let f = sincos_features(0.0, 8);
        assert_eq!(f, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_gate_blocks_are_identity() {
        let m = WorldModel::<f64>::new(small()).unwrap();
        let c = cond(3, 6, 2);
        let noisy = crate::diffusion::standard_normal::<f64>(3, 6, &mut rng::seeded(2));
        let mut g = Graph::no_grad();
        let out = m.denoise(&mut g, &noisy, 40, &c).unwrap();
        // Expected: out-head applied to the normalized input projection.
        let mut h = Graph::no_grad();
        let x = h.constant(noisy.clone());
        let tok = m.linear(&mut h, x, m.ids.in_w, m.ids.in_b).unwrap();
        let n = h.layer_norm(tok, LN_EPS);
        let y = m.linear(&mut h, n, m.ids.out_w, m.ids.out_b).unwrap();
        assert_eq!(g.value(out), h.value(y));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let m = WorldModel::<f64>::new(small()).unwrap();
        let c = cond(3, 6, 2);
        let mut g = Graph::no_grad();
        assert!(m.denoise(&mut g, &Tensor::zeros(3, 5), 1, &c).is_err());
        let short = Conditioning { memory: vec![], ..c };
        assert!(m.denoise(&mut g, &Tensor::zeros(3, 6), 1, &short).is_err());
    }

    #[test]
    fn partition_covers_all() {
        let m = WorldModel::<f32>::new(ModelConfig::default()).unwrap();
        let (bb, ad) = m.partition_params().unwrap();
        assert_eq!(bb.len() + ad.len(), m.params.len());
        assert!(!ad.is_empty());
        assert!(m.params.count_scalars(Group::AdaLn) < m.params.count_scalars(Group::Backbone));
        assert!(ad.len() < bb.len());
        let mut store = ParamStore::<f32>::new();
        store.insert("mystery", Group::Backbone, Tensor::zeros(1, 1)).unwrap();
        assert!(partition_params(&store).is_err());
    }

    #[test]
    fn history_padding() {
        let hist = vec![vec![vec![1.0f64, 1.0], vec![2.0, 2.0]]];
        let c = Conditioning::from_histories(&hist, &[Action::default()], 3).unwrap();
        assert_eq!(c.context.data(), &[2.0, 2.0]);
        assert_eq!(c.memory[0].data(), &[1.0, 1.0]);
        assert_eq!(c.memory[1].data(), &[0.0, 0.0]);
        assert_eq!(c.memory[2].data(), &[0.0, 0.0]);
    }
}
