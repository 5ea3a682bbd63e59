//! Per-scale Perceiver-style resampler.
//!
//! A fixed set of learnable queries, shared by every window of a scale,
//! cross-attends to one window at a time. With several backbone levels the
//! queries visit the levels in order, low to high; each level owns one
//! pre-norm block (multi-head cross-attention + residual, then a 4× GELU MLP
//! + residual).

use rand::Rng;

use crate::error::{shape_err, CosError, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::windowing::{FeatureMap, WindowedFeatures};

pub const LN_EPS: f64 = 1e-5;
pub const MLP_EXPANSION: usize = 4;

/// Number of tensors owned by one [`LevelBlock`].
const BLOCK_TENSORS: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: Tensor::ones([dim]),
            bias: Tensor::zeros([dim]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelBlock {
    pub q_proj: Tensor,
    pub k_proj: Tensor,
    pub v_proj: Tensor,
    pub o_proj: Tensor,
    pub ln_q: LayerNormParams,
    pub ln_kv: LayerNormParams,
    pub ln_mlp: LayerNormParams,
    pub mlp_in: Tensor,
    pub mlp_out: Tensor,
}

impl LevelBlock {
    fn zeros(dim: usize) -> Self {
        Self {
            q_proj: Tensor::zeros([dim, dim]),
            k_proj: Tensor::zeros([dim, dim]),
            v_proj: Tensor::zeros([dim, dim]),
            o_proj: Tensor::zeros([dim, dim]),
            ln_q: LayerNormParams::identity(dim),
            ln_kv: LayerNormParams::identity(dim),
            ln_mlp: LayerNormParams::identity(dim),
            mlp_in: Tensor::zeros([dim, MLP_EXPANSION * dim]),
            mlp_out: Tensor::zeros([MLP_EXPANSION * dim, dim]),
        }
    }

    fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let hidden = MLP_EXPANSION * dim;
        Self {
            q_proj: Tensor::randn([dim, dim], s, rng),
            k_proj: Tensor::randn([dim, dim], s, rng),
            v_proj: Tensor::randn([dim, dim], s, rng),
            o_proj: Tensor::randn([dim, dim], s, rng),
            ln_q: LayerNormParams::identity(dim),
            ln_kv: LayerNormParams::identity(dim),
            ln_mlp: LayerNormParams::identity(dim),
            mlp_in: Tensor::randn([dim, hidden], s, rng),
            mlp_out: Tensor::randn([hidden, dim], 0.5 / (hidden as f64).sqrt(), rng),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); BLOCK_TENSORS] {
        [
            ("q_proj", &self.q_proj),
            ("k_proj", &self.k_proj),
            ("v_proj", &self.v_proj),
            ("o_proj", &self.o_proj),
            ("ln_q.gain", &self.ln_q.gain),
            ("ln_q.bias", &self.ln_q.bias),
            ("ln_kv.gain", &self.ln_kv.gain),
            ("ln_kv.bias", &self.ln_kv.bias),
            ("ln_mlp.gain", &self.ln_mlp.gain),
            ("ln_mlp.bias", &self.ln_mlp.bias),
            ("mlp_in", &self.mlp_in),
            ("mlp_out", &self.mlp_out),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); BLOCK_TENSORS] {
        [
            ("q_proj", &mut self.q_proj),
            ("k_proj", &mut self.k_proj),
            ("v_proj", &mut self.v_proj),
            ("o_proj", &mut self.o_proj),
            ("ln_q.gain", &mut self.ln_q.gain),
            ("ln_q.bias", &mut self.ln_q.bias),
            ("ln_kv.gain", &mut self.ln_kv.gain),
            ("ln_kv.bias", &mut self.ln_kv.bias),
            ("ln_mlp.gain", &mut self.ln_mlp.gain),
            ("ln_mlp.bias", &mut self.ln_mlp.bias),
            ("mlp_in", &mut self.mlp_in),
            ("mlp_out", &mut self.mlp_out),
        ]
    }
}

/// Learnable state of one scale's resampler.
#[derive(Debug, Clone, PartialEq)]
pub struct ResamplerParams {
    /// `N×D`, shared by every window of the scale.
    pub queries: Tensor,
    /// `C×D` input projection, shared by all levels.
    pub feat_proj: Tensor,
    /// One block per feature level, low to high.
    pub blocks: Vec<LevelBlock>,
    pub heads: usize,
    /// Layer norms are skipped when false. Only meant for analysis.
    pub layer_norm: bool,
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return shape_err(
            "resampler",
            format!("model dim {dim} not divisible by {heads} heads"),
        );
    }
    Ok(())
}

impl ResamplerParams {
    /// All-zero projections and identity layer norms; used as a load template.
    pub fn zeros(queries: usize, channels: usize, dim: usize, heads: usize, levels: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            queries: Tensor::zeros([queries, dim]),
            feat_proj: Tensor::zeros([channels, dim]),
            blocks: (0..levels).map(|_| LevelBlock::zeros(dim)).collect(),
            heads,
            layer_norm: true,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        queries: usize,
        channels: usize,
        dim: usize,
        heads: usize,
        levels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            queries: Tensor::randn([queries, dim], 1.0, rng),
            feat_proj: Tensor::randn([channels, dim], 1.0 / (channels as f64).sqrt(), rng),
            blocks: (0..levels).map(|_| LevelBlock::random(dim, rng)).collect(),
            heads,
            layer_norm: true,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.queries.rows()
    }

    pub fn dim(&self) -> usize {
        self.queries.cols()
    }

    pub fn channels(&self) -> usize {
        self.feat_proj.rows()
    }

    pub fn levels(&self) -> usize {
        self.blocks.len()
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("queries".to_string(), &self.queries),
            ("feat_proj".to_string(), &self.feat_proj),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("level{l}.{n}"), t)));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("queries".to_string(), &mut self.queries),
            ("feat_proj".to_string(), &mut self.feat_proj),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("level{l}.{n}"), t)),
            );
        }
        out
    }

    /// Records every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundResampler> {
        let vars = self
            .named()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundResampler {
            vars,
            heads: self.heads,
            dim: self.dim(),
            layer_norm: self.layer_norm,
        })
    }
}

/// Tape handles for a [`ResamplerParams`], in [`ResamplerParams::named`] order.
#[derive(Debug, Clone)]
pub struct BoundResampler {
    vars: Vec<Var>,
    heads: usize,
    dim: usize,
    layer_norm: bool,
}

struct BlockVars<'a>(&'a [Var]);

impl BlockVars<'_> {
    fn q_proj(&self) -> Var {
        self.0[0]
    }
    fn k_proj(&self) -> Var {
        self.0[1]
    }
    fn v_proj(&self) -> Var {
        self.0[2]
    }
    fn o_proj(&self) -> Var {
        self.0[3]
    }
    fn ln_q(&self) -> (Var, Var) {
        (self.0[4], self.0[5])
    }
    fn ln_kv(&self) -> (Var, Var) {
        (self.0[6], self.0[7])
    }
    fn ln_mlp(&self) -> (Var, Var) {
        (self.0[8], self.0[9])
    }
    fn mlp_in(&self) -> Var {
        self.0[10]
    }
    fn mlp_out(&self) -> Var {
        self.0[11]
    }
}

/// Per-level keys and values of one window, each `W²×D`.
#[derive(Debug, Clone, Copy)]
pub struct KeyValue {
    pub keys: Var,
    pub values: Var,
}

impl BoundResampler {
    /// Wraps handles laid out as in [`ResamplerParams::named`].
    pub fn from_vars(vars: Vec<Var>, heads: usize, dim: usize, layer_norm: bool) -> Self {
        Self {
            vars,
            heads,
            dim,
            layer_norm,
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn levels(&self) -> usize {
        (self.vars.len() - 2) / BLOCK_TENSORS
    }

    pub fn queries(&self) -> Var {
        self.vars[0]
    }

    pub fn feat_proj(&self) -> Var {
        self.vars[1]
    }

    fn block(&self, level: usize) -> BlockVars<'_> {
        let start = 2 + level * BLOCK_TENSORS;
        BlockVars(&self.vars[start..start + BLOCK_TENSORS])
    }

    fn norm(&self, tape: &mut Tape, x: Var, (g, b): (Var, Var)) -> Result<Var> {
        if self.layer_norm {
            tape.layer_norm(x, g, b, LN_EPS)
        } else {
            Ok(x)
        }
    }

    /// Projects raw `rows×C` features to `rows×D`.
    pub fn project(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        tape.matmul(features, self.feat_proj())
    }

    /// Keys and values for already-projected features of one level. The map
    /// is row-wise, so it can be applied to a whole feature map before
    /// selecting the rows of a window.
    pub fn keys_values(&self, tape: &mut Tape, level: usize, projected: Var) -> Result<KeyValue> {
        let b = self.block(level);
        let normed = self.norm(tape, projected, b.ln_kv())?;
        Ok(KeyValue {
            keys: tape.matmul(normed, b.k_proj())?,
            values: tape.matmul(normed, b.v_proj())?,
        })
    }

    /// Runs the query chain over one window's per-level keys/values.
    pub fn attend(&self, tape: &mut Tape, levels: &[KeyValue]) -> Result<Var> {
        if levels.len() != self.levels() {
            return Err(CosError::LevelMismatch {
                expected: self.levels(),
                got: levels.len(),
            });
        }
        let head_dim = self.dim / self.heads;
        let logit_scale = 1.0 / (head_dim as f64).sqrt();
        let mut tokens = self.queries();
        for (l, kv) in levels.iter().enumerate() {
            let b = self.block(l);
            let qn = self.norm(tape, tokens, b.ln_q())?;
            let q = tape.matmul(qn, b.q_proj())?;
            let mut per_head = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
                let (qh, kh, vh) = if self.heads == 1 {
                    (q, kv.keys, kv.values)
                } else {
                    (
                        tape.slice_cols(q, lo, hi)?,
                        tape.slice_cols(kv.keys, lo, hi)?,
                        tape.slice_cols(kv.values, lo, hi)?,
                    )
                };
                let kt = tape.transpose(kh)?;
                let logits = tape.matmul(qh, kt)?;
                let logits = tape.scale(logits, logit_scale)?;
                let attn = tape.softmax_rows(logits)?;
                per_head.push(tape.matmul(attn, vh)?);
            }
            let merged = if per_head.len() == 1 {
                per_head[0]
            } else {
                tape.concat_cols(&per_head)?
            };
            let attn_out = tape.matmul(merged, b.o_proj())?;
            tokens = tape.add(tokens, attn_out)?;

            let hn = self.norm(tape, tokens, b.ln_mlp())?;
            let hidden = tape.matmul(hn, b.mlp_in())?;
            let hidden = tape.gelu(hidden)?;
            let mlp_out = tape.matmul(hidden, b.mlp_out())?;
            tokens = tape.add(tokens, mlp_out)?;
        }
        Ok(tokens)
    }

    /// Full per-window path from raw `W²×C` level features.
    pub fn window(&self, tape: &mut Tape, raw_levels: &[Var]) -> Result<Var> {
        let kvs = raw_levels
            .iter()
            .enumerate()
            .map(|(l, &x)| {
                let p = self.project(tape, x)?;
                self.keys_values(tape, l, p)
            })
            .collect::<Result<Vec<_>>>()?;
        self.attend(tape, &kvs)
    }
}

/// Backbone levels ordered low to high, all the same `L×L×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStack {
    levels: Vec<FeatureMap>,
}

impl LevelStack {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        let Some(first) = levels.first() else {
            return shape_err("level_stack", "at least one level is required");
        };
        let shape = first.tensor().shape().to_vec();
        if let Some(bad) = levels.iter().position(|m| m.tensor().shape() != shape.as_slice()) {
            return shape_err(
                "level_stack",
                format!("level {bad} differs from level 0 shape {shape:?}"),
            );
        }
        Ok(Self { levels })
    }

    pub fn single(map: FeatureMap) -> Self {
        Self { levels: vec![map] }
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn size(&self) -> usize {
        self.levels[0].size()
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }
}

fn check_window_levels(p: &ResamplerParams, win_levels: &[Tensor]) -> Result<()> {
    if win_levels.len() != p.levels() {
        return Err(CosError::LevelMismatch {
            expected: p.levels(),
            got: win_levels.len(),
        });
    }
    let rows = win_levels[0].shape().first().copied().unwrap_or(0);
    for (l, w) in win_levels.iter().enumerate() {
        if w.rank() != 2 || w.cols() != p.channels() || w.rows() != rows {
            return shape_err(
                "resample_window",
                format!(
                    "level {l} window has shape {:?}, expected [{rows}, {}]",
                    w.shape(),
                    p.channels()
                ),
            );
        }
    }
    Ok(())
}

/// Tokens (`N×D`) for a single window given per-level `W²×C` features.
pub fn resample_window(p: &ResamplerParams, win_levels: &[Tensor]) -> Result<Tensor> {
    Ok(resample_window_with_attention(p, win_levels)?.0)
}

/// Like [`resample_window`], also returning every attention map
/// (one per level and head, in that order).
pub fn resample_window_with_attention(
    p: &ResamplerParams,
    win_levels: &[Tensor],
) -> Result<(Tensor, Vec<Tensor>)> {
    check_window_levels(p, win_levels)?;
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape)?;
    let raw = win_levels
        .iter()
        .map(|w| tape.leaf(w.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = bound.window(&mut tape, &raw)?;
    let maps = tape.softmax_outputs().cloned().collect();
    Ok((tape.value(out).clone(), maps))
}

/// Tokens of one scale with per-token (window index, query index).
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTokens {
    pub tokens: Tensor,
    pub provenance: Vec<(usize, usize)>,
}

/// Resamples every window of a scale and concatenates the results in
/// row-major window order.
pub fn resample_scale(p: &ResamplerParams, wf_levels: &[WindowedFeatures]) -> Result<ScaleTokens> {
    if wf_levels.len() != p.levels() {
        return Err(CosError::LevelMismatch {
            expected: p.levels(),
            got: wf_levels.len(),
        });
    }
    let first = &wf_levels[0];
    if let Some(bad) = wf_levels.iter().position(|wf| {
        wf.window_grid != first.window_grid
            || wf.window_size != first.window_size
            || wf.windows.len() != first.windows.len()
    }) {
        return shape_err(
            "resample_scale",
            format!("level {bad} has a different window grid than level 0"),
        );
    }
    let n = p.num_queries();
    let mut data = Vec::with_capacity(first.windows.len() * n * p.dim());
    let mut provenance = Vec::with_capacity(first.windows.len() * n);
    for k in 0..first.windows.len() {
        let levels: Vec<Tensor> = wf_levels.iter().map(|wf| wf.windows[k].clone()).collect();
        let t = resample_window(p, &levels)?;
        data.extend_from_slice(t.data());
        provenance.extend((0..n).map(|q| (k, q)));
    }
    Ok(ScaleTokens {
        tokens: Tensor::new([provenance.len(), p.dim()], data)?,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::windowing::partition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_map(l: usize, c: usize, seed: u64) -> FeatureMap {
        FeatureMap::new(Tensor::randn([l, l, c], 1.0, &mut rng(seed))).unwrap()
    }

    #[test]
    fn uniform_attention_gives_mean_of_projected_features() {
        let (c, d) = (3, 4);
        let mut p = ResamplerParams::random(2, c, d, 1, 1, &mut rng(1)).unwrap();
        p.layer_norm = false;
        p.queries = Tensor::zeros([2, d]);
        let b = &mut p.blocks[0];
        b.q_proj = Tensor::zeros([d, d]);
        b.v_proj = Tensor::eye(d);
        b.o_proj = Tensor::eye(d);
        b.mlp_out = Tensor::zeros([MLP_EXPANSION * d, d]);

        let win = Tensor::randn([4, c], 1.0, &mut rng(2));
        let out = resample_window(&p, std::slice::from_ref(&win)).unwrap();
        let projected = win.matmul(&p.feat_proj).unwrap();
        for q in 0..2 {
            for j in 0..d {
                let mean = (0..4).map(|r| projected.get2(r, j)).sum::<f64>() / 4.0;
                assert!((out.get2(q, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_attention_is_exactly_one() {
        let p = ResamplerParams::random(3, 2, 8, 2, 1, &mut rng(3)).unwrap();
        let win = Tensor::randn([1, 2], 1.0, &mut rng(4));
        let (_, maps) = resample_window_with_attention(&p, &[win]).unwrap();
        assert_eq!(maps.len(), 2);
        for m in maps {
            assert!(m.data().iter().all(|&v| v == 1.0));
        }
    }

    fn ln_oracle(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * g.data()[j] + b.data()[j])
            .collect()
    }

    fn vec_mat(x: &[f64], m: &Tensor) -> Vec<f64> {
        (0..m.cols())
            .map(|j| x.iter().enumerate().map(|(k, v)| v * m.get2(k, j)).sum())
            .collect()
    }

    /// softmax(QKᵀ/√D)V evaluated with explicit loops, including the
    /// surrounding norms, residuals and MLP of a single-head block.
    fn explicit_block(p: &ResamplerParams, win: &Tensor) -> Vec<Vec<f64>> {
        let b = &p.blocks[0];
        let d = p.dim();
        let kv: Vec<Vec<f64>> = (0..win.rows())
            .map(|r| ln_oracle(&vec_mat(win.row(r), &p.feat_proj), &b.ln_kv.gain, &b.ln_kv.bias))
            .collect();
        let keys: Vec<Vec<f64>> = kv.iter().map(|x| vec_mat(x, &b.k_proj)).collect();
        let vals: Vec<Vec<f64>> = kv.iter().map(|x| vec_mat(x, &b.v_proj)).collect();
        (0..p.num_queries())
            .map(|qi| {
                let tok = p.queries.row(qi).to_vec();
                let q = vec_mat(&ln_oracle(&tok, &b.ln_q.gain, &b.ln_q.bias), &b.q_proj);
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut ctx = vec![0.0; d];
                for (w, v) in e.iter().zip(&vals) {
                    for j in 0..d {
                        ctx[j] += w / z * v[j];
                    }
                }
                let att = vec_mat(&ctx, &b.o_proj);
                let tok: Vec<f64> = tok.iter().zip(&att).map(|(a, b)| a + b).collect();
                let h = vec_mat(&ln_oracle(&tok, &b.ln_mlp.gain, &b.ln_mlp.bias), &b.mlp_in);
                let h: Vec<f64> = h
                    .iter()
                    .map(|&x| crate::numerics::Tensor::scalar(x).gelu().data()[0])
                    .collect();
                let m = vec_mat(&h, &b.mlp_out);
                tok.iter().zip(&m).map(|(a, b)| a + b).collect()
            })
            .collect()
    }

    #[test]
    fn matches_explicit_attention_oracle() {
        let mut p = ResamplerParams::random(2, 3, 4, 1, 1, &mut rng(5)).unwrap();
        p.blocks[0].ln_q.gain = Tensor::randn([4], 1.0, &mut rng(6));
        p.blocks[0].ln_kv.bias = Tensor::randn([4], 1.0, &mut rng(7));
        let win = Tensor::randn([4, 3], 1.0, &mut rng(8)); // 2×2 window
        let out = resample_window(&p, std::slice::from_ref(&win)).unwrap();
        let oracle = explicit_block(&p, &win);
        for (q, row) in oracle.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((out.get2(q, j) - v).abs() < 1e-10, "{q},{j}");
            }
        }
    }

    #[test]
    fn level_count_mismatch() {
        let p = ResamplerParams::random(2, 3, 4, 1, 2, &mut rng(9)).unwrap();
        let win = Tensor::zeros([4, 3]);
        assert!(matches!(
            resample_window(&p, &[win]),
            Err(CosError::LevelMismatch { expected: 2, got: 1 })
        ));
        assert!(resample_window(&p, &[Tensor::zeros([4, 3]), Tensor::zeros([4, 2])]).is_err());
        assert!(ResamplerParams::random(2, 3, 6, 4, 1, &mut rng(1)).is_err());
    }

    #[test]
    fn degenerate_grid_equals_single_window() {
        let p = ResamplerParams::random(4, 3, 8, 2, 1, &mut rng(10)).unwrap();
        let x = random_map(4, 3, 11);
        let s = resample_scale(&p, &[partition(&x, 4).unwrap()]).unwrap();
        let w = resample_window(&p, &[x.flattened()]).unwrap();
        assert_eq!(s.tokens, w);
        assert_eq!(s.provenance, vec![(0, 0), (0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn local_scale_token_count() {
        let p = ResamplerParams::random(4, 2, 8, 2, 1, &mut rng(12)).unwrap();
        let s = resample_scale(&p, &[partition(&random_map(16, 2, 13), 4).unwrap()]).unwrap();
        assert_eq!(s.tokens.rows(), 64);
        assert_eq!(s.provenance.len(), 64);
    }

    #[test]
    fn perturbing_window_zero_touches_only_its_tokens() {
        let p = ResamplerParams::random(2, 3, 8, 2, 1, &mut rng(14)).unwrap();
        let x = random_map(4, 3, 15);
        let base = resample_scale(&p, &[partition(&x, 2).unwrap()]).unwrap();
        // swap two cells inside window 0
        let mut y = x.clone();
        let a = y.cell(0, 0).to_vec();
        let b = y.cell(1, 1).to_vec();
        y.cell_mut(0, 0).copy_from_slice(&b);
        y.cell_mut(1, 1).copy_from_slice(&a);
        let s = resample_scale(&p, &[partition(&y, 2).unwrap()]).unwrap();
        for (r, &(w, _)) in base.provenance.iter().enumerate() {
            let same = base.tokens.row(r) == s.tokens.row(r);
            assert_eq!(same, w != 0, "token {r} window {w}");
        }
    }

    #[test]
    fn window_permutation_permutes_token_blocks() {
        let p = ResamplerParams::random(3, 2, 8, 2, 1, &mut rng(16)).unwrap();
        let wf = partition(&random_map(4, 2, 17), 2).unwrap();
        let base = resample_scale(&p, std::slice::from_ref(&wf)).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut shuffled = wf.clone();
        shuffled.windows = perm.iter().map(|&k| wf.windows[k].clone()).collect();
        let s = resample_scale(&p, &[shuffled]).unwrap();
        for (new_k, &old_k) in perm.iter().enumerate() {
            for q in 0..3 {
                assert_eq!(s.tokens.row(new_k * 3 + q), base.tokens.row(old_k * 3 + q));
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let p = ResamplerParams::random(4, 3, 8, 4, 2, &mut rng(18)).unwrap();
        let wins = vec![
            Tensor::randn([9, 3], 2.0, &mut rng(19)),
            Tensor::randn([9, 3], 2.0, &mut rng(20)),
        ];
        let (_, maps) = resample_window_with_attention(&p, &wins).unwrap();
        assert_eq!(maps.len(), 8);
        for m in maps {
            for r in 0..m.rows() {
                assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inconsistent_grids_rejected() {
        let p = ResamplerParams::random(2, 2, 4, 1, 2, &mut rng(21)).unwrap();
        let x = random_map(4, 2, 22);
        let r = resample_scale(&p, &[partition(&x, 2).unwrap(), partition(&x, 4).unwrap()]);
        assert!(r.is_err());
    }

    #[test]
    fn scale_loss_gradients() {
        let p = ResamplerParams::random(2, 2, 4, 2, 2, &mut rng(23)).unwrap();
        let x0 = random_map(4, 2, 24);
        let x1 = random_map(4, 2, 25);
        let wf0 = partition(&x0, 2).unwrap();
        let wf1 = partition(&x1, 2).unwrap();
        let params: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        let heads = p.heads;
        let report = grad_check(
            |tape, vars| {
                let bound = BoundResampler::from_vars(vars.to_vec(), heads, 4, true);
                let mut outs = Vec::new();
                for k in 0..wf0.len() {
                    let a = tape.leaf(wf0.windows[k].clone())?;
                    let b = tape.leaf(wf1.windows[k].clone())?;
                    outs.push(bound.window(tape, &[a, b])?);
                }
                let all = tape.concat_rows(&outs)?;
                let sq = tape.mul(all, all)?;
                tape.mean(sq)
            },
            &params,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
