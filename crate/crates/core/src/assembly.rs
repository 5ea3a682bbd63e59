//! Scale configuration, token accounting and the full coarse-to-fine
//! forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, CosError, Result, Violation, ViolationKind};
use crate::numerics::{Tape, Tensor, Var};
use crate::resampler::{BoundResampler, LevelStack, ResamplerParams};
use crate::windowing::all_window_cells;

/// One (window size, queries per window) pair. Window size is in feature
/// cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSpec {
    pub window_size: usize,
    pub queries_per_window: usize,
}

impl ScaleSpec {
    pub const fn new(window_size: usize, queries_per_window: usize) -> Self {
        Self {
            window_size,
            queries_per_window,
        }
    }

    /// Windows per side at feature size `l`.
    pub fn grid(&self, l: usize) -> usize {
        l / self.window_size
    }

    pub fn tokens(&self, l: usize) -> usize {
        let g = self.grid(l);
        g * g * self.queries_per_window
    }
}

fn default_patch_size() -> usize {
    14
}
fn default_channels() -> usize {
    64
}
fn default_model_dim() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_levels() -> usize {
    1
}

/// Full bridge configuration. Scales are listed coarse first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosConfig {
    /// Input pixels per side.
    pub resolution: usize,
    /// Pixels per feature cell.
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Number of backbone feature levels aggregated by each resampler.
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Width of the tokens handed to the language model. Defaults to
    /// `model_dim`.
    #[serde(default)]
    pub out_dim: Option<usize>,
    pub scales: Vec<ScaleSpec>,
}

impl CosConfig {
    pub fn new(resolution: usize, scales: &[(usize, usize)]) -> Self {
        Self {
            resolution,
            patch_size: default_patch_size(),
            channels: default_channels(),
            model_dim: default_model_dim(),
            heads: default_heads(),
            levels: default_levels(),
            out_dim: None,
            scales: scales.iter().map(|&(w, n)| ScaleSpec::new(w, n)).collect(),
        }
    }

    /// The 80-token pre-training setup: 224 px, 16×16 grid, one global
    /// window with 16 queries and 4×4 local windows with 4 queries each.
    pub fn default_pretrain() -> Self {
        Self::new(224, &[(16, 16), (4, 4)])
    }

    pub fn with_dims(mut self, channels: usize, model_dim: usize, heads: usize) -> Self {
        self.channels = channels;
        self.model_dim = model_dim;
        self.heads = heads;
        self
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.levels = levels;
        self
    }

    pub fn with_out_dim(mut self, out_dim: usize) -> Self {
        self.out_dim = Some(out_dim);
        self
    }

    /// Feature grid side `L = resolution / patch_size`.
    pub fn feature_size(&self) -> usize {
        self.resolution.checked_div(self.patch_size).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim.unwrap_or(self.model_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let v = validate_config(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(CosError::InvalidConfig(v))
        }
    }
}

fn violation(field: impl Into<String>, kind: ViolationKind, message: impl Into<String>) -> Violation {
    Violation {
        field: field.into(),
        kind,
        message: message.into(),
    }
}

/// Every violated configuration invariant; empty means valid.
pub fn validate_config(cfg: &CosConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    for (name, value) in [
        ("resolution", cfg.resolution),
        ("patch_size", cfg.patch_size),
        ("channels", cfg.channels),
        ("model_dim", cfg.model_dim),
        ("heads", cfg.heads),
        ("levels", cfg.levels),
    ] {
        if value == 0 {
            out.push(violation(name, ViolationKind::Range, "must be at least 1"));
        }
    }
    if cfg.out_dim == Some(0) {
        out.push(violation("out_dim", ViolationKind::Range, "must be at least 1"));
    }
    if cfg.patch_size > 0 && !cfg.resolution.is_multiple_of(cfg.patch_size) {
        out.push(violation(
            "resolution",
            ViolationKind::Divisibility,
            format!(
                "{} is not a multiple of patch size {}",
                cfg.resolution, cfg.patch_size
            ),
        ));
    }
    if cfg.heads > 0 && !cfg.model_dim.is_multiple_of(cfg.heads) {
        out.push(violation(
            "heads",
            ViolationKind::Divisibility,
            format!(
                "model_dim {} is not divisible by {} heads",
                cfg.model_dim, cfg.heads
            ),
        ));
    }
    if cfg.scales.is_empty() {
        out.push(violation(
            "scales",
            ViolationKind::Range,
            "at least one scale is required",
        ));
    }
    let l = cfg.feature_size();
    for (i, s) in cfg.scales.iter().enumerate() {
        if s.window_size == 0 {
            out.push(violation(
                format!("scales[{i}].window_size"),
                ViolationKind::Range,
                "must be at least 1",
            ));
        } else if l > 0 && !l.is_multiple_of(s.window_size) {
            out.push(violation(
                format!("scales[{i}].window_size"),
                ViolationKind::Divisibility,
                format!(
                    "feature size {l} is not divisible by window size {}",
                    s.window_size
                ),
            ));
        }
        if s.queries_per_window == 0 {
            out.push(violation(
                format!("scales[{i}].queries_per_window"),
                ViolationKind::Range,
                "must be at least 1",
            ));
        }
        if i > 0 && s.window_size >= cfg.scales[i - 1].window_size {
            out.push(violation(
                format!("scales[{i}]"),
                ViolationKind::Ordering,
                format!(
                    "window size {} must be strictly smaller than the preceding {} (coarse to fine)",
                    s.window_size,
                    cfg.scales[i - 1].window_size
                ),
            ));
        }
    }
    out
}

/// `N = Σ_i (L/W_i)²·N_i`.
pub fn token_count(cfg: &CosConfig) -> Result<usize> {
    cfg.validate()?;
    let l = cfg.feature_size();
    Ok(cfg.scales.iter().map(|s| s.tokens(l)).sum())
}

/// Where a token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub scale: usize,
    pub window: usize,
    pub query: usize,
    pub window_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// `N×D_out`.
    pub tokens: Tensor,
    pub provenance: Vec<Provenance>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

pub fn provenance(cfg: &CosConfig) -> Vec<Provenance> {
    let l = cfg.feature_size();
    let mut out = Vec::new();
    for (si, s) in cfg.scales.iter().enumerate() {
        let g = s.grid(l);
        for window in 0..g * g {
            for query in 0..s.queries_per_window {
                out.push(Provenance {
                    scale: si,
                    window,
                    query,
                    window_size: s.window_size,
                });
            }
        }
    }
    out
}

/// All learnable state of the bridge.
#[derive(Debug, Clone, PartialEq)]
pub struct CosParams {
    /// `L×L×C`, added to every feature level before partitioning.
    pub pos_embed: Tensor,
    /// One resampler per scale, coarse first.
    pub scales: Vec<ResamplerParams>,
    /// `D×D_out`, shared by all scales.
    pub out_proj: Tensor,
}

impl CosParams {
    pub fn zeros(cfg: &CosConfig) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.feature_size();
        Ok(Self {
            pos_embed: Tensor::zeros([l, l, cfg.channels]),
            scales: cfg
                .scales
                .iter()
                .map(|s| {
                    ResamplerParams::zeros(
                        s.queries_per_window,
                        cfg.channels,
                        cfg.model_dim,
                        cfg.heads,
                        cfg.levels,
                    )
                })
                .collect::<Result<_>>()?,
            out_proj: Tensor::zeros([cfg.model_dim, cfg.out_dim()]),
        })
    }

    pub fn random<R: Rng + ?Sized>(cfg: &CosConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.feature_size();
        let pos_embed = Tensor::randn([l, l, cfg.channels], 0.1, rng);
        let scales = cfg
            .scales
            .iter()
            .map(|s| {
                ResamplerParams::random(
                    s.queries_per_window,
                    cfg.channels,
                    cfg.model_dim,
                    cfg.heads,
                    cfg.levels,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let out_proj = Tensor::randn(
            [cfg.model_dim, cfg.out_dim()],
            1.0 / (cfg.model_dim as f64).sqrt(),
            rng,
        );
        Ok(Self {
            pos_embed,
            scales,
            out_proj,
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("pos_embed".to_string(), &self.pos_embed)];
        for (i, s) in self.scales.iter().enumerate() {
            out.extend(s.named().into_iter().map(|(n, t)| (format!("scale{i}.{n}"), t)));
        }
        out.push(("out_proj".to_string(), &self.out_proj));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("pos_embed".to_string(), &mut self.pos_embed)];
        for (i, s) in self.scales.iter_mut().enumerate() {
            out.extend(
                s.named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("scale{i}.{n}"), t)),
            );
        }
        out.push(("out_proj".to_string(), &mut self.out_proj));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks that tensor shapes agree with `cfg`.
    pub fn check_against(&self, cfg: &CosConfig) -> Result<()> {
        let template = Self::zeros(cfg)?;
        let ours = self.named();
        let theirs = template.named();
        if ours.len() != theirs.len() {
            return shape_err(
                "params",
                format!("{} tensors, config implies {}", ours.len(), theirs.len()),
            );
        }
        for ((name, t), (tname, tt)) in ours.iter().zip(&theirs) {
            if name != tname || t.shape() != tt.shape() {
                return shape_err(
                    "params",
                    format!("{name} {:?} vs expected {tname} {:?}", t.shape(), tt.shape()),
                );
            }
        }
        Ok(())
    }

    /// Tensors in [`CosParams::named`] order with the positional embedding
    /// flattened to `L²×C`; the layout expected by [`CosParams::bind_vars`].
    pub fn flat_tensors(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.named().into_iter().map(|(_, t)| t.clone()).collect();
        let s = self.pos_embed.shape();
        out[0] = self
            .pos_embed
            .reshape([s[0] * s[1], s[2]])
            .expect("same element count");
        out
    }

    /// Structures tape handles laid out as in [`CosParams::flat_tensors`].
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundParams> {
        let expected = self.named().len();
        if vars.len() != expected {
            return shape_err("bind", format!("{} vars for {expected} tensors", vars.len()));
        }
        let mut idx = 1;
        let mut scales = Vec::with_capacity(self.scales.len());
        for s in &self.scales {
            let n = s.named().len();
            scales.push(BoundResampler::from_vars(
                vars[idx..idx + n].to_vec(),
                s.heads,
                s.dim(),
                s.layer_norm,
            ));
            idx += n;
        }
        Ok(BoundParams {
            pos_embed: vars[0],
            scales,
            out_proj: vars[idx],
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let vars = self
            .flat_tensors()
            .into_iter()
            .map(|t| tape.leaf(t))
            .collect::<Result<Vec<_>>>()?;
        self.bind_vars(&vars)
    }
}

/// Tape handles for [`CosParams`]; `vars()` follows [`CosParams::named`]
/// order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    /// Flattened to `L²×C`.
    pub pos_embed: Var,
    pub scales: Vec<BoundResampler>,
    pub out_proj: Var,
}

impl BoundParams {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.pos_embed];
        for s in &self.scales {
            v.extend_from_slice(s.vars());
        }
        v.push(self.out_proj);
        v
    }
}

fn check_input(cfg: &CosConfig, input: &LevelStack) -> Result<()> {
    if input.len() != cfg.levels {
        return Err(CosError::LevelMismatch {
            expected: cfg.levels,
            got: input.len(),
        });
    }
    let l = cfg.feature_size();
    if input.size() != l || input.channels() != cfg.channels {
        return shape_err(
            "forward",
            format!(
                "input is {0}×{0}×{1}, config expects {l}×{l}×{2}",
                input.size(),
                input.channels(),
                cfg.channels
            ),
        );
    }
    Ok(())
}

/// Records the full bridge on `tape`. `levels` holds one `L²×C` input per
/// feature level. Returns the `N×D_out` token matrix.
pub fn forward_on_tape(
    tape: &mut Tape,
    cfg: &CosConfig,
    params: &BoundParams,
    levels: &[Var],
) -> Result<Var> {
    if levels.len() != cfg.levels || params.scales.len() != cfg.scales.len() {
        return Err(CosError::LevelMismatch {
            expected: cfg.levels,
            got: levels.len(),
        });
    }
    let l = cfg.feature_size();
    let positioned = levels
        .iter()
        .map(|&x| tape.add(x, params.pos_embed))
        .collect::<Result<Vec<_>>>()?;

    let mut scale_tokens = Vec::with_capacity(cfg.scales.len());
    for (spec, res) in cfg.scales.iter().zip(&params.scales) {
        let kv_maps = positioned
            .iter()
            .enumerate()
            .map(|(li, &x)| {
                let p = res.project(tape, x)?;
                res.keys_values(tape, li, p)
            })
            .collect::<Result<Vec<_>>>()?;
        let windows = all_window_cells(l, spec.window_size)?;
        let whole_map = windows.len() == 1;
        let mut per_window = Vec::with_capacity(windows.len());
        for cells in &windows {
            let kvs = if whole_map {
                kv_maps.clone()
            } else {
                kv_maps
                    .iter()
                    .map(|kv| {
                        Ok(crate::resampler::KeyValue {
                            keys: tape.gather_rows(kv.keys, cells)?,
                            values: tape.gather_rows(kv.values, cells)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            per_window.push(res.attend(tape, &kvs)?);
        }
        scale_tokens.push(if per_window.len() == 1 {
            per_window[0]
        } else {
            tape.concat_rows(&per_window)?
        });
    }
    let all = if scale_tokens.len() == 1 {
        scale_tokens[0]
    } else {
        tape.concat_rows(&scale_tokens)?
    };
    tape.matmul(all, params.out_proj)
}

/// Runs every scale's resampler and concatenates tokens coarse to fine.
pub fn forward(cfg: &CosConfig, params: &CosParams, input: &LevelStack) -> Result<TokenSequence> {
    cfg.validate()?;
    params.check_against(cfg)?;
    check_input(cfg, input)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let levels = input
        .levels()
        .iter()
        .map(|m| tape.leaf(m.flattened()))
        .collect::<Result<Vec<_>>>()?;
    let out = forward_on_tape(&mut tape, cfg, &bound, &levels)?;
    let seq = TokenSequence {
        tokens: tape.value(out).clone(),
        provenance: provenance(cfg),
    };
    debug_assert_eq!(seq.tokens.rows(), seq.len());
    Ok(seq)
}
