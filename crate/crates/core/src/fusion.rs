//! Multi-path token fusion and routing over Mask / Contrast / Generated images.
//!
//! Dataflow for one triplet:
//!
//! ```text
//! mask ──encode──► f_M ─────────────────┐
//! contrast ─encode─► f_C ─deformable─► − ├─► f_V (vessel tokens)
//! generated ─encode─► f_G               │
//!
//! f_V ─self-attn─► W_Q^VMC ─► cross-attn(K_G, V_G) ─► A_VMC, f_VMC
//! f_V ─conv,relu,conv─► W_Q^VBD ─► cross-attn(K_G, V_G) ─► A_VBD, f_VBD
//! f_G ─► A_G = softmax(Q_G K_Gᵀ/√d);  f_OQ = (α A_G + β A_VMC + γ A_VBD) V_G
//! ```
//!
//! Tokens are `n × d` matrices with `n = g²` in row-major grid order. Convolutions
//! view them as `d × g × g` feature maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::head::{pooled_logits, HeadVars, LevelDistribution, Metric};
use crate::params::{ParamId, ParamRecord, ParamStore};
use crate::scalar::Real;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Architecture hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    /// `false` selects the ablation baseline: no vessel tokens, no branches.
    pub fusion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            dim: 32,
            fusion: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient verification.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            dim: 8,
            fusion: true,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patch_size == 0 || self.image_size == 0 || self.dim == 0 {
            return Err(ModelError::Config("sizes must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenSource {
    Mask,
    Contrast,
    Generated,
    Vessel,
}

/// A `g × g` grid of `d`-dimensional tokens living in a graph, stored as `n × d`.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub tokens: Var,
    pub grid: usize,
    pub dim: usize,
    pub source: TokenSource,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.grid * self.grid
    }

    pub fn is_empty(&self) -> bool {
        self.grid == 0
    }
}

/// Shared patch encoder: linear patch embedding plus one residual self-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// `[p² × d]`
    pub embed: Var,
    /// `[d]`
    pub embed_bias: Var,
    /// `[n × d]` per-patch bias (learned position code).
    pub position: Var,
    pub attn: AttentionVars,
}

/// Projections of a residual single-head self-attention layer; each `[d × d]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DeformableVars {
    /// `[18 × d × 3 × 3]`: a (Δy, Δx) pair for each of the nine taps.
    pub offset_kernel: Var,
    /// `[d × d × 3 × 3]`
    pub kernel: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub vmc_attn: AttentionVars,
    pub wq_vmc: Var,
    pub bq_vmc: Var,
    pub conv1: Var,
    pub conv1_bias: Var,
    pub conv2: Var,
    pub conv2_bias: Var,
    pub wq_vbd: Var,
    pub bq_vbd: Var,
    /// Key and value projections of Generated tokens, shared by all three branches.
    pub wk: Var,
    pub wv: Var,
    pub wq_oq: Var,
    pub bq_oq: Var,
    /// `[1 × 3]` unconstrained logits of (α, β, γ).
    pub fusion_logits: Var,
}

/// Fused tokens and attention maps of the three branches.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    pub vmc: Var,
    pub vbd: Var,
    pub oq: Var,
    pub attn_vmc: Var,
    pub attn_vbd: Var,
    pub attn_generated: Var,
    pub attn_fused: Var,
    /// `[1 × 3]` (α, β, γ).
    pub weights: Var,
    pub vessel: TokenGrid,
}

/// Splits a square image into non-overlapping patches: `[n × p²]`, patches in row-major grid order.
pub fn patchify<T: Real>(image: &[T], size: usize, patch: usize) -> Result<Tensor<T>, TensorError> {
    if image.len() != size * size || patch == 0 || size % patch != 0 {
        return Err(TensorError::invalid(
            "patchify",
            format!(
                "{} pixels do not form a {size}×{size} image of {patch}×{patch} patches",
                image.len()
            ),
        ));
    }
    let g = size / patch;
    let mut data = Vec::with_capacity(image.len());
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..patch {
                let row = (gy * patch + py) * size + gx * patch;
                data.extend_from_slice(&image[row..row + patch]);
            }
        }
    }
    Tensor::new(vec![g * g, patch * patch], data)
}

fn sqrt_dim<T: Real>(d: usize) -> T {
    T::from_usize_lossy(d).sqrt()
}

/// `softmax(q kᵀ / √d)` for `q[n×d]`, `k[m×d]`.
pub fn attention_map<T: Real>(g: &mut Graph<T>, q: Var, k: Var) -> Result<Var, TensorError> {
    let d = g.shape(q)[1];
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, T::one() / sqrt_dim::<T>(d))?;
    g.softmax_rows(scaled)
}

/// `x + softmax(x Wq (x Wk)ᵀ/√d) x Wv`.
pub fn self_attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    attn: &AttentionVars,
) -> Result<Var, TensorError> {
    let q = g.matmul(x, attn.wq)?;
    let k = g.matmul(x, attn.wk)?;
    let v = g.matmul(x, attn.wv)?;
    let a = attention_map(g, q, k)?;
    let mixed = g.matmul(a, v)?;
    g.add(x, mixed)
}

/// `[n × d]` tokens → `[d × g × g]` feature map.
pub fn tokens_to_map<T: Real>(
    g: &mut Graph<T>,
    tokens: Var,
    grid: usize,
) -> Result<Var, TensorError> {
    let d = g.shape(tokens)[1];
    let t = g.transpose(tokens)?;
    g.reshape(t, vec![d, grid, grid])
}

/// `[c × g × g]` feature map → `[n × c]` tokens.
pub fn map_to_tokens<T: Real>(g: &mut Graph<T>, map: Var) -> Result<Var, TensorError> {
    let (c, n) = match g.shape(map) {
        &[c, h, w] => (c, h * w),
        s => {
            return Err(TensorError::invalid(
                "map_to_tokens",
                format!("expected c×h×w, got {s:?}"),
            ))
        }
    };
    let flat = g.reshape(map, vec![c, n])?;
    g.transpose(flat)
}

/// Encodes one image (already split by [`patchify`]) into a token grid.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    patches: Var,
    enc: &EncoderVars,
    grid: usize,
    source: TokenSource,
) -> Result<TokenGrid, TensorError> {
    let embedded = g.matmul(patches, enc.embed)?;
    let embedded = g.add_row_bias(embedded, enc.embed_bias)?;
    let embedded = g.add(embedded, enc.position)?;
    let tokens = self_attention(g, embedded, &enc.attn)?;
    let dim = g.shape(tokens)[1];
    Ok(TokenGrid {
        tokens,
        grid,
        dim,
        source,
    })
}

/// Indices that rearrange the `[18 × g × g]` offset map into `[9n × 2]` (Δy, Δx) rows,
/// row `k·n + p` belonging to tap `k` at position `p`.
fn offset_gather_indices(n: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(18 * n);
    for k in 0..9 {
        for p in 0..n {
            idx.push(2 * k * n + p);
            idx.push((2 * k + 1) * n + p);
        }
    }
    idx
}

/// Undeformed 3×3 tap positions for every grid cell, laid out like [`offset_gather_indices`].
fn base_tap_coords<T: Real>(grid: usize) -> Tensor<T> {
    let n = grid * grid;
    let mut data = Vec::with_capacity(18 * n);
    for ky in 0..3 {
        for kx in 0..3 {
            for p in 0..n {
                let (y, x) = (p / grid, p % grid);
                data.push(T::lit(y as f64 + ky as f64 - 1.0));
                data.push(T::lit(x as f64 + kx as f64 - 1.0));
            }
        }
    }
    Tensor::new(vec![9 * n, 2], data).expect("consistent layout")
}

/// Deformable 3×3 convolution over the token grid: offsets come from a plain
/// convolution of the input, taps are read by bilinear sampling at the shifted
/// positions, then mixed by the main kernel.
pub fn deformable_align<T: Real>(
    g: &mut Graph<T>,
    input: &TokenGrid,
    dconv: &DeformableVars,
) -> Result<TokenGrid, TensorError> {
    let grid = input.grid;
    let n = grid * grid;
    let d = input.dim;
    let map = tokens_to_map(g, input.tokens, grid)?;
    let offsets = g.conv2d(map, dconv.offset_kernel, None)?;
    let offsets = g.gather(offsets, offset_gather_indices(n), vec![9 * n, 2])?;
    let base = g.input(base_tap_coords(grid));
    let coords = g.add(offsets, base)?;
    let samples = g.bilinear_sample(map, coords)?;
    // [d × 9n] and [d·9 × n] share one flat layout: (channel, tap, position)
    let cols = g.reshape(samples, vec![d * 9, n])?;
    let out_channels = g.shape(dconv.kernel)[0];
    let kernel = g.reshape(dconv.kernel, vec![out_channels, d * 9])?;
    let out = g.matmul(kernel, cols)?;
    let tokens = g.transpose(out)?;
    Ok(TokenGrid {
        tokens,
        grid,
        dim: out_channels,
        source: input.source,
    })
}

/// Vessel tokens `DConv(f_C) − f_M`.
pub fn vessel_tokens<T: Real>(
    g: &mut Graph<T>,
    contrast: &TokenGrid,
    mask: &TokenGrid,
    dconv: &DeformableVars,
) -> Result<TokenGrid, ModelError> {
    if contrast.source != TokenSource::Contrast || mask.source != TokenSource::Mask {
        return Err(ModelError::Usage(format!(
            "vessel tokens need contrast and mask grids, got {:?} and {:?}",
            contrast.source, mask.source
        )));
    }
    if contrast.grid != mask.grid || contrast.dim != mask.dim {
        return Err(TensorError::dim(
            "vessel_tokens",
            g.shape(contrast.tokens),
            g.shape(mask.tokens),
        )
        .into());
    }
    let aligned = deformable_align(g, contrast, dconv)?;
    let tokens = g.sub(aligned.tokens, mask.tokens)?;
    Ok(TokenGrid {
        tokens,
        source: TokenSource::Vessel,
        ..aligned
    })
}

fn keys_values<T: Real>(
    g: &mut Graph<T>,
    generated: &TokenGrid,
    b: &BranchVars,
) -> Result<(Var, Var), TensorError> {
    let k = g.matmul(generated.tokens, b.wk)?;
    let v = g.matmul(generated.tokens, b.wv)?;
    Ok((k, v))
}

fn cross_attend<T: Real>(
    g: &mut Graph<T>,
    queries: Var,
    wq: Var,
    bq: Var,
    keys: Var,
    values: Var,
) -> Result<(Var, Var), TensorError> {
    let q = g.matmul(queries, wq)?;
    let q = g.add_row_bias(q, bq)?;
    let a = attention_map(g, q, keys)?;
    let fused = g.matmul(a, values)?;
    Ok((a, fused))
}

/// Global branch: self-attention over vessel tokens supplies the queries. Returns `(A_VMC, f_VMC)`.
pub fn vmc_branch<T: Real>(
    g: &mut Graph<T>,
    vessel: &TokenGrid,
    generated: &TokenGrid,
    b: &BranchVars,
) -> Result<(Var, Var), TensorError> {
    let (k, v) = keys_values(g, generated, b)?;
    vmc_attend(g, vessel, k, v, b)
}

fn vmc_attend<T: Real>(
    g: &mut Graph<T>,
    vessel: &TokenGrid,
    k: Var,
    v: Var,
    b: &BranchVars,
) -> Result<(Var, Var), TensorError> {
    let global = self_attention(g, vessel.tokens, &b.vmc_attn)?;
    cross_attend(g, global, b.wq_vmc, b.bq_vmc, k, v)
}

/// Local branch: two 3×3 convolutions with a rectifier supply the queries. Returns `(A_VBD, f_VBD)`.
pub fn vbd_branch<T: Real>(
    g: &mut Graph<T>,
    vessel: &TokenGrid,
    generated: &TokenGrid,
    b: &BranchVars,
) -> Result<(Var, Var), TensorError> {
    let (k, v) = keys_values(g, generated, b)?;
    vbd_attend(g, vessel, k, v, b)
}

fn vbd_attend<T: Real>(
    g: &mut Graph<T>,
    vessel: &TokenGrid,
    k: Var,
    v: Var,
    b: &BranchVars,
) -> Result<(Var, Var), TensorError> {
    let map = tokens_to_map(g, vessel.tokens, vessel.grid)?;
    let h = g.conv2d(map, b.conv1, Some(b.conv1_bias))?;
    let h = g.relu(h)?;
    let h = g.conv2d(h, b.conv2, Some(b.conv2_bias))?;
    let local = map_to_tokens(g, h)?;
    cross_attend(g, local, b.wq_vbd, b.bq_vbd, k, v)
}

/// Output of [`oq_branch`].
#[derive(Clone, Copy, Debug)]
pub struct OqOutput {
    pub tokens: Var,
    pub attn_generated: Var,
    pub attn_fused: Var,
    pub weights: Var,
}

/// Overall branch: mixes the Generated self-attention map with the VMC and VBD maps
/// using simplex weights `(α, β, γ)`, then applies it to `V_G`. α and β are the first
/// two entries of `softmax(fusion_logits)` and γ is the remainder `1 − (α + β)`, which
/// makes `α + β + γ` exactly one in floating point.
pub fn oq_branch<T: Real>(
    g: &mut Graph<T>,
    generated: &TokenGrid,
    attn_vmc: Var,
    attn_vbd: Var,
    b: &BranchVars,
) -> Result<OqOutput, TensorError> {
    let (k, v) = keys_values(g, generated, b)?;
    oq_attend(g, generated, attn_vmc, attn_vbd, k, v, b)
}

fn oq_attend<T: Real>(
    g: &mut Graph<T>,
    generated: &TokenGrid,
    attn_vmc: Var,
    attn_vbd: Var,
    k: Var,
    v: Var,
    b: &BranchVars,
) -> Result<OqOutput, TensorError> {
    let q = g.matmul(generated.tokens, b.wq_oq)?;
    let q = g.add_row_bias(q, b.bq_oq)?;
    let attn_generated = attention_map(g, q, k)?;
    let soft = g.softmax_rows(b.fusion_logits)?;
    let alpha = g.gather(soft, vec![0], vec![1])?;
    let beta = g.gather(soft, vec![1], vec![1])?;
    let one = g.input(Tensor::full(vec![1], T::one()));
    let alpha_beta = g.add(alpha, beta)?;
    let gamma = g.sub(one, alpha_beta)?;
    let weights = g.concat(&[alpha, beta, gamma])?;
    let a = g.mul_scalar(attn_generated, alpha)?;
    let bm = g.mul_scalar(attn_vmc, beta)?;
    let c = g.mul_scalar(attn_vbd, gamma)?;
    let fused = g.add(a, bm)?;
    let fused = g.add(fused, c)?;
    let tokens = g.matmul(fused, v)?;
    Ok(OqOutput {
        tokens,
        attn_generated,
        attn_fused: fused,
        weights,
    })
}

/// Full fusion pass from patchified images.
#[allow(clippy::too_many_arguments)]
pub fn must_forward<T: Real>(
    g: &mut Graph<T>,
    mask: Var,
    contrast: Var,
    generated: Var,
    enc: &EncoderVars,
    dconv: &DeformableVars,
    branches: &BranchVars,
    grid: usize,
) -> Result<BranchOutput, ModelError> {
    let f_m = encode(g, mask, enc, grid, TokenSource::Mask)?;
    let f_c = encode(g, contrast, enc, grid, TokenSource::Contrast)?;
    let f_g = encode(g, generated, enc, grid, TokenSource::Generated)?;
    let f_v = vessel_tokens(g, &f_c, &f_m, dconv)?;
    let (k, v) = keys_values(g, &f_g, branches)?;
    let (attn_vmc, vmc) = vmc_attend(g, &f_v, k, v, branches)?;
    let (attn_vbd, vbd) = vbd_attend(g, &f_v, k, v, branches)?;
    let oq = oq_attend(g, &f_g, attn_vmc, attn_vbd, k, v, branches)?;
    Ok(BranchOutput {
        vmc,
        vbd,
        oq: oq.tokens,
        attn_vmc,
        attn_vbd,
        attn_generated: oq.attn_generated,
        attn_fused: oq.attn_fused,
        weights: oq.weights,
        vessel: f_v,
    })
}

/// Three same-size grayscale images with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletImages<T> {
    pub mask: Vec<T>,
    pub contrast: Vec<T>,
    pub generated: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
struct AttentionIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct EncoderIds {
    embed: ParamId,
    embed_bias: ParamId,
    position: ParamId,
    attn: AttentionIds,
}

#[derive(Clone, Copy, Debug)]
struct DeformableIds {
    offset_kernel: ParamId,
    kernel: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct BranchIds {
    vmc_attn: AttentionIds,
    wq_vmc: ParamId,
    bq_vmc: ParamId,
    conv1: ParamId,
    conv1_bias: ParamId,
    conv2: ParamId,
    conv2_bias: ParamId,
    wq_vbd: ParamId,
    bq_vbd: ParamId,
    wk: ParamId,
    wv: ParamId,
    wq_oq: ParamId,
    bq_oq: ParamId,
    fusion_logits: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct HeadIds {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
enum Layout {
    Fusion {
        encoder: EncoderIds,
        dconv: DeformableIds,
        branches: BranchIds,
        heads: [HeadIds; 3],
    },
    Baseline {
        encoder: EncoderIds,
        heads: [HeadIds; 3],
    },
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[5]` level logits for VMC, VBD and OQ.
    pub logits: [Var; 3],
    /// Pooled head inputs per metric; the baseline shares one vector across metrics.
    pub features: [Var; 3],
    pub branches: Option<BranchOutput>,
}

/// Per-metric level distributions for one triplet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction<T> {
    pub levels: [LevelDistribution<T>; 3],
}

impl<T: Real> Prediction<T> {
    pub fn scores(&self) -> [T; 3] {
        self.levels.map(|l| l.score())
    }

    pub fn metric(&self, metric: Metric) -> &LevelDistribution<T> {
        &self.levels[metric.index()]
    }
}

/// Encoder, fusion module and level heads with their parameters.
#[derive(Clone, Debug)]
pub struct QualityModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

const CHECKPOINT_FORMAT: &str = "angioqa-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: ModelConfig,
    params: Vec<ParamRecord>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Real>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
    }
}

impl<T: Real> QualityModel<T> {
    /// Freshly initialized model. Deformable offsets start at zero and the
    /// deformable kernel near the identity, so alignment starts as a plain copy.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = config.dim;
        let p2 = config.patch_size * config.patch_size;
        let n = config.tokens();
        let mut ps = ParamStore::new();
        let inv_sqrt = |k: usize| 1.0 / (k as f64).sqrt();

        let attention = |ps: &mut ParamStore<T>, init: &mut Init, prefix: &str| AttentionIds {
            wq: ps.push(format!("{prefix}.wq"), init.normal(vec![d, d], inv_sqrt(d))),
            wk: ps.push(format!("{prefix}.wk"), init.normal(vec![d, d], inv_sqrt(d))),
            wv: ps.push(
                format!("{prefix}.wv"),
                init.normal(vec![d, d], 0.5 * inv_sqrt(d)),
            ),
        };

        let encoder = EncoderIds {
            embed: ps.push("encoder.embed", init.normal(vec![p2, d], inv_sqrt(p2))),
            embed_bias: ps.push("encoder.embed_bias", Tensor::zeros(vec![d])),
            position: ps.push("encoder.position", init.normal(vec![n, d], 0.5)),
            attn: attention(&mut ps, &mut init, "encoder.attn"),
        };

        let head_in = if config.fusion { d } else { 3 * d };
        let head = |ps: &mut ParamStore<T>, init: &mut Init, metric: Metric| HeadIds {
            weight: ps.push(
                format!("head.{}.weight", metric.as_str().to_lowercase()),
                init.normal(vec![head_in, 5], 0.1 * inv_sqrt(head_in)),
            ),
            bias: ps.push(
                format!("head.{}.bias", metric.as_str().to_lowercase()),
                Tensor::zeros(vec![5]),
            ),
        };

        let layout = if config.fusion {
            let conv_std = (2.0 / (9 * d) as f64).sqrt();
            let mut kernel: Tensor<T> = init.normal(vec![d, d, 3, 3], 0.01);
            for c in 0..d {
                kernel.data_mut()[(c * d + c) * 9 + 4] += T::one();
            }
            let dconv = DeformableIds {
                offset_kernel: ps.push("dconv.offset_kernel", Tensor::zeros(vec![18, d, 3, 3])),
                kernel: ps.push("dconv.kernel", kernel),
            };
            let branches = BranchIds {
                vmc_attn: attention(&mut ps, &mut init, "vmc.self_attn"),
                wq_vmc: ps.push("vmc.wq", init.normal(vec![d, d], inv_sqrt(d))),
                bq_vmc: ps.push("vmc.bq", Tensor::zeros(vec![d])),
                conv1: ps.push("vbd.conv1", init.normal(vec![d, d, 3, 3], conv_std)),
                conv1_bias: ps.push("vbd.conv1_bias", Tensor::zeros(vec![d])),
                conv2: ps.push("vbd.conv2", init.normal(vec![d, d, 3, 3], conv_std)),
                conv2_bias: ps.push("vbd.conv2_bias", Tensor::zeros(vec![d])),
                wq_vbd: ps.push("vbd.wq", init.normal(vec![d, d], inv_sqrt(d))),
                bq_vbd: ps.push("vbd.bq", Tensor::zeros(vec![d])),
                wk: ps.push("generated.wk", init.normal(vec![d, d], inv_sqrt(d))),
                wv: ps.push("generated.wv", init.normal(vec![d, d], inv_sqrt(d))),
                wq_oq: ps.push("oq.wq", init.normal(vec![d, d], inv_sqrt(d))),
                bq_oq: ps.push("oq.bq", Tensor::zeros(vec![d])),
                fusion_logits: ps.push("oq.fusion_logits", Tensor::zeros(vec![1, 3])),
            };
            let heads = Metric::ALL.map(|m| head(&mut ps, &mut init, m));
            Layout::Fusion {
                encoder,
                dconv,
                branches,
                heads,
            }
        } else {
            let heads = Metric::ALL.map(|m| head(&mut ps, &mut init, m));
            Layout::Baseline { encoder, heads }
        };

        Ok(QualityModel {
            config,
            params: ps,
            layout,
        })
    }

    /// Rebuilds a model from stored parameters, validating names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        let template = QualityModel::<T>::init(config, 0)?;
        if template.params.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                template.params.len(),
                params.len()
            )));
        }
        let mut ordered = ParamStore::new();
        for (name, t) in template.params.iter() {
            let id = params
                .find(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))?;
            let stored = params.get(id);
            if stored.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            ordered.push(name, stored.clone());
        }
        Ok(QualityModel {
            config,
            params: ordered,
            layout: template.layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Current (α, β, γ); `None` for the baseline.
    pub fn fusion_weights(&self) -> Option<[T; 3]> {
        match self.layout {
            Layout::Fusion { branches, .. } => {
                let mut w: [T; 3] = self.params.get(branches.fusion_logits).data()[..3]
                    .try_into()
                    .expect("three logits");
                crate::graph::softmax_in_place(&mut w);
                w[2] = T::one() - (w[0] + w[1]);
                Some(w)
            }
            Layout::Baseline { .. } => None,
        }
    }

    fn check_images(&self, images: &TripletImages<T>) -> Result<(), ModelError> {
        let want = self.config.image_size * self.config.image_size;
        for (role, img) in [
            ("mask", &images.mask),
            ("contrast", &images.contrast),
            ("generated", &images.generated),
        ] {
            if img.len() != want {
                return Err(TensorError::invalid(
                    "forward",
                    format!(
                        "{role} image has {} pixels, expected {}×{}",
                        img.len(),
                        self.config.image_size,
                        self.config.image_size
                    ),
                )
                .into());
            }
        }
        Ok(())
    }

    /// Records the forward pass in `g`; `bound` comes from [`ParamStore::bind`].
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        images: &TripletImages<T>,
    ) -> Result<ModelOutput, ModelError> {
        self.check_images(images)?;
        let size = self.config.image_size;
        let patch = self.config.patch_size;
        let grid = self.config.grid();
        let mask = g.input(patchify(&images.mask, size, patch)?);
        let contrast = g.input(patchify(&images.contrast, size, patch)?);
        let generated = g.input(patchify(&images.generated, size, patch)?);
        let at = |id: ParamId| bound[id.0];
        let attention = |a: AttentionIds| AttentionVars {
            wq: at(a.wq),
            wk: at(a.wk),
            wv: at(a.wv),
        };
        let encoder = |e: EncoderIds| EncoderVars {
            embed: at(e.embed),
            embed_bias: at(e.embed_bias),
            position: at(e.position),
            attn: attention(e.attn),
        };
        let head = |h: HeadIds| HeadVars {
            weight: at(h.weight),
            bias: at(h.bias),
        };

        match self.layout {
            Layout::Fusion {
                encoder: e,
                dconv,
                branches: b,
                heads,
            } => {
                let enc = encoder(e);
                let dconv = DeformableVars {
                    offset_kernel: at(dconv.offset_kernel),
                    kernel: at(dconv.kernel),
                };
                let branches = BranchVars {
                    vmc_attn: attention(b.vmc_attn),
                    wq_vmc: at(b.wq_vmc),
                    bq_vmc: at(b.bq_vmc),
                    conv1: at(b.conv1),
                    conv1_bias: at(b.conv1_bias),
                    conv2: at(b.conv2),
                    conv2_bias: at(b.conv2_bias),
                    wq_vbd: at(b.wq_vbd),
                    bq_vbd: at(b.bq_vbd),
                    wk: at(b.wk),
                    wv: at(b.wv),
                    wq_oq: at(b.wq_oq),
                    bq_oq: at(b.bq_oq),
                    fusion_logits: at(b.fusion_logits),
                };
                let out =
                    must_forward(g, mask, contrast, generated, &enc, &dconv, &branches, grid)?;
                let features = [
                    g.mean_rows(out.vmc)?,
                    g.mean_rows(out.vbd)?,
                    g.mean_rows(out.oq)?,
                ];
                let logits = [
                    pooled_logits(g, features[0], &head(heads[0]))?,
                    pooled_logits(g, features[1], &head(heads[1]))?,
                    pooled_logits(g, features[2], &head(heads[2]))?,
                ];
                Ok(ModelOutput {
                    logits,
                    features,
                    branches: Some(out),
                })
            }
            Layout::Baseline { encoder: e, heads } => {
                let enc = encoder(e);
                let f_m = encode(g, mask, &enc, grid, TokenSource::Mask)?;
                let f_c = encode(g, contrast, &enc, grid, TokenSource::Contrast)?;
                let f_g = encode(g, generated, &enc, grid, TokenSource::Generated)?;
                let pm = g.mean_rows(f_m.tokens)?;
                let pc = g.mean_rows(f_c.tokens)?;
                let pg = g.mean_rows(f_g.tokens)?;
                let pooled = g.concat(&[pm, pc, pg])?;
                let logits = [
                    pooled_logits(g, pooled, &head(heads[0]))?,
                    pooled_logits(g, pooled, &head(heads[1]))?,
                    pooled_logits(g, pooled, &head(heads[2]))?,
                ];
                Ok(ModelOutput {
                    logits,
                    features: [pooled; 3],
                    branches: None,
                })
            }
        }
    }

    /// Inference: per-metric level distributions.
    pub fn predict(&self, images: &TripletImages<T>) -> Result<Prediction<T>, ModelError> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let out = self.forward(&mut g, &bound, images)?;
        let levels = out.logits.map(|l| {
            let v: [T; 5] = g.value(l).data().try_into().expect("five logits");
            LevelDistribution::from_logits(&v)
        });
        Ok(Prediction { levels })
    }

    /// Pooled head inputs per metric, as vectors.
    pub fn features(&self, images: &TripletImages<T>) -> Result<[Vec<T>; 3], ModelError> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let out = self.forward(&mut g, &bound, images)?;
        Ok(out.features.map(|f| g.value(f).data().to_vec()))
    }

    /// Summed cross-entropy over the three metrics against target levels, and
    /// its gradient for every parameter (aligned with [`ParamStore::tensors`]).
    pub fn loss_and_gradients(
        &self,
        images: &TripletImages<T>,
        targets: [usize; 3],
    ) -> Result<(T, Vec<Tensor<T>>), ModelError> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let out = self.forward(&mut g, &bound, images)?;
        let loss = self.loss(&mut g, &out, targets)?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let tensors = bound
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect();
        Ok((value, tensors))
    }

    pub fn loss(
        &self,
        g: &mut Graph<T>,
        out: &ModelOutput,
        targets: [usize; 3],
    ) -> Result<Var, ModelError> {
        let l0 = g.cross_entropy(out.logits[0], targets[0])?;
        let l1 = g.cross_entropy(out.logits[1], targets[1])?;
        let l2 = g.cross_entropy(out.logits[2], targets[2])?;
        let s = g.add(l0, l1)?;
        Ok(g.add(s, l2)?)
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.config,
            params: self.params.to_records(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!(
                "unknown format {:?}",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {}",
                ckpt.version
            )));
        }
        let params = ParamStore::from_records(&ckpt.params)?;
        Self::from_params(ckpt.model, params)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
