//! Frozen toy diffusion transformer.
//!
//! Latent patch tokens attend jointly over themselves and every condition
//! token; only the latent rows are updated by each block:
//!
//! ```text
//! H  = LN([z; c])
//! Δz = mlp_out(GELU(mlp_in(attn_out(Attn(q(H_z), k(H), v(H))))))
//! z' = z + Δz
//! ```
//!
//! The network output `F = unpatch(z_L)` estimates `x_1 − x_t`; the velocity
//! is `F / max(1 − t, T_FLOOR)`.
//!
//! Initialization mimics a pretrained model: encoders project patches onto an
//! orthonormal content subspace, positions and time live in orthogonal
//! subspaces, and the unpatch projection reads the content subspace with a
//! negative sign, so the latent's own content enters the output as `−x_t`.
//! The first block is rewired so attention copies content between tokens
//! that share a grid position; later blocks keep their random weights and
//! only perturb that path.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Zip};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blob::{Blob, NamedTensor};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::lora::{to_matrix, AdapterSet, LoraPair, Projection};
use crate::rng;
use crate::structure::CannyMap;

/// Lower bound on the remaining-time divisor in the velocity output.
pub const T_FLOOR: f64 = 1.0 / 32.0;
const LN_EPS: f64 = 1e-6;
const MAGIC: [u8; 4] = *b"SGBW";
const MLP_OUT_GAIN: f64 = 0.5;
const SUBSPACE_GAIN: f64 = 2.0;
/// Query/key gain of the position-matching heads in the first block.
const ROUTE_QK_GAIN: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub text_vocab: usize,
    pub max_text_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 64,
            patch_size: 8,
            channels: 3,
            width: 256,
            depth: 4,
            heads: 4,
            text_vocab: 64,
            max_text_len: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("backbone.image_size", self.image_size),
            ("backbone.patch_size", self.patch_size),
            ("backbone.channels", self.channels),
            ("backbone.width", self.width),
            ("backbone.depth", self.depth),
            ("backbone.heads", self.heads),
            ("backbone.text_vocab", self.text_vocab),
            ("backbone.max_text_len", self.max_text_len),
        ];
        if let Some((field, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*field, "must be strictly positive"));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "backbone.image_size",
                format!("{} is not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(
                "backbone.width",
                format!("{} is not divisible by heads {}", self.width, self.heads),
            ));
        }
        if self.width < 16 {
            return Err(Error::config("backbone.width", "must be at least 16"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Widths of the position and time subspaces.
    pub fn subspace_dims(&self) -> (usize, usize) {
        let pos = (self.width / 8).max(4) / 4 * 4;
        let time = (self.width / 16).max(2) / 2 * 2;
        (pos, time)
    }

    pub fn to_kv(&self) -> Vec<(String, usize)> {
        vec![
            ("backbone.image_size".into(), self.image_size),
            ("backbone.patch_size".into(), self.patch_size),
            ("backbone.channels".into(), self.channels),
            ("backbone.width".into(), self.width),
            ("backbone.depth".into(), self.depth),
            ("backbone.heads".into(), self.heads),
            ("backbone.text_vocab".into(), self.text_vocab),
            ("backbone.max_text_len".into(), self.max_text_len),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Latent,
    ImageCond,
    TextCond,
    CannyCond,
}

impl Role {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Position {
    Grid { row: usize, col: usize },
    Seq(usize),
}

/// Tokens with per-token role tags and coordinates. Position embeddings are
/// added when sequences are concatenated, not stored in `tokens`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub roles: Vec<Role>,
    pub positions: Vec<Position>,
}

impl TokenSequence {
    pub fn new(tokens: Array2<f64>, roles: Vec<Role>, positions: Vec<Position>) -> Result<Self> {
        if roles.len() != tokens.nrows() || positions.len() != tokens.nrows() {
            return Err(Error::shape(format!(
                "{} tokens with {} roles and {} positions",
                tokens.nrows(),
                roles.len(),
                positions.len()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite token entry".into()));
        }
        Ok(TokenSequence {
            tokens,
            roles,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }

    /// Role shared by every token, if uniform.
    pub fn role(&self) -> Option<Role> {
        let first = *self.roles.first()?;
        self.roles.iter().all(|&r| r == first).then_some(first)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln_gamma: Array1<f64>,
    pub ln_beta: Array1<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub attn_out: Array2<f64>,
    pub mlp_in: Array2<f64>,
    pub mlp_out: Array2<f64>,
}

impl BlockWeights {
    pub fn projection(&self, p: Projection) -> &Array2<f64> {
        match p {
            Projection::Q => &self.q,
            Projection::K => &self.k,
            Projection::V => &self.v,
            Projection::AttnOut => &self.attn_out,
            Projection::MlpIn => &self.mlp_in,
            Projection::MlpOut => &self.mlp_out,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub seed: u64,
    pub frozen: bool,
    pub latent_embed: Array2<f64>,
    pub latent_bias: Array1<f64>,
    pub image_embed: Array2<f64>,
    pub image_bias: Array1<f64>,
    pub canny_embed: Array2<f64>,
    pub canny_bias: Array1<f64>,
    pub text_table: Array2<f64>,
    pub roles: Array2<f64>,
    pub pos_grid: Array2<f64>,
    pub pos_seq: Array2<f64>,
    /// Maps the time features onto the time subspace (time_dim × d).
    pub time_basis: Array2<f64>,
    pub unpatch: Array2<f64>,
    pub unpatch_bias: Array1<f64>,
    pub blocks: Vec<BlockWeights>,
}

fn orthonormal_basis(d: usize, rng: &mut rng::Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let m = DMatrix::<f64>::from_fn(d, d, |_, _| normal.sample(rng));
    let q = m.qr().q();
    Array2::from_shape_fn((d, d), |(i, j)| q[(i, j)])
}

fn sinusoid(value: f64, dims: usize, base: f64) -> impl Iterator<Item = f64> {
    let half = dims / 2;
    (0..half).flat_map(move |k| {
        let f = 1.0 / base.powf(k as f64 / half as f64);
        [(value * f).sin(), (value * f).cos()]
    })
}

/// Sinusoidal features of t in [0, 1], `dims` wide.
pub fn time_features(t: f64, dims: usize) -> Array1<f64> {
    sinusoid(100.0 * t, dims, 1000.0).collect()
}

fn gaussian(shape: (usize, usize), std: f64, rng: &mut rng::Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || normal.sample(rng))
}

/// Turns a block into a position-matched copy of content: every head
/// attends by position similarity and carries one slice of the content
/// subspace, and the MLP pair `u ↦ GELU(u) − GELU(−u) = u` passes it through
/// with a negative sign. The unused hidden units keep their random weights.
fn route_block(block: &mut BlockWeights, content: ArrayView2<f64>, pos: ArrayView2<f64>, heads: usize) {
    let (d, pd) = content.dim();
    let npos = pos.ncols();
    let hd = d / heads;
    let slice = pd / heads;
    if pd % heads != 0 || slice > hd || npos > hd || 2 * pd > 4 * d {
        return;
    }
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        block.q.slice_mut(s![.., cols.clone()]).fill(0.0);
        block.k.slice_mut(s![.., cols.clone()]).fill(0.0);
        block.v.slice_mut(s![.., cols.clone()]).fill(0.0);
        block.attn_out.slice_mut(s![cols, ..]).fill(0.0);
        let p = &pos * ROUTE_QK_GAIN;
        block.q.slice_mut(s![.., h * hd..h * hd + npos]).assign(&p);
        block.k.slice_mut(s![.., h * hd..h * hd + npos]).assign(&p);
        let c = content.slice(s![.., h * slice..(h + 1) * slice]);
        block.v.slice_mut(s![.., h * hd..h * hd + slice]).assign(&c);
        block.attn_out.slice_mut(s![h * hd..h * hd + slice, ..]).assign(&c.t());
    }
    block.mlp_in.slice_mut(s![.., ..pd]).assign(&content);
    block.mlp_in.slice_mut(s![.., pd..2 * pd]).assign(&(-&content));
    block.mlp_out.slice_mut(s![..pd, ..]).assign(&(-&content.t()));
    block.mlp_out.slice_mut(s![pd..2 * pd, ..]).assign(&content.t());
}

/// Deterministic frozen weights for `(config, seed)`.
pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<BackboneWeights> {
    config.validate()?;
    let d = config.width;
    let pd = config.patch_dim();
    let g = config.grid();
    let (npos, ntime) = config.subspace_dims();
    let mut rng = rng::stream(seed, 0xBB);
    let basis = orthonormal_basis(d, &mut rng);
    let pos_basis = basis.slice(s![.., d - npos - ntime..d - ntime]).to_owned();
    let time_basis = basis.slice(s![.., d - ntime..]).t().to_owned() * SUBSPACE_GAIN;
    let content_capacity = d - npos - ntime;

    let (embed, unpatch) = if content_capacity >= pd {
        let content = basis.slice(s![.., ..pd]).to_owned();
        (content.t().to_owned(), -content)
    } else {
        (
            gaussian((pd, d), 1.0 / (pd as f64).sqrt(), &mut rng),
            gaussian((d, pd), 1.0 / (d as f64).sqrt(), &mut rng),
        )
    };
    // biases live outside the content subspace
    let mut bias = || {
        let raw = gaussian((1, d), 0.02, &mut rng).row(0).to_owned();
        if content_capacity >= pd {
            let coords = basis.slice(s![.., ..pd]).t().dot(&raw);
            raw - basis.slice(s![.., ..pd]).dot(&coords)
        } else {
            raw
        }
    };
    let latent_bias = bias();
    let image_bias = bias();
    let canny_bias = bias();

    let pos_grid_raw = Array2::from_shape_fn((g * g, npos), |(k, j)| {
        let (row, col) = ((k / g) as f64, (k % g) as f64);
        let quarter = npos / 4;
        let (value, idx) = if j < 2 * quarter {
            (row, j)
        } else {
            (col, j - 2 * quarter)
        };
        let feats: Vec<f64> = sinusoid(value, 2 * quarter, 100.0).collect();
        feats[idx]
    });
    let pos_seq_raw = Array2::from_shape_fn((config.max_text_len, npos), |(i, j)| {
        let feats: Vec<f64> = sinusoid(i as f64, npos, 100.0).collect();
        feats[j]
    });
    let pos_grid = pos_grid_raw.dot(&pos_basis.t()) * SUBSPACE_GAIN;
    let pos_seq = pos_seq_raw.dot(&pos_basis.t()) * SUBSPACE_GAIN;

    let text_table = gaussian((config.text_vocab, d), 1.0, &mut rng);
    let roles = gaussian((4, d), 0.5, &mut rng);
    let mut blocks: Vec<BlockWeights> = (0..config.depth)
        .map(|_| {
            let mut proj = |p: Projection| {
                let (i, o) = p.dims(d);
                gaussian((i, o), 1.0 / (i as f64).sqrt(), &mut rng)
            };
            let q = proj(Projection::Q);
            let k = proj(Projection::K);
            let v = proj(Projection::V);
            let attn_out = proj(Projection::AttnOut);
            let mlp_in = proj(Projection::MlpIn);
            let mlp_out = proj(Projection::MlpOut) * MLP_OUT_GAIN;
            BlockWeights {
                ln_gamma: Array1::ones(d),
                ln_beta: Array1::zeros(d),
                q,
                k,
                v,
                attn_out,
                mlp_in,
                mlp_out,
            }
        })
        .collect();
    if content_capacity >= pd {
        let content = basis.slice(s![.., ..pd]);
        route_block(&mut blocks[0], content, pos_basis.view(), config.heads);
    }
    Ok(BackboneWeights {
        config: config.clone(),
        seed,
        frozen: true,
        latent_embed: embed.clone(),
        latent_bias,
        image_embed: embed.clone(),
        image_bias,
        canny_embed: embed,
        canny_bias,
        text_table,
        roles,
        pos_grid,
        pos_seq,
        time_basis,
        unpatch,
        unpatch_bias: Array1::zeros(pd),
        blocks,
    })
}

/// Row-major patch grid; each row is a patch flattened as (py, px, c).
pub fn patchify(image: &ImageGrid, patch: usize) -> Result<Array2<f64>> {
    let (h, w, c) = image.dim();
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "{h}×{w} image is not divisible into {patch}px patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let v = image.values();
    Ok(Array2::from_shape_fn((gh * gw, patch * patch * c), |(k, j)| {
        let (gy, gx) = (k / gw, k % gw);
        let (py, rest) = (j / (patch * c), j % (patch * c));
        let (px, ch) = (rest / c, rest % c);
        v[[gy * patch + py, gx * patch + px, ch]]
    }))
}

pub fn unpatchify(tokens: ArrayView2<f64>, size: usize, patch: usize, channels: usize) -> Result<ImageGrid> {
    let g = size / patch;
    if tokens.dim() != (g * g, patch * patch * channels) {
        return Err(Error::shape(format!(
            "{:?} tokens cannot form a {size}px image with {patch}px patches",
            tokens.dim()
        )));
    }
    Ok(ImageGrid::from_fn(size, size, channels, |(y, x, ch)| {
        let k = (y / patch) * g + x / patch;
        let j = ((y % patch) * patch + x % patch) * channels + ch;
        tokens[[k, j]]
    }))
}

fn grid_positions(g: usize) -> Vec<Position> {
    (0..g * g).map(|k| Position::Grid { row: k / g, col: k % g }).collect()
}

impl BackboneWeights {
    fn check_image(&self, image: &ImageGrid) -> Result<()> {
        let c = &self.config;
        if image.dim() != (c.image_size, c.image_size, c.channels) {
            return Err(Error::shape(format!(
                "image {:?} does not match configured {}×{}×{}",
                image.dim(),
                c.image_size,
                c.image_size,
                c.channels
            )));
        }
        Ok(())
    }

    fn encode_patches(
        &self,
        image: &ImageGrid,
        embed: &Array2<f64>,
        bias: &Array1<f64>,
        role: Role,
    ) -> Result<TokenSequence> {
        self.check_image(image)?;
        let mut tokens = patchify(image, self.config.patch_size)?.dot(embed);
        tokens += bias;
        tokens += &self.roles.row(role.index());
        let n = tokens.nrows();
        TokenSequence::new(tokens, vec![role; n], grid_positions(self.config.grid()))
    }

    pub fn encode_image(&self, image: &ImageGrid) -> Result<TokenSequence> {
        self.encode_patches(image, &self.image_embed, &self.image_bias, Role::ImageCond)
    }

    pub fn encode_canny(&self, canny: &CannyMap) -> Result<TokenSequence> {
        self.encode_patches(canny.values(), &self.canny_embed, &self.canny_bias, Role::CannyCond)
    }

    pub fn encode_text(&self, ids: &[usize]) -> Result<TokenSequence> {
        let c = &self.config;
        if ids.len() > c.max_text_len {
            return Err(Error::shape(format!(
                "prompt has {} tokens, max_text_len is {}",
                ids.len(),
                c.max_text_len
            )));
        }
        if let Some((index, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= c.text_vocab) {
            return Err(Error::Encoding {
                index,
                id,
                vocab: c.text_vocab,
            });
        }
        let role = self.roles.row(Role::TextCond.index());
        let mut tokens = Array2::zeros((ids.len(), c.width));
        for (mut row, &id) in tokens.rows_mut().into_iter().zip(ids) {
            row.assign(&(&self.text_table.row(id) + &role));
        }
        TokenSequence::new(
            tokens,
            vec![Role::TextCond; ids.len()],
            (0..ids.len()).map(Position::Seq).collect(),
        )
    }

    fn position_embedding(&self, p: Position) -> Result<ArrayView1<'_, f64>> {
        let g = self.config.grid();
        match p {
            Position::Grid { row, col } if row < g && col < g => Ok(self.pos_grid.row(row * g + col)),
            Position::Seq(i) if i < self.pos_seq.nrows() => Ok(self.pos_seq.row(i)),
            other => Err(Error::shape(format!("position {other:?} outside the embedding tables"))),
        }
    }

    /// Concatenates condition streams with their position embeddings.
    pub fn assemble(&self, conds: &[TokenSequence]) -> Result<Array2<f64>> {
        let d = self.config.width;
        let total: usize = conds.iter().map(TokenSequence::len).sum();
        let mut out = Array2::zeros((total, d));
        let mut row = 0;
        for seq in conds {
            if seq.width() != d {
                return Err(Error::shape(format!(
                    "condition width {} != model width {d}",
                    seq.width()
                )));
            }
            for (tok, &pos) in seq.tokens.rows().into_iter().zip(&seq.positions) {
                let mut dst = out.row_mut(row);
                dst.assign(&tok);
                dst += &self.position_embedding(pos)?;
                row += 1;
            }
        }
        Ok(out)
    }

    fn latent_tokens(&self, x_t: &ImageGrid, t: f64) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_image(x_t)?;
        let patches = patchify(x_t, self.config.patch_size)?;
        let mut z = patches.dot(&self.latent_embed);
        z += &self.latent_bias;
        z += &self.roles.row(Role::Latent.index());
        z += &self.pos_grid;
        z += &time_features(t, self.time_basis.nrows()).dot(&self.time_basis);
        Ok((patches, z))
    }

    /// SHA-256 over every parameter name, shape and value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.named_tensors() {
            h.update(t.name.as_bytes());
            for &dim in t.value.shape() {
                h.update((dim as u64).to_le_bytes());
            }
            for v in t.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        crate::blob::hex_digest(h)
    }

    fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        let mut push = |name: String, value: ndarray::ArrayD<f64>| out.push(NamedTensor { name, value });
        push("latent_embed".into(), self.latent_embed.clone().into_dyn());
        push("latent_bias".into(), self.latent_bias.clone().into_dyn());
        push("image_embed".into(), self.image_embed.clone().into_dyn());
        push("image_bias".into(), self.image_bias.clone().into_dyn());
        push("canny_embed".into(), self.canny_embed.clone().into_dyn());
        push("canny_bias".into(), self.canny_bias.clone().into_dyn());
        push("text_table".into(), self.text_table.clone().into_dyn());
        push("roles".into(), self.roles.clone().into_dyn());
        push("pos_grid".into(), self.pos_grid.clone().into_dyn());
        push("pos_seq".into(), self.pos_seq.clone().into_dyn());
        push("time_basis".into(), self.time_basis.clone().into_dyn());
        push("unpatch".into(), self.unpatch.clone().into_dyn());
        push("unpatch_bias".into(), self.unpatch_bias.clone().into_dyn());
        for (l, b) in self.blocks.iter().enumerate() {
            push(format!("block{l}.ln_gamma"), b.ln_gamma.clone().into_dyn());
            push(format!("block{l}.ln_beta"), b.ln_beta.clone().into_dyn());
            for p in Projection::ALL {
                push(format!("block{l}.{}", p.name()), b.projection(p).clone().into_dyn());
            }
        }
        out
    }

    pub fn to_blob(&self) -> Result<Blob> {
        Ok(Blob {
            magic: MAGIC,
            header: serde_json::json!({
                "config": self.config,
                "seed": self.seed,
                "frozen": self.frozen,
            }),
            tensors: self.named_tensors(),
        })
    }

    pub fn from_blob(mut blob: Blob) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            config: BackboneConfig,
            seed: u64,
            frozen: bool,
        }
        let h: Header = serde_json::from_value(blob.header.clone())?;
        h.config.validate()?;
        let c = &h.config;
        let (d, pd) = (c.width, c.patch_dim());
        let (_, ntime) = c.subspace_dims();
        let mut mat =
            |name: &str, dim: (usize, usize)| -> Result<Array2<f64>> { to_matrix(blob.take(name)?, dim, name) };
        let latent_embed = mat("latent_embed", (pd, d))?;
        let image_embed = mat("image_embed", (pd, d))?;
        let canny_embed = mat("canny_embed", (pd, d))?;
        let text_table = mat("text_table", (c.text_vocab, d))?;
        let roles = mat("roles", (4, d))?;
        let pos_grid = mat("pos_grid", (c.num_patches(), d))?;
        let pos_seq = mat("pos_seq", (c.max_text_len, d))?;
        let time_basis = mat("time_basis", (ntime, d))?;
        let unpatch = mat("unpatch", (d, pd))?;
        let mut blocks = Vec::with_capacity(c.depth);
        for l in 0..c.depth {
            let mut m = |p: Projection| mat(&format!("block{l}.{}", p.name()), p.dims(d));
            let q = m(Projection::Q)?;
            let k = m(Projection::K)?;
            let v = m(Projection::V)?;
            let attn_out = m(Projection::AttnOut)?;
            let mlp_in = m(Projection::MlpIn)?;
            let mlp_out = m(Projection::MlpOut)?;
            blocks.push((q, k, v, attn_out, mlp_in, mlp_out));
        }
        let mut vec1 = |name: &str, len: usize| -> Result<Array1<f64>> {
            let v = blob.take(name)?;
            if v.shape() != [len] {
                return Err(Error::format("tensor", format!("{name}: shape {:?}", v.shape())));
            }
            Ok(v.into_dimensionality().expect("shape checked"))
        };
        let latent_bias = vec1("latent_bias", d)?;
        let image_bias = vec1("image_bias", d)?;
        let canny_bias = vec1("canny_bias", d)?;
        let unpatch_bias = vec1("unpatch_bias", pd)?;
        let blocks = blocks
            .into_iter()
            .enumerate()
            .map(|(l, (q, k, v, attn_out, mlp_in, mlp_out))| {
                Ok(BlockWeights {
                    ln_gamma: vec1(&format!("block{l}.ln_gamma"), d)?,
                    ln_beta: vec1(&format!("block{l}.ln_beta"), d)?,
                    q,
                    k,
                    v,
                    attn_out,
                    mlp_in,
                    mlp_out,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(t) = blob.tensors.first() {
            return Err(Error::format("weights blob", format!("unexpected tensor {}", t.name)));
        }
        Ok(BackboneWeights {
            config: h.config,
            seed: h.seed,
            frozen: h.frozen,
            latent_embed,
            latent_bias,
            image_embed,
            image_bias,
            canny_embed,
            canny_bias,
            text_table,
            roles,
            pos_grid,
            pos_seq,
            time_basis,
            unpatch,
            unpatch_bias,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_blob()?.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        BackboneWeights::from_blob(Blob::from_bytes(&bytes, MAGIC)?)
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise layer norm; returns (output, normalized rows, inverse std).
fn layer_norm(x: ArrayView2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let out = &xhat * gamma + beta;
    (out, xhat, rstd)
}

fn layer_norm_backward(
    dy: ArrayView2<f64>,
    xhat: ArrayView2<f64>,
    rstd: &Array1<f64>,
    gamma: &Array1<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = &dy * gamma;
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(rstd) {
        let mean_g = row.sum() / d;
        let mean_gx = row.dot(&xh) / d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|g, &xh| *g = r * (*g - mean_g - xh * mean_gx));
    }
    dx
}

/// `x·W` plus the adapter term; also returns `x·A` for the backward pass.
fn project(x: ArrayView2<f64>, w: &Array2<f64>, pair: Option<&LoraPair>) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut y = x.dot(w);
    let xa = pair.map(|p| {
        let xa = x.dot(&p.a);
        y.scaled_add(p.scale(), &xa.dot(&p.b));
        xa
    });
    (y, xa)
}

/// Accumulates adapter gradients and returns dL/dx for the first `rows_needed` rows.
fn project_backward(
    x: ArrayView2<f64>,
    xa: Option<&Array2<f64>>,
    dy: ArrayView2<f64>,
    w: &Array2<f64>,
    pair: Option<&LoraPair>,
    grad: Option<&mut LoraPair>,
    rows_needed: usize,
) -> Array2<f64> {
    let dy_needed = dy.slice(s![..rows_needed, ..]);
    let mut dx = dy_needed.dot(&w.t());
    if let (Some(p), Some(xa)) = (pair, xa) {
        let s = p.scale();
        let dyb = dy.dot(&p.b.t());
        dx.scaled_add(s, &dyb.slice(s![..rows_needed, ..]).dot(&p.a.t()));
        if let Some(g) = grad {
            g.a.scaled_add(s, &x.t().dot(&dyb));
            g.b.scaled_add(s, &xa.t().dot(&dy));
        }
    }
    dx
}

struct BlockCache {
    h: Array2<f64>,
    xhat_z: Array2<f64>,
    rstd_z: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    y: Array2<f64>,
    p: Array2<f64>,
    m: Array2<f64>,
    xa: [Option<Array2<f64>>; 6],
}

fn block_forward(
    block: &BlockWeights,
    heads: usize,
    z: &Array2<f64>,
    c: &Array2<f64>,
    adapter: Option<(&AdapterSet, usize)>,
    keep: bool,
) -> (Array2<f64>, Option<BlockCache>) {
    let n = z.nrows();
    let d = z.ncols();
    let hd = d / heads;
    let pair = |p: Projection| adapter.and_then(|(a, l)| a.pair(l, p));
    let mut full = Array2::zeros((n + c.nrows(), d));
    full.slice_mut(s![..n, ..]).assign(z);
    full.slice_mut(s![n.., ..]).assign(c);
    let (h, xhat, rstd) = layer_norm(full.view(), &block.ln_gamma, &block.ln_beta);
    let (q, xa_q) = project(h.slice(s![..n, ..]), &block.q, pair(Projection::Q));
    let (k, xa_k) = project(h.view(), &block.k, pair(Projection::K));
    let (v, xa_v) = project(h.view(), &block.v, pair(Projection::V));
    let scale = 1.0 / (hd as f64).sqrt();
    let mut o = Array2::zeros((n, d));
    let mut attn = Vec::with_capacity(if keep { heads } else { 0 });
    for head in 0..heads {
        let cols = s![.., head * hd..(head + 1) * hd];
        let mut logits = q.slice(cols).dot(&k.slice(cols).t());
        for mut row in logits.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
            row.mapv_inplace(|x| (x * scale - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        o.slice_mut(cols).assign(&logits.dot(&v.slice(cols)));
        if keep {
            attn.push(logits);
        }
    }
    let (y, xa_ao) = project(o.view(), &block.attn_out, pair(Projection::AttnOut));
    let (p, xa_mi) = project(y.view(), &block.mlp_in, pair(Projection::MlpIn));
    let m = p.mapv(gelu);
    let (delta, xa_mo) = project(m.view(), &block.mlp_out, pair(Projection::MlpOut));
    let out = z + &delta;
    let cache = keep.then(|| BlockCache {
        xhat_z: xhat.slice(s![..n, ..]).to_owned(),
        rstd_z: rstd.slice(s![..n]).to_owned(),
        h,
        q,
        k,
        v,
        attn,
        o,
        y,
        p,
        m,
        xa: [xa_q, xa_k, xa_v, xa_ao, xa_mi, xa_mo],
    });
    (out, cache)
}

fn site_grad<'a>(grads: &'a mut Option<&mut AdapterSet>, block: usize, p: Projection) -> Option<&'a mut LoraPair> {
    grads.as_deref_mut().and_then(|g| g.pair_mut(block, p))
}

fn block_backward(
    block: &BlockWeights,
    heads: usize,
    cache: &BlockCache,
    dz_out: &Array2<f64>,
    adapter: Option<(&AdapterSet, usize)>,
    mut grads: Option<&mut AdapterSet>,
) -> Array2<f64> {
    let n = dz_out.nrows();
    let d = dz_out.ncols();
    let hd = d / heads;
    let l = adapter.map(|(_, l)| l).unwrap_or(0);
    let pair = |p: Projection| adapter.and_then(|(a, l)| a.pair(l, p));
    let xa = |p: Projection| cache.xa[p.index()].as_ref();

    let dm = project_backward(
        cache.m.view(),
        xa(Projection::MlpOut),
        dz_out.view(),
        &block.mlp_out,
        pair(Projection::MlpOut),
        site_grad(&mut grads, l, Projection::MlpOut),
        n,
    );
    let mut dp = dm;
    Zip::from(&mut dp).and(&cache.p).for_each(|g, &x| *g *= gelu_grad(x));
    let dy = project_backward(
        cache.y.view(),
        xa(Projection::MlpIn),
        dp.view(),
        &block.mlp_in,
        pair(Projection::MlpIn),
        site_grad(&mut grads, l, Projection::MlpIn),
        n,
    );
    let do_ = project_backward(
        cache.o.view(),
        xa(Projection::AttnOut),
        dy.view(),
        &block.attn_out,
        pair(Projection::AttnOut),
        site_grad(&mut grads, l, Projection::AttnOut),
        n,
    );

    let total = cache.k.nrows();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((total, d));
    let mut dv = Array2::zeros((total, d));
    for head in 0..heads {
        let cols = s![.., head * hd..(head + 1) * hd];
        let a = &cache.attn[head];
        let doh = do_.slice(cols);
        let mut dlogits = doh.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&doh));
        for (mut g, arow) in dlogits.rows_mut().into_iter().zip(a.rows()) {
            let dot = g.dot(&arow);
            Zip::from(&mut g)
                .and(&arow)
                .for_each(|g, &p| *g = p * (*g - dot) * scale);
        }
        dq.slice_mut(cols).assign(&dlogits.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&dlogits.t().dot(&cache.q.slice(cols)));
    }
    let h_z = cache.h.slice(s![..n, ..]);
    let mut dh = project_backward(
        h_z,
        xa(Projection::Q),
        dq.view(),
        &block.q,
        pair(Projection::Q),
        site_grad(&mut grads, l, Projection::Q),
        n,
    );
    dh += &project_backward(
        cache.h.view(),
        xa(Projection::K),
        dk.view(),
        &block.k,
        pair(Projection::K),
        site_grad(&mut grads, l, Projection::K),
        n,
    );
    dh += &project_backward(
        cache.h.view(),
        xa(Projection::V),
        dv.view(),
        &block.v,
        pair(Projection::V),
        site_grad(&mut grads, l, Projection::V),
        n,
    );
    let mut dz = layer_norm_backward(dh.view(), cache.xhat_z.view(), &cache.rstd_z, &block.ln_gamma);
    dz += dz_out;
    dz
}

fn check_adapter(weights: &BackboneWeights, adapter: Option<&AdapterSet>) -> Result<()> {
    adapter.map_or(Ok(()), |a| a.check_compatible(&weights.config))
}

/// One block applied to latent tokens `z` (n×d) with condition streams.
/// Returns the updated latent slice only.
pub fn mm_attn_block(
    weights: &BackboneWeights,
    z: &Array2<f64>,
    conds: &[TokenSequence],
    block_index: usize,
    adapter: Option<&AdapterSet>,
) -> Result<Array2<f64>> {
    check_adapter(weights, adapter)?;
    let d = weights.config.width;
    if z.ncols() != d {
        return Err(Error::shape(format!("latent width {} != model width {d}", z.ncols())));
    }
    let block = weights
        .blocks
        .get(block_index)
        .ok_or_else(|| Error::shape(format!("block {block_index} out of range")))?;
    let c = weights.assemble(conds)?;
    let (out, _) = block_forward(
        block,
        weights.config.heads,
        z,
        &c,
        adapter.map(|a| (a, block_index)),
        false,
    );
    Ok(out)
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache {
    t: f64,
    blocks: Vec<BlockCache>,
}

fn velocity_divisor(t: f64) -> f64 {
    (1.0 - t).max(T_FLOOR)
}

fn forward_impl(
    weights: &BackboneWeights,
    x_t: &ImageGrid,
    t: f64,
    conds: &[TokenSequence],
    adapter: Option<&AdapterSet>,
    keep: bool,
) -> Result<(ImageGrid, Option<ForwardCache>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    check_adapter(weights, adapter)?;
    let cfg = &weights.config;
    let (_, mut z) = weights.latent_tokens(x_t, t)?;
    let c = weights.assemble(conds)?;
    let mut caches = Vec::with_capacity(if keep { cfg.depth } else { 0 });
    for (l, block) in weights.blocks.iter().enumerate() {
        let (next, cache) = block_forward(block, cfg.heads, &z, &c, adapter.map(|a| (a, l)), keep);
        z = next;
        caches.extend(cache);
    }
    let mut out = z.dot(&weights.unpatch);
    out += &weights.unpatch_bias;
    out /= velocity_divisor(t);
    let v = unpatchify(out.view(), cfg.image_size, cfg.patch_size, cfg.channels)?;
    Ok((v, keep.then_some(ForwardCache { t, blocks: caches })))
}

/// Velocity `v_t(x_t, conds)`; same shape as `x_t`.
pub fn forward(
    weights: &BackboneWeights,
    x_t: &ImageGrid,
    t: f64,
    conds: &[TokenSequence],
    adapter: Option<&AdapterSet>,
) -> Result<ImageGrid> {
    forward_impl(weights, x_t, t, conds, adapter, false).map(|(v, _)| v)
}

pub fn forward_with_cache(
    weights: &BackboneWeights,
    x_t: &ImageGrid,
    t: f64,
    conds: &[TokenSequence],
    adapter: Option<&AdapterSet>,
) -> Result<(ImageGrid, ForwardCache)> {
    forward_impl(weights, x_t, t, conds, adapter, true).map(|(v, c)| (v, c.expect("cache requested")))
}

/// Back-propagates `dL/dv`. Adds adapter gradients into `grads` (same layout
/// as `adapter`) and returns `dL/dx_t`.
pub fn backward(
    weights: &BackboneWeights,
    cache: &ForwardCache,
    dv: &ImageGrid,
    adapter: Option<&AdapterSet>,
    mut grads: Option<&mut AdapterSet>,
) -> Result<ImageGrid> {
    let cfg = &weights.config;
    let mut dout = patchify(dv, cfg.patch_size)?;
    dout /= velocity_divisor(cache.t);
    let mut dz = dout.dot(&weights.unpatch.t());
    for (l, (block, bc)) in weights.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        dz = block_backward(block, cfg.heads, bc, &dz, adapter.map(|a| (a, l)), grads.as_deref_mut());
    }
    let dx = dz.dot(&weights.latent_embed.t());
    unpatchify(dx.view(), cfg.image_size, cfg.patch_size, cfg.channels)
}

/// Mean of a grid; used by directional-derivative checks.
pub fn mean_output(v: &ImageGrid) -> f64 {
    v.values().mean().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{init_adapter_set, Stage};
    use crate::structure::{remap, unremap, CannyKind};

    fn small() -> BackboneConfig {
        BackboneConfig {
            image_size: 16,
            patch_size: 4,
            width: 32,
            depth: 2,
            heads: 4,
            ..BackboneConfig::default()
        }
    }

    fn noise_image(cfg: &BackboneConfig, seed: u64) -> ImageGrid {
        crate::flow::draw_prior((cfg.image_size, cfg.image_size, cfg.channels), seed)
    }

    #[test]
    fn init_is_deterministic_and_frozen() {
        let a = init_backbone(&small(), 7).unwrap();
        let b = init_backbone(&small(), 7).unwrap();
        assert!(a.frozen);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), init_backbone(&small(), 8).unwrap().checksum());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let bad = BackboneConfig {
            image_size: 63,
            ..BackboneConfig::default()
        };
        match init_backbone(&bad, 0) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "backbone.image_size"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = BackboneConfig {
            heads: 0,
            ..BackboneConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "backbone.heads"));
        let bad = BackboneConfig {
            width: 130,
            heads: 4,
            ..BackboneConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "backbone.width"));
    }

    #[test]
    fn default_grid_has_64_positions() {
        let c = BackboneConfig::default();
        assert_eq!(c.grid(), 8);
        assert_eq!(c.num_patches(), 64);
    }

    #[test]
    fn patchify_round_trip() {
        let img = noise_image(&small(), 3);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.dim(), (16, 48));
        assert_eq!(unpatchify(p.view(), 16, 4, 3).unwrap(), img);
    }

    #[test]
    fn image_encoder_shapes_and_bias() {
        let w = init_backbone(&BackboneConfig::default(), 1).unwrap();
        let seq = w.encode_image(&ImageGrid::zeros(64, 64, 3)).unwrap();
        assert_eq!(seq.tokens.dim(), (64, 256));
        assert_eq!(seq.role(), Some(Role::ImageCond));
        let bias_row = &w.image_bias + &w.roles.row(Role::ImageCond.index());
        assert!(seq.tokens.rows().into_iter().all(|r| r == bias_row));
        assert!(matches!(
            w.encode_image(&ImageGrid::zeros(32, 32, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn text_encoder_is_a_table_lookup() {
        let w = init_backbone(&small(), 1).unwrap();
        assert!(w.encode_text(&[]).unwrap().is_empty());
        let seq = w.encode_text(&[3, 5]).unwrap();
        let role = w.roles.row(Role::TextCond.index());
        assert_eq!(seq.tokens.row(0), &w.text_table.row(3) + &role);
        assert_eq!(seq.tokens.row(1), &w.text_table.row(5) + &role);
        assert!(matches!(
            w.encode_text(&[1, 64]),
            Err(Error::Encoding {
                index: 1,
                id: 64,
                vocab: 64
            })
        ));
    }

    #[test]
    fn canny_encoder_of_constant_map() {
        let w = init_backbone(&BackboneConfig::default(), 1).unwrap();
        let blank = remap(&ndarray::Array2::zeros((64, 64))).unwrap();
        let seq = w.encode_canny(&blank).unwrap();
        assert_eq!(seq.len(), 64);
        assert_eq!(seq.role(), Some(Role::CannyCond));
        let patch = ndarray::Array1::from_elem(192, 0.2);
        let expected = patch.dot(&w.canny_embed) + &w.canny_bias + w.roles.row(Role::CannyCond.index());
        assert!(seq
            .tokens
            .rows()
            .into_iter()
            .all(|r| (&r - &expected).iter().all(|e| e.abs() < 1e-12)));
        let again = remap(&unremap(&blank)).unwrap();
        assert_eq!(w.encode_canny(&again).unwrap(), seq);
        assert_eq!(blank.kind(), CannyKind::GroundTruth);
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let cfg = small();
        let w = init_backbone(&cfg, 2).unwrap();
        let a = init_adapter_set(&cfg, 4, Stage::Stage1, 3).unwrap();
        let src = noise_image(&cfg, 4);
        let conds = vec![w.encode_image(&src).unwrap(), w.encode_text(&[1, 2, 3]).unwrap()];
        let x = noise_image(&cfg, 5);
        let base = forward(&w, &x, 0.3, &conds, None).unwrap();
        let adapted = forward(&w, &x, 0.3, &conds, Some(&a)).unwrap();
        assert_eq!(base, adapted);
        assert_eq!(base.dim(), x.dim());
    }

    #[test]
    fn time_outside_unit_interval_is_rejected() {
        let w = init_backbone(&small(), 2).unwrap();
        let x = noise_image(&small(), 1);
        assert!(matches!(forward(&w, &x, 1.01, &[], None), Err(Error::Domain(_))));
        assert!(matches!(forward(&w, &x, -0.1, &[], None), Err(Error::Domain(_))));
    }

    #[test]
    fn swapping_stream_roles_changes_output() {
        let cfg = small();
        let w = init_backbone(&cfg, 2).unwrap();
        let img = w.encode_image(&noise_image(&cfg, 1)).unwrap();
        let mut as_canny = img.clone();
        as_canny.tokens = as_canny.tokens - w.roles.row(Role::ImageCond.index()) + w.roles.row(Role::CannyCond.index());
        as_canny.roles = vec![Role::CannyCond; as_canny.len()];
        let x = noise_image(&cfg, 2);
        let a = forward(&w, &x, 0.5, &[img], None).unwrap();
        let b = forward(&w, &x, 0.5, &[as_canny], None).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).any(|(p, q)| (p - q).abs() > 1e-9));
    }

    #[test]
    fn weights_blob_round_trip() {
        let w = init_backbone(&small(), 11).unwrap();
        let bytes = w.to_blob().unwrap().to_bytes().unwrap();
        let back = BackboneWeights::from_blob(Blob::from_bytes(&bytes, MAGIC).unwrap()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.checksum(), w.checksum());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = small();
        let w = init_backbone(&cfg, 5).unwrap();
        let mut a = init_adapter_set(&cfg, 2, Stage::Stage1, 1).unwrap();
        let mut flat = a.trainable_parameters();
        let mut rng = crate::rng::seeded(3);
        use rand::Rng as _;
        flat.iter_mut().for_each(|v| *v += 0.05 * (rng.random::<f64>() - 0.5));
        a.set_trainable_parameters(&flat).unwrap();
        let conds = vec![
            w.encode_image(&noise_image(&cfg, 8)).unwrap(),
            w.encode_text(&[4]).unwrap(),
        ];
        let x = noise_image(&cfg, 9);
        let dir = noise_image(&cfg, 10);
        let t = 0.4;
        let (v, cache) = forward_with_cache(&w, &x, t, &conds, Some(&a)).unwrap();
        let n = v.as_slice().len() as f64;
        let dv = ImageGrid::filled(v.height(), v.width(), v.channels(), 1.0 / n);
        let gx = backward(&w, &cache, &dv, Some(&a), None).unwrap();
        let analytic: f64 = gx.as_slice().iter().zip(dir.as_slice()).map(|(g, d)| g * d).sum();
        let h = 1e-5;
        let shifted = |s: f64| {
            let mut xs = x.clone();
            xs.values_mut().scaled_add(s, dir.values());
            mean_output(&forward(&w, &xs, t, &conds, Some(&a)).unwrap())
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        assert!(
            (analytic - numeric).abs() / analytic.abs().max(1e-12) < 1e-4,
            "{analytic} vs {numeric}"
        );
    }
}
