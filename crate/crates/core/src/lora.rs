//! Low-rank adapters on the projection sites of the attention blocks.
//!
//! A pair (A, B) adapts a frozen projection `x·W` to `x·W + (x·A)·B·(alpha/r)`.
//! Two independent sets, one per stage, share one frozen backbone.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD, ArrayView2, Ix2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::blob::{Blob, NamedTensor};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_RANK: usize = 16;
pub const A_INIT_STD: f64 = 0.02;
const MAGIC: [u8; 4] = *b"SGLA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    AttnOut,
    MlpIn,
    MlpOut,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::AttnOut,
        Projection::MlpIn,
        Projection::MlpOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::AttnOut => "attn_out",
            Projection::MlpIn => "mlp_in",
            Projection::MlpOut => "mlp_out",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::config("lora.sites", format!("unknown projection {name:?}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// (d_in, d_out) of the projection for a given width.
    pub fn dims(self, width: usize) -> (usize, usize) {
        match self {
            Projection::MlpIn => (width, 4 * width),
            Projection::MlpOut => (4 * width, width),
            _ => (width, width),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdapterSite {
    pub block_index: usize,
    pub projection: Projection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub alpha: f64,
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn d_in(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.b.ncols()
    }

    /// The dense (d_in × d_out) update `A·B·(alpha/r)`.
    pub fn dense_delta(&self) -> Array2<f64> {
        self.a.dot(&self.b) * self.scale()
    }
}

/// `base_output + (input·A)·B·(alpha/r)`.
pub fn apply_site(input: ArrayView2<f64>, base_output: ArrayView2<f64>, pair: &LoraPair) -> Result<Array2<f64>> {
    if input.ncols() != pair.d_in() {
        return Err(Error::shape(format!(
            "adapter input width {} != A rows {}",
            input.ncols(),
            pair.d_in()
        )));
    }
    if base_output.dim() != (input.nrows(), pair.d_out()) {
        return Err(Error::shape(format!(
            "base output {:?} does not match ({}, {})",
            base_output.dim(),
            input.nrows(),
            pair.d_out()
        )));
    }
    let mut out = input.dot(&pair.a).dot(&pair.b);
    out *= pair.scale();
    out += &base_output;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub projections: Vec<Projection>,
}

impl AdapterConfig {
    pub fn new(rank: usize) -> Self {
        AdapterConfig {
            rank,
            alpha: rank as f64,
            projections: Projection::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::config("lora.rank", "rank must be at least 1"));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("lora.alpha", "alpha must be finite"));
        }
        if self.projections.is_empty() {
            return Err(Error::config("lora.sites", "at least one projection must be adapted"));
        }
        Ok(())
    }
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig::new(DEFAULT_RANK)
    }
}

/// One stage's adapters, indexed `[block][projection]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub stage: Stage,
    pub rank: usize,
    pub alpha: f64,
    pub width: usize,
    pairs: Vec<[Option<LoraPair>; 6]>,
}

pub fn init_adapter_set(config: &BackboneConfig, rank: usize, stage: Stage, seed: u64) -> Result<AdapterSet> {
    init_adapter_set_with(config, &AdapterConfig::new(rank), stage, seed)
}

pub fn init_adapter_set_with(
    config: &BackboneConfig,
    adapter: &AdapterConfig,
    stage: Stage,
    seed: u64,
) -> Result<AdapterSet> {
    config.validate()?;
    adapter.validate()?;
    let normal = Normal::new(0.0, A_INIT_STD).expect("valid std");
    let mut rng = rng::stream(seed, 0x10_2A);
    let d = config.width;
    let r = adapter.rank;
    let pairs = (0..config.depth)
        .map(|_| {
            Projection::ALL.map(|p| {
                adapter.projections.contains(&p).then(|| {
                    let (d_in, d_out) = p.dims(d);
                    LoraPair {
                        a: Array2::from_shape_simple_fn((d_in, r), || normal.sample(&mut rng)),
                        b: Array2::zeros((r, d_out)),
                        alpha: adapter.alpha,
                    }
                })
            })
        })
        .collect();
    Ok(AdapterSet {
        stage,
        rank: r,
        alpha: adapter.alpha,
        width: d,
        pairs,
    })
}

impl AdapterSet {
    pub fn depth(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair(&self, block: usize, projection: Projection) -> Option<&LoraPair> {
        self.pairs.get(block).and_then(|b| b[projection.index()].as_ref())
    }

    pub fn pair_mut(&mut self, block: usize, projection: Projection) -> Option<&mut LoraPair> {
        self.pairs.get_mut(block).and_then(|b| b[projection.index()].as_mut())
    }

    pub fn sites(&self) -> impl Iterator<Item = (AdapterSite, &LoraPair)> {
        self.pairs.iter().enumerate().flat_map(|(block_index, row)| {
            Projection::ALL.into_iter().filter_map(move |projection| {
                row[projection.index()].as_ref().map(|pair| {
                    (
                        AdapterSite {
                            block_index,
                            projection,
                        },
                        pair,
                    )
                })
            })
        })
    }

    fn pairs_mut(&mut self) -> impl Iterator<Item = &mut LoraPair> {
        self.pairs.iter_mut().flat_map(|row| row.iter_mut().flatten())
    }

    pub fn num_sites(&self) -> usize {
        self.sites().count()
    }

    /// Σ r·(d_in + d_out) over the injected sites.
    pub fn parameter_count(&self) -> usize {
        self.sites().map(|(_, p)| p.a.len() + p.b.len()).sum()
    }

    /// Flat copy of every A then B entry, site by site.
    pub fn trainable_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for (_, p) in self.sites() {
            out.extend(p.a.iter());
            out.extend(p.b.iter());
        }
        out
    }

    pub fn set_trainable_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::shape(format!(
                "{} values for {} adapter parameters",
                flat.len(),
                self.parameter_count()
            )));
        }
        let mut it = flat.iter();
        for p in self.pairs_mut() {
            p.a.iter_mut()
                .chain(p.b.iter_mut())
                .for_each(|v| *v = *it.next().expect("length checked"));
        }
        Ok(())
    }

    /// Same layout with every entry zero (gradient accumulator).
    pub fn zeros_like(&self) -> AdapterSet {
        let mut out = self.clone();
        for p in out.pairs_mut() {
            p.a.fill(0.0);
            p.b.fill(0.0);
        }
        out
    }

    /// `self += other * factor`, elementwise over matching sites.
    pub fn add_scaled(&mut self, other: &AdapterSet, factor: f64) {
        for (row, orow) in self.pairs.iter_mut().zip(&other.pairs) {
            for (p, o) in row.iter_mut().zip(orow) {
                if let (Some(p), Some(o)) = (p.as_mut(), o.as_ref()) {
                    p.a.scaled_add(factor, &o.a);
                    p.b.scaled_add(factor, &o.b);
                }
            }
        }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.stage.name().as_bytes());
        h.update((self.rank as u64).to_le_bytes());
        h.update(self.alpha.to_le_bytes());
        for (site, p) in self.sites() {
            h.update(format!("{}.{}", site.block_index, site.projection.name()).as_bytes());
            for v in p.a.iter().chain(p.b.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        crate::blob::hex_digest(h)
    }

    pub fn to_blob(&self) -> Blob {
        let tensors = self
            .sites()
            .flat_map(|(site, p)| {
                let base = format!("block{}.{}", site.block_index, site.projection.name());
                [
                    NamedTensor {
                        name: format!("{base}.a"),
                        value: p.a.clone().into_dyn(),
                    },
                    NamedTensor {
                        name: format!("{base}.b"),
                        value: p.b.clone().into_dyn(),
                    },
                ]
            })
            .collect();
        Blob {
            magic: MAGIC,
            header: serde_json::json!({
                "stage": self.stage,
                "rank": self.rank,
                "alpha": self.alpha,
                "width": self.width,
                "depth": self.depth(),
            }),
            tensors,
        }
    }

    pub fn from_blob(mut blob: Blob) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            stage: Stage,
            rank: usize,
            alpha: f64,
            width: usize,
            depth: usize,
        }
        let h: Header = serde_json::from_value(blob.header.clone())?;
        let mut pairs = vec![[None, None, None, None, None, None]; h.depth];
        for (block, row) in pairs.iter_mut().enumerate() {
            for p in Projection::ALL {
                let base = format!("block{block}.{}", p.name());
                if !blob.tensors.iter().any(|t| t.name == format!("{base}.a")) {
                    continue;
                }
                let (d_in, d_out) = p.dims(h.width);
                let a = to_matrix(blob.take(&format!("{base}.a"))?, (d_in, h.rank), &base)?;
                let b = to_matrix(blob.take(&format!("{base}.b"))?, (h.rank, d_out), &base)?;
                row[p.index()] = Some(LoraPair { a, b, alpha: h.alpha });
            }
        }
        if let Some(t) = blob.tensors.first() {
            return Err(Error::format("adapter blob", format!("unexpected tensor {}", t.name)));
        }
        Ok(AdapterSet {
            stage: h.stage,
            rank: h.rank,
            alpha: h.alpha,
            width: h.width,
            pairs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_blob().to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        AdapterSet::from_blob(Blob::from_bytes(&bytes, MAGIC)?)
    }

    /// Checks that this set fits a backbone of the given shape.
    pub fn check_compatible(&self, config: &BackboneConfig) -> Result<()> {
        if self.width != config.width || self.depth() != config.depth {
            return Err(Error::shape(format!(
                "adapter for width {} depth {} used with width {} depth {}",
                self.width,
                self.depth(),
                config.width,
                config.depth
            )));
        }
        Ok(())
    }
}

pub(crate) fn to_matrix(value: ArrayD<f64>, dim: (usize, usize), name: &str) -> Result<Array2<f64>> {
    if value.shape() != [dim.0, dim.1] {
        return Err(Error::format(
            "tensor",
            format!("{name}: shape {:?}, expected {:?}", value.shape(), dim),
        ));
    }
    Ok(value.into_dimensionality::<Ix2>().expect("shape checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> BackboneConfig {
        BackboneConfig {
            image_size: 16,
            patch_size: 4,
            width: 32,
            depth: 2,
            heads: 4,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn zero_b_and_zero_alpha_leave_base_unchanged() {
        let x = array![[1.0, 2.0], [3.0, -1.0]];
        let base = array![[0.5, 0.0, 1.0], [2.0, 2.0, 2.0]];
        let mut pair = LoraPair {
            a: array![[1.0], [2.0]],
            b: Array2::zeros((1, 3)),
            alpha: 1.0,
        };
        assert_eq!(apply_site(x.view(), base.view(), &pair).unwrap(), base);
        pair.b = array![[1.0, -1.0, 3.0]];
        pair.alpha = 0.0;
        assert_eq!(apply_site(x.view(), base.view(), &pair).unwrap(), base);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let pair = LoraPair {
            a: Array2::zeros((3, 1)),
            b: Array2::zeros((1, 2)),
            alpha: 1.0,
        };
        let x = Array2::zeros((2, 2));
        assert!(matches!(
            apply_site(x.view(), Array2::zeros((2, 2)).view(), &pair),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fresh_set_covers_every_site_with_zero_b() {
        let set = init_adapter_set(&BackboneConfig::default(), 16, Stage::Stage1, 0).unwrap();
        assert_eq!(set.num_sites(), 24);
        assert!(set
            .sites()
            .all(|(_, p)| p.b.iter().all(|&v| v == 0.0) && p.rank() == 16));
        assert!(set.sites().all(|(_, p)| p.a.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn rank_zero_rejected() {
        assert!(matches!(
            init_adapter_set(&toy(), 0, Stage::Stage1, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn parameter_count_is_linear_in_rank() {
        let c = toy();
        let r2 = init_adapter_set(&c, 2, Stage::Stage1, 0).unwrap().parameter_count();
        let r4 = init_adapter_set(&c, 4, Stage::Stage1, 0).unwrap().parameter_count();
        assert_eq!(2 * r2, r4);
    }

    #[test]
    fn flat_parameters_round_trip() {
        let mut set = init_adapter_set(&toy(), 3, Stage::Stage2, 4).unwrap();
        let mut flat = set.trainable_parameters();
        flat.iter_mut().enumerate().for_each(|(i, v)| *v += i as f64);
        set.set_trainable_parameters(&flat).unwrap();
        assert_eq!(set.trainable_parameters(), flat);
        assert!(set.set_trainable_parameters(&flat[1..]).is_err());
    }

    #[test]
    fn blob_round_trip_preserves_subset_of_sites() {
        let cfg = AdapterConfig {
            rank: 2,
            alpha: 4.0,
            projections: vec![Projection::Q, Projection::MlpOut],
        };
        let mut set = init_adapter_set_with(&toy(), &cfg, Stage::Stage2, 9).unwrap();
        set.pair_mut(1, Projection::Q).unwrap().b.fill(0.25);
        let back = AdapterSet::from_blob(Blob::from_bytes(&set.to_blob().to_bytes().unwrap(), MAGIC).unwrap()).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.checksum(), set.checksum());
        assert_eq!(back.num_sites(), 4);
    }
}
