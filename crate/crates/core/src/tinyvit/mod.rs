//! Patch transformer over 24×24 images, pretrained contrastively against
//! scene descriptions and then frozen. There is no class token: every patch
//! output is passed on.

mod contrastive;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xmprobe_nn::{BlockShape, Linear, ParamId, ParamStore, Scalar, Segments, Stack, StackCache, TensorFile};

use crate::error::{Error, Result};
use crate::synthworld::IMAGE_SIDE;

pub use contrastive::{
    contrastive_loss, info_nce, recall_at_1, train_contrastive, ImageText, InfoNce, TextArch, TextTower,
    TextTowerConfig, VitTrainConfig, VitTrainReport,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_vis: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub init_std: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self { image_side: IMAGE_SIDE, channels: 3, patch_size: 8, d_vis: 48, n_layers: 4, n_heads: 4, d_ff: 192, init_std: 0.05 }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.n_heads == 0 || self.d_vis % self.n_heads != 0 {
            return Err(Error::Config(format!("d_vis {} not divisible by n_heads {}", self.d_vis, self.n_heads)));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn pixel_len(&self) -> usize {
        self.image_side * self.image_side * self.channels
    }
}

/// Splits a `(y, x, c)` image into row-major patches, each flattened `(y, x, c)`.
pub fn patchify(pixels: &[f32], cfg: &VitConfig) -> Result<Vec<f32>> {
    if pixels.len() != cfg.pixel_len() {
        return Err(Error::Shape(format!("expected {} pixel values, got {}", cfg.pixel_len(), pixels.len())));
    }
    let (side, ps, ch, n) = (cfg.image_side, cfg.patch_size, cfg.channels, cfg.patches_per_side());
    let mut out = Vec::with_capacity(pixels.len());
    for py in 0..n {
        for px in 0..n {
            for y in 0..ps {
                let start = ((py * ps + y) * side + px * ps) * ch;
                out.extend_from_slice(&pixels[start..start + ps * ch]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f32], cfg: &VitConfig) -> Result<Vec<f32>> {
    if patches.len() != cfg.pixel_len() {
        return Err(Error::Shape(format!("expected {} patch values, got {}", cfg.pixel_len(), patches.len())));
    }
    let (side, ps, ch, n) = (cfg.image_side, cfg.patch_size, cfg.channels, cfg.patches_per_side());
    let mut out = vec![0.0; patches.len()];
    let mut src = patches.chunks_exact(ps * ch);
    for py in 0..n {
        for px in 0..n {
            for y in 0..ps {
                let start = ((py * ps + y) * side + px * ps) * ch;
                out[start..start + ps * ch].copy_from_slice(src.next().expect("length checked"));
            }
        }
    }
    Ok(out)
}

/// Per-patch outputs of the vision tower for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbeddings {
    /// `n_patches × d` row-major.
    pub rows: Vec<f32>,
    pub d: usize,
    /// Grid cell covered by each patch.
    pub cell_of_patch: Vec<usize>,
}

impl PatchEmbeddings {
    pub fn n_rows(&self) -> usize {
        self.rows.len() / self.d
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.rows[k * self.d..(k + 1) * self.d]
    }
}

#[derive(Clone, Debug)]
pub struct VitArch {
    pub patch: Linear,
    pub pos_emb: ParamId,
    pub stack: Stack,
    pub d: usize,
    pub n_patches: usize,
}

pub struct VitCache<T> {
    stack: StackCache<T>,
}

impl VitArch {
    pub fn build<T: Scalar>(cfg: &VitConfig, store: &mut ParamStore<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_vis;
        let patch_std = (1.0 / cfg.patch_dim() as f64).sqrt();
        let patch = Linear::new(store, "vit.patch", cfg.patch_dim(), d, true, patch_std, &mut rng);
        let pos_emb = store.add_normal("vit.pos_emb", &[cfg.n_patches(), d], cfg.init_std, &mut rng);
        let shape = BlockShape { d, n_heads: cfg.n_heads, d_ff: cfg.d_ff, causal: false };
        let stack = Stack::new(store, "vit", cfg.n_layers, shape, cfg.init_std, &mut rng);
        Self { patch, pos_emb, stack, d, n_patches: cfg.n_patches() }
    }

    fn segments(&self, n_images: usize) -> Segments {
        Segments::from_lengths(std::iter::repeat(self.n_patches).take(n_images))
    }

    fn input<T: Scalar>(&self, p: &ParamStore<T>, patches: &[T], n_images: usize) -> Vec<T> {
        let rows = n_images * self.n_patches;
        let mut x = self.patch.forward(p, patches, rows);
        let pos = p.get(self.pos_emb);
        for img in x.chunks_exact_mut(self.n_patches * self.d) {
            for (a, b) in img.iter_mut().zip(pos) {
                *a += *b;
            }
        }
        x
    }

    /// `patches` holds `n_images × n_patches` rows of flattened patches.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, patches: &[T], n_images: usize) -> Vec<T> {
        let x = self.input(p, patches, n_images);
        self.stack.forward_capture(p, x, &self.segments(n_images), &[]).out
    }

    pub fn forward_train<T: Scalar>(&self, p: &ParamStore<T>, patches: &[T], n_images: usize) -> (Vec<T>, VitCache<T>) {
        let x = self.input(p, patches, n_images);
        let (out, stack) = self.stack.forward_train(p, x, &self.segments(n_images));
        (out, VitCache { stack })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &VitCache<T>,
        patches: &[T],
        d_out: &[T],
        n_images: usize,
        g: &mut ParamStore<T>,
    ) {
        let dx = self.stack.backward(p, &cache.stack, d_out, &self.segments(n_images), Some(&mut *g));
        self.patch.accumulate_param_grads(patches, &dx, n_images * self.n_patches, g);
        let gp = g.get_mut(self.pos_emb);
        for img in dx.chunks_exact(self.n_patches * self.d) {
            for (a, b) in gp.iter_mut().zip(img) {
                *a += *b;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TinyVit {
    pub config: VitConfig,
    pub arch: VitArch,
    pub weights: ParamStore<f32>,
}

pub const VIT_KIND: &str = "vit";

impl TinyVit {
    pub fn init(config: VitConfig, seed: u64) -> Self {
        let mut weights = ParamStore::new();
        let arch = VitArch::build(&config, &mut weights, seed);
        Self { config, arch, weights }
    }

    pub fn d_vis(&self) -> usize {
        self.config.d_vis
    }

    pub fn forward(&self, pixels: &[f32]) -> Result<PatchEmbeddings> {
        Ok(self.forward_batch(&[pixels])?.pop().expect("one image"))
    }

    pub fn forward_batch(&self, images: &[&[f32]]) -> Result<Vec<PatchEmbeddings>> {
        let mut patches = Vec::with_capacity(images.len() * self.config.pixel_len());
        for px in images {
            patches.extend(patchify(px, &self.config)?);
        }
        let out = self.arch.forward(&self.weights, &patches, images.len());
        let per = self.arch.n_patches * self.d_vis();
        Ok(out
            .chunks_exact(per)
            .map(|rows| PatchEmbeddings {
                rows: rows.to_vec(),
                d: self.d_vis(),
                cell_of_patch: (0..self.arch.n_patches).collect(),
            })
            .collect())
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let cfg = serde_json::to_string(&self.config).expect("config serialises");
        TensorFile::from_store(VIT_KIND, &cfg, &self.weights)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        if f.kind != VIT_KIND {
            return Err(Error::Invalid(format!("expected `{VIT_KIND}` checkpoint, found `{}`", f.kind)));
        }
        let config: VitConfig = serde_json::from_str(&f.config).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        let mut vit = Self::init(config, 0);
        f.load_into(&mut vit.weights)?;
        Ok(vit)
    }

    pub fn checksum(&self) -> String {
        self.to_tensor_file().checksum()
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        Ok(self.to_tensor_file().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}
