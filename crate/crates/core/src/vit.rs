//! Plain ViT encoder: patch tokenizer, learned positional embedding, CLS token,
//! pre-norm Transformer blocks, and a per-token linear segmentation head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, InitRng, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelScale {
    TinyDesk,
    Tiny,
    Small,
    Base,
    Large,
    Custom,
}

/// Architecture hyperparameters. `clusters == 0` disables the cluster and regenerator blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
    pub clusters: usize,
    pub injection_point: usize,
    pub cluster_hidden: usize,
    /// Adds the expanded representative back onto the refined token.
    #[serde(default)]
    pub refine_skip: bool,
    pub scale: ModelScale,
}

/// Cluster MLP width: the 3096/768 ratio of the base model, `129 D / 32` rounded.
pub fn default_cluster_hidden(embed_dim: usize) -> usize {
    (embed_dim * 129 + 16) / 32
}

impl EncoderConfig {
    /// 64x64 images, 8px patches, D=96, 8 layers, 4 heads, k=3 injected after block 4.
    pub fn tiny_desk() -> Self {
        EncoderConfig {
            image_height: 64,
            image_width: 64,
            patch_size: 8,
            embed_dim: 96,
            num_layers: 8,
            num_heads: 4,
            ffn_hidden: 4 * 96,
            num_classes: 3,
            clusters: 3,
            injection_point: 4,
            cluster_hidden: default_cluster_hidden(96),
            refine_skip: false,
            scale: ModelScale::TinyDesk,
        }
    }

    /// Reference ViT scales with patch 16, used for analytic cost modeling.
    pub fn reference_scale(scale: ModelScale, image: usize, num_classes: usize) -> Result<Self> {
        let (d, l, h, hidden) = match scale {
            ModelScale::Tiny => (192, 12, 3, 774),
            ModelScale::Small => (384, 12, 6, 1548),
            ModelScale::Base => (768, 12, 12, 3096),
            ModelScale::Large => (1024, 24, 16, 4128),
            other => return Err(Error::Config(format!("{other:?} is not a reference scale"))),
        };
        let cfg = EncoderConfig {
            image_height: image,
            image_width: image,
            patch_size: 16,
            embed_dim: d,
            num_layers: l,
            num_heads: h,
            ffn_hidden: 4 * d,
            num_classes,
            clusters: 3,
            injection_point: 4,
            cluster_hidden: hidden,
            refine_skip: false,
            scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return bad(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return bad("empty image".into());
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.num_heads));
        }
        if self.num_layers == 0 || self.ffn_hidden == 0 {
            return bad("need at least one layer and a non-empty FFN".into());
        }
        if self.num_classes < 1 {
            return bad("need at least one class".into());
        }
        if self.clusters > 0 && !(1..=self.num_layers).contains(&self.injection_point) {
            return bad(format!(
                "injection point {} outside 1..={}",
                self.injection_point, self.num_layers
            ));
        }
        if self.clusters > 0 && self.cluster_hidden == 0 {
            return bad("cluster MLP needs a hidden width".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn clustered(&self) -> bool {
        self.clusters > 0
    }

    /// The same backbone with the cluster and regenerator blocks removed.
    pub fn vanilla(&self) -> Self {
        EncoderConfig {
            clusters: 0,
            ..self.clone()
        }
    }
}

/// `(1+N) x D` tokens with the CLS token at row 0 and the patch grid it came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub len: usize,
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn full_len(&self) -> usize {
        1 + self.grid.0 * self.grid.1
    }

    pub fn is_full(&self) -> bool {
        self.len == self.full_len()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut InitRng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, fan_in, fan_out, &[fan_in, fan_out]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], T::one()))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, T::from_f64_lossy(LAYER_NORM_EPS))
    }
}

/// `Z' = MHSA(LN(Z)) + Z`, then `Z'' = FFN(LN(Z')) + Z'`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut InitRng, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            query: Linear::new(store, rng, &format!("{name}.attn.query"), d, d)?,
            key: Linear::new(store, rng, &format!("{name}.attn.key"), d, d)?,
            value: Linear::new(store, rng, &format!("{name}.attn.value"), d, d)?,
            proj: Linear::new(store, rng, &format!("{name}.attn.proj"), d, d)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            fc1: Linear::new(store, rng, &format!("{name}.ffn.fc1"), d, cfg.ffn_hidden)?,
            fc2: Linear::new(store, rng, &format!("{name}.ffn.fc2"), cfg.ffn_hidden, d)?,
            heads: cfg.num_heads,
        })
    }

    /// Works on a sequence of any length; no positional information is added here.
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, z: TokenSequence) -> Result<TokenSequence> {
        let x = z.tokens;
        let h = self.ln1.forward(store, tape, x)?;
        let q = self.query.forward(store, tape, h)?;
        let k = self.key.forward(store, tape, h)?;
        let v = self.value.forward(store, tape, h)?;
        let a = tape.attention(q, k, v, self.heads)?;
        let a = self.proj.forward(store, tape, a)?;
        let x = tape.add(a, x)?;

        let h = self.ln2.forward(store, tape, x)?;
        let h = self.fc1.forward(store, tape, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(store, tape, h)?;
        let x = tape.add(h, x)?;
        Ok(TokenSequence { tokens: x, ..z })
    }
}

/// Flattens `P x P x 3` patches in row-major grid order, pixels row-major within a patch.
pub fn patchify<T: Scalar>(image: &Image, patch: usize) -> Result<Tensor<T>> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::Config(format!(
            "image {}x{} not divisible by patch size {patch}",
            image.height, image.width
        )));
    }
    let (gr, gc) = (image.height / patch, image.width / patch);
    let dim = patch * patch * 3;
    let mut out = Vec::with_capacity(gr * gc * dim);
    for pr in 0..gr {
        for pc in 0..gc {
            for y in 0..patch {
                let row = (pr * patch + y) * image.width + pc * patch;
                out.extend(image.data[row * 3..(row + patch) * 3].iter().map(|&v| T::from_f64_lossy(v)));
            }
        }
    }
    Tensor::new(vec![gr * gc, dim], out)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut InitRng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, n) = (cfg.embed_dim, cfg.num_patches());
        let embed = Linear::new(store, rng, "embed", cfg.patch_dim(), d)?;
        let cls = store.add("cls", xavier_uniform(rng, d, d, &[1, d]))?;
        let pos = store.add("pos", xavier_uniform(rng, d, d, &[n, d]))?;
        let blocks = (0..cfg.num_layers)
            .map(|l| Block::new(store, rng, &format!("blocks.{l}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "norm", d)?;
        let head = Linear::new(store, rng, "head", d, cfg.num_classes)?;
        Ok(Encoder {
            config: cfg.clone(),
            embed,
            cls,
            pos,
            blocks,
            norm,
            head,
        })
    }

    /// Linear patch projection plus positional embedding, with the CLS token prepended.
    pub fn patchify_embed<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, image: &Image) -> Result<TokenSequence> {
        let cfg = &self.config;
        if image.height != cfg.image_height || image.width != cfg.image_width {
            return Err(Error::Config(format!(
                "image {}x{} does not match configured {}x{}",
                image.height, image.width, cfg.image_height, cfg.image_width
            )));
        }
        let patches = tape.constant(patchify(image, cfg.patch_size)?);
        let x = self.embed.forward(store, tape, patches)?;
        let pos = tape.param(store, self.pos);
        let x = tape.add(x, pos)?;
        let cls = tape.param(store, self.cls);
        let z = tape.concat_rows(&[cls, x])?;
        Ok(TokenSequence {
            tokens: z,
            len: 1 + cfg.num_patches(),
            grid: cfg.grid(),
        })
    }

    pub fn run_blocks<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        mut z: TokenSequence,
        layers: std::ops::Range<usize>,
    ) -> Result<TokenSequence> {
        for l in layers {
            z = self.blocks[l].forward(store, tape, z)?;
        }
        Ok(z)
    }

    /// Blocks `1..=ip`.
    pub fn encode_prefix<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, z: TokenSequence) -> Result<TokenSequence> {
        self.run_blocks(store, tape, z, 0..self.split_point())
    }

    /// Blocks `ip+1..=L`, on a sequence of any length.
    pub fn encode_suffix<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, z: TokenSequence) -> Result<TokenSequence> {
        self.run_blocks(store, tape, z, self.split_point()..self.config.num_layers)
    }

    fn split_point(&self) -> usize {
        if self.config.clustered() {
            self.config.injection_point
        } else {
            self.config.num_layers
        }
    }

    /// Drops CLS, normalizes and projects every patch token to class logits and bilinearly upsamples
    /// the grid to full resolution. Output is `(H*W) x C`, pixels row-major.
    pub fn seg_head<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, z: TokenSequence) -> Result<Var> {
        if !z.is_full() {
            return Err(Error::RegenerateFirst {
                expected: z.full_len(),
                actual: z.len,
            });
        }
        let n = z.len - 1;
        let patches = tape.slice_rows(z.tokens, 1, n)?;
        let patches = self.norm.forward(store, tape, patches)?;
        let logits = self.head.forward(store, tape, patches)?;
        tape.upsample_bilinear(logits, z.grid, (self.config.image_height, self.config.image_width))
    }
}
