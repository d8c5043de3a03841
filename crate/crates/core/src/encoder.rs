//! Hierarchical image encoder: 7x7 stem, downsampling stages of two ResNet
//! blocks plus spatial self-attention, and a self-attention bottleneck. The
//! output grid is flattened into tokens shared by the point generator and
//! the refiner's cross-attention.
//!
//! Feature maps are channels-last `[h * w, c]` matrices, so flattening to
//! tokens is free.

use std::path::Path;

use image::imageops::FilterType;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::nn::{Conv2d, Init, Linear, MultiHeadAttention, RmsNorm};
use crate::autodiff::{Graph, Matrix, ParamId, ParamStore, Real, Var};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};

/// RGB image with values in `[0, 1]`, stored row-major `h x w x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "expected {} pixel values for {height}x{width}x3, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must be finite and in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn to_matrix<T: Real>(&self) -> Matrix<T> {
        Matrix::new(
            self.height * self.width,
            3,
            self.pixels.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            pixels: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Decodes an 8-bit PNG. When the size differs from `height x width` the
    /// largest centred crop with the target aspect ratio is resized to fit.
    pub fn load_png(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        if img.height() as usize == height && img.width() as usize == width {
            return Ok(Self::from_rgb8(&img));
        }
        let (iw, ih) = (img.width() as f64, img.height() as f64);
        let target = width as f64 / height as f64;
        let (cw, ch) = if iw / ih > target { (ih * target, ih) } else { (iw, iw / target) };
        let (cw, ch) = (cw.round().max(1.0) as u32, ch.round().max(1.0) as u32);
        let x0 = (img.width() - cw) / 2;
        let y0 = (img.height() - ch) / 2;
        let cropped = image::imageops::crop_imm(&img, x0, y0, cw, ch).to_image();
        let resized = image::imageops::resize(&cropped, width as u32, height as u32, FilterType::Triangle);
        Ok(Self::from_rgb8(&resized))
    }
}

/// Flattened `H' x W'` grid of `C`-wide feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTokens<T> {
    pub tokens: Matrix<T>,
    pub grid: (usize, usize),
}

impl<T: Real> ImageTokens<T> {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// A channels-last feature map on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

/// `x + f(x)` with `f = [RMSNorm, SiLU, 3x3 conv]` applied twice and a 1x1
/// projection on the skip path when widths differ.
#[derive(Clone, Debug)]
pub struct ResnetBlock {
    pub norm1: RmsNorm,
    pub conv1: Conv2d,
    pub norm2: RmsNorm,
    pub conv2: Conv2d,
    pub skip: Option<Linear>,
    pub c_in: usize,
    pub c_out: usize,
}

impl ResnetBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: RmsNorm::new(store, &format!("{name}.norm1"), c_in),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, Init::FanIn, rng),
            norm2: RmsNorm::new(store, &format!("{name}.norm2"), c_out),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, Init::Zero, rng),
            skip: (c_in != c_out)
                .then(|| Linear::new(store, &format!("{name}.skip"), c_in, c_out, false, Init::FanIn, rng)),
            c_in,
            c_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: FeatureMap) -> Result<FeatureMap> {
        let c = g.shape(x.var).1;
        if c != self.c_in {
            return Err(Error::config(format!(
                "resnet block expects {} channels, got {c}",
                self.c_in
            )));
        }
        let h = self.norm1.forward(g, x.var);
        let h = g.silu(h);
        let (h, _, _) = self.conv1.forward(g, h, x.height, x.width);
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let (h, _, _) = self.conv2.forward(g, h, x.height, x.width);
        let skip = match &self.skip {
            Some(p) => p.forward(g, x.var),
            None => x.var,
        };
        Ok(FeatureMap {
            var: g.add(skip, h),
            ..x
        })
    }
}

/// Pre-norm multi-head self-attention over spatial positions with a
/// residual connection. No positional information enters here.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub norm: RmsNorm,
    pub attn: MultiHeadAttention,
    pub channels: usize,
}

impl SpatialAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::config(format!(
                "{name}: {heads} heads do not divide {channels} channels"
            )));
        }
        Ok(Self {
            norm: RmsNorm::new(store, &format!("{name}.norm"), channels),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), channels, channels, heads, Init::Zero, rng),
            channels,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.norm.forward(g, x);
        let a = self.attn.forward(g, h, h);
        g.add(x, a)
    }

    /// Per-head attention rows for `x`.
    pub fn weights<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Vec<Matrix<T>> {
        let h = self.norm.forward(g, x);
        self.attn.weights(g, h, h)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: [ResnetBlock; 2],
    attn: SpatialAttention,
    down: Conv2d,
}

#[derive(Clone, Debug)]
struct Bottleneck {
    block: ResnetBlock,
    attn: SpatialAttention,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    cfg: EncoderConfig,
    stem: Conv2d,
    stages: Vec<Stage>,
    bottleneck: Vec<Bottleneck>,
    out_norm: RmsNorm,
    pos_embed: Option<ParamId>,
}

impl ImageEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.stage_channels.is_empty() || cfg.heads_per_stage.len() != cfg.stage_channels.len() {
            return Err(Error::config("encoder needs one head count per stage"));
        }
        let c0 = cfg.stage_channels[0];
        let stem = Conv2d::new(store, "encoder.stem", 3, c0, cfg.stem_kernel, 1, Init::FanIn, rng);
        let mut stages = Vec::new();
        let mut c_prev = c0;
        for (s, (&c, &heads)) in cfg.stage_channels.iter().zip(&cfg.heads_per_stage).enumerate() {
            let name = format!("encoder.stage{s}");
            stages.push(Stage {
                blocks: [
                    ResnetBlock::new(store, &format!("{name}.block0"), c_prev, c, rng),
                    ResnetBlock::new(store, &format!("{name}.block1"), c, c, rng),
                ],
                attn: SpatialAttention::new(store, &format!("{name}.attn"), c, heads, rng)?,
                down: Conv2d::new(store, &format!("{name}.down"), c, c, 3, 2, Init::FanIn, rng),
            });
            c_prev = c;
        }
        let heads = *cfg.heads_per_stage.last().expect("nonempty");
        let bottleneck = (0..cfg.bottleneck_blocks)
            .map(|b| {
                let name = format!("encoder.bottleneck{b}");
                Ok(Bottleneck {
                    block: ResnetBlock::new(store, &format!("{name}.block"), c_prev, c_prev, rng),
                    attn: SpatialAttention::new(store, &format!("{name}.attn"), c_prev, heads, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out_norm = RmsNorm::new(store, "encoder.out_norm", c_prev);
        let pos_embed = cfg.positional_embedding.then(|| {
            let (gh, gw) = cfg.grid();
            let normal = Normal::new(0.0, 0.02).expect("positive std");
            store.add(
                "encoder.pos_embed",
                Matrix::from_fn(gh * gw, c_prev, |_, _| T::of(normal.sample(rng))),
            )
        });
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
            bottleneck,
            out_norm,
            pos_embed,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Runs the encoder on the tape; returns the `[H'W', C]` token node and
    /// its grid shape.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, image: &ImageTensor) -> Result<(Var, (usize, usize))> {
        let s = self.cfg.n_stages();
        let f = 1usize << s;
        if image.height() != self.cfg.height || image.width() != self.cfg.width {
            return Err(Error::config(format!(
                "encoder configured for {}x{} images, got {}x{}",
                self.cfg.height,
                self.cfg.width,
                image.height(),
                image.width()
            )));
        }
        if image.height() % f != 0 || image.width() % f != 0 {
            return Err(Error::config(format!(
                "image {}x{} not divisible by 2^{s}",
                image.height(),
                image.width()
            )));
        }
        let x = g.input(image.to_matrix());
        let (x, h, w) = self.stem.forward(g, x, image.height(), image.width());
        g.ensure_finite(x, "encoder stem")?;
        let mut fm = FeatureMap {
            var: x,
            height: h,
            width: w,
        };
        for (i, stage) in self.stages.iter().enumerate() {
            for block in &stage.blocks {
                fm = block.forward(g, fm)?;
            }
            fm.var = stage.attn.forward(g, fm.var);
            let (v, h, w) = stage.down.forward(g, fm.var, fm.height, fm.width);
            fm = FeatureMap {
                var: v,
                height: h,
                width: w,
            };
            g.ensure_finite(fm.var, &format!("encoder stage {i}"))?;
        }
        for b in &self.bottleneck {
            fm = b.block.forward(g, fm)?;
            fm.var = b.attn.forward(g, fm.var);
        }
        let mut tokens = self.out_norm.forward(g, fm.var);
        if let Some(pe) = self.pos_embed {
            let pe = g.param(pe);
            tokens = g.add(tokens, pe);
        }
        g.ensure_finite(tokens, "encoder bottleneck")?;
        Ok((tokens, (fm.height, fm.width)))
    }

    /// Inference-only encoding.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, image: &ImageTensor) -> Result<ImageTokens<T>> {
        let mut g = Graph::inference(store);
        let (v, grid) = self.forward(&mut g, image)?;
        Ok(ImageTokens {
            tokens: g.value(v).clone(),
            grid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::worst_relative_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(h, w, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn small_cfg(stages: usize) -> EncoderConfig {
        EncoderConfig {
            height: 32,
            width: 32,
            stage_channels: [8, 16, 16, 32, 32][..stages].to_vec(),
            heads_per_stage: vec![2; stages],
            bottleneck_blocks: 1,
            stem_kernel: 7,
            positional_embedding: true,
        }
    }

    #[test]
    fn grid_shape_follows_stage_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let enc = ImageEncoder::new(&mut store, &small_cfg(2), &mut rng).unwrap();
        let t = enc.encode(&store, &random_image(32, 32, 1)).unwrap();
        assert_eq!(t.grid, (8, 8));
        assert_eq!(t.tokens.shape(), (64, 16));
    }

    #[test]
    fn five_stages_on_224() {
        let cfg = EncoderConfig {
            height: 224,
            width: 224,
            stage_channels: vec![4, 4, 8, 8, 8],
            heads_per_stage: vec![1, 1, 2, 2, 2],
            bottleneck_blocks: 1,
            stem_kernel: 7,
            positional_embedding: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let enc = ImageEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let t = enc.encode(&store, &random_image(224, 224, 2)).unwrap();
        assert_eq!(t.grid, (7, 7));
        assert_eq!(t.len(), 49);
    }

    #[test]
    fn rejects_wrong_image_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let enc = ImageEncoder::new(&mut store, &small_cfg(2), &mut rng).unwrap();
        assert!(matches!(enc.encode(&store, &random_image(16, 32, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_image_has_finite_tokens_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let enc = ImageEncoder::new(&mut store, &small_cfg(2), &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let (t, _) = enc.forward(&mut g, &ImageTensor::zeros(32, 32)).unwrap();
        assert!(g.value(t).is_finite());
        let s = g.sum(t);
        let grads = g.backward(s);
        for (i, gr) in grads.iter().enumerate() {
            let gr = gr.unwrap_or_else(|| panic!("no gradient for {}", store.names()[i]));
            assert!(gr.is_finite());
        }
    }

    #[test]
    fn resnet_identity_when_last_conv_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let block = ResnetBlock::new(&mut store, "b", 4, 4, &mut rng);
        let x = Matrix::from_fn(12, 4, |i, j| (i as f64 - j as f64) * 0.3);
        let mut g = Graph::inference(&store);
        let xv = g.input(x.clone());
        let y = block
            .forward(&mut g, FeatureMap { var: xv, height: 3, width: 4 })
            .unwrap();
        assert_eq!(g.value(y.var), &x);
        assert!(block.skip.is_none());
    }

    #[test]
    fn resnet_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let block = ResnetBlock::new(&mut store, "b", 4, 8, &mut rng);
        assert!(block.skip.is_some());
        let mut g = Graph::inference(&store);
        let xv = g.input(Matrix::zeros(4, 3));
        let r = block.forward(&mut g, FeatureMap { var: xv, height: 2, width: 2 });
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn resnet_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let block = ResnetBlock::new(&mut store, "b", 3, 4, &mut rng);
        // Zero-initialised conv would hide the first branch from the check.
        let conv2 = block.conv2.weight;
        *store.get_mut(conv2) = Matrix::from_fn(36, 4, |_, _| rng.random_range(-0.5..0.5));
        let x = Matrix::from_fn(20, 3, |_, _| rng.random_range(-1.0..1.0));
        let err = worst_relative_error(&mut store, 1e-4, 1e-6, |g| {
            let xv = g.input(x.clone());
            let y = block.forward(g, FeatureMap { var: xv, height: 4, width: 5 }).unwrap();
            let y = g.tanh(y.var);
            g.sum(y)
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn attention_single_token_and_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let attn = SpatialAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let out_w = attn.attn.out.weight;
        *store.get_mut(out_w) = Matrix::from_fn(8, 8, |_, _| rng.random_range(-0.5..0.5));

        let tok = Matrix::from_fn(1, 8, |_, j| j as f64 * 0.1 - 0.3);
        let mut g = Graph::inference(&store);
        let x = g.input(tok.clone());
        let w = attn.weights(&mut g, x);
        assert!(w.iter().all(|m| m.data() == [1.0]));
        let y = attn.forward(&mut g, x);
        // Output is the token plus the value path, projected.
        let h = attn.norm.forward(&mut g, x);
        let v = attn.attn.value.forward(&mut g, h);
        let o = attn.attn.out.forward(&mut g, v);
        for j in 0..8 {
            let want = tok.get(0, j) + g.value(o).get(0, j);
            assert!((g.value(y).get(0, j) - want).abs() < 1e-12);
        }

        let many = g.input(Matrix::from_fn(9, 8, |_, _| rng.random_range(-2.0..2.0)));
        for head in attn.weights(&mut g, many) {
            for i in 0..9 {
                assert!((head.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let attn = SpatialAttention::new(&mut store, "a", 8, 4, &mut rng).unwrap();
        let out_w = attn.attn.out.weight;
        *store.get_mut(out_w) = Matrix::from_fn(8, 8, |_, _| rng.random_range(-0.5..0.5));
        let x = Matrix::from_fn(10, 8, |_, _| rng.random_range(-1.0..1.0));
        let perm: Vec<usize> = vec![3, 7, 0, 9, 1, 4, 8, 2, 6, 5];
        let xp = Matrix::from_fn(10, 8, |i, j| x.get(perm[i], j));
        let mut g = Graph::inference(&store);
        let (a, b) = (g.input(x), g.input(xp));
        let ya = attn.forward(&mut g, a);
        let yb = attn.forward(&mut g, b);
        for i in 0..10 {
            for j in 0..8 {
                assert!((g.value(yb).get(i, j) - g.value(ya).get(perm[i], j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        assert!(matches!(SpatialAttention::new(&mut store, "a", 10, 4, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn png_round_trip_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(8, 12, 9);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = ImageTensor::load_png(&p, 8, 12).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let r = ImageTensor::load_png(&p, 4, 4).unwrap();
        assert_eq!((r.height(), r.width()), (4, 4));
    }

    #[test]
    fn image_validation() {
        assert!(ImageTensor::new(2, 2, vec![0.5; 12]).is_ok());
        assert!(ImageTensor::new(2, 2, vec![0.5; 11]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.5, 1.5, 0.0]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.5, f32::NAN, 0.0]).is_err());
    }
}
