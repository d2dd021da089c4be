//! Desk-scale diffusion stand-in.
//!
//! A small trained convolutional autoencoder plays the role of the frozen
//! latent decoder: augmentation perturbs the latent with seeded Gaussian
//! noise (total magnitude driven by an intensity knob and inversely by the
//! guidance scale), decodes, then applies a mild seeded elastic deformation
//! and brightness/contrast jitter. The step count maps onto the number of
//! noise increments. Identical `(latent, seed, steps, guidance)` inputs are
//! bit-reproducible.
//!
//! Deformation amplitude is drawn per variant with a heavy tail
//! (`spurious_prob`), so a fraction of variants genuinely break their source
//! semantics; those are what the cosine filter exists to remove.

use super::{DiffusionModel, DiffusionSettings, Latent};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2dLayer};
use crate::tensor::{avg_pool2d, upsample_nearest2, Tensor};
use ndarray::{Array2, Array3, ArrayD};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const ENC_CHANNELS: usize = 16;

/// Latent layout: encoder features concatenated with a 4x-pooled copy of the
/// image. The pooled block makes the encoder injective by construction: any
/// pixel change moves its pooling cell's mean.
pub struct ImageAutoencoder {
    image_shape: (usize, usize, usize),
    enc1: Conv2dLayer,
    enc2: Conv2dLayer,
    dec1: Conv2dLayer,
    dec2: Conv2dLayer,
    dec3: Conv2dLayer,
    out: Conv2dLayer,
}

impl ImageAutoencoder {
    pub fn new(image_shape: (usize, usize, usize), seed: u64, trainable: bool) -> Result<Self> {
        let (c, h, w) = image_shape;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(format!(
                "ImageAutoencoder needs H, W divisible by 4, got {h}x{w}"
            )));
        }
        let mut rng = crate::rng::stream(seed, "init-autoencoder", &[]);
        Ok(ImageAutoencoder {
            image_shape,
            enc1: Conv2dLayer::new(&mut rng, c, 8, 3, 1, trainable),
            enc2: Conv2dLayer::new(&mut rng, 8, ENC_CHANNELS, 3, 1, trainable),
            dec1: Conv2dLayer::new(&mut rng, ENC_CHANNELS + c, 32, 3, 1, trainable),
            dec2: Conv2dLayer::new(&mut rng, 32, 16, 3, 1, trainable),
            dec3: Conv2dLayer::new(&mut rng, 16, 8, 3, 1, trainable),
            out: Conv2dLayer::new(&mut rng, 8, c, 3, 1, trainable),
        })
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    /// Latent channels: encoder features plus the pooled image copy.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let (c, h, w) = self.image_shape;
        (ENC_CHANNELS + c, h / 4, w / 4)
    }

    pub fn encode_t(&self, x: &Tensor) -> Tensor {
        let b = x.shape()[0];
        let h = avg_pool2d(&self.enc1.forward(x).relu(), 2);
        let feats = avg_pool2d(&self.enc2.forward(&h).relu(), 2);
        let pooled = avg_pool2d(x, 4);
        // Row-major (B, C, H, W): per-row flatten keeps channels contiguous,
        // so a column concat is a channel concat after reshape.
        let (lc, lh, lw) = self.latent_shape();
        let f_cols = feats.reshape(&[b, ENC_CHANNELS * lh * lw]);
        let p_cols = pooled.reshape(&[b, (lc - ENC_CHANNELS) * lh * lw]);
        Tensor::concat_cols(&[f_cols, p_cols]).reshape(&[b, lc, lh, lw])
    }

    pub fn decode_t(&self, z: &Tensor) -> Tensor {
        let h = self.dec1.forward(z).relu();
        let h = upsample_nearest2(&h);
        let h = self.dec2.forward(&h).relu();
        let h = upsample_nearest2(&h);
        let h = self.dec3.forward(&h).relu();
        self.out.forward(&h).sigmoid()
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        [
            &self.enc1, &self.enc2, &self.dec1, &self.dec2, &self.dec3, &self.out,
        ]
        .iter()
        .flat_map(|l| l.parameters())
        .collect()
    }

    pub fn state(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut s = self.enc1.state("enc1");
        s.extend(self.enc2.state("enc2"));
        s.extend(self.dec1.state("dec1"));
        s.extend(self.dec2.state("dec2"));
        s.extend(self.dec3.state("dec3"));
        s.extend(self.out.state("out"));
        s
    }

    pub fn load_state(&self, state: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        for (prefix, layer) in [
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("dec1", &self.dec1),
            ("dec2", &self.dec2),
            ("dec3", &self.dec3),
            ("out", &self.out),
        ] {
            for (suffix, t) in [("weight", &layer.w), ("bias", &layer.b)] {
                let name = format!("{prefix}.{suffix}");
                let arr = state
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
                if t.shape() != arr.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        arr.shape(),
                        t.shape()
                    )));
                }
                t.update_data(|d| d.assign(arr));
            }
        }
        Ok(())
    }

    /// Reconstruction training on plain images; returns final epoch MSE.
    pub fn fit(&self, images: &ImageBatch, epochs: usize, batch_size: usize, seed: u64) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::invalid("autoencoder fit: empty image set"));
        }
        let mut opt = Adam::new(self.parameters(), 1e-3);
        let mut last_mse = f64::INFINITY;
        for epoch in 0..epochs {
            let mut rng = crate::rng::stream(seed, "ae-epoch", &[epoch as u64]);
            let order = crate::nn::shuffled_indices(&mut rng, images.len());
            let mut epoch_loss = 0.0;
            let mut batches = 0.0;
            for chunk in order.chunks(batch_size) {
                let x = images.select(chunk).to_tensor();
                let recon = self.decode_t(&self.encode_t(&x));
                let loss = recon.sub(&x).square().mean_all();
                opt.zero_grad();
                loss.backward();
                opt.step();
                epoch_loss += loss.item();
                batches += 1.0;
            }
            last_mse = epoch_loss / batches;
            if !last_mse.is_finite() {
                return Err(Error::NonFinite {
                    stage: "autoencoder-fit".into(),
                    step: epoch,
                    detail: format!("epoch mse {last_mse}"),
                });
            }
        }
        Ok(last_mse)
    }
}

/// Stochastic knobs of the surrogate backend.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    /// Base latent noise magnitude at intensity 1, guidance 0.5.
    pub sigma: f64,
    /// Base elastic deformation amplitude (pixels).
    pub deform: f64,
    /// Brightness/contrast jitter range.
    pub jitter: f64,
    /// Probability of drawing a heavy-tail (spurious) deformation.
    pub spurious_prob: f64,
    /// Amplitude multiplier range for spurious draws.
    pub spurious_scale: (f64, f64),
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            sigma: 0.6,
            deform: 1.0,
            jitter: 0.12,
            spurious_prob: 0.2,
            spurious_scale: (2.5, 4.5),
        }
    }
}

/// The trained-autoencoder diffusion stand-in.
pub struct SurrogateDiffusion {
    ae: ImageAutoencoder,
    pub cfg: SurrogateConfig,
}

impl SurrogateDiffusion {
    pub fn new(ae: ImageAutoencoder, cfg: SurrogateConfig) -> Self {
        SurrogateDiffusion { ae, cfg }
    }

    /// Untrained instance (random decoder); deterministic per seed. Exercises
    /// identical interfaces when reconstruction quality is irrelevant.
    pub fn untrained(image_shape: (usize, usize, usize), seed: u64) -> Result<Self> {
        Ok(SurrogateDiffusion {
            ae: ImageAutoencoder::new(image_shape, seed, false)?,
            cfg: SurrogateConfig::default(),
        })
    }

    pub fn autoencoder(&self) -> &ImageAutoencoder {
        &self.ae
    }

    fn weight_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, arr) in self.ae.state() {
            for v in arr.iter() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Bilinear sample with clamp-to-edge.
fn sample_bilinear(img: &Array3<f64>, c: usize, y: f64, x: f64) -> f64 {
    let (_, h, w) = img.dim();
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;
    img[(c, y0, x0)] * (1.0 - fy) * (1.0 - fx)
        + img[(c, y0, x1)] * (1.0 - fy) * fx
        + img[(c, y1, x0)] * fy * (1.0 - fx)
        + img[(c, y1, x1)] * fy * fx
}

/// Smooth random displacement warp: a coarse 4x4 field, bilinearly
/// upsampled, applied as a backward warp.
fn elastic_warp(img: &Array3<f64>, amplitude: f64, rng: &mut ChaCha12Rng) -> Array3<f64> {
    const G: usize = 4;
    let (c, h, w) = img.dim();
    let mut field_y = Array2::<f64>::zeros((G, G));
    let mut field_x = Array2::<f64>::zeros((G, G));
    for v in field_y.iter_mut() {
        *v = rng.random_range(-1.0..=1.0) * amplitude;
    }
    for v in field_x.iter_mut() {
        *v = rng.random_range(-1.0..=1.0) * amplitude;
    }
    let coarse = |f: &Array2<f64>, y: f64, x: f64| -> f64 {
        let gy = y * (G - 1) as f64;
        let gx = x * (G - 1) as f64;
        let y0 = gy.floor() as usize;
        let x0 = gx.floor() as usize;
        let y1 = (y0 + 1).min(G - 1);
        let x1 = (x0 + 1).min(G - 1);
        let fy = gy - y0 as f64;
        let fx = gx - x0 as f64;
        f[(y0, x0)] * (1.0 - fy) * (1.0 - fx)
            + f[(y0, x1)] * (1.0 - fy) * fx
            + f[(y1, x0)] * fy * (1.0 - fx)
            + f[(y1, x1)] * fy * fx
    };
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let uy = y as f64 / (h - 1) as f64;
                let ux = x as f64 / (w - 1) as f64;
                let dy = coarse(&field_y, uy, ux);
                let dx = coarse(&field_x, uy, ux);
                out[(ci, y, x)] = sample_bilinear(img, ci, y as f64 + dy, x as f64 + dx);
            }
        }
    }
    out
}

impl DiffusionModel for SurrogateDiffusion {
    fn backend_kind(&self) -> &'static str {
        "surrogate"
    }

    fn version(&self) -> String {
        format!("surrogate/1 ae:{:016x}", self.weight_checksum())
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        self.ae.image_shape()
    }

    fn encode(&self, image: &Array3<f64>) -> Result<Latent> {
        if image.dim() != self.ae.image_shape() {
            return Err(Error::shape(
                "surrogate encode",
                format!("{:?}", self.ae.image_shape()),
                format!("{:?}", image.dim()),
            ));
        }
        let (c, h, w) = image.dim();
        let x = Tensor::constant(
            image
                .clone()
                .into_shape_with_order(ndarray::IxDyn(&[1, c, h, w]))
                .unwrap(),
        );
        let z = self.ae.encode_t(&x);
        let (lc, lh, lw) = self.ae.latent_shape();
        let values = z
            .to_array()
            .into_shape_with_order(ndarray::IxDyn(&[lc, lh, lw]))
            .unwrap();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Backend("non-finite latent".into()));
        }
        Ok(Latent { values })
    }

    fn generate(&self, latent: &Latent, settings: &DiffusionSettings, seed: u64) -> Result<Array3<f64>> {
        let (lc, lh, lw) = self.ae.latent_shape();
        if latent.values.shape() != [lc, lh, lw] {
            return Err(Error::shape(
                "surrogate generate",
                format!("{:?}", (lc, lh, lw)),
                format!("{:?}", latent.values.shape()),
            ));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let intensity = settings.intensity.max(0.0);
        // Higher guidance leans harder on the source: calibrated so the
        // reference guidance of 0.5 is neutral.
        let guidance_factor = 1.5 / (1.0 + settings.guidance_scale.max(0.0));
        let sigma = self.cfg.sigma * intensity * guidance_factor;
        let n_iter = (settings.steps / 25).clamp(1, 8);
        let per_step = Normal::new(0.0, sigma / (n_iter as f64).sqrt()).unwrap();

        let mut z = latent.values.clone();
        for _ in 0..n_iter {
            for v in z.iter_mut() {
                *v += per_step.sample(&mut rng);
            }
        }
        let zt = Tensor::constant(
            z.into_shape_with_order(ndarray::IxDyn(&[1, lc, lh, lw])).unwrap(),
        );
        let decoded = self.ae.decode_t(&zt).to_array();
        let (c, h, w) = self.ae.image_shape();
        let mut img = Array3::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    img[(ci, y, x)] = decoded[[0, ci, y, x]];
                }
            }
        }

        let tail: f64 = rng.random_range(0.0..1.0);
        let amp_mult = if tail < self.cfg.spurious_prob {
            rng.random_range(self.cfg.spurious_scale.0..=self.cfg.spurious_scale.1)
        } else {
            rng.random_range(0.2..=1.0)
        };
        let amplitude = self.cfg.deform * intensity * guidance_factor * amp_mult;
        if amplitude > 0.0 {
            img = elastic_warp(&img, amplitude, &mut rng);
        }

        let jit = self.cfg.jitter * intensity * guidance_factor;
        let contrast = 1.0 + rng.random_range(-1.0..=1.0) * jit;
        let brightness = rng.random_range(-1.0..=1.0) * jit;
        img.mapv_inplace(|v| ((v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0));
        Ok(img)
    }
}

/// Backend whose variants are the source image, untouched. Gives the
/// pipeline an exact similarity-1 reference point.
pub struct IdentityDiffusion {
    pub image_shape: (usize, usize, usize),
}

impl DiffusionModel for IdentityDiffusion {
    fn backend_kind(&self) -> &'static str {
        "identity"
    }

    fn version(&self) -> String {
        "identity/1".into()
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    fn encode(&self, image: &Array3<f64>) -> Result<Latent> {
        if image.dim() != self.image_shape {
            return Err(Error::shape(
                "identity encode",
                format!("{:?}", self.image_shape),
                format!("{:?}", image.dim()),
            ));
        }
        Ok(Latent {
            values: image.clone().into_dyn(),
        })
    }

    fn generate(&self, latent: &Latent, _settings: &DiffusionSettings, _seed: u64) -> Result<Array3<f64>> {
        latent
            .values
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|_| Error::Backend("identity latent is not an image".into()))
    }
}
