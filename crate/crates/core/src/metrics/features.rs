use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointHeader, CheckpointKind};
use crate::error::{ensure, Error, Result};
use crate::nn::{fit, to_cnhw, AdamConfig, Bound, Conv2d, ParamStore, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::{image_to_chw, stack_images};

/// Deterministic image embedding used by the distribution metrics.
pub trait FeatureExtractor {
    fn descriptor(&self) -> String;
    fn dim(&self) -> usize;
    /// One row per image.
    fn features(&self, images: &[Array3<u8>]) -> Result<Array2<f64>>;
}

/// Distance between two images in some perceptual feature space.
pub trait PerceptualDistance {
    fn descriptor(&self) -> String;
    fn distance(&self, a: &Array3<u8>, b: &Array3<u8>) -> Result<f64>;
}

pub const FEATURE_DIM: usize = 64;
const MIN_TRAIN_IMAGES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyExtractorConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ToyExtractorConfig {
    fn default() -> Self {
        ToyExtractorConfig {
            steps: 400,
            batch_size: 16,
            lr: 2e-3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layers {
    enc: [Conv2d; 3],
    dec: [Conv2d; 3],
}

impl Layers {
    fn find<T: Scalar>(p: &ParamStore<T>) -> Option<Self> {
        Some(Layers {
            enc: [
                Conv2d::find(p, "enc0", 2)?,
                Conv2d::find(p, "enc1", 2)?,
                Conv2d::find(p, "enc2", 2)?,
            ],
            dec: [
                Conv2d::find(p, "dec0", 1)?,
                Conv2d::find(p, "dec1", 1)?,
                Conv2d::find(p, "dec2", 1)?,
            ],
        })
    }

    /// First-layer activations and the code.
    fn encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> (Var, Var) {
        let h1 = self.enc[0].forward(tape, p, x);
        let h1 = tape.silu(h1);
        let h2 = self.enc[1].forward(tape, p, h1);
        let h2 = tape.silu(h2);
        (h1, self.enc[2].forward(tape, p, h2))
    }

    fn decode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Var {
        let mut h = z;
        for (i, conv) in self.dec.iter().enumerate() {
            h = tape.upsample2(h);
            h = conv.forward(tape, p, h);
            if i < 2 {
                h = tape.silu(h);
            }
        }
        h
    }
}

/// Encoder of a small convolutional autoencoder trained on the images it
/// will describe. The code is `64 / (s/8)²` channels at `s/8 × s/8`.
#[derive(Debug, Clone)]
pub struct ToyFeatureExtractor<T: Scalar> {
    image_size: usize,
    params: ParamStore<T>,
    layers: Layers,
    seed: u64,
    pub train_losses: Vec<f64>,
}

fn code_channels(image_size: usize) -> Result<usize> {
    ensure!(
        image_size >= 8 && image_size % 8 == 0,
        "image size {image_size} must be a multiple of 8"
    );
    let cells = (image_size / 8) * (image_size / 8);
    ensure!(
        FEATURE_DIM % cells == 0,
        "a {FEATURE_DIM}-dimensional code does not fit a {image_size}×{image_size} image"
    );
    Ok(FEATURE_DIM / cells)
}

impl<T: Scalar> ToyFeatureExtractor<T> {
    fn init(image_size: usize, seed: u64) -> Result<Self> {
        let cf = code_channels(image_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        Conv2d::new(&mut p, "enc0", 3, 8, 3, 2, &mut rng);
        Conv2d::new(&mut p, "enc1", 8, 16, 3, 2, &mut rng);
        Conv2d::new(&mut p, "enc2", 16, cf, 3, 2, &mut rng);
        Conv2d::new(&mut p, "dec0", cf, 16, 3, 1, &mut rng);
        Conv2d::new(&mut p, "dec1", 16, 8, 3, 1, &mut rng);
        Conv2d::new(&mut p, "dec2", 8, 3, 3, 1, &mut rng);
        let layers = Layers::find(&p).expect("layers just created");
        Ok(ToyFeatureExtractor {
            image_size,
            params: p,
            layers,
            seed,
            train_losses: Vec::new(),
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    fn check(&self, images: &[Array3<u8>]) -> Result<()> {
        let s = self.image_size;
        for img in images {
            ensure!(
                img.dim() == (s, s, 3),
                "image {:?} does not match the extractor ({s}×{s})",
                img.dim()
            );
        }
        Ok(())
    }

    fn run<R>(
        &self,
        images: &[Array3<u8>],
        f: impl Fn(&Tape<T>, Var, Var, Var) -> R,
    ) -> Result<Vec<R>> {
        self.check(images)?;
        let mut out = Vec::new();
        for chunk in images.chunks(64) {
            let x = stack_images::<T>(&chunk.iter().collect::<Vec<_>>());
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let xv = tape.leaf(to_cnhw(&x), false);
            let (h1, z) = self.layers.encode(&mut tape, &p, xv);
            let rec = self.layers.decode(&mut tape, &p, z);
            out.push(f(&tape, h1, z, rec));
        }
        Ok(out)
    }

    /// Mean squared reconstruction error in [−1, 1] units.
    pub fn reconstruction_loss(&self, images: &[Array3<u8>]) -> Result<f64> {
        let parts = self.run(images, |tape, _, _, rec| {
            let r = tape.value(rec);
            (r.clone(), r.shape()[1])
        })?;
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut offset = 0;
        for (r, n) in parts {
            for i in 0..n {
                let img = image_to_chw::<T>(&images[offset + i]);
                for c in 0..3 {
                    for (a, b) in r
                        .index_axis(Axis(0), c)
                        .index_axis(Axis(0), i)
                        .iter()
                        .zip(img.index_axis(Axis(0), c))
                    {
                        let d = (*a - *b).f64();
                        sum += d * d;
                        count += 1;
                    }
                }
            }
            offset += n;
        }
        Ok(sum / count as f64)
    }

    fn rows(v: &ArrayD<T>) -> Array2<f64> {
        // [C, N, H, W] to one row per image in (c, y, x) order.
        let s = v.shape();
        let (c, n, h, w) = (s[0], s[1], s[2], s[3]);
        Array2::from_shape_fn((n, c * h * w), |(i, k)| {
            let (ci, r) = (k / (h * w), k % (h * w));
            v[[ci, i, r / w, r % w]].f64()
        })
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut h = CheckpointHeader::new(
            CheckpointKind::FeatureExtractor,
            T::DTYPE,
            serde_json::json!({ "image_size": self.image_size, "dim": FEATURE_DIM }),
            self.seed,
        );
        h.training = serde_json::json!({ "losses": self.train_losses.len() });
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params) = checkpoint::load::<T>(path)?;
        if h.kind != CheckpointKind::FeatureExtractor {
            return Err(Error::format(
                path,
                format!("expected a feature extractor, found {:?}", h.kind),
            ));
        }
        let image_size = h.arch["image_size"]
            .as_u64()
            .ok_or_else(|| Error::format(path, "missing image_size"))?
            as usize;
        let fresh = Self::init(image_size, h.seed)?;
        let expected: Vec<(String, Vec<usize>)> = fresh
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        checkpoint::check_shapes(path, &params, &expected)?;
        let layers = Layers::find(&params).ok_or_else(|| Error::format(path, "missing layers"))?;
        Ok(ToyFeatureExtractor {
            image_size,
            params,
            layers,
            seed: h.seed,
            train_losses: Vec::new(),
        })
    }
}

impl<T: Scalar> FeatureExtractor for ToyFeatureExtractor<T> {
    fn descriptor(&self) -> String {
        format!(
            "toy-conv-autoencoder d={FEATURE_DIM} size={} seed={} weights={}",
            self.image_size,
            self.seed,
            &self.params.checksum()[..16]
        )
    }

    fn dim(&self) -> usize {
        FEATURE_DIM
    }

    fn features(&self, images: &[Array3<u8>]) -> Result<Array2<f64>> {
        if images.is_empty() {
            return Ok(Array2::zeros((0, FEATURE_DIM)));
        }
        let parts = self.run(images, |tape, _, z, _| Self::rows(tape.value(z)))?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
    }
}

impl<T: Scalar> PerceptualDistance for ToyFeatureExtractor<T> {
    fn descriptor(&self) -> String {
        format!("{} layer=enc0", FeatureExtractor::descriptor(self))
    }

    /// Mean squared difference of first-layer activations.
    fn distance(&self, a: &Array3<u8>, b: &Array3<u8>) -> Result<f64> {
        let r = self.run(&[a.clone(), b.clone()], |tape, h1, _, _| {
            Self::rows(tape.value(h1))
        })?;
        let rows = &r[0];
        let d = rows
            .row(0)
            .iter()
            .zip(rows.row(1))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
        Ok(d / rows.ncols() as f64)
    }
}

/// Trains the autoencoder on `train_images` (at least 100) and returns its
/// encoder as an extractor.
pub fn toy_feature_extractor<T: Scalar>(
    train_images: &[Array3<u8>],
    seed: u64,
    config: &ToyExtractorConfig,
) -> Result<ToyFeatureExtractor<T>> {
    if train_images.len() < MIN_TRAIN_IMAGES {
        return Err(Error::InsufficientSamples(format!(
            "the feature extractor needs at least {MIN_TRAIN_IMAGES} images, got {}",
            train_images.len()
        )));
    }
    let (s, _, _) = train_images[0].dim();
    let mut fx = ToyFeatureExtractor::<T>::init(s, seed)?;
    fx.check(train_images)?;
    ensure!(
        config.steps > 0 && config.batch_size > 0,
        "steps and batch size must be positive"
    );
    let images: Vec<Array3<T>> = train_images.iter().map(image_to_chw).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let layers = fx.layers;
    let bs = config.batch_size;
    let adam = AdamConfig {
        lr: config.lr,
        ..Default::default()
    };
    let losses = fit(
        &mut fx.params,
        adam,
        config.steps,
        |store, _| -> Result<_> {
            let mut x = Array4::zeros((bs, 3, s, s));
            for i in 0..bs {
                x.index_axis_mut(Axis(0), i)
                    .assign(&images[rng.random_range(0..images.len())]);
            }
            let target = to_cnhw(&x);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let xv = tape.leaf(target.clone(), false);
            let (_, z) = layers.encode(&mut tape, &p, xv);
            let rec = layers.decode(&mut tape, &p, z);
            let loss = tape.mse(rec, &target, None);
            let g = tape.backward(loss);
            Ok((tape.value(loss)[0], p.grads(&g, store)))
        },
    )?;
    fx.train_losses = losses;
    Ok(fx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy_dataset, ToyConfig};

    #[test]
    fn code_geometry() {
        assert_eq!(code_channels(32).unwrap(), 4);
        assert_eq!(code_channels(16).unwrap(), 16);
        assert!(code_channels(12).is_err());
        assert!(code_channels(128).is_err());
    }

    #[test]
    fn too_few_images_is_an_error() {
        let imgs = vec![Array3::zeros((16, 16, 3)); 10];
        assert!(matches!(
            toy_feature_extractor::<f32>(&imgs, 0, &ToyExtractorConfig::default()),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (data, _) = generate_toy_dataset(&ToyConfig::new(100, 16, 3), 2).unwrap();
        let imgs: Vec<_> = data.into_iter().map(|r| r.image).collect();
        let cfg = ToyExtractorConfig {
            steps: 60,
            ..Default::default()
        };
        let a = toy_feature_extractor::<f32>(&imgs, 1, &cfg).unwrap();
        let b = toy_feature_extractor::<f32>(&imgs, 1, &cfg).unwrap();
        let fa = a.features(&imgs[..5]).unwrap();
        assert_eq!(fa.dim(), (5, 64));
        assert_eq!(fa, b.features(&imgs[..5]).unwrap());
        let init = ToyFeatureExtractor::<f32>::init(16, 1).unwrap();
        assert!(a.reconstruction_loss(&imgs).unwrap() < init.reconstruction_loss(&imgs).unwrap());
        assert_eq!(a.distance(&imgs[0], &imgs[0]).unwrap(), 0.0);
        assert!(a.distance(&imgs[0], &imgs[1]).unwrap() > 0.0);

        let dir = tempfile::tempdir().unwrap();
        a.save(&dir.path().join("fx.ckpt")).unwrap();
        let back = ToyFeatureExtractor::<f32>::load(&dir.path().join("fx.ckpt")).unwrap();
        assert_eq!(back.features(&imgs[..5]).unwrap(), fa);
    }
}
