//! Toy contrastive text-image embedder and its training loop.
//!
//! Patch features come from a strided patch convolution plus one attention
//! mixing layer over the 4x4 patch grid; image and caption embeddings are
//! pooled, projected and unit-normalized into a joint 64-d space trained
//! with a symmetric contrastive objective.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::share::scaled_dot_attention;
use crate::tape::{no_grad, Tensor};
use crate::toydata::{render, Caption, ToyScene};

/// Joint text-image embedding space; any implementation can back the
/// guidance loss and the metrics.
pub trait TextImageEmbedder<T: Scalar> {
    fn embed_dim(&self) -> usize;

    /// Unit-norm image embedding, differentiable wrt the image tensor.
    fn embed_image(&self, img: &Tensor<T>) -> Result<Tensor<T>>;

    /// Unit-norm caption embedding.
    fn embed_text(&self, caption: &Caption) -> Result<Tensor<T>>;

    /// Per-patch features `[patches, feat_dim]`.
    fn patch_features(&self, img: &Tensor<T>) -> Result<Tensor<T>>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEmbedderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub feat_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
}

impl Default for ToyEmbedderConfig {
    fn default() -> Self {
        ToyEmbedderConfig {
            image_size: 16,
            patch: 4,
            feat_dim: 64,
            embed_dim: 64,
            heads: 2,
            vocab_size: crate::toydata::VOCAB_SIZE,
        }
    }
}

pub struct ToyEmbedder<T: Scalar> {
    cfg: ToyEmbedderConfig,
    patch_w: Tensor<T>,
    patch_b: Tensor<T>,
    norm_gain: Tensor<T>,
    mix_q: Tensor<T>,
    mix_k: Tensor<T>,
    mix_v: Tensor<T>,
    mix_o: Tensor<T>,
    img_head: Tensor<T>,
    txt_table: Tensor<T>,
    txt_head: Tensor<T>,
    log_temp: Tensor<T>,
}

fn uniform_var<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::var(
        shape,
        (0..n)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            .collect(),
    )
}

impl<T: Scalar> ToyEmbedder<T> {
    pub fn init(cfg: &ToyEmbedderConfig, seed: u64) -> Result<Self> {
        if cfg.image_size % cfg.patch != 0 {
            return Err(Error::invalid("image size must be divisible by the patch size"));
        }
        if cfg.feat_dim % cfg.heads != 0 {
            return Err(Error::invalid("feat_dim must split across heads"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = cfg.feat_dim;
        Ok(ToyEmbedder {
            patch_w: uniform_var(&mut rng, &[f, 3, cfg.patch, cfg.patch], 3 * cfg.patch * cfg.patch),
            patch_b: Tensor::var(&[f], vec![T::zero(); f]),
            norm_gain: Tensor::var(&[f], vec![T::one(); f]),
            mix_q: uniform_var(&mut rng, &[f, f], f),
            mix_k: uniform_var(&mut rng, &[f, f], f),
            mix_v: uniform_var(&mut rng, &[f, f], f),
            mix_o: uniform_var(&mut rng, &[f, f], f),
            img_head: uniform_var(&mut rng, &[f, cfg.embed_dim], f),
            txt_table: uniform_var(&mut rng, &[cfg.vocab_size, f], f),
            txt_head: uniform_var(&mut rng, &[f, cfg.embed_dim], f),
            log_temp: Tensor::var(&[1], vec![T::from_f64_lossy((0.07f64).ln())]),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ToyEmbedderConfig {
        &self.cfg
    }

    pub fn patches_per_side(&self) -> usize {
        self.cfg.image_size / self.cfg.patch
    }

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("patch_w".into(), self.patch_w.clone()),
            ("patch_b".into(), self.patch_b.clone()),
            ("norm_gain".into(), self.norm_gain.clone()),
            ("mix_q".into(), self.mix_q.clone()),
            ("mix_k".into(), self.mix_k.clone()),
            ("mix_v".into(), self.mix_v.clone()),
            ("mix_o".into(), self.mix_o.clone()),
            ("img_head".into(), self.img_head.clone()),
            ("txt_table".into(), self.txt_table.clone()),
            ("txt_head".into(), self.txt_head.clone()),
            ("log_temp".into(), self.log_temp.clone()),
        ]
    }

    pub fn set_all_trainable(&self, trainable: bool) {
        for (_, p) in self.named_params() {
            p.set_trainable(trainable);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "toy-embedder",
            "version": 1,
            "config": self.cfg,
        });
        let mut archive = Archive::new(meta.to_string());
        for (name, p) in self.named_params() {
            archive.push_tensor(name, &p);
        }
        archive.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::read(path)?;
        let meta: serde_json::Value = serde_json::from_str(&archive.meta)
            .map_err(|e| Error::Archive(format!("bad embedder meta: {e}")))?;
        if meta["kind"] != "toy-embedder" {
            return Err(Error::Archive("checkpoint is not a toy-embedder".into()));
        }
        let cfg: ToyEmbedderConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Archive(format!("bad embedder config: {e}")))?;
        let model = ToyEmbedder::init(&cfg, 0)?;
        for (name, p) in model.named_params() {
            archive.load_into(&name, &p)?;
        }
        model.set_all_trainable(false);
        Ok(model)
    }

    fn pool_rows(x: &Tensor<T>) -> Result<Tensor<T>> {
        let rows = x.shape()[0];
        let weights = Tensor::constant(
            &[1, rows],
            vec![T::one() / T::from_f64_lossy(rows as f64); rows],
        );
        weights.matmul(x)
    }
}

impl<T: Scalar> TextImageEmbedder<T> for ToyEmbedder<T> {
    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn patch_features(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.cfg.image_size;
        if img.shape() != [3, s, s] {
            return Err(Error::shape(&[3, s, s], img.shape(), "embedder input"));
        }
        let grid = self.patches_per_side();
        let h = img.conv2d(&self.patch_w, &self.patch_b, self.cfg.patch, 0)?;
        let x = h
            .reshape(&[self.cfg.feat_dim, grid * grid])?
            .transpose2d()?;
        let xn = x.rms_norm(&self.norm_gain, T::from_f64_lossy(1e-6))?;
        let attn = scaled_dot_attention(
            &xn.matmul(&self.mix_q)?,
            &xn.matmul(&self.mix_k)?,
            &xn.matmul(&self.mix_v)?,
            self.cfg.heads,
        )?;
        x.add(&attn.matmul(&self.mix_o)?)
    }

    fn embed_image(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let pf = self.patch_features(img)?;
        let pooled = Self::pool_rows(&pf)?;
        pooled
            .silu()
            .matmul(&self.img_head)?
            .reshape(&[self.cfg.embed_dim])?
            .l2_normalize(T::from_f64_lossy(1e-12))
    }

    fn embed_text(&self, caption: &Caption) -> Result<Tensor<T>> {
        for tok in caption.tokens {
            if tok >= self.cfg.vocab_size {
                return Err(Error::invalid(format!(
                    "caption token {tok} outside the embedder vocabulary"
                )));
            }
        }
        let emb = self.txt_table.gather_rows(&caption.tokens)?;
        let pooled = Self::pool_rows(&emb)?;
        pooled
            .silu()
            .matmul(&self.txt_head)?
            .reshape(&[self.cfg.embed_dim])?
            .l2_normalize(T::from_f64_lossy(1e-12))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        EmbedderTrainConfig {
            steps: 600,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedderTrainReport {
    pub loss_curve: Vec<f64>,
    pub holdout_retrieval_accuracy: f64,
}

/// Symmetric contrastive training over (image, caption) pairs.
pub fn train_toy_embedder<T: Scalar>(
    model: &ToyEmbedder<T>,
    scenes: &[ToyScene],
    holdout: &[ToyScene],
    cfg: &EmbedderTrainConfig,
) -> Result<EmbedderTrainReport> {
    if scenes.len() < cfg.batch_size || cfg.batch_size < 2 {
        return Err(Error::invalid("need at least batch_size >= 2 training scenes"));
    }
    for scene in scenes.iter().chain(holdout) {
        for tok in scene.caption().tokens {
            if tok >= model.cfg.vocab_size {
                return Err(Error::invalid("scene caption outside the embedder vocabulary"));
            }
        }
    }
    model.set_all_trainable(true);
    let params: Vec<Tensor<T>> = model.named_params().into_iter().map(|(_, p)| p).collect();
    let mut opt = Adam::new(
        params,
        T::from_f64_lossy(cfg.learning_rate),
        (T::from_f64_lossy(0.9), T::from_f64_lossy(0.999)),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let b = cfg.batch_size;
    let eye = {
        let mut data = vec![T::zero(); b * b];
        for i in 0..b {
            data[i * b + i] = T::one();
        }
        Tensor::constant(&[b, b], data)
    };
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut pool: Vec<usize> = (0..scenes.len()).collect();
    for step in 0..cfg.steps {
        pool.shuffle(&mut rng);
        let mut img_embs = Vec::with_capacity(b);
        let mut txt_embs = Vec::with_capacity(b);
        for &idx in pool.iter().take(b) {
            let scene = scenes[idx];
            let img = render::<T>(&scene, rng.gen());
            let ie = model.embed_image(&img.to_tensor())?;
            let te = model.embed_text(&scene.caption())?;
            img_embs.push(ie.reshape(&[1, model.cfg.embed_dim])?);
            txt_embs.push(te.reshape(&[1, model.cfg.embed_dim])?);
        }
        let imgs = Tensor::concat_rows(&img_embs)?;
        let txts = Tensor::concat_rows(&txt_embs)?;
        let temp = self_temp(model);
        let logits = imgs.matmul(&txts.transpose2d()?)?.div_bcast(&temp)?;
        let li = logits
            .log_softmax_rows()?
            .mul(&eye)?
            .sum()
            .mul_scalar(-T::one() / T::from_f64_lossy(b as f64));
        let lt = logits
            .transpose2d()?
            .log_softmax_rows()?
            .mul(&eye)?
            .sum()
            .mul_scalar(-T::one() / T::from_f64_lossy(b as f64));
        let loss = li.add(&lt)?.mul_scalar(T::from_f64_lossy(0.5));
        let value = loss.item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                reason: "contrastive loss became non-finite".into(),
            });
        }
        curve.push(value);
        let grads = loss.backward()?;
        opt.step(&grads);
    }
    let acc = retrieval_accuracy(model, holdout, cfg.seed ^ 0xdead)?;
    Ok(EmbedderTrainReport {
        loss_curve: curve,
        holdout_retrieval_accuracy: acc,
    })
}

fn self_temp<T: Scalar>(model: &ToyEmbedder<T>) -> Tensor<T> {
    model.log_temp.exp()
}

/// Caption-to-image top-1 retrieval over a gallery of scenes.
pub fn retrieval_accuracy<T: Scalar>(
    model: &dyn TextImageEmbedder<T>,
    scenes: &[ToyScene],
    seed: u64,
) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::invalid("empty retrieval gallery"));
    }
    no_grad(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gallery: Vec<Vec<T>> = scenes
            .iter()
            .map(|s| {
                let img = render::<T>(s, rng.gen());
                Ok(model.embed_image(&img.to_tensor())?.to_vec())
            })
            .collect::<Result<_>>()?;
        let mut hits = 0usize;
        for (qi, scene) in scenes.iter().enumerate() {
            let q = model.embed_text(&scene.caption())?.to_vec();
            let best = gallery
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(&q).map(|(x, y)| (*x * *y).to_f64_lossy()).sum();
                    let db: f64 = b.iter().zip(&q).map(|(x, y)| (*x * *y).to_f64_lossy()).sum();
                    da.total_cmp(&db)
                })
                .map(|(i, _)| i)
                .unwrap();
            if best == qi {
                hits += 1;
            }
        }
        Ok(hits as f64 / scenes.len() as f64)
    })
}

/// Mean matched-pair score minus the batch-mean mismatched score.
pub fn matched_margin<T: Scalar>(
    model: &dyn TextImageEmbedder<T>,
    scenes: &[ToyScene],
    seed: u64,
) -> Result<f64> {
    no_grad(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embs: Vec<(Vec<T>, Vec<T>)> = scenes
            .iter()
            .map(|s| {
                let img = render::<T>(s, rng.gen());
                Ok((
                    model.embed_image(&img.to_tensor())?.to_vec(),
                    model.embed_text(&s.caption())?.to_vec(),
                ))
            })
            .collect::<Result<_>>()?;
        let dot = |a: &[T], b: &[T]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (*x * *y).to_f64_lossy()).sum()
        };
        let mut matched = 0.0;
        let mut mismatched = 0.0;
        let mut pairs = 0usize;
        for (i, (ie, _)) in embs.iter().enumerate() {
            for (j, (_, te)) in embs.iter().enumerate() {
                if i == j {
                    matched += dot(ie, te);
                } else {
                    mismatched += dot(ie, te);
                    pairs += 1;
                }
            }
        }
        Ok(matched / embs.len() as f64 - mismatched / pairs as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata::{all_scenes, SceneColor, SceneShape};

    fn two_attribute_gallery() -> Vec<ToyScene> {
        // All (color, shape) combinations with the other fields fixed.
        all_scenes()
            .into_iter()
            .filter(|s| {
                s.size == crate::toydata::SceneSize::Large
                    && s.position == crate::toydata::GridPos { row: 1, col: 1 }
                    && s.background == crate::toydata::Background::Plain
            })
            .collect()
    }

    #[test]
    fn outputs_are_unit_norm() {
        let model = ToyEmbedder::<f64>::init(&ToyEmbedderConfig::default(), 4).unwrap();
        let scene = all_scenes()[100];
        let img = render::<f64>(&scene, 1).to_tensor();
        for v in [
            model.embed_image(&img).unwrap().to_vec(),
            model.embed_text(&scene.caption()).unwrap().to_vec(),
        ] {
            let n: f64 = v.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert_eq!(model.patch_features(&img).unwrap().shape(), &[16, 64]);
    }

    #[test]
    fn untrained_retrieval_is_at_chance() {
        let model = ToyEmbedder::<f32>::init(&ToyEmbedderConfig::default(), 4).unwrap();
        let gallery = two_attribute_gallery();
        assert_eq!(gallery.len(), 12);
        let acc = retrieval_accuracy(&model, &gallery, 3).unwrap();
        // Chance is 1/12; allow the spec's +-5 percentage points.
        assert!(
            (acc - 1.0 / 12.0).abs() <= 0.05 + 1e-9,
            "untrained accuracy {acc}"
        );
    }

    #[test]
    fn trained_embedder_separates_the_two_attribute_set() {
        let model = ToyEmbedder::<f32>::init(&ToyEmbedderConfig::default(), 4).unwrap();
        let gallery = two_attribute_gallery();
        // Train on everything except the probe gallery's exact scenes.
        let train: Vec<ToyScene> = all_scenes()
            .into_iter()
            .filter(|s| !gallery.contains(s))
            .collect();
        let report = train_toy_embedder(
            &model,
            &train,
            &gallery,
            &EmbedderTrainConfig {
                steps: 420,
                batch_size: 16,
                learning_rate: 3e-3,
                seed: 2,
            },
        )
        .unwrap();
        assert!(
            report.holdout_retrieval_accuracy > 0.9,
            "retrieval {}",
            report.holdout_retrieval_accuracy
        );
        let margin = matched_margin(&model, &gallery, 77).unwrap();
        assert!(margin > 0.0, "matched margin {margin}");
    }

    #[test]
    fn gram_distance_metric_axioms() {
        let model = ToyEmbedder::<f64>::init(&ToyEmbedderConfig::default(), 4).unwrap();
        let a = render::<f64>(&all_scenes()[0], 1);
        let b = render::<f64>(&all_scenes()[250], 2);
        let d_ab = crate::metrics::self_similarity_distance(&a, &b, &model).unwrap();
        let d_ba = crate::metrics::self_similarity_distance(&b, &a, &model).unwrap();
        let d_aa = crate::metrics::self_similarity_distance(&a, &a, &model).unwrap();
        assert_eq!(d_aa, 0.0);
        assert!((d_ab - d_ba).abs() < 1e-6);
        assert!(d_ab >= 0.0);
    }

    #[test]
    fn color_inversion_is_closer_than_shape_change() {
        let model = ToyEmbedder::<f32>::init(&ToyEmbedderConfig::default(), 4).unwrap();
        let train: Vec<ToyScene> = all_scenes();
        train_toy_embedder(
            &model,
            &train,
            &train[..4],
            &EmbedderTrainConfig {
                steps: 300,
                batch_size: 16,
                learning_rate: 3e-3,
                seed: 5,
            },
        )
        .unwrap();
        let base = ToyScene {
            shape: SceneShape::Square,
            color: SceneColor::Red,
            size: crate::toydata::SceneSize::Large,
            position: crate::toydata::GridPos { row: 1, col: 1 },
            background: crate::toydata::Background::Plain,
        };
        let img = render::<f32>(&base, 9);
        // Global color inversion keeps the patch-similarity structure.
        let mut inverted = img.clone();
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    inverted.set(c, y, x, 1.0 - img.get(c, y, x));
                }
            }
        }
        let diff_shape = render::<f32>(
            &ToyScene {
                shape: SceneShape::Triangle,
                position: crate::toydata::GridPos { row: 0, col: 2 },
                ..base
            },
            9,
        );
        let d_inv = crate::metrics::self_similarity_distance(&img, &inverted, &model).unwrap();
        let d_shape = crate::metrics::self_similarity_distance(&img, &diff_shape, &model).unwrap();
        assert!(
            d_inv < d_shape,
            "structure sensitivity violated: {d_inv} !< {d_shape}"
        );
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.lar");
        let model = ToyEmbedder::<f32>::init(&ToyEmbedderConfig::default(), 8).unwrap();
        model.save(&path).unwrap();
        let loaded = ToyEmbedder::<f32>::load(&path).unwrap();
        let img = render::<f32>(&all_scenes()[31], 4).to_tensor();
        assert_eq!(
            model.embed_image(&img).unwrap().to_vec(),
            loaded.embed_image(&img).unwrap().to_vec()
        );
    }
}
