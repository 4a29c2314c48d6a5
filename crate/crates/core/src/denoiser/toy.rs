//! Desk-scale trainable denoiser.
//!
//! A small conv encoder/decoder over `[C, S, S]` latents with self-attention
//! blocks at the two lowest resolutions (S/2 and S/4), eight attention sites
//! in forward order, text conditioning through cross-attention over a
//! learned token-embedding table, and sinusoidal time conditioning.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::hash::Hasher;
use std::path::Path;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::share::{attend_shared, attend_vanilla, project_qkv, scaled_dot_attention, ShareMode};
use crate::tape::{instrument, Tensor};
use crate::toydata::Caption;

use super::site::{validate_control, AttnControl, SelfAttentionSite, SiteAction};
use super::{DenoiserBackend, TextCondition};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDenoiserConfig {
    pub latent_channels: usize,
    pub spatial: usize,
    pub base_channels: usize,
    pub mid_channels: usize,
    pub txt_dim: usize,
    pub time_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        ToyDenoiserConfig {
            latent_channels: 4,
            spatial: 16,
            base_channels: 16,
            mid_channels: 32,
            txt_dim: 16,
            time_dim: 16,
            heads: 2,
            vocab_size: crate::toydata::VOCAB_SIZE,
        }
    }
}

fn uniform_var<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::var(shape, data)
}

struct Conv<T: Scalar> {
    w: Tensor<T>,
    b: Tensor<T>,
    stride: usize,
}

impl<T: Scalar> Conv<T> {
    fn init(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, stride: usize) -> Self {
        Conv {
            w: uniform_var(rng, &[c_out, c_in, 3, 3], c_in * 9),
            b: Tensor::var(&[c_out], vec![T::zero(); c_out]),
            stride,
        }
    }

    fn apply(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        h.conv2d(&self.w, &self.b, self.stride, 1)
    }
}

fn to_tokens<T: Scalar>(h: &Tensor<T>) -> Result<(Tensor<T>, usize, usize)> {
    let [c, hh, ww] = match h.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(Error::invalid(format!("expected [C,H,W], got {s:?}"))),
    };
    Ok((h.reshape(&[c, hh * ww])?.transpose2d()?, hh, ww))
}

fn to_chw<T: Scalar>(x: &Tensor<T>, c: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    x.transpose2d()?.reshape(&[c, h, w])
}

/// Attention block: self-attention (hookable site) + cross-attention over
/// the text condition + time-conditioned residual conv.
struct AttnBlock<T: Scalar> {
    site_index: usize,
    channels: usize,
    norm_sa: Tensor<T>,
    w_o: Tensor<T>,
    norm_xa: Tensor<T>,
    xa_q: Tensor<T>,
    xa_k: Tensor<T>,
    xa_v: Tensor<T>,
    xa_o: Tensor<T>,
    conv: Conv<T>,
    time_w: Tensor<T>,
}

impl<T: Scalar> AttnBlock<T> {
    fn init(
        rng: &mut ChaCha8Rng,
        site_index: usize,
        channels: usize,
        txt_dim: usize,
        time_dim: usize,
    ) -> Self {
        AttnBlock {
            site_index,
            channels,
            norm_sa: Tensor::var(&[channels], vec![T::one(); channels]),
            w_o: uniform_var(rng, &[channels, channels], channels),
            norm_xa: Tensor::var(&[channels], vec![T::one(); channels]),
            xa_q: uniform_var(rng, &[channels, channels], channels),
            xa_k: uniform_var(rng, &[txt_dim, channels], txt_dim),
            xa_v: uniform_var(rng, &[txt_dim, channels], txt_dim),
            xa_o: uniform_var(rng, &[channels, channels], channels),
            conv: Conv::init(rng, channels, channels, 1),
            time_w: uniform_var(rng, &[time_dim, channels], time_dim),
        }
    }

    fn forward(
        &self,
        h: &Tensor<T>,
        site: &SelfAttentionSite<T>,
        temb: &Tensor<T>,
        cond: &TextCondition<T>,
        heads: usize,
        ctrl: Option<&dyn AttnControl<T>>,
    ) -> Result<Tensor<T>> {
        let (x, hh, ww) = to_tokens(h)?;
        let eps = T::from_f64_lossy(NORM_EPS);

        // Self-attention through the site, honoring any hook.
        let xn = x.rms_norm(&self.norm_sa, eps)?;
        let attn = match ctrl.map(|c| c.action(self.site_index)) {
            None | Some(SiteAction::Frozen) => attend_vanilla(&xn, site, false)?,
            Some(SiteAction::CloneVanilla) => attend_vanilla(&xn, site, true)?,
            Some(SiteAction::ShareQ { feats }) => {
                attend_shared(&xn, feats, site, ShareMode::QShare)?
            }
            Some(SiteAction::ShareKv { feats }) => {
                attend_shared(&xn, feats, site, ShareMode::KvShare)?
            }
            Some(SiteAction::Capture) => {
                let (q, k, v) = project_qkv(&xn, site, false)?;
                ctrl.unwrap().record(self.site_index, &q, &k, &v);
                scaled_dot_attention(&q, &k, &v, site.head_count)?
            }
        };
        let x = x.add(&attn.matmul(&self.w_o)?)?;

        // Cross-attention over the condition tokens.
        let xn = x.rms_norm(&self.norm_xa, eps)?;
        let q = xn.matmul(&self.xa_q)?;
        let k = cond.embedding.matmul(&self.xa_k)?;
        let v = cond.embedding.matmul(&self.xa_v)?;
        let ca = scaled_dot_attention(&q, &k, &v, heads)?;
        let x = x.add(&ca.matmul(&self.xa_o)?)?;

        // Timestep conditioning, then a residual conv.
        let tb = temb.matmul(&self.time_w)?.reshape(&[self.channels])?;
        let x = x.add_bias(&tb)?;
        let h = to_chw(&x, self.channels, hh, ww)?;
        h.add(&self.conv.apply(&h)?.silu())
    }

    fn params(&self, name: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{name}.norm_sa"), self.norm_sa.clone()));
        out.push((format!("{name}.w_o"), self.w_o.clone()));
        out.push((format!("{name}.norm_xa"), self.norm_xa.clone()));
        out.push((format!("{name}.xa_q"), self.xa_q.clone()));
        out.push((format!("{name}.xa_k"), self.xa_k.clone()));
        out.push((format!("{name}.xa_v"), self.xa_v.clone()));
        out.push((format!("{name}.xa_o"), self.xa_o.clone()));
        out.push((format!("{name}.conv.w"), self.conv.w.clone()));
        out.push((format!("{name}.conv.b"), self.conv.b.clone()));
        out.push((format!("{name}.time_w"), self.time_w.clone()));
    }
}

/// Time-conditioned residual conv block (no attention).
struct ResBlock<T: Scalar> {
    channels: usize,
    conv: Conv<T>,
    time_w: Tensor<T>,
}

impl<T: Scalar> ResBlock<T> {
    fn init(rng: &mut ChaCha8Rng, channels: usize, time_dim: usize) -> Self {
        ResBlock {
            channels,
            conv: Conv::init(rng, channels, channels, 1),
            time_w: uniform_var(rng, &[time_dim, channels], time_dim),
        }
    }

    fn forward(&self, h: &Tensor<T>, temb: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, hh, ww) = to_tokens(h)?;
        let tb = temb.matmul(&self.time_w)?.reshape(&[self.channels])?;
        let x = x.add_bias(&tb)?;
        let h = to_chw(&x, self.channels, hh, ww)?;
        h.add(&self.conv.apply(&h)?.silu())
    }

    fn params(&self, name: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{name}.conv.w"), self.conv.w.clone()));
        out.push((format!("{name}.conv.b"), self.conv.b.clone()));
        out.push((format!("{name}.time_w"), self.time_w.clone()));
    }
}

pub struct ToyDenoiser<T: Scalar> {
    cfg: ToyDenoiserConfig,
    text_table: Tensor<T>,
    time_w1: Tensor<T>,
    conv_in: Conv<T>,
    res_in: ResBlock<T>,
    down8: Conv<T>,
    enc8: Vec<AttnBlock<T>>,
    down4: Conv<T>,
    mid4: Vec<AttnBlock<T>>,
    up8: Conv<T>,
    dec8: Vec<AttnBlock<T>>,
    up16: Conv<T>,
    res_out: ResBlock<T>,
    conv_out: Conv<T>,
    sites: Vec<SelfAttentionSite<T>>,
}

impl<T: Scalar> ToyDenoiser<T> {
    pub fn init(cfg: &ToyDenoiserConfig, seed: u64) -> Result<Self> {
        if cfg.spatial % 4 != 0 {
            return Err(Error::invalid("spatial size must be divisible by 4"));
        }
        for (c, what) in [(cfg.base_channels, "base"), (cfg.mid_channels, "mid")] {
            if c % cfg.heads != 0 {
                return Err(Error::invalid(format!(
                    "{what} channels {c} not divisible by {} heads",
                    cfg.heads
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c1 = cfg.base_channels;
        let c2 = cfg.mid_channels;
        let mut sites = Vec::new();
        let site = |channels: usize, rng: &mut ChaCha8Rng, sites: &mut Vec<SelfAttentionSite<T>>| {
            let idx = sites.len();
            sites.push(SelfAttentionSite::init(idx, channels, cfg.heads, rng));
            idx
        };

        let conv_in = Conv {
            w: uniform_var(&mut rng, &[c1, cfg.latent_channels, 3, 3], cfg.latent_channels * 9),
            b: Tensor::var(&[c1], vec![T::zero(); c1]),
            stride: 1,
        };
        let res_in = ResBlock::init(&mut rng, c1, cfg.time_dim);
        let down8 = Conv::init(&mut rng, c1, c1, 2);
        let enc8 = (0..2)
            .map(|_| {
                let s = site(c1, &mut rng, &mut sites);
                AttnBlock::init(&mut rng, s, c1, cfg.txt_dim, cfg.time_dim)
            })
            .collect::<Vec<_>>();
        let down4 = Conv::init(&mut rng, c2, c1, 2);
        let mid4 = (0..4)
            .map(|_| {
                let s = site(c2, &mut rng, &mut sites);
                AttnBlock::init(&mut rng, s, c2, cfg.txt_dim, cfg.time_dim)
            })
            .collect::<Vec<_>>();
        let up8 = Conv::init(&mut rng, c1, c2, 1);
        let dec8 = (0..2)
            .map(|_| {
                let s = site(c1, &mut rng, &mut sites);
                AttnBlock::init(&mut rng, s, c1, cfg.txt_dim, cfg.time_dim)
            })
            .collect::<Vec<_>>();
        let up16 = Conv::init(&mut rng, c1, c1, 1);
        let res_out = ResBlock::init(&mut rng, c1, cfg.time_dim);
        let conv_out = Conv {
            w: uniform_var(&mut rng, &[cfg.latent_channels, c1, 3, 3], c1 * 9),
            b: Tensor::var(&[cfg.latent_channels], vec![T::zero(); cfg.latent_channels]),
            stride: 1,
        };

        Ok(ToyDenoiser {
            text_table: uniform_var(&mut rng, &[cfg.vocab_size, cfg.txt_dim], cfg.txt_dim),
            time_w1: uniform_var(&mut rng, &[cfg.time_dim, cfg.time_dim], cfg.time_dim),
            conv_in,
            res_in,
            down8,
            enc8,
            down4,
            mid4,
            up8,
            dec8,
            up16,
            res_out,
            conv_out,
            sites,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.cfg
    }

    /// Embed a caption through the learned token table.
    pub fn encode_caption(&self, caption: &Caption) -> Result<TextCondition<T>> {
        let emb = self.text_table.gather_rows(&caption.tokens)?;
        Ok(TextCondition::from_embedding(emb))
    }

    fn time_embedding(&self, t: usize) -> Result<Tensor<T>> {
        let dim = self.cfg.time_dim;
        let mut data = vec![T::zero(); dim];
        for i in 0..dim / 2 {
            let freq = (10_000f64).powf(-2.0 * (i as f64) / (dim as f64));
            let angle = (t as f64) * freq;
            data[2 * i] = T::from_f64_lossy(angle.sin());
            data[2 * i + 1] = T::from_f64_lossy(angle.cos());
        }
        let emb = Tensor::constant(&[1, dim], data);
        Ok(emb.matmul(&self.time_w1)?.silu())
    }

    /// Backbone parameters plus the frozen site projections, stable order.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        out.push(("text_table".to_string(), self.text_table.clone()));
        out.push(("time_w1".to_string(), self.time_w1.clone()));
        out.push(("conv_in.w".to_string(), self.conv_in.w.clone()));
        out.push(("conv_in.b".to_string(), self.conv_in.b.clone()));
        self.res_in.params("res_in", &mut out);
        out.push(("down8.w".to_string(), self.down8.w.clone()));
        out.push(("down8.b".to_string(), self.down8.b.clone()));
        for (i, b) in self.enc8.iter().enumerate() {
            b.params(&format!("enc8.{i}"), &mut out);
        }
        out.push(("down4.w".to_string(), self.down4.w.clone()));
        out.push(("down4.b".to_string(), self.down4.b.clone()));
        for (i, b) in self.mid4.iter().enumerate() {
            b.params(&format!("mid4.{i}"), &mut out);
        }
        out.push(("up8.w".to_string(), self.up8.w.clone()));
        out.push(("up8.b".to_string(), self.up8.b.clone()));
        for (i, b) in self.dec8.iter().enumerate() {
            b.params(&format!("dec8.{i}"), &mut out);
        }
        out.push(("up16.w".to_string(), self.up16.w.clone()));
        out.push(("up16.b".to_string(), self.up16.b.clone()));
        self.res_out.params("res_out", &mut out);
        out.push(("conv_out.w".to_string(), self.conv_out.w.clone()));
        out.push(("conv_out.b".to_string(), self.conv_out.b.clone()));
        for (i, s) in self.sites.iter().enumerate() {
            out.push((format!("site.{i}.w_q"), s.w_q.clone()));
            out.push((format!("site.{i}.w_k"), s.w_k.clone()));
            out.push((format!("site.{i}.w_v"), s.w_v.clone()));
        }
        out
    }

    /// Training mode: everything except the clones is trainable.
    pub fn set_train_mode(&self) {
        for (_, p) in self.named_params() {
            p.set_trainable(true);
        }
        for s in &self.sites {
            s.set_mode_trainability(None);
        }
    }

    pub fn freeze_all(&self) {
        for (_, p) in self.named_params() {
            p.set_trainable(false);
        }
        for s in &self.sites {
            s.set_mode_trainability(None);
        }
    }

    pub fn reset_clones(&self) {
        for s in &self.sites {
            s.reset_clones();
        }
    }

    pub fn save(&self, path: &Path, schedule_fingerprint: &str) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "toy-denoiser",
            "version": 1,
            "config": self.cfg,
            "schedule": schedule_fingerprint,
        });
        let mut archive = Archive::new(meta.to_string());
        for (name, p) in self.named_params() {
            archive.push_tensor(name, &p);
        }
        archive.write(path)
    }

    /// Load weights; clones are re-initialized from the frozen projections.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let archive = Archive::read(path)?;
        let meta: serde_json::Value = serde_json::from_str(&archive.meta)
            .map_err(|e| Error::Archive(format!("bad checkpoint meta: {e}")))?;
        if meta["kind"] != "toy-denoiser" {
            return Err(Error::Archive(format!(
                "checkpoint kind {} is not a toy-denoiser",
                meta["kind"]
            )));
        }
        let cfg: ToyDenoiserConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Archive(format!("bad checkpoint config: {e}")))?;
        let schedule = meta["schedule"].as_str().unwrap_or("").to_string();
        let model = ToyDenoiser::init(&cfg, 0)?;
        for (name, p) in model.named_params() {
            archive.load_into(&name, &p)?;
        }
        model.reset_clones();
        model.freeze_all();
        Ok((model, schedule))
    }
}

impl<T: Scalar> DenoiserBackend<T> for ToyDenoiser<T> {
    fn latent_shape(&self) -> [usize; 3] {
        [self.cfg.latent_channels, self.cfg.spatial, self.cfg.spatial]
    }

    fn sites(&self) -> &[SelfAttentionSite<T>] {
        &self.sites
    }

    fn predict(
        &self,
        z: &Tensor<T>,
        t: usize,
        cond: &TextCondition<T>,
        ctrl: Option<&dyn AttnControl<T>>,
    ) -> Result<Tensor<T>> {
        if z.shape() != self.latent_shape() {
            return Err(Error::shape(&self.latent_shape(), z.shape(), "predict input"));
        }
        match cond.embedding.shape() {
            [_, d] if *d == self.cfg.txt_dim => {}
            s => return Err(Error::shape(&[0, self.cfg.txt_dim], s, "condition embedding")),
        }
        if let Some(ctrl) = ctrl {
            validate_control(ctrl, self.sites.len())?;
        }
        instrument::count_raw_forward();
        let temb = self.time_embedding(t)?;
        let heads = self.cfg.heads;

        let mut h = self.conv_in.apply(z)?;
        h = self.res_in.forward(&h, &temb)?;
        h = self.down8.apply(&h)?;
        for blk in &self.enc8 {
            h = blk.forward(&h, &self.sites[blk.site_index], &temb, cond, heads, ctrl)?;
        }
        h = self.down4.apply(&h)?;
        for blk in &self.mid4 {
            h = blk.forward(&h, &self.sites[blk.site_index], &temb, cond, heads, ctrl)?;
        }
        h = self.up8.apply(&h.upsample_nearest2x()?)?;
        for blk in &self.dec8 {
            h = blk.forward(&h, &self.sites[blk.site_index], &temb, cond, heads, ctrl)?;
        }
        h = self.up16.apply(&h.upsample_nearest2x()?)?;
        h = self.res_out.forward(&h, &temb)?;
        self.conv_out.apply(&h)
    }

    fn null_condition(&self) -> TextCondition<T> {
        TextCondition::null(self.cfg.txt_dim)
    }

    fn trainable_params(&self) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = self
            .named_params()
            .into_iter()
            .map(|(_, p)| p)
            .filter(|p| p.is_trainable())
            .collect();
        for s in &self.sites {
            for p in s.clone_params() {
                if p.is_trainable() {
                    out.push(p.clone());
                }
            }
        }
        out
    }

    fn set_edit_mode(&self, mode: ShareMode) {
        self.freeze_all();
        self.reset_clones();
        for s in &self.sites {
            s.set_mode_trainability(Some(mode));
        }
    }

    fn frozen_fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (_, p) in self.named_params() {
            for v in p.data().iter() {
                h.write_u64(v.to_f64_lossy().to_bits());
            }
        }
        for s in &self.sites {
            s.hash_frozen(&mut h);
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::no_grad;

    fn tiny_config() -> ToyDenoiserConfig {
        ToyDenoiserConfig {
            latent_channels: 4,
            spatial: 8,
            base_channels: 8,
            mid_channels: 16,
            txt_dim: 8,
            time_dim: 8,
            heads: 2,
            vocab_size: crate::toydata::VOCAB_SIZE,
        }
    }

    fn random_latent(model: &ToyDenoiser<f64>, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = model.latent_shape();
        let n: usize = shape.iter().product();
        Tensor::constant(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    struct IdentityHooks;
    impl AttnControl<f64> for IdentityHooks {
        fn referenced_sites(&self) -> Vec<usize> {
            (0..8).collect()
        }
        fn action(&self, _site: usize) -> SiteAction<'_, f64> {
            SiteAction::Frozen
        }
    }

    struct BadHooks;
    impl AttnControl<f64> for BadHooks {
        fn referenced_sites(&self) -> Vec<usize> {
            vec![12]
        }
        fn action(&self, _site: usize) -> SiteAction<'_, f64> {
            SiteAction::Frozen
        }
    }

    #[test]
    fn deterministic_and_identity_hooks_are_bitwise_equal() {
        let model = ToyDenoiser::<f64>::init(&tiny_config(), 7).unwrap();
        let z = random_latent(&model, 1);
        let cond = model
            .encode_caption(&crate::toydata::all_scenes()[3].caption())
            .unwrap();
        let a = no_grad(|| model.predict(&z, 100, &cond, None)).unwrap();
        let b = no_grad(|| model.predict(&z, 100, &cond, None)).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        let hooked = no_grad(|| model.predict(&z, 100, &cond, Some(&IdentityHooks))).unwrap();
        assert_eq!(a.to_vec(), hooked.to_vec());
        assert_eq!(a.shape(), z.shape());
    }

    #[test]
    fn unknown_site_hook_is_config_error() {
        let model = ToyDenoiser::<f64>::init(&tiny_config(), 7).unwrap();
        let z = random_latent(&model, 2);
        let cond = model.null_condition();
        assert!(matches!(
            model.predict(&z, 5, &cond, Some(&BadHooks)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn clones_equal_frozen_after_init_and_edit_mode() {
        let model = ToyDenoiser::<f64>::init(&tiny_config(), 3).unwrap();
        for s in model.sites() {
            assert!(s.clones_equal_frozen());
        }
        // Perturb a clone, then edit mode restores equality.
        model.sites()[0].w_q_t.update_data(|d| d[0] += 1.0);
        assert!(!model.sites()[0].clones_equal_frozen());
        model.set_edit_mode(ShareMode::QShare);
        for s in model.sites() {
            assert!(s.clones_equal_frozen());
        }
        // Q-share trainable set: clones' K/V at every site.
        let trainable = model.trainable_params();
        assert_eq!(trainable.len(), 2 * model.sites().len());
    }

    #[test]
    fn gradient_wrt_input_matches_finite_differences() {
        let model = ToyDenoiser::<f64>::init(&tiny_config(), 11).unwrap();
        model.freeze_all();
        let shape = model.latent_shape();
        let n: usize = shape.iter().product();
        let z = Tensor::var(&shape, (0..n).map(|i| (i as f64 * 0.37).sin() * 0.5).collect());
        let cond = model
            .encode_caption(&crate::toydata::all_scenes()[40].caption())
            .unwrap();
        let f = || {
            let w = Tensor::constant(&shape, (0..n).map(|i| ((i * 13 % 29) as f64) * 0.05).collect());
            model.predict(&z, 300, &cond, None).unwrap().mul(&w).unwrap().sum()
        };
        let grads = f().backward().unwrap();
        let g = grads.get_or_zeros(&z);
        for idx in [0usize, 57, 133, n - 1] {
            let orig = z.data()[idx];
            let h = 1e-5;
            z.update_data(|d| d[idx] = orig + h);
            let plus = no_grad(&f).item();
            z.update_data(|d| d[idx] = orig - h);
            let minus = no_grad(&f).item();
            z.update_data(|d| d[idx] = orig);
            let fd = (plus - minus) / (2.0 * h);
            let denom = fd.abs().max(g[idx].abs()).max(1e-5);
            assert!(
                ((fd - g[idx]) / denom).abs() < 1e-3,
                "idx {idx}: fd {fd} vs analytic {}",
                g[idx]
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.lar");
        let model = ToyDenoiser::<f64>::init(&tiny_config(), 21).unwrap();
        model.save(&path, "sched-fp").unwrap();
        let (loaded, fp) = ToyDenoiser::<f64>::load(&path).unwrap();
        assert_eq!(fp, "sched-fp");
        let z = random_latent(&model, 9);
        let cond = model.null_condition();
        let a = no_grad(|| model.predict(&z, 42, &cond, None)).unwrap();
        let b = no_grad(|| loaded.predict(&z, 42, &cond, None)).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        assert_eq!(model.frozen_fingerprint(), loaded.frozen_fingerprint());
    }
}
