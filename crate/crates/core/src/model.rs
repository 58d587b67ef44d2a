//! Shared visual encoder, auxiliary decoders and the recurrent policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ACTION_SLOTS, GOAL_DIM};
use crate::error::{Error, Result};
use crate::math::nn::{Conv, GroupNorm, GruCell, Linear};
use crate::math::{Graph, GroupId, MathError, ParamStore, Real, Tensor, Var};

pub const GROUPS: [&str; 7] = ["encoder", "dec_depth", "dec_normals", "dec_rgb", "dec_egomotion", "dec_nextfeat", "policy"];
pub const AUX_GROUPS: [&str; 5] = ["dec_depth", "dec_normals", "dec_rgb", "dec_egomotion", "dec_nextfeat"];
pub const N_ACTIONS: usize = 3;
/// Depth targets are clamped here (meters) and divided by it.
pub const DEPTH_CLAMP: f64 = 10.0;
/// Goal distance is divided by this before entering the policy.
pub const GOAL_DIST_SCALE: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub normals: f64,
    pub egomotion: f64,
    pub nextfeat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rgb: 1.0, depth: 1.0, normals: 1.0, egomotion: 1.0, nextfeat: 1.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { rgb: 0.0, depth: 0.0, normals: 0.0, egomotion: 0.0, nextfeat: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of each encoder block.
    pub channels: Vec<usize>,
    pub feature_dim: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub gn_groups: usize,
    pub weights: LossWeights,
    /// No encoder; the policy sees a zero feature vector.
    pub blind: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: vec![16, 32, 32, 32],
            feature_dim: 256,
            hidden: 256,
            mlp_hidden: 256,
            gn_groups: 4,
            weights: LossWeights::default(),
            blind: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let scale = 1usize << self.channels.len();
        let positive = self.height > 0
            && self.width > 0
            && self.feature_dim > 0
            && self.hidden > 0
            && self.mlp_hidden > 0
            && self.gn_groups > 0
            && self.channels.iter().all(|&c| c > 0);
        if !positive || (!self.blind && (self.channels.is_empty() || !self.height.is_multiple_of(scale) || !self.width.is_multiple_of(scale))) {
            return Err(Error::Invalid(format!("model config: resolution {}x{} / channels {:?}", self.height, self.width, self.channels)));
        }
        let w = &self.weights;
        if [w.rgb, w.depth, w.normals, w.egomotion, w.nextfeat].iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Invalid("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    fn spatial(&self) -> (usize, usize) {
        let s = 1usize << self.channels.len();
        (self.height / s, self.width / s)
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv,
    norm: GroupNorm,
}

impl ConvBlock {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        group: GroupId,
        name: &str,
        c_in: usize,
        c_out: usize,
        gn: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv::new(store, group, &format!("{name}.conv"), c_in, c_out, 3, rng),
            norm: GroupNorm::new(store, group, &format!("{name}.gn"), c_out, gn),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, MathError> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.norm.forward(g, store, y)?;
        g.elu(y)
    }
}

/// Decoder from `φ` to full resolution: a linear map back to the encoder's
/// spatial shape, then upsampling blocks.
#[derive(Clone, Debug)]
struct PixelDecoder {
    fc: Linear,
    shape: [usize; 3],
    blocks: Vec<ConvBlock>,
    out: Conv,
}

impl PixelDecoder {
    fn new<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<T>, group: GroupId, out_ch: usize, rng: &mut R) -> Self {
        let c = &cfg.channels;
        let mut c_in = *c.last().expect("non-empty channels");
        let (sh, sw) = cfg.spatial();
        let fc = Linear::new(store, group, "fc", cfg.feature_dim, c_in * sh * sw, rng);
        let mut blocks = Vec::with_capacity(c.len());
        for k in 0..c.len() {
            let c_out = c[c.len().saturating_sub(k + 2)];
            blocks.push(ConvBlock::new(store, group, &format!("up{k}"), c_in, c_out, cfg.gn_groups, rng));
            c_in = c_out;
        }
        let out = Conv::new(store, group, "out", c_in, out_ch, 3, rng);
        Self { fc, shape: [*c.last().expect("non-empty channels"), sh, sw], blocks, out }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, phi: Var) -> Result<Var, MathError> {
        let n = g.shape(phi)[0];
        let y = self.fc.forward(g, store, phi)?;
        let y = g.elu(y)?;
        let [c, h, w] = self.shape;
        let mut y = g.reshape(y, &[n, c, h, w])?;
        for b in &self.blocks {
            y = g.upsample2(y)?;
            y = b.forward(g, store, y)?;
        }
        self.out.forward(g, store, y)
    }
}

/// Two-layer perceptron with an ELU between.
#[derive(Clone, Debug)]
struct Mlp {
    a: Linear,
    b: Linear,
}

impl Mlp {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, group: GroupId, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            a: Linear::new(store, group, "fc1", d_in, d_hidden, rng),
            b: Linear::new(store, group, "fc2", d_hidden, d_out, rng),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, MathError> {
        let y = self.a.forward(g, store, x)?;
        let y = g.elu(y)?;
        self.b.forward(g, store, y)
    }
}

/// Encoder output for a batch: `feature[N, F]` and, unless blind, the last
/// block's map `spatial[N, C, h, w]` before flattening.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub feature: Var,
    pub spatial: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct PolicyOut {
    pub logits: Var,
    /// `[N, 1]`.
    pub value: Var,
    pub hidden: Var,
}

/// Whether policy gradients may reach the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureRoute {
    Stop,
    Through,
}

/// Auxiliary supervision for a batch of frame pairs `(t - 1, t)`.
pub struct AuxBatch<T> {
    /// `[N, 3, H, W]` rgb in `[0, 1]`.
    pub rgb_prev: Tensor<T>,
    pub rgb: Tensor<T>,
    /// `[N, 1, H, W]` depth already clamped and scaled to `[0, 1]`.
    pub depth: Tensor<T>,
    /// `[N, 3, H, W]` unit normals.
    pub normals: Tensor<T>,
    /// Action taken between the two frames.
    pub actions: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct AuxLosses {
    pub depth: Var,
    pub normals: Var,
    pub rgb: Var,
    pub egomotion: Var,
    pub nextfeat: Var,
    pub joint: Var,
}

#[derive(Clone, Debug)]
pub struct SplitNet {
    pub cfg: ModelConfig,
    encoder: Vec<ConvBlock>,
    enc_fc: Option<Linear>,
    dec_depth: Option<PixelDecoder>,
    dec_normals: Option<PixelDecoder>,
    dec_rgb: Option<PixelDecoder>,
    egomotion: Mlp,
    nextfeat: Mlp,
    gru: GruCell,
    actor: Linear,
    critic: Linear,
}

impl SplitNet {
    /// Registers all parameter groups in a fixed order and initializes them.
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ids: Vec<GroupId> = GROUPS.iter().map(|n| store.add_group(n)).collect();
        let (enc, g_depth, g_normals, g_rgb, g_ego, g_next, g_policy) = (ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6]);
        let f = cfg.feature_dim;
        let (encoder, enc_fc, dec_depth, dec_normals, dec_rgb) = if cfg.blind {
            (Vec::new(), None, None, None, None)
        } else {
            let mut blocks = Vec::new();
            let mut c_in = 3;
            for (k, &c) in cfg.channels.iter().enumerate() {
                blocks.push(ConvBlock::new(store, enc, &format!("enc{k}"), c_in, c, cfg.gn_groups, rng));
                c_in = c;
            }
            let (sh, sw) = cfg.spatial();
            let fc = Linear::new(store, enc, "enc_fc", c_in * sh * sw, f, rng);
            (
                blocks,
                Some(fc),
                Some(PixelDecoder::new(cfg, store, g_depth, 1, rng)),
                Some(PixelDecoder::new(cfg, store, g_normals, 3, rng)),
                Some(PixelDecoder::new(cfg, store, g_rgb, 3, rng)),
            )
        };
        let egomotion = Mlp::new(store, g_ego, 2 * f, cfg.mlp_hidden, N_ACTIONS, rng);
        let nextfeat = Mlp::new(store, g_next, f + N_ACTIONS, cfg.mlp_hidden, f, rng);
        let gru = GruCell::new(store, g_policy, "gru", f + GOAL_DIM + ACTION_SLOTS, cfg.hidden, rng);
        let actor = Linear::with_gain(store, g_policy, "actor", cfg.hidden, N_ACTIONS, 0.1, rng);
        let critic = Linear::new(store, g_policy, "critic", cfg.hidden, 1, rng);
        Ok(Self { cfg: cfg.clone(), encoder, enc_fc, dec_depth, dec_normals, dec_rgb, egomotion, nextfeat, gru, actor, critic })
    }

    /// Fresh store plus model.
    pub fn init<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let net = Self::new(cfg, &mut store, rng)?;
        Ok((net, store))
    }

    /// Rebuilds layer handles for an existing store with the same layout,
    /// e.g. one loaded from a checkpoint.
    pub fn attach<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        let mut scratch = ParamStore::<T>::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let net = Self::new(cfg, &mut scratch, &mut rng)?;
        let layout_matches = scratch.len() == store.len()
            && scratch.group_names() == store.group_names()
            && scratch.params().iter().zip(store.params()).all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !layout_matches {
            return Err(Error::Invalid("parameter layout does not match the model config".into()));
        }
        Ok(net)
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    /// Encodes `images[N, 3, H, W]` (values in `[0, 1]`).
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Result<Encoded> {
        let shape = g.shape(images).to_vec();
        let n = shape.first().copied().unwrap_or(0);
        let Some(fc) = &self.enc_fc else {
            let feature = g.constant(Tensor::zeros(&[n, self.cfg.feature_dim]))?;
            return Ok(Encoded { feature, spatial: None });
        };
        if shape.len() != 4 || shape[1..] != [3, self.cfg.height, self.cfg.width] {
            return Err(MathError::Shape { op: "encode", shapes: vec![shape, vec![n, 3, self.cfg.height, self.cfg.width]] }.into());
        }
        let mut y = g.add_scalar(images, -0.5)?;
        for b in &self.encoder {
            y = b.forward(g, store, y)?;
            y = g.max_pool2(y)?;
        }
        let spatial = y;
        let flat: usize = g.shape(y)[1..].iter().product();
        let y = g.reshape(y, &[n, flat])?;
        let feature = fc.forward(g, store, y)?;
        Ok(Encoded { feature, spatial: Some(spatial) })
    }

    /// Zero features for `n` frames, as a blind agent sees them.
    pub fn blind_feature<T: Real>(&self, g: &mut Graph<T>, n: usize) -> Result<Var> {
        Ok(g.constant(Tensor::zeros(&[n, self.cfg.feature_dim]))?)
    }

    fn decoder<'a>(&self, d: &'a Option<PixelDecoder>) -> Result<&'a PixelDecoder> {
        d.as_ref().ok_or_else(|| Error::Invalid("blind model has no pixel decoders".into()))
    }

    /// `[N, 1, H, W]` depth in units of `DEPTH_CLAMP`, decoded from `phi[N, F]`.
    pub fn decode_depth<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, phi: Var) -> Result<Var> {
        Ok(self.decoder(&self.dec_depth)?.forward(g, store, phi)?)
    }

    /// `[N, 3, H, W]` unit normals.
    pub fn decode_normals<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, phi: Var) -> Result<Var> {
        let raw = self.decoder(&self.dec_normals)?.forward(g, store, phi)?;
        Ok(g.normalize_channels(raw)?)
    }

    /// `[N, 3, H, W]` reconstructed rgb.
    pub fn decode_rgb<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, phi: Var) -> Result<Var> {
        Ok(self.decoder(&self.dec_rgb)?.forward(g, store, phi)?)
    }

    /// `[N, 3]` logits of the action between `phi_prev` and `phi`.
    pub fn egomotion_logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, phi: Var, phi_prev: Var) -> Result<Var> {
        let x = g.concat_cols(&[phi, phi_prev])?;
        Ok(self.egomotion.forward(g, store, x)?)
    }

    /// Predicted next feature from `phi_prev` and the action taken.
    pub fn predict_next<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, phi_prev: Var, actions: &[usize]) -> Result<Var> {
        let n = actions.len();
        let mut onehot = Tensor::zeros(&[n, N_ACTIONS]);
        for (r, &a) in actions.iter().enumerate() {
            if a >= N_ACTIONS {
                return Err(Error::Invalid(format!("action index {a}")));
            }
            onehot.data_mut()[r * N_ACTIONS + a] = T::one();
        }
        let a = g.constant(onehot)?;
        let x = g.concat_cols(&[phi_prev, a])?;
        Ok(self.nextfeat.forward(g, store, x)?)
    }

    /// Policy input row block: `[feature | goal | prev action one-hot]`.
    pub fn policy_inputs<T: Real>(goals: &[[f32; GOAL_DIM]], prev: &[[f32; ACTION_SLOTS]]) -> Result<(Tensor<T>, Tensor<T>)> {
        let goal: Vec<T> = goals
            .iter()
            .flat_map(|v| [T::lit(v[0] as f64 / GOAL_DIST_SCALE), T::lit(v[1] as f64), T::lit(v[2] as f64)])
            .collect();
        let act: Vec<T> = prev.iter().flat_map(|v| v.map(|x| T::lit(x as f64))).collect();
        Ok((Tensor::new(vec![goals.len(), GOAL_DIM], goal)?, Tensor::new(vec![prev.len(), ACTION_SLOTS], act)?))
    }

    /// One recurrent step for a batch.
    #[allow(clippy::too_many_arguments)]
    pub fn policy_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feature: Var,
        goal: Var,
        prev_action: Var,
        hidden: Var,
        route: FeatureRoute,
    ) -> Result<PolicyOut> {
        let n = g.shape(feature)[0];
        if g.shape(hidden) != [n, self.cfg.hidden] {
            return Err(MathError::Shape { op: "policy_step", shapes: vec![g.shape(hidden).to_vec(), vec![n, self.cfg.hidden]] }.into());
        }
        let feature = match route {
            FeatureRoute::Stop => g.stop_gradient(feature)?,
            FeatureRoute::Through => feature,
        };
        let x = g.concat_cols(&[feature, goal, prev_action])?;
        let h = self.gru.forward(g, store, x, hidden)?;
        let logits = self.actor.forward(g, store, h)?;
        let value = self.critic.forward(g, store, h)?;
        Ok(PolicyOut { logits, value, hidden: h })
    }

    /// Redraws actor and critic heads; the GRU is kept.
    pub fn reinit_heads<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.actor.reinit(store, 0.1, rng)?;
        self.critic.reinit(store, 1.0, rng)?;
        Ok(())
    }

    /// Auxiliary losses on a batch of frame pairs. Both frames go through a
    /// single encode call; all heads read the same features.
    pub fn aux_losses<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &AuxBatch<T>) -> Result<AuxLosses> {
        let n = batch.actions.len();
        let both = Tensor::concat_leading(&[batch.rgb_prev.clone(), batch.rgb.clone()])?;
        let images = g.constant(both)?;
        if self.cfg.blind {
            return Err(Error::Invalid("blind model has no auxiliary losses".into()));
        }
        let enc = self.encode(g, store, images)?;
        let phi_prev = g.slice_rows(enc.feature, 0, n)?;
        let phi = g.slice_rows(enc.feature, n, n)?;
        self.aux_losses_from(g, store, phi, phi_prev, batch)
    }

    /// Loss terms from already encoded features.
    pub fn aux_losses_from<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        phi: Var,
        phi_prev: Var,
        batch: &AuxBatch<T>,
    ) -> Result<AuxLosses> {
        let w = &self.cfg.weights;
        let depth = {
            let pred = self.decode_depth(g, store, phi)?;
            let t = g.constant(batch.depth.clone())?;
            l1_loss(g, pred, t)?
        };
        let normals = {
            let pred = self.decode_normals(g, store, phi)?;
            let t = g.constant(batch.normals.clone())?;
            let t = g.normalize_channels(t)?;
            cosine_loss(g, pred, t, 3)?
        };
        let rgb = {
            let pred = self.decode_rgb(g, store, phi)?;
            let t = g.constant(batch.rgb.clone())?;
            l1_loss(g, pred, t)?
        };
        let egomotion = {
            let logits = self.egomotion_logits(g, store, phi, phi_prev)?;
            cross_entropy(g, logits, &batch.actions)?
        };
        let nextfeat = {
            let pred = self.predict_next(g, store, phi_prev, &batch.actions)?;
            let p = g.normalize_channels(pred)?;
            let q = g.normalize_channels(phi)?;
            cosine_loss(g, p, q, self.cfg.feature_dim)?
        };
        let mut joint = g.scale(depth, w.depth)?;
        for (term, lambda) in [(normals, w.normals), (rgb, w.rgb), (egomotion, w.egomotion), (nextfeat, w.nextfeat)] {
            let t = g.scale(term, lambda)?;
            joint = g.add(joint, t)?;
        }
        Ok(AuxLosses { depth, normals, rgb, egomotion, nextfeat, joint })
    }
}

/// Mean absolute difference.
pub fn l1_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var, MathError> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// `1 - mean cos` for unit vectors along axis 1 of width `c`.
pub fn cosine_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var, c: usize) -> Result<Var, MathError> {
    let p = g.mul(a, b)?;
    let m = g.mean(p)?;
    let m = g.scale(m, -(c as f64))?;
    g.add_scalar(m, 1.0)
}

/// Mean negative log-likelihood of `targets` under `logits[N, K]`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var, MathError> {
    let lp = g.log_softmax(logits)?;
    let picked = g.pick_cols(lp, targets)?;
    let m = g.mean(picked)?;
    g.scale(m, -1.0)
}

/// Builds `[N, 3, H, W]` rgb, `[N, 1, H, W]` scaled depth and `[N, 3, H, W]`
/// normals tensors from frames.
pub fn frame_tensors<T: Real>(frames: &[&crate::render::ObsFrame]) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let first = frames.first().ok_or_else(|| Error::Invalid("no frames".into()))?;
    let (h, w) = (first.height, first.width);
    let mut rgb = Vec::with_capacity(frames.len() * 3 * h * w);
    let mut depth = Vec::with_capacity(frames.len() * h * w);
    let mut normals = Vec::with_capacity(frames.len() * 3 * h * w);
    for f in frames {
        rgb.extend(f.rgb_chw().into_iter().map(|v| T::lit(v as f64)));
        depth.extend(f.depth.iter().map(|&d| T::lit((d as f64).min(DEPTH_CLAMP) / DEPTH_CLAMP)));
        normals.extend(f.normals_chw().into_iter().map(|v| T::lit(v as f64)));
    }
    let n = frames.len();
    Ok((
        Tensor::new(vec![n, 3, h, w], rgb)?,
        Tensor::new(vec![n, 1, h, w], depth)?,
        Tensor::new(vec![n, 3, h, w], normals)?,
    ))
}

/// Stacks planar rgb observations into `[N, 3, H, W]`.
pub fn image_batch<T: Real>(images: &[&[f32]], height: usize, width: usize) -> Result<Tensor<T>> {
    let data: Vec<T> = images.iter().flat_map(|im| im.iter().map(|&v| T::lit(v as f64))).collect();
    Ok(Tensor::new(vec![images.len(), 3, height, width], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            height: 16,
            width: 16,
            channels: vec![4, 4, 4, 4],
            feature_dim: 8,
            hidden: 8,
            mlp_hidden: 8,
            gn_groups: 2,
            weights: LossWeights::default(),
            blind: false,
        }
    }

    #[test]
    fn groups_partition_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, store) = SplitNet::init::<f32, _>(&tiny(), &mut rng).unwrap();
        assert_eq!(store.group_names(), GROUPS.to_vec());
        let total: usize = GROUPS.iter().map(|gname| store.group_params(gname).len()).sum();
        assert_eq!(total, store.len());
        let blind = ModelConfig { blind: true, ..tiny() };
        let (_, bstore) = SplitNet::init::<f32, _>(&blind, &mut rng).unwrap();
        assert!(bstore.group_params("encoder").is_empty());
    }

    #[test]
    fn decoder_shapes_match_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (net, store) = SplitNet::init::<f32, _>(&tiny(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 16, 16], 0.3)).unwrap();
        let enc = net.encode(&mut g, &store, x).unwrap();
        let s = enc.feature;
        let d = net.decode_depth(&mut g, &store, s).unwrap();
        let nrm = net.decode_normals(&mut g, &store, s).unwrap();
        let r = net.decode_rgb(&mut g, &store, s).unwrap();
        assert_eq!(g.shape(enc.feature), [2, 8]);
        assert_eq!(g.shape(d), [2, 1, 16, 16]);
        assert_eq!(g.shape(nrm), [2, 3, 16, 16]);
        assert_eq!(g.shape(r), [2, 3, 16, 16]);
        let nv = g.value(nrm).data();
        for p in 0..2 * 256 {
            let (b, q) = (p / 256, p % 256);
            let s: f32 = (0..3).map(|c| nv[(b * 3 + c) * 256 + q].powi(2)).sum();
            assert!((s.sqrt() - 1.0).abs() < 1e-5);
        }
        let bad = g.constant(Tensor::zeros(&[1, 3, 8, 8])).unwrap();
        assert!(net.encode(&mut g, &store, bad).is_err());
    }

    #[test]
    fn attach_rejects_other_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, store) = SplitNet::init::<f32, _>(&tiny(), &mut rng).unwrap();
        assert!(SplitNet::attach(&tiny(), &store).is_ok());
        let other = ModelConfig { feature_dim: 12, ..tiny() };
        assert!(SplitNet::attach(&other, &store).is_err());
    }
}
