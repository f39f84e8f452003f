//! Actor and reward networks over an [`Observation`].
//!
//! Both networks share the same trunk layout: a parcel path (embedding then
//! MLP) and a route path applied with one parameter set to every unmasked
//! candidate slot. The actor scores each slot from the concatenated parcel
//! and route representations; the reward network combines them with a
//! single-head attention layer `v = Σ (q·k_i) v_i` followed by a small MLP.

use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::env::{Observation, PARCEL_FEATURES, ROUTE_FEATURES};
use crate::model::Instance;
use crate::neural::{
    axpy, dot, load_checkpoint_into, masked_softmax, masked_softmax_backward, parts, read_checkpoint_config,
    save_checkpoint, Activation, DenseLayer, Embedding, Mlp, NeuralError, ParamSet, Tensor2,
};

type Result<T> = std::result::Result<T, NeuralError>;

/// Layer widths and vocabulary sizes; recorded in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub embed: usize,
    pub parcel_hidden: Vec<usize>,
    pub route_hidden: Vec<usize>,
    /// Hidden width of the shared per-slot scorer of the actor.
    pub head_hidden: usize,
    /// Width of q, k_i and v_i.
    pub attention: usize,
    /// Sigmoid layer of the reward output MLP.
    pub reward_hidden: usize,
    /// Softmax-normalize the attention weights q·k_i.
    #[serde(default)]
    pub normalized_attention: bool,
    pub n_locations: usize,
    pub n_providers: usize,
}

impl NetConfig {
    pub fn paper() -> Self {
        Self {
            embed: 64,
            parcel_hidden: vec![128],
            route_hidden: vec![256, 128],
            head_hidden: 64,
            attention: 64,
            reward_hidden: 64,
            normalized_attention: false,
            n_locations: 0,
            n_providers: 0,
        }
    }

    /// Narrower widths for single-core runs.
    pub fn desk() -> Self {
        Self {
            embed: 32,
            parcel_hidden: vec![64],
            route_hidden: vec![64, 64],
            head_hidden: 32,
            attention: 32,
            reward_hidden: 32,
            ..Self::paper()
        }
    }

    pub fn with_vocabulary(mut self, instance: &Instance) -> Self {
        self.n_locations = instance.location_names().len();
        self.n_providers = instance.provider_names().len();
        self
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let widths = [self.embed, self.head_hidden, self.attention, self.reward_hidden];
        if widths.contains(&0) || self.parcel_hidden.contains(&0) || self.route_hidden.contains(&0) {
            return Err("layer widths must be positive".into());
        }
        if self.parcel_hidden.is_empty() || self.route_hidden.is_empty() {
            return Err("parcel and route MLPs need at least one layer".into());
        }
        if self.n_locations == 0 || self.n_providers == 0 {
            return Err("vocabulary sizes must be positive".into());
        }
        Ok(())
    }

    fn parcel_dim(&self) -> usize {
        *self.parcel_hidden.last().expect("validated")
    }
    fn route_dim(&self) -> usize {
        *self.route_hidden.last().expect("validated")
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::paper()
    }
}

fn mismatch(expected: usize, found: usize) -> NeuralError {
    NeuralError::Dimension { expected, found }
}

fn check_observation(cfg: &NetConfig, obs: &Observation) -> Result<()> {
    let n = obs.routes.len();
    if obs.mask.len() != n {
        return Err(mismatch(n, obs.mask.len()));
    }
    if obs.providers.len() != n {
        return Err(mismatch(n, obs.providers.len()));
    }
    for id in [obs.origin, obs.destination] {
        if id == 0 || id > cfg.n_locations {
            return Err(mismatch(cfg.n_locations, id));
        }
    }
    for (&p, &m) in obs.providers.iter().zip(&obs.mask) {
        if p > cfg.n_providers || (m && p == 0) {
            return Err(mismatch(cfg.n_providers, p));
        }
    }
    if obs.parcel.iter().chain(obs.routes.iter().flatten()).any(|x| !x.is_finite()) {
        return Err(NeuralError::NonFinite("observation"));
    }
    Ok(())
}

/// Parcel and route feature paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Trunks {
    parcel_emb: Embedding,
    parcel_mlp: Mlp,
    route_emb: Embedding,
    route_mlp: Mlp,
}

impl Trunks {
    fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let parcel_emb = Embedding::new(PARCEL_FEATURES, &[cfg.n_locations, cfg.n_locations], cfg.embed, rng);
        let parcel_mlp = Mlp::new(cfg.embed, &cfg.parcel_hidden, Activation::Relu, rng);
        let route_emb = Embedding::new(ROUTE_FEATURES, &[cfg.n_providers], cfg.embed, rng);
        let route_mlp = Mlp::new(cfg.embed, &cfg.route_hidden, Activation::Relu, rng);
        Self { parcel_emb, parcel_mlp, route_emb, route_mlp }
    }

    /// Activations `[embedding, layer1, ..., representation]`.
    fn parcel(&self, obs: &Observation) -> Vec<Vec<f64>> {
        let e = self.parcel_emb.forward(&obs.parcel, &[obs.origin, obs.destination]);
        self.parcel_mlp.forward_cached(e)
    }

    fn route(&self, obs: &Observation, i: usize) -> Vec<Vec<f64>> {
        let e = self.route_emb.forward(&obs.routes[i], &[obs.providers[i]]);
        self.route_mlp.forward_cached(e)
    }

    fn parcel_backward(&self, obs: &Observation, acts: &[Vec<f64>], upstream: Vec<f64>, grads: &mut Trunks) {
        let de = self.parcel_mlp.backward(acts, upstream, &mut grads.parcel_mlp);
        self.parcel_emb.backward(&obs.parcel, &[obs.origin, obs.destination], &acts[0], &de, &mut grads.parcel_emb);
    }

    fn route_backward(&self, obs: &Observation, i: usize, acts: &[Vec<f64>], upstream: Vec<f64>, grads: &mut Trunks) -> [f64; ROUTE_FEATURES] {
        let de = self.route_mlp.backward(acts, upstream, &mut grads.route_mlp);
        let dx = self.route_emb.backward(&obs.routes[i], &[obs.providers[i]], &acts[0], &de, &mut grads.route_emb);
        let mut out = [0.0; ROUTE_FEATURES];
        out.copy_from_slice(&dx);
        out
    }

    fn tensors<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        parts::emb(&self.parcel_emb, out);
        parts::mlp(&self.parcel_mlp, out);
        parts::emb(&self.route_emb, out);
        parts::mlp(&self.route_mlp, out);
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        parts::emb_mut(&mut self.parcel_emb, out);
        parts::mlp_mut(&mut self.parcel_mlp, out);
        parts::emb_mut(&mut self.route_emb, out);
        parts::mlp_mut(&mut self.route_mlp, out);
    }

    fn layout(&self, out: &mut Vec<(String, usize, usize)>) {
        parts::emb_layout(&self.parcel_emb, "parcel_emb", out);
        parts::mlp_layout(&self.parcel_mlp, "parcel_mlp", out);
        parts::emb_layout(&self.route_emb, "route_emb", out);
        parts::mlp_layout(&self.route_mlp, "route_mlp", out);
    }
}

fn last(acts: &[Vec<f64>]) -> &[f64] {
    acts.last().expect("non-empty activations")
}

/// Policy network: per-slot logits, masked softmax over the slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorParams {
    config: NetConfig,
    trunks: Trunks,
    head: Mlp,
}

struct SlotCache {
    trunk: Vec<Vec<f64>>,
    head: Vec<Vec<f64>>,
}

/// Forward intermediates of the actor for one observation.
pub struct ActorCache {
    parcel: Vec<Vec<f64>>,
    slots: Vec<Option<SlotCache>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

const ACTOR_KIND: &str = "actor";
const REWARD_KIND: &str = "reward-net";

impl ActorParams {
    pub fn new(config: &NetConfig, rng: &mut impl Rng) -> Self {
        config.validate().expect("invalid network config");
        let trunks = Trunks::new(config, rng);
        let width = config.parcel_dim() + config.route_dim();
        let head = Mlp {
            layers: vec![
                DenseLayer::new(width, config.head_hidden, Activation::Relu, rng),
                DenseLayer::new(config.head_hidden, 1, Activation::Identity, rng),
            ],
        };
        Self { config: config.clone(), trunks, head }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn forward(&self, obs: &Observation) -> Result<ActorCache> {
        check_observation(&self.config, obs)?;
        let parcel = self.trunks.parcel(obs);
        let mut slots = Vec::with_capacity(obs.n_slots());
        let mut logits = vec![0.0; obs.n_slots()];
        for i in 0..obs.n_slots() {
            if !obs.mask[i] {
                slots.push(None);
                continue;
            }
            let trunk = self.trunks.route(obs, i);
            let mut x = last(&parcel).to_vec();
            x.extend_from_slice(last(&trunk));
            let head = self.head.forward_cached(x);
            logits[i] = last(&head)[0];
            slots.push(Some(SlotCache { trunk, head }));
        }
        let probs = masked_softmax(&logits, &obs.mask)?;
        Ok(ActorCache { parcel, slots, logits, probs })
    }

    pub fn probabilities(&self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(self.forward(obs)?.probs)
    }

    /// Accumulates parameter gradients for an upstream gradient on the
    /// logits; returns the gradient wrt each slot's route features.
    pub fn backward_logits(&self, obs: &Observation, cache: &ActorCache, d_logits: &[f64], grads: &mut Self) -> Vec<[f64; ROUTE_FEATURES]> {
        let p = self.config.parcel_dim();
        let mut d_parcel = vec![0.0; p];
        let mut d_routes = vec![[0.0; ROUTE_FEATURES]; obs.n_slots()];
        for (i, slot) in cache.slots.iter().enumerate() {
            let Some(slot) = slot else { continue };
            let dx = self.head.backward(&slot.head, vec![d_logits[i]], &mut grads.head);
            axpy(1.0, &dx[..p], &mut d_parcel);
            d_routes[i] = self.trunks.route_backward(obs, i, &slot.trunk, dx[p..].to_vec(), &mut grads.trunks);
        }
        self.trunks.parcel_backward(obs, &cache.parcel, d_parcel, &mut grads.trunks);
        d_routes
    }

    /// Gradient of `upstream · probabilities(obs)`.
    pub fn backward(&self, obs: &Observation, upstream: &[f64]) -> Result<(Self, Vec<[f64; ROUTE_FEATURES]>)> {
        let cache = self.forward(obs)?;
        if upstream.len() != obs.n_slots() {
            return Err(mismatch(obs.n_slots(), upstream.len()));
        }
        let d_logits = masked_softmax_backward(&cache.probs, upstream);
        let mut grads = self.zeros_like();
        let d_routes = self.backward_logits(obs, &cache, &d_logits, &mut grads);
        Ok((grads, d_routes))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, ACTOR_KIND, &self.config, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let config: NetConfig = read_checkpoint_config(path.as_ref(), ACTOR_KIND)?;
        config.validate().map_err(NeuralError::Checkpoint)?;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
        let mut params = Self::new(&config, &mut rng);
        load_checkpoint_into(path, ACTOR_KIND, &mut params)?;
        Ok(params)
    }
}

impl ParamSet for ActorParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        self.trunks.tensors(&mut out);
        parts::mlp(&self.head, &mut out);
        out
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.trunks.tensors_mut(&mut out);
        parts::mlp_mut(&mut self.head, &mut out);
        out
    }
    fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        self.trunks.layout(&mut out);
        parts::mlp_layout(&self.head, "head", &mut out);
        out
    }
}

pub fn actor_forward(params: &ActorParams, obs: &Observation) -> Result<Vec<f64>> {
    params.probabilities(obs)
}

pub fn actor_backward(params: &ActorParams, obs: &Observation, upstream: &[f64]) -> Result<ActorParams> {
    Ok(params.backward(obs, upstream)?.0)
}

/// Reward network `R_φ(s, o)`.
///
/// The output is `shift + scale · MLP(v)`; `shift` and `scale` are fixed
/// (not trained) and default to the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardNetParams {
    config: NetConfig,
    trunks: Trunks,
    wq: Tensor2,
    wk: Tensor2,
    wv: Tensor2,
    out: Mlp,
    pub output_shift: f64,
    pub output_scale: f64,
}

struct AttnSlot {
    trunk: Vec<Vec<f64>>,
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Forward intermediates of the reward network for one observation.
pub struct RewardCache {
    parcel: Vec<Vec<f64>>,
    q: Vec<f64>,
    slots: Vec<Option<AttnSlot>>,
    /// Attention weight per slot (0 for masked slots).
    pub weights: Vec<f64>,
    out: Vec<Vec<f64>>,
    pub value: f64,
}

impl RewardCache {
    /// The attention output `v`.
    pub fn attended(&self) -> &[f64] {
        &self.out[0]
    }
}

#[derive(Serialize, Deserialize)]
struct RewardMeta {
    net: NetConfig,
    output_shift: f64,
    output_scale: f64,
}

/// `v = Σ_i w_i v_i` with `w_i = q·k_i`, or the softmax of those when
/// `normalized`. Masked slots are skipped.
pub fn attention(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], mask: &[bool], normalized: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let scores: Vec<f64> = keys.iter().zip(mask).map(|(k, &m)| if m { dot(q, k) } else { 0.0 }).collect();
    let weights = if normalized { masked_softmax(&scores, mask)? } else { scores };
    let mut v = vec![0.0; q.len()];
    for ((vi, &w), &m) in values.iter().zip(&weights).zip(mask) {
        if m {
            axpy(w, vi, &mut v);
        }
    }
    Ok((v, weights))
}

impl RewardNetParams {
    pub fn new(config: &NetConfig, rng: &mut impl Rng) -> Self {
        config.validate().expect("invalid network config");
        let trunks = Trunks::new(config, rng);
        let a = config.attention;
        let wq = Tensor2::glorot(a, config.parcel_dim(), rng);
        let wk = Tensor2::glorot(a, config.route_dim(), rng);
        let wv = Tensor2::glorot(a, config.route_dim(), rng);
        let out = Mlp {
            layers: vec![
                DenseLayer::new(a, config.reward_hidden, Activation::Sigmoid, rng),
                DenseLayer::new(config.reward_hidden, 1, Activation::Identity, rng),
            ],
        };
        Self { config: config.clone(), trunks, wq, wk, wv, out, output_shift: 0.0, output_scale: 1.0 }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn forward(&self, obs: &Observation) -> Result<RewardCache> {
        check_observation(&self.config, obs)?;
        let parcel = self.trunks.parcel(obs);
        let q = self.wq.matvec(last(&parcel));
        let mut slots = Vec::with_capacity(obs.n_slots());
        for i in 0..obs.n_slots() {
            if !obs.mask[i] {
                slots.push(None);
                continue;
            }
            let trunk = self.trunks.route(obs, i);
            let k = self.wk.matvec(last(&trunk));
            let v = self.wv.matvec(last(&trunk));
            slots.push(Some(AttnSlot { trunk, k, v }));
        }
        let empty = Vec::new();
        let keys: Vec<Vec<f64>> = slots.iter().map(|s| s.as_ref().map_or_else(|| empty.clone(), |s| s.k.clone())).collect();
        let values: Vec<Vec<f64>> = slots.iter().map(|s| s.as_ref().map_or_else(|| empty.clone(), |s| s.v.clone())).collect();
        let (v, weights) = attention(&q, &keys, &values, &obs.mask, self.config.normalized_attention)?;
        let out = self.out.forward_cached(v);
        let value = self.output_shift + self.output_scale * last(&out)[0];
        Ok(RewardCache { parcel, q, slots, weights, out, value })
    }

    pub fn value(&self, obs: &Observation) -> Result<f64> {
        Ok(self.forward(obs)?.value)
    }

    /// Accumulates the gradient of `upstream · R_φ(obs)`; returns the
    /// gradient wrt each slot's route features.
    pub fn backward_value(&self, obs: &Observation, cache: &RewardCache, upstream: f64, grads: &mut Self) -> Vec<[f64; ROUTE_FEATURES]> {
        let dv = self.out.backward(&cache.out, vec![upstream * self.output_scale], &mut grads.out);
        let n = obs.n_slots();
        let mut d_scores = vec![0.0; n];
        for (i, slot) in cache.slots.iter().enumerate() {
            if let Some(s) = slot {
                d_scores[i] = dot(&dv, &s.v);
            }
        }
        if self.config.normalized_attention {
            d_scores = masked_softmax_backward(&cache.weights, &d_scores);
        }
        let mut dq = vec![0.0; cache.q.len()];
        let mut d_routes = vec![[0.0; ROUTE_FEATURES]; n];
        for (i, slot) in cache.slots.iter().enumerate() {
            let Some(s) = slot else { continue };
            let h = last(&s.trunk);
            axpy(d_scores[i], &s.k, &mut dq);
            // dk_i = d_score_i · q, dv_i = w_i · dv
            grads.wk.add_outer(d_scores[i], &cache.q, h);
            grads.wv.add_outer(cache.weights[i], &dv, h);
            let mut dh = self.wk.matvec_t(&cache.q);
            dh.iter_mut().for_each(|x| *x *= d_scores[i]);
            let dh_v = self.wv.matvec_t(&dv);
            axpy(cache.weights[i], &dh_v, &mut dh);
            d_routes[i] = self.trunks.route_backward(obs, i, &s.trunk, dh, &mut grads.trunks);
        }
        let z = last(&cache.parcel);
        grads.wq.add_outer(1.0, &dq, z);
        let dz = self.wq.matvec_t(&dq);
        self.trunks.parcel_backward(obs, &cache.parcel, dz, &mut grads.trunks);
        d_routes
    }

    pub fn backward(&self, obs: &Observation, upstream: f64) -> Result<(Self, Vec<[f64; ROUTE_FEATURES]>)> {
        let cache = self.forward(obs)?;
        let mut grads = self.zeros_like();
        let d_routes = self.backward_value(obs, &cache, upstream, &mut grads);
        Ok((grads, d_routes))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = RewardMeta { net: self.config.clone(), output_shift: self.output_shift, output_scale: self.output_scale };
        save_checkpoint(path, REWARD_KIND, &meta, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let meta: RewardMeta = read_checkpoint_config(path.as_ref(), REWARD_KIND)?;
        meta.net.validate().map_err(NeuralError::Checkpoint)?;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
        let mut params = Self::new(&meta.net, &mut rng);
        load_checkpoint_into(path, REWARD_KIND, &mut params)?;
        params.output_shift = meta.output_shift;
        params.output_scale = meta.output_scale;
        Ok(params)
    }
}

impl ParamSet for RewardNetParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        self.trunks.tensors(&mut out);
        out.extend([self.wq.data(), self.wk.data(), self.wv.data()]);
        parts::mlp(&self.out, &mut out);
        out
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.trunks.tensors_mut(&mut out);
        out.extend([self.wq.data_mut(), self.wk.data_mut(), self.wv.data_mut()]);
        parts::mlp_mut(&mut self.out, &mut out);
        out
    }
    fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        self.trunks.layout(&mut out);
        for (name, t) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            out.push((name.to_string(), t.rows(), t.cols()));
        }
        parts::mlp_layout(&self.out, "out", &mut out);
        out
    }
}

pub fn reward_forward(params: &RewardNetParams, obs: &Observation) -> Result<f64> {
    params.value(obs)
}

pub fn reward_backward(params: &RewardNetParams, obs: &Observation, upstream: f64) -> Result<RewardNetParams> {
    Ok(params.backward(obs, upstream)?.0)
}

/// Finite-difference helpers shared by the unit tests and the acceptance
/// suite.
pub mod gradcheck {
    use super::*;

    /// A compact configuration for gradient checks.
    pub fn tiny_config(n_locations: usize, n_providers: usize) -> NetConfig {
        NetConfig {
            embed: 4,
            parcel_hidden: vec![5],
            route_hidden: vec![6, 5],
            head_hidden: 4,
            attention: 3,
            reward_hidden: 4,
            normalized_attention: false,
            n_locations,
            n_providers,
        }
    }

    pub fn random_observation(cfg: &NetConfig, rng: &mut impl Rng) -> Observation {
        let n = rng.random_range(1..=5);
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.75)).collect();
        let first = rng.random_range(0..n);
        mask[first] = true;
        let routes = (0..n)
            .map(|i| {
                let mut row = [0.0; ROUTE_FEATURES];
                if mask[i] {
                    row.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.5));
                }
                row
            })
            .collect();
        let providers = mask.iter().map(|&m| if m { rng.random_range(1..=cfg.n_providers) } else { 0 }).collect();
        Observation {
            parcel: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            origin: rng.random_range(1..=cfg.n_locations),
            destination: rng.random_range(1..=cfg.n_locations),
            routes,
            providers,
            mask,
        }
    }

    /// Perturb every parameter away from its initial zero rows and biases.
    pub fn jitter(params: &mut impl ParamSet, rng: &mut impl Rng) {
        for t in params.tensors_mut() {
            t.iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
        }
    }

    /// Worst violation of `|fd - an| <= rel·max(|fd|, |an|) + abs` over all
    /// parameters, using central differences with step `h`. Returns
    /// `(max excess, number of scalars checked)`; a non-positive excess
    /// means every coordinate passed.
    pub fn check<P: ParamSet>(params: &P, analytic: &P, f: impl Fn(&P) -> f64, h: f64, rel: f64, abs: f64) -> (f64, usize) {
        let mut p = params.clone();
        let an: Vec<f64> = analytic.tensors().concat();
        let mut worst = f64::NEG_INFINITY;
        let mut k = 0;
        let n_tensors = p.tensors().len();
        for t in 0..n_tensors {
            let len = p.tensors()[t].len();
            for j in 0..len {
                let orig = p.tensors()[t][j];
                p.tensors_mut()[t][j] = orig + h;
                let fp = f(&p);
                p.tensors_mut()[t][j] = orig - h;
                let fm = f(&p);
                p.tensors_mut()[t][j] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let tol = rel * fd.abs().max(an[k].abs()) + abs;
                worst = worst.max((fd - an[k]).abs() - tol);
                k += 1;
            }
        }
        (worst, k)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (NetConfig, ChaCha8Rng) {
        (tiny_config(3, 2), ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn actor_gradients_match_finite_differences() {
        let (cfg, mut rng) = setup(1);
        for _ in 0..15 {
            let mut actor = ActorParams::new(&cfg, &mut rng);
            jitter(&mut actor, &mut rng);
            let obs = random_observation(&cfg, &mut rng);
            let u: Vec<f64> = (0..obs.n_slots()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grads = actor_backward(&actor, &obs, &u).unwrap();
            let f = |p: &ActorParams| dot(&actor_forward(p, &obs).unwrap(), &u);
            let (excess, n) = check(&actor, &grads, f, 1e-5, 1e-4, 1e-6);
            assert!(n > 100);
            assert!(excess <= 0.0, "excess {excess}");
        }
    }

    #[test]
    fn reward_gradients_match_finite_differences() {
        for normalized in [false, true] {
            let (mut cfg, mut rng) = setup(2);
            cfg.normalized_attention = normalized;
            for _ in 0..15 {
                let mut net = RewardNetParams::new(&cfg, &mut rng);
                jitter(&mut net, &mut rng);
                net.output_shift = -3.0;
                net.output_scale = 2.5;
                let obs = random_observation(&cfg, &mut rng);
                let grads = reward_backward(&net, &obs, 1.0).unwrap();
                let f = |p: &RewardNetParams| reward_forward(p, &obs).unwrap();
                let (excess, _) = check(&net, &grads, f, 1e-5, 1e-4, 1e-6);
                assert!(excess <= 0.0, "normalized={normalized} excess {excess}");
            }
        }
    }

    #[test]
    fn route_feature_gradients_match_and_vanish_when_masked() {
        let (cfg, mut rng) = setup(3);
        for _ in 0..20 {
            let mut actor = ActorParams::new(&cfg, &mut rng);
            let mut net = RewardNetParams::new(&cfg, &mut rng);
            jitter(&mut actor, &mut rng);
            jitter(&mut net, &mut rng);
            let obs = random_observation(&cfg, &mut rng);
            let u: Vec<f64> = (0..obs.n_slots()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, da) = actor.backward(&obs, &u).unwrap();
            let (_, dr) = net.backward(&obs, 1.0).unwrap();
            for i in 0..obs.n_slots() {
                for j in 0..ROUTE_FEATURES {
                    if !obs.mask[i] {
                        assert_eq!(da[i][j], 0.0);
                        assert_eq!(dr[i][j], 0.0);
                        continue;
                    }
                    let h = 1e-5;
                    let (mut op, mut om) = (obs.clone(), obs.clone());
                    op.routes[i][j] += h;
                    om.routes[i][j] -= h;
                    let fd = (dot(&actor_forward(&actor, &op).unwrap(), &u) - dot(&actor_forward(&actor, &om).unwrap(), &u)) / (2.0 * h);
                    assert!((fd - da[i][j]).abs() <= 1e-4 * fd.abs().max(da[i][j].abs()) + 1e-6);
                    let fd = (net.value(&op).unwrap() - net.value(&om).unwrap()) / (2.0 * h);
                    assert!((fd - dr[i][j]).abs() <= 1e-4 * fd.abs().max(dr[i][j].abs()) + 1e-6);
                }
            }
        }
    }

    #[test]
    fn upstream_scaling_is_linear() {
        let (cfg, mut rng) = setup(4);
        let actor = ActorParams::new(&cfg, &mut rng);
        let net = RewardNetParams::new(&cfg, &mut rng);
        let obs = random_observation(&cfg, &mut rng);
        let u: Vec<f64> = (0..obs.n_slots()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u2: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
        let g1 = actor_backward(&actor, &obs, &u).unwrap();
        let g2 = actor_backward(&actor, &obs, &u2).unwrap();
        for (a, b) in g1.tensors().concat().iter().zip(g2.tensors().concat()) {
            assert_eq!(2.0 * a, b);
        }
        let g1 = reward_backward(&net, &obs, 1.0).unwrap();
        let g2 = reward_backward(&net, &obs, 2.0).unwrap();
        for (a, b) in g1.tensors().concat().iter().zip(g2.tensors().concat()) {
            assert_eq!(2.0 * a, b);
        }
    }

    fn obs_with_rows(rows: Vec<[f64; ROUTE_FEATURES]>, providers: Vec<usize>, mask: Vec<bool>) -> Observation {
        Observation { parcel: [0.4, 0.5], origin: 1, destination: 2, routes: rows, providers, mask }
    }

    #[test]
    fn identical_rows_get_equal_probability_and_mask_is_respected() {
        let (cfg, mut rng) = setup(5);
        let actor = ActorParams::new(&cfg, &mut rng);
        let row = [0.2, 0.1, 0.5, 0.3, -0.1];
        let p = actor_forward(&actor, &obs_with_rows(vec![row, row], vec![1, 1], vec![true, true])).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let obs = obs_with_rows(vec![row, [0.0; 5], [0.0; 5], [0.0; 5]], vec![2, 0, 0, 0], vec![true, false, false, false]);
        assert_eq!(actor_forward(&actor, &obs).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        for _ in 0..50 {
            let obs = random_observation(&cfg, &mut rng);
            let p = actor_forward(&actor, &obs).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn actor_is_permutation_equivariant_and_reward_invariant() {
        let (cfg, mut rng) = setup(6);
        let actor = ActorParams::new(&cfg, &mut rng);
        let net = RewardNetParams::new(&cfg, &mut rng);
        for _ in 0..50 {
            let obs = random_observation(&cfg, &mut rng);
            let n = obs.n_slots();
            let perm = rand::seq::index::sample(&mut rng, n, n).into_vec();
            let mut permuted = obs.clone();
            for (dst, &src) in perm.iter().enumerate() {
                permuted.routes[dst] = obs.routes[src];
                permuted.providers[dst] = obs.providers[src];
                permuted.mask[dst] = obs.mask[src];
            }
            let p = actor_forward(&actor, &obs).unwrap();
            let pp = actor_forward(&actor, &permuted).unwrap();
            for (dst, &src) in perm.iter().enumerate() {
                assert!((pp[dst] - p[src]).abs() < 1e-12);
            }
            let (r, rp) = (net.value(&obs).unwrap(), net.value(&permuted).unwrap());
            assert!((r - rp).abs() < 1e-12 * r.abs().max(1.0));
        }
    }

    #[test]
    fn attention_hand_case() {
        let q = [1.0, 0.0];
        let keys = vec![vec![2.0, 0.0], vec![0.0, 1.0]];
        let values = vec![vec![1.0, 1.0], vec![3.0, 0.0]];
        let (v, w) = attention(&q, &keys, &values, &[true, true], false).unwrap();
        assert_eq!(v, vec![2.0, 2.0]);
        assert_eq!(w, vec![2.0, 0.0]);
    }

    #[test]
    fn masked_slots_never_change_the_reward() {
        let (cfg, mut rng) = setup(7);
        let net = RewardNetParams::new(&cfg, &mut rng);
        for _ in 0..30 {
            let obs = random_observation(&cfg, &mut rng);
            let mut extended = obs.clone();
            extended.routes.push([9.0, -4.0, 3.0, 1.0, 2.0]);
            extended.providers.push(1);
            extended.mask.push(false);
            assert_eq!(net.value(&obs).unwrap(), net.value(&extended).unwrap());
        }
    }

    #[test]
    fn zero_route_outputs_give_mlp_of_zero() {
        let (cfg, mut rng) = setup(8);
        let mut net = RewardNetParams::new(&cfg, &mut rng);
        // zero the route path so every h_i is zero
        for layer in &mut net.trunks.route_mlp.layers {
            layer.weight.data_mut().fill(0.0);
            layer.bias.fill(0.0);
        }
        let obs = random_observation(&cfg, &mut rng);
        let cache = net.forward(&obs).unwrap();
        assert!(cache.attended().iter().all(|&x| x == 0.0));
        let direct = net.out.forward_cached(vec![0.0; cfg.attention]);
        assert_eq!(cache.value, last(&direct)[0]);
    }

    #[test]
    fn dimension_errors() {
        let (cfg, mut rng) = setup(9);
        let actor = ActorParams::new(&cfg, &mut rng);
        let mut obs = random_observation(&cfg, &mut rng);
        obs.mask.push(true);
        assert!(matches!(actor_forward(&actor, &obs), Err(NeuralError::Dimension { .. })));
        let mut obs = random_observation(&cfg, &mut rng);
        obs.origin = 4;
        assert!(matches!(actor_forward(&actor, &obs), Err(NeuralError::Dimension { .. })));
    }

    #[test]
    fn checkpoints_round_trip() {
        let (cfg, mut rng) = setup(10);
        let actor = ActorParams::new(&cfg, &mut rng);
        let mut net = RewardNetParams::new(&cfg, &mut rng);
        net.output_shift = -100.0;
        net.output_scale = 7.0;
        let dir = tempfile::tempdir().unwrap();
        actor.save(dir.path().join("a.json")).unwrap();
        net.save(dir.path().join("r.json")).unwrap();
        assert_eq!(ActorParams::load(dir.path().join("a.json")).unwrap(), actor);
        assert_eq!(RewardNetParams::load(dir.path().join("r.json")).unwrap(), net);
        assert!(ActorParams::load(dir.path().join("r.json")).is_err());
    }
}
