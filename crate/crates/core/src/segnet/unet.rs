//! The U-Net: nine convolution blocks, four max-pools, four upsampling
//! blocks, four skip concatenations and a final 1x1 classifier.

use super::{BlockId, FreezePlan, LayerStats, NetworkSpec, PredictionMap};
use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, kaiming_conv, maxpool2, maxpool2_backward, softmax_backward,
    softmax_channels, split_channels, upsample2, upsample2_backward, Activation, Conv2d,
    ConvUnit, ConvUnitCache, Optimizer, Param, StatGrad, UnitMode,
};
use crate::rng::{stream, Purpose};
use ndarray::{Array1, Array4, Ix1, Ix4};
use sha2::{Digest, Sha256};

/// Number of batch-norm layers in any network built from a [`NetworkSpec`]:
/// two per convolution block plus one per upsampling block.
pub const BN_LAYER_IDS_PER_SPEC: usize = 9 * 2 + 4;

/// Two stacked conv units.
#[derive(Debug, Clone)]
struct ConvBlock {
    a: ConvUnit,
    b: ConvUnit,
}

struct ConvBlockCache {
    a: ConvUnitCache,
    b: ConvUnitCache,
}

impl ConvBlock {
    fn forward(&mut self, x: &Array4<f32>, mode: UnitMode) -> (Array4<f32>, ConvBlockCache) {
        let (h, ca) = self.a.forward(x, mode);
        let (y, cb) = self.b.forward(&h, mode);
        (y, ConvBlockCache { a: ca, b: cb })
    }

    fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        self.b.forward_eval(&self.a.forward_eval(x))
    }

    fn backward(
        &mut self,
        gy: &Array4<f32>,
        cache: &ConvBlockCache,
        inject: (Option<&StatGrad>, Option<&StatGrad>),
        want_param_grads: bool,
    ) -> Array4<f32> {
        let gh = self.b.backward(gy, &cache.b, inject.1, want_param_grads);
        self.a.backward(&gh, &cache.a, inject.0, want_param_grads)
    }
}

/// Gradient of a loss with respect to the measured batch statistics of
/// every batch-norm layer, in forward order. `None` entries inject nothing.
pub type FmsInjection = Vec<Option<StatGrad>>;

pub struct UNetCache {
    enc: Vec<ConvBlockCache>,
    pool_idx: Vec<Array4<u8>>,
    ups: Vec<ConvUnitCache>,
    dec: Vec<ConvBlockCache>,
    final_x: Option<Array4<f32>>,
    /// Softmax output of this forward.
    pub probs: Array4<f32>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub spec: NetworkSpec,
    enc: Vec<ConvBlock>,
    ups: Vec<ConvUnit>,
    dec: Vec<ConvBlock>,
    final_conv: Conv2d,
    plan: FreezePlan,
}

impl UNet {
    /// Build with deterministic Kaiming init drawn from `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<UNet> {
        spec.validate()?;
        let mut rng = stream(seed, Purpose::Init, 0);
        let w = &spec.block_filters;
        let mut unit = |oc: usize, ic: usize, k: usize| {
            ConvUnit::new(kaiming_conv(&mut rng, oc, ic, k), Activation::Relu)
        };

        let mut enc = Vec::with_capacity(5);
        for i in 0..5 {
            let ic = if i == 0 { spec.input_channels } else { w[i - 1] };
            enc.push(ConvBlock {
                a: unit(w[i], ic, 3),
                b: unit(w[i], w[i], 3),
            });
        }
        let mut ups = Vec::with_capacity(4);
        let mut dec = Vec::with_capacity(4);
        for j in 0..4 {
            ups.push(unit(w[5 + j], w[4 + j], 3));
            // Decoder block input: upsampled features concatenated with the
            // mirror-level skip.
            let cat = w[5 + j] + w[3 - j];
            dec.push(ConvBlock {
                a: unit(w[5 + j], cat, 3),
                b: unit(w[5 + j], w[5 + j], 3),
            });
        }
        let final_conv = kaiming_conv(&mut rng, spec.num_classes, w[8], 1);

        Ok(UNet {
            spec: spec.clone(),
            enc,
            ups,
            dec,
            final_conv,
            plan: FreezePlan::all_trainable(),
        })
    }

    pub fn plan(&self) -> &FreezePlan {
        &self.plan
    }

    /// Install a freeze plan; listed blocks stay updatable, everything else
    /// freezes (eval-mode batch norm, no gradient accumulation, no steps).
    pub fn apply_freeze(&mut self, plan: FreezePlan) {
        self.plan = plan;
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if n == 0 {
            return Err(Error::validation("empty batch"));
        }
        if c != self.spec.input_channels {
            return Err(Error::validation(format!(
                "expected {} input channels, got {c}",
                self.spec.input_channels
            )));
        }
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::validation(format!(
                "spatial dims must be positive multiples of 16 (4 pooling levels), got {h}x{w}"
            )));
        }
        Ok(())
    }

    fn unit_mode(&self, id: BlockId, update_running: bool, collect_stats: bool) -> UnitMode {
        let trainable = self.plan.is_trainable(id);
        UnitMode {
            bn_train_norm: trainable,
            bn_update_running: trainable && update_running,
            want_param_grads: trainable,
            collect_stats,
        }
    }

    /// Spec-level forward: softmax probabilities, batch-norm behavior
    /// controlled by `train_mode` (and the freeze plan when training).
    pub fn forward(&mut self, x: &Array4<f32>, train_mode: bool) -> Result<PredictionMap> {
        if train_mode {
            let (probs, _) = self.forward_train(x, false, false)?;
            Ok(PredictionMap { probs })
        } else {
            Ok(PredictionMap {
                probs: self.forward_eval(x)?,
            })
        }
    }

    /// Inference forward: running statistics everywhere, no caches.
    pub fn forward_eval(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(4);
        let mut h = x.clone();
        for i in 0..4 {
            let s = self.enc[i].forward_eval(&h);
            let (pooled, _) = maxpool2(&s);
            skips.push(s);
            h = pooled;
        }
        h = self.enc[4].forward_eval(&h);
        for j in 0..4 {
            let u = self.ups[j].forward_eval(&upsample2(&h));
            h = self.dec[j].forward_eval(&concat_channels(&u, &skips[3 - j]));
        }
        let logits = self.final_conv.forward(&h);
        Ok(softmax_channels(&logits))
    }

    /// Training forward honoring the freeze plan. Batch statistics are
    /// measured for every batch-norm layer when `collect_stats` is set, so
    /// the cache can feed the feature-statistics loss and its injection.
    pub fn forward_train(
        &mut self,
        x: &Array4<f32>,
        update_running: bool,
        collect_stats: bool,
    ) -> Result<(Array4<f32>, UNetCache)> {
        self.check_input(x)?;
        let mut enc_caches = Vec::with_capacity(5);
        let mut pool_idx = Vec::with_capacity(4);
        let mut skips = Vec::with_capacity(4);
        let mut h = x.clone();
        for i in 0..5 {
            let mode = self.unit_mode(BlockId::Conv(i as u8 + 1), update_running, collect_stats);
            let (s, cache) = self.enc[i].forward(&h, mode);
            enc_caches.push(cache);
            if i < 4 {
                let (pooled, idx) = maxpool2(&s);
                pool_idx.push(idx);
                skips.push(s);
                h = pooled;
            } else {
                h = s;
            }
        }
        let mut up_caches = Vec::with_capacity(4);
        let mut dec_caches = Vec::with_capacity(4);
        for j in 0..4 {
            let up_mode = self.unit_mode(BlockId::Up(j as u8 + 1), update_running, collect_stats);
            let (u, ucache) = self.ups[j].forward(&upsample2(&h), up_mode);
            up_caches.push(ucache);
            let dec_mode =
                self.unit_mode(BlockId::Conv(j as u8 + 6), update_running, collect_stats);
            let (d, dcache) = self.dec[j].forward(&concat_channels(&u, &skips[3 - j]), dec_mode);
            dec_caches.push(dcache);
            h = d;
        }
        let final_trainable = self.plan.is_trainable(BlockId::Final);
        let logits = self.final_conv.forward(&h);
        let probs = softmax_channels(&logits);
        let cache = UNetCache {
            enc: enc_caches,
            pool_idx,
            ups: up_caches,
            dec: dec_caches,
            final_x: final_trainable.then_some(h),
            probs: probs.clone(),
        };
        Ok((probs, cache))
    }

    /// Forward with the light caches needed to backpropagate an input
    /// gradient through a fully frozen network (running-stat batch norm).
    pub fn forward_frozen_cached(&mut self, x: &Array4<f32>) -> Result<(Array4<f32>, UNetCache)> {
        self.check_input(x)?;
        let mode = UnitMode::frozen_transparent();
        let mut enc_caches = Vec::with_capacity(5);
        let mut pool_idx = Vec::with_capacity(4);
        let mut skips = Vec::with_capacity(4);
        let mut h = x.clone();
        for i in 0..5 {
            let (s, cache) = self.enc[i].forward(&h, mode);
            enc_caches.push(cache);
            if i < 4 {
                let (pooled, idx) = maxpool2(&s);
                pool_idx.push(idx);
                skips.push(s);
                h = pooled;
            } else {
                h = s;
            }
        }
        let mut up_caches = Vec::with_capacity(4);
        let mut dec_caches = Vec::with_capacity(4);
        for j in 0..4 {
            let (u, ucache) = self.ups[j].forward(&upsample2(&h), mode);
            up_caches.push(ucache);
            let (d, dcache) = self.dec[j].forward(&concat_channels(&u, &skips[3 - j]), mode);
            dec_caches.push(dcache);
            h = d;
        }
        let logits = self.final_conv.forward(&h);
        let probs = softmax_channels(&logits);
        let cache = UNetCache {
            enc: enc_caches,
            pool_idx,
            ups: up_caches,
            dec: dec_caches,
            final_x: None,
            probs: probs.clone(),
        };
        Ok((probs, cache))
    }

    /// Backward from `d loss / d probs`. Parameter gradients accumulate
    /// into trainable blocks only; returns the gradient with respect to the
    /// network input. `inject` adds batch-statistic gradients at each
    /// batch-norm layer (forward order, see [`bn_layer_ids`]).
    pub fn backward(
        &mut self,
        gprobs: &Array4<f32>,
        cache: &UNetCache,
        inject: Option<&FmsInjection>,
    ) -> Array4<f32> {
        let glogits = softmax_backward(&cache.probs, gprobs);
        let pick = |i: usize| -> Option<&StatGrad> {
            inject.and_then(|v| v.get(i).and_then(|o| o.as_ref()))
        };

        let final_trainable = self.plan.is_trainable(BlockId::Final);
        let mut g = if final_trainable {
            let x = cache.final_x.as_ref().expect("final conv input cached");
            self.final_conv.backward(x, &glogits, true)
        } else {
            self.final_conv.backward_input_only(&glogits)
        };

        let mut g_skips: Vec<Option<Array4<f32>>> = vec![None, None, None, None];
        for j in (0..4).rev() {
            let dec_trainable = self.plan.is_trainable(BlockId::Conv(j as u8 + 6));
            let di = 10 + 3 * j;
            let g_cat = self.dec[j].backward(
                &g,
                &cache.dec[j],
                (pick(di + 1), pick(di + 2)),
                dec_trainable,
            );
            let up_channels = self.spec.block_filters[5 + j];
            let (g_u, g_s) = split_channels(&g_cat, up_channels);
            g_skips[3 - j] = Some(g_s);
            let up_trainable = self.plan.is_trainable(BlockId::Up(j as u8 + 1));
            let g_pre = self.ups[j].backward(&g_u, &cache.ups[j], pick(di), up_trainable);
            g = upsample2_backward(&g_pre);
        }
        for i in (0..5).rev() {
            if i < 4 {
                g = maxpool2_backward(&g, &cache.pool_idx[i]);
                g += g_skips[i].as_ref().expect("skip gradient present");
            }
            let trainable = self.plan.is_trainable(BlockId::Conv(i as u8 + 1));
            g = self.enc[i].backward(&g, &cache.enc[i], (pick(2 * i), pick(2 * i + 1)), trainable);
        }
        g
    }

    /// Batch-norm layer ids in forward order.
    pub fn bn_layer_ids() -> Vec<String> {
        let mut ids = Vec::with_capacity(BN_LAYER_IDS_PER_SPEC);
        for i in 1..=5 {
            ids.push(format!("conv{i}.bn1"));
            ids.push(format!("conv{i}.bn2"));
        }
        for j in 1..=4 {
            ids.push(format!("up{j}.bn"));
            ids.push(format!("conv{}.bn1", j + 5));
            ids.push(format!("conv{}.bn2", j + 5));
        }
        ids
    }

    /// Extract (batch statistics, running statistics) from a
    /// stats-collecting forward, layer-aligned in forward order.
    pub fn feature_stats(&self, cache: &UNetCache) -> (Vec<LayerStats>, Vec<LayerStats>) {
        let ids = Self::bn_layer_ids();
        let mut batch = Vec::with_capacity(ids.len());
        let mut running = Vec::with_capacity(ids.len());
        let mut push = |id: &str, bn_cache: &crate::nn::BnCache, bn: &crate::nn::BatchNorm2d| {
            batch.push(LayerStats {
                layer_id: id.to_string(),
                mean: bn_cache
                    .batch_mean
                    .clone()
                    .expect("stats-collecting forward"),
                var: bn_cache.batch_var.clone().expect("stats-collecting forward"),
            });
            running.push(LayerStats {
                layer_id: id.to_string(),
                mean: bn.running_mean.clone(),
                var: bn.running_var.clone(),
            });
        };
        let mut k = 0;
        for i in 0..5 {
            push(&ids[k], &cache.enc[i].a.bn, &self.enc[i].a.bn);
            push(&ids[k + 1], &cache.enc[i].b.bn, &self.enc[i].b.bn);
            k += 2;
        }
        for j in 0..4 {
            push(&ids[k], &cache.ups[j].bn, &self.ups[j].bn);
            push(&ids[k + 1], &cache.dec[j].a.bn, &self.dec[j].a.bn);
            push(&ids[k + 2], &cache.dec[j].b.bn, &self.dec[j].b.bn);
            k += 3;
        }
        (batch, running)
    }

    /// One-shot statistics collection (does not update running stats).
    pub fn collect_feature_stats(
        &mut self,
        x: &Array4<f32>,
    ) -> Result<(Vec<LayerStats>, Vec<LayerStats>)> {
        let (_, cache) = self.forward_train(x, false, true)?;
        Ok(self.feature_stats(&cache))
    }

    pub fn zero_grads(&mut self) {
        for b in &mut self.enc {
            b.a.zero_grads();
            b.b.zero_grads();
        }
        for u in &mut self.ups {
            u.zero_grads();
        }
        for b in &mut self.dec {
            b.a.zero_grads();
            b.b.zero_grads();
        }
        self.final_conv.weight.zero_grad();
        self.final_conv.bias.zero_grad();
    }

    /// Apply an optimizer step to the trainable blocks.
    pub fn step(&mut self, opt: &Optimizer) {
        for i in 0..5 {
            if self.plan.is_trainable(BlockId::Conv(i as u8 + 1)) {
                self.enc[i].a.step(opt);
                self.enc[i].b.step(opt);
            }
        }
        for j in 0..4 {
            if self.plan.is_trainable(BlockId::Up(j as u8 + 1)) {
                self.ups[j].step(opt);
            }
            if self.plan.is_trainable(BlockId::Conv(j as u8 + 6)) {
                self.dec[j].a.step(opt);
                self.dec[j].b.step(opt);
            }
        }
        if self.plan.is_trainable(BlockId::Final) {
            opt.step(&mut self.final_conv.weight);
            opt.step(&mut self.final_conv.bias);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.final_conv.weight.value.len() + self.final_conv.bias.value.len();
        for b in &self.enc {
            n += b.a.param_count() + b.b.param_count();
        }
        for u in &self.ups {
            n += u.param_count();
        }
        for b in &self.dec {
            n += b.a.param_count() + b.b.param_count();
        }
        n
    }

    /// Visit every named tensor: parameters, running statistics and
    /// optimizer moments. Visit order is fixed, so serialization and
    /// digests are canonical.
    pub fn visit_tensors<'a>(&'a self, mut f: impl FnMut(String, TensorRef<'a>)) {
        let visit_unit = |name: &str, u: &'a ConvUnit, f: &mut dyn FnMut(String, TensorRef<'a>)| {
            visit_param4(&format!("{name}.conv.weight"), &u.conv.weight, f);
            visit_param1(&format!("{name}.conv.bias"), &u.conv.bias, f);
            visit_param1(&format!("{name}.bn.gamma"), &u.bn.gamma, f);
            visit_param1(&format!("{name}.bn.beta"), &u.bn.beta, f);
            f(
                format!("{name}.bn.running_mean"),
                TensorRef::A1(&u.bn.running_mean),
            );
            f(
                format!("{name}.bn.running_var"),
                TensorRef::A1(&u.bn.running_var),
            );
        };
        for (i, b) in self.enc.iter().enumerate() {
            visit_unit(&format!("conv{}.u1", i + 1), &b.a, &mut f);
            visit_unit(&format!("conv{}.u2", i + 1), &b.b, &mut f);
        }
        for (j, u) in self.ups.iter().enumerate() {
            visit_unit(&format!("up{}", j + 1), u, &mut f);
        }
        for (j, b) in self.dec.iter().enumerate() {
            visit_unit(&format!("conv{}.u1", j + 6), &b.a, &mut f);
            visit_unit(&format!("conv{}.u2", j + 6), &b.b, &mut f);
        }
        visit_param4("final.weight", &self.final_conv.weight, &mut f);
        visit_param1("final.bias", &self.final_conv.bias, &mut f);
    }

    pub fn visit_tensors_mut(&mut self, mut f: impl FnMut(String, TensorMut<'_>)) {
        let mut visit_unit = |name: &str, u: &mut ConvUnit, f: &mut dyn FnMut(String, TensorMut<'_>)| {
            visit_param4_mut(&format!("{name}.conv.weight"), &mut u.conv.weight, f);
            visit_param1_mut(&format!("{name}.conv.bias"), &mut u.conv.bias, f);
            visit_param1_mut(&format!("{name}.bn.gamma"), &mut u.bn.gamma, f);
            visit_param1_mut(&format!("{name}.bn.beta"), &mut u.bn.beta, f);
            f(
                format!("{name}.bn.running_mean"),
                TensorMut::A1(&mut u.bn.running_mean),
            );
            f(
                format!("{name}.bn.running_var"),
                TensorMut::A1(&mut u.bn.running_var),
            );
        };
        for i in 0..5 {
            visit_unit(&format!("conv{}.u1", i + 1), &mut self.enc[i].a, &mut f);
            visit_unit(&format!("conv{}.u2", i + 1), &mut self.enc[i].b, &mut f);
        }
        for j in 0..4 {
            visit_unit(&format!("up{}", j + 1), &mut self.ups[j], &mut f);
        }
        for j in 0..4 {
            visit_unit(&format!("conv{}.u1", j + 6), &mut self.dec[j].a, &mut f);
            visit_unit(&format!("conv{}.u2", j + 6), &mut self.dec[j].b, &mut f);
        }
        visit_param4_mut("final.weight", &mut self.final_conv.weight, &mut f);
        visit_param1_mut("final.bias", &mut self.final_conv.bias, &mut f);
    }

    /// Digest of all parameters and running statistics.
    pub fn digest_all(&self) -> [u8; 32] {
        self.digest_blocks(|_| true)
    }

    /// Digest of the frozen blocks' parameters and running statistics.
    pub fn digest_frozen(&self) -> [u8; 32] {
        self.digest_blocks(|id| !self.plan.is_trainable(id))
    }

    fn digest_blocks(&self, take: impl Fn(BlockId) -> bool) -> [u8; 32] {
        let mut hasher = Sha256::new();
        self.visit_tensors(|name, t| {
            let id = block_of(&name);
            if !take(id) {
                return;
            }
            // Skip optimizer moments and gradients: a digest covers the
            // function the network computes.
            hasher.update(name.as_bytes());
            match t {
                TensorRef::A1(a) => {
                    for &v in a.iter() {
                        hasher.update(v.to_le_bytes());
                    }
                }
                TensorRef::A4(a) => {
                    for &v in a.iter() {
                        hasher.update(v.to_le_bytes());
                    }
                }
            }
        });
        hasher.finalize().into()
    }
}

/// Borrowed view of one tensor of a network.
pub enum TensorRef<'a> {
    A1(&'a Array1<f32>),
    A4(&'a Array4<f32>),
}

pub enum TensorMut<'a> {
    A1(&'a mut Array1<f32>),
    A4(&'a mut Array4<f32>),
}

fn visit_param4<'a>(name: &str, p: &'a Param<Ix4>, f: &mut dyn FnMut(String, TensorRef<'a>)) {
    f(name.to_string(), TensorRef::A4(&p.value));
    f(format!("{name}.m1"), TensorRef::A4(&p.m1));
    f(format!("{name}.m2"), TensorRef::A4(&p.m2));
}

fn visit_param1<'a>(name: &str, p: &'a Param<Ix1>, f: &mut dyn FnMut(String, TensorRef<'a>)) {
    f(name.to_string(), TensorRef::A1(&p.value));
    f(format!("{name}.m1"), TensorRef::A1(&p.m1));
    f(format!("{name}.m2"), TensorRef::A1(&p.m2));
}

fn visit_param4_mut(name: &str, p: &mut Param<Ix4>, f: &mut dyn FnMut(String, TensorMut<'_>)) {
    f(name.to_string(), TensorMut::A4(&mut p.value));
    f(format!("{name}.m1"), TensorMut::A4(&mut p.m1));
    f(format!("{name}.m2"), TensorMut::A4(&mut p.m2));
}

fn visit_param1_mut(name: &str, p: &mut Param<Ix1>, f: &mut dyn FnMut(String, TensorMut<'_>)) {
    f(name.to_string(), TensorMut::A1(&mut p.value));
    f(format!("{name}.m1"), TensorMut::A1(&mut p.m1));
    f(format!("{name}.m2"), TensorMut::A1(&mut p.m2));
}

/// Map a tensor name back to its block id.
fn block_of(name: &str) -> BlockId {
    let head = name.split('.').next().unwrap_or(name);
    if head == "final" {
        return BlockId::Final;
    }
    head.parse().expect("tensor names use block-id prefixes")
}

/// Exclude optimizer moments (and keep values/statistics) when a digest or
/// checkpoint should only cover the function the network computes.
pub(crate) fn is_moment(name: &str) -> bool {
    name.ends_with(".m1") || name.ends_with(".m2")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::new(vec![2, 2, 2, 2, 4, 2, 2, 2, 2], 3)
    }

    fn batch(n: usize, h: usize, w: usize) -> Array4<f32> {
        Array::from_shape_fn((n, 1, h, w), |(a, _, c, d)| {
            ((a * 13 + c * 5 + d * 3) as f32 * 0.17).sin() * 0.5 + 0.5
        })
    }

    #[test]
    fn forward_shapes_and_softmax() {
        let mut net = UNet::build(&tiny_spec(), 9).unwrap();
        let x = batch(2, 32, 16);
        let pred = net.forward(&x, false).unwrap();
        assert_eq!(pred.probs.dim(), (2, 3, 32, 16));
        assert!(pred.is_normalized(1e-5));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut net = UNet::build(&tiny_spec(), 9).unwrap();
        let x = batch(1, 24, 24);
        assert!(net.forward(&x, false).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = UNet::build(&tiny_spec(), 4).unwrap();
        let b = UNet::build(&tiny_spec(), 4).unwrap();
        assert_eq!(a.digest_all(), b.digest_all());
        let c = UNet::build(&tiny_spec(), 5).unwrap();
        assert_ne!(a.digest_all(), c.digest_all());
    }

    #[test]
    fn param_count_is_seed_independent() {
        let a = UNet::build(&tiny_spec(), 4).unwrap();
        let b = UNet::build(&tiny_spec(), 77).unwrap();
        assert_eq!(a.param_count(), b.param_count());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = UNet::build(&tiny_spec(), 4).unwrap();
        let x = batch(2, 16, 16);
        let a = net.forward_eval(&x).unwrap();
        let b = net.forward_eval(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stats_are_layer_aligned() {
        let mut net = UNet::build(&tiny_spec(), 4).unwrap();
        let x = batch(2, 16, 16);
        let (batch_stats, running_stats) = net.collect_feature_stats(&x).unwrap();
        assert_eq!(batch_stats.len(), BN_LAYER_IDS_PER_SPEC);
        assert_eq!(running_stats.len(), BN_LAYER_IDS_PER_SPEC);
        for (b, r) in batch_stats.iter().zip(running_stats.iter()) {
            assert_eq!(b.layer_id, r.layer_id);
            assert_eq!(b.mean.len(), r.mean.len());
            assert!(b.var.iter().all(|&v| v >= 0.0));
            // Fresh net: running stats at the init convention.
            assert!(r.mean.iter().all(|&v| v == 0.0));
            assert!(r.var.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn frozen_blocks_do_not_move() {
        let mut net = UNet::build(&tiny_spec(), 4).unwrap();
        net.apply_freeze(FreezePlan::only([BlockId::Conv(1)]));
        let frozen_before = net.digest_frozen(“);
        let x = batch(2, 16, 16);
        let (probs, cache) = net.forward_train(&x, true, true).unwrap();
        let gy = probs.mapv(|v| v * 0.1 + 0.01);
        net.backward(&gy, &cache, None);
        let mut opt = Optimizer::new(crate::nn::OptimizerCfg::rmsprop(0.01, 0.9));
        opt.advance();
        net.step(&opt);
        assert_eq!(net.digest_frozen(), frozen_before);
    }

    #[test]
    fn all_trainable_blocks_move_after_one_step() {
        let mut net = UNet::build(&tiny_spec(), 4).unwrap();
        let before = net.digest_all();
        let x = batch(2, 16, 16);
        let (probs, cache) = net.forward_train(&x, true, false).unwrap();
        // A gradient that is nonzero for every class somewhere.
        let gy = probs.mapv(|v| (v + 0.3).sin());
        net.backward(&gy, &cache, None);
        let mut opt = Optimizer::new(crate::nn::OptimizerCfg::rmsprop(0.05, 0.9));
        opt.advance();
        net.step(&opt);
        assert_ne!(net.digest_all(), before);
    }
}
