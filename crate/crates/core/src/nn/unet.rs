//! U-Net style encoder-decoder with batch-normalized convolution units.
//!
//! Every convolution except the output head is wrapped as
//! `relu(batch_norm(conv(x) + b))`. The encoder halves resolution with 2x2
//! max pooling at each level; the decoder doubles it with nearest-neighbour
//! upsampling followed by a learned 2x2 convolution, then concatenates the
//! matching encoder features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    batch_norm_backward, batch_norm_infer, batch_norm_train, concat_channels, conv2d_backward,
    conv2d_forward, maxpool2, maxpool2_backward, relu, relu_backward, split_channels,
    update_running, upsample2, upsample2_backward, BnCache, ConvSpec,
};
use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor4;
use crate::error::{Error, Result};
use crate::parallel::Execution;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 8,
            depth: 3,
            base_channels: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::invalid(format!(
                "network needs depth, base channels and input channels >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Channels at encoder level `i` (level `depth` is the bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    spec: ConvSpec,
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    spec: ConvSpec,
    w: usize,
    b: usize,
}

/// Network topology: parameter indices into a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    enc: Vec<[Unit; 2]>,
    bottom: [Unit; 2],
    up: Vec<Unit>,
    dec: Vec<[Unit; 2]>,
    head: Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

struct UnitCache<T> {
    input: Tensor4<T>,
    bn: BnCache<T>,
    out: Tensor4<T>,
    mean_idx: usize,
    var_idx: usize,
}

/// Activations saved by a training-mode forward pass.
pub struct ForwardCache<T> {
    units: Vec<UnitCache<T>>,
    pools: Vec<([usize; 4], Vec<u32>)>,
    head_input: Tensor4<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Folds the batch statistics into the running batch-norm statistics.
    pub fn update_running_stats(&self, params: &mut ParamStore<T>) {
        for u in &self.units {
            update_running(params.get_mut(u.mean_idx), &u.bn.batch_mean, BN_MOMENTUM);
            update_running(params.get_mut(u.var_idx), &u.bn.batch_var, BN_MOMENTUM);
        }
    }
}

impl UNet {
    fn layout<T: Scalar>(
        config: UNetConfig,
        mut init: impl FnMut(usize, usize) -> Vec<T>,
    ) -> Result<(UNet, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut unit = |store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize| {
            let spec = ConvSpec { cin, cout, k };
            let w = store.push(
                format!("{name}.conv.w"),
                vec![cout, cin, k, k],
                init(cin * k * k, spec.weight_len()),
                true,
            );
            let b = store.push(format!("{name}.conv.b"), vec![cout], vec![T::zero(); cout], true);
            let gamma = store.push(format!("{name}.bn.gamma"), vec![cout], vec![T::one(); cout], true);
            let beta = store.push(format!("{name}.bn.beta"), vec![cout], vec![T::zero(); cout], true);
            let mean = store.push(
                format!("{name}.bn.running_mean"),
                vec![cout],
                vec![T::zero(); cout],
                false,
            );
            let var = store.push(
                format!("{name}.bn.running_var"),
                vec![cout],
                vec![T::one(); cout],
                false,
            );
            Unit { spec, w, b, gamma, beta, mean, var }
        };

        let d = config.depth;
        let mut enc = Vec::with_capacity(d);
        let mut cin = config.in_channels;
        for i in 0..d {
            let c = config.channels(i);
            enc.push([
                unit(&mut store, &format!("enc{i}.0"), cin, c, 3),
                unit(&mut store, &format!("enc{i}.1"), c, c, 3),
            ]);
            cin = c;
        }
        let cb = config.channels(d);
        let bottom = [
            unit(&mut store, "bottom.0", cin, cb, 3),
            unit(&mut store, "bottom.1", cb, cb, 3),
        ];
        let mut up = Vec::with_capacity(d);
        let mut dec = Vec::with_capacity(d);
        for i in 0..d {
            let c = config.channels(i);
            up.push(unit(&mut store, &format!("up{i}"), config.channels(i + 1), c, 2));
            dec.push([
                unit(&mut store, &format!("dec{i}.0"), 2 * c, c, 3),
                unit(&mut store, &format!("dec{i}.1"), c, c, 3),
            ]);
        }
        let c0 = config.channels(0);
        let head_spec = ConvSpec { cin: c0, cout: 1, k: 1 };
        let hw = store.push("head.conv.w", vec![1, c0, 1, 1], init(c0, c0), true);
        let hb = store.push("head.conv.b", vec![1], vec![T::zero()], true);
        Ok((
            UNet {
                config,
                enc,
                bottom,
                up,
                dec,
                head: Head { spec: head_spec, w: hw, b: hb },
            },
            store,
        ))
    }

    /// Fresh network with fan-in scaled uniform kernels `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases and shifts, unit gains.
    pub fn init<T: Scalar, R: Rng>(config: UNetConfig, rng: &mut R) -> Result<(UNet, ParamStore<T>)> {
        UNet::layout(config, |fan_in, len| {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..len).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
        })
    }

    /// Topology for an existing parameter set; names and shapes must match.
    pub fn for_params<T: Scalar>(config: UNetConfig, params: &ParamStore<T>) -> Result<UNet> {
        let (net, reference) = UNet::layout::<T>(config, |_, len| vec![T::zero(); len])?;
        if reference.len() != params.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, found {}",
                reference.len(),
                params.len()
            )));
        }
        for (a, b) in reference.params.iter().zip(&params.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::shape(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
        Ok(net)
    }

    fn check_input<T: Scalar>(&self, x: &Tensor4<T>) -> Result<()> {
        if x.c != self.config.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels, x.c
            )));
        }
        let m = self.config.size_multiple();
        if !x.h.is_multiple_of(m) || !x.w.is_multiple_of(m) || x.h == 0 || x.w == 0 {
            return Err(Error::shape(format!(
                "input {}x{} is not a multiple of {m} for depth {}",
                x.h, x.w, self.config.depth
            )));
        }
        Ok(())
    }

    fn unit_forward<T: Scalar>(
        u: &Unit,
        params: &ParamStore<T>,
        x: Tensor4<T>,
        caches: Option<&mut Vec<UnitCache<T>>>,
        exec: Execution,
    ) -> Result<Tensor4<T>> {
        let z = conv2d_forward(&x, u.spec, params.get(u.w), params.get(u.b), exec)?;
        let (gamma, beta) = (params.get(u.gamma), params.get(u.beta));
        match caches {
            Some(caches) => {
                let (y, bn) = batch_norm_train(&z, gamma, beta, BN_EPS)?;
                let out = relu(&y);
                caches.push(UnitCache {
                    input: x,
                    bn,
                    out: out.clone(),
                    mean_idx: u.mean,
                    var_idx: u.var,
                });
                Ok(out)
            }
            None => {
                let y = batch_norm_infer(&z, gamma, beta, params.get(u.mean), params.get(u.var), BN_EPS)?;
                Ok(relu(&y))
            }
        }
    }

    /// Runs the network and returns logits of shape `N x 1 x H x W`. In
    /// training mode batch statistics are used and activations are cached;
    /// running statistics are not touched (see [`ForwardCache::update_running_stats`]).
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor4<T>,
        mode: Mode,
        exec: Execution,
    ) -> Result<(Tensor4<T>, Option<ForwardCache<T>>)> {
        self.check_input(x)?;
        let mut caches: Option<Vec<UnitCache<T>>> = (mode == Mode::Train).then(Vec::new);
        let mut pools = Vec::new();
        let mut skips: Vec<Tensor4<T>> = Vec::new();
        let mut h = x.clone();
        for level in &self.enc {
            h = Self::unit_forward(&level[0], params, h, caches.as_mut(), exec)?;
            h = Self::unit_forward(&level[1], params, h, caches.as_mut(), exec)?;
            let (pooled, arg) = maxpool2(&h)?;
            pools.push((h.shape(), arg));
            skips.push(h);
            h = pooled;
        }
        h = Self::unit_forward(&self.bottom[0], params, h, caches.as_mut(), exec)?;
        h = Self::unit_forward(&self.bottom[1], params, h, caches.as_mut(), exec)?;
        for i in (0..self.config.depth).rev() {
            let upsampled = upsample2(&h);
            let up = Self::unit_forward(&self.up[i], params, upsampled, caches.as_mut(), exec)?;
            let skip = skips.pop().expect("one skip per level");
            h = concat_channels(&skip, &up)?;
            h = Self::unit_forward(&self.dec[i][0], params, h, caches.as_mut(), exec)?;
            h = Self::unit_forward(&self.dec[i][1], params, h, caches.as_mut(), exec)?;
        }
        let logits = conv2d_forward(
            &h,
            self.head.spec,
            params.get(self.head.w),
            params.get(self.head.b),
            exec,
        )?;
        let cache = caches.map(|units| ForwardCache {
            units,
            pools,
            head_input: h,
        });
        Ok((logits, cache))
    }

    fn unit_backward<T: Scalar>(
        u: &Unit,
        params: &ParamStore<T>,
        cache: UnitCache<T>,
        dy: &Tensor4<T>,
        grads: &mut [Vec<T>],
        need_dx: bool,
        exec: Execution,
    ) -> Result<Option<Tensor4<T>>> {
        let d_bn_out = relu_backward(&cache.out, dy);
        let (dz, dgamma, dbeta) = batch_norm_backward(&d_bn_out, &cache.bn, params.get(u.gamma));
        accumulate(&mut grads[u.gamma], &dgamma);
        accumulate(&mut grads[u.beta], &dbeta);
        let g = conv2d_backward(&cache.input, u.spec, params.get(u.w), &dz, need_dx, exec)?;
        accumulate(&mut grads[u.w], &g.dw);
        accumulate(&mut grads[u.b], &g.db);
        Ok(g.dx)
    }

    /// Back-propagates `dlogits` through a training-mode forward pass.
    /// Returns per-tensor gradients aligned with `params.params` and, when
    /// `need_input_grad` is set, the gradient with respect to the input.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        cache: ForwardCache<T>,
        dlogits: &Tensor4<T>,
        need_input_grad: bool,
        exec: Execution,
    ) -> Result<(Vec<Vec<T>>, Option<Tensor4<T>>)> {
        let mut grads = params.zeros_like();
        let ForwardCache {
            mut units,
            mut pools,
            head_input,
        } = cache;
        let hg = conv2d_backward(
            &head_input,
            self.head.spec,
            params.get(self.head.w),
            dlogits,
            true,
            exec,
        )?;
        accumulate(&mut grads[self.head.w], &hg.dw);
        accumulate(&mut grads[self.head.b], &hg.db);
        let mut g = hg.dx.expect("requested");

        let pop = |units: &mut Vec<UnitCache<T>>| units.pop().expect("cache per unit");
        let mut skip_grads: Vec<Tensor4<T>> = Vec::with_capacity(self.config.depth);
        for i in 0..self.config.depth {
            for j in [1, 0] {
                let c = pop(&mut units);
                g = Self::unit_backward(&self.dec[i][j], params, c, &g, &mut grads, true, exec)?
                    .expect("requested");
            }
            let (d_skip, d_up) = split_channels(&g, self.config.channels(i));
            skip_grads.push(d_skip);
            let c = pop(&mut units);
            g = Self::unit_backward(&self.up[i], params, c, &d_up, &mut grads, true, exec)?
                .expect("requested");
            g = upsample2_backward(&g);
        }
        for j in [1, 0] {
            let c = pop(&mut units);
            g = Self::unit_backward(&self.bottom[j], params, c, &g, &mut grads, true, exec)?
                .expect("requested");
        }
        let mut input_grad = None;
        for i in (0..self.config.depth).rev() {
            let (shape, arg) = pools.pop().expect("pool per level");
            g = maxpool2_backward(shape, &arg, &g);
            let skip = skip_grads.pop().expect("skip per level");
            accumulate(&mut g.data, &skip.data);
            let c = pop(&mut units);
            g = Self::unit_backward(&self.enc[i][1], params, c, &g, &mut grads, true, exec)?
                .expect("requested");
            let need = i > 0 || need_input_grad;
            let c = pop(&mut units);
            let dx = Self::unit_backward(&self.enc[i][0], params, c, &g, &mut grads, need, exec)?;
            match dx {
                Some(dx) if i > 0 => g = dx,
                other => input_grad = other,
            }
        }
        debug_assert!(units.is_empty());
        Ok((grads, input_grad))
    }
}

fn accumulate<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shape_contract() {
        for depth in 1..=3 {
            let cfg = UNetConfig { in_channels: 8, depth, base_channels: 2 };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            let (net, params) = UNet::init::<f32, _>(cfg, &mut rng).unwrap();
            let x = Tensor4::<f32>::zeros(1, 8, 256, 256);
            let (y, cache) = net.forward(&params, &x, Mode::Infer, Execution::Parallel).unwrap();
            assert!(cache.is_none());
            assert_eq!(y.shape(), [1, 1, 256, 256]);
            // bottleneck input is the last pooled tensor
            let x2 = Tensor4::<f32>::zeros(2, 8, 256, 256);
            let (_, cache) = net.forward(&params, &x2, Mode::Train, Execution::Parallel).unwrap();
            let cache = cache.unwrap();
            let bottom_in = &cache.units[2 * depth].input;
            assert_eq!(bottom_in.h, 256 >> depth);
            assert_eq!(bottom_in.c, 2 << (depth - 1));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = UNetConfig { in_channels: 3, depth: 2, base_channels: 2 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (net, params) = UNet::init::<f64, _>(cfg, &mut rng).unwrap();
        let bad_c = Tensor4::<f64>::zeros(2, 4, 8, 8);
        assert!(net.forward(&params, &bad_c, Mode::Infer, Execution::Sequential).is_err());
        let bad_hw = Tensor4::<f64>::zeros(2, 3, 6, 8);
        assert!(net.forward(&params, &bad_hw, Mode::Infer, Execution::Sequential).is_err());
        let single = Tensor4::<f64>::zeros(1, 3, 8, 8);
        assert!(net.forward(&params, &single, Mode::Train, Execution::Sequential).is_err());
        assert!(UNetConfig { in_channels: 3, depth: 0, base_channels: 2 }.validate().is_err());
    }

    #[test]
    fn for_params_checks_layout() {
        let cfg = UNetConfig { in_channels: 3, depth: 1, base_channels: 2 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (_, params) = UNet::init::<f32, _>(cfg, &mut rng).unwrap();
        assert!(UNet::for_params(cfg, &params).is_ok());
        let other = UNetConfig { base_channels: 3, ..cfg };
        assert!(UNet::for_params(other, &params).is_err());
    }
}
