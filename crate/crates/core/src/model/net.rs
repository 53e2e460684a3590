//! Small batch-norm encoder-decoder with skip connections.
//!
//! Encoder stage `s` is a 3x3 conv + BN + ReLU block, preceded by 2x2 max
//! pooling for `s > 0`. Each decoder stage maps level `s + 1` down to the
//! channel width of level `s` with a conv block, upsamples x2 bilinearly and
//! adds the encoder output of level `s`. A full-resolution refinement block
//! and a 1x1 classifier head produce per-pixel logits.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    bn_backward, bn_forward, conv_backward, conv_forward, maxpool2_backward, maxpool2_forward,
    relu_backward_inplace, relu_inplace, upsample2_backward, upsample2_forward, BnCache,
};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::losses::ProbMap;
use crate::params::{check_structure, ParamTensor, ParameterSnapshot};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDescriptor {
    pub in_channels: usize,
    /// Channel width per stage, shallowest first.
    pub channels: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ModelDescriptor {
    fn default() -> Self {
        Self {
            in_channels: 1,
            channels: vec![16, 32, 64],
            classes: 3,
            seed: 0,
        }
    }
}

impl ModelDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::Config(format!(
                "model needs at least 2 stages, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "model needs at least 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    /// Input sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.stages() - 1)
    }
}

/// Which statistics batch norm normalises with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Current batch moments (training mode).
    Batch,
    /// Stored running statistics (evaluation mode).
    Running,
}

/// Running statistics of one batch-norm layer; not trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: usize,
    bias: Option<usize>,
    /// gamma, beta, running-stats index
    bn: Option<(usize, usize, usize)>,
    cout: usize,
    k: usize,
    relu: bool,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    output: Tensor<T>,
}

/// Activations retained by [`SegModel::forward_with_cache`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    blocks: Vec<Option<BlockCache<T>>>,
    /// Per pooled stage: argmax offsets and the pre-pool spatial size.
    pools: Vec<(Vec<u32>, usize, usize)>,
}

impl<T> ForwardCache<T> {
    /// Batch moments per BN layer, in running-stats order; `None` in
    /// running-statistics mode.
    pub fn batch_moments(&self) -> Vec<Option<&(Vec<f64>, Vec<f64>)>> {
        self.blocks
            .iter()
            .flatten()
            .filter_map(|b| b.bn.as_ref())
            .map(|bn| bn.batch_moments.as_ref())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SegModel<T: Real = f32> {
    descriptor: ModelDescriptor,
    params: Vec<ParamTensor<T>>,
    stats: Vec<BnStats<T>>,
    blocks: Vec<ConvBlock>,
}

struct Builder<'a, T: Real> {
    params: Vec<ParamTensor<T>>,
    stats: Vec<BnStats<T>>,
    blocks: Vec<ConvBlock>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn push_param(&mut self, name: String, shape: Vec<usize>, values: Vec<T>) -> usize {
        self.params.push(ParamTensor { name, shape, values });
        self.params.len() - 1
    }

    fn conv_block(&mut self, name: &str, cin: usize, cout: usize, k: usize, with_bn: bool) {
        let fan_in = cin * k * k;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let weights: Vec<T> = (0..cout * fan_in)
            .map(|_| T::from_f64(normal.sample(&mut *self.rng)))
            .collect();
        let weight = self.push_param(format!("{name}.conv.weight"), vec![cout, cin, k, k], weights);
        let (bias, bn) = if with_bn {
            let g = self.push_param(format!("{name}.bn.gamma"), vec![cout], vec![T::one(); cout]);
            let b = self.push_param(format!("{name}.bn.beta"), vec![cout], vec![T::zero(); cout]);
            self.stats.push(BnStats {
                name: format!("{name}.bn"),
                mean: vec![T::zero(); cout],
                var: vec![T::one(); cout],
            });
            (None, Some((g, b, self.stats.len() - 1)))
        } else {
            let b = self.push_param(format!("{name}.conv.bias"), vec![cout], vec![T::zero(); cout]);
            (Some(b), None)
        };
        self.blocks.push(ConvBlock {
            weight,
            bias,
            bn,
            cout,
            k,
            relu: with_bn,
        });
    }
}

impl<T: Real> SegModel<T> {
    /// Builds and initialises a model; the same descriptor always yields
    /// bit-identical parameters.
    pub fn new(descriptor: ModelDescriptor) -> Result<Self> {
        descriptor.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(descriptor.seed);
        let mut b = Builder {
            params: Vec::new(),
            stats: Vec::new(),
            blocks: Vec::new(),
            rng: &mut rng,
        };
        let ch = &descriptor.channels;
        let s = ch.len();
        b.conv_block("enc0", descriptor.in_channels, ch[0], 3, true);
        for i in 1..s {
            b.conv_block(&format!("enc{i}"), ch[i - 1], ch[i], 3, true);
        }
        for i in (0..s - 1).rev() {
            b.conv_block(&format!("dec{i}"), ch[i + 1], ch[i], 3, true);
        }
        b.conv_block("refine", ch[0], ch[0], 3, true);
        b.conv_block("head", ch[0], descriptor.classes, 1, false);
        let Builder {
            params,
            stats,
            blocks,
            ..
        } = b;
        Ok(Self {
            descriptor,
            params,
            stats,
            blocks,
        })
    }

    pub fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    pub fn classes(&self) -> usize {
        self.descriptor.classes
    }

    pub fn params(&self) -> &[ParamTensor<T>] {
        &self.params
    }

    /// Mutable parameter values; names and shapes stay fixed.
    pub fn param_values_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.params.iter_mut().map(|p| p.values.as_mut_slice())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn stats(&self) -> &[BnStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [BnStats<T>] {
        &mut self.stats
    }

    /// Indices of the batch-norm scale and shift parameters.
    pub fn bn_affine_indices(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter_map(|b| b.bn)
            .flat_map(|(g, b, _)| [g, b])
            .collect()
    }

    /// Deep copy of the trainable parameters.
    pub fn snapshot(&self) -> ParameterSnapshot<T> {
        ParameterSnapshot::new(self.params.clone()).expect("model parameters are well formed")
    }

    pub fn restore(&mut self, snapshot: &ParameterSnapshot<T>) -> Result<()> {
        check_structure(&self.params, snapshot.entries())?;
        for (p, s) in self.params.iter_mut().zip(snapshot.entries()) {
            p.values.copy_from_slice(&s.values);
        }
        Ok(())
    }

    /// Running statistics as named tensors (`<layer>.running_mean`, `<layer>.running_var`).
    pub fn stat_tensors(&self) -> Vec<ParamTensor<T>> {
        self.stats
            .iter()
            .flat_map(|s| {
                [
                    ParamTensor {
                        name: format!("{}.running_mean", s.name),
                        shape: vec![s.mean.len()],
                        values: s.mean.clone(),
                    },
                    ParamTensor {
                        name: format!("{}.running_var", s.name),
                        shape: vec![s.var.len()],
                        values: s.var.clone(),
                    },
                ]
            })
            .collect()
    }

    pub fn restore_stats(&mut self, tensors: &[ParamTensor<T>]) -> Result<()> {
        let current = self.stat_tensors();
        check_structure(tensors, &current)?;
        if let Some(bad) = tensors
            .iter()
            .filter(|t| t.name.ends_with("running_var"))
            .find(|t| t.values.iter().any(|v| v.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater)))
        {
            return Err(Error::Argument(format!("{}: running variance must be > 0", bad.name)));
        }
        for (s, pair) in self.stats.iter_mut().zip(tensors.chunks(2)) {
            s.mean.copy_from_slice(&pair[0].values);
            s.var.copy_from_slice(&pair[1].values);
        }
        Ok(())
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> SegModel<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect::<Vec<U>>();
        SegModel {
            descriptor: self.descriptor.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamTensor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: conv(&p.values),
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| BnStats {
                    name: s.name.clone(),
                    mean: conv(&s.mean),
                    var: conv(&s.var),
                })
                .collect(),
            blocks: self.blocks.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let m = self.descriptor.size_multiple();
        if x.c != self.descriptor.in_channels {
            return Err(Error::Argument(format!(
                "input has {} channels, model expects {}",
                x.c, self.descriptor.in_channels
            )));
        }
        if x.n == 0 || x.h == 0 || x.w == 0 || !x.h.is_multiple_of(m) || !x.w.is_multiple_of(m) {
            return Err(Error::Argument(format!(
                "input {}x{} (batch {}) must be non-empty with sides divisible by {m}",
                x.h, x.w, x.n
            )));
        }
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("non-finite input pixel".into()));
        }
        Ok(())
    }

    fn block_forward(
        &self,
        idx: usize,
        x: Tensor<T>,
        mode: BnMode,
        cache: Option<&mut ForwardCache<T>>,
    ) -> Tensor<T> {
        let blk = &self.blocks[idx];
        let bias = blk.bias.map(|b| self.params[b].values.as_slice());
        let z = conv_forward(&x, &self.params[blk.weight].values, bias, blk.cout, blk.k);
        let (mut y, bn_cache) = match blk.bn {
            Some((g, b, s)) => {
                let running = match mode {
                    BnMode::Running => Some((self.stats[s].mean.as_slice(), self.stats[s].var.as_slice())),
                    BnMode::Batch => None,
                };
                let (y, c) = bn_forward(&z, &self.params[g].values, &self.params[b].values, running);
                (y, Some(c))
            }
            None => (z, None),
        };
        if blk.relu {
            relu_inplace(&mut y);
        }
        if let Some(cache) = cache {
            cache.blocks[idx] = Some(BlockCache {
                input: x,
                bn: bn_cache,
                output: y.clone(),
            });
        }
        y
    }

    fn run(&self, x: &Tensor<T>, mode: BnMode, mut cache: Option<&mut ForwardCache<T>>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let s = self.descriptor.stages();
        let dec = |i: usize| s + (s - 2 - i);
        let refine = 2 * s - 1;
        let head = 2 * s;

        let mut skips = Vec::with_capacity(s);
        let mut h = self.block_forward(0, x.clone(), mode, cache.as_deref_mut());
        for i in 1..s {
            skips.push(h.clone());
            let (hh, ww) = (h.h, h.w);
            let (pooled, arg) = maxpool2_forward(&h);
            if let Some(c) = cache.as_deref_mut() {
                c.pools.push((arg, hh, ww));
            }
            h = self.block_forward(i, pooled, mode, cache.as_deref_mut());
        }
        for i in (0..s - 1).rev() {
            let d = self.block_forward(dec(i), h, mode, cache.as_deref_mut());
            let mut up = upsample2_forward(&d);
            for (u, &e) in up.data.iter_mut().zip(&skips[i].data) {
                *u += e;
            }
            h = up;
        }
        let h = self.block_forward(refine, h, mode, cache.as_deref_mut());
        Ok(self.block_forward(head, h, mode, cache))
    }

    /// Logits `N x C x H x W`.
    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        self.run(x, mode, None)
    }

    pub fn forward_with_cache(&self, x: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let mut cache = ForwardCache {
            blocks: vec![None; self.blocks.len()],
            pools: Vec::new(),
        };
        let out = self.run(x, mode, Some(&mut cache))?;
        Ok((out, cache))
    }

    fn block_backward(
        &self,
        idx: usize,
        cache: &ForwardCache<T>,
        mut g: Tensor<T>,
        grads: &mut [Vec<T>],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let blk = &self.blocks[idx];
        let bc = cache.blocks[idx].as_ref().expect("block ran in the cached forward pass");
        if blk.relu {
            relu_backward_inplace(&mut g, &bc.output);
        }
        if let (Some((gi, bi, _)), Some(bn)) = (blk.bn, bc.bn.as_ref()) {
            let mut dgamma = std::mem::take(&mut grads[gi]);
            let mut dbeta = std::mem::take(&mut grads[bi]);
            g = bn_backward(&g, &self.params[gi].values, bn, &mut dgamma, &mut dbeta);
            grads[gi] = dgamma;
            grads[bi] = dbeta;
        }
        let mut dbias = blk.bias.map(|b| std::mem::take(&mut grads[b]));
        let mut dweight = std::mem::take(&mut grads[blk.weight]);
        let dx = conv_backward(
            &bc.input,
            &self.params[blk.weight].values,
            blk.k,
            &g,
            &mut dweight,
            dbias.as_deref_mut(),
            need_dx,
        );
        grads[blk.weight] = dweight;
        if let (Some(b), Some(db)) = (blk.bias, dbias) {
            grads[b] = db;
        }
        dx
    }

    /// Parameter gradients for upstream logit gradients `dlogits`.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: Tensor<T>) -> Vec<Vec<T>> {
        let s = self.descriptor.stages();
        let dec = |i: usize| s + (s - 2 - i);
        let refine = 2 * s - 1;
        let head = 2 * s;
        let mut grads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.values.len()]).collect();

        let g = self.block_backward(head, cache, dlogits, &mut grads, true).unwrap();
        let mut g_level = self.block_backward(refine, cache, g, &mut grads, true).unwrap();
        let mut g_enc: Vec<Option<Tensor<T>>> = vec![None; s];
        for i in 0..s - 1 {
            g_enc[i] = Some(g_level.clone());
            let up = upsample2_backward(&g_level);
            g_level = self.block_backward(dec(i), cache, up, &mut grads, true).unwrap();
        }
        g_enc[s - 1] = Some(g_level);
        for i in (1..s).rev() {
            let ge = g_enc[i].take().unwrap();
            let gp = self.block_backward(i, cache, ge, &mut grads, true).unwrap();
            let (arg, hh, ww) = &cache.pools[i - 1];
            let gx = maxpool2_backward(&gp, arg, *hh, *ww);
            let acc = g_enc[i - 1].as_mut().unwrap();
            for (a, b) in acc.data.iter_mut().zip(&gx.data) {
                *a += *b;
            }
        }
        let ge0 = g_enc[0].take().unwrap();
        self.block_backward(0, cache, ge0, &mut grads, false);
        grads
    }

    /// Blends batch moments from a batch-statistics forward pass into the
    /// running statistics: `running <- (1 - momentum) running + momentum batch`.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>, momentum: f64) {
        let moments: Vec<Option<(Vec<f64>, Vec<f64>)>> =
            cache.batch_moments().into_iter().map(|m| m.cloned()).collect();
        for (stats, m) in self.stats.iter_mut().zip(moments) {
            let Some((mean, var)) = m else { continue };
            for (r, b) in stats.mean.iter_mut().zip(&mean) {
                *r = T::from_f64((1.0 - momentum) * r.as_f64() + momentum * b);
            }
            for (r, b) in stats.var.iter_mut().zip(&var) {
                *r = T::from_f64((1.0 - momentum) * r.as_f64() + momentum * b);
            }
        }
    }

    /// Softmax probabilities per image.
    pub fn predict(&self, x: &Tensor<T>, mode: BnMode) -> Result<Vec<ProbMap>> {
        let logits = self.forward(x, mode)?;
        logits_to_probmaps(&logits)
    }
}

/// Splits `N x C x H x W` logits into per-image softmax maps. Non-finite
/// logits mean the network has diverged and are a numerical error.
pub fn logits_to_probmaps<T: Real>(logits: &Tensor<T>) -> Result<Vec<ProbMap>> {
    if logits.data.iter().any(|v| !v.as_f64().is_finite()) {
        return Err(Error::Numerical("network produced non-finite logits".into()));
    }
    (0..logits.n)
        .map(|i| {
            let s = logits.sample(i);
            let plane = logits.plane();
            let arr = Array3::from_shape_fn((logits.h, logits.w, logits.c), |(y, x, c)| {
                s[c * plane + y * logits.w + x].as_f64()
            });
            ProbMap::from_logits(arr.view())
        })
        .collect()
}

/// Packs per-image `H x W x C` gradients (stacked along rows) back into NCHW.
pub fn stacked_grad_to_tensor<T: Real>(grad: &Array3<f64>, n: usize) -> Tensor<T> {
    let (rows, w, c) = grad.dim();
    let h = rows / n;
    let mut out = Tensor::zeros(n, c, h, w);
    let plane = h * w;
    for ((r, x, k), &g) in grad.indexed_iter() {
        let (i, y) = (r / h, r % h);
        out.data[(i * c + k) * plane + y * w + x] = T::from_f64(g);
    }
    out
}

/// Single-image convenience wrapper producing the probability map.
pub fn forward_softmax<T: Real>(model: &SegModel<T>, image: &Tensor<T>, mode: BnMode) -> Result<ProbMap> {
    if image.n != 1 {
        return Err(Error::Argument(format!("expected one image, got a batch of {}", image.n)));
    }
    Ok(model.predict(image, mode)?.pop().unwrap())
}
