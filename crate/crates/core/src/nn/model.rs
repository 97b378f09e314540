//! Parameters, forward pass and explicit reverse pass for a [`ModelSpec`].

use super::arch::{ModelSpec, Resolved};
use super::layers::{
    batchnorm_backward_slice, batchnorm_infer_backward_slice, batchnorm_infer_slice, batchnorm_train_slice, bn_update_running,
    conv_backward, conv_forward, dense_backward_slice, dense_forward_slice, maxpool_backward_slice,
    maxpool_forward_slice, relu_backward_slice, relu_slice, softmax_cross_entropy_slice,
    BnBatchStats, Mode,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Parameters of one layer. Conv and dense layers hold `[weight, bias]`;
/// batch norm holds `[gamma, beta]` plus running `[mean, var]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Real = f32> {
    pub trainable: Vec<Tensor<T>>,
    pub running: Vec<Tensor<T>>,
}

impl<T: Real> LayerParams<T> {
    fn empty() -> Self {
        Self {
            trainable: Vec::new(),
            running: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub layers: Vec<LayerParams<T>>,
}

/// Expected tensor shapes per layer: (trainable, running).
fn param_shapes(spec: &ModelSpec) -> Result<Vec<(Vec<Vec<usize>>, Vec<Vec<usize>>)>> {
    Ok(spec
        .resolve()?
        .into_iter()
        .zip(&spec.layers)
        .map(|(r, l)| match r {
            Resolved::Conv(g) => {
                let [kt, kh, kw] = g.kernel;
                let w = if matches!(l, super::arch::LayerSpec::Conv3D { .. }) {
                    vec![g.filters, g.input.c, kt, kh, kw]
                } else {
                    vec![g.filters, g.input.c, kh, kw]
                };
                (vec![w, vec![g.filters]], vec![])
            }
            Resolved::Dense { inputs, units } => (vec![vec![inputs, units], vec![units]], vec![]),
            Resolved::BatchNorm { features } => (
                vec![vec![features], vec![features]],
                vec![vec![features], vec![features]],
            ),
            _ => (vec![], vec![]),
        })
        .collect())
}

impl<T: Real> ModelParams<T> {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero
    /// biases, unit batch-norm scale, zero shift, running mean 0 / var 1.
    pub fn init(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (r, (trainable, running)) in spec.resolve()?.into_iter().zip(param_shapes(spec)?) {
            let mut lp = LayerParams::empty();
            match r {
                Resolved::Conv(_) | Resolved::Dense { .. } => {
                    let w = &trainable[0];
                    let (fan_in, fan_out) = if w.len() == 2 {
                        (w[0], w[1])
                    } else {
                        let receptive: usize = w[2..].iter().product();
                        (w[1] * receptive, w[0] * receptive)
                    };
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    lp.trainable.push(Tensor::rand_uniform(rng, w, T::of(-limit), T::of(limit))?);
                    lp.trainable.push(Tensor::zeros(&trainable[1])?);
                }
                Resolved::BatchNorm { .. } => {
                    lp.trainable.push(Tensor::new(&trainable[0], T::one())?);
                    lp.trainable.push(Tensor::zeros(&trainable[1])?);
                    lp.running.push(Tensor::zeros(&running[0])?);
                    lp.running.push(Tensor::new(&running[1], T::one())?);
                }
                _ => {}
            }
            layers.push(lp);
        }
        Ok(Self { layers })
    }

    /// Verifies every tensor has the shape `spec` requires.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let shapes = param_shapes(spec)?;
        if shapes.len() != self.layers.len() {
            return Err(Error::InconsistentState(format!(
                "params have {} layers, spec has {}",
                self.layers.len(),
                shapes.len()
            )));
        }
        for (i, (lp, (tr, ru))) in self.layers.iter().zip(shapes).enumerate() {
            let got_tr: Vec<&[usize]> = lp.trainable.iter().map(|t| t.shape()).collect();
            let got_ru: Vec<&[usize]> = lp.running.iter().map(|t| t.shape()).collect();
            let want_tr: Vec<&[usize]> = tr.iter().map(|s| s.as_slice()).collect();
            let want_ru: Vec<&[usize]> = ru.iter().map(|s| s.as_slice()).collect();
            if got_tr != want_tr || got_ru != want_ru {
                return Err(Error::InconsistentState(format!(
                    "layer {i}: parameter shapes {got_tr:?}/{got_ru:?}, expected {want_tr:?}/{want_ru:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| l.trainable.iter())
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.trainable.iter_mut())
    }

    /// Every tensor in architecture order, running statistics included.
    pub fn all_tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| l.trainable.iter().chain(l.running.iter()))
    }

    pub fn all_tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.trainable.iter_mut().chain(l.running.iter_mut()))
    }

    pub fn trainable_len(&self) -> usize {
        self.trainable().map(|t| t.len()).sum()
    }

    pub fn flat_trainable(&self) -> Vec<T> {
        self.trainable().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_trainable(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.trainable_len() {
            return Err(Error::shape(format!(
                "{} values for {} trainable parameters",
                flat.len(),
                self.trainable_len()
            )));
        }
        let mut off = 0;
        for t in self.trainable_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Folds the batch statistics of a train-mode forward into the running
    /// estimates of every batch-norm layer.
    pub fn absorb_batch_stats(&mut self, cache: &ForwardCache<T>) {
        if cache.mode != Some(Mode::Train) {
            return;
        }
        for (lp, stats) in self.layers.iter_mut().zip(&cache.bn) {
            if let [mean, var] = lp.running.as_mut_slice() {
                bn_update_running(mean.data_mut(), var.data_mut(), stats);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    trainable: l.trainable.iter().map(|t| t.cast()).collect(),
                    running: l.running.iter().map(|t| t.cast()).collect(),
                })
                .collect(),
        }
    }
}

/// Gradients aligned with [`ModelParams::trainable`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real = f32> {
    pub layers: Vec<Vec<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| l.trainable.iter().map(|t| vec![T::zero(); t.len()]).collect())
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        self.layers.iter_mut().flatten().for_each(|g| g.fill(T::zero()));
    }

    pub fn flat(&self) -> Vec<T> {
        self.layers.iter().flatten().flatten().copied().collect()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Vec<T>> {
        self.layers.iter().flatten()
    }
}

/// Activations and pooling indices retained for the backward pass.
/// Reusable across batches; buffers only grow.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache<T: Real = f32> {
    batch: usize,
    mode: Option<Mode>,
    /// `acts[0]` is the input batch; `acts[i + 1]` is the output of layer `i`.
    acts: Vec<Vec<T>>,
    argmax: Vec<Vec<u32>>,
    bn: Vec<BnBatchStats>,
    col: Vec<T>,
    grad_a: Vec<T>,
    grad_b: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn new() -> Self {
        Self {
            batch: 0,
            mode: None,
            acts: Vec::new(),
            argmax: Vec::new(),
            bn: Vec::new(),
            col: Vec::new(),
            grad_a: Vec::new(),
            grad_b: Vec::new(),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Number of layers the cache holds outputs for.
    pub fn layer_count(&self) -> usize {
        self.acts.len().saturating_sub(1)
    }

    /// Activation `i` for the whole batch (`0` is the input).
    pub fn activation(&self, i: usize) -> &[T] {
        &self.acts[i]
    }

    pub fn logits(&self) -> &[T] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Class with the largest logit for each row (ties -> class 0).
    pub fn predictions(&self, classes: usize) -> Vec<usize> {
        self.logits()
            .chunks_exact(classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect()
    }
}

/// Hash of the piecewise-linear regime of the cached pass: which ReLU
/// outputs are positive and which positions each max pool selected.
/// Finite differences are only meaningful between points that share it.
pub fn activation_pattern<T: Real>(spec: &ModelSpec, cache: &ForwardCache<T>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |v: u64| h = (h ^ v).wrapping_mul(0x0000_0100_0000_01b3);
    for (i, layer) in spec.layers.iter().enumerate().take(cache.layer_count()) {
        match layer {
            super::arch::LayerSpec::ReLU => {
                for chunk in cache.acts[i + 1].chunks(64) {
                    eat(chunk.iter().enumerate().fold(0u64, |m, (b, &v)| m | (((v > T::zero()) as u64) << b)));
                }
            }
            super::arch::LayerSpec::MaxPool2D { .. } | super::arch::LayerSpec::MaxPool3D { .. } => {
                cache.argmax[i].iter().for_each(|&a| eat(a as u64));
            }
            _ => {}
        }
    }
    h
}

impl<T: Real> ForwardCache<T> {
    fn mode(&self) -> Mode {
        self.mode.unwrap_or(Mode::Infer)
    }
}

/// Runs `batch` samples (`input` holds them back to back) through the model.
pub fn forward<T: Real>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    input: &[T],
    batch: usize,
    mode: Mode,
    cache: &mut ForwardCache<T>,
) -> Result<()> {
    let resolved = spec.resolve()?;
    let shapes = spec.shapes()?;
    if params.layers.len() != resolved.len() {
        return Err(Error::InconsistentState(format!(
            "params have {} layers, spec has {}",
            params.layers.len(),
            resolved.len()
        )));
    }
    if batch == 0 || input.len() != batch * spec.input_len() {
        return Err(Error::shape(format!(
            "input of {} values is not {batch} samples of {}",
            input.len(),
            spec.input_len()
        )));
    }
    let n = resolved.len();
    cache.batch = batch;
    cache.mode = Some(mode);
    cache.acts.resize_with(n + 1, Vec::new);
    cache.argmax.resize_with(n, Vec::new);
    cache.bn.resize_with(n, BnBatchStats::default);
    cache.acts[0].clear();
    cache.acts[0].extend_from_slice(input);
    for (i, r) in resolved.iter().enumerate() {
        let in_len = shapes[i].len();
        let out_len = shapes[i + 1].len();
        let (head, tail) = cache.acts.split_at_mut(i + 1);
        let x = &head[i];
        let y = &mut tail[0];
        y.resize(batch * out_len, T::zero());
        let lp = &params.layers[i];
        match *r {
            Resolved::Conv(g) => {
                let (w, b) = (lp.trainable[0].data(), lp.trainable[1].data());
                for (xs, ys) in x.chunks_exact(in_len).zip(y.chunks_exact_mut(out_len)) {
                    conv_forward(xs, &g, w, b, ys, &mut cache.col);
                }
            }
            Resolved::Pool { input: iv, pool } => {
                let am = &mut cache.argmax[i];
                am.resize(batch * out_len, 0);
                for ((xs, ys), a) in x
                    .chunks_exact(in_len)
                    .zip(y.chunks_exact_mut(out_len))
                    .zip(am.chunks_exact_mut(out_len))
                {
                    maxpool_forward_slice(xs, iv, pool, ys, a);
                }
            }
            Resolved::Relu => relu_slice(x, y),
            Resolved::Flatten => y.copy_from_slice(x),
            Resolved::BatchNorm { features } => {
                let (gamma, beta) = (lp.trainable[0].data(), lp.trainable[1].data());
                match mode {
                    Mode::Train => batchnorm_train_slice(x, batch, features, gamma, beta, y, &mut cache.bn[i])?,
                    Mode::Infer => batchnorm_infer_slice(
                        x,
                        features,
                        gamma,
                        beta,
                        lp.running[0].data(),
                        lp.running[1].data(),
                        y,
                    ),
                }
            }
            Resolved::Dense { inputs, .. } => {
                dense_forward_slice(x, batch, inputs, lp.trainable[0].data(), lp.trainable[1].data(), y)
            }
        }
    }
    Ok(())
}

/// Reverse pass from `dlogits` (gradient of the loss with respect to the
/// logits of the cached batch). Accumulates into `grads`.
pub fn backward<T: Real>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    cache: &mut ForwardCache<T>,
    dlogits: &[T],
    grads: &mut Gradients<T>,
) -> Result<()> {
    backward_impl(spec, params, cache, dlogits, Some(grads), None).map(|_| ())
}

/// Gradient of the cached forward pass with respect to activation
/// `act_index` (`i + 1` is the output of layer `i`), for the whole batch.
pub fn activation_gradient<T: Real>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    cache: &mut ForwardCache<T>,
    dlogits: &[T],
    act_index: usize,
) -> Result<Vec<T>> {
    backward_impl(spec, params, cache, dlogits, None, Some(act_index))?
        .ok_or_else(|| Error::InconsistentState(format!("activation {act_index} not reached")))
}

fn backward_impl<T: Real>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    cache: &mut ForwardCache<T>,
    dlogits: &[T],
    mut grads: Option<&mut Gradients<T>>,
    capture: Option<usize>,
) -> Result<Option<Vec<T>>> {
    let resolved = spec.resolve()?;
    let shapes = spec.shapes()?;
    let n = resolved.len();
    let batch = cache.batch;
    if cache.acts.len() != n + 1 || batch == 0 || cache.acts[0].len() != batch * spec.input_len() {
        return Err(Error::InconsistentState(format!(
            "cache holds {} layers for a {n}-layer spec",
            cache.layer_count()
        )));
    }
    if params.layers.len() != n {
        return Err(Error::InconsistentState("params do not match spec".into()));
    }
    if let Some(g) = grads.as_deref() {
        if g.layers.len() != n {
            return Err(Error::InconsistentState("gradients do not match spec".into()));
        }
    }
    if dlogits.len() != cache.acts[n].len() {
        return Err(Error::shape(format!(
            "upstream gradient of {} values for {} logits",
            dlogits.len(),
            cache.acts[n].len()
        )));
    }
    if let Some(c) = capture {
        if c > n {
            return Err(Error::shape(format!("activation index {c} beyond {n} layers")));
        }
    }
    let mode = cache.mode();
    let mut g = std::mem::take(&mut cache.grad_a);
    let mut dx = std::mem::take(&mut cache.grad_b);
    g.clear();
    g.extend_from_slice(dlogits);
    let mut captured = None;
    if capture == Some(n) {
        captured = Some(g.clone());
    }
    for i in (0..n).rev() {
        let need_dx = i > 0 || capture == Some(0);
        if !need_dx && grads.is_none() {
            break;
        }
        let in_len = shapes[i].len();
        let out_len = shapes[i + 1].len();
        let x = &cache.acts[i];
        let y = &cache.acts[i + 1];
        let lp = &params.layers[i];
        dx.resize(batch * in_len, T::zero());
        match resolved[i] {
            Resolved::Conv(geom) => {
                let w = lp.trainable[0].data();
                let mut lg = grads.as_deref_mut().map(|gr| &mut gr.layers[i]);
                for (s, (xs, gs)) in x.chunks_exact(in_len).zip(g.chunks_exact(out_len)).enumerate() {
                    let dparams = lg.as_deref_mut().map(|v| {
                        let (dw, db) = v.split_at_mut(1);
                        (dw[0].as_mut_slice(), db[0].as_mut_slice())
                    });
                    let dxs = if need_dx {
                        Some(&mut dx[s * in_len..(s + 1) * in_len])
                    } else {
                        None
                    };
                    conv_backward(xs, &geom, w, gs, dparams, dxs, &mut cache.col);
                }
            }
            Resolved::Pool { .. } => {
                let am = &cache.argmax[i];
                for ((gs, a), d) in g
                    .chunks_exact(out_len)
                    .zip(am.chunks_exact(out_len))
                    .zip(dx.chunks_exact_mut(in_len))
                {
                    maxpool_backward_slice(gs, a, d);
                }
            }
            Resolved::Relu => relu_backward_slice(y, &g, &mut dx),
            Resolved::Flatten => dx.copy_from_slice(&g),
            Resolved::BatchNorm { features } => {
                let gamma = lp.trainable[0].data();
                let mut dgamma = vec![T::zero(); features];
                let mut dbeta = vec![T::zero(); features];
                match mode {
                    Mode::Train => batchnorm_backward_slice(
                        &g,
                        &cache.bn[i],
                        gamma,
                        batch,
                        features,
                        &mut dx,
                        &mut dgamma,
                        &mut dbeta,
                    ),
                    Mode::Infer => batchnorm_infer_backward_slice(
                        &g,
                        x,
                        features,
                        gamma,
                        lp.running[0].data(),
                        lp.running[1].data(),
                        &mut dx,
                        &mut dgamma,
                        &mut dbeta,
                    ),
                }
                if let Some(gr) = grads.as_deref_mut() {
                    for (acc, v) in gr.layers[i][0].iter_mut().zip(&dgamma) {
                        *acc = *acc + *v;
                    }
                    for (acc, v) in gr.layers[i][1].iter_mut().zip(&dbeta) {
                        *acc = *acc + *v;
                    }
                }
            }
            Resolved::Dense { inputs, units } => {
                let w = lp.trainable[0].data();
                let mut scratch_w;
                let mut scratch_b;
                let (dw, db): (&mut [T], &mut [T]) = match grads.as_deref_mut() {
                    Some(gr) => {
                        let (a, b) = gr.layers[i].split_at_mut(1);
                        (a[0].as_mut_slice(), b[0].as_mut_slice())
                    }
                    None => {
                        scratch_w = vec![T::zero(); inputs * units];
                        scratch_b = vec![T::zero(); units];
                        (&mut scratch_w, &mut scratch_b)
                    }
                };
                let dxo = if need_dx { Some(dx.as_mut_slice()) } else { None };
                dense_backward_slice(x, batch, inputs, w, &g, dw, db, dxo);
            }
        }
        std::mem::swap(&mut g, &mut dx);
        if capture == Some(i) {
            captured = Some(g.clone());
            if grads.is_none() {
                break;
            }
        }
    }
    cache.grad_a = g;
    cache.grad_b = dx;
    Ok(captured)
}

/// Train-mode forward, mean cross-entropy and backward in one call.
/// `grads` is overwritten. Returns the loss.
pub fn loss_and_gradients<T: Real>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    input: &[T],
    labels: &[usize],
    cache: &mut ForwardCache<T>,
    grads: &mut Gradients<T>,
) -> Result<T> {
    forward(spec, params, input, labels.len(), Mode::Train, cache)?;
    let mut dlogits = vec![T::zero(); cache.logits().len()];
    let loss = softmax_cross_entropy_slice(cache.logits(), spec.num_classes, labels, &mut dlogits)?;
    grads.zero();
    backward(spec, params, cache, &dlogits, grads)?;
    Ok(loss)
}

/// Mean cross-entropy of a forward pass in `mode`, without gradients.
pub fn loss<T: Real>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    input: &[T],
    labels: &[usize],
    mode: Mode,
    cache: &mut ForwardCache<T>,
) -> Result<T> {
    forward(spec, params, input, labels.len(), mode, cache)?;
    let mut dlogits = vec![T::zero(); cache.logits().len()];
    softmax_cross_entropy_slice(cache.logits(), spec.num_classes, labels, &mut dlogits)
}
