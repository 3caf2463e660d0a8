//! Forward and backward passes.
//!
//! BatchNorm runs in one of three modes: `TrainStandard` normalizes with the
//! current batch statistics and updates the running estimates, `Eval` uses
//! the running estimates, and `CleanStats` normalizes with statistics
//! injected from a previously summarized clean batch. Injected statistics
//! are treated as constants in the backward pass: no gradient flows into the
//! batch that produced them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::fnv1a64;
use crate::tensor::Tensor;

use super::{bn_key, BnStats, GradientSet, LayerSpec, ModelState};

/// Per-channel means and variances of the activations entering each
/// BatchNorm layer during a single forward pass of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStatsSummary {
    pub layers: BTreeMap<String, ChannelStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStatsSummary {
    /// Checksum over the exact statistic bytes; used by the embedding loop
    /// to prove which statistics normalized a watermark batch.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (k, st) in &self.layers {
            bytes.extend_from_slice(k.as_bytes());
            for v in st.mean.iter().chain(st.var.iter()) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }
}

/// BatchNorm behavior for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Statistics from the current batch; running estimates updated.
    TrainStandard,
    /// Statistics from the running estimates; nothing mutates.
    Eval,
    /// Statistics injected from a clean-batch summary; nothing mutates and
    /// the statistics are constants in the backward graph.
    CleanStats(&'a BatchStatsSummary),
}

/// How a forward pass sources BatchNorm statistics. `Batch { update: false }`
/// is the internal mode behind [`collect_bn_stats`], [`bn_reestimate`], and
/// the noisy-weight gradient estimator: batch statistics without mutation.
#[derive(Clone, Copy)]
pub(crate) enum StatsSource<'a> {
    Batch { update: bool },
    Running,
    Injected(&'a BatchStatsSummary),
}

impl<'a> From<&BnMode<'a>> for StatsSource<'a> {
    fn from(mode: &BnMode<'a>) -> Self {
        match mode {
            BnMode::TrainStandard => StatsSource::Batch { update: true },
            BnMode::Eval => StatsSource::Running,
            BnMode::CleanStats(s) => StatsSource::Injected(s),
        }
    }
}

#[derive(Debug)]
enum Extra {
    None,
    Pool { argmax: Vec<usize> },
    Bn { xhat: Tensor, inv_std: Vec<f64>, through_batch: bool },
}

/// Activation record produced by a forward pass; sufficient for an exact
/// backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    inputs: Vec<Tensor>,
    extras: Vec<Extra>,
    batch_stats: BTreeMap<String, ChannelStats>,
}

impl ForwardCache {
    /// Batch statistics observed at each BatchNorm input, available when the
    /// pass normalized with batch statistics.
    pub fn batch_stats(&self) -> &BTreeMap<String, ChannelStats> {
        &self.batch_stats
    }
}

/// Channel layout of a BN input: (channels, per-channel count, row stride).
/// Rank-4 tensors normalize per channel over N*H*W, rank-2 per feature
/// over N.
fn bn_layout(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        4 => Ok((shape[1], shape[0] * shape[2] * shape[3])),
        2 => Ok((shape[1], shape[0])),
        _ => Err(Error::Config(format!(
            "batchnorm expects rank-2 or rank-4 input, got {shape:?}"
        ))),
    }
}

fn bn_channel_stats(x: &Tensor) -> Result<ChannelStats> {
    let (channels, count) = bn_layout(x.shape())?;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for_each_channel(x, |c, v| mean[c] += v);
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    for_each_channel(x, |c, v| {
        let d = v - mean[c];
        var[c] += d * d;
    });
    for v in var.iter_mut() {
        *v /= count as f64;
    }
    Ok(ChannelStats { mean, var })
}

/// Visit every element of a BN input with its channel index.
fn for_each_channel(x: &Tensor, mut f: impl FnMut(usize, f64)) {
    let shape = x.shape();
    if shape.len() == 4 {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let data = x.data();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for &v in &data[base..base + hw] {
                    f(ci, v);
                }
            }
        }
    } else {
        let (n, d) = x.dims2();
        let data = x.data();
        for ni in 0..n {
            for ci in 0..d {
                f(ci, data[ni * d + ci]);
            }
        }
    }
}

fn map_channelwise(x: &Tensor, mut f: impl FnMut(usize, f64) -> f64) -> Tensor {
    let mut out = x.clone();
    let shape = out.shape().to_vec();
    if shape.len() == 4 {
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let data = out.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for v in &mut data[base..base + hw] {
                    *v = f(ci, *v);
                }
            }
        }
    } else {
        let (n, d) = (shape[0], shape[1]);
        let data = out.data_mut();
        for ni in 0..n {
            for ci in 0..d {
                let idx = ni * d + ci;
                data[idx] = f(ci, data[idx]);
            }
        }
    }
    out
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, d) = x.dims2();
    let (wd, k) = w.dims2();
    assert_eq!(d, wd, "dense input width {d} vs weight rows {wd}");
    let mut out = vec![0.0; n * k];
    let xd = x.data();
    let wdat = w.data();
    let bd = b.data();
    for ni in 0..n {
        let row = &mut out[ni * k..(ni + 1) * k];
        row.copy_from_slice(bd);
        for di in 0..d {
            let xv = xd[ni * d + di];
            if xv == 0.0 {
                continue;
            }
            let wrow = &wdat[di * k..(di + 1) * k];
            for (o, wv) in row.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    Tensor::new(vec![n, k], out)
}

fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = x.dims2();
    let (_, k) = w.dims2();
    let mut dx = vec![0.0; n * d];
    let mut dw = vec![0.0; d * k];
    let mut db = vec![0.0; k];
    let xd = x.data();
    let wd = w.data();
    let dod = dout.data();
    for ni in 0..n {
        let drow = &dod[ni * k..(ni + 1) * k];
        for (dbv, dv) in db.iter_mut().zip(drow) {
            *dbv += dv;
        }
        for di in 0..d {
            let wrow = &wd[di * k..(di + 1) * k];
            let mut acc = 0.0;
            for (wv, dv) in wrow.iter().zip(drow) {
                acc += wv * dv;
            }
            dx[ni * d + di] = acc;
            let xv = xd[ni * d + di];
            if xv != 0.0 {
                let dwrow = &mut dw[di * k..(di + 1) * k];
                for (dwv, dv) in dwrow.iter_mut().zip(drow) {
                    *dwv += xv * dv;
                }
            }
        }
    }
    (
        Tensor::new(vec![n, d], dx),
        Tensor::new(w.shape().to_vec(), dw),
        Tensor::new(vec![k], db),
    )
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, ci, h, wd) = x.dims4();
    let ws = w.shape();
    let (co, wci, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(ci, wci, "conv input channels {ci} vs weight channels {wci}");
    let pad = k / 2;
    let hw = h * wd;
    let mut out = vec![0.0; n * co * hw];
    let xd = x.data();
    let wdat = w.data();
    let bd = b.data();
    for ni in 0..n {
        for oc in 0..co {
            let obase = (ni * co + oc) * hw;
            out[obase..obase + hw].fill(bd[oc]);
            for icc in 0..ci {
                let ibase = (ni * ci + icc) * hw;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdat[((oc * ci + icc) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        // output rows where the shifted input row is valid
                        let ylo = pad.saturating_sub(ky);
                        let yhi = (h + pad - ky).min(h);
                        let xlo = pad.saturating_sub(kx);
                        let xhi = (wd + pad - kx).min(wd);
                        for y in ylo..yhi {
                            let iy = y + ky - pad;
                            let orow = obase + y * wd;
                            let irow = ibase + iy * wd;
                            let ox = &mut out[orow + xlo..orow + xhi];
                            let ix = &xd[irow + xlo + kx - pad..irow + xhi + kx - pad];
                            for (o, i) in ox.iter_mut().zip(ix) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, h, wd], out)
}

fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, ci, h, wd) = x.dims4();
    let ws = w.shape();
    let (co, k) = (ws[0], ws[2]);
    let pad = k / 2;
    let hw = h * wd;
    let mut dx = vec![0.0; n * ci * hw];
    let mut dw = vec![0.0; w.numel()];
    let mut db = vec![0.0; co];
    let xd = x.data();
    let wdat = w.data();
    let dod = dout.data();
    for ni in 0..n {
        for oc in 0..co {
            let obase = (ni * co + oc) * hw;
            let dorow_all = &dod[obase..obase + hw];
            db[oc] += dorow_all.iter().sum::<f64>();
            for icc in 0..ci {
                let ibase = (ni * ci + icc) * hw;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * ci + icc) * k + ky) * k + kx;
                        let wv = wdat[widx];
                        let mut wacc = 0.0;
                        let ylo = pad.saturating_sub(ky);
                        let yhi = (h + pad - ky).min(h);
                        let xlo = pad.saturating_sub(kx);
                        let xhi = (wd + pad - kx).min(wd);
                        for y in ylo..yhi {
                            let iy = y + ky - pad;
                            let orow = obase + y * wd;
                            let irow = ibase + iy * wd;
                            let dorow = &dod[orow + xlo..orow + xhi];
                            let ix = &xd[irow + xlo + kx - pad..irow + xhi + kx - pad];
                            for (dv, iv) in dorow.iter().zip(ix) {
                                wacc += dv * iv;
                            }
                            if wv != 0.0 {
                                let dix =
                                    &mut dx[irow + xlo + kx - pad..irow + xhi + kx - pad];
                                for (di, dv) in dix.iter_mut().zip(dorow) {
                                    *di += wv * dv;
                                }
                            }
                        }
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx),
        Tensor::new(w.shape().to_vec(), dw),
        Tensor::new(vec![co], db),
    )
}

fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even extents, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    for ni in 0..n {
        for ci in 0..c {
            let ibase = (ni * c + ci) * h * w;
            let obase = (ni * c + ci) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ibase + (oy * 2 + dy) * w + ox * 2 + dx;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    argmax[obase + oy * ow + ox] = best_idx;
                }
            }
        }
    }
    (Tensor::new(vec![n, c, oh, ow], out), argmax)
}

fn check_finite(t: &Tensor, layer_index: usize, layer: &LayerSpec) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite activation after layer {layer_index} ({layer:?})"
        )))
    }
}

fn validate_batch(model: &ModelState, batch: &Tensor) -> Result<()> {
    if batch.extent0() == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    match model.layers.first() {
        Some(LayerSpec::Dense { inputs, .. }) => {
            if batch.shape().len() != 2 || batch.shape()[1] != *inputs {
                return Err(Error::Config(format!(
                    "batch shape {:?} does not match dense input width {inputs}",
                    batch.shape()
                )));
            }
        }
        Some(LayerSpec::Conv2d { in_channels, .. }) => {
            let (c, h, w) = model.input_shape;
            if batch.shape() != [batch.extent0(), c, h, w] || c != *in_channels {
                return Err(Error::Config(format!(
                    "batch shape {:?} does not match conv input ({c}, {h}, {w})",
                    batch.shape()
                )));
            }
        }
        Some(LayerSpec::Flatten) => {
            let (c, h, w) = model.input_shape;
            if batch.shape() != [batch.extent0(), c, h, w] {
                return Err(Error::Config(format!(
                    "batch shape {:?} does not match input ({c}, {h}, {w})",
                    batch.shape()
                )));
            }
        }
        _ => {}
    }
    Ok(())
}

pub(crate) fn run_forward(
    model: &ModelState,
    batch: &Tensor,
    source: StatsSource,
) -> Result<(Tensor, ForwardCache, Option<BTreeMap<String, BnStats>>)> {
    validate_batch(model, batch)?;
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut extras = Vec::with_capacity(model.layers.len());
    let mut batch_stats = BTreeMap::new();
    let mut updated: Option<BTreeMap<String, BnStats>> = None;
    let mut x = batch.clone();

    for (i, layer) in model.layers.iter().enumerate() {
        inputs.push(x.clone());
        let mut extra = Extra::None;
        x = match layer {
            LayerSpec::Dense { .. } => {
                let w = &model.params[&super::param_name(i, "weight")];
                let b = &model.params[&super::param_name(i, "bias")];
                dense_forward(&x, w, b)
            }
            LayerSpec::Conv2d { .. } => {
                let w = &model.params[&super::param_name(i, "weight")];
                let b = &model.params[&super::param_name(i, "bias")];
                conv_forward(&x, w, b)
            }
            LayerSpec::Relu => map_channelwise(&x, |_, v| v.max(0.0)),
            LayerSpec::MaxPool2 => {
                let (out, argmax) = maxpool_forward(&x);
                extra = Extra::Pool { argmax };
                out
            }
            LayerSpec::Flatten => {
                let n = x.extent0();
                let rest: usize = x.shape()[1..].iter().product();
                x.reshaped(vec![n, rest])
            }
            LayerSpec::BatchNorm { channels } => {
                let key = bn_key(i);
                let stats = &model.bn_stats[&key];
                let (in_channels, _) = bn_layout(x.shape())?;
                if in_channels != *channels {
                    return Err(Error::Config(format!(
                        "batchnorm layer {i} has {channels} channels, input has {in_channels}"
                    )));
                }
                let (mean, var, through_batch) = match source {
                    StatsSource::Batch { update } => {
                        let st = bn_channel_stats(&x)?;
                        if update {
                            let sink = updated.get_or_insert_with(|| model.bn_stats.clone());
                            let entry = sink.get_mut(&key).expect("bn key");
                            let m = stats.momentum;
                            for (r, b) in entry.running_mean.iter_mut().zip(&st.mean) {
                                *r = (1.0 - m) * *r + m * b;
                            }
                            for (r, b) in entry.running_var.iter_mut().zip(&st.var) {
                                *r = (1.0 - m) * *r + m * b;
                            }
                        }
                        batch_stats.insert(key.clone(), st.clone());
                        (st.mean, st.var, true)
                    }
                    StatsSource::Running => {
                        (stats.running_mean.clone(), stats.running_var.clone(), false)
                    }
                    StatsSource::Injected(summary) => {
                        let st = summary.layers.get(&key).ok_or_else(|| {
                            Error::Config(format!(
                                "injected statistics are missing batchnorm layer {key}"
                            ))
                        })?;
                        if st.mean.len() != *channels {
                            return Err(Error::Config(format!(
                                "injected statistics for {key} have {} channels, layer has {channels}",
                                st.mean.len()
                            )));
                        }
                        (st.mean.clone(), st.var.clone(), false)
                    }
                };
                let eps = stats.epsilon;
                let inv_std: Vec<f64> =
                    var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let xhat = map_channelwise(&x, |c, v| (v - mean[c]) * inv_std[c]);
                let gamma = model.params[&super::param_name(i, "gamma")].data().to_vec();
                let beta = model.params[&super::param_name(i, "beta")].data().to_vec();
                let y = map_channelwise(&xhat, |c, v| gamma[c] * v + beta[c]);
                extra = Extra::Bn { xhat, inv_std, through_batch };
                y
            }
        };
        check_finite(&x, i, layer)?;
        extras.push(extra);
    }

    let cache = ForwardCache { inputs, extras, batch_stats };
    Ok((x, cache, updated))
}

/// Forward pass returning logits and an activation record. In
/// `TrainStandard` mode running statistics are updated by exponential moving
/// average; in `Eval`/`CleanStats` nothing mutates.
pub fn forward(
    model: &mut ModelState,
    batch: &Tensor,
    mode: &BnMode,
) -> Result<(Tensor, ForwardCache)> {
    let (logits, cache, updated) = run_forward(model, batch, StatsSource::from(mode))?;
    if let Some(stats) = updated {
        model.bn_stats = stats;
    }
    Ok((logits, cache))
}

/// Eval-mode logits without mutation.
pub fn forward_eval(model: &ModelState, batch: &Tensor) -> Result<Tensor> {
    let (logits, _, _) = run_forward(model, batch, StatsSource::Running)?;
    Ok(logits)
}

/// Eval-mode activation entering the first `Flatten` layer: the feature map
/// of the final convolutional block. This is the layer fine-pruning ranks
/// and the source of exported embeddings.
pub fn forward_features(model: &ModelState, batch: &Tensor) -> Result<Tensor> {
    let flatten = model
        .layers
        .iter()
        .position(|l| matches!(l, LayerSpec::Flatten))
        .ok_or_else(|| Error::Config("model has no flatten layer".into()))?;
    let truncated = ModelState {
        arch_id: model.arch_id.clone(),
        layers: model.layers[..flatten].to_vec(),
        params: model.params.clone(),
        bn_stats: model.bn_stats.clone(),
        input_shape: model.input_shape,
    };
    let (features, _, _) = run_forward(&truncated, batch, StatsSource::Running)?;
    Ok(features)
}

/// Exact gradients of the cached computation with respect to every
/// parameter, given the loss gradient at the logits.
pub(crate) fn backward(
    model: &ModelState,
    cache: &ForwardCache,
    dlogits: &Tensor,
) -> GradientSet {
    let mut grads = GradientSet::zeros_like(model);
    let mut dx = dlogits.clone();
    for (i, layer) in model.layers.iter().enumerate().rev() {
        let input = &cache.inputs[i];
        dx = match layer {
            LayerSpec::Dense { .. } => {
                let w = &model.params[&super::param_name(i, "weight")];
                let (dxn, dw, db) = dense_backward(input, w, &dx);
                grads.tensors.insert(super::param_name(i, "weight"), dw);
                grads.tensors.insert(super::param_name(i, "bias"), db);
                dxn
            }
            LayerSpec::Conv2d { .. } => {
                let w = &model.params[&super::param_name(i, "weight")];
                let (dxn, dw, db) = conv_backward(input, w, &dx);
                grads.tensors.insert(super::param_name(i, "weight"), dw);
                grads.tensors.insert(super::param_name(i, "bias"), db);
                dxn
            }
            LayerSpec::Relu => {
                let mut d = dx.clone();
                for (dv, xv) in d.data_mut().iter_mut().zip(input.data()) {
                    if *xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                d
            }
            LayerSpec::MaxPool2 => {
                let Extra::Pool { argmax } = &cache.extras[i] else {
                    unreachable!("pool cache")
                };
                let mut d = vec![0.0; input.numel()];
                for (k, &src) in argmax.iter().enumerate() {
                    d[src] += dx.data()[k];
                }
                Tensor::new(input.shape().to_vec(), d)
            }
            LayerSpec::Flatten => dx.reshaped(input.shape().to_vec()),
            LayerSpec::BatchNorm { channels } => {
                let Extra::Bn { xhat, inv_std, through_batch } = &cache.extras[i] else {
                    unreachable!("bn cache")
                };
                let gamma = model.params[&super::param_name(i, "gamma")].data();
                let (c, count) = bn_layout(input.shape()).expect("bn layout");
                debug_assert_eq!(c, *channels);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                {
                    let dyd = dx.data();
                    let xh = xhat.data();
                    let mut k = 0;
                    for_each_channel(input, |ch, _| {
                        dgamma[ch] += dyd[k] * xh[k];
                        dbeta[ch] += dyd[k];
                        k += 1;
                    });
                }
                let dxn = if *through_batch {
                    // dx = gamma*inv_std/m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
                    let m = count as f64;
                    let dyd = dx.data().to_vec();
                    let xh = xhat.data().to_vec();
                    let sum_dy = dbeta.clone();
                    let sum_dyxh = dgamma.clone();
                    let mut out = dx.clone();
                    let mut k = 0;
                    let outd = out.data_mut();
                    for_each_channel(input, |ch, _| {
                        outd[k] = gamma[ch] * inv_std[ch] / m
                            * (m * dyd[k] - sum_dy[ch] - xh[k] * sum_dyxh[ch]);
                        k += 1;
                    });
                    out
                } else {
                    // frozen statistics: dx = dy * gamma * inv_std
                    let mut out = dx.clone();
                    let mut k = 0;
                    let outd = out.data_mut();
                    for_each_channel(input, |ch, _| {
                        outd[k] *= gamma[ch] * inv_std[ch];
                        k += 1;
                    });
                    out
                };
                grads
                    .tensors
                    .insert(super::param_name(i, "gamma"), Tensor::new(vec![c], dgamma));
                grads
                    .tensors
                    .insert(super::param_name(i, "beta"), Tensor::new(vec![c], dbeta));
                dxn
            }
        };
    }
    grads
}

/// Loss, per-sample cross-entropies, and exact parameter gradients for one
/// weighted batch.
pub struct BatchGrad {
    pub loss: f64,
    pub per_sample_ce: Vec<f64>,
    pub grads: GradientSet,
}

/// Softmax cross-entropy with per-sample weights: the loss is
/// `sum_i w_i * ce_i`. A uniform weight of `1/N` gives the plain mean.
pub fn weighted_loss_and_grad(
    model: &mut ModelState,
    batch: &Tensor,
    labels: &[usize],
    weights: &[f64],
    mode: &BnMode,
) -> Result<BatchGrad> {
    let (batch_grad, updated, _) =
        weighted_loss_and_grad_source(model, batch, labels, weights, StatsSource::from(mode))?;
    if let Some(stats) = updated {
        model.bn_stats = stats;
    }
    Ok(batch_grad)
}

pub(crate) fn weighted_loss_and_grad_source(
    model: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    weights: &[f64],
    source: StatsSource,
) -> Result<(BatchGrad, Option<BTreeMap<String, BnStats>>, BatchStatsSummary)> {
    let n = batch.extent0();
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if labels.len() != n || weights.len() != n {
        return Err(Error::Argument(format!(
            "batch has {n} samples but {} labels and {} weights",
            labels.len(),
            weights.len()
        )));
    }
    let classes = model.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let (logits, cache, updated) = run_forward(model, batch, source)?;
    let k = classes;
    let ld = logits.data();
    let mut dlogits = vec![0.0; n * k];
    let mut per_sample_ce = Vec::with_capacity(n);
    let mut loss = 0.0;
    for i in 0..n {
        let row = &ld[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum_exp = 0.0;
        for &z in row {
            sum_exp += (z - max).exp();
        }
        let lse = max + sum_exp.ln();
        let ce = lse - row[labels[i]];
        per_sample_ce.push(ce);
        loss += weights[i] * ce;
        let drow = &mut dlogits[i * k..(i + 1) * k];
        for (j, &z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            drow[j] = weights[i] * p;
        }
        drow[labels[i]] -= weights[i];
    }
    let grads = backward(model, &cache, &Tensor::new(vec![n, k], dlogits));
    let summary = BatchStatsSummary { layers: cache.batch_stats };
    Ok((BatchGrad { loss, per_sample_ce, grads }, updated, summary))
}

/// Weighted loss/gradients plus the batch statistics the pass observed at
/// each BatchNorm input. One fused `TrainStandard` pass gives the embedding
/// loop both the clean gradient and the clean-batch summary.
pub(crate) fn weighted_loss_grad_collecting(
    model: &mut ModelState,
    batch: &Tensor,
    labels: &[usize],
    weights: &[f64],
) -> Result<(BatchGrad, BatchStatsSummary)> {
    let (bg, updated, summary) = weighted_loss_and_grad_source(
        model,
        batch,
        labels,
        weights,
        StatsSource::Batch { update: true },
    )?;
    if let Some(stats) = updated {
        model.bn_stats = stats;
    }
    Ok((bg, summary))
}

/// Loss/gradients with frozen batch statistics (each BatchNorm normalizes
/// with the batch's own statistics; nothing mutates, and the statistics are
/// part of the differentiated graph).
pub(crate) fn frozen_batch_loss_and_grad(
    model: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    weights: &[f64],
) -> Result<BatchGrad> {
    let (bg, _, _) =
        weighted_loss_and_grad_source(model, batch, labels, weights, StatsSource::Batch {
            update: false,
        })?;
    Ok(bg)
}

/// Mean softmax cross-entropy of one batch without mutating any state.
///
/// The loss value under `TrainStandard` depends only on the batch statistics,
/// not on the running-estimate update, so this evaluates with batch
/// statistics and skips the update.
pub fn batch_loss(
    model: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    mode: &BnMode,
) -> Result<f64> {
    let n = batch.extent0();
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let source = match mode {
        BnMode::TrainStandard => StatsSource::Batch { update: false },
        other => StatsSource::from(other),
    };
    let (logits, _, _) = run_forward(model, batch, source)?;
    let classes = model.num_classes();
    let ld = logits.data();
    let mut loss = 0.0;
    for i in 0..n {
        let row = &ld[i * classes..(i + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[labels[i]];
    }
    Ok(loss / n as f64)
}

/// Mean softmax cross-entropy and its exact gradients.
pub fn loss_and_grad(
    model: &mut ModelState,
    batch: &Tensor,
    labels: &[usize],
    mode: &BnMode,
) -> Result<(f64, GradientSet)> {
    let n = batch.extent0();
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let w = vec![1.0 / n as f64; n];
    let bg = weighted_loss_and_grad(model, batch, labels, &w, mode)?;
    Ok((bg.loss, bg.grads))
}

/// Per-layer, per-channel means and variances of one batch as seen at each
/// BatchNorm input during a single forward pass (batch statistics normalize
/// the pass; nothing mutates).
pub fn collect_bn_stats(model: &ModelState, batch: &Tensor) -> Result<BatchStatsSummary> {
    if batch.extent0() == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let (_, cache, _) = run_forward(model, batch, StatsSource::Batch { update: false })?;
    Ok(BatchStatsSummary { layers: cache.batch_stats })
}

/// Replace every BatchNorm running mean/var with aggregate statistics of the
/// given clean data. Parameters are untouched. Each pass sweeps the data in
/// fixed batches with batch-statistics normalization upstream; the aggregate
/// is identical across passes, so `passes > 1` only re-verifies it.
pub fn bn_reestimate(
    model: &mut ModelState,
    clean_images: &Tensor,
    passes: usize,
) -> Result<()> {
    if clean_images.extent0() == 0 {
        return Err(Error::Argument("empty dataset for bn re-estimation".into()));
    }
    if passes == 0 {
        return Err(Error::Argument("bn re-estimation needs at least one pass".into()));
    }
    let n = clean_images.extent0();
    let batch = n.min(256);
    // per bn layer: (count, sum, sumsq) per channel
    let mut agg: BTreeMap<String, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..passes {
        agg.clear();
        let mut start = 0;
        while start < n {
            let stop = (start + batch).min(n);
            let indices: Vec<usize> = (start..stop).collect();
            let chunk = clean_images.gather0(&indices);
            let (_, cache, _) = run_forward(model, &chunk, StatsSource::Batch { update: false })?;
            let m = (stop - start) as f64;
            for (key, st) in cache.batch_stats.iter() {
                // batch stats are per-channel over m * spatial elements; the
                // spatial factor is constant per layer so per-batch weights
                // stay proportional to the sample count.
                let entry = agg.entry(key.clone()).or_insert_with(|| {
                    (0.0, vec![0.0; st.mean.len()], vec![0.0; st.mean.len()])
                });
                entry.0 += m;
                for (s, mu) in entry.1.iter_mut().zip(&st.mean) {
                    *s += m * mu;
                }
                for ((sq, mu), va) in entry.2.iter_mut().zip(&st.mean).zip(&st.var) {
                    *sq += m * (va + mu * mu);
                }
            }
            start = stop;
        }
    }
    for (key, (count, sum, sumsq)) in agg {
        let stats = model
            .bn_stats
            .get_mut(&key)
            .ok_or_else(|| Error::Config(format!("unknown batchnorm layer {key}")))?;
        for ((rm, rv), (s, sq)) in stats
            .running_mean
            .iter_mut()
            .zip(stats.running_var.iter_mut())
            .zip(sum.iter().zip(&sumsq))
        {
            let mean = s / count;
            *rm = mean;
            *rv = (sq / count - mean * mean).max(0.0);
        }
    }
    Ok(())
}
