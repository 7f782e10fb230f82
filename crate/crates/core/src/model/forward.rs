use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};

/// Scores are `m + (1 − 2m)·σ(o)`, which keeps them strictly inside (0, 1)
/// even where the logistic saturates in floating point.
pub const SQUASH_MARGIN: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f64>,
}

/// Intermediates of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    embeddings: DMatrix<f64>,
    /// `tanh(W e_i + b)` for every sentence, attention pooling only.
    attn_hidden: Option<DMatrix<f64>>,
    pub alpha: Vec<f64>,
    /// Input to each trunk layer; the first entry is the pooled vector.
    inputs: Vec<DVector<f64>>,
    pre: Vec<DVector<f64>>,
    post: Vec<DVector<f64>>,
    masks: Vec<Option<DVector<f64>>>,
    trunk_out: DVector<f64>,
    sigma: DVector<f64>,
    pub scores: Vec<f64>,
}

impl ForwardCache {
    pub fn pooled(&self) -> &DVector<f64> {
        &self.inputs[0]
    }
}

fn logistic(o: f64) -> f64 {
    if o >= 0.0 {
        1.0 / (1.0 + (-o).exp())
    } else {
        let e = o.exp();
        e / (1.0 + e)
    }
}

fn embedding_matrix(params: &ModelParams, window: &[&[f64]]) -> Result<DMatrix<f64>> {
    if window.is_empty() {
        return Err(Error::invalid("empty window"));
    }
    let d = params.input_dim;
    let mut m = DMatrix::zeros(d, window.len());
    for (i, e) in window.iter().enumerate() {
        if e.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: e.len(),
            });
        }
        if !e.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding {i} of window")));
        }
        m.column_mut(i).copy_from_slice(e);
    }
    Ok(m)
}

/// Runs the encoder on one window. `dropout_seed = Some(_)` selects training
/// mode with a dropout mask drawn from that seed; `None` is evaluation mode.
pub fn forward(
    params: &ModelParams,
    cfg: &EncoderConfig,
    window: &[&[f64]],
    dropout_seed: Option<u64>,
) -> Result<ForwardCache> {
    let e = embedding_matrix(params, window)?;
    let k = e.ncols();

    let (alpha, attn_hidden) = match &params.attention {
        None => (vec![1.0 / k as f64; k], None),
        Some(att) => {
            let mut h = &att.proj.w * &e;
            for mut col in h.column_iter_mut() {
                col += &att.proj.b;
                col.apply(|x| *x = x.tanh());
            }
            let s = h.tr_mul(&att.query);
            let max = s.max();
            let ex: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = ex.iter().sum();
            (ex.into_iter().map(|v| v / z).collect(), Some(h))
        }
    };
    let pooled = &e * DVector::from_column_slice(&alpha);

    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let p = cfg.dropout;
    let mut inputs = Vec::with_capacity(params.trunk.len());
    let mut pre = Vec::with_capacity(params.trunk.len());
    let mut post = Vec::with_capacity(params.trunk.len());
    let mut masks = Vec::with_capacity(params.trunk.len());
    let mut x = pooled;
    for layer in &params.trunk {
        let a = &layer.w * &x + &layer.b;
        let h = a.map(|v| cfg.activation.apply(v));
        let mask = match rng.as_mut() {
            Some(r) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                Some(DVector::from_fn(h.len(), |_, _| {
                    if r.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                }))
            }
            _ => None,
        };
        let out = match &mask {
            Some(m) => h.component_mul(m),
            None => h.clone(),
        };
        inputs.push(std::mem::replace(&mut x, out));
        pre.push(a);
        post.push(h);
        masks.push(mask);
    }
    let logits = &params.heads.w * &x + &params.heads.b;
    let sigma = logits.map(logistic);
    let scores: Vec<f64> = sigma
        .iter()
        .map(|s| SQUASH_MARGIN + (1.0 - 2.0 * SQUASH_MARGIN) * s)
        .collect();
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::NonFinite("model output".into()));
    }
    Ok(ForwardCache {
        embeddings: e,
        attn_hidden,
        alpha,
        inputs,
        pre,
        post,
        masks,
        trunk_out: x,
        sigma,
        scores,
    })
}

/// Evaluation-mode scores.
pub fn predict(params: &ModelParams, cfg: &EncoderConfig, window: &[&[f64]]) -> Result<Prediction> {
    Ok(Prediction {
        scores: forward(params, cfg, window, None)?.scores,
    })
}

/// Masked mean squared error and its exact gradient for the dropout
/// realization drawn from `dropout_seed`.
pub fn loss_and_grads(
    params: &ModelParams,
    cfg: &EncoderConfig,
    window: &[&[f64]],
    labels: &[Option<f64>],
    dropout_seed: Option<u64>,
) -> Result<(f64, ModelParams)> {
    let mut grads = params.zeros_like();
    let loss = accumulate_grads(params, cfg, window, labels, dropout_seed, &mut grads)?;
    Ok((loss, grads))
}

/// Like [`loss_and_grads`] but adds the gradient into `grads`.
pub(crate) fn accumulate_grads(
    params: &ModelParams,
    cfg: &EncoderConfig,
    window: &[&[f64]],
    labels: &[Option<f64>],
    dropout_seed: Option<u64>,
    grads: &mut ModelParams,
) -> Result<f64> {
    let n_heads = params.heads.n_out();
    if labels.len() != n_heads {
        return Err(Error::Dimension {
            expected: n_heads,
            got: labels.len(),
        });
    }
    let n_present = labels.iter().filter(|l| l.is_some()).count();
    if n_present == 0 {
        return Err(Error::invalid("window has no unmasked labels"));
    }
    if labels.iter().flatten().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("label".into()));
    }
    let c = forward(params, cfg, window, dropout_seed)?;

    let mut loss = 0.0;
    let mut d_out = DVector::zeros(n_heads);
    for (j, l) in labels.iter().enumerate() {
        if let Some(t) = l {
            let r = c.scores[j] - t;
            loss += r * r;
            let s = c.sigma[j];
            d_out[j] = 2.0 * r / n_present as f64 * (1.0 - 2.0 * SQUASH_MARGIN) * s * (1.0 - s);
        }
    }
    loss /= n_present as f64;

    grads.heads.w.ger(1.0, &d_out, &c.trunk_out, 1.0);
    grads.heads.b += &d_out;
    let mut dx = params.heads.w.tr_mul(&d_out);

    for l in (0..params.trunk.len()).rev() {
        if let Some(m) = &c.masks[l] {
            dx.component_mul_assign(m);
        }
        let da = DVector::from_fn(dx.len(), |i, _| {
            dx[i] * cfg.activation.derivative(c.pre[l][i], c.post[l][i])
        });
        grads.trunk[l].w.ger(1.0, &da, &c.inputs[l], 1.0);
        grads.trunk[l].b += &da;
        dx = params.trunk[l].w.tr_mul(&da);
    }

    if let (Some(att), Some(h), Some(g_att)) =
        (&params.attention, &c.attn_hidden, grads.attention.as_mut())
    {
        let d_alpha = c.embeddings.tr_mul(&dx);
        let mean: f64 = c.alpha.iter().zip(d_alpha.iter()).map(|(a, d)| a * d).sum();
        let ds = DVector::from_fn(c.alpha.len(), |i, _| c.alpha[i] * (d_alpha[i] - mean));
        g_att.query.gemv(1.0, h, &ds, 1.0);
        let mut dz = &att.query * ds.transpose();
        dz.zip_apply(h, |g, hv| *g *= 1.0 - hv * hv);
        g_att.proj.w.gemm(1.0, &dz, &c.embeddings.transpose(), 1.0);
        for col in dz.column_iter() {
            g_att.proj.b += col;
        }
    }
    Ok(loss)
}
