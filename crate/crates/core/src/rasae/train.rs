use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasae::adamw::AdamW;
use crate::rasae::model::{clip_rows, normalize_rows, DecoderParams, Sae};
use crate::rasae::schedule::WarmupCosine;
use crate::rasae::{fit_anchors, SaeConfig};
use crate::rng::named_stream;
use crate::tensorio::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mse: f64,
    pub fraction_variance_explained: f64,
    pub dead_latents: usize,
    pub mean_l0: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Total loss after every optimizer step.
    pub loss_curve: Vec<f64>,
}

/// Reconstruction quality of a model over a whole feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mse: f64,
    pub fraction_variance_explained: f64,
    /// Latents that fire on no row.
    pub dead_latents: usize,
    pub mean_l0: f64,
}

const EVAL_CHUNK: usize = 512;

pub fn evaluate(sae: &Sae, data: &FeatureMatrix) -> Result<Evaluation> {
    let d = sae.input_dim();
    if data.cols() != d {
        return Err(Error::Shape(format!(
            "data has {} columns, SAE expects {d}",
            data.cols()
        )));
    }
    let n = data.rows();
    if n == 0 {
        return Ok(Evaluation {
            mse: 0.0,
            fraction_variance_explained: 1.0,
            dead_latents: sae.n_concepts(),
            mean_l0: 0.0,
        });
    }
    let atoms = sae.atoms();
    let mut mean = vec![0.0; d];
    for r in data.iter_rows() {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    struct Partial {
        sse: f64,
        sst: f64,
        l0: usize,
        fired: Vec<bool>,
    }
    let partials: Vec<Partial> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(EVAL_CHUNK)
        .map(|rows| {
            let mut p = Partial {
                sse: 0.0,
                sst: 0.0,
                l0: 0,
                fired: vec![false; sae.n_concepts()],
            };
            for &i in rows {
                let x: Vec<f64> = data.row(i).iter().map(|&v| f64::from(v)).collect();
                let code = sae.encode_row(&x);
                let mut resid = x.clone();
                for &(j, a) in &code {
                    p.fired[j] = true;
                    for (r, &w) in resid.iter_mut().zip(&atoms[j * d..(j + 1) * d]) {
                        *r -= a * w;
                    }
                }
                p.l0 += code.len();
                p.sse += resid.iter().map(|v| v * v).sum::<f64>();
                p.sst += x.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            p
        })
        .collect();
    let mut sse = 0.0;
    let mut sst = 0.0;
    let mut l0 = 0;
    let mut fired = vec![false; sae.n_concepts()];
    for p in partials {
        sse += p.sse;
        sst += p.sst;
        l0 += p.l0;
        fired.iter_mut().zip(p.fired).for_each(|(f, g)| *f |= g);
    }
    Ok(Evaluation {
        mse: sse / (n * d) as f64,
        fraction_variance_explained: if sst > 0.0 { 1.0 - sse / sst } else { 1.0 },
        dead_latents: fired.iter().filter(|f| !**f).count(),
        mean_l0: l0 as f64 / n as f64,
    })
}

struct Optimizers {
    enc_w: AdamW,
    enc_b: AdamW,
    decoder: AdamW,
    relaxation: Option<AdamW>,
}

/// Trains a top-k SAE on the rows of `data`.
///
/// Minibatch AdamW over shuffled rows with a warmup + cosine schedule. Free
/// atoms are renormalized to unit length after every step; archetypal atoms
/// stay convex combinations of unit-length anchors and the optional
/// relaxation is clipped to `relaxation_bound`. Identical inputs and seed
/// give bitwise-identical models.
pub fn train(data: &FeatureMatrix, cfg: &SaeConfig) -> Result<(Sae, TrainReport)> {
    cfg.validate()?;
    let d = cfg.input_dim;
    if data.cols() != d {
        return Err(Error::Shape(format!(
            "data has {} columns, config says {d}",
            data.cols()
        )));
    }
    data.validate_finite()?;
    let n = data.rows();
    if cfg.epochs > 0 && n < cfg.batch_size {
        return Err(Error::Argument(format!(
            "{n} rows is fewer than one batch of {}",
            cfg.batch_size
        )));
    }
    let anchors = if cfg.is_archetypal() {
        Some(fit_anchors(data, cfg.anchors, cfg.anchor_strategy, cfg.seed)?)
    } else {
        None
    };
    let mut sae = Sae::init(cfg, anchors)?;
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok((sae, report));
    }

    let k = cfg.n_concepts;
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = WarmupCosine::new(
        cfg.lr_max,
        cfg.lr_final,
        cfg.warmup_frac,
        cfg.epochs * batches_per_epoch,
    );
    let adam = |len: usize, wd: f64| AdamW::new(len, cfg.beta1, cfg.beta2, cfg.adam_eps, wd);
    let mut opt = Optimizers {
        enc_w: adam(k * d, cfg.weight_decay),
        enc_b: adam(k, 0.0),
        decoder: adam(
            match &sae.decoder {
                DecoderParams::Free { atoms } => atoms.len(),
                DecoderParams::Archetypal { logits, .. } => logits.len(),
            },
            cfg.weight_decay,
        ),
        relaxation: cfg
            .is_archetypal()
            .then_some(())
            .filter(|_| cfg.relaxation_bound > 0.0)
            .map(|_| adam(k * d, 0.0)),
    };

    let mut rng = named_stream(cfg.seed, "sae/shuffle");
    let mut order: Vec<usize> = (0..n).collect();
    let mut since_fired = vec![0usize; k];
    let mut step = 0usize;
    let mut batch = Vec::with_capacity(cfg.batch_size * d);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            batch.clear();
            for &i in rows {
                batch.extend(data.row(i).iter().map(|&v| f64::from(v)));
            }
            let dead: Vec<bool> = since_fired
                .iter()
                .map(|&s| s >= cfg.dead_steps_threshold)
                .collect();
            let sel = sae.select(&batch, Some(&dead));
            let (loss, grads) = sae.loss_and_grad(&batch, &sel);
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: b,
                    loss: loss.total,
                });
            }
            let mut fired = vec![false; k];
            for s in &sel {
                for &j in &s.active {
                    fired[j] = true;
                }
            }
            for (c, f) in since_fired.iter_mut().zip(&fired) {
                *c = if *f { 0 } else { *c + 1 };
            }

            let lr = schedule.lr(step);
            opt.enc_w.step(&mut sae.enc_w, &grads.enc_w, lr);
            opt.enc_b.step(&mut sae.enc_b, &grads.enc_b, lr);
            match &mut sae.decoder {
                DecoderParams::Free { atoms } => {
                    opt.decoder.step(atoms, &grads.decoder, lr);
                    normalize_rows(atoms, d);
                }
                DecoderParams::Archetypal {
                    logits, relaxation, ..
                } => {
                    opt.decoder.step(logits, &grads.decoder, lr);
                    if let (Some(r), Some(g), Some(o)) =
                        (relaxation.as_mut(), grads.relaxation.as_ref(), opt.relaxation.as_mut())
                    {
                        o.step(r, g, lr);
                        clip_rows(r, d, cfg.relaxation_bound);
                    }
                }
            }
            report.loss_curve.push(loss.total);
            epoch_loss += loss.total;
        }
        let eval = evaluate(&sae, data)?;
        if !eval.mse.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: batches_per_epoch,
                loss: eval.mse,
            });
        }
        log::info!(
            "epoch {epoch}: mse {:.6}, fve {:.4}, dead {}, l0 {:.2}",
            eval.mse,
            eval.fraction_variance_explained,
            eval.dead_latents,
            eval.mean_l0
        );
        report.epochs.push(EpochStats {
            epoch,
            mean_loss: epoch_loss / batches_per_epoch as f64,
            mse: eval.mse,
            fraction_variance_explained: eval.fraction_variance_explained,
            dead_latents: eval.dead_latents,
            mean_l0: eval.mean_l0,
        });
    }
    Ok((sae, report))
}
