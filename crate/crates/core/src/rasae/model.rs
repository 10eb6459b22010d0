use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rasae::{Archetypes, Dictionary, SaeConfig, SparseCodeMatrix};
use crate::rng::named_stream;
use crate::tensorio::FeatureMatrix;

/// Decoder parameters: either free atoms or softmax logits over fixed anchors.
#[derive(Debug, Clone, PartialEq)]
pub enum DecoderParams {
    Free {
        atoms: Vec<f64>,
    },
    Archetypal {
        logits: Vec<f64>,
        anchors: Vec<f64>,
        n_anchors: usize,
        relaxation: Option<Vec<f64>>,
    },
}

/// Identifies one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    EncoderWeights,
    EncoderBias,
    Atoms,
    Logits,
    Relaxation,
}

/// A top-k sparse autoencoder. Encoder: affine map, rectifier, top-k mask.
/// Decoder: linear in the (optionally archetypal) dictionary, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Sae {
    pub(crate) config: SaeConfig,
    pub(crate) enc_w: Vec<f64>,
    pub(crate) enc_b: Vec<f64>,
    pub(crate) decoder: DecoderParams,
}

/// Latents that take part in the loss for one row: the top-k set and the
/// auxiliary dead-latent set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowSelection {
    pub active: Vec<usize>,
    pub aux: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub aux: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    /// Atoms gradient (free) or logits gradient (archetypal).
    pub decoder: Vec<f64>,
    pub relaxation: Option<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, p: Param) -> Option<&[f64]> {
        match p {
            Param::EncoderWeights => Some(&self.enc_w),
            Param::EncoderBias => Some(&self.enc_b),
            Param::Atoms | Param::Logits => Some(&self.decoder),
            Param::Relaxation => self.relaxation.as_deref(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.enc_w
            .iter()
            .chain(&self.enc_b)
            .chain(&self.decoder)
            .chain(self.relaxation.iter().flatten())
            .all(|v| v.is_finite())
    }
}

fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    out.par_chunks_mut(cols)
        .zip(logits.par_chunks(cols))
        .for_each(|(o, l)| {
            let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (oi, &li) in o.iter_mut().zip(l) {
                *oi = (li - max).exp();
                s += *oi;
            }
            o.iter_mut().for_each(|v| *v /= s);
        });
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Keeps the `k` largest strictly positive entries, ordered by value
/// descending with ties broken by lower index.
pub fn top_k_positive(values: &[f64], k: usize, candidates: Option<&[bool]>) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..values.len())
        .filter(|&j| values[j] > 0.0 && candidates.is_none_or(|c| c[j]))
        .collect();
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    if pos.len() > k {
        pos.select_nth_unstable_by(k, cmp);
        pos.truncate(k);
    }
    pos.sort_by(cmp);
    pos
}

impl Sae {
    /// Fresh model: free atoms are Xavier-uniform rows scaled to unit length,
    /// archetypal logits start concentrated on mutually distant anchors. The
    /// encoder starts as the transpose of the decoder, with zero bias.
    pub fn init(config: &SaeConfig, anchors: Option<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        let (k, d) = (config.n_concepts, config.input_dim);
        let mut rng = named_stream(config.seed, "sae/init");
        let bound = (6.0 / (d + k) as f64).sqrt();
        let enc_b = vec![0.0; k];
        let decoder = match anchors {
            None => {
                if config.is_archetypal() {
                    return Err(Error::Argument("archetypal config needs anchors".into()));
                }
                let mut atoms: Vec<f64> =
                    (0..k * d).map(|_| rng.random_range(-bound..bound)).collect();
                normalize_rows(&mut atoms, d);
                DecoderParams::Free { atoms }
            }
            Some(mut anchors) => {
                let m = config.anchors;
                if anchors.len() != m * d {
                    return Err(Error::Shape(format!(
                        "expected {m}x{d} anchors, got {} values",
                        anchors.len()
                    )));
                }
                normalize_rows(&mut anchors, d);
                let mut order: Vec<usize> = (0..m).collect();
                order.shuffle(&mut rng);
                if m * k <= SPREAD_LIMIT {
                    order = spread_order(&anchors, d, order[0], k.min(m));
                }
                // ~90% of each row's mass on one anchor.
                let peak = (9.0 * (m.max(2) - 1) as f64).ln();
                let mut logits = vec![0.0; k * m];
                for i in 0..k {
                    logits[i * m + order[i % m]] = peak;
                }
                let relaxation = (config.relaxation_bound > 0.0).then(|| vec![0.0; k * d]);
                DecoderParams::Archetypal {
                    logits,
                    anchors,
                    n_anchors: m,
                    relaxation,
                }
            }
        };
        let mut sae = Self {
            config: config.clone(),
            enc_w: Vec::new(),
            enc_b,
            decoder,
        };
        // Tied start: encoder rows equal the initial atoms.
        sae.enc_w = sae.atoms();
        Ok(sae)
    }

    /// Assembles a model from explicit parameters (e.g. a hand-built encoder).
    pub fn from_parts(
        config: SaeConfig,
        enc_w: Vec<f64>,
        enc_b: Vec<f64>,
        decoder: DecoderParams,
    ) -> Result<Self> {
        config.validate()?;
        let (k, d) = (config.n_concepts, config.input_dim);
        if enc_w.len() != k * d || enc_b.len() != k {
            return Err(Error::Shape(format!(
                "encoder must be {k}x{d} with {k} biases"
            )));
        }
        match &decoder {
            DecoderParams::Free { atoms } if atoms.len() != k * d => {
                return Err(Error::Shape(format!("atoms must be {k}x{d}")))
            }
            DecoderParams::Archetypal {
                logits,
                anchors,
                n_anchors,
                relaxation,
            } => {
                if logits.len() != k * n_anchors
                    || anchors.len() != n_anchors * d
                    || relaxation.as_ref().is_some_and(|r| r.len() != k * d)
                {
                    return Err(Error::Shape("archetypal parameter shapes disagree".into()));
                }
            }
            _ => {}
        }
        Ok(Self {
            config,
            enc_w,
            enc_b,
            decoder,
        })
    }

    pub fn config(&self) -> &SaeConfig {
        &self.config
    }

    pub fn n_concepts(&self) -> usize {
        self.config.n_concepts
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn decoder(&self) -> &DecoderParams {
        &self.decoder
    }

    pub fn encoder_weights(&self) -> &[f64] {
        &self.enc_w
    }

    pub fn encoder_bias(&self) -> &[f64] {
        &self.enc_b
    }

    pub fn param_mut(&mut self, p: Param) -> Option<&mut [f64]> {
        match (p, &mut self.decoder) {
            (Param::EncoderWeights, _) => Some(&mut self.enc_w),
            (Param::EncoderBias, _) => Some(&mut self.enc_b),
            (Param::Atoms, DecoderParams::Free { atoms }) => Some(atoms),
            (Param::Logits, DecoderParams::Archetypal { logits, .. }) => Some(logits),
            (Param::Relaxation, DecoderParams::Archetypal { relaxation, .. }) => {
                relaxation.as_deref_mut()
            }
            _ => None,
        }
    }

    /// Row-stochastic archetype weights (softmax of the logits).
    pub fn archetype_weights(&self) -> Option<Vec<f64>> {
        match &self.decoder {
            DecoderParams::Archetypal {
                logits, n_anchors, ..
            } => Some(softmax_rows(logits, *n_anchors)),
            DecoderParams::Free { .. } => None,
        }
    }

    /// Materializes the `n_concepts x dim` atom matrix.
    pub fn atoms(&self) -> Vec<f64> {
        let d = self.config.input_dim;
        match &self.decoder {
            DecoderParams::Free { atoms } => atoms.clone(),
            DecoderParams::Archetypal {
                logits,
                anchors,
                n_anchors,
                relaxation,
            } => {
                let m = *n_anchors;
                let w = softmax_rows(logits, m);
                let mut atoms = vec![0.0; self.config.n_concepts * d];
                atoms
                    .par_chunks_mut(d)
                    .zip(w.par_chunks(m))
                    .for_each(|(atom, wr)| {
                        for (a, &wa) in wr.iter().enumerate() {
                            if wa == 0.0 {
                                continue;
                            }
                            for (o, &v) in atom.iter_mut().zip(&anchors[a * d..(a + 1) * d]) {
                                *o += wa * v;
                            }
                        }
                    });
                if let Some(r) = relaxation {
                    atoms.iter_mut().zip(r).for_each(|(a, &r)| *a += r);
                }
                atoms
            }
        }
    }

    pub fn dictionary(&self) -> Dictionary {
        let atoms = self.atoms();
        let archetypes = match &self.decoder {
            DecoderParams::Free { .. } => None,
            DecoderParams::Archetypal {
                logits,
                anchors,
                n_anchors,
                relaxation,
            } => Some(Archetypes {
                weights: softmax_rows(logits, *n_anchors),
                anchors: anchors.clone(),
                n_anchors: *n_anchors,
                relaxation: relaxation.clone(),
                relaxation_bound: self.config.relaxation_bound,
            }),
        };
        Dictionary {
            n_concepts: self.config.n_concepts,
            dim: self.config.input_dim,
            atoms,
            archetypes,
        }
    }

    pub fn pre_activations_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.config.input_dim;
        for ((o, w), &b) in out.iter_mut().zip(self.enc_w.chunks_exact(d)).zip(&self.enc_b) {
            *o = dot(w, x) + b;
        }
    }

    /// Sparse code for one input row, sorted by concept index.
    pub fn encode_row(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let mut pre = vec![0.0; self.config.n_concepts];
        self.pre_activations_into(x, &mut pre);
        let mut sel: Vec<(usize, f64)> = top_k_positive(&pre, self.config.top_k, None)
            .into_iter()
            .map(|j| (j, pre[j]))
            .collect();
        sel.sort_by_key(|&(j, _)| j);
        sel
    }

    pub fn encode(&self, features: &FeatureMatrix) -> Result<SparseCodeMatrix> {
        if features.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "features have {} columns, SAE expects {}",
                features.cols(),
                self.config.input_dim
            )));
        }
        let rows: Vec<Vec<(usize, f64)>> = (0..features.rows())
            .into_par_iter()
            .map(|i| {
                let x: Vec<f64> = features.row(i).iter().map(|&v| f64::from(v)).collect();
                self.encode_row(&x)
            })
            .collect();
        let mut codes = SparseCodeMatrix::empty(self.config.n_concepts);
        for r in &rows {
            codes.push_row_unchecked(r);
        }
        Ok(codes)
    }

    /// Chooses the top-k set and, among `dead` latents, the `aux_k` largest
    /// positive pre-activations for every row of `batch` (row-major, `dim` wide).
    pub fn select(&self, batch: &[f64], dead: Option<&[bool]>) -> Vec<RowSelection> {
        let d = self.config.input_dim;
        let k = self.config.n_concepts;
        batch
            .par_chunks_exact(d)
            .map(|x| {
                let mut pre = vec![0.0; k];
                self.pre_activations_into(x, &mut pre);
                let active = top_k_positive(&pre, self.config.top_k, None);
                let aux = match dead {
                    Some(dead) if self.config.aux_k > 0 && self.config.aux_lambda > 0.0 => {
                        let mut cand = dead.to_vec();
                        for &j in &active {
                            cand[j] = false;
                        }
                        top_k_positive(&pre, self.config.aux_k, Some(&cand))
                    }
                    _ => Vec::new(),
                };
                RowSelection { active, aux }
            })
            .collect()
    }

    /// Loss for a fixed selection. With the selection held fixed the loss is
    /// a smooth function of every parameter, which is what the gradient
    /// check relies on.
    pub fn loss(&self, batch: &[f64], sel: &[RowSelection]) -> LossParts {
        self.loss_and_grad_impl(batch, sel, &self.atoms(), false).0
    }

    pub fn loss_and_grad(&self, batch: &[f64], sel: &[RowSelection]) -> (LossParts, Gradients) {
        let atoms = self.atoms();
        let (loss, grads) = self.loss_and_grad_impl(batch, sel, &atoms, true);
        (loss, grads.expect("gradients requested"))
    }

    /// Main term: mean squared reconstruction error over all entries.
    /// Auxiliary term: `aux_lambda` times the mean squared error left after
    /// the dead latents also reconstruct the residual, over rows that have
    /// any auxiliary latents.
    fn loss_and_grad_impl(
        &self,
        batch: &[f64],
        sel: &[RowSelection],
        atoms: &[f64],
        want_grad: bool,
    ) -> (LossParts, Option<Gradients>) {
        let d = self.config.input_dim;
        let k = self.config.n_concepts;
        let b = batch.len() / d;
        let lambda = self.config.aux_lambda;
        let scale = 1.0 / (b * d) as f64;

        struct RowOut {
            pre_active: Vec<f64>,
            pre_aux: Vec<f64>,
            g_main: Vec<f64>,
            g_aux: Option<Vec<f64>>,
            sq: f64,
            aux_sq: f64,
        }

        let rows: Vec<RowOut> = batch
            .par_chunks_exact(d)
            .zip(sel.par_iter())
            .map(|(x, s)| {
                let pre = |j: usize| dot(&self.enc_w[j * d..(j + 1) * d], x) + self.enc_b[j];
                let pre_active: Vec<f64> = s.active.iter().map(|&j| pre(j)).collect();
                let pre_aux: Vec<f64> = s.aux.iter().map(|&j| pre(j)).collect();
                let mut resid = x.to_vec();
                for (&j, &a) in s.active.iter().zip(&pre_active) {
                    for (r, &w) in resid.iter_mut().zip(&atoms[j * d..(j + 1) * d]) {
                        *r -= a * w;
                    }
                }
                let sq: f64 = resid.iter().map(|v| v * v).sum();
                let g_main: Vec<f64> = resid.iter().map(|r| -2.0 * scale * r).collect();
                let (g_aux, aux_sq) = if s.aux.is_empty() {
                    (None, 0.0)
                } else {
                    let mut r2 = resid.clone();
                    for (&j, &a) in s.aux.iter().zip(&pre_aux) {
                        for (r, &w) in r2.iter_mut().zip(&atoms[j * d..(j + 1) * d]) {
                            *r -= a * w;
                        }
                    }
                    let aux_sq: f64 = r2.iter().map(|v| v * v).sum();
                    let g: Vec<f64> = r2.iter().map(|r| -2.0 * lambda * scale * r).collect();
                    (Some(g), aux_sq)
                };
                RowOut {
                    pre_active,
                    pre_aux,
                    g_main,
                    g_aux,
                    sq,
                    aux_sq,
                }
            })
            .collect();

        let mse = rows.iter().map(|r| r.sq).sum::<f64>() * scale;
        let aux = rows.iter().map(|r| r.aux_sq).sum::<f64>() * scale;
        let loss = LossParts {
            total: mse + lambda * aux,
            mse,
            aux,
        };
        if !want_grad {
            return (loss, None);
        }

        let mut g_enc_w = vec![0.0; k * d];
        let mut g_enc_b = vec![0.0; k];
        let mut g_atoms = vec![0.0; k * d];
        for ((x, s), r) in batch.chunks_exact(d).zip(sel).zip(&rows) {
            // The top-k reconstruction feeds both terms; the auxiliary
            // reconstruction feeds only the second.
            let g_total: Vec<f64> = match &r.g_aux {
                Some(ga) => r.g_main.iter().zip(ga).map(|(a, b)| a + b).collect(),
                None => r.g_main.clone(),
            };
            let groups = std::iter::once((&s.active, &r.pre_active, &g_total))
                .chain(r.g_aux.as_ref().map(|ga| (&s.aux, &r.pre_aux, ga)));
            for (idx, pre, g) in groups {
                for (&j, &a) in idx.iter().zip(pre.iter()) {
                    let atom = &atoms[j * d..(j + 1) * d];
                    let dpre = dot(g, atom);
                    g_enc_b[j] += dpre;
                    for ((gw, &xv), (ga, &gv)) in g_enc_w[j * d..(j + 1) * d]
                        .iter_mut()
                        .zip(x)
                        .zip(g_atoms[j * d..(j + 1) * d].iter_mut().zip(g.iter()))
                    {
                        *gw += dpre * xv;
                        *ga += a * gv;
                    }
                }
            }
        }

        let (decoder, relaxation) = match &self.decoder {
            DecoderParams::Free { .. } => (g_atoms, None),
            DecoderParams::Archetypal {
                logits,
                anchors,
                n_anchors,
                relaxation,
            } => {
                let m = *n_anchors;
                let w = softmax_rows(logits, m);
                let mut g_logits = vec![0.0; k * m];
                g_logits
                    .par_chunks_mut(m)
                    .zip(w.par_chunks(m))
                    .zip(g_atoms.par_chunks(d))
                    .for_each(|((gl, wr), ga)| {
                        if ga.iter().all(|&v| v == 0.0) {
                            return;
                        }
                        let g_w: Vec<f64> =
                            (0..m).map(|a| dot(ga, &anchors[a * d..(a + 1) * d])).collect();
                        let mean: f64 = wr.iter().zip(&g_w).map(|(a, b)| a * b).sum();
                        for a in 0..m {
                            gl[a] = wr[a] * (g_w[a] - mean);
                        }
                    });
                let g_relax = relaxation.as_ref().map(|_| g_atoms);
                (g_logits, g_relax)
            }
        };
        (
            loss,
            Some(Gradients {
                enc_w: g_enc_w,
                enc_b: g_enc_b,
                decoder,
                relaxation,
            }),
        )
    }
}

/// Above this many anchor-concept pairs the initial anchors are just shuffled.
const SPREAD_LIMIT: usize = 1 << 24;

/// Greedy farthest-point ordering of unit rows by cosine similarity,
/// starting at `first`.
fn spread_order(rows: &[f64], d: usize, first: usize, count: usize) -> Vec<usize> {
    let m = rows.len() / d;
    let mut order = vec![first];
    let row = |j: usize| &rows[j * d..(j + 1) * d];
    let mut closest: Vec<f64> = (0..m).map(|j| dot(row(j), row(first))).collect();
    while order.len() < count {
        let next = (0..m)
            .filter(|j| !order.contains(j))
            .min_by(|&a, &b| closest[a].total_cmp(&closest[b]).then(a.cmp(&b)))
            .unwrap();
        order.push(next);
        for j in 0..m {
            closest[j] = closest[j].max(dot(row(j), row(next)));
        }
    }
    order
}

pub(crate) fn normalize_rows(m: &mut [f64], cols: usize) {
    for row in m.chunks_exact_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Row-wise projection onto the L2 ball of radius `bound`.
pub(crate) fn clip_rows(m: &mut [f64], cols: usize, bound: f64) {
    for row in m.chunks_exact_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > bound && n > 0.0 {
            row.iter_mut().for_each(|v| *v *= bound / n);
        }
    }
}

/// Encodes every row of `features` with `model`.
pub fn encode(features: &FeatureMatrix, model: &Sae) -> Result<SparseCodeMatrix> {
    model.encode(features)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_padded(d: usize, k: usize, top_k: usize) -> Sae {
        let cfg = SaeConfig::free(d, k, top_k);
        let mut w = vec![0.0; k * d];
        for i in 0..d.min(k) {
            w[i * d + i] = 1.0;
        }
        let mut atoms = w.clone();
        for j in d..k {
            atoms[j * d] = 1.0;
        }
        Sae::from_parts(cfg, w, vec![0.0; k], DecoderParams::Free { atoms }).unwrap()
    }

    #[test]
    fn keeps_the_two_largest() {
        let sae = identity_padded(4, 6, 2);
        let x = [3.0, 1.0, 2.0, 0.5];
        // Brute force: rank all six pre-activations.
        let mut pre = vec![0.0; 6];
        sae.pre_activations_into(&x, &mut pre);
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&a, &b| pre[b].partial_cmp(&pre[a]).unwrap().then(a.cmp(&b)));
        let mut expect: Vec<usize> = order[..2].to_vec();
        expect.sort();
        let code = sae.encode_row(&x);
        assert_eq!(code.iter().map(|c| c.0).collect::<Vec<_>>(), expect);
        assert_eq!(code, vec![(0, 3.0), (2, 2.0)]);
    }

    #[test]
    fn zero_input_gives_empty_code() {
        let sae = identity_padded(4, 6, 2);
        assert!(sae.encode_row(&[0.0; 4]).is_empty());
    }

    #[test]
    fn full_k_is_plain_relu() {
        let sae = identity_padded(4, 6, 6);
        let x = [3.0, -1.0, 2.0, 0.5];
        assert_eq!(sae.encode_row(&x), vec![(0, 3.0), (2, 2.0), (3, 0.5)]);
    }

    #[test]
    fn encode_checks_width() {
        let sae = identity_padded(4, 6, 2);
        let f = FeatureMatrix::zeros(2, 3);
        assert!(matches!(encode(&f, &sae), Err(Error::Shape(_))));
    }

    #[test]
    fn top_k_ties_prefer_low_index() {
        assert_eq!(top_k_positive(&[1.0, 2.0, 2.0, 2.0], 2, None), vec![1, 2]);
        assert_eq!(top_k_positive(&[-1.0, 0.0], 2, None), Vec::<usize>::new());
    }

    #[test]
    fn archetypal_init_is_row_stochastic() {
        let cfg = SaeConfig {
            anchors: 10,
            ..SaeConfig::free(3, 4, 2)
        };
        let anchors: Vec<f64> = (0..30).map(|v| (v as f64).sin()).collect();
        let sae = Sae::init(&cfg, Some(anchors)).unwrap();
        let dict = sae.dictionary();
        dict.validate().unwrap();
        let w = dict.archetypes.unwrap().weights;
        for row in w.chunks(10) {
            assert!(row.iter().cloned().fold(0.0, f64::max) > 0.85);
        }
    }

    /// Central differences of the loss with the selection held fixed.
    fn numeric_grad(sae: &Sae, batch: &[f64], sel: &[RowSelection], p: Param) -> Vec<f64> {
        let n = sae.clone().param_mut(p).unwrap().len();
        let h = 1e-6;
        (0..n)
            .map(|i| {
                let mut s = sae.clone();
                s.param_mut(p).unwrap()[i] += h;
                let up = s.loss(batch, sel).total;
                s.param_mut(p).unwrap()[i] -= 2.0 * h;
                (up - s.loss(batch, sel).total) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<f64> = (0..6 * 4).map(|_| rng.random_range(-0.5..1.5)).collect();
        let cfg = SaeConfig {
            anchors: 10,
            aux_lambda: 0.3,
            aux_k: 2,
            ..SaeConfig::free(4, 8, 2)
        };
        let anchors: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut sae = Sae::init(&cfg, Some(anchors)).unwrap();
        for v in sae.param_mut(Param::Logits).unwrap() {
            *v += rng.random_range(-0.3..0.3);
        }
        let sel = sae.select(&batch, Some(&[true; 8]));
        assert!(sel.iter().any(|s| !s.aux.is_empty()));
        let (_, g) = sae.loss_and_grad(&batch, &sel);
        for p in [Param::EncoderWeights, Param::EncoderBias, Param::Logits] {
            let e = rel_err(g.get(p).unwrap(), &numeric_grad(&sae, &batch, &sel, p));
            assert!(e < 1e-4, "{p:?}: {e}");
        }
    }
}
