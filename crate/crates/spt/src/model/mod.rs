//! Tiny decoder-only transformer with the extended output head.
//!
//! The base network (embeddings, blocks, head) is frozen after pretraining;
//! the extension rows `W_S* = [W_S | w_<Rej> | w_<Gen>]` live only in the
//! output head. The `w_<Gen>` row doubles as the continuous prompt vector
//! substituted at `<Gen>` input positions, so the trainable-parameter count
//! is exactly `(|S|+2)·d`.

mod math;
mod net;

pub use math::{dot, log_softmax_at, softmax_in_place, Matrix};
pub use net::{forward, loss_and_grads, Forward, SupervisedSeq};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SptError};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 256,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(SptError::Shape(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Vec<T>,
    pub ln1_b: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ln2_g: Vec<T>,
    pub ln2_b: Vec<T>,
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// Input embeddings over the base region, |V|×d.
    pub embed: Matrix<T>,
    /// Learned positional embeddings, max_seq_len×d.
    pub pos: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Vec<T>,
    pub lnf_b: Vec<T>,
    /// Untied output head, |V|×d. None when tied (head aliases `embed`).
    pub head: Option<Matrix<T>>,
    /// Extension head rows, (|S|+2)×d: schema rows, then <Rej>, then <Gen>.
    pub ext: Matrix<T>,
}

/// Which parameter groups a training step may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMask {
    pub base: bool,
    pub w_s: bool,
    pub w_rej: bool,
    pub w_gen: bool,
}

impl TrainMask {
    pub const BASE_ONLY: TrainMask = TrainMask {
        base: true,
        w_s: false,
        w_rej: false,
        w_gen: false,
    };
    pub const W_S_ONLY: TrainMask = TrainMask {
        base: false,
        w_s: true,
        w_rej: false,
        w_gen: false,
    };
    pub const HELPERS_ONLY: TrainMask = TrainMask {
        base: false,
        w_s: false,
        w_rej: true,
        w_gen: true,
    };
    pub const EXT_ALL: TrainMask = TrainMask {
        base: false,
        w_s: true,
        w_rej: true,
        w_gen: true,
    };
    pub const ALL: TrainMask = TrainMask {
        base: true,
        w_s: true,
        w_rej: true,
        w_gen: true,
    };
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters: base weights ~ N(0, 0.02²) from a SplitMix64 stream,
    /// layer norms at identity, extension rows set to the mean base head row
    /// so a new schema token starts as an average word.
    pub fn init(config: ModelConfig, vocab_base: usize, n_ext: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = SplitMix64::new(seed);
        let std = 0.02;
        let embed = Matrix::gaussian(vocab_base, d, std, &mut rng);
        let pos = Matrix::gaussian(config.max_seq_len, d, std, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_g: vec![T::one(); d],
                ln1_b: vec![T::zero(); d],
                wq: Matrix::gaussian(d, d, std, &mut rng),
                wk: Matrix::gaussian(d, d, std, &mut rng),
                wv: Matrix::gaussian(d, d, std, &mut rng),
                wo: Matrix::gaussian(d, d, std, &mut rng),
                ln2_g: vec![T::one(); d],
                ln2_b: vec![T::zero(); d],
                w1: Matrix::gaussian(d, config.d_ff, std, &mut rng),
                b1: vec![T::zero(); config.d_ff],
                w2: Matrix::gaussian(config.d_ff, d, std, &mut rng),
                b2: vec![T::zero(); d],
            });
        }
        let head = if config.tie_embeddings {
            None
        } else {
            Some(Matrix::gaussian(vocab_base, d, std, &mut rng))
        };
        let mut params = Self {
            config,
            embed,
            pos,
            layers,
            lnf_g: vec![T::one(); d],
            lnf_b: vec![T::zero(); d],
            head,
            ext: Matrix::zeros(n_ext, d),
        };
        params.reset_ext_to_mean_head();
        Ok(params)
    }

    /// Sets every extension row to the mean of the base head rows.
    pub fn reset_ext_to_mean_head(&mut self) {
        let d = self.config.d_model;
        let head = self.head_matrix();
        let mut mean = vec![T::zero(); d];
        for r in 0..head.rows {
            for (m, &x) in mean.iter_mut().zip(head.row(r).iter()) {
                *m += x;
            }
        }
        let n = T::from_f64(head.rows as f64);
        for m in mean.iter_mut() {
            *m /= n;
        }
        for r in 0..self.ext.rows {
            self.ext.row_mut(r).copy_from_slice(&mean);
        }
    }

    pub fn head_matrix(&self) -> &Matrix<T> {
        self.head.as_ref().unwrap_or(&self.embed)
    }

    pub fn vocab_base(&self) -> usize {
        self.embed.rows
    }

    pub fn n_ext(&self) -> usize {
        self.ext.rows
    }

    pub fn n_schemas(&self) -> usize {
        self.ext.rows - 2
    }

    pub fn rej_row(&self) -> usize {
        self.ext.rows - 2
    }

    pub fn gen_row(&self) -> usize {
        self.ext.rows - 1
    }

    /// Global token id of <Gen> (the only extension id legal in model input).
    pub fn gen_token_id(&self) -> usize {
        self.vocab_base() + self.gen_row()
    }

    pub fn total_vocab(&self) -> usize {
        self.vocab_base() + self.ext.rows
    }

    /// Number of parameters a mask makes trainable. The extension block is
    /// (|S|+2)·d.
    pub fn count_trainable(&self, mask: TrainMask) -> usize {
        let d = self.config.d_model;
        let mut n = 0;
        if mask.base {
            n += self.embed.data.len() + self.pos.data.len();
            for l in &self.layers {
                n += l.ln1_g.len() + l.ln1_b.len() + l.ln2_g.len() + l.ln2_b.len();
                n += l.wq.data.len() + l.wk.data.len() + l.wv.data.len() + l.wo.data.len();
                n += l.w1.data.len() + l.b1.len() + l.w2.data.len() + l.b2.len();
            }
            n += self.lnf_g.len() + self.lnf_b.len();
            if let Some(h) = &self.head {
                n += h.data.len();
            }
        }
        if mask.w_s {
            n += self.n_schemas() * d;
        }
        if mask.w_rej {
            n += d;
        }
        if mask.w_gen {
            n += d;
        }
        n
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.config.d_model;
        Self {
            config: self.config.clone(),
            embed: Matrix::zeros(self.embed.rows, d),
            pos: Matrix::zeros(self.pos.rows, d),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: vec![T::zero(); d],
                    ln1_b: vec![T::zero(); d],
                    wq: Matrix::zeros(d, d),
                    wk: Matrix::zeros(d, d),
                    wv: Matrix::zeros(d, d),
                    wo: Matrix::zeros(d, d),
                    ln2_g: vec![T::zero(); d],
                    ln2_b: vec![T::zero(); d],
                    w1: Matrix::zeros(d, l.w1.cols),
                    b1: vec![T::zero(); l.b1.len()],
                    w2: Matrix::zeros(l.w2.rows, d),
                    b2: vec![T::zero(); d],
                })
                .collect(),
            lnf_g: vec![T::zero(); d],
            lnf_b: vec![T::zero(); d],
            head: self.head.as_ref().map(|h| Matrix::zeros(h.rows, d)),
            ext: Matrix::zeros(self.ext.rows, d),
        }
    }

    /// Elementwise `self ← scale·self + other` across every tensor; used for
    /// momentum accumulation (`v ← μ·v + g`).
    pub fn scale_add_assign(&mut self, other: &Self, scale: T) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self.embed.data.len() != other.embed.data.len()
            || self.ext.data.len() != other.ext.data.len()
        {
            return Err(SptError::Shape("scale_add_assign mismatch".into()));
        }
        fn blend<T: Scalar>(a: &mut [T], b: &[T], s: T) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = s * *x + *y;
            }
        }
        blend(&mut self.embed.data, &other.embed.data, scale);
        blend(&mut self.pos.data, &other.pos.data, scale);
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            blend(&mut l.ln1_g, &o.ln1_g, scale);
            blend(&mut l.ln1_b, &o.ln1_b, scale);
            blend(&mut l.wq.data, &o.wq.data, scale);
            blend(&mut l.wk.data, &o.wk.data, scale);
            blend(&mut l.wv.data, &o.wv.data, scale);
            blend(&mut l.wo.data, &o.wo.data, scale);
            blend(&mut l.ln2_g, &o.ln2_g, scale);
            blend(&mut l.ln2_b, &o.ln2_b, scale);
            blend(&mut l.w1.data, &o.w1.data, scale);
            blend(&mut l.b1, &o.b1, scale);
            blend(&mut l.w2.data, &o.w2.data, scale);
            blend(&mut l.b2, &o.b2, scale);
        }
        blend(&mut self.lnf_g, &other.lnf_g, scale);
        blend(&mut self.lnf_b, &other.lnf_b, scale);
        if let (Some(h), Some(oh)) = (self.head.as_mut(), other.head.as_ref()) {
            blend(&mut h.data, &oh.data, scale);
        }
        blend(&mut self.ext.data, &other.ext.data, scale);
        Ok(())
    }

    pub fn to_f64(&self) -> ModelParams<f64> {
        ModelParams {
            config: self.config.clone(),
            embed: self.embed.to_f64(),
            pos: self.pos.to_f64(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: l.ln1_g.iter().map(|x| x.as_f64()).collect(),
                    ln1_b: l.ln1_b.iter().map(|x| x.as_f64()).collect(),
                    wq: l.wq.to_f64(),
                    wk: l.wk.to_f64(),
                    wv: l.wv.to_f64(),
                    wo: l.wo.to_f64(),
                    ln2_g: l.ln2_g.iter().map(|x| x.as_f64()).collect(),
                    ln2_b: l.ln2_b.iter().map(|x| x.as_f64()).collect(),
                    w1: l.w1.to_f64(),
                    b1: l.b1.iter().map(|x| x.as_f64()).collect(),
                    w2: l.w2.to_f64(),
                    b2: l.b2.iter().map(|x| x.as_f64()).collect(),
                })
                .collect(),
            lnf_g: self.lnf_g.iter().map(|x| x.as_f64()).collect(),
            lnf_b: self.lnf_b.iter().map(|x| x.as_f64()).collect(),
            head: self.head.as_ref().map(|h| h.to_f64()),
            ext: self.ext.to_f64(),
        }
    }
}

fn step_vec<T: Scalar>(p: &mut [T], g: &[T], lr: T) {
    for (pi, &gi) in p.iter_mut().zip(g.iter()) {
        *pi -= lr * gi;
    }
}

/// First/second-moment state for Adam; same shape as the parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Every parameter tensor as a flat slice, in a fixed order shared by
    /// params, gradients, and optimizer state.
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![&mut self.embed.data, &mut self.pos.data];
        for l in &mut self.layers {
            out.push(&mut l.ln1_g);
            out.push(&mut l.ln1_b);
            out.push(&mut l.wq.data);
            out.push(&mut l.wk.data);
            out.push(&mut l.wv.data);
            out.push(&mut l.wo.data);
            out.push(&mut l.ln2_g);
            out.push(&mut l.ln2_b);
            out.push(&mut l.w1.data);
            out.push(&mut l.b1);
            out.push(&mut l.w2.data);
            out.push(&mut l.b2);
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        if let Some(h) = self.head.as_mut() {
            out.push(&mut h.data);
        }
        out.push(&mut self.ext.data);
        out
    }

    fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![&self.embed.data, &self.pos.data];
        for l in &self.layers {
            out.push(&l.ln1_g);
            out.push(&l.ln1_b);
            out.push(&l.wq.data);
            out.push(&l.wk.data);
            out.push(&l.wv.data);
            out.push(&l.wo.data);
            out.push(&l.ln2_g);
            out.push(&l.ln2_b);
            out.push(&l.w1.data);
            out.push(&l.b1);
            out.push(&l.w2.data);
            out.push(&l.b2);
        }
        out.push(&self.lnf_g);
        out.push(&self.lnf_b);
        if let Some(h) = self.head.as_ref() {
            out.push(&h.data);
        }
        out.push(&self.ext.data);
        out
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[allow(clippy::too_many_arguments)]
fn adam_vec<T: Scalar>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    mask: Option<&[bool]>,
    lr: T,
    c1: T,
    c2: T,
) {
    let b1 = T::from_f64(ADAM_BETA1);
    let b2 = T::from_f64(ADAM_BETA2);
    let eps = T::from_f64(ADAM_EPS);
    let one = T::one();
    for i in 0..p.len() {
        if let Some(mk) = mask {
            if !mk[i] {
                continue;
            }
        }
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Adam step on the groups the mask selects; groups outside the mask keep
/// both their values and their optimizer state bit-identical.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    mask: TrainMask,
) -> Result<()> {
    if params.embed.data.len() != grads.embed.data.len()
        || params.ext.data.len() != grads.ext.data.len()
        || params.layers.len() != grads.layers.len()
    {
        return Err(SptError::Shape("params/grads mismatch".into()));
    }
    state.t += 1;
    let c1 = T::from_f64(1.0 - ADAM_BETA1.powi(state.t as i32));
    let c2 = T::from_f64(1.0 - ADAM_BETA2.powi(state.t as i32));
    let lr = T::from_f64(lr);
    let n_schemas = params.n_schemas();
    let d = params.ext.cols;
    // elementwise enable mask for the extension matrix (per-row groups)
    let ext_mask: Vec<bool> = (0..params.ext.rows)
        .flat_map(|r| {
            let on = if r < n_schemas {
                mask.w_s
            } else if r == n_schemas {
                mask.w_rej
            } else {
                mask.w_gen
            };
            std::iter::repeat(on).take(d)
        })
        .collect();
    let n = {
        let ps = params.tensors_mut();
        ps.len()
    };
    let mut ps = params.tensors_mut();
    let gs = grads.tensors();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for i in 0..n {
        let is_ext = i == n - 1;
        if !is_ext && !mask.base {
            continue;
        }
        let row_mask = if is_ext { Some(ext_mask.as_slice()) } else { None };
        adam_vec(ps[i], gs[i], ms[i], vs[i], row_mask, lr, c1, c2);
    }
    Ok(())
}

/// Plain SGD: θ ← θ − lr·g on the groups the mask selects. Groups outside the
/// mask are untouched, bit for bit.
pub fn sgd_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    lr: f64,
    mask: TrainMask,
) -> Result<()> {
    if params.embed.data.len() != grads.embed.data.len()
        || params.ext.data.len() != grads.ext.data.len()
        || params.layers.len() != grads.layers.len()
    {
        return Err(SptError::Shape("params/grads mismatch".into()));
    }
    let lr = T::from_f64(lr);
    if mask.base {
        step_vec(&mut params.embed.data, &grads.embed.data, lr);
        step_vec(&mut params.pos.data, &grads.pos.data, lr);
        for (l, g) in params.layers.iter_mut().zip(grads.layers.iter()) {
            step_vec(&mut l.ln1_g, &g.ln1_g, lr);
            step_vec(&mut l.ln1_b, &g.ln1_b, lr);
            step_vec(&mut l.wq.data, &g.wq.data, lr);
            step_vec(&mut l.wk.data, &g.wk.data, lr);
            step_vec(&mut l.wv.data, &g.wv.data, lr);
            step_vec(&mut l.wo.data, &g.wo.data, lr);
            step_vec(&mut l.ln2_g, &g.ln2_g, lr);
            step_vec(&mut l.ln2_b, &g.ln2_b, lr);
            step_vec(&mut l.w1.data, &g.w1.data, lr);
            step_vec(&mut l.b1, &g.b1, lr);
            step_vec(&mut l.w2.data, &g.w2.data, lr);
            step_vec(&mut l.b2, &g.b2, lr);
        }
        step_vec(&mut params.lnf_g, &grads.lnf_g, lr);
        step_vec(&mut params.lnf_b, &grads.lnf_b, lr);
        if let (Some(h), Some(gh)) = (params.head.as_mut(), grads.head.as_ref()) {
            step_vec(&mut h.data, &gh.data, lr);
        }
    }
    let n_schemas = params.n_schemas();
    for r in 0..params.ext.rows {
        let update = if r < n_schemas {
            mask.w_s
        } else if r == n_schemas {
            mask.w_rej
        } else {
            mask.w_gen
        };
        if update {
            let g = grads.ext.row(r).to_vec();
            step_vec(params.ext.row_mut(r), &g, lr);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelParams<f32> {
        let config = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            tie_embeddings: false,
        };
        ModelParams::init(config, 10, 4, 1).unwrap()
    }

    #[test]
    fn trainable_count_formula() {
        let p = tiny();
        assert_eq!(p.count_trainable(TrainMask::EXT_ALL), 4 * 8);
        assert_eq!(p.count_trainable(TrainMask::W_S_ONLY), 2 * 8);
        // paper-scale accounting: 28 rows at d=1536
        let cfg = ModelConfig {
            d_model: 1536,
            n_heads: 8,
            ..Default::default()
        };
        let big = ModelParams::<f32>::init(cfg, 4, 28, 0).unwrap();
        assert_eq!(big.count_trainable(TrainMask::EXT_ALL), 28 * 1536);
        // desk-scale: 28 x 64
        let desk = ModelParams::<f32>::init(ModelConfig::default(), 4, 28, 0).unwrap();
        assert_eq!(desk.count_trainable(TrainMask::EXT_ALL), 1792);
    }

    #[test]
    fn ext_rows_start_at_mean_head_row() {
        let p = tiny();
        let head = p.head_matrix();
        let d = p.config.d_model;
        for c in 0..d {
            let mean: f32 = (0..head.rows).map(|r| head.get(r, c)).sum::<f32>() / head.rows as f32;
            for r in 0..p.ext.rows {
                assert!((p.ext.get(r, c) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut p = tiny();
        let snapshot = p.clone();
        let mut g = p.zeros_like();
        for x in g.ext.data.iter_mut() {
            *x = 1.0;
        }
        sgd_step(&mut p, &g, 0.0, TrainMask::ALL).unwrap();
        assert_eq!(p, snapshot);
    }

    #[test]
    fn sgd_definition() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        p.ext.row_mut(0).copy_from_slice(&[1.0; 8]);
        g.ext.set(0, 0, 1.0);
        sgd_step(&mut p, &g, 0.1, TrainMask::EXT_ALL).unwrap();
        assert!((p.ext.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p.ext.get(0, 1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn frozen_base_bit_identical_after_step() {
        let mut p = tiny();
        let base_bytes: Vec<u32> = p.embed.data.iter().map(|x| x.to_bits()).collect();
        let mut g = p.zeros_like();
        for x in g.embed.data.iter_mut() {
            *x = 3.0;
        }
        for x in g.ext.data.iter_mut() {
            *x = 3.0;
        }
        sgd_step(&mut p, &g, 0.5, TrainMask::EXT_ALL).unwrap();
        let after: Vec<u32> = p.embed.data.iter().map(|x| x.to_bits()).collect();
        assert_eq!(base_bytes, after);
    }

    #[test]
    fn helper_rows_isolated_from_w_s() {
        let mut p = tiny();
        let ws_before: Vec<u32> = (0..p.n_schemas())
            .flat_map(|r| p.ext.row(r).iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect();
        let mut g = p.zeros_like();
        for x in g.ext.data.iter_mut() {
            *x = 1.0;
        }
        sgd_step(&mut p, &g, 0.1, TrainMask::HELPERS_ONLY).unwrap();
        let ws_after: Vec<u32> = (0..p.n_schemas())
            .flat_map(|r| p.ext.row(r).iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect();
        assert_eq!(ws_before, ws_after);
        assert!((p.ext.get(p.rej_row(), 0) - (p.ext.get(0, 0) - 0.1)).abs() < 1e-6);
    }
}
