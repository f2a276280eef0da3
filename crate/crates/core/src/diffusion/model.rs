//! Permutation-equivariant set denoiser: shared input projection, four
//! attention blocks with condition-modulated normalization (adaLN-Zero), a
//! point-set encoder for the layout points and a sinusoidal timestep
//! embedding.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::standard_normal;
use super::tape::{Tape, VarId};
use crate::error::{Error, Result};
use crate::scene::{encode_contact, ConditionSet, NormalizationStats, SceneConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub point_hidden: [usize; 2],
    pub feature_dim: usize,
    pub capacity: usize,
    pub layout_point_count: usize,
}

impl ModelConfig {
    /// Desk-scale widths: 128 hidden, 4 blocks, 4 heads.
    pub fn desk_scale(scene: &SceneConfig) -> Self {
        ModelConfig {
            hidden: 128,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            point_hidden: [64, 128],
            feature_dim: scene.feature_dim(),
            capacity: scene.capacity,
            layout_point_count: 1000,
        }
    }

    /// Paper-scale widths: 512 hidden, 4 blocks, 8 heads.
    pub fn paper_scale(scene: &SceneConfig) -> Self {
        ModelConfig {
            hidden: 512,
            heads: 8,
            ..Self::desk_scale(scene)
        }
    }
}

/// Condition inputs already mapped into tensor space: contact boxes encoded
/// through the shared channel layout (zero rows where no contact exists) and
/// layout points scaled by the world half-extent.
#[derive(Debug, Clone)]
pub struct EncodedCondition {
    pub contact_rows: Array2<f64>,
    pub contact_mask: Vec<bool>,
    pub layout_points: Array2<f64>,
}

impl EncodedCondition {
    pub fn from_condition(
        cond: &ConditionSet,
        norm: &NormalizationStats,
        cfg: &SceneConfig,
        n_points: usize,
    ) -> Result<Self> {
        if cond.layout_points.len() < n_points {
            return Err(Error::Contract(format!(
                "condition has {} layout points, model expects {}",
                cond.layout_points.len(),
                n_points
            )));
        }
        let d = cfg.feature_dim();
        let mut contact_rows = Array2::zeros((cfg.capacity, d));
        let mut contact_mask = vec![false; cfg.capacity];
        for (i, slot) in cond.contacts.iter().enumerate().take(cfg.capacity) {
            if let Some(cb) = slot {
                let row = encode_contact(cb, norm, cfg);
                for (j, v) in row.into_iter().enumerate() {
                    contact_rows[[i, j]] = v;
                }
                contact_mask[i] = true;
            }
        }
        let half = cfg.world_extent_m / 2.0;
        let layout_points = Array2::from_shape_fn((n_points, 3), |(i, j)| {
            cond.layout_points[i][j] / half
        });
        Ok(EncodedCondition {
            contact_rows,
            contact_mask,
            layout_points,
        })
    }
}

/// Precomputed per-scene condition embedding for sampling, where parameters
/// are frozen: contact + layout parts of the row conditioning, minus the
/// timestep term.
#[derive(Debug, Clone)]
pub struct CondCache {
    base: Array2<f64>,
}

struct BlockIdx {
    wm: usize,
    bm: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

struct Layout {
    w_in: usize,
    b_in: usize,
    wt1: usize,
    bt1: usize,
    wt2: usize,
    bt2: usize,
    wp1: usize,
    bp1: usize,
    wp2: usize,
    bp2: usize,
    wp3: usize,
    bp3: usize,
    blocks: Vec<BlockIdx>,
    wmf: usize,
    bmf: usize,
    wf: usize,
    bf: usize,
    count: usize,
}

fn layout(cfg: &ModelConfig) -> Layout {
    let mut next = 0usize;
    let mut take = || {
        let i = next;
        next += 1;
        i
    };
    let w_in = take();
    let b_in = take();
    let wt1 = take();
    let bt1 = take();
    let wt2 = take();
    let bt2 = take();
    let wp1 = take();
    let bp1 = take();
    let wp2 = take();
    let bp2 = take();
    let wp3 = take();
    let bp3 = take();
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for _ in 0..cfg.blocks {
        blocks.push(BlockIdx {
            wm: take(),
            bm: take(),
            wq: take(),
            bq: take(),
            wk: take(),
            bk: take(),
            wv: take(),
            bv: take(),
            wo: take(),
            bo: take(),
            w1: take(),
            b1: take(),
            w2: take(),
            b2: take(),
        });
    }
    let wmf = take();
    let bmf = take();
    let wf = take();
    let bf = take();
    Layout {
        w_in,
        b_in,
        wt1,
        bt1,
        wt2,
        bt2,
        wp1,
        bp1,
        wp2,
        bp2,
        wp3,
        bp3,
        blocks,
        wmf,
        bmf,
        wf,
        bf,
        count: next,
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: ModelConfig,
    pub params: Vec<Array2<f64>>,
}

impl Denoiser {
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.hidden;
        let d = cfg.feature_dim;
        let [p1, p2] = cfg.point_hidden;
        let mlp = cfg.mlp_ratio * h;
        let lay = layout(&cfg);
        let mut params = vec![Array2::zeros((0, 0)); lay.count];
        let w = |rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
            let std = (1.0 / rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| standard_normal(rng) * std)
        };
        params[lay.w_in] = w(d, h, rng);
        params[lay.b_in] = Array2::zeros((1, h));
        params[lay.wt1] = w(h, h, rng);
        params[lay.bt1] = Array2::zeros((1, h));
        params[lay.wt2] = w(h, h, rng);
        params[lay.bt2] = Array2::zeros((1, h));
        params[lay.wp1] = w(3, p1, rng);
        params[lay.bp1] = Array2::zeros((1, p1));
        params[lay.wp2] = w(p1, p2, rng);
        params[lay.bp2] = Array2::zeros((1, p2));
        params[lay.wp3] = w(p2, h, rng);
        params[lay.bp3] = Array2::zeros((1, h));
        for b in &lay.blocks {
            // adaLN-Zero: modulation branch starts at zero so each block is
            // the identity path at initialization.
            params[b.wm] = Array2::zeros((h, 6 * h));
            params[b.bm] = Array2::zeros((1, 6 * h));
            params[b.wq] = w(h, h, rng);
            params[b.bq] = Array2::zeros((1, h));
            params[b.wk] = w(h, h, rng);
            params[b.bk] = Array2::zeros((1, h));
            params[b.wv] = w(h, h, rng);
            params[b.bv] = Array2::zeros((1, h));
            params[b.wo] = w(h, h, rng);
            params[b.bo] = Array2::zeros((1, h));
            params[b.w1] = w(h, mlp, rng);
            params[b.b1] = Array2::zeros((1, mlp));
            params[b.w2] = w(mlp, h, rng);
            params[b.b2] = Array2::zeros((1, h));
        }
        params[lay.wmf] = Array2::zeros((h, 2 * h));
        params[lay.bmf] = Array2::zeros((1, 2 * h));
        params[lay.wf] = w(h, d, rng);
        params[lay.bf] = Array2::zeros((1, d));
        Denoiser { cfg, params }
    }

    /// Rebuild a model from stored weights, checking every tensor shape.
    pub fn from_params(cfg: ModelConfig, params: Vec<Array2<f64>>) -> Result<Self> {
        let expected = Self::expected_shapes(&cfg);
        if params.len() != expected.len() {
            return Err(Error::Contract(format!(
                "{} parameter tensors, expected {}",
                params.len(),
                expected.len()
            )));
        }
        for (i, (p, &shape)) in params.iter().zip(&expected).enumerate() {
            if p.dim() != shape {
                return Err(Error::Contract(format!(
                    "parameter {i}: shape {:?}, expected {:?}",
                    p.dim(),
                    shape
                )));
            }
        }
        Ok(Denoiser { cfg, params })
    }

    fn expected_shapes(cfg: &ModelConfig) -> Vec<(usize, usize)> {
        let h = cfg.hidden;
        let d = cfg.feature_dim;
        let [p1, p2] = cfg.point_hidden;
        let mlp = cfg.mlp_ratio * h;
        let lay = layout(cfg);
        let mut shapes = vec![(0, 0); lay.count];
        shapes[lay.w_in] = (d, h);
        shapes[lay.b_in] = (1, h);
        shapes[lay.wt1] = (h, h);
        shapes[lay.bt1] = (1, h);
        shapes[lay.wt2] = (h, h);
        shapes[lay.bt2] = (1, h);
        shapes[lay.wp1] = (3, p1);
        shapes[lay.bp1] = (1, p1);
        shapes[lay.wp2] = (p1, p2);
        shapes[lay.bp2] = (1, p2);
        shapes[lay.wp3] = (p2, h);
        shapes[lay.bp3] = (1, h);
        for b in &lay.blocks {
            shapes[b.wm] = (h, 6 * h);
            shapes[b.bm] = (1, 6 * h);
            shapes[b.wq] = (h, h);
            shapes[b.bq] = (1, h);
            shapes[b.wk] = (h, h);
            shapes[b.bk] = (1, h);
            shapes[b.wv] = (h, h);
            shapes[b.bv] = (1, h);
            shapes[b.wo] = (h, h);
            shapes[b.bo] = (1, h);
            shapes[b.w1] = (h, mlp);
            shapes[b.b1] = (1, mlp);
            shapes[b.w2] = (mlp, h);
            shapes[b.b2] = (1, h);
        }
        shapes[lay.wmf] = (h, 2 * h);
        shapes[lay.bmf] = (1, 2 * h);
        shapes[lay.wf] = (h, d);
        shapes[lay.bf] = (1, d);
        shapes
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    fn timestep_embedding(&self, t: usize) -> Array2<f64> {
        let h = self.cfg.hidden;
        let half = h / 2;
        let mut emb = Array2::zeros((1, h));
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            emb[[0, 2 * i]] = (t as f64 * freq).sin();
            emb[[0, 2 * i + 1]] = (t as f64 * freq).cos();
        }
        emb
    }

    fn push_params(&self, tape: &mut Tape) -> Vec<VarId> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    fn linear(tape: &mut Tape, x: VarId, w: VarId, b: VarId) -> VarId {
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    /// Condition rows (contact + layout, no timestep term) through the tape.
    fn cond_base(
        &self,
        tape: &mut Tape,
        ids: &[VarId],
        cond: &EncodedCondition,
    ) -> VarId {
        let lay = layout(&self.cfg);
        let h = self.cfg.hidden;
        // PointNet: shared per-point layers + max-pool to one global vector.
        let pts = tape.leaf(cond.layout_points.clone());
        let p = Self::linear(tape, pts, ids[lay.wp1], ids[lay.bp1]);
        let p = tape.silu(p);
        let p = Self::linear(tape, p, ids[lay.wp2], ids[lay.bp2]);
        let p = tape.silu(p);
        let p = Self::linear(tape, p, ids[lay.wp3], ids[lay.bp3]);
        let layout_emb = tape.max_pool_rows(p); // 1 x H
        // Contact boxes share the input projection with object rows; rows
        // without a contact are masked to zero so they only see layout + t.
        let crows = tape.leaf(cond.contact_rows.clone());
        let cemb = Self::linear(tape, crows, ids[lay.w_in], ids[lay.b_in]);
        let mask = Array2::from_shape_fn((self.cfg.capacity, h), |(i, _)| {
            if cond.contact_mask[i] {
                1.0
            } else {
                0.0
            }
        });
        let mask = tape.leaf(mask);
        let cemb = tape.mul(cemb, mask);
        tape.add_row(cemb, layout_emb)
    }

    /// Full forward through the tape. `cond_base` is N x H conditioning
    /// without the timestep term (either tape-built for training or a frozen
    /// cache for sampling).
    fn forward_tape(
        &self,
        tape: &mut Tape,
        ids: &[VarId],
        xt: &Array2<f64>,
        t: usize,
        cond_base: VarId,
        attention: bool,
    ) -> VarId {
        let lay = layout(&self.cfg);
        let h = self.cfg.hidden;
        let heads = self.cfg.heads;
        let dh = h / heads;

        let temb = tape.leaf(self.timestep_embedding(t));
        let t1 = Self::linear(tape, temb, ids[lay.wt1], ids[lay.bt1]);
        let t1 = tape.silu(t1);
        let t1 = Self::linear(tape, t1, ids[lay.wt2], ids[lay.bt2]);
        let cond = tape.add_row(cond_base, t1); // N x H

        let x = tape.leaf(xt.clone());
        let mut hcur = Self::linear(tape, x, ids[lay.w_in], ids[lay.b_in]);

        let cact = tape.silu(cond);
        for b in &lay.blocks {
            let m = Self::linear(tape, cact, ids[b.wm], ids[b.bm]); // N x 6H
            let shift1 = tape.slice_cols(m, 0, h);
            let scale1 = tape.slice_cols(m, h, 2 * h);
            let gate1 = tape.slice_cols(m, 2 * h, 3 * h);
            let shift2 = tape.slice_cols(m, 3 * h, 4 * h);
            let scale2 = tape.slice_cols(m, 4 * h, 5 * h);
            let gate2 = tape.slice_cols(m, 5 * h, 6 * h);

            if attention {
                let ln1 = tape.layer_norm(hcur);
                let s1 = tape.add_scalar(scale1, 1.0);
                let x1 = tape.mul(ln1, s1);
                let x1 = tape.add(x1, shift1);
                let q = Self::linear(tape, x1, ids[b.wq], ids[b.bq]);
                let k = Self::linear(tape, x1, ids[b.wk], ids[b.bk]);
                let v = Self::linear(tape, x1, ids[b.wv], ids[b.bv]);
                let mut attn_out: Option<VarId> = None;
                for head in 0..heads {
                    let (s, e) = (head * dh, (head + 1) * dh);
                    let qh = tape.slice_cols(q, s, e);
                    let kh = tape.slice_cols(k, s, e);
                    let vh = tape.slice_cols(v, s, e);
                    let kt = tape.transpose(kh);
                    let scores = tape.matmul(qh, kt);
                    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                    let att = tape.softmax_rows(scores);
                    let oh = tape.matmul(att, vh);
                    let wo_h = tape.slice_rows(ids[b.wo], s, e);
                    let proj = tape.matmul(oh, wo_h);
                    attn_out = Some(match attn_out {
                        None => proj,
                        Some(acc) => tape.add(acc, proj),
                    });
                }
                let attn_out = attn_out.expect("at least one head");
                let attn_out = tape.add_row(attn_out, ids[b.bo]);
                let gated = tape.mul(gate1, attn_out);
                hcur = tape.add(hcur, gated);
            }

            let ln2 = tape.layer_norm(hcur);
            let s2 = tape.add_scalar(scale2, 1.0);
            let x2 = tape.mul(ln2, s2);
            let x2 = tape.add(x2, shift2);
            let m1 = Self::linear(tape, x2, ids[b.w1], ids[b.b1]);
            let m1 = tape.silu(m1);
            let m2 = Self::linear(tape, m1, ids[b.w2], ids[b.b2]);
            let gated = tape.mul(gate2, m2);
            hcur = tape.add(hcur, gated);
        }

        let mf = Self::linear(tape, cact, ids[lay.wmf], ids[lay.bmf]); // N x 2H
        let shift = tape.slice_cols(mf, 0, h);
        let scale = tape.slice_cols(mf, h, 2 * h);
        let lnf = tape.layer_norm(hcur);
        let sf = tape.add_scalar(scale, 1.0);
        let xf = tape.mul(lnf, sf);
        let xf = tape.add(xf, shift);
        Self::linear(tape, xf, ids[lay.wf], ids[lay.bf])
    }

    /// Predict the noise for one noisy scene. Deterministic in its inputs.
    pub fn denoise(
        &self,
        xt: &Array2<f64>,
        t: usize,
        cond: &EncodedCondition,
    ) -> Result<Array2<f64>> {
        self.denoise_opts(xt, t, cond, true)
    }

    /// As `denoise` but with the attention mixing optionally disabled (used
    /// by ablation harnesses; rows then evolve independently).
    pub fn denoise_opts(
        &self,
        xt: &Array2<f64>,
        t: usize,
        cond: &EncodedCondition,
        attention: bool,
    ) -> Result<Array2<f64>> {
        self.check_shapes(xt, t)?;
        let mut tape = Tape::new();
        let ids = self.push_params(&mut tape);
        let base = self.cond_base(&mut tape, &ids, cond);
        let out = self.forward_tape(&mut tape, &ids, xt, t, base, attention);
        Ok(tape.value(out).clone())
    }

    /// Freeze the contact/layout conditioning for repeated sampling steps.
    pub fn precompute_condition(&self, cond: &EncodedCondition) -> Result<CondCache> {
        let mut tape = Tape::new();
        let ids = self.push_params(&mut tape);
        let base = self.cond_base(&mut tape, &ids, cond);
        Ok(CondCache {
            base: tape.value(base).clone(),
        })
    }

    pub fn denoise_cached(
        &self,
        xt: &Array2<f64>,
        t: usize,
        cache: &CondCache,
    ) -> Result<Array2<f64>> {
        self.check_shapes(xt, t)?;
        let mut tape = Tape::new();
        let ids = self.push_params(&mut tape);
        let base = tape.leaf(cache.base.clone());
        let out = self.forward_tape(&mut tape, &ids, xt, t, base, true);
        Ok(tape.value(out).clone())
    }

    /// Squared-error of the noise prediction for one sample, plus parameter
    /// gradients (aligned with `self.params`).
    pub fn loss_and_grads(
        &self,
        xt: &Array2<f64>,
        t: usize,
        cond: &EncodedCondition,
        eps: &Array2<f64>,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        self.check_shapes(xt, t)?;
        let mut tape = Tape::new();
        let ids = self.push_params(&mut tape);
        let base = self.cond_base(&mut tape, &ids, cond);
        let out = self.forward_tape(&mut tape, &ids, xt, t, base, true);
        let target = tape.leaf(eps.clone());
        let diff = tape.sub(out, target);
        let loss = tape.sum_sq(diff);
        let loss_val = tape.value(loss)[[0, 0]];
        let grads = tape.backward(loss);
        let param_grads = ids.iter().map(|id| grads[id.0].clone()).collect();
        Ok((loss_val, param_grads))
    }

    fn check_shapes(&self, xt: &Array2<f64>, t: usize) -> Result<()> {
        if xt.dim() != (self.cfg.capacity, self.cfg.feature_dim) {
            return Err(Error::Contract(format!(
                "x_t shape {:?}, expected ({}, {})",
                xt.dim(),
                self.cfg.capacity,
                self.cfg.feature_dim
            )));
        }
        if !xt.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("x_t contains non-finite values".into()));
        }
        if t < 1 {
            return Err(Error::Contract("timestep must be >= 1".into()));
        }
        Ok(())
    }
}
