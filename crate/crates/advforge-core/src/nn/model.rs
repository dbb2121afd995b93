use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::config::{FeatShape, LayerSpec, ModelConfig};
use crate::nn::init;
use crate::nn::layers::{
    conv_backward, conv_forward, dense_backward, dense_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_forward, softmax_forward, ConvGeom,
};
use crate::nn::loss::CategoricalBatch;
use crate::tensor::Tensor;

/// Images per work chunk. A fixed constant (never derived from the core
/// count) so gradient summation order — and therefore every bit of every
/// result — is identical on any machine.
pub(crate) const CHUNK: usize = 16;

/// Chunk waves folded into the accumulator at a time; bounds the transient
/// per-chunk gradient memory while keeping the reduction order fixed.
pub(crate) const WAVE: usize = 8;

/// Runtime layer descriptor resolved against the shape plan.
#[derive(Debug, Clone)]
enum LayerRt {
    Conv { w: usize, b: usize, geom: ConvGeom },
    MaxPool { window: usize },
    Dense { w: usize, b: usize },
    Relu,
    Softmax,
}

/// Parameter gradients, aligned index-for-index with `Model::params`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Gradients {
            tensors: model
                .params
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect(),
        }
    }

    /// `self += alpha * other`, elementwise across all parameter tensors.
    pub fn axpy(&mut self, alpha: f64, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= alpha;
            }
        }
    }

    pub fn has_non_finite(&self) -> bool {
        self.tensors.iter().any(|t| t.has_non_finite())
    }
}

/// Per-chunk forward record: every inter-layer activation plus the
/// layer-specific bits the backward pass needs (conv columns, pool argmax).
pub struct ChunkTrace {
    acts: Vec<Tensor>,
    conv_cols: Vec<Option<Vec<f64>>>,
    pool_idx: Vec<Option<Vec<u32>>>,
}

impl ChunkTrace {
    pub fn probs(&self) -> &Tensor {
        self.acts.last().unwrap()
    }

    pub fn batch(&self) -> usize {
        self.acts[0].dim0()
    }
}

/// Traces for a whole batch, chunked. Holding one of these allows several
/// backward passes (with different seeds) over a single forward.
pub struct BatchTrace {
    chunks: Vec<ChunkTrace>,
    pub probs: CategoricalBatch,
}

/// An ordered layer-stack classifier with seeded parameters.
///
/// Immutable in normal use: forward and gradient calls never mutate the
/// model, so one instance can serve any number of concurrent readers. The
/// optimizer mutates parameters through `params_mut` between passes.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub rng_seed: u64,
    params: Vec<Tensor>,
    names: Vec<String>,
    plan: Vec<LayerRt>,
    logits_dim: usize,
    /// Counts batch-level input-gradient evaluations (one per backward pass
    /// that was asked for `∂loss/∂x`, regardless of internal chunking).
    /// Shared across clones; excluded from persistence and equality.
    input_evals: Arc<AtomicU64>,
}

impl Model {
    /// Builds and initializes a model; `(config, seed)` pins every bit.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let shapes = config.shape_plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut plan = Vec::new();
        let mut conv_n = 0usize;
        let mut dense_n = 0usize;
        for (i, layer) in config.layers.iter().enumerate() {
            let cur = shapes[i];
            match layer {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (in_c, in_h, in_w) = match cur {
                        FeatShape::Chw(c, h, w) => (c, h, w),
                        _ => unreachable!("plan validated"),
                    };
                    let (out_h, out_w) = match shapes[i + 1] {
                        FeatShape::Chw(_, h, w) => (h, w),
                        _ => unreachable!(),
                    };
                    conv_n += 1;
                    let mut w = Tensor::zeros(&[*filters, in_c, *kernel, *kernel]);
                    init::fill_weights(&mut rng, w.data_mut());
                    let b = Tensor::full(&[*filters], init::BIAS_INIT);
                    plan.push(LayerRt::Conv {
                        w: params.len(),
                        b: params.len() + 1,
                        geom: ConvGeom {
                            in_c,
                            in_h,
                            in_w,
                            filters: *filters,
                            kernel: *kernel,
                            stride: *stride,
                            padding: *padding,
                            out_h,
                            out_w,
                        },
                    });
                    names.push(format!("conv{conv_n}.weight"));
                    names.push(format!("conv{conv_n}.bias"));
                    params.push(w);
                    params.push(b);
                }
                LayerSpec::MaxPool { window } => plan.push(LayerRt::MaxPool { window: *window }),
                LayerSpec::Dense { units } => {
                    let in_n = cur.volume();
                    dense_n += 1;
                    let mut w = Tensor::zeros(&[*units, in_n]);
                    init::fill_weights(&mut rng, w.data_mut());
                    let b = Tensor::full(&[*units], init::BIAS_INIT);
                    plan.push(LayerRt::Dense {
                        w: params.len(),
                        b: params.len() + 1,
                    });
                    names.push(format!("dense{dense_n}.weight"));
                    names.push(format!("dense{dense_n}.bias"));
                    params.push(w);
                    params.push(b);
                }
                LayerSpec::Relu => plan.push(LayerRt::Relu),
                LayerSpec::Softmax => plan.push(LayerRt::Softmax),
            }
        }
        Ok(Model {
            logits_dim: config.num_classes,
            config,
            rng_seed: seed,
            params,
            names,
            plan,
            input_evals: Arc::new(AtomicU64::new(0)),
        })
    }

    /// Rebuilds a model around explicit parameter tensors (persistence).
    pub fn from_parts(config: ModelConfig, rng_seed: u64, params: Vec<Tensor>) -> Result<Self> {
        let fresh = Model::new(config, rng_seed)?;
        if fresh.params.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (have, want) in params.iter().zip(&fresh.params) {
            if have.shape() != want.shape() {
                return Err(Error::shape(
                    format!("{:?}", want.shape()),
                    format!("{:?}", have.shape()),
                ));
            }
        }
        Ok(Model { params, ..fresh })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_classes(&self) -> usize {
        self.logits_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|t| t.len()).sum()
    }

    /// Batch-level input-gradient evaluations since construction / reset.
    pub fn input_grad_evals(&self) -> u64 {
        self.input_evals.load(Ordering::Relaxed)
    }

    pub fn reset_input_grad_evals(&self) {
        self.input_evals.store(0, Ordering::Relaxed);
    }

    pub(crate) fn note_input_grad_eval(&self) {
        self.input_evals.fetch_add(1, Ordering::Relaxed);
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let [c, h, w] = self.config.input_shape;
        let want = [c, h, w];
        match x.shape() {
            [b, xc, xh, xw] if [*xc, *xh, *xw] == want && *b > 0 => Ok(*b),
            other => Err(Error::shape(
                format!("[batch, {c}, {h}, {w}]"),
                format!("{other:?}"),
            )),
        }
    }

    /// Forward through the whole stack for one chunk, recording the trace.
    pub(crate) fn forward_chunk(&self, x: Tensor) -> ChunkTrace {
        let n_layers = self.plan.len();
        let mut tr = ChunkTrace {
            acts: Vec::with_capacity(n_layers + 1),
            conv_cols: vec![None; n_layers],
            pool_idx: vec![None; n_layers],
        };
        tr.acts.push(x);
        for (i, layer) in self.plan.iter().enumerate() {
            let input = tr.acts.last().unwrap();
            let out = match layer {
                LayerRt::Conv { w, b, geom } => {
                    let (out, cols) = conv_forward(input, &self.params[*w], &self.params[*b], geom);
                    tr.conv_cols[i] = Some(cols);
                    out
                }
                LayerRt::MaxPool { window } => {
                    let (out, idx) = maxpool_forward(input, *window);
                    tr.pool_idx[i] = Some(idx);
                    out
                }
                LayerRt::Dense { w, b } => {
                    // Row-major [c,h,w] activations flatten in place.
                    dense_forward(input, &self.params[*w], &self.params[*b])
                }
                LayerRt::Relu => relu_forward(input),
                LayerRt::Softmax => softmax_forward(input),
            };
            tr.acts.push(out);
        }
        tr
    }

    /// Reverse pass over one chunk from a logits-level seed. Always
    /// produces both parameter gradients and the input gradient — the
    /// backward cost is uniform no matter which of the two the caller uses.
    pub(crate) fn backward_chunk(&self, tr: &ChunkTrace, dlogits: Tensor) -> (Vec<Tensor>, Tensor) {
        // Slots start empty: every parameter belongs to exactly one conv or
        // dense layer, and the walk below fills each one, so zero-filling
        // them up front would only be thrown away.
        let mut grads: Vec<Option<Tensor>> = self.params.iter().map(|_| None).collect();
        let mut cur = dlogits;
        for (i, layer) in self.plan.iter().enumerate().rev() {
            cur = match layer {
                // The seed is already below the softmax (see the loss
                // module's fused/composed seed builders).
                LayerRt::Softmax => cur,
                LayerRt::Dense { w, b } => {
                    let x = &tr.acts[i];
                    let (dw, db, dx) = dense_backward(&cur, x, &self.params[*w]);
                    grads[*w] = Some(dw);
                    grads[*b] = Some(db);
                    // dx comes back as [b, in]; restore the input's shape.
                    dx.reshape(x.shape().to_vec()).unwrap()
                }
                LayerRt::Relu => relu_backward(&cur, &tr.acts[i + 1]),
                LayerRt::MaxPool { .. } => {
                    let idx = tr.pool_idx[i].as_ref().unwrap();
                    maxpool_backward(&cur, idx, tr.acts[i].shape())
                }
                LayerRt::Conv { w, b, geom } => {
                    let cols = tr.conv_cols[i].as_ref().unwrap();
                    let (dw, db, dx) =
                        conv_backward(&cur, cols, &self.params[*w], geom, tr.batch());
                    grads[*w] = Some(dw);
                    grads[*b] = Some(db);
                    dx
                }
            };
        }
        let grads = grads
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        (grads, cur)
    }

    /// Plain inference: softmax probabilities for a batch of any size.
    pub fn forward(&self, x: &Tensor) -> Result<CategoricalBatch> {
        let b = self.check_input(x)?;
        let nc = self.logits_dim;
        let mut probs = Tensor::zeros(&[b, nc]);
        let ranges = chunk_ranges(b);
        let outs: Vec<Tensor> = ranges
            .par_iter()
            .map(|&(s, e)| {
                let tr = self.forward_chunk(x.slice_rows(s, e));
                tr.acts.last().unwrap().clone()
            })
            .collect();
        for ((s, e), out) in ranges.iter().zip(outs) {
            probs.data_mut()[s * nc..e * nc].copy_from_slice(out.data());
        }
        if probs.has_non_finite() {
            return Err(Error::NumericFailure(
                "non-finite probability in forward pass".into(),
            ));
        }
        Ok(CategoricalBatch { probs })
    }

    /// Forward pass that keeps every chunk trace, enabling repeated
    /// backward passes (with different seeds) over one forward.
    pub fn forward_traced(&self, x: &Tensor) -> Result<BatchTrace> {
        let b = self.check_input(x)?;
        let nc = self.logits_dim;
        let ranges = chunk_ranges(b);
        let chunks: Vec<ChunkTrace> = ranges
            .par_iter()
            .map(|&(s, e)| self.forward_chunk(x.slice_rows(s, e)))
            .collect();
        let mut probs = Tensor::zeros(&[b, nc]);
        for ((s, e), ch) in ranges.iter().zip(&chunks) {
            probs.data_mut()[s * nc..e * nc].copy_from_slice(ch.probs().data());
        }
        if probs.has_non_finite() {
            return Err(Error::NumericFailure(
                "non-finite probability in forward pass".into(),
            ));
        }
        Ok(BatchTrace {
            chunks,
            probs: CategoricalBatch { probs },
        })
    }

    /// Backward over a kept trace from a full-batch logits seed.
    ///
    /// Parameter gradients are accumulated over chunks in a fixed order;
    /// `want_input` additionally returns `∂/∂x` and counts one
    /// input-gradient evaluation.
    pub fn backward_traced(
        &self,
        trace: &BatchTrace,
        dlogits: &Tensor,
        want_input: bool,
    ) -> Result<(Gradients, Option<Tensor>)> {
        let b = trace.probs.batch();
        let nc = self.logits_dim;
        if dlogits.shape() != [b, nc] {
            return Err(Error::shape(
                format!("[{b}, {nc}]"),
                format!("{:?}", dlogits.shape()),
            ));
        }
        if want_input {
            self.note_input_grad_eval();
        }
        let ranges = chunk_ranges(b);
        let mut acc = Gradients::zeros_like(self);
        let mut dx = want_input.then(|| {
            let mut shape = vec![b];
            shape.extend_from_slice(&self.config.input_shape);
            Tensor::zeros(&shape)
        });
        // Process WAVE chunks at a time: parallel within a wave, folded in
        // chunk order, so the accumulation order never depends on threads.
        for wave in ranges.chunks(WAVE) {
            let parts: Vec<(Vec<Tensor>, Tensor)> = wave
                .par_iter()
                .map(|&(s, e)| {
                    let ci = s / CHUNK;
                    let seed = dlogits.slice_rows(s, e);
                    self.backward_chunk(&trace.chunks[ci], seed)
                })
                .collect();
            for (&(s, e), (grads, dxc)) in wave.iter().zip(parts) {
                for (a, g) in acc.tensors.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let w = dx.row_len();
                    dx.data_mut()[s * w..e * w].copy_from_slice(dxc.data());
                }
            }
        }
        Ok((acc, dx))
    }

    /// Fused forward+backward for a batch: each chunk runs forward then
    /// immediately backward (one chunk trace alive at a time), with the
    /// logits seed produced per chunk by `seed_fn(probs_chunk, first_row)`.
    ///
    /// Returns accumulated parameter gradients, the input gradient if
    /// requested, and the forward probabilities.
    pub fn backward_batch(
        &self,
        x: &Tensor,
        seed_fn: &(dyn Fn(&Tensor, usize) -> Tensor + Sync),
        want_input: bool,
    ) -> Result<(Gradients, Option<Tensor>, CategoricalBatch)> {
        let b = self.check_input(x)?;
        let nc = self.logits_dim;
        if want_input {
            self.note_input_grad_eval();
        }
        let ranges = chunk_ranges(b);
        let mut acc = Gradients::zeros_like(self);
        let mut dx = want_input.then(|| {
            let mut shape = vec![b];
            shape.extend_from_slice(&self.config.input_shape);
            Tensor::zeros(&shape)
        });
        let mut probs = Tensor::zeros(&[b, nc]);
        for wave in ranges.chunks(WAVE) {
            let parts: Vec<(Vec<Tensor>, Tensor, Tensor)> = wave
                .par_iter()
                .map(|&(s, e)| {
                    let tr = self.forward_chunk(x.slice_rows(s, e));
                    let p = tr.probs().clone();
                    let seed = seed_fn(&p, s);
                    let (grads, dxc) = self.backward_chunk(&tr, seed);
                    (grads, dxc, p)
                })
                .collect();
            for (&(s, e), (grads, dxc, p)) in wave.iter().zip(parts) {
                for (a, g) in acc.tensors.iter_mut().zip(&grads) {
                    for (xv, yv) in a.data_mut().iter_mut().zip(g.data()) {
                        *xv += yv;
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let w = dx.row_len();
                    dx.data_mut()[s * w..e * w].copy_from_slice(dxc.data());
                }
                probs.data_mut()[s * nc..e * nc].copy_from_slice(p.data());
            }
        }
        if probs.has_non_finite() {
            return Err(Error::NumericFailure(
                "non-finite probability in forward pass".into(),
            ));
        }
        Ok((acc, dx, CategoricalBatch { probs }))
    }
}

/// Gradient of the mean cross entropy between `targets` and the model
/// output, with respect to every parameter.
pub fn grad_params(
    model: &Model,
    x: &Tensor,
    targets: &crate::nn::loss::LabelBatch,
) -> Result<Gradients> {
    let b = x.dim0() as f64;
    let (grads, _, _) = model.backward_batch(
        x,
        &|probs_chunk, row0| {
            let t = targets.targets.slice_rows(row0, row0 + probs_chunk.dim0());
            crate::nn::loss::fused_ce_logits_grad(&t, probs_chunk, 1.0 / b)
        },
        false,
    )?;
    Ok(grads)
}

/// Gradient of the mean cross entropy with respect to the *input*, the
/// quantity every sign attack consumes. Parameters are held fixed.
pub fn grad_input(
    model: &Model,
    x: &Tensor,
    targets: &crate::nn::loss::LabelBatch,
) -> Result<Tensor> {
    let b = x.dim0() as f64;
    let (_, dx, _) = model.backward_batch(
        x,
        &|probs_chunk, row0| {
            let t = targets.targets.slice_rows(row0, row0 + probs_chunk.dim0());
            crate::nn::loss::fused_ce_logits_grad(&t, probs_chunk, 1.0 / b)
        },
        true,
    )?;
    Ok(dx.expect("input gradient requested"))
}

/// Splits `batch` into `[start, end)` ranges of at most [`CHUNK`] rows.
pub(crate) fn chunk_ranges(batch: usize) -> Vec<(usize, usize)> {
    (0..batch)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(batch)))
        .collect()
}
