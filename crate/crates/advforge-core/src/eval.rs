//! Evaluation artifacts: accuracy-under-attack matrices (white-box and
//! substitute-transfer) and two-direction loss-surface grids, all emitted
//! as CSV with fixed seeds so reruns are byte-identical.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::loss::{hard_ce_per_example, LabelBatch};
use crate::nn::model::Model;
use crate::tensor::{sign, Tensor};

/// Accuracy grid: rows are attacks (or substitute models), columns are
/// evaluated models, cells are accuracies in [0,1].
#[derive(Debug, Clone)]
pub struct EvalMatrix {
    /// Label for the row dimension in the CSV corner cell
    /// (e.g. "attack" or "substitute").
    pub row_kind: String,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    /// Row-major, `row_ids.len() * col_ids.len()` cells.
    pub cells: Vec<f64>,
    pub dataset_id: String,
}

impl EvalMatrix {
    pub fn cell(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.col_ids.len() + col]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let io_err = |e| Error::io(path, e);
        let mut header = self.row_kind.clone();
        for c in &self.col_ids {
            header.push(',');
            header.push_str(c);
        }
        header.push('\n');
        w.write_all(header.as_bytes()).map_err(io_err)?;
        for (r, rid) in self.row_ids.iter().enumerate() {
            let mut line = rid.clone();
            for c in 0..self.col_ids.len() {
                line.push(',');
                line.push_str(&format!("{}", self.cell(r, c)));
            }
            line.push('\n');
            w.write_all(line.as_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }
}

/// Fraction of examples whose argmax prediction matches the label.
/// Argmax ties break toward the lowest class index.
pub fn accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    accuracy_on(model, &dataset.images, &dataset.labels)
}

pub fn accuracy_on(model: &Model, images: &Tensor, labels: &[u8]) -> Result<f64> {
    let probs = model.forward(images)?;
    let preds = probs.argmax();
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p == **l as usize)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// White-box accuracy matrix: for every (attack, model) cell the
/// adversarial set is generated against that same model, then scored on
/// it. A clean row (no attack) is always included first.
pub fn whitebox_matrix(
    models: &[(&str, &Model)],
    attack_specs: &[(&str, AttackSpec)],
    dataset: &Dataset,
    dataset_id: &str,
) -> Result<EvalMatrix> {
    let hard = LabelBatch::one_hot(&dataset.labels_usize(), crate::data::NUM_CLASSES)?;
    let mut row_ids = vec!["clean".to_string()];
    row_ids.extend(attack_specs.iter().map(|(id, _)| id.to_string()));
    let col_ids: Vec<String> = models.iter().map(|(id, _)| id.to_string()).collect();
    let mut cells = Vec::with_capacity(row_ids.len() * col_ids.len());
    for (_, model) in models {
        cells.push(accuracy(model, dataset)?);
    }
    for (_, spec) in attack_specs {
        for (_, model) in models {
            let adv = spec.run(model, &dataset.images, &hard)?;
            cells.push(accuracy_on(model, &adv, &dataset.labels)?);
        }
    }
    // Generation order above is row-major already for the attack rows; the
    // clean row was pushed first, so the layout is consistent.
    Ok(EvalMatrix {
        row_kind: "attack".into(),
        row_ids,
        col_ids,
        cells,
        dataset_id: dataset_id.to_string(),
    })
}

/// Transfer accuracy: adversarial examples generated with the substitute
/// model's gradients, scored on the target. With `substitute == target`
/// this is exactly the white-box number — same generation call, same
/// scoring call.
pub fn blackbox_transfer(
    substitute: &Model,
    target: &Model,
    attack_spec: &AttackSpec,
    dataset: &Dataset,
) -> Result<f64> {
    let hard = LabelBatch::one_hot(&dataset.labels_usize(), crate::data::NUM_CLASSES)?;
    let adv = attack_spec.run(substitute, &dataset.images, &hard)?;
    accuracy_on(target, &adv, &dataset.labels)
}

/// Full substitute × target transfer matrix for one attack. Each row's
/// adversarial set is generated once against the substitute and scored on
/// every target.
pub fn blackbox_matrix(
    substitutes: &[(&str, &Model)],
    targets: &[(&str, &Model)],
    attack_spec: &AttackSpec,
    dataset: &Dataset,
    dataset_id: &str,
) -> Result<EvalMatrix> {
    let hard = LabelBatch::one_hot(&dataset.labels_usize(), crate::data::NUM_CLASSES)?;
    let row_ids: Vec<String> = substitutes.iter().map(|(id, _)| id.to_string()).collect();
    let col_ids: Vec<String> = targets.iter().map(|(id, _)| id.to_string()).collect();
    let mut cells = Vec::with_capacity(row_ids.len() * col_ids.len());
    for (_, sub) in substitutes {
        let adv = attack_spec.run(sub, &dataset.images, &hard)?;
        for (_, tgt) in targets {
            cells.push(accuracy_on(tgt, &adv, &dataset.labels)?);
        }
    }
    Ok(EvalMatrix {
        row_kind: "substitute".into(),
        row_ids,
        col_ids,
        cells,
        dataset_id: dataset_id.to_string(),
    })
}

/// How the two surface directions were built; serialized next to the grid
/// so a surface can be reproduced exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionMeta {
    pub attack: AttackSpec,
    pub orthogonalization_seed: u64,
}

/// Loss evaluated over a 2-D grid of perturbations
/// `x + t1·g1 + t2·g2` (clipped to the data range), summed over the batch.
#[derive(Debug, Clone)]
pub struct SurfaceGrid {
    pub t1_values: Vec<f64>,
    pub t2_values: Vec<f64>,
    /// `loss[i][j]` for `(t1_values[i], t2_values[j])`.
    pub loss: Vec<Vec<f64>>,
    pub direction_meta: DirectionMeta,
}

impl SurfaceGrid {
    /// Long-format CSV: `t1,t2,loss`, row-major over the grid.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let io_err = |e| Error::io(path, e);
        w.write_all(b"t1,t2,loss\n").map_err(io_err)?;
        for (i, t1) in self.t1_values.iter().enumerate() {
            for (j, t2) in self.t2_values.iter().enumerate() {
                writeln!(w, "{t1},{t2},{}", self.loss[i][j]).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    pub fn write_meta_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.direction_meta)
            .expect("direction meta serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Default grid resolution: 17 points per axis over [0, t_max].
pub const SURFACE_GRID_STEPS: usize = 17;
pub const SURFACE_T_MAX: f64 = 0.4;

/// Builds the two per-example directions for a surface.
///
/// `g1 = sign(x_adv − x)` from the supplied attack; `g2` starts as a
/// seeded ±1 vector, is Gram–Schmidt-orthogonalized against `g1`, and is
/// rescaled to `g1`'s ℓ2 norm. Examples the attack did not move at all
/// (g1 = 0) get g2 = 0 as well. Public so a recorded
/// `(attack, orthogonalization_seed)` pair can be turned back into the
/// exact plane a grid was sampled on.
pub fn surface_directions(
    model: &Model,
    dataset: &Dataset,
    attack: &AttackSpec,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    let hard = LabelBatch::one_hot(&dataset.labels_usize(), crate::data::NUM_CLASSES)?;
    let x = &dataset.images;
    let adv = attack.run(model, x, &hard)?;
    let mut g1 = Tensor::zeros(x.shape());
    for ((g, a), o) in g1.data_mut().iter_mut().zip(adv.data()).zip(x.data()) {
        *g = sign(a - o);
    }

    let n = x.dim0();
    let w = x.row_len();
    let mut g2 = Tensor::zeros(x.shape());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let g1_row = &g1.data()[i * w..(i + 1) * w];
        let norm1_sq: f64 = g1_row.iter().map(|v| v * v).sum();
        if norm1_sq == 0.0 {
            continue; // g1 = 0: leave g2 = 0, the example spans no plane
        }
        let norm1 = norm1_sq.sqrt();
        // Draw, project out g1, rescale; redraw in-stream if the residual
        // degenerates (a ±1 vector exactly parallel to g1).
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 100 {
                return Err(Error::NumericFailure(
                    "could not draw a direction independent of g1".into(),
                ));
            }
            let mut row: Vec<f64> = (0..w)
                .map(|_| if rng.next_u32() & 1 == 1 { 1.0 } else { -1.0 })
                .collect();
            let dot: f64 = row.iter().zip(g1_row).map(|(a, b)| a * b).sum();
            let coef = dot / norm1_sq;
            for (r, g) in row.iter_mut().zip(g1_row) {
                *r -= coef * g;
            }
            let res_sq: f64 = row.iter().map(|v| v * v).sum();
            if res_sq == 0.0 {
                continue;
            }
            let scale = norm1 / res_sq.sqrt();
            for (dst, r) in g2.data_mut()[i * w..(i + 1) * w].iter_mut().zip(&row) {
                *dst = r * scale;
            }
            break;
        }
    }
    Ok((g1, g2))
}

/// Evaluates the summed hard-label CE over the `(t1, t2)` grid.
pub fn loss_surface(
    model: &Model,
    dataset: &Dataset,
    direction_attack: &AttackSpec,
    t_max: f64,
    grid_steps: usize,
    seed: u64,
) -> Result<SurfaceGrid> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("surface batch is empty".into()));
    }
    if grid_steps < 2 {
        return Err(Error::InvalidConfig(format!(
            "grid_steps must be >= 2, got {grid_steps}"
        )));
    }
    if !(t_max.is_finite() && t_max > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "t_max must be > 0, got {t_max}"
        )));
    }
    let (g1, g2) = surface_directions(model, dataset, direction_attack, seed)?;
    let ts: Vec<f64> = (0..grid_steps)
        .map(|i| t_max * i as f64 / (grid_steps - 1) as f64)
        .collect();
    let labels = dataset.labels_usize();
    let [lo, hi] = dataset.data_range;
    let x = &dataset.images;
    let mut loss = vec![vec![0.0; grid_steps]; grid_steps];
    let mut point = Tensor::zeros(x.shape());
    for (i, &t1) in ts.iter().enumerate() {
        for (j, &t2) in ts.iter().enumerate() {
            for (((p, xv), a), b) in point
                .data_mut()
                .iter_mut()
                .zip(x.data())
                .zip(g1.data())
                .zip(g2.data())
            {
                *p = (xv + t1 * a + t2 * b).clamp(lo, hi);
            }
            let probs = model.forward(&point)?;
            let total: f64 = hard_ce_per_example(&labels, &probs.probs).iter().sum();
            if !total.is_finite() {
                return Err(Error::NumericFailure(format!(
                    "non-finite surface loss at t1={t1}, t2={t2}"
                )));
            }
            loss[i][j] = total;
        }
    }
    Ok(SurfaceGrid {
        t1_values: ts.clone(),
        t2_values: ts,
        loss,
        direction_meta: DirectionMeta {
            attack: *direction_attack,
            orthogonalization_seed: seed,
        },
    })
}
