//! Loss value and analytic gradients at the embedding level.
//!
//! For anchor i with bank entry r_i (a constant), original embedding z_i,
//! view embedding zt_i and negative set X' = views of all other anchors, the
//! blended per-anchor loss is
//!
//!   lambda * T(r_i, zt_i) + (1 - lambda) * T(r_i, z_i),
//!   T(a, b) = -log l(a, b) - sum_{q in X'} log(1 - l(b, v_q)),
//!
//! with the estimator's asymmetric roles. Gradients flow through every
//! embedding produced by the network: the anchor's z and zt, and every view
//! embedding, which appears both behind the view head and as a negative in
//! the other anchors' losses. Exponentials are shifted by the maximum
//! possible argument 1/tau; all shifted factors cancel inside each
//! coefficient, so the gradients equal the unshifted formulas.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};

#[derive(Debug)]
pub struct LossGrad {
    /// Mean loss over anchors.
    pub loss: f64,
    pub per_anchor: Vec<f64>,
    pub d_z: Array2<f64>,
    pub d_views: Array3<f64>,
    pub d_zt: Array2<f64>,
}

struct Normed {
    norms: Vec<f64>,
    units: Array2<f64>,
}

fn normalize(rows: &Array2<f64>, what: &str) -> Result<Normed> {
    let (n, p) = rows.dim();
    let mut norms = Vec::with_capacity(n);
    let mut units = Array2::<f64>::zeros((n, p));
    for i in 0..n {
        let row = rows.row(i);
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateInput(format!("zero-norm {what} embedding {i}")));
        }
        if !norm.is_finite() {
            return Err(Error::NumericalFault(format!("non-finite {what} embedding {i}")));
        }
        for j in 0..p {
            units[[i, j]] = row[j] / norm;
        }
        norms.push(norm);
    }
    Ok(Normed { norms, units })
}

/// d s(u, w) / du = (unit_w - s * unit_u) / |u|, accumulated as
/// `coeff * d s/du` into `out`.
fn add_sim_grad(
    out: &mut Array2<f64>,
    row: usize,
    coeff: f64,
    unit_u: ndarray::ArrayView1<f64>,
    norm_u: f64,
    unit_w: ndarray::ArrayView1<f64>,
    sim: f64,
) {
    let scale = coeff / norm_u;
    let mut target = out.row_mut(row);
    for j in 0..unit_u.len() {
        target[j] += scale * (unit_w[j] - sim * unit_u[j]);
    }
}

/// Compute the batch loss and its gradients with respect to all produced
/// embeddings. `r` holds one constant bank row per anchor.
pub fn contrastive_loss_grad(
    z: &Array2<f64>,
    views: &Array3<f64>,
    zt: &Array2<f64>,
    r: &Array2<f64>,
    tau: f64,
    lambda: f64,
) -> Result<LossGrad> {
    let (k, p) = z.dim();
    let (kv, m, pv) = views.dim();
    if kv != k || zt.dim() != (k, p) || r.dim() != (k, p) || pv != p {
        return Err(Error::ShapeMismatch {
            what: "loss gradient inputs".into(),
            expected: format!("[{k}, {p}] embeddings"),
            got: format!("views [{kv}, {m}, {pv}], zt {:?}, r {:?}", zt.dim(), r.dim()),
        });
    }
    if k < 2 {
        return Err(Error::config("batch_size", "need at least two anchors"));
    }
    if tau <= 0.0 {
        return Err(Error::config("tau", "temperature must be positive"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("lambda", "blend weight must be in [0, 1]"));
    }

    let q_total = k * m;
    let v_flat = views
        .to_shape((q_total, p))
        .expect("contiguous view reshape")
        .to_owned();
    let zn = normalize(z, "original")?;
    let ztn = normalize(zt, "view-head")?;
    let rn = normalize(r, "bank")?;
    let vn = normalize(&v_flat, "view")?;

    // exp((sim - 1) / tau) between all view pairs; the diagonal is exactly 1.
    let mut e_vv = Array2::<f64>::zeros((q_total, q_total));
    for a in 0..q_total {
        for b in 0..q_total {
            let sim = vn.units.row(a).dot(&vn.units.row(b));
            e_vv[[a, b]] = ((sim - 1.0) / tau).exp();
        }
    }
    let row_total: Vec<f64> = (0..q_total).map(|a| e_vv.row(a).sum()).collect();

    let mut d_z = Array2::<f64>::zeros((k, p));
    let mut d_zt = Array2::<f64>::zeros((k, p));
    let mut d_v = Array2::<f64>::zeros((q_total, p));
    // Accumulated coefficients for view-pair similarities.
    let mut w_vv = Array2::<f64>::zeros((q_total, q_total));

    let inv_k = 1.0 / k as f64;
    let mut per_anchor = vec![0.0; k];

    for i in 0..k {
        let own = i * m..(i + 1) * m;
        // Negative mass of each view against anchor i's negative set.
        let s_i: Vec<f64> = (0..q_total)
            .map(|q| {
                let mut s = row_total[q];
                for o in own.clone() {
                    s -= e_vv[[q, o]];
                }
                s
            })
            .collect();

        let mut terms: Vec<(bool, f64)> = Vec::with_capacity(2);
        if lambda > 0.0 {
            terms.push((true, lambda));
        }
        if lambda < 1.0 {
            terms.push((false, 1.0 - lambda));
        }

        for &(is_view_head, weight) in &terms {
            let (b_units, b_norms) = if is_view_head {
                (&ztn.units, &ztn.norms)
            } else {
                (&zn.units, &zn.norms)
            };
            let b_unit = b_units.row(i);
            let b_norm = b_norms[i];

            let pos_sim = rn.units.row(i).dot(&b_unit);
            let e_pos = ((pos_sim - 1.0) / tau).exp();

            let mut e_b = vec![0.0; q_total];
            let mut s_b = 0.0;
            for q in 0..q_total {
                if own.contains(&q) {
                    continue;
                }
                let sim = b_unit.dot(&vn.units.row(q));
                e_b[q] = ((sim - 1.0) / tau).exp();
                s_b += e_b[q];
            }
            let d_total = e_pos + s_b;
            if !(d_total.is_finite() && d_total > 0.0 && e_pos > 0.0) {
                return Err(Error::NumericalFault(
                    "contrastive partition vanished; temperature too small".into(),
                ));
            }

            // Loss value: -log l(r, b) + sum_q -log(1 - l(b, v_q)).
            let mut term_loss = (s_b / e_pos).ln_1p();
            for q in 0..q_total {
                if own.contains(&q) {
                    continue;
                }
                if !(s_i[q] > 0.0) {
                    return Err(Error::NumericalFault(
                        "negative mass vanished; temperature too small".into(),
                    ));
                }
                term_loss += (e_b[q] / s_i[q]).ln_1p();
            }
            per_anchor[i] += weight * term_loss;

            // d / d s(r_i, b): (l(r, b) - 1) / tau, into b only (r constant).
            let c_pos = weight * inv_k * (e_pos / d_total - 1.0) / tau;
            let d_b = if is_view_head { &mut d_zt } else { &mut d_z };
            add_sim_grad(d_b, i, c_pos, b_unit, b_norm, rn.units.row(i), pos_sim);

            for q in 0..q_total {
                if own.contains(&q) {
                    continue;
                }
                // d / d s(b, v_q): mass inside the positive estimator plus
                // the estimator of the q-th rejection term.
                let c_bq =
                    weight * inv_k * (e_b[q] / d_total + e_b[q] / (e_b[q] + s_i[q])) / tau;
                let sim_bq = b_unit.dot(&vn.units.row(q));
                let d_b = if is_view_head { &mut d_zt } else { &mut d_z };
                add_sim_grad(d_b, i, c_bq, b_unit, b_norm, vn.units.row(q), sim_bq);
                add_sim_grad(
                    &mut d_v,
                    q,
                    c_bq,
                    vn.units.row(q),
                    vn.norms[q],
                    b_unit,
                    sim_bq,
                );

                // d / d s(v_q, v_k) from the q-th rejection term's partition.
                let alpha =
                    weight * inv_k * (1.0 / (e_b[q] + s_i[q]) - 1.0 / s_i[q]) / tau;
                for k2 in 0..q_total {
                    if own.contains(&k2) {
                        continue;
                    }
                    w_vv[[q, k2]] += alpha * e_vv[[q, k2]];
                }
            }
        }
    }

    // Apply accumulated view-pair coefficients. The diagonal similarity
    // s(v, v) is constant 1, so its gradient is exactly zero and skipped.
    for a in 0..q_total {
        for b in 0..q_total {
            if a == b {
                continue;
            }
            let coeff = w_vv[[a, b]];
            if coeff == 0.0 {
                continue;
            }
            let sim = vn.units.row(a).dot(&vn.units.row(b));
            add_sim_grad(&mut d_v, a, coeff, vn.units.row(a), vn.norms[a], vn.units.row(b), sim);
            add_sim_grad(&mut d_v, b, coeff, vn.units.row(b), vn.norms[b], vn.units.row(a), sim);
        }
    }

    let loss = per_anchor.iter().sum::<f64>() * inv_k;
    if !loss.is_finite() {
        return Err(Error::NumericalFault("non-finite batch loss".into()));
    }
    let d_views = d_v
        .to_shape((k, m, p))
        .expect("contiguous reshape")
        .to_owned();
    Ok(LossGrad {
        loss,
        per_anchor,
        d_z,
        d_views,
        d_zt,
    })
}

/// Convenience for tests and forward-only scoring: the loss exactly as
/// [`contrastive_loss_grad`] computes it, without gradients.
pub fn contrastive_loss_value(
    z: &Array2<f64>,
    views: &Array3<f64>,
    zt: &Array2<f64>,
    r: &Array2<f64>,
    tau: f64,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let lg = contrastive_loss_grad(z, views, zt, r, tau, lambda)?;
    Ok((lg.loss, lg.per_anchor))
}
