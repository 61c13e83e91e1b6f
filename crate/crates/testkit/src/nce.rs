//! Brute-force contrastive estimator and losses evaluated in double-double
//! precision, written directly from the defining formulas. Independent of the
//! production code path on purpose: no shared helpers, no stabilization.

use crate::dd::Dd;

fn dot_dd(u: &[f64], v: &[f64]) -> Dd {
    let mut acc = Dd::zero();
    for (a, b) in u.iter().zip(v) {
        acc = acc.add(Dd::from_f64(*a).mul(Dd::from_f64(*b)));
    }
    acc
}

fn norm_dd(u: &[f64]) -> Dd {
    dot_dd(u, u).sqrt()
}

/// Cosine similarity u.v / (|u||v|) in double-double precision.
pub fn cosine_dd(u: &[f64], v: &[f64]) -> Dd {
    dot_dd(u, v).div(norm_dd(u).mul(norm_dd(v)))
}

/// exp(s(u, v) / tau) in double-double precision.
fn exp_sim(u: &[f64], v: &[f64], tau: f64) -> Dd {
    cosine_dd(u, v).div(Dd::from_f64(tau)).exp()
}

/// Positive-pair estimator: exp(s(z,zt)/tau) over itself plus the sum of
/// exp(s(zt,n)/tau) across the negative set.
pub fn nce_estimator_dd(z: &[f64], zt: &[f64], negatives: &[Vec<f64>], tau: f64) -> Dd {
    let pos = exp_sim(z, zt, tau);
    let mut denom = pos;
    for n in negatives {
        denom = denom.add(exp_sim(zt, n, tau));
    }
    pos.div(denom)
}

/// -log l(z, zt) - sum_{n} log(1 - l(zt, n)), each estimator evaluated with
/// the same negative set.
pub fn nce_loss_dd(z: &[f64], zt: &[f64], negatives: &[Vec<f64>], tau: f64) -> Dd {
    let mut loss = nce_estimator_dd(z, zt, negatives, tau).ln().neg();
    for n in negatives {
        let l_neg = nce_estimator_dd(zt, n, negatives, tau);
        loss = loss.sub(Dd::one().sub(l_neg).ln());
    }
    loss
}

/// lambda * L(r, zt) + (1 - lambda) * L(r, z).
pub fn final_loss_dd(
    r: &[f64],
    z: &[f64],
    zt: &[f64],
    negatives: &[Vec<f64>],
    tau: f64,
    lambda: f64,
) -> Dd {
    let view_term = nce_loss_dd(r, zt, negatives, tau).scale(lambda);
    let orig_term = nce_loss_dd(r, z, negatives, tau).scale(1.0 - lambda);
    view_term.add(orig_term)
}
