//! Scaled dot-product attention with a single query vector and learned
//! Q/K/V/O projections, evaluated over one or more windows of key rows.

use serde::{Deserialize, Serialize};

use super::{McfnError, Result};

/// Square `dim`×`dim` projections, row-major, applied as `W · x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub dim: usize,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
}

impl ProjectionSet {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            wq: vec![0.0; dim * dim],
            wk: vec![0.0; dim * dim],
            wv: vec![0.0; dim * dim],
            wo: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        Self {
            dim,
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye.clone(),
            wo: eye,
        }
    }
}

#[inline]
pub(crate) fn matvec(w: &[f64], x: &[f64], dim: usize, out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate().take(dim) {
        let row = &w[r * dim..(r + 1) * dim];
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

#[inline]
fn matvec_t_acc(w: &[f64], g: &[f64], dim: usize, out: &mut [f64]) {
    for r in 0..dim {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        let row = &w[r * dim..(r + 1) * dim];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * gr;
        }
    }
}

#[inline]
fn outer_acc(acc: &mut [f64], g: &[f64], x: &[f64], dim: usize) {
    for r in 0..dim {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        for (a, b) in acc[r * dim..(r + 1) * dim].iter_mut().zip(x) {
            *a += gr * b;
        }
    }
}

fn project_rows(w: &[f64], rows: &[f64], dim: usize) -> Vec<f64> {
    let n = rows.len() / dim;
    let mut out = vec![0.0; n * dim];
    for i in 0..n {
        matvec(w, &rows[i * dim..(i + 1) * dim], dim, &mut out[i * dim..(i + 1) * dim]);
    }
    out
}

/// Saved forward state for one query over a set of windows.
#[derive(Debug, Clone)]
pub struct AttnForward {
    pub(crate) qp: Vec<f64>,
    pub(crate) kp: Vec<f64>,
    pub(crate) vp: Vec<f64>,
    pub(crate) windows: Vec<Vec<usize>>,
    /// Per window, `heads × len` softmax weights.
    pub(crate) weights: Vec<Vec<f64>>,
    pub(crate) ctx: Vec<Vec<f64>>,
    /// Per window output `W_o · ctx`.
    pub outputs: Vec<Vec<f64>>,
}

pub(crate) fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(McfnError::NumericInput(format!("non-finite value in {what}")));
    }
    Ok(())
}

/// Attention of `query` against every window of key/value rows.
pub fn attention_forward(
    proj: &ProjectionSet,
    heads: usize,
    query: &[f64],
    keys: &[f64],
    values: &[f64],
    windows: Vec<Vec<usize>>,
) -> Result<AttnForward> {
    let dim = proj.dim;
    if query.len() != dim || keys.len() % dim != 0 || keys.len() != values.len() {
        return Err(McfnError::Dimension(format!(
            "attention operands disagree: query {}, keys {}, values {}, dim {dim}",
            query.len(),
            keys.len(),
            values.len()
        )));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(McfnError::Config(format!("{heads} heads do not divide dim {dim}")));
    }
    check_finite("attention query", query)?;
    check_finite("attention keys", keys)?;
    check_finite("attention values", values)?;
    let n = keys.len() / dim;
    if n == 0 {
        return Err(McfnError::Dimension("attention over zero keys".into()));
    }
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut qp = vec![0.0; dim];
    matvec(&proj.wq, query, dim, &mut qp);
    let kp = project_rows(&proj.wk, keys, dim);
    let vp = project_rows(&proj.wv, values, dim);

    let mut weights = Vec::with_capacity(windows.len());
    let mut ctx = Vec::with_capacity(windows.len());
    let mut outputs = Vec::with_capacity(windows.len());
    for win in &windows {
        let len = win.len();
        let mut wts = vec![0.0; heads * len];
        let mut c = vec![0.0; dim];
        for h in 0..heads {
            let qh = &qp[h * hd..(h + 1) * hd];
            let logits = &mut wts[h * len..(h + 1) * len];
            for (slot, &i) in logits.iter_mut().zip(win) {
                let kh = &kp[i * dim + h * hd..i * dim + (h + 1) * hd];
                *slot = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - mx).exp();
                z += *l;
            }
            for l in logits.iter_mut() {
                *l /= z;
            }
            let ch = &mut c[h * hd..(h + 1) * hd];
            for (&a, &i) in logits.iter().zip(win) {
                let vh = &vp[i * dim + h * hd..i * dim + (h + 1) * hd];
                for (o, v) in ch.iter_mut().zip(vh) {
                    *o += a * v;
                }
            }
        }
        let mut out = vec![0.0; dim];
        matvec(&proj.wo, &c, dim, &mut out);
        weights.push(wts);
        ctx.push(c);
        outputs.push(out);
    }
    Ok(AttnForward {
        qp,
        kp,
        vp,
        windows,
        weights,
        ctx,
        outputs,
    })
}

/// Where attention input gradients should be accumulated.
pub struct AttnInputGrads<'a> {
    pub query: Option<&'a mut [f64]>,
    pub keys: Option<&'a mut [f64]>,
    pub values: Option<&'a mut [f64]>,
}

/// Backpropagates per-window output gradients into projection gradients and
/// (optionally) into the query, key and value inputs.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    proj: &ProjectionSet,
    heads: usize,
    query: &[f64],
    keys: &[f64],
    values: &[f64],
    fwd: &AttnForward,
    d_outputs: &[Vec<f64>],
    grads: &mut ProjectionSet,
    inputs: AttnInputGrads<'_>,
) {
    let dim = proj.dim;
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let n = keys.len() / dim;
    let mut dqp = vec![0.0; dim];
    let mut dkp = vec![0.0; n * dim];
    let mut dvp = vec![0.0; n * dim];
    let mut dc = vec![0.0; dim];
    for (wi, win) in fwd.windows.iter().enumerate() {
        let dout = &d_outputs[wi];
        if dout.iter().all(|&g| g == 0.0) {
            continue;
        }
        outer_acc(&mut grads.wo, dout, &fwd.ctx[wi], dim);
        dc.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_acc(&proj.wo, dout, dim, &mut dc);
        let len = win.len();
        let wts = &fwd.weights[wi];
        for h in 0..heads {
            let a = &wts[h * len..(h + 1) * len];
            let dch = &dc[h * hd..(h + 1) * hd];
            let qh = &fwd.qp[h * hd..(h + 1) * hd];
            let mut da = vec![0.0; len];
            for (k, &i) in win.iter().enumerate() {
                let vh = &fwd.vp[i * dim + h * hd..i * dim + (h + 1) * hd];
                da[k] = dch.iter().zip(vh).map(|(x, y)| x * y).sum();
                let dvh = &mut dvp[i * dim + h * hd..i * dim + (h + 1) * hd];
                for (o, g) in dvh.iter_mut().zip(dch) {
                    *o += a[k] * g;
                }
            }
            let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
            for (k, &i) in win.iter().enumerate() {
                let ds = a[k] * (da[k] - mean) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kh = &fwd.kp[i * dim + h * hd..i * dim + (h + 1) * hd];
                for (o, kv) in dqp[h * hd..(h + 1) * hd].iter_mut().zip(kh) {
                    *o += ds * kv;
                }
                let dkh = &mut dkp[i * dim + h * hd..i * dim + (h + 1) * hd];
                for (o, qv) in dkh.iter_mut().zip(qh) {
                    *o += ds * qv;
                }
            }
        }
    }
    outer_acc(&mut grads.wq, &dqp, query, dim);
    if let Some(dq) = inputs.query {
        matvec_t_acc(&proj.wq, &dqp, dim, dq);
    }
    let mut dk_in = inputs.keys;
    let mut dv_in = inputs.values;
    for i in 0..n {
        let gk = &dkp[i * dim..(i + 1) * dim];
        let gv = &dvp[i * dim..(i + 1) * dim];
        outer_acc(&mut grads.wk, gk, &keys[i * dim..(i + 1) * dim], dim);
        outer_acc(&mut grads.wv, gv, &values[i * dim..(i + 1) * dim], dim);
        if let Some(dk) = dk_in.as_deref_mut() {
            matvec_t_acc(&proj.wk, gk, dim, &mut dk[i * dim..(i + 1) * dim]);
        }
        if let Some(dv) = dv_in.as_deref_mut() {
            matvec_t_acc(&proj.wv, gv, dim, &mut dv[i * dim..(i + 1) * dim]);
        }
    }
}

/// Single-query attention `W_o · softmax((W_q q)(W_k K)ᵀ/√d) (W_v V)` over all rows.
pub fn attn(query: &[f64], keys: &[f64], values: &[f64], proj: &ProjectionSet, heads: usize) -> Result<Vec<f64>> {
    let n = keys.len() / proj.dim.max(1);
    let fwd = attention_forward(proj, heads, query, keys, values, vec![(0..n).collect()])?;
    Ok(fwd.outputs.into_iter().next().expect("one window"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_proj(dim: usize, seed: u64) -> ProjectionSet {
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut p = ProjectionSet::zeros(dim);
        for w in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo] {
            for v in w.iter_mut() {
                *v = next();
            }
        }
        p
    }

    #[test]
    fn single_key_ignores_query() {
        let p = random_proj(3, 1);
        let v = [0.3, -1.0, 2.0];
        let a = attn(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0], &v, &p, 1).unwrap();
        let b = attn(&[-4.0, 0.0, 9.0], &[5.0, 5.0, 5.0], &v, &p, 1).unwrap();
        let mut wv = [0.0; 3];
        matvec(&p.wv, &v, 3, &mut wv);
        let mut expect = [0.0; 3];
        matvec(&p.wo, &wv, 3, &mut expect);
        for i in 0..3 {
            assert!((a[i] - expect[i]).abs() < 1e-14);
            assert!((b[i] - expect[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_rows() {
        let p = random_proj(2, 2);
        let row = [0.7, -0.2];
        let keys: Vec<f64> = row.iter().cycle().take(10).copied().collect();
        let out = attn(&[1.0, 1.0], &keys, &keys, &p, 1).unwrap();
        let single = attn(&[1.0, 1.0], &row, &row, &p, 1).unwrap();
        for i in 0..2 {
            assert!((out[i] - single[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn hand_evaluated_two_by_two() {
        // q=(1,0), k1=(1,0), k2=(0,1): logits 1/√2 and 0.
        let p = ProjectionSet::identity(2);
        let out = attn(&[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0], &[2.0, 0.0, 0.0, 4.0], &p, 1).unwrap();
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let a1 = e / (e + 1.0);
        let a2 = 1.0 / (e + 1.0);
        assert!((out[0] - 2.0 * a1).abs() < 1e-14);
        assert!((out[1] - 4.0 * a2).abs() < 1e-14);
    }

    #[test]
    fn nan_input_rejected() {
        let p = ProjectionSet::identity(2);
        let err = attn(&[f64::NAN, 0.0], &[1.0, 0.0], &[1.0, 0.0], &p, 1).unwrap_err();
        assert!(matches!(err, McfnError::NumericInput(_)));
    }

    fn scalar_loss(p: &ProjectionSet, heads: usize, q: &[f64], k: &[f64], v: &[f64], wins: &[Vec<usize>], dirs: &[Vec<f64>]) -> f64 {
        let fwd = attention_forward(p, heads, q, k, v, wins.to_vec()).unwrap();
        fwd.outputs
            .iter()
            .zip(dirs)
            .map(|(o, d)| o.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let dim = 4;
        let heads = 2;
        let p = random_proj(dim, 7);
        let q: Vec<f64> = (0..dim).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..6 * dim).map(|i| (i as f64 * 0.91).cos()).collect();
        let v: Vec<f64> = (0..6 * dim).map(|i| (i as f64 * 0.53).sin()).collect();
        let wins = vec![vec![0, 1, 2], vec![3, 4, 5], vec![1, 4]];
        let dirs: Vec<Vec<f64>> = (0..3).map(|w| (0..dim).map(|i| ((w * dim + i) as f64 * 1.3).sin()).collect()).collect();
        let fwd = attention_forward(&p, heads, &q, &k, &v, wins.clone()).unwrap();
        let mut g = ProjectionSet::zeros(dim);
        let mut dq = vec![0.0; dim];
        let mut dk = vec![0.0; k.len()];
        let mut dv = vec![0.0; v.len()];
        attention_backward(
            &p,
            heads,
            &q,
            &k,
            &v,
            &fwd,
            &dirs,
            &mut g,
            AttnInputGrads {
                query: Some(&mut dq),
                keys: Some(&mut dk),
                values: Some(&mut dv),
            },
        );
        let h = 1e-6;
        let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
        for i in 0..dim * dim {
            let num = fd(&|e| {
                let mut pp = p.clone();
                pp.wk[i] += e;
                scalar_loss(&pp, heads, &q, &k, &v, &wins, &dirs)
            });
            assert!((num - g.wk[i]).abs() < 1e-7, "wk[{i}]");
            let num = fd(&|e| {
                let mut pp = p.clone();
                pp.wq[i] += e;
                scalar_loss(&pp, heads, &q, &k, &v, &wins, &dirs)
            });
            assert!((num - g.wq[i]).abs() < 1e-7, "wq[{i}]");
        }
        for i in 0..dim {
            let num = fd(&|e| {
                let mut qq = q.clone();
                qq[i] += e;
                scalar_loss(&p, heads, &qq, &k, &v, &wins, &dirs)
            });
            assert!((num - dq[i]).abs() < 1e-7);
        }
        for i in 0..k.len() {
            let num = fd(&|e| {
                let mut kk = k.clone();
                kk[i] += e;
                scalar_loss(&p, heads, &q, &kk, &v, &wins, &dirs)
            });
            assert!((num - dk[i]).abs() < 1e-7);
            let num = fd(&|e| {
                let mut vv = v.clone();
                vv[i] += e;
                scalar_loss(&p, heads, &q, &k, &vv, &wins, &dirs)
            });
            assert!((num - dv[i]).abs() < 1e-7);
        }
    }
}
