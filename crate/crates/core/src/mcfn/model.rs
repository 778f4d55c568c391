//! Per-level forward pass (MAB → CMB → decoder) and its reverse-mode gradient.

use crate::encoder::{encode_level, EncoderSpec, PatchEncoder, TokenGrid};
use crate::pyramid::{FloatMap, MagnificationPyramid};

use super::attention::{attention_backward, attention_forward, check_finite, AttnForward, AttnInputGrads};
use super::decoder::{decoder_backward, decoder_forward, DecoderCache};
use super::grid::GridResampler;
use super::params::{CmbScope, McfnParams};
use super::{Heatmap, McfnError, Result};

fn mag_token<'a>(params: &'a McfnParams, m: usize) -> Result<&'a [f64]> {
    params
        .mag_token(m)
        .ok_or_else(|| McfnError::Config(format!("no magnification token for level {m}")))
}

fn broadcast_add(base: &[f64], vec: &[f64], gate: f64) -> Vec<f64> {
    if gate == 0.0 {
        return base.to_vec();
    }
    let dim = vec.len();
    let mut out = base.to_vec();
    for tok in out.chunks_exact_mut(dim) {
        for (t, v) in tok.iter_mut().zip(vec) {
            *t += gate * v;
        }
    }
    out
}

fn mab_cached(x: &TokenGrid, m: usize, params: &McfnParams) -> Result<(Vec<f64>, AttnForward)> {
    if x.dim != params.config.dim {
        return Err(McfnError::Dimension(format!(
            "token dim {} but model dim {}",
            x.dim, params.config.dim
        )));
    }
    let t = mag_token(params, m)?;
    let n = x.num_tokens();
    let fwd = attention_forward(&params.mab, params.config.heads, t, &x.data, &x.data, vec![(0..n).collect()])?;
    let y = broadcast_add(&x.data, &fwd.outputs[0], params.gamma);
    Ok((y, fwd))
}

/// `X ← X + γ · Attn(t^m, X, X)`, broadcast over every token.
pub fn mab_forward(x: &TokenGrid, m: usize, params: &McfnParams) -> Result<TokenGrid> {
    check_finite("tokens", &x.data)?;
    let (y, _) = mab_cached(x, m, params)?;
    Ok(TokenGrid { data: y, ..x.clone() })
}

/// Window partition of a grid plus the window index of every cell.
fn windows_for(h: usize, w: usize, scope: CmbScope) -> (Vec<Vec<usize>>, Vec<usize>) {
    match scope {
        CmbScope::Global => (vec![(0..h * w).collect()], vec![0; h * w]),
        CmbScope::Windowed { side } => {
            let side = side.max(1);
            let (wy, wx) = (h.div_ceil(side), w.div_ceil(side));
            let mut wins = vec![Vec::new(); wy * wx];
            let mut cell_win = vec![0; h * w];
            for r in 0..h {
                for c in 0..w {
                    let wi = (r / side) * wx + c / side;
                    wins[wi].push(r * w + c);
                    cell_win[r * w + c] = wi;
                }
            }
            (wins, cell_win)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone)]
struct NeighborTerm {
    side: Side,
    level: usize,
    gate: f64,
    resampler: GridResampler,
    yhat: Vec<f64>,
    attn: AttnForward,
}

struct CmbOut {
    z: Vec<f64>,
    terms: Vec<NeighborTerm>,
    cell_win: Vec<usize>,
}

fn cmb_cached(
    y: &[f64],
    grid: (usize, usize),
    lower: Option<(usize, &[f64], (usize, usize))>,
    upper: Option<(usize, &[f64], (usize, usize))>,
    params: &McfnParams,
) -> Result<CmbOut> {
    let dim = params.config.dim;
    let (windows, cell_win) = windows_for(grid.0, grid.1, params.config.cmb_scope);
    let mut terms = Vec::new();
    for (side, nb, gate) in [(Side::Lower, lower, params.u), (Side::Upper, upper, params.w)] {
        let Some((level, data, src)) = nb else { continue };
        if data.len() != src.0 * src.1 * dim {
            return Err(McfnError::Dimension(format!(
                "neighbor level {level} tokens do not have dimension {dim}"
            )));
        }
        let resampler = GridResampler::new(src, grid)?;
        let yhat = resampler.apply(data, dim);
        let t = mag_token(params, level)?;
        let attn = attention_forward(&params.cmb, params.config.heads, t, &yhat, &yhat, windows.clone())?;
        terms.push(NeighborTerm {
            side,
            level,
            gate,
            resampler,
            yhat,
            attn,
        });
    }
    let mut z = y.to_vec();
    for term in &terms {
        if term.gate == 0.0 {
            continue;
        }
        for (cell, tok) in z.chunks_exact_mut(dim).enumerate() {
            let add = &term.attn.outputs[cell_win[cell]];
            for (t, a) in tok.iter_mut().zip(add) {
                *t += term.gate * a;
            }
        }
    }
    Ok(CmbOut { z, terms, cell_win })
}

/// `X ← X + u·Attn(t^{m−1}, X̂^{m−1}) + w·Attn(t^{m+1}, X̂^{m+1})` with
/// neighbors resampled onto `x`'s grid and attention taken per window.
/// Absent neighbors contribute nothing.
pub fn cmb_forward(
    x: &TokenGrid,
    m: usize,
    lower: Option<&TokenGrid>,
    upper: Option<&TokenGrid>,
    params: &McfnParams,
) -> Result<TokenGrid> {
    check_finite("tokens", &x.data)?;
    for nb in lower.iter().chain(upper.iter()) {
        if nb.dim != x.dim {
            return Err(McfnError::Dimension(format!(
                "neighbor level {} has dim {} but level {m} has {}",
                nb.level_index, nb.dim, x.dim
            )));
        }
    }
    let lo = lower.map(|g| (m.wrapping_sub(1), &g.data[..], (g.grid_h, g.grid_w)));
    let hi = upper.map(|g| (m + 1, &g.data[..], (g.grid_h, g.grid_w)));
    let out = cmb_cached(&x.data, (x.grid_h, x.grid_w), lo, hi, params)?;
    Ok(TokenGrid { data: out.z, ..x.clone() })
}

fn to_chw(data: &[f64], h: usize, w: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for cell in 0..h * w {
        for c in 0..dim {
            out[c * h * w + cell] = data[cell * dim + c];
        }
    }
    out
}

fn from_chw(data: &[f64], h: usize, w: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for cell in 0..h * w {
        for c in 0..dim {
            out[cell * dim + c] = data[c * h * w + cell];
        }
    }
    out
}

fn final_factor(params: &McfnParams, h: usize, w: usize) -> Result<usize> {
    let out = params.config.output_size;
    if h != w || h == 0 || out % (4 * h) != 0 {
        return Err(McfnError::Config(format!(
            "a {h}x{w} token grid cannot be decoded to a {out}x{out} heatmap"
        )));
    }
    Ok(out / (4 * h))
}

fn decode_cached(data: &[f64], h: usize, w: usize, params: &McfnParams) -> Result<(Vec<f64>, DecoderCache)> {
    let f = final_factor(params, h, w)?;
    let chw = to_chw(data, h, w, params.config.dim);
    Ok(decoder_forward(&params.decoder, chw, h, w, f))
}

/// Decodes a token grid into a `[0, 1]` heatmap.
pub fn decode(x: &TokenGrid, params: &McfnParams) -> Result<Heatmap> {
    check_finite("tokens", &x.data)?;
    let (p, _) = decode_cached(&x.data, x.grid_h, x.grid_w, params)?;
    let s = params.config.output_size;
    Ok(Heatmap {
        level_index: x.level_index,
        map: FloatMap::from_vec(s, s, p),
    })
}

/// Saved state of one level's forward pass.
#[derive(Debug, Clone)]
pub struct LevelCache {
    pub level: usize,
    /// Levels whose neighbor context was read (lower, upper).
    pub neighbors_read: (Option<usize>, Option<usize>),
    /// Tokens leaving MAB and CMB for this level.
    pub fused_tokens: Vec<f64>,
    grid: (usize, usize),
    mab: Vec<(usize, Vec<f64>, AttnForward)>,
    terms: Vec<NeighborTerm>,
    cell_win: Vec<usize>,
    dec: DecoderCache,
}

fn check_tokens(params: &McfnParams, tokens: &[TokenGrid]) -> Result<()> {
    if tokens.len() != params.config.levels {
        return Err(McfnError::Config(format!(
            "model has {} magnification tokens but slide has {} levels",
            params.config.levels,
            tokens.len()
        )));
    }
    let d = params.config.dim;
    if let Some(bad) = tokens.iter().find(|t| t.dim != d) {
        return Err(McfnError::Dimension(format!(
            "level {} tokens have dim {}, model expects {d}",
            bad.level_index, bad.dim
        )));
    }
    Ok(())
}

/// Full forward pass for level `m` given encoder tokens of every level.
pub fn forward_level(params: &McfnParams, tokens: &[TokenGrid], m: usize) -> Result<(Heatmap, LevelCache)> {
    check_tokens(params, tokens)?;
    let x = tokens
        .get(m)
        .ok_or_else(|| McfnError::Config(format!("level {m} not present")))?;
    check_finite("tokens", &x.data)?;
    let ab = params.config.ablation;
    let use_lower = m > 0 && (params.u != 0.0 || ab.cmb_low);
    let use_upper = m + 1 < tokens.len() && (params.w != 0.0 || ab.cmb_high);

    let mut mab = Vec::new();
    let (y_m, f_m) = mab_cached(x, m, params)?;
    mab.push((m, y_m, f_m));
    if use_lower {
        let (y, f) = mab_cached(&tokens[m - 1], m - 1, params)?;
        mab.push((m - 1, y, f));
    }
    if use_upper {
        let (y, f) = mab_cached(&tokens[m + 1], m + 1, params)?;
        mab.push((m + 1, y, f));
    }
    let find = |lvl: usize| mab.iter().find(|(l, _, _)| *l == lvl).map(|(_, y, _)| &y[..]);
    let grid_of = |lvl: usize| (tokens[lvl].grid_h, tokens[lvl].grid_w);
    let lower = if use_lower { Some((m - 1, find(m - 1).unwrap(), grid_of(m - 1))) } else { None };
    let upper = if use_upper { Some((m + 1, find(m + 1).unwrap(), grid_of(m + 1))) } else { None };
    let grid = (x.grid_h, x.grid_w);
    let cmb = cmb_cached(find(m).unwrap(), grid, lower, upper, params)?;
    let (p, dec) = decode_cached(&cmb.z, grid.0, grid.1, params)?;
    let s = params.config.output_size;
    let heat = Heatmap {
        level_index: m,
        map: FloatMap::from_vec(s, s, p),
    };
    let cache = LevelCache {
        level: m,
        neighbors_read: (use_lower.then(|| m - 1), use_upper.then_some(m + 1)),
        fused_tokens: cmb.z,
        grid,
        mab,
        terms: cmb.terms,
        cell_win: cmb.cell_win,
        dec,
    };
    Ok((heat, cache))
}

/// Accumulates `∂L/∂θ` into `grads` given `∂L/∂P` for the level's heatmap.
pub fn backward_level(
    params: &McfnParams,
    tokens: &[TokenGrid],
    cache: &LevelCache,
    d_heatmap: &[f64],
    grads: &mut McfnParams,
) {
    let dim = params.config.dim;
    let heads = params.config.heads;
    let (h, w) = cache.grid;
    let dz_chw = decoder_backward(&params.decoder, &cache.dec, d_heatmap, &mut grads.decoder);
    let dz = from_chw(&dz_chw, h, w, dim);

    let mut dy: Vec<(usize, Vec<f64>)> = cache
        .mab
        .iter()
        .map(|(l, y, _)| (*l, vec![0.0; y.len()]))
        .collect();
    let slot = |dy: &[(usize, Vec<f64>)], lvl: usize| dy.iter().position(|(l, _)| *l == lvl).expect("level cached");
    let mi = slot(&dy, cache.level);
    dy[mi].1.copy_from_slice(&dz);

    for term in &cache.terms {
        let n_win = term.attn.windows.len();
        let mut d_out = vec![vec![0.0; dim]; n_win];
        let mut d_gate = 0.0;
        for (cell, g) in dz.chunks_exact(dim).enumerate() {
            let wi = cache.cell_win[cell];
            let out = &term.attn.outputs[wi];
            d_gate += g.iter().zip(out).map(|(a, b)| a * b).sum::<f64>();
            for (d, v) in d_out[wi].iter_mut().zip(g) {
                *d += term.gate * v;
            }
        }
        match term.side {
            Side::Lower => grads.u += d_gate,
            Side::Upper => grads.w += d_gate,
        }
        if term.gate == 0.0 {
            continue;
        }
        let mut dk = vec![0.0; term.yhat.len()];
        let mut dv = vec![0.0; term.yhat.len()];
        let tq = &params.mag_tokens[term.level * dim..(term.level + 1) * dim];
        attention_backward(
            &params.cmb,
            heads,
            tq,
            &term.yhat,
            &term.yhat,
            &term.attn,
            &d_out,
            &mut grads.cmb,
            AttnInputGrads {
                query: Some(&mut grads.mag_tokens[term.level * dim..(term.level + 1) * dim]),
                keys: Some(&mut dk),
                values: Some(&mut dv),
            },
        );
        for (a, b) in dk.iter_mut().zip(&dv) {
            *a += b;
        }
        let si = slot(&dy, term.level);
        term.resampler.adjoint_acc(&dk, dim, &mut dy[si].1);
    }

    for (lvl, _, attn) in &cache.mab {
        let g = &dy[slot(&dy, *lvl)].1;
        let a = &attn.outputs[0];
        let mut sum = vec![0.0; dim];
        for tok in g.chunks_exact(dim) {
            for (s, v) in sum.iter_mut().zip(tok) {
                *s += v;
            }
        }
        grads.gamma += sum.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
        if params.gamma == 0.0 {
            continue;
        }
        let d_a: Vec<f64> = sum.iter().map(|v| params.gamma * v).collect();
        let x = &tokens[*lvl].data;
        let tq = &params.mag_tokens[lvl * dim..(lvl + 1) * dim];
        attention_backward(
            &params.mab,
            heads,
            tq,
            x,
            x,
            attn,
            &[d_a],
            &mut grads.mab,
            AttnInputGrads {
                query: Some(&mut grads.mag_tokens[lvl * dim..(lvl + 1) * dim]),
                keys: None,
                values: None,
            },
        );
    }
}

/// Renders, encodes and runs the network for one level of a slide.
pub fn mcfn_forward(
    pyramid: &MagnificationPyramid,
    m: usize,
    params: &McfnParams,
    spec: &EncoderSpec,
    encoder: &dyn PatchEncoder,
) -> Result<Heatmap> {
    pyramid.level(m)?;
    let tokens = (0..pyramid.num_levels())
        .map(|l| {
            if l + 1 >= m && l <= m + 1 {
                encode_level(pyramid, l, spec, encoder)
            } else {
                let side = spec.grid_side();
                let mut g = TokenGrid::zeros(side, side, spec.token_dim, l);
                g.level_index = l;
                Ok(g)
            }
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (heat, _) = forward_level(params, &tokens, m)?;
    Ok(heat)
}

/// Heatmaps for every level from precomputed tokens.
pub fn forward_all(params: &McfnParams, tokens: &[TokenGrid]) -> Result<Vec<Heatmap>> {
    (0..tokens.len())
        .map(|m| forward_level(params, tokens, m).map(|(h, _)| h))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(dim: usize, levels: usize, out: usize) -> McfnParams {
        McfnParams::init(super::super::McfnConfig {
            dim,
            levels,
            output_size: out,
            seed: 3,
            ..Default::default()
        })
    }

    fn random_grid(rng: &mut ChaCha8Rng, side: usize, dim: usize, level: usize) -> TokenGrid {
        let mut g = TokenGrid::from_tokens(side, side, dim, (0..side * side * dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        g.level_index = level;
        g
    }

    fn pyramid_tokens(seed: u64, sides: &[usize], dim: usize) -> Vec<TokenGrid> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sides.iter().enumerate().map(|(l, &s)| random_grid(&mut rng, s, dim, l)).collect()
    }

    fn gates_zero(p: &mut McfnParams) {
        p.gamma = 0.0;
        p.u = 0.0;
        p.w = 0.0;
    }

    #[test]
    fn gate_zero_is_bitwise_identity() {
        let mut p = config(8, 3, 64);
        gates_zero(&mut p);
        let toks = pyramid_tokens(1, &[4, 4, 4], 8);
        for m in 0..3 {
            let y = mab_forward(&toks[m], m, &p).unwrap();
            let z = cmb_forward(&y, m, toks.get(m.wrapping_sub(1)), toks.get(m + 1), &p).unwrap();
            assert_eq!(z.data, toks[m].data);
            let (_, cache) = forward_level(&p, &toks, m).unwrap();
            assert_eq!(cache.fused_tokens, toks[m].data);
        }
    }

    #[test]
    fn zero_model_gives_half() {
        let p = McfnParams::zeros(super::super::McfnConfig::default());
        let x = TokenGrid::zeros(16, 16, 32, 0);
        let h = decode(&x, &p).unwrap();
        assert_eq!(h.side(), 256);
        assert!(h.map.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decode_in_unit_interval() {
        let p = config(8, 1, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_grid(&mut rng, 16, 8, 0);
        let out = McfnParams { config: super::super::McfnConfig { output_size: 256, ..p.config.clone() }, ..p };
        let h = decode(&x, &out).unwrap();
        assert_eq!(h.map.data.len(), 256 * 256);
        assert!(h.map.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn single_level_cmb_is_noop() {
        let mut p = config(4, 1, 16);
        p.u = 3.0;
        p.w = -2.0;
        let toks = pyramid_tokens(2, &[4], 4);
        let y = mab_forward(&toks[0], 0, &p).unwrap();
        let z = cmb_forward(&y, 0, None, None, &p).unwrap();
        assert_eq!(z.data, y.data);
        let (_, cache) = forward_level(&p, &toks, 0).unwrap();
        assert_eq!(cache.neighbors_read, (None, None));
        assert_eq!(cache.fused_tokens, y.data);
    }

    #[test]
    fn boundary_levels_read_only_existing_neighbors() {
        let p = config(4, 3, 16);
        let toks = pyramid_tokens(3, &[4, 4, 4], 4);
        let reads: Vec<_> = (0..3).map(|m| forward_level(&p, &toks, m).unwrap().1.neighbors_read).collect();
        assert_eq!(reads, vec![(None, Some(1)), (Some(0), Some(2)), (Some(1), None)]);
    }

    #[test]
    fn two_level_cmb_matches_direct_evaluation() {
        let mut p = config(2, 2, 16);
        p.config.cmb_scope = CmbScope::Global;
        p.u = 0.7;
        p.w = -0.4;
        let toks = pyramid_tokens(4, &[2, 2], 2);
        let lower = &toks[0];
        let x = &toks[1];
        let got = cmb_forward(x, 1, Some(lower), None, &p).unwrap();

        let t = &p.mag_tokens[0..2];
        let mv = |w: &[f64], v: &[f64]| [w[0] * v[0] + w[1] * v[1], w[2] * v[0] + w[3] * v[1]];
        let q = mv(&p.cmb.wq, t);
        let rows: Vec<&[f64]> = lower.data.chunks(2).collect();
        let scores: Vec<f64> = rows
            .iter()
            .map(|r| {
                let k = mv(&p.cmb.wk, r);
                (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt()
            })
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut ctx = [0.0; 2];
        for (r, ei) in rows.iter().zip(&e) {
            let v = mv(&p.cmb.wv, r);
            ctx[0] += ei / z * v[0];
            ctx[1] += ei / z * v[1];
        }
        let out = mv(&p.cmb.wo, &ctx);
        for (cell, tok) in got.data.chunks(2).enumerate() {
            for c in 0..2 {
                let want = x.data[cell * 2 + c] + 0.7 * out[c];
                assert!((tok[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn swapping_magnification_tokens_changes_output() {
        let p = config(8, 3, 64);
        let toks = pyramid_tokens(5, &[16, 16, 16], 8);
        let (a, _) = forward_level(&p, &toks, 1).unwrap();
        let mut q = p.clone();
        for i in 0..8 {
            q.mag_tokens.swap(8 + i, 16 + i);
        }
        let (b, _) = forward_level(&q, &toks, 1).unwrap();
        assert_ne!(a.map.data, b.map.data);
    }

    #[test]
    fn mismatched_neighbor_dim_rejected() {
        let p = config(4, 2, 16);
        let x = TokenGrid::zeros(4, 4, 4, 1);
        let lower = TokenGrid::zeros(4, 4, 3, 0);
        assert!(matches!(cmb_forward(&x, 1, Some(&lower), None, &p), Err(McfnError::Dimension(_))));
    }

    #[test]
    fn non_finite_tokens_rejected() {
        let p = config(4, 1, 16);
        let mut x = TokenGrid::zeros(4, 4, 4, 0);
        x.data[3] = f64::NAN;
        assert!(matches!(decode(&x, &p), Err(McfnError::NumericInput(_))));
    }

    fn linear_loss(p: &McfnParams, toks: &[TokenGrid], coef: &[Vec<f64>]) -> f64 {
        (0..toks.len())
            .map(|m| {
                let (h, _) = forward_level(p, toks, m).unwrap();
                h.map.data.iter().zip(&coef[m]).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        // mixed grid sizes exercise both resampling directions
        let p = config(8, 3, 32);
        let toks = pyramid_tokens(6, &[2, 4, 8], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coef: Vec<Vec<f64>> = (0..3).map(|_| (0..32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut grads = p.zeros_like();
        for m in 0..3 {
            let (_, cache) = forward_level(&p, &toks, m).unwrap();
            backward_level(&p, &toks, &cache, &coef[m], &mut grads);
        }
        let n = p.num_params();
        let mut seen = std::collections::BTreeSet::new();
        let mut idx: Vec<usize> = (0..n).step_by(37).collect();
        let mut off = 0;
        for (name, g) in p.groups() {
            idx.push(off);
            idx.push(off + g.len() - 1);
            seen.insert(name);
            off += g.len();
        }
        let h = 1e-5;
        for i in idx {
            let mut a = p.clone();
            a.set_flat(i, p.get_flat(i) + h);
            let mut b = p.clone();
            b.set_flat(i, p.get_flat(i) - h);
            let num = (linear_loss(&a, &toks, &coef) - linear_loss(&b, &toks, &coef)) / (2.0 * h);
            let ana = grads.get_flat(i);
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
            assert!(rel < 1e-4 || (ana - num).abs() < 1e-9, "{:?}: analytic {ana} numeric {num}", p.locate_flat(i));
        }
        assert_eq!(seen.len(), 18);
    }
}
