//! Bidirectional LSTM over the patch sequence.
//!
//! The forward direction visits patches `1..R` and conditions on the
//! previous node, the backward direction visits `R..1` and conditions on the
//! next node. Both start from zero hidden and cell states. The sequential
//! descriptor of patch `r` is `[h_fwd(r); h_bwd(r)]`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Gate order used for every per-gate array below.
pub const GATES: [&str; 4] = ["f", "i", "o", "c"];

/// Graph handles of one LSTM parameter set. Arrays are indexed in
/// [`GATES`] order: forget, input, output, candidate cell.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// Input weights, `[hidden × d_ψ]`.
    pub w: [Var; 4],
    /// Recurrent weights, `[hidden × hidden]`.
    pub u: [Var; 4],
    pub b: [Var; 4],
}

/// One LSTM step: returns `(h, c)`.
pub fn lstm_cell<F: Real>(
    g: &mut Graph<'_, F>,
    psi: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmVars,
) -> Result<(Var, Var)> {
    let mut xproj = [psi; 4];
    for gate in 0..4 {
        xproj[gate] = g.linear(psi, p.w[gate], p.b[gate])?;
    }
    lstm_step(g, &xproj, h_prev, c_prev, &p.u)
}

/// Recurrent part of a step, given the input projections `W·ψ + b` per gate.
fn lstm_step<F: Real>(
    g: &mut Graph<'_, F>,
    xproj: &[Var; 4],
    h_prev: Var,
    c_prev: Var,
    u: &[Var; 4],
) -> Result<(Var, Var)> {
    let mut pre = [h_prev; 4];
    for gate in 0..4 {
        let rec = g.matmul(u[gate], h_prev)?;
        pre[gate] = g.add(xproj[gate], rec)?;
    }
    if g.shape(c_prev) != g.shape(pre[0]) {
        return Err(Error::dim(format!(
            "cell state {:?} does not match hidden width {:?}",
            g.shape(c_prev),
            g.shape(pre[0])
        )));
    }
    let f = g.sigmoid(pre[0]);
    let i = g.sigmoid(pre[1]);
    let o = g.sigmoid(pre[2]);
    let cand = g.tanh(pre[3]);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Runs both directions over the rows of `descriptors` (`[R × d_ψ]`) and
/// returns the sequential descriptors as rows of an `[R × 2·hidden]` matrix.
///
/// `fwd` and `bwd` hold either one shared parameter set or one set per
/// patch position.
pub fn bidirectional_pass<F: Real>(
    g: &mut Graph<'_, F>,
    descriptors: Var,
    fwd: &[LstmVars],
    bwd: &[LstmVars],
) -> Result<Var> {
    let r_count = match g.shape(descriptors) {
        [r, _] if *r >= 1 => *r,
        s => return Err(Error::dim(format!("descriptor matrix must be R x d with R >= 1, got {s:?}"))),
    };
    let forward = run_direction(g, descriptors, fwd, (0..r_count).collect())?;
    let backward = run_direction(g, descriptors, bwd, (0..r_count).rev().collect())?;
    let mut rows = Vec::with_capacity(r_count);
    for r in 0..r_count {
        rows.push(g.concat(&[forward[r], backward[r]], 0)?);
    }
    g.stack(&rows)
}

/// Hidden states indexed by patch position, visiting positions in `order`.
fn run_direction<F: Real>(
    g: &mut Graph<'_, F>,
    descriptors: Var,
    params: &[LstmVars],
    order: Vec<usize>,
) -> Result<Vec<Var>> {
    let r_count = order.len();
    if params.len() != 1 && params.len() != r_count {
        return Err(Error::config(format!(
            "{} LSTM parameter sets for a sequence of {r_count} patches",
            params.len()
        )));
    }
    let hidden = g.shape(params[0].u[0])[0];
    let mut h = g.constant(Tensor::zeros([hidden]));
    let mut c = g.constant(Tensor::zeros([hidden]));
    let mut out = vec![h; r_count];

    if params.len() == 1 {
        // Shared weights: project every patch at once, then recur.
        let p = &params[0];
        let mut proj = [descriptors; 4];
        for gate in 0..4 {
            proj[gate] = g.linear(descriptors, p.w[gate], p.b[gate])?;
        }
        for &r in &order {
            let mut xr = proj;
            for gate in 0..4 {
                xr[gate] = g.row(proj[gate], r)?;
            }
            (h, c) = lstm_step(g, &xr, h, c, &p.u)?;
            out[r] = h;
        }
    } else {
        for &r in &order {
            let psi = g.row(descriptors, r)?;
            (h, c) = lstm_cell(g, psi, h, c, &params[r])?;
            out[r] = h;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_params(hidden: usize, d: usize) -> Vec<Tensor<f64>> {
        let mut v = Vec::new();
        v.extend((0..4).map(|_| Tensor::zeros([hidden, d])));
        v.extend((0..4).map(|_| Tensor::zeros([hidden, hidden])));
        v.extend((0..4).map(|_| Tensor::zeros([hidden])));
        v
    }

    fn bind<'a>(g: &mut Graph<'a, f64>, t: &'a [Tensor<f64>]) -> LstmVars {
        let v: Vec<Var> = t.iter().map(|x| g.param(x)).collect();
        LstmVars {
            w: [v[0], v[1], v[2], v[3]],
            u: [v[4], v[5], v[6], v[7]],
            b: [v[8], v[9], v[10], v[11]],
        }
    }

    #[test]
    fn zero_parameters_give_zero_hidden_state() {
        let p = zero_params(3, 2);
        let psi = Tensor::from_vec(vec![0.7, -1.2]);
        let mut g = Graph::new();
        let lv = bind(&mut g, &p);
        let x = g.input(&psi);
        let h0 = g.constant(Tensor::zeros([3]));
        let c0 = g.constant(Tensor::zeros([3]));
        let (h, c) = lstm_cell(&mut g, x, h0, c0, &lv).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_doubles_and_shapes_are_checked() {
        let p = zero_params(128, 128);
        let d = Tensor::<f64>::ones([16, 128]);
        let mut g = Graph::new();
        let lv = bind(&mut g, &p);
        let dv = g.input(&d);
        let phi = bidirectional_pass(&mut g, dv, &[lv], &[lv]).unwrap();
        assert_eq!(g.shape(phi), &[16, 256]);

        let wrong = Tensor::<f64>::ones([16, 7]);
        let wv = g.input(&wrong);
        assert!(bidirectional_pass(&mut g, wv, &[lv], &[lv]).is_err());
    }

    #[test]
    fn parameter_set_count_must_match() {
        let p = zero_params(2, 2);
        let d = Tensor::<f64>::ones([3, 2]);
        let mut g = Graph::new();
        let lv = bind(&mut g, &p);
        let dv = g.input(&d);
        assert!(matches!(
            bidirectional_pass(&mut g, dv, &[lv, lv], &[lv]),
            Err(Error::Config(_))
        ));
    }
}
