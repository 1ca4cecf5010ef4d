//! Diagonal selective state-space scan.
//!
//! For every latent channel `d` and state index `n`:
//!
//! ```text
//! Ā[k,d,n] = exp(Δ[k,d] · A[d,n])
//! B̄[k,d,n] = Δ[k,d] · B[k,n]
//! h[k,d,n] = Ā[k,d,n] · h[k-1,d,n] + B̄[k,d,n] · u[k,d]      (h[-1] = 0)
//! y[k,d]   = Σ_n C[k,n] · h[k,d,n]
//! ```
//!
//! The scan is a single graph node; its backward pass runs the adjoint
//! recurrence in reverse time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanDirection {
    Fwd,
    Bwd,
}

/// Learnable tensors of one scan direction.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// log(-A); A = -exp(a_log) keeps the continuous dynamics stable. D x N.
    pub a_log: Tensor,
    /// D x D projection producing the pre-softplus step size.
    pub w_delta: Tensor,
    /// 1 x D step-size bias.
    pub delta_bias: Tensor,
    /// D x N input projection for B (selective) or a static 1 x N B.
    pub w_b: Tensor,
    /// D x N input projection for C (selective) or a static 1 x N C.
    pub w_c: Tensor,
}

impl SsmParams {
    /// The continuous-time state matrix diagonal, A = -exp(a_log).
    pub fn a(&self) -> Result<Tensor> {
        self.a_log.exp()?.neg()
    }
}

/// Input-dependent Δ, B, C for a (possibly flipped) sequence `x`.
pub(crate) fn scan_inputs(x: &Tensor, p: &SsmParams, selective: bool) -> Result<(Tensor, Tensor, Tensor)> {
    let len = x.dim(0);
    let delta = x
        .matmul(&p.w_delta)?
        .add(&p.delta_bias.expand(0, len)?)?
        .softplus()?;
    let (b, c) = if selective {
        (x.matmul(&p.w_b)?, x.matmul(&p.w_c)?)
    } else {
        (p.w_b.expand(0, len)?, p.w_c.expand(0, len)?)
    };
    Ok((delta, b, c))
}

/// One direction of the temporal scan. `Bwd` flips the sequence in time
/// before scanning and flips the result back.
pub fn ssm_scan(x: &Tensor, p: &SsmParams, direction: ScanDirection, selective: bool) -> Result<Tensor> {
    if x.ndim() != 2 || x.dim(1) != p.a_log.dim(0) {
        return Err(Error::shape(format!(
            "ssm_scan: input {:?} does not match state matrix {:?}",
            x.shape(),
            p.a_log.shape()
        )));
    }
    let seq = match direction {
        ScanDirection::Fwd => x.clone(),
        ScanDirection::Bwd => x.flip(0)?,
    };
    let (delta, b, c) = scan_inputs(&seq, p, selective)?;
    let y = selective_scan(&seq, &delta, &p.a()?, &b, &c)?;
    match direction {
        ScanDirection::Fwd => Ok(y),
        ScanDirection::Bwd => y.flip(0),
    }
}

/// Fused scan node: `u`, `delta` are L x D, `a` is D x N, `b`, `c` are L x N.
pub fn selective_scan(u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor) -> Result<Tensor> {
    if u.ndim() != 2 || a.ndim() != 2 {
        return Err(Error::shape("selective_scan: expected 2-D operands"));
    }
    let (len, d) = (u.dim(0), u.dim(1));
    let n = a.dim(1);
    if delta.shape() != [len, d] || a.shape() != [d, n] || b.shape() != [len, n] || c.shape() != [len, n] {
        return Err(Error::shape(format!(
            "selective_scan: u {:?}, delta {:?}, a {:?}, b {:?}, c {:?}",
            u.shape(),
            delta.shape(),
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }

    let (uv, dv, av, bv, cv) = (u.data(), delta.data(), a.data(), b.data(), c.data());
    // states[k] holds h[k] (D x N), flattened; decay[k] holds Ā[k].
    let mut states = vec![0.0; len * d * n];
    let mut decay = vec![0.0; len * d * n];
    let mut y = vec![0.0; len * d];
    let mut h = vec![0.0; d * n];
    for k in 0..len {
        let brow = &bv[k * n..(k + 1) * n];
        let crow = &cv[k * n..(k + 1) * n];
        for ch in 0..d {
            let dt = dv[k * d + ch];
            let x = uv[k * d + ch];
            let hs = &mut h[ch * n..(ch + 1) * n];
            let arow = &av[ch * n..(ch + 1) * n];
            let abar = &mut decay[(k * d + ch) * n..(k * d + ch + 1) * n];
            let mut acc = 0.0;
            for s in 0..n {
                abar[s] = (dt * arow[s]).exp();
                hs[s] = abar[s] * hs[s] + dt * brow[s] * x;
                acc += crow[s] * hs[s];
            }
            y[k * d + ch] = acc;
        }
        states[k * d * n..(k + 1) * d * n].copy_from_slice(&h);
    }
    if let Some(bad) = h.iter().find(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("selective scan state became {bad}")));
    }

    Tensor::from_op(
        vec![len, d],
        y,
        vec![u.clone(), delta.clone(), a.clone(), b.clone(), c.clone()],
        "selective_scan",
        Box::new(move |gy, _, parents| {
            let (uv, dv, av, bv, cv) = (
                parents[0].data(),
                parents[1].data(),
                parents[2].data(),
                parents[3].data(),
                parents[4].data(),
            );
            let mut gu = vec![0.0; len * d];
            let mut gdelta = vec![0.0; len * d];
            let mut ga = vec![0.0; d * n];
            let mut gb = vec![0.0; len * n];
            let mut gc = vec![0.0; len * n];
            // Adjoint of h[k], carried backwards through time.
            let mut gh = vec![0.0; d * n];
            for k in (0..len).rev() {
                let brow = &bv[k * n..(k + 1) * n];
                let crow = &cv[k * n..(k + 1) * n];
                let hk = &states[k * d * n..(k + 1) * d * n];
                for ch in 0..d {
                    let dt = dv[k * d + ch];
                    let x = uv[k * d + ch];
                    let g_out = gy[k * d + ch];
                    let arow = &av[ch * n..(ch + 1) * n];
                    let mut g_dt = 0.0;
                    let mut g_x = 0.0;
                    for s in 0..n {
                        let idx = ch * n + s;
                        gc[k * n + s] += g_out * hk[idx];
                        let g = gh[idx] + g_out * crow[s];
                        let abar = decay[k * d * n + idx];
                        let h_prev = if k > 0 { states[(k - 1) * d * n + idx] } else { 0.0 };
                        // through Ā = exp(Δ A)
                        let g_abar = g * h_prev * abar;
                        g_dt += g_abar * arow[s];
                        ga[idx] += g_abar * dt;
                        // through B̄ x = Δ B x
                        let g_bx = g * x;
                        g_dt += g_bx * brow[s];
                        gb[k * n + s] += g_bx * dt;
                        g_x += g * dt * brow[s];
                        gh[idx] = g * abar;
                    }
                    gdelta[k * d + ch] = g_dt;
                    gu[k * d + ch] = g_x;
                }
            }
            let want = |i: usize, g: Vec<Scalar>| parents[i].requires_grad().then_some(g);
            vec![want(0, gu), want(1, gdelta), want(2, ga), want(3, gb), want(4, gc)]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, RngState};

    fn rand_t(rng: &mut RngState, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(rng.normals(n).into_iter().map(|v| v * scale).collect(), shape).unwrap()
    }

    fn operands(rng: &mut RngState, len: usize, d: usize, n: usize) -> [Tensor; 5] {
        let u = rand_t(rng, &[len, d], 1.0);
        let delta = Tensor::new((0..len * d).map(|_| 0.05 + 0.3 * rng.uniform()).collect(), &[len, d]).unwrap();
        let a = Tensor::new((0..d * n).map(|_| -(0.2 + 2.0 * rng.uniform())).collect(), &[d, n]).unwrap();
        let b = rand_t(rng, &[len, n], 1.0);
        let c = rand_t(rng, &[len, n], 1.0);
        [u, delta, a, b, c]
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = RngState::new(1);
        let [_, delta, a, b, c] = operands(&mut rng, 6, 3, 2);
        let y = selective_scan(&Tensor::zeros(&[6, 3]), &delta, &a, &b, &c).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_a_is_weighted_cumsum() {
        let mut rng = RngState::new(2);
        let [u, delta, _, b, c] = operands(&mut rng, 7, 2, 3);
        let y = selective_scan(&u, &delta, &Tensor::zeros(&[2, 3]), &b, &c).unwrap();
        for k in 0..7 {
            for ch in 0..2 {
                let mut expect = 0.0;
                for s in 0..3 {
                    let h: f64 = (0..=k)
                        .map(|j| delta.data()[j * 2 + ch] * b.data()[j * 3 + s] * u.data()[j * 2 + ch])
                        .sum();
                    expect += c.data()[k * 3 + s] * h;
                }
                assert!((y.data()[k * 2 + ch] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_has_no_history() {
        let mut rng = RngState::new(3);
        let [u, delta, a, b, c] = operands(&mut rng, 1, 2, 3);
        let y = selective_scan(&u, &delta, &a, &b, &c).unwrap();
        for ch in 0..2 {
            let expect: f64 = (0..3)
                .map(|s| c.data()[s] * delta.data()[ch] * b.data()[s] * u.data()[ch])
                .sum();
            assert!((y.data()[ch] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        let mut rng = RngState::new(4);
        let ops = operands(&mut rng, 5, 3, 2);
        let weights = rand_t(&mut rng, &[5, 3], 1.0);
        for target in 0..5 {
            let f = |t: &Tensor| {
                let mut args = ops.clone();
                args[target] = t.clone();
                selective_scan(&args[0], &args[1], &args[2], &args[3], &args[4])?
                    .mul(&weights)?
                    .sum()
            };
            let err = grad_check(f, &ops[target], 1e-5);
            assert!(err < 1e-6, "operand {target}: {err}");
        }
    }

    #[test]
    fn long_sequences_stay_bounded() {
        let mut rng = RngState::new(5);
        let (len, d, n) = (10_000, 2, 4);
        let u = Tensor::new((0..len * d).map(|_| 2.0 * rng.uniform() - 1.0).collect(), &[len, d]).unwrap();
        let delta = Tensor::full(&[len, d], 0.05);
        let a = Tensor::new((0..d * n).map(|i| -((i % n) as f64 + 1.0)).collect(), &[d, n]).unwrap();
        let b = Tensor::ones(&[len, n]);
        let c = Tensor::ones(&[len, n]);
        let y = selective_scan(&u, &delta, &a, &b, &c).unwrap();
        // |h| <= Δ max|u| / (1 - exp(-Δ)) per state, summed over N states.
        let bound = 0.05 / (1.0 - (-0.05f64).exp()) * n as f64;
        assert!(y.data().iter().all(|v| v.abs() <= bound + 1e-9));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = RngState::new(6);
        let [u, delta, a, b, _] = operands(&mut rng, 4, 2, 3);
        assert!(matches!(
            selective_scan(&u, &delta, &a, &b, &Tensor::zeros(&[4, 2])),
            Err(Error::Shape(_))
        ));
    }
}
