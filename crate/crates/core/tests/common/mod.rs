//! Independent oracles and the property checks built on them. Shared by the
//! integration tests and the acceptance binary.
#![allow(dead_code)]

use std::time::{Duration, Instant};

use lobs::bounds::{layer_error, snapshot_error, BoundReport, BOUND_TOLERANCE};
use lobs::hessian::{accumulate_psi_columns, materialize_hessian, recursive_inverse_columns, PsiInverse};
use lobs::net::{Activation, ConvGeometry, Layer, LayerKind, Network};
use lobs::pruner::{apply_obs_update, sensitivities};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array4, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.gen_range(-scale..scale))
}

pub fn dense(rng: &mut impl Rng, fan_in: usize, units: usize, act: Activation) -> Layer {
    Layer::dense(uniform(rng, (fan_in + 1, units), 1.0), act).unwrap()
}

/// Inputs with an appended ones row, as the layer sees them.
pub fn with_bias_row(x: ArrayView2<f64>) -> Array2<f64> {
    let (d, n) = x.dim();
    let mut u = Array2::ones((d + 1, n));
    u.slice_mut(ndarray::s![..d, ..]).assign(&x);
    u
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Moore-Penrose pseudo-inverse through an SVD.
pub fn svd_pinv(a: &Array2<f64>) -> Array2<f64> {
    let p = to_na(a).pseudo_inverse(1e-12).expect("svd converges");
    from_na(&p)
}

/// `Ψ^{-1}` wrapped as the pruner expects, computed without the recursion.
pub fn exact_psi_inverse(u: &Array2<f64>) -> PsiInverse {
    let psi = u.dot(&u.t()) / u.ncols() as f64;
    PsiInverse {
        layer_index: 0,
        inv: svd_pinv(&psi),
        alpha: 0.0,
        sample_count: u.ncols(),
    }
}

pub fn rel_frobenius(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff: f64 = (a - b).iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm
}

/// Column-major parameter vector of a `(rows x units)` matrix.
pub fn flatten(w: &Array2<f64>) -> Vec<f64> {
    let (rows, units) = w.dim();
    (0..rows * units).map(|q| w[[q % rows, q / rows]]).collect()
}

pub fn unflatten(theta: &[f64], rows: usize, units: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, units), |(r, c)| theta[c * rows + r])
}

/// `E(Θ) = (1/n)||Θ^T U - Z||²_F`, evaluated directly.
pub fn layer_objective(theta: &[f64], rows: usize, units: usize, u: &Array2<f64>, z: &Array2<f64>) -> f64 {
    let w = unflatten(theta, rows, units);
    let d = w.t().dot(u) - z;
    d.iter().map(|v| v * v).sum::<f64>() / u.ncols() as f64
}

/// Central-difference Hessian of [`layer_objective`].
pub fn fd_hessian(theta: &[f64], rows: usize, units: usize, u: &Array2<f64>, z: &Array2<f64>, h: f64) -> Array2<f64> {
    let p = theta.len();
    let f = |t: &[f64]| layer_objective(t, rows, units, u, z);
    let mut out = Array2::zeros((p, p));
    let mut t = theta.to_vec();
    for i in 0..p {
        for j in 0..p {
            let mut e = |si: f64, sj: f64| {
                t.copy_from_slice(theta);
                t[i] += si * h;
                t[j] += sj * h;
                f(&t)
            };
            out[[i, j]] = (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * h * h);
        }
    }
    out
}

/// Solves `min ½ δᵀHδ  s.t.  δ_q = -θ_q` through its KKT system.
///
/// Returns the full update and the optimal objective value.
pub fn qp_delete(h: &Array2<f64>, q: usize, theta_q: f64) -> (Vec<f64>, f64) {
    let p = h.nrows();
    let mut k = DMatrix::<f64>::zeros(p + 1, p + 1);
    for i in 0..p {
        for j in 0..p {
            k[(i, j)] = h[[i, j]];
        }
    }
    k[(q, p)] = 1.0;
    k[(p, q)] = 1.0;
    let mut rhs = nalgebra::DVector::<f64>::zeros(p + 1);
    rhs[p] = -theta_q;
    let sol = k.lu().solve(&rhs).expect("KKT system is nonsingular");
    let delta: Vec<f64> = (0..p).map(|i| sol[i]).collect();
    let hd = h.dot(&Array1::from(delta.clone()));
    let obj = 0.5 * delta.iter().zip(hd.iter()).map(|(a, b)| a * b).sum::<f64>();
    (delta, obj)
}

/// Dense forward pass by explicit loops.
pub fn forward_oracle(net: &Network, x: ArrayView2<f64>) -> Array2<f64> {
    let mut cur = x.to_owned();
    for layer in net.layers() {
        let out = match layer.kind() {
            LayerKind::Dense => dense_oracle(layer, &cur),
            LayerKind::Conv(g) => conv_oracle(g, &layer.filters().unwrap(), &layer.bias().to_vec(), &cur),
        };
        cur = out.mapv(|v| layer.activation().apply(v));
    }
    cur
}

fn dense_oracle(layer: &Layer, x: &Array2<f64>) -> Array2<f64> {
    let w = layer.weights();
    let (fan_in, n) = x.dim();
    Array2::from_shape_fn((layer.units(), n), |(c, j)| {
        let mut s = w[[fan_in, c]];
        for i in 0..fan_in {
            s += w[[i, c]] * x[[i, j]];
        }
        s
    })
}

/// Direct convolution (cross-correlation) with zero padding.
pub fn conv_oracle(g: &ConvGeometry, filters: &Array4<f64>, bias: &[f64], x: &Array2<f64>) -> Array2<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (kh, kw) = g.kernel;
    let n = x.ncols();
    let mut out = Array2::zeros((g.out_channels * oh * ow, n));
    for j in 0..n {
        for o in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias[o];
                    for c in 0..g.in_channels {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride.0 + ky) as isize - g.padding.0 as isize;
                                let ix = (ox * g.stride.1 + kx) as isize - g.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_height as isize || ix >= g.in_width as isize {
                                    continue;
                                }
                                let idx = c * g.in_height * g.in_width + iy as usize * g.in_width + ix as usize;
                                s += filters[[o, c, ky, kx]] * x[[idx, j]];
                            }
                        }
                    }
                    out[[o * oh * ow + oy * ow + ox, j]] = s;
                }
            }
        }
    }
    out
}

/// Outcome of one property check.
pub struct Check {
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> Check {
    let start = Instant::now();
    let (ok, mut detail) = f();
    let elapsed = start.elapsed();
    let mut pass = ok;
    if let Some(limit) = limit {
        if elapsed > limit {
            pass = false;
            detail.push_str(&format!("; runtime {:.2}s over the {:.0}s budget", elapsed.as_secs_f64(), limit.as_secs_f64()));
        }
    }
    Check { pass, detail, elapsed }
}

/// Hessian of a 3→2 layer from Ψ against finite differences, 10 samples.
pub fn check_hessian_fd() -> Check {
    timed(Some(Duration::from_secs(1)), || {
        let mut r = rng(11);
        let x = uniform(&mut r, (3, 10), 1.0);
        let layer = dense(&mut r, 3, 2, Activation::Relu);
        let u = with_bias_row(x.view());
        let z = layer.weights().t().dot(&u);
        // Evaluate away from the original weights so the (ẑ - z) term is nonzero.
        let mut theta = flatten(layer.weights());
        for (i, t) in theta.iter_mut().enumerate() {
            *t += 0.3 * (i as f64 - 3.5);
        }
        let fd = fd_hessian(&theta, 4, 2, &u, &z, 1e-4);
        let psi = accumulate_psi_columns(u.view(), 0).unwrap();
        let h = materialize_hessian(&psi, 2);
        let worst = (&h - &fd).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (worst <= 1e-4, format!("max |H - H_fd| = {worst:.2e} (tolerance 1e-4)"))
    })
}

/// Recursive inverse against the SVD pseudo-inverse, 50 instances of m=30, n=300.
pub fn check_recursive_inverse() -> Check {
    timed(Some(Duration::from_secs(10)), || {
        let mut r = rng(22);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let y = uniform(&mut r, (30, 300), 1.0);
            let psi = y.dot(&y.t()) / 300.0;
            let want = svd_pinv(&psi);
            let got = recursive_inverse_columns(y.view(), 1e6, 0).unwrap();
            worst = worst.max(rel_frobenius(&got.inv, &want));
        }
        (worst <= 1e-5, format!("worst relative Frobenius error {worst:.2e} (tolerance 1e-5)"))
    })
}

/// Closed-form update and sensitivity against the KKT solve for every q of a 4→3 layer.
pub fn check_closed_form() -> Check {
    timed(Some(Duration::from_secs(1)), || {
        let mut r = rng(33);
        let x = uniform(&mut r, (4, 40), 1.0);
        let layer = dense(&mut r, 4, 3, Activation::Relu);
        let u = with_bias_row(x.view());
        let pinv = exact_psi_inverse(&u);
        let psi = accumulate_psi_columns(u.view(), 0).unwrap();
        let h = materialize_hessian(&psi, 3);
        let table = sensitivities(&layer, &pinv).unwrap();
        let theta = flatten(layer.weights());
        let mut worst = 0.0f64;
        for q in 0..layer.param_count() {
            let (want_delta, want_l) = qp_delete(&h, q, theta[q]);
            let mut work = layer.clone();
            let d = apply_obs_update(&mut work, q, &pinv).unwrap();
            let got_delta: Vec<f64> = flatten(work.weights()).iter().zip(&theta).map(|(a, b)| a - b).collect();
            let dn: f64 = want_delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let err: f64 = got_delta.iter().zip(&want_delta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            worst = worst.max(err / dn);
            worst = worst.max((table.scores[q] - want_l).abs() / want_l);
            worst = worst.max((d.sensitivity - want_l).abs() / want_l);
        }
        (worst <= 1e-10, format!("worst relative deviation {worst:.2e} over 20 parameters (tolerance 1e-10)"))
    })
}

/// ε ≤ √δE for random single prunes on random ReLU layers.
pub fn check_layer_bound(trials: usize) -> Check {
    timed(None, || {
        let mut r = rng(44);
        let mut violations = 0;
        let mut worst_gap = f64::NEG_INFINITY;
        for _ in 0..trials {
            let fan_in = r.gen_range(2..8);
            let units = r.gen_range(1..6);
            let n = r.gen_range(fan_in + 2..40);
            let x = uniform(&mut r, (fan_in, n), 1.0);
            let mut layer = dense(&mut r, fan_in, units, Activation::Relu);
            let u = with_bias_row(x.view());
            let snap = lobs::net::LayerSnapshot {
                layer_index: 0,
                pre_activations: layer.weights().t().dot(&u),
                inputs: u,
            };
            let pinv = recursive_inverse_columns(snap.inputs.view(), 1e6, 0).unwrap();
            let q = r.gen_range(0..layer.param_count());
            apply_obs_update(&mut layer, q, &pinv).unwrap();
            let (e, eps) = snapshot_error(&layer, &snap).unwrap();
            let gap = eps - e.sqrt();
            worst_gap = worst_gap.max(gap);
            if gap > BOUND_TOLERANCE {
                violations += 1;
            }
        }
        (
            violations == 0,
            format!("{violations} violations in {trials} prunes; max ε - √δE = {worst_gap:.2e}"),
        )
    })
}

/// Prunes a random subset of each layer with the compensating update.
pub fn random_prune(net: &Network, x: ArrayView2<f64>, r: &mut impl Rng) -> Network {
    let trace = net.forward(x).unwrap();
    let mut pruned = net.clone();
    for l in 0..net.num_layers() {
        let input = if l == 0 { x } else { trace.outputs[l - 1].view() };
        let u = with_bias_row(input);
        let pinv = recursive_inverse_columns(u.view(), 1e6, l).unwrap();
        let layer = pruned.layer_mut(l);
        let k = r.gen_range(1..=layer.param_count() / 2);
        for _ in 0..k {
            let q = r.gen_range(0..layer.param_count());
            let (row, col) = layer.position(q);
            if layer.mask()[[row, col]] {
                apply_obs_update(layer, q, &pinv).unwrap();
            }
        }
    }
    pruned
}

/// Accumulated-error bound and the per-layer triangle step on random 3-layer ReLU nets.
pub fn check_network_bounds(nets: usize) -> Check {
    timed(Some(Duration::from_secs(30)), || {
        let mut r = rng(55);
        let mut t1 = 0;
        let mut t2 = 0;
        let mut layer_fail = 0;
        let mut tightest = 0.0f64;
        for i in 0..nets {
            let d = r.gen_range(3..10);
            let sizes = [d, r.gen_range(3..12), r.gen_range(3..12), r.gen_range(2..6)];
            let mut net = Network::mlp(&sizes, i as u64).unwrap();
            for l in 0..3 {
                let act = net.layer(l).activation();
                *net.layer_mut(l) = dense(&mut r, sizes[l], sizes[l + 1], act);
            }
            let x = uniform(&mut r, (d, 50), 1.0);
            let pruned = random_prune(&net, x.view(), &mut r);
            let rep = BoundReport::measure(&net, &pruned, x.view()).unwrap();
            if rep.network_bound_holds() != Some(true) {
                t1 += 1;
            }
            if rep.steps_hold() != Some(true) {
                t2 += 1;
            }
            if !rep.layer_bound_holds() {
                layer_fail += 1;
            }
            if rep.network_bound > 0.0 {
                tightest = tightest.max(rep.accumulated / rep.network_bound);
            }
        }
        (
            t1 + t2 + layer_fail == 0,
            format!(
                "{nets} nets: {t1} accumulated-bound, {t2} triangle-step, {layer_fail} layer-wise violations; tightest ratio {tightest:.3}"
            ),
        )
    })
}

/// Patch-based conv forward against direct convolution on random geometries.
pub fn check_conv_oracle(cases: usize) -> Check {
    timed(None, || {
        let mut r = rng(66);
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let c = r.gen_range(1..4);
            let hgt = r.gen_range(3..9);
            let wid = r.gen_range(3..9);
            let pad = r.gen_range(0..2);
            let kh = r.gen_range(1..=hgt.min(4));
            let kw = r.gen_range(1..=wid.min(4));
            let g = ConvGeometry::new(
                (c, hgt, wid),
                r.gen_range(1..5),
                (kh, kw),
                (r.gen_range(1..3), r.gen_range(1..3)),
                (pad, pad),
            )
            .unwrap();
            let filters = Array4::from_shape_fn((g.out_channels, c, kh, kw), |_| r.gen_range(-1.0..1.0));
            let bias: Vec<f64> = (0..g.out_channels).map(|_| r.gen_range(-1.0..1.0)).collect();
            let layer = Layer::conv_from_filters(g, &filters, &bias, Activation::Identity).unwrap();
            let x = uniform(&mut r, (g.input_len(), 3), 1.0);
            let got = layer.pre_activation(x.view(), 0).unwrap();
            let want = conv_oracle(&g, &filters, &bias, &x);
            worst = worst.max((&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs())));
        }
        (worst <= 1e-12, format!("{cases} geometries, max |Δ| = {worst:.2e} (tolerance 1e-12)"))
    })
}

/// Measured δE after one update on a full-rank layer, relative to the prediction.
pub fn predicted_vs_measured(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, (6, 200), 1.0);
    let mut layer = dense(&mut r, 6, 4, Activation::Relu);
    let u = with_bias_row(x.view());
    let z = layer.weights().t().dot(&u);
    let pinv = recursive_inverse_columns(u.view(), 1e6, 0).unwrap();
    let table = sensitivities(&layer, &pinv).unwrap();
    let q = table.argmin().unwrap();
    let d = apply_obs_update(&mut layer, q, &pinv).unwrap();
    let z_hat = layer.weights().t().dot(&u);
    let (e, _) = layer_error(z.view(), z_hat.view(), Activation::Relu).unwrap();
    (e - d.predicted_de).abs() / d.predicted_de
}
