//! Trainable NetVLAD and NetFV pooling.
//!
//! Both layers soft-assign every frame to `K` clusters with a row softmax
//! over `frames · assign_weights + assign_bias` and accumulate per-cluster
//! statistics:
//!
//! - NetVLAD: `V[k,j] = Σ_t A[t,k] (x[t,j] - c[k,j])`, each cluster row
//!   L2-normalised, then the flattened `K·D` vector L2-normalised.
//! - NetFV: first-order `Σ_t A[t,k] r` and second-order `Σ_t A[t,k] (r² - 1)`
//!   with `r = (x[t,j] - c[k,j]) / s[k,j]`; each half is flattened and
//!   L2-normalised on its own, then the halves are concatenated.
//!
//! Vectors with norm below [`NORM_EPS`] are left at zero. The gradient there
//! is reported as zero.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};

use crate::error::{invalid, shape, Error, Result};

/// Lower bound on NetFV spreads, maintained by the optimizers.
pub const SPREAD_EPS: f64 = 1e-3;
/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct VladParams {
    /// `D x K`
    pub assign_weights: Array2<f64>,
    /// `K`
    pub assign_bias: Array1<f64>,
    /// `K x D`
    pub centers: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FvParams {
    pub assign_weights: Array2<f64>,
    pub assign_bias: Array1<f64>,
    pub centers: Array2<f64>,
    /// `K x D`, every entry at least [`SPREAD_EPS`].
    pub spreads: Array2<f64>,
}

/// Gradients of a pooling layer: the input matrix plus one array per
/// parameter array, held in a parameter struct of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolGradients<P> {
    pub frames: Array2<f64>,
    pub params: P,
}

impl VladParams {
    pub fn zeros(dim: usize, clusters: usize) -> Self {
        Self {
            assign_weights: Array2::zeros((dim, clusters)),
            assign_bias: Array1::zeros(clusters),
            centers: Array2::zeros((clusters, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.assign_weights.nrows()
    }

    pub fn clusters(&self) -> usize {
        self.assign_weights.ncols()
    }

    pub fn descriptor_len(&self) -> usize {
        self.dim() * self.clusters()
    }

    pub fn param_count(dim: usize, clusters: usize) -> usize {
        2 * dim * clusters + clusters
    }

    fn check(&self) -> Result<()> {
        check_assignment(&self.assign_weights, &self.assign_bias, &self.centers)?;
        check_finite("centers", self.centers.iter())
    }
}

impl FvParams {
    pub fn zeros(dim: usize, clusters: usize) -> Self {
        Self {
            assign_weights: Array2::zeros((dim, clusters)),
            assign_bias: Array1::zeros(clusters),
            centers: Array2::zeros((clusters, dim)),
            spreads: Array2::zeros((clusters, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.assign_weights.nrows()
    }

    pub fn clusters(&self) -> usize {
        self.assign_weights.ncols()
    }

    pub fn descriptor_len(&self) -> usize {
        2 * self.dim() * self.clusters()
    }

    pub fn param_count(dim: usize, clusters: usize) -> usize {
        3 * dim * clusters + clusters
    }

    /// Clamps spreads to at least [`SPREAD_EPS`].
    pub fn project_spreads(&mut self) {
        self.spreads.mapv_inplace(|s| s.max(SPREAD_EPS));
    }

    fn check(&self) -> Result<()> {
        check_assignment(&self.assign_weights, &self.assign_bias, &self.centers)?;
        check_finite("centers", self.centers.iter())?;
        if self.spreads.dim() != self.centers.dim() {
            return Err(shape(format!(
                "spreads are {:?}, centers are {:?}",
                self.spreads.dim(),
                self.centers.dim()
            )));
        }
        check_finite("spreads", self.spreads.iter())?;
        if let Some(s) = self.spreads.iter().find(|&&s| s < SPREAD_EPS) {
            return Err(invalid(format!("spread {s} below minimum {SPREAD_EPS}")));
        }
        Ok(())
    }
}

fn check_assignment(w: &Array2<f64>, b: &Array1<f64>, c: &Array2<f64>) -> Result<()> {
    let (d, k) = w.dim();
    if d == 0 || k == 0 {
        return Err(shape(format!("assignment weights are {d}x{k}")));
    }
    if b.len() != k {
        return Err(shape(format!("assignment bias has {} entries, expected {k}", b.len())));
    }
    if c.dim() != (k, d) {
        return Err(shape(format!("centers are {:?}, expected ({k}, {d})", c.dim())));
    }
    check_finite("assign_weights", w.iter())?;
    check_finite("assign_bias", b.iter())
}

fn check_finite<'a>(what: &str, mut it: impl Iterator<Item = &'a f64>) -> Result<()> {
    if it.any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

fn check_frames(frames: &ArrayView2<f64>, dim: usize) -> Result<()> {
    if frames.nrows() == 0 {
        return Err(invalid("pooling needs at least one frame"));
    }
    if frames.ncols() != dim {
        return Err(shape(format!(
            "frames have {} columns, pooling expects {dim}",
            frames.ncols()
        )));
    }
    check_finite("frames", frames.iter())
}

/// Max-subtracted softmax over each row.
pub fn row_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Backward through a row softmax given its output.
fn row_softmax_backward(probs: &Array2<f64>, grad_probs: &Array2<f64>) -> Array2<f64> {
    let dots = (probs * grad_probs).sum_axis(Axis(1)).insert_axis(Axis(1));
    probs * &(grad_probs - &dots)
}

/// Normalises `v` in place, returning its original norm.
fn l2_normalize(mut v: ArrayViewMut1<f64>) -> f64 {
    let n = v.dot(&v).sqrt();
    if n < NORM_EPS {
        v.fill(0.0);
    } else {
        v.mapv_inplace(|x| x / n);
    }
    n
}

/// Gradient of `v / |v|` given the normalised output and the norm.
fn l2_normalize_backward(out: ArrayView1<f64>, norm: f64, grad_out: ArrayView1<f64>) -> Array1<f64> {
    if norm < NORM_EPS {
        return Array1::zeros(out.len());
    }
    let proj = out.dot(&grad_out);
    (&grad_out - &(&out * proj)) / norm
}

fn soft_assign(frames: &ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let logits = frames.dot(w) + b;
    row_softmax(&logits)
}

/// Intermediates of [`vlad_forward`].
#[derive(Clone, Debug)]
pub struct VladCache {
    frames: Array2<f64>,
    params: VladParams,
    assign: Array2<f64>,
    /// Intra-normalised cluster rows.
    intra: Array2<f64>,
    row_norms: Array1<f64>,
    global_norm: f64,
    descriptor: Array1<f64>,
}

impl VladCache {
    pub fn assignments(&self) -> &Array2<f64> {
        &self.assign
    }

    pub fn descriptor(&self) -> &Array1<f64> {
        &self.descriptor
    }
}

pub fn vlad_forward(frames: ArrayView2<f64>, params: &VladParams) -> Result<(Array1<f64>, VladCache)> {
    params.check()?;
    check_frames(&frames, params.dim())?;

    let assign = soft_assign(&frames, &params.assign_weights, &params.assign_bias);
    let mass = assign.sum_axis(Axis(0));
    let mut resid = assign.t().dot(&frames);
    resid -= &(&params.centers * &mass.view().insert_axis(Axis(1)));

    let mut intra = resid;
    let row_norms: Array1<f64> = intra.rows_mut().into_iter().map(l2_normalize).collect();

    let mut descriptor = Array1::from_iter(intra.iter().copied());
    let global_norm = l2_normalize(descriptor.view_mut());

    let cache = VladCache {
        frames: frames.to_owned(),
        params: params.clone(),
        assign,
        intra,
        row_norms,
        global_norm,
        descriptor: descriptor.clone(),
    };
    Ok((descriptor, cache))
}

/// Gradient of `⟨upstream, descriptor⟩` with respect to the inputs and
/// parameters of the forward call that produced `cache`.
pub fn vlad_backward(upstream: ArrayView1<f64>, cache: &VladCache) -> Result<PoolGradients<VladParams>> {
    let (k, d) = cache.intra.dim();
    if upstream.len() != k * d {
        return Err(shape(format!(
            "upstream has {} entries, descriptor has {}",
            upstream.len(),
            k * d
        )));
    }
    let g_flat = l2_normalize_backward(cache.descriptor.view(), cache.global_norm, upstream);
    let g_intra = g_flat.into_shape_with_order((k, d)).expect("contiguous");

    let mut g_resid = Array2::<f64>::zeros((k, d));
    for c in 0..k {
        let g = l2_normalize_backward(cache.intra.row(c), cache.row_norms[c], g_intra.row(c));
        g_resid.row_mut(c).assign(&g);
    }

    let x = &cache.frames;
    let a = &cache.assign;
    let p = &cache.params;
    let mass = a.sum_axis(Axis(0));

    let mut g_frames = a.dot(&g_resid);
    let g_centers = -(&g_resid * &mass.view().insert_axis(Axis(1)));
    let center_term = (&g_resid * &p.centers).sum_axis(Axis(1));
    let g_assign = x.dot(&g_resid.t()) - &center_term;

    let g_logits = row_softmax_backward(a, &g_assign);
    let g_weights = x.t().dot(&g_logits);
    let g_bias = g_logits.sum_axis(Axis(0));
    g_frames += &g_logits.dot(&p.assign_weights.t());

    Ok(PoolGradients {
        frames: g_frames,
        params: VladParams {
            assign_weights: g_weights,
            assign_bias: g_bias,
            centers: g_centers,
        },
    })
}

/// Intermediates of [`fv_forward`].
#[derive(Clone, Debug)]
pub struct FvCache {
    frames: Array2<f64>,
    params: FvParams,
    assign: Array2<f64>,
    first_norm: f64,
    second_norm: f64,
    descriptor: Array1<f64>,
}

impl FvCache {
    pub fn assignments(&self) -> &Array2<f64> {
        &self.assign
    }

    pub fn descriptor(&self) -> &Array1<f64> {
        &self.descriptor
    }
}

/// First- and second-order statistics before normalisation, each `K x D`.
fn fv_stats(frames: &ArrayView2<f64>, assign: &Array2<f64>, p: &FvParams) -> (Array2<f64>, Array2<f64>) {
    let (k, d) = p.centers.dim();
    let mut first = Array2::<f64>::zeros((k, d));
    let mut second = Array2::<f64>::zeros((k, d));
    for (t, x) in frames.rows().into_iter().enumerate() {
        for c in 0..k {
            let w = assign[[t, c]];
            for j in 0..d {
                let r = (x[j] - p.centers[[c, j]]) / p.spreads[[c, j]];
                first[[c, j]] += w * r;
                second[[c, j]] += w * (r * r - 1.0);
            }
        }
    }
    (first, second)
}

pub fn fv_forward(frames: ArrayView2<f64>, params: &FvParams) -> Result<(Array1<f64>, FvCache)> {
    params.check()?;
    check_frames(&frames, params.dim())?;

    let assign = soft_assign(&frames, &params.assign_weights, &params.assign_bias);
    let (first, second) = fv_stats(&frames, &assign, params);
    let kd = first.len();

    let mut descriptor = Array1::<f64>::zeros(2 * kd);
    descriptor
        .slice_mut(ndarray::s![..kd])
        .assign(&Array1::from_iter(first.iter().copied()));
    descriptor
        .slice_mut(ndarray::s![kd..])
        .assign(&Array1::from_iter(second.iter().copied()));
    let first_norm = l2_normalize(descriptor.slice_mut(ndarray::s![..kd]));
    let second_norm = l2_normalize(descriptor.slice_mut(ndarray::s![kd..]));

    let cache = FvCache {
        frames: frames.to_owned(),
        params: params.clone(),
        assign,
        first_norm,
        second_norm,
        descriptor: descriptor.clone(),
    };
    Ok((descriptor, cache))
}

pub fn fv_backward(upstream: ArrayView1<f64>, cache: &FvCache) -> Result<PoolGradients<FvParams>> {
    let (k, d) = cache.params.centers.dim();
    let kd = k * d;
    if upstream.len() != 2 * kd {
        return Err(shape(format!(
            "upstream has {} entries, descriptor has {}",
            upstream.len(),
            2 * kd
        )));
    }
    let y = &cache.descriptor;
    let g1 = l2_normalize_backward(
        y.slice(ndarray::s![..kd]),
        cache.first_norm,
        upstream.slice(ndarray::s![..kd]),
    );
    let g2 = l2_normalize_backward(
        y.slice(ndarray::s![kd..]),
        cache.second_norm,
        upstream.slice(ndarray::s![kd..]),
    );
    let g1 = g1.into_shape_with_order((k, d)).expect("contiguous");
    let g2 = g2.into_shape_with_order((k, d)).expect("contiguous");
    Ok(fv_stats_backward(&g1, &g2, cache))
}

/// Backward through the un-normalised statistics given their gradients.
fn fv_stats_backward(g_first: &Array2<f64>, g_second: &Array2<f64>, cache: &FvCache) -> PoolGradients<FvParams> {
    let p = &cache.params;
    let x = &cache.frames;
    let a = &cache.assign;
    let (k, d) = p.centers.dim();
    let t_len = x.nrows();

    let mut g_frames = Array2::<f64>::zeros((t_len, d));
    let mut g_centers = Array2::<f64>::zeros((k, d));
    let mut g_spreads = Array2::<f64>::zeros((k, d));
    let mut g_assign = Array2::<f64>::zeros((t_len, k));

    for t in 0..t_len {
        for c in 0..k {
            let w = a[[t, c]];
            let mut ga = 0.0;
            for j in 0..d {
                let s = p.spreads[[c, j]];
                let r = (x[[t, j]] - p.centers[[c, j]]) / s;
                let g1 = g_first[[c, j]];
                let g2 = g_second[[c, j]];
                ga += g1 * r + g2 * (r * r - 1.0);
                // d/dr of w·(g1·r + g2·(r²-1))
                let gr = w * (g1 + 2.0 * g2 * r);
                g_frames[[t, j]] += gr / s;
                g_centers[[c, j]] -= gr / s;
                g_spreads[[c, j]] -= gr * r / s;
            }
            g_assign[[t, c]] = ga;
        }
    }

    let g_logits = row_softmax_backward(a, &g_assign);
    let g_weights = x.t().dot(&g_logits);
    let g_bias = g_logits.sum_axis(Axis(0));
    g_frames += &g_logits.dot(&p.assign_weights.t());

    PoolGradients {
        frames: g_frames,
        params: FvParams {
            assign_weights: g_weights,
            assign_bias: g_bias,
            centers: g_centers,
            spreads: g_spreads,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(lo..hi))
    }

    fn rand_vlad(rng: &mut ChaCha8Rng, d: usize, k: usize) -> VladParams {
        VladParams {
            assign_weights: rand_mat(rng, d, k, -1.0, 1.0),
            assign_bias: Array1::from_shape_fn(k, |_| rng.random_range(-0.5..0.5)),
            centers: rand_mat(rng, k, d, -1.0, 1.0),
        }
    }

    fn rand_fv(rng: &mut ChaCha8Rng, d: usize, k: usize) -> FvParams {
        let v = rand_vlad(rng, d, k);
        FvParams {
            assign_weights: v.assign_weights,
            assign_bias: v.assign_bias,
            centers: v.centers,
            spreads: rand_mat(rng, k, d, 0.5, 2.0),
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central differences of `f` with respect to every entry of `target`.
    fn fd_check(
        target: &mut [f64],
        analytic: &[f64],
        mut f: impl FnMut(&[f64]) -> f64,
        what: &str,
    ) {
        let h = 1e-5;
        for i in 0..target.len() {
            let orig = target[i];
            target[i] = orig + h;
            let up = f(target);
            target[i] = orig - h;
            let down = f(target);
            target[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(analytic[i], numeric);
            assert!(e <= 1e-4, "{what}[{i}]: analytic {} numeric {numeric} rel {e}", analytic[i]);
        }
    }

    #[test]
    fn vlad_single_cluster_scalar() {
        let p = VladParams {
            assign_weights: array![[0.3]],
            assign_bias: array![0.0],
            centers: array![[0.5]],
        };
        let (y, _) = vlad_forward(array![[2.0]].view(), &p).unwrap();
        assert_eq!(y, array![1.0]);
    }

    #[test]
    fn vlad_two_cluster_reference() {
        let p = VladParams {
            assign_weights: array![[1.0, -1.0]],
            assign_bias: array![0.0, 0.0],
            centers: array![[0.0], [2.0]],
        };
        let (y, cache) = vlad_forward(array![[1.0]].view(), &p).unwrap();
        let a = cache.assignments();
        assert!((a[[0, 0]] - 0.880_797_1).abs() < 1e-7);
        assert!((a[[0, 1]] - 0.119_202_9).abs() < 1e-7);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((y[0] - h).abs() < 1e-12 && (y[1] + h).abs() < 1e-12);
    }

    #[test]
    fn vlad_zero_residual_gives_zero_descriptor() {
        // strongly one-hot assignment with every frame sitting on its center
        let p = VladParams {
            assign_weights: array![[0.0, 0.0], [0.0, 0.0]],
            assign_bias: array![1e4, -1e4],
            centers: array![[0.25, -0.5], [3.0, 3.0]],
        };
        let frames = array![[0.25, -0.5], [0.25, -0.5]];
        let (y, cache) = vlad_forward(frames.view(), &p).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        let g = vlad_backward(Array1::ones(4).view(), &cache).unwrap();
        assert!(g.frames.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn vlad_zero_upstream_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rand_vlad(&mut rng, 4, 2);
        let x = rand_mat(&mut rng, 3, 4, -1.0, 1.0);
        let (_, cache) = vlad_forward(x.view(), &p).unwrap();
        let g = vlad_backward(Array1::zeros(8).view(), &cache).unwrap();
        assert!(g.frames.iter().chain(g.params.assign_weights.iter()).all(|&v| v == 0.0));
        assert!(g.params.assign_bias.iter().chain(g.params.centers.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn vlad_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let (t, d, k) = (3, 4, 2);
            let mut p = rand_vlad(&mut rng, d, k);
            let mut x = rand_mat(&mut rng, t, d, -1.0, 1.0);
            let up = Array1::from_shape_fn(k * d, |_| rng.random_range(-1.0..1.0));
            let (_, cache) = vlad_forward(x.view(), &p).unwrap();
            let g = vlad_backward(up.view(), &cache).unwrap();

            let obj = |x: &Array2<f64>, p: &VladParams| vlad_forward(x.view(), p).unwrap().0.dot(&up);

            let p0 = p.clone();
            fd_check(x.as_slice_mut().unwrap(), g.frames.as_slice().unwrap(), |s| {
                obj(&Array2::from_shape_vec((t, d), s.to_vec()).unwrap(), &p0)
            }, "frames");
            let x0 = x.clone();
            let mut w = p.assign_weights.clone();
            fd_check(w.as_slice_mut().unwrap(), g.params.assign_weights.as_slice().unwrap(), |s| {
                let mut q = p.clone();
                q.assign_weights = Array2::from_shape_vec((d, k), s.to_vec()).unwrap();
                obj(&x0, &q)
            }, "assign_weights");
            let mut b = p.assign_bias.clone();
            fd_check(b.as_slice_mut().unwrap(), g.params.assign_bias.as_slice().unwrap(), |s| {
                let mut q = p.clone();
                q.assign_bias = Array1::from_vec(s.to_vec());
                obj(&x0, &q)
            }, "assign_bias");
            let mut c = p.centers.clone();
            fd_check(c.as_slice_mut().unwrap(), g.params.centers.as_slice().unwrap(), |s| {
                p.centers = Array2::from_shape_vec((k, d), s.to_vec()).unwrap();
                obj(&x0, &p)
            }, "centers");
        }
    }

    #[test]
    fn vlad_duplicate_frames_share_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = rand_vlad(&mut rng, 4, 3);
        let mut x = rand_mat(&mut rng, 4, 4, -1.0, 1.0);
        let row = x.row(0).to_owned();
        x.row_mut(2).assign(&row);
        let up = Array1::from_shape_fn(12, |_| rng.random_range(-1.0..1.0));
        let (_, cache) = vlad_forward(x.view(), &p).unwrap();
        let g = vlad_backward(up.view(), &cache).unwrap();
        for j in 0..4 {
            assert!((g.frames[[0, j]] - g.frames[[2, j]]).abs() < 1e-14);
        }
    }

    #[test]
    fn vlad_backward_rejects_wrong_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = rand_vlad(&mut rng, 4, 2);
        let (_, cache) = vlad_forward(rand_mat(&mut rng, 2, 4, -1.0, 1.0).view(), &p).unwrap();
        assert!(matches!(vlad_backward(Array1::zeros(7).view(), &cache), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_errors() {
        let p = VladParams::zeros(2, 2);
        assert!(vlad_forward(Array2::zeros((0, 2)).view(), &p).is_err());
        assert!(matches!(vlad_forward(Array2::zeros((1, 3)).view(), &p), Err(Error::Shape(_))));
        assert!(matches!(
            vlad_forward(array![[f64::NAN, 0.0]].view(), &p),
            Err(Error::NonFinite(_))
        ));
        let mut fv = FvParams::zeros(2, 2);
        fv.spreads.fill(1.0);
        fv.spreads[[1, 0]] = 1e-4;
        assert!(matches!(fv_forward(array![[0.0, 0.0]].view(), &fv), Err(Error::Invalid(_))));
    }

    #[test]
    fn fv_scalar_reference() {
        let p = FvParams {
            assign_weights: array![[0.7]],
            assign_bias: array![0.0],
            centers: array![[0.5]],
            spreads: array![[1.0]],
        };
        let x = array![[2.0]];
        let (y, cache) = fv_forward(x.view(), &p).unwrap();
        assert_eq!(y, array![1.0, 1.0]);
        let (first, second) = fv_stats(&x.view(), cache.assignments(), &p);
        assert!((first[[0, 0]] - 1.5).abs() < 1e-15);
        assert!((second[[0, 0]] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn fv_frames_at_centers() {
        let p = FvParams {
            assign_weights: Array2::zeros((2, 2)),
            assign_bias: array![1e4, -1e4],
            centers: array![[0.3, -0.2], [1.0, 1.0]],
            spreads: array![[0.5, 2.0], [1.0, 3.0]],
        };
        let x = array![[0.3, -0.2], [0.3, -0.2], [0.3, -0.2]];
        let (_, cache) = fv_forward(x.view(), &p).unwrap();
        let a = cache.assignments();
        let (first, second) = fv_stats(&x.view(), a, &p);
        assert!(first.iter().all(|&v| v == 0.0));
        let mass = a.sum_axis(Axis(0));
        for c in 0..2 {
            for j in 0..2 {
                if c == 0 {
                    assert!((second[[c, j]] + mass[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fv_first_half_invariant_to_spread_scale_scalar() {
        let mut p = FvParams {
            assign_weights: array![[0.1]],
            assign_bias: array![0.0],
            centers: array![[-0.4]],
            spreads: array![[0.8]],
        };
        let x = array![[1.3], [0.2]];
        let (y1, _) = fv_forward(x.view(), &p).unwrap();
        p.spreads *= 2.0;
        let (y2, _) = fv_forward(x.view(), &p).unwrap();
        assert_eq!(y1[0], y2[0]);
    }

    #[test]
    fn fv_spread_derivative_closed_form() {
        let (x, c, s) = (1.7, 0.2, 0.6);
        let p = FvParams {
            assign_weights: array![[0.0]],
            assign_bias: array![0.0],
            centers: array![[c]],
            spreads: array![[s]],
        };
        let (_, cache) = fv_forward(array![[x]].view(), &p).unwrap();
        let g = fv_stats_backward(&array![[0.0]], &array![[1.0]], &cache);
        // d/ds [((x-c)/s)^2 - 1]
        let expected = -2.0 * (x - c) * (x - c) / (s * s * s);
        assert!((g.params.spreads[[0, 0]] - expected).abs() < 1e-12);
        assert!(g.params.spreads[[0, 0]] < 0.0);
        // normalised scalar half is constant ±1
        let full = fv_backward(array![0.0, 1.0].view(), &cache).unwrap();
        assert_eq!(full.params.spreads[[0, 0]], 0.0);
    }

    #[test]
    fn fv_zero_upstream_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = rand_fv(&mut rng, 4, 2);
        let (_, cache) = fv_forward(rand_mat(&mut rng, 3, 4, -1.0, 1.0).view(), &p).unwrap();
        let g = fv_backward(Array1::zeros(16).view(), &cache).unwrap();
        assert!(g.frames.iter().chain(g.params.spreads.iter()).all(|&v| v == 0.0));
        assert!(g.params.assign_weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let (t, d, k) = (3, 4, 2);
            let p = rand_fv(&mut rng, d, k);
            let mut x = rand_mat(&mut rng, t, d, -1.0, 1.0);
            let up = Array1::from_shape_fn(2 * k * d, |_| rng.random_range(-1.0..1.0));
            let (_, cache) = fv_forward(x.view(), &p).unwrap();
            let g = fv_backward(up.view(), &cache).unwrap();
            let obj = |x: &Array2<f64>, p: &FvParams| fv_forward(x.view(), p).unwrap().0.dot(&up);

            fd_check(x.as_slice_mut().unwrap(), g.frames.as_slice().unwrap(), |s| {
                obj(&Array2::from_shape_vec((t, d), s.to_vec()).unwrap(), &p)
            }, "frames");
            let x0 = x.clone();
            let mut w = p.assign_weights.clone();
            fd_check(w.as_slice_mut().unwrap(), g.params.assign_weights.as_slice().unwrap(), |s| {
                let mut q = p.clone();
                q.assign_weights = Array2::from_shape_vec((d, k), s.to_vec()).unwrap();
                obj(&x0, &q)
            }, "assign_weights");
            let mut b = p.assign_bias.clone();
            fd_check(b.as_slice_mut().unwrap(), g.params.assign_bias.as_slice().unwrap(), |s| {
                let mut q = p.clone();
                q.assign_bias = Array1::from_vec(s.to_vec());
                obj(&x0, &q)
            }, "assign_bias");
            let mut c = p.centers.clone();
            fd_check(c.as_slice_mut().unwrap(), g.params.centers.as_slice().unwrap(), |s| {
                let mut q = p.clone();
                q.centers = Array2::from_shape_vec((k, d), s.to_vec()).unwrap();
                obj(&x0, &q)
            }, "centers");
            let mut sp = p.spreads.clone();
            fd_check(sp.as_slice_mut().unwrap(), g.params.spreads.as_slice().unwrap(), |s| {
                let mut q = p.clone();
                q.spreads = Array2::from_shape_vec((k, d), s.to_vec()).unwrap();
                obj(&x0, &q)
            }, "spreads");
        }
    }

    #[test]
    fn softmax_handles_extreme_logits() {
        let a = row_softmax(&array![[1e4, -1e4, 0.0], [-1e4, -1e4, -1e4]]);
        assert!(a.iter().all(|v| v.is_finite()));
        assert!((a[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((a.row(1).sum() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-15.0f64..15.0, 12)) {
            let a = row_softmax(&Array2::from_shape_vec((3, 4), vals).unwrap());
            for row in a.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }

        #[test]
        fn descriptors_are_unit_and_order_invariant(seed in 0u64..1000, t in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (d, k) = (3, 2);
            let vp = rand_vlad(&mut rng, d, k);
            let fp = rand_fv(&mut rng, d, k);
            let x = rand_mat(&mut rng, t, d, -2.0, 2.0);
            let mut rev = x.clone();
            rev.invert_axis(Axis(0));

            let (y, _) = vlad_forward(x.view(), &vp).unwrap();
            let (yr, _) = vlad_forward(rev.view(), &vp).unwrap();
            let n = y.dot(&y).sqrt();
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
            for (a, b) in y.iter().zip(yr.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }

            let (f, _) = fv_forward(x.view(), &fp).unwrap();
            let (fr, _) = fv_forward(rev.view(), &fp).unwrap();
            let kd = k * d;
            for half in [f.slice(ndarray::s![..kd]), f.slice(ndarray::s![kd..])] {
                let n = half.dot(&half).sqrt();
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
            }
            for (a, b) in f.iter().zip(fr.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
