//! Pairwise similarity kernels over sampled pixels, column softmax with
//! diagonal correction, the cross-pixel matching loss, its analytic
//! gradients, and the kernel target alignment diagnostic.
//!
//! Embedding similarity uses the scaled cosine kernel (1/4) cos(phi_p, phi_q),
//! flow similarity the RBF kernel exp(-||f_p - f_q||^2 / 2 sigma^2). Each
//! kernel column is turned into a probability distribution by a softmax whose
//! diagonal logit is replaced by (kernel maximum - 1): 0 for the flow kernel,
//! -3/4 for the embedding kernel. The loss is the cross entropy from the
//! flow distribution to the embedding distribution, summed over columns.

use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Diagonal logit for the flow kernel's softmax (kernel max 1, minus 1).
pub const FLOW_DIAG_LOGIT: f64 = 0.0;
/// Diagonal logit for the embedding kernel's softmax (kernel max 1/4, minus 1).
pub const EMBED_DIAG_LOGIT: f64 = -0.75;

/// Minimum admissible embedding row norm.
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("empty input: at least one pixel is required")]
    Empty,
    #[error("flow and embedding pixel counts differ: {flows} vs {embeddings}")]
    SizeMismatch { flows: usize, embeddings: usize },
    #[error("embedding row {0} has near-zero norm")]
    ZeroNormRow(usize),
    #[error("kernel sizes differ: {0} vs {1}")]
    KernelSizeMismatch(usize, usize),
    #[error("kernel matrix is all zero; alignment undefined")]
    ZeroKernel,
    #[error("non-finite value in input")]
    NonFinite,
}

/// Log-parametrized RBF bandwidth: sigma = exp(rho), so sigma > 0 always.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub rho: f64,
}

impl KernelParams {
    pub fn from_sigma_sq(sigma_sq: f64) -> Self {
        assert!(sigma_sq > 0.0, "sigma^2 must be positive");
        Self { rho: 0.5 * sigma_sq.ln() }
    }

    pub fn sigma(&self) -> f64 {
        self.rho.exp()
    }

    pub fn sigma_sq(&self) -> f64 {
        (2.0 * self.rho).exp()
    }
}

/// RBF kernel matrix with a degeneracy flag: `degenerate` is set when every
/// off-diagonal entry underflowed to zero.
pub struct FlowKernel {
    pub matrix: Array2<f64>,
    pub degenerate: bool,
}

/// K[p,q] = exp(-||f_p - f_q||^2 / (2 sigma^2)); symmetric, unit diagonal.
pub fn flow_kernel_matrix(
    flows: ArrayView2<f64>,
    params: KernelParams,
) -> Result<FlowKernel, KernelError> {
    let n = flows.nrows();
    if n == 0 {
        return Err(KernelError::Empty);
    }
    if flows.iter().any(|v| !v.is_finite()) {
        return Err(KernelError::NonFinite);
    }
    let inv = 1.0 / (2.0 * params.sigma_sq());
    let mut k = Array2::zeros((n, n));
    for p in 0..n {
        k[[p, p]] = 1.0;
        for q in (p + 1)..n {
            let dx = flows[[p, 0]] - flows[[q, 0]];
            let dy = flows[[p, 1]] - flows[[q, 1]];
            let v = (-(dx * dx + dy * dy) * inv).exp();
            k[[p, q]] = v;
            k[[q, p]] = v;
        }
    }
    let degenerate = n > 1
        && (0..n).all(|p| (0..n).all(|q| p == q || k[[p, q]] == 0.0));
    Ok(FlowKernel { matrix: k, degenerate })
}

fn row_norms(emb: ArrayView2<f64>) -> Result<Array1<f64>, KernelError> {
    let mut norms = Array1::zeros(emb.nrows());
    for (i, row) in emb.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n < MIN_ROW_NORM {
            return Err(KernelError::ZeroNormRow(i));
        }
        norms[i] = n;
    }
    Ok(norms)
}

/// K[p,q] = (1/4) <phi_p, phi_q> / (||phi_p|| ||phi_q||); diagonal 1/4.
pub fn embedding_kernel_matrix(emb: ArrayView2<f64>) -> Result<Array2<f64>, KernelError> {
    let n = emb.nrows();
    if n == 0 {
        return Err(KernelError::Empty);
    }
    let norms = row_norms(emb)?;
    let mut k = Array2::zeros((n, n));
    for p in 0..n {
        k[[p, p]] = 0.25;
        for q in (p + 1)..n {
            let dot = emb.row(p).dot(&emb.row(q));
            let v = 0.25 * dot / (norms[p] * norms[q]);
            k[[p, q]] = v;
            k[[q, p]] = v;
        }
    }
    Ok(k)
}

/// Column softmax with the diagonal logit replaced by `diag_logit`.
/// Each column of the result sums to 1; the max is subtracted per column
/// before exponentiation for stability.
pub fn column_softmax(k: ArrayView2<f64>, diag_logit: f64) -> Array2<f64> {
    let n = k.nrows();
    let mut s = Array2::zeros((n, n));
    for q in 0..n {
        let mut max = f64::NEG_INFINITY;
        for p in 0..n {
            let l = if p == q { diag_logit } else { k[[p, q]] };
            max = max.max(l);
        }
        let mut sum = 0.0;
        for p in 0..n {
            let l = if p == q { diag_logit } else { k[[p, q]] };
            let e = (l - max).exp();
            s[[p, q]] = e;
            sum += e;
        }
        for p in 0..n {
            s[[p, q]] /= sum;
        }
    }
    s
}

/// Cross entropy -sum_q sum_p target[p,q] ln pred[p,q].
pub fn cross_entropy(target: ArrayView2<f64>, pred: ArrayView2<f64>) -> f64 {
    target
        .iter()
        .zip(pred.iter())
        .map(|(&t, &p)| -t * p.ln())
        .sum()
}

/// Shannon entropy of each column, summed over columns.
pub fn column_entropy_sum(s: ArrayView2<f64>) -> f64 {
    s.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum()
}

fn check_sizes(flows: ArrayView2<f64>, emb: ArrayView2<f64>) -> Result<usize, KernelError> {
    if flows.nrows() != emb.nrows() {
        return Err(KernelError::SizeMismatch { flows: flows.nrows(), embeddings: emb.nrows() });
    }
    if flows.nrows() == 0 {
        return Err(KernelError::Empty);
    }
    Ok(flows.nrows())
}

/// Loss between the flow-derived and embedding-derived distributions.
pub fn cross_pixel_loss(
    flows: ArrayView2<f64>,
    emb: ArrayView2<f64>,
    params: KernelParams,
) -> Result<f64, KernelError> {
    check_sizes(flows, emb)?;
    let kf = flow_kernel_matrix(flows, params)?;
    let kphi = embedding_kernel_matrix(emb)?;
    let sf = column_softmax(kf.matrix.view(), FLOW_DIAG_LOGIT);
    let sphi = column_softmax(kphi.view(), EMBED_DIAG_LOGIT);
    Ok(cross_entropy(sf.view(), sphi.view()))
}

/// Loss value with gradients at the loss boundary: d_embeddings is dL/dphi
/// for the raw (possibly unnormalized) embedding rows, d_rho is dL/drho.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub loss: f64,
    pub d_embeddings: Array2<f64>,
    pub d_rho: f64,
}

/// Analytic gradients of `cross_pixel_loss`.
pub fn loss_gradients(
    flows: ArrayView2<f64>,
    emb: ArrayView2<f64>,
    params: KernelParams,
) -> Result<LossGradients, KernelError> {
    let n = check_sizes(flows, emb)?;
    let d = emb.ncols();

    let norms = row_norms(emb)?;
    // unit rows
    let mut unit = emb.to_owned();
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v / norms[i]);
    }

    let kf = flow_kernel_matrix(flows, params)?.matrix;
    let kphi = embedding_kernel_matrix(emb)?;
    let sf = column_softmax(kf.view(), FLOW_DIAG_LOGIT);
    let sphi = column_softmax(kphi.view(), EMBED_DIAG_LOGIT);
    let loss = cross_entropy(sf.view(), sphi.view());

    // Embedding side. dL/d(logit[p,q]) = S_phi - S_f per column; the diagonal
    // logit is a constant, so no gradient flows through it.
    let mut g = &sphi - &sf;
    for p in 0..n {
        g[[p, p]] = 0.0;
    }
    // K_phi[p,q] = (1/4) u_p . u_q contributes from both (p,q) and (q,p).
    let b = &g + &g.t();
    let du = b.dot(&unit) * 0.25;
    // back through row normalization u = phi / ||phi||
    let mut d_emb = Array2::zeros((n, d));
    for p in 0..n {
        let up = unit.row(p);
        let dup = du.row(p);
        let proj = dup.dot(&up);
        for j in 0..d {
            d_emb[[p, j]] = (dup[j] - proj * up[j]) / norms[p];
        }
    }

    // Flow side: only rho is learnable. For column q with c_p = -ln S_phi[p,q],
    // dCE_q/d(logit[p,q]) = S_f[p,q] (c_p - sum_r c_r S_f[r,q]), and
    // d K_f / d rho = K_f * dist^2 / sigma^2.
    let sigma_sq = params.sigma_sq();
    let mut d_rho = 0.0;
    for q in 0..n {
        let mut cbar = 0.0;
        for r in 0..n {
            cbar += -sphi[[r, q]].ln() * sf[[r, q]];
        }
        for p in 0..n {
            if p == q {
                continue;
            }
            let dx = flows[[p, 0]] - flows[[q, 0]];
            let dy = flows[[p, 1]] - flows[[q, 1]];
            let dist_sq = dx * dx + dy * dy;
            let c_p = -sphi[[p, q]].ln();
            let dlogit = sf[[p, q]] * (c_p - cbar);
            d_rho += dlogit * kf[[p, q]] * dist_sq / sigma_sq;
        }
    }

    Ok(LossGradients { loss, d_embeddings: d_emb, d_rho })
}

/// Kernel target alignment: <K, K'>_F / (||K||_F ||K'||_F).
pub fn kta(k: ArrayView2<f64>, k2: ArrayView2<f64>) -> Result<f64, KernelError> {
    if k.nrows() != k2.nrows() || k.ncols() != k2.ncols() {
        return Err(KernelError::KernelSizeMismatch(k.nrows(), k2.nrows()));
    }
    let dot: f64 = k.iter().zip(k2.iter()).map(|(&a, &b)| a * b).sum();
    let n1: f64 = k.iter().map(|&a| a * a).sum();
    let n2: f64 = k2.iter().map(|&a| a * a).sum();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(KernelError::ZeroKernel);
    }
    Ok(dot / (n1 * n2).sqrt())
}

/// Column sums of a stochastic matrix; diagnostic helper.
pub fn column_sums(s: ArrayView2<f64>) -> Array1<f64> {
    s.sum_axis(Axis(0))
}
