//! Quadratic and linear regression surrogates.
//!
//! The hypothesis space for objectives and mappings is the set of
//! second-order polynomials; constraints get first-order fits. Inputs are
//! standardized (per-coordinate mean and standard deviation) before the
//! least-squares solve for conditioning, and the fitted coefficients are
//! mapped back so the stored model is an ordinary polynomial in the original
//! coordinates. Reported `mse` is the training mean squared error.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Number of monomials of degree at most two in `dim` variables.
pub fn quadratic_basis_size(dim: usize) -> usize {
    (dim + 1) * (dim + 2) / 2
}

/// Number of monomials of degree at most one in `dim` variables.
pub fn linear_basis_size(dim: usize) -> usize {
    dim + 1
}

/// Second-order polynomial `c0 + l'x + sum_{i<=j} q_ij x_i x_j`.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    pub dim: usize,
    pub intercept: f64,
    pub linear: Vec<f64>,
    /// Coefficients of `x_i * x_j` for `i <= j`, row-major.
    pub quadratic: Vec<f64>,
    pub mse: f64,
    /// The normal system was singular and the minimum-norm solution was
    /// taken; predictions may be unreliable away from the samples.
    pub rank_deficient: bool,
}

impl QuadraticModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let mut v = self.intercept;
        for (li, xi) in self.linear.iter().zip(x) {
            v += li * xi;
        }
        let mut k = 0;
        for i in 0..self.dim {
            for j in i..self.dim {
                v += self.quadratic[k] * x[i] * x[j];
                k += 1;
            }
        }
        v
    }

    /// Coefficient of the monomial `x_i * x_j` (order-insensitive).
    pub fn quad_coeff(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        // Offset of row i in the upper-triangle layout.
        let row_start = i * self.dim - i * (i + 1) / 2 + i;
        self.quadratic[row_start + (j - i)]
    }
}

/// First-order polynomial `c0 + l'x`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub dim: usize,
    pub intercept: f64,
    pub linear: Vec<f64>,
    pub mse: f64,
    pub rank_deficient: bool,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        self.intercept + self.linear.iter().zip(x).map(|(l, v)| l * v).sum::<f64>()
    }
}

/// Per-component quadratic approximation of the lower-level reaction
/// mapping `x_u -> x_l`; `mse` averages the component training errors.
#[derive(Debug, Clone)]
pub struct PsiModel {
    pub components: Vec<QuadraticModel>,
    pub mse: f64,
}

impl PsiModel {
    pub fn predict(&self, x_u: &[f64]) -> Vec<f64> {
        self.components.iter().map(|m| m.predict(x_u)).collect()
    }
}

/// Quadratic approximation of the lower-level optimal value `x_u -> f*`.
#[derive(Debug, Clone)]
pub struct PhiModel {
    pub model: QuadraticModel,
}

impl PhiModel {
    pub fn predict(&self, x_u: &[f64]) -> f64 {
        self.model.predict(x_u)
    }

    pub fn mse(&self) -> f64 {
        self.model.mse
    }
}

struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(xs: &[&[f64]], dim: usize) -> Self {
        let n = xs.len() as f64;
        let mut mean = vec![0.0; dim];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(*x) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for x in xs {
            for ((v, m), xi) in var.iter_mut().zip(&mean).zip(*x) {
                *v += (xi - m) * (xi - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = (x[i] - self.mean[i]) / self.scale[i];
        }
    }
}

fn solve_least_squares(design: DMatrix<f64>, targets: DVector<f64>) -> (Vec<f64>, bool) {
    let cols = design.ncols();
    let svd = design.svd(true, true);
    let s_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let eps = (s_max * 1e-10).max(1e-300);
    let rank = svd.singular_values.iter().filter(|s| **s > eps).count();
    let sol = svd
        .solve(&targets, eps)
        .expect("SVD solve cannot fail when factors are computed");
    (sol.iter().cloned().collect(), rank < cols)
}

/// Fits a second-order polynomial by least squares.
///
/// Needs at least `quadratic_basis_size(dim)` samples; a singular design is
/// resolved by the minimum-norm solution and flagged.
pub fn fit_quadratic<X: AsRef<[f64]>>(xs: &[X], ys: &[f64]) -> Result<QuadraticModel> {
    let xs: Vec<&[f64]> = xs.iter().map(|x| x.as_ref()).collect();
    let dim = check_samples("quadratic model", &xs, ys, quadratic_basis_size)?;
    let basis = quadratic_basis_size(dim);
    let std = Standardizer::fit(&xs, dim);

    let mut design = DMatrix::zeros(xs.len(), basis);
    let mut z = vec![0.0; dim];
    for (row, x) in xs.iter().enumerate() {
        std.apply(x, &mut z);
        design[(row, 0)] = 1.0;
        for i in 0..dim {
            design[(row, 1 + i)] = z[i];
        }
        let mut k = 0;
        for i in 0..dim {
            for j in i..dim {
                design[(row, 1 + dim + k)] = z[i] * z[j];
                k += 1;
            }
        }
    }
    let targets = DVector::from_column_slice(ys);
    let (beta, rank_deficient) = solve_least_squares(design, targets);

    // Undo standardization: with z = D (x - mu), D = diag(1/scale), the
    // z-space polynomial c0 + c'z + z'Qz expands to a polynomial in x with
    // A = DQD, linear Dc - 2A mu and intercept c0 - c'D mu + mu'A mu.
    let c0 = beta[0];
    let c = &beta[1..1 + dim];
    let mut q_z = vec![vec![0.0; dim]; dim];
    {
        let mut k = 0;
        for i in 0..dim {
            for j in i..dim {
                let v = beta[1 + dim + k];
                if i == j {
                    q_z[i][i] = v;
                } else {
                    q_z[i][j] = v / 2.0;
                    q_z[j][i] = v / 2.0;
                }
                k += 1;
            }
        }
    }
    let mut a = vec![vec![0.0; dim]; dim];
    for i in 0..dim {
        for j in 0..dim {
            a[i][j] = q_z[i][j] / (std.scale[i] * std.scale[j]);
        }
    }
    let mut linear = vec![0.0; dim];
    for i in 0..dim {
        let mut am = 0.0;
        for j in 0..dim {
            am += a[i][j] * std.mean[j];
        }
        linear[i] = c[i] / std.scale[i] - 2.0 * am;
    }
    let mut intercept = c0;
    for i in 0..dim {
        intercept -= c[i] * std.mean[i] / std.scale[i];
        for j in 0..dim {
            intercept += std.mean[i] * a[i][j] * std.mean[j];
        }
    }
    let mut quadratic = Vec::with_capacity(basis - 1 - dim);
    for i in 0..dim {
        for j in i..dim {
            quadratic.push(if i == j { a[i][i] } else { 2.0 * a[i][j] });
        }
    }

    let mut model = QuadraticModel {
        dim,
        intercept,
        linear,
        quadratic,
        mse: 0.0,
        rank_deficient,
    };
    model.mse = mean_squared_error(&xs, ys, |x| model.predict(x));
    Ok(model)
}

/// Fits a first-order polynomial by least squares.
pub fn fit_linear<X: AsRef<[f64]>>(xs: &[X], ys: &[f64]) -> Result<LinearModel> {
    let xs: Vec<&[f64]> = xs.iter().map(|x| x.as_ref()).collect();
    let dim = check_samples("linear model", &xs, ys, linear_basis_size)?;
    let std = Standardizer::fit(&xs, dim);

    let mut design = DMatrix::zeros(xs.len(), dim + 1);
    let mut z = vec![0.0; dim];
    for (row, x) in xs.iter().enumerate() {
        std.apply(x, &mut z);
        design[(row, 0)] = 1.0;
        for i in 0..dim {
            design[(row, 1 + i)] = z[i];
        }
    }
    let targets = DVector::from_column_slice(ys);
    let (beta, rank_deficient) = solve_least_squares(design, targets);

    let mut linear = vec![0.0; dim];
    let mut intercept = beta[0];
    for i in 0..dim {
        linear[i] = beta[1 + i] / std.scale[i];
        intercept -= beta[1 + i] * std.mean[i] / std.scale[i];
    }
    let mut model = LinearModel {
        dim,
        intercept,
        linear,
        mse: 0.0,
        rank_deficient,
    };
    model.mse = mean_squared_error(&xs, ys, |x| model.predict(x));
    Ok(model)
}

/// Fits one quadratic model per lower-level coordinate.
pub fn fit_psi<X: AsRef<[f64]>, Y: AsRef<[f64]>>(x_us: &[X], x_ls: &[Y]) -> Result<PsiModel> {
    if x_us.len() != x_ls.len() {
        return Err(Error::DimensionMismatch {
            what: "reaction-mapping samples",
            expected: x_us.len(),
            got: x_ls.len(),
        });
    }
    if x_ls.is_empty() {
        return Err(Error::InsufficientData {
            model: "reaction mapping",
            dim: 0,
            needed: 1,
            got: 0,
        });
    }
    let m = x_ls[0].as_ref().len();
    let mut components = Vec::with_capacity(m);
    let mut total = 0.0;
    for t in 0..m {
        let ys: Vec<f64> = x_ls.iter().map(|y| y.as_ref()[t]).collect();
        let model = fit_quadratic(x_us, &ys)?;
        total += model.mse;
        components.push(model);
    }
    Ok(PsiModel {
        components,
        mse: total / m as f64,
    })
}

/// Fits a quadratic model of the lower-level optimal value.
pub fn fit_phi<X: AsRef<[f64]>>(x_us: &[X], f_stars: &[f64]) -> Result<PhiModel> {
    Ok(PhiModel {
        model: fit_quadratic(x_us, f_stars)?,
    })
}

fn check_samples(
    model: &'static str,
    xs: &[&[f64]],
    ys: &[f64],
    basis: fn(usize) -> usize,
) -> Result<usize> {
    let dim = xs.first().map(|x| x.len()).unwrap_or(0);
    if dim == 0 {
        return Err(Error::InsufficientData {
            model,
            dim: 0,
            needed: 1,
            got: 0,
        });
    }
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            what: "regression targets",
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.iter().any(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            what: "regression inputs",
            expected: dim,
            got: xs.iter().map(|x| x.len()).find(|l| *l != dim).unwrap(),
        });
    }
    let needed = basis(dim);
    if xs.len() < needed {
        return Err(Error::InsufficientData {
            model,
            dim,
            needed,
            got: xs.len(),
        });
    }
    Ok(dim)
}

fn mean_squared_error(xs: &[&[f64]], ys: &[f64], predict: impl Fn(&[f64]) -> f64) -> f64 {
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = predict(x) - y;
            r * r
        })
        .sum();
    sse / xs.len() as f64
}
