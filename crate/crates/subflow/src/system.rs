//! Controlled vector fields `F : R^n -> R^{n x k}` and end-point costs.
//!
//! Fields are stored as exact polynomial tables, so Jacobians and Hessians
//! come from exact term-wise differentiation rather than symbolic or numeric
//! machinery. Built-in benchmark systems (Heisenberg, Grushin, constant
//! fields) are expressed through the same representation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One monomial `coef * x_1^{e_1} ... x_n^{e_n}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<u32>,
}

impl Monomial {
    fn eval(&self, x: &[f64]) -> f64 {
        let mut v = self.coef;
        for (xi, &e) in x.iter().zip(self.powers.iter()) {
            if e > 0 {
                v *= xi.powi(e as i32);
            }
        }
        v
    }

    /// Exact partial derivative with respect to variable `p`.
    fn derivative(&self, p: usize) -> Option<Monomial> {
        let e = self.powers[p];
        if e == 0 {
            return None;
        }
        let mut powers = self.powers.clone();
        powers[p] = e - 1;
        Some(Monomial {
            coef: self.coef * e as f64,
            powers,
        })
    }

    fn degree(&self) -> u32 {
        self.powers.iter().sum()
    }
}

/// Sparse polynomial in `n` variables.
#[derive(Debug, Clone, Default)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn constant_term(c: f64, n: usize) -> Self {
        if c == 0.0 {
            return Polynomial { terms: vec![] };
        }
        Polynomial {
            terms: vec![Monomial {
                coef: c,
                powers: vec![0; n],
            }],
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|m| m.eval(x)).sum()
    }

    pub fn derivative(&self, p: usize) -> Polynomial {
        Polynomial {
            terms: self.terms.iter().filter_map(|m| m.derivative(p)).collect(),
        }
    }

    fn is_constant(&self) -> bool {
        self.terms.iter().all(|m| m.degree() == 0)
    }

    fn is_zero(&self) -> bool {
        self.terms.is_empty() || self.terms.iter().all(|m| m.coef == 0.0)
    }
}

/// Optional global bounds carried by a system: `l` is the Lipschitz constant
/// of the fields, `c` the sub-linear growth constant in
/// `|F^i(x)| <= c (|x| + 1)`.
#[derive(Debug, Clone, Copy)]
pub struct LipschitzHint {
    pub l: f64,
    pub c: f64,
}

/// A control-affine system `dx/ds = F(x) u` with polynomial fields.
///
/// Columns `F^1 .. F^k` of `F` are the controlled vector fields. The struct
/// is immutable after construction and safe to share across threads; all
/// evaluations are pure.
#[derive(Debug, Clone)]
pub struct ControlSystem {
    n: usize,
    k: usize,
    /// `fields[i][c]`: component `c` of field `F^{i+1}`.
    fields: Vec<Vec<Polynomial>>,
    /// `jacobians[i][c][p]`: d F^i_c / d x_p.
    jacobians: Vec<Vec<Vec<Polynomial>>>,
    /// `hessians[i][c][p][q]`: d^2 F^i_c / (d x_p d x_q).
    hessians: Vec<Vec<Vec<Vec<Polynomial>>>>,
    /// Cached Jacobian matrices when every entry is constant.
    constant_jacobians: Option<Vec<DMatrix<f64>>>,
    zero_hessian: bool,
    lipschitz_hint: Option<LipschitzHint>,
}

impl ControlSystem {
    /// Build a system from polynomial field tables (`fields[i][c]` is the
    /// `c`-th component of `F^{i+1}`). Derivative tables are differentiated
    /// exactly at construction.
    pub fn from_polynomials(n: usize, k: usize, fields: Vec<Vec<Polynomial>>) -> Result<Self> {
        if fields.len() != k {
            return Err(Error::MalformedPolynomial(format!(
                "expected {k} fields, got {}",
                fields.len()
            )));
        }
        for (i, field) in fields.iter().enumerate() {
            if field.len() != n {
                return Err(Error::MalformedPolynomial(format!(
                    "field {} has {} components, state dimension is {n}",
                    i + 1,
                    field.len()
                )));
            }
            for poly in field {
                for mono in &poly.terms {
                    if mono.powers.len() != n {
                        return Err(Error::MalformedPolynomial(format!(
                            "monomial in field {} has {} exponents, state dimension is {n}",
                            i + 1,
                            mono.powers.len()
                        )));
                    }
                    if !mono.coef.is_finite() {
                        return Err(Error::MalformedPolynomial(format!(
                            "non-finite coefficient in field {}",
                            i + 1
                        )));
                    }
                }
            }
        }

        let jacobians: Vec<Vec<Vec<Polynomial>>> = fields
            .iter()
            .map(|field| {
                field
                    .iter()
                    .map(|comp| (0..n).map(|p| comp.derivative(p)).collect())
                    .collect()
            })
            .collect();
        let hessians: Vec<Vec<Vec<Vec<Polynomial>>>> = jacobians
            .iter()
            .map(|field| {
                field
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|dp| (0..n).map(|q| dp.derivative(q)).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();

        let jac_constant = jacobians
            .iter()
            .flatten()
            .flatten()
            .all(Polynomial::is_constant);
        let zero_hessian = hessians
            .iter()
            .flatten()
            .flatten()
            .flatten()
            .all(Polynomial::is_zero);

        let constant_jacobians = if jac_constant {
            let origin = DVector::zeros(n);
            Some(
                (0..k)
                    .map(|i| {
                        DMatrix::from_fn(n, n, |c, p| jacobians[i][c][p].eval(origin.as_slice()))
                    })
                    .collect(),
            )
        } else {
            None
        };

        // Affine fields admit exact global constants; for genuinely nonlinear
        // polynomials the paper-style global bounds do not exist and the hint
        // stays empty.
        let lipschitz_hint = constant_jacobians.as_ref().map(|jacs: &Vec<DMatrix<f64>>| {
            let origin = DVector::zeros(n);
            let mut l: f64 = 0.0;
            let mut c: f64 = 0.0;
            for (i, jac) in jacs.iter().enumerate() {
                let sigma = spectral_norm(jac);
                l = l.max(sigma);
                let f0 = DVector::from_fn(n, |cidx, _| fields[i][cidx].eval(origin.as_slice()));
                c = c.max(sigma.max(f0.norm()));
            }
            LipschitzHint { l, c }
        });

        Ok(ControlSystem {
            n,
            k,
            fields,
            jacobians,
            hessians,
            constant_jacobians,
            zero_hessian,
            lipschitz_hint,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.k
    }

    pub fn lipschitz_hint(&self) -> Option<LipschitzHint> {
        self.lipschitz_hint
    }

    pub fn set_lipschitz_hint(&mut self, hint: Option<LipschitzHint>) {
        self.lipschitz_hint = hint;
    }

    /// `F(x)` as an `n x k` matrix (columns are the fields).
    pub fn fields_eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.k, |c, i| self.fields[i][c].eval(x.as_slice()))
    }

    /// Single field `F^{i+1}(x)` (0-based `i`).
    pub fn field_column(&self, x: &DVector<f64>, i: usize) -> DVector<f64> {
        DVector::from_fn(self.n, |c, _| self.fields[i][c].eval(x.as_slice()))
    }

    /// Jacobian `dF^{i+1}/dx` at `x`; entry `(c, p)` is `dF^i_c/dx_p`.
    pub fn jacobian_eval(&self, x: &DVector<f64>, i: usize) -> DMatrix<f64> {
        if let Some(jacs) = &self.constant_jacobians {
            return jacs[i].clone();
        }
        DMatrix::from_fn(self.n, self.n, |c, p| self.jacobians[i][c][p].eval(x.as_slice()))
    }

    /// Hessian tensor of field `i`: one symmetric `n x n` matrix per component.
    pub fn hessian_eval(&self, x: &DVector<f64>, i: usize) -> Vec<DMatrix<f64>> {
        (0..self.n)
            .map(|c| DMatrix::from_fn(self.n, self.n, |p, q| self.hessians[i][c][p][q].eval(x.as_slice())))
            .collect()
    }

    pub fn has_zero_hessian(&self) -> bool {
        self.zero_hessian
    }

    pub fn has_constant_jacobian(&self) -> bool {
        self.constant_jacobians.is_some()
    }

    /// `A(x, w) = sum_i w^i dF^i(x)/dx`, the state matrix of the variational
    /// and adjoint equations evaluated with control value `w`.
    pub fn a_matrix(&self, x: &DVector<f64>, w: &DVector<f64>) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for i in 0..self.k {
            let wi = w[i];
            if wi == 0.0 {
                continue;
            }
            if let Some(jacs) = &self.constant_jacobians {
                a += wi * &jacs[i];
            } else {
                for c in 0..self.n {
                    for p in 0..self.n {
                        a[(c, p)] += wi * self.jacobians[i][c][p].eval(x.as_slice());
                    }
                }
            }
        }
        a
    }

    /// Bilinear Hessian contraction `sum_i w^i d2F^i(x)(a, b)` as a vector.
    pub fn hessian_bilinear(
        &self,
        x: &DVector<f64>,
        w: &DVector<f64>,
        a: &DVector<f64>,
        b: &DVector<f64>,
    ) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        if self.zero_hessian {
            return out;
        }
        for i in 0..self.k {
            let wi = w[i];
            if wi == 0.0 {
                continue;
            }
            for c in 0..self.n {
                let mut acc = 0.0;
                for p in 0..self.n {
                    for q in 0..self.n {
                        let h = self.hessians[i][c][p][q].eval(x.as_slice());
                        if h != 0.0 {
                            acc += h * a[p] * b[q];
                        }
                    }
                }
                out[c] += wi * acc;
            }
        }
        out
    }

    /// Output-transposed Hessian contraction: component `q` of
    /// `sum_i w^i sum_{c,p} z_c d2F^i_c/dx_p dx_q (x) a_p`.
    ///
    /// This is the adjoint-side pairing needed when differentiating
    /// `A(x, w)^T z` with respect to the base point along direction `a`.
    pub fn hessian_transpose_contract(
        &self,
        x: &DVector<f64>,
        w: &DVector<f64>,
        a: &DVector<f64>,
        z: &DVector<f64>,
    ) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        if self.zero_hessian {
            return out;
        }
        for i in 0..self.k {
            let wi = w[i];
            if wi == 0.0 {
                continue;
            }
            for c in 0..self.n {
                let zc = z[c];
                if zc == 0.0 {
                    continue;
                }
                for p in 0..self.n {
                    for q in 0..self.n {
                        let h = self.hessians[i][c][p][q].eval(x.as_slice());
                        if h != 0.0 {
                            out[q] += wi * zc * h * a[p];
                        }
                    }
                }
            }
        }
        out
    }

    /// `F(x) w` without materializing the full field matrix.
    pub fn apply_fields(&self, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        self.apply_fields_into(x.as_slice(), w.as_slice(), &mut out);
        out
    }

    /// Allocation-free variant of [`Self::apply_fields`] for integrator
    /// inner loops.
    pub fn apply_fields_into(&self, x: &[f64], w: &[f64], out: &mut DVector<f64>) {
        out.fill(0.0);
        for i in 0..self.k {
            let wi = w[i];
            if wi == 0.0 {
                continue;
            }
            for c in 0..self.n {
                out[c] += wi * self.fields[i][c].eval(x);
            }
        }
    }

    /// Allocation-free `A(x, w)` assembly.
    pub fn a_matrix_into(&self, x: &[f64], w: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
        if let Some(jacs) = &self.constant_jacobians {
            for i in 0..self.k {
                let wi = w[i];
                if wi == 0.0 {
                    continue;
                }
                for c in 0..self.n {
                    for p in 0..self.n {
                        out[(c, p)] += wi * jacs[i][(c, p)];
                    }
                }
            }
        } else {
            for i in 0..self.k {
                let wi = w[i];
                if wi == 0.0 {
                    continue;
                }
                for c in 0..self.n {
                    for p in 0..self.n {
                        out[(c, p)] += wi * self.jacobians[i][c][p].eval(x);
                    }
                }
            }
        }
    }

    /// Allocation-free `F(x)^T z`.
    pub fn fields_transpose_apply_into(&self, x: &[f64], z: &DVector<f64>, out: &mut DVector<f64>) {
        for i in 0..self.k {
            let mut acc = 0.0;
            for c in 0..self.n {
                acc += self.fields[i][c].eval(x) * z[c];
            }
            out[i] = acc;
        }
    }

    /// `out += F(x)^T z`, the accumulating variant used by reverse sweeps.
    pub fn fields_transpose_accumulate(&self, x: &[f64], z: &DVector<f64>, out: &mut DVector<f64>) {
        for i in 0..self.k {
            let mut acc = 0.0;
            for c in 0..self.n {
                acc += self.fields[i][c].eval(x) * z[c];
            }
            out[i] += acc;
        }
    }

    /// `F(x)^T z`, the pairing of a covector with each field.
    pub fn fields_transpose_apply(&self, x: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.k, |i, _| {
            let mut acc = 0.0;
            for c in 0..self.n {
                acc += self.fields[i][c].eval(x.as_slice()) * z[c];
            }
            acc
        })
    }

    /// Per-field Jacobian-transpose pairing `(lambda . dF^i(x)/dx . y)_i`,
    /// one scalar per control component.
    pub fn jacobian_pairing(
        &self,
        x: &DVector<f64>,
        lambda: &DVector<f64>,
        y: &DVector<f64>,
    ) -> DVector<f64> {
        DVector::from_fn(self.k, |i, _| {
            let jac = self.jacobian_eval(x, i);
            lambda.dot(&(&jac * y))
        })
    }
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Non-negative end-point cost `a : R^n -> R_+` with exact derivatives.
///
/// Only the quadratic family `a(x) = 1/2 |x - x1|^2` is built in; its zero
/// set is the single target point, which realizes the constrained limit.
#[derive(Debug, Clone)]
pub enum EndpointCost {
    Quadratic { target: DVector<f64> },
}

impl EndpointCost {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            EndpointCost::Quadratic { target } => 0.5 * (x - target).norm_squared(),
        }
    }

    /// Gradient as a row covector (stored as a plain vector).
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            EndpointCost::Quadratic { target } => x - target,
        }
    }

    pub fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            EndpointCost::Quadratic { target } => DMatrix::identity(target.len(), target.len()),
        }
    }

    /// A point where the cost vanishes, when one is known exactly.
    pub fn zero_set_hint(&self) -> Option<DVector<f64>> {
        match self {
            EndpointCost::Quadratic { target } => Some(target.clone()),
        }
    }
}

/// Quadratic end-point cost `1/2 |x - x1|^2` centered at `x1`.
pub fn make_quadratic_cost(x1: DVector<f64>) -> EndpointCost {
    EndpointCost::Quadratic { target: x1 }
}

/// Heisenberg group generators: `F^1 = (1, 0, -y/2)`, `F^2 = (0, 1, x/2)`.
pub fn make_heisenberg() -> ControlSystem {
    let mono = |coef: f64, powers: [u32; 3]| Monomial {
        coef,
        powers: powers.to_vec(),
    };
    let f1 = vec![
        Polynomial {
            terms: vec![mono(1.0, [0, 0, 0])],
        },
        Polynomial::default(),
        Polynomial {
            terms: vec![mono(-0.5, [0, 1, 0])],
        },
    ];
    let f2 = vec![
        Polynomial::default(),
        Polynomial {
            terms: vec![mono(1.0, [0, 0, 0])],
        },
        Polynomial {
            terms: vec![mono(0.5, [1, 0, 0])],
        },
    ];
    ControlSystem::from_polynomials(3, 2, vec![f1, f2]).expect("heisenberg tables are consistent")
}

/// Grushin plane: `F^1 = (1, 0)`, `F^2 = (0, x)`.
pub fn make_grushin() -> ControlSystem {
    let f1 = vec![Polynomial::constant_term(1.0, 2), Polynomial::default()];
    let f2 = vec![
        Polynomial::default(),
        Polynomial {
            terms: vec![Monomial {
                coef: 1.0,
                powers: vec![1, 0],
            }],
        },
    ];
    ControlSystem::from_polynomials(2, 2, vec![f1, f2]).expect("grushin tables are consistent")
}

/// Constant-field system `F(x) = B`; Jacobians and Hessians vanish.
pub fn make_linear(b: &DMatrix<f64>) -> ControlSystem {
    let n = b.nrows();
    let k = b.ncols();
    let fields = (0..k)
        .map(|i| {
            (0..n)
                .map(|c| Polynomial::constant_term(b[(c, i)], n))
                .collect()
        })
        .collect();
    ControlSystem::from_polynomials(n, k, fields).expect("constant tables are consistent")
}

/// JSON description of a system: either a named built-in or polynomial
/// coefficient tables `fields[i][c] = [ {coef, powers}, .. ]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemSpec {
    Builtin {
        builtin: String,
    },
    Polynomial {
        n: usize,
        k: usize,
        fields: Vec<Vec<Vec<Monomial>>>,
    },
}

/// Resolve a [`SystemSpec`] into a [`ControlSystem`].
pub fn load_system(spec: &SystemSpec) -> Result<ControlSystem> {
    match spec {
        SystemSpec::Builtin { builtin } => match builtin.as_str() {
            "heisenberg" => Ok(make_heisenberg()),
            "grushin" => Ok(make_grushin()),
            other => Err(Error::UnknownSystem(other.to_string())),
        },
        SystemSpec::Polynomial { n, k, fields } => {
            let tables: Vec<Vec<Polynomial>> = fields
                .iter()
                .map(|field| {
                    field
                        .iter()
                        .map(|terms| Polynomial {
                            terms: terms.clone(),
                        })
                        .collect()
                })
                .collect();
            ControlSystem::from_polynomials(*n, *k, tables)
        }
    }
}
