//! Observable dictionaries and EDMD identification of the lifted model
//! `s⁺ = As + Bu`, with `C = [I 0]` and `D = [I; 0]`.

use std::fmt;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError, Table};

/// Gram matrices worse conditioned than this get a ridge term.
pub const RIDGE_CONDITION_LIMIT: f64 = 1e12;
pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum KoopmanError {
    #[error("cannot parse observable {0:?}")]
    BadObservable(String),
    #[error("observable {index} must be the coordinate x{expected} (identity block first)")]
    IdentityBlock { index: usize, expected: usize },
    #[error("observable {0:?} refers to a state beyond the dimension")]
    StateIndex(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("least-squares system is singular even after regularization")]
    Singular,
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Monomial `∏ x_k^{e_k}`; the all-zero exponent vector is the constant.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Monomial {
    pub exponents: Vec<u32>,
}

impl Monomial {
    pub fn parse(name: &str, n_x: usize) -> Result<Self, KoopmanError> {
        let bad = || KoopmanError::BadObservable(name.to_string());
        let mut exponents = vec![0u32; n_x];
        let trimmed = name.trim();
        if trimmed == "1" {
            return Ok(Self { exponents });
        }
        for factor in trimmed.split('*') {
            let factor = factor.trim();
            let (var, pow) = match factor.split_once('^') {
                Some((v, p)) => (v.trim(), p.trim().parse::<u32>().map_err(|_| bad())?),
                None => (factor, 1),
            };
            let idx: usize = var.strip_prefix('x').ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if idx == 0 || pow == 0 {
                return Err(bad());
            }
            if idx > n_x {
                return Err(KoopmanError::StateIndex(name.to_string()));
            }
            exponents[idx - 1] += pow;
        }
        Ok(Self { exponents })
    }

    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.exponents
            .iter()
            .zip(x.iter())
            .fold(1.0, |acc, (&e, &v)| acc * v.powi(e as i32))
    }

    /// `Some(k)` when the monomial is the bare coordinate `x_{k+1}`.
    fn coordinate(&self) -> Option<usize> {
        if self.degree() != 1 {
            return None;
        }
        self.exponents.iter().position(|&e| e == 1)
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .exponents
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(k, &e)| if e == 1 { format!("x{}", k + 1) } else { format!("x{}^{}", k + 1, e) })
            .collect();
        if parts.is_empty() {
            write!(f, "1")
        } else {
            write!(f, "{}", parts.join("*"))
        }
    }
}

/// Ordered observable list `Ψ = Ψ' − Ψ'(0)` whose first `n_x` entries are the
/// state coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DictionarySpec", into = "DictionarySpec")]
pub struct Dictionary {
    n_x: usize,
    terms: Vec<Monomial>,
    offset: DVector<f64>,
}

/// Serialized form: the dictionary by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionarySpec {
    pub n_x: usize,
    pub observables: Vec<String>,
}

impl TryFrom<DictionarySpec> for Dictionary {
    type Error = KoopmanError;
    fn try_from(spec: DictionarySpec) -> Result<Self, Self::Error> {
        Dictionary::from_names(spec.n_x, &spec.observables)
    }
}

impl From<Dictionary> for DictionarySpec {
    fn from(d: Dictionary) -> Self {
        Self { n_x: d.n_x, observables: d.names() }
    }
}

impl Dictionary {
    pub fn from_names<S: AsRef<str>>(n_x: usize, names: &[S]) -> Result<Self, KoopmanError> {
        let terms = names
            .iter()
            .map(|s| Monomial::parse(s.as_ref(), n_x))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_terms(n_x, terms)
    }

    pub fn from_terms(n_x: usize, terms: Vec<Monomial>) -> Result<Self, KoopmanError> {
        if terms.len() < n_x {
            return Err(KoopmanError::Dimension { what: "dictionary", expected: n_x, got: terms.len() });
        }
        for (i, t) in terms.iter().take(n_x).enumerate() {
            if t.coordinate() != Some(i) {
                return Err(KoopmanError::IdentityBlock { index: i, expected: i + 1 });
            }
        }
        let zero = DVector::zeros(n_x);
        let offset = DVector::from_iterator(terms.len(), terms.iter().map(|t| t.eval(&zero)));
        Ok(Self { n_x, terms, offset })
    }

    /// Coordinates, then the constant, then every monomial of degree 2..=`degree`
    /// (graded, lexicographic within a degree), then `extra` names not already present.
    pub fn monomials<S: AsRef<str>>(n_x: usize, degree: u32, extra: &[S]) -> Result<Self, KoopmanError> {
        let mut terms: Vec<Monomial> = (0..n_x)
            .map(|k| {
                let mut e = vec![0; n_x];
                e[k] = 1;
                Monomial { exponents: e }
            })
            .collect();
        terms.push(Monomial { exponents: vec![0; n_x] });
        for d in 2..=degree {
            let mut level = Vec::new();
            exponents_of_degree(n_x, d, &mut vec![0; n_x], 0, &mut level);
            level.sort_by(|a, b| b.cmp(a));
            terms.extend(level.into_iter().map(|e| Monomial { exponents: e }));
        }
        for name in extra {
            let m = Monomial::parse(name.as_ref(), n_x)?;
            if !terms.contains(&m) {
                terms.push(m);
            }
        }
        Self::from_terms(n_x, terms)
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    /// Lifted dimension `n`.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.terms.iter().map(Monomial::to_string).collect()
    }

    pub fn terms(&self) -> &[Monomial] {
        &self.terms
    }

    /// Slots that are identically zero after the shift (constant observables).
    pub fn zero_slots(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.terms[i].degree() == 0).collect()
    }

    pub fn lift(&self, x: &DVector<f64>) -> Result<DVector<f64>, KoopmanError> {
        if x.len() != self.n_x {
            return Err(KoopmanError::Dimension { what: "state", expected: self.n_x, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(KoopmanError::NonFinite("state"));
        }
        Ok(DVector::from_iterator(
            self.len(),
            self.terms.iter().zip(self.offset.iter()).map(|(t, o)| t.eval(x) - o),
        ))
    }
}

fn exponents_of_degree(n: usize, left: u32, cur: &mut Vec<u32>, k: usize, out: &mut Vec<Vec<u32>>) {
    if k + 1 == n {
        cur[k] = left;
        out.push(cur.clone());
        cur[k] = 0;
        return;
    }
    for e in (0..=left).rev() {
        cur[k] = e;
        exponents_of_degree(n, left - e, cur, k + 1, out);
    }
    cur[k] = 0;
}

/// Transition samples `(x_i, u_i, x_i⁺)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub x_next: Vec<DVector<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn push(&mut self, x: DVector<f64>, u: DVector<f64>, x_next: DVector<f64>) {
        self.x.push(x);
        self.u.push(u);
        self.x_next.push(x_next);
    }

    pub fn n_x(&self) -> usize {
        self.x.first().map_or(0, |v| v.len())
    }

    pub fn n_u(&self) -> usize {
        self.u.first().map_or(0, |v| v.len())
    }

    pub fn to_table(&self) -> Table {
        let (nx, nu) = (self.n_x(), self.n_u());
        let mut header: Vec<String> = (1..=nx).map(|i| format!("x{i}")).collect();
        header.extend((1..=nu).map(|i| format!("u{i}")));
        header.extend((1..=nx).map(|i| format!("x{i}_next")));
        let mut t = Table::new(header);
        for i in 0..self.len() {
            let mut row: Vec<f64> = self.x[i].iter().copied().collect();
            row.extend(self.u[i].iter());
            row.extend(self.x_next[i].iter());
            t.push(row);
        }
        t
    }

    pub fn from_table(t: &Table, n_x: usize, n_u: usize) -> Result<Self, KoopmanError> {
        let width = 2 * n_x + n_u;
        if t.header.len() != width {
            return Err(KoopmanError::Dimension { what: "dataset columns", expected: width, got: t.header.len() });
        }
        let mut d = Dataset::default();
        for row in &t.rows {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(KoopmanError::NonFinite("dataset"));
            }
            d.push(
                DVector::from_column_slice(&row[..n_x]),
                DVector::from_column_slice(&row[n_x..n_x + n_u]),
                DVector::from_column_slice(&row[n_x + n_u..]),
            );
        }
        Ok(d)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), KoopmanError> {
        Ok(self.to_table().write_csv(path)?)
    }

    pub fn read_csv(path: &Path, n_x: usize, n_u: usize) -> Result<Self, KoopmanError> {
        Self::from_table(&Table::read_csv(path)?, n_x, n_u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub samples: usize,
    /// Root-mean-square residual per lifted coordinate.
    pub rms_residual: Vec<f64>,
    pub max_abs_residual: Vec<f64>,
    /// `‖Gθ − ZᵀY‖ / ‖ZᵀY‖` for the system actually solved.
    pub normal_eq_residual: f64,
    /// `None` for models assembled from given matrices.
    pub gram_condition: Option<f64>,
    pub ridge_applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftedModel {
    #[serde(with = "io::rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "io::rows")]
    pub b: DMatrix<f64>,
    #[serde(with = "io::rows")]
    pub c: DMatrix<f64>,
    #[serde(with = "io::rows")]
    pub d: DMatrix<f64>,
    pub dictionary: Dictionary,
    pub fit: FitStats,
    /// Observable slots that are identically zero.
    pub zero_slots: Vec<usize>,
}

/// `C = [I 0]`.
pub fn selection_c(n_x: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_x, n, |i, j| if i == j { 1.0 } else { 0.0 })
}

/// `D = [I; 0]`.
pub fn injection_d(n_x: usize, n: usize) -> DMatrix<f64> {
    selection_c(n_x, n).transpose()
}

impl LiftedModel {
    /// Assemble a model from given matrices (no fitting).
    pub fn from_matrices(dictionary: Dictionary, a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, KoopmanError> {
        let n = dictionary.len();
        if a.shape() != (n, n) {
            return Err(KoopmanError::Dimension { what: "A", expected: n, got: a.nrows() });
        }
        if b.nrows() != n {
            return Err(KoopmanError::Dimension { what: "B", expected: n, got: b.nrows() });
        }
        let n_x = dictionary.n_x();
        Ok(Self {
            c: selection_c(n_x, n),
            d: injection_d(n_x, n),
            zero_slots: dictionary.zero_slots(),
            fit: FitStats {
                samples: 0,
                rms_residual: vec![0.0; n],
                max_abs_residual: vec![0.0; n],
                normal_eq_residual: 0.0,
                gram_condition: None,
                ridge_applied: false,
            },
            a,
            b,
            dictionary,
        })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_x(&self) -> usize {
        self.dictionary.n_x()
    }

    pub fn to_json(&self) -> Result<String, KoopmanError> {
        Ok(serde_json::to_string_pretty(self).map_err(IoError::from)?)
    }

    pub fn from_json(s: &str) -> Result<Self, KoopmanError> {
        Ok(serde_json::from_str(s).map_err(IoError::from)?)
    }
}

pub fn predict_nominal(model: &LiftedModel, s: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, KoopmanError> {
    if s.len() != model.n() {
        return Err(KoopmanError::Dimension { what: "lifted state", expected: model.n(), got: s.len() });
    }
    if u.len() != model.n_u() {
        return Err(KoopmanError::Dimension { what: "input", expected: model.n_u(), got: u.len() });
    }
    Ok(&model.a * s + &model.b * u)
}

/// Sum of squared one-step lifted prediction errors over the dataset.
pub fn edmd_objective(
    dict: &Dictionary,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    data: &Dataset,
) -> Result<f64, KoopmanError> {
    let mut total = 0.0;
    for i in 0..data.len() {
        let r = dict.lift(&data.x_next[i])? - a * dict.lift(&data.x[i])? - b * &data.u[i];
        total += r.norm_squared();
    }
    Ok(total)
}

/// Least-squares fit of `Ψ(x⁺) ≈ AΨ(x) + Bu`.
pub fn fit_edmd(dict: &Dictionary, data: &Dataset) -> Result<LiftedModel, KoopmanError> {
    let n = dict.len();
    let m = data.len();
    let n_u = data.n_u();
    if m < n + n_u {
        return Err(KoopmanError::TooFewSamples { needed: n + n_u, got: m });
    }
    if data.n_x() != dict.n_x() {
        return Err(KoopmanError::Dimension { what: "dataset state", expected: dict.n_x(), got: data.n_x() });
    }
    let p = n + n_u;
    let mut z = DMatrix::zeros(m, p);
    let mut y = DMatrix::zeros(m, n);
    for i in 0..m {
        if data.u[i].len() != n_u {
            return Err(KoopmanError::Dimension { what: "input", expected: n_u, got: data.u[i].len() });
        }
        if data.u[i].iter().any(|v| !v.is_finite()) {
            return Err(KoopmanError::NonFinite("input"));
        }
        let s = dict.lift(&data.x[i])?;
        let s_next = dict.lift(&data.x_next[i])?;
        for j in 0..n {
            z[(i, j)] = s[j];
            y[(i, j)] = s_next[j];
        }
        for j in 0..n_u {
            z[(i, n + j)] = data.u[i][j];
        }
    }
    let mut gram = z.transpose() * &z;
    let zty = z.transpose() * &y;
    let eig = gram.clone().symmetric_eigenvalues();
    let (emin, emax) = (eig.min(), eig.max());
    let cond = if emin > 0.0 { emax / emin } else { f64::INFINITY };
    let ridge_applied = cond > RIDGE_CONDITION_LIMIT;
    if ridge_applied {
        if dict.zero_slots().is_empty() {
            warn!("EDMD Gram matrix condition {cond:e} exceeds limit; adding ridge {RIDGE:e}");
        }
        for j in 0..p {
            gram[(j, j)] += RIDGE;
        }
    }
    let theta = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&zty))
        .ok_or(KoopmanError::Singular)?;
    let normal_eq_residual = (&gram * &theta - &zty).norm() / zty.norm().max(f64::MIN_POSITIVE);
    let ab = theta.transpose();
    let a = ab.columns(0, n).into_owned();
    let b = ab.columns(n, n_u).into_owned();

    let resid = &y - &z * &theta;
    let rms_residual = (0..n)
        .map(|j| (resid.column(j).norm_squared() / m as f64).sqrt())
        .collect();
    let max_abs_residual = (0..n).map(|j| resid.column(j).amax()).collect();

    let mut model = LiftedModel::from_matrices(dict.clone(), a, b)?;
    model.fit = FitStats {
        samples: m,
        rms_residual,
        max_abs_residual,
        normal_eq_residual,
        gram_condition: Some(cond),
        ridge_applied,
    };
    Ok(model)
}
