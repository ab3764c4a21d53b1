//! Linear SDE model definition and the on-disk model-file format.
//!
//! A model is the triple of coefficient functions `(Q, r, S)` of
//!
//! ```text
//! dZ_t = (Q(t) Z_t + r(t)) dt + S(t) dB_t
//! ```
//!
//! with state dimension `d` and noise dimension `p`. Coefficients come from
//! three families: constant matrices, matrix polynomials in `t`, and tables
//! interpolated linearly in `t` (constant beyond the knot range, so evaluation
//! is continuous on `[0, inf)`).
//!
//! Model files are TOML with the schema
//!
//! ```toml
//! dim = 2
//! noise_dim = 1
//!
//! [Q]
//! kind = "constant"              # or "polynomial" / "table"
//! rows = [[0.0, 1.0], [0.0, 0.0]]
//!
//! [r]
//! kind = "constant"
//! rows = [[0.0], [0.0]]
//!
//! [S]
//! kind = "table"
//! knots = [0.0, 1.0]
//! values = [[[0.0], [1.0]], [[0.0], [2.0]]]
//! ```
//!
//! `polynomial` blocks carry `coeffs`, a list of matrices `A_0..A_m` meaning
//! `A(t) = sum A_k t^k`. All matrices are row-major lists of row lists.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BridgeError, Result};

/// A matrix-valued coefficient function of time.
#[derive(Clone, Debug, PartialEq)]
pub enum CoefficientFn {
    Constant { value: DMatrix<f64> },
    /// `A(t) = sum_k coeffs[k] * t^k`.
    Polynomial { coeffs: Vec<DMatrix<f64>> },
    /// Linear interpolation between knot values, constant outside the range.
    Table {
        knots: Vec<f64>,
        values: Vec<DMatrix<f64>>,
    },
}

impl CoefficientFn {
    pub fn constant(value: DMatrix<f64>) -> Self {
        CoefficientFn::Constant { value }
    }

    pub fn polynomial(coeffs: Vec<DMatrix<f64>>) -> Self {
        CoefficientFn::Polynomial { coeffs }
    }

    pub fn table(knots: Vec<f64>, values: Vec<DMatrix<f64>>) -> Self {
        CoefficientFn::Table { knots, values }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            CoefficientFn::Constant { value } => value.shape(),
            CoefficientFn::Polynomial { coeffs } => coeffs
                .first()
                .map(|c| c.shape())
                .unwrap_or((0, 0)),
            CoefficientFn::Table { values, .. } => values
                .first()
                .map(|v| v.shape())
                .unwrap_or((0, 0)),
        }
    }

    /// Evaluates the coefficient at `t >= 0`.
    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        match self {
            CoefficientFn::Constant { value } => value.clone(),
            CoefficientFn::Polynomial { coeffs } => {
                // Horner evaluation on matrix coefficients.
                let (r, c) = self.shape();
                let mut acc = DMatrix::zeros(r, c);
                for a in coeffs.iter().rev() {
                    acc = acc * t + a;
                }
                acc
            }
            CoefficientFn::Table { knots, values } => {
                if t <= knots[0] {
                    return values[0].clone();
                }
                let last = knots.len() - 1;
                if t >= knots[last] {
                    return values[last].clone();
                }
                let idx = match knots.binary_search_by(|k| k.partial_cmp(&t).unwrap()) {
                    Ok(i) => return values[i].clone(),
                    Err(i) => i - 1,
                };
                let w = (t - knots[idx]) / (knots[idx + 1] - knots[idx]);
                &values[idx] * (1.0 - w) + &values[idx + 1] * w
            }
        }
    }

    /// Analytic derivative; `None` for tables (those are differenced).
    pub fn eval_deriv_smooth(&self, t: f64) -> Option<DMatrix<f64>> {
        match self {
            CoefficientFn::Constant { value } => {
                Some(DMatrix::zeros(value.nrows(), value.ncols()))
            }
            CoefficientFn::Polynomial { coeffs } => {
                let (r, c) = self.shape();
                let mut acc = DMatrix::zeros(r, c);
                for (k, a) in coeffs.iter().enumerate().skip(1).rev() {
                    acc = acc * t + a * (k as f64);
                }
                Some(acc)
            }
            CoefficientFn::Table { .. } => None,
        }
    }

    /// Exact matrix-polynomial view for constant and polynomial kinds.
    pub(crate) fn as_poly(&self) -> Option<Vec<DMatrix<f64>>> {
        match self {
            CoefficientFn::Constant { value } => Some(vec![value.clone()]),
            CoefficientFn::Polynomial { coeffs } => Some(coeffs.clone()),
            CoefficientFn::Table { .. } => None,
        }
    }

    /// Knot range of a table coefficient.
    pub fn knot_range(&self) -> Option<(f64, f64)> {
        match self {
            CoefficientFn::Table { knots, .. } => Some((knots[0], knots[knots.len() - 1])),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        let all_zero = |m: &DMatrix<f64>| m.iter().all(|&x| x == 0.0);
        match self {
            CoefficientFn::Constant { value } => all_zero(value),
            CoefficientFn::Polynomial { coeffs } => coeffs.iter().all(all_zero),
            CoefficientFn::Table { values, .. } => values.iter().all(all_zero),
        }
    }

    fn validate(&self, rows: usize, cols: usize, role: &str) -> Result<()> {
        let check_shape = |m: &DMatrix<f64>| -> Result<()> {
            if m.shape() != (rows, cols) {
                return Err(BridgeError::Schema(format!(
                    "{role} must be {rows}x{cols}, found {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(BridgeError::Schema(format!("{role} has non-finite entries")));
            }
            Ok(())
        };
        match self {
            CoefficientFn::Constant { value } => check_shape(value),
            CoefficientFn::Polynomial { coeffs } => {
                if coeffs.is_empty() {
                    return Err(BridgeError::Schema(format!(
                        "{role}: polynomial needs at least one coefficient"
                    )));
                }
                coeffs.iter().try_for_each(check_shape)
            }
            CoefficientFn::Table { knots, values } => {
                if knots.len() < 2 {
                    return Err(BridgeError::Knot(format!(
                        "{role}: table needs at least two knots"
                    )));
                }
                if knots.len() != values.len() {
                    return Err(BridgeError::Schema(format!(
                        "{role}: {} knots but {} values",
                        knots.len(),
                        values.len()
                    )));
                }
                if knots.iter().any(|k| !k.is_finite()) {
                    return Err(BridgeError::Knot(format!("{role}: non-finite knot")));
                }
                for w in knots.windows(2) {
                    if w[1] <= w[0] {
                        return Err(BridgeError::Knot(format!(
                            "{role}: knots must be strictly increasing ({} then {})",
                            w[0], w[1]
                        )));
                    }
                }
                values.iter().try_for_each(check_shape)
            }
        }
    }
}

/// Validated model of the linear SDE `dZ = (Q Z + r) dt + S dB`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    d: usize,
    p: usize,
    q: CoefficientFn,
    r: CoefficientFn,
    s: CoefficientFn,
}

impl LinearModel {
    pub fn new(
        d: usize,
        p: usize,
        q: CoefficientFn,
        r: CoefficientFn,
        s: CoefficientFn,
    ) -> Result<Self> {
        if d == 0 {
            return Err(BridgeError::Schema("state dimension must be >= 1".into()));
        }
        if p == 0 {
            return Err(BridgeError::Schema("noise dimension must be >= 1".into()));
        }
        q.validate(d, d, "Q")?;
        r.validate(d, 1, "r")?;
        s.validate(d, p, "S")?;
        Ok(LinearModel { d, p, q, r, s })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn noise_dim(&self) -> usize {
        self.p
    }

    pub fn drift_matrix(&self, t: f64) -> DMatrix<f64> {
        self.q.eval(t)
    }

    pub fn forcing(&self, t: f64) -> DMatrix<f64> {
        self.r.eval(t)
    }

    pub fn noise_matrix(&self, t: f64) -> DMatrix<f64> {
        self.s.eval(t)
    }

    pub fn drift_coeff(&self) -> &CoefficientFn {
        &self.q
    }

    pub fn forcing_coeff(&self) -> &CoefficientFn {
        &self.r
    }

    pub fn noise_coeff(&self) -> &CoefficientFn {
        &self.s
    }

    pub fn forcing_is_zero(&self) -> bool {
        self.r.is_zero()
    }

    /// Parses a model file. See the module docs for the schema.
    pub fn parse(text: &str) -> Result<Self> {
        let file: ModelFile = toml::from_str(text)
            .map_err(|e| BridgeError::Schema(format!("TOML parse error: {e}")))?;
        file.into_model()
    }

    /// Canonical serialization; `parse(serialize(m)) == m` and serializing a
    /// parsed canonical file reproduces it byte for byte.
    pub fn serialize(&self) -> String {
        let file = ModelFile::from_model(self);
        toml::to_string(&file).expect("model serialization cannot fail")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.serialize().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    dim: usize,
    noise_dim: usize,
    #[serde(rename = "Q")]
    q: BlockFile,
    r: BlockFile,
    #[serde(rename = "S")]
    s: BlockFile,
}

#[derive(Serialize, Deserialize)]
struct BlockFile {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    rows: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coeffs: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    knots: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    values: Option<Vec<Vec<Vec<f64>>>>,
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(BridgeError::Schema(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(BridgeError::Schema(format!("{what}: ragged or empty rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl BlockFile {
    fn into_coefficient(self, role: &str) -> Result<CoefficientFn> {
        match self.kind.as_str() {
            "constant" => {
                let rows = self.rows.ok_or_else(|| {
                    BridgeError::Schema(format!("{role}: constant block needs `rows`"))
                })?;
                Ok(CoefficientFn::constant(rows_to_matrix(&rows, role)?))
            }
            "polynomial" => {
                let coeffs = self.coeffs.ok_or_else(|| {
                    BridgeError::Schema(format!("{role}: polynomial block needs `coeffs`"))
                })?;
                let mats = coeffs
                    .iter()
                    .map(|m| rows_to_matrix(m, role))
                    .collect::<Result<Vec<_>>>()?;
                Ok(CoefficientFn::polynomial(mats))
            }
            "table" => {
                let knots = self.knots.ok_or_else(|| {
                    BridgeError::Schema(format!("{role}: table block needs `knots`"))
                })?;
                let values = self.values.ok_or_else(|| {
                    BridgeError::Schema(format!("{role}: table block needs `values`"))
                })?;
                let mats = values
                    .iter()
                    .map(|m| rows_to_matrix(m, role))
                    .collect::<Result<Vec<_>>>()?;
                Ok(CoefficientFn::table(knots, mats))
            }
            other => Err(BridgeError::Schema(format!(
                "{role}: unknown kind `{other}` (expected constant, polynomial or table)"
            ))),
        }
    }

    fn from_coefficient(f: &CoefficientFn) -> Self {
        match f {
            CoefficientFn::Constant { value } => BlockFile {
                kind: "constant".into(),
                rows: Some(matrix_to_rows(value)),
                coeffs: None,
                knots: None,
                values: None,
            },
            CoefficientFn::Polynomial { coeffs } => BlockFile {
                kind: "polynomial".into(),
                rows: None,
                coeffs: Some(coeffs.iter().map(matrix_to_rows).collect()),
                knots: None,
                values: None,
            },
            CoefficientFn::Table { knots, values } => BlockFile {
                kind: "table".into(),
                rows: None,
                coeffs: None,
                knots: Some(knots.clone()),
                values: Some(values.iter().map(matrix_to_rows).collect()),
            },
        }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<LinearModel> {
        let q = self.q.into_coefficient("Q")?;
        let r = self.r.into_coefficient("r")?;
        let s = self.s.into_coefficient("S")?;
        LinearModel::new(self.dim, self.noise_dim, q, r, s)
    }

    fn from_model(m: &LinearModel) -> Self {
        ModelFile {
            dim: m.d,
            noise_dim: m.p,
            q: BlockFile::from_coefficient(&m.q),
            r: BlockFile::from_coefficient(&m.r),
            s: BlockFile::from_coefficient(&m.s),
        }
    }
}

/// Scalar Ornstein-Uhlenbeck style model with constant coefficients.
pub fn constant_scalar_model(q: f64, r: f64, sigma: f64) -> LinearModel {
    LinearModel::new(
        1,
        1,
        CoefficientFn::constant(DMatrix::from_element(1, 1, q)),
        CoefficientFn::constant(DMatrix::from_element(1, 1, r)),
        CoefficientFn::constant(DMatrix::from_element(1, 1, sigma)),
    )
    .expect("constant scalar model is always valid")
}

/// The integrated-Wiener model: position driven by a Wiener velocity.
pub fn integrated_wiener_model() -> LinearModel {
    LinearModel::new(
        2,
        1,
        CoefficientFn::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])),
        CoefficientFn::constant(DMatrix::zeros(2, 1)),
        CoefficientFn::constant(DMatrix::from_row_slice(2, 1, &[0.0, 1.0])),
    )
    .expect("integrated Wiener model is valid")
}
