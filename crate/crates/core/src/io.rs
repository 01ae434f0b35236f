//! JSON files for families, parameter sets, points and reports.
//!
//! Floats are written with 17 significant digits so a write/read cycle is
//! exact. Non-finite values are written as the strings `"inf"`, `"-inf"` and
//! `"nan"`. Matrices are dense arrays of rows.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gen::FamilyKind;
use crate::problem::{
    AffineCore, ExpConstraint, ExpFamily, FamilyModel, Matrix, ParametricNlpFamily, PrimalDualPoint, QcqpFamily,
    QpFamily, QuadConstraint, SinFamily, Vector, Witness,
};

/// Formatter writing every finite double as `{:.16e}`.
struct ExactFloats;

impl serde_json::ser::Formatter for ExactFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(w, value as f64)
    }
}

/// Serializes `value` as one line of JSON followed by a newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloats);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column())))
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Real {
    Num(f64),
    Text(String),
}

impl Real {
    fn new(v: f64) -> Self {
        if v.is_finite() {
            Real::Num(v)
        } else if v.is_nan() {
            Real::Text("nan".into())
        } else if v > 0.0 {
            Real::Text("inf".into())
        } else {
            Real::Text("-inf".into())
        }
    }

    fn get<E: serde::de::Error>(self) -> std::result::Result<f64, E> {
        match self {
            Real::Num(v) => Ok(v),
            Real::Text(s) => match s.as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("expected a number, got '{other}'"))),
            },
        }
    }
}

/// Serde adapter for `Vec<f64>` that keeps non-finite entries.
pub mod reals {
    use super::Real;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| Real::new(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Real>::deserialize(d)?.into_iter().map(Real::get).collect()
    }
}

/// Serde adapter for `Vec<Vec<f64>>` (rows of a matrix).
pub mod real_rows {
    use super::Real;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|r| r.iter().map(|x| Real::new(*x)).collect::<Vec<_>>())
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        Vec::<Vec<Real>>::deserialize(d)?
            .into_iter()
            .map(|r| r.into_iter().map(Real::get).collect())
            .collect()
    }
}

mod opt_reals {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => super::reals::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        #[derive(Deserialize)]
        struct W(#[serde(with = "super::reals")] Vec<f64>);
        Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
    }
}

mod opt_rows {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<Vec<f64>>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => super::real_rows::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<Vec<f64>>>, D::Error> {
        #[derive(Deserialize)]
        struct W(#[serde(with = "super::real_rows")] Vec<Vec<f64>>);
        Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
    }
}

pub fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<Matrix> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        let got = rows.iter().map(|r| r.len()).collect::<Vec<_>>();
        return Err(Error::Parse(format!(
            "'{what}' must be {nrows}x{ncols}, got {} rows with lengths {got:?}",
            rows.len()
        )));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn vector_from(v: &[f64], len: usize, what: &str) -> Result<Vector> {
    if v.len() != len {
        return Err(Error::Parse(format!("'{what}' must have length {len}, got {}", v.len())));
    }
    Ok(Vector::from_column_slice(v))
}

fn required<T>(v: Option<T>, what: &str, kind: &str) -> Result<T> {
    v.ok_or_else(|| Error::Parse(format!("'{what}' is required for kind '{kind}'")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadJson {
    #[serde(rename = "C", with = "real_rows")]
    pub c: Vec<Vec<f64>>,
    #[serde(with = "reals")]
    pub r: Vec<f64>,
    pub beta: f64,
    #[serde(rename = "E", with = "reals")]
    pub e: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpJson {
    #[serde(with = "reals")]
    pub a: Vec<f64>,
    /// Diagonal of `W`.
    #[serde(rename = "W", with = "reals")]
    pub w: Vec<f64>,
    pub beta: f64,
    #[serde(rename = "E", with = "reals")]
    pub e: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WitnessJson {
    #[serde(with = "reals")]
    pub y_c: Vec<f64>,
    #[serde(rename = "T", with = "real_rows")]
    pub t: Vec<Vec<f64>>,
}

/// On-disk family. Blocks that a kind does not use are omitted.
///
/// * `qp`: `f = 1/2 y'Qy + c'y`, `Ay = b + Bx`, `Cy <= d`,
///   `l + Lx <= y <= u + Ux`.
/// * `qcqp`: as `qp` with `quad` rows `y'C y + r'y <= beta + E x`.
/// * `nlp`: as `qp` with `exp` rows `a' exp(y) + y' diag(W) y <= beta + E x`.
/// * `nonconvex`: `f = 1/2 y'Qy + p' sin(y)`, `Ay = x`, `Gy <= h`, `l <= y <= u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyJson {
    pub n: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
    pub n_params: usize,
    pub kind: FamilyKind,
    #[serde(rename = "Q", with = "real_rows")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "A", with = "real_rows")]
    pub a: Vec<Vec<f64>>,
    #[serde(with = "reals")]
    pub l: Vec<f64>,
    #[serde(with = "reals")]
    pub u: Vec<f64>,
    #[serde(with = "reals")]
    pub x_low: Vec<f64>,
    #[serde(with = "reals")]
    pub x_high: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_reals")]
    pub c: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_reals")]
    pub b: Option<Vec<f64>>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none", with = "opt_rows")]
    pub b_param: Option<Vec<Vec<f64>>>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none", with = "opt_rows")]
    pub l_param: Option<Vec<Vec<f64>>>,
    #[serde(rename = "U", default, skip_serializing_if = "Option::is_none", with = "opt_rows")]
    pub u_param: Option<Vec<Vec<f64>>>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none", with = "opt_rows")]
    pub c_ineq: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_reals")]
    pub d: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quad: Option<Vec<QuadJson>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exp: Option<Vec<ExpJson>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_reals")]
    pub p: Option<Vec<f64>>,
    #[serde(rename = "G", default, skip_serializing_if = "Option::is_none", with = "opt_rows")]
    pub g: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_reals")]
    pub h: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<WitnessJson>,
}

impl FamilyJson {
    fn base(family: &ParametricNlpFamily, kind: FamilyKind, q: &Matrix, a: &Matrix, l: &Vector, u: &Vector) -> Self {
        let d = family.dims();
        Self {
            n: d.n_vars,
            n_eq: d.n_eq,
            n_ineq: d.n_ineq,
            n_params: d.n_params,
            kind,
            q: rows_of(q),
            a: rows_of(a),
            l: l.as_slice().to_vec(),
            u: u.as_slice().to_vec(),
            x_low: family.x_low.as_slice().to_vec(),
            x_high: family.x_high.as_slice().to_vec(),
            c: None,
            b: None,
            b_param: None,
            l_param: None,
            u_param: None,
            c_ineq: None,
            d: None,
            quad: None,
            exp: None,
            p: None,
            g: None,
            h: None,
            witness: family.witness.as_ref().map(|w| WitnessJson {
                y_c: w.y_c.as_slice().to_vec(),
                t: rows_of(&w.t),
            }),
        }
    }

    fn with_core(family: &ParametricNlpFamily, kind: FamilyKind, core: &AffineCore) -> Self {
        let mut out = Self::base(family, kind, &core.q, &core.a_eq, &core.lower, &core.upper);
        out.c = Some(core.c.as_slice().to_vec());
        out.b = Some(core.b_eq.as_slice().to_vec());
        out.b_param = Some(rows_of(&core.b_param));
        out.l_param = Some(rows_of(&core.lower_param));
        out.u_param = Some(rows_of(&core.upper_param));
        out
    }

    pub fn from_family(family: &ParametricNlpFamily) -> Result<Self> {
        Ok(match &family.model {
            FamilyModel::Quadratic(m) => {
                let mut out = Self::with_core(family, FamilyKind::Qp, &m.core);
                out.c_ineq = Some(rows_of(&m.c_ineq));
                out.d = Some(m.d_ineq.as_slice().to_vec());
                out
            }
            FamilyModel::Qcqp(m) => {
                let mut out = Self::with_core(family, FamilyKind::Qcqp, &m.core);
                out.quad = Some(
                    m.quads
                        .iter()
                        .map(|q| QuadJson {
                            c: rows_of(&q.cmat),
                            r: q.d.as_slice().to_vec(),
                            beta: q.beta,
                            e: q.e.as_slice().to_vec(),
                        })
                        .collect(),
                );
                out
            }
            FamilyModel::ConvexExp(m) => {
                let mut out = Self::with_core(family, FamilyKind::Nlp, &m.core);
                out.exp = Some(
                    m.exps
                        .iter()
                        .map(|e| ExpJson {
                            a: e.a.as_slice().to_vec(),
                            w: e.w.as_slice().to_vec(),
                            beta: e.beta,
                            e: e.e.as_slice().to_vec(),
                        })
                        .collect(),
                );
                out
            }
            FamilyModel::NonconvexSin(m) => {
                let mut out = Self::base(family, FamilyKind::Nonconvex, &m.q, &m.a_eq, &m.lower, &m.upper);
                out.p = Some(m.p.as_slice().to_vec());
                out.g = Some(rows_of(&m.g_mat));
                out.h = Some(m.h.as_slice().to_vec());
                out
            }
            FamilyModel::Custom(_) => {
                return Err(Error::InvalidConfig("custom families have no file format".into()));
            }
        })
    }

    fn core(&self, kind: &str) -> Result<AffineCore> {
        let (n, m, p) = (self.n, self.n_eq, self.n_params);
        Ok(AffineCore {
            q: matrix_from_rows(&self.q, n, n, "Q")?,
            c: vector_from(required(self.c.as_ref(), "c", kind)?, n, "c")?,
            a_eq: matrix_from_rows(&self.a, m, n, "A")?,
            b_eq: vector_from(required(self.b.as_ref(), "b", kind)?, m, "b")?,
            b_param: matrix_from_rows(required(self.b_param.as_ref(), "B", kind)?, m, p, "B")?,
            lower: vector_from(&self.l, n, "l")?,
            upper: vector_from(&self.u, n, "u")?,
            lower_param: matrix_from_rows(required(self.l_param.as_ref(), "L", kind)?, n, p, "L")?,
            upper_param: matrix_from_rows(required(self.u_param.as_ref(), "U", kind)?, n, p, "U")?,
        })
    }

    pub fn to_family(&self) -> Result<ParametricNlpFamily> {
        let (n, p) = (self.n, self.n_params);
        let model = match self.kind {
            FamilyKind::Qp => {
                let core = self.core("qp")?;
                let c = matrix_from_rows(required(self.c_ineq.as_ref(), "C", "qp")?, self.n_ineq, n, "C")?;
                let d = vector_from(required(self.d.as_ref(), "d", "qp")?, self.n_ineq, "d")?;
                FamilyModel::Quadratic(QpFamily::new(core, c, d))
            }
            FamilyKind::Qcqp => {
                let core = self.core("qcqp")?;
                let rows = required(self.quad.as_ref(), "quad", "qcqp")?;
                if rows.len() != self.n_ineq {
                    return Err(Error::Parse(format!("'quad' must have {} rows, got {}", self.n_ineq, rows.len())));
                }
                let quads = rows
                    .iter()
                    .map(|q| {
                        Ok(QuadConstraint {
                            cmat: matrix_from_rows(&q.c, n, n, "quad.C")?,
                            d: vector_from(&q.r, n, "quad.r")?,
                            beta: q.beta,
                            e: vector_from(&q.e, p, "quad.E")?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                FamilyModel::Qcqp(QcqpFamily::new(core, quads))
            }
            FamilyKind::Nlp => {
                let core = self.core("nlp")?;
                let rows = required(self.exp.as_ref(), "exp", "nlp")?;
                if rows.len() != self.n_ineq {
                    return Err(Error::Parse(format!("'exp' must have {} rows, got {}", self.n_ineq, rows.len())));
                }
                let exps = rows
                    .iter()
                    .map(|e| {
                        Ok(ExpConstraint {
                            a: vector_from(&e.a, n, "exp.a")?,
                            w: vector_from(&e.w, n, "exp.W")?,
                            beta: e.beta,
                            e: vector_from(&e.e, p, "exp.E")?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                FamilyModel::ConvexExp(ExpFamily::new(core, exps))
            }
            FamilyKind::Nonconvex => {
                if self.n_params != self.n_eq {
                    return Err(Error::Parse(format!(
                        "nonconvex families need n_params == n_eq, got {} and {}",
                        self.n_params, self.n_eq
                    )));
                }
                FamilyModel::NonconvexSin(SinFamily::new(
                    matrix_from_rows(&self.q, n, n, "Q")?,
                    vector_from(required(self.p.as_ref(), "p", "nonconvex")?, n, "p")?,
                    matrix_from_rows(&self.a, self.n_eq, n, "A")?,
                    matrix_from_rows(required(self.g.as_ref(), "G", "nonconvex")?, self.n_ineq, n, "G")?,
                    vector_from(required(self.h.as_ref(), "h", "nonconvex")?, self.n_ineq, "h")?,
                    vector_from(&self.l, n, "l")?,
                    vector_from(&self.u, n, "u")?,
                ))
            }
        };
        let mut family = ParametricNlpFamily::new(
            model,
            vector_from(&self.x_low, p, "x_low")?,
            vector_from(&self.x_high, p, "x_high")?,
        );
        if let Some(w) = &self.witness {
            family = family.with_witness(Witness {
                y_c: vector_from(&w.y_c, n, "witness.y_c")?,
                t: matrix_from_rows(&w.t, n, p, "witness.T")?,
            });
        }
        Ok(family)
    }
}

pub fn write_family(path: impl AsRef<Path>, family: &ParametricNlpFamily) -> Result<()> {
    write_json(path, &FamilyJson::from_family(family)?)
}

pub fn read_family(path: impl AsRef<Path>) -> Result<ParametricNlpFamily> {
    read_json::<FamilyJson>(path)?.to_family()
}

/// A list of parameter vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsJson {
    pub n_params: usize,
    #[serde(with = "real_rows")]
    pub x: Vec<Vec<f64>>,
}

impl ParamsJson {
    pub fn new(n_params: usize, xs: &[Vector]) -> Self {
        Self {
            n_params,
            x: xs.iter().map(|x| x.as_slice().to_vec()).collect(),
        }
    }

    pub fn vectors(&self) -> Result<Vec<Vector>> {
        self.x.iter().map(|x| vector_from(x, self.n_params, "x")).collect()
    }
}

pub fn write_params(path: impl AsRef<Path>, n_params: usize, xs: &[Vector]) -> Result<()> {
    write_json(path, &ParamsJson::new(n_params, xs))
}

pub fn read_params(path: impl AsRef<Path>) -> Result<Vec<Vector>> {
    read_json::<ParamsJson>(path)?.vectors()
}

/// `[y; lambda; mu]` as three named blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointJson {
    #[serde(with = "reals")]
    pub y: Vec<f64>,
    #[serde(with = "reals")]
    pub lambda: Vec<f64>,
    #[serde(with = "reals")]
    pub mu: Vec<f64>,
}

impl From<&PrimalDualPoint> for PointJson {
    fn from(p: &PrimalDualPoint) -> Self {
        Self {
            y: p.y.as_slice().to_vec(),
            lambda: p.lambda.as_slice().to_vec(),
            mu: p.mu.as_slice().to_vec(),
        }
    }
}

impl From<&PointJson> for PrimalDualPoint {
    fn from(p: &PointJson) -> Self {
        PrimalDualPoint::new(
            Vector::from_column_slice(&p.y),
            Vector::from_column_slice(&p.lambda),
            Vector::from_column_slice(&p.mu),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{generate, GenDims, GenOptions};

    #[test]
    fn floats_round_trip_exactly() {
        let v = vec![0.1, 1.0 / 3.0, -2.5e-300, 1e300, f64::MIN_POSITIVE, f64::INFINITY, f64::NEG_INFINITY];
        #[derive(Serialize, Deserialize)]
        struct W(#[serde(with = "reals")] Vec<f64>);
        let s = to_json(&W(v.clone())).unwrap();
        assert!(s.contains("3.3333333333333331e-1"), "{s}");
        assert!(s.contains("\"inf\"") && s.contains("\"-inf\""));
        let back: W = serde_json::from_str(&s).unwrap();
        assert_eq!(back.0, v);
    }

    #[test]
    fn families_round_trip() {
        for kind in [FamilyKind::Qp, FamilyKind::Qcqp, FamilyKind::Nlp, FamilyKind::Nonconvex] {
            let fam = generate(kind, &GenDims::new(5, 2, 3, 2, 7), &GenOptions::default()).unwrap();
            let json = FamilyJson::from_family(&fam).unwrap();
            let text = to_json(&json).unwrap();
            let back: FamilyJson = serde_json::from_str(&text).unwrap();
            assert_eq!(back, json);
            let fam2 = back.to_family().unwrap();
            assert_eq!(to_json(&FamilyJson::from_family(&fam2).unwrap()).unwrap(), text);
            let x = fam.x_low.map(|v| v * 0.3);
            let y = fam.witness.as_ref().unwrap().at(&x);
            assert_eq!(fam.objective(&x, &y), fam2.objective(&x, &y));
            assert_eq!(fam.max_violation(&x, &y), fam2.max_violation(&x, &y));
        }
    }

    #[test]
    fn missing_block_is_reported() {
        let fam = generate(FamilyKind::Qp, &GenDims::new(3, 1, 1, 1, 0), &GenOptions::default()).unwrap();
        let mut json = FamilyJson::from_family(&fam).unwrap();
        json.d = None;
        let err = json.to_family().unwrap_err();
        assert!(matches!(err, Error::Parse(ref m) if m.contains("'d'")), "{err}");
        let mut json = FamilyJson::from_family(&fam).unwrap();
        json.q.pop();
        assert!(json.to_family().is_err());
    }

    #[test]
    fn parse_errors_carry_position() {
        let err: Error = serde_json::from_str::<ParamsJson>("{\n \"n_params\": 1,\n \"x\": [[\"oops\"]]}")
            .unwrap_err()
            .into();
        assert!(matches!(err, Error::Parse(ref m) if m.contains("line 3")), "{err}");
    }

    #[test]
    fn params_and_points_round_trip() {
        let xs = vec![Vector::from_column_slice(&[0.1, -2.0]), Vector::from_column_slice(&[3.0, 4.5])];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        write_params(&path, 2, &xs).unwrap();
        assert_eq!(read_params(&path).unwrap(), xs);
        let pt = PrimalDualPoint::new(xs[0].clone(), xs[1].clone(), Vector::zeros(0));
        let back: PointJson = serde_json::from_str(&to_json(&PointJson::from(&pt)).unwrap()).unwrap();
        assert_eq!(PrimalDualPoint::from(&back), pt);
    }
}
