//! JSON model documents.
//!
//! ```json
//! {
//!   "dims": {"d": 1, "m": 1},
//!   "horizon": 1.0,
//!   "dynamics": {"B": [[0.0]], "C": {"knots": [[0.0, [[1.0]]], [1.0, [[2.0]]]]}},
//!   "cost": {"R2": 1.0, "P2": [[1.0]], "p1_bar": [-1.0]}
//! }
//! ```
//!
//! A coefficient is a nested array (rows), a flat array (a column, or a row
//! when the coefficient has one row), a bare number (1x1), or a knot list.
//! A knot list with a `"derivatives"` array of `[start, end]` matrices per
//! segment is a piecewise cubic instead of piecewise linear.
//! Omitted coefficients are zero.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::model::{Dimensions, LqModel};
use crate::schedule::CoefficientSchedule;

const DYNAMICS: [&str; 10] = ["b0", "B", "B_bar", "C", "C_bar", "sigma0", "D", "D_bar", "F", "F_bar"];
const TERMINAL: [&str; 4] = ["P2", "P2_bar", "p1", "p1_bar"];

fn parse_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("field \"{field}\": {msg}"))
}

fn number(v: &Value, field: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| parse_err(field, format!("expected a number, got {v}")))
}

fn matrix(v: &Value, shape: (usize, usize), field: &str) -> Result<DMatrix<f64>> {
    let (rows, cols) = shape;
    let m = match v {
        Value::Number(_) => DMatrix::from_element(1, 1, number(v, field)?),
        Value::Array(items) if items.iter().all(Value::is_array) && !items.is_empty() => {
            let data: Vec<Vec<f64>> = items
                .iter()
                .map(|row| {
                    row.as_array()
                        .unwrap()
                        .iter()
                        .map(|x| number(x, field))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?;
            let ncols = data[0].len();
            if data.iter().any(|r| r.len() != ncols) {
                return Err(parse_err(field, "ragged matrix rows"));
            }
            DMatrix::from_fn(data.len(), ncols, |i, j| data[i][j])
        }
        Value::Array(items) => {
            let data = items.iter().map(|x| number(x, field)).collect::<Result<Vec<f64>>>()?;
            if rows == 1 && cols != 1 {
                DMatrix::from_row_slice(1, data.len(), &data)
            } else {
                DMatrix::from_column_slice(data.len(), 1, &data)
            }
        }
        _ => return Err(parse_err(field, format!("expected a matrix, got {v}"))),
    };
    if m.shape() != shape {
        return Err(parse_err(field, format!("expected shape {rows}x{cols}, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(m)
}

fn schedule(v: &Value, shape: (usize, usize), field: &str) -> Result<CoefficientSchedule> {
    let Some(obj) = v.as_object() else {
        return Ok(CoefficientSchedule::constant(matrix(v, shape, field)?));
    };
    let knots = obj
        .get("knots")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(field, "expected a matrix or {\"knots\": [[t, matrix], ...]}"))?;
    let parsed = knots
        .iter()
        .enumerate()
        .map(|(i, k)| match k.as_array().map(Vec::as_slice) {
            Some([t, m]) => {
                let f = format!("{field}.knots[{i}]");
                Ok((number(t, &f)?, matrix(m, shape, &f)?))
            }
            _ => Err(parse_err(field, format!("knot {i} must be [t, matrix]"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(k) = obj.keys().find(|k| !["knots", "derivatives"].contains(&k.as_str())) {
        return Err(parse_err(&format!("{field}.{k}"), "unknown schedule key"));
    }
    let Some(derivs) = obj.get("derivatives") else {
        return CoefficientSchedule::tabulated(parsed).map_err(|e| parse_err(field, e));
    };
    // cubic form: one [start, end] derivative pair per segment
    let derivs = derivs
        .as_array()
        .ok_or_else(|| parse_err(field, "derivatives must be an array of [start, end] pairs"))?;
    let (mut d_start, mut d_end) = (Vec::new(), Vec::new());
    for (i, d) in derivs.iter().enumerate() {
        let f = format!("{field}.derivatives[{i}]");
        match d.as_array().map(Vec::as_slice) {
            Some([a, b]) => {
                d_start.push(matrix(a, shape, &f)?);
                d_end.push(matrix(b, shape, &f)?);
            }
            _ => return Err(parse_err(field, format!("derivative pair {i} must be [start, end]"))),
        }
    }
    let (times, values) = parsed.into_iter().unzip();
    CoefficientSchedule::cubic(times, values, d_start, d_end).map_err(|e| parse_err(field, e))
}

fn section(doc: &Map<String, Value>, name: &str, allowed: &[&str]) -> Result<Map<String, Value>> {
    match doc.get(name) {
        None => Ok(Map::new()),
        Some(Value::Object(m)) => {
            if let Some(k) = m.keys().find(|k| !allowed.contains(&k.as_str())) {
                return Err(parse_err(&format!("{name}.{k}"), "unknown coefficient"));
            }
            Ok(m.clone())
        }
        Some(v) => Err(parse_err(name, format!("expected an object, got {v}"))),
    }
}

fn dimension(dims: &Map<String, Value>, key: &str) -> Result<usize> {
    let field = format!("dims.{key}");
    let v = dims.get(key).ok_or_else(|| parse_err(&field, "missing"))?;
    match v.as_u64() {
        Some(n) if n > 0 => Ok(n as usize),
        _ => Err(parse_err(&field, format!("expected a positive integer, got {v}"))),
    }
}

/// Parses and validates a model document.
pub fn parse_model(text: &str) -> Result<LqModel> {
    let doc: Value = serde_json::from_str(text)?;
    let doc = doc.as_object().ok_or_else(|| Error::Parse("document must be a JSON object".into()))?;
    let dims = doc
        .get("dims")
        .ok_or_else(|| parse_err("dims", "missing"))?
        .as_object()
        .ok_or_else(|| parse_err("dims", "expected {\"d\": .., \"m\": ..}"))?;
    let dims = Dimensions::new(dimension(dims, "d")?, dimension(dims, "m")?);
    let horizon = number(doc.get("horizon").ok_or_else(|| parse_err("horizon", "missing"))?, "horizon")?;

    let mut model = LqModel::zeros(dims, horizon);
    let shapes: Vec<(&str, (usize, usize))> = model.schedules().iter().map(|(n, _, s)| (*n, *s)).collect();
    let cost_names: Vec<&str> = shapes
        .iter()
        .map(|(n, _)| *n)
        .filter(|n| !DYNAMICS.contains(n))
        .chain(TERMINAL)
        .collect();
    let dynamics = section(doc, "dynamics", &DYNAMICS)?;
    let cost = section(doc, "cost", &cost_names)?;

    for ((name, slot), (_, shape)) in model.schedules_mut().into_iter().zip(&shapes) {
        let (sec, sec_name) = if DYNAMICS.contains(&name) {
            (&dynamics, "dynamics")
        } else {
            (&cost, "cost")
        };
        if let Some(v) = sec.get(name) {
            *slot = schedule(v, *shape, &format!("{sec_name}.{name}"))?;
        }
    }
    let d = dims.state;
    let c = &mut model.cost;
    for (name, slot) in [("P2", &mut c.p2), ("P2_bar", &mut c.p2_bar)] {
        if let Some(v) = cost.get(name) {
            *slot = matrix(v, (d, d), &format!("cost.{name}"))?;
        }
    }
    for (name, slot) in [("p1", &mut c.p1), ("p1_bar", &mut c.p1_bar)] {
        if let Some(v) = cost.get(name) {
            *slot = DVector::from_column_slice(matrix(v, (d, 1), &format!("cost.{name}"))?.as_slice());
        }
    }
    model.validated()
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LqModel> {
    parse_model(&std::fs::read_to_string(path)?)
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    Value::Array(m.row_iter().map(|r| json!(r.iter().copied().collect::<Vec<f64>>())).collect())
}

fn schedule_json(s: &CoefficientSchedule) -> Value {
    match s {
        CoefficientSchedule::Constant(m) => matrix_json(m),
        CoefficientSchedule::Tabulated { times, values } => json!({
            "knots": times.iter().zip(values).map(|(t, m)| json!([t, matrix_json(m)])).collect::<Vec<_>>()
        }),
        CoefficientSchedule::Cubic { times, values, d_start, d_end } => json!({
            "knots": times.iter().zip(values).map(|(t, m)| json!([t, matrix_json(m)])).collect::<Vec<_>>(),
            "derivatives": d_start.iter().zip(d_end).map(|(a, b)| json!([matrix_json(a), matrix_json(b)])).collect::<Vec<_>>()
        }),
    }
}

/// Serializes a model so that `parse_model` reproduces it.
pub fn model_to_json(model: &LqModel) -> String {
    let mut dynamics = Map::new();
    let mut cost = Map::new();
    for (name, s, _) in model.schedules() {
        let target = if DYNAMICS.contains(&name) { &mut dynamics } else { &mut cost };
        target.insert(name.to_string(), schedule_json(s));
    }
    let c = &model.cost;
    cost.insert("P2".into(), matrix_json(&c.p2));
    cost.insert("P2_bar".into(), matrix_json(&c.p2_bar));
    cost.insert("p1".into(), json!(c.p1.as_slice()));
    cost.insert("p1_bar".into(), json!(c.p1_bar.as_slice()));
    let doc = json!({
        "dims": {"d": model.dims.state, "m": model.dims.control},
        "horizon": model.horizon,
        "dynamics": dynamics,
        "cost": cost,
    });
    serde_json::to_string_pretty(&doc).expect("model serializes")
}
