//! Row-major JSON encodings for `ndarray` values.
//!
//! Matrices are written as arrays of rows, vectors as flat arrays. These are
//! the shapes the CLI reports and detector/forecaster state files use.

use ndarray::{Array1, Array2};
use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

pub fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>, String> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err("ragged matrix rows".into());
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((n, d), flat).map_err(|e| e.to_string())
}

pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let r = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&r).map_err(D::Error::custom)
    }
}

pub mod matrix_opt {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Option<Array2<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Array2<f64>>, D::Error> {
        let r = Option::<Vec<Vec<f64>>>::deserialize(d)?;
        r.map(|r| from_rows(&r).map_err(D::Error::custom)).transpose()
    }
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Array1<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice_memory_order()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| v.to_vec())
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array1<f64>, D::Error> {
        Ok(Array1::from(Vec::<f64>::deserialize(d)?))
    }
}

pub mod vector_opt {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<Array1<f64>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().map(|v| v.to_vec()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Array1<f64>>, D::Error> {
        Ok(Option::<Vec<f64>>::deserialize(d)?.map(Array1::from))
    }
}
