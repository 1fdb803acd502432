use ndarray::Array2;

use crate::error::{Error, Result};
use crate::ops;

/// `softmax(Q K^T / sqrt(d_k)) V` for a single head.
pub fn attention(q: &Array2<f32>, k: &Array2<f32>, v: &Array2<f32>) -> Result<Array2<f32>> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape(("d_k", q.ncols()), ("d_k", k.ncols())));
    }
    if k.nrows() != v.nrows() || k.nrows() == 0 {
        return Err(Error::shape(("keys", k.nrows()), ("values", v.nrows())));
    }
    let scale = 1.0 / (q.ncols() as f32).sqrt();
    let map = ops::attention_map(&q.view(), &k.view(), scale);
    Ok(map.dot(v))
}
