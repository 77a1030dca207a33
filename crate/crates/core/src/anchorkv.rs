//! Token-aligned scaffold memory and appended key/value attention.
//!
//! The scaffold encoder here is a reference stand-in: a window mean at the
//! tokenizer's downsampling ratio followed by one linear map. Projection and
//! encoder weights are supplied by the caller.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scaffold::ScaffoldFeatures;

/// H^s: one memory row per motion token.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMemory {
    rows: DMatrix<f64>,
}

impl ConditionMemory {
    pub fn new(rows: DMatrix<f64>) -> Result<Self> {
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("condition memory"));
        }
        Ok(Self { rows })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn tokens(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// Pooled text representation. Only its shape matters here; content is not modeled.
#[derive(Debug, Clone, PartialEq)]
pub struct TextContext {
    pub vector: DVector<f64>,
}

impl TextContext {
    pub fn new(vector: DVector<f64>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("text context"));
        }
        Ok(Self { vector })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { vector: DVector::zeros(dim) }
    }
}

/// Low-rank projection of one layer: `K^s = H P U_K`, `V^s = H P U_V`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorKvParams {
    projection: DMatrix<f64>,
    key_up: DMatrix<f64>,
    value_up: DMatrix<f64>,
}

impl AnchorKvParams {
    pub fn new(projection: DMatrix<f64>, key_up: DMatrix<f64>, value_up: DMatrix<f64>) -> Result<Self> {
        let (d, r) = projection.shape();
        if r == 0 {
            return Err(Error::Shape("rank must be at least 1".into()));
        }
        if key_up.shape() != (r, d) || value_up.shape() != (r, d) {
            return Err(Error::Shape(format!(
                "P is {d}x{r}; U_K is {:?} and U_V is {:?}, both must be {r}x{d}",
                key_up.shape(),
                value_up.shape()
            )));
        }
        Ok(Self { projection, key_up, value_up })
    }

    /// Gaussian weights scaled by 1/sqrt(fan-in).
    pub fn random<R: Rng + ?Sized>(dim: usize, rank: usize, rng: &mut R) -> Result<Self> {
        Self::new(
            gaussian(dim, rank, (dim as f64).sqrt().recip(), rng),
            gaussian(rank, dim, (rank as f64).sqrt().recip(), rng),
            gaussian(rank, dim, (rank as f64).sqrt().recip(), rng),
        )
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn rank(&self) -> usize {
        self.projection.ncols()
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn key_up(&self) -> &DMatrix<f64> {
        &self.key_up
    }

    pub fn value_up(&self) -> &DMatrix<f64> {
        &self.value_up
    }
}

pub(crate) fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Mean-pools feature frames per token window and applies `w_in`.
///
/// The last window is padded by repeating the final frame when `T` is not a
/// multiple of `ratio`, so the memory always has `ceil(T / ratio)` rows.
pub fn encode_memory(features: &ScaffoldFeatures, ratio: usize, w_in: &DMatrix<f64>) -> Result<ConditionMemory> {
    if ratio == 0 {
        return Err(Error::Domain("downsampling ratio must be positive".into()));
    }
    let width = features.width();
    if w_in.nrows() != width {
        return Err(Error::Shape(format!("W_in has {} rows, features have width {width}", w_in.nrows())));
    }
    let frames = features.frames();
    let tokens = frames.div_ceil(ratio);
    let f = features.matrix();
    let mut pooled = DMatrix::zeros(tokens, width);
    for n in 0..tokens {
        for t in n * ratio..(n + 1) * ratio {
            let src = t.min(frames - 1);
            for c in 0..width {
                pooled[(n, c)] += f[(src, c)];
            }
        }
    }
    pooled /= ratio as f64;
    ConditionMemory::new(pooled * w_in)
}

/// Scaffold keys and values for one layer.
pub fn project_kv(memory: &ConditionMemory, params: &AnchorKvParams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if memory.dim() != params.dim() {
        return Err(Error::Shape(format!(
            "memory width {} does not match projection input {}",
            memory.dim(),
            params.dim()
        )));
    }
    let low = memory.matrix() * params.projection();
    Ok((&low * params.key_up(), &low * params.value_up()))
}

/// Row-softmax of `Q Kᵀ / sqrt(d)`.
pub fn attention_weights(queries: &DMatrix<f64>, keys: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = queries.ncols();
    if d == 0 {
        return Err(Error::Shape("attention dimension must be positive".into()));
    }
    if keys.ncols() != d {
        return Err(Error::Shape(format!("query width {d} but key width {}", keys.ncols())));
    }
    let mut scores = queries * keys.transpose() / (d as f64).sqrt();
    for mut row in scores.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|s| *s = (*s - max).exp());
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|s| *s /= total);
    }
    Ok(scores)
}

/// Plain single-head scaled dot-product attention.
pub fn attention(queries: &DMatrix<f64>, keys: &DMatrix<f64>, values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if keys.nrows() != values.nrows() {
        return Err(Error::Shape(format!("{} keys but {} values", keys.nrows(), values.nrows())));
    }
    if keys.nrows() == 0 {
        return Err(Error::Shape("attention needs at least one key".into()));
    }
    Ok(attention_weights(queries, keys)? * values)
}

/// Attention over base keys/values with the scaffold keys/values appended.
pub fn attend(
    queries: &DMatrix<f64>,
    keys: &DMatrix<f64>,
    values: &DMatrix<f64>,
    scaffold_keys: &DMatrix<f64>,
    scaffold_values: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = queries.ncols();
    if d == 0 {
        return Err(Error::Shape("attention dimension must be positive".into()));
    }
    for (name, m) in [("keys", keys), ("values", values), ("scaffold keys", scaffold_keys), ("scaffold values", scaffold_values)] {
        if m.ncols() != d {
            return Err(Error::Shape(format!("{name} have width {}, expected {d}", m.ncols())));
        }
    }
    if scaffold_keys.nrows() != scaffold_values.nrows() {
        return Err(Error::Shape("scaffold keys and values differ in length".into()));
    }
    if scaffold_keys.nrows() == 0 {
        return attention(queries, keys, values);
    }
    attention(queries, &stack_rows(keys, scaffold_keys), &stack_rows(values, scaffold_values))
}

fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scaffold::{build_features, AnchorSet, ControlFamily, Motion};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn naive_matmul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(a.nrows(), b.ncols());
        for i in 0..a.nrows() {
            for j in 0..b.ncols() {
                let mut s = 0.0;
                for k in 0..a.ncols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    /// Dense attention with explicit loops over the concatenated key list.
    fn reference_attention(q: &DMatrix<f64>, ks: &[&DMatrix<f64>], vs: &[&DMatrix<f64>]) -> DMatrix<f64> {
        let keys: Vec<Vec<f64>> = ks.iter().flat_map(|m| m.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>())).collect();
        let vals: Vec<Vec<f64>> = vs.iter().flat_map(|m| m.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>())).collect();
        let d = q.ncols();
        let mut out = DMatrix::zeros(q.nrows(), vals[0].len());
        for i in 0..q.nrows() {
            let scores: Vec<f64> = keys
                .iter()
                .map(|k| (0..d).map(|c| q[(i, c)] * k[c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = w.iter().sum();
            for (wj, v) in w.iter().zip(&vals) {
                for c in 0..v.len() {
                    out[(i, c)] += wj / z * v[c];
                }
            }
        }
        out
    }

    fn features(frames: usize) -> ScaffoldFeatures {
        let m = Motion::from_fn(frames, 1, |t, _| [t as f64 * 0.1, (t as f64).sin(), 1.0]).unwrap();
        let set = AnchorSet::from_motion(&m, ControlFamily::root3d(), &[1, 6, 11]).unwrap();
        build_features(&set, frames).unwrap()
    }

    #[test]
    fn zero_features_give_zero_memory() {
        let f = build_features(&AnchorSet::empty(ControlFamily::root3d()), 12).unwrap();
        let w = gaussian(11, 6, 1.0, &mut rng(0));
        let h = encode_memory(&f, 4, &w).unwrap();
        assert_eq!(h.tokens(), 3);
        assert!(h.matrix().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_encoder_at_ratio_one() {
        let f = features(12);
        let h = encode_memory(&f, 1, &DMatrix::identity(11, 11)).unwrap();
        assert_eq!(h.matrix(), f.matrix());
    }

    #[test]
    fn window_mean_pooling() {
        let f = features(16);
        let h = encode_memory(&f, 4, &DMatrix::identity(11, 11)).unwrap();
        for n in 0..4 {
            for c in 0..11 {
                let mean = (0..4).map(|k| f.matrix()[(4 * n + k, c)]).sum::<f64>() / 4.0;
                assert!((h.matrix()[(n, c)] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ragged_tail_repeats_last_frame() {
        let f = features(14);
        let h = encode_memory(&f, 4, &DMatrix::identity(11, 11)).unwrap();
        assert_eq!(h.tokens(), 4);
        for c in 0..11 {
            let m = f.matrix();
            let mean = (m[(12, c)] + 3.0 * m[(13, c)]) / 4.0;
            assert!((h.matrix()[(3, c)] - mean).abs() < 1e-15);
        }
        assert!(encode_memory(&f, 4, &DMatrix::identity(10, 10)).is_err());
    }

    #[test]
    fn projection_of_zero_memory() {
        let p = AnchorKvParams::random(8, 3, &mut rng(1)).unwrap();
        let h = ConditionMemory::new(DMatrix::zeros(5, 8)).unwrap();
        let (k, v) = project_kv(&h, &p).unwrap();
        assert!(k.iter().chain(v.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn rank_one_keys_are_multiples_of_u_k() {
        let p = AnchorKvParams::random(6, 1, &mut rng(2)).unwrap();
        let h = ConditionMemory::new(gaussian(7, 6, 1.0, &mut rng(3))).unwrap();
        let (k, _) = project_kv(&h, &p).unwrap();
        let u = p.key_up().row(0);
        for row in k.row_iter() {
            let scale = row.dot(&u) / u.dot(&u);
            assert!((row - u * scale).norm() < 1e-12);
        }
    }

    #[test]
    fn projection_matches_naive_triple_product_in_both_orders() {
        let p = AnchorKvParams::random(9, 4, &mut rng(4)).unwrap();
        let h = ConditionMemory::new(gaussian(6, 9, 1.0, &mut rng(5))).unwrap();
        let (k, v) = project_kv(&h, &p).unwrap();
        let k_left = naive_matmul(&naive_matmul(h.matrix(), p.projection()), p.key_up());
        let k_right = naive_matmul(h.matrix(), &naive_matmul(p.projection(), p.key_up()));
        let v_left = naive_matmul(&naive_matmul(h.matrix(), p.projection()), p.value_up());
        assert!((&k - k_left).amax() < 1e-12);
        assert!((&k - k_right).amax() < 1e-12);
        assert!((&v - v_left).amax() < 1e-12);
    }

    #[test]
    fn empty_scaffold_is_plain_attention() {
        let mut r = rng(6);
        let (q, k, v) = (gaussian(4, 5, 1.0, &mut r), gaussian(7, 5, 1.0, &mut r), gaussian(7, 5, 1.0, &mut r));
        let empty = DMatrix::zeros(0, 5);
        assert_eq!(attend(&q, &k, &v, &empty, &empty).unwrap(), attention(&q, &k, &v).unwrap());
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut r = rng(7);
        let q = gaussian(3, 4, 5.0, &mut r);
        let v = gaussian(1, 4, 1.0, &mut r);
        let out = attend(&q, &DMatrix::zeros(0, 4), &DMatrix::zeros(0, 4), &gaussian(1, 4, 1.0, &mut r), &v).unwrap();
        for row in out.row_iter() {
            assert!((row - v.row(0)).amax() < 1e-15);
        }
    }

    #[test]
    fn appended_attention_matches_reference() {
        let mut r = rng(8);
        for _ in 0..10 {
            let (q, k, v) = (gaussian(5, 6, 1.0, &mut r), gaussian(8, 6, 1.0, &mut r), gaussian(8, 6, 1.0, &mut r));
            let (ks, vs) = (gaussian(3, 6, 1.0, &mut r), gaussian(3, 6, 1.0, &mut r));
            let out = attend(&q, &k, &v, &ks, &vs).unwrap();
            let expect = reference_attention(&q, &[&k, &ks], &[&v, &vs]);
            assert!((out - expect).amax() < 1e-10);
        }
    }

    #[test]
    fn weights_rows_sum_to_one() {
        let mut r = rng(9);
        let w = attention_weights(&gaussian(6, 4, 3.0, &mut r), &gaussian(9, 4, 3.0, &mut r)).unwrap();
        for row in w.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_key_moves_output_toward_its_value() {
        let mut r = rng(10);
        let (q, k, v) = (gaussian(3, 4, 1.0, &mut r), gaussian(5, 4, 1.0, &mut r), gaussian(5, 4, 1.0, &mut r));
        let base = attention(&q, &k, &v).unwrap();
        let w = attention_weights(&q, &k).unwrap();
        let out = attend(&q, &k, &v, &k.rows(2, 1).into_owned(), &v.rows(2, 1).into_owned()).unwrap();
        for i in 0..3 {
            // new = (base + w_2 v_2) / (1 + w_2)
            let w2 = w[(i, 2)];
            let expect = (base.row(i) + v.row(2) * w2) / (1.0 + w2);
            assert!((out.row(i) - expect).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let z = DMatrix::zeros(2, 0);
        assert!(attend(&z, &z, &z, &z, &z).is_err());
    }
}
