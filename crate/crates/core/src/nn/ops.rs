//! Tape-free reference versions of the basic operations.

use super::tape::{masked_softmax, LOG_EPSILON};
use super::{KeySets, NnError, ParameterStore, Tape, Tensor};

/// Numerically stable softmax of one vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    masked_softmax(x, None)
}

/// `-Σ target · ln(pred + LOG_EPSILON)`.
///
/// `target` must be a probability vector: non-negative and summing to one.
pub fn cross_entropy(pred: &[f64], target: &[f64]) -> Result<f64, NnError> {
    if pred.len() != target.len() {
        return Err(NnError::Shape {
            context: "cross_entropy",
            expected: format!("{} target entries", pred.len()),
            actual: format!("{}", target.len()),
        });
    }
    if let Some(t) = target.iter().find(|t| !(**t >= 0.0)) {
        return Err(NnError::InvalidDistribution(format!(
            "negative target probability {t}"
        )));
    }
    let total: f64 = target.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(NnError::InvalidDistribution(format!("target sums to {total}")));
    }
    Ok(-pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            if *t == 0.0 {
                0.0
            } else {
                t * (p + LOG_EPSILON).ln()
            }
        })
        .sum::<f64>())
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` with every query attending to every key.
pub fn dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor, NnError> {
    if k.rows() == 0 {
        return Err(NnError::NoKeys);
    }
    if q.cols() == 0 {
        return Err(NnError::InvalidSpec("d_k must be positive".into()));
    }
    let store = ParameterStore::new(0);
    let mut tape = Tape::new(&store);
    let (qv, kv, vv) = (
        tape.input(q.clone()),
        tape.input(k.clone()),
        tape.input(v.clone()),
    );
    let keys: Vec<usize> = (0..k.rows()).collect();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let out = tape.attention(qv, kv, vv, 1, scale, KeySets::shared(q.rows(), &keys))?;
    Ok(tape.value(out).clone())
}

/// Column-wise maximum over the rows flagged valid.
pub fn max_pool_agg(x: &Tensor, valid: &[bool]) -> Result<Vec<f64>, NnError> {
    if valid.len() != x.rows() {
        return Err(NnError::Shape {
            context: "max_pool_agg",
            expected: format!("{} validity flags", x.rows()),
            actual: format!("{}", valid.len()),
        });
    }
    let mut out: Option<Vec<f64>> = None;
    for (r, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
        match &mut out {
            None => out = Some(x.row(r).to_vec()),
            Some(acc) => acc.iter_mut().zip(x.row(r)).for_each(|(a, b)| *a = a.max(*b)),
        }
    }
    out.ok_or(NnError::NoValidRows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_attention(q: &[f64], keys: &[[f64; 2]], values: &[[f64; 2]]) -> [f64; 2] {
        let s: Vec<f64> = keys
            .iter()
            .map(|k| (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt())
            .collect();
        let e: Vec<f64> = s.iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        let mut out = [0.0; 2];
        for (w, v) in e.iter().zip(values) {
            out[0] += w / z * v[0];
            out[1] += w / z * v[1];
        }
        out
    }

    #[test]
    fn softmax_symmetric_pair() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[101.0, 102.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_n() {
        for n in [2usize, 10, 100] {
            let pred = vec![1.0 / n as f64; n];
            let mut target = vec![0.0; n];
            target[n / 2] = 1.0;
            let ce = cross_entropy(&pred, &target).unwrap();
            assert!((ce - (n as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_confident_is_zero() {
        let ce = cross_entropy(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        // the only residue is the log epsilon, up to rounding of 1 + 1e-12
        assert_eq!(ce, -(1.0 + LOG_EPSILON).ln());
        assert!(ce.abs() <= 1e-12 + 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_negative_target() {
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], &[-0.5, 1.5]),
            Err(NnError::InvalidDistribution(_))
        ));
    }

    #[test]
    fn single_key_returns_value() {
        let q = Tensor::from_rows(&[[0.3, -1.0]]).unwrap();
        let k = Tensor::from_rows(&[[2.0, 5.0]]).unwrap();
        let v = Tensor::from_rows(&[[7.0, -3.0]]).unwrap();
        let out = dot_product_attention(&q, &k, &v).unwrap();
        assert_eq!(out.data(), &[7.0, -3.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor::from_rows(&[[0.3, -1.0]]).unwrap();
        let k = Tensor::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[[2.0, 0.0], [4.0, 2.0]]).unwrap();
        let out = dot_product_attention(&q, &k, &v).unwrap();
        assert!((out.get(0, 0) - 3.0).abs() < 1e-12);
        assert!((out.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_matches_hand_softmax() {
        let keys = [[0.5, -0.2], [1.5, 0.7]];
        let values = [[1.0, 2.0], [-3.0, 0.5]];
        let queries = [[0.9, 0.1], [-0.4, 1.2]];
        let out = dot_product_attention(
            &Tensor::from_rows(&queries).unwrap(),
            &Tensor::from_rows(&keys).unwrap(),
            &Tensor::from_rows(&values).unwrap(),
        )
        .unwrap();
        for (i, q) in queries.iter().enumerate() {
            let expect = naive_attention(q, &keys, &values);
            assert!((out.get(i, 0) - expect[0]).abs() < 1e-12);
            assert!((out.get(i, 1) - expect[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_keys_is_an_error() {
        let q = Tensor::zeros(1, 2);
        let e = Tensor::zeros(0, 2);
        assert!(matches!(dot_product_attention(&q, &e, &e), Err(NnError::NoKeys)));
    }

    #[test]
    fn max_pool_matches_column_scan() {
        let rows = [
            [0.1, -2.0, 3.0],
            [1.5, 0.0, -1.0],
            [-0.3, 4.0, 2.0],
            [9.0, -9.0, 0.0],
            [0.2, 0.3, 0.4],
        ];
        let x = Tensor::from_rows(&rows).unwrap();
        let valid = [true, true, true, false, true];
        let pooled = max_pool_agg(&x, &valid).unwrap();
        for c in 0..3 {
            let oracle = rows
                .iter()
                .zip(valid)
                .filter(|(_, v)| *v)
                .map(|(r, _)| r[c])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(pooled[c], oracle);
        }
    }

    #[test]
    fn max_pool_single_and_duplicates() {
        let x = Tensor::from_rows(&[[1.0, -2.0]]).unwrap();
        assert_eq!(max_pool_agg(&x, &[true]).unwrap(), vec![1.0, -2.0]);
        let d = Tensor::from_rows(&[[1.0, -2.0], [1.0, -2.0]]).unwrap();
        assert_eq!(max_pool_agg(&d, &[true, true]).unwrap(), vec![1.0, -2.0]);
        assert!(matches!(
            max_pool_agg(&d, &[false, false]),
            Err(NnError::NoValidRows)
        ));
    }
}
