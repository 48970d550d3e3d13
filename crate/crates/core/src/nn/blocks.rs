use serde::{Deserialize, Serialize};

use super::{Init, KeySets, NnError, ParamId, ParameterStore, Tape, Var};

/// Widths shared by every block of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    /// Number of affine layers in every MLP.
    pub depth: usize,
}

impl Default for BlockSpec {
    fn default() -> Self {
        Self {
            embedding_size: 128,
            hidden_size: 256,
            num_heads: 4,
            depth: 2,
        }
    }
}

impl BlockSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.embedding_size == 0 || self.hidden_size == 0 || self.depth == 0 {
            return Err(NnError::InvalidSpec(format!("{self:?} has a zero size")));
        }
        if self.num_heads == 0 || !self.embedding_size.is_multiple_of(self.num_heads) {
            return Err(NnError::InvalidSpec(format!(
                "embedding size {} not divisible by {} heads",
                self.embedding_size, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, d_in: usize, d_out: usize) -> Result<Self, NnError> {
        Ok(Self {
            w: store.register(format!("{name}.w"), d_in, d_out, Init::Xavier)?,
            b: store.register(format!("{name}.b"), 1, d_out, Init::Zeros)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, NnError> {
        tape.linear(x, self.w, Some(self.b))
    }
}

/// Stack of affine layers with ReLU between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        spec: &BlockSpec,
    ) -> Result<Self, NnError> {
        let mut layers = Vec::with_capacity(spec.depth);
        for i in 0..spec.depth {
            let a = if i == 0 { d_in } else { spec.hidden_size };
            let b = if i + 1 == spec.depth {
                d_out
            } else {
                spec.hidden_size
            };
            layers.push(Linear::new(store, &format!("{name}.fc{i}"), a, b)?);
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, NnError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            h = layer.forward(tape, h)?;
        }
        Ok(h)
    }
}

/// Projected multi-head attention with an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        d_query: usize,
        d_key: usize,
        spec: &BlockSpec,
    ) -> Result<Self, NnError> {
        spec.validate()?;
        let e = spec.embedding_size;
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), d_query, e)?,
            key: Linear::new(store, &format!("{name}.k"), d_key, e)?,
            value: Linear::new(store, &format!("{name}.v"), d_key, e)?,
            output: Linear::new(store, &format!("{name}.o"), e, e)?,
            heads: spec.num_heads,
            width: e,
        })
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    /// Projected queries, keys and values.
    pub fn project(&self, tape: &mut Tape<'_>, q: Var, k: Var, v: Var) -> Result<(Var, Var, Var), NnError> {
        Ok((
            self.query.forward(tape, q)?,
            self.key.forward(tape, k)?,
            self.value.forward(tape, v)?,
        ))
    }

    /// Scaled attention over already projected inputs, then the output
    /// projection. Rows without keys yield the output bias only, so callers
    /// that need exact zeros mask afterwards.
    pub fn attend(
        &self,
        tape: &mut Tape<'_>,
        (qp, kp, vp): (Var, Var, Var),
        keys: KeySets,
    ) -> Result<Var, NnError> {
        let scale = 1.0 / (self.head_width() as f64).sqrt();
        let ctx = tape.attention(qp, kp, vp, self.heads, scale, keys)?;
        self.output.forward(tape, ctx)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        q: Var,
        k: Var,
        v: Var,
        keys: KeySets,
    ) -> Result<Var, NnError> {
        let proj = self.project(tape, q, k, v)?;
        self.attend(tape, proj, keys)
    }

    /// Every query attends to the keys with `key_mask[j] == true`. When no
    /// key survives the result is exactly zero.
    pub fn forward_masked(
        &self,
        tape: &mut Tape<'_>,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
    ) -> Result<Var, NnError> {
        let kept: Vec<usize> = key_mask
            .iter()
            .enumerate()
            .filter_map(|(j, &m)| m.then_some(j))
            .collect();
        let n = tape.value(q).rows();
        let out = self.forward(tape, q, k, v, KeySets::shared(n, &kept))?;
        if kept.is_empty() {
            return tape.mask_rows(out, &vec![false; n]);
        }
        Ok(out)
    }
}

/// `LN(Q + FFN(MHA(Q, K, V)))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub ffn: Mlp,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        d_key: usize,
        spec: &BlockSpec,
    ) -> Result<Self, NnError> {
        let e = spec.embedding_size;
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), e, d_key, spec)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), e, e, spec)?,
            gamma: store.register(format!("{name}.ln.gamma"), 1, e, Init::Ones)?,
            beta: store.register(format!("{name}.ln.beta"), 1, e, Init::Zeros)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, q: Var, kv: Var, keys: KeySets) -> Result<Var, NnError> {
        let n = tape.value(q).rows();
        let empty: Vec<bool> = (0..n).map(|i| !keys.row(i).is_empty()).collect();
        let mut attn = self.attention.forward(tape, q, kv, kv, keys)?;
        if empty.iter().any(|k| !k) {
            attn = tape.mask_rows(attn, &empty)?;
        }
        let ff = self.ffn.forward(tape, attn)?;
        let res = tape.add(q, ff)?;
        tape.layer_norm(res, self.gamma, self.beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{check_gradients, GradCheckConfig, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    fn small_spec() -> BlockSpec {
        BlockSpec {
            embedding_size: 8,
            hidden_size: 12,
            num_heads: 2,
            depth: 2,
        }
    }

    #[test]
    fn spec_rejects_indivisible_heads() {
        let spec = BlockSpec {
            num_heads: 3,
            ..BlockSpec::default()
        };
        assert!(spec.validate().is_err());
        assert!(BlockSpec::default().validate().is_ok());
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut store = ParameterStore::new(3);
        let mlp = Mlp::new(&mut store, "m", 5, 4, &BlockSpec::default()).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new(&store);
        let x = tape.input(random(&mut rng, 3, 5));
        let y = mlp.forward(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let mut store = ParameterStore::new(3);
        let spec = BlockSpec {
            depth: 1,
            ..BlockSpec::default()
        };
        let mlp = Mlp::new(&mut store, "m", 6, 6, &spec).unwrap();
        store.assign(mlp.layers[0].w, Tensor::identity(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random(&mut rng, 4, 6);
        let mut tape = Tape::new(&store);
        let x = tape.input(input.clone());
        let y = mlp.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn mlp_shape_error_names_both_sides() {
        let mut store = ParameterStore::new(3);
        let mlp = Mlp::new(&mut store, "m", 5, 4, &BlockSpec::default()).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(2, 7));
        let msg = mlp.forward(&mut tape, x).unwrap_err().to_string();
        assert!(
            msg.contains("input width 5") && msg.contains("input width 7"),
            "{msg}"
        );
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut store = ParameterStore::new(5);
        let mlp = Mlp::new(&mut store, "m", 5, 3, &BlockSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, 4, 5);
        let probe = random(&mut rng, 4, 3);
        let report = check_gradients(
            &mut store,
            |tape| {
                let xv = tape.input(x.clone());
                let y = mlp.forward(tape, xv)?;
                tape.dot(y, probe.clone())
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_relative_error() < 1e-4, "{report}");
    }

    #[test]
    fn linear_gradients_are_exact() {
        let mut store = ParameterStore::new(5);
        let lin = Linear::new(&mut store, "l", 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, 2, 4);
        let probe = random(&mut rng, 2, 3);
        let report = check_gradients(
            &mut store,
            |tape| {
                let xv = tape.input(x.clone());
                let y = lin.forward(tape, xv)?;
                tape.dot(y, probe.clone())
            },
            &GradCheckConfig::exhaustive(),
        )
        .unwrap();
        assert!(report.max_relative_error() < 1e-10, "{report}");
    }

    #[test]
    fn all_true_mask_equals_unmasked() {
        let spec = small_spec();
        let mut store = ParameterStore::new(4);
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 8, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, kv) = (random(&mut rng, 3, 8), random(&mut rng, 5, 8));
        let mut tape = Tape::new(&store);
        let (qv, kvv) = (tape.input(q), tape.input(kv));
        let a = mha.forward_masked(&mut tape, qv, kvv, kvv, &[true; 5]).unwrap();
        let all: Vec<usize> = (0..5).collect();
        let b = mha
            .forward(&mut tape, qv, kvv, kvv, KeySets::shared(3, &all))
            .unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn masked_key_value_is_ignored() {
        let spec = small_spec();
        let mut store = ParameterStore::new(4);
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 8, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(&mut rng, 3, 8);
        let k = random(&mut rng, 4, 8);
        let v = random(&mut rng, 4, 8);
        let mut v2 = v.clone();
        v2.row_mut(2).iter_mut().for_each(|x| *x += 100.0);
        let mask = [true, true, false, true];
        let run = |v: &Tensor| {
            let mut tape = Tape::new(&store);
            let (qv, kv, vv) = (
                tape.input(q.clone()),
                tape.input(k.clone()),
                tape.input(v.clone()),
            );
            let out = mha.forward_masked(&mut tape, qv, kv, vv, &mask).unwrap();
            tape.value(out).clone()
        };
        assert!(run(&v).max_abs_diff(&run(&v2)) <= 1e-12);
    }

    #[test]
    fn fully_masked_attention_is_zero() {
        let spec = small_spec();
        let mut store = ParameterStore::new(4);
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 8, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new(&store);
        let q = tape.input(random(&mut rng, 2, 8));
        let kv = tape.input(random(&mut rng, 3, 8));
        let out = mha.forward_masked(&mut tape, q, kv, kv, &[false; 3]).unwrap();
        assert!(tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_head_equals_projected_dot_product_attention() {
        let spec = BlockSpec {
            embedding_size: 6,
            hidden_size: 8,
            num_heads: 1,
            depth: 2,
        };
        let mut store = ParameterStore::new(6);
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 5, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random(&mut rng, 3, 4);
        let kv = random(&mut rng, 4, 5);
        let affine = |x: &Tensor, l: &Linear| {
            let mut y = x.matmul(store.get(l.w)).unwrap();
            for r in 0..y.rows() {
                for (o, b) in y.row_mut(r).iter_mut().zip(store.get(l.b).data()) {
                    *o += b;
                }
            }
            y
        };
        let ctx = crate::nn::dot_product_attention(
            &affine(&q, &mha.query),
            &affine(&kv, &mha.key),
            &affine(&kv, &mha.value),
        )
        .unwrap();
        let oracle = affine(&ctx, &mha.output);
        let mut tape = Tape::new(&store);
        let (qv, kvv) = (tape.input(q), tape.input(kv));
        let out = mha.forward_masked(&mut tape, qv, kvv, kvv, &[true; 4]).unwrap();
        assert!(tape.value(out).max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn transformer_output_shape_and_normalisation() {
        let spec = BlockSpec::default();
        let mut store = ParameterStore::new(8);
        let layer = TransformerLayer::new(&mut store, "t", 128, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new(&store);
        let q = tape.input(random(&mut rng, 5, 128));
        let kv = tape.input(random(&mut rng, 7, 128));
        let keys: Vec<usize> = (0..7).collect();
        let out = layer
            .forward(&mut tape, q, kv, KeySets::shared(5, &keys))
            .unwrap();
        let y = tape.value(out);
        assert_eq!(y.shape(), (5, 128));
        // gamma = 1 and beta = 0 at initialisation, so rows are the raw normalised values
        for r in 0..5 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 128.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 128.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6, "{mean} {var}");
        }
    }

    #[test]
    fn transformer_gradients_match_finite_differences() {
        let spec = small_spec();
        let mut store = ParameterStore::new(10);
        let layer = TransformerLayer::new(&mut store, "t", 6, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = random(&mut rng, 3, 8);
        let kv = random(&mut rng, 4, 6);
        let probe = random(&mut rng, 3, 8);
        let keys = KeySets::from_rows(&[vec![0, 1], vec![1, 2, 3], vec![3]]);
        let report = check_gradients(
            &mut store,
            |tape| {
                let (qv, kvv) = (tape.input(q.clone()), tape.input(kv.clone()));
                let y = layer.forward(tape, qv, kvv, keys.clone())?;
                tape.dot(y, probe.clone())
            },
            &GradCheckConfig::exhaustive(),
        )
        .unwrap();
        assert!(report.max_relative_error() < 1e-4, "{report}");
    }
}
