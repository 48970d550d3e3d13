//! Per-view encoders: a subgraph over each instance's vectors, max-pooled
//! into one attribute per instance, then a global interaction graph. In
//! cross-view mode every global layer selects each instance's neighborhood
//! from both views' coarse attention weights and both branches attend over
//! the same union.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::geometry::ViewId;
use crate::nn::{BlockSpec, KeySets, Mlp, MultiHeadAttention, NnError, ParameterStore, Tape, Tensor, Var};
use crate::scene::{VectorizedView, FEATURE_WIDTH};

/// Global-graph neighborhood rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GraphMode {
    /// Each branch attends over its own visible instances.
    Plain,
    /// Coarse-to-fine selection shared by both branches.
    CrossView { epsilon: f64 },
}

/// BEV meters are multiplied by this before entering the network so that
/// coordinates are O(1), like the image-normalized FPV ones. With raw meters
/// and zero-initialized biases every ReLU kink starts on a ray through the
/// agent, and Adam steps are far too small to move the kinks out to goal
/// distances. The trajectory generators read goals in meters, as they emit
/// meters.
pub const BEV_INPUT_SCALE: f64 = 0.1;

/// Valid vectors of one view, ready for the subgraph.
#[derive(Clone, Debug)]
pub struct ViewInput {
    pub rows: Tensor,
    pub segments: Vec<Range<usize>>,
    pub visible: Vec<bool>,
}

impl ViewInput {
    pub fn from_view(v: &VectorizedView) -> Self {
        let (rows, segments) = v.packed();
        Self {
            rows,
            segments,
            visible: v.instance_visible.clone(),
        }
    }

    /// Multiplies the start and end coordinates of every vector by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        let cols = self.rows.cols();
        for row in self.rows.data_mut().chunks_mut(cols) {
            row[..4].iter_mut().for_each(|x| *x *= factor);
        }
        self
    }

    pub fn num_instances(&self) -> usize {
        self.segments.len()
    }
}

#[derive(Clone, Debug)]
struct GraphLayer {
    attention: MultiHeadAttention,
    mlp: Mlp,
}

impl GraphLayer {
    fn new(store: &mut ParameterStore, name: &str, d_in: usize, spec: &BlockSpec) -> Result<Self, NnError> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), d_in, d_in, spec)?,
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                d_in + spec.embedding_size,
                spec.embedding_size,
                spec,
            )?,
        })
    }

    /// `MLP([x; MHA(x, x, x)])`, with a zero attention term for rows
    /// without keys.
    fn finish(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        proj: (Var, Var, Var),
        keys: KeySets,
    ) -> Result<Var, NnError> {
        let rows = keys.num_queries();
        let has_keys: Vec<bool> = (0..rows).map(|i| !keys.row(i).is_empty()).collect();
        let mut attn = self.attention.attend(tape, proj, keys)?;
        if has_keys.iter().any(|k| !k) {
            attn = tape.mask_rows(attn, &has_keys)?;
        }
        let cat = tape.concat_cols(x, attn)?;
        self.mlp.forward(tape, cat)
    }
}

/// One view's encoder.
#[derive(Clone, Debug)]
pub struct Branch {
    pub view: ViewId,
    subgraph: Vec<GraphLayer>,
    global: Vec<GraphLayer>,
    sparse_scorer: Mlp,
}

impl Branch {
    pub fn new(
        store: &mut ParameterStore,
        view: ViewId,
        subgraph_layers: usize,
        global_layers: usize,
        spec: &BlockSpec,
    ) -> Result<Self, NnError> {
        let e = spec.embedding_size;
        let name = format!("encoder.{}", view.as_str());
        let subgraph = (0..subgraph_layers)
            .map(|l| {
                let d_in = if l == 0 { FEATURE_WIDTH } else { e };
                GraphLayer::new(store, &format!("{name}.subgraph.{l}"), d_in, spec)
            })
            .collect::<Result<_, _>>()?;
        let global = (0..global_layers)
            .map(|l| GraphLayer::new(store, &format!("{name}.global.{l}"), e, spec))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            view,
            subgraph,
            global,
            sparse_scorer: Mlp::new(store, &format!("{name}.sparse_scorer"), e, 1, spec)?,
        })
    }

    pub fn global_layers(&self) -> usize {
        self.global.len()
    }

    /// Per-instance attributes `a_i`: vectors attend within their instance
    /// for every layer, then max-pool. Instances without valid vectors get
    /// a zero row.
    pub fn subgraph_forward(&self, tape: &mut Tape<'_>, input: &ViewInput) -> Result<Var, NnError> {
        let mut v = tape.input(input.rows.clone());
        let keys = KeySets::segments(&input.segments);
        for layer in &self.subgraph {
            let proj = layer.attention.project(tape, v, v, v)?;
            v = layer.finish(tape, v, proj, keys.clone())?;
        }
        tape.segment_max(v, &input.segments)
    }

    /// Logits of the lane rows `lanes` of the state features, `L x 1`.
    pub fn sparse_logits(&self, tape: &mut Tape<'_>, p: Var, lanes: &[usize]) -> Result<Var, NnError> {
        let rows = tape.gather_rows(p, lanes)?;
        self.sparse_scorer.forward(tape, rows)
    }
}

/// Both branches.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub bev: Branch,
    pub fpv: Branch,
}

impl Encoder {
    pub fn new(
        store: &mut ParameterStore,
        subgraph_layers: usize,
        global_layers: usize,
        spec: &BlockSpec,
    ) -> Result<Self, NnError> {
        Ok(Self {
            bev: Branch::new(store, ViewId::Bev, subgraph_layers, global_layers, spec)?,
            fpv: Branch::new(store, ViewId::Fpv, subgraph_layers, global_layers, spec)?,
        })
    }

    pub fn branch(&self, view: ViewId) -> &Branch {
        match view {
            ViewId::Bev => &self.bev,
            ViewId::Fpv => &self.fpv,
        }
    }
}

/// Row-stochastic coarse weights of one view at one layer, `N x N`, zero
/// outside each row's support.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProfile {
    pub n: usize,
    pub weights: Vec<f64>,
    /// `ln α`, `-inf` outside the support.
    pub log_weights: Vec<f64>,
}

impl AttentionProfile {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }
}

/// Coarse weights `α_ij ∝ exp(q_i·k_j / H)` over visible `j != i`, from
/// projected queries and keys with `heads` heads. Averaging the per-head
/// logits `q_i^h·k_j^h` gives the `1/H` factor. Rows of invisible
/// instances are empty.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize, visible: &[bool]) -> AttentionProfile {
    let n = q.rows();
    let mut weights = vec![0.0; n * n];
    let mut log_weights = vec![f64::NEG_INFINITY; n * n];
    for i in 0..n {
        if !visible[i] {
            continue;
        }
        let support: Vec<usize> = (0..n).filter(|&j| j != i && visible[j]).collect();
        if support.is_empty() {
            continue;
        }
        let logits: Vec<f64> = support
            .iter()
            .map(|&j| crate::nn::vec_dot(q.row(i), k.row(j)) / heads as f64)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        for (&j, l) in support.iter().zip(&logits) {
            log_weights[i * n + j] = l - lse;
            weights[i * n + j] = (l - lse).exp();
        }
    }
    AttentionProfile {
        n,
        weights,
        log_weights,
    }
}

/// Instances `j` with `α_ij > ε` for query row `i`. The comparison runs on
/// log-weights so that `ε = 0` selects the whole support even where `α`
/// underflows.
pub fn coarse_select(profile: &AttentionProfile, i: usize, epsilon: f64) -> BTreeSet<usize> {
    let threshold = epsilon.ln();
    (0..profile.n)
        .filter(|&j| {
            let lw = profile.log_weights[i * profile.n + j];
            lw > f64::NEG_INFINITY && lw > threshold
        })
        .collect()
}

/// `a ∪ b`, or `fallback` when the union is empty.
pub fn union_instance_set(
    a: &BTreeSet<usize>,
    b: &BTreeSet<usize>,
    fallback: &BTreeSet<usize>,
) -> BTreeSet<usize> {
    let u: BTreeSet<usize> = a.union(b).copied().collect();
    if u.is_empty() {
        fallback.clone()
    } else {
        u
    }
}

/// Output of the global graph.
#[derive(Clone, Debug)]
pub struct GlobalOutput {
    pub bev: Var,
    pub fpv: Var,
    /// `[bev, fpv]` coarse profiles per layer; empty in plain mode.
    pub profiles: Vec<[AttentionProfile; 2]>,
    /// Selected union per layer and query row; empty in plain mode.
    pub selections: Vec<Vec<BTreeSet<usize>>>,
}

fn plain_keys(visible: &[bool]) -> KeySets {
    let rows: Vec<Vec<usize>> = (0..visible.len())
        .map(|i| (0..visible.len()).filter(|&j| j != i && visible[j]).collect())
        .collect();
    KeySets::from_rows(&rows)
}

/// Runs both branches' global layers in lockstep.
///
/// Invisible rows are zeroed after every layer, so `P` rows of instances
/// that a view cannot see stay exactly zero.
pub fn global_graph_forward(
    tape: &mut Tape<'_>,
    encoder: &Encoder,
    a_bev: Var,
    a_fpv: Var,
    visible: [&[bool]; 2],
    mode: GraphMode,
) -> Result<GlobalOutput, NnError> {
    let n = visible[0].len();
    for (v, flags) in visible.iter().enumerate() {
        let rows = tape.value(if v == 0 { a_bev } else { a_fpv }).rows();
        if flags.len() != n || rows != n {
            return Err(NnError::Shape {
                context: "global_graph_forward",
                expected: format!("{n} instances in both views"),
                actual: format!("{rows} rows, {} flags", flags.len()),
            });
        }
    }
    let mut a = [a_bev, a_fpv];
    let mut profiles = Vec::new();
    let mut selections = Vec::new();
    for l in 0..encoder.bev.global.len() {
        let layers = [&encoder.bev.global[l], &encoder.fpv.global[l]];
        let mut proj = Vec::with_capacity(2);
        for v in 0..2 {
            proj.push(layers[v].attention.project(tape, a[v], a[v], a[v])?);
        }
        let keys: [KeySets; 2] = match mode {
            GraphMode::Plain => [plain_keys(visible[0]), plain_keys(visible[1])],
            GraphMode::CrossView { epsilon } => {
                let prof: [AttentionProfile; 2] = [0, 1].map(|v| {
                    attention_weights(
                        tape.value(proj[v].0),
                        tape.value(proj[v].1),
                        layers[v].attention.heads,
                        visible[v],
                    )
                });
                let mut sel = Vec::with_capacity(n);
                let mut rows = [Vec::with_capacity(n), Vec::with_capacity(n)];
                for i in 0..n {
                    let fallback: BTreeSet<usize> = (0..n).filter(|&j| j != i && visible[0][j]).collect();
                    let u = union_instance_set(
                        &coarse_select(&prof[0], i, epsilon),
                        &coarse_select(&prof[1], i, epsilon),
                        &fallback,
                    );
                    for v in 0..2 {
                        rows[v].push(u.iter().copied().filter(|&j| visible[v][j]).collect::<Vec<_>>());
                    }
                    sel.push(u);
                }
                profiles.push(prof);
                selections.push(sel);
                [KeySets::from_rows(&rows[0]), KeySets::from_rows(&rows[1])]
            }
        };
        let [kb, kf] = keys;
        for (v, k) in [kb, kf].into_iter().enumerate() {
            let out = layers[v].finish(tape, a[v], proj[v], k)?;
            a[v] = if visible[v].iter().all(|x| *x) {
                out
            } else {
                tape.mask_rows(out, visible[v])?
            };
        }
    }
    Ok(GlobalOutput {
        bev: a[0],
        fpv: a[1],
        profiles,
        selections,
    })
}

/// Cross entropy of the lane scores against a one-hot `labels` vector.
/// Entries with `support == false` are excluded from the softmax.
pub fn sparse_goal_loss(
    tape: &mut Tape<'_>,
    logits: Var,
    support: &[bool],
    labels: &[bool],
) -> Result<Var, NnError> {
    let positives: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| l.then_some(i))
        .collect();
    if positives.len() != 1 {
        return Err(NnError::InvalidDistribution(format!(
            "sparse labels need exactly one positive, got {}",
            positives.len()
        )));
    }
    tape.softmax_cross_entropy(logits, Some(support), positives[0])
}

#[cfg(test)]
#[allow(clippy::needless_range_loop, clippy::single_range_in_vec_init)]
mod tests {
    use super::*;
    use crate::nn::{check_gradients, GradCheckConfig};
    use crate::scene::{generate_synthetic_scene, vectorize_bev, vectorize_fpv, GenConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_spec() -> BlockSpec {
        BlockSpec {
            embedding_size: 8,
            hidden_size: 12,
            num_heads: 2,
            depth: 2,
        }
    }

    fn inputs(seed: u64) -> (ViewInput, ViewInput) {
        let s = generate_synthetic_scene(seed, &GenConfig::default()).unwrap();
        (
            ViewInput::from_view(&vectorize_bev(&s)),
            ViewInput::from_view(&vectorize_fpv(&s)),
        )
    }

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn equal_attributes_split_evenly() {
        let q = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let p = attention_weights(&q, &q, 1, &[true; 3]);
        assert!((p.row(0)[1] - 0.5).abs() < 1e-15 && (p.row(0)[2] - 0.5).abs() < 1e-15);
        assert_eq!(p.row(0)[0], 0.0);
    }

    #[test]
    fn three_instance_weights_match_formula() {
        let a = [[0.2, -0.5], [1.0, 0.3], [-0.7, 0.9]];
        let t = Tensor::from_rows(&a).unwrap();
        let p = attention_weights(&t, &t, 1, &[true; 3]);
        for i in 0..3 {
            let others: Vec<usize> = (0..3).filter(|&j| j != i).collect();
            let e: Vec<f64> = others
                .iter()
                .map(|&j| (a[i][0] * a[j][0] + a[i][1] * a[j][1]).exp())
                .collect();
            let z: f64 = e.iter().sum();
            for (&j, ej) in others.iter().zip(&e) {
                assert!((p.row(i)[j] - ej / z).abs() < 1e-12);
            }
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn head_average_divides_logits() {
        let q = Tensor::from_rows(&[[1.0, 0.0, 2.0, 0.0], [0.5, 1.0, -1.0, 3.0]]).unwrap();
        let k = Tensor::from_rows(&[[0.3, 0.2, 0.1, 0.0], [1.0, -1.0, 0.5, 0.5], [0.0, 0.0, 0.0, 1.0]]);
        let k = k.unwrap();
        let q3 = Tensor::from_rows(&[q.row(0), q.row(1), q.row(1)]).unwrap();
        let p = attention_weights(&q3, &k, 2, &[true; 3]);
        let l = |i: usize, j: usize| (0..4).map(|c| q3.get(i, c) * k.get(j, c)).sum::<f64>() / 2.0;
        let z = l(0, 1).exp() + l(0, 2).exp();
        assert!((p.row(0)[1] - l(0, 1).exp() / z).abs() < 1e-12);
    }

    #[test]
    fn invisible_rows_and_columns_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&mut rng, 4, 3);
        let vis = [true, false, true, true];
        let p = attention_weights(&t, &t, 1, &vis);
        for i in 0..4 {
            assert_eq!(p.row(i)[1], 0.0);
            if vis[i] {
                assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        assert!(p.row(1).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn coarse_selection_examples() {
        let p = AttentionProfile {
            n: 3,
            weights: vec![0.6, 0.3, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            log_weights: [0.6f64, 0.3, 0.1]
                .iter()
                .map(|w| w.ln())
                .chain([f64::NEG_INFINITY; 6])
                .collect(),
        };
        assert_eq!(coarse_select(&p, 0, 0.25), BTreeSet::from([0, 1]));
        assert_eq!(coarse_select(&p, 0, 0.0), BTreeSet::from([0, 1, 2]));
        assert!(coarse_select(&p, 0, 0.6).is_empty());
    }

    #[test]
    fn zero_epsilon_selects_underflowed_weights() {
        let q = Tensor::from_rows(&[[100.0], [100.0], [-100.0]]).unwrap();
        let p = attention_weights(&q, &q, 1, &[true; 3]);
        assert_eq!(p.row(0)[2], 0.0);
        assert_eq!(coarse_select(&p, 0, 0.0), BTreeSet::from([1, 2]));
    }

    #[test]
    fn union_examples() {
        let full = BTreeSet::from([0, 1, 2]);
        let (a, b) = (BTreeSet::from([1]), BTreeSet::from([2]));
        assert_eq!(union_instance_set(&a, &b, &full), BTreeSet::from([1, 2]));
        assert_eq!(
            union_instance_set(&BTreeSet::new(), &BTreeSet::new(), &full),
            full
        );
        assert_eq!(union_instance_set(&a, &a, &full), a);
    }

    fn encode(
        store: &ParameterStore,
        enc: &Encoder,
        bev: &ViewInput,
        fpv: &ViewInput,
        mode: GraphMode,
    ) -> (Tensor, Tensor) {
        let mut tape = Tape::new(store);
        let ab = enc.bev.subgraph_forward(&mut tape, bev).unwrap();
        let af = enc.fpv.subgraph_forward(&mut tape, fpv).unwrap();
        let out = global_graph_forward(&mut tape, enc, ab, af, [&bev.visible, &fpv.visible], mode).unwrap();
        (tape.value(out.bev).clone(), tape.value(out.fpv).clone())
    }

    #[test]
    fn shapes_and_invisible_rows() {
        let spec = BlockSpec::default();
        let mut store = ParameterStore::new(1);
        let enc = Encoder::new(&mut store, 6, 6, &spec).unwrap();
        let (bev, mut fpv) = inputs(3);
        fpv.visible[0] = false;
        fpv.segments[0] = 0..0;
        let (pb, pf) = encode(&store, &enc, &bev, &fpv, GraphMode::CrossView { epsilon: 0.05 });
        assert_eq!(pb.shape(), (bev.num_instances(), 128));
        assert_eq!(pf.shape(), (bev.num_instances(), 128));
        assert!(pf.row(0).iter().all(|x| *x == 0.0));
        assert!(pb.all_finite() && pf.all_finite());
    }

    #[test]
    fn zero_epsilon_equals_plain() {
        let spec = tiny_spec();
        let mut store = ParameterStore::new(2);
        let enc = Encoder::new(&mut store, 2, 3, &spec).unwrap();
        for seed in 0..5 {
            let (bev, fpv) = inputs(seed);
            let plain = encode(&store, &enc, &bev, &fpv, GraphMode::Plain);
            let cross = encode(&store, &enc, &bev, &fpv, GraphMode::CrossView { epsilon: 0.0 });
            assert!(plain.0.max_abs_diff(&cross.0) <= 1e-6);
            assert!(plain.1.max_abs_diff(&cross.1) <= 1e-6);
        }
    }

    #[test]
    fn plain_bev_ignores_fpv_inputs() {
        let spec = tiny_spec();
        let mut store = ParameterStore::new(2);
        let enc = Encoder::new(&mut store, 2, 2, &spec).unwrap();
        let (bev, fpv) = inputs(7);
        let mut other = fpv.clone();
        other.rows.data_mut().iter_mut().for_each(|x| *x = *x * 0.5 + 0.1);
        let a = encode(&store, &enc, &bev, &fpv, GraphMode::Plain);
        let b = encode(&store, &enc, &bev, &other, GraphMode::Plain);
        assert_eq!(a.0, b.0);
        assert_ne!(a.1, b.1);
    }

    #[test]
    fn single_instance_has_zero_attention_term() {
        let spec = tiny_spec();
        let mut store = ParameterStore::new(2);
        let enc = Encoder::new(&mut store, 1, 2, &spec).unwrap();
        let input = ViewInput {
            rows: Tensor::from_rows(&[[0.1, 0.2, 0.3, 0.4, 1.0, 0.0, 0.0, 0.5, 1.0, 0.0]]).unwrap(),
            segments: vec![0..1],
            visible: vec![true],
        };
        let (pb, pf) = encode(&store, &enc, &input, &input, GraphMode::Plain);
        assert!(pb.all_finite() && pf.all_finite());
        // with no neighbors the layer is MLP([a; 0])
        let mut tape = Tape::new(&store);
        let a = enc.bev.subgraph_forward(&mut tape, &input).unwrap();
        let mut h = a;
        for layer in &enc.bev.global {
            let z = tape.input(Tensor::zeros(1, 8));
            let cat = tape.concat_cols(h, z).unwrap();
            h = layer.mlp.forward(&mut tape, cat).unwrap();
        }
        assert!(tape.value(h).max_abs_diff(&pb) < 1e-12);
    }

    #[test]
    fn excluded_instances_do_not_influence_fine_attention() {
        // a tiny threshold profile with one dominant neighbor
        let spec = BlockSpec {
            embedding_size: 4,
            hidden_size: 6,
            num_heads: 1,
            depth: 2,
        };
        let mut store = ParameterStore::new(5);
        let layer = GraphLayer::new(&mut store, "g", 4, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, 4, 4);
        let keys = KeySets::from_rows(&[vec![1], vec![0, 2], vec![1], vec![0]]);
        let run = |a: &Tensor| {
            let mut tape = Tape::new(&store);
            let x = tape.input(a.clone());
            let proj = layer.attention.project(&mut tape, x, x, x).unwrap();
            let y = layer.finish(&mut tape, x, proj, keys.clone()).unwrap();
            tape.value(y).clone()
        };
        let base = run(&a);
        let mut moved = a.clone();
        moved.row_mut(3).iter_mut().for_each(|x| *x += 10.0);
        let after = run(&moved);
        // rows 0..3 never attend to instance 3
        for i in 0..3 {
            assert_eq!(base.row(i), after.row(i));
        }
    }

    #[test]
    fn sparse_loss_examples() {
        let store = ParameterStore::new(0);
        let mut tape = Tape::new(&store);
        let uniform = tape.input(Tensor::zeros(5, 1));
        let l = sparse_goal_loss(
            &mut tape,
            uniform,
            &[true; 5],
            &[false, false, true, false, false],
        )
        .unwrap();
        assert!((tape.value(l).item() + (0.2 + crate::nn::LOG_EPSILON).ln()).abs() < 1e-12);
        let forced = tape.input(Tensor::from_vec(3, 1, vec![-1e3, 1e3, -1e3]).unwrap());
        let l = sparse_goal_loss(&mut tape, forced, &[true; 3], &[false, true, false]).unwrap();
        assert!(tape.value(l).item().abs() <= 1e-9);
        assert!(sparse_goal_loss(&mut tape, forced, &[true; 3], &[true, true, false]).is_err());
        assert!(sparse_goal_loss(&mut tape, forced, &[true; 3], &[false; 3]).is_err());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let spec = tiny_spec();
        let mut store = ParameterStore::new(9);
        let enc = Encoder::new(&mut store, 2, 2, &spec).unwrap();
        let (bev, fpv) = inputs(1);
        let lanes: Vec<usize> = (0..bev.num_instances()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probe = random_tensor(&mut rng, bev.num_instances(), 8);
        let report = check_gradients(
            &mut store,
            |tape| {
                let ab = enc.bev.subgraph_forward(tape, &bev)?;
                let af = enc.fpv.subgraph_forward(tape, &fpv)?;
                let out = global_graph_forward(
                    tape,
                    &enc,
                    ab,
                    af,
                    [&bev.visible, &fpv.visible],
                    GraphMode::CrossView { epsilon: 0.05 },
                )?;
                let logits = enc.bev.sparse_logits(tape, out.bev, &lanes)?;
                let mut labels = vec![false; lanes.len()];
                labels[1] = true;
                let l1 = sparse_goal_loss(tape, logits, &vec![true; lanes.len()], &labels)?;
                let d = tape.dot(out.fpv, probe.clone())?;
                tape.weighted_sum(&[(l1, 1.0), (d, 0.1)])
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report}");
    }
}
