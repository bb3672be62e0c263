//! Single-head scaled dot-product attention and the label-knowledge mapper
//! built on it: label tokens query the full-cloud seed features.

use rand::Rng;

use crate::encoders::{LabelTokenGrid, Linear};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Query/key/value projections, each `C×C` with a bias.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl AttentionParams {
    pub fn new(prefix: &str) -> Self {
        AttentionParams {
            query: Linear::new(format!("{prefix}.q")),
            key: Linear::new(format!("{prefix}.k")),
            value: Linear::new(format!("{prefix}.v")),
        }
    }

    pub fn init(&self, store: &mut ParamStore, channels: usize, rng: &mut impl Rng) {
        for l in [&self.query, &self.key, &self.value] {
            l.init(store, channels, channels, rng);
        }
    }

    /// Identity projections with zero bias.
    pub fn init_identity(&self, store: &mut ParamStore, channels: usize) {
        for l in [&self.query, &self.key, &self.value] {
            store.insert(l.w(), Tensor::identity(channels));
            store.insert(l.b(), Tensor::zeros(1, channels));
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    /// Row-stochastic `queries × keys` weights.
    pub weights: Var,
}

/// Scaled dot-product attention `softmax(q kᵀ / √d) v`, where `q`, `k` and
/// `v` are linear projections of `queries`, `keys_values` and `keys_values`,
/// and `d` is the projected key width.
pub fn attention(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    queries: Var,
    keys_values: Var,
) -> Result<AttentionOutput> {
    let (q_in, kv_in) = (tape.value(queries), tape.value(keys_values));
    if q_in.cols() != kv_in.cols() || kv_in.rows() == 0 {
        return Err(Error::Shape {
            op: "attention",
            lhs: q_in.shape(),
            rhs: kv_in.shape(),
        });
    }
    let q = params.query.forward(tape, store, queries)?;
    let k = params.key.forward(tape, store, keys_values)?;
    let v = params.value.forward(tape, store, keys_values)?;
    let d_k = tape.value(k).cols() as f64;
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / d_k.sqrt())?;
    let weights = tape.softmax_rows(scaled)?;
    let output = tape.matmul(weights, v)?;
    Ok(AttentionOutput { output, weights })
}

/// The label-enhanced representation and the attention that produced it.
#[derive(Clone, Copy, Debug)]
pub struct FusedRepresentation {
    pub features: Var,
    pub attention_weights: Var,
}

/// Cross-attention with label tokens as queries and the auxiliary
/// backbone's seed features as keys and values. Both operands must be
/// `seeds × C`.
pub fn lkm_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    tokens: &LabelTokenGrid,
    seed_features: Var,
) -> Result<FusedRepresentation> {
    let (q, s) = (tape.value(tokens.tokens), tape.value(seed_features));
    if !q.same_shape(s) {
        return Err(Error::Shape {
            op: "lkm_fuse",
            lhs: q.shape(),
            rhs: s.shape(),
        });
    }
    let out = attention(tape, store, params, tokens.tokens, seed_features)?;
    Ok(FusedRepresentation {
        features: out.output,
        attention_weights: out.weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check_where;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Triple-loop attention with identity projections.
    fn oracle(q: &Tensor, kv: &Tensor) -> Tensor {
        let c = q.cols();
        let mut out = Tensor::zeros(q.rows(), c);
        for i in 0..q.rows() {
            let mut scores = vec![0.0; kv.rows()];
            for (j, s) in scores.iter_mut().enumerate() {
                for d in 0..c {
                    *s += q.get(i, d) * kv.get(j, d);
                }
                *s /= (c as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                let w = (s - m).exp() / z;
                for d in 0..c {
                    out.set(i, d, out.get(i, d) + w * kv.get(j, d));
                }
            }
        }
        out
    }

    fn grid(tape: &mut Tape, t: Tensor) -> LabelTokenGrid {
        let n = t.rows();
        LabelTokenGrid {
            tokens: tape.constant(t).unwrap(),
            source: vec![None; n],
        }
    }

    fn identity(c: usize) -> (AttentionParams, ParamStore) {
        let p = AttentionParams::new("lkm");
        let mut s = ParamStore::new();
        p.init_identity(&mut s, c);
        (p, s)
    }

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        crate::numerics::uniform(rows, cols, 1.0, rng)
    }

    #[test]
    fn single_seed_returns_its_value_row() {
        let (p, s) = identity(3);
        let mut tape = Tape::new();
        let g = grid(&mut tape, Tensor::from_rows(&[[0.3, -0.1, 2.0]]).unwrap());
        let v = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let seeds = tape.constant(v.clone()).unwrap();
        let out = lkm_fuse(&mut tape, &s, &p, &g, seeds).unwrap();
        assert_eq!(tape.value(out.features), &v);
    }

    #[test]
    fn zero_query_averages_values() {
        let (p, s) = identity(2);
        let mut tape = Tape::new();
        let g = grid(&mut tape, Tensor::zeros(3, 2));
        let v = Tensor::from_rows(&[[1.0, 4.0], [2.0, -1.0], [6.0, 0.0]]).unwrap();
        let seeds = tape.constant(v).unwrap();
        let out = lkm_fuse(&mut tape, &s, &p, &g, seeds).unwrap();
        for r in 0..3 {
            assert!((tape.value(out.features).get(r, 0) - 3.0).abs() < 1e-15);
            assert!((tape.value(out.features).get(r, 1) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (p, s) = identity(3);
        for _ in 0..20 {
            let q = random(4, 3, &mut rng);
            let kv = random(4, 3, &mut rng);
            let mut tape = Tape::new();
            let g = grid(&mut tape, q.clone());
            let seeds = tape.constant(kv.clone()).unwrap();
            let out = lkm_fuse(&mut tape, &s, &p, &g, seeds).unwrap();
            assert!(tape.value(out.features).max_abs_diff(&oracle(&q, &kv)) <= 1e-12);
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::new("lkm");
        let mut s = ParamStore::new();
        p.init(&mut s, 5, &mut rng);
        let mut tape = Tape::new();
        let g = grid(&mut tape, random(6, 5, &mut rng));
        let seeds = tape.constant(random(6, 5, &mut rng)).unwrap();
        let out = lkm_fuse(&mut tape, &s, &p, &g, seeds).unwrap();
        let w = tape.value(out.attention_weights);
        assert_eq!(w.shape(), vec![6, 6]);
        for r in 0..6 {
            let total: f64 = w.row(r).iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
            assert!(w.row(r).iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn permuting_keys_and_values_together() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, s) = identity(3);
        let q = random(4, 3, &mut rng);
        let kv = random(5, 3, &mut rng);
        let order = [3usize, 0, 4, 1, 2];
        let permuted = Tensor::from_rows(&order.map(|i| kv.row(i).to_vec())).unwrap();
        let run = |kv: Tensor| {
            let mut tape = Tape::new();
            let qv = tape.constant(q.clone()).unwrap();
            let kvv = tape.constant(kv).unwrap();
            let out = attention(&mut tape, &s, &p, qv, kvv).unwrap();
            tape.value(out.output).clone()
        };
        assert!(run(kv.clone()).max_abs_diff(&run(permuted.clone())) <= 1e-12);
        assert!(run(permuted.clone()).max_abs_diff(&oracle(&q, &permuted)) <= 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (p, s) = identity(3);
        let mut tape = Tape::new();
        let g = grid(&mut tape, Tensor::zeros(4, 3));
        let seeds = tape.constant(Tensor::zeros(5, 3)).unwrap();
        assert!(matches!(
            lkm_fuse(&mut tape, &s, &p, &g, seeds),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn gradients_through_projections_and_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = AttentionParams::new("lkm");
        let mut s = ParamStore::new();
        p.init(&mut s, 3, &mut rng);
        s.insert("in.q", random(4, 3, &mut rng));
        s.insert("in.kv", random(4, 3, &mut rng));
        let target = random(4, 3, &mut rng);
        let build = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
            let q = tape.param(s, "in.q")?;
            let kv = tape.param(s, "in.kv")?;
            let g = LabelTokenGrid {
                tokens: q,
                source: vec![None; 4],
            };
            let out = lkm_fuse(tape, s, &p, &g, kv)?;
            let t = tape.constant(target.clone())?;
            let prod = tape.mul(out.features, t)?;
            tape.sum(prod)
        };
        // A key bias shifts every score in a row equally, so softmax
        // cancels it exactly; its finite differences are pure noise.
        let mut tape = Tape::new();
        let loss = build(&mut tape, &s).unwrap();
        let grads = tape.backward(loss, &s).unwrap();
        assert!(grads["lkm.k.b"].data().iter().all(|g| g.abs() <= 1e-12));
        let err = finite_diff_check_where(build, &s, |n| n != "lkm.k.b", 1e-5).unwrap();
        assert!(err <= 1e-5, "err = {err}");
    }
}
