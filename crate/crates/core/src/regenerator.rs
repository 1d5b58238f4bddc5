//! Restores the full token sequence after the suffix blocks: representatives are copied
//! back to their member positions, each copy is refined against the token's pre-merge
//! value, and all rows are put back in their original order.

use crate::autodiff::{Tape, Var};
use crate::cluster::AssignmentIndex;
use crate::error::{Error, Result};
use crate::params::{InitRng, ParamStore};
use crate::scalar::Scalar;
use crate::vit::{EncoderConfig, Linear, TokenSequence};

/// The three row groups of a reduced sequence.
#[derive(Clone, Copy, Debug)]
pub struct SplitParts {
    pub cls: Var,
    pub kept: Option<Var>,
    pub reps: Option<Var>,
}

/// `Linear(2D, D) -> GELU -> Linear(D, D)` applied to `[residual | representative]`.
#[derive(Clone, Debug)]
pub struct Regenerator {
    pub fc1: Linear,
    pub fc2: Linear,
    pub skip: bool,
}

impl Regenerator {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut InitRng, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Regenerator {
            fc1: Linear::new(store, rng, "regen.fc1", 2 * d, d)?,
            fc2: Linear::new(store, rng, "regen.fc2", d, d)?,
            skip: cfg.refine_skip,
        })
    }

    /// Refines `N_clustered` rows; with `skip` set, the expanded representative is added back.
    pub fn refine<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, residuals: Var, expanded: Var) -> Result<Var> {
        if tape.shape(residuals) != tape.shape(expanded) {
            return Err(Error::shape("refine", tape.shape(residuals), tape.shape(expanded)));
        }
        let x = tape.concat_cols(&[residuals, expanded])?;
        let h = self.fc1.forward(store, tape, x)?;
        let h = tape.gelu(h);
        let out = self.fc2.forward(store, tape, h)?;
        if self.skip {
            tape.add(out, expanded)
        } else {
            Ok(out)
        }
    }

    /// Full regeneration. With nothing clustered the input is returned untouched.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        z: &TokenSequence,
        index: &AssignmentIndex,
        residuals: Option<Var>,
    ) -> Result<TokenSequence> {
        let parts = split(tape, z, index)?;
        let (Some(reps), Some(residuals)) = (parts.reps, residuals) else {
            if index.num_clustered() == 0 {
                return Ok(*z);
            }
            return Err(Error::Input("clustered tokens without residuals".into()));
        };
        let expanded = expand(tape, reps, index)?;
        let refined = self.refine(store, tape, residuals, expanded)?;
        reassemble(tape, parts.cls, parts.kept, Some(refined), index, z.grid)
    }
}

/// Inverse of the reduce concatenation: `1 / N_unclustered / k_active` rows.
pub fn split<T: Scalar>(tape: &mut Tape<T>, z: &TokenSequence, index: &AssignmentIndex) -> Result<SplitParts> {
    let rows = tape.shape(z.tokens)[0];
    if z.len != index.reduced_len() || rows != z.len {
        return Err(Error::IndexMismatch {
            expected: index.reduced_len(),
            actual: rows,
        });
    }
    let (nk, na) = (index.num_kept(), index.num_active());
    let cls = tape.slice_rows(z.tokens, 0, 1)?;
    let kept = if nk > 0 { Some(tape.slice_rows(z.tokens, 1, nk)?) } else { None };
    let reps = if na > 0 { Some(tape.slice_rows(z.tokens, 1 + nk, na)?) } else { None };
    Ok(SplitParts { cls, kept, reps })
}

/// One copy of the representative per clustered token, in residual row order.
pub fn expand<T: Scalar>(tape: &mut Tape<T>, reps: Var, index: &AssignmentIndex) -> Result<Var> {
    tape.gather_rows(reps, &index.expand_slots())
}

/// Puts CLS, kept and refined rows back at their original positions.
pub fn reassemble<T: Scalar>(
    tape: &mut Tape<T>,
    cls: Var,
    kept: Option<Var>,
    refined: Option<Var>,
    index: &AssignmentIndex,
    grid: (usize, usize),
) -> Result<TokenSequence> {
    let n = index.num_patches();
    let count = |v: Option<Var>, tape: &Tape<T>| v.map_or(0, |v| tape.shape(v)[0]);
    let (nk, nc) = (count(kept, tape), count(refined, tape));
    if nk != index.num_kept() || nc != index.num_clustered() {
        return Err(Error::IndexMismatch {
            expected: n,
            actual: nk + nc,
        });
    }
    // source row (in [cls; kept; refined]) of every output position
    let mut source = vec![usize::MAX; 1 + n];
    source[0] = 0;
    for (r, &i) in index.kept.iter().chain(index.members.iter().flatten()).enumerate() {
        assert_eq!(source[1 + i], usize::MAX, "patch {i} written twice");
        source[1 + i] = 1 + r;
    }
    assert!(source.iter().all(|&s| s != usize::MAX), "patch left empty");

    let parts: Vec<Var> = [Some(cls), kept, refined].into_iter().flatten().collect();
    let stacked = tape.concat_rows(&parts)?;
    let tokens = tape.gather_rows(stacked, &source)?;
    Ok(TokenSequence { tokens, len: 1 + n, grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::cluster_tokens;
    use crate::params::init_rng;
    use crate::tensor::Tensor;
    use crate::vit::ModelScale;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn seq(tape: &mut Tape<f64>, n: usize, d: usize, seed: u64) -> TokenSequence {
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(seed);
        let t = Tensor::from_fn(&[1 + n, d], |_| rng.random::<f64>() * 2.0 - 1.0);
        TokenSequence {
            tokens: tape.leaf(t),
            len: 1 + n,
            grid: (1, n),
        }
    }

    fn cfg(d: usize) -> EncoderConfig {
        EncoderConfig {
            image_height: 8,
            image_width: 8,
            patch_size: 2,
            embed_dim: d,
            num_layers: 2,
            num_heads: 1,
            ffn_hidden: 4,
            num_classes: 2,
            clusters: 2,
            injection_point: 1,
            cluster_hidden: 5,
            refine_skip: false,
            scale: ModelScale::Custom,
        }
    }

    #[test]
    fn split_counts() {
        let mut a = vec![0; 64];
        for (i, v) in a.iter_mut().enumerate().take(40) {
            *v = 1 + i % 3;
        }
        let idx = AssignmentIndex::new(a, 3).unwrap();
        let mut tape = Tape::<f64>::new();
        let z = seq(&mut tape, 64, 2, 0);
        let c = cluster_tokens(&mut tape, &z, idx).unwrap();
        let p = split(&mut tape, &c.reduced, &c.index).unwrap();
        assert_eq!(tape.shape(p.kept.unwrap())[0], 24);
        assert_eq!(tape.shape(p.reps.unwrap())[0], 3);

        let none = AssignmentIndex::new(vec![0; 64], 3).unwrap();
        let p = split(&mut tape, &z, &none).unwrap();
        assert!(p.reps.is_none());
        assert_eq!(tape.shape(p.kept.unwrap())[0], 64);

        let wrong = TokenSequence { len: 27, ..c.reduced };
        assert!(matches!(split(&mut tape, &wrong, &c.index), Err(Error::IndexMismatch { .. })));
    }

    #[test]
    fn split_inverts_reduce() {
        let mut tape = Tape::<f64>::new();
        let z = seq(&mut tape, 6, 3, 3);
        let idx = AssignmentIndex::new(vec![2, 0, 2, 1, 0, 0], 2).unwrap();
        let c = cluster_tokens(&mut tape, &z, idx.clone()).unwrap();
        let p = split(&mut tape, &c.reduced, &idx).unwrap();
        let x = tape.value(z.tokens).clone();
        assert_eq!(tape.value(p.cls).data(), x.row(0));
        assert_eq!(tape.value(p.kept.unwrap()).row(0), x.row(2));
        assert_eq!(tape.value(p.kept.unwrap()).row(2), x.row(6));
        assert_eq!(tape.value(p.reps.unwrap()).row(0), x.row(4));
    }

    #[test]
    fn expand_copies_and_gradient_counts_members() {
        let mut tape = Tape::<f64>::new();
        let reps = tape.leaf(Tensor::matrix(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut a = vec![1, 1, 2, 2, 2, 2, 2];
        a.push(0);
        let idx = AssignmentIndex::new(a, 2).unwrap();
        let e = expand(&mut tape, reps, &idx).unwrap();
        assert_eq!(tape.shape(e), &[7, 2]);
        assert_eq!(tape.value(e).row(1), &[1.0, 2.0]);
        assert_eq!(tape.value(e).row(6), &[3.0, 4.0]);
        let s = tape.sum(e);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(reps).unwrap(), &[2.0, 2.0, 5.0, 5.0]);
    }

    #[test]
    fn expand_gradient_matches_finite_difference() {
        let idx = AssignmentIndex::new(vec![1, 0, 1, 1, 2], 2).unwrap();
        let reps = Tensor::from_fn(&[2, 3], |i| 0.3 * i as f64 - 0.4);
        let rep = crate::gradcheck::check_op(|t, v| expand(t, v[0], &idx), &[reps], 1e-5, 1).unwrap();
        assert!(rep.max_rel_err < 1e-8, "{rep:?}");
    }

    #[test]
    fn zero_weights_refine_to_zero() {
        let c = cfg(3);
        let mut store = ParamStore::<f64>::new();
        let r = Regenerator::new(&mut store, &mut init_rng(1), &c).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[4, 3], 2.0));
        let b = tape.constant(Tensor::full(&[4, 3], -1.0));
        let out = r.refine(&store, &mut tape, a, b).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        let short = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(r.refine(&store, &mut tape, a, short).is_err());
    }

    #[test]
    fn refine_matches_straight_line() {
        let c = cfg(3);
        let mut store = ParamStore::<f64>::new();
        let r = Regenerator::new(&mut store, &mut init_rng(2), &c).unwrap();
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(3);
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random::<f64>() - 0.5);
        }
        let res = Tensor::from_fn(&[4, 3], |_| rng.random::<f64>());
        let exp = Tensor::from_fn(&[4, 3], |_| rng.random::<f64>());
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(res.clone()), tape.constant(exp.clone()));
        let out = r.refine(&store, &mut tape, a, b).unwrap();
        let w1 = &store.get(r.fc1.weight).value;
        let b1 = &store.get(r.fc1.bias).value;
        let w2 = &store.get(r.fc2.weight).value;
        let b2 = &store.get(r.fc2.bias).value;
        for n in 0..4 {
            let cat: Vec<f64> = res.row(n).iter().chain(exp.row(n)).copied().collect();
            let h: Vec<f64> = (0..3)
                .map(|j| crate::autodiff::gelu_scalar(b1.data()[j] + (0..6).map(|i| cat[i] * w1.at(i, j)).sum::<f64>()))
                .collect();
            for o in 0..3 {
                let want = b2.data()[o] + (0..3).map(|j| h[j] * w2.at(j, o)).sum::<f64>();
                assert!((tape.value(out).at(n, o) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pass_through_is_the_same_node() {
        let c = cfg(3);
        let mut store = ParamStore::<f64>::new();
        let r = Regenerator::new(&mut store, &mut init_rng(1), &c).unwrap();
        let mut tape = Tape::new();
        let z = seq(&mut tape, 5, 3, 1);
        let before = tape.len();
        let idx = AssignmentIndex::new(vec![0; 5], 2).unwrap();
        let out = r.forward(&store, &mut tape, &z, &idx, None).unwrap();
        assert_eq!(out, z);
        // the split slices are the only nodes created
        assert!(tape.len() - before <= 2);
    }

    #[test]
    fn checkerboard_reassembly() {
        let n = 8;
        let a: Vec<usize> = (0..n).map(|i| if i % 2 == 0 { 0 } else { 1 + (i / 2) % 2 }).collect();
        let idx = AssignmentIndex::new(a, 2).unwrap();
        let mut tape = Tape::<f64>::new();
        let cls = tape.constant(Tensor::full(&[1, 1], -1.0));
        let kept = tape.constant(Tensor::from_fn(&[4, 1], |i| 100.0 + i as f64));
        let refined = tape.constant(Tensor::from_fn(&[4, 1], |i| 200.0 + i as f64));
        let out = reassemble(&mut tape, cls, Some(kept), Some(refined), &idx, (2, 4)).unwrap();
        // cluster 1 = {1, 5}, cluster 2 = {3, 7} so refined rows map 1,5,3,7
        let table = [-1.0, 100.0, 200.0, 101.0, 202.0, 102.0, 201.0, 103.0, 203.0];
        assert_eq!(tape.value(out.tokens).data(), &table);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn prop_round_trip_with_identity_suffix(
            (n, k, a) in (1usize..40, 1usize..6).prop_flat_map(|(n, k)| (Just(n), Just(k), prop::collection::vec(0..=k, n))),
            seed in any::<u64>()
        ) {
            let mut tape = Tape::<f64>::new();
            let z = seq(&mut tape, n, 2, seed);
            let idx = AssignmentIndex::new(a, k).unwrap();
            let c = cluster_tokens(&mut tape, &z, idx.clone()).unwrap();
            let p = split(&mut tape, &c.reduced, &idx).unwrap();
            let x = tape.value(z.tokens).clone();
            // kept rows come back untouched
            if let Some(kept) = p.kept {
                for (r, &i) in idx.kept.iter().enumerate() {
                    prop_assert_eq!(tape.value(kept).row(r), x.row(i + 1));
                }
            }
            // putting the residuals back instead of refined tokens must give the input
            let out = reassemble(&mut tape, p.cls, p.kept, c.residuals, &idx, z.grid).unwrap();
            prop_assert_eq!(tape.value(out.tokens), &x);
        }
    }
}
