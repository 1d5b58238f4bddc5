//! Token clustering: a two-layer MLP scores every patch token against `k` clusters
//! plus an "unclustered" slot, each cluster is averaged into one representative, and
//! the sequence shrinks to `[CLS; kept tokens; representatives]`.

use crate::autodiff::{Tape, Var};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::params::{InitRng, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{EncoderConfig, Linear, TokenSequence};

/// `Linear(D, H) -> ReLU -> Linear(H, k + 1)` over patch tokens; CLS is excluded.
#[derive(Clone, Debug)]
pub struct ClusterMlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub clusters: usize,
}

impl ClusterMlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut InitRng, cfg: &EncoderConfig) -> Result<Self> {
        if cfg.clusters == 0 {
            return Err(Error::Config("cluster MLP needs k >= 1".into()));
        }
        Ok(ClusterMlp {
            fc1: Linear::new(store, rng, "cluster.fc1", cfg.embed_dim, cfg.cluster_hidden)?,
            fc2: Linear::new(store, rng, "cluster.fc2", cfg.cluster_hidden, cfg.clusters + 1)?,
            clusters: cfg.clusters,
        })
    }

    /// `N x (k+1)` logits for the patch rows of `z`.
    pub fn logits<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, z: &TokenSequence) -> Result<Var> {
        if !z.is_full() {
            return Err(Error::IndexMismatch {
                expected: z.full_len(),
                actual: z.len,
            });
        }
        let patches = tape.slice_rows(z.tokens, 1, z.len - 1)?;
        let h = self.fc1.forward(store, tape, patches)?;
        let h = tape.relu(h);
        self.fc2.forward(store, tape, h)
    }
}

/// Row-wise argmax; ties go to the lowest column, so an all-equal row is unclustered.
pub fn assign<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Bookkeeping for one image's clustering: which patch went where.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentIndex {
    pub assignment: Vec<usize>,
    pub clusters: usize,
    /// Patch indices with assignment 0, ascending.
    pub kept: Vec<usize>,
    /// `members[c - 1]` lists the patches of cluster `c`, ascending; may be empty.
    pub members: Vec<Vec<usize>>,
}

impl AssignmentIndex {
    pub fn new(assignment: Vec<usize>, clusters: usize) -> Result<Self> {
        if let Some(&bad) = assignment.iter().find(|&&a| a > clusters) {
            return Err(Error::Input(format!("assignment {bad} exceeds k = {clusters}")));
        }
        let mut kept = Vec::new();
        let mut members = vec![Vec::new(); clusters];
        for (i, &a) in assignment.iter().enumerate() {
            if a == 0 {
                kept.push(i);
            } else {
                members[a - 1].push(i);
            }
        }
        Ok(AssignmentIndex {
            assignment,
            clusters,
            kept,
            members,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_kept(&self) -> usize {
        self.kept.len()
    }

    pub fn num_clustered(&self) -> usize {
        self.num_patches() - self.num_kept()
    }

    /// Non-empty clusters, in cluster-id order.
    pub fn active_groups(&self) -> Vec<Vec<usize>> {
        self.members.iter().filter(|m| !m.is_empty()).cloned().collect()
    }

    pub fn num_active(&self) -> usize {
        self.members.iter().filter(|m| !m.is_empty()).count()
    }

    /// `1 + N_unclustered + k_active`.
    pub fn reduced_len(&self) -> usize {
        1 + self.num_kept() + self.num_active()
    }

    /// Clustered patches in concatenated member order; the row order of residuals.
    pub fn clustered_order(&self) -> Vec<usize> {
        self.members.iter().flatten().copied().collect()
    }

    /// For each entry of `clustered_order`, the row of its representative.
    pub fn expand_slots(&self) -> Vec<usize> {
        let mut slots = Vec::with_capacity(self.num_clustered());
        for (slot, m) in self.members.iter().filter(|m| !m.is_empty()).enumerate() {
            slots.extend(std::iter::repeat_n(slot, m.len()));
        }
        slots
    }

    /// True when kept and members together cover `0..N` exactly once.
    pub fn is_partition(&self) -> bool {
        let mut seen = vec![false; self.num_patches()];
        for &i in self.kept.iter().chain(self.members.iter().flatten()) {
            if i >= seen.len() || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.iter().all(|&s| s)
    }
}

/// Output of the cluster block for one image.
#[derive(Clone, Debug)]
pub struct Clustered {
    pub reduced: TokenSequence,
    pub index: AssignmentIndex,
    /// Pre-merge values of the clustered tokens, `N_clustered x D`; `None` if nothing merged.
    pub residuals: Option<Var>,
}

/// Cluster means and residuals: `(representatives k_active x D, residuals N_clustered x D)`.
pub fn aggregate<T: Scalar>(tape: &mut Tape<T>, z: &TokenSequence, index: &AssignmentIndex) -> Result<Option<(Var, Var)>> {
    if z.len != 1 + index.num_patches() {
        return Err(Error::IndexMismatch {
            expected: 1 + index.num_patches(),
            actual: z.len,
        });
    }
    if index.num_clustered() == 0 {
        return Ok(None);
    }
    let shift = |v: &[usize]| v.iter().map(|&i| i + 1).collect::<Vec<_>>();
    let groups: Vec<Vec<usize>> = index.active_groups().iter().map(|g| shift(g)).collect();
    let reps = tape.group_mean(z.tokens, &groups)?;
    let residuals = tape.gather_rows(z.tokens, &shift(&index.clustered_order()))?;
    Ok(Some((reps, residuals)))
}

/// `[CLS; kept; representatives]`. Returns `z` itself when nothing is clustered.
pub fn reduce<T: Scalar>(tape: &mut Tape<T>, z: &TokenSequence, reps: Option<Var>, index: &AssignmentIndex) -> Result<TokenSequence> {
    let Some(reps) = reps else {
        return Ok(*z);
    };
    let mut rows = Vec::with_capacity(1 + index.num_kept());
    rows.push(0);
    rows.extend(index.kept.iter().map(|&i| i + 1));
    let head = tape.gather_rows(z.tokens, &rows)?;
    let tokens = tape.concat_rows(&[head, reps])?;
    Ok(TokenSequence {
        tokens,
        len: index.reduced_len(),
        grid: z.grid,
    })
}

/// Assigns, aggregates and reduces in one go.
pub fn cluster_tokens<T: Scalar>(tape: &mut Tape<T>, z: &TokenSequence, index: AssignmentIndex) -> Result<Clustered> {
    let parts = aggregate(tape, z, &index)?;
    let (reps, residuals) = match parts {
        Some((r, res)) => (Some(r), Some(res)),
        None => (None, None),
    };
    let reduced = reduce(tape, z, reps, &index)?;
    Ok(Clustered {
        reduced,
        index,
        residuals,
    })
}

/// Colors for cluster ids; 0 is black, ids past the table wrap around from 1.
pub const PALETTE: [[u8; 3]; 9] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn palette_color(id: usize) -> [u8; 3] {
    if id == 0 {
        PALETTE[0]
    } else {
        PALETTE[1 + (id - 1) % (PALETTE.len() - 1)]
    }
}

/// Paints each patch of a `grid` with its label's palette color, `scale` pixels per patch.
pub fn label_image(labels: &[usize], grid: (usize, usize), scale: usize) -> Result<Image> {
    if labels.len() != grid.0 * grid.1 || scale == 0 {
        return Err(Error::IndexMismatch {
            expected: grid.0 * grid.1,
            actual: labels.len(),
        });
    }
    let mut img = Image::new(grid.0 * scale, grid.1 * scale);
    for y in 0..img.height {
        for x in 0..img.width {
            let c = palette_color(labels[(y / scale) * grid.1 + x / scale]);
            img.set_pixel(y, x, c.map(|v| v as f64 / 255.0));
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_rng;
    use crate::vit::ModelScale;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn cfg(d: usize, k: usize) -> EncoderConfig {
        EncoderConfig {
            image_height: 16,
            image_width: 16,
            patch_size: 4,
            embed_dim: d,
            num_layers: 2,
            num_heads: 1,
            ffn_hidden: 8,
            num_classes: 2,
            clusters: k,
            injection_point: 1,
            cluster_hidden: 7,
            refine_skip: false,
            scale: ModelScale::Custom,
        }
    }

    fn seq(tape: &mut Tape<f64>, n: usize, d: usize, seed: u64) -> TokenSequence {
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(seed);
        let t = Tensor::from_fn(&[1 + n, d], |_| rng.random::<f64>() * 2.0 - 1.0);
        TokenSequence {
            tokens: tape.constant(t),
            len: 1 + n,
            grid: (1, n),
        }
    }

    #[test]
    fn zero_mlp_leaves_everything_unclustered() {
        let c = cfg(4, 3);
        let mut store = ParamStore::<f64>::new();
        let mlp = ClusterMlp::new(&mut store, &mut init_rng(0), &c).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let mut z = seq(&mut tape, 16, 4, 1);
        z.grid = (4, 4);
        let l = mlp.logits(&store, &mut tape, &z).unwrap();
        assert_eq!(tape.shape(l), &[16, 4]);
        assert!(assign(tape.value(l)).iter().all(|&a| a == 0));
    }

    #[test]
    fn logits_match_straight_line_mlp() {
        let c = cfg(5, 2);
        let mut store = ParamStore::<f64>::new();
        let mlp = ClusterMlp::new(&mut store, &mut init_rng(4), &c).unwrap();
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(9);
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random::<f64>() - 0.5);
        }
        let mut tape = Tape::new();
        let mut z = seq(&mut tape, 16, 5, 2);
        z.grid = (4, 4);
        let l = mlp.logits(&store, &mut tape, &z).unwrap();
        let x = tape.value(z.tokens).clone();
        let w1 = &store.get(mlp.fc1.weight).value;
        let b1 = &store.get(mlp.fc1.bias).value;
        let w2 = &store.get(mlp.fc2.weight).value;
        let b2 = &store.get(mlp.fc2.bias).value;
        for n in 0..16 {
            let h: Vec<f64> = (0..7)
                .map(|j| (b1.data()[j] + (0..5).map(|i| x.at(n + 1, i) * w1.at(i, j)).sum::<f64>()).max(0.0))
                .collect();
            for o in 0..3 {
                let want = b2.data()[o] + (0..7).map(|j| h[j] * w2.at(j, o)).sum::<f64>();
                assert!((tape.value(l).at(n, o) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_examples() {
        let t: Tensor<f64> = Tensor::matrix(2, 4, &[0.1, 3.0, -1.0, -1.0, 2.0, 2.0, 0.0, 0.0]).unwrap();
        assert_eq!(assign(&t), vec![1, 0]);
    }

    #[test]
    fn mean_of_two_tokens() {
        let mut tape = Tape::<f64>::new();
        let t = Tensor::matrix(3, 2, &[9.0, 9.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = TokenSequence {
            tokens: tape.constant(t),
            len: 3,
            grid: (1, 2),
        };
        let idx = AssignmentIndex::new(vec![2, 2], 3).unwrap();
        let (reps, res) = aggregate(&mut tape, &z, &idx).unwrap().unwrap();
        assert_eq!(tape.value(reps).data(), &[2.0, 3.0]);
        assert_eq!(tape.value(res).data(), &[1.0, 2.0, 3.0, 4.0]);
        let red = reduce(&mut tape, &z, Some(reps), &idx).unwrap();
        assert_eq!(red.len, 2);
        assert_eq!(tape.value(red.tokens).data(), &[9.0, 9.0, 2.0, 3.0]);
    }

    #[test]
    fn nothing_clustered_is_identity() {
        let mut tape = Tape::<f64>::new();
        let z = seq(&mut tape, 8, 3, 5);
        let out = cluster_tokens(&mut tape, &z, AssignmentIndex::new(vec![0; 8], 3).unwrap()).unwrap();
        assert_eq!(out.reduced, z);
        assert!(out.residuals.is_none());
    }

    #[test]
    fn reduced_length_arithmetic() {
        let mut a = vec![0; 64];
        for (i, v) in a.iter_mut().enumerate().take(40) {
            *v = 1 + i % 3;
        }
        let idx = AssignmentIndex::new(a, 3).unwrap();
        assert_eq!(idx.reduced_len(), 28);
        let mut tape = Tape::<f64>::new();
        let z = seq(&mut tape, 64, 2, 0);
        let out = cluster_tokens(&mut tape, &z, idx).unwrap();
        assert_eq!(tape.shape(out.reduced.tokens), &[28, 2]);
        assert_eq!(out.reduced.len, 28);
    }

    #[test]
    fn empty_clusters_are_skipped() {
        let idx = AssignmentIndex::new(vec![3, 0, 3, 1], 4).unwrap();
        assert_eq!(idx.num_active(), 2);
        assert_eq!(idx.clustered_order(), vec![3, 0, 2]);
        assert_eq!(idx.expand_slots(), vec![0, 1, 1]);
        assert!(AssignmentIndex::new(vec![5], 4).is_err());
    }

    #[test]
    fn representative_gradient_is_one_over_size() {
        let mut tape = Tape::<f64>::new();
        let t = Tensor::from_fn(&[5, 2], |i| i as f64);
        let leaf = tape.leaf(t);
        let z = TokenSequence {
            tokens: leaf,
            len: 5,
            grid: (2, 2),
        };
        let idx = AssignmentIndex::new(vec![1, 0, 1, 1], 1).unwrap();
        let (reps, _) = aggregate(&mut tape, &z, &idx).unwrap().unwrap();
        let s = tape.sum(reps);
        tape.backward(s).unwrap();
        let g = tape.grad(leaf).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(g, &[0.0, 0.0, third, third, 0.0, 0.0, third, third, third, third]);
    }

    #[test]
    fn palette_is_fixed() {
        let img = label_image(&[0, 1, 2, 9], (2, 2), 2).unwrap();
        assert_eq!(img.pixel(0, 0), [0.0; 3]);
        assert_eq!(img.pixel(1, 3), [230.0 / 255.0, 25.0 / 255.0, 75.0 / 255.0]);
        assert_eq!(palette_color(9), palette_color(1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn prop_argmax_matches_scan(rows in 1usize..10, cols in 1usize..7, seed in any::<u64>()) {
            let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(seed);
            // small integer range so ties are common
            let t: Tensor<f64> = Tensor::from_fn(&[rows, cols], |_| rng.random_range(0..3) as f64);
            let got = assign(&t);
            for r in 0..rows {
                let m = t.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let first = t.row(r).iter().position(|&v| v == m).unwrap();
                prop_assert_eq!(got[r], first);
            }
        }

        #[test]
        fn prop_group_means(assign_v in prop::collection::vec(0usize..4, 64), seed in any::<u64>()) {
            let mut tape = Tape::<f64>::new();
            let z = seq(&mut tape, 64, 3, seed);
            let idx = AssignmentIndex::new(assign_v.clone(), 3).unwrap();
            prop_assert!(idx.is_partition());
            let x = tape.value(z.tokens).clone();
            match aggregate(&mut tape, &z, &idx).unwrap() {
                None => prop_assert!(assign_v.iter().all(|&a| a == 0)),
                Some((reps, _)) => {
                    let mut slot = 0;
                    for c in 1..=3 {
                        let mem: Vec<usize> = (0..64).filter(|&i| assign_v[i] == c).collect();
                        if mem.is_empty() { continue; }
                        for d in 0..3 {
                            let want = mem.iter().map(|&i| x.at(i + 1, d)).sum::<f64>() / mem.len() as f64;
                            prop_assert!((tape.value(reps).at(slot, d) - want).abs() < 1e-14);
                        }
                        slot += 1;
                    }
                }
            }
        }
    }
}
