//! The full segmenter: prefix blocks, optional cluster block, suffix blocks on the
//! reduced sequence, regenerator, and segmentation head.

use crate::autodiff::{Tape, Var};
use crate::cluster::{assign, cluster_tokens, AssignmentIndex, ClusterMlp};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::params::{init_rng, ParamStore};
use crate::regenerator::Regenerator;
use crate::scalar::Scalar;
use crate::vit::{Encoder, EncoderConfig};

/// XORed into the model seed for the cluster and regenerator weights, so the backbone
/// initialization does not depend on `k`.
pub const CLUSTER_INIT_STREAM: u64 = 0xC1_05_7E_12;

/// Where the per-patch cluster ids come from.
#[derive(Clone, Copy, Debug)]
pub enum AssignMode<'a> {
    /// Argmax of the cluster MLP.
    Predicted,
    /// Given labels in `0..=k`, e.g. pseudo-clusters for teacher forcing or tests.
    Forced(&'a [usize]),
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(H*W) x C` class logits.
    pub seg_logits: Var,
    /// `N x (k+1)`, absent in vanilla mode.
    pub cluster_logits: Option<Var>,
    pub index: Option<AssignmentIndex>,
    pub tokens_after_ip: usize,
}

impl ForwardOutput {
    pub fn predicted_clusters<T: Scalar>(&self, tape: &Tape<T>) -> Option<Vec<usize>> {
        self.cluster_logits.map(|l| assign(tape.value(l)))
    }
}

#[derive(Clone, Debug)]
pub struct ClustVit {
    pub config: EncoderConfig,
    pub encoder: Encoder,
    pub cluster: Option<ClusterMlp>,
    pub regenerator: Option<Regenerator>,
}

impl ClustVit {
    /// Registers every parameter in `store`. `k = 0` builds the plain ViT.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(store, &mut init_rng(seed), cfg)?;
        let (cluster, regenerator) = if cfg.clustered() {
            let mut rng = init_rng(seed ^ CLUSTER_INIT_STREAM);
            (
                Some(ClusterMlp::new(store, &mut rng, cfg)?),
                Some(Regenerator::new(store, &mut rng, cfg)?),
            )
        } else {
            (None, None)
        };
        Ok(ClustVit {
            config: cfg.clone(),
            encoder,
            cluster,
            regenerator,
        })
    }

    pub fn build<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, cfg, seed)?;
        Ok((model, store))
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        image: &Image,
        mode: AssignMode<'_>,
    ) -> Result<ForwardOutput> {
        let z = self.encoder.patchify_embed(store, tape, image)?;
        let z = self.encoder.encode_prefix(store, tape, z)?;
        let (Some(mlp), Some(regen)) = (&self.cluster, &self.regenerator) else {
            let z = self.encoder.encode_suffix(store, tape, z)?;
            let tokens_after_ip = z.len;
            let seg_logits = self.encoder.seg_head(store, tape, z)?;
            return Ok(ForwardOutput {
                seg_logits,
                cluster_logits: None,
                index: None,
                tokens_after_ip,
            });
        };

        let logits = mlp.logits(store, tape, &z)?;
        let assignment = match mode {
            AssignMode::Predicted => assign(tape.value(logits)),
            AssignMode::Forced(a) => {
                if a.len() != z.len - 1 {
                    return Err(Error::IndexMismatch {
                        expected: z.len - 1,
                        actual: a.len(),
                    });
                }
                a.to_vec()
            }
        };
        let clustered = cluster_tokens(tape, &z, AssignmentIndex::new(assignment, mlp.clusters)?)?;
        let tokens_after_ip = clustered.reduced.len;
        let out = self.encoder.encode_suffix(store, tape, clustered.reduced)?;
        let full = regen.forward(store, tape, &out, &clustered.index, clustered.residuals)?;
        let seg_logits = self.encoder.seg_head(store, tape, full)?;
        Ok(ForwardOutput {
            seg_logits,
            cluster_logits: Some(logits),
            index: Some(clustered.index),
            tokens_after_ip,
        })
    }
}

/// Per-pixel argmax of `(H*W) x C` logits, as class ids starting at 1.
pub fn predict_mask<T: Scalar>(logits: &crate::tensor::Tensor<T>) -> Vec<u32> {
    assign(logits).into_iter().map(|c| c as u32 + 1).collect()
}
