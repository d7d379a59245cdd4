//! Network execution, training and embedding extraction.

mod gradcheck;
mod loss;
mod network;
mod params;
mod resnet;
mod semiorth;
mod splice;
mod train;

use nalgebra::{DMatrix, DVector};

pub use gradcheck::{check_gradient, grad_check, GradCheckConfig, GradCheckReport};
pub use loss::{
    a_softmax_psi, loss_a_softmax, loss_am_softmax, loss_frame_ce, loss_softmax, objective,
    objective_weighted, AnnealSchedule, LossConfig, LossKind, LossTerms, Sample, SpeakerLoss,
};
pub use network::{stats_pool, ForwardOutput, FrameHead, Network, Plan, SpeakerOutput, POOL_VARIANCE_FLOOR};
pub use params::Params;
pub use resnet::ResStack;
pub use semiorth::{semiorth_deviation, semiorth_step, semiorth_target};
pub use splice::{splice, unsplice};
pub use train::{train, TrainConfig, TrainReport, TrainUtterance};

use crate::error::{Error, Result};

/// Fingerprint of which rectifiers were active during a forward pass. Finite
/// differences are only meaningful when both probes see the same pattern.
#[derive(Debug, Clone)]
pub struct KinkTracker {
    enabled: bool,
    hash: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl KinkTracker {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            hash: FNV_OFFSET,
        }
    }

    fn feed(&mut self, vals: &[f64]) {
        for chunk in vals.chunks(8) {
            let mut byte = 0u8;
            for (i, v) in chunk.iter().enumerate() {
                if *v > 0.0 {
                    byte |= 1 << i;
                }
            }
            self.hash ^= byte as u64;
            self.hash = self.hash.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn observe(&mut self, pre: &DMatrix<f64>) {
        if self.enabled {
            self.feed(pre.as_slice());
        }
    }

    pub fn observe_vec(&mut self, pre: &DVector<f64>) {
        if self.enabled {
            self.feed(pre.as_slice());
        }
    }

    pub fn signature(&self) -> u64 {
        if self.enabled {
            self.hash
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: DVector<f64>,
    pub source: String,
    pub utterance_id: String,
}

/// Tap pre-activation for one utterance.
pub fn extract_embedding(net: &Network, feats: &DMatrix<f64>, utterance_id: &str) -> Result<Embedding> {
    if feats.nrows() == 0 {
        return Err(Error::EmptyInput(format!("utterance `{utterance_id}` has no frames")));
    }
    let out = net.forward(feats)?;
    Ok(Embedding {
        vector: out.tap().clone(),
        source: net.spec.name.clone(),
        utterance_id: utterance_id.to_string(),
    })
}
