//! Tensor state machine. Every state change in the engine goes through
//! [`TransitionTable::apply`], which rejects anything not in the table.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::chunk::{Chunk, TensorState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Init,
    AccessForCompute,
    /// BWD access to a tensor that a checkpoint re-forward just computed with.
    AccessAfterReforward,
    FinishFwd,
    PostFwdReset,
    FinishBwdGradOverwrite,
    Release,
    AdamAccess,
    AdamFinish,
    AllgatherArrival,
}

impl Trigger {
    pub const ALL: [Trigger; 10] = [
        Trigger::Init,
        Trigger::AccessForCompute,
        Trigger::AccessAfterReforward,
        Trigger::FinishFwd,
        Trigger::PostFwdReset,
        Trigger::FinishBwdGradOverwrite,
        Trigger::Release,
        Trigger::AdamAccess,
        Trigger::AdamFinish,
        Trigger::AllgatherArrival,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionTable {
    triples: BTreeSet<(TensorState, Trigger, TensorState)>,
}

impl Default for TransitionTable {
    fn default() -> Self {
        Self::standard()
    }
}

impl TransitionTable {
    pub fn standard() -> Self {
        use TensorState::*;
        use Trigger::*;
        let triples = [
            (Free, Init, Hold),
            (Hold, AccessForCompute, Compute),
            (HoldAfterFwd, AccessAfterReforward, Compute),
            (Compute, FinishFwd, HoldAfterFwd),
            (HoldAfterFwd, PostFwdReset, Hold),
            (Compute, FinishBwdGradOverwrite, HoldAfterBwd),
            (HoldAfterBwd, Release, Free),
            // remote chunks released once their group finishes a FWD pass
            (HoldAfterFwd, Release, Free),
            (Hold, AdamAccess, Compute),
            (Compute, AdamFinish, Hold),
            (Free, AllgatherArrival, Hold),
        ]
        .into_iter()
        .collect();
        TransitionTable { triples }
    }

    pub fn next(&self, from: TensorState, trigger: Trigger) -> Option<TensorState> {
        self.triples
            .range((from, trigger, TensorState::Free)..=(from, trigger, TensorState::HoldAfterBwd))
            .next()
            .map(|&(_, _, to)| to)
    }

    pub fn contains(&self, from: TensorState, trigger: Trigger, to: TensorState) -> bool {
        self.triples.contains(&(from, trigger, to))
    }

    pub fn triples(&self) -> impl Iterator<Item = &(TensorState, Trigger, TensorState)> {
        self.triples.iter()
    }

    /// Applies `trigger` to tensor `idx` of `chunk`.
    pub fn apply(&self, chunk: &mut Chunk, idx: usize, trigger: Trigger) -> Result<TensorState> {
        let tensor = &mut chunk.tensors[idx];
        match self.next(tensor.state, trigger) {
            Some(to) => {
                tensor.state = to;
                Ok(to)
            }
            None => Err(Error::IllegalTransition {
                chunk: chunk.key,
                tensor: tensor.tensor_id,
                from: tensor.state,
                trigger,
            }),
        }
    }

    /// Applies `trigger` to every tensor of the chunk.
    pub fn apply_all(&self, chunk: &mut Chunk, trigger: Trigger) -> Result<usize> {
        for idx in 0..chunk.tensors.len() {
            self.apply(chunk, idx, trigger)?;
        }
        Ok(chunk.tensors.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunk::map_tensors_to_chunks;

    #[test]
    fn param_fp16_cycle() {
        use TensorState::*;
        let t = TransitionTable::standard();
        let path = [
            (Trigger::Init, Hold),
            (Trigger::AccessForCompute, Compute),
            (Trigger::FinishFwd, HoldAfterFwd),
            (Trigger::PostFwdReset, Hold),
            (Trigger::AccessForCompute, Compute),
            (Trigger::FinishBwdGradOverwrite, HoldAfterBwd),
            (Trigger::Release, Free),
            (Trigger::Init, Hold),
        ];
        let mut s = Free;
        for (trigger, expect) in path {
            s = t.next(s, trigger).unwrap();
            assert_eq!(s, expect);
        }
    }

    #[test]
    fn table_is_a_function() {
        let t = TransitionTable::standard();
        let mut seen = std::collections::BTreeSet::new();
        for &(from, trig, _) in t.triples() {
            assert!(seen.insert((from, trig)), "{from:?} {trig:?} ambiguous");
        }
    }

    #[test]
    fn illegal_transition_reported() {
        let t = TransitionTable::standard();
        let mut list = map_tensors_to_chunks(&[4], 8).unwrap();
        let chunk = &mut list.chunks[0];
        let err = t.apply(chunk, 0, Trigger::AccessForCompute).unwrap_err();
        assert!(matches!(
            err,
            Error::IllegalTransition {
                from: TensorState::Free,
                ..
            }
        ));
        assert_eq!(chunk.tensors[0].state, TensorState::Free);
    }
}
