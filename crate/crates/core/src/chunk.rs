//! Tensors, chunks, chunk lists and the preprocessing-stage chunk-tensor
//! mapping.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::Device;
use crate::schema::{param_tensors, ModelSchema, FP16_BYTES, FP32_BYTES};

/// 64 Mi elements, the smallest capacity that holds the 4H×H MLP weight of
/// every H = 4096 model in the standard ladder.
pub const DEFAULT_CHUNK_CAPACITY_ELEMS: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TensorState {
    Free,
    Compute,
    Hold,
    HoldAfterFwd,
    HoldAfterBwd,
}

impl TensorState {
    pub fn is_hold_like(self) -> bool {
        matches!(
            self,
            TensorState::Hold | TensorState::HoldAfterFwd | TensorState::HoldAfterBwd
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ListKind {
    ParamFp16,
    ParamFp32,
    Momentum,
    Variance,
}

impl ListKind {
    pub const ALL: [ListKind; 4] = [
        ListKind::ParamFp16,
        ListKind::ParamFp32,
        ListKind::Momentum,
        ListKind::Variance,
    ];
    pub const OPTIMIZER: [ListKind; 3] =
        [ListKind::ParamFp32, ListKind::Momentum, ListKind::Variance];

    pub fn elem_bytes(self) -> u64 {
        match self {
            ListKind::ParamFp16 => FP16_BYTES,
            _ => FP32_BYTES,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            ListKind::ParamFp16 => "fp16",
            ListKind::ParamFp32 => "fp32",
            ListKind::Momentum => "mom",
            ListKind::Variance => "var",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Identifies a chunk by its list and position. Ordering is chunk-list order,
/// which is also the tie-break order for eviction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkKey {
    pub kind: ListKind,
    pub pos: u32,
}

impl ChunkKey {
    pub fn new(kind: ListKind, pos: u32) -> Self {
        ChunkKey { kind, pos }
    }
}

impl fmt::Display for ChunkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.kind.short(), self.pos)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub tensor_id: u32,
    pub list_kind: ListKind,
    pub numel: u64,
    pub chunk_pos: u32,
    pub offset_elems: u64,
    pub state: TensorState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub key: ChunkKey,
    pub capacity_elems: u64,
    pub elem_bytes: u64,
    /// `None` means the payload is released.
    pub resident: Option<Device>,
    pub tensors: Vec<TensorMeta>,
    pub dirty: bool,
    /// Zero-filled padding chunk added so collective groups are full.
    pub phantom: bool,
    /// Data-parallel rank owning this chunk.
    pub owner: u32,
    /// Device the chunk computes on while any tensor is COMPUTE.
    pub compute_device: Option<Device>,
}

impl Chunk {
    pub fn bytes(&self) -> u64 {
        self.capacity_elems * self.elem_bytes
    }

    pub fn used_elems(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel).sum()
    }

    pub fn waste_elems(&self) -> u64 {
        self.capacity_elems - self.used_elems()
    }

    pub fn all_in(&self, state: TensorState) -> bool {
        self.tensors.iter().all(|t| t.state == state)
    }

    pub fn any_in(&self, state: TensorState) -> bool {
        self.tensors.iter().any(|t| t.state == state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Movability {
    Releasable,
    Pinned(Device),
    Movable,
}

pub fn chunk_movability(chunk: &Chunk) -> Movability {
    if chunk.any_in(TensorState::Compute) {
        Movability::Pinned(chunk.compute_device.unwrap_or(Device::Gpu))
    } else if chunk.all_in(TensorState::Free) {
        Movability::Releasable
    } else {
        Movability::Movable
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkList {
    pub kind: ListKind,
    pub capacity_elems: u64,
    pub chunks: Vec<Chunk>,
    /// tensor id → (chunk position, element offset)
    pub tensor_index: BTreeMap<u32, (u32, u64)>,
}

impl ChunkList {
    fn new(kind: ListKind, capacity_elems: u64) -> Self {
        ChunkList {
            kind,
            capacity_elems,
            chunks: Vec::new(),
            tensor_index: BTreeMap::new(),
        }
    }

    fn open_chunk(&mut self) -> &mut Chunk {
        let pos = self.chunks.len() as u32;
        self.chunks.push(Chunk {
            key: ChunkKey::new(self.kind, pos),
            capacity_elems: self.capacity_elems,
            elem_bytes: self.kind.elem_bytes(),
            resident: None,
            tensors: Vec::new(),
            dirty: false,
            phantom: false,
            owner: 0,
            compute_device: None,
        });
        self.chunks.last_mut().unwrap()
    }

    /// Same tensor layout, different payload kind.
    pub fn replicate(&self, kind: ListKind) -> ChunkList {
        let mut out = self.clone();
        out.kind = kind;
        for c in &mut out.chunks {
            c.key.kind = kind;
            c.elem_bytes = kind.elem_bytes();
            for t in &mut c.tensors {
                t.list_kind = kind;
            }
        }
        out
    }

    /// (chunk position, offset) per tensor, in tensor-id order.
    pub fn layout(&self) -> Vec<(u32, u32, u64)> {
        self.tensor_index
            .iter()
            .map(|(&id, &(pos, off))| (id, pos, off))
            .collect()
    }

    pub fn total_bytes(&self) -> u64 {
        self.chunks.iter().map(Chunk::bytes).sum()
    }

    pub fn waste_elems(&self) -> u64 {
        self.chunks
            .iter()
            .filter(|c| !c.phantom)
            .map(Chunk::waste_elems)
            .sum()
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// First-fit-sequential packing in initialization order. A tensor never spans
/// two chunks; a fresh chunk opens whenever the current one lacks room.
pub fn map_tensors_to_chunks(tensor_sizes: &[u64], capacity_elems: u64) -> Result<ChunkList> {
    let mut list = ChunkList::new(ListKind::ParamFp16, capacity_elems);
    let mut fill = 0u64;
    for (index, &numel) in tensor_sizes.iter().enumerate() {
        if numel == 0 {
            return Err(Error::InvalidDimension(format!(
                "tensor {index} has zero elements"
            )));
        }
        if numel > capacity_elems {
            return Err(Error::TensorTooLarge {
                index,
                numel,
                capacity: capacity_elems,
            });
        }
        if list.chunks.is_empty() || fill + numel > capacity_elems {
            list.open_chunk();
            fill = 0;
        }
        let pos = list.chunks.len() as u32 - 1;
        list.chunks.last_mut().unwrap().tensors.push(TensorMeta {
            tensor_id: index as u32,
            list_kind: ListKind::ParamFp16,
            numel,
            chunk_pos: pos,
            offset_elems: fill,
            state: TensorState::Free,
        });
        list.tensor_index.insert(index as u32, (pos, fill));
        fill += numel;
    }
    Ok(list)
}

/// The four chunk lists of a model. There is no gradient list: gradients
/// reuse the fp16 parameter chunks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkStore {
    lists: Vec<ChunkList>,
}

impl ChunkStore {
    pub fn from_param_list(param_fp16: ChunkList) -> Self {
        let lists = ListKind::ALL
            .iter()
            .map(|&k| param_fp16.replicate(k))
            .collect();
        ChunkStore { lists }
    }

    pub fn empty(capacity_elems: u64) -> Self {
        Self::from_param_list(ChunkList::new(ListKind::ParamFp16, capacity_elems))
    }

    pub fn list(&self, kind: ListKind) -> &ChunkList {
        &self.lists[kind.index()]
    }

    pub fn lists(&self) -> &[ChunkList] {
        &self.lists
    }

    pub fn get(&self, key: ChunkKey) -> &Chunk {
        &self.lists[key.kind.index()].chunks[key.pos as usize]
    }

    pub fn get_mut(&mut self, key: ChunkKey) -> &mut Chunk {
        &mut self.lists[key.kind.index()].chunks[key.pos as usize]
    }

    pub fn capacity_elems(&self) -> u64 {
        self.lists[0].capacity_elems
    }

    /// Number of chunk positions per list (phantoms included).
    pub fn positions(&self) -> u32 {
        self.lists[0].chunks.len() as u32
    }

    pub fn keys(&self) -> impl Iterator<Item = ChunkKey> + '_ {
        self.lists
            .iter()
            .flat_map(|l| l.chunks.iter().map(|c| c.key))
    }

    pub fn chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.lists.iter().flat_map(|l| l.chunks.iter())
    }

    /// fp16 chunk position holding the given parameter tensor.
    pub fn position_of(&self, tensor_id: u32) -> u32 {
        self.lists[0].tensor_index[&tensor_id].0
    }

    pub fn tensor_mut(&mut self, kind: ListKind, tensor_id: u32) -> &mut TensorMeta {
        let (pos, _) = self.lists[kind.index()].tensor_index[&tensor_id];
        let chunk = &mut self.lists[kind.index()].chunks[pos as usize];
        chunk
            .tensors
            .iter_mut()
            .find(|t| t.tensor_id == tensor_id)
            .unwrap()
    }

    /// Appends empty phantom chunks to every list so the position count is a
    /// multiple of `p`, then assigns owners round-robin.
    pub fn pad_and_assign_owners(&mut self, p: u32) {
        let p = p.max(1);
        for list in &mut self.lists {
            while list.chunks.len() % p as usize != 0 {
                list.open_chunk().phantom = true;
            }
            for c in &mut list.chunks {
                c.owner = c.key.pos % p;
            }
        }
    }

    pub fn layout_rows(&self) -> Vec<LayoutRow> {
        let mut rows = Vec::new();
        for list in &self.lists {
            for c in &list.chunks {
                for t in &c.tensors {
                    rows.push(LayoutRow {
                        tensor_id: t.tensor_id,
                        list_kind: list.kind,
                        chunk_id: c.key.to_string(),
                        offset: t.offset_elems,
                        numel: t.numel,
                    });
                }
            }
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayoutRow {
    pub tensor_id: u32,
    pub list_kind: ListKind,
    pub chunk_id: String,
    pub offset: u64,
    pub numel: u64,
}

pub fn build_model_chunk_lists(schema: &ModelSchema, capacity_elems: u64) -> Result<ChunkStore> {
    let sizes: Vec<u64> = param_tensors(schema).iter().map(|t| t.numel).collect();
    Ok(ChunkStore::from_param_list(map_tensors_to_chunks(
        &sizes,
        capacity_elems,
    )?))
}
