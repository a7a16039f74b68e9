//! Executes one simulated process's iteration: operator events drive tensor
//! state transitions, chunk fetches, gradient reuse, collectives and the
//! ADAM update.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;

use crate::chunk::{build_model_chunk_lists, ChunkKey, ChunkStore, ListKind, TensorState};
use crate::dp::{
    group_collective_bytes, partition_chunks, CollectiveKind, CollectiveRecord, GroupPhase,
    Partition,
};
use crate::error::{Error, Result};
use crate::fsm::{TransitionTable, Trigger};
use crate::memory::{
    Device, EvictionPolicy, MemoryManager, MomentLists, TransferReason, TransferRecord,
};
use crate::profiler::PlacementPlan;
use crate::schema::{
    build_event_timeline, ActivationModel, ModelSchema, OperatorEvent, Phase, FP16_BYTES,
};

/// The non-chunked embedding allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EmbeddingSpec {
    pub device: Device,
    pub param_count: u64,
    /// Bytes of the embedding output activation, B·S·H fp16.
    pub activation_bytes: u64,
}

impl EmbeddingSpec {
    /// (GPU bytes, CPU bytes) held for the whole run.
    pub fn reservation(&self) -> (u64, u64) {
        let vh = self.param_count;
        match self.device {
            Device::Gpu => (4 * vh, 12 * vh),
            Device::Cpu => (0, 16 * vh),
        }
    }

    /// CPU↔GPU bytes per iteration: gradient down and parameters up when the
    /// table lives on the GPU, activations up and their gradients down when
    /// it lives on the CPU.
    pub fn transfer_bytes(&self) -> u64 {
        match self.device {
            Device::Gpu => 2 * FP16_BYTES * self.param_count,
            Device::Cpu => 2 * self.activation_bytes,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineSetup {
    pub gpu_bytes: u64,
    pub cpu_bytes: u64,
    pub nproc: u32,
    pub rank: u32,
    pub checkpoint: bool,
    pub activation: ActivationModel,
    pub embedding: Option<EmbeddingSpec>,
    /// Check pool accounting and the location constraint at every moment.
    pub validate: bool,
    pub trace: bool,
    pub record_transitions: bool,
}

impl EngineSetup {
    pub fn new(gpu_bytes: u64, cpu_bytes: u64) -> Self {
        EngineSetup {
            gpu_bytes,
            cpu_bytes,
            nproc: 1,
            rank: 0,
            checkpoint: false,
            activation: ActivationModel::default(),
            embedding: None,
            validate: true,
            trace: false,
            record_transitions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MomentRecord {
    pub moment: u32,
    pub event: String,
    pub gpu_chunk_bytes: u64,
    pub gpu_reserved_bytes: u64,
    pub gpu_non_model_bytes: u64,
    pub gpu_used_bytes: u64,
    pub cpu_chunk_bytes: u64,
    pub cpu_reserved_bytes: u64,
    pub cpu_used_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub moment: u32,
    pub event: String,
    pub device_usage: BTreeMap<Device, u64>,
    pub transfers: Vec<TransferRecord>,
    pub states_changed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub moments: Vec<MomentRecord>,
    pub cpu_to_gpu_bytes: u64,
    pub gpu_to_cpu_bytes: u64,
    pub embedding_transfer_bytes: u64,
    pub intra_gpu_collective_bytes: u64,
    /// Gradient copies and parameter copy-backs between ADAM devices.
    pub adam_cross_device_bytes: u64,
    pub peak_gpu_bytes: u64,
    pub peak_cpu_bytes: u64,
    /// Largest bytes of pinned fp16 chunks plus gradient buffer at any
    /// FWD/BWD moment.
    pub working_set_bytes: u64,
    pub evictions: u64,
    pub feasible: bool,
    pub failure_reason: Option<String>,
    pub failure_device: Option<Device>,
    #[serde(skip)]
    pub transfers: Vec<TransferRecord>,
    #[serde(skip)]
    pub collectives: Vec<CollectiveRecord>,
    #[serde(skip)]
    pub moment_lists: MomentLists,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
    #[serde(skip)]
    pub transitions: Vec<(TensorState, Trigger, TensorState)>,
}

impl IterationReport {
    /// Chunk traffic plus embedding traffic.
    pub fn total_cpu_gpu_bytes(&self) -> u64 {
        self.cpu_to_gpu_bytes + self.gpu_to_cpu_bytes + self.embedding_transfer_bytes
    }

    pub fn collective_bytes(&self, kind: CollectiveKind) -> u64 {
        self.collectives
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.bytes)
            .sum()
    }
}

/// One simulated data-parallel process.
#[derive(Debug)]
pub struct Engine {
    pub store: ChunkStore,
    pub mm: MemoryManager,
    pub partition: Partition,
    pub timeline: Vec<OperatorEvent>,
    pub table: TransitionTable,
    pub setup: EngineSetup,
    plan: Option<PlacementPlan>,
    curve: Vec<u64>,
    iteration: u32,
    state_changes: u64,
    transitions: Vec<(TensorState, Trigger, TensorState)>,
    collectives: Vec<CollectiveRecord>,
    moment_lists: MomentLists,
    adam_cross: u64,
}

impl Engine {
    pub fn new(
        schema: &ModelSchema,
        capacity_elems: u64,
        setup: EngineSetup,
        policy: Arc<dyn EvictionPolicy>,
    ) -> Result<Engine> {
        let store = build_model_chunk_lists(schema, capacity_elems)?;
        let timeline = build_event_timeline(schema, setup.checkpoint);
        Engine::from_parts(store, timeline, setup, policy)
    }

    pub fn from_parts(
        mut store: ChunkStore,
        timeline: Vec<OperatorEvent>,
        setup: EngineSetup,
        policy: Arc<dyn EvictionPolicy>,
    ) -> Result<Engine> {
        let partition = partition_chunks(&mut store, setup.nproc);
        let curve = setup.activation.curve(&timeline);
        let mm = MemoryManager::new(setup.gpu_bytes, setup.cpu_bytes, policy);
        let mut engine = Engine {
            store,
            mm,
            partition,
            timeline,
            table: TransitionTable::standard(),
            setup,
            plan: None,
            curve,
            iteration: 0,
            state_changes: 0,
            transitions: Vec::new(),
            collectives: Vec::new(),
            moment_lists: MomentLists::default(),
            adam_cross: 0,
        };
        engine.initialize()?;
        Ok(engine)
    }

    fn initialize(&mut self) -> Result<()> {
        if let Some(emb) = self.setup.embedding {
            let (gpu, cpu) = emb.reservation();
            self.mm
                .reserve(&mut self.store, Device::Gpu, gpu, "reserving the embedding")?;
            self.mm
                .reserve(&mut self.store, Device::Cpu, cpu, "reserving the embedding")?;
        }
        let local = self.local_positions();
        for kind in [
            ListKind::ParamFp32,
            ListKind::Momentum,
            ListKind::Variance,
            ListKind::ParamFp16,
        ] {
            for &pos in &local {
                let key = ChunkKey::new(kind, pos);
                self.apply_all(key, Trigger::Init)?;
                self.mm.place_initial(&mut self.store, key, Device::Cpu)?;
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> u32 {
        self.setup.rank
    }

    pub fn nproc(&self) -> u32 {
        self.partition.nproc
    }

    /// Local, non-phantom positions in list order.
    pub fn local_positions(&self) -> Vec<u32> {
        let fp16 = self.store.list(ListKind::ParamFp16);
        fp16.chunks
            .iter()
            .filter(|c| c.owner == self.setup.rank && !c.phantom)
            .map(|c| c.key.pos)
            .collect()
    }

    pub fn non_model_curve(&self) -> &[u64] {
        &self.curve
    }

    pub fn plan(&self) -> Option<&PlacementPlan> {
        self.plan.as_ref()
    }

    /// Installs a placement plan: GPU-assigned optimizer chunks become
    /// exempt from GPU eviction and compute ADAM on the GPU.
    pub fn apply_plan(&mut self, plan: PlacementPlan) {
        let pinned: BTreeSet<ChunkKey> = plan
            .os_gpu_positions()
            .flat_map(|pos| {
                ListKind::OPTIMIZER
                    .into_iter()
                    .map(move |k| ChunkKey::new(k, pos))
            })
            .collect();
        self.mm.set_placement_pinned(pinned);
        self.plan = Some(plan);
    }

    fn apply(&mut self, key: ChunkKey, idx: usize, trigger: Trigger) -> Result<()> {
        let from = self.store.get(key).tensors[idx].state;
        let to = self.table.apply(self.store.get_mut(key), idx, trigger)?;
        self.state_changes += 1;
        if self.setup.record_transitions {
            self.transitions.push((from, trigger, to));
        }
        Ok(())
    }

    fn apply_all(&mut self, key: ChunkKey, trigger: Trigger) -> Result<()> {
        for idx in 0..self.store.get(key).tensors.len() {
            self.apply(key, idx, trigger)?;
        }
        Ok(())
    }

    /// Applies a trigger to one tensor from outside the event loop. Illegal
    /// transitions are rejected exactly as they are inside it.
    pub fn inject(&mut self, key: ChunkKey, idx: usize, trigger: Trigger) -> Result<()> {
        self.apply(key, idx, trigger)
    }

    /// Runs every event of the timeline once. OOM ends the iteration early
    /// with an infeasible report; any other error is returned.
    pub fn run_iteration(&mut self) -> Result<IterationReport> {
        self.iteration += 1;
        let ledger_start = self.mm.ledger().len();
        self.mm.reset_peaks();
        self.collectives.clear();
        self.transitions.clear();
        self.moment_lists = MomentLists::default();
        self.adam_cross = 0;
        let mut ctx = RunState {
            traced_ledger: ledger_start,
            traced_states: self.state_changes,
            ..RunState::default()
        };

        let outcome = self.run_events(&mut ctx);
        let (feasible, failure_reason, failure_device) = match outcome {
            Ok(()) => (true, None, None),
            Err(Error::OutOfMemory(info)) => (false, Some(info.to_string()), Some(info.device)),
            Err(e) => return Err(e),
        };

        let transfers: Vec<TransferRecord> = self.mm.ledger()[ledger_start..].to_vec();
        let dir = |src: Device| {
            transfers
                .iter()
                .filter(|t| t.src == src)
                .map(|t| t.bytes)
                .sum::<u64>()
        };
        let embedding_transfer_bytes = match (feasible, self.setup.embedding) {
            (true, Some(e)) => e.transfer_bytes(),
            _ => 0,
        };
        Ok(IterationReport {
            iteration: self.iteration,
            moments: ctx.moments,
            cpu_to_gpu_bytes: dir(Device::Cpu),
            gpu_to_cpu_bytes: dir(Device::Gpu),
            embedding_transfer_bytes,
            intra_gpu_collective_bytes: self.collectives.iter().map(|c| c.bytes).sum(),
            adam_cross_device_bytes: self.adam_cross,
            peak_gpu_bytes: self.mm.pool(Device::Gpu).peak_used,
            peak_cpu_bytes: self.mm.pool(Device::Cpu).peak_used,
            working_set_bytes: ctx.working_set,
            evictions: ctx
                .evictions_at_start
                .map_or(0, |s| self.mm.eviction_count() - s),
            feasible,
            failure_reason,
            failure_device,
            transfers,
            collectives: std::mem::take(&mut self.collectives),
            moment_lists: std::mem::take(&mut self.moment_lists),
            trace: ctx.trace,
            transitions: std::mem::take(&mut self.transitions),
        })
    }

    fn run_events(&mut self, ctx: &mut RunState) -> Result<()> {
        ctx.evictions_at_start = Some(self.mm.eviction_count());
        self.mm.set_moment(0);
        self.mm.set_non_model(&mut self.store, self.curve[0])?;
        self.sample(ctx, 0, "init")?;
        let last_fwd = self.timeline.iter().rposition(|e| e.phase == Phase::Fwd);
        let mut adam_done = BTreeSet::new();
        for i in 0..self.timeline.len() {
            let ev = self.timeline[i].clone();
            let label = ev.label();
            let (s, f) = (
                OperatorEvent::start_moment(i),
                OperatorEvent::finish_moment(i),
            );

            self.mm.set_moment(s);
            self.mm
                .set_non_model(&mut self.store, self.curve[s as usize])?;
            let grad_bytes = match ev.phase {
                Phase::Adam => {
                    self.adam_event(&ev, s, &mut adam_done)?;
                    0
                }
                _ => {
                    let g = self.compute_start(&ev, s)?;
                    ctx.working_set = ctx.working_set.max(self.pinned_fp16_gpu_bytes() + g);
                    g
                }
            };
            self.sample(ctx, s, &label)?;

            self.mm.set_moment(f);
            match ev.phase {
                Phase::Adam => {}
                Phase::Bwd => self.write_gradient(&ev, grad_bytes)?,
                Phase::Fwd | Phase::ReFwd => self.finish_forward(&ev)?,
            }
            self.mm
                .set_non_model(&mut self.store, self.curve[f as usize])?;
            if self.nproc() > 1 && ev.phase != Phase::Adam {
                self.after_event_collectives(&ev, f)?;
            }
            if Some(i) == last_fwd {
                self.post_fwd_reset()?;
            }
            self.sample(ctx, f, &label)?;
        }
        Ok(())
    }

    fn positions_of(&self, ev: &OperatorEvent) -> Vec<u32> {
        let set: BTreeSet<u32> = ev
            .tensor_refs
            .iter()
            .map(|&t| self.store.position_of(t))
            .collect();
        set.into_iter().collect()
    }

    fn tensor_indices(&self, key: ChunkKey, refs: &BTreeSet<u32>) -> Vec<usize> {
        self.store
            .get(key)
            .tensors
            .iter()
            .enumerate()
            .filter(|(_, t)| refs.contains(&t.tensor_id))
            .map(|(i, _)| i)
            .collect()
    }

    /// Fetches the event's chunks to the GPU and moves its tensors to
    /// COMPUTE. Returns the gradient buffer charged for BWD events.
    fn compute_start(&mut self, ev: &OperatorEvent, moment: u32) -> Result<u64> {
        let positions = self.positions_of(ev);
        if self.nproc() > 1 {
            let groups: BTreeSet<u32> = positions
                .iter()
                .map(|&p| self.partition.group_of(p))
                .collect();
            for g in groups {
                self.maybe_gather(g, ev.phase, moment)?;
            }
        }
        let refs: BTreeSet<u32> = ev.tensor_refs.iter().copied().collect();
        for pos in positions {
            let key = ChunkKey::new(ListKind::ParamFp16, pos);
            self.mm
                .fetch_chunk(&mut self.store, key, Device::Gpu, TransferReason::Fetch)?;
            self.moment_lists.record(Device::Gpu, key, moment);
            self.store.get_mut(key).compute_device = Some(Device::Gpu);
            for idx in self.tensor_indices(key, &refs) {
                let trigger = match (ev.phase, self.store.get(key).tensors[idx].state) {
                    (Phase::Bwd, TensorState::HoldAfterFwd) => Trigger::AccessAfterReforward,
                    _ => Trigger::AccessForCompute,
                };
                self.apply(key, idx, trigger)?;
            }
        }
        if ev.phase != Phase::Bwd {
            return Ok(0);
        }
        let grad_bytes: u64 = ev
            .tensor_refs
            .iter()
            .map(|&t| self.store.tensor_mut(ListKind::ParamFp16, t).numel * FP16_BYTES)
            .sum();
        self.mm.reserve(
            &mut self.store,
            Device::Gpu,
            grad_bytes,
            "allocating the gradient buffer",
        )?;
        Ok(grad_bytes)
    }

    fn pinned_fp16_gpu_bytes(&self) -> u64 {
        self.store
            .list(ListKind::ParamFp16)
            .chunks
            .iter()
            .filter(|c| c.resident == Some(Device::Gpu))
            .filter(|c| c.any_in(TensorState::Compute) || self.mm.is_pinned(c.key))
            .map(|c| c.bytes())
            .sum()
    }

    fn event_chunks(&self, ev: &OperatorEvent) -> Vec<(ChunkKey, Vec<usize>)> {
        let refs: BTreeSet<u32> = ev.tensor_refs.iter().copied().collect();
        self.positions_of(ev)
            .into_iter()
            .map(|pos| {
                let key = ChunkKey::new(ListKind::ParamFp16, pos);
                (key, self.tensor_indices(key, &refs))
            })
            .collect()
    }

    fn release_compute_device(&mut self, key: ChunkKey) {
        if !self.store.get(key).any_in(TensorState::Compute) {
            self.store.get_mut(key).compute_device = None;
        }
    }

    fn finish_forward(&mut self, ev: &OperatorEvent) -> Result<()> {
        for (key, idxs) in self.event_chunks(ev) {
            for idx in idxs {
                self.apply(key, idx, Trigger::FinishFwd)?;
            }
            self.release_compute_device(key);
        }
        Ok(())
    }

    /// Gradients overwrite the parameter payload in place: tensors go to
    /// HOLD_AFTER_BWD, the chunk turns dirty and the temporary buffer is freed.
    pub fn write_gradient(&mut self, ev: &OperatorEvent, grad_bytes: u64) -> Result<()> {
        for (key, idxs) in self.event_chunks(ev) {
            for idx in idxs {
                self.apply(key, idx, Trigger::FinishBwdGradOverwrite)?;
            }
            self.mm.mark_dirty(&mut self.store, key);
            self.release_compute_device(key);
        }
        self.mm.release_reserved(Device::Gpu, grad_bytes);
        Ok(())
    }

    fn post_fwd_reset(&mut self) -> Result<()> {
        for pos in 0..self.store.positions() {
            let key = ChunkKey::new(ListKind::ParamFp16, pos);
            for idx in 0..self.store.get(key).tensors.len() {
                if self.store.get(key).tensors[idx].state == TensorState::HoldAfterFwd {
                    self.apply(key, idx, Trigger::PostFwdReset)?;
                }
            }
        }
        Ok(())
    }

    fn group_members(&self, g: u32) -> Vec<ChunkKey> {
        self.partition.groups[g as usize].members.clone()
    }

    fn is_remote(&self, key: ChunkKey) -> bool {
        let c = self.store.get(key);
        !c.phantom && c.owner != self.setup.rank
    }

    fn maybe_gather(&mut self, g: u32, phase: Phase, moment: u32) -> Result<()> {
        let members = self.group_members(g);
        // every rank joins every group's collective, even when this rank
        // already holds all of the group's real chunks
        let needs = self.partition.groups[g as usize].phase_state != GroupPhase::Gathered
            || members
                .iter()
                .any(|&k| self.is_remote(k) && self.store.get(k).any_in(TensorState::Free));
        if !needs {
            return Ok(());
        }
        let mut padding = false;
        let mut chunk_bytes = 0;
        for &key in &members {
            let c = self.store.get(key);
            chunk_bytes = c.bytes();
            if c.phantom {
                padding = true;
            } else if c.owner == self.setup.rank {
                self.mm.fetch_chunk(
                    &mut self.store,
                    key,
                    Device::Gpu,
                    TransferReason::Collective,
                )?;
            } else {
                self.mm
                    .allocate_payload(&mut self.store, key, Device::Gpu)?;
                self.apply_all(key, Trigger::AllgatherArrival)?;
                self.mm.pin(key);
            }
        }
        let kind = match phase {
            Phase::Fwd => CollectiveKind::AllgatherFwd,
            Phase::ReFwd => CollectiveKind::RegatherRefwd,
            _ => CollectiveKind::AllgatherBwd,
        };
        self.collectives.push(CollectiveRecord {
            iteration: self.iteration,
            moment,
            group_id: g,
            kind,
            bytes: group_collective_bytes(self.nproc(), chunk_bytes),
            includes_padding: padding,
        });
        self.partition.groups[g as usize].phase_state = GroupPhase::Gathered;
        Ok(())
    }

    fn release_remote(&mut self, members: &[ChunkKey]) -> Result<()> {
        for &key in members {
            if self.is_remote(key) {
                self.apply_all(key, Trigger::Release)?;
                self.mm.release_payload(&mut self.store, key);
                self.mm.unpin(key);
            }
        }
        Ok(())
    }

    fn group_all_in(&self, members: &[ChunkKey], state: TensorState) -> bool {
        members.iter().all(|&k| self.store.get(k).all_in(state))
    }

    fn after_event_collectives(&mut self, ev: &OperatorEvent, moment: u32) -> Result<()> {
        let groups: BTreeSet<u32> = self
            .positions_of(ev)
            .iter()
            .map(|&p| self.partition.group_of(p))
            .collect();
        for g in groups {
            let members = self.group_members(g);
            if self.partition.groups[g as usize].phase_state != GroupPhase::Gathered {
                continue;
            }
            if ev.phase == Phase::Fwd && self.group_all_in(&members, TensorState::HoldAfterFwd) {
                self.release_remote(&members)?;
                self.partition.groups[g as usize].phase_state = GroupPhase::Idle;
            } else if ev.phase == Phase::Bwd
                && self.group_all_in(&members, TensorState::HoldAfterBwd)
            {
                self.reduce_scatter(g, &members, moment)?;
            }
        }
        Ok(())
    }

    fn reduce_scatter(&mut self, g: u32, members: &[ChunkKey], moment: u32) -> Result<()> {
        let mut padding = false;
        let mut chunk_bytes = 0;
        for &key in members {
            let c = self.store.get(key);
            chunk_bytes = c.bytes();
            padding |= c.phantom;
            if !c.phantom && c.owner == self.setup.rank {
                self.mm.fetch_chunk(
                    &mut self.store,
                    key,
                    Device::Gpu,
                    TransferReason::Collective,
                )?;
            }
        }
        self.collectives.push(CollectiveRecord {
            iteration: self.iteration,
            moment,
            group_id: g,
            kind: CollectiveKind::ReduceScatter,
            bytes: group_collective_bytes(self.nproc(), chunk_bytes),
            includes_padding: padding,
        });
        self.release_remote(members)?;
        self.partition.groups[g as usize].phase_state = GroupPhase::Reduced;
        Ok(())
    }

    fn os_device(&self, pos: u32) -> Device {
        match &self.plan {
            Some(plan) => plan.os_device(pos),
            None => self
                .store
                .get(ChunkKey::new(ListKind::ParamFp32, pos))
                .resident
                .unwrap_or(Device::Cpu),
        }
    }

    fn adam_event(
        &mut self,
        ev: &OperatorEvent,
        moment: u32,
        done: &mut BTreeSet<u32>,
    ) -> Result<()> {
        for pos in self.positions_of(ev) {
            let fp16 = self.store.get(ChunkKey::new(ListKind::ParamFp16, pos));
            if fp16.phantom || fp16.owner != self.setup.rank || !done.insert(pos) {
                continue;
            }
            self.adam_position(pos, moment)?;
        }
        Ok(())
    }

    /// Updates one list position: the optimizer triplet computes on its
    /// planned device, gradients stream through a one-chunk fp32 staging
    /// buffer, and updated parameters are copied back into the fp16 chunk.
    pub fn adam_position(&mut self, pos: u32, moment: u32) -> Result<()> {
        let os_dev = self.os_device(pos);
        for kind in ListKind::OPTIMIZER {
            let key = ChunkKey::new(kind, pos);
            self.mm
                .fetch_chunk(&mut self.store, key, os_dev, TransferReason::Fetch)?;
            self.moment_lists.record(os_dev, key, moment);
            self.store.get_mut(key).compute_device = Some(os_dev);
            self.apply_all(key, Trigger::AdamAccess)?;
        }
        let fp16 = ChunkKey::new(ListKind::ParamFp16, pos);
        let grad_dev = self
            .store
            .get(fp16)
            .resident
            .ok_or_else(|| Error::Invariant(format!("{fp16} has no payload at ADAM")))?;
        self.moment_lists.record(grad_dev, fp16, moment);
        self.mm.pin(fp16);
        let fp16_bytes = self.store.get(fp16).bytes();
        let staging = self
            .store
            .get(ChunkKey::new(ListKind::ParamFp32, pos))
            .bytes();
        let result = self.adam_update(pos, fp16, os_dev, grad_dev, fp16_bytes, staging);
        self.mm.unpin(fp16);
        result
    }

    fn adam_update(
        &mut self,
        pos: u32,
        fp16: ChunkKey,
        os_dev: Device,
        grad_dev: Device,
        fp16_bytes: u64,
        staging: u64,
    ) -> Result<()> {
        self.mm.reserve(
            &mut self.store,
            os_dev,
            staging,
            "allocating the ADAM staging buffer",
        )?;
        if grad_dev != os_dev {
            self.mm
                .record_copy(fp16, grad_dev, os_dev, fp16_bytes, TransferReason::AdamCopy);
            self.adam_cross += fp16_bytes;
        }
        self.apply_all(fp16, Trigger::Release)?;
        self.apply_all(fp16, Trigger::Init)?;
        if grad_dev != os_dev {
            self.mm
                .record_copy(fp16, os_dev, grad_dev, fp16_bytes, TransferReason::AdamCopy);
            self.adam_cross += fp16_bytes;
        }
        self.mm.mark_dirty(&mut self.store, fp16);
        for kind in ListKind::OPTIMIZER {
            let key = ChunkKey::new(kind, pos);
            self.apply_all(key, Trigger::AdamFinish)?;
            self.store.get_mut(key).compute_device = None;
        }
        self.mm.release_reserved(os_dev, staging);
        Ok(())
    }

    /// Every chunk with a COMPUTE tensor sits on its compute device.
    pub fn check_location_constraint(&self) -> Result<()> {
        for c in self.store.chunks() {
            if c.any_in(TensorState::Compute)
                && (c.compute_device.is_none() || c.resident != c.compute_device)
            {
                return Err(Error::Invariant(format!(
                    "{} computes on {:?} but resides on {:?}",
                    c.key, c.compute_device, c.resident
                )));
            }
        }
        Ok(())
    }

    fn sample(&mut self, ctx: &mut RunState, moment: u32, event: &str) -> Result<()> {
        if self.setup.validate {
            self.mm.audit(&self.store)?;
            self.check_location_constraint()?;
        }
        let gpu = self.mm.pool(Device::Gpu);
        let cpu = self.mm.pool(Device::Cpu);
        ctx.moments.push(MomentRecord {
            moment,
            event: event.to_string(),
            gpu_chunk_bytes: gpu.chunk_bytes,
            gpu_reserved_bytes: gpu.reserved_bytes,
            gpu_non_model_bytes: gpu.non_model_bytes,
            gpu_used_bytes: gpu.used(),
            cpu_chunk_bytes: cpu.chunk_bytes,
            cpu_reserved_bytes: cpu.reserved_bytes,
            cpu_used_bytes: cpu.used(),
        });
        if self.setup.trace {
            let ledger = self.mm.ledger();
            let transfers = ledger[ctx.traced_ledger.min(ledger.len())..].to_vec();
            ctx.traced_ledger = ledger.len();
            let device_usage = [(Device::Gpu, gpu.used()), (Device::Cpu, cpu.used())]
                .into_iter()
                .collect();
            ctx.trace.push(TraceRecord {
                moment,
                event: event.to_string(),
                device_usage,
                transfers,
                states_changed: self.state_changes - ctx.traced_states,
            });
            ctx.traced_states = self.state_changes;
        }
        Ok(())
    }
}

#[derive(Default)]
struct RunState {
    moments: Vec<MomentRecord>,
    working_set: u64,
    evictions_at_start: Option<u64>,
    trace: Vec<TraceRecord>,
    traced_ledger: usize,
    traced_states: u64,
}
