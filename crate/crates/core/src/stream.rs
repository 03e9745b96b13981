//! Double-buffered layer streaming.
//!
//! Two slots hold quantized layer weights. While the forward pass computes
//! layer `l` out of one slot, a loader thread reads layer `l + 1` (wrapping to
//! layer 0 for the next token) into the other. At most two layers are
//! resident at any instant, on top of the persistent tensors.
//!
//! Slot states move `Empty → Loading → Ready → InUse → Empty`. A compute never
//! reads a slot that is `Empty` or `Loading`.
//!
//! [`plan_schedule`] is the matching analytic model: given per-layer compute
//! and transfer costs it lays out a timeline with or without overlap.

use std::path::Path;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{LayerProvider, LayerWeights, ModelConfig};
use crate::modelio::{self, ModelLayout, SectionReader};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Empty,
    Loading,
    Ready,
    InUse,
}

#[derive(Debug)]
struct Slot {
    layer: Option<usize>,
    state: SlotState,
    weights: Option<Arc<LayerWeights>>,
    error: Option<Error>,
}

impl Slot {
    fn empty() -> Self {
        Slot {
            layer: None,
            state: SlotState::Empty,
            weights: None,
            error: None,
        }
    }

    fn clear(&mut self) {
        *self = Slot::empty();
    }
}

/// One completed layer transfer, in seconds since the streamer was created.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferRecord {
    pub layer: usize,
    pub start: f64,
    pub end: f64,
}

/// One `acquire` call: when it was made and when the weights were handed out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquireRecord {
    pub layer: usize,
    pub called: f64,
    pub returned: f64,
}

#[derive(Debug, Clone, Default)]
pub struct StreamTrace {
    pub transfers: Vec<TransferRecord>,
    pub acquires: Vec<AcquireRecord>,
}

struct Shared {
    slots: Mutex<[Slot; 2]>,
    ready: Condvar,
    transfers: Mutex<Vec<TransferRecord>>,
    origin: Instant,
}

struct LoadRequest {
    slot: usize,
    layer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamOptions {
    /// Prefetch the next layer while the current one computes.
    pub prefetch: bool,
    /// Artificial per-layer transfer delay added after each read.
    pub transfer_delay: Duration,
}

impl Default for StreamOptions {
    fn default() -> Self {
        StreamOptions {
            prefetch: true,
            transfer_delay: Duration::ZERO,
        }
    }
}

/// Streams layers out of a model file through two buffer slots.
pub struct LayerStreamer {
    shared: Arc<Shared>,
    requests: Option<Sender<LoadRequest>>,
    loader: Option<JoinHandle<()>>,
    n_layers: usize,
    layer_bytes: usize,
    persistent_bytes: usize,
    options: StreamOptions,
    acquires: Vec<AcquireRecord>,
    boundary_resident: Vec<usize>,
    peak_resident: usize,
}

impl LayerStreamer {
    /// Opens a loader over `path` and loads layer 0 before returning.
    pub fn open(path: &Path, config: &ModelConfig, layout: &ModelLayout, options: StreamOptions) -> Result<Self> {
        let mut reader = SectionReader::open(path)?;
        let shared = Arc::new(Shared {
            slots: Mutex::new([Slot::empty(), Slot::empty()]),
            ready: Condvar::new(),
            transfers: Mutex::new(Vec::new()),
            origin: Instant::now(),
        });

        // Layer 0 is loaded at start-up, on the caller's thread.
        let start = shared.origin.elapsed().as_secs_f64();
        let first = modelio::read_layer(&mut reader, config, layout, 0)
            .map_err(|e| Error::LayerLoad { layer: 0, source: Box::new(e) })?;
        thread::sleep(options.transfer_delay);
        let end = shared.origin.elapsed().as_secs_f64();
        shared.transfers.lock().unwrap().push(TransferRecord { layer: 0, start, end });
        {
            let mut slots = shared.slots.lock().unwrap();
            slots[0] = Slot {
                layer: Some(0),
                state: SlotState::Ready,
                weights: Some(Arc::new(first)),
                error: None,
            };
        }

        let (tx, rx) = mpsc::channel();
        let loader = {
            let shared = Arc::clone(&shared);
            let config = *config;
            let layout = layout.clone();
            let delay = options.transfer_delay;
            thread::Builder::new()
                .name("layer-loader".into())
                .spawn(move || loader_loop(rx, reader, shared, config, layout, delay))
                .map_err(|e| Error::io("spawning layer loader", 0, e))?
        };

        let persistent_bytes = modelio::persistent_bytes(config);
        Ok(LayerStreamer {
            shared,
            requests: Some(tx),
            loader: Some(loader),
            n_layers: config.n_layers,
            layer_bytes: modelio::layer_bytes(config),
            persistent_bytes,
            options,
            acquires: Vec::new(),
            boundary_resident: Vec::new(),
            peak_resident: persistent_bytes + modelio::layer_bytes(config),
        })
    }

    pub fn options(&self) -> StreamOptions {
        self.options
    }

    fn lock(&self) -> MutexGuard<'_, [Slot; 2]> {
        self.shared.slots.lock().unwrap()
    }

    fn resident(&self, slots: &[Slot; 2]) -> usize {
        let layers = slots.iter().filter(|s| s.state != SlotState::Empty).count();
        self.persistent_bytes + layers * self.layer_bytes
    }

    /// Bytes of all resident quantized weights: persistent tensors plus every
    /// slot that is loading or holds a layer.
    pub fn resident_weight_bytes(&self) -> usize {
        self.resident(&self.lock())
    }

    /// The most bytes ever resident at a state transition.
    pub fn peak_resident_bytes(&self) -> usize {
        self.peak_resident
    }

    /// Resident bytes sampled as each `acquire` returned, in call order.
    pub fn boundary_resident_bytes(&self) -> &[usize] {
        &self.boundary_resident
    }

    /// Persistent bytes plus two layers.
    pub fn memory_ceiling(&self) -> usize {
        self.persistent_bytes + 2 * self.layer_bytes
    }

    pub fn slot_states(&self) -> [(Option<usize>, SlotState); 2] {
        let s = self.lock();
        [(s[0].layer, s[0].state), (s[1].layer, s[1].state)]
    }

    pub fn trace(&self) -> StreamTrace {
        StreamTrace {
            transfers: self.shared.transfers.lock().unwrap().clone(),
            acquires: self.acquires.clone(),
        }
    }

    pub fn clear_trace(&mut self) {
        self.shared.transfers.lock().unwrap().clear();
        self.acquires.clear();
        self.boundary_resident.clear();
    }

    fn request(&self, slot: usize, layer: usize) -> Result<()> {
        self.requests
            .as_ref()
            .and_then(|tx| tx.send(LoadRequest { slot, layer }).ok())
            .ok_or_else(|| Error::State("layer loader has stopped".into()))
    }

    fn note_resident(&mut self, bytes: usize) {
        self.peak_resident = self.peak_resident.max(bytes);
        debug_assert!(bytes <= self.memory_ceiling());
    }

    /// Blocks until layer `layer` is resident, marks it in use, releases the
    /// previous layer's slot, and starts prefetching the next layer.
    pub fn acquire_layer(&mut self, layer: usize) -> Result<Arc<LayerWeights>> {
        if layer >= self.n_layers {
            return Err(Error::Input(format!("no layer {layer} in a {}-layer model", self.n_layers)));
        }
        let called = self.shared.origin.elapsed().as_secs_f64();
        let shared = Arc::clone(&self.shared);
        let mut slots = shared.slots.lock().unwrap();

        let idx = match slots.iter().position(|s| s.layer == Some(layer)) {
            Some(i) => i,
            None => {
                // Not prefetched: load into the slot that is not in use,
                // waiting out any transfer still in flight there.
                let i = slots.iter().position(|s| s.state != SlotState::InUse).unwrap_or(0);
                while slots[i].state == SlotState::Loading {
                    slots = shared.ready.wait(slots).unwrap();
                }
                slots[i].clear();
                let other = 1 - i;
                if slots[other].state == SlotState::InUse {
                    // The previous layer is finished once a new one is requested.
                    slots[other].clear();
                }
                slots[i].layer = Some(layer);
                slots[i].state = SlotState::Loading;
                let bytes = self.resident(&slots);
                self.note_resident(bytes);
                self.request(i, layer)?;
                i
            }
        };

        while slots[idx].state == SlotState::Loading {
            slots = shared.ready.wait(slots).unwrap();
        }
        if let Some(e) = slots[idx].error.take() {
            slots[idx].clear();
            return Err(Error::LayerLoad { layer, source: Box::new(e) });
        }
        assert!(
            matches!(slots[idx].state, SlotState::Ready | SlotState::InUse),
            "compute would read slot {idx} in state {:?}",
            slots[idx].state
        );
        slots[idx].state = SlotState::InUse;
        let weights = Arc::clone(slots[idx].weights.as_ref().expect("ready slot holds weights"));

        let other = 1 - idx;
        if slots[other].state == SlotState::InUse {
            slots[other].clear();
        }
        if self.options.prefetch {
            let next = (layer + 1) % self.n_layers;
            if next != layer && slots[other].state == SlotState::Empty {
                slots[other].layer = Some(next);
                slots[other].state = SlotState::Loading;
                self.request(other, next)?;
            }
        }
        let bytes = self.resident(&slots);
        self.note_resident(bytes);
        self.boundary_resident.push(bytes);
        drop(slots);

        let returned = self.shared.origin.elapsed().as_secs_f64();
        self.acquires.push(AcquireRecord { layer, called, returned });
        Ok(weights)
    }
}

impl LayerProvider for LayerStreamer {
    fn acquire(&mut self, layer: usize) -> Result<Arc<LayerWeights>> {
        self.acquire_layer(layer)
    }
}

impl Drop for LayerStreamer {
    fn drop(&mut self) {
        self.requests.take();
        if let Some(h) = self.loader.take() {
            let _ = h.join();
        }
    }
}

fn loader_loop(
    rx: Receiver<LoadRequest>,
    mut reader: SectionReader,
    shared: Arc<Shared>,
    config: ModelConfig,
    layout: ModelLayout,
    delay: Duration,
) {
    while let Ok(LoadRequest { slot, layer }) = rx.recv() {
        let start = shared.origin.elapsed().as_secs_f64();
        let result = modelio::read_layer(&mut reader, &config, &layout, layer);
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        let end = shared.origin.elapsed().as_secs_f64();
        shared.transfers.lock().unwrap().push(TransferRecord { layer, start, end });
        let mut slots = shared.slots.lock().unwrap();
        let s = &mut slots[slot];
        if s.layer == Some(layer) && s.state == SlotState::Loading {
            match result {
                Ok(w) => {
                    s.weights = Some(Arc::new(w));
                    s.state = SlotState::Ready;
                }
                Err(e) => {
                    s.error = Some(e);
                    s.state = SlotState::Ready;
                }
            }
        }
        shared.ready.notify_all();
    }
}

// ---- schedule model -------------------------------------------------------

/// Per-layer compute and transfer costs, in any consistent unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleCosts {
    pub compute: Vec<f64>,
    pub transfer: Vec<f64>,
}

impl ScheduleCosts {
    pub fn uniform(layers: usize, compute: f64, transfer: f64) -> Self {
        ScheduleCosts {
            compute: vec![compute; layers],
            transfer: vec![transfer; layers],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    Sync,
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerEvents {
    pub transfer_start: f64,
    pub transfer_end: f64,
    pub compute_start: f64,
    pub compute_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub mode: ScheduleMode,
    pub layers: Vec<LayerEvents>,
    pub total_time: f64,
}

/// Lays out transfers and computes for one pass over the layers.
///
/// Sync: each layer transfers, then computes, with no overlap.
/// Async: layer 0 transfers up front; the transfer of layer `l + 1` starts
/// when layer `l` starts computing, and layer `l + 1` computes once both its
/// transfer and layer `l` are done. The total is
/// `t_t[0] + Σ max(t_c[l], t_t[l+1])` with `t_t[L] = 0`.
pub fn plan_schedule(costs: &ScheduleCosts, mode: ScheduleMode) -> Result<Timeline> {
    let n = costs.compute.len();
    if n == 0 || costs.transfer.len() != n {
        return Err(Error::Input(format!(
            "need matching non-empty cost vectors, got {} compute and {} transfer",
            n,
            costs.transfer.len()
        )));
    }
    if let Some(bad) = costs.compute.iter().chain(&costs.transfer).find(|c| !(**c >= 0.0) || !c.is_finite()) {
        return Err(Error::Input(format!("cost {bad} is negative or not finite")));
    }
    let (tc, tt) = (&costs.compute, &costs.transfer);
    let mut layers = Vec::with_capacity(n);
    match mode {
        ScheduleMode::Sync => {
            let mut t = 0.0;
            for l in 0..n {
                let transfer_start = t;
                let transfer_end = t + tt[l];
                let compute_end = transfer_end + tc[l];
                layers.push(LayerEvents {
                    transfer_start,
                    transfer_end,
                    compute_start: transfer_end,
                    compute_end,
                });
                t = compute_end;
            }
        }
        ScheduleMode::Async => {
            let mut compute_start = tt[0];
            layers.push(LayerEvents {
                transfer_start: 0.0,
                transfer_end: tt[0],
                compute_start,
                compute_end: compute_start + tc[0],
            });
            for l in 1..n {
                let transfer_start = compute_start;
                let transfer_end = transfer_start + tt[l];
                // compute_start advances by max(t_c[l-1], t_t[l]) exactly
                compute_start += tc[l - 1].max(tt[l]);
                layers.push(LayerEvents {
                    transfer_start,
                    transfer_end,
                    compute_start,
                    compute_end: compute_start + tc[l],
                });
            }
        }
    }
    let total_time = layers.last().unwrap().compute_end;
    Ok(Timeline { mode, layers, total_time })
}
