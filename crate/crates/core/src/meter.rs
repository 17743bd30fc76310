//! Byte-accurate ledger of buffers that a training step keeps alive past the
//! kernel that created them.
//!
//! The meter never looks at the allocator. Code that retains a buffer wraps it
//! in [`Retained`] (or holds a [`Tracked`] token), and the ledger entry is
//! released when that wrapper drops. Peaks are therefore exact functions of
//! the algorithm, independent of allocator behaviour, which is what the
//! depth-scaling checks need.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Category of a retained buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    /// Forward values kept for the backward pass.
    Activation,
    /// Dropout patterns kept for the backward pass.
    Mask,
    /// Activation gradients carried between layers during backward.
    Gradient,
    /// Solver scratch (Broyden factors); freed before backward starts.
    Workspace,
    /// Reconstruction drift monitor samples.
    Monitor,
}

impl Tag {
    pub const ALL: [Tag; 5] = [
        Tag::Activation,
        Tag::Mask,
        Tag::Gradient,
        Tag::Workspace,
        Tag::Monitor,
    ];

    /// Tags that count toward retained-activation memory.
    pub fn is_activation(self) -> bool {
        matches!(self, Tag::Activation | Tag::Mask)
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Anything whose retained size can be measured.
pub trait ByteSize {
    fn byte_size(&self) -> usize;
}

impl<T: Real> ByteSize for Tensor<T> {
    fn byte_size(&self) -> usize {
        Tensor::byte_size(self)
    }
}

impl<T> ByteSize for Vec<T> {
    fn byte_size(&self) -> usize {
        self.len() * std::mem::size_of::<T>()
    }
}

#[derive(Debug, Default)]
struct MeterState {
    next_id: u64,
    ledger: HashMap<u64, (usize, Tag)>,
    live: usize,
    peak: usize,
    live_activation: usize,
    peak_activation: usize,
    live_by_tag: [usize; 5],
    peak_by_tag: [usize; 5],
    registrations_by_tag: [usize; 5],
}

/// Snapshot of the meter counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterReport {
    pub live_bytes: usize,
    pub peak_bytes: usize,
    /// Peak of activation + mask bytes: the retained-activation figure.
    pub peak_activation_bytes: usize,
    pub peak_by_tag: [usize; 5],
    /// Number of registrations per tag since the last reset.
    pub registrations_by_tag: [usize; 5],
}

impl MeterReport {
    pub fn peak_of(&self, tag: Tag) -> usize {
        self.peak_by_tag[tag.index()]
    }

    pub fn registrations_of(&self, tag: Tag) -> usize {
        self.registrations_by_tag[tag.index()]
    }
}

/// Shared handle to a byte ledger. Cloning shares the ledger; a disabled
/// meter accepts registrations and records nothing.
#[derive(Debug, Clone, Default)]
pub struct MemoryMeter {
    inner: Option<Arc<Mutex<MeterState>>>,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self {
            inner: Some(Arc::new(Mutex::new(MeterState::default()))),
        }
    }

    pub fn disabled() -> Self {
        Self { inner: None }
    }

    pub fn is_enabled(&self) -> bool {
        self.inner.is_some()
    }

    fn with<R>(&self, f: impl FnOnce(&mut MeterState) -> R) -> Option<R> {
        self.inner
            .as_ref()
            .map(|m| f(&mut m.lock().expect("meter lock poisoned")))
    }

    /// Records `bytes` under `tag` until the returned token drops.
    pub fn register(&self, bytes: usize, tag: Tag) -> Tracked {
        let id = self.with(|s| {
            let id = s.next_id;
            s.next_id += 1;
            s.ledger.insert(id, (bytes, tag));
            s.live += bytes;
            s.peak = s.peak.max(s.live);
            if tag.is_activation() {
                s.live_activation += bytes;
                s.peak_activation = s.peak_activation.max(s.live_activation);
            }
            let t = tag.index();
            s.live_by_tag[t] += bytes;
            s.peak_by_tag[t] = s.peak_by_tag[t].max(s.live_by_tag[t]);
            s.registrations_by_tag[t] += 1;
            id
        });
        Tracked {
            meter: self.clone(),
            id,
        }
    }

    fn release(&self, id: u64) {
        self.with(|s| {
            if let Some((bytes, tag)) = s.ledger.remove(&id) {
                s.live -= bytes;
                if tag.is_activation() {
                    s.live_activation -= bytes;
                }
                s.live_by_tag[tag.index()] -= bytes;
            }
        });
    }

    /// Wraps `value` so its bytes stay on the ledger for as long as it lives.
    pub fn retain<V: ByteSize>(&self, value: V, tag: Tag) -> Retained<V> {
        let token = self.register(value.byte_size(), tag);
        Retained { value, token }
    }

    pub fn scope(&self, tag: Tag) -> MeterScope {
        MeterScope {
            meter: self.clone(),
            tag,
        }
    }

    pub fn report(&self) -> MeterReport {
        self.with(|s| MeterReport {
            live_bytes: s.live,
            peak_bytes: s.peak,
            peak_activation_bytes: s.peak_activation,
            peak_by_tag: s.peak_by_tag,
            registrations_by_tag: s.registrations_by_tag,
        })
        .unwrap_or_default()
    }

    /// Live bytes as recomputed from the ledger entries.
    pub fn ledger_bytes(&self) -> usize {
        self.with(|s| s.ledger.values().map(|(b, _)| b).sum())
            .unwrap_or(0)
    }

    /// Starts a new measurement window: peaks collapse to the current live
    /// figures and registration counts restart.
    pub fn reset_peak(&self) {
        self.with(|s| {
            s.peak = s.live;
            s.peak_activation = s.live_activation;
            s.peak_by_tag = s.live_by_tag;
            s.registrations_by_tag = [0; 5];
        });
    }

    /// Errors unless every registration made so far has been released.
    pub fn check_balanced(&self) -> Result<()> {
        self.with(|s| {
            if s.ledger.is_empty() && s.live == 0 {
                Ok(())
            } else {
                let mut tags: Vec<_> = s.ledger.values().map(|(b, t)| (*t, *b)).collect();
                tags.sort_by_key(|(t, _)| t.index());
                Err(Error::Accounting(format!(
                    "{} bytes still registered: {tags:?}",
                    s.live
                )))
            }
        })
        .unwrap_or(Ok(()))
    }
}

/// Ledger entry that releases itself on drop.
#[derive(Debug)]
#[must_use = "dropping the token releases the registration immediately"]
pub struct Tracked {
    meter: MemoryMeter,
    id: Option<u64>,
}

impl Drop for Tracked {
    fn drop(&mut self) {
        if let Some(id) = self.id {
            self.meter.release(id);
        }
    }
}

/// A value whose bytes are on the meter ledger while it is alive.
#[derive(Debug)]
pub struct Retained<V> {
    value: V,
    token: Tracked,
}

impl<V> Retained<V> {
    /// Releases the registration and hands back the value.
    pub fn into_inner(self) -> V {
        drop(self.token);
        self.value
    }
}

impl<V> Deref for Retained<V> {
    type Target = V;
    fn deref(&self) -> &V {
        &self.value
    }
}

impl<V> DerefMut for Retained<V> {
    fn deref_mut(&mut self) -> &mut V {
        &mut self.value
    }
}

/// Registration handle bound to one tag.
#[derive(Debug, Clone)]
pub struct MeterScope {
    meter: MemoryMeter,
    tag: Tag,
}

impl MeterScope {
    pub fn tag(&self) -> Tag {
        self.tag
    }

    pub fn track(&self, bytes: usize) -> Tracked {
        self.meter.register(bytes, self.tag)
    }

    pub fn retain<V: ByteSize>(&self, value: V) -> Retained<V> {
        self.meter.retain(value, self.tag)
    }

    pub fn nested(&self, tag: Tag) -> MeterScope {
        self.meter.scope(tag)
    }
}
