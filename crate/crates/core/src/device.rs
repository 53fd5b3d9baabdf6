use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeviceKind {
    Mobile,
    Edge,
}

/// Run-time state of one mobile or edge device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceState<T> {
    pub id: usize,
    pub kind: DeviceKind,
    pub position: (T, T),
    /// True battery energy, joules.
    pub battery: T,
    pub connected: bool,
    /// Finish time of the last task placed on this device, seconds.
    pub queue_tail: T,
    pub generated: u32,
    pub processed: u32,
}
