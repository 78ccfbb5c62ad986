//! Selective state-space scan and the temporal encoding block built on it.

mod block;
mod scan;

pub use block::{
    mamba_block, selective_scan_chunked, selective_scan_sequential, MambaBlockParams, MambaConfig, Residual,
    SsmParams, DELTA_INIT,
};
pub use scan::{scan_chunked, scan_on_tape, scan_sequential, ScanInputs, SsmState};
