//! Behavioural simulator of binary-weight crossbars with spatial dropout
//! modules.

pub mod inconsistency;
pub mod layout;
pub mod mtj;
pub mod network;
pub mod sim;
pub mod stream;

pub use inconsistency::{demonstrate_mask_inconsistency, sample_per_cycle_element_masks, InconsistencyReport};
pub use layout::{map_layer, map_strategy1, map_strategy2, map_weight, CrossbarLayout, LayoutDump, Strategy};
pub use mtj::{module_bank, mtj_sample, MtjDropoutModule, MtjState, SAMPLING_LATENCY_NS};
pub use network::{build_layouts, simulate_network, simulate_network_batch, simulate_pass, NetworkLayouts, PassMasks};
pub use sim::{simulate_layer, DropoutConfigMode, IdealReadout, LayerSimulation, PartialSumReadout, Sampling, SimOptions};
pub use stream::{stream_moving_windows, InputStream};
