//! Shared setup for the criterion benches.

use std::path::PathBuf;

use crsim_core::device::{build_system, DeviceFile, SystemOperators};
use crsim_core::pulse::{load_pulse_file, PulseRecord};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

pub fn three_transmon() -> SystemOperators {
    let spec = DeviceFile::load(fixture("devices/three_transmon.json"))
        .and_then(|f| f.to_spec())
        .expect("shipped device");
    build_system(&spec).expect("device builds")
}

pub fn table3_row(gate: &str) -> PulseRecord {
    load_pulse_file(fixture("pulses/table3.json"))
        .expect("shipped pulses")
        .into_iter()
        .find(|r| r.gate() == gate)
        .expect("row present")
}
