#![no_main]
use grasp_core::ingest::parse_netpbm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_netpbm(data);
});
