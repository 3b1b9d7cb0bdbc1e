#![no_main]
use grasp_core::ingest::parse_pcd;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // first two bytes pick the image size
    if data.len() < 2 {
        return;
    }
    let _ = parse_pcd(&data[2..], data[0] as usize, data[1] as usize);
});
