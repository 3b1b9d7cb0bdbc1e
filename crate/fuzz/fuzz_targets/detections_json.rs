#![no_main]
use grasp_cli::{detections_json, parse_detections_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(dets) = parse_detections_json(text) {
            let again = parse_detections_json(&detections_json(&dets)).expect("written detections parse");
            assert_eq!(again.len(), dets.len());
        }
    }
});
