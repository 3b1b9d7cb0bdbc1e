#![no_main]
use grasp_core::geometry::polygon_to_rect;
use grasp_core::ingest::parse_rect_file;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = parse_rect_file(data) {
        for p in &file.polygons {
            let _ = polygon_to_rect(p);
        }
    }
});
