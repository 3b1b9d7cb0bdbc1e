#![no_main]
use grasp_core::autodiff::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = decode_checkpoint(data) {
        let again = decode_checkpoint(&encode_checkpoint(&store)).expect("re-encoded checkpoint decodes");
        assert_eq!(again.names(), store.names());
    }
});
