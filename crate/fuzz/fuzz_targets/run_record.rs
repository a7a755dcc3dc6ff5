#![no_main]
use libfuzzer_sys::fuzz_target;
use neurorecon::experiment::RunRecord;

fuzz_target!(|data: &[u8]| {
    let _ = serde_json::from_slice::<RunRecord>(data);
});
