#![no_main]
use libfuzzer_sys::fuzz_target;
use neurorecon::checkpoint::TensorArchive;

// Anything that parses must re-encode to an archive that parses identically.
fuzz_target!(|data: &[u8]| {
    if let Ok(a) = TensorArchive::from_bytes(data) {
        let again = TensorArchive::from_bytes(&a.to_bytes()).expect("re-encoded archive parses");
        assert_eq!(a.to_bytes(), again.to_bytes());
    }
});
