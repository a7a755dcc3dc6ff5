#![no_main]
use libfuzzer_sys::fuzz_target;
use neurorecon::experiment::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::parse(text) {
            let _ = cfg.validate();
            let back = ExperimentConfig::parse(&cfg.to_toml()).expect("serialized config parses");
            assert_eq!(back.to_toml(), cfg.to_toml());
        }
    }
});
