#![no_main]
use libfuzzer_sys::fuzz_target;
use voxfuse::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = RunConfig::from_json(data) {
        let text = serde_json::to_vec(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }
});
