#![no_main]
use libfuzzer_sys::fuzz_target;
use voxfuse::config::DatasetSpec;

fuzz_target!(|data: &[u8]| {
    let _ = DatasetSpec::from_json(data);
});
