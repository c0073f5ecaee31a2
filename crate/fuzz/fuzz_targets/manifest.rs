#![no_main]
use libfuzzer_sys::fuzz_target;
use voxfuse::scenes::manifest_from_json;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = manifest_from_json(data) {
        // accepted manifests never point outside the dataset directory
        for e in m.train.iter().chain(&m.test) {
            assert!(!e.image.split(['/', '\\']).any(|part| part == ".."));
            assert!(!e.image.starts_with('/'));
        }
    }
});
