#![no_main]
use libfuzzer_sys::fuzz_target;
use voxfuse::posedist::PosePath;

fuzz_target!(|data: &[u8]| {
    let Ok(path) = serde_json::from_slice::<PosePath>(data) else { return };
    for u in [0.0, 0.25, 0.5, 1.0] {
        let _ = path.pose_at(u);
    }
    let text = serde_json::to_vec(&path).unwrap();
    assert_eq!(serde_json::from_slice::<PosePath>(&text).unwrap(), path);
});
