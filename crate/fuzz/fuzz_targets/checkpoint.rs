#![no_main]
use libfuzzer_sys::fuzz_target;
use voxfuse::VoxelField;

fuzz_target!(|data: &[u8]| {
    // anything that decodes must re-encode to the same bytes
    if let Ok(field) = VoxelField::decode_checkpoint(data) {
        let bytes = field.encode_checkpoint();
        assert_eq!(bytes, data);
        let again = VoxelField::decode_checkpoint(&bytes).unwrap();
        assert_eq!(again.resolution(), field.resolution());
    }
});
