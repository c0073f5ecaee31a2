#![no_main]
use libfuzzer_sys::fuzz_target;
use voxfuse::Image;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = Image::decode_pfm(data) {
        let bytes = img.encode_pfm().expect("decoded images re-encode");
        let back = Image::decode_pfm(&bytes).unwrap();
        assert_eq!((back.width(), back.height(), back.channels()), (img.width(), img.height(), img.channels()));
        // NaN payloads compare unequal, so compare bit patterns
        let bits = |i: &Image| i.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&img));
    }
});
