#![no_main]
use libfuzzer_sys::fuzz_target;
use nfdistill::data::Dataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = Dataset::decode(data) {
        let bytes = ds.encode().expect("decoded dataset encodes");
        assert_eq!(
            Dataset::decode(&bytes).expect("round trip").examples.len(),
            ds.examples.len()
        );
    }
});
