#![no_main]
use libfuzzer_sys::fuzz_target;
use nfdistill::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        // Whatever decodes must re-encode to something that decodes the same.
        let bytes = ck.encode().expect("decoded checkpoint encodes");
        let back = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(back.model.params().checksum(), ck.model.params().checksum());
    }
});
