#![no_main]

use crowdcast::model::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        assert_eq!(ck.encode().expect("decoded checkpoints re-encode"), data);
    }
});
