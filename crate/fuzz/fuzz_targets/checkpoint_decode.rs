//! Fuzz the checkpoint decoder with arbitrary bytes.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((params, meta)) = channel_mae::model::checkpoint::decode(data) {
        // Accepted checkpoints must re-encode cleanly and bit-stably.
        let bytes =
            channel_mae::model::checkpoint::encode(&params, &meta, channel_mae::model::checkpoint::Dtype::F64)
                .expect("re-encode of accepted checkpoint");
        let _ = channel_mae::model::checkpoint::decode(&bytes).expect("re-decode");
    }
});
