//! Fuzz the dataset container decoder with arbitrary bytes.
//!
//! Decoding untrusted input must never panic or over-allocate; any accepted
//! dataset must survive an encode/decode round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = channel_mae::dataset::decode(data) {
        let bytes = channel_mae::dataset::encode(&ds);
        let again = channel_mae::dataset::decode(&bytes).expect("re-decode of encoded dataset");
        assert_eq!(again.records.len(), ds.records.len());
    }
});
