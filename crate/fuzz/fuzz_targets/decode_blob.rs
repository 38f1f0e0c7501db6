#![no_main]
// Input: shape bytes, a zero byte, then the blob.
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| adtg::fuzz_checks::blob(data));
