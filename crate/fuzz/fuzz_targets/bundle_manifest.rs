#![no_main]
// Input: manifest JSON, a zero byte, then the parameter blob.
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| adtg::fuzz_checks::bundle(data));
