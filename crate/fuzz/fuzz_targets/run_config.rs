#![no_main]
// Input: config JSON on the first line, then one key=value override per line.
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| adtg::fuzz_checks::config(data));
