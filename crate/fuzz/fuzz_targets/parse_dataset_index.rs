#![no_main]
use libfuzzer_sys::fuzz_target;
use massflow::data::DatasetIndex;

fuzz_target!(|data: &[u8]| {
    let _ = DatasetIndex::parse(data);
});
