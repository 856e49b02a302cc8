#![no_main]
use libfuzzer_sys::fuzz_target;
use massflow::data::ImageDims;
use massflow::model::{ArchConfig, Network};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(arch) = ArchConfig::parse(text, ImageDims::new(16, 16, 1), 0) {
        // a parsed config is validated, so planning must not fail
        Network::new(&arch).expect("validated arch builds");
    }
});
