#![no_main]
use libfuzzer_sys::fuzz_target;
use massflow::synthgen::ScenarioMix;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(mix) = ScenarioMix::parse(text) {
        let _ = mix.counts(37);
    }
});
