#![no_main]
use libfuzzer_sys::fuzz_target;
use massflow::data::decode_run;

mod split;

fuzz_target!(|data: &[u8]| {
    if let Some((manifest, blob)) = split::split(data) {
        if let Ok(run) = decode_run(manifest, blob) {
            // whatever decodes must satisfy the run invariants
            run.validate().expect("decoded run is valid");
        }
    }
});
