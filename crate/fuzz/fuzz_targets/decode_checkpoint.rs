#![no_main]
use libfuzzer_sys::fuzz_target;
use massflow::model::Checkpoint;

mod split;

fuzz_target!(|data: &[u8]| {
    let Some((json, blob)) = split::split(data) else { return };
    if let Ok(ck) = Checkpoint::decode(json, blob) {
        let _ = ck.params::<f32>();
        let _ = ck.params::<f64>();
    }
});
