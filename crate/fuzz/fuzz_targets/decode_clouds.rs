#![no_main]
use libfuzzer_sys::fuzz_target;
use massflow::baseline::{decode_clouds, BinningConfig};

mod split;

fuzz_target!(|data: &[u8]| {
    let Some((json, blob)) = split::split(data) else { return };
    if let Ok(runs) = decode_clouds(json, blob) {
        let bin = BinningConfig::default();
        for r in &runs {
            let _ = r.volumes(&bin);
        }
    }
});
