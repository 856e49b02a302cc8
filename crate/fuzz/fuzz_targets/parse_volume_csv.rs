#![no_main]
use libfuzzer_sys::fuzz_target;
use massflow::baseline::parse_volume_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok((volumes, speeds)) = parse_volume_csv(data) {
        assert_eq!(volumes.len(), speeds.len());
    }
});
