#![no_main]

use libfuzzer_sys::fuzz_target;
use segattack::segmodel::ModelParams;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = ModelParams::decode(data) {
        let again = ModelParams::decode(&m.encode()).unwrap();
        assert_eq!(again.classes(), m.classes());
        assert_eq!(again.encode(), m.encode());
    }
});
