#![no_main]

use libfuzzer_sys::fuzz_target;
use segattack::tseg::{self, TsegValue};

fuzz_target!(|data: &[u8]| {
    let Ok((value, used)) = tseg::decode_prefix(data) else {
        let _ = tseg::decode(data);
        return;
    };
    assert!(used <= data.len());
    let again = match value {
        TsegValue::F32(t) => tseg::encode_f32(&t),
        TsegValue::U8 { dims, data } => tseg::encode_u8(&dims, &data).unwrap(),
    };
    assert_eq!(&again[..], &data[..used]);
});
