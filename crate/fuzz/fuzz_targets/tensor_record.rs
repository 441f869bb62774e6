#![no_main]

use groundseg::diff::{read_tensor_record, write_tensor_record};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((record, used)) = read_tensor_record(data) {
        assert!(used <= data.len());
        assert_eq!(record.shape.iter().product::<usize>(), record.values.len());
        let mut bytes = Vec::new();
        write_tensor_record(&mut bytes, &record.shape, &record.values).unwrap();
        assert_eq!(bytes, &data[..used]);
    }
});
