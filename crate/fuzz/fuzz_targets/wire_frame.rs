#![no_main]
use flash_core::executor::protocol::{decode_request, decode_response, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(req) = decode_request(line) {
        assert_eq!(decode_request(&encode(&req)).expect("re-decode request"), req);
    }
    if let Ok(resp) = decode_response(line) {
        assert_eq!(decode_response(&encode(&resp)).expect("re-decode response"), resp);
    }
});
