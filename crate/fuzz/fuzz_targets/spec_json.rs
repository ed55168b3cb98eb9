#![no_main]
use flash_core::graph::PipelineSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = PipelineSpec::from_json_str(text) {
        // Accepted specs re-serialize to themselves.
        let again = PipelineSpec::from_json_str(&spec.to_json_value().to_string()).expect("re-parse");
        assert_eq!(again, spec);
        let _ = spec.enumerate_paths(64);
    }
});
