//! Stable-toolchain replay of the fuzz targets over their checked-in corpora,
//! plus random byte mutations of each seed.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use flash_core::executor::protocol::{decode_request, decode_response, encode};
use flash_core::graph::PipelineSpec;
use flash_core::orchestrator::trace::{parse_trace, TraceWriter};
use proptest::prelude::*;

fn corpus(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut seeds: Vec<Vec<u8>> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| fs::read(e.unwrap().path()).unwrap())
        .collect();
    seeds.sort();
    assert!(!seeds.is_empty());
    seeds
}

fn spec_json(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    let Ok(spec) = PipelineSpec::from_json_str(text) else { return false };
    let again = PipelineSpec::from_json_str(&spec.to_json_value().to_string()).expect("re-parse");
    assert_eq!(again, spec);
    let _ = spec.enumerate_paths(64);
    true
}

fn wire_frame(data: &[u8]) -> bool {
    let Ok(line) = std::str::from_utf8(data) else { return false };
    let mut ok = false;
    if let Ok(req) = decode_request(line) {
        assert_eq!(decode_request(&encode(&req)).expect("re-decode request"), req);
        ok = true;
    }
    if let Ok(resp) = decode_response(line) {
        assert_eq!(decode_response(&encode(&resp)).expect("re-decode response"), resp);
        ok = true;
    }
    ok
}

#[derive(Clone, Default)]
struct Sink(Arc<Mutex<Vec<u8>>>);

impl Write for Sink {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn trace_csv(data: &[u8]) -> bool {
    let Ok(rows) = parse_trace(data) else { return false };
    let sink = Sink::default();
    let mut w = TraceWriter::new(Box::new(sink.clone())).unwrap();
    for r in &rows {
        w.append(r).unwrap();
    }
    drop(w);
    let bytes = sink.0.lock().unwrap().clone();
    assert_eq!(parse_trace(bytes.as_slice()).expect("re-parse"), rows);
    true
}

#[test]
fn seeds_replay() {
    // Each corpus holds both accepted and rejected inputs.
    for (name, f) in [("spec_json", spec_json as fn(&[u8]) -> bool), ("wire_frame", wire_frame), ("trace_csv", trace_csv)] {
        let results: Vec<bool> = corpus(name).iter().map(|s| f(s)).collect();
        assert!(results.iter().any(|&r| r), "{name}: nothing accepted");
        assert!(results.iter().any(|&r| !r), "{name}: nothing rejected");
    }
}

fn mutated(target: &'static str) -> impl Strategy<Value = Vec<u8>> {
    let seeds = corpus(target);
    (0..seeds.len(), proptest::collection::vec((any::<prop::sample::Index>(), any::<u8>(), 0u8..3), 0..8)).prop_map(
        move |(i, edits)| {
            let mut s = seeds[i].clone();
            for (at, byte, kind) in edits {
                if s.is_empty() {
                    s.push(byte);
                    continue;
                }
                let at = at.index(s.len());
                match kind {
                    0 => s[at] = byte,
                    1 => s.insert(at, byte),
                    _ => {
                        s.remove(at);
                    }
                }
            }
            s
        },
    )
}

proptest! {
    #[test]
    fn mutated_specs(data in mutated("spec_json")) {
        spec_json(&data);
    }

    #[test]
    fn mutated_frames(data in mutated("wire_frame")) {
        wire_frame(&data);
    }

    #[test]
    fn mutated_traces(data in mutated("trace_csv")) {
        trace_csv(&data);
    }

    #[test]
    fn arbitrary_bytes(data in proptest::collection::vec(any::<u8>(), 0..256)) {
        spec_json(&data);
        wire_frame(&data);
        trace_csv(&data);
    }
}
