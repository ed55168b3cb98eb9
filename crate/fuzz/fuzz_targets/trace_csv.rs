#![no_main]
use std::io::Write;
use std::sync::{Arc, Mutex};

use flash_core::orchestrator::trace::{parse_trace, TraceWriter};
use libfuzzer_sys::fuzz_target;

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

fuzz_target!(|data: &[u8]| {
    let Ok(rows) = parse_trace(data) else { return };
    // Whatever parses is written back and read again unchanged.
    let sink = Sink::default();
    let mut w = TraceWriter::new(Box::new(sink.clone())).unwrap();
    for r in &rows {
        w.append(r).unwrap();
    }
    drop(w);
    let bytes = sink.0.lock().unwrap().clone();
    assert_eq!(parse_trace(bytes.as_slice()).expect("re-parse"), rows);
});
