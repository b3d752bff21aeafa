//! Criterion benchmark harness for slicevlm; see benches/.
