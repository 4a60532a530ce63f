"""Reference numerics for frame-wise gated delta-rule scans, camera-ray conditioning and trajectory benchmarks."""
