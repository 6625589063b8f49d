//! Benchmarks for the cell, fine-scale and mollifier kernels; see `benches/`.
