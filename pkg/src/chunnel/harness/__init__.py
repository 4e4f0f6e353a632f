"""CLI applications and benchmarks built on the chunnel library."""
