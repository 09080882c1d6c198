"""Dataset, cache and run-log I/O."""
