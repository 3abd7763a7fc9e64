"""Demo applications built on the runtime."""
