"""Reference-free translation quality estimation lab: adapters, QE head, prompting, metrics."""
