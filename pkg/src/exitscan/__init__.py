"""Exit-relay scanner: probes exits for tampering through a local routing daemon."""

__version__ = "0.1.0"
