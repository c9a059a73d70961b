"""On-the-fly DNSSEC signing with classical and post-quantum algorithms."""

__version__ = "0.1.0"
