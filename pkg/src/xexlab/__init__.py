"""Machine IR toolchain and ciphertext side-channel laboratory."""

__version__ = "0.1.0"
