"""First-divergence cross-patching between paired transformer checkpoints."""

__version__ = "0.1.0"
