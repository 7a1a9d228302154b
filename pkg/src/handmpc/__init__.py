"""Two-stage walking MPC with hand-contact force planning."""

__version__ = "0.1.0"
