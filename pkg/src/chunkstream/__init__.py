"""Chunked long-video diffusion at toy scale: sampler, conditioning modules, refinement and metrics."""

__version__ = "0.1.0"
