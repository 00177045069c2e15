"""Non-autoregressive joint ASR + SLU: Mask-CTC and SC-Mask-CTC."""

__version__ = "0.1.0"
