"""talgate: a desk-scale temporal action localization testbed.

The package generates synthetic detection corpora with controllable
vision/language reliability, trains a small anchor-free detector whose
language residual is gated by a learned per-frame advantage estimate, and
evaluates localization quality plus language-bias diagnostics.
"""

__version__ = "0.1.0"
