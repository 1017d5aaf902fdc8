"""Deterministic RNG derivation.

All randomness in the package flows through numpy's PCG64 via
``np.random.default_rng``. Independent streams are derived by feeding a
tuple of integer keys into ``np.random.SeedSequence``; the first key is
always the user-visible master seed, the second a domain tag from this
module, and the rest identify the draw site (epoch, record index, ...).
Derived streams are therefore pure functions of their keys: worker count,
scheduling and call order cannot change what any consumer sees.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep unrelated streams from colliding when they share a seed.
DOMAIN_INIT = 1
DOMAIN_ORDER = 2
DOMAIN_SAMPLE = 3
DOMAIN_EVAL = 4
DOMAIN_SYNTH = 5


def derive_rng(*keys: int) -> np.random.Generator:
    """Return a PCG64 generator keyed by the given integer tuple."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))
