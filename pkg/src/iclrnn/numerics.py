"""Dense-matrix helpers and seeded randomness.

Matrices are plain 2-D ``float64`` numpy arrays. Randomness goes through
``numpy.random.Generator`` backed by PCG64, with sub-streams derived from
``(seed, index...)`` via ``SeedSequence`` so that any derived seed is a
pure function of its parents.
"""

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

RNG_ALGORITHM = "PCG64"


def as_mat(a, name="matrix"):
    """Return ``a`` as a finite 2-D float64 array (copying only when needed)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite entries")
    return m


def matmul(a, b):
    a = as_mat(a, "a")
    b = as_mat(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(a):
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def sub_seed(seed, *index):
    """Derive a child seed from ``seed`` and an index path.

    Pure: the same arguments always give the same 64-bit result, and
    distinct index paths give (with overwhelming probability) distinct
    seeds.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(i) for i in index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sub_rng(seed, *index):
    return make_rng(sub_seed(seed, *index))


def gaussian(rng, n, mean=0.0, std=1.0):
    """Draw ``n`` i.i.d. normal samples.

    Uses the generator's ziggurat sampler (``Generator.standard_normal``)
    and an affine map, so ``std == 0`` returns exactly ``mean``.
    """
    if std < 0:
        raise ParameterError(f"std must be non-negative, got {std}")
    z = rng.standard_normal(int(n))
    return mean + std * z
