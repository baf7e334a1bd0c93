"""Spatially varying Rician noise injection for diffusion-weighted volumes.

The noise level is a smooth multiplicative field: sigma(x) = level * (1 +
fluctuation * G(x)) where G is a unit-variance Gaussian random field low-pass
filtered to wavelengths of at least W/4 voxels, clamped at 20% of the level
and rescaled so its spatial mean equals the level.  Sigma is expressed as a
fraction of a reference b=0 signal; magnitude noise then follows

    out = sqrt((S + n1)^2 + n2^2),   n1, n2 ~ N(0, (sigma(x) * s0_ref)^2)

independently per (voxel, direction).  Random numbers come from a
counter-based Philox generator keyed by the seed, so output is bit-identical
for identical inputs and seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["NoiseField", "make_noise_field", "add_rician"]

_FLOOR_FRACTION = 0.2


@dataclass(frozen=True)
class NoiseField:
    """Per-voxel noise level as a fraction of the reference b=0 signal."""

    sigma_map: np.ndarray  # (W, H, S), >= 0
    level: float
    seed: int

    def __post_init__(self):
        s = np.asarray(self.sigma_map, dtype=np.float64)
        if s.ndim != 3:
            raise ValueError("sigma_map must be a 3D volume")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValueError("sigma_map must be finite and nonnegative")
        object.__setattr__(self, "sigma_map", s)


def _smooth_unit_field(dims: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    """Unit-variance Gaussian field low-pass filtered to wavelengths >= W/4."""
    white = rng.standard_normal(dims)
    spec = np.fft.fftn(white)
    cutoff = 4.0 / dims[0]  # cycles per voxel
    freqs = [np.fft.fftfreq(n) for n in dims]
    fx, fy, fz = np.meshgrid(*freqs, indexing="ij")
    radial = np.sqrt(fx**2 + fy**2 + fz**2)
    spec[radial > cutoff] = 0.0
    field = np.fft.ifftn(spec).real
    sd = field.std()
    if sd < 1e-30:
        return np.zeros(dims)
    return (field - field.mean()) / sd


def make_noise_field(
    dims: tuple[int, int, int],
    level: float,
    seed: int = 0,
    fluctuation: float = 0.5,
) -> NoiseField:
    """Smooth nonnegative sigma map with spatial mean equal to ``level``.

    ``fluctuation`` scales the unit-variance random field (0 gives an exactly
    constant map).  Levels of 0.025 / 0.05 / 0.075 correspond to the usual
    2.5% / 5% / 7.5% conditions.
    """
    if not 0.0 < level <= 0.2:
        raise ValueError(f"level must lie in (0, 0.2], got {level}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive integers, got {dims}")
    if fluctuation == 0.0:
        return NoiseField(sigma_map=np.full(dims, level), level=level, seed=seed)
    rng = np.random.default_rng(np.random.Philox(key=seed))
    g = _smooth_unit_field(dims, rng)
    sigma = level * (1.0 + fluctuation * g)
    sigma = np.maximum(sigma, _FLOOR_FRACTION * level)
    sigma *= level / sigma.mean()
    return NoiseField(sigma_map=sigma, level=level, seed=seed)


def add_rician(
    signals: np.ndarray,
    field: NoiseField,
    s0_ref: float,
    seed: int = 0,
) -> np.ndarray:
    """Magnitude (Rician) noise on a (W, H, S, D) signal volume.

    ``s0_ref`` converts the fractional sigma map into signal units (use the
    mean b=0 signal of the volume).  Deterministic per seed; a zero sigma map
    returns the input exactly.
    """
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 4:
        raise ValueError("signals must be 4D (W, H, S, D)")
    if signals.shape[:3] != field.sigma_map.shape:
        raise ValueError(
            f"signal volume {signals.shape[:3]} does not match sigma map "
            f"{field.sigma_map.shape}"
        )
    if np.any(signals < 0):
        raise ValueError("signals must be nonnegative")
    sd = field.sigma_map[:, :, :, None] * float(s0_ref)
    if np.all(sd == 0):
        return signals.copy()
    rng = np.random.default_rng(np.random.Philox(key=seed))
    n1 = rng.standard_normal(signals.shape) * sd
    n2 = rng.standard_normal(signals.shape) * sd
    return np.sqrt((signals + n1) ** 2 + n2**2)
