"""Diffusion kurtosis signal model, derived metrics, and the WLLS fit.

The signal follows the cumulant expansion

    ln S(b, g) = ln s0 - b * ADC(g) + (b^2 / 6) * MD^2 * Kapp(g)

with ADC(g) = g^T D g, MD = tr(D)/3 and Kapp(g) the full contraction of the
fourth-order kurtosis tensor with g.  Fitting uses the linearized
22-parameter model [ln s0, 6 diffusion components, 15 components of
V = MD^2 * K]: an ordinary least-squares pass followed by a reweighted pass
with weights equal to the squared pass-1 predicted signals.

Scalar metrics: mean/axial/radial kurtosis by direction averaging of the
apparent kurtosis AKC(g) = (MD/ADC(g))^2 * Kapp(g) (clamped to [-3, 10];
the spherical mean uses a 512-point Fibonacci grid, which keeps the metric
rotation-invariant to better than 1e-3), and the kurtosis fractional
anisotropy from the isotropic projection of K.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .qspace import GradientScheme, sphere_fibonacci

__all__ = [
    "DkiVoxel",
    "DkiMetrics",
    "dki_design_matrix",
    "dki_forward",
    "dki_metrics",
    "dki_fit_wlls",
    "fit_wlls_many",
    "metrics_many",
    "k15_to_tensor",
    "tensor_to_k15",
]

# Unique-component bookkeeping.  Diffusion: xx, yy, zz, xy, xz, yz.
_D6_IDX = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]
_D6_MULT = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
# Kurtosis: the 15 distinct index combinations of a fully symmetric 4-tensor.
_K15_IDX = [
    (0, 0, 0, 0), (1, 1, 1, 1), (2, 2, 2, 2),
    (0, 0, 0, 1), (0, 0, 0, 2), (0, 1, 1, 1), (1, 1, 1, 2), (0, 2, 2, 2), (1, 2, 2, 2),
    (0, 0, 1, 1), (0, 0, 2, 2), (1, 1, 2, 2),
    (0, 0, 1, 2), (0, 1, 1, 2), (0, 1, 2, 2),
]
_K15_MULT = np.array([1.0] * 3 + [4.0] * 6 + [6.0] * 3 + [12.0] * 3)

AKC_CLAMP = (-3.0, 10.0)
_MK_GRID = sphere_fibonacci(512)
_RK_ANGLES = 2.0 * np.pi * np.arange(64) / 64.0

# Fully symmetric isotropic fourth-order tensor.
_EYE4 = np.zeros((3, 3, 3, 3))
for _i in range(3):
    for _j in range(3):
        for _k in range(3):
            for _l in range(3):
                _EYE4[_i, _j, _k, _l] = (
                    (_i == _j) * (_k == _l) + (_i == _k) * (_j == _l) + (_i == _l) * (_j == _k)
                ) / 3.0


def k15_to_tensor(k15: np.ndarray) -> np.ndarray:
    """Expand 15 unique components into the full symmetric (3,3,3,3) tensor."""
    from itertools import permutations

    k = np.zeros((3, 3, 3, 3))
    for comp, idx in zip(np.asarray(k15, dtype=np.float64), _K15_IDX):
        for perm in set(permutations(idx)):
            k[perm] = comp
    return k


def tensor_to_k15(k: np.ndarray) -> np.ndarray:
    """Read the 15 unique components out of a full symmetric tensor."""
    return np.array([k[idx] for idx in _K15_IDX])


def _d6_to_mat(d6: np.ndarray) -> np.ndarray:
    m = np.zeros((3, 3))
    for comp, (i, j) in zip(d6, _D6_IDX):
        m[i, j] = m[j, i] = comp
    return m


def _mat_to_d6(m: np.ndarray) -> np.ndarray:
    return np.array([m[i, j] for i, j in _D6_IDX])


@dataclass(frozen=True)
class DkiVoxel:
    """One voxel of the kurtosis model: b=0 signal, diffusion and kurtosis tensors."""

    s0: float
    d: np.ndarray  # symmetric (3, 3), mm^2/s
    k: np.ndarray  # fully symmetric (3, 3, 3, 3), dimensionless

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        k = np.asarray(self.k, dtype=np.float64)
        if self.s0 <= 0:
            raise ValueError("s0 must be positive")
        if d.shape != (3, 3) or not np.allclose(d, d.T, atol=1e-12):
            raise ValueError("d must be a symmetric 3x3 matrix")
        if k.shape != (3, 3, 3, 3):
            raise ValueError("k must have shape (3, 3, 3, 3)")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "k", k)

    @property
    def d6(self) -> np.ndarray:
        return _mat_to_d6(self.d)

    @property
    def k15(self) -> np.ndarray:
        return tensor_to_k15(self.k)


@dataclass(frozen=True)
class DkiMetrics:
    """Scalar kurtosis metrics of one voxel."""

    kfa: float
    mk: float
    ak: float
    rk: float


def _dir_monomials6(dirs: np.ndarray) -> np.ndarray:
    g = np.asarray(dirs, dtype=np.float64)
    cols = [g[:, i] * g[:, j] for i, j in _D6_IDX]
    return np.stack(cols, axis=1) * _D6_MULT


def _dir_monomials15(dirs: np.ndarray) -> np.ndarray:
    g = np.asarray(dirs, dtype=np.float64)
    cols = [g[:, i] * g[:, j] * g[:, k] * g[:, l] for i, j, k, l in _K15_IDX]
    return np.stack(cols, axis=1) * _K15_MULT


def dki_design_matrix(scheme: GradientScheme) -> np.ndarray:
    """(n, 22) linear design for [ln s0, D components, V = MD^2 K components]."""
    b = scheme.bvals
    x = np.empty((len(scheme), 22))
    x[:, 0] = 1.0
    x[:, 1:7] = -b[:, None] * _dir_monomials6(scheme.directions)
    x[:, 7:22] = (b[:, None] ** 2 / 6.0) * _dir_monomials15(scheme.directions)
    return x


def dki_forward(v: DkiVoxel, scheme: GradientScheme) -> np.ndarray:
    """Noise-free signals for every scheme entry; b = 0 entries return s0 exactly."""
    adc = _dir_monomials6(scheme.directions) @ v.d6
    kapp = _dir_monomials15(scheme.directions) @ v.k15
    md = np.trace(v.d) / 3.0
    b = scheme.bvals
    expo = -b * adc + (b**2 / 6.0) * md**2 * kapp
    return v.s0 * np.exp(expo)


def _akc(d6: np.ndarray, k15: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Apparent kurtosis per (voxel, direction), clamped to AKC_CLAMP."""
    adc = d6 @ _dir_monomials6(dirs).T
    kapp = k15 @ _dir_monomials15(dirs).T
    md = (d6[:, 0] + d6[:, 1] + d6[:, 2]) / 3.0
    with np.errstate(divide="ignore", invalid="ignore"):
        akc = (md[:, None] / adc) ** 2 * kapp
    akc = np.nan_to_num(akc, nan=0.0, posinf=AKC_CLAMP[1], neginf=AKC_CLAMP[0])
    return np.clip(akc, *AKC_CLAMP)


def metrics_many(d6: np.ndarray, k15: np.ndarray) -> np.ndarray:
    """Scalar metrics for a batch of voxels.

    Parameters
    ----------
    d6 : ndarray, shape (m, 6)
    k15 : ndarray, shape (m, 15)

    Returns
    -------
    ndarray, shape (m, 4)
        Columns kfa, mk, ak, rk.
    """
    d6 = np.atleast_2d(np.asarray(d6, dtype=np.float64))
    k15 = np.atleast_2d(np.asarray(k15, dtype=np.float64))
    m = len(d6)
    if np.any(d6[:, :3].sum(axis=1) <= 0):
        raise ValueError("every voxel needs tr(D) > 0")

    mk = _akc(d6, k15, _MK_GRID).mean(axis=1)

    # principal frame per voxel
    mats = np.stack([_d6_to_mat(row) for row in d6])
    _, vecs = np.linalg.eigh(mats)  # ascending eigenvalues
    e1 = vecs[:, :, 2]
    u, w = vecs[:, :, 0], vecs[:, :, 1]
    ak = np.array(
        [_akc(d6[i : i + 1], k15[i : i + 1], e1[i : i + 1])[0, 0] for i in range(m)]
    )
    rk = np.empty(m)
    cos_t, sin_t = np.cos(_RK_ANGLES), np.sin(_RK_ANGLES)
    for i in range(m):
        plane = np.outer(cos_t, u[i]) + np.outer(sin_t, w[i])
        rk[i] = _akc(d6[i : i + 1], k15[i : i + 1], plane).mean()

    # kurtosis fractional anisotropy
    kfa = np.zeros(m)
    for i in range(m):
        full = k15_to_tensor(k15[i])
        norm = np.linalg.norm(full)
        if norm >= 1e-12:
            kbar = (
                full[0, 0, 0, 0] + full[1, 1, 1, 1] + full[2, 2, 2, 2]
                + 2.0 * (full[0, 0, 1, 1] + full[0, 0, 2, 2] + full[1, 1, 2, 2])
            ) / 5.0
            kfa[i] = np.linalg.norm(full - kbar * _EYE4) / norm
    kfa = np.clip(kfa, 0.0, 1.0)
    return np.stack([kfa, mk, ak, rk], axis=1)


def dki_metrics(v: DkiVoxel) -> DkiMetrics:
    """Scalar metrics (kfa, mk, ak, rk) of one voxel."""
    row = metrics_many(v.d6[None, :], v.k15[None, :])[0]
    return DkiMetrics(kfa=float(row[0]), mk=float(row[1]), ak=float(row[2]), rk=float(row[3]))


def fit_wlls_many(signals: np.ndarray, scheme: GradientScheme):
    """Two-pass weighted linear least-squares fit for a batch of voxels.

    Parameters
    ----------
    signals : ndarray, shape (m, n) or (n,)
        One row of signals per voxel, n = number of scheme entries.
        Nonpositive values are clamped to 1e-8 (with a warning).
    scheme : GradientScheme

    Returns
    -------
    (s0, d6, k15) : ndarrays of shape (m,), (m, 6), (m, 15)
    """
    signals = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    if signals.shape[1] != len(scheme):
        raise ValueError(f"expected {len(scheme)} signals per voxel, got {signals.shape[1]}")
    if len(scheme) < 22:
        raise ValueError(f"need at least 22 measurements, got {len(scheme)}")
    if len(scheme.shells) < 2:
        raise ValueError("need at least 2 nonzero shells")
    if np.any(signals <= 0):
        warnings.warn("nonpositive signals clamped to 1e-8 before the log-linear fit")
        signals = np.maximum(signals, 1e-8)

    x = dki_design_matrix(scheme)
    cond = np.linalg.cond(x)
    if not np.isfinite(cond) or cond > 1e12:
        raise ValueError(f"rank-deficient design matrix (condition number {cond:.3e})")

    y = np.log(signals)  # (m, n)
    beta1, *_ = np.linalg.lstsq(x, y.T, rcond=None)  # (22, m)
    # pass 2: weights are the squared pass-1 predicted signals
    m = signals.shape[0]
    beta2 = np.empty((22, m))
    for lo in range(0, m, 2048):
        hi = min(lo + 2048, m)
        sw = np.exp(x @ beta1[:, lo:hi]).T  # sqrt of weight = predicted signal
        xw = x[None, :, :] * sw[:, :, None]  # (chunk, n, 22)
        yw = y[lo:hi] * sw
        ata = np.einsum("mni,mnj->mij", xw, xw)
        atb = np.einsum("mni,mn->mi", xw, yw)
        beta2[:, lo:hi] = np.linalg.solve(ata, atb[:, :, None])[:, :, 0].T

    s0 = np.exp(beta2[0])
    d6 = beta2[1:7].T
    v15 = beta2[7:22].T
    md2 = ((d6[:, 0] + d6[:, 1] + d6[:, 2]) / 3.0) ** 2
    tiny = md2 < 1e-20
    if np.any(tiny):
        warnings.warn("near-zero fitted mean diffusivity; kurtosis set to 0 there")
    md2 = np.where(tiny, 1.0, md2)
    k15 = np.where(tiny[:, None], 0.0, v15 / md2[:, None])
    return s0, d6, k15


def dki_fit_wlls(signals: np.ndarray, scheme: GradientScheme) -> DkiVoxel:
    """Fit one voxel; see :func:`fit_wlls_many` for the estimator details."""
    s0, d6, k15 = fit_wlls_many(np.asarray(signals)[None, :], scheme)
    return DkiVoxel(s0=float(s0[0]), d=_d6_to_mat(d6[0]), k=k15_to_tensor(k15[0]))
