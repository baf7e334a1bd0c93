"""Synthetic digital phantom: smooth tissue fields and ground-truth maps.

A phantom is built from thresholded band-limited random fields: a roughly
ellipsoidal brain region split into white-matter-like, gray-matter-like and
CSF-like classes, surrounded by signal-free background.  Each class draws its
microstructure parameters from smooth fields mapped into a class range:

    WM-like : vic 0.5-0.8, viso 0.0-0.1, od 0.05-0.4
    GM-like : vic 0.3-0.5, viso 0.0-0.2, od 0.5-0.9
    CSF-like: vic 0.0-0.2, viso 0.9-1.0, od 0.5-1.0

Orientations follow concentric arcs around the volume axis plus a smooth
perturbation.  Rendering produces noise-free dense signals from the
three-compartment forward model; the kurtosis ground-truth channels are then
obtained by fitting those dense signals, so both parameter families are
mutually consistent.  Ground-truth channel order: kfa, mk, ak, rk, od, vic,
viso.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dki_model, noddi_model
from .qspace import GradientScheme

__all__ = ["CHANNELS", "LABELS", "Phantom", "gen_phantom", "render_ground_truth"]

CHANNELS = ("kfa", "mk", "ak", "rk", "od", "vic", "viso")
LABELS = {"background": 0, "wm": 1, "gm": 2, "csf": 3}

CLASS_RANGES = {
    "wm": {"vic": (0.5, 0.8), "viso": (0.0, 0.1), "od": (0.05, 0.4)},
    "gm": {"vic": (0.3, 0.5), "viso": (0.0, 0.2), "od": (0.5, 0.9)},
    "csf": {"vic": (0.0, 0.2), "viso": (0.9, 1.0), "od": (0.5, 1.0)},
}

_S0 = 1000.0


@dataclass(frozen=True)
class Phantom:
    """Generative fields plus (possibly not yet rendered) ground-truth maps."""

    label_map: np.ndarray  # (W, H, S) uint8 codes from LABELS
    vic: np.ndarray
    viso: np.ndarray
    kappa: np.ndarray
    mu: np.ndarray  # (W, H, S, 3) unit orientations inside the mask
    s0: float
    brain_mask: np.ndarray  # (W, H, S) bool
    gt_params: np.ndarray  # (W, H, S, 7); kurtosis channels zero until rendered
    seed: int

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.label_map.shape


def _smooth_field(dims, rng: np.random.Generator, cutoff_cycles: float) -> np.ndarray:
    """Band-limited random field min-max normalized to [0, 1]."""
    spec = np.fft.fftn(rng.standard_normal(dims))
    freqs = [np.fft.fftfreq(n) for n in dims]
    fx, fy, fz = np.meshgrid(*freqs, indexing="ij")
    spec[np.sqrt(fx**2 + fy**2 + fz**2) > cutoff_cycles] = 0.0
    f = np.fft.ifftn(spec).real
    lo, hi = f.min(), f.max()
    if hi - lo < 1e-30:
        return np.zeros(dims)
    return (f - lo) / (hi - lo)


def _map_to_range(field: np.ndarray, sel: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Min-max normalize ``field`` over ``sel`` voxels and map into [lo, hi]."""
    vals = field[sel]
    vmin, vmax = vals.min(), vals.max()
    if vmax - vmin < 1e-30:
        return np.full(vals.shape, 0.5 * (lo + hi))
    return lo + (hi - lo) * (vals - vmin) / (vmax - vmin)


def gen_phantom(dims: tuple[int, int, int], seed: int = 0) -> Phantom:
    """Deterministic phantom with smooth class regions and parameter fields."""
    dims = tuple(int(d) for d in dims)
    w, h, s = dims
    if w < 16 or h < 16 or s < 4:
        raise ValueError(f"dims must satisfy W,H >= 16 and S >= 4, got {dims}")
    rng = np.random.default_rng(np.random.Philox(key=seed))

    # brain region: wobbled ellipsoid leaves background at the borders
    ix, iy, iz = np.meshgrid(*(np.arange(n) for n in dims), indexing="ij")
    cx, cy, cz = (w - 1) / 2.0, (h - 1) / 2.0, (s - 1) / 2.0
    r = np.sqrt(
        ((ix - cx) / (0.5 * w)) ** 2
        + ((iy - cy) / (0.5 * h)) ** 2
        + ((iz - cz) / (0.6 * s)) ** 2
    )
    wobble = _smooth_field(dims, rng, 3.0 / w)
    brain = r + 0.2 * (wobble - 0.5) < 0.85

    # tissue classes: central CSF pocket, peripheral GM, WM core
    u_csf = _smooth_field(dims, rng, 3.0 / w) + np.clip(1.0 - 2.0 * r, 0.0, None)
    u_gm = _smooth_field(dims, rng, 4.0 / w) + r
    label = np.zeros(dims, dtype=np.uint8)
    csf_thr = np.quantile(u_csf[brain], 0.90)
    csf = brain & (u_csf >= csf_thr)
    rest = brain & ~csf
    gm_thr = np.quantile(u_gm[rest], 0.60)
    gm = rest & (u_gm >= gm_thr)
    wm = rest & ~gm
    label[wm] = LABELS["wm"]
    label[gm] = LABELS["gm"]
    label[csf] = LABELS["csf"]

    vic = np.zeros(dims)
    viso = np.zeros(dims)
    od = np.zeros(dims)
    fields = {name: _smooth_field(dims, rng, 4.0 / w) for name in ("vic", "viso", "od")}
    for cls, sel in (("wm", wm), ("gm", gm), ("csf", csf)):
        if not sel.any():
            continue
        for name, target in (("vic", vic), ("viso", viso), ("od", od)):
            lo, hi = CLASS_RANGES[cls][name]
            target[sel] = _map_to_range(fields[name], sel, lo, hi)
    kappa = np.zeros(dims)
    kappa[brain] = noddi_model.kappa_from_od(od[brain])
    kappa = np.clip(kappa, 0.0, noddi_model.KAPPA_MAX)

    # orientations: concentric arcs about the volume axis plus smooth wobble
    dx, dy = ix - cx, iy - cy
    tangent = np.stack([-dy, dx, np.zeros(dims)], axis=-1)
    norms = np.linalg.norm(tangent, axis=-1, keepdims=True)
    tangent = np.divide(tangent, norms, out=np.zeros_like(tangent), where=norms > 1e-12)
    perturb = np.stack(
        [_smooth_field(dims, rng, 4.0 / w) - 0.5 for _ in range(3)], axis=-1
    )
    mu = tangent + 0.6 * perturb
    mu[..., 2] += 1e-3  # break ties at the exact center axis
    mu /= np.linalg.norm(mu, axis=-1, keepdims=True)

    gt = np.zeros(dims + (7,))
    gt[..., 4] = od
    gt[..., 5] = vic
    gt[..., 6] = viso
    return Phantom(
        label_map=label,
        vic=vic,
        viso=viso,
        kappa=kappa,
        mu=mu,
        s0=_S0,
        brain_mask=brain,
        gt_params=gt,
        seed=seed,
    )


def render_ground_truth(
    p: Phantom, dense: GradientScheme
) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free dense signals plus completed ground-truth parameter maps.

    Signals come from the three-compartment forward model inside the brain
    mask (background stays zero).  The kurtosis channels (kfa, mk, ak, rk)
    are produced by the weighted least-squares fit of the dense noise-free
    signals; dispersion and fraction channels are copied from the generative
    fields.
    """
    if len(dense.shells) < 2:
        raise ValueError("need a dense scheme with at least 2 shells")
    dims = p.dims
    sel = np.flatnonzero(p.brain_mask.ravel())
    signals = np.zeros(dims + (len(dense),))
    sig_mask = noddi_model.forward_many(
        p.vic.ravel()[sel],
        p.viso.ravel()[sel],
        p.kappa.ravel()[sel],
        p.mu.reshape(-1, 3)[sel],
        np.full(len(sel), p.s0),
        dense,
    )
    signals.reshape(-1, len(dense))[sel] = sig_mask

    _, d6, k15 = dki_model.fit_wlls_many(sig_mask, dense)
    metrics = dki_model.metrics_many(d6, k15)  # kfa, mk, ak, rk

    gt = p.gt_params.copy()
    gt.reshape(-1, 7)[sel, 0:4] = metrics
    return signals, gt
