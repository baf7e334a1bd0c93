"""Diffusion gradient schemes: construction, subsampling, bookkeeping.

A scheme is a list of (unit direction, b-value) acquisition entries.
Directions on each shell are placed by minimizing the antipodally symmetric
electrostatic energy

    E = sum_{i<j} 1/||g_i - g_j|| + 1/||g_i + g_j||

starting from a spherical Fibonacci layout and running projected gradient
descent.  Sparse subsets are chosen per shell by greedy farthest-point
selection under the antipodal metric followed by swap-improvement passes on
the same energy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GradientScheme",
    "electrostatic_energy",
    "make_dense_scheme",
    "subsample",
    "acceleration_factor",
    "sphere_fibonacci",
]

_UNIT_TOL = 1e-9
_PGD_ITERS = 500
_SWAP_PASSES = 200


@dataclass(frozen=True)
class GradientScheme:
    """Acquisition entries: unit directions (n, 3) and b-values (n,) in s/mm^2.

    b = 0 entries carry the zero direction; all weighted entries are unit
    vectors.  Shells are the groups of equal nonzero b.
    """

    directions: np.ndarray
    bvals: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64)
        b = np.asarray(self.bvals, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != 3 or b.ndim != 1 or len(b) != len(d):
            raise ValueError("directions must be (n, 3) with matching b-values (n,)")
        if np.any(b < 0):
            raise ValueError("b-values must be nonnegative")
        norms = np.linalg.norm(d, axis=1)
        weighted = b > 0
        if np.any(np.abs(norms[weighted] - 1.0) > _UNIT_TOL):
            raise ValueError("weighted directions must be unit vectors")
        if np.any(norms[~weighted] > _UNIT_TOL):
            raise ValueError("b=0 entries must carry the zero direction")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "bvals", b)

    def __len__(self) -> int:
        return len(self.bvals)

    @property
    def shells(self) -> np.ndarray:
        """Distinct nonzero b-values, ascending."""
        return np.unique(self.bvals[self.bvals > 0])

    @property
    def n_weighted(self) -> int:
        return int(np.sum(self.bvals > 0))

    def shell_indices(self, b: float) -> np.ndarray:
        return np.flatnonzero(self.bvals == b)

    def b0_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bvals == 0)

    def to_text(self) -> str:
        """One `gx gy gz b` line per entry."""
        lines = ["# gx gy gz b"]
        for g, b in zip(self.directions, self.bvals):
            lines.append(f"{g[0]:.17g} {g[1]:.17g} {g[2]:.17g} {b:.17g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GradientScheme":
        dirs, bvals = [], []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"scheme line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                gx, gy, gz, b = (float(p) for p in parts)
            except ValueError as exc:
                raise ValueError(f"scheme line {lineno}: {exc}") from None
            dirs.append((gx, gy, gz))
            bvals.append(b)
        return cls(np.array(dirs, dtype=np.float64).reshape(-1, 3), np.array(bvals))


def sphere_fibonacci(n: int) -> np.ndarray:
    """n points on the unit sphere from the golden-angle spiral."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def electrostatic_energy(points: np.ndarray) -> float:
    """Antipodally symmetric Coulomb energy of unit points (n, 3)."""
    p = np.asarray(points, dtype=np.float64)
    n = len(p)
    if n < 2:
        return 0.0
    diff = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=2)
    summ = np.linalg.norm(p[:, None, :] + p[None, :, :], axis=2)
    iu = np.triu_indices(n, k=1)
    return float(np.sum(1.0 / diff[iu]) + np.sum(1.0 / summ[iu]))


def _energy_gradient(p: np.ndarray) -> np.ndarray:
    d = p[:, None, :] - p[None, :, :]
    s = p[:, None, :] + p[None, :, :]
    dn = np.linalg.norm(d, axis=2)
    sn = np.linalg.norm(s, axis=2)
    np.fill_diagonal(dn, np.inf)
    np.fill_diagonal(sn, np.inf)
    gd = -(d / dn[:, :, None] ** 3).sum(axis=1)
    gs = -(s / sn[:, :, None] ** 3).sum(axis=1)
    return gd + gs


def _minimize_on_sphere(p0: np.ndarray, iters: int) -> np.ndarray:
    """Monotone projected gradient descent with step backtracking."""
    p = p0 / np.linalg.norm(p0, axis=1, keepdims=True)
    if len(p) < 2:
        return p
    energy = electrostatic_energy(p)
    step = 1.0 / len(p) ** 2
    for _ in range(iters):
        g = _energy_gradient(p)
        # remove the radial component (tangent-space step)
        g -= (g * p).sum(axis=1, keepdims=True) * p
        improved = False
        for _ in range(20):
            cand = p - step * g
            cand /= np.linalg.norm(cand, axis=1, keepdims=True)
            e = electrostatic_energy(cand)
            if e < energy:
                p, energy = cand, e
                step *= 1.2
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    return p


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def make_dense_scheme(dirs_per_shell: int, shells: list[float], seed: int = 0) -> GradientScheme:
    """Build a multi-shell scheme with one b=0 entry prepended.

    Each shell gets ``dirs_per_shell`` directions from a spherical Fibonacci
    layout (randomly rotated per shell so shells are staggered) refined by
    projected gradient descent on the antipodal electrostatic energy.
    Deterministic for a fixed seed.
    """
    if dirs_per_shell < 1:
        raise ValueError("dirs_per_shell must be >= 1")
    shells = [float(b) for b in shells]
    if not shells or any(b <= 0 for b in shells):
        raise ValueError("shells must be a nonempty list of positive b-values")
    rng = np.random.default_rng(seed)
    dirs = [np.zeros((1, 3))]
    bvals = [np.zeros(1)]
    base = sphere_fibonacci(dirs_per_shell)
    for b in shells:
        rot = _random_rotation(rng)
        placed = _minimize_on_sphere(base @ rot.T, _PGD_ITERS)
        dirs.append(placed)
        bvals.append(np.full(dirs_per_shell, b))
    return GradientScheme(np.vstack(dirs), np.concatenate(bvals))


def _greedy_farthest(points: np.ndarray, k: int, start: int) -> np.ndarray:
    """Greedy farthest-point subset under the antipodal chordal metric."""
    n = len(points)
    absdot = np.abs(points @ points.T)
    # antipodal chordal distance: min(||a-b||, ||a+b||) = sqrt(2 - 2|a.b|)
    dist = np.sqrt(np.clip(2.0 - 2.0 * absdot, 0.0, None))
    chosen = [start]
    mind = dist[start].copy()
    for _ in range(1, k):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, dist[nxt])
    return np.array(sorted(chosen))


def _pair_energies(points: np.ndarray) -> np.ndarray:
    """Pairwise antipodal Coulomb terms with a zero diagonal."""
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    s = np.linalg.norm(points[:, None, :] + points[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    np.fill_diagonal(s, np.inf)
    return 1.0 / d + 1.0 / s


def _swap_improve(points: np.ndarray, chosen: np.ndarray, passes: int) -> np.ndarray:
    """First-improvement swap passes on the electrostatic energy.

    Uses cached per-point sums against the current subset so each candidate
    swap costs O(1).
    """
    pair = _pair_energies(points)
    chosen = list(chosen)
    in_set = np.zeros(len(points), dtype=bool)
    in_set[chosen] = True
    pool = list(np.flatnonzero(~in_set))
    rowsum = pair[:, chosen].sum(axis=1)
    for _ in range(passes):
        improved = False
        for ci in range(len(chosen)):
            o = chosen[ci]
            for pi in range(len(pool)):
                i = pool[pi]
                delta = rowsum[i] - pair[i, o] - rowsum[o]
                if delta < -1e-15:
                    chosen[ci], pool[pi] = i, o
                    rowsum += pair[:, i] - pair[:, o]
                    o = i
                    improved = True
        if not improved:
            break
    return np.array(sorted(chosen))


def subsample(scheme: GradientScheme, k_per_shell: int, seed: int = 0) -> GradientScheme:
    """Per-shell uniform subset of ``k_per_shell`` directions.

    Greedy farthest-point selection under the antipodal metric, then swap
    passes lowering the electrostatic energy.  b=0 entries are always kept;
    entry order of the source scheme is preserved.
    """
    if k_per_shell < 1:
        raise ValueError("k_per_shell must be >= 1")
    rng = np.random.default_rng(seed)
    keep = np.zeros(len(scheme), dtype=bool)
    keep[scheme.b0_indices()] = True
    for b in scheme.shells:
        idx = scheme.shell_indices(b)
        if k_per_shell > len(idx):
            raise ValueError(
                f"k_per_shell={k_per_shell} exceeds shell b={b:g} size {len(idx)}"
            )
        if k_per_shell == len(idx):
            keep[idx] = True
            continue
        pts = scheme.directions[idx]
        start = int(rng.integers(len(idx)))
        local = _greedy_farthest(pts, k_per_shell, start)
        local = _swap_improve(pts, local, _SWAP_PASSES)
        keep[idx[local]] = True
    sel = np.flatnonzero(keep)
    return GradientScheme(scheme.directions[sel], scheme.bvals[sel])


def acceleration_factor(dense: GradientScheme, sparse: GradientScheme) -> float:
    """Ratio of weighted entry counts (dense over sparse)."""
    if sparse.n_weighted == 0:
        raise ValueError("sparse scheme has no weighted entries")
    return dense.n_weighted / sparse.n_weighted
