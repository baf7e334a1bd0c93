"""Reference learned estimator: per-voxel MLP with manually derived gradients.

The network maps b0-normalized sparse signals of one voxel to the seven
parameter channels (rectifier hidden layers, identity head).  Training
minimizes, over spatial patches,

    L = ||y_gt - y||^2 / ||y_gt||^2  +  lambda * R(y, y_gt)

where the data term runs over the batch's masked voxels and R is the
spectral-alignment regularizer of :mod:`mpmri.tensor_core` evaluated on the
assembled patch tensors.  Parameter updates use Adam (moments 0.9/0.999);
lambda is either fixed or updated once per epoch from R measured on a fixed
validation patch set (:mod:`mpmri.nala`).

Channels are normalized by per-channel divisors (by default the 99th
percentile of the training-region ground truth) so fraction-scale and
kurtosis-scale channels contribute comparably.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import nala, tensor_core
from .qspace import GradientScheme
from .tensor_core import GroupingMode

__all__ = [
    "MlpParams",
    "TrainConfig",
    "TrainLog",
    "TrainingDiverged",
    "NonFiniteGradientError",
    "init_mlp",
    "mlp_forward",
    "data_loss",
    "total_loss",
    "backprop",
    "train",
    "predict",
    "normalize_inputs",
    "channel_scales_from",
    "split_slices",
]

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
_B0_FLOOR_FRACTION = 0.05
_SCALE_PERCENTILE = 99.0


class TrainingDiverged(RuntimeError):
    """Training loss exceeded 10x its initial value for three epochs."""

    def __init__(self, message: str, log: "TrainLog"):
        super().__init__(message)
        self.log = log


class NonFiniteGradientError(FloatingPointError):
    """A gradient evaluation produced NaN or infinity."""


@dataclass
class MlpParams:
    """Fully connected network parameters; weights[i] has shape (d_in, d_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, nonempty weight/bias lists")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("inconsistent layer shapes")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(layer_sizes: list[int], seed: int = 0) -> MlpParams:
    """He-initialized network; ``layer_sizes`` includes input and output widths."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output sizes")
    rng = np.random.default_rng(np.random.Philox(key=seed))
    weights, biases = [], []
    for d_in, d_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in))
        biases.append(np.zeros(d_out))
    return MlpParams(weights, biases)


def _forward_cached(p: MlpParams, x: np.ndarray):
    acts = [np.asarray(x, dtype=np.float64)]
    n_layers = len(p.weights)
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        a = acts[-1] @ w + b
        if i < n_layers - 1:
            a = np.maximum(a, 0.0)  # rectifier; subgradient 0 at the kink
        acts.append(a)
    return acts


def mlp_forward(p: MlpParams, inputs: np.ndarray) -> np.ndarray:
    """Forward pass; ``inputs`` is (n, d_in) or (d_in,)."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != p.weights[0].shape[0]:
        raise ValueError(f"expected input width {p.weights[0].shape[0]}, got {x.shape[1]}")
    out = _forward_cached(p, x)[-1]
    return out[0] if np.asarray(inputs).ndim == 1 else out


def _backward(p: MlpParams, acts: list[np.ndarray], grad_out: np.ndarray):
    gw = [None] * len(p.weights)
    gb = [None] * len(p.biases)
    g = grad_out
    for i in reversed(range(len(p.weights))):
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ p.weights[i].T) * (acts[i] > 0)
    return gw, gb


def data_loss(y: np.ndarray, y_gt: np.ndarray) -> float:
    """Relative squared error ||y_gt - y||^2 / ||y_gt||^2 over the given values."""
    y = np.asarray(y, dtype=np.float64)
    y_gt = np.asarray(y_gt, dtype=np.float64)
    if y.shape != y_gt.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_gt.shape}")
    denom = float(np.sum(y_gt**2))
    if denom == 0.0:
        raise ValueError("reference is identically zero; loss undefined")
    return float(np.sum((y_gt - y) ** 2) / denom)


def total_loss(
    y: np.ndarray,
    y_gt: np.ndarray,
    lam: float,
    grouping: GroupingMode = GroupingMode.MERGED,
    drop: int = 0,
    mask: np.ndarray | None = None,
) -> tuple[float, dict]:
    """Combined loss on (W, H, S, N) tensors; returns (value, components).

    The data term is restricted to ``mask`` voxels when given; the spectral
    term always sees the full tensors.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if mask is None:
        l_data = data_loss(y, y_gt)
    else:
        l_data = data_loss(y[mask], y_gt[mask])
    r = tensor_core.tdr_loss(y, y_gt, grouping, drop)
    return l_data + lam * r, {"data": l_data, "reg": r}


def backprop(
    p: MlpParams,
    inputs: np.ndarray,
    target_tensor: np.ndarray,
    lam: float,
    grouping: GroupingMode = GroupingMode.MERGED,
    drop: int = 0,
    mask: np.ndarray | None = None,
):
    """Loss and parameter gradients for one patch.

    ``inputs`` is (n_vox, d_in) in row-major patch order so the prediction
    can be assembled into the (pw, ph, ps, N) tensor ``target_tensor``
    expects.  Returns (loss, components, grad_weights, grad_biases).

    Raises
    ------
    NonFiniteGradientError
        If any gradient entry is NaN or infinite (the caller should reject
        the step).
    """
    target_tensor = np.asarray(target_tensor, dtype=np.float64)
    pw, ph, ps, n_ch = target_tensor.shape
    acts = _forward_cached(p, np.atleast_2d(inputs))
    y = acts[-1]
    if y.shape != (pw * ph * ps, n_ch):
        raise ValueError("inputs do not tile the target tensor")
    y_t = y.reshape(pw, ph, ps, n_ch)

    if mask is None:
        mask = np.ones((pw, ph, ps), dtype=bool)
    denom = float(np.sum(target_tensor[mask] ** 2))
    if denom == 0.0:
        raise ValueError("reference is identically zero on the mask; loss undefined")
    l_data = float(np.sum((target_tensor[mask] - y_t[mask]) ** 2) / denom)
    grad_y = np.zeros_like(y_t)
    grad_y[mask] = 2.0 * (y_t[mask] - target_tensor[mask]) / denom

    r = tensor_core.tdr_loss(y_t, target_tensor, grouping, drop)
    if lam != 0.0:
        grad_y = grad_y + lam * tensor_core.tdr_grad(y_t, target_tensor, grouping, drop)

    gw, gb = _backward(p, acts, grad_y.reshape(-1, n_ch))
    if not all(np.all(np.isfinite(g)) for g in gw + gb):
        raise NonFiniteGradientError("non-finite parameter gradient")
    loss = l_data + lam * r
    return loss, {"data": l_data, "reg": r}, gw, gb


@dataclass
class TrainConfig:
    """Training hyperparameters; channel order follows phantom.CHANNELS."""

    patch: tuple[int, int, int] = (32, 32, 8)
    epochs: int = 20
    batch_patches: int = 1
    lr: float = 1e-3
    lambda_mode: str = "nala"  # "fixed" or "nala"
    lambda0: float = 0.1
    alpha: float = 5e-4
    beta: float = 0.9
    grouping: GroupingMode = GroupingMode.MERGED
    drop: int = 0
    seed: int = 0
    channel_scales: np.ndarray | None = None
    hidden: tuple[int, ...] = (150, 150, 150)
    mode: str = "joint"  # "joint" (one 7-channel head) or "separate" (7 nets)

    def __post_init__(self):
        if self.lambda_mode not in ("fixed", "nala"):
            raise ValueError(f"unknown lambda_mode {self.lambda_mode!r}")
        if self.mode not in ("joint", "separate"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.lambda0 < 0 or self.lr <= 0 or self.epochs < 1 or self.batch_patches < 1:
            raise ValueError("invalid training configuration")
        if self.channel_scales is not None:
            scales = np.asarray(self.channel_scales, dtype=np.float64)
            if np.any(scales <= 0):
                raise ValueError("channel scales must be positive")
            object.__setattr__(self, "channel_scales", scales)


@dataclass
class TrainLog:
    """Per-epoch training history; row 0 holds the pre-training evaluation."""

    epochs: list[dict] = field(default_factory=list)
    degenerate_warnings: int = 0

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.epochs])

    def to_csv(self) -> str:
        header = "epoch,l_data_train,r_train,l_data_val,r_val,lambda"
        lines = [header]
        for row in self.epochs:
            lines.append(
                f"{row['epoch']},{row['l_data_train']:.17g},{row['r_train']:.17g},"
                f"{row['l_data_val']:.17g},{row['r_val']:.17g},{row['lambda']:.17g}"
            )
        return "\n".join(lines) + "\n"


def normalize_inputs(signals: np.ndarray, scheme: GradientScheme) -> np.ndarray:
    """Per-voxel b0 normalization of a (W, H, S, n_entries) signal volume.

    Divides the weighted entries by the voxel's mean b=0 signal, floored at
    5% of the volume's mean positive b0 so empty background stays bounded.
    """
    signals = np.asarray(signals, dtype=np.float64)
    b0_idx = scheme.b0_indices()
    if len(b0_idx) == 0:
        raise ValueError("scheme has no b=0 entry")
    b0 = signals[..., b0_idx].mean(axis=-1)
    positive = b0[b0 > 0]
    floor = _B0_FLOOR_FRACTION * (positive.mean() if positive.size else 1.0)
    weighted = np.flatnonzero(scheme.bvals > 0)
    return signals[..., weighted] / np.maximum(b0, floor)[..., None]


def channel_scales_from(gt_params: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-channel normalization divisors: 99th percentile over mask voxels."""
    vals = gt_params[mask]
    scales = np.percentile(np.abs(vals), _SCALE_PERCENTILE, axis=0)
    return np.maximum(scales, 1e-6)


def split_slices(width: int) -> tuple[slice, slice, slice]:
    """Train/validation/test split along the first volume axis (2/3, 1/6, 1/6)."""
    a = max(1, int(round(width * 2 / 3)))
    b = max(a + 1, int(round(width * 5 / 6)))
    if b >= width:
        raise ValueError(f"volume of width {width} is too small to split")
    return slice(0, a), slice(a, b), slice(b, width)


def _clip_patch(patch, region_dims):
    return tuple(min(p, d) for p, d in zip(patch, region_dims))


def _tile_corners(region_dims, patch):
    """Deterministic non-overlapping patch corners covering a region."""
    corners = []
    ranges = [range(0, d - p + 1, p) for d, p in zip(region_dims, patch)]
    for i in ranges[0]:
        for j in ranges[1]:
            for k in ranges[2]:
                corners.append((i, j, k))
    return corners


class _Adam:
    def __init__(self, params: MlpParams, lr: float):
        self.lr = lr
        self.t = 0
        self.m = [np.zeros_like(w) for w in params.weights + params.biases]
        self.v = [np.zeros_like(w) for w in params.weights + params.biases]

    def step(self, params: MlpParams, gw, gb):
        self.t += 1
        grads = gw + gb
        tensors = params.weights + params.biases
        b1t = 1.0 - ADAM_BETA1**self.t
        b2t = 1.0 - ADAM_BETA2**self.t
        for i, (p, g) in enumerate(zip(tensors, grads)):
            self.m[i] = ADAM_BETA1 * self.m[i] + (1 - ADAM_BETA1) * g
            self.v[i] = ADAM_BETA2 * self.v[i] + (1 - ADAM_BETA2) * g * g
            p -= self.lr * (self.m[i] / b1t) / (np.sqrt(self.v[i] / b2t) + ADAM_EPS)


def _patch_tensors(volume: np.ndarray, corner, patch):
    i, j, k = corner
    pw, ph, ps = patch
    return volume[i : i + pw, j : j + ph, k : k + ps]


def _eval_region(params_list, inputs, targets, mask, patch, grouping, drop):
    """Masked data loss over a region plus mean spectral misfit on its tiles."""
    n_ch = targets.shape[3]
    x = inputs.reshape(-1, inputs.shape[3])
    y = _predict_flat(params_list, x).reshape(targets.shape)
    l_data = data_loss(y[mask], targets[mask]) if mask.any() else float("nan")
    patch = _clip_patch(patch, targets.shape[:3])
    rs = []
    for corner in _tile_corners(targets.shape[:3], patch):
        gt_p = _patch_tensors(targets, corner, patch)
        if np.sum(gt_p**2) == 0:
            continue
        rs.append(tensor_core.tdr_loss(_patch_tensors(y, corner, patch), gt_p, grouping, drop))
    return l_data, float(np.mean(rs)) if rs else 0.0


def _predict_flat(params_list: list[MlpParams], x: np.ndarray) -> np.ndarray:
    outs = [mlp_forward(p, x) for p in params_list]
    if len(outs) == 1:
        return outs[0]
    return np.concatenate([o.reshape(len(x), -1) for o in outs], axis=1)


def predict(params, inputs: np.ndarray) -> np.ndarray:
    """Normalized-channel predictions for flat inputs (n, d_in).

    ``params`` is the object returned by :func:`train` (a single network or
    the per-channel list from separate mode).
    """
    params_list = params if isinstance(params, list) else [params]
    return _predict_flat(params_list, np.atleast_2d(inputs))


def train(
    signals: np.ndarray,
    scheme: GradientScheme,
    gt_params: np.ndarray,
    mask: np.ndarray,
    cfg: TrainConfig,
):
    """Train the estimator on one volume with an internal W-axis split.

    Parameters
    ----------
    signals : ndarray, shape (W, H, S, n_entries)
        Sparse acquisition (weighted entries plus at least one b=0).
    scheme : GradientScheme
        Matching acquisition scheme.
    gt_params : ndarray, shape (W, H, S, 7)
        Reference parameter maps (channel order phantom.CHANNELS).
    mask : ndarray of bool, shape (W, H, S)
    cfg : TrainConfig

    Returns
    -------
    (params, scales, log)
        ``params`` is an MlpParams (joint mode) or a list of seven
        single-channel MlpParams (separate mode); ``scales`` the channel
        divisors used; ``log`` the per-epoch history.

    Raises
    ------
    TrainingDiverged
        If the training loss exceeds 10x its initial value for three
        consecutive epochs.
    """
    signals = np.asarray(signals, dtype=np.float64)
    gt_params = np.asarray(gt_params, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    inputs = normalize_inputs(signals, scheme)
    d_in = inputs.shape[3]
    n_ch = gt_params.shape[3]

    tr, va, _ = split_slices(signals.shape[0])
    scales = (
        cfg.channel_scales
        if cfg.channel_scales is not None
        else channel_scales_from(gt_params[tr], mask[tr])
    )
    targets = gt_params / scales

    x_tr, t_tr, m_tr = inputs[tr], targets[tr], mask[tr]
    x_va, t_va, m_va = inputs[va], targets[va], mask[va]
    patch_tr = _clip_patch(cfg.patch, t_tr.shape[:3])
    patch_va = _clip_patch(cfg.patch, t_va.shape[:3])

    if cfg.mode == "separate":
        channels = range(n_ch)
        params, logs = [], []
        for c in channels:
            sub = replace(cfg, mode="joint", seed=cfg.seed + 1000 * (c + 1),
                          channel_scales=np.asarray([scales[c]]))
            p, _, lg = train(signals, scheme, gt_params[..., c : c + 1], mask, sub)
            params.append(p)
            logs.append(lg)
        merged = TrainLog(degenerate_warnings=sum(l.degenerate_warnings for l in logs))
        for rows in zip(*(l.epochs for l in logs)):
            merged.epochs.append(
                {
                    "epoch": rows[0]["epoch"],
                    **{
                        key: float(np.mean([r[key] for r in rows]))
                        for key in ("l_data_train", "r_train", "l_data_val", "r_val", "lambda")
                    },
                }
            )
        return params, scales, merged

    rng = np.random.default_rng(np.random.Philox(key=cfg.seed))
    params = init_mlp([d_in, *cfg.hidden, n_ch], seed=cfg.seed)
    adam = _Adam(params, cfg.lr)
    lam_state = nala.nala_init(cfg.lambda0, cfg.alpha, cfg.beta)
    lam = lam_state.lam

    # random patch corners overlap, so one epoch draws enough patches to
    # cover the training region about twice
    n_train_vox = int(np.prod(t_tr.shape[:3]))
    steps = max(1, math.ceil(2 * n_train_vox / (int(np.prod(patch_tr)) * cfg.batch_patches)))

    log = TrainLog()
    l0_data, r0 = _eval_region([params], x_tr, t_tr, m_tr, patch_tr, cfg.grouping, cfg.drop)
    lv_data, rv = _eval_region([params], x_va, t_va, m_va, patch_va, cfg.grouping, cfg.drop)
    log.epochs.append(
        {
            "epoch": 0,
            "l_data_train": l0_data,
            "r_train": r0,
            "l_data_val": lv_data,
            "r_val": rv,
            "lambda": lam,
        }
    )
    initial_total = l0_data + lam * r0
    bad_epochs = 0

    def sample_corner():
        lims = [d - p for d, p in zip(t_tr.shape[:3], patch_tr)]
        for _ in range(64):
            c = tuple(int(rng.integers(0, lim + 1)) for lim in lims)
            gt_p = _patch_tensors(t_tr, c, patch_tr)
            if np.sum(gt_p[_patch_tensors(m_tr, c, patch_tr)] ** 2) > 0:
                return c
        raise ValueError("could not sample a patch with masked reference signal")

    for epoch in range(1, cfg.epochs + 1):
        l_data_acc, r_acc = [], []
        for _ in range(steps):
            gw_acc = [np.zeros_like(w) for w in params.weights]
            gb_acc = [np.zeros_like(b) for b in params.biases]
            loss_d, loss_r = 0.0, 0.0
            ok = True
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", tensor_core.DegenerateSpectrumWarning)
                for _ in range(cfg.batch_patches):
                    corner = sample_corner()
                    x_p = _patch_tensors(x_tr, corner, patch_tr).reshape(-1, d_in)
                    t_p = _patch_tensors(t_tr, corner, patch_tr)
                    m_p = _patch_tensors(m_tr, corner, patch_tr)
                    try:
                        _, comp, gw, gb = backprop(
                            params, x_p, t_p, lam, cfg.grouping, cfg.drop, m_p
                        )
                    except NonFiniteGradientError:
                        warnings.warn("non-finite gradient; step rejected")
                        ok = False
                        break
                    for i in range(len(gw_acc)):
                        gw_acc[i] += gw[i] / cfg.batch_patches
                        gb_acc[i] += gb[i] / cfg.batch_patches
                    loss_d += comp["data"] / cfg.batch_patches
                    loss_r += comp["reg"] / cfg.batch_patches
            log.degenerate_warnings += sum(
                issubclass(w.category, tensor_core.DegenerateSpectrumWarning) for w in caught
            )
            if not ok:
                continue
            adam.step(params, gw_acc, gb_acc)
            l_data_acc.append(loss_d)
            r_acc.append(loss_r)

        lv_data, rv = _eval_region([params], x_va, t_va, m_va, patch_va, cfg.grouping, cfg.drop)
        if cfg.lambda_mode == "nala":
            lam_state = nala.nala_step(lam_state, rv)
            lam = lam_state.lam
        log.epochs.append(
            {
                "epoch": epoch,
                "l_data_train": float(np.mean(l_data_acc)) if l_data_acc else float("nan"),
                "r_train": float(np.mean(r_acc)) if r_acc else float("nan"),
                "l_data_val": lv_data,
                "r_val": rv,
                "lambda": lam,
            }
        )
        total = (np.mean(l_data_acc) + lam * np.mean(r_acc)) if l_data_acc else np.inf
        bad_epochs = bad_epochs + 1 if total > 10.0 * max(initial_total, 1e-12) else 0
        if bad_epochs >= 3:
            raise TrainingDiverged(
                f"training loss {total:.3g} exceeded 10x the initial "
                f"{initial_total:.3g} for three consecutive epochs",
                log,
            )
    return params, scales, log
