"""Command-line surface, experiment configuration and bit-exact file formats.

File formats
------------
MPT1 tensor files: magic ``MPT1``, ndim as little-endian u32, ndim u64
dimensions, a u32 dtype code (0 = IEEE-754 float64 LE), then the row-major
payload.  Scheme files: one ``gx gy gz b`` line per entry, ``#`` comments.
Config files: ``key = value`` lines with ``#`` comments; unknown keys are
rejected with their line number.

All outputs are written atomically (temp file + rename) and are reproducible
byte-for-byte from (config, seeds, code version).  Exit codes: 0 success,
2 configuration/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import struct
import sys

import numpy as np

from . import __version__, dki_model, eval_metrics, noddi_model, noise_sim, qspace
from . import estimator as est
from . import phantom as phantom_mod
from . import tensor_core
from .tensor_core import GroupingMode

__all__ = [
    "MptError",
    "ConfigError",
    "NumericalError",
    "write_mpt",
    "read_mpt",
    "parse_config",
    "config_text",
    "thread_cap",
    "run_experiment",
    "main",
]

FORMAT_VERSIONS = {"mpt": 1, "scheme": 1, "config": 1}
_MPT_MAGIC = b"MPT1"
_DTYPE_F64 = 0


class MptError(ValueError):
    """Malformed tensor file."""


class ConfigError(ValueError):
    """Malformed configuration (carries a line-numbered message)."""


class NumericalError(RuntimeError):
    """A numerical stage failed (fit rejection, divergence, non-finite data)."""


# ---------------------------------------------------------------------------
# atomic file output and the MPT1 tensor format

def _write_bytes_atomic(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_text_atomic(path: str, text: str) -> None:
    _write_bytes_atomic(path, text.encode("utf-8"))


def write_json(path: str, obj) -> None:
    write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_mpt(path: str, array: np.ndarray) -> None:
    """Serialize an array as an MPT1 file (float64 little-endian payload)."""
    a = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    header = _MPT_MAGIC + struct.pack("<I", a.ndim)
    header += struct.pack(f"<{a.ndim}Q", *a.shape)
    header += struct.pack("<I", _DTYPE_F64)
    _write_bytes_atomic(path, header + a.tobytes(order="C"))


def read_mpt(path: str) -> np.ndarray:
    """Read an MPT1 file back into a float64 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MPT_MAGIC:
        raise MptError(f"{path}: bad magic {blob[:4]!r} (expected {_MPT_MAGIC!r})")
    off = 4
    try:
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        (code,) = struct.unpack_from("<I", blob, off)
        off += 4
    except struct.error as exc:
        raise MptError(f"{path}: truncated header ({exc})") from None
    if code != _DTYPE_F64:
        raise MptError(f"{path}: unsupported dtype code {code}")
    count = int(np.prod(dims)) if dims else 1
    expected = off + 8 * count
    if len(blob) != expected:
        raise MptError(f"{path}: payload is {len(blob) - off} bytes, expected {8 * count}")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
    return data.reshape(dims).astype(np.float64)


# ---------------------------------------------------------------------------
# configuration

def _parse_dims(s: str):
    parts = s.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"expected WxHxS, got {s!r}")
    return tuple(int(p) for p in parts)


def _parse_floats(s: str):
    return [float(p) for p in s.split(",") if p.strip()]


def _parse_grouping(s: str) -> str:
    if s not in ("merged", "per_parameter", "per_model"):
        raise ValueError(f"grouping must be merged|per_parameter|per_model, got {s!r}")
    return s


def _parse_lambda_mode(s: str) -> str:
    if s not in ("fixed", "nala"):
        raise ValueError(f"lambda_mode must be fixed|nala, got {s!r}")
    return s


def _parse_train_mode(s: str) -> str:
    if s not in ("joint", "separate"):
        raise ValueError(f"train mode must be joint|separate, got {s!r}")
    return s


def _parse_channels(s: str):
    if s.strip() == "all":
        return list(phantom_mod.CHANNELS)
    chans = [c.strip() for c in s.split(",") if c.strip()]
    for c in chans:
        if c not in phantom_mod.CHANNELS:
            raise ValueError(f"unknown channel {c!r}")
    return chans


_CONFIG_SCHEMA = {
    "phantom.dims": (_parse_dims, (48, 48, 12)),
    "phantom.seed": (int, 0),
    "scheme.dirs_per_shell": (int, 90),
    "scheme.shells": (_parse_floats, [1000.0, 2000.0, 3000.0]),
    "scheme.subsample_k": (int, 6),
    "scheme.seed": (int, 0),
    "noise.level": (float, 0.0),
    "noise.seed": (int, 0),
    "train.epochs": (int, 20),
    "train.patch": (_parse_dims, (32, 32, 8)),
    "train.batch": (int, 1),
    "train.lr": (float, 1e-3),
    "train.lambda0": (float, 0.1),
    "train.alpha": (float, 5e-4),
    "train.beta": (float, 0.9),
    "train.lambda_mode": (_parse_lambda_mode, "nala"),
    "train.grouping": (_parse_grouping, "merged"),
    "train.drop": (int, 0),
    "train.seed": (int, 0),
    "train.mode": (_parse_train_mode, "joint"),
    "train.hidden": (lambda s: tuple(int(p) for p in s.split(",") if p.strip()), (150, 150, 150)),
    "eval.channels": (_parse_channels, list(phantom_mod.CHANNELS)),
}


def parse_config(text: str) -> dict:
    """Parse ``key = value`` configuration text; unknown keys are rejected."""
    cfg = {key: default for key, (_, default) in _CONFIG_SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser, _ = _CONFIG_SCHEMA[key]
        try:
            cfg[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return cfg


def config_text(cfg: dict) -> str:
    """Serialize a config dict back to the key = value format."""
    lines = []
    for key in _CONFIG_SCHEMA:
        v = cfg[key]
        if isinstance(v, tuple) and key.endswith((".dims", ".patch")):
            s = "x".join(str(p) for p in v)
        elif isinstance(v, (list, tuple)):
            s = ",".join(f"{p:g}" if isinstance(p, float) else str(p) for p in v)
        elif isinstance(v, float):
            s = f"{v:.17g}"
        else:
            s = str(v)
        lines.append(f"{key} = {s}")
    return "\n".join(lines) + "\n"


def _load_config(path: str | None) -> dict:
    if path is None:
        return parse_config("")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _manifest_config(cfg: dict) -> dict:
    out = {}
    for k, v in cfg.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def thread_cap() -> int:
    """Parallelism cap from MPMRI_THREADS (0 or unset = automatic)."""
    raw = os.environ.get("MPMRI_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MPMRI_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError(f"MPMRI_THREADS must be >= 0, got {n}")
    return n


def _apply_thread_cap() -> None:
    n = thread_cap()
    if n <= 0:
        return
    try:  # best effort: cap the BLAS pool when threadpoolctl is available
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        pass


# ---------------------------------------------------------------------------
# pipeline stages shared by subcommands and the experiment runner

def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()[:16]


def _write_phantom(p: phantom_mod.Phantom, outdir: str, cfg: dict) -> None:
    os.makedirs(outdir, exist_ok=True)
    write_mpt(os.path.join(outdir, "label_map.mpt"), p.label_map.astype(np.float64))
    write_mpt(os.path.join(outdir, "mask.mpt"), p.brain_mask.astype(np.float64))
    write_mpt(os.path.join(outdir, "vic.mpt"), p.vic)
    write_mpt(os.path.join(outdir, "viso.mpt"), p.viso)
    write_mpt(os.path.join(outdir, "kappa.mpt"), p.kappa)
    write_mpt(os.path.join(outdir, "mu.mpt"), p.mu)
    write_mpt(os.path.join(outdir, "gt_params.mpt"), p.gt_params)
    write_json(
        os.path.join(outdir, "meta.json"),
        {
            "dims": list(p.dims),
            "seed": p.seed,
            "s0": p.s0,
            "class_ranges": phantom_mod.CLASS_RANGES,
            "channels": list(phantom_mod.CHANNELS),
            "config": _manifest_config(cfg),
            "format_versions": FORMAT_VERSIONS,
        },
    )


def _load_phantom(indir: str) -> phantom_mod.Phantom:
    try:
        with open(os.path.join(indir, "meta.json"), "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        return phantom_mod.Phantom(
            label_map=read_mpt(os.path.join(indir, "label_map.mpt")).astype(np.uint8),
            vic=read_mpt(os.path.join(indir, "vic.mpt")),
            viso=read_mpt(os.path.join(indir, "viso.mpt")),
            kappa=read_mpt(os.path.join(indir, "kappa.mpt")),
            mu=read_mpt(os.path.join(indir, "mu.mpt")),
            s0=float(meta["s0"]),
            brain_mask=read_mpt(os.path.join(indir, "mask.mpt")) > 0.5,
            gt_params=read_mpt(os.path.join(indir, "gt_params.mpt")),
            seed=int(meta["seed"]),
        )
    except OSError as exc:
        raise ConfigError(f"cannot load phantom from {indir}: {exc}") from None


def _read_scheme(path: str) -> qspace.GradientScheme:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return qspace.GradientScheme.from_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read scheme {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _classical_prediction(signals, scheme, mask):
    """Baseline 7-channel maps from the classical fits on masked voxels.

    Returns (maps, estimable): the kurtosis channels require the 22-parameter
    fit and are flagged non-estimable when the scheme is too sparse.
    """
    dims = signals.shape[:3]
    sel = np.flatnonzero(np.asarray(mask, dtype=bool).ravel())
    sig = np.clip(signals.reshape(-1, signals.shape[3])[sel], 1e-8, None)
    maps = np.zeros(dims + (7,))
    flatmaps = maps.reshape(-1, 7)

    dki_ok = len(scheme) >= 22 and len(scheme.shells) >= 2
    if dki_ok:
        try:
            _, d6, k15 = dki_model.fit_wlls_many(sig, scheme)
            flatmaps[sel, 0:4] = dki_model.metrics_many(d6, k15)
        except ValueError:
            dki_ok = False
    vic, viso, kappa, _, _ = noddi_model.fit_grid_many(sig, scheme)
    flatmaps[sel, 4] = noddi_model.od_from_kappa(kappa)
    flatmaps[sel, 5] = vic
    flatmaps[sel, 6] = viso
    return maps, dki_ok


def _predict_volume(params, scales, inputs_flat, dims):
    pred = est.predict(params, inputs_flat) * scales
    return pred.reshape(dims + (len(scales),))


def _train_arm(signals, scheme, gt, mask, cfg: dict, lambda_mode: str, lambda0: float):
    tc = est.TrainConfig(
        patch=cfg["train.patch"],
        epochs=cfg["train.epochs"],
        batch_patches=cfg["train.batch"],
        lr=cfg["train.lr"],
        lambda_mode=lambda_mode,
        lambda0=lambda0,
        alpha=cfg["train.alpha"],
        beta=cfg["train.beta"],
        grouping=GroupingMode(cfg["train.grouping"]),
        drop=cfg["train.drop"],
        seed=cfg["train.seed"],
        hidden=cfg["train.hidden"],
        mode=cfg["train.mode"],
    )
    return est.train(signals, scheme, gt, mask, tc)


def run_experiment(cfg: dict, outdir: str) -> dict:
    """Full pipeline: phantom, acquisition, optional noise, fits, ablation arms.

    Writes metrics.csv, per-arm training logs (with the lambda trajectory)
    and manifest.json into ``outdir``; returns the manifest dict.
    """
    os.makedirs(outdir, exist_ok=True)
    p = phantom_mod.gen_phantom(cfg["phantom.dims"], cfg["phantom.seed"])
    _write_phantom(p, os.path.join(outdir, "phantom"), cfg)

    dense = qspace.make_dense_scheme(
        cfg["scheme.dirs_per_shell"], cfg["scheme.shells"], cfg["scheme.seed"]
    )
    sparse = qspace.subsample(dense, cfg["scheme.subsample_k"], cfg["scheme.seed"])
    accel = qspace.acceleration_factor(dense, sparse)
    write_text_atomic(os.path.join(outdir, "dense.scheme"), dense.to_text())
    write_text_atomic(os.path.join(outdir, "sparse.scheme"), sparse.to_text())

    signals_dense, gt = phantom_mod.render_ground_truth(p, dense)
    write_mpt(os.path.join(outdir, "gt_params.mpt"), gt)

    sparse_cols = _sparse_columns(dense, sparse)
    signals_sparse = signals_dense[..., sparse_cols]
    if cfg["noise.level"] > 0:
        field = noise_sim.make_noise_field(p.dims, cfg["noise.level"], cfg["noise.seed"])
        s0_ref = float(signals_dense[..., dense.b0_indices()].mean(axis=-1)[p.brain_mask].mean())
        signals_sparse = noise_sim.add_rician(signals_sparse, field, s0_ref, cfg["noise.seed"])
        write_mpt(os.path.join(outdir, "sigma_map.mpt"), field.sigma_map)
    write_mpt(os.path.join(outdir, "signals_sparse.mpt"), signals_sparse)

    _, _, te = est.split_slices(p.dims[0])
    test_mask = np.zeros(p.dims, dtype=bool)
    test_mask[te] = p.brain_mask[te]
    channels = cfg["eval.channels"]
    chan_idx = [phantom_mod.CHANNELS.index(c) for c in channels]

    rows = []
    mf_maps, dki_ok = _classical_prediction(signals_sparse, sparse, p.brain_mask)
    mf_channels = channels if dki_ok else [c for c in channels if c in ("od", "vic", "viso")]
    if mf_channels:
        mf_idx = [phantom_mod.CHANNELS.index(c) for c in mf_channels]
        rep = eval_metrics.report_channels(
            mf_maps[..., mf_idx], gt[..., mf_idx], test_mask, mf_channels
        )
        rows += rep.to_rows(method="mf", sampling=sparse.n_weighted, noise=cfg["noise.level"])

    arms = [
        ("baseline", "fixed", 0.0),
        ("tdr_fixed", "fixed", cfg["train.lambda0"]),
        ("tdr_nala", "nala", cfg["train.lambda0"]),
    ]
    inputs_flat = est.normalize_inputs(signals_sparse, sparse).reshape(-1, sparse.n_weighted)
    arm_summaries = {}
    for name, mode, lam0 in arms:
        try:
            params, scales, log = _train_arm(signals_sparse, sparse, gt, p.brain_mask, cfg, mode, lam0)
        except est.TrainingDiverged as exc:
            raise NumericalError(f"training arm {name} diverged: {exc}") from None
        pred = _predict_volume(params, scales, inputs_flat, p.dims)
        rep = eval_metrics.report_channels(
            pred[..., chan_idx], gt[..., chan_idx], test_mask, channels
        )
        rows += rep.to_rows(method=name, sampling=sparse.n_weighted, noise=cfg["noise.level"])
        write_text_atomic(os.path.join(outdir, f"training_log_{name}.csv"), log.to_csv())
        arm_summaries[name] = {
            "final_lambda": log.epochs[-1]["lambda"],
            "final_l_data_val": log.epochs[-1]["l_data_val"],
            "psnr_all": rep.psnr["all"],
        }

    _write_metrics_csv(os.path.join(outdir, "metrics.csv"), rows)
    manifest = {
        "config": _manifest_config(cfg),
        "config_hash": _config_hash(cfg),
        "version": __version__,
        "format_versions": FORMAT_VERSIONS,
        "acceleration": accel,
        "dki_baseline_estimable": dki_ok,
        "test_mask_voxels": int(test_mask.sum()),
        "arms": arm_summaries,
    }
    write_json(os.path.join(outdir, "manifest.json"), manifest)
    return manifest


def _sparse_columns(dense: qspace.GradientScheme, sparse: qspace.GradientScheme) -> np.ndarray:
    """Indices of the sparse scheme's entries inside the dense scheme."""
    cols = []
    used = set()
    for g, b in zip(sparse.directions, sparse.bvals):
        match = np.flatnonzero(
            (dense.bvals == b) & (np.linalg.norm(dense.directions - g, axis=1) < 1e-12)
        )
        match = [m for m in match if m not in used]
        if not match:
            raise ConfigError("sparse scheme entry not found in dense scheme")
        used.add(match[0])
        cols.append(match[0])
    return np.array(cols)


def _write_metrics_csv(path: str, rows: list[dict]) -> None:
    header = ["method", "sampling", "noise", "channel", "psnr", "ssim", "nrmse", "mask_voxels"]
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for key in header:
            v = row.get(key, "")
            cells.append(f"{v:.17g}" if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    write_text_atomic(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def _cmd_phantom_gen(args) -> int:
    cfg = _load_config(args.config)
    p = phantom_mod.gen_phantom(cfg["phantom.dims"], cfg["phantom.seed"])
    _write_phantom(p, args.out, cfg)
    print(f"phantom {p.dims[0]}x{p.dims[1]}x{p.dims[2]} -> {args.out}")
    return 0


def _cmd_acquire(args) -> int:
    cfg = _load_config(args.config)
    p = _load_phantom(args.phantom)
    dense = qspace.make_dense_scheme(
        cfg["scheme.dirs_per_shell"], cfg["scheme.shells"], cfg["scheme.seed"]
    )
    sparse = qspace.subsample(dense, cfg["scheme.subsample_k"], cfg["scheme.seed"])
    accel = qspace.acceleration_factor(dense, sparse)
    os.makedirs(args.out, exist_ok=True)
    write_text_atomic(os.path.join(args.out, "dense.scheme"), dense.to_text())
    write_text_atomic(os.path.join(args.out, "sparse.scheme"), sparse.to_text())
    signals, gt = phantom_mod.render_ground_truth(p, dense)
    write_mpt(os.path.join(args.out, "signals_dense.mpt"), signals)
    write_mpt(os.path.join(args.out, "signals_sparse.mpt"), signals[..., _sparse_columns(dense, sparse)])
    write_mpt(os.path.join(args.out, "gt_params.mpt"), gt)
    write_json(
        os.path.join(args.out, "manifest.json"),
        {
            "config": _manifest_config(cfg),
            "acceleration": accel,
            "dense_entries": len(dense),
            "sparse_entries": len(sparse),
            "format_versions": FORMAT_VERSIONS,
        },
    )
    print(f"acceleration {accel:g}")
    return 0


def _cmd_noise_add(args) -> int:
    cfg = _load_config(args.config)
    signals = read_mpt(args.signals)
    scheme = _read_scheme(args.scheme)
    mask = read_mpt(args.mask) > 0.5
    if cfg["noise.level"] <= 0:
        raise ConfigError("noise.level must be > 0 for noise add")
    field = noise_sim.make_noise_field(signals.shape[:3], cfg["noise.level"], cfg["noise.seed"])
    b0 = signals[..., scheme.b0_indices()].mean(axis=-1)
    s0_ref = float(b0[mask].mean())
    noisy = noise_sim.add_rician(signals, field, s0_ref, cfg["noise.seed"])
    os.makedirs(args.out, exist_ok=True)
    write_mpt(os.path.join(args.out, "signals_noisy.mpt"), noisy)
    write_mpt(os.path.join(args.out, "sigma_map.mpt"), field.sigma_map)
    write_json(
        os.path.join(args.out, "manifest.json"),
        {"config": _manifest_config(cfg), "s0_ref": s0_ref, "format_versions": FORMAT_VERSIONS},
    )
    return 0


def _cmd_fit(args) -> int:
    signals = read_mpt(args.signals)
    scheme = _read_scheme(args.scheme)
    mask = read_mpt(args.mask) > 0.5
    dims = signals.shape[:3]
    sel = np.flatnonzero(mask.ravel())
    sig = np.clip(signals.reshape(-1, signals.shape[3])[sel], 1e-8, None)
    os.makedirs(args.out, exist_ok=True)
    if args.model == "dki":
        try:
            _, d6, k15 = dki_model.fit_wlls_many(sig, scheme)
        except ValueError as exc:
            raise NumericalError(str(exc)) from None
        maps = np.zeros(dims + (4,))
        maps.reshape(-1, 4)[sel] = dki_model.metrics_many(d6, k15)
        write_mpt(os.path.join(args.out, "dki_metrics.mpt"), maps)
    else:
        try:
            vic, viso, kappa, _, _ = noddi_model.fit_grid_many(sig, scheme)
        except ValueError as exc:
            raise NumericalError(str(exc)) from None
        maps = np.zeros(dims + (3,))
        maps.reshape(-1, 3)[sel, 0] = noddi_model.od_from_kappa(kappa)
        maps.reshape(-1, 3)[sel, 1] = vic
        maps.reshape(-1, 3)[sel, 2] = viso
        write_mpt(os.path.join(args.out, "noddi_metrics.mpt"), maps)
    return 0


def _cmd_tsvd(args) -> int:
    t = read_mpt(getattr(args, "in"))
    if t.ndim != 4:
        raise ConfigError(f"tsvd expects a 4D tensor, got shape {t.shape}")
    grouping = GroupingMode(args.grouping)
    spectra = tensor_core.tsvd_spectrum(t, grouping)
    spectra = [tensor_core.truncate_spectrum(s, args.drop) for s in spectra]
    write_mpt(args.out, np.concatenate(spectra, axis=2))
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    signals = read_mpt(args.signals)
    scheme = _read_scheme(args.scheme)
    gt = read_mpt(args.gt)
    mask = read_mpt(args.mask) > 0.5
    try:
        params, scales, log = _train_arm(
            signals, scheme, gt, mask, cfg, cfg["train.lambda_mode"], cfg["train.lambda0"]
        )
    except est.TrainingDiverged as exc:
        raise NumericalError(str(exc)) from None
    os.makedirs(args.out, exist_ok=True)
    params_list = params if isinstance(params, list) else [params]
    for pi, p in enumerate(params_list):
        for li, (w, b) in enumerate(zip(p.weights, p.biases)):
            write_mpt(os.path.join(args.out, f"net{pi}_w{li}.mpt"), w)
            write_mpt(os.path.join(args.out, f"net{pi}_b{li}.mpt"), b)
    write_json(
        os.path.join(args.out, "checkpoint.json"),
        {
            "config": _manifest_config(cfg),
            "config_hash": _config_hash(cfg),
            "layer_sizes": [p.layer_sizes for p in params_list],
            "channel_scales": list(np.asarray(scales)),
            "nets": len(params_list),
            "format_versions": FORMAT_VERSIONS,
        },
    )
    write_text_atomic(os.path.join(args.out, "training_log.csv"), log.to_csv())
    pred = _predict_volume(
        params, np.asarray(scales),
        est.normalize_inputs(signals, scheme).reshape(-1, scheme.n_weighted),
        signals.shape[:3],
    )
    write_mpt(os.path.join(args.out, "pred_params.mpt"), pred)
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    pred = read_mpt(args.pred)
    gt = read_mpt(args.gt)
    mask = read_mpt(args.mask) > 0.5
    channels = cfg["eval.channels"]
    if pred.shape[3] != len(channels):
        raise ConfigError(
            f"prediction has {pred.shape[3]} channels, config lists {len(channels)}"
        )
    chan_idx = [phantom_mod.CHANNELS.index(c) for c in channels]
    rep = eval_metrics.report_channels(pred, gt[..., chan_idx], mask, channels)
    os.makedirs(args.out, exist_ok=True)
    rows = rep.to_rows(method=args.method, sampling="", noise="")
    _write_metrics_csv(os.path.join(args.out, "metrics.csv"), rows)
    write_json(
        os.path.join(args.out, "metrics.json"),
        {
            "psnr": rep.psnr,
            "ssim": rep.ssim,
            "nrmse": rep.nrmse,
            "mask_voxels": rep.mask_voxels,
            "channels": channels,
        },
    )
    return 0


def _cmd_experiment_run(args) -> int:
    cfg = _load_config(args.config)
    manifest = run_experiment(cfg, args.out)
    print(f"acceleration {manifest['acceleration']:g}")
    for name, summary in manifest["arms"].items():
        print(f"{name}: psnr_all {summary['psnr_all']:.4f} dB, final lambda {summary['final_lambda']:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpmri", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p_ph = sub.add_parser("phantom").add_subparsers(dest="sub", required=True)
    g = p_ph.add_parser("gen", help="generate a synthetic phantom")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_phantom_gen)

    a = sub.add_parser("acquire", help="build schemes and render signals")
    a.add_argument("--config")
    a.add_argument("--phantom", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=_cmd_acquire)

    p_no = sub.add_parser("noise").add_subparsers(dest="sub", required=True)
    n = p_no.add_parser("add", help="inject spatially varying magnitude noise")
    n.add_argument("--config")
    n.add_argument("--signals", required=True)
    n.add_argument("--scheme", required=True)
    n.add_argument("--mask", required=True)
    n.add_argument("--out", required=True)
    n.set_defaults(func=_cmd_noise_add)

    p_fit = sub.add_parser("fit").add_subparsers(dest="sub", required=True)
    for model in ("dki", "noddi"):
        f = p_fit.add_parser(model, help=f"classical {model} fit")
        f.add_argument("--config")
        f.add_argument("--signals", required=True)
        f.add_argument("--scheme", required=True)
        f.add_argument("--mask", required=True)
        f.add_argument("--out", required=True)
        f.set_defaults(func=_cmd_fit, model=model)

    t = sub.add_parser("tsvd", help="write the (truncated) singular spectrum")
    t.add_argument("--in", required=True)
    t.add_argument("--drop", type=int, default=0)
    t.add_argument("--grouping", default="merged",
                   choices=["merged", "per_parameter", "per_model"])
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_tsvd)

    tr = sub.add_parser("train", help="train the estimator on one volume")
    tr.add_argument("--config")
    tr.add_argument("--signals", required=True)
    tr.add_argument("--scheme", required=True)
    tr.add_argument("--gt", required=True)
    tr.add_argument("--mask", required=True)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate prediction maps against reference")
    ev.add_argument("--config")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--mask", required=True)
    ev.add_argument("--method", default="method")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=_cmd_eval)

    p_ex = sub.add_parser("experiment").add_subparsers(dest="sub", required=True)
    r = p_ex.add_parser("run", help="full phantom-to-metrics pipeline")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.set_defaults(func=_cmd_experiment_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args)
    except (ConfigError, MptError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
