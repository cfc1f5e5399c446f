"""Portable volume files and synthetic benchmark scenes.

A volume is stored as a raw little-endian float32 payload in row-major
order plus a JSON sidecar `<path>.json` describing dims, dtype, ordering
and the volume kind (intensity, prob, or label).  Labels are stored as
0.0/1.0 floats.  Writes are atomic (temp file + rename).
"""

import json
import os
import tempfile

import numpy as np

KINDS = ("intensity", "prob", "label")

# synthetic scene intensity levels: blobs ramp from midpoint at the rim to
# full contrast at the core, so thresholding a noiseless scene at
# BACKGROUND + CONTRAST/2 recovers the exact mask
SYNTH_BACKGROUND = 0.2
SYNTH_CONTRAST = 0.6
SYNTH_MIDPOINT = SYNTH_BACKGROUND + SYNTH_CONTRAST / 2.0


def sidecar_path(path):
    return str(path) + ".json"


def _atomic_write(path, data):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".vol-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _check_kind(data, kind):
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if kind == "prob" and data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise ValueError("prob volumes must have values in [0,1]")
    if kind == "label" and not np.isin(data, (0.0, 1.0)).all():
        raise ValueError("label volumes must contain only 0 and 1")


def write_volume(path, data, kind):
    """Write a [D,H,W] volume and its sidecar; values are cast to float32."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got shape {data.shape}")
    _check_kind(data, kind)
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    meta = {
        "dims": [int(s) for s in data.shape],
        "dtype": "f32",
        "order": "row-major",
        "kind": kind,
    }
    _atomic_write(path, payload)
    _atomic_write(sidecar_path(path), (json.dumps(meta) + "\n").encode("utf-8"))


def read_volume(path, expect_kind=None):
    """Read a volume written by :func:`write_volume`.

    Returns (data as float64 [D,H,W], meta dict).  Payload length, dtype,
    ordering and value ranges are validated.
    """
    with open(sidecar_path(path), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    dims = tuple(int(s) for s in meta["dims"])
    if meta.get("dtype") != "f32" or meta.get("order") != "row-major":
        raise ValueError(f"{path}: unsupported dtype/order in sidecar {meta}")
    kind = meta.get("kind")
    if kind not in KINDS:
        raise ValueError(f"{path}: unknown volume kind {kind!r}")
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"{path}: expected a {expect_kind} volume, found {kind}")
    with open(path, "rb") as fh:
        payload = fh.read()
    expected = 4 * int(np.prod(dims))
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload is {len(payload)} bytes, dims {dims} require {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
    _check_kind(data, kind)
    return data, meta


def synth(seed, dims, n_blobs=3, noise_sigma=0.05):
    """Deterministic synthetic scene: smooth ellipsoidal blobs plus noise.

    Returns (intensity float64, ground-truth uint8 mask).  The mask is the
    noiseless blob support; blob intensity ramps from just above
    SYNTH_MIDPOINT at the rim to SYNTH_BACKGROUND + SYNTH_CONTRAST at the
    core.
    """
    dims = tuple(int(s) for s in dims)
    if len(dims) != 3 or any(s < 8 for s in dims):
        raise ValueError(f"dims must be three extents >= 8, got {dims}")
    if n_blobs < 0:
        raise ValueError(f"n_blobs must be >= 0, got {n_blobs}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    grids = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in dims), indexing="ij")
    r2_min = np.full(dims, np.inf)
    for _ in range(n_blobs):
        center = [rng.uniform(0.3 * s, 0.7 * s) for s in dims]
        semi = [max(2.0, rng.uniform(0.16, 0.30) * s) for s in dims]
        r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi))
        r2_min = np.minimum(r2_min, r2)
    mask = r2_min < 1.0
    profile = np.where(mask, 1.0 - np.minimum(r2_min, 1.0), 0.0)
    intensity = SYNTH_BACKGROUND + SYNTH_CONTRAST * (0.5 + 0.5 * profile) * mask
    if noise_sigma > 0:
        intensity = intensity + rng.normal(0.0, noise_sigma, size=dims)
    return intensity, mask.astype(np.uint8)
