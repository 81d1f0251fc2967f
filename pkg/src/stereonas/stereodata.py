"""Procedural synthetic stereo pairs with exact ground-truth disparity.

Each scene is a stack of fronto-parallel layers: a textured background
plus one to four textured rectangles, every layer at its own constant
disparity (larger disparity = closer = painted on top).  Textures are
smooth sums of sinusoids evaluated analytically, so the right view can
be synthesized exactly at fractional disparities instead of by
resampling the left image.

The validity mask excludes pixels that are out of frame or occluded in
the right view, and also pixels whose bilinear warp support straddles
two surfaces; on the remaining pixels, warping the right view by the
ground-truth disparity reproduces the left view up to interpolation
error on a smooth texture (MAE well under 0.02).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .bilevel import StereoArrays, TrainValSplit
from .errors import ConfigError, DataError, EvaluationError
from .tensor import (
    Tensor,
    bilinear_resize,
    scalar_mul,
    tensor_from_bytes,
    tensor_to_bytes,
)

__all__ = [
    "StereoSample",
    "DatasetManifest",
    "StereoDataset",
    "EvalReport",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "evaluate",
    "write_eval_csv",
]

MANIFEST_VERSION = 1
DEFAULT_SPLITS = (0.4, 0.4, 0.2)  # search-train, search-val, test


# ---------------------------------------------------------------------------
# Scene construction


class _Texture:
    """Sum of a few low-frequency sinusoids, defined on the whole plane."""

    def __init__(self, rng, channels: int, base: float):
        self.channels = channels
        self.base = base
        # wavelengths >= 10 px keep bilinear interpolation error small
        k = 3
        self.amp = 0.5 * (0.6 ** np.arange(k))
        self.freq = 2.0 * np.pi / rng.uniform(10.0, 32.0, size=(channels, k))
        self.angle = rng.uniform(0.0, np.pi, size=(channels, k))
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=(channels, k))

    def __call__(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Evaluate at (possibly fractional) pixel coordinates; (C, *shape)."""
        out = np.empty((self.channels,) + xs.shape)
        for c in range(self.channels):
            acc = np.full(xs.shape, self.base)
            for a, f, th, ph in zip(self.amp, self.freq[c], self.angle[c],
                                    self.phase[c]):
                acc += a * np.sin(f * (np.cos(th) * xs + np.sin(th) * ys) + ph)
            out[c] = acc
        return out


@dataclass(frozen=True)
class _Layer:
    disparity: float
    x0: int
    x1: int
    y0: int
    y1: int
    texture: _Texture

    def covers(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return ((self.x0 <= xs) & (xs < self.x1)
                & (self.y0 <= ys) & (ys < self.y1))


@dataclass(frozen=True)
class StereoSample:
    left: np.ndarray   # (C, H, W)
    right: np.ndarray
    disparity: np.ndarray  # (1, H, W)
    valid: np.ndarray      # (1, H, W), {0, 1}


def _make_layers(rng, h, w, max_disp, channels):
    d_bg = float(rng.uniform(0.0, 0.25 * max_disp))
    layers = [_Layer(d_bg, 0, w, 0, h, _Texture(rng, channels, rng.uniform(0.3, 0.7)))]
    for _ in range(int(rng.integers(1, 5))):
        rw = int(rng.integers(w // 8, w // 2 + 1))
        rh = int(rng.integers(h // 8, h // 2 + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        d = float(rng.uniform(d_bg + 1.0, max_disp))
        layers.append(_Layer(d, x0, x0 + rw, y0, y0 + rh,
                             _Texture(rng, channels, rng.uniform(0.3, 0.7))))
    # paint order: ascending disparity so the closest layer lands on top
    return sorted(layers, key=lambda l: l.disparity)


def _render_sample(rng, h, w, max_disp, channels) -> StereoSample:
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    layers = _make_layers(rng, h, w, max_disp, channels)

    left = np.zeros((channels, h, w))
    disp = np.zeros((h, w))
    layer_id_left = np.zeros((h, w), dtype=np.intp)
    for i, layer in enumerate(layers):
        m = layer.covers(xs, ys)
        left[:, m] = layer.texture(xs, ys)[:, m]
        disp[m] = layer.disparity
        layer_id_left[m] = i

    # right view: pixel x_r shows the closest layer whose left-image extent
    # contains x_r + d; textures are analytic so fractional lookups are exact
    right = np.zeros((channels, h, w))
    layer_id_right = np.full((h, w), -1, dtype=np.intp)
    unfilled = np.ones((h, w), dtype=bool)
    for i, layer in sorted(enumerate(layers), key=lambda t: -t[1].disparity):
        xl = xs + layer.disparity
        m = unfilled & layer.covers(xl, ys)
        right[:, m] = layer.texture(xl, ys)[:, m]
        layer_id_right[m] = i
        unfilled &= ~m

    # validity: in-frame, visible in the right view, and bilinear support
    # resting on a single surface (no mixed-surface interpolation)
    xr = xs - disp
    flo = np.clip(np.floor(xr).astype(np.intp), 0, w - 1)
    fhi = np.minimum(flo + 1, w - 1)
    rows = np.arange(h)[:, None]
    valid = ((xr >= 0.0)
             & (layer_id_right[rows, flo] == layer_id_left)
             & (layer_id_right[rows, fhi] == layer_id_left))

    return StereoSample(left, right, disp[None], valid[None].astype(float))


# ---------------------------------------------------------------------------
# Manifest and dataset


@dataclass(frozen=True)
class DatasetManifest:
    n: int
    height: int
    width: int
    max_disp: float
    seed: int
    channels: int = 1
    splits: dict = field(default_factory=dict)  # name -> [start, end)
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        object.__setattr__(self, "splits",
                           {k: tuple(v) for k, v in self.splits.items()})
        spans = sorted(self.splits.values())
        if not spans:
            raise ConfigError("manifest needs at least one split")
        if spans[0][0] != 0 or spans[-1][1] != self.n:
            raise ConfigError(f"splits {self.splits} do not cover 0..{self.n}")
        for (_, e0), (s1, _) in zip(spans, spans[1:]):
            if e0 != s1:
                raise ConfigError(f"splits {self.splits} overlap or leave gaps")

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "n": self.n,
            "height": self.height,
            "width": self.width,
            "max_disp": self.max_disp,
            "seed": self.seed,
            "channels": self.channels,
            "splits": {k: list(v) for k, v in self.splits.items()},
        }


@dataclass
class StereoDataset:
    manifest: DatasetManifest
    samples: list

    def __len__(self) -> int:
        return len(self.samples)

    def split_indices(self, name: str) -> range:
        if name not in self.manifest.splits:
            raise ConfigError(
                f"unknown split {name!r}; have {sorted(self.manifest.splits)}"
            )
        start, end = self.manifest.splits[name]
        return range(start, end)

    def arrays(self, name: str) -> StereoArrays:
        idx = self.split_indices(name)
        if len(idx) == 0:
            raise ConfigError(f"split {name!r} is empty")
        return StereoArrays(
            left=np.stack([self.samples[i].left for i in idx]),
            right=np.stack([self.samples[i].right for i in idx]),
            disp=np.stack([self.samples[i].disparity for i in idx]),
            valid=np.stack([self.samples[i].valid for i in idx]),
        )

    def search_split(self) -> TrainValSplit:
        return TrainValSplit(self.arrays("search_train"), self.arrays("search_val"))


def _default_splits(n: int) -> dict:
    a = int(round(n * DEFAULT_SPLITS[0]))
    b = a + int(round(n * DEFAULT_SPLITS[1]))
    return {"search_train": [0, a], "search_val": [a, b], "test": [b, n]}


def generate_dataset(n: int, h: int, w: int, max_disp: float, seed: int,
                     channels: int = 1, splits: dict | None = None) -> StereoDataset:
    """Render n layered scenes; deterministic per (seed, sample index)."""
    if n < 1:
        raise ConfigError(f"need at least one sample, got {n}")
    if not max_disp < w / 4:
        raise ConfigError(f"max_disp {max_disp} must stay below w/4 = {w / 4}")
    if max_disp < 1.0:
        raise ConfigError(f"max_disp {max_disp} leaves no room for foreground layers")
    if channels not in (1, 3):
        raise ConfigError(f"channels must be 1 or 3, got {channels}")
    manifest = DatasetManifest(n, h, w, float(max_disp), seed, channels,
                               splits if splits is not None else _default_splits(n))
    samples = [
        _render_sample(np.random.default_rng([seed, i]), h, w, max_disp, channels)
        for i in range(n)
    ]
    return StereoDataset(manifest, samples)


# ---------------------------------------------------------------------------
# Persistence: manifest JSON + per-sample tensor blobs


def _sample_blob(s: StereoSample) -> bytes:
    parts = [s.left[None], s.right[None], s.disparity[None], s.valid[None]]
    return b"".join(tensor_to_bytes(Tensor(p)) for p in parts)


def _sample_from_blob(buf: bytes, sample_id: int) -> StereoSample:
    arrays = []
    off = 0
    for _ in range(4):
        if off + 16 > len(buf):
            raise DataError(f"sample {sample_id}: blob truncated")
        dims = np.frombuffer(buf, dtype="<u4", count=4, offset=off)
        size = 16 + int(np.prod(dims)) * 8
        if off + size > len(buf):
            raise DataError(f"sample {sample_id}: blob truncated")
        arrays.append(tensor_from_bytes(buf[off:off + size]).data[0])
        off += size
    if off != len(buf):
        raise DataError(f"sample {sample_id}: trailing bytes in blob")
    return StereoSample(*arrays)


def _sample_path(dirpath: str, i: int) -> str:
    return os.path.join(dirpath, "samples", f"{i:05d}.bin")


def save_dataset(ds: StereoDataset, dirpath: str) -> None:
    os.makedirs(os.path.join(dirpath, "samples"), exist_ok=True)
    doc = ds.manifest.to_json()
    checksums = {}
    for i, s in enumerate(ds.samples):
        blob = _sample_blob(s)
        checksums[f"{i:05d}.bin"] = hashlib.sha256(blob).hexdigest()
        with open(_sample_path(dirpath, i), "wb") as fh:
            fh.write(blob)
    doc["checksums"] = checksums
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_dataset(dirpath: str) -> StereoDataset:
    manifest_path = os.path.join(dirpath, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no dataset manifest at {dirpath}")
    with open(manifest_path) as fh:
        doc = json.load(fh)
    if doc.get("version") != MANIFEST_VERSION:
        raise DataError(
            f"dataset version {doc.get('version')!r} needs migration; "
            f"this build reads version {MANIFEST_VERSION}"
        )
    manifest = DatasetManifest(
        n=doc["n"], height=doc["height"], width=doc["width"],
        max_disp=doc["max_disp"], seed=doc["seed"], channels=doc["channels"],
        splits={k: tuple(v) for k, v in doc["splits"].items()},
    )
    samples = []
    for i in range(manifest.n):
        path = _sample_path(dirpath, i)
        if not os.path.exists(path):
            raise DataError(f"sample {i:05d} missing from {dirpath}")
        with open(path, "rb") as fh:
            blob = fh.read()
        want = doc["checksums"].get(f"{i:05d}.bin")
        if hashlib.sha256(blob).hexdigest() != want:
            raise DataError(f"sample {i:05d} corrupt: checksum mismatch")
        samples.append(_sample_from_blob(blob, i))
    return StereoDataset(manifest, samples)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class EvalReport:
    mean_epe: float
    per_sample: list


def evaluate(net, arrays: StereoArrays, batch_size: int = 8) -> EvalReport:
    """Mean EPE over a split at full resolution, plus per-sample errors.

    The mean weights every valid pixel equally, matching the sum of
    per-sample absolute errors divided by the total valid-pixel count.
    """
    if len(arrays) == 0:
        raise EvaluationError("cannot evaluate an empty split")
    per_sample = []
    total_err, total_px = 0.0, 0
    for start in range(0, len(arrays), batch_size):
        sl = slice(start, min(start + batch_size, len(arrays)))
        left, right = Tensor(arrays.left[sl]), Tensor(arrays.right[sl])
        out, scale = net.forward(left, right)[-1]
        if scale > 1:
            out = scalar_mul(bilinear_resize(out, scale), float(scale))
        err = np.abs(out.data - arrays.disp[sl])
        mask = (arrays.valid[sl] if arrays.valid is not None
                else np.ones_like(err))
        masked = err * mask
        for b in range(err.shape[0]):
            n_px = mask[b].sum()
            per_sample.append(float(masked[b].sum() / max(n_px, 1)))
            total_err += float(masked[b].sum())
            total_px += int(n_px)
    return EvalReport(total_err / max(total_px, 1), per_sample)


def write_eval_csv(path, report: EvalReport) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "epe"])
        for i, v in enumerate(report.per_sample):
            writer.writerow([i, v])
        writer.writerow(["mean", report.mean_epe])
