"""Binary feature store: ``index.json`` + ``features.bin`` (float32, little-endian)."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from ..errors import FormatError, MissingIdError, SizeMismatchError

INDEX_FILE = "index.json"
DATA_FILE = "features.bin"
_DTYPE = np.dtype("<f4")


class FeatureStore:
    """Per-image spatial map (H, W, C) plus intermediate vector (C_i).

    Records are read through a memory map, so lookups are lazy. All images in
    one store share the same shape header.
    """

    def __init__(self, height, width, channels, inter_channels, offsets, data):
        self.height = height
        self.width = width
        self.channels = channels
        self.inter_channels = inter_channels
        self.offsets = dict(offsets)
        self._data = data
        self._rows = None

    @property
    def record_values(self) -> int:
        return self.height * self.width * self.channels + self.inter_channels

    @property
    def record_bytes(self) -> int:
        return self.record_values * _DTYPE.itemsize

    @property
    def ids(self) -> list[str]:
        return list(self.offsets)

    def __len__(self):
        return len(self.offsets)

    def __contains__(self, image_id):
        return image_id in self.offsets

    def _record(self, image_id: str) -> np.ndarray:
        try:
            off = self.offsets[image_id]
        except KeyError:
            raise MissingIdError(image_id) from None
        start = off // _DTYPE.itemsize
        return np.asarray(self._data[start:start + self.record_values])

    def get(self, image_id: str) -> tuple[np.ndarray, np.ndarray]:
        rec = self._record(image_id)
        split = self.height * self.width * self.channels
        fmap = rec[:split].reshape(self.height, self.width, self.channels)
        return fmap, rec[split:]

    def batch(self, ids) -> tuple[np.ndarray, np.ndarray]:
        """Stacked float64 maps (N, H, W, C) and intermediate vectors (N, C_i)."""
        maps = np.empty((len(ids), self.height, self.width, self.channels))
        inter = np.empty((len(ids), self.inter_channels))
        for i, image_id in enumerate(ids):
            maps[i], inter[i] = self.get(image_id)
        return maps, inter


def write_feature_store(directory, maps: dict, inter: dict) -> Path:
    """Write ``maps[id]`` (H, W, C) and ``inter[id]`` (C_i) in insertion order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = list(maps)
    if not ids:
        raise FormatError("feature store needs at least one image")
    h, w, c = np.shape(maps[ids[0]])
    ci = np.shape(inter[ids[0]])[0]
    offsets = {}
    record_bytes = (h * w * c + ci) * _DTYPE.itemsize
    with open(directory / DATA_FILE, "wb") as fh:
        for i, image_id in enumerate(ids):
            fmap = np.asarray(maps[image_id])
            vec = np.asarray(inter[image_id])
            if fmap.shape != (h, w, c) or vec.shape != (ci,):
                raise SizeMismatchError(
                    f"{image_id}: shapes {fmap.shape}/{vec.shape} differ from {(h, w, c)}/{(ci,)}"
                )
            offsets[image_id] = i * record_bytes
            fh.write(fmap.astype(_DTYPE).tobytes())
            fh.write(vec.astype(_DTYPE).tobytes())
    header = {"H": h, "W": w, "C": c, "C_i": ci, "offsets": offsets}
    with open(directory / INDEX_FILE, "w") as fh:
        json.dump(header, fh, indent=0, sort_keys=False)
        fh.write("\n")
    return directory


def load_feature_store(directory) -> FeatureStore:
    directory = Path(directory)
    try:
        with open(directory / INDEX_FILE) as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{directory / INDEX_FILE}: {exc}") from None
    try:
        h, w, c, ci = (int(header[k]) for k in ("H", "W", "C", "C_i"))
        offsets = {str(k): int(v) for k, v in header["offsets"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{directory / INDEX_FILE}: bad header ({exc})") from None
    path = directory / DATA_FILE
    size = os.path.getsize(path)
    record_bytes = (h * w * c + ci) * _DTYPE.itemsize
    for image_id, off in offsets.items():
        if off % _DTYPE.itemsize or off < 0 or off + record_bytes > size:
            raise SizeMismatchError(
                f"{path}: record {image_id!r} at byte {off} needs {record_bytes} bytes, file has {size}"
            )
    data = np.memmap(path, dtype=_DTYPE, mode="r") if size else np.zeros(0, _DTYPE)
    return FeatureStore(h, w, c, ci, offsets, data)
