"""Trajectory dataset container.

Single-file binary layout (all little-endian, fixed field order):

    magic      4 bytes   b"BWDS"
    version    u32       currently 1
    index_len  u32
    index      index_len bytes of UTF-8 JSON (sorted keys):
               {"config": <WorldConfig dict>, "seed": int,
                "n_trajectories": int, "horizon": int, "has_gt_masks": bool,
                "format_version": 1}
    then per trajectory, in order:
      images   (horizon+1, H, W, 3) uint8, row-major
      actions  horizon records of: mode u8 (0=coordinate, 1=entity)
               followed by 4 float32 (pick_x, pick_y, place_x, place_y);
               entity mode stores (entity_id, 0) in the first two floats
      gt       (horizon+1, H, W) uint8 label maps, only if has_gt_masks

The layout is pinned by a golden-file test; bump `FORMAT_VERSION` on any
change. Ground-truth label maps are evaluation-only: readers opened in
training mode refuse to expose them.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .utils import atomic_write_bytes, split_seed
from .world import Action, Trajectory, WorldConfig, rollout_trajectory

MAGIC = b"BWDS"
FORMAT_VERSION = 1


def _encode_action(a: Action) -> bytes:
    if a.mode == "coordinate":
        vals = (float(a.pick[0]), float(a.pick[1]), float(a.place[0]), float(a.place[1]))
        mode = 0
    else:
        vals = (float(a.entity_id), 0.0, float(a.place[0]), float(a.place[1]))
        mode = 1
    return struct.pack("<B4f", mode, *vals)


def _decode_action(buf: bytes) -> Action:
    mode, a, b, c, d = struct.unpack("<B4f", buf)
    if mode == 0:
        return Action(mode="coordinate", pick=(a, b), place=(c, d))
    return Action(mode="entity", entity_id=int(a), place=(c, d))


def write_dataset(path: str | Path, config: WorldConfig, trajectories: list,
                  seed: int, horizon: int, with_gt: bool = True) -> None:
    index = {
        "config": config.to_dict(),
        "seed": int(seed),
        "n_trajectories": len(trajectories),
        "horizon": int(horizon),
        "has_gt_masks": bool(with_gt),
        "format_version": FORMAT_VERSION,
    }
    index_bytes = json.dumps(index, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", FORMAT_VERSION, len(index_bytes)))
    out.write(index_bytes)
    for traj in trajectories:
        img_u8 = np.clip(np.round(traj.images * 255.0), 0, 255).astype(np.uint8)
        out.write(img_u8.tobytes(order="C"))
        for a in traj.actions:
            out.write(_encode_action(a))
        if with_gt:
            if traj.gt_masks is None:
                raise ValueError("trajectory lacks gt masks but has_gt_masks is set")
            out.write(traj.gt_masks.astype(np.uint8).tobytes(order="C"))
    atomic_write_bytes(path, out.getvalue())


def generate_dataset(config: WorldConfig, n_trajectories: int, horizon: int,
                     out_path: str | Path, with_gt: bool = True) -> dict:
    """Generate trajectories from fresh worlds and write the container.

    Deterministic for a fixed config.seed. Returns the index record.
    """
    trajectories = []
    for i in range(n_trajectories):
        traj_seed = split_seed(config.seed, f"trajectory/{i}")
        trajectories.append(rollout_trajectory(config, horizon, traj_seed, with_gt=with_gt))
    try:
        write_dataset(out_path, config, trajectories, seed=config.seed,
                      horizon=horizon, with_gt=with_gt)
    except OSError as e:
        raise OSError(f"failed writing dataset to {out_path}: {e}") from e
    return read_index(out_path)


def read_index(path: str | Path) -> dict:
    with open(path, "rb") as f:
        header = f.read(12)
        if header[:4] != MAGIC:
            raise ValueError(f"{path}: not a dataset file (bad magic)")
        version, index_len = struct.unpack("<II", header[4:])
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        return json.loads(f.read(index_len).decode("utf-8"))


class GtMasksUnavailable(RuntimeError):
    """Raised when training-mode readers touch evaluation-only label maps."""


class _GuardedTrajectory:
    """Trajectory view whose gt_masks access is policed by the reader."""

    def __init__(self, images: np.ndarray, actions: list,
                 gt: Optional[np.ndarray], reader: "DatasetReader"):
        self.images = images
        self.actions = actions
        self._gt = gt
        self._reader = reader

    @property
    def gt_masks(self) -> Optional[np.ndarray]:
        self._reader.gt_mask_reads += 1
        if self._reader.training_mode:
            raise GtMasksUnavailable(
                "gt_masks are evaluation-only; reader was opened in training mode")
        return self._gt


class DatasetReader:
    """Random-access reader over the dataset container.

    In training mode any gt_masks access raises; the counter `gt_mask_reads`
    additionally lets tests assert the training path never even tried.
    """

    def __init__(self, path: str | Path, training_mode: bool = False):
        self.path = Path(path)
        self.training_mode = training_mode
        self.gt_mask_reads = 0
        self.index = read_index(path)
        cfg = self.index["config"]
        self.config = WorldConfig.from_dict(cfg)
        H = self.config.image_size
        T = self.index["horizon"]
        self._img_bytes = (T + 1) * H * H * 3
        self._act_bytes = T * struct.calcsize("<B4f")
        self._gt_bytes = (T + 1) * H * H if self.index["has_gt_masks"] else 0
        self._rec_bytes = self._img_bytes + self._act_bytes + self._gt_bytes
        with open(path, "rb") as f:
            f.seek(8)
            (index_len,) = struct.unpack("<I", f.read(4))
        self._data_start = 12 + index_len

    def __len__(self) -> int:
        return self.index["n_trajectories"]

    def __getitem__(self, i: int) -> _GuardedTrajectory:
        if not (0 <= i < len(self)):
            raise IndexError(i)
        H = self.config.image_size
        T = self.index["horizon"]
        with open(self.path, "rb") as f:
            f.seek(self._data_start + i * self._rec_bytes)
            raw = f.read(self._rec_bytes)
        images = np.frombuffer(raw, dtype=np.uint8, count=self._img_bytes)
        images = images.reshape(T + 1, H, H, 3).astype(np.float32) / 255.0
        actions = []
        off = self._img_bytes
        step_len = struct.calcsize("<B4f")
        for t in range(T):
            actions.append(_decode_action(raw[off + t * step_len: off + (t + 1) * step_len]))
        gt = None
        if self.index["has_gt_masks"]:
            gt = np.frombuffer(raw[self._img_bytes + self._act_bytes:],
                               dtype=np.uint8).reshape(T + 1, H, H).copy()
        return _GuardedTrajectory(images, actions, gt, self)

    def __iter__(self) -> Iterator[_GuardedTrajectory]:
        for i in range(len(self)):
            yield self[i]

    def as_trajectory(self, i: int) -> Trajectory:
        """Plain Trajectory (evaluation use; honors the training-mode guard)."""
        item = self[i]
        return Trajectory(images=item.images, actions=item.actions,
                          gt_masks=item.gt_masks)
