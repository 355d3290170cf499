"""Offline transition datasets: binary file format, state normalization and
uniform minibatch sampling.

File layout (all integers little-endian)::

    offset  size        field
    0       8           magic  b"DAC4RDS\\x00"
    8       4           uint32 format version (currently 1)
    12      4           uint32 header length H
    16      H           UTF-8 JSON header: n_records, state_dim, action_dim,
                        record_size, metadata
    16+H    n*R         records, each:
                          uint32  payload length (R - 4)
                          int64   trajectory id
                          uint8   done flag
                          float64 reward
                          float64[state_dim]  state
                          float64[action_dim] action
                          float64[state_dim]  next state
    ...     16*S        float64[S] state mean, float64[S] state std
    end-4   4           uint32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ChecksumError, ContractError, FormatVersionError, TruncatedFileError, DatasetLoadError

MAGIC = b"DAC4RDS\x00"
FORMAT_VERSION = 1
STD_FLOOR = 1e-6


def _record_dtype(state_dim: int, action_dim: int) -> np.dtype:
    return np.dtype([
        ("length", "<u4"),
        ("trajectory_id", "<i8"),
        ("done", "u1"),
        ("reward", "<f8"),
        ("state", "<f8", (state_dim,)),
        ("action", "<f8", (action_dim,)),
        ("next_state", "<f8", (state_dim,)),
    ])


def normalization_stats(states: np.ndarray):
    if states.shape[0] == 0:
        return np.zeros(states.shape[1]), np.ones(states.shape[1])
    mean = states.mean(axis=0)
    std = np.maximum(states.std(axis=0), STD_FLOOR)
    return mean, std


@dataclass(eq=False)
class OfflineDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    trajectory_ids: np.ndarray
    state_mean: np.ndarray
    state_std: np.ndarray
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, states, actions, rewards, next_states, dones, trajectory_ids, metadata=None):
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        n = len(rewards)
        if states.ndim == 1:
            states = states.reshape(n, -1)
            next_states = np.asarray(next_states, dtype=np.float64).reshape(n, -1)
            actions = actions.reshape(n, -1)
        mean, std = normalization_stats(states)
        return cls(
            states, actions, np.asarray(rewards, dtype=np.float64),
            np.asarray(next_states, dtype=np.float64), np.asarray(dones, dtype=bool),
            np.asarray(trajectory_ids, dtype=np.int64), mean, std, dict(metadata or {}),
        )

    def __len__(self) -> int:
        return self.rewards.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def normalize(self, states):
        return (np.asarray(states, dtype=np.float64) - self.state_mean) / self.state_std

    def trajectory_returns(self) -> np.ndarray:
        _, inverse = np.unique(self.trajectory_ids, return_inverse=True)
        return np.bincount(inverse, weights=self.rewards)

    def summary(self) -> dict:
        lengths = np.bincount(np.unique(self.trajectory_ids, return_inverse=True)[1]) if len(self) else np.array([0])
        return {
            "n_transitions": len(self),
            "n_trajectories": int(len(np.unique(self.trajectory_ids))),
            "mean_reward": float(self.rewards.mean()) if len(self) else float("nan"),
            "mean_length": float(lengths.mean()),
            "action_mean": self.actions.mean(axis=0).tolist() if len(self) else [],
            "action_std": self.actions.std(axis=0).tolist() if len(self) else [],
        }

    def equals(self, other: "OfflineDataset") -> bool:
        arrays = ("states", "actions", "rewards", "next_states", "dones",
                  "trajectory_ids", "state_mean", "state_std")
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in arrays) and (
            self.metadata == other.metadata
        )


@dataclass(eq=False)
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    indices: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.rewards)
        for name in ("states", "actions", "next_states", "dones"):
            if len(getattr(self, name)) != n:
                raise ContractError(f"batch field {name} has length {len(getattr(self, name))}, expected {n}")

    @property
    def batch_size(self) -> int:
        return len(self.rewards)


def sample_minibatch(dataset: OfflineDataset, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
    """Uniform with replacement; states come back normalized."""
    if len(dataset) == 0:
        raise ContractError("cannot sample from an empty dataset")
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    idx = rng.integers(0, len(dataset), size=batch_size)
    return TransitionBatch(
        dataset.normalize(dataset.states[idx]),
        dataset.actions[idx],
        dataset.rewards[idx],
        dataset.normalize(dataset.next_states[idx]),
        dataset.dones[idx],
        idx,
    )


def concat_datasets(datasets, metadata=None) -> OfflineDataset:
    """Stack datasets trajectory-wise; ids are offset so they stay distinct and
    normalization is recomputed over the union."""
    if not datasets:
        raise ContractError("nothing to concatenate")
    dims = {(d.states.shape[1], d.actions.shape[1]) for d in datasets}
    if len(dims) != 1:
        raise ContractError(f"datasets disagree on (state_dim, action_dim): {sorted(dims)}")
    ids, offset = [], 0
    for d in datasets:
        if len(d):
            _, inv = np.unique(d.trajectory_ids, return_inverse=True)
            ids.append(inv + offset)
            offset += int(inv.max()) + 1
    cat = lambda name: np.concatenate([getattr(d, name) for d in datasets])
    traj = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
    meta = {"parts": [d.metadata for d in datasets]} if metadata is None else metadata
    return OfflineDataset.from_arrays(cat("states"), cat("actions"), cat("rewards"), cat("next_states"),
                                      cat("dones"), traj, meta)


def write_dataset(dataset: OfflineDataset, path) -> None:
    n, sd, ad = len(dataset), dataset.states.shape[1], dataset.actions.shape[1]
    dtype = _record_dtype(sd, ad)
    header = json.dumps({
        "n_records": n,
        "state_dim": sd,
        "action_dim": ad,
        "record_size": dtype.itemsize,
        "metadata": dataset.metadata,
    }, sort_keys=True).encode("utf-8")
    records = np.zeros(n, dtype=dtype)
    records["length"] = dtype.itemsize - 4
    records["trajectory_id"] = dataset.trajectory_ids
    records["done"] = dataset.dones.astype(np.uint8)
    records["reward"] = dataset.rewards
    records["state"] = dataset.states
    records["action"] = dataset.actions
    records["next_state"] = dataset.next_states
    body = b"".join([
        MAGIC,
        struct.pack("<II", FORMAT_VERSION, len(header)),
        header,
        records.tobytes(),
        np.asarray(dataset.state_mean, dtype="<f8").tobytes(),
        np.asarray(dataset.state_std, dtype="<f8").tobytes(),
    ])
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def read_dataset(path) -> OfflineDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 + 4:
        raise TruncatedFileError(f"{path}: file too short ({len(raw)} bytes)")
    if raw[:8] != MAGIC:
        raise DatasetLoadError(f"{path}: not a dataset file (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < 16 + hlen + 4:
        raise TruncatedFileError(f"{path}: header truncated")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{path}: corrupt header") from exc
    n, sd, ad = header["n_records"], header["state_dim"], header["action_dim"]
    dtype = _record_dtype(sd, ad)
    expected = 16 + hlen + n * dtype.itemsize + 16 * sd + 4
    if len(raw) != expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise ChecksumError(f"{path}: CRC-32 mismatch")
    start = 16 + hlen
    records = np.frombuffer(raw, dtype=dtype, count=n, offset=start)
    if n and np.any(records["length"] != dtype.itemsize - 4):
        raise ChecksumError(f"{path}: record length prefix mismatch")
    stats = np.frombuffer(raw, dtype="<f8", count=2 * sd, offset=start + n * dtype.itemsize)
    return OfflineDataset(
        states=np.array(records["state"], dtype=np.float64).reshape(n, sd),
        actions=np.array(records["action"], dtype=np.float64).reshape(n, ad),
        rewards=np.array(records["reward"], dtype=np.float64),
        next_states=np.array(records["next_state"], dtype=np.float64).reshape(n, sd),
        dones=records["done"].astype(bool),
        trajectory_ids=np.array(records["trajectory_id"], dtype=np.int64),
        state_mean=np.array(stats[:sd]),
        state_std=np.array(stats[sd:]),
        metadata=header["metadata"],
    )
