"""Sequence-dataset construction from 1 kHz trajectory logs.

Raw logs are decimated by an integer ``stride`` (one kept tick every
``stride`` ms). The offset-based secondary sampler re-reads the same log at
``stride / ssr`` additional temporal offsets, so the fraction of raw frames
used rises from ``1/stride`` to ``1/ssr`` without any frame appearing in two
sequences. Kept frames are enriched with end-point Jacobian linear-z
entries, constant feature columns are pruned on the training split, and
targets are min-max normalized against the declared variation ranges.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import dynamics, model_gen
from .control import Status, TrajectoryLog
from .errors import ConfigError, ContractError, DegenerateDatasetError, OutOfRangeError
from .model_gen import KinematicTemplate, RobotModel, VariationRanges

FEATURE_LAYOUT_VERSION = 1
_CACHE_MAGIC = b"DDSC"
_CACHE_VERSION = 1

#: Columns dropped by pruning carry this provenance note.
PRUNE_NOTE = "constant in training split"


@dataclass(frozen=True)
class DatasetConfig:
    seq_len: int = 16
    stride: int = 16          # decimation stride in raw 1 ms ticks
    ssr: int = 16             # offset step between sequence start ticks
    include_jacobian: bool = True
    include_torques: bool = True

    def validate(self) -> None:
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if not 1 <= self.ssr <= self.stride:
            raise ConfigError("ssr must satisfy 1 <= ssr <= stride")
        if self.stride % self.ssr != 0:
            raise ConfigError("stride must be divisible by ssr")


def effective_time(seq_len: int, stride: int) -> float:
    """Physical duration spanned by one input window, in seconds."""
    if seq_len < 1 or stride < 1:
        raise ConfigError("seq_len and stride must be positive")
    return seq_len * stride / 1000


def utilization(cfg: DatasetConfig) -> float:
    """Fraction of raw frames appearing in at least one sequence."""
    cfg.validate()
    return (cfg.stride / cfg.ssr) / cfg.stride


def offset_sample(log: TrajectoryLog, cfg: DatasetConfig) -> list[np.ndarray]:
    """Raw-frame index windows for every temporal offset.

    Offsets are ``0, ssr, ..., stride - ssr``; within one offset, windows are
    consecutive and non-overlapping on the decimated stream, so no raw index
    is ever reused. A log shorter than one window yields an empty list.
    """
    cfg.validate()
    if log.status is not Status.OK:
        raise ContractError(f"log for robot {log.robot_id} has status {log.status.value}")
    n = log.n_frames
    windows = []
    for offset in range(0, cfg.stride, cfg.ssr):
        count = 0 if offset >= n else (n - 1 - offset) // cfg.stride + 1
        for w in range(count // cfg.seq_len):
            start = w * cfg.seq_len
            windows.append(offset + cfg.stride * np.arange(start, start + cfg.seq_len))
    return windows


def _probe_model(template: KinematicTemplate) -> RobotModel:
    """Unit-mass stand-in used when only the kinematics matter."""
    links = tuple(model_gen.LinkSpec(shape=model_gen.CYLINDER, diameter=0.05, length=length,
                                     mass=1.0, com_offset=0.0,
                                     inertia=model_gen.compute_link_inertia(
                                         model_gen.CYLINDER, 0.05, length, 1.0))
                  for length in template.link_lengths)
    joints = tuple(model_gen.JointSpec(0.0, 0.0) for _ in range(template.n_joints))
    return RobotModel(id=-1, template=template, links=links, joints=joints, generation_seed=-1)


def jacobian_feature_names(n_joints: int) -> list[str]:
    return [f"jz[L{l},J{j}]" for l in range(1, n_joints + 1) for j in range(l)]


def feature_names(cfg: DatasetConfig, n_joints: int = 6) -> list[str]:
    names = [f"q[J{i}]" for i in range(n_joints)] + [f"qd[J{i}]" for i in range(n_joints)]
    if cfg.include_torques:
        names += [f"tau[J{i}]" for i in range(n_joints)]
    if cfg.include_jacobian:
        names += jacobian_feature_names(n_joints)
    return names


def _jz_block(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Linear-z Jacobian entries for every (link endpoint, proximal joint) pair.

    One world-frame pass per configuration; values equal
    ``dynamics.jacobian(model, q, l)[2, j]`` entry for entry.
    """
    n = model.template.n_joints
    lengths = model.template.link_lengths
    axes = np.asarray(model.template.joint_axes, dtype=np.float64)
    R, p = dynamics._world_joint_frames(model, q)
    z_axes = np.stack([R[j + 1] @ axes[j] for j in range(n)])
    out = np.empty(n * (n + 1) // 2)
    k = 0
    for l in range(1, n + 1):
        tip = p[l] + R[l] @ np.array([0.0, 0.0, lengths[l - 1]])
        for j in range(l):
            d = tip - p[j + 1]
            out[k] = z_axes[j, 0] * d[1] - z_axes[j, 1] * d[0]
            k += 1
    return out


def enrich_features(model: RobotModel, q: np.ndarray, qd: np.ndarray, tau: np.ndarray,
                    cfg: DatasetConfig) -> np.ndarray:
    """Per-timestep feature rows for one window of kept frames."""
    q = np.atleast_2d(q)
    qd = np.atleast_2d(qd)
    tau = np.atleast_2d(tau)
    blocks = [q, qd]
    if cfg.include_torques:
        blocks.append(tau)
    if cfg.include_jacobian:
        blocks.append(np.stack([_jz_block(model, row) for row in q]))
    return np.concatenate(blocks, axis=1)


@dataclass
class FeatureMask:
    keep: np.ndarray                 # bool per pre-mask column
    names: list[str]                 # pre-mask column names
    notes: dict[str, str] = field(default_factory=dict)

    @property
    def kept_names(self) -> list[str]:
        return [n for n, k in zip(self.names, self.keep) if k]

    def apply(self, X: np.ndarray) -> np.ndarray:
        if X.shape[-1] != self.keep.shape[0]:
            raise ContractError(f"feature count {X.shape[-1]} does not match mask size {self.keep.shape[0]}")
        return X[..., self.keep]


def compute_feature_mask(X: np.ndarray, names: list[str], threshold: float = 1e-10) -> FeatureMask:
    """Keep columns whose sample standard deviation exceeds ``threshold``."""
    flat = X.reshape(-1, X.shape[-1])
    keep = flat.std(axis=0) > threshold
    if not keep.any():
        raise DegenerateDatasetError("every feature column is constant")
    notes = {name: PRUNE_NOTE for name, k in zip(names, keep) if not k}
    return FeatureMask(keep=keep, names=list(names), notes=notes)


def normalize_targets(params: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Min-max map each entry to [0, 1]; returns (normalized, constant_mask).

    Degenerate entries (lo == hi) normalize to 0 and are flagged constant.
    Values outside their declared range raise OutOfRangeError.
    """
    params = np.asarray(params, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    constant = hi <= lo
    span = np.where(constant, 1.0, hi - lo)
    if ((params < lo - 1e-12 * np.maximum(1.0, np.abs(lo)))
            | (params > hi + 1e-12 * np.maximum(1.0, np.abs(hi)))).any():
        bad = int(np.argmax((params < lo) | (params > hi)))
        raise OutOfRangeError(
            f"target {model_gen.PARAM_NAMES[bad] if bad < len(model_gen.PARAM_NAMES) else bad} "
            f"= {params[bad]} outside [{lo[bad]}, {hi[bad]}]")
    norm = np.where(constant, 0.0, (params - lo) / span)
    return norm, constant


def denormalize_targets(norm: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return np.where(hi <= lo, lo, lo + np.asarray(norm) * (hi - lo))


@dataclass
class SequenceSample:
    features: np.ndarray     # (seq_len, F)
    target: np.ndarray       # (P,)
    robot_id: int
    offset: int              # temporal offset of the source window (ticks)
    start_tick: int          # raw index of the first kept frame


@dataclass
class Dataset:
    config: DatasetConfig
    feature_mask: FeatureMask
    target_names: list[str]          # kept target names, in layout order
    target_lo: np.ndarray            # bounds for kept targets
    target_hi: np.ndarray
    train_X: np.ndarray              # (N, seq_len, F), standardized
    train_y: np.ndarray              # (N, P), min-max normalized
    train_meta: np.ndarray           # (N, 3): robot_id, offset, start_tick
    val_X: np.ndarray
    val_y: np.ndarray
    val_meta: np.ndarray
    feature_mean: np.ndarray = None  # train-split statistics used to standardize X
    feature_std: np.ndarray = None
    content_hash: str = ""
    cache_hit: bool = False

    @property
    def feature_names(self) -> list[str]:
        return self.feature_mask.kept_names

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if name == "train":
            return self.train_X, self.train_y, self.train_meta
        if name == "val":
            return self.val_X, self.val_y, self.val_meta
        raise ContractError(f"unknown split {name!r}")

    def samples(self, split: str = "train"):
        X, y, meta = self.split(split)
        for i in range(X.shape[0]):
            yield SequenceSample(features=X[i], target=y[i], robot_id=int(meta[i, 0]),
                                 offset=int(meta[i, 1]), start_tick=int(meta[i, 2]))


def prune_constant_features(ds: Dataset, threshold: float = 1e-10) -> tuple[Dataset, FeatureMask]:
    """Drop training-constant columns; reapply the same mask to validation."""
    if ds.train_X.size == 0:
        raise DegenerateDatasetError("dataset has no training samples")
    mask = compute_feature_mask(ds.train_X, ds.feature_names, threshold)
    combined_keep = ds.feature_mask.keep.copy()
    combined_keep[combined_keep] = mask.keep
    combined = FeatureMask(keep=combined_keep, names=ds.feature_mask.names,
                           notes={**ds.feature_mask.notes, **mask.notes})
    pruned = replace(ds, feature_mask=combined,
                     train_X=mask.apply(ds.train_X), val_X=mask.apply(ds.val_X))
    return pruned, mask


def split_robot_ids(ids, split_ratio: float, split_seed: int) -> tuple[list[int], list[int]]:
    """Deterministic split by robot id; never by sequence."""
    ids = sorted(int(i) for i in ids)
    if not 0 < split_ratio < 1:
        raise ConfigError("split_ratio must lie strictly between 0 and 1")
    rng = np.random.default_rng(split_seed)
    order = rng.permutation(len(ids))
    n_val = max(1, int(round(len(ids) * (1 - split_ratio))))
    if n_val >= len(ids):
        raise ConfigError(f"split_ratio {split_ratio} leaves no training robots for {len(ids)} ids")
    val = {ids[k] for k in order[:n_val]}
    return [i for i in ids if i not in val], sorted(val)


def dataset_content_hash(cfg: DatasetConfig, manifest_header: dict, log_meta: list[tuple[int, int]],
                         split_ratio: float, split_seed: int) -> str:
    payload = {
        "feature_layout": FEATURE_LAYOUT_VERSION,
        "config": asdict(cfg),
        "manifest": {k: manifest_header.get(k) for k in ("version", "param_layout", "ranges", "template")},
        "logs": sorted(log_meta),
        "split": {"ratio": split_ratio, "seed": split_seed},
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def build_dataset(logs: list[TrajectoryLog], manifest_header: dict, manifest_records: dict,
                  cfg: DatasetConfig, split_ratio: float = 0.9, split_seed: int = 0,
                  cache_dir=None) -> Dataset:
    """Materialize the train/val sequence dataset, with content-hash caching."""
    cfg.validate()
    logs = [log for log in logs if log.status is Status.OK]
    if not logs:
        raise DegenerateDatasetError("no OK logs to sample from")
    template = model_gen.template_from_dict(manifest_header["template"])
    ranges = model_gen.ranges_from_manifest(manifest_header)
    lo, hi = model_gen.param_bounds(template, ranges)

    log_meta = [(log.robot_id, log.n_frames) for log in logs]
    content = dataset_content_hash(cfg, manifest_header, log_meta, split_ratio, split_seed)
    cache_path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        cache_path = os.path.join(cache_dir, f"dataset_{content[:16]}.bin")
        if os.path.exists(cache_path):
            ds = load_dataset(cache_path)
            ds.cache_hit = True
            return ds

    probe = _probe_model(template)
    train_ids, val_ids = split_robot_ids({log.robot_id for log in logs}, split_ratio, split_seed)
    val_set = set(val_ids)

    target_norm: dict[int, np.ndarray] = {}
    const_mask = None
    for log in logs:
        record = manifest_records.get(log.robot_id)
        if record is None:
            raise ConfigError(f"robot {log.robot_id} missing from the manifest")
        norm, const = normalize_targets(record["params"], lo, hi)
        target_norm[log.robot_id] = norm
        const_mask = const if const_mask is None else const_mask

    keep_targets = ~const_mask
    if not keep_targets.any():
        raise DegenerateDatasetError("all targets are constant under the declared ranges")

    buckets = {"train": ([], [], []), "val": ([], [], [])}
    for log in logs:
        split = "val" if log.robot_id in val_set else "train"
        Xs, ys, metas = buckets[split]
        y = target_norm[log.robot_id][keep_targets]
        for window in offset_sample(log, cfg):
            feats = enrich_features(probe, log.q[window], log.qd[window], log.tau[window], cfg)
            Xs.append(feats)
            ys.append(y)
            metas.append((log.robot_id, int(window[0] % cfg.stride), int(window[0])))

    names = feature_names(cfg, template.n_joints)
    n_feat = len(names)

    def stack(bucket):
        Xs, ys, metas = bucket
        if not Xs:
            return (np.empty((0, cfg.seq_len, n_feat)), np.empty((0, int(keep_targets.sum()))),
                    np.empty((0, 3), dtype=np.int64))
        return np.stack(Xs), np.stack(ys), np.asarray(metas, dtype=np.int64)

    train_X, train_y, train_meta = stack(buckets["train"])
    val_X, val_y, val_meta = stack(buckets["val"])
    if train_X.shape[0] == 0 or val_X.shape[0] == 0:
        raise ConfigError("a split is empty; increase robots, episode length, or adjust the grid")

    mask = compute_feature_mask(train_X, names)
    train_X = mask.apply(train_X)
    val_X = mask.apply(val_X)
    # standardize with training-split statistics so no column dominates the
    # input projection; the same transform is applied to validation
    flat = train_X.reshape(-1, train_X.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    ds = Dataset(config=cfg, feature_mask=mask,
                 target_names=[n for n, k in zip(model_gen.PARAM_NAMES, keep_targets) if k],
                 target_lo=lo[keep_targets], target_hi=hi[keep_targets],
                 train_X=(train_X - mean) / std, train_y=train_y, train_meta=train_meta,
                 val_X=(val_X - mean) / std, val_y=val_y, val_meta=val_meta,
                 feature_mean=mean, feature_std=std,
                 content_hash=content)
    if cache_path is not None:
        save_dataset(cache_path, ds)
    return ds


# --------------------------------------------------------------------------
# Binary cache: JSON header (length-prefixed) + contiguous float64/int64 blocks

def save_dataset(path, ds: Dataset) -> None:
    header = {
        "version": _CACHE_VERSION,
        "content_hash": ds.content_hash,
        "config": asdict(ds.config),
        "feature_names": ds.feature_mask.names,
        "feature_keep": ds.feature_mask.keep.astype(int).tolist(),
        "feature_notes": ds.feature_mask.notes,
        "target_names": ds.target_names,
        "counts": {"train": int(ds.train_X.shape[0]), "val": int(ds.val_X.shape[0]),
                   "seq_len": int(ds.config.seq_len), "features": int(ds.train_X.shape[-1]),
                   "targets": int(ds.train_y.shape[-1])},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in (ds.target_lo, ds.target_hi, ds.feature_mean, ds.feature_std,
                    ds.train_X, ds.train_y, ds.val_X, ds.val_y):
            np.ascontiguousarray(arr, dtype="<f8").tofile(fh)
        for arr in (ds.train_meta, ds.val_meta):
            np.ascontiguousarray(arr, dtype="<i8").tofile(fh)
    os.replace(tmp, path)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        if fh.read(4) != _CACHE_MAGIC:
            raise ContractError(f"{path}: not a dataset cache file")
        (size,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(size))
        if header["version"] != _CACHE_VERSION:
            raise ContractError(f"{path}: unsupported cache version {header['version']}")
        counts = header["counts"]
        n_train, n_val = counts["train"], counts["val"]
        seq_len, n_feat, n_tgt = counts["seq_len"], counts["features"], counts["targets"]

        def read_f8(*shape):
            total = int(np.prod(shape)) if shape else 1
            return np.fromfile(fh, dtype="<f8", count=total).reshape(shape)

        target_lo = read_f8(n_tgt)
        target_hi = read_f8(n_tgt)
        feature_mean = read_f8(n_feat)
        feature_std = read_f8(n_feat)
        train_X = read_f8(n_train, seq_len, n_feat)
        train_y = read_f8(n_train, n_tgt)
        val_X = read_f8(n_val, seq_len, n_feat)
        val_y = read_f8(n_val, n_tgt)
        train_meta = np.fromfile(fh, dtype="<i8", count=n_train * 3).reshape(n_train, 3)
        val_meta = np.fromfile(fh, dtype="<i8", count=n_val * 3).reshape(n_val, 3)
    cfg = DatasetConfig(**header["config"])
    mask = FeatureMask(keep=np.asarray(header["feature_keep"], dtype=bool),
                       names=header["feature_names"], notes=header["feature_notes"])
    return Dataset(config=cfg, feature_mask=mask, target_names=header["target_names"],
                   target_lo=target_lo, target_hi=target_hi,
                   train_X=train_X, train_y=train_y, train_meta=train_meta,
                   val_X=val_X, val_y=val_y, val_meta=val_meta,
                   feature_mean=feature_mean, feature_std=feature_std,
                   content_hash=header["content_hash"])


def resample_log(log: TrajectoryLog, dt: float) -> TrajectoryLog:
    """Linearly interpolate a log onto a uniform grid of period ``dt``.

    The simulator already logs on an exact 1 ms grid, so this only matters
    for externally recorded logs whose clock does not align.
    """
    if dt <= 0:
        raise ConfigError("resample period must be positive")
    if log.n_frames < 2:
        return log
    t_new = np.arange(0.0, log.t[-1] + 0.5 * dt, dt)
    cols = {}
    for name in ("q", "qd", "tau"):
        src = getattr(log, name)
        cols[name] = np.stack([np.interp(t_new, log.t, src[:, j]) for j in range(src.shape[1])], axis=1)
    return replace_log(log, t=t_new, dt=dt, **cols)


def replace_log(log: TrajectoryLog, **kw) -> TrajectoryLog:
    fields = dict(robot_id=log.robot_id, dt=log.dt, t=log.t, q=log.q, qd=log.qd, tau=log.tau,
                  waypoints=log.waypoints, settled=log.settled, status=log.status)
    fields.update(kw)
    return TrajectoryLog(**fields)
