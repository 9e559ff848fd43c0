"""Checkpoint container: a directory with manifest.json plus one binary blob
per parameter block.

Blob format: magic "CDNG", version byte, dtype code, ndim, reserved byte,
ndim little-endian uint32 dims, then raw little-endian values. Parameters are
float32; the occupancy density cache is stored at 16-bit precision; grid
snapshots are packed bits. Per-branch subdirectories make the streaming story
concrete: base/ + grid/ + branchNNNN/ suffice to render chunk N.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .continual import ChunkSchedule, ModelRepo, TrainConfig, build_base_spatial, init_branch
from .errors import CheckpointFormatError
from .renderer import OccupancyGrid

MAGIC = b"CDNG"
BLOB_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f2"): 1,
                np.dtype("<f8"): 2, np.dtype("u1"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_blob(path, arr):
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise CheckpointFormatError(f"unsupported blob dtype {arr.dtype}")
    header = MAGIC + struct.pack("<BBBB", BLOB_VERSION, _DTYPE_CODES[dt],
                                 arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + arr.astype(dt, copy=False).tobytes())


def read_blob(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic in {path}")
    version, code, ndim, _ = struct.unpack("<BBBB", raw[4:8])
    if version != BLOB_VERSION:
        raise CheckpointFormatError(f"unsupported blob version {version} in {path}")
    shape = struct.unpack(f"<{ndim}I", raw[8:8 + 4 * ndim])
    dt = _CODE_DTYPES.get(code)
    if dt is None:
        raise CheckpointFormatError(f"unknown dtype code {code} in {path}")
    data = np.frombuffer(raw[8 + 4 * ndim:], dtype=dt)
    expected = int(np.prod(shape)) if ndim else data.size
    if data.size != expected:
        raise CheckpointFormatError(f"truncated blob {path}")
    return data.reshape(shape).copy()


def _sha256_bytes(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _block_files(repo):
    """(relpath, array, dtype) for every parameter block currently present."""
    out = []
    for name, arr in repo.base_spatial.named_arrays().items():
        out.append((f"base/{name.replace('/', '__')}.bin", arr, "<f4"))
    for k, br in enumerate(repo.branches):
        if br is None:
            continue
        for name, arr in br.named_arrays().items():
            out.append((f"branch{k:04d}/{name.replace('/', '__')}.bin", arr, "<f4"))
    return out


def save_checkpoint(repo, path):
    """Write (or refresh) the checkpoint directory; supports incremental
    per-chunk saves. Returns the directory path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    for rel, arr, dt in _block_files(repo):
        write_blob(root / rel, np.asarray(arr, dtype=dt))
        files[rel] = {"sha256": _sha256_bytes(root / rel),
                      "shape": list(arr.shape), "dtype": dt}
    write_blob(root / "grid/density.bin",
               repo.grid.density.astype(np.float16))
    files["grid/density.bin"] = {"sha256": _sha256_bytes(root / "grid/density.bin"),
                                 "shape": list(repo.grid.density.shape),
                                 "dtype": "<f2"}
    for k, bits in repo.grid_snapshots.items():
        rel = f"grid/snapshot{k:04d}.bin"
        write_blob(root / rel, np.packbits(bits.reshape(-1)))
        files[rel] = {"sha256": _sha256_bytes(root / rel),
                      "shape": list(bits.shape), "dtype": "packbits"}
    branches = []
    for k, br in enumerate(repo.branches):
        if br is not None:
            branches.append({"index": k, "frame_start": br.frame_start,
                             "frame_stop": br.frame_stop, "eta": br.eta})
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "cdngp-checkpoint",
        "config": repo.config.to_json(),
        "schedule": repo.schedule.to_json(),
        "aabb": repo.aabb.tolist(),
        "seed": repo.seed,
        "trained_branches": branches,
        "grid_snapshots": sorted(repo.grid_snapshots.keys()),
        "provenance": {k: v for k, v in repo.provenance.items()
                       if k != "chunk_metrics"},
        "files": files,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def _load_block_into(root, files, rel, target, strict):
    info = files.get(rel)
    if info is None:
        raise CheckpointFormatError(f"manifest has no entry for {rel}")
    path = root / rel
    if not path.exists():
        raise CheckpointFormatError(f"missing checkpoint file {path}")
    if strict and _sha256_bytes(path) != info["sha256"]:
        raise CheckpointFormatError(f"hash mismatch for {path}")
    arr = read_blob(path)
    if list(arr.shape) != list(target.shape):
        raise CheckpointFormatError(
            f"shape mismatch for {rel}: {arr.shape} vs {target.shape}")
    target[...] = arr.astype(target.dtype)


def load_checkpoint(path, strict=True):
    """Load a (possibly partial) checkpoint. Missing branch directories leave
    None placeholders; the repo reports exactly which chunk ranges are
    unrenderable when queried."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise CheckpointFormatError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("kind") != "cdngp-checkpoint":
        raise CheckpointFormatError(f"{mpath} is not a checkpoint manifest")
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint format version {manifest.get('format_version')}")
    config = TrainConfig.from_json(manifest["config"])
    schedule = ChunkSchedule.from_json(manifest["schedule"])
    files = manifest["files"]
    rng = np.random.default_rng(0)  # placeholder values, overwritten below
    base = build_base_spatial(config, rng)
    grid = OccupancyGrid.create(config.occ_resolution, np.asarray(manifest["aabb"]),
                                config.occ_decay, config.occ_threshold)
    repo = ModelRepo(config, schedule, base, grid, np.asarray(manifest["aabb"]),
                     manifest["seed"])
    for name, arr in base.named_arrays("").items():
        _load_block_into(root, files, f"base/{name.replace('/', '__')}.bin", arr, strict)
    # Grid density round-trips through float16 by design.
    info = files.get("grid/density.bin")
    if info is None:
        raise CheckpointFormatError("manifest has no entry for grid/density.bin")
    gpath = root / "grid/density.bin"
    if strict and _sha256_bytes(gpath) != info["sha256"]:
        raise CheckpointFormatError(f"hash mismatch for {gpath}")
    grid.density = read_blob(gpath).astype(np.float32)
    grid.refresh_bits()
    trained = {b["index"]: b for b in manifest["trained_branches"]}
    max_k = max(trained.keys(), default=-1)
    for k in range(max_k + 1):
        if k not in trained:
            repo.branches.append(None)
            continue
        branch = init_branch(k, schedule, None, config,
                             rng=np.random.default_rng(0), force_fresh=True)
        branch.eta = trained[k]["eta"]
        for name, arr in branch.named_arrays("").items():
            rel = f"branch{k:04d}/{name.replace('/', '__')}.bin"
            _load_block_into(root, files, rel, arr, strict)
        for arr in branch.named_arrays().values():
            arr.flags.writeable = False
        repo.branches.append(branch)
    for k in manifest.get("grid_snapshots", []):
        rel = f"grid/snapshot{k:04d}.bin"
        info = files.get(rel)
        packed = read_blob(root / rel)
        shape = tuple(info["shape"])
        bits = np.unpackbits(packed)[:int(np.prod(shape))].astype(bool)
        repo.grid_snapshots[k] = bits.reshape(shape)
    if repo.branches and repo.branches[0] is not None:
        for arr in base.named_arrays().values():
            arr.flags.writeable = False
    repo.provenance.update(manifest.get("provenance", {}))
    return repo
