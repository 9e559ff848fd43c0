"""Dataset model and synthetic-scene tooling: cameras, an analytic moving-blob
field with a dense-quadrature oracle renderer, dataset generation/loading with
a strict manifest, and PSNR/DSSIM image metrics.

The oracle renderer composites through the same volume_render code path as the
model renderer, so the two agree to quadrature error by construction.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.signal import convolve2d

from . import renderer
from .errors import (CheckpointFormatError, ConfigurationError, SceneSpecError)

DATASET_FORMAT_VERSION = 1


@dataclass
class Camera:
    """Pinhole camera; c2w maps camera coordinates (x right, y down, z forward)
    to world coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray  # [4, 4]
    view_id: int = 0

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")
        rot = self.c2w[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ConfigurationError("camera rotation is not orthonormal")

    @property
    def position(self):
        return self.c2w[:3, 3]

    @property
    def forward(self):
        return self.c2w[:3, 2]

    def to_json(self):
        return {"view_id": self.view_id, "fx": self.fx, "fy": self.fy,
                "cx": self.cx, "cy": self.cy, "width": self.width,
                "height": self.height, "c2w": self.c2w.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                   np.asarray(d["c2w"]), d["view_id"])


def look_at(position, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose looking from `position` at `target`."""
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    f /= np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, down, f, position
    return c2w


def arc_cameras(n_views, resolution, center=(0.5, 0.5, 0.5), radius=2.2,
                arc_degrees=80.0, row_offset=0.22, fov_degrees=40.0):
    """Cameras in (up to) two rows on an arc facing the scene center; view 0 is
    the center of the upper row and is flagged as the held-out view."""
    if n_views < 2:
        raise ConfigurationError("need at least 2 views")
    H = W = None
    if np.isscalar(resolution):
        H = W = int(resolution)
    else:
        H, W = int(resolution[0]), int(resolution[1])
    f = W / (2.0 * np.tan(np.radians(fov_degrees) / 2.0))
    center = np.asarray(center, dtype=np.float64)
    two_rows = n_views >= 6
    angles = np.radians(np.linspace(-arc_degrees / 2, arc_degrees / 2, n_views))
    # Put the held-out camera exactly at the arc center of the upper row.
    order = np.argsort(np.abs(angles), kind="stable")
    cams = []
    for rank, src in enumerate(order):
        a = angles[src]
        z_off = row_offset if (not two_rows or rank % 2 == 0) else -row_offset
        pos = center + np.array([radius * np.cos(a), radius * np.sin(a), z_off])
        cams.append(Camera(f, f, W / 2.0, H / 2.0, W, H,
                           look_at(pos, center), view_id=rank))
    return cams


@dataclass
class Blob:
    """A Gaussian density blob with a polynomial center path."""

    path: np.ndarray     # [k, 3] coefficients: center(t) = sum_j path[j] * t**j
    radius: float
    peak: float
    albedo: np.ndarray   # [3]

    def __post_init__(self):
        self.path = np.atleast_2d(np.asarray(self.path, dtype=np.float64))
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.radius <= 0 or self.peak < 0:
            raise ConfigurationError("blob radius must be > 0 and peak >= 0")

    def center(self, t):
        powers = np.power(float(t), np.arange(self.path.shape[0]))
        return powers @ self.path

    def to_json(self):
        return {"path": self.path.tolist(), "radius": self.radius,
                "peak": self.peak, "albedo": self.albedo.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(np.asarray(d["path"]), d["radius"], d["peak"],
                   np.asarray(d["albedo"]))


@dataclass
class SynthSceneSpec:
    """Analytic dynamic scene: moving and static Gaussian blobs in an AABB."""

    blobs: list
    bounds: np.ndarray = field(default_factory=lambda: np.array([[0.0] * 3, [1.0] * 3]))
    seed: int = 0

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        for b in self.blobs:
            for t in np.linspace(0.0, 1.0, 33):
                c = b.center(t)
                if (c < self.bounds[0]).any() or (c > self.bounds[1]).any():
                    raise SceneSpecError(f"blob path leaves scene bounds at t={t:.3f}")

    def to_json(self):
        return {"blobs": [b.to_json() for b in self.blobs],
                "bounds": self.bounds.tolist(), "seed": self.seed}

    @classmethod
    def from_json(cls, d):
        return cls([Blob.from_json(b) for b in d["blobs"]],
                   np.asarray(d["bounds"]), d.get("seed", 0))


def default_scene_spec(seed=0):
    """Two moving and two static blobs with distinct albedos."""
    rng = np.random.default_rng(seed)
    jit = lambda s: rng.uniform(-s, s, size=3)
    blobs = [
        Blob([[0.32, 0.36, 0.42] + jit(0.02)], 0.10, 26.0, [0.92, 0.28, 0.20]),
        Blob([[0.68, 0.62, 0.55] + jit(0.02)], 0.12, 20.0, [0.22, 0.42, 0.95]),
        Blob([[0.30, 0.62, 0.62] + jit(0.02), [0.30, -0.22, -0.10]],
             0.08, 30.0, [0.25, 0.90, 0.30]),
        Blob([[0.62, 0.30, 0.34] + jit(0.02), [-0.28, 0.24, 0.0],
              [0.08, 0.0, 0.18]], 0.075, 32.0, [0.95, 0.80, 0.22]),
    ]
    return SynthSceneSpec(blobs, seed=seed)


def oracle_field(spec, x, t):
    """Analytic field: sigma = sum_b peak * exp(-|x - c_b(t)|^2 / (2 r^2)),
    color = density-weighted average albedo (view-independent).

    Contributions beyond 6 radii (relative density < 2e-8) are dropped, which
    keeps dense-quadrature rendering fast without affecting the convergence
    gate.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    sigma = np.zeros(n)
    weighted = np.zeros((n, 3))
    for b in spec.blobs:
        c = b.center(t)
        d2 = (x[:, 0] - c[0]) ** 2
        d2 += (x[:, 1] - c[1]) ** 2
        d2 += (x[:, 2] - c[2]) ** 2
        near = d2 < 36.0 * b.radius * b.radius
        if not near.any():
            continue
        s = b.peak * np.exp(d2[near] / (-2.0 * b.radius ** 2))
        sigma[near] += s
        weighted[near] += s[:, None] * b.albedo
    color = np.zeros((n, 3))
    lit = sigma > 1e-12
    color[lit] = weighted[lit] / sigma[lit, None]
    return sigma, color


def oracle_render(spec, camera, t, substeps=512, background=0.0, chunk_rays=2048):
    """Dense-quadrature reference image: `substeps` uniform samples per ray
    composited through the shared volume_render path."""
    if substeps < 512:
        raise ConfigurationError("oracle_render requires substeps >= 512")
    H, W = camera.height, camera.width
    uu, vv = np.meshgrid(np.arange(W), np.arange(H))
    pixels = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    img = np.empty((H * W, 3))
    for lo in range(0, H * W, chunk_rays):
        hi = min(lo + chunk_rays, H * W)
        rays = renderer.generate_rays(camera, pixels[lo:hi], aabb=spec.bounds)
        img[lo:hi] = _oracle_render_rays(spec, rays, t, substeps, background)
    return np.clip(img, 0.0, 1.0).reshape(H, W, 3)


def _oracle_render_rays(spec, rays, t, substeps, background):
    n = len(rays)
    spans = rays.t_far - rays.t_near
    frac = (np.arange(substeps) + 0.5) / substeps
    ts = rays.t_near[:, None] + frac[None, :] * spans[:, None]
    pos = rays.origins[:, None, :] + ts[:, :, None] * rays.dirs[:, None, :]
    sigma, color = oracle_field(spec, pos.reshape(-1, 3), t)
    deltas = np.repeat(spans / substeps, substeps)
    live = np.repeat(spans > 0, substeps)
    ray_ids = np.repeat(np.arange(n, dtype=np.int32), substeps)
    out = renderer.volume_render(sigma[live], color[live], np.maximum(deltas[live], 1e-12),
                                 ray_ids[live], n)
    return out.color + out.trans_final[:, None] * background


def check_oracle_convergence(spec, camera, times, substeps=512):
    """Doubling substeps must change no probe pixel by >= 1/255."""
    for t in times:
        a = oracle_render(spec, camera, t, substeps)
        b = oracle_render(spec, camera, t, 2 * substeps)
        worst = np.abs(a - b).max()
        if worst >= 1.0 / 255.0:
            raise SceneSpecError(
                f"oracle not converged at t={t}: max pixel change {worst:.5f}")


def _sha256(path):
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


FRAME_PATTERN = "frames/v{view:02d}/f{frame:04d}.png"


def generate_dataset(spec, n_views, n_frames, resolution, seed, out_dir,
                     substeps=512, fps=30, convergence_probe=True):
    """Render a synthetic multi-view dataset to disk and write its manifest.

    Frames are 8-bit PNGs; determinism is guaranteed for a fixed seed/spec.
    Returns the dataset directory path.
    """
    out_dir = Path(out_dir)
    cams = arc_cameras(n_views, resolution)
    if convergence_probe:
        check_oracle_convergence(spec, cams[0], [0.0, 1.0], substeps)
    hashes = {}
    for cam in cams:
        for f in range(n_frames):
            t = f / max(n_frames - 1, 1)
            img = oracle_render(spec, cam, t, substeps)
            rel = FRAME_PATTERN.format(view=cam.view_id, frame=f)
            path = out_dir / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            arr = np.round(img * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(path)
            hashes[rel] = _sha256(path)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": "cdngp-dataset",
        "resolution": [cams[0].height, cams[0].width],
        "n_frames": n_frames,
        "fps": fps,
        "held_out_view": 0,
        "views": [c.to_json() for c in cams],
        "frame_pattern": FRAME_PATTERN,
        "normalization": {"aabb": spec.bounds.tolist()},
        "quantization": "uint8",
        "scene_spec": spec.to_json(),
        "seed": seed,
        "oracle_substeps": substeps,
        "hashes": hashes,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out_dir


class _ResidencyTracker:
    """Counts distinct timestamps decoded at once (the accessible-data budget)."""

    def __init__(self):
        self._counts = {}
        self.peak = 0

    def acquire(self, frames):
        for f in frames:
            self._counts[f] = self._counts.get(f, 0) + 1
        self.peak = max(self.peak, len(self._counts))

    def release(self, frames):
        for f in frames:
            self._counts[f] -= 1
            if self._counts[f] == 0:
                del self._counts[f]

    @property
    def resident(self):
        return len(self._counts)


class ChunkFrames:
    """Decoded frames for one chunk: images [T, V, H, W, 3] float32 for the
    given views. Release with close() (or use as a context manager)."""

    def __init__(self, dataset, frames, views):
        self.frames = list(frames)
        self.views = list(views)
        self._dataset = dataset
        dataset.residency.acquire(self.frames)
        self.images = np.stack([
            np.stack([dataset._decode(v, f) for v in self.views])
            for f in self.frames
        ])
        self._open = True

    def close(self):
        if self._open:
            self._dataset.residency.release(self.frames)
            self._open = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SceneDataset:
    """Lazy-decoding view over a dataset directory."""

    def __init__(self, root, manifest):
        self.root = Path(root)
        self.manifest = manifest
        self.cameras = [Camera.from_json(c) for c in manifest["views"]]
        self.n_frames = manifest["n_frames"]
        self.held_out_view = manifest["held_out_view"]
        self.aabb = np.asarray(manifest["normalization"]["aabb"], dtype=np.float64)
        self.residency = _ResidencyTracker()
        self._ray_cache = {}

    @property
    def n_views(self):
        return len(self.cameras)

    @property
    def train_views(self):
        return [c.view_id for c in self.cameras if c.view_id != self.held_out_view]

    def camera(self, view):
        return self.cameras[view]

    def frame_path(self, view, frame):
        return self.root / self.manifest["frame_pattern"].format(view=view, frame=frame)

    def _decode(self, view, frame):
        path = self.frame_path(view, frame)
        if not path.exists():
            raise CheckpointFormatError(f"missing frame file {path}")
        try:
            arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        except Exception as exc:
            raise CheckpointFormatError(f"cannot decode frame file {path}: {exc}") from exc
        return arr

    def frame(self, view, frame):
        """Decode a single frame (tracked against the residency budget)."""
        self.residency.acquire([frame])
        try:
            return self._decode(view, frame)
        finally:
            self.residency.release([frame])

    def load_chunk(self, frames, views=None):
        views = self.train_views if views is None else views
        return ChunkFrames(self, frames, views)

    def median_images(self, views, max_frames):
        """Per-view median over an evenly strided frame subset (stays within
        the chunk residency budget)."""
        k = min(max_frames, self.n_frames)
        if k % 2 == 0 and k > 1:
            k -= 1
        frames = np.unique(np.linspace(0, self.n_frames - 1, k).astype(int)).tolist()
        with self.load_chunk(frames, views=views) as chunk:
            return np.median(chunk.images, axis=0)  # [V, H, W, 3]

    def view_rays(self, view):
        """Cached full-image ray fields for one camera (origins/dirs/tn/tf)."""
        if view not in self._ray_cache:
            cam = self.cameras[view]
            uu, vv = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
            pixels = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
            self._ray_cache[view] = renderer.generate_rays(cam, pixels, aabb=self.aabb)
        return self._ray_cache[view]


def load_dataset(path):
    """Open a dataset directory; rejects unknown manifest versions."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise CheckpointFormatError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("kind") != "cdngp-dataset":
        raise CheckpointFormatError(f"{mpath} is not a dataset manifest")
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise CheckpointFormatError(
            f"unsupported dataset format version {manifest.get('format_version')}")
    return SceneDataset(root, manifest)


def psnr(a, b):
    """10 * log10(1 / MSE) for images in [0, 1]; capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return 99.0
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_channel(a, b, window, c1, c2):
    mu_a = convolve2d(a, window, mode="valid")
    mu_b = convolve2d(b, window, mode="valid")
    var_a = convolve2d(a * a, window, mode="valid") - mu_a ** 2
    var_b = convolve2d(b * b, window, mode="valid") - mu_b ** 2
    cov = convolve2d(a * b, window, mode="valid") - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def dssim(a, b, window_size=11, sigma=1.5):
    """(1 - SSIM) / 2 with an 11x11 Gaussian window (sigma 1.5), standard SSIM
    constants, channels averaged. Symmetric by construction."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < window_size or a.shape[1] < window_size:
        raise ConfigurationError("images smaller than the SSIM window")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    window = _gaussian_window(window_size, sigma)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = [_ssim_channel(a[:, :, c], b[:, :, c], window, c1, c2)
            for c in range(a.shape[2])]
    return float((1.0 - np.mean(vals)) / 2.0)


def write_metrics_csv(path, rows):
    """Write (frame, view, psnr, dssim) rows; the header records the DSSIM
    convention used."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write("# dssim = (1 - ssim)/2, 11x11 gaussian window sigma=1.5\n")
        writer = csv.writer(f)
        writer.writerow(["frame", "view", "psnr", "dssim"])
        writer.writerows(rows)
    return path
