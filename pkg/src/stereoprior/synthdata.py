"""Procedural rectified stereo scenes with exact depth and a water model.

Scenes are unions of planes ray-cast from two pinhole cameras that differ by
a horizontal baseline. Albedo is a function of the surface point, so both
views see identical colours at corresponding pixels. Water degradation is
applied per view with that view's own depth.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imageio
from .scale_align import Calibration

BASELINES_M = (0.04, 0.10, 0.20, 0.40)
LAYOUTS = ("fronto_planes", "slanted_plane", "ramp", "boxes")
MAX_DEPTH_M = 50.0
SAMPLE_FORMAT_VERSION = 1


class SceneRejected(ValueError):
    """The spec cannot be rendered or the result fails the quality gate."""


@dataclass
class WaterSpec:
    beta_rgb: tuple[float, float, float] = (0.0, 0.0, 0.0)
    veil_rgb: tuple[float, float, float] = (0.1, 0.3, 0.35)
    particle_density: float = 0.0


@dataclass
class SceneSpec:
    layout: str = "boxes"
    depth_range: tuple[float, float] = (1.0, 4.0)
    baseline_m: float = 0.10
    focal_px: float = 160.0
    resolution: tuple[int, int] = (160, 96)  # (W, H)
    num_objects: int = 3
    texture_period_px: float = 12.0
    texture_octaves: int = 3
    water: WaterSpec = field(default_factory=WaterSpec)
    min_texture_var: float = 2e-4

    def validate(self) -> None:
        z0, z1 = self.depth_range
        if not (0 < z0 < z1 <= MAX_DEPTH_M):
            raise ValueError(f"depth_range must satisfy 0 < z_min < z_max <= {MAX_DEPTH_M}")
        if not any(np.isclose(self.baseline_m, b) for b in BASELINES_M):
            raise ValueError(f"baseline {self.baseline_m} not in {BASELINES_M}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        w, h = self.resolution
        if w % 32 or h % 32:
            raise ValueError("resolution must be divisible by 32")
        if min(self.water.beta_rgb) < 0:
            raise ValueError("attenuation coefficients must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        water = WaterSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("water", {}).items()})
        for key in ("depth_range", "resolution"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(water=water, **d)


@dataclass
class Sample:
    I_L: np.ndarray
    I_R: np.ndarray
    gt_depth: np.ndarray
    gt_disparity: np.ndarray
    calib: Calibration
    seed: int
    spec: SceneSpec | None = None


# ---------------------------------------------------------------- texture


def _hash(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    """Integer lattice hash to uniform [0, 1)."""
    with np.errstate(over="ignore"):
        h = ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        h ^= iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        h ^= np.uint64(salt & 0xFFFFFFFFFFFFFFFF) * np.uint64(0x165667B19E3779F9)
        h ^= h >> np.uint64(31)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(29)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(u: np.ndarray, v: np.ndarray, salt: int) -> np.ndarray:
    iu, iv = np.floor(u), np.floor(v)
    fu, fv = u - iu, v - iv
    fu = fu * fu * (3 - 2 * fu)
    fv = fv * fv * (3 - 2 * fv)
    iu = iu.astype(np.int64)
    iv = iv.astype(np.int64)
    a = _hash(iu, iv, salt)
    b = _hash(iu + 1, iv, salt)
    c = _hash(iu, iv + 1, salt)
    d = _hash(iu + 1, iv + 1, salt)
    return (a * (1 - fu) + b * fu) * (1 - fv) + (c * (1 - fu) + d * fu) * fv


def albedo(u: np.ndarray, v: np.ndarray, period: float, octaves: int, salt: int, base: np.ndarray) -> np.ndarray:
    """``[3, ...]`` colour from fractal value noise in surface coordinates."""
    out = []
    for ch in range(3):
        acc = np.zeros_like(u)
        amp, norm, p = 1.0, 0.0, period
        for o in range(octaves):
            acc += amp * value_noise(u / p, v / p, salt * 131 + ch * 17 + o)
            norm += amp
            amp *= 0.75
            p /= 2.0
        out.append(acc / norm)
    noise = np.stack(out)
    lum = noise.mean(0, keepdims=True)
    tex = 0.6 * lum + 0.4 * noise
    return np.clip(base[:, None, None] * (0.25 + 1.5 * tex), 0.0, 1.0) if u.ndim == 2 else tex


# ---------------------------------------------------------------- geometry


@dataclass
class _Plane:
    normal: np.ndarray  # n . P = c
    c: float
    t1: np.ndarray
    t2: np.ndarray
    salt: int
    base: np.ndarray
    tex_scale: float
    bounds: tuple[float, float, float, float] | None = None  # X/Y box for cards


def _plane_from_disparity(a: float, b: float, c0: float, focal: float, fb: float) -> tuple[np.ndarray, float]:
    """World plane whose left-view disparity is ``a x' + b y' + c0`` (centred pixels)."""
    n = np.array([a * focal, b * focal, c0])
    return n, fb


def _tangents(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = n / np.linalg.norm(n)
    ref = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    t1 = np.cross(ref, n)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return t1, t2


def _raycast(planes: list[_Plane], cam_x: float, spec: SceneSpec, period: float, octaves: int):
    w, h = spec.resolution
    f = spec.focal_px
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    rx, ry = (xs - cx) / f, (ys - cy) / f
    depth = np.full((h, w), np.inf)
    color = np.zeros((3, h, w))
    origin = np.array([cam_x, 0.0, 0.0])
    for pl in planes:
        denom = pl.normal[0] * rx + pl.normal[1] * ry + pl.normal[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (pl.c - pl.normal @ origin) / denom
        X = cam_x + t * rx
        Y = t * ry
        ok = np.isfinite(t) & (t > 0)
        if pl.bounds is not None:
            x0, x1, y0, y1 = pl.bounds
            ok &= (X >= x0) & (X <= x1) & (Y >= y0) & (Y <= y1)
        closer = ok & (t < depth)
        if not closer.any():
            continue
        P = np.stack([X, Y, t])
        u = np.tensordot(pl.t1, P, axes=1) * pl.tex_scale
        v = np.tensordot(pl.t2, P, axes=1) * pl.tex_scale
        col = albedo(u, v, period, octaves, pl.salt, pl.base)
        depth = np.where(closer, t, depth)
        color = np.where(closer[None], col, color)
    return depth, color


def _build_planes(spec: SceneSpec, rng: np.random.Generator) -> list[_Plane]:
    w, h = spec.resolution
    f = spec.focal_px
    fb = f * spec.baseline_m
    z0, z1 = spec.depth_range
    d_lo, d_hi = fb / z1, fb / z0
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    tex_scale = f / (0.5 * (z0 + z1))
    planes: list[_Plane] = []

    def base_color():
        return rng.uniform(0.35, 1.0, size=3)

    def add_plane(n, c, bounds=None, tex=tex_scale):
        t1, t2 = _tangents(n)
        planes.append(_Plane(n, c, t1, t2, int(rng.integers(1 << 30)), base_color(), tex, bounds))

    layout = spec.layout
    if layout in ("fronto_planes", "boxes"):
        add_plane(np.array([0.0, 0.0, 1.0]), z1, tex=f / z1)
    elif layout == "slanted_plane":
        # disparity grows towards the bottom of the image (floor-like)
        span = rng.uniform(0.3, 0.8) * (d_hi - d_lo)
        top = rng.uniform(d_lo, d_hi - span)
        b = span / (h - 1)
        a = rng.uniform(-0.1, 0.1) * span / (w - 1)
        c0 = top + b * cy + abs(a) * cx
        add_plane(*_plane_from_disparity(a, b, c0, f, fb))
    elif layout == "ramp":
        span = rng.uniform(0.3, 0.8) * (d_hi - d_lo)
        left = rng.uniform(d_lo, d_hi - span)
        sign = rng.choice([-1.0, 1.0])
        a = sign * span / (w - 1)
        c0 = left + span / 2.0
        add_plane(*_plane_from_disparity(a, 0.0, c0, f, fb))

    if layout == "fronto_planes":
        for _ in range(spec.num_objects):
            d = rng.uniform(d_lo, d_hi)
            z = fb / d
            x_a, x_b = np.sort(rng.uniform(0, w, size=2))
            if x_b - x_a < 8:
                x_b = min(x_a + 8, w)
            add_plane(
                np.array([0.0, 0.0, 1.0]), z,
                bounds=((x_a - cx) * z / f, (x_b - cx) * z / f, -1e6, 1e6), tex=f / z,
            )
    elif spec.num_objects and layout != "fronto_planes":
        for _ in range(spec.num_objects):
            d = rng.uniform(d_lo + 0.3 * (d_hi - d_lo), d_hi)
            z = fb / d
            bw, bh = rng.uniform(0.15, 0.4) * w, rng.uniform(0.2, 0.5) * h
            x_a, y_a = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
            add_plane(
                np.array([0.0, 0.0, 1.0]), z,
                bounds=((x_a - cx) * z / f, (x_a + bw - cx) * z / f, (y_a - cy) * z / f, (y_a + bh - cy) * z / f),
                tex=f / z,
            )
    return planes


# ---------------------------------------------------------------- water


def degrade_underwater(
    img: np.ndarray, depth: np.ndarray, water: WaterSpec, particles: np.ndarray | None = None
) -> np.ndarray:
    """Per-channel attenuation towards the veil colour, optional particles, clamp."""
    beta = np.asarray(water.beta_rgb, dtype=np.float64)
    if np.any(beta < 0):
        raise ValueError("attenuation coefficients must be non-negative")
    if np.any(~(depth > 0)):
        raise ValueError("depth must be positive")
    veil = np.asarray(water.veil_rgb, dtype=np.float64)
    trans = np.exp(-beta[:, None, None] * depth[None])
    out = img * trans + veil[:, None, None] * (1 - trans)
    if particles is not None:
        out = np.maximum(out, particles)
    return np.clip(out, 0.0, 1.0)


def _particle_layer(spec: SceneSpec, rng: np.random.Generator, cam_x: float, surface_depth: np.ndarray, pts: np.ndarray) -> np.ndarray:
    w, h = spec.resolution
    f = spec.focal_px
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    layer = np.zeros((3, h, w))
    for X, Y, Z, bright in pts:
        x = int(round(f * (X - cam_x) / Z + cx))
        y = int(round(f * Y / Z + cy))
        if 0 <= x < w and 0 <= y < h and Z < surface_depth[y, x]:
            layer[:, y, x] = np.maximum(layer[:, y, x], bright)
    return layer


# ---------------------------------------------------------------- scenes


def gen_scene(spec: SceneSpec, seed: int) -> Sample:
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE7E]))
    planes = _build_planes(spec, rng)
    period, octaves = spec.texture_period_px, spec.texture_octaves
    depth_l, col_l = _raycast(planes, 0.0, spec, period, octaves)
    depth_r, col_r = _raycast(planes, spec.baseline_m, spec, period, octaves)
    for dep in (depth_l, depth_r):
        if not np.all(np.isfinite(dep)) or np.any(dep <= 0) or np.any(dep > MAX_DEPTH_M):
            raise SceneRejected("geometry leaves pixels without a valid surface in range")

    w, h = spec.resolution
    n_particles = int(round(spec.water.particle_density * w * h))
    z0, z1 = spec.depth_range
    pts = []
    for _ in range(n_particles):
        Z = rng.uniform(0.5 * z0, z1)
        X = (rng.uniform(0, w) - (w - 1) / 2.0) * Z / spec.focal_px
        Y = (rng.uniform(0, h) - (h - 1) / 2.0) * Z / spec.focal_px
        pts.append((X, Y, Z, rng.uniform(0.7, 1.0)))
    part_l = _particle_layer(spec, rng, 0.0, depth_l, pts) if pts else None
    part_r = _particle_layer(spec, rng, spec.baseline_m, depth_r, pts) if pts else None
    img_l = degrade_underwater(col_l, depth_l, spec.water, part_l)
    img_r = degrade_underwater(col_r, depth_r, spec.water, part_r)

    if texture_variance(img_l) < spec.min_texture_var:
        raise SceneRejected("insufficient texture")
    calib = Calibration(f=spec.focal_px, b=spec.baseline_m)
    return Sample(
        I_L=img_l, I_R=img_r, gt_depth=depth_l, gt_disparity=calib.fb / depth_l,
        calib=calib, seed=int(seed), spec=spec,
    )


def texture_variance(img: np.ndarray, k: int = 5) -> float:
    """Mean local (k x k) variance of the grey image."""
    g = img.mean(0)
    pad = k // 2
    gp = np.pad(g, pad, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(gp, (k, k))
    return float(win.var(axis=(-1, -2)).mean())


# ---------------------------------------------------------------- distributions


@dataclass
class DataConfig:
    width: int = 160
    height: int = 96
    focal_px: float = 160.0
    baselines: tuple[float, ...] = BASELINES_M
    layouts: tuple[str, ...] = LAYOUTS
    disparity_range_px: tuple[float, float] = (4.0, 40.0)
    num_objects: tuple[int, int] = (1, 3)
    attenuation_range: tuple[float, float] = (0.05, 0.6)  # beta * mean depth
    channel_attenuation: tuple[float, float, float] = (1.0, 0.45, 0.3)
    veil_rgb: tuple[float, float, float] = (0.1, 0.3, 0.35)
    particle_density: tuple[float, float] = (0.0, 0.002)
    texture_period_px: float = 12.0
    train_count: int = 256
    val_fraction: float = 0.2

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def sample_spec(rng: np.random.Generator, cfg: DataConfig) -> SceneSpec:
    baseline = float(cfg.baselines[int(rng.integers(len(cfg.baselines)))])
    layout = str(cfg.layouts[int(rng.integers(len(cfg.layouts)))])
    fb = cfg.focal_px * baseline
    d_lo, d_hi = cfg.disparity_range_px
    z_min, z_max = fb / d_hi, min(fb / d_lo, MAX_DEPTH_M)
    z_mean = 0.5 * (z_min + z_max)
    k = rng.uniform(*cfg.attenuation_range)
    beta = tuple(float(k * c / z_mean) for c in cfg.channel_attenuation)
    water = WaterSpec(
        beta_rgb=beta,
        veil_rgb=tuple(float(np.clip(v + rng.uniform(-0.05, 0.05), 0, 1)) for v in cfg.veil_rgb),
        particle_density=float(rng.uniform(*cfg.particle_density)),
    )
    return SceneSpec(
        layout=layout,
        depth_range=(float(z_min), float(z_max)),
        baseline_m=baseline,
        focal_px=cfg.focal_px,
        resolution=(cfg.width, cfg.height),
        num_objects=int(rng.integers(cfg.num_objects[0], cfg.num_objects[1] + 1)),
        texture_period_px=cfg.texture_period_px,
        water=water,
    )


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def gen_random_scene(cfg: DataConfig, seed: int, max_attempts: int = 20) -> Sample:
    """Draw a spec from ``cfg`` and render it, retrying rejected draws."""
    for attempt in range(max_attempts):
        s = sample_seed(seed, attempt)
        spec = sample_spec(np.random.default_rng(s), cfg)
        try:
            return gen_scene(spec, s)
        except SceneRejected:
            continue
    raise SceneRejected(f"no acceptable scene after {max_attempts} attempts (seed {seed})")


def generate_dataset(out_dir: str | Path, count: int, seed: int, cfg: DataConfig) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        sample = gen_random_scene(cfg, sample_seed(seed, i))
        paths.append(write_sample(out_dir / f"scene_{i:05d}", sample))
    return paths


# ---------------------------------------------------------------- disk format


def write_sample(path: str | Path, sample: Sample) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    imageio.write_ppm(path / "left.ppm", sample.I_L)
    imageio.write_ppm(path / "right.ppm", sample.I_R)
    imageio.write_pfm(path / "depth.pfm", sample.gt_depth)
    imageio.write_pfm(path / "disparity.pfm", sample.gt_disparity)
    meta = {
        "format_version": SAMPLE_FORMAT_VERSION,
        "seed": sample.seed,
        "calib": {"f": sample.calib.f, "b": sample.calib.b},
        "spec": asdict(sample.spec) if sample.spec is not None else None,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return path


def read_sample(path: str | Path) -> Sample:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    depth_file = path / "depth.pfm"
    gt_depth = imageio.read_pfm(depth_file).astype(np.float64) if depth_file.exists() else None
    disp_file = path / "disparity.pfm"
    gt_disp = imageio.read_pfm(disp_file).astype(np.float64) if disp_file.exists() else None
    spec = SceneSpec.from_dict(meta["spec"]) if meta.get("spec") else None
    return Sample(
        I_L=np.moveaxis(imageio.read_ppm(path / "left.ppm"), -1, 0).astype(np.float64) / 255.0,
        I_R=np.moveaxis(imageio.read_ppm(path / "right.ppm"), -1, 0).astype(np.float64) / 255.0,
        gt_depth=gt_depth,
        gt_disparity=gt_disp,
        calib=Calibration(**meta["calib"]),
        seed=int(meta["seed"]),
        spec=spec,
    )


def list_samples(data_dir: str | Path) -> list[Path]:
    return sorted(p for p in Path(data_dir).iterdir() if (p / "meta.json").exists())
