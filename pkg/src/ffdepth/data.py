"""Procedural scene dataset with exact depth, a shifted "real" domain, and a
coarse-depth teacher.

Scenes are layered primitives (rectangles, ellipses, thin bars) in front of a
ramped background plane; per-pixel depth is the minimum over covering
primitives, so occlusion ordering is exact by construction. Shading ties
luminance monotonically to depth (near is bright), with mild texture and
per-primitive chroma on top, which makes depth inferable from RGB.

The "real" domain reuses the same generator under a different random stream
and then corrupts RGB only (blur, sensor noise, strong per-channel color
jitter). Its exact depth is still written to disk: training must never use it
(real samples are supervised by the teacher alone), but evaluation reads it as
hidden ground truth so domain-level claims can be measured quantitatively.

The teacher is a degraded oracle: block-mean downsampling by a coarseness
factor, a small blur at the coarse scale, bilinear upsampling, plus smooth
noise. It keeps global depth ordering and destroys thin structures, the two
properties the t=-1 supervision mechanism needs.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .codec import CodecConfig, DepthMap, PixelImage, encode_depth, encode_image
from .objective import TrainBatch
from .pfm import read_pfm, write_pfm

_DOMAIN_CODE = {"synthetic": 0, "real": 1}

# luminance coding of depth: near (0.1) -> 1.0, far (1.0) -> 0.15
_DEPTH_NEAR, _DEPTH_FAR = 0.1, 1.0
_MIN_DEPTH_SPREAD = 0.05
_MAX_RESAMPLE_ATTEMPTS = 20


@dataclass(frozen=True)
class CorruptionConfig:
    noise_sigma: float = 0.03
    blur_radius: float = 1.0
    color_jitter: float = 0.3


@dataclass(frozen=True)
class TeacherConfig:
    coarseness: float = 4.0
    noise_amp: float = 0.01


@dataclass(frozen=True)
class SceneGenConfig:
    image_size: int = 64
    num_primitives: tuple = (6, 16)
    texture_strength: float = 0.08
    corruption: CorruptionConfig = CorruptionConfig()
    teacher: TeacherConfig = TeacherConfig()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "num_primitives", tuple(int(n) for n in self.num_primitives))
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        lo, hi = self.num_primitives
        if not (1 <= lo <= hi):
            raise ValueError(f"bad num_primitives range {self.num_primitives}")
        if self.texture_strength < 0:
            raise ValueError("texture_strength must be >= 0")


@dataclass(frozen=True)
class Primitive:
    kind: str                      # rect | ellipse | bar
    depth: float
    geometry: tuple                # rect/bar: (x0, y0, x1, y1) inclusive ints; ellipse: (cx, cy, rx, ry)
    chroma: tuple

    def covers(self, x, y):
        """Containment test; works on scalars and numpy grids alike."""
        if self.kind in ("rect", "bar"):
            x0, y0, x1, y1 = self.geometry
            return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
        cx, cy, rx, ry = self.geometry
        return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0


@dataclass
class SceneSample:
    id: str
    domain: str                    # synthetic | real
    rgb: PixelImage
    true_depth: DepthMap           # exact generator depth; hidden GT for the real domain
    teacher_depth: DepthMap | None = None   # real domain only
    resample_attempts: int = 0

    @property
    def depth_gt(self) -> DepthMap | None:
        """Training supervision depth: present only for the synthetic domain."""
        return self.true_depth if self.domain == "synthetic" else None


def _background(rng, size: int) -> np.ndarray:
    top = rng.uniform(0.75, 1.0)
    bottom = rng.uniform(0.45, top - 0.15)
    tilt = rng.uniform(-0.05, 0.05)
    ys = np.linspace(0.0, 1.0, size)[:, None]
    xs = np.linspace(0.0, 1.0, size)[None, :]
    return top + (bottom - top) * ys + tilt * xs


def _draw_primitive(rng, size: int) -> Primitive:
    # size distribution skews small so scenes carry fine structure that a
    # coarse teacher cannot represent
    kind = rng.choice(["rect", "ellipse", "bar"], p=[0.3, 0.25, 0.45])
    depth = float(rng.uniform(0.12, 0.72))
    chroma = tuple(rng.uniform(-0.06, 0.06, size=3))
    if kind == "rect":
        w = rng.uniform(0.10, 0.55) * size
        h = rng.uniform(0.10, 0.55) * size
        x0 = int(rng.uniform(-0.1 * size, size - 0.5 * w))
        y0 = int(rng.uniform(-0.1 * size, size - 0.5 * h))
        geom = (max(0, x0), max(0, y0),
                min(size - 1, x0 + int(w)), min(size - 1, y0 + int(h)))
    elif kind == "ellipse":
        rx = rng.uniform(0.05, 0.22) * size
        ry = rng.uniform(0.05, 0.22) * size
        cx = rng.uniform(0.1, 0.9) * size
        cy = rng.uniform(0.1, 0.9) * size
        geom = (cx, cy, rx, ry)
    else:
        thickness = int(rng.integers(1, 5))
        length = int(rng.uniform(0.3, 0.95) * size)
        if rng.random() < 0.5:      # horizontal
            y0 = int(rng.integers(2, size - 2 - thickness))
            x0 = int(rng.integers(0, size - length))
            geom = (x0, y0, x0 + length - 1, y0 + thickness - 1)
        else:                       # vertical
            x0 = int(rng.integers(2, size - 2 - thickness))
            y0 = int(rng.integers(0, size - length))
            geom = (x0, y0, x0 + thickness - 1, y0 + length - 1)
    return Primitive(kind=kind, depth=depth, geometry=geom, chroma=chroma)


def _build_scene_spec(cfg: SceneGenConfig, index: int, domain: str, attempt: int = 0):
    """Draws the primitive list and background for (cfg, index, domain, attempt)."""
    rng = np.random.default_rng(
        (cfg.seed, _DOMAIN_CODE[domain], int(index), attempt, 0x5CE4E)
    )
    size = cfg.image_size
    bg = _background(rng, size)
    bg_chroma = tuple(rng.uniform(-0.06, 0.06, size=3))
    lo, hi = cfg.num_primitives
    n = int(rng.integers(lo, hi + 1))
    prims = [_draw_primitive(rng, size) for _ in range(n)]
    return bg, bg_chroma, prims, rng


def _depth_to_lum(depth: np.ndarray) -> np.ndarray:
    span = _DEPTH_FAR - _DEPTH_NEAR
    return np.clip(1.0 - 0.85 * (depth - _DEPTH_NEAR) / span, 0.0, 1.0)


def _smooth_field(rng, size: int, grid: int = 8) -> np.ndarray:
    coarse = rng.standard_normal((grid, grid))
    tau = ndimage.zoom(coarse, size / grid, order=1, mode="nearest", grid_mode=True)
    return tau / max(1e-9, np.abs(tau).max())


def gen_scene(cfg: SceneGenConfig, index: int, domain: str = "synthetic") -> SceneSample:
    if domain not in _DOMAIN_CODE:
        raise ValueError(f"unknown domain {domain!r}")
    for attempt in range(_MAX_RESAMPLE_ATTEMPTS):
        sample = _render_scene(cfg, index, domain, attempt)
        if sample is not None:
            sample.resample_attempts = attempt
            return sample
    raise RuntimeError(
        f"scene (seed={cfg.seed}, index={index}) degenerate after "
        f"{_MAX_RESAMPLE_ATTEMPTS} attempts"
    )


def _render_scene(cfg, index, domain, attempt) -> SceneSample | None:
    size = cfg.image_size
    bg, bg_chroma, prims, rng = _build_scene_spec(cfg, index, domain, attempt)

    ys, xs = np.mgrid[0:size, 0:size]
    depth = bg.copy()
    winner = np.full((size, size), -1, dtype=np.int64)
    for k, prim in enumerate(prims):
        mask = prim.covers(xs, ys) & (prim.depth < depth)
        depth[mask] = prim.depth
        winner[mask] = k

    lo, hi = np.percentile(depth, [2.0, 98.0])
    if hi - lo < _MIN_DEPTH_SPREAD:
        return None                 # degenerate: flat scene, caller resamples

    lum = _depth_to_lum(depth)
    if cfg.texture_strength > 0:
        lum = np.clip(lum * (1.0 + cfg.texture_strength * _smooth_field(rng, size)), 0.0, 1.0)

    chroma_map = np.empty((3, size, size))
    for c in range(3):
        chroma_map[c] = bg_chroma[c]
        for k, prim in enumerate(prims):
            chroma_map[c][winner == k] = prim.chroma[c]

    rgb = 2.0 * np.clip(lum[None] + chroma_map, 0.0, 1.0) - 1.0

    if domain == "real":
        rgb = _corrupt(rgb, cfg.corruption, rng)

    sid = f"{domain}-{cfg.seed}-{index:06d}"
    return SceneSample(
        id=sid,
        domain=domain,
        rgb=PixelImage(rgb),
        true_depth=DepthMap(depth, np.ones((size, size), dtype=bool)),
    )


def _corrupt(rgb: np.ndarray, cor: CorruptionConfig, rng) -> np.ndarray:
    j = cor.color_jitter
    gains = 1.0 + rng.uniform(-j, j, size=3)
    offsets = rng.uniform(-j / 2, j / 2, size=3)
    out = rgb
    if cor.blur_radius > 0:
        out = ndimage.gaussian_filter(out, sigma=(0, cor.blur_radius, cor.blur_radius),
                                      mode="nearest")
    if cor.noise_sigma > 0:
        out = out + cor.noise_sigma * rng.standard_normal(out.shape)
    out = out * gains[:, None, None] + offsets[:, None, None]
    return np.clip(out, -1.0, 1.0)


def teacher_pseudolabel(sample: SceneSample, coarseness: float, noise_amp: float = 0.01) -> DepthMap:
    """Coarse but globally accurate pseudo-label from the hidden exact depth."""
    if coarseness < 1:
        raise ValueError(f"coarseness must be >= 1, got {coarseness}")
    depth = sample.true_depth.data
    h, w = depth.shape
    rng = np.random.default_rng((0x7EAC4, zlib.crc32(sample.id.encode())))

    if coarseness == 1:
        coarse = depth.copy()
        noise_shape = depth.shape
        zoom_back = None
    else:
        f = float(coarseness)
        fi = int(round(f))
        if abs(f - fi) < 1e-9 and h % fi == 0 and w % fi == 0:
            blocks = depth.reshape(h // fi, fi, w // fi, fi).mean(axis=(1, 3))
        else:
            blocks = ndimage.zoom(depth, 1.0 / f, order=1, mode="nearest", grid_mode=True)
        blocks = ndimage.gaussian_filter(blocks, sigma=0.5, mode="nearest")
        zoom_back = (h / blocks.shape[0], w / blocks.shape[1])
        coarse = ndimage.zoom(blocks, zoom_back, order=1, mode="nearest", grid_mode=True)
        noise_shape = blocks.shape

    if noise_amp > 0:
        noise = rng.standard_normal(noise_shape)
        if zoom_back is not None:
            noise = ndimage.zoom(noise, zoom_back, order=1, mode="nearest", grid_mode=True)
        coarse = coarse + noise_amp * noise

    return DepthMap(coarse, np.ones_like(coarse, dtype=bool))


def gen_dataset(cfg: SceneGenConfig, synthetic_count: int, real_count: int) -> list[SceneSample]:
    """Synthetic + real samples; real samples get their teacher label attached."""
    samples = [gen_scene(cfg, i, "synthetic") for i in range(synthetic_count)]
    for i in range(real_count):
        s = gen_scene(cfg, i, "real")
        s.teacher_depth = teacher_pseudolabel(
            s, cfg.teacher.coarseness, cfg.teacher.noise_amp
        )
        samples.append(s)
    return samples


def config_hash(cfg: SceneGenConfig) -> str:
    return hashlib.sha256(
        json.dumps(asdict(cfg), sort_keys=True).encode()
    ).hexdigest()[:16]


@dataclass(frozen=True)
class ManifestRow:
    id: str
    domain: str
    rgb_path: Path
    depth_path: Path | None
    teacher_path: Path | None


def write_png(path, img: PixelImage) -> None:
    arr = np.clip((img.data + 1.0) / 2.0, 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def read_png(path) -> PixelImage:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return PixelImage(arr.transpose(2, 0, 1) / 255.0 * 2.0 - 1.0)


def write_dataset(samples, out_dir, cfg: SceneGenConfig | None = None) -> Path:
    """Writes rgb/<id>.png, depth/<id>.pfm, teacher/<id>.pfm and manifest.txt.

    The depth PFM holds the exact generator depth for both domains; for real
    samples it is evaluation-only hidden GT (the manifest's teacher column is
    the training supervision for that domain).
    """
    out = Path(out_dir)
    for sub in ("rgb", "depth", "teacher"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    if cfg is not None:
        lines.append(f"# config_hash={config_hash(cfg)}")
    for s in samples:
        rgb_rel = f"rgb/{s.id}.png"
        depth_rel = f"depth/{s.id}.pfm"
        try:
            write_png(out / rgb_rel, s.rgb)
            write_pfm(out / depth_rel, s.true_depth.data.astype(np.float32))
            if s.teacher_depth is not None:
                teacher_rel = f"teacher/{s.id}.pfm"
                write_pfm(out / teacher_rel, s.teacher_depth.data.astype(np.float32))
            else:
                teacher_rel = "-"
        except OSError as e:
            raise OSError(f"failed writing sample {s.id} under {out}: {e}") from e
        lines.append("\t".join([s.id, s.domain, rgb_rel, depth_rel, teacher_rel]))
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path) -> tuple[list[ManifestRow], str | None]:
    path = Path(path)
    base = path.parent
    rows = []
    chash = None
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if "config_hash=" in line:
                chash = line.split("config_hash=", 1)[1].strip()
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}: malformed manifest line {line!r}")
        sid, domain, rgb_rel, depth_rel, teacher_rel = parts
        rows.append(ManifestRow(
            id=sid,
            domain=domain,
            rgb_path=base / rgb_rel,
            depth_path=None if depth_rel == "-" else base / depth_rel,
            teacher_path=None if teacher_rel == "-" else base / teacher_rel,
        ))
    return rows, chash


def load_depth(path) -> DepthMap:
    data, _ = read_pfm(path)
    if data.ndim != 2:
        raise ValueError(f"{path}: expected grayscale depth PFM")
    return DepthMap(data.astype(np.float64))


class BatchStream:
    """Deterministic half-synthetic / half-real latent batch stream.

    batch(i) is a pure function of (manifest, batch_size, codec config, seed):
    each domain runs its own per-epoch permutation sequence, so any batch index
    can be recomputed without iterating from the start. Encoded latents are
    cached in memory (float32) after the first touch.
    """

    def __init__(self, rows, batch_size: int, codec_cfg: CodecConfig, seed: int,
                 dtype=torch.float32):
        if batch_size < 2 or batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 2, got {batch_size}")
        self.rows = list(rows)
        self.batch_size = batch_size
        self.codec_cfg = codec_cfg
        self.seed = int(seed)
        self.dtype = dtype
        self.by_domain = {
            "synthetic": [r for r in self.rows if r.domain == "synthetic"],
            "real": [r for r in self.rows if r.domain == "real"],
        }
        if not self.by_domain["synthetic"]:
            raise ValueError("manifest has no synthetic samples")
        self._latents: dict[str, np.ndarray] = {}
        self._perm_cache: dict[tuple, np.ndarray] = {}

    def _perm(self, domain: str, epoch: int) -> np.ndarray:
        key = (domain, epoch)
        if key not in self._perm_cache:
            n = len(self.by_domain[domain])
            rng = np.random.default_rng((self.seed, _DOMAIN_CODE[domain], epoch, 0xB47C4))
            self._perm_cache[key] = rng.permutation(n)
            if len(self._perm_cache) > 8:
                self._perm_cache.pop(next(iter(self._perm_cache)))
        return self._perm_cache[key]

    def _rows_for(self, domain: str, batch_index: int, half: int) -> list[ManifestRow]:
        rows = self.by_domain[domain]
        n = len(rows)
        start = batch_index * half
        picked = []
        for p in range(start, start + half):
            perm = self._perm(domain, p // n)
            picked.append(rows[perm[p % n]])
        return picked

    def _rgb_latent(self, row: ManifestRow) -> np.ndarray:
        key = f"rgb:{row.id}"
        if key not in self._latents:
            z = encode_image(read_png(row.rgb_path), self.codec_cfg)
            self._latents[key] = z.astype(np.float32)
        return self._latents[key]

    def _sup_latent(self, row: ManifestRow) -> np.ndarray:
        """Supervision latent: GT depth for synthetic rows, teacher for real rows."""
        key = f"sup:{row.id}"
        if key not in self._latents:
            if row.domain == "synthetic":
                if row.depth_path is None:
                    raise ValueError(f"synthetic sample {row.id} lacks a depth path")
                d = load_depth(row.depth_path)
            else:
                if row.teacher_path is None:
                    raise ValueError(f"real sample {row.id} lacks a teacher path")
                d = load_depth(row.teacher_path)
            self._latents[key] = encode_depth(d, self.codec_cfg).astype(np.float32)
        return self._latents[key]

    def batch(self, i: int) -> TrainBatch:
        if not self.by_domain["real"]:
            raise ValueError("half/half batches need real samples in the manifest")
        half = self.batch_size // 2
        syn_rows = self._rows_for("synthetic", i, half)
        real_rows = self._rows_for("real", i, half)
        return TrainBatch(
            syn_rgb=torch.from_numpy(np.stack([self._rgb_latent(r) for r in syn_rows])).to(self.dtype),
            syn_depth=torch.from_numpy(np.stack([self._sup_latent(r) for r in syn_rows])).to(self.dtype),
            real_rgb=torch.from_numpy(np.stack([self._rgb_latent(r) for r in real_rows])).to(self.dtype),
            real_teacher=torch.from_numpy(np.stack([self._sup_latent(r) for r in real_rows])).to(self.dtype),
        )

    def image_batch(self, i: int, batch_size: int | None = None) -> torch.Tensor:
        """Synthetic-domain RGB latents only, for diffusion pretraining."""
        size = batch_size or self.batch_size
        rows = self.by_domain["synthetic"]
        n = len(rows)
        start = i * size
        picked = []
        for p in range(start, start + size):
            rng = np.random.default_rng((self.seed, 7, p // n, 0xB47C4))
            perm_key = ("pre", p // n)
            if perm_key not in self._perm_cache:
                self._perm_cache[perm_key] = rng.permutation(n)
            picked.append(rows[self._perm_cache[perm_key][p % n]])
        return torch.from_numpy(
            np.stack([self._rgb_latent(r) for r in picked])
        ).to(self.dtype)


def batch_iterator(manifest_path, batch_size: int, codec_cfg: CodecConfig, seed: int):
    """Infinite deterministic stream of TrainBatch from a manifest file."""
    rows, _ = read_manifest(manifest_path)
    stream = BatchStream(rows, batch_size, codec_cfg, seed)
    i = 0
    while True:
        yield stream.batch(i)
        i += 1
