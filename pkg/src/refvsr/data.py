"""Triplet ingestion, synthetic triple-camera clips and aligned crop sampling.

Geometry (all cameras store frames of the same pixel size ``(h, w)``):

* the ultra-wide camera sees a ``4h x 4w`` world window and shrinks it 4x,
* the wide camera sees the centre half of that window and shrinks it 2x,
* the telephoto camera sees the centre quarter at native world resolution.

A ultra-wide pixel ``(y, x)`` therefore covers world pixels
``4y .. 4y+3`` (relative to the window), a wide pixel ``v`` starts at world
``h + 2v`` and a tele pixel ``u`` sits at world ``3h/2 + u``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .ops import _as_scale, resize_matrix

log = logging.getLogger(__name__)

CAMERAS = ("uw", "wide", "tele")
ZOOM = {"uw": 1, "wide": 2, "tele": 4}
STAGES = ("pretrain", "adapt")


def imresize(arr: np.ndarray, scale) -> np.ndarray:
    """Bicubic resize of the last two axes (same kernel as the network op)."""
    fr = _as_scale(scale)
    h, w = arr.shape[-2:]
    if fr == 1:
        return arr.copy()
    ho, wo = int(round(h * fr)), int(round(w * fr))
    mh = resize_matrix(h, ho, fr)
    mw = resize_matrix(w, wo, fr)
    return np.matmul(np.matmul(mh, arr.astype(np.float64)), mw.T)


@dataclass
class VideoTriplet:
    """Three equal-length (T, 3, H, W) float32 sequences in [0, 1]."""
    uw: np.ndarray
    wide: np.ndarray
    tele: np.ndarray
    world: np.ndarray | None = None
    offsets: np.ndarray | None = None  # (T, 2) world (y, x) of each uw window
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {c: getattr(self, c).shape for c in CAMERAS}
        if len({s for s in shapes.values()}) != 1:
            raise ValueError(f"camera sequences differ in shape: {shapes}")
        if self.uw.ndim != 4 or self.uw.shape[1] != 3:
            raise ValueError(f"expected (T, 3, H, W) frames, got {self.uw.shape}")

    @property
    def frames(self) -> int:
        return self.uw.shape[0]

    @property
    def size(self):
        return self.uw.shape[2:]

    def world_window(self, t: int, y: int = 0, x: int = 0, hh: int | None = None,
                     ww: int | None = None) -> np.ndarray:
        """World pixels of frame ``t`` starting at window-relative ``(y, x)``."""
        if self.world is None:
            raise ValueError("triplet carries no world image")
        h, w = self.size
        hh = 4 * h if hh is None else hh
        ww = 4 * w if ww is None else ww
        oy, ox = self.offsets[t]
        return self.world[:, oy + y:oy + y + hh, ox + x:ox + x + ww]


# ---------------------------------------------------------------- synthesis

def _value_noise(rng, shape, octaves: int = 6, base: int = 4) -> np.ndarray:
    h, w = shape
    out = np.zeros((3, h, w))
    amp = 1.0
    for o in range(octaves):
        cells = base * 2 ** o
        f = int(np.ceil(h / cells))
        gh, gw = int(np.ceil(h / f)) + 1, int(np.ceil(w / f)) + 1
        grid = rng.random((3, gh, gw))
        mh = resize_matrix(gh, gh * f, Fraction(f))[:h]
        mw = resize_matrix(gw, gw * f, Fraction(f))[:w]
        out += amp * np.matmul(np.matmul(mh, grid), mw.T)
        amp *= 0.55
    out -= out.min(axis=(1, 2), keepdims=True)
    out /= np.maximum(out.max(axis=(1, 2), keepdims=True), 1e-12)
    return out


def _paint_shapes(rng, img: np.ndarray, count: int) -> None:
    """Anti-aliased discs and rotated rectangles with a one-pixel soft edge."""
    _, h, w = img.shape
    scale = min(h, w)
    for _ in range(count):
        color = rng.random(3)
        alpha = rng.uniform(0.6, 1.0)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.01, 0.08) * scale
        kind = rng.integers(2)
        angle = rng.uniform(0, np.pi)
        aspect = rng.uniform(0.3, 1.0)
        ext = int(np.ceil(r * 1.5)) + 2
        y0, y1 = max(0, int(cy) - ext), min(h, int(cy) + ext + 1)
        x0, x1 = max(0, int(cx) - ext), min(w, int(cx) + ext + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1] + 0.5
        dy, dx = yy - cy, xx - cx
        if kind == 0:
            dist = np.hypot(dy, dx) - r
        else:
            u = np.abs(dx * np.cos(angle) + dy * np.sin(angle)) - r
            v = np.abs(-dx * np.sin(angle) + dy * np.cos(angle)) - r * aspect
            dist = np.maximum(u, v)
        cover = alpha * np.clip(0.5 - dist, 0.0, 1.0)
        patch = img[:, y0:y1, x0:x1]
        patch += cover * (color[:, None, None] - patch)


def render_world(rng, shape, shapes_per_megapixel: float = 120.0) -> np.ndarray:
    """World image in [0, 1], quantized to 8 bits so it round-trips through PNG."""
    img = 0.15 + 0.7 * _value_noise(rng, shape)
    count = max(1, int(round(shapes_per_megapixel * shape[0] * shape[1] / 1e6)))
    _paint_shapes(rng, img, count)
    return np.round(np.clip(img, 0, 1) * 255) / 255


def camera_path(rng, frames: int, amplitude: float) -> np.ndarray:
    """Smooth per-frame translation (T, 2) in ultra-wide pixels, bounded by ``amplitude``."""
    t = np.arange(frames) / max(frames - 1, 1)
    freq = rng.uniform(0.25, 0.75, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    return amplitude * np.sin(2 * np.pi * freq[None] * t[:, None] + phase[None])


def render_cameras(world: np.ndarray, offsets: np.ndarray, size) -> tuple:
    h, w = size
    uw, wide, tele = [], [], []
    for oy, ox in offsets:
        win = world[:, oy:oy + 4 * h, ox:ox + 4 * w]
        uw.append(imresize(win, 0.25))
        wide.append(imresize(win[:, h:3 * h, w:3 * w], 0.5))
        tele.append(win[:, 3 * h // 2:3 * h // 2 + h, 3 * w // 2:3 * w // 2 + w].copy())
    cast = lambda seq: np.clip(np.stack(seq), 0, 1).astype(np.float32)  # noqa: E731
    return cast(uw), cast(wide), cast(tele)


def synth_triplet(seed: int, frames: int = 8, size=(64, 96), motion: float = 2.0) -> VideoTriplet:
    """Render a synthetic clip with exact triple-camera zoom geometry.

    ``motion`` bounds the camera translation in ultra-wide pixels.  The
    world is ``4h x 4w`` plus a margin of ``ceil(4 * motion)`` world pixels
    on each side so that moving windows never leave it.
    """
    h, w = (int(s) for s in size)
    if h <= 0 or w <= 0 or h % 8 or w % 8:
        raise ValueError(f"frame size must be positive and divisible by 8, got {(h, w)}")
    if frames < 1:
        raise ValueError("frames must be >= 1")
    if motion < 0:
        raise ValueError("motion amplitude must be non-negative")
    rng = np.random.default_rng(seed)
    margin = int(np.ceil(4 * motion))
    world = render_world(rng, (4 * h + 2 * margin, 4 * w + 2 * margin))
    path = camera_path(rng, frames, motion)
    offsets = np.clip(np.rint(4 * path).astype(np.int64) + margin, 0, 2 * margin)
    uw, wide, tele = render_cameras(world, offsets, (h, w))
    meta = {"seed": seed, "motion": motion, "frames": frames, "height": h, "width": w,
            "margin": margin, "world_height": world.shape[1], "world_width": world.shape[2]}
    return VideoTriplet(uw, wide, tele, world.astype(np.float32), offsets, meta)


# ---------------------------------------------------------------- file I/O

def _to_u8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def save_image(path, frame: np.ndarray) -> None:
    Image.fromarray(_to_u8(frame)).save(path, format="PNG", optimize=False, compress_level=6)


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise ValueError(f"unreadable image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1) / 255.0


def write_frames(folder, frames) -> list:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = folder / f"{i:06d}.png"
        save_image(p, f)
        paths.append(p)
    return paths


def read_frames(folder) -> np.ndarray:
    folder = Path(folder)
    files = sorted(folder.glob("*.png"))
    if not files:
        raise ValueError(f"no frames in {folder}")
    idx = []
    for f in files:
        if not f.stem.isdigit():
            raise ValueError(f"unexpected file name {f.name} in {folder}")
        idx.append(int(f.stem))
    expected = list(range(len(files)))
    if idx != expected:
        missing = sorted(set(range(max(idx) + 1)) - set(idx))
        raise ValueError(f"{folder.name}: missing frame {missing[0]:06d}")
    frames = [load_image(f) for f in files]
    sizes = {fr.shape for fr in frames}
    if len(sizes) != 1:
        raise ValueError(f"{folder.name}: frames differ in size: {sorted(sizes)}")
    return np.stack(frames)


def write_meta(path, meta: dict, offsets=None) -> None:
    lines = [f"{k}={meta[k]}" for k in sorted(meta)]
    if offsets is not None:
        lines += [f"offset_{t:06d}={int(oy)},{int(ox)}" for t, (oy, ox) in enumerate(offsets)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path) -> tuple:
    meta, offsets = {}, {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed line {line!r}")
        if key.startswith("offset_"):
            oy, ox = value.split(",")
            offsets[int(key[7:])] = (int(oy), int(ox))
        else:
            meta[key] = _parse_scalar(value)
    off = np.array([offsets[t] for t in sorted(offsets)], dtype=np.int64) if offsets else None
    return meta, off


def _parse_scalar(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def write_sequence(triplet: VideoTriplet, clip_dir) -> Path:
    """Write ``<clip>/{uw,wide,tele}/%06d.png`` (+ ``world/`` and ``meta.txt`` if known)."""
    clip_dir = Path(clip_dir)
    for cam in CAMERAS:
        write_frames(clip_dir / cam, getattr(triplet, cam))
    if triplet.world is not None:
        write_frames(clip_dir / "world", [triplet.world])
    if triplet.meta or triplet.offsets is not None:
        write_meta(clip_dir / "meta.txt", triplet.meta, triplet.offsets)
    return clip_dir


def load_sequence(clip_dir) -> VideoTriplet:
    clip_dir = Path(clip_dir)
    if not clip_dir.is_dir():
        raise ValueError(f"clip directory {clip_dir} does not exist")
    seqs = {}
    for cam in CAMERAS:
        if not (clip_dir / cam).is_dir():
            raise ValueError(f"{clip_dir}: missing camera folder {cam}/")
        seqs[cam] = read_frames(clip_dir / cam)
    counts = {c: s.shape[0] for c, s in seqs.items()}
    if len(set(counts.values())) != 1:
        for cam in CAMERAS:
            if counts[cam] < max(counts.values()):
                raise ValueError(f"{cam}: missing frame {counts[cam]:06d} "
                                 f"(counts {counts})")
    sizes = {c: s.shape[2:] for c, s in seqs.items()}
    if len(set(sizes.values())) != 1:
        raise ValueError(f"cameras differ in frame size: {sizes}")
    world = offsets = None
    meta = {}
    if (clip_dir / "meta.txt").exists():
        meta, offsets = read_meta(clip_dir / "meta.txt")
    if (clip_dir / "world").is_dir():
        world = read_frames(clip_dir / "world")[0]
    return VideoTriplet(seqs["uw"], seqs["wide"], seqs["tele"], world, offsets, meta)


def gen_dataset(root, clips: int, frames: int, size, motion: float, seed: int) -> list:
    """Write ``clips`` synthetic clips as ``root/clip_%03d``; clip i uses seed ``seed + i``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    out = []
    for i in range(clips):
        tri = synth_triplet(seed + i, frames, size, motion)
        out.append(write_sequence(tri, root / f"clip_{i:03d}"))
    return out


def list_clips(root) -> list:
    root = Path(root)
    clips = sorted(p for p in root.iterdir() if p.is_dir() and (p / "uw").is_dir())
    if not clips:
        raise ValueError(f"no clips under {root}")
    return clips


# ---------------------------------------------------------------- crops

@dataclass(frozen=True)
class CropSpec:
    lr_size: int = 64
    jitter: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        if self.lr_size < 4 or self.lr_size % 4:
            raise ValueError(f"lr_size must be a positive multiple of 4, got {self.lr_size}")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")

    @property
    def ref_size(self) -> int:
        return 2 * self.lr_size

    @property
    def tele_size(self) -> int:
        return 4 * self.lr_size


@dataclass
class CropSample:
    """Geometrically corresponding crops of one frame.

    ``lr`` is the network input and ``ref`` its Ref input.  ``gt`` is the
    ultra-wide crop (pre-training) and ``ref_hr`` the native wide crop used
    by the fidelity loss; ``tele`` is the telephoto crop (adaptation).
    """
    lr: np.ndarray
    ref: np.ndarray
    gt: np.ndarray | None = None
    ref_hr: np.ndarray | None = None
    tele: np.ndarray | None = None
    uw: np.ndarray | None = None
    origin: tuple = (0, 0)


def crop_bounds(size, spec: CropSpec, stage: str):
    """Inclusive range of valid ultra-wide crop origins ``((ylo, yhi), (xlo, xhi))``.

    Pre-training crops must lie in the wide camera's FoV, adaptation crops
    in the telephoto FoV; the jitter margin is reserved on every side.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    h, w = size
    frac = 2 if stage == "pretrain" else 4
    s, j = spec.lr_size, spec.jitter
    out = []
    for n in (h, w):
        lo = n * (frac - 1) // (2 * frac)
        hi = lo + n // frac - s
        out.append((lo + j, hi - j))
    if out[0][0] > out[0][1] or out[1][0] > out[1][1]:
        cam = "wide" if stage == "pretrain" else "tele"
        raise ValueError(f"a {s}px crop with jitter {j} does not fit inside the {cam} FoV "
                         f"of a {h}x{w} frame")
    return tuple(out)


def sample_crop_triplet(triplet: VideoTriplet, t: int, spec: CropSpec, stage: str = "pretrain",
                        origin=None, rng=None) -> CropSample:
    """Corresponding crops of frame ``t`` at ultra-wide origin ``origin`` (y, x).

    The Ref (and tele) windows are shifted by an independent uniform jitter
    of up to ``spec.jitter`` ultra-wide pixels.
    """
    if not 0 <= t < triplet.frames:
        raise ValueError(f"frame index {t} out of range [0, {triplet.frames})")
    (ylo, yhi), (xlo, xhi) = crop_bounds(triplet.size, spec, stage)
    rng = rng if rng is not None else np.random.default_rng(spec.rng_seed)
    if origin is None:
        origin = (int(rng.integers(ylo, yhi + 1)), int(rng.integers(xlo, xhi + 1)))
    y0, x0 = origin
    if not (ylo <= y0 <= yhi and xlo <= x0 <= xhi):
        raise ValueError(f"crop origin {origin} lies outside the overlapped FoV "
                         f"(y in [{ylo}, {yhi}], x in [{xlo}, {xhi}])")
    jy, jx = (int(v) for v in rng.integers(-spec.jitter, spec.jitter + 1, size=2)) \
        if spec.jitter else (0, 0)
    h, w = triplet.size
    s = spec.lr_size
    uw = triplet.uw[t, :, y0:y0 + s, x0:x0 + s]
    # wide pixel v starts at world h + 2v, uw pixel y at world 4y
    wy, wx = 2 * (y0 + jy) - h // 2, 2 * (x0 + jx) - w // 2
    wide = triplet.wide[t, :, wy:wy + 2 * s, wx:wx + 2 * s]
    if stage == "pretrain":
        lr = imresize(uw, 0.25).astype(np.float32)
        ref = imresize(wide, 0.25).astype(np.float32)
        return CropSample(lr, ref, gt=uw.copy(), ref_hr=wide.copy(), origin=(y0, x0))
    ty, tx = 4 * (y0 + jy) - 3 * h // 2, 4 * (x0 + jx) - 3 * w // 2
    tele = triplet.tele[t, :, ty:ty + 4 * s, tx:tx + 4 * s]
    return CropSample(uw.copy(), wide.copy(), tele=tele.copy(), uw=uw.copy(), origin=(y0, x0))


def sample_sequence(triplet: VideoTriplet, spec: CropSpec, stage: str, length: int, rng) -> list:
    """``length`` consecutive frames cropped at one ultra-wide location."""
    if length > triplet.frames:
        raise ValueError(f"sequence length {length} exceeds clip length {triplet.frames}")
    start = int(rng.integers(0, triplet.frames - length + 1))
    (ylo, yhi), (xlo, xhi) = crop_bounds(triplet.size, spec, stage)
    origin = (int(rng.integers(ylo, yhi + 1)), int(rng.integers(xlo, xhi + 1)))
    return [sample_crop_triplet(triplet, start + i, spec, stage, origin, rng) for i in range(length)]


def stack_batch(samples_per_seq: list, attr: str) -> list:
    """Turn ``[seq][t]`` crop samples into a per-time list of (n, 3, h, w) arrays."""
    T = len(samples_per_seq[0])
    return [np.stack([getattr(seq[t], attr) for seq in samples_per_seq]) for t in range(T)]


def full_frame_inputs(triplet: VideoTriplet, stage: str = "pretrain"):
    """Network inputs for whole frames: ``(lr_seq, ref_seq)`` of (1, 3, h, w) arrays.

    Pre-training scale feeds the 4x-downscaled ultra-wide and wide frames;
    adaptation scale feeds them at native size.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    f = 0.25 if stage == "pretrain" else 1
    lr = [imresize(triplet.uw[t], f).astype(np.float32)[None] for t in range(triplet.frames)]
    ref = [imresize(triplet.wide[t], f).astype(np.float32)[None] for t in range(triplet.frames)]
    return lr, ref
