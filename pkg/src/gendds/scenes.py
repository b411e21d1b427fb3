"""Procedural driving scenes, the rule-based tagger, and corpus manifests.

A scene is viewed from a fixed roadside camera: sky and a streetscape
silhouette above the horizon, a verge, then three traffic lanes whose ground
line gets nearer toward the bottom of the frame.  Vehicles drive along their
lane at a constant per-lane velocity and wrap around horizontally, so the
vehicle count of a clip never changes between frames.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

WEATHERS = ("sunny", "cloudy", "foggy", "rainy", "snowy")
TRAFFIC_LEVELS = ("light", "moderate", "heavy", "very heavy")
STREETSCAPES = ("city", "rural", "field", "mountain", "highway")
BASE_TAGS = ("outdoors", "road", "scenery", "sky")
VEHICLES_PER_LEVEL = {"light": (0, 1), "moderate": (2, 3), "heavy": (4, 6), "very heavy": (7, 9)}


def traffic_tag(level: str) -> str:
    return f"{level} traffic"


def reference_tags() -> list[str]:
    return [*BASE_TAGS, *WEATHERS, *(traffic_tag(t) for t in TRAFFIC_LEVELS), *STREETSCAPES]


@dataclass(frozen=True)
class SceneSpec:
    weather: str
    traffic: str
    streetscape: str
    seed: int = 0
    frames: int = 8
    resolution: int = 32

    def __post_init__(self):
        if self.weather not in WEATHERS:
            raise ConfigurationError(f"unknown weather {self.weather!r}")
        if self.traffic not in TRAFFIC_LEVELS:
            raise ConfigurationError(f"unknown traffic level {self.traffic!r}")
        if self.streetscape not in STREETSCAPES:
            raise ConfigurationError(f"unknown streetscape {self.streetscape!r}")
        if self.frames < 1 or self.resolution < 16 or self.resolution % 4:
            raise ConfigurationError("need frames >= 1 and a resolution >= 16 divisible by 4")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**{k: d[k] for k in ("weather", "traffic", "streetscape", "seed", "frames", "resolution")})


def auto_tag(scene) -> list[str]:
    """Tags for a spec (or anything carrying one as ``.spec``)."""
    spec = getattr(scene, "spec", scene)
    return [*BASE_TAGS, spec.weather, traffic_tag(spec.traffic), spec.streetscape]


def attributes_from_tags(tags) -> dict:
    """Recover (weather, traffic, streetscape) from a tag list; missing ones are None."""
    tags = set(tags)
    out = {"weather": None, "traffic": None, "streetscape": None}
    for w in WEATHERS:
        if w in tags:
            out["weather"] = w
    for t in TRAFFIC_LEVELS:
        if traffic_tag(t) in tags:
            out["traffic"] = t
    for s in STREETSCAPES:
        if s in tags:
            out["streetscape"] = s
    return out


# -- rendering ---------------------------------------------------------------------------

_SKY = {
    "sunny": ((0.33, 0.56, 0.90), (0.62, 0.78, 0.96)),
    "cloudy": ((0.52, 0.54, 0.58), (0.68, 0.69, 0.71)),
    "foggy": ((0.76, 0.77, 0.79), (0.82, 0.83, 0.84)),
    "rainy": ((0.30, 0.32, 0.37), (0.45, 0.47, 0.52)),
    "snowy": ((0.78, 0.80, 0.85), (0.88, 0.89, 0.92)),
}
_HORIZON = {"city": 0.40, "rural": 0.42, "field": 0.38, "mountain": 0.45, "highway": 0.40}
_VERGE = {
    "city": (0.62, 0.62, 0.60),
    "rural": (0.30, 0.55, 0.22),
    "field": (0.80, 0.70, 0.30),
    "mountain": (0.42, 0.36, 0.26),
    "highway": (0.40, 0.48, 0.30),
}
_CAR_COLORS = (
    (0.85, 0.12, 0.10), (0.12, 0.25, 0.80), (0.92, 0.92, 0.90), (0.10, 0.10, 0.12),
    (0.95, 0.80, 0.10), (0.60, 0.62, 0.66), (0.10, 0.55, 0.25),
)
# far, middle, near lane: share of road height, sprite height and width at 32 px
_LANE_SHARE = (0.24, 0.34, 0.42)
_CAR_SIZE = ((3, 4), (4, 6), (5, 8))
_CAR_GAP = (1, 2, 2)


@dataclass
class Vehicle:
    lane: int
    x0: float
    velocity: float
    color: tuple

    def x_at(self, frame: int, width: int) -> float:
        return (self.x0 + self.velocity * frame) % width


@dataclass
class RenderedClip:
    spec: SceneSpec
    frames: np.ndarray          # [F, H, W, 3] uint8
    depths: np.ndarray          # [F, H, W] float in [0, 1], 1 = nearest
    vehicles: list = field(default_factory=list)
    layout: dict = field(default_factory=dict)

    def vehicle_positions(self, frame: int) -> list[int]:
        """Rendered left edge of each vehicle sprite in ``frame``."""
        w = self.spec.resolution
        return [int(math.floor(v.x_at(frame, w) + 0.5)) % w for v in self.vehicles]


def _layout(spec: SceneSpec) -> dict:
    r = spec.resolution
    s = r / 32.0
    horizon = int(round(_HORIZON[spec.streetscape] * r))
    road_top = horizon + max(1, int(round(2 * s)))
    road_h = r - road_top
    bounds, top = [], road_top
    for i, share in enumerate(_LANE_SHARE):
        bottom = r if i == len(_LANE_SHARE) - 1 else top + max(2, int(round(share * road_h)))
        bounds.append((top, bottom))
        top = bottom
    sizes = [(max(2, int(round(h * s))), max(3, int(round(w * s)))) for h, w in _CAR_SIZE]
    gaps = [max(1, int(round(g * s))) for g in _CAR_GAP]
    return {"horizon": horizon, "road_top": road_top, "lanes": bounds, "car_sizes": sizes, "gaps": gaps}


def _ground_depth(layout: dict, r: int) -> np.ndarray:
    """Per-row depth of the ground plane; sky rows are 0 (infinitely far)."""
    hz = layout["horizon"]
    rows = np.arange(r, dtype=np.float64)
    depth = np.where(rows >= hz, (rows - hz + 1) / (r - hz + 1), 0.0)
    return depth


def _vehicle_depth(layout: dict, r: int, bottom_row: int) -> float:
    hz = layout["horizon"]
    return (bottom_row - hz + 1.5) / (r - hz + 1)


def _place_vehicles(spec: SceneSpec, layout: dict, rng) -> list[Vehicle]:
    lo, hi = VEHICLES_PER_LEVEL[spec.traffic]
    n = int(rng.integers(lo, hi + 1))
    r = spec.resolution
    capacity = [max(1, r // (w + g)) for (_, w), g in zip(layout["car_sizes"], layout["gaps"])]
    slots = [slot for lane, cap in enumerate(capacity) for slot in [(lane, k) for k in range(cap)]]
    chosen = rng.choice(len(slots), size=n, replace=False) if n else []
    speeds = rng.uniform(0.5, 2.0, size=3) * np.array([-1.0, 1.0, -1.0]) * (r / 32.0)
    phase = rng.uniform(0, r, size=3)
    vehicles = []
    for idx in sorted(int(i) for i in chosen):
        lane, k = slots[idx]
        x0 = (phase[lane] + k * r / capacity[lane]) % r
        color = _CAR_COLORS[int(rng.integers(len(_CAR_COLORS)))]
        vehicles.append(Vehicle(lane, float(x0), float(speeds[lane]), color))
    return vehicles


def _fill(img, y0, y1, x0, x1, color):
    h, w = img.shape[:2]
    y0, y1 = max(0, y0), min(h, y1)
    x0, x1 = max(0, x0), min(w, x1)
    if y0 < y1 and x0 < x1:
        img[y0:y1, x0:x1] = color


def _draw_background(img, depth, spec: SceneSpec, layout: dict, rng):
    r = spec.resolution
    s = r / 32.0
    hz = layout["horizon"]
    top, bottom = (np.array(c) for c in _SKY[spec.weather])
    ramp = np.linspace(0.0, 1.0, max(hz, 1))[:, None, None]
    img[:hz] = top * (1 - ramp) + bottom * ramp
    far = 0.5 / (r - hz + 1)

    def silhouette(y0, x0, x1, color):
        _fill(img, y0, hz, x0, x1, color)
        depth[max(0, y0):hz, max(0, x0):min(r, x1)] = far

    if spec.streetscape == "city":
        x = int(rng.integers(0, 3))
        while x < r:
            bw = int(rng.integers(3, 7) * s)
            bh = int(rng.integers(4, 11) * s)
            shade = rng.uniform(0.35, 0.65)
            color = np.array([shade, shade * rng.uniform(0.9, 1.05), shade * rng.uniform(0.85, 1.1)])
            silhouette(hz - bh, x, x + bw, color)
            for wy in range(hz - bh + 1, hz - 1, 2):
                for wx in range(x + 1, min(x + bw - 1, r), 2):
                    if rng.random() < 0.5:
                        img[wy, wx] = (0.95, 0.85, 0.45)
            x += bw + int(rng.integers(0, 2))
    elif spec.streetscape == "rural":
        phase = rng.uniform(0, 2 * np.pi)
        for x in range(r):
            hill = int(round((1.5 + 1.5 * np.sin(phase + x * 0.35 / s)) * s))
            silhouette(hz - hill, x, x + 1, (0.25, 0.48, 0.20))
        for _ in range(int(rng.integers(2, 5))):
            tx = int(rng.integers(0, r))
            th = int(rng.integers(3, 6) * s)
            silhouette(hz - th, tx, tx + max(1, int(2 * s)), (0.10, 0.30, 0.10))
        hx = int(rng.integers(2, r - 6))
        silhouette(hz - int(3 * s), hx, hx + int(4 * s), (0.75, 0.70, 0.60))
        silhouette(hz - int(4 * s), hx, hx + int(4 * s) - 1, (0.60, 0.15, 0.12))
        _fill(img, hz - int(3 * s), hz, hx, hx + int(4 * s), (0.75, 0.70, 0.60))
    elif spec.streetscape == "field":
        if rng.random() < 0.7:
            tx = int(rng.integers(0, r - 2))
            silhouette(hz - int(4 * s), tx, tx + max(1, int(3 * s)), (0.15, 0.35, 0.12))
        for y in range(hz, layout["road_top"]):
            if (y - hz) % 2 == 0:
                img[y, :] = (0.70, 0.60, 0.22)
    elif spec.streetscape == "mountain":
        for _ in range(int(rng.integers(2, 4))):
            cx = rng.uniform(0, r)
            peak = rng.uniform(0.55, 0.95) * hz
            half = rng.uniform(0.25, 0.5) * r
            shade = rng.uniform(0.35, 0.55)
            for x in range(r):
                height = peak * (1 - abs(x - cx) / half)
                if height >= 1:
                    y0 = int(round(hz - height))
                    silhouette(y0, x, x + 1, (shade * 0.8, shade * 0.85, shade))
                    cap = max(1, int(round(0.2 * height)))
                    if height > 0.6 * hz:
                        img[y0:y0 + cap, x] = (0.93, 0.94, 0.96)
    elif spec.streetscape == "highway":
        sx = int(rng.integers(2, r - 10))
        sw = int(7 * s)
        silhouette(hz - int(6 * s), sx, sx + sw, (0.05, 0.45, 0.20))
        _fill(img, hz - int(3 * s), hz, sx + 1, sx + 2, (0.45, 0.45, 0.45))
        _fill(img, hz - int(3 * s), hz, sx + sw - 2, sx + sw - 1, (0.45, 0.45, 0.45))
        depth[hz - int(3 * s):hz, sx:sx + sw] = far

    img[hz:layout["road_top"]] = np.where(
        img[hz:layout["road_top"]].sum(axis=-1, keepdims=True) > 0, img[hz:layout["road_top"]], 0)
    if spec.streetscape != "field":
        img[hz:layout["road_top"]] = _VERGE[spec.streetscape]
    else:
        rows = np.arange(hz, layout["road_top"])
        img[rows[(rows - hz) % 2 == 1]] = _VERGE["field"]
    if spec.streetscape == "highway":
        img[layout["road_top"] - 1] = (0.70, 0.70, 0.72)
        img[layout["road_top"] - 1, ::3] = (0.35, 0.35, 0.35)


def _draw_road(img, spec: SceneSpec, layout: dict):
    r = spec.resolution
    asphalt = np.array((0.30, 0.30, 0.32)) if spec.streetscape != "highway" else np.array((0.24, 0.24, 0.26))
    img[layout["road_top"]:] = asphalt
    dash = max(2, r // 8)
    for i, (top, _) in enumerate(layout["lanes"][1:]):
        for x in range(0, r, 2 * dash):
            img[top, x:x + dash] = (0.90, 0.90, 0.88)
    edge = (0.90, 0.80, 0.20) if spec.streetscape == "highway" else (0.85, 0.85, 0.85)
    img[layout["road_top"]] = edge


def _draw_vehicle(img, depth, layout, r, vehicle: Vehicle, x: int):
    top, bottom = layout["lanes"][vehicle.lane]
    h, w = layout["car_sizes"][vehicle.lane]
    y1 = bottom - 1 if vehicle.lane < 2 else bottom - 1
    y0 = y1 - h
    d = _vehicle_depth(layout, r, y1 - 1)
    body = np.array(vehicle.color)
    for dx in range(w):
        col = (x + dx) % r
        img[max(0, y0):y1, col] = body
        depth[max(0, y0):y1, col] = d
        if h >= 3:
            img[max(0, y0), col] = body * 0.55 + 0.2
    for wheel in (0, w - 1):
        img[y1 - 1, (x + wheel) % r] = (0.05, 0.05, 0.05)


def _weather(img, depth, spec: SceneSpec, layout: dict, frame_rng):
    r = spec.resolution
    hz = layout["horizon"]
    if spec.weather == "sunny":
        img = (img - 0.5) * 1.15 + 0.55
    elif spec.weather == "cloudy":
        img = (img - 0.5) * 0.8 + 0.45
    elif spec.weather == "foggy":
        fog = np.array((0.86, 0.86, 0.88))
        amount = (0.78 - 0.45 * depth)[..., None]
        img = img * (1 - amount) + fog * amount
    elif spec.weather == "rainy":
        img = img * 0.72
        for _ in range(int(14 * (r / 32.0) ** 2)):
            x, y = int(frame_rng.integers(0, r)), int(frame_rng.integers(0, r))
            for k in range(3):
                yy, xx = y + k, (x + k // 2) % r
                if yy < r:
                    img[yy, xx] = img[yy, xx] * 0.4 + 0.45
    elif spec.weather == "snowy":
        verge = slice(hz, layout["road_top"])
        img[verge] = img[verge] * 0.3 + 0.65
        img[layout["road_top"]:] = img[layout["road_top"]:] * 0.8 + 0.15
        for _ in range(int(28 * (r / 32.0) ** 2)):
            x, y = int(frame_rng.integers(0, r)), int(frame_rng.integers(0, r))
            img[y, x] = (0.97, 0.97, 0.98)
    return np.clip(img, 0.0, 1.0)


def render_scene(spec: SceneSpec) -> RenderedClip:
    """Render ``spec.frames`` RGB frames and their ground-truth depth maps."""
    r = spec.resolution
    rng = np.random.default_rng(spec.seed)
    layout = _layout(spec)
    base = np.zeros((r, r, 3))
    base_depth = np.repeat(_ground_depth(layout, r)[:, None], r, axis=1)
    _draw_background(base, base_depth, spec, layout, rng)
    _draw_road(base, spec, layout)
    vehicles = _place_vehicles(spec, layout, rng)
    frame_seed = int(rng.integers(0, 2**31 - 1))
    frames = np.zeros((spec.frames, r, r, 3), dtype=np.uint8)
    depths = np.zeros((spec.frames, r, r), dtype=np.float64)
    for f in range(spec.frames):
        img = base.copy()
        depth = base_depth.copy()
        order = sorted(range(len(vehicles)), key=lambda i: vehicles[i].lane)
        for i in order:
            x = int(math.floor(vehicles[i].x_at(f, r) + 0.5)) % r
            _draw_vehicle(img, depth, layout, r, vehicles[i], x)
        img = _weather(img, depth, spec, layout, np.random.default_rng([frame_seed, f]))
        frames[f] = np.floor(img * 255.0 + 0.5).astype(np.uint8)
        depths[f] = depth
    return RenderedClip(spec, frames, depths, vehicles, layout)


def depth_from_scene(spec: SceneSpec) -> np.ndarray:
    """Ground-truth depth maps ``[F, H, W]`` in [0, 1] (1 = nearest)."""
    return render_scene(spec).depths


# -- corpus -----------------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    clip_id: str
    frames: list
    depths: list | None
    tags: list
    scene: dict
    split: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        d = json.loads(line)
        return cls(**{k: d[k] for k in ("clip_id", "frames", "depths", "tags", "scene", "split")})


def grid_cell(i: int) -> tuple[str, str, str]:
    """Enumeration order in which every 100 consecutive clips cover the full grid."""
    w = i % len(WEATHERS)
    t = i % len(TRAFFIC_LEVELS)
    s = (i % len(WEATHERS) + i // 20) % len(STREETSCAPES)
    return WEATHERS[w], TRAFFIC_LEVELS[t], STREETSCAPES[s]


def clip_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def n_validation(count: int, split_ratio: float) -> int:
    # round first so 0.1 * 15 counts as exactly 1.5 before rounding half up
    return int(math.floor(round((1.0 - split_ratio) * count, 9) + 0.5))


def build_corpus(count: int, out_dir, split_ratio: float = 0.9, master_seed: int = 0, frames: int = 8,
                 resolution: int = 32, image_format: str = "png") -> Path:
    """Render ``count`` clips under ``out_dir`` and write ``manifest.jsonl`` and ``vocab.txt``."""
    from .media import write_depth_png, write_frame
    from .text import TagVocabulary

    if count <= 0:
        raise DataError("empty corpus: count must be positive")
    if image_format not in ("png", "ppm"):
        raise ConfigurationError(f"unsupported frame format {image_format!r}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"cannot write corpus to {out}: {exc}") from None
    val = set(np.random.default_rng(master_seed).permutation(count)[:n_validation(count, split_ratio)].tolist())
    vocab = TagVocabulary.reference()
    vocab.save(out / "vocab.txt")
    records = []
    for i in range(count):
        weather, traffic, street = grid_cell(i)
        spec = SceneSpec(weather, traffic, street, clip_seed(master_seed, i), frames, resolution)
        clip = render_scene(spec)
        clip_id = f"clip_{i:05d}"
        rel = Path("frames") / clip_id
        (out / rel).mkdir(parents=True, exist_ok=True)
        frame_paths, depth_paths = [], []
        for f in range(frames):
            fp = rel / f"frame_{f:02d}.{image_format}"
            dp = rel / f"depth_{f:02d}.png"
            write_frame(out / fp, clip.frames[f])
            write_depth_png(out / dp, clip.depths[f])
            frame_paths.append(fp.as_posix())
            depth_paths.append(dp.as_posix())
        records.append(ManifestRecord(clip_id, frame_paths, depth_paths, auto_tag(spec), spec.to_dict(),
                                      "val" if i in val else "train"))
    path = out / "manifest.jsonl"
    write_manifest(path, records)
    return path


def write_manifest(path, records) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    records = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(ManifestRecord.from_json(line))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{n}: malformed record ({exc})") from None
    return records


def validate_manifest(path, vocab=None) -> list[str]:
    """Problems found in a manifest: missing files, unknown tags, ragged clips."""
    from .text import TagVocabulary

    path = Path(path)
    root = path.parent
    records = read_manifest(path)
    if vocab is None:
        vocab_path = root / "vocab.txt"
        vocab = TagVocabulary.load(vocab_path) if vocab_path.exists() else TagVocabulary.reference()
    problems = []
    if not records:
        problems.append("manifest is empty")
    lengths = {len(r.frames) for r in records}
    if len(lengths) > 1:
        problems.append(f"inconsistent frame counts {sorted(lengths)}")
    for r in records:
        for p in r.frames + (r.depths or []):
            if not (root / p).exists():
                problems.append(f"{r.clip_id}: missing file {p}")
        if r.depths is not None and len(r.depths) != len(r.frames):
            problems.append(f"{r.clip_id}: {len(r.depths)} depth maps for {len(r.frames)} frames")
        for tag in r.tags:
            if tag not in vocab:
                problems.append(f"{r.clip_id}: tag {tag!r} not in vocabulary")
        if r.split not in ("train", "val"):
            problems.append(f"{r.clip_id}: bad split {r.split!r}")
    return problems


@dataclass
class ClipArrays:
    """A manifest loaded into memory: frames in [-1, 1] and depths in [0, 1]."""

    records: list
    frames: np.ndarray        # [N, F, 3, H, W] float32
    depths: np.ndarray | None  # [N, F, 1, H, W] float32

    def split(self, name: str) -> "ClipArrays":
        idx = [i for i, r in enumerate(self.records) if r.split == name]
        return ClipArrays([self.records[i] for i in idx], self.frames[idx],
                          None if self.depths is None else self.depths[idx])

    def __len__(self):
        return len(self.records)


def load_clips(path, with_depth: bool = True) -> ClipArrays:
    from .media import read_depth_png, read_frame

    path = Path(path)
    records = read_manifest(path)
    if not records:
        raise DataError(f"{path}: empty corpus")
    frames, depths = [], []
    for r in records:
        clip = [read_frame(path.parent / p) for p in r.frames]
        frames.append(np.stack([c.transpose(2, 0, 1) for c in clip]).astype(np.float32) / 127.5 - 1.0)
        if with_depth and r.depths:
            depths.append(np.stack([read_depth_png(path.parent / p)[None] for p in r.depths]).astype(np.float32))
    depth_arr = np.stack(depths) if with_depth and len(depths) == len(records) else None
    return ClipArrays(records, np.stack(frames), depth_arr)


def grid_prompts() -> list[tuple[str, str, str]]:
    return list(itertools.product(WEATHERS, TRAFFIC_LEVELS, STREETSCAPES))


# -- external frames --------------------------------------------------------------------------

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".ppm", ".bmp")


@dataclass
class IngestReport:
    clips: int = 0
    skipped_files: list = field(default_factory=list)
    dropped_tags: int = 0
    proxy_depth_clips: int = 0
    leftover_frames: int = 0


def letterbox(image: np.ndarray, size: int) -> np.ndarray:
    """Fit ``[H, W, 3]`` bytes inside ``size x size`` without changing the aspect ratio; pad with black."""
    from PIL import Image

    h, w = image.shape[:2]
    scale = size / max(h, w)
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    resized = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    out = np.zeros((size, size, 3), dtype=np.uint8)
    top, left = (size - nh) // 2, (size - nw) // 2
    out[top:top + nh, left:left + nw] = resized
    return out


def luminance_depth(image: np.ndarray) -> np.ndarray:
    """Stand-in depth when no sidecar exists: Rec. 601 luma scaled to [0, 1]."""
    img = image.astype(np.float64) / 255.0
    return np.clip(0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2], 0.0, 1.0)


def _sequences(source: Path) -> list[Path]:
    direct = [p for p in source.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES and ".depth" not in p.name]
    if direct:
        return [source]
    return sorted(p for p in source.iterdir() if p.is_dir())


def ingest_external(source, out_dir, frames: int = 8, resolution: int = 32, split_ratio: float = 0.9,
                    master_seed: int = 0, vocab=None) -> tuple[Path, IngestReport]:
    """Turn folders of frames plus ``caption.txt`` sidecars into a manifest.

    ``source`` is either one folder of frames or a folder of such folders.
    Each folder is cut into clips of ``frames`` consecutive images; depth
    sidecars are ``<frame stem>.depth.png``.
    """
    from .media import read_depth_png, read_frame, write_depth_png, write_frame
    from .text import TagVocabulary, split_tags

    source, out = Path(source), Path(out_dir)
    if not source.is_dir():
        raise DataError(f"{source} is not a directory")
    vocab = vocab or TagVocabulary.reference()
    report = IngestReport()
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    records = []
    for seq in _sequences(source):
        caption = seq / "caption.txt"
        raw_tags = split_tags(caption.read_text(encoding="utf-8")) if caption.exists() else []
        tags = []
        for tag in raw_tags:
            if tag in vocab:
                tags.append(tag)
            else:
                report.dropped_tags += 1
                logger.warning("%s: dropping unknown tag %r", seq.name, tag)
        images, depths, proxy = [], [], False
        for path in sorted(p for p in seq.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES and ".depth" not in p.name):
            try:
                img = read_frame(path)
            except (DataError, OSError, ValueError) as exc:
                report.skipped_files.append(f"{path}: {exc}")
                continue
            boxed = letterbox(img, resolution)
            sidecar = path.with_name(path.stem + ".depth.png")
            if sidecar.exists():
                d = read_depth_png(sidecar)
                d = letterbox(np.repeat(np.floor(d * 255 + 0.5).astype(np.uint8)[..., None], 3, axis=2),
                              resolution)[..., 0] / 255.0
            else:
                proxy = True
                d = luminance_depth(boxed)
            images.append(boxed)
            depths.append(d)
        usable = len(images) // frames * frames
        report.leftover_frames += len(images) - usable
        for c in range(0, usable, frames):
            clip_id = f"ext_{len(records):05d}"
            rel = Path("frames") / clip_id
            (out / rel).mkdir(parents=True, exist_ok=True)
            fps, dps = [], []
            for f in range(frames):
                fp, dp = rel / f"frame_{f:02d}.png", rel / f"depth_{f:02d}.png"
                write_frame(out / fp, images[c + f])
                write_depth_png(out / dp, depths[c + f])
                fps.append(fp.as_posix())
                dps.append(dp.as_posix())
            scene = {"source": seq.name, "first_frame": c, "resolution": resolution, "depth_proxy": proxy}
            records.append(ManifestRecord(clip_id, fps, dps, tags, scene, "train"))
            report.proxy_depth_clips += int(proxy)
    if not records:
        raise DataError(f"no usable clips of {frames} frames under {source}")
    val = set(np.random.default_rng(master_seed).permutation(len(records))[:n_validation(len(records), split_ratio)].tolist())
    for i, r in enumerate(records):
        if i in val:
            r.split = "val"
    report.clips = len(records)
    path = out / "manifest.jsonl"
    write_manifest(path, records)
    return path, report
