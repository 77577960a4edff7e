"""Synthetic moving-shape videos with exact point tracks, plus corruptions and
difficulty stratification.

Scenes are a textured static background with textured rectangles/ellipses
moving on piecewise-linear paths, optionally behind static occluders. All
textures are analytic functions of object-local coordinates, so sub-pixel
motion renders exactly and track points stay attached to the surface.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

MOTION_BINS = ("[0%,0.5%)", "[0.5%,1.5%)", "[1.5%,5%)")
MOTION_EDGES = (0.0, 0.5, 1.5, 5.0)
REAPPEAR_BINS = ("[0,1)", "[1,3)", "[3,1000)")
REAPPEAR_EDGES = (0, 1, 3, 1000)

CORRUPTIONS = ("gaussian_noise", "motion_blur", "brightness", "contrast")
SEVERITY_TABLE = {
    "gaussian_noise": (0.04, 0.06, 0.09, 0.13, 0.19),  # noise std
    "motion_blur": (3, 5, 9, 13, 17),  # box kernel length, pixels
    "brightness": (0.05, 0.10, 0.15, 0.20, 0.30),  # additive shift
    "contrast": (0.75, 0.6, 0.45, 0.3, 0.2),  # gain about the frame mean
}


@dataclass
class GeneratorConfig:
    frames: int = 8
    height: int = 32
    width: int = 48
    min_objects: int = 2
    max_objects: int = 8
    speed_range: tuple[float, float] = (0.0, 2.5)  # pixels per frame
    size_range: tuple[float, float] = (3.0, 10.0)  # half-extent, pixels
    max_occluders: int = 1
    num_tracks: int = 24
    background_track_frac: float = 0.3

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"frame size must be positive, got {self.height}x{self.width}")
        if self.frames < 2:
            raise ValueError(f"need at least 2 frames, got {self.frames}")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("object count range must satisfy 1 <= min_objects <= max_objects")
        if self.num_tracks < 1:
            raise ValueError("num_tracks must be >= 1")

    @classmethod
    def from_json(cls, path) -> "GeneratorConfig":
        data = json.loads(Path(path).read_text())
        for key in ("speed_range", "size_range"):
            if key in data:
                data[key] = tuple(data[key])
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class Texture:
    base: np.ndarray  # (3,)
    amps: np.ndarray  # (K, 3)
    freqs: np.ndarray  # (K, 2) radians per pixel along (u, v)
    phases: np.ndarray  # (K,)

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        arg = u[..., None] * self.freqs[:, 0] + v[..., None] * self.freqs[:, 1] + self.phases
        col = self.base + np.sin(arg) @ self.amps
        return np.clip(col, 0.0, 1.0)

    @classmethod
    def random(cls, rng: np.random.Generator, k: int = 3, fmin: float = 0.3, fmax: float = 1.3):
        ang = rng.uniform(0, 2 * np.pi, k)
        mag = rng.uniform(fmin, fmax, k)
        return cls(
            base=rng.uniform(0.2, 0.8, 3),
            amps=rng.uniform(-0.25, 0.25, (k, 3)),
            freqs=np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=1),
            phases=rng.uniform(0, 2 * np.pi, k),
        )


@dataclass
class Shape:
    kind: str  # "rect" or "ellipse"
    half: tuple[float, float]  # (half-width, half-height)
    centers: np.ndarray  # (F, 2) per-frame centre (x, y)
    depth: int  # larger is closer to the camera
    texture: Texture

    def contains(self, du, dv, margin: float = 0.0):
        a, b = self.half[0] - margin, self.half[1] - margin
        if self.kind == "rect":
            return (np.abs(du) <= a) & (np.abs(dv) <= b)
        return (du / a) ** 2 + (dv / b) ** 2 <= 1.0


@dataclass
class Scene:
    height: int
    width: int
    frames: int
    background: Texture
    shapes: list[Shape] = field(default_factory=list)


@dataclass
class GroundTruthTrack:
    positions: np.ndarray  # (F, 2) pixel (x, y)
    visible: np.ndarray  # (F,) bool

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.positions.shape != (len(self.visible), 2):
            raise ValueError("positions must be (F, 2) and match visible length")


@dataclass
class SyntheticClip:
    video: np.ndarray  # (F, H, W, 3) float32 in [0, 1]
    tracks: list[GroundTruthTrack]
    rng_seed: int
    owners: list[int] = field(default_factory=list)  # 0 = background, k = shapes[k-1]

    @property
    def num_frames(self) -> int:
        return self.video.shape[0]

    def track_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        xy = np.stack([t.positions for t in self.tracks]).astype(np.float32)
        vis = np.stack([t.visible for t in self.tracks])
        return xy, vis


@dataclass(frozen=True)
class StratumLabel:
    motion_bin: str | None  # None when out of range or undefined
    reappearance_bin: str | None
    motion_pct: float
    reappearances: int


# --- rendering ----------------------------------------------------------------


def _pixel(p):
    return np.floor(np.asarray(p) + 0.5).astype(int)


def render_scene(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Render a scene. Returns (video (F,H,W,3) float32, owner ids (F,H,W) int)."""
    ys, xs = np.mgrid[0 : scene.height, 0 : scene.width].astype(np.float64)
    bg = scene.background(xs, ys)
    video = np.empty((scene.frames, scene.height, scene.width, 3), dtype=np.float32)
    ids = np.zeros((scene.frames, scene.height, scene.width), dtype=np.int32)
    order = sorted(range(len(scene.shapes)), key=lambda k: scene.shapes[k].depth)
    for f in range(scene.frames):
        frame = bg.copy()
        for k in order:
            s = scene.shapes[k]
            du, dv = xs - s.centers[f, 0], ys - s.centers[f, 1]
            m = s.contains(du, dv)
            if m.any():
                frame[m] = s.texture(du[m], dv[m])
                ids[f][m] = k + 1
        video[f] = frame
    return video, ids


def _track_from_owner(scene: Scene, ids: np.ndarray, owner: int, local: np.ndarray) -> GroundTruthTrack:
    if owner == 0:
        pos = np.repeat(local[None], scene.frames, axis=0)
    else:
        pos = scene.shapes[owner - 1].centers + local
    q = _pixel(pos)
    inside = (q[:, 0] >= 0) & (q[:, 0] < scene.width) & (q[:, 1] >= 0) & (q[:, 1] < scene.height)
    vis = np.zeros(scene.frames, dtype=bool)
    for f in np.flatnonzero(inside):
        vis[f] = ids[f, q[f, 1], q[f, 0]] == owner
    return GroundTruthTrack(pos, vis)


def _random_path(rng, cfg: GeneratorConfig, start: np.ndarray) -> np.ndarray:
    speed = rng.uniform(*cfg.speed_range)
    ang = rng.uniform(0, 2 * np.pi)
    v1 = speed * np.array([np.cos(ang), np.sin(ang)])
    ang2 = ang + rng.uniform(-np.pi / 2, np.pi / 2)
    v2 = speed * np.array([np.cos(ang2), np.sin(ang2)])
    brk = rng.integers(1, cfg.frames)
    centers = np.empty((cfg.frames, 2))
    p = start.astype(np.float64).copy()
    for f in range(cfg.frames):
        centers[f] = p
        p = p + (v1 if f < brk else v2)
    return centers


def sample_scene(cfg: GeneratorConfig, rng: np.random.Generator) -> Scene:
    scene = Scene(cfg.height, cfg.width, cfg.frames, Texture.random(rng, k=4, fmin=0.1, fmax=0.8))
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    for d in range(n_obj):
        half = tuple(rng.uniform(*cfg.size_range, 2))
        start = rng.uniform([0, 0], [cfg.width - 1, cfg.height - 1])
        scene.shapes.append(
            Shape(
                kind=str(rng.choice(["rect", "ellipse"])),
                half=half,
                centers=_random_path(rng, cfg, start),
                depth=d + 1,
                texture=Texture.random(rng),
            )
        )
    n_occ = int(rng.integers(0, cfg.max_occluders + 1))
    for k in range(n_occ):
        # thin static bar in front of everything
        vertical = bool(rng.integers(0, 2))
        half = (rng.uniform(1.5, 3.0), cfg.height) if vertical else (cfg.width, rng.uniform(1.5, 3.0))
        pos = rng.uniform([0, 0], [cfg.width - 1, cfg.height - 1])
        scene.shapes.append(
            Shape("rect", half, np.repeat(pos[None], cfg.frames, 0), n_obj + 1 + k, Texture.random(rng))
        )
    return scene


def sample_tracks(scene: Scene, ids: np.ndarray, cfg: GeneratorConfig, rng: np.random.Generator):
    n_moving = sum(1 for s in scene.shapes if s.half[0] < scene.width and s.half[1] < scene.height)
    tracks, owners = [], []
    attempts = 0
    while len(tracks) < cfg.num_tracks and attempts < 50 * cfg.num_tracks:
        attempts += 1
        if n_moving == 0 or rng.random() < cfg.background_track_frac:
            owner = 0
            local = rng.uniform([0, 0], [scene.width - 1, scene.height - 1])
        else:
            owner = int(rng.integers(1, len(scene.shapes) + 1))
            s = scene.shapes[owner - 1]
            if s.half[0] < 1.5 or s.half[1] < 1.5:
                continue
            local = rng.uniform(-np.asarray(s.half), np.asarray(s.half))
            # 1px margin: the rounded pixel of the point always lies inside the shape
            if not s.contains(local[0], local[1], margin=1.0):
                continue
        tr = _track_from_owner(scene, ids, owner, local)
        if tr.visible.any():
            tracks.append(tr)
            owners.append(owner)
    return tracks, owners


def generate_clip(cfg: GeneratorConfig, seed: int) -> SyntheticClip:
    """Render one random clip with ground-truth tracks. Pure in (cfg, seed)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    scene = sample_scene(cfg, rng)
    video, ids = render_scene(scene)
    tracks, owners = sample_tracks(scene, ids, cfg, rng)
    return SyntheticClip(video, tracks, seed, owners)


def generate_clip_with_scene(cfg: GeneratorConfig, seed: int) -> tuple[SyntheticClip, Scene]:
    cfg.validate()
    rng = np.random.default_rng(seed)
    scene = sample_scene(cfg, rng)
    video, ids = render_scene(scene)
    tracks, owners = sample_tracks(scene, ids, cfg, rng)
    return SyntheticClip(video, tracks, seed, owners), scene


def clip_from_scene(scene: Scene, points: list[tuple[int, tuple[float, float]]], seed: int = 0) -> SyntheticClip:
    """Render a hand-built scene and attach tracks at (owner, local offset) pairs."""
    video, ids = render_scene(scene)
    tracks = [_track_from_owner(scene, ids, o, np.asarray(p, dtype=np.float64)) for o, p in points]
    return SyntheticClip(video, tracks, seed, [o for o, _ in points])


# --- corruptions --------------------------------------------------------------


def _line_kernel(length: int, angle: float) -> np.ndarray:
    k = np.zeros((length, length))
    c = (length - 1) / 2
    for t in np.linspace(-c, c, 4 * length):
        x, y = c + t * np.cos(angle), c + t * np.sin(angle)
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        ax, ay = x - x0, y - y0
        for yy, xx, w in ((y0, x0, (1 - ax) * (1 - ay)), (y0, x0 + 1, ax * (1 - ay)),
                          (y0 + 1, x0, (1 - ax) * ay), (y0 + 1, x0 + 1, ax * ay)):
            if 0 <= yy < length and 0 <= xx < length:
                k[yy, xx] += w
    return k / k.sum()


def corrupt(video: np.ndarray, kind: str, severity: int, seed: int = 0) -> np.ndarray:
    """Apply one corruption at severity 1..5; output clipped to [0, 1]."""
    if kind not in SEVERITY_TABLE:
        raise ValueError(f"unknown corruption {kind!r}; expected one of {CORRUPTIONS}")
    if severity not in (1, 2, 3, 4, 5):
        raise ValueError(f"severity must be in 1..5, got {severity}")
    param = SEVERITY_TABLE[kind][severity - 1]
    rng = np.random.default_rng(seed)
    v = np.asarray(video, dtype=np.float32)
    if kind == "gaussian_noise":
        out = v + param * rng.standard_normal(v.shape).astype(np.float32)
    elif kind == "brightness":
        out = v + param
    elif kind == "contrast":
        mean = v.mean(axis=(1, 2, 3), keepdims=True)
        out = (v - mean) * param + mean
    else:
        kern = _line_kernel(int(param), rng.uniform(0, np.pi))[..., None]
        out = np.stack([ndimage.convolve(fr, kern, mode="nearest") for fr in v])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# --- stratification -----------------------------------------------------------


def _bin(value, edges, labels):
    for lo, hi, lab in zip(edges[:-1], edges[1:], labels):
        if lo <= value < hi:
            return lab
    return None


def stratify(track: GroundTruthTrack, frame_diag: float) -> StratumLabel:
    """Motion-dynamics and reappearance-frequency bins of a ground-truth track.

    Motion is the mean displacement over consecutive visible frame pairs as a
    percentage of the frame diagonal. Tracks at or beyond 5% get motion_bin None.
    """
    if len(track.visible) < 2:
        raise ValueError("stratify needs at least 2 frames")
    if frame_diag <= 0:
        raise ValueError("frame_diag must be positive")
    vis = track.visible
    pair = vis[:-1] & vis[1:]
    if pair.any():
        steps = np.linalg.norm(np.diff(track.positions, axis=0), axis=1)[pair]
        motion = float(steps.mean() / frame_diag * 100.0)
    else:
        motion = float("nan")
    reapp = int(np.sum(~vis[:-1] & vis[1:]))
    mbin = _bin(motion, MOTION_EDGES, MOTION_BINS) if np.isfinite(motion) else None
    return StratumLabel(mbin, _bin(reapp, REAPPEAR_EDGES, REAPPEAR_BINS), motion, reapp)


# --- clip directory I/O ------------------------------------------------------


def save_clip(clip: SyntheticClip, out_dir) -> Path:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    frames = np.round(np.clip(clip.video, 0, 1) * 255).astype(np.uint8)
    for i, fr in enumerate(frames):
        Image.fromarray(fr, "RGB").save(out / "frames" / f"{i:05d}.png")
    with open(out / "tracks.jsonl", "w") as fh:
        for i, tr in enumerate(clip.tracks):
            rec = {"id": i, "xy": tr.positions.tolist(), "visible": [bool(v) for v in tr.visible]}
            fh.write(json.dumps(rec) + "\n")
    f, h, w, _ = clip.video.shape
    (out / "meta.json").write_text(json.dumps({"F": f, "H": h, "W": w, "seed": clip.rng_seed}, indent=1))
    return out


def read_tracks_jsonl(path) -> list[GroundTruthTrack]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"tracks file not found: {path}")
    recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    recs.sort(key=lambda r: r["id"])
    return [GroundTruthTrack(np.asarray(r["xy"]), np.asarray(r["visible"])) for r in recs]


def load_clip(clip_dir) -> SyntheticClip:
    d = Path(clip_dir)
    if not (d / "meta.json").exists():
        raise FileNotFoundError(f"not a clip directory (missing meta.json): {d}")
    meta = json.loads((d / "meta.json").read_text())
    frames = [np.asarray(Image.open(d / "frames" / f"{i:05d}.png").convert("RGB")) for i in range(meta["F"])]
    video = np.stack(frames).astype(np.float32) / 255.0
    return SyntheticClip(video, read_tracks_jsonl(d / "tracks.jsonl"), int(meta["seed"]))


def config_dict(cfg: GeneratorConfig) -> dict:
    return asdict(cfg)
