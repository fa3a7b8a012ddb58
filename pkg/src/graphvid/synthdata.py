"""Procedural moving-shapes videos with sparse ground-truth scene-graph tracks.

Each object is a small fixed-size sprite with its own intensity, moving
horizontally at a constant integer speed (or standing still). Graphs list every
object once, one motion self-loop per object and, for every pair, the dominant
geometric relation (plus ``touching`` when boxes are within a pixel). The
rule-based oracle re-derives those predicates from trajectories or from pixels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import tensorio
from .scenegraph import Edge, GraphTrack, Node, SceneGraph, Vocabulary

SHAPES = ("square", "circle", "triangle", "ring")
INTENSITY = {"square": 1.0, "circle": 0.8, "triangle": 0.6, "ring": 0.4}
PREDICATES = ("left-of", "right-of", "above", "below", "touching",
              "moving-right", "moving-left", "static")
MOTION = ("moving-right", "moving-left", "static")


def default_vocabulary() -> Vocabulary:
    return Vocabulary(SHAPES, PREDICATES)


def sprite(shape: str, size: int) -> np.ndarray:
    """Binary mask whose bounding box is the full ``size``×``size`` square."""
    yy, xx = np.mgrid[:size, :size]
    if shape == "square":
        m = np.ones((size, size), dtype=bool)
    elif shape == "circle":
        c = (size - 1) / 2
        m = (yy - c) ** 2 + (xx - c) ** 2 <= (c + 0.5) ** 2 - 0.5
        m[[0, 0, -1, -1], [0, -1, 0, -1]] = False
        m[size // 2, :] = True
        m[:, size // 2] = True
    elif shape == "triangle":
        m = xx <= yy
    elif shape == "ring":
        m = np.ones((size, size), dtype=bool)
        m[1:-1, 1:-1] = False
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


@dataclass
class EpisodeConfig:
    T: int = 8
    H: int = 16
    W: int = 16
    C: int = 1
    min_objects: int = 1
    max_objects: int = 3
    min_given_graphs: int = 3
    max_nodes: int = 5
    sprite_size: int = 4
    speed: int = 1
    margin: float = 1.0
    motion_threshold: float = 0.5
    motion_window: int = 2
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.min_given_graphs <= self.T:
            raise ValueError("min_given_graphs must lie in [1, T]")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.max_objects > min(self.max_nodes, len(SHAPES)):
            raise ValueError("object count exceeds max_nodes or the shape vocabulary")
        if self.C != 1:
            raise ValueError("only single-channel frames are rendered")
        if self.sprite_size > min(self.H, self.W):
            raise ValueError("sprite does not fit on the canvas")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Trajectories:
    """Per-object categories, top-left positions (T, n, 2) as (x, y) and x-velocities."""

    categories: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    size: int

    @property
    def num_objects(self) -> int:
        return len(self.categories)


@dataclass
class Episode:
    video: np.ndarray  # (T, H, W, C) in [0, 1]
    track: GraphTrack
    trajectories: Trajectories
    seed: int = 0
    meta: dict = field(default_factory=dict)


def render(traj: Trajectories, cfg: EpisodeConfig) -> np.ndarray:
    video = np.zeros((cfg.T, cfg.H, cfg.W, cfg.C), dtype=np.float32)
    s = traj.size
    for k, cat in enumerate(traj.categories):
        name = SHAPES[cat]
        mask = sprite(name, s)
        for t in range(cfg.T):
            x, y = traj.positions[t, k]
            patch = video[t, y:y + s, x:x + s, 0]
            patch[mask] = INTENSITY[name]
    return video


def _boxes_clear(a, b, s: int) -> bool:
    """True when two sprites' boxes share no pixel."""
    return abs(int(a[0]) - int(b[0])) >= s or abs(int(a[1]) - int(b[1])) >= s


def _sample_trajectories(rng: np.random.Generator, cfg: EpisodeConfig, attempts: int = 200) -> Trajectories:
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    cats = rng.permutation(len(SHAPES))[:n]
    s, span = cfg.sprite_size, cfg.speed * (cfg.T - 1)
    for _ in range(attempts):
        vel = rng.choice([-cfg.speed, 0, cfg.speed], size=n)
        pos = np.zeros((cfg.T, n, 2), dtype=np.int64)
        ok = True
        for k in range(n):
            lo = span if vel[k] < 0 else 0
            hi = cfg.W - s - (span if vel[k] > 0 else 0)
            if hi < lo:
                ok = False
                break
            x0 = int(rng.integers(lo, hi + 1))
            y0 = int(rng.integers(0, cfg.H - s + 1))
            pos[:, k, 0] = x0 + vel[k] * np.arange(cfg.T)
            pos[:, k, 1] = y0
        if ok and all(_boxes_clear(pos[t, i], pos[t, j], s)
                      for t in range(cfg.T) for i in range(n) for j in range(i + 1, n)):
            return Trajectories(cats.astype(np.int64), pos, vel.astype(np.int64), s)
    raise ValueError(f"could not place {n} non-overlapping objects on a {cfg.H}x{cfg.W} canvas")


# --- geometry shared by generator and oracle --------------------------------

def _centroid(box) -> np.ndarray:
    x0, y0, x1, y1 = box
    return np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])


def _gap(a, b) -> int:
    """Chebyshev gap in empty pixels between two inclusive boxes (x0, y0, x1, y1)."""
    gx = max(b[0] - a[2] - 1, a[0] - b[2] - 1, 0)
    gy = max(b[1] - a[3] - 1, a[1] - b[3] - 1, 0)
    return max(gx, gy)


def _pair_holds(pred: str, a, b, margin: float) -> bool:
    ca, cb = _centroid(a), _centroid(b)
    if pred == "left-of":
        return ca[0] < cb[0] - margin
    if pred == "right-of":
        return ca[0] > cb[0] + margin
    if pred == "above":
        return ca[1] < cb[1] - margin
    if pred == "below":
        return ca[1] > cb[1] + margin
    if pred == "touching":
        return _gap(a, b) <= 1
    raise ValueError(f"unknown predicate {pred!r}")


def _motion_holds(pred: str, v: float, thr: float) -> bool:
    if pred == "moving-right":
        return v > thr
    if pred == "moving-left":
        return v < -thr
    return abs(v) <= thr


def _traj_box(traj: Trajectories, t: int, k: int):
    x, y = traj.positions[t, k]
    return (int(x), int(y), int(x) + traj.size - 1, int(y) + traj.size - 1)


def graph_at(traj: Trajectories, t: int, rng: np.random.Generator, cfg: EpisodeConfig) -> SceneGraph:
    n = traj.num_objects
    nodes = [Node(k, int(traj.categories[k])) for k in range(n)]
    edges = []
    for k in range(n):
        v = traj.velocities[k]
        pred = "moving-right" if v > 0 else "moving-left" if v < 0 else "static"
        edges.append(Edge(k, k, PREDICATES.index(pred)))
    for i in range(n):
        for j in range(i + 1, n):
            src, dst = (i, j) if rng.random() < 0.5 else (j, i)
            a, b = _traj_box(traj, t, src), _traj_box(traj, t, dst)
            if _gap(a, b) <= 1:
                edges.append(Edge(src, dst, PREDICATES.index("touching")))
            d = _centroid(b) - _centroid(a)
            if abs(d[0]) >= abs(d[1]):
                pred = "left-of" if d[0] > 0 else "right-of"
            else:
                pred = "above" if d[1] > 0 else "below"
            if max(abs(d[0]), abs(d[1])) > cfg.margin:
                edges.append(Edge(src, dst, PREDICATES.index(pred)))
    return SceneGraph(nodes, edges)


def given_frames(rng: np.random.Generator, cfg: EpisodeConfig) -> list[int]:
    hi = min(cfg.T, cfg.min_given_graphs + 2)
    n = int(rng.integers(cfg.min_given_graphs, hi + 1))
    return sorted(set(np.round(np.linspace(0, cfg.T - 1, n)).astype(int).tolist()))


def generate_episode(cfg: EpisodeConfig) -> Episode:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    traj = _sample_trajectories(rng, cfg)
    track = GraphTrack(cfg.T, {t: graph_at(traj, t, rng, cfg) for t in given_frames(rng, cfg)})
    for t, g in track.entries.items():
        bad = semantic_oracle(traj, g, t, cfg)
        if bad:
            raise RuntimeError(f"generator emitted a graph that fails its own oracle: {bad}")
    return Episode(render(traj, cfg), track, traj, cfg.seed, {"seed": cfg.seed, "config": cfg.to_dict()})


def episode_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


def generate_episodes(cfg: EpisodeConfig, count: int, seed: int) -> list[Episode]:
    out = []
    for i in range(count):
        c = EpisodeConfig(**{**cfg.to_dict(), "seed": episode_seed(seed, i)})
        out.append(generate_episode(c))
    return out


# --- oracle ------------------------------------------------------------------

def boxes_from_pixels(video: np.ndarray) -> list[dict]:
    """Per frame, the bounding box of every category found by nearest-intensity classification."""
    levels = np.array([0.0] + [INTENSITY[s] for s in SHAPES])
    v = np.asarray(video, dtype=np.float64)
    if v.ndim == 4:
        v = v[..., 0]
    cls = np.abs(v[..., None] - levels).argmin(axis=-1) - 1
    frames = []
    for t in range(v.shape[0]):
        found = {}
        for c in range(len(SHAPES)):
            ys, xs = np.nonzero(cls[t] == c)
            if len(xs):
                found[c] = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
        frames.append(found)
    return frames


def semantic_oracle(source, g: SceneGraph, t: int, cfg: EpisodeConfig | None = None) -> list[str]:
    """Violated ``(src, predicate, dst)`` triplets for graph ``g`` at frame ``t``; empty means pass.

    ``source`` is either ``Trajectories`` or a (T, H, W[, C]) pixel video; pixel
    videos are parsed by category intensity, so graph nodes are matched by
    category.
    """
    cfg = cfg or EpisodeConfig()
    if isinstance(source, Trajectories):
        T = source.positions.shape[0]
        slot = {n.node_id: n.node_id for n in g.nodes}

        def box(k, tt):
            return _traj_box(source, tt, slot[k])
    else:
        per_frame = boxes_from_pixels(source)
        T = len(per_frame)
        cat = {n.node_id: n.category for n in g.nodes}

        def box(k, tt):
            return per_frame[tt].get(cat[k])

    lo, hi = max(0, t - cfg.motion_window), min(T - 1, t + cfg.motion_window)
    failures = []
    for e in g.edges:
        if not 0 <= e.predicate < len(PREDICATES):
            raise ValueError(f"unknown predicate index {e.predicate}")
        pred = PREDICATES[e.predicate]
        triplet = f"({e.src}, {pred}, {e.dst})"
        if pred in MOTION:
            a, b = box(e.src, lo), box(e.src, hi)
            if a is None or b is None:
                failures.append(triplet + ": object not found")
                continue
            v = 0.0 if hi == lo else (_centroid(b)[0] - _centroid(a)[0]) / (hi - lo)
            if not _motion_holds(pred, v, cfg.motion_threshold):
                failures.append(triplet)
        else:
            a, b = box(e.src, t), box(e.dst, t)
            if a is None or b is None:
                failures.append(triplet + ": object not found")
            elif not _pair_holds(pred, a, b, cfg.margin):
                failures.append(triplet)
    return failures


def oracle_pass_rate(video: np.ndarray, track: GraphTrack, cfg: EpisodeConfig, frames=None) -> float:
    """Fraction of the given (frame, graph) pairs that the pixel oracle accepts."""
    keys = [t for t in track.frames() if frames is None or t in frames]
    if not keys:
        raise ValueError("no frames to score")
    return float(np.mean([not semantic_oracle(video, track.entries[t], t, cfg) for t in keys]))


# --- dataset directories ----------------------------------------------------

def save_pgm(path, frame) -> None:
    """Write a single-channel [0, 1] frame as binary 8-bit PGM."""
    f = np.asarray(frame, dtype=np.float64)
    f = f[..., 0] if f.ndim == 3 else f
    data = np.round(np.clip(f, 0.0, 1.0) * 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode() + data.tobytes())


def load_frame(path) -> np.ndarray:
    """(H, W, 1) float32 frame in [0, 1] from a portable tensor file or an 8-bit binary PGM."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] != b"P5":
        arr = tensorio.tensor_from_bytes(raw)
        return arr if arr.ndim == 3 else arr[..., None]
    fields, pos = [], 2
    while len(fields) < 3:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(int(raw[pos:end]))
        pos = end
    w, h, maxval = fields
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    return (data.reshape(h, w, 1) / maxval).astype(np.float32)


def save_episode(directory, ep: Episode, vocab: Vocabulary | None = None) -> None:
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(ep.video):
        tensorio.save_tensor(d / "frames" / f"{t:04d}.ssgt", frame)
    ep.track.save(d / "track.json", vocab or default_vocabulary())
    traj = {"categories": ep.trajectories.categories.tolist(),
            "positions": ep.trajectories.positions.tolist(),
            "velocities": ep.trajectories.velocities.tolist(), "size": ep.trajectories.size}
    (d / "meta.json").write_text(json.dumps({**ep.meta, "trajectories": traj}, indent=2, sort_keys=True) + "\n")


def load_episode(directory) -> Episode:
    d = Path(directory)
    frames = sorted((d / "frames").glob("*.ssgt"))
    if not frames:
        raise FileNotFoundError(f"no frames in {d}")
    video = np.stack([tensorio.load_tensor(p) for p in frames])
    track = GraphTrack.load(d / "track.json", default_vocabulary())
    meta = json.loads((d / "meta.json").read_text())
    tr = meta.pop("trajectories")
    traj = Trajectories(np.array(tr["categories"]), np.array(tr["positions"]),
                        np.array(tr["velocities"]), tr["size"])
    return Episode(video, track, traj, meta.get("seed", 0), meta)


def write_dataset(out, cfg: EpisodeConfig, count: int, seed: int) -> list[Path]:
    root = Path(out) / "episodes"
    paths = []
    for i, ep in enumerate(generate_episodes(cfg, count, seed)):
        p = root / f"{i:04d}"
        save_episode(p, ep)
        paths.append(p)
    return paths


def load_dataset(root) -> list[Episode]:
    base = Path(root) / "episodes"
    dirs = sorted(p for p in base.iterdir() if p.is_dir()) if base.is_dir() else []
    if not dirs:
        raise FileNotFoundError(f"no episodes under {base}")
    return [load_episode(p) for p in dirs]
