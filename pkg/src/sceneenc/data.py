"""Procedural labelled room scenes and point-cloud file I/O.

Two room templates share floor, walls, tables and chairs and draw the room
size from the same range. A bedroom adds a tall wardrobe, a bathroom adds
lamps hanging at mid height.
Each template also holds one member of a confusable pair: a thin hanging
sheet near the x=0 wall whose geometry is drawn from the same distribution
in both rooms, so only the rest of the scene tells the two apart.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .descriptor import ground_truth_descriptor
from .geometry import PointCloud

CLASS_NAMES = ("floor", "wall", "table", "chair", "wardrobe", "lamp", "curtain", "shower_curtain")
MANIFEST = "manifest.json"
DATASET_FORMAT = "sceneenc-dataset/1"


@dataclass(frozen=True)
class ObjectSpec:
    """Parametric blob sampler for one category."""
    primitive: str                      # box | sphere | plane_h | plane_v | walls | floor
    size_lo: tuple[float, float, float]
    size_hi: tuple[float, float, float]
    count: tuple[int, int]
    placement: str                      # free | elevated | hanging | room | against_wall
    share: float                        # fraction of the scene's points
    elevation: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class SceneTemplate:
    name: str
    palette: tuple[int, ...]
    objects: dict[int, ObjectSpec]
    confusable: int | None = None
    room_lo: tuple[float, float, float] = (3.5, 3.5, 2.4)
    room_hi: tuple[float, float, float] = (4.5, 4.5, 2.8)

    def __post_init__(self):
        if not self.palette:
            raise ValueError(f"template {self.name}: palette must be non-empty")
        if set(self.palette) != set(self.objects):
            raise ValueError(f"template {self.name}: every palette class needs exactly one object spec")
        if self.confusable is not None and self.confusable not in self.palette:
            raise ValueError(f"template {self.name}: confusable class must be in the palette")


_SHEET = ObjectSpec("plane_v", (1.0, 0.0, 1.6), (1.6, 0.0, 2.0), (1, 1), "against_wall", 0.08, (0.08, 0.15))

_SHARED = {
    0: ObjectSpec("floor", (0, 0, 0), (0, 0, 0), (1, 1), "room", 0.26),
    1: ObjectSpec("walls", (0, 0, 0), (0, 0, 0), (2, 2), "room", 0.22),
    2: ObjectSpec("box", (1.0, 0.6, 0.06), (1.4, 0.9, 0.08), (1, 1), "elevated", 0.12, (0.68, 0.76)),
    3: ObjectSpec("box", (0.40, 0.40, 0.40), (0.50, 0.50, 0.50), (1, 3), "free", 0.14),
}

TEMPLATES = {
    "room_a": SceneTemplate(
        "room_a", (0, 1, 2, 3, 4, 6),
        {**_SHARED,
         4: ObjectSpec("box", (0.9, 0.5, 1.9), (1.2, 0.6, 2.1), (1, 1), "free", 0.18),
         6: _SHEET},
        confusable=6, room_lo=(3.8, 3.8, 2.4), room_hi=(4.5, 4.5, 2.8)),
    "room_b": SceneTemplate(
        "room_b", (0, 1, 2, 3, 5, 7),
        {**_SHARED,
         5: ObjectSpec("sphere", (0.20, 0.20, 0.20), (0.30, 0.30, 0.30), (1, 2), "hanging", 0.18, (1.2, 1.5)),
         7: _SHEET},
        confusable=7, room_lo=(3.8, 3.8, 2.4), room_hi=(4.5, 4.5, 2.8)),
}


# -- surface samplers ------------------------------------------------------------

def _sample_box(rng, lo, size, m):
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    if lo[2] == 0.0:
        # resting on the floor: the bottom face is hidden and would coincide with floor points
        areas[4] = 0.0
    face = rng.choice(6, size=m, p=areas / areas.sum())
    u = rng.random((m, 3)) * np.asarray(size)
    axis = face // 2
    side = face % 2
    u[np.arange(m), axis] = side * np.asarray(size)[axis]
    return np.asarray(lo) + u


def _sample_sphere(rng, center, radius, m):
    v = rng.normal(size=(m, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v


def _sample_rect(rng, origin, du, dv, m):
    a = rng.random((m, 1))
    b = rng.random((m, 1))
    return np.asarray(origin) + a * np.asarray(du) + b * np.asarray(dv)


@dataclass
class _Blob:
    label: int
    kind: str
    params: tuple
    area: float


def _overlaps(box, placed):
    x0, y0, x1, y1 = box
    return any(x0 < b[2] and b[0] < x1 and y0 < b[3] and b[1] < y1 for b in placed)


def _layout(template: SceneTemplate, rng: np.random.Generator):
    room = rng.uniform(template.room_lo, template.room_hi)
    rx, ry, rz = room
    blobs: list[_Blob] = []
    footprints: list[tuple] = []
    for label in sorted(template.palette):
        spec = template.objects[label]
        count = int(rng.integers(spec.count[0], spec.count[1] + 1))
        for _ in range(count):
            size = rng.uniform(spec.size_lo, spec.size_hi)
            if spec.primitive == "floor":
                blobs.append(_Blob(label, "rect", ((0, 0, 0), (rx, 0, 0), (0, ry, 0)), rx * ry))
                continue
            if spec.primitive == "walls":
                if not any(b.label == label for b in blobs):
                    blobs.append(_Blob(label, "rect", ((0, 0, 0), (0, ry, 0), (0, 0, rz)), ry * rz))
                else:
                    blobs.append(_Blob(label, "rect", ((0, 0, 0), (rx, 0, 0), (0, 0, rz)), rx * rz))
                continue
            if spec.placement == "against_wall":
                width, _, height = size
                offset = rng.uniform(*spec.elevation)
                y0 = rng.uniform(0.2, 0.6)
                blobs.append(_Blob(label, "rect", ((offset, y0, 0.05), (0, width, 0), (0, 0, height)),
                                   width * height))
                continue
            # free-standing objects, rejection-sampled so footprints don't overlap
            if spec.primitive == "sphere":
                foot = (2 * size[0], 2 * size[0])
            else:
                foot = (size[0], size[1])
            for _ in range(50):
                x0 = rng.uniform(0.4, rx - 0.1 - foot[0])
                y0 = rng.uniform(0.1, ry - 0.1 - foot[1])
                box = (x0, y0, x0 + foot[0], y0 + foot[1])
                if not _overlaps(box, footprints):
                    break
            footprints.append(box)
            z0 = rng.uniform(*spec.elevation) if spec.placement == "elevated" else 0.0
            if spec.primitive == "sphere":
                r = size[0]
                zc = rng.uniform(*spec.elevation) if spec.placement == "hanging" else r
                blobs.append(_Blob(label, "sphere", ((x0 + r, y0 + r, zc), r), 4 * np.pi * r * r))
            else:
                sx, sy, sz = size
                area = 2 * (sx * sy + sx * sz + sy * sz) - (sx * sy if z0 == 0.0 else 0.0)
                blobs.append(_Blob(label, "box", ((x0, y0, z0), tuple(size)), area))
    return blobs


def _allocate(weights: np.ndarray, total: int, minimum: int = 1) -> np.ndarray:
    """Integer split of ``total`` proportional to ``weights`` (largest remainder),
    with every entry at least ``minimum``."""
    k = weights.size
    spare = total - minimum * k
    raw = weights / weights.sum() * spare
    base = np.floor(raw).astype(np.int64)
    rest = spare - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rest]] += 1
    return base + minimum


def generate_scene(template: SceneTemplate, n_points: int, seed, jitter: float = 0.01) -> PointCloud:
    """Sample one labelled scene with exactly ``n_points`` points."""
    if n_points < 10 * len(template.palette):
        raise ValueError(
            f"n_points={n_points} too small for template {template.name}; need >= {10 * len(template.palette)}")
    rng = np.random.default_rng(seed)
    blobs = _layout(template, rng)
    labels_present = sorted({b.label for b in blobs})
    shares = np.array([template.objects[c].share for c in labels_present])
    per_class = _allocate(shares, n_points, minimum=5)
    coords, labels = [], []
    for c, m_class in zip(labels_present, per_class):
        mine = [b for b in blobs if b.label == c]
        per_blob = _allocate(np.array([b.area for b in mine]), int(m_class), minimum=1)
        for blob, m in zip(mine, per_blob):
            if blob.kind == "rect":
                pts = _sample_rect(rng, *blob.params, m)
            elif blob.kind == "box":
                pts = _sample_box(rng, *blob.params, m)
            else:
                pts = _sample_sphere(rng, *blob.params, m)
            coords.append(pts)
            labels.append(np.full(m, c, dtype=np.int64))
    coords = np.concatenate(coords)
    coords = coords + rng.normal(scale=jitter, size=coords.shape)
    labels = np.concatenate(labels)
    perm = rng.permutation(n_points)
    return PointCloud(coords[perm], labels[perm], template.name)


# -- benchmark -------------------------------------------------------------------

@dataclass
class BenchmarkConfig:
    n_classes: int = 8
    points_per_scene: int = 512
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    templates: tuple[str, ...] = ("room_a", "room_b")
    jitter: float = 0.01
    min_class_frac: float = 0.02
    max_class_frac: float = 0.4

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError("benchmark.n_classes", "must be at least 2")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"benchmark.{name}", "must be non-negative")
        if self.n_train < 1:
            raise ConfigError("benchmark.n_train", "must be at least 1")
        if self.jitter < 0:
            raise ConfigError("benchmark.jitter", "must be non-negative")
        if not 0 <= self.min_class_frac <= self.max_class_frac <= 1:
            raise ConfigError("benchmark.min_class_frac", "need 0 <= min_class_frac <= max_class_frac <= 1")
        if len(self.templates) < 2:
            raise ConfigError("benchmark.templates", "need at least two templates")
        unknown = [t for t in self.templates if t not in TEMPLATES]
        if unknown:
            raise ConfigError("benchmark.templates", f"unknown template(s) {unknown}; known: {sorted(TEMPLATES)}")
        temps = [TEMPLATES[t] for t in self.templates]
        for t in temps:
            if max(t.palette) >= self.n_classes:
                raise ConfigError("benchmark.n_classes", f"template {t.name} uses class {max(t.palette)}")
            if self.points_per_scene < 10 * len(t.palette):
                raise ConfigError("benchmark.points_per_scene", f"need >= {10 * len(t.palette)} for {t.name}")
        conf = {t.confusable for t in temps if t.confusable is not None}
        if len(conf) < 2:
            raise ConfigError("benchmark.templates", "templates must hold a confusable pair across them")
        shared = set.intersection(*(set(t.palette) - conf for t in temps))
        if not shared:
            raise ConfigError("benchmark.templates", "templates must share a non-confusable category")
        for t in temps:
            if len(conf & set(t.palette)) > 1:
                raise ConfigError("benchmark.templates", f"template {t.name} holds both confusable classes")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class Dataset:
    clouds: list[PointCloud]
    n_classes: int
    splits: dict[str, list[int]]
    templates: tuple[str, ...] = ()
    class_names: tuple[str, ...] = CLASS_NAMES
    seed: int | None = None
    config: dict = field(default_factory=dict)

    def split(self, name: str) -> list[PointCloud]:
        if name not in self.splits:
            raise KeyError(f"dataset has no split {name!r}; available: {sorted(self.splits)}")
        return [self.clouds[i] for i in self.splits[name]]

    def subset(self, train: int | None = None, val: int | None = None, test: int | None = None) -> Dataset:
        """First few scenes of each split, for smoke runs."""
        limits = {"train": train, "val": val, "test": test}
        keep = {s: idx[:limits.get(s)] if limits.get(s) is not None else list(idx)
                for s, idx in self.splits.items()}
        order = sorted(i for idx in keep.values() for i in idx)
        remap = {old: new for new, old in enumerate(order)}
        return Dataset([self.clouds[i] for i in order], self.n_classes,
                       {s: [remap[i] for i in idx] for s, idx in keep.items()},
                       self.templates, self.class_names, self.seed, dict(self.config))


def scene_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), 0, int(index)])


def build_benchmark(config: BenchmarkConfig | None = None, seed: int = 0) -> Dataset:
    config = config or BenchmarkConfig()
    config.validate()
    total = config.n_train + config.n_val + config.n_test
    names = [config.templates[i % len(config.templates)] for i in range(total)]
    clouds = [generate_scene(TEMPLATES[name], config.points_per_scene, scene_seed(seed, i), config.jitter)
              for i, name in enumerate(names)]
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 1])).permutation(total).tolist()
    splits = {
        "train": sorted(order[:config.n_train]),
        "val": sorted(order[config.n_train:config.n_train + config.n_val]),
        "test": sorted(order[config.n_train + config.n_val:]),
    }
    names_out = CLASS_NAMES[:config.n_classes] + tuple(
        f"class{c}" for c in range(len(CLASS_NAMES), config.n_classes))
    for cloud in clouds:
        cloud.validate(config.n_classes)
    return Dataset(clouds, config.n_classes, splits, tuple(config.templates), names_out, seed, asdict(config))


def class_frequencies(clouds, n: int) -> np.ndarray:
    counts = np.zeros(n)
    for c in clouds:
        counts += np.bincount(c.labels, minlength=n)
    return counts / counts.sum()


# -- file I/O --------------------------------------------------------------------

def save_cloud(cloud: PointCloud, path) -> None:
    path = Path(path)
    if path.suffix.lower() != ".csv":
        raise ValueError(f"unsupported point-cloud extension {path.suffix!r} (expected .csv)")
    lines = []
    if cloud.scene_type is not None:
        lines.append(f"# scene_type={cloud.scene_type}")
    if cloud.labels is None:
        lines.extend(f"{x!r},{y!r},{z!r}" for x, y, z in cloud.coords.tolist())
    else:
        lines.extend(f"{x!r},{y!r},{z!r},{lab}" for (x, y, z), lab in zip(cloud.coords.tolist(), cloud.labels.tolist()))
    path.write_text("\n".join(lines) + "\n")


def load_cloud(path, n_classes: int | None = None) -> PointCloud:
    """Read ``x,y,z[,label]`` rows; lines starting with ``#`` are comments."""
    path = Path(path)
    if path.suffix.lower() != ".csv":
        raise ValueError(f"unsupported point-cloud extension {path.suffix!r} (expected .csv)")
    coords, labels = [], []
    scene_type = None
    width = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line[1:].strip().startswith("scene_type="):
                    scene_type = line.split("=", 1)[1].strip()
                continue
            parts = line.split(",")
            if len(parts) not in (3, 4) or (width is not None and len(parts) != width):
                raise ValueError(f"{path}:{lineno}: expected 3 or 4 comma-separated fields consistently, got {line!r}")
            width = len(parts)
            try:
                xyz = [float(p) for p in parts[:3]]
                lab = int(parts[3]) if width == 4 else None
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed row {line!r}") from None
            if not all(np.isfinite(xyz)):
                raise ValueError(f"{path}:{lineno}: non-finite coordinate in {line!r}")
            if lab is not None and (lab < 0 or (n_classes is not None and lab >= n_classes)):
                raise ValueError(f"{path}:{lineno}: label {lab} out of range for {n_classes} classes")
            coords.append(xyz)
            if lab is not None:
                labels.append(lab)
    if not coords:
        raise ValueError(f"{path}: no points")
    return PointCloud(np.array(coords), np.array(labels) if width == 4 else None, scene_type)


def save_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory {out.parent} does not exist")
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    split_of = {i: s for s, idx in dataset.splits.items() for i in idx}
    entries = []
    for i, cloud in enumerate(dataset.clouds):
        rel = f"clouds/scene_{i:04d}.csv"
        save_cloud(cloud, out / rel)
        entries.append({"path": rel, "split": split_of.get(i), "scene_type": cloud.scene_type})
    manifest = {
        "format": DATASET_FORMAT,
        "n_classes": dataset.n_classes,
        "class_names": list(dataset.class_names),
        "templates": list(dataset.templates),
        "seed": dataset.seed,
        "config": dataset.config,
        "clouds": entries,
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    path = data_dir / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: unsupported dataset format {manifest.get('format')!r}")
    n = int(manifest["n_classes"])
    clouds, splits = [], {"train": [], "val": [], "test": []}
    for i, entry in enumerate(manifest["clouds"]):
        cloud = load_cloud(data_dir / entry["path"], n)
        if cloud.scene_type is None:
            cloud.scene_type = entry.get("scene_type")
        clouds.append(cloud)
        if entry.get("split") is not None:
            splits.setdefault(entry["split"], []).append(i)
    return Dataset(clouds, n, splits, tuple(manifest.get("templates", ())),
                   tuple(manifest.get("class_names", CLASS_NAMES)), manifest.get("seed"),
                   manifest.get("config", {}))
