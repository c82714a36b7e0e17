"""Synthetic bladder phantoms: a bright annular wall, a darker lumen and an
elliptical tumor.  A tumor is invasive (MIBC) when any of its pixels reaches
the outer edge of the wall, otherwise non-invasive (NMIBC).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .geometry import MIBC, NMIBC, Box

BACKGROUND, LUMEN, WALL, TUMOR = 0.1, 0.25, 0.7, 0.55
SPLITS = ("train", "test")


@dataclass(frozen=True)
class PhantomParams:
    image_size: int = 128
    center_jitter: float = 8.0
    outer_radius: tuple = (38.0, 50.0)
    wall_thickness: tuple = (5.0, 9.0)
    tumor_axes: tuple = (10.0, 20.0)
    noise_sigma: float = 0.05
    p_invasive: float = 0.5

    def validate(self):
        lo, hi = self.outer_radius
        tlo, thi = self.wall_thickness
        alo, ahi = self.tumor_axes
        if not (0 < lo <= hi and 0 < tlo <= thi and 0 < alo <= ahi):
            raise ValueError("parameter ranges must be positive and ordered")
        if thi >= lo:
            raise ValueError("wall thickness must stay below the outer radius (inner radius > 0)")
        if self.noise_sigma < 0 or not 0 <= self.p_invasive <= 1:
            raise ValueError("invalid noise level or class probability")
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")


@dataclass(frozen=True)
class Wall:
    cx: float
    cy: float
    inner: float
    outer: float

    def __post_init__(self):
        if not self.outer > self.inner > 0:
            raise ValueError(f"need outer > inner > 0, got inner={self.inner}, outer={self.outer}")


@dataclass(frozen=True)
class Tumor:
    cx: float
    cy: float
    a: float
    b: float
    angle: float

    def bounding_box(self) -> Box:
        """Analytic bounding box of the ellipse."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        hw = math.hypot(self.a * c, self.b * s)
        hh = math.hypot(self.a * s, self.b * c)
        return Box(self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)


@dataclass
class PhantomScene:
    image: np.ndarray
    wall: Wall
    tumor: Tumor
    class_id: int
    box: Box
    tumor_mask: np.ndarray


def _pixel_centers(size: int):
    coords = np.arange(size) + 0.5
    return np.meshgrid(coords, coords, indexing="xy")


def tumor_mask(size: int, tumor: Tumor) -> np.ndarray:
    x, y = _pixel_centers(size)
    c, s = math.cos(tumor.angle), math.sin(tumor.angle)
    dx, dy = x - tumor.cx, y - tumor.cy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / tumor.a) ** 2 + (v / tumor.b) ** 2 <= 1.0


def classify(size: int, wall: Wall, tumor: Tumor, mask: np.ndarray | None = None) -> int:
    """MIBC iff some tumor pixel center lies at radius >= the outer wall radius."""
    mask = tumor_mask(size, tumor) if mask is None else mask
    x, y = _pixel_centers(size)
    r = np.hypot(x - wall.cx, y - wall.cy)
    return MIBC if np.any(mask & (r >= wall.outer)) else NMIBC


def tight_box(mask: np.ndarray) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        raise ValueError("empty tumor mask")
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def render_scene(size: int, wall: Wall, tumor: Tumor, noise_sigma: float = 0.0,
                 rng: np.random.Generator | None = None) -> PhantomScene:
    x, y = _pixel_centers(size)
    r = np.hypot(x - wall.cx, y - wall.cy)
    img = np.full((size, size), BACKGROUND)
    img[r < wall.outer] = WALL
    img[r < wall.inner] = LUMEN
    mask = tumor_mask(size, tumor)
    if not mask.any():
        raise ValueError("tumor covers no pixel")
    img[mask] = TUMOR
    if noise_sigma > 0:
        rng = np.random.default_rng() if rng is None else rng
        img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return PhantomScene(img, wall, tumor, classify(size, wall, tumor, mask), tight_box(mask), mask)


def _radial_extent(tumor_a: float, tumor_b: float, angle: float, theta: float) -> float:
    # support function of the ellipse along the radial direction theta
    rel = theta - angle
    return math.hypot(tumor_a * math.cos(rel), tumor_b * math.sin(rel))


def generate_scene(rng_seed, params: PhantomParams = PhantomParams()) -> PhantomScene:
    """Draw one scene; identical seeds give identical scenes."""
    params.validate()
    rng = np.random.default_rng(rng_seed)
    size = params.image_size
    for _ in range(1000):
        cx = size / 2 + rng.uniform(-params.center_jitter, params.center_jitter)
        cy = size / 2 + rng.uniform(-params.center_jitter, params.center_jitter)
        outer = rng.uniform(*params.outer_radius)
        inner = outer - rng.uniform(*params.wall_thickness)
        wall = Wall(cx, cy, inner, outer)
        a = rng.uniform(*params.tumor_axes)
        b = rng.uniform(*params.tumor_axes)
        angle = rng.uniform(0.0, math.pi)
        theta = rng.uniform(0.0, 2 * math.pi)
        h = _radial_extent(a, b, angle, theta)
        invasive = rng.random() < params.p_invasive
        if invasive:
            # reach past the outer edge while keeping part of the tumor in the lumen
            hi = min(outer + h, inner - 2.0 + 2 * h)
            far = rng.uniform(outer + 3.0, max(hi, outer + 3.0))
        else:
            far = rng.uniform(inner + 1.0, inner + 0.5 * (outer - inner))
        rc = far - h
        tumor = Tumor(cx + rc * math.cos(theta), cy + rc * math.sin(theta), a, b, angle)
        bb = tumor.bounding_box()
        if bb.x1 < 1 or bb.y1 < 1 or bb.x2 > size - 1 or bb.y2 > size - 1:
            continue
        return render_scene(size, wall, tumor, params.noise_sigma, rng)
    raise RuntimeError("could not place a tumor inside the image; check parameter ranges")


# ---------------------------------------------------------------- on-disk format

def write_pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PGM from a float image in [0, 1]."""
    img8 = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img8.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img8.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """Read an 8-bit P5 PGM written by :func:`write_pgm` as uint8."""
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pos += 1
    return np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    params: dict
    splits: dict            # split -> list of records

    def records(self, split: str) -> list[dict]:
        return self.splits[split]


def _scene_seed(seed: int, split: str, index: int) -> list[int]:
    return [seed, SPLITS.index(split), index]


def write_dataset(n_train: int, n_test: int, seed: int, out_dir,
                  params: PhantomParams = PhantomParams()) -> DatasetManifest:
    """Render and write a train/test split; output bytes depend only on the arguments."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    params.validate()
    root = Path(out_dir)
    splits = {}
    try:
        (root / "annotations").mkdir(parents=True, exist_ok=True)
        for split, n in (("train", n_train), ("test", n_test)):
            img_dir = root / "images" / split
            img_dir.mkdir(parents=True, exist_ok=True)
            records = []
            for i in range(n):
                scene = generate_scene(_scene_seed(seed, split, i), params)
                rel = f"images/{split}/{i:05d}.pgm"
                write_pgm(root / rel, scene.image)
                records.append({"image": rel, "class_id": int(scene.class_id),
                                "box": [int(v) for v in scene.box.as_tuple()]})
            lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
            (root / "annotations" / f"{split}.jsonl").write_text(lines)
            splits[split] = records
        manifest = {"seed": seed, "params": asdict(params),
                    "splits": {s: {"count": len(r), "annotations": f"annotations/{s}.jsonl"}
                               for s, r in splits.items()}}
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing dataset under {root}: {exc}") from exc
    return DatasetManifest(root, seed, asdict(params), splits)


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    meta = json.loads(path.read_text())
    splits = {}
    for split, info in meta["splits"].items():
        lines = (root / info["annotations"]).read_text().splitlines()
        splits[split] = [json.loads(line) for line in lines if line.strip()]
    return DatasetManifest(root, meta["seed"], meta["params"], splits)


def load_split(root, split: str) -> list[tuple[np.ndarray, Box, int]]:
    """(image in [0, 1], gt box, class id) for every record in a split."""
    manifest = read_manifest(root)
    out = []
    for rec in manifest.records(split):
        img = read_pgm(manifest.root / rec["image"]).astype(np.float64) / 255.0
        out.append((img, Box(*map(float, rec["box"])), int(rec["class_id"])))
    return out


def dataset_digest(root) -> str:
    """SHA-256 over every file of a written dataset, in path order."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()
