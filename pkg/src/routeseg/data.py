"""Deterministic synthetic referring-segmentation data.

Scenes contain 2-5 disjoint colored shapes on a neutral background; each
sample carries one templated expression that identifies exactly one object,
plus that object's exact rasterized mask. Three expression dialects control
the available lexicon: 'spatial' may use absolute position words,
'appearance' is restricted to color/size/shape, 'relational' composes two
clauses through a spatial relation.

Expression emission and expression resolution are written as independent
code paths over the same published word semantics, so resolution doubles as
an oracle for generator correctness.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "WORDS",
    "VOCAB",
    "SPATIAL_LEXICON",
    "SHAPES",
    "COLORS",
    "SIZES",
    "DIALECTS",
    "SceneObject",
    "SceneSpec",
    "SampleRecord",
    "DatasetConfig",
    "Dataset",
    "GenConstraints",
    "GenerationError",
    "DatasetFormatError",
    "generate_scene",
    "emit_expression",
    "resolve_expression",
    "render",
    "object_mask",
    "generate_sample",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "tokenize",
    "random_mask_baseline",
]


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Lexicon
# --------------------------------------------------------------------------

WORDS = (
    "<bos>", "the", "a", "an",
    "circle", "square", "triangle",
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple",
    "small", "large", "big", "tiny",
    "left", "right", "top", "bottom", "middle", "center",
    "on", "in", "of", "to", "at", "near", "side",
    "above", "below", "over", "under", "next", "beside", "between",
    "is", "that", "this", "which",
    "shape", "object", "thing", "one",
    "upper", "lower", "corner", "edge",
    "and", "not", "with", "by", "far", "close",
)
VOCAB = {w: i for i, w in enumerate(WORDS)}

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple")
SIZES = ("small", "large")
DIALECTS = ("spatial", "appearance", "relational")

# Words whose meaning is positional; the appearance dialect must avoid all
# of them (checked by the dialect-purity tests).
SPATIAL_LEXICON = frozenset(
    {
        "left", "right", "top", "bottom", "middle", "center", "above", "below",
        "over", "under", "near", "beside", "next", "between", "upper", "lower",
        "corner", "edge", "side", "far", "close",
    }
)

BACKGROUND = (0.5, 0.5, 0.5)
COLOR_VALUES = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.90, 0.10),
    "cyan": (0.10, 0.80, 0.85),
    "magenta": (0.85, 0.15, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.55, 0.15, 0.85),
}
# Palette index 0 is the background; color i sits at index i + 1.
PALETTE = np.array([BACKGROUND] + [COLOR_VALUES[c] for c in COLORS])

SIZE_RADIUS = {"small": 7, "large": 12}  # half-extents at image size 64

# Position-word semantics (fractions of the image span). Both the emitter
# and the resolver consult these numbers; the matching logic is duplicated.
BUCKET_LOW = 1.0 / 3.0
BUCKET_HIGH = 2.0 / 3.0
RELATION_MARGIN = 4  # pixels by which centers must differ for a relation


def tokenize(text: str) -> list[int]:
    ids = []
    for word in text.split():
        if word not in VOCAB:
            raise GenerationError(f"word {word!r} not in vocabulary")
        ids.append(VOCAB[word])
    return ids


# --------------------------------------------------------------------------
# Scene model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    cx: int
    cy: int

    def radius(self, image_size: int) -> int:
        return max(3, round(SIZE_RADIUS[self.size] * image_size / 64))

    def bounding_radius(self, image_size: int) -> int:
        r = self.radius(image_size)
        return r if self.shape == "circle" else int(np.ceil(r * np.sqrt(2.0)))


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    image_size: int

    def __post_init__(self):
        if not 2 <= len(self.objects) <= 5:
            raise GenerationError(f"scenes hold 2-5 objects, got {len(self.objects)}")


@dataclass
class GenConstraints:
    n_min: int = 2
    n_max: int = 5
    separation_gap: int = 3
    max_position_attempts: int = 1000
    max_scene_attempts: int = 64


@dataclass
class SampleRecord:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    index_image: np.ndarray  # (H, W) uint8 palette indices
    mask: np.ndarray  # (H, W) uint8
    expression: str
    expression_ids: list[int]
    scene: SceneSpec
    referent: int
    dialect: str
    sample_index: int
    seed: int


# --------------------------------------------------------------------------
# Geometry and rendering
# --------------------------------------------------------------------------

def object_mask(obj: SceneObject, image_size: int) -> np.ndarray:
    """Exact hard rasterization of one object (no anti-aliasing)."""
    ys, xs = np.mgrid[0:image_size, 0:image_size]
    r = obj.radius(image_size)
    dx = xs - obj.cx
    dy = ys - obj.cy
    if obj.shape == "circle":
        inside = dx * dx + dy * dy <= r * r
    elif obj.shape == "square":
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif obj.shape == "triangle":
        # Upward triangle: apex (cx, cy - r), base corners (cx +- r, cy + r).
        inside = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    else:
        raise GenerationError(f"unknown shape {obj.shape!r}")
    return inside.astype(np.uint8)


def render(spec: SceneSpec, referent_index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rasterize a scene; returns (float image, palette-index image, referent mask)."""
    if not 0 <= referent_index < len(spec.objects):
        raise GenerationError(f"referent index {referent_index} out of range")
    size = spec.image_size
    index_image = np.zeros((size, size), dtype=np.uint8)
    for obj in spec.objects:
        mask = object_mask(obj, size).astype(bool)
        index_image[mask] = COLORS.index(obj.color) + 1
    image = np.ascontiguousarray(PALETTE[index_image].transpose(2, 0, 1))
    mask = object_mask(spec.objects[referent_index], size)
    return image, index_image, mask


def _bucket_flags(obj: SceneObject, image_size: int) -> dict[str, bool]:
    fx = obj.cx / image_size
    fy = obj.cy / image_size
    return {
        "left": fx < BUCKET_LOW,
        "right": fx >= BUCKET_HIGH,
        "top": fy < BUCKET_LOW,
        "bottom": fy >= BUCKET_HIGH,
        "middle": BUCKET_LOW <= fx < BUCKET_HIGH and BUCKET_LOW <= fy < BUCKET_HIGH,
    }


def _relation_holds(relation: str, a: SceneObject, b: SceneObject) -> bool:
    """True when object ``a`` stands in ``relation`` to object ``b``."""
    if relation == "left":
        return a.cx <= b.cx - RELATION_MARGIN
    if relation == "right":
        return a.cx >= b.cx + RELATION_MARGIN
    if relation == "above":
        return a.cy <= b.cy - RELATION_MARGIN
    if relation == "below":
        return a.cy >= b.cy + RELATION_MARGIN
    raise GenerationError(f"unknown relation {relation!r}")


# --------------------------------------------------------------------------
# Scene generation
# --------------------------------------------------------------------------

def generate_scene(
    rng: np.random.Generator,
    image_size: int = 64,
    constraints: Optional[GenConstraints] = None,
) -> SceneSpec:
    """Sample disjoint objects by bounded rejection on positions.

    A stalled layout (e.g. five large objects that cannot coexist) redraws
    the object count and attributes; the global attempt budget still bounds
    the whole search.
    """
    c = constraints or GenConstraints()
    attempts = 0
    while attempts < c.max_position_attempts:
        n = int(rng.integers(c.n_min, c.n_max + 1))
        objects: list[SceneObject] = []
        stalled = 0
        while len(objects) < n and attempts < c.max_position_attempts and stalled < 60:
            attempts += 1
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            color = COLORS[int(rng.integers(len(COLORS)))]
            size = SIZES[0] if rng.random() < 0.65 else SIZES[1]
            probe = SceneObject(shape, color, size, 0, 0)
            br = probe.bounding_radius(image_size)
            lo, hi = br + 1, image_size - br - 2
            if lo >= hi:
                raise GenerationError(f"image size {image_size} too small for a {size} {shape}")
            cx = int(rng.integers(lo, hi + 1))
            cy = int(rng.integers(lo, hi + 1))
            candidate = SceneObject(shape, color, size, cx, cy)
            ok = True
            for other in objects:
                min_dist = (
                    candidate.bounding_radius(image_size)
                    + other.bounding_radius(image_size)
                    + c.separation_gap
                )
                if (cx - other.cx) ** 2 + (cy - other.cy) ** 2 < min_dist**2:
                    ok = False
                    break
            if ok:
                objects.append(candidate)
                stalled = 0
            else:
                stalled += 1
        if len(objects) == n:
            return SceneSpec(objects=objects, image_size=image_size)
    raise GenerationError(
        f"could not build a scene within {c.max_position_attempts} placement attempts "
        f"(image {image_size})"
    )


# --------------------------------------------------------------------------
# Expression emission (generator-side matching)
# --------------------------------------------------------------------------

_ATTR_SUBSETS = (("shape",), ("color", "shape"), ("size", "shape"), ("size", "color", "shape"))
_RELATIONS = ("left", "right", "above", "below")


def _core_words(obj: SceneObject, attrs: Sequence[str], article: str = "the") -> list[str]:
    words = [article]
    if "size" in attrs:
        words.append(obj.size)
    if "color" in attrs:
        words.append(obj.color)
    words.append(obj.shape)
    return words


def _core_matches(obj: SceneObject, ref: SceneObject, attrs: Sequence[str]) -> bool:
    if obj.shape != ref.shape:
        return False
    if "color" in attrs and obj.color != ref.color:
        return False
    if "size" in attrs and obj.size != ref.size:
        return False
    return True


def _emit_appearance(scene: SceneSpec, referent: int, rng) -> Optional[list[str]]:
    ref = scene.objects[referent]
    for attrs in _ATTR_SUBSETS:
        matches = [i for i, o in enumerate(scene.objects) if _core_matches(o, ref, attrs)]
        if matches == [referent]:
            return _core_words(ref, attrs, article="the" if rng.random() < 0.8 else "a")
    return None


def _emit_positional(scene: SceneSpec, referent: int, rng) -> Optional[list[str]]:
    ref = scene.objects[referent]
    flags = _bucket_flags(ref, scene.image_size)
    for attrs in _ATTR_SUBSETS:
        core = [i for i, o in enumerate(scene.objects) if _core_matches(o, ref, attrs)]
        for bucket in ("left", "right", "top", "bottom", "middle"):
            if not flags[bucket]:
                continue
            hits = [
                i
                for i in core
                if _bucket_flags(scene.objects[i], scene.image_size)[bucket]
            ]
            if hits == [referent]:
                words = _core_words(ref, attrs)
                if bucket == "middle":
                    words += ["in", "the", "middle"]
                elif rng.random() < 0.5:
                    words += ["on", "the", bucket]
                else:
                    words += ["on", "the", bucket, "side"]
                return words
    return None


def _emit_spatial(scene: SceneSpec, referent: int, rng) -> Optional[list[str]]:
    # Mirror location-heavy benchmarks: half the expressions lead with a
    # positional qualifier even when appearance alone would disambiguate.
    prefer_position = rng.random() < 0.5
    first, second = (
        (_emit_positional, _emit_appearance) if prefer_position else (_emit_appearance, _emit_positional)
    )
    words = first(scene, referent, rng)
    if words is None:
        words = second(scene, referent, rng)
    return words


def _emit_relational(scene: SceneSpec, referent: int, rng) -> Optional[list[str]]:
    ref = scene.objects[referent]
    for attrs in _ATTR_SUBSETS:
        core = [i for i, o in enumerate(scene.objects) if _core_matches(o, ref, attrs)]
        for anchor_idx, anchor in enumerate(scene.objects):
            if anchor_idx == referent:
                continue
            anchor_attrs = None
            for a_attrs in _ATTR_SUBSETS:
                anchor_hits = [
                    i for i, o in enumerate(scene.objects) if _core_matches(o, anchor, a_attrs)
                ]
                if anchor_hits == [anchor_idx]:
                    anchor_attrs = a_attrs
                    break
            if anchor_attrs is None:
                continue
            for relation in _RELATIONS:
                if not _relation_holds(relation, ref, anchor):
                    continue
                hits = [
                    i
                    for i in core
                    if i != anchor_idx and _relation_holds(relation, scene.objects[i], anchor)
                ]
                if hits == [referent]:
                    words = _core_words(ref, attrs)
                    words += [relation, "of"] if relation in ("left", "right") else [relation]
                    words += _core_words(anchor, anchor_attrs)
                    return words
    return None


_EMITTERS = {
    "spatial": _emit_spatial,
    "appearance": _emit_appearance,
    "relational": _emit_relational,
}


def emit_expression(
    scene: SceneSpec,
    referent: int,
    dialect: str,
    rng: np.random.Generator,
) -> Optional[str]:
    """Shortest unambiguous expression for the referent, or None."""
    if dialect not in _EMITTERS:
        raise GenerationError(f"unknown dialect {dialect!r}")
    words = _EMITTERS[dialect](scene, referent, rng)
    return None if words is None else " ".join(words)


# --------------------------------------------------------------------------
# Expression resolution (oracle; independent of the emitter)
# --------------------------------------------------------------------------

_ARTICLES = {"the", "a", "an"}
_FILLERS = {"on", "in", "at", "to", "side", "is", "that", "this", "which"}


def _parse_core(words: list[str], pos: int) -> tuple[dict, int]:
    """Read '[article] [size] [color] shape' starting at pos."""
    spec: dict = {"size": None, "color": None, "shape": None}
    if pos < len(words) and words[pos] in _ARTICLES:
        pos += 1
    while pos < len(words):
        w = words[pos]
        if w in SIZES and spec["size"] is None and spec["shape"] is None:
            spec["size"] = w
        elif w in COLORS and spec["color"] is None and spec["shape"] is None:
            spec["color"] = w
        elif w in SHAPES and spec["shape"] is None:
            spec["shape"] = w
            pos += 1
            break
        else:
            raise GenerationError(f"cannot parse core at word {w!r}")
        pos += 1
    if spec["shape"] is None:
        raise GenerationError("expression has no shape word")
    return spec, pos


def _core_filter(scene: SceneSpec, spec: dict) -> list[int]:
    out = []
    for i, o in enumerate(scene.objects):
        if o.shape != spec["shape"]:
            continue
        if spec["color"] is not None and o.color != spec["color"]:
            continue
        if spec["size"] is not None and o.size != spec["size"]:
            continue
        out.append(i)
    return out


def _position_filter(scene: SceneSpec, indices: list[int], bucket: str) -> list[int]:
    size = scene.image_size
    keep = []
    for i in indices:
        o = scene.objects[i]
        fx, fy = o.cx / size, o.cy / size
        if bucket == "left":
            hit = fx < BUCKET_LOW
        elif bucket == "right":
            hit = fx >= BUCKET_HIGH
        elif bucket == "top":
            hit = fy < BUCKET_LOW
        elif bucket == "bottom":
            hit = fy >= BUCKET_HIGH
        elif bucket in ("middle", "center"):
            hit = BUCKET_LOW <= fx < BUCKET_HIGH and BUCKET_LOW <= fy < BUCKET_HIGH
        else:
            raise GenerationError(f"unknown position word {bucket!r}")
        if hit:
            keep.append(i)
    return keep


def resolve_expression(expression: str, scene: SceneSpec) -> list[int]:
    """All object indices the expression denotes (oracle semantics)."""
    words = expression.split()
    spec, pos = _parse_core(words, 0)
    candidates = _core_filter(scene, spec)
    rest = [w for w in words[pos:] if w not in _FILLERS and w not in _ARTICLES]
    if not rest:
        return candidates
    head = rest[0]
    if head in ("left", "right") and len(rest) == 1:
        return _position_filter(scene, candidates, head)
    if head in ("top", "bottom", "middle", "center") and len(rest) == 1:
        return _position_filter(scene, candidates, head)
    if head in ("left", "right", "above", "below"):
        # Relational clause: remaining words describe the anchor.
        anchor_start = pos + words[pos:].index("of") + 1 if head in ("left", "right") else pos + 1
        # Recompute from the raw word list to keep articles intact.
        raw_rest = words[pos:]
        if head in ("left", "right"):
            if "of" not in raw_rest:
                raise GenerationError("relational expression missing 'of'")
            anchor_words = raw_rest[raw_rest.index("of") + 1 :]
        else:
            anchor_words = raw_rest[raw_rest.index(head) + 1 :]
        anchor_spec, _ = _parse_core(anchor_words, 0)
        anchors = _core_filter(scene, anchor_spec)
        if len(anchors) != 1:
            return []
        anchor = scene.objects[anchors[0]]
        size = scene.image_size
        out = []
        for i in candidates:
            if i == anchors[0]:
                continue
            o = scene.objects[i]
            if head == "left" and o.cx <= anchor.cx - RELATION_MARGIN:
                out.append(i)
            elif head == "right" and o.cx >= anchor.cx + RELATION_MARGIN:
                out.append(i)
            elif head == "above" and o.cy <= anchor.cy - RELATION_MARGIN:
                out.append(i)
            elif head == "below" and o.cy >= anchor.cy + RELATION_MARGIN:
                out.append(i)
        del size, anchor_start
        return out
    raise GenerationError(f"cannot interpret qualifier {head!r}")


# --------------------------------------------------------------------------
# Dataset assembly and persistence
# --------------------------------------------------------------------------

FORMAT_VERSION = 1
_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}
_DIALECT_IDS = {d: i for i, d in enumerate(DIALECTS)}


@dataclass
class DatasetConfig:
    dialect: str = "spatial"
    split: str = "train"
    size: int = 2000
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.dialect not in DIALECTS:
            raise GenerationError(f"unknown dialect {self.dialect!r}")
        if self.split not in _SPLIT_IDS:
            raise GenerationError(f"unknown split {self.split!r}")

    def to_dict(self) -> dict:
        return {
            "dialect": self.dialect,
            "split": self.split,
            "size": self.size,
            "image_size": self.image_size,
            "seed": self.seed,
        }

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Dataset:
    config: DatasetConfig
    records: list[SampleRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def _sample_rng(cfg: DatasetConfig, index: int) -> np.random.Generator:
    seq = np.random.SeedSequence(
        entropy=cfg.seed,
        spawn_key=(_DIALECT_IDS[cfg.dialect], _SPLIT_IDS[cfg.split], index),
    )
    return np.random.Generator(np.random.PCG64(seq))


def generate_sample(cfg: DatasetConfig, index: int, constraints: Optional[GenConstraints] = None) -> SampleRecord:
    """Build one sample; each index owns an rng stream, so generation order
    (or parallelism) cannot change the result."""
    c = constraints or GenConstraints()
    rng = _sample_rng(cfg, index)
    for _ in range(c.max_scene_attempts):
        try:
            scene = generate_scene(rng, cfg.image_size, c)
        except GenerationError:
            continue
        order = rng.permutation(len(scene.objects))
        for referent in order:
            expression = emit_expression(scene, int(referent), cfg.dialect, rng)
            if expression is None:
                continue
            image, index_image, mask = render(scene, int(referent))
            return SampleRecord(
                image=image,
                index_image=index_image,
                mask=mask,
                expression=expression,
                expression_ids=tokenize(expression),
                scene=scene,
                referent=int(referent),
                dialect=cfg.dialect,
                sample_index=index,
                seed=cfg.seed,
            )
    raise GenerationError(
        f"no identifiable scene after {c.max_scene_attempts} attempts "
        f"(dialect {cfg.dialect}, sample {index})"
    )


def generate_dataset(cfg: DatasetConfig, constraints: Optional[GenConstraints] = None) -> Dataset:
    records = [generate_sample(cfg, i, constraints) for i in range(cfg.size)]
    return Dataset(config=cfg, records=records)


def _pack_record(rec: SampleRecord) -> bytes:
    out = bytearray()
    ids = rec.expression_ids
    out += struct.pack("<H", len(ids))
    out += struct.pack(f"<{len(ids)}H", *ids)
    raw_expr = rec.expression.encode("utf-8")
    out += struct.pack("<H", len(raw_expr))
    out += raw_expr
    out += struct.pack("<BBB", _DIALECT_IDS[rec.dialect], len(rec.scene.objects), rec.referent)
    for obj in rec.scene.objects:
        out += struct.pack(
            "<BBBhh",
            SHAPES.index(obj.shape),
            COLORS.index(obj.color),
            SIZES.index(obj.size),
            obj.cx,
            obj.cy,
        )
    out += rec.index_image.tobytes()
    out += rec.mask.tobytes()
    return bytes(out)


def _unpack_record(buf: bytes, cfg: DatasetConfig, index: int) -> SampleRecord:
    view = memoryview(buf)
    pos = 0
    (n_ids,) = struct.unpack_from("<H", view, pos)
    pos += 2
    ids = list(struct.unpack_from(f"<{n_ids}H", view, pos))
    pos += 2 * n_ids
    (expr_len,) = struct.unpack_from("<H", view, pos)
    pos += 2
    expression = bytes(view[pos : pos + expr_len]).decode("utf-8")
    pos += expr_len
    dialect_id, n_objects, referent = struct.unpack_from("<BBB", view, pos)
    pos += 3
    objects = []
    for _ in range(n_objects):
        s, col, sz, cx, cy = struct.unpack_from("<BBBhh", view, pos)
        pos += 7
        objects.append(SceneObject(SHAPES[s], COLORS[col], SIZES[sz], cx, cy))
    size = cfg.image_size
    index_image = np.frombuffer(view[pos : pos + size * size], dtype=np.uint8).reshape(size, size).copy()
    pos += size * size
    mask = np.frombuffer(view[pos : pos + size * size], dtype=np.uint8).reshape(size, size).copy()
    pos += size * size
    if pos != len(buf):
        raise DatasetFormatError(f"sample {index}: {len(buf) - pos} trailing bytes")
    scene = SceneSpec(objects=objects, image_size=size)
    image = np.ascontiguousarray(PALETTE[index_image].transpose(2, 0, 1))
    return SampleRecord(
        image=image,
        index_image=index_image,
        mask=mask,
        expression=expression,
        expression_ids=ids,
        scene=scene,
        referent=referent,
        dialect=DIALECTS[dialect_id],
        sample_index=index,
        seed=cfg.seed,
    )


def write_dataset(ds: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    offsets = []
    blobs = []
    pos = 0
    for rec in ds.records:
        blob = _pack_record(rec)
        offsets.append([pos, len(blob)])
        blobs.append(blob)
        pos += len(blob)
    payload = b"".join(blobs)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": ds.config.to_dict(),
        "config_hash": ds.config.hash(),
        "n_samples": len(ds.records),
        "offsets": offsets,
        "samples_sha256": hashlib.sha256(payload).hexdigest(),
        "vocab_sha256": hashlib.sha256(" ".join(WORDS).encode()).hexdigest(),
    }
    (directory / "samples.bin").write_bytes(payload)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest["format_version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset format {manifest['format_version']}")
    cfg = DatasetConfig(**manifest["config"])
    if cfg.hash() != manifest["config_hash"]:
        raise DatasetFormatError("manifest config hash mismatch; refusing to load")
    if manifest["vocab_sha256"] != hashlib.sha256(" ".join(WORDS).encode()).hexdigest():
        raise DatasetFormatError("dataset was generated with a different vocabulary")
    payload = (directory / "samples.bin").read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["samples_sha256"]:
        raise DatasetFormatError("samples.bin checksum mismatch (corrupt or truncated)")
    records = []
    for i, (start, length) in enumerate(manifest["offsets"]):
        records.append(_unpack_record(payload[start : start + length], cfg, i))
    if len(records) != manifest["n_samples"]:
        raise DatasetFormatError("sample count mismatch")
    return Dataset(config=cfg, records=records)


# --------------------------------------------------------------------------
# Oracle baselines
# --------------------------------------------------------------------------

def random_mask_baseline(ds: Dataset) -> float:
    """Expected mIoU (percent) of predicting a uniformly random object's mask.

    Computed exactly from rendered masks: the expectation over the uniform
    object choice equals the mean IoU against the true referent mask.
    """
    total = 0.0
    for rec in ds.records:
        gt = rec.mask.astype(bool)
        per_object = []
        for i, obj in enumerate(rec.scene.objects):
            pred = object_mask(obj, rec.scene.image_size).astype(bool)
            inter = float(np.logical_and(pred, gt).sum())
            union = float(np.logical_or(pred, gt).sum())
            per_object.append(1.0 if union == 0 else inter / union)
        total += sum(per_object) / len(per_object)
    return 100.0 * total / len(ds.records)
