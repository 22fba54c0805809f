"""Dataset schemas, annotation I/O, synthetic scenes and zero-shot splits."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import DatasetParseError, InvalidConfigError, RegistryError, SplitError

SPLIT_KINDS = ("RF-UC", "NF-UC", "UO", "UV")


@dataclass(frozen=True)
class HOITriplet:
    """One <human, verb, object> annotation with normalized cxcywh boxes."""

    human_box: Tuple[float, float, float, float]
    object_box: Tuple[float, float, float, float]
    object_class: int
    verb_class: int
    hoi_class: int

    def __post_init__(self):
        for box in (self.human_box, self.object_box):
            if len(box) != 4:
                raise ValueError(f"box must have 4 coordinates, got {box!r}")
            if not all(0.0 <= c <= 1.0 for c in box):
                raise ValueError(f"box coordinates outside [0, 1]: {box!r}")
            if box[2] <= 0 or box[3] <= 0:
                raise ValueError(f"box must have positive extent: {box!r}")


@dataclass(frozen=True)
class HOISample:
    image: np.ndarray
    triplets: Tuple[HOITriplet, ...]
    image_id: str

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError(f"image must be H x W x C, got shape {self.image.shape}")
        self.image.setflags(write=False)
        object.__setattr__(self, "triplets", tuple(self.triplets))

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class CategoryRegistry:
    objects: Tuple[str, ...]
    verbs: Tuple[str, ...]
    hoi_pairs: Tuple[Tuple[int, int], ...]  # (verb id, object id)
    phrases: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "verbs", tuple(self.verbs))
        pairs = tuple((int(v), int(o)) for v, o in self.hoi_pairs)
        object.__setattr__(self, "hoi_pairs", pairs)
        object.__setattr__(self, "phrases", {int(k): str(v) for k, v in dict(self.phrases).items()})
        if len(set(pairs)) != len(pairs):
            raise RegistryError("duplicate (verb, object) pair in hoi_pairs")
        for v, o in pairs:
            if not (0 <= v < len(self.verbs) and 0 <= o < len(self.objects)):
                raise RegistryError(f"hoi pair ({v}, {o}) references an unknown verb or object")
        for k in self.phrases:
            if not 0 <= k < len(pairs):
                raise RegistryError(f"phrase key {k} is not a valid hoi id")
        object.__setattr__(self, "_pair_index", {p: i for i, p in enumerate(pairs)})

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def num_verbs(self) -> int:
        return len(self.verbs)

    @property
    def num_hois(self) -> int:
        return len(self.hoi_pairs)

    def hoi_id(self, verb: int, obj: int) -> int:
        try:
            return self._pair_index[(verb, obj)]
        except KeyError:
            raise RegistryError(
                f"({self.verbs[verb]!r}, {self.objects[obj]!r}) is not a registered hoi pair"
            ) from None

    def object_id(self, name: str) -> int:
        try:
            return self.objects.index(name)
        except ValueError:
            raise RegistryError(f"unknown object class {name!r}") from None

    def verb_id(self, name: str) -> int:
        try:
            return self.verbs.index(name)
        except ValueError:
            raise RegistryError(f"unknown verb class {name!r}") from None

    def phrase(self, hoi_id: int) -> str:
        if hoi_id in self.phrases:
            return self.phrases[hoi_id]
        v, o = self.hoi_pairs[hoi_id]
        return f"human {self.verbs[v].replace('_', ' ')} {self.objects[o]}"

    def to_json(self) -> dict:
        return {
            "objects": list(self.objects),
            "verbs": list(self.verbs),
            "hoi_pairs": [[self.verbs[v], self.objects[o]] for v, o in self.hoi_pairs],
            "phrases": {str(k): v for k, v in sorted(self.phrases.items())},
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "CategoryRegistry":
        objects, verbs = list(doc["objects"]), list(doc["verbs"])
        pairs = []
        for v, o in doc["hoi_pairs"]:
            vi = verbs.index(v) if isinstance(v, str) else int(v)
            oi = objects.index(o) if isinstance(o, str) else int(o)
            pairs.append((vi, oi))
        phrases = {int(k): v for k, v in doc.get("phrases", {}).items()}
        return cls(objects, verbs, pairs, phrases)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CategoryRegistry":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except (KeyError, ValueError, TypeError) as exc:
            raise RegistryError(f"malformed registry file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# box conventions


def corners_to_normalized(box, width, height):
    x1, y1, x2, y2 = (float(c) for c in box)
    return ((x1 + x2) / 2 / width, (y1 + y2) / 2 / height, (x2 - x1) / width, (y2 - y1) / height)


def normalized_to_corners(box, width, height):
    cx, cy, w, h = box
    return [(cx - w / 2) * width, (cy - h / 2) * height, (cx + w / 2) * width, (cy + h / 2) * height]


# ---------------------------------------------------------------------------
# annotation files


def read_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return (arr.astype(np.float64) / 255.0).astype(np.float32)


def write_image(path: Path, image: np.ndarray) -> None:
    if path.suffix == ".npy":
        np.save(path, image)
        return
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def _parse_record(rec, registry, base_dir, lineno) -> HOISample:
    try:
        image_id = str(rec["image_id"])
        width, height = int(rec["width"]), int(rec["height"])
        raw_triplets = rec["triplets"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(lineno, f"missing or invalid field: {exc}") from exc
    if "pixels" in rec:
        image = np.asarray(rec["pixels"], dtype=np.float32)
    elif "file" in rec:
        image = read_image(base_dir / rec["file"])
    else:
        raise DatasetParseError(lineno, "record has neither 'pixels' nor 'file'")
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[:2] != (height, width):
        raise DatasetParseError(
            lineno, f"image shape {image.shape[:2]} disagrees with height/width ({height}, {width})"
        )
    triplets = []
    for t in raw_triplets:
        try:
            h_box, o_box, obj_name, verb_name = t["h_box"], t["o_box"], t["object"], t["verb"]
        except (KeyError, TypeError) as exc:
            raise DatasetParseError(lineno, f"malformed triplet: {exc}") from exc
        obj, verb = registry.object_id(obj_name), registry.verb_id(verb_name)
        try:
            triplets.append(
                HOITriplet(
                    corners_to_normalized(h_box, width, height),
                    corners_to_normalized(o_box, width, height),
                    obj,
                    verb,
                    registry.hoi_id(verb, obj),
                )
            )
        except (ValueError, TypeError) as exc:
            if isinstance(exc, RegistryError):
                raise
            raise DatasetParseError(lineno, str(exc)) from exc
    return HOISample(image, tuple(triplets), image_id)


def load_dataset(path, registry: CategoryRegistry) -> List[HOISample]:
    """Read a JSON-lines annotation file into validated samples."""
    path = Path(path)
    samples = []
    with path.open() as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(lineno, f"invalid JSON: {exc.msg}") from exc
            samples.append(_parse_record(rec, registry, path.parent, lineno))
    return samples


def save_dataset(samples: Sequence[HOISample], path, registry: CategoryRegistry, image_dir=None) -> None:
    """Write samples as JSON lines.

    With ``image_dir`` (relative to the annotation file) images are written as
    PNG files; otherwise pixels are stored inline.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if image_dir is not None:
        (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for s in samples:
            rec = {"image_id": s.image_id, "width": s.width, "height": s.height}
            if image_dir is None:
                rec["pixels"] = s.image.tolist()
            else:
                rel = f"{image_dir}/{s.image_id}.png"
                write_image(path.parent / rel, s.image)
                rec["file"] = rel
            rec["triplets"] = [
                {
                    "h_box": normalized_to_corners(t.human_box, s.width, s.height),
                    "o_box": normalized_to_corners(t.object_box, s.width, s.height),
                    "object": registry.objects[t.object_class],
                    "verb": registry.verbs[t.verb_class],
                }
                for t in s.triplets
            ]
            f.write(json.dumps(rec) + "\n")


def hoi_counts(samples: Iterable[HOISample], registry: Optional[CategoryRegistry] = None) -> Dict[int, int]:
    counts = {i: 0 for i in range(registry.num_hois)} if registry is not None else {}
    for s in samples:
        for t in s.triplets:
            counts[t.hoi_class] = counts.get(t.hoi_class, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# synthetic scenes

OBJECT_NAMES = ("ball", "cup", "kite", "bottle", "chair", "book", "phone", "bag")
OBJECT_COLORS = (
    (0.1, 0.35, 1.0),
    (0.1, 0.9, 0.2),
    (0.9, 0.1, 0.8),
    (1.0, 1.0, 0.1),
    (0.1, 0.9, 0.9),
    (0.6, 0.3, 0.05),
    (0.5, 0.5, 0.5),
    (1.0, 0.5, 0.0),
)
HUMAN_COLOR = (1.0, 0.2, 0.2)
# verb name -> geometric predicate between human and object boxes
VERB_NAMES = ("hold", "above", "left_of", "right_of", "below", "far_from")


def _relation_holds(verb: str, h, o, gap: float) -> bool:
    hx1, hy1, hx2, hy2 = h
    ox1, oy1, ox2, oy2 = o
    ocx, ocy = (ox1 + ox2) / 2, (oy1 + oy2) / 2
    x_aligned = hx1 <= ocx <= hx2
    y_aligned = hy1 <= ocy <= hy2
    left = ox2 <= hx1 - gap
    right = ox1 >= hx2 + gap
    up = oy2 <= hy1 - gap
    down = oy1 >= hy2 + gap
    if verb == "hold":
        return x_aligned and y_aligned
    if verb == "above":
        return up and x_aligned
    if verb == "below":
        return down and x_aligned
    if verb == "left_of":
        return left and y_aligned
    if verb == "right_of":
        return right and y_aligned
    if verb == "far_from":
        return (left or right) and (up or down)
    raise ValueError(verb)


@dataclass(frozen=True)
class SynthSpec:
    num_objects: int = 3
    num_verbs: int = 4
    num_samples: int = 20
    image_size: Tuple[int, int] = (64, 64)
    hoi_weights: Optional[Tuple[float, ...]] = None
    triplets_per_image: Tuple[int, int] = (1, 2)
    noise: float = 0.04

    def validate(self):
        if self.num_objects <= 0 or self.num_verbs <= 0:
            raise InvalidConfigError("synthetic spec needs at least one object and one verb class")
        if self.num_objects > len(OBJECT_NAMES):
            raise InvalidConfigError(f"at most {len(OBJECT_NAMES)} synthetic object classes")
        if self.num_verbs > len(VERB_NAMES):
            raise InvalidConfigError(f"at most {len(VERB_NAMES)} geometric verbs")
        if self.num_samples < 0:
            raise InvalidConfigError("num_samples must be >= 0")
        lo, hi = self.triplets_per_image
        if not 1 <= lo <= hi:
            raise InvalidConfigError("triplets_per_image must satisfy 1 <= min <= max")
        if min(self.image_size) < 32:
            raise InvalidConfigError("synthetic images must be at least 32 pixels on each side")
        if self.hoi_weights is not None:
            if len(self.hoi_weights) != self.num_objects * self.num_verbs:
                raise InvalidConfigError("hoi_weights needs one weight per (verb, object) pair")
            if any(w < 0 for w in self.hoi_weights) or sum(self.hoi_weights) <= 0:
                raise InvalidConfigError("hoi_weights must be nonnegative with a positive sum")

    @classmethod
    def from_json(cls, doc: Mapping) -> "SynthSpec":
        doc = dict(doc)
        for key in ("image_size", "hoi_weights", "triplets_per_image"):
            if doc.get(key) is not None:
                doc[key] = tuple(doc[key])
        return cls(**doc)


def synthetic_registry(num_objects: int, num_verbs: int) -> CategoryRegistry:
    objects = OBJECT_NAMES[:num_objects]
    verbs = VERB_NAMES[:num_verbs]
    pairs = [(v, o) for v in range(num_verbs) for o in range(num_objects)]
    phrases = {i: f"human {verbs[v].replace('_', ' ')} {objects[o]}" for i, (v, o) in enumerate(pairs)}
    return CategoryRegistry(objects, verbs, pairs, phrases)


def _draw(image, box, color, shape):
    x1, y1, x2, y2 = (int(c) for c in box)
    if shape == 0:
        image[y1:y2, x1:x2] = color
        return
    yy, xx = np.mgrid[y1:y2, x1:x2]
    cx, cy = (x1 + x2 - 1) / 2, (y1 + y2 - 1) / 2
    rx, ry = max((x2 - x1) / 2, 0.5), max((y2 - y1) / 2, 0.5)
    if shape == 1:
        mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    else:
        mask = np.abs(xx - cx) / rx + np.abs(yy - cy) / ry <= 1.0
    # keep the glyph's extent equal to its box
    mask[:, [0, -1]] |= np.abs(yy[:, [0, -1]] - cy) < 1.0
    mask[[0, -1], :] |= np.abs(xx[[0, -1], :] - cx) < 1.0
    image[y1:y2, x1:x2][mask] = color


def _place_pair(rng, verb, height, width, occupied, max_tries=400):
    unit = min(height, width) / 64.0
    gap = 2 * unit
    for _ in range(max_tries):
        hw, hh = rng.integers(round(10 * unit), round(16 * unit) + 1), rng.integers(round(16 * unit), round(24 * unit) + 1)
        hx, hy = rng.integers(0, width - hw + 1), rng.integers(0, height - hh + 1)
        h = (int(hx), int(hy), int(hx + hw), int(hy + hh))
        if verb == "hold":
            ow, oh = rng.integers(round(6 * unit), round(9 * unit) + 1, size=2)
        else:
            ow, oh = rng.integers(round(8 * unit), round(13 * unit) + 1, size=2)
        for _ in range(60):
            ox, oy = rng.integers(0, width - ow + 1), rng.integers(0, height - oh + 1)
            o = (int(ox), int(oy), int(ox + ow), int(oy + oh))
            if _relation_holds(verb, h, o, gap):
                break
        else:
            continue
        union = (min(h[0], o[0]), min(h[1], o[1]), max(h[2], o[2]), max(h[3], o[3]))
        clash = any(
            union[0] < b[2] + gap and b[0] < union[2] + gap and union[1] < b[3] + gap and b[1] < union[3] + gap
            for b in occupied
        )
        if not clash:
            return h, o, union
    return None


def generate_synthetic(spec: SynthSpec, seed: int) -> Tuple[List[HOISample], CategoryRegistry]:
    """Render scenes whose verbs are geometric relations between glyphs.

    A red rectangle is the human; each object class has its own color and
    shape.  Output is a pure function of ``(spec, seed)``.
    """
    spec.validate()
    registry = synthetic_registry(spec.num_objects, spec.num_verbs)
    rng = np.random.default_rng(seed)
    height, width = spec.image_size
    if spec.hoi_weights is None:
        probs = np.full(registry.num_hois, 1.0 / registry.num_hois)
    else:
        w = np.asarray(spec.hoi_weights, dtype=np.float64)
        probs = w / w.sum()
    lo, hi = spec.triplets_per_image
    samples = []
    for idx in range(spec.num_samples):
        image = rng.uniform(0.0, spec.noise, size=(height, width, 3))
        n_trip = int(rng.integers(lo, hi + 1))
        occupied, placed = [], []
        for _ in range(n_trip):
            hoi = int(rng.choice(registry.num_hois, p=probs))
            verb, obj = registry.hoi_pairs[hoi]
            result = _place_pair(rng, registry.verbs[verb], height, width, occupied)
            if result is None:
                continue
            h, o, union = result
            occupied.append(union)
            placed.append((h, o, obj, verb, hoi))
        if not placed:
            # an empty canvas always fits one pair
            hoi = int(rng.choice(registry.num_hois, p=probs))
            verb, obj = registry.hoi_pairs[hoi]
            h, o, _ = _place_pair(rng, registry.verbs[verb], height, width, [], max_tries=10_000)
            placed.append((h, o, obj, verb, hoi))
        for h, _, _, _, _ in placed:
            _draw(image, h, HUMAN_COLOR, 0)
        for _, o, obj, _, _ in placed:
            _draw(image, o, OBJECT_COLORS[obj], obj % 3)
        image = (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)
        triplets = tuple(
            HOITriplet(
                corners_to_normalized(h, width, height),
                corners_to_normalized(o, width, height),
                obj,
                verb,
                hoi,
            )
            for h, o, obj, verb, hoi in placed
        )
        samples.append(HOISample(image, triplets, f"synth_{seed}_{idx:05d}"))
    return samples, registry


# ---------------------------------------------------------------------------
# zero-shot splits


@dataclass(frozen=True)
class ZeroShotSplit:
    kind: str
    unseen_hoi_ids: frozenset
    seen_hoi_ids: frozenset
    unseen_objects: frozenset = frozenset()
    unseen_verbs: frozenset = frozenset()

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "unseen_hoi_ids": sorted(self.unseen_hoi_ids),
            "seen_hoi_ids": sorted(self.seen_hoi_ids),
            "unseen_objects": sorted(self.unseen_objects),
            "unseen_verbs": sorted(self.unseen_verbs),
        }

    @classmethod
    def from_json(cls, doc: Mapping, registry: Optional[CategoryRegistry] = None) -> "ZeroShotSplit":
        unseen = frozenset(int(i) for i in doc["unseen_hoi_ids"])
        if "seen_hoi_ids" in doc:
            seen = frozenset(int(i) for i in doc["seen_hoi_ids"])
        elif registry is not None:
            seen = frozenset(range(registry.num_hois)) - unseen
        else:
            raise SplitError("split file lacks seen_hoi_ids and no registry was given")
        return cls(
            doc["kind"],
            unseen,
            seen,
            frozenset(int(i) for i in doc.get("unseen_objects", [])),
            frozenset(int(i) for i in doc.get("unseen_verbs", [])),
        )

    def digest(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path, registry: Optional[CategoryRegistry] = None) -> "ZeroShotSplit":
        return cls.from_json(json.loads(Path(path).read_text()), registry)


def _rarest(ids: Sequence[int], score: Mapping[int, int], k: int, descending: bool = False) -> List[int]:
    sign = -1 if descending else 1
    return sorted(ids, key=lambda i: (sign * score.get(i, 0), i))[:k]


def make_split(registry: CategoryRegistry, counts: Mapping[int, int], kind: str, k: Optional[int] = None) -> ZeroShotSplit:
    """Choose unseen categories by training frequency; ties go to the lower id."""
    if kind not in SPLIT_KINDS:
        raise SplitError(f"unknown split kind {kind!r}; expected one of {SPLIT_KINDS}")
    all_ids = list(range(registry.num_hois))
    if kind in ("RF-UC", "NF-UC"):
        available = registry.num_hois
    elif kind == "UO":
        available = registry.num_objects
    else:
        available = registry.num_verbs
    if k is None:
        k = max(1, round(0.2 * available))
    if not 0 <= k <= available:
        raise SplitError(f"k={k} outside [0, {available}] for {kind}")
    unseen_objects: frozenset = frozenset()
    unseen_verbs: frozenset = frozenset()
    if kind == "RF-UC":
        unseen = set(_rarest(all_ids, counts, k))
    elif kind == "NF-UC":
        unseen = set(_rarest(all_ids, counts, k, descending=True))
    elif kind == "UO":
        totals: Dict[int, int] = {}
        for i, (_, o) in enumerate(registry.hoi_pairs):
            totals[o] = totals.get(o, 0) + counts.get(i, 0)
        unseen_objects = frozenset(_rarest(range(registry.num_objects), totals, k))
        unseen = {i for i, (_, o) in enumerate(registry.hoi_pairs) if o in unseen_objects}
    else:
        totals = {}
        for i, (v, _) in enumerate(registry.hoi_pairs):
            totals[v] = totals.get(v, 0) + counts.get(i, 0)
        unseen_verbs = frozenset(_rarest(range(registry.num_verbs), totals, k))
        unseen = {i for i, (v, _) in enumerate(registry.hoi_pairs) if v in unseen_verbs}
    return ZeroShotSplit(kind, frozenset(unseen), frozenset(all_ids) - unseen, unseen_objects, unseen_verbs)


def filter_seen(samples: Sequence[HOISample], split: ZeroShotSplit) -> List[HOISample]:
    """Drop unseen-category triplets, and samples left with none."""
    kept = []
    for s in samples:
        trips = tuple(t for t in s.triplets if t.hoi_class in split.seen_hoi_ids)
        if trips:
            kept.append(HOISample(s.image, trips, s.image_id))
    return kept
