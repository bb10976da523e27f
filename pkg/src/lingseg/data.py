"""Synthetic referring-expression scenes plus the on-disk dataset format.

Scenes hold 2-4 non-overlapping colored shapes on a black canvas. Each
sample's expression is built from one of four templates and is guaranteed
(by construction and by a brute-force semantic check) to pick out exactly
one object; the mask is the exact rasterization of that object.

Relation scenes always contain a second object with the referent's exact
color and shape on the opposite side of the ground object, so the relation
is genuinely needed to resolve the expression.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import floor
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError, DatasetError, GenerationError

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
RELATIONS = ("left of", "right of", "above", "below")
REGIONS = ("left", "right", "top", "bottom")
TEMPLATES = ("attribute", "location", "relation", "superlative")

# documented margins: relations compare centers with a canvas-relative gap;
# superlatives need a clear size gap between the referent and its rivals
RELATION_MARGIN_FRAC = 1.0 / 16.0
SUPERLATIVE_MARGIN = 2.0


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cx: float
    cy: float
    size: float


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    canvas: tuple[int, int]


@dataclass
class Sample:
    image: np.ndarray           # (3,H,W) float32 in [0,1]
    expression: str
    mask: np.ndarray            # (H,W) uint8 in {0,1}
    ignore: np.ndarray          # (H,W) uint8 in {0,1}
    template: str | None = None
    scene: SceneSpec | None = None
    referent: int | None = None
    args: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SynthConfig:
    canvas: tuple[int, int] = (64, 64)
    templates: tuple[str, ...] = TEMPLATES
    template_weights: tuple[float, ...] | None = None
    min_objects: int = 2
    max_objects: int = 4

    def __post_init__(self):
        for t in self.templates:
            if t not in TEMPLATES:
                raise ConfigError(f"unknown template {t!r}")
        if not self.templates:
            raise ConfigError("at least one template must be enabled")
        if self.template_weights is not None and \
                len(self.template_weights) != len(self.templates):
            raise ConfigError("template_weights must match templates in length")
        if not 2 <= self.min_objects <= self.max_objects <= 4:
            raise ConfigError("object count range must satisfy 2 <= min <= max <= 4")


# ---------------------------------------------------------------------------
# rasterization


def rasterize(obj: SceneObject, canvas: tuple[int, int]) -> np.ndarray:
    """Hard (non-antialiased) membership mask of one object, pixel centers."""
    h, w = canvas
    ys = np.arange(h)[:, None] + 0.5
    xs = np.arange(w)[None, :] + 0.5
    half = obj.size / 2.0
    if obj.shape == "circle":
        member = (xs - obj.cx) ** 2 + (ys - obj.cy) ** 2 <= half * half
    elif obj.shape == "square":
        member = (np.abs(xs - obj.cx) <= half) & (np.abs(ys - obj.cy) <= half)
    elif obj.shape == "triangle":
        top = obj.cy - half
        member = (ys >= top) & (ys <= obj.cy + half) & \
                 (np.abs(xs - obj.cx) <= (ys - top) / 2.0)
    else:
        raise ConfigError(f"unknown shape {obj.shape!r}")
    return member.astype(np.uint8)


def render_scene(scene: SceneSpec) -> np.ndarray:
    h, w = scene.canvas
    img = np.zeros((3, h, w), dtype=np.float32)
    for obj in scene.objects:
        member = rasterize(obj, scene.canvas).astype(bool)
        rgb = COLORS[obj.color]
        for c in range(3):
            img[c][member] = rgb[c]
    return img


# ---------------------------------------------------------------------------
# template semantics (used for generation and for brute-force validation)


def _relation_holds(a: SceneObject, b: SceneObject, rel: str, margin: float) -> bool:
    if rel == "left of":
        return a.cx < b.cx - margin
    if rel == "right of":
        return a.cx > b.cx + margin
    if rel == "above":
        return a.cy < b.cy - margin
    if rel == "below":
        return a.cy > b.cy + margin
    raise ConfigError(f"unknown relation {rel!r}")


def _in_region(obj: SceneObject, region: str, canvas: tuple[int, int]) -> bool:
    h, w = canvas
    if region == "left":
        return obj.cx < w / 3.0
    if region == "right":
        return obj.cx > 2.0 * w / 3.0
    if region == "top":
        return obj.cy < h / 3.0
    if region == "bottom":
        return obj.cy > 2.0 * h / 3.0
    raise ConfigError(f"unknown region {region!r}")


def matching_objects(scene: SceneSpec, template: str, args: dict) -> set[int]:
    """Indices of objects the expression denotes under the template semantics.

    An expression is well-formed only when this returns a single index (and,
    for relations, when the ground description is unique too).
    """
    objs = scene.objects
    if template == "attribute":
        return {i for i, o in enumerate(objs)
                if o.color == args["color"] and o.shape == args["shape"]}
    if template == "location":
        return {i for i, o in enumerate(objs)
                if o.shape == args["shape"] and _in_region(o, args["region"], scene.canvas)}
    if template == "relation":
        grounds = [i for i, o in enumerate(objs)
                   if o.color == args["ground_color"] and o.shape == args["ground_shape"]]
        if len(grounds) != 1:
            return set()
        margin = RELATION_MARGIN_FRAC * scene.canvas[1]
        b = objs[grounds[0]]
        return {i for i, o in enumerate(objs)
                if i != grounds[0] and o.color == args["color"] and o.shape == args["shape"]
                and _relation_holds(o, b, args["relation"], margin)}
    if template == "superlative":
        cands = [(i, o.size) for i, o in enumerate(objs) if o.shape == args["shape"]]
        if not cands:
            return set()
        pick = max if args["which"] == "largest" else min
        best = pick(s for _, s in cands)
        return {i for i, s in cands if s == best}
    raise ConfigError(f"unknown template {template!r}")


def expression_for(template: str, args: dict) -> str:
    if template == "attribute":
        return f"{args['color']} {args['shape']}"
    if template == "location":
        return f"{args['shape']} on the {args['region']}"
    if template == "relation":
        return (f"{args['color']} {args['shape']} {args['relation']} "
                f"the {args['ground_color']} {args['ground_shape']}")
    if template == "superlative":
        return f"{args['which']} {args['shape']}"
    raise ConfigError(f"unknown template {template!r}")


def is_relational(sample: Sample) -> bool:
    if sample.template is not None:
        return sample.template == "relation"
    expr = f" {sample.expression} "
    return any(f" {rel} " in expr for rel in RELATIONS)


# ---------------------------------------------------------------------------
# scene generation


class _PlacementFailed(Exception):
    pass


def _overlaps(a: SceneObject, others: list[SceneObject], gap: float = 1.0) -> bool:
    for b in others:
        if abs(a.cx - b.cx) < (a.size + b.size) / 2.0 + gap and \
           abs(a.cy - b.cy) < (a.size + b.size) / 2.0 + gap:
            return True
    return False


def _place(rng, canvas, placed, shape, color, predicate=None, size=None,
           tries: int = 40) -> SceneObject:
    h, w = canvas
    lo, hi = h / 8.0, h / 3.0
    for _ in range(tries):
        s = float(size if size is not None else rng.uniform(lo, hi))
        cx = float(rng.uniform(s / 2.0 + 1.0, w - s / 2.0 - 1.0))
        cy = float(rng.uniform(s / 2.0 + 1.0, h - s / 2.0 - 1.0))
        obj = SceneObject(shape=shape, color=color, cx=cx, cy=cy, size=s)
        if predicate is not None and not predicate(obj):
            continue
        if _overlaps(obj, placed):
            continue
        return obj
    raise _PlacementFailed


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _other_attrs(rng, taken: set[tuple[str, str]]) -> tuple[str, str]:
    options = [(c, s) for c in COLORS for s in SHAPES if (c, s) not in taken]
    return _pick(rng, options)


def _build_attribute(rng, cfg: SynthConfig):
    color, shape = _pick(rng, sorted(COLORS)), _pick(rng, SHAPES)
    placed = [_place(rng, cfg.canvas, [], shape, color)]
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    for _ in range(n - 1):
        c2, s2 = _other_attrs(rng, {(color, shape)})
        placed.append(_place(rng, cfg.canvas, placed, s2, c2))
    return placed, 0, {"color": color, "shape": shape}


def _build_location(rng, cfg: SynthConfig):
    h, w = cfg.canvas
    region = _pick(rng, REGIONS)
    shape = _pick(rng, SHAPES)
    in_region = lambda o: _in_region(o, region, cfg.canvas)
    # distractors of the same shape sit firmly in the opposite half
    if region in ("left", "right"):
        far = (lambda o: o.cx > w / 2.0) if region == "left" else (lambda o: o.cx < w / 2.0)
    else:
        far = (lambda o: o.cy > h / 2.0) if region == "top" else (lambda o: o.cy < h / 2.0)
    placed = [_place(rng, cfg.canvas, [], shape, _pick(rng, sorted(COLORS)), in_region)]
    placed.append(_place(rng, cfg.canvas, placed, shape, _pick(rng, sorted(COLORS)), far))
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    for _ in range(n - 2):
        s2 = _pick(rng, [s for s in SHAPES if s != shape])
        placed.append(_place(rng, cfg.canvas, placed, s2, _pick(rng, sorted(COLORS))))
    return placed, 0, {"shape": shape, "region": region}


def _build_relation(rng, cfg: SynthConfig):
    h, w = cfg.canvas
    margin = RELATION_MARGIN_FRAC * w
    rel = _pick(rng, RELATIONS)
    color, shape = _pick(rng, sorted(COLORS)), _pick(rng, SHAPES)
    gcolor, gshape = _other_attrs(rng, {(color, shape)})
    # ground near the middle so both sides have room
    mid = lambda o: (w / 3.0 < o.cx < 2.0 * w / 3.0) and (h / 3.0 < o.cy < 2.0 * h / 3.0)
    ground = _place(rng, cfg.canvas, [], gshape, gcolor, mid)
    sat = lambda o: _relation_holds(o, ground, rel, margin)
    opposite = {"left of": "right of", "right of": "left of",
                "above": "below", "below": "above"}[rel]
    unsat = lambda o: _relation_holds(o, ground, opposite, margin)
    placed = [ground]
    placed.append(_place(rng, cfg.canvas, placed, shape, color, sat))
    placed.append(_place(rng, cfg.canvas, placed, shape, color, unsat))
    if cfg.max_objects >= 4 and int(rng.integers(2)) and cfg.min_objects <= 3:
        c2, s2 = _other_attrs(rng, {(color, shape), (gcolor, gshape)})
        placed.append(_place(rng, cfg.canvas, placed, s2, c2))
    return placed, 1, {"color": color, "shape": shape, "relation": rel,
                       "ground_color": gcolor, "ground_shape": gshape}


def _build_superlative(rng, cfg: SynthConfig):
    h, _ = cfg.canvas
    which = _pick(rng, ("largest", "smallest"))
    shape = _pick(rng, SHAPES)
    lo, hi = h / 8.0, h / 3.0
    k = int(rng.integers(2, min(3, cfg.max_objects) + 1))
    sizes = sorted(float(rng.uniform(lo, hi)) for _ in range(k))
    while any(b - a < SUPERLATIVE_MARGIN for a, b in zip(sizes, sizes[1:])):
        sizes = sorted(float(rng.uniform(lo, hi)) for _ in range(k))
    ref_size = sizes[-1] if which == "largest" else sizes[0]
    placed = [_place(rng, cfg.canvas, [], shape, _pick(rng, sorted(COLORS)), size=ref_size)]
    for s in sizes:
        if s != ref_size:
            placed.append(_place(rng, cfg.canvas, placed, shape,
                                 _pick(rng, sorted(COLORS)), size=s))
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    for _ in range(max(0, n - len(placed))):
        s2 = _pick(rng, [s for s in SHAPES if s != shape])
        placed.append(_place(rng, cfg.canvas, placed, s2, _pick(rng, sorted(COLORS))))
    return placed, 0, {"which": which, "shape": shape}


_BUILDERS = {
    "attribute": _build_attribute,
    "location": _build_location,
    "relation": _build_relation,
    "superlative": _build_superlative,
}


def generate_sample(rng: np.random.Generator, config: SynthConfig = SynthConfig(),
                    max_attempts: int = 1000) -> Sample:
    """Draw one scene/expression pair with a verified unique referent."""
    weights = config.template_weights
    if weights is not None:
        probs = np.asarray(weights, dtype=np.float64)
        probs = probs / probs.sum()
    for _ in range(max_attempts):
        if weights is None:
            template = _pick(rng, config.templates)
        else:
            template = config.templates[int(rng.choice(len(probs), p=probs))]
        try:
            objects, ref_idx, args = _BUILDERS[template](rng, config)
        except _PlacementFailed:
            continue
        scene = SceneSpec(objects=tuple(objects), canvas=config.canvas)
        if matching_objects(scene, template, args) != {ref_idx}:
            continue
        mask = rasterize(scene.objects[ref_idx], config.canvas)
        if not mask.any():
            continue
        return Sample(
            image=render_scene(scene),
            expression=expression_for(template, args),
            mask=mask,
            ignore=np.zeros(config.canvas, dtype=np.uint8),
            template=template,
            scene=scene,
            referent=ref_idx,
            args=args,
        )
    raise GenerationError(f"no valid sample after {max_attempts} attempts")


def generate_dataset(n: int, seed: int, config: SynthConfig = SynthConfig(),
                     index_offset: int = 0) -> list[Sample]:
    """Pure function of (seed, config): sample i uses its own derived stream."""
    return [generate_sample(np.random.default_rng([seed, index_offset + i]), config)
            for i in range(n)]


# ---------------------------------------------------------------------------
# on-disk format: images/<id>.png, masks/<id>.png, annotations.jsonl


def save_dataset(samples: list[Sample], root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "annotations.jsonl", "w", encoding="utf-8") as fh:
        for i, sample in enumerate(samples):
            sid = f"{i:06d}"
            save_image(sample.image, root / "images" / f"{sid}.png")
            Image.fromarray(sample.mask * 255, mode="L").save(root / "masks" / f"{sid}.png")
            record = {"id": sid, "expression": sample.expression}
            if sample.template is not None:
                record["template"] = sample.template
            fh.write(json.dumps(record) + "\n")


def load_dataset(root) -> list[Sample]:
    """Load samples in annotation-file order; masks binarize at 128."""
    root = Path(root)
    ann = root / "annotations.jsonl"
    if not ann.exists():
        raise DatasetError(f"missing annotation file {ann}")
    samples = []
    with open(ann, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{ann}:{lineno}: malformed record: {exc}") from None
            if "id" not in record or "expression" not in record:
                raise DatasetError(f"{ann}:{lineno}: record needs 'id' and 'expression'")
            sid = record["id"]
            image = _find_and_load_image(root / "images", sid, ann, lineno)
            mask = _find_and_load_mask(root / "masks", sid, ann, lineno)
            if mask.shape != image.shape[1:]:
                raise DatasetError(
                    f"{ann}:{lineno}: mask {mask.shape} does not match image "
                    f"{image.shape[1:]} for id {sid!r}")
            samples.append(Sample(
                image=image,
                expression=record["expression"],
                mask=mask,
                ignore=np.zeros(mask.shape, dtype=np.uint8),
                template=record.get("template"),
            ))
    return samples


_IMAGE_EXTS = (".png", ".ppm", ".pgm")


def _find_file(folder: Path, sid: str) -> Path | None:
    for ext in _IMAGE_EXTS:
        p = folder / f"{sid}{ext}"
        if p.exists():
            return p
    return None


def _find_and_load_image(folder: Path, sid: str, ann, lineno) -> np.ndarray:
    path = _find_file(folder, sid)
    if path is None:
        raise DatasetError(f"{ann}:{lineno}: missing image for id {sid!r}")
    return load_image(path)


def _find_and_load_mask(folder: Path, sid: str, ann, lineno) -> np.ndarray:
    path = _find_file(folder, sid)
    if path is None:
        raise DatasetError(f"{ann}:{lineno}: missing mask for id {sid!r}")
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr >= 128).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Decode an RGB image file to (3,H,W) float32 in [0,1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    u8 = np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# splitting


def _largest_remainder(n: int, ratios) -> list[int]:
    quotas = [n * r for r in ratios]
    base = [floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: quotas[i] - base[i], reverse=True)
    for i in order[:n - sum(base)]:
        base[i] += 1
    return base


def split_dataset(samples: list[Sample], ratios, seed: int):
    """Deterministic shuffled partition with relational samples stratified.

    Global split sizes follow the ratios exactly (largest-remainder); the
    relational stratum is spread proportionally across splits.
    """
    ratios = list(ratios)
    if len(ratios) != 3:
        raise ConfigError(f"expected three split ratios, got {len(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    if not samples:
        raise ContractError("cannot split an empty dataset")

    n = len(samples)
    targets = _largest_remainder(n, ratios)
    if any(t == 0 for t in targets):
        raise ConfigError(f"split of {n} samples by {ratios} leaves an empty split")

    rng = np.random.default_rng([seed, 7])
    rel = [i for i, s in enumerate(samples) if is_relational(s)]
    non = [i for i, s in enumerate(samples) if not is_relational(s)]
    allocs = [_largest_remainder(len(g), ratios) for g in (rel, non)]

    # repair rounding drift so stratum allocations sum to the global targets
    big = 1 if len(non) >= len(rel) else 0
    for k in range(3):
        diff = targets[k] - (allocs[0][k] + allocs[1][k])
        allocs[big][k] += diff
    if any(a < 0 for a in allocs[big]):
        raise ConfigError(f"split ratios {ratios} are infeasible for this stratification")

    splits = ([], [], [])
    for group, alloc in zip((rel, non), allocs):
        order = rng.permutation(len(group))
        shuffled = [group[i] for i in order]
        start = 0
        for k in range(3):
            splits[k].extend(shuffled[start:start + alloc[k]])
            start += alloc[k]
    out = []
    for k in range(3):
        idx = np.array(splits[k], dtype=int)
        idx = idx[rng.permutation(len(idx))]
        out.append([samples[i] for i in idx])
    return tuple(out)
