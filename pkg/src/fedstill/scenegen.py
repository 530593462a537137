"""Synthetic abdominal-style scenes and the scenario files that use them.

A scene is a small (depth, height, width) intensity grid holding a few
non-overlapping "organ" structures (ellipsoids, boxes, tubes), each with
a characteristic base intensity, plus optional "lesion" blobs placed
strictly inside a parent organ.  Per-client domain shift is an affine
intensity map (gain, bias) followed by Gaussian noise and a clamp to
[0, 1], which gives each simulated site its own acquisition character
without changing geometry statistics.

The same module owns the scenario file format: a JSON document that
pins the class table, the stage-by-stage client schedule, and the
distillation/evaluation sets for an entire federated run.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (ParseError, PlacementFailure, ValidationError)
from .models import ClassRegistry
from .seeding import derive_seed

SHAPE_FAMILIES = ("ellipsoid", "box", "tube")
STRATEGIES = ("mmds", "mapcr_fedavg", "centralized")

MAX_PLACEMENT_RETRIES = 100

SAMPLE_MAGIC = b"FSTS"
SAMPLE_FORMAT_VERSION = 1


# ===================================================================== volumes

@dataclass
class Volume:
    """A (D, H, W) float64 intensity grid with values in [0, 1]."""
    intensities: np.ndarray

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.intensities.ndim != 3:
            raise ValidationError(
                f"volume must be 3-D, got shape {self.intensities.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensities.shape


@dataclass
class LabelVolume:
    """Binary masks for the annotated classes of one volume."""
    masks: dict[int, np.ndarray]

    def __post_init__(self):
        self.masks = {int(c): np.asarray(m, dtype=bool)
                      for c, m in self.masks.items()}

    @property
    def annotated(self) -> frozenset[int]:
        return frozenset(self.masks)

    def restricted(self, class_ids) -> "LabelVolume":
        keep = set(int(c) for c in class_ids)
        missing = keep - set(self.masks)
        if missing:
            raise ValidationError(f"cannot restrict to unlabeled classes {sorted(missing)}")
        return LabelVolume({c: self.masks[c] for c in sorted(keep)})


# ===================================================================== specs

@dataclass(frozen=True)
class OrganSpec:
    name: str
    shape: str
    size: tuple[float, float]   # radius / half-extent range in voxels
    intensity: float


@dataclass(frozen=True)
class LesionSpec:
    name: str
    parent: str
    blobs: tuple[int, int]      # blob count range, inclusive
    size: tuple[float, float]   # blob radius range in voxels
    occurrence: float           # probability the lesion appears in a scene
    intensity: float


@dataclass(frozen=True)
class DomainShift:
    """Affine intensity map applied before noise: v -> gain * v + bias."""
    gain: float = 1.0
    bias: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    organs: tuple[OrganSpec, ...]
    lesions: tuple[LesionSpec, ...] = ()
    grid: tuple[int, int, int] = (1, 32, 32)
    background: float = 0.08
    noise_sigma: float = 0.02
    shift: DomainShift = DomainShift()

    def __post_init__(self):
        d, h, w = self.grid
        if min(d, h, w) < 1:
            raise ValidationError(f"grid extents must be positive, got {self.grid}")
        names = [o.name for o in self.organs] + [l.name for l in self.lesions]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate structure names in scene spec")
        organ_names = {o.name for o in self.organs}
        max_half = min(h, w) / 2.0
        for o in self.organs:
            if o.shape not in SHAPE_FAMILIES:
                raise ValidationError(f"organ '{o.name}': unknown shape '{o.shape}'")
            lo, hi = o.size
            if not (0 < lo <= hi):
                raise ValidationError(f"organ '{o.name}': bad size range {o.size}")
            if hi > max_half:
                raise ValidationError(
                    f"organ '{o.name}': size {hi} exceeds half the grid extent")
            if not 0.0 <= o.intensity <= 1.0:
                raise ValidationError(f"organ '{o.name}': intensity outside [0, 1]")
        for l in self.lesions:
            if l.parent not in organ_names:
                raise ValidationError(
                    f"lesion '{l.name}': parent organ '{l.parent}' not in spec")
            lo, hi = l.size
            if not (0 < lo <= hi):
                raise ValidationError(f"lesion '{l.name}': bad size range {l.size}")
            if not (1 <= l.blobs[0] <= l.blobs[1]):
                raise ValidationError(f"lesion '{l.name}': bad blob range {l.blobs}")
            if not 0.0 <= l.occurrence <= 1.0:
                raise ValidationError(f"lesion '{l.name}': occurrence outside [0, 1]")
            if not 0.0 <= l.intensity <= 1.0:
                raise ValidationError(f"lesion '{l.name}': intensity outside [0, 1]")
        if not 0.0 <= self.background <= 1.0:
            raise ValidationError("background intensity outside [0, 1]")
        if self.noise_sigma < 0.0:
            raise ValidationError("noise sigma must be non-negative")

    def structure_names(self) -> tuple[str, ...]:
        return tuple(o.name for o in self.organs) + tuple(l.name for l in self.lesions)

    def restricted_to(self, names) -> "SceneSpec":
        """Spec containing only the named structures (for distillation sets)."""
        keep = set(names)
        unknown = keep - set(self.structure_names())
        if unknown:
            raise ValidationError(f"unknown structures {sorted(unknown)}")
        organs = tuple(o for o in self.organs if o.name in keep)
        organ_names = {o.name for o in organs}
        lesions = tuple(l for l in self.lesions if l.name in keep)
        for l in lesions:
            if l.parent not in organ_names:
                raise ValidationError(
                    f"cannot keep lesion '{l.name}' without its parent '{l.parent}'")
        return replace(self, organs=organs, lesions=lesions)


# ============================================================== scene rendering

def _grid_coords(grid: tuple[int, int, int]) -> np.ndarray:
    return np.indices(grid, dtype=np.float64)


def _ellipsoid_mask(grid, center, radii) -> np.ndarray:
    zz, yy, xx = _grid_coords(grid)
    rz, ry, rx = (max(r, 0.5) for r in radii)
    cz, cy, cx = center
    q = (((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return q <= 1.0


def _box_mask(grid, center, half) -> np.ndarray:
    zz, yy, xx = _grid_coords(grid)
    hz, hy, hx = (max(v, 0.5) for v in half)
    cz, cy, cx = center
    return ((np.abs(zz - cz) <= hz) & (np.abs(yy - cy) <= hy)
            & (np.abs(xx - cx) <= hx))


def _tube_mask(grid, a, b, radius) -> np.ndarray:
    """In-plane capsule between endpoints a and b, swept over all slices."""
    _, yy, xx = _grid_coords(grid)
    ay, ax = a
    by, bx = b
    vy, vx = by - ay, bx - ax
    vv = vy * vy + vx * vx
    if vv == 0.0:
        t = np.zeros_like(yy)
    else:
        t = np.clip(((yy - ay) * vy + (xx - ax) * vx) / vv, 0.0, 1.0)
    dy = yy - (ay + t * vy)
    dx = xx - (ax + t * vx)
    return dy * dy + dx * dx <= radius * radius


def _place_organ(rng: np.random.Generator, organ: OrganSpec,
                 grid: tuple[int, int, int], occupied: np.ndarray) -> np.ndarray:
    d, h, w = grid
    lo, hi = organ.size
    for _ in range(MAX_PLACEMENT_RETRIES):
        if organ.shape == "tube":
            r = rng.uniform(lo, hi)
            margin = r + 1.0
            if 2 * margin >= min(h, w):
                break
            cy = rng.uniform(margin, h - 1 - margin)
            cx = rng.uniform(margin, w - 1 - margin)
            theta = rng.uniform(0.0, np.pi)
            half_len = rng.uniform(2.0 * r, 4.0 * r + 2.0)
            ey, ex = half_len * np.sin(theta), half_len * np.cos(theta)
            a = (np.clip(cy - ey, margin, h - 1 - margin),
                 np.clip(cx - ex, margin, w - 1 - margin))
            b = (np.clip(cy + ey, margin, h - 1 - margin),
                 np.clip(cx + ex, margin, w - 1 - margin))
            mask = _tube_mask(grid, a, b, r)
        else:
            ry = rng.uniform(lo, hi)
            rx = rng.uniform(lo, hi)
            rz = rng.uniform(lo, hi) if d > 1 else 0.0
            rz = min(rz, (d - 1) / 2.0)
            margin_y, margin_x = ry + 1.0, rx + 1.0
            if 2 * margin_y >= h or 2 * margin_x >= w:
                continue
            cz = rng.uniform(rz, d - 1 - rz) if d > 1 else 0.0
            cy = rng.uniform(margin_y, h - 1 - margin_y)
            cx = rng.uniform(margin_x, w - 1 - margin_x)
            if organ.shape == "ellipsoid":
                mask = _ellipsoid_mask(grid, (cz, cy, cx), (rz, ry, rx))
            else:
                mask = _box_mask(grid, (cz, cy, cx), (rz, ry, rx))
        if mask.any() and not (mask & occupied).any():
            return mask
    raise PlacementFailure(
        f"could not place '{organ.name}' after {MAX_PLACEMENT_RETRIES} tries; "
        f"the scene spec is too dense for a {grid} grid")


def _place_lesion(rng: np.random.Generator, lesion: LesionSpec,
                  grid: tuple[int, int, int], parent_mask: np.ndarray) -> np.ndarray:
    d = grid[0]
    n_blobs = int(rng.integers(lesion.blobs[0], lesion.blobs[1] + 1))
    inside = np.argwhere(parent_mask)
    mask = np.zeros(grid, dtype=bool)
    for _ in range(n_blobs):
        cz, cy, cx = inside[rng.integers(len(inside))]
        r = rng.uniform(*lesion.size)
        rz = min(r, (d - 1) / 2.0) if d > 1 else 0.0
        blob = _ellipsoid_mask(grid, (float(cz), float(cy), float(cx)), (rz, r, r))
        mask |= blob & parent_mask  # strict containment in the parent
    return mask


def generate_scene(seed: int, spec: SceneSpec,
                   registry: ClassRegistry) -> tuple[Volume, LabelVolume]:
    """Render one scene: place structures, paint intensities, apply shift.

    Deterministic in (seed, spec).  The returned LabelVolume has a mask
    for every structure in the spec; a lesion that did not occur gets an
    empty mask rather than no mask, so annotated sets stay uniform
    across samples.
    """
    rng = np.random.default_rng(seed)
    grid = spec.grid
    base = np.full(grid, spec.background, dtype=np.float64)
    masks: dict[int, np.ndarray] = {}
    organ_masks: dict[str, np.ndarray] = {}
    occupied = np.zeros(grid, dtype=bool)

    for organ in spec.organs:
        mask = _place_organ(rng, organ, grid, occupied)
        occupied |= mask
        organ_masks[organ.name] = mask
        base[mask] = organ.intensity
        masks[registry.id_of(organ.name)] = mask

    for lesion in spec.lesions:
        if rng.random() < lesion.occurrence:
            mask = _place_lesion(rng, lesion, grid, organ_masks[lesion.parent])
            base[mask] = lesion.intensity
        else:
            mask = np.zeros(grid, dtype=bool)
        masks[registry.id_of(lesion.name)] = mask

    out = spec.shift.gain * base + spec.shift.bias
    if spec.noise_sigma > 0.0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=grid)
    out = np.clip(out, 0.0, 1.0)
    return Volume(out), LabelVolume(masks)


# ================================================================== datasets

@dataclass
class ClientDataset:
    """One client's local training data with a uniform annotated set."""
    client_id: int
    samples: list[tuple[Volume, LabelVolume]]
    annotated: frozenset[int]

    def __post_init__(self):
        for _, labels in self.samples:
            if labels.annotated != self.annotated:
                raise ValidationError(
                    f"sample annotated set {sorted(labels.annotated)} != dataset "
                    f"annotated set {sorted(self.annotated)}")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class DistillationSet:
    """Unlabeled volumes for server-side distillation plus class coverage.

    ``coverage`` records which classes' structures were rendered into
    the volumes; classes outside it simply never appear, which is how a
    curated distillation corpus can lack e.g. pathology examples.
    """
    volumes: list[Volume]
    coverage: frozenset[int]

    def __len__(self) -> int:
        return len(self.volumes)


def make_client_dataset(spec: SceneSpec, class_subset, n: int, seed: int,
                        registry: ClassRegistry,
                        client_id: int = 0) -> ClientDataset:
    """n scenes with labels restricted to the client's class subset.

    Scenes still contain every structure in the spec; restriction only
    drops masks, the way a site annotates a subset of what it scans.
    """
    subset = frozenset(int(c) for c in class_subset)
    if not subset:
        raise ValidationError("client class subset is empty")
    samples = []
    for i in range(n):
        vol, labels = generate_scene(derive_seed(seed, "sample", i), spec, registry)
        samples.append((vol, labels.restricted(subset)))
    return ClientDataset(client_id=client_id, samples=samples, annotated=subset)


def make_distillation_set(spec: SceneSpec, n: int, include_classes, seed: int,
                          registry: ClassRegistry) -> DistillationSet:
    """n unlabeled scenes containing only the included classes' structures."""
    include_ids = frozenset(int(c) for c in include_classes)
    names = [registry.name_of(c) for c in sorted(include_ids)]
    sub_spec = spec.restricted_to(names)
    volumes = []
    for i in range(n):
        vol, _ = generate_scene(derive_seed(seed, "distill", i), sub_spec, registry)
        volumes.append(vol)
    return DistillationSet(volumes=volumes, coverage=include_ids)


# ================================================================= scenario files

@dataclass(frozen=True)
class ModelConfig:
    """Architecture selection for one participant (or the global student)."""
    arch: str
    hidden: int = 8
    layers: int = 2


@dataclass(frozen=True)
class AddClient:
    client_id: int
    classes: tuple[str, ...]
    num_samples: int
    model: ModelConfig
    shift: DomainShift


@dataclass(frozen=True)
class UpdateClient:
    client_id: int
    added_classes: tuple[str, ...]
    added_samples: int


@dataclass(frozen=True)
class DropData:
    """From this stage on, the client's raw data is gone (models remain)."""
    client_id: int


@dataclass(frozen=True)
class Stage:
    index: int
    events: tuple


@dataclass(frozen=True)
class DistillationConfig:
    num_volumes: int
    include_classes: tuple[str, ...]


@dataclass(frozen=True)
class OodConfig:
    """A held-out site: its own domain shift and annotated classes."""
    classes: tuple[str, ...]
    num_samples: int
    shift: DomainShift


@dataclass(frozen=True)
class EvaluationConfig:
    samples_per_client: int
    annotate: tuple[str, ...]
    ood: OodConfig | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything a federated run needs, parsed from one JSON file."""
    name: str
    seed: int
    strategy: str
    rounds: int                  # averaging rounds per stage (round-based baseline)
    local_epochs: int
    distill_epochs: int | tuple[int, ...]   # flat, or one entry per stage
    epochs_per_round: int
    grid: tuple[int, int, int]
    background: float
    noise_sigma: float
    organs: tuple[OrganSpec, ...]
    lesions: tuple[LesionSpec, ...]
    class_names: tuple[str, ...]
    global_model: ModelConfig
    distillation: DistillationConfig
    stages: tuple[Stage, ...]
    evaluation: EvaluationConfig | None = None
    central_epochs: int = 0      # 0 means "same as local_epochs"

    def registry(self) -> ClassRegistry:
        return ClassRegistry(self.class_names, seed=self.seed)

    def distill_epochs_for(self, stage_index: int) -> int:
        if isinstance(self.distill_epochs, tuple):
            return self.distill_epochs[stage_index - 1]
        return self.distill_epochs

    def centralized_epochs(self) -> int:
        return self.central_epochs if self.central_epochs > 0 else self.local_epochs

    def scene_spec(self, shift: DomainShift = DomainShift()) -> SceneSpec:
        return SceneSpec(organs=self.organs, lesions=self.lesions, grid=self.grid,
                         background=self.background, noise_sigma=self.noise_sigma,
                         shift=shift)

    def num_stages(self) -> int:
        return len(self.stages)


def _expect(obj: dict, key: str, kind, ctx: str):
    if key not in obj:
        raise ParseError(f"{ctx}: missing required key '{key}'")
    val = obj[key]
    if kind is float:
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise ParseError(f"{ctx}: '{key}' must be a number")
        return float(val)
    if kind is int:
        if not isinstance(val, int) or isinstance(val, bool):
            raise ParseError(f"{ctx}: '{key}' must be an integer")
        return val
    if not isinstance(val, kind):
        raise ParseError(f"{ctx}: '{key}' must be {kind.__name__}")
    return val


def _parse_shift(obj: dict | None, ctx: str) -> DomainShift:
    if obj is None:
        return DomainShift()
    if not isinstance(obj, dict):
        raise ParseError(f"{ctx}: domain_shift must be an object")
    return DomainShift(gain=float(obj.get("gain", 1.0)),
                       bias=float(obj.get("bias", 0.0)))


def _parse_model(obj: dict | None, ctx: str, default: ModelConfig) -> ModelConfig:
    if obj is None:
        return default
    arch = _expect(obj, "arch", str, ctx)
    return ModelConfig(arch=arch, hidden=int(obj.get("hidden", default.hidden)),
                       layers=int(obj.get("layers", default.layers)))


def _parse_size(val, ctx: str) -> tuple[float, float]:
    if (not isinstance(val, list) or len(val) != 2
            or not all(isinstance(v, (int, float)) for v in val)):
        raise ParseError(f"{ctx}: size must be a [lo, hi] pair")
    return (float(val[0]), float(val[1]))


def parse_scenario(doc: dict, ctx: str = "scenario") -> ScenarioConfig:
    """Build and validate a ScenarioConfig from a decoded JSON document."""
    if not isinstance(doc, dict):
        raise ParseError(f"{ctx}: top level must be an object")
    name = _expect(doc, "name", str, ctx)
    seed = _expect(doc, "seed", int, ctx)
    strategy = doc.get("strategy", "mmds")
    if strategy not in STRATEGIES:
        raise ValidationError(
            f"{ctx}: strategy '{strategy}' not one of {list(STRATEGIES)}")
    rounds = int(doc.get("rounds", 1000))
    local_epochs = int(doc.get("local_epochs", 60))
    raw_distill = doc.get("distill_epochs", 80)
    if isinstance(raw_distill, list):
        distill_epochs: int | tuple[int, ...] = tuple(int(e) for e in raw_distill)
        if any(e < 0 for e in distill_epochs):
            raise ValidationError(f"{ctx}: distill_epochs entries must be >= 0")
    else:
        distill_epochs = int(raw_distill)
        if distill_epochs < 0:
            raise ValidationError(f"{ctx}: distill_epochs must be >= 0")
    epochs_per_round = int(doc.get("epochs_per_round", 1))
    central_epochs = int(doc.get("central_epochs", 0))
    if rounds < 1:
        raise ValidationError(f"{ctx}: rounds must be >= 1")
    if min(local_epochs, epochs_per_round, central_epochs) < 0:
        raise ValidationError(f"{ctx}: epoch counts must be >= 0")

    vol = doc.get("volume", {})
    grid = (int(vol.get("depth", 1)), int(vol.get("height", 32)),
            int(vol.get("width", 32)))
    background = float(doc.get("background_intensity", 0.08))
    noise_sigma = float(doc.get("noise_sigma", 0.02))

    class_entries = _expect(doc, "classes", list, ctx)
    organs: list[OrganSpec] = []
    lesions: list[LesionSpec] = []
    class_names: list[str] = []
    for i, entry in enumerate(class_entries):
        ectx = f"{ctx}.classes[{i}]"
        if not isinstance(entry, dict):
            raise ParseError(f"{ectx}: must be an object")
        cname = _expect(entry, "name", str, ectx)
        kind = _expect(entry, "kind", str, ectx)
        class_names.append(cname)
        if kind == "organ":
            organs.append(OrganSpec(
                name=cname,
                shape=_expect(entry, "shape", str, ectx),
                size=_parse_size(_expect(entry, "size", list, ectx), ectx),
                intensity=_expect(entry, "intensity", float, ectx)))
        elif kind == "lesion":
            blobs = entry.get("blobs", [1, 1])
            if (not isinstance(blobs, list) or len(blobs) != 2
                    or not all(isinstance(b, int) for b in blobs)):
                raise ParseError(f"{ectx}: blobs must be an [lo, hi] integer pair")
            lesions.append(LesionSpec(
                name=cname,
                parent=_expect(entry, "parent", str, ectx),
                blobs=(blobs[0], blobs[1]),
                size=_parse_size(_expect(entry, "size", list, ectx), ectx),
                occurrence=float(entry.get("occurrence", 1.0)),
                intensity=_expect(entry, "intensity", float, ectx)))
        else:
            raise ValidationError(f"{ectx}: kind must be 'organ' or 'lesion'")
    if len(set(class_names)) != len(class_names):
        raise ValidationError(f"{ctx}: duplicate class names")
    known = set(class_names)

    default_model = ModelConfig(arch="patch_convnet")
    global_model = _parse_model(doc.get("global_model"), f"{ctx}.global_model",
                                default_model)

    dist_obj = _expect(doc, "distillation", dict, ctx)
    include = _expect(dist_obj, "include_classes", list, f"{ctx}.distillation")
    for cname in include:
        if cname not in known:
            raise ValidationError(
                f"{ctx}.distillation: unknown class '{cname}'")
    distillation = DistillationConfig(
        num_volumes=_expect(dist_obj, "num_volumes", int, f"{ctx}.distillation"),
        include_classes=tuple(include))

    stage_entries = _expect(doc, "stages", list, ctx)
    if not stage_entries:
        raise ValidationError(f"{ctx}: needs at least one stage")
    stages: list[Stage] = []
    known_clients: set[int] = set()
    for i, sobj in enumerate(stage_entries):
        sctx = f"{ctx}.stages[{i}]"
        index = _expect(sobj, "stage", int, sctx)
        if index != i + 1:
            raise ValidationError(
                f"{sctx}: stages must be contiguous from 1, got {index}")
        events = []
        new_this_stage: set[int] = set()
        for j, eobj in enumerate(_expect(sobj, "events", list, sctx)):
            ectx = f"{sctx}.events[{j}]"
            kind = _expect(eobj, "kind", str, ectx)
            cid = _expect(eobj, "id", int, ectx)
            if kind == "add_client":
                if cid in known_clients or cid in new_this_stage:
                    raise ValidationError(f"{ectx}: client {cid} already added")
                classes = tuple(_expect(eobj, "classes", list, ectx))
                for cname in classes:
                    if cname not in known:
                        raise ValidationError(f"{ectx}: unknown class '{cname}'")
                if not classes:
                    raise ValidationError(f"{ectx}: client {cid} annotates no classes")
                events.append(AddClient(
                    client_id=cid, classes=classes,
                    num_samples=_expect(eobj, "num_samples", int, ectx),
                    model=_parse_model(eobj.get("model"), ectx, default_model),
                    shift=_parse_shift(eobj.get("domain_shift"), ectx)))
                new_this_stage.add(cid)
            elif kind == "update_client":
                if cid not in known_clients:
                    raise ValidationError(
                        f"{ectx}: update references client {cid} not added at an "
                        f"earlier stage")
                added = tuple(_expect(eobj, "added_classes", list, ectx))
                for cname in added:
                    if cname not in known:
                        raise ValidationError(f"{ectx}: unknown class '{cname}'")
                events.append(UpdateClient(
                    client_id=cid, added_classes=added,
                    added_samples=int(eobj.get("added_samples", 0))))
            elif kind == "drop_data":
                if cid not in known_clients:
                    raise ValidationError(
                        f"{ectx}: drop_data references unknown client {cid}")
                events.append(DropData(client_id=cid))
            else:
                raise ValidationError(f"{ectx}: unknown event kind '{kind}'")
        known_clients |= new_this_stage
        stages.append(Stage(index=index, events=tuple(events)))

    evaluation = None
    if "evaluation" in doc:
        eobj = doc["evaluation"]
        ectx = f"{ctx}.evaluation"
        annotate = tuple(eobj.get("annotate", []))
        for cname in annotate:
            if cname not in known:
                raise ValidationError(f"{ectx}: unknown class '{cname}'")
        ood = None
        if eobj.get("ood") is not None:
            oobj = eobj["ood"]
            octx = f"{ectx}.ood"
            ood_classes = tuple(_expect(oobj, "classes", list, octx))
            for cname in ood_classes:
                if cname not in known:
                    raise ValidationError(f"{octx}: unknown class '{cname}'")
            ood = OodConfig(classes=ood_classes,
                            num_samples=_expect(oobj, "num_samples", int, octx),
                            shift=_parse_shift(oobj.get("domain_shift"), octx))
        evaluation = EvaluationConfig(
            samples_per_client=_expect(eobj, "samples_per_client", int, ectx),
            annotate=annotate, ood=ood)

    scenario = ScenarioConfig(
        name=name, seed=seed, strategy=strategy, rounds=rounds,
        local_epochs=local_epochs, distill_epochs=distill_epochs,
        epochs_per_round=epochs_per_round, grid=grid, background=background,
        noise_sigma=noise_sigma, organs=tuple(organs), lesions=tuple(lesions),
        class_names=tuple(class_names), global_model=global_model,
        distillation=distillation, stages=tuple(stages), evaluation=evaluation,
        central_epochs=central_epochs)
    scenario.scene_spec()  # runs SceneSpec geometry validation
    if (isinstance(distill_epochs, tuple)
            and len(distill_epochs) != len(scenario.stages)):
        raise ValidationError(
            f"{ctx}: distill_epochs list has {len(distill_epochs)} entries "
            f"for {len(scenario.stages)} stages")
    if global_model.arch not in ("pixel_mlp", "patch_convnet"):
        raise ValidationError(f"{ctx}: unknown global model arch "
                              f"'{global_model.arch}'")
    for stage in scenario.stages:
        for event in stage.events:
            if isinstance(event, AddClient):
                if event.model.arch not in ("pixel_mlp", "patch_convnet"):
                    raise ValidationError(
                        f"client {event.client_id}: unknown arch "
                        f"'{event.model.arch}'")
                if event.num_samples < 1:
                    raise ValidationError(
                        f"client {event.client_id}: needs at least one sample")
    return scenario


def load_scenario(path) -> ScenarioConfig:
    """Parse a scenario JSON file; ParseError on syntax, ValidationError on semantics."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read scenario file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_scenario(doc, ctx=path.name)


# ========================================================== sample binary format
#
# One volume (optionally with masks) per file, little-endian throughout:
#   magic "FSTS" | u32 version | u32 D | u32 H | u32 W |
#   f64 intensities (D*H*W, row-major) | u32 n_classes |
#   per class: u32 class_id, packed mask bits (ceil(D*H*W / 8) bytes) |
#   u32 crc32 of everything before it

def write_sample(path, volume: Volume, labels: LabelVolume | None = None) -> None:
    d, h, w = volume.shape
    out = bytearray()
    out += SAMPLE_MAGIC
    out += struct.pack("<IIII", SAMPLE_FORMAT_VERSION, d, h, w)
    out += np.ascontiguousarray(volume.intensities, dtype="<f8").tobytes()
    class_ids = sorted(labels.masks) if labels is not None else []
    out += struct.pack("<I", len(class_ids))
    for c in class_ids:
        out += struct.pack("<I", c)
        out += np.packbits(labels.masks[c].reshape(-1)).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    Path(path).write_bytes(bytes(out))


def read_sample(path) -> tuple[Volume, LabelVolume]:
    blob = Path(path).read_bytes()
    if len(blob) < 24 or blob[:4] != SAMPLE_MAGIC:
        raise ParseError(f"{path}: not a sample file")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise ParseError(f"{path}: checksum mismatch")
    version, d, h, w = struct.unpack("<IIII", blob[4:20])
    if version != SAMPLE_FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported sample format version {version}")
    n = d * h * w
    pos = 20
    end = pos + 8 * n
    if end > len(blob) - 4:
        raise ParseError(f"{path}: truncated sample file")
    intensities = np.frombuffer(blob[pos:end], dtype="<f8").reshape(d, h, w).copy()
    pos = end
    (n_classes,) = struct.unpack("<I", blob[pos:pos + 4])
    pos += 4
    mask_bytes = (n + 7) // 8
    masks: dict[int, np.ndarray] = {}
    for _ in range(n_classes):
        if pos + 4 + mask_bytes > len(blob) - 4:
            raise ParseError(f"{path}: truncated mask table")
        (cid,) = struct.unpack("<I", blob[pos:pos + 4])
        pos += 4
        bits = np.unpackbits(np.frombuffer(blob[pos:pos + mask_bytes],
                                           dtype=np.uint8))[:n]
        masks[cid] = bits.astype(bool).reshape(d, h, w)
        pos += mask_bytes
    if pos != len(blob) - 4:
        raise ParseError(f"{path}: trailing bytes in sample file")
    return Volume(intensities), LabelVolume(masks)
