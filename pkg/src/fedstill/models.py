"""Class-conditioned segmentation models and their binary serialization.

Both architectures map a volume to a 16-dim feature vector per voxel and
score each requested class as the inner product between that feature and
the class's fixed text-derived embedding (a seeded random unit vector
standing in for a frozen language-encoder output).  Parameter shapes
therefore never depend on how many classes a client annotates, which is
what lets models trained on different label sets live in one server
store and be averaged or distilled interchangeably.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CorruptModel, ShapeMismatch, UnknownClass, VersionMismatch
from .seeding import derive_seed

EMBED_DIM = 16
PROB_FLOOR = 1e-7
PROB_CEIL = 1.0 - 1e-7

PIXEL_MLP = "pixel_mlp"
PATCH_CONVNET = "patch_convnet"
ARCH_KINDS = (PIXEL_MLP, PATCH_CONVNET)

# Per-voxel input features for the MLP: intensity, three normalized
# coordinates, and the 3x3 in-plane intensity patch.
_MLP_IN = 1 + 3 + 9

MODEL_MAGIC = b"FSTL"
MODEL_FORMAT_VERSION = 1


class ClassRegistry:
    """Shared class table: names, integer ids, and frozen embeddings.

    Embeddings are unit-norm 16-vectors drawn from an RNG keyed by the
    federation seed and the class *name*, so every participant that
    agrees on seed and names derives bit-identical embeddings no matter
    what order it registers classes in.
    """

    def __init__(self, class_names, seed: int, embed_dim: int = EMBED_DIM):
        names = list(class_names)
        if len(set(names)) != len(names):
            raise UnknownClass("duplicate class names in registry")
        if not names:
            raise UnknownClass("registry needs at least one class")
        self.seed = int(seed)
        self.embed_dim = int(embed_dim)
        self.names: tuple[str, ...] = tuple(names)
        self._id_of = {name: i for i, name in enumerate(names)}
        rows = []
        for name in names:
            rng = np.random.default_rng(derive_seed(seed, "class-embedding", name))
            v = rng.standard_normal(self.embed_dim)
            rows.append(v / np.linalg.norm(v))
        self._embeddings = np.asarray(rows, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._id_of

    def id_of(self, name: str) -> int:
        try:
            return self._id_of[name]
        except KeyError:
            raise UnknownClass(f"class '{name}' not in registry") from None

    def name_of(self, class_id: int) -> str:
        if not 0 <= class_id < len(self.names):
            raise UnknownClass(f"class id {class_id} not in registry")
        return self.names[class_id]

    def ids_of(self, names) -> tuple[int, ...]:
        return tuple(self.id_of(n) for n in names)

    def embedding(self, class_id: int) -> np.ndarray:
        if not 0 <= class_id < len(self.names):
            raise UnknownClass(f"class id {class_id} not in registry")
        return self._embeddings[class_id]

    @property
    def embedding_table(self) -> np.ndarray:
        """(num_classes, embed_dim) matrix, rows unit-norm."""
        return self._embeddings


@dataclass(frozen=True)
class SegModelSpec:
    """Architecture hyperparameters plus the init seed.

    ``layers`` counts hidden layers for the MLP and 3x3 conv layers for
    the conv net.  ``feature_dim`` must match the registry's embedding
    dimension since class scores are inner products in that space.
    """
    arch: str
    hidden: int = 8
    layers: int = 2
    feature_dim: int = EMBED_DIM
    init_seed: int = 0

    def same_architecture(self, other: "SegModelSpec") -> bool:
        return (self.arch, self.hidden, self.layers, self.feature_dim) == (
            other.arch, other.hidden, other.layers, other.feature_dim)


@dataclass
class ModelParams:
    """Named parameter tensors in a stable order, plus the spec that built them."""
    spec: SegModelSpec
    tensors: dict[str, T.Tensor] = field(default_factory=dict)

    def clone(self) -> "ModelParams":
        return ModelParams(self.spec, {
            name: T.Tensor(t.data.copy(), requires_grad=True)
            for name, t in self.tensors.items()})

    def num_values(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


@dataclass
class PredictionVolume:
    """Per-class sigmoid probabilities for one volume.

    ``probs`` has shape (C, D, H, W) with channels in ``class_ids``
    order; values are clamped into [PROB_FLOOR, PROB_CEIL].  During
    training ``probs`` is a live graph tensor; at inference it is a
    plain constant.
    """
    class_ids: tuple[int, ...]
    probs: T.Tensor

    def channel(self, class_id: int) -> np.ndarray:
        try:
            idx = self.class_ids.index(class_id)
        except ValueError:
            raise UnknownClass(
                f"class id {class_id} was not requested in this forward pass"
            ) from None
        return self.probs.data[idx]


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_model(spec: SegModelSpec) -> ModelParams:
    """Materialize parameters for a spec, deterministically from its seed."""
    if spec.arch not in ARCH_KINDS:
        raise ValueError(f"unknown architecture '{spec.arch}'")
    if spec.hidden < 1 or spec.layers < 1:
        raise ValueError("hidden width and layer count must be positive")
    rng = np.random.default_rng(spec.init_seed)
    tensors: dict[str, np.ndarray] = {}
    h, f = spec.hidden, spec.feature_dim
    if spec.arch == PIXEL_MLP:
        # Weights are (out, in) so the whole net runs on column-major
        # voxel matrices: x is (features, n_voxels).
        tensors["layer0.weight"] = _uniform_fan_in(rng, (h, _MLP_IN), _MLP_IN)
        tensors["layer0.bias"] = np.zeros((h, 1))
        for i in range(1, spec.layers):
            tensors[f"layer{i}.weight"] = _uniform_fan_in(rng, (h, h), h)
            tensors[f"layer{i}.bias"] = np.zeros((h, 1))
        tensors["head.weight"] = _uniform_fan_in(rng, (f, h), h)
        tensors["head.bias"] = np.zeros((f, 1))
    else:
        tensors["conv0.weight"] = _uniform_fan_in(rng, (h, 1, 3, 3), 9)
        tensors["conv0.bias"] = np.zeros((h, 1, 1, 1))
        for i in range(1, spec.layers):
            tensors[f"conv{i}.weight"] = _uniform_fan_in(rng, (h, h, 3, 3), 9 * h)
            tensors[f"conv{i}.bias"] = np.zeros((h, 1, 1, 1))
        tensors["proj.weight"] = _uniform_fan_in(rng, (f, h, 1, 1), h)
        tensors["proj.bias"] = np.zeros((f, 1, 1, 1))
    return ModelParams(spec, {
        name: T.Tensor(arr, requires_grad=True) for name, arr in tensors.items()})


def param_count(spec: SegModelSpec) -> int:
    """Closed-form parameter count; independent of any class count."""
    h, f, L = spec.hidden, spec.feature_dim, spec.layers
    if spec.arch == PIXEL_MLP:
        return (_MLP_IN * h + h) + (L - 1) * (h * h + h) + (h * f + f)
    return (9 * h + h) + (L - 1) * (9 * h * h + h) + (h * f + f)


# ------------------------------------------------------------------ forward

def _volume_array(volume) -> np.ndarray:
    arr = getattr(volume, "intensities", volume)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeMismatch(f"expected a (D,H,W) volume, got shape {arr.shape}")
    return arr


def pixel_features(volume) -> np.ndarray:
    """(13, n_voxels) per-voxel input matrix for the MLP.

    Rows: intensity, normalized (z, y, x), then the 3x3 in-plane patch
    around the voxel (zero padded), row-major.
    """
    arr = _volume_array(volume)
    d, h, w = arr.shape
    n = d * h * w
    feats = np.empty((_MLP_IN, n))
    feats[0] = arr.reshape(n)
    for axis, size in enumerate((d, h, w)):
        coord = np.arange(size, dtype=np.float64)
        coord = coord / (size - 1) if size > 1 else coord
        shape = [1, 1, 1]
        shape[axis] = size
        feats[1 + axis] = np.broadcast_to(coord.reshape(shape), (d, h, w)).reshape(n)
    padded = np.pad(arr, ((0, 0), (1, 1), (1, 1)))
    row = 4
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            feats[row] = padded[:, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w].reshape(n)
            row += 1
    return feats


def _mlp_features(params: ModelParams, arr: np.ndarray) -> T.Tensor:
    x = T.Tensor(pixel_features(arr))
    t = params.tensors
    for i in range(params.spec.layers):
        x = T.relu(T.add(T.matmul(t[f"layer{i}.weight"], x), t[f"layer{i}.bias"]))
    return T.add(T.matmul(t["head.weight"], x), t["head.bias"])  # (F, n)


def _conv_features(params: ModelParams, arr: np.ndarray) -> T.Tensor:
    d, h, w = arr.shape
    x = T.Tensor(arr.reshape(1, d, h, w))
    t = params.tensors
    for i in range(params.spec.layers):
        x = T.relu(T.add(T.conv2d(x, t[f"conv{i}.weight"]), t[f"conv{i}.bias"]))
    feats = T.add(T.conv2d(x, t["proj.weight"]), t["proj.bias"])  # (F, D, H, W)
    return T.reshape(feats, (params.spec.feature_dim, d * h * w))


def forward(params: ModelParams, volume, class_ids,
            registry: ClassRegistry) -> PredictionVolume:
    """Per-class independent sigmoid probabilities for the requested classes.

    Each class channel is computed from its own embedding row, so the
    channel for a class is bit-identical no matter which other classes
    were requested alongside it.
    """
    arr = _volume_array(volume)
    ids = tuple(sorted(set(int(c) for c in class_ids)))
    if not ids:
        raise UnknownClass("forward needs at least one class id")
    for c in ids:
        registry.name_of(c)  # raises UnknownClass for bad ids
    if params.spec.feature_dim != registry.embed_dim:
        raise ShapeMismatch(
            f"model feature dim {params.spec.feature_dim} != registry embedding "
            f"dim {registry.embed_dim}")
    d, h, w = arr.shape
    if params.spec.arch == PIXEL_MLP:
        feats = _mlp_features(params, arr)
    else:
        feats = _conv_features(params, arr)
    table = T.Tensor(registry.embedding_table)
    rows = [T.matmul(T.embed_lookup(table, [c]), feats) for c in ids]  # (1, n) each
    logits = rows[0] if len(rows) == 1 else T.concat(rows, axis=0)
    probs = T.clamp(T.sigmoid(T.reshape(logits, (len(ids), d, h, w))),
                    PROB_FLOOR, PROB_CEIL)
    return PredictionVolume(class_ids=ids, probs=probs)


# ------------------------------------------------------------------ serialization
#
# Layout, all little-endian:
#   magic "FSTL" | u32 format version | spec block | u32 n_params |
#   params (u32 name_len, name, u32 ndim, u32 dims..., f64 values...) |
#   u32 crc32 of everything before it
# Spec block: u32 arch_len, arch, u32 hidden, u32 layers, u32 feature_dim,
#   u64 init_seed.

def serialize(params: ModelParams) -> bytes:
    spec = params.spec
    out = bytearray()
    out += MODEL_MAGIC
    out += struct.pack("<I", MODEL_FORMAT_VERSION)
    arch = spec.arch.encode("utf-8")
    out += struct.pack("<I", len(arch)) + arch
    out += struct.pack("<IIIQ", spec.hidden, spec.layers, spec.feature_dim,
                       spec.init_seed & 0xFFFFFFFFFFFFFFFF)
    out += struct.pack("<I", len(params.tensors))
    for name, t in params.tensors.items():
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", t.data.ndim)
        out += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        out += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def serialized_size(params: ModelParams) -> int:
    """Byte length serialize() will produce, computed without serializing."""
    n = len(MODEL_MAGIC) + 4
    n += 4 + len(params.spec.arch.encode("utf-8")) + 4 + 4 + 4 + 8
    n += 4
    for name, t in params.tensors.items():
        n += 4 + len(name.encode("utf-8")) + 4 + 4 * t.data.ndim + 8 * t.data.size
    return n + 4


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptModel("model blob truncated")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def deserialize(blob: bytes) -> ModelParams:
    """Rebuild a model bit-identically from serialize() output."""
    if len(blob) < len(MODEL_MAGIC) + 8:
        raise CorruptModel("model blob too short")
    if blob[:4] != MODEL_MAGIC:
        raise CorruptModel("bad magic bytes")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CorruptModel("checksum mismatch")
    r = _Reader(blob[:-4])
    r.take(4)  # magic
    version = r.u32()
    if version != MODEL_FORMAT_VERSION:
        raise VersionMismatch(
            f"model format version {version}, this build reads "
            f"{MODEL_FORMAT_VERSION}")
    try:
        arch = r.take(r.u32()).decode("utf-8")
        hidden, layers, feature_dim = r.u32(), r.u32(), r.u32()
        init_seed = r.u64()
        n_params = r.u32()
        tensors: dict[str, T.Tensor] = {}
        for _ in range(n_params):
            name = r.take(r.u32()).decode("utf-8")
            ndim = r.u32()
            if ndim > 8:
                raise CorruptModel(f"implausible tensor rank {ndim}")
            shape = tuple(r.u32() for _ in range(ndim))
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape)
            tensors[name] = T.Tensor(arr.copy(), requires_grad=True)
    except (UnicodeDecodeError, struct.error) as exc:
        raise CorruptModel(f"malformed model blob: {exc}") from exc
    if r.pos != len(r.blob):
        raise CorruptModel("trailing bytes after parameter table")
    if arch not in ARCH_KINDS:
        raise CorruptModel(f"unknown architecture '{arch}' in model blob")
    spec = SegModelSpec(arch=arch, hidden=hidden, layers=layers,
                        feature_dim=feature_dim, init_seed=init_seed)
    return ModelParams(spec, tensors)
