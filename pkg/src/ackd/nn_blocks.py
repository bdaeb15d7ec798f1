"""Backbone construction, auxiliary-learner attachment, and stripping.

A backbone is an ordered list of stages, each opened by a stride-2
down-sampling convolution and followed by pre-activation residual blocks,
ending in a global-average-pool head. Auxiliary learners branch off a
down-sampling layer's output: a spec like "D2B3" attaches a branch with 3
extra feature-extractor blocks to the 2nd down-sampling layer. Branches
carry stride-2 entry convs for every skipped stage so their features reach
the same width and spatial extent as the backbone head input, then get a
fresh classifier. Stripping returns the bare backbone, parameters intact.
"""

from __future__ import annotations

import io
import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor

CHECKPOINT_MAGIC = b"ACKD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Backbone descriptor: stages, blocks per stage, stem width, classes."""

    stage_count: int
    blocks_per_stage: int
    base_width: int
    class_count: int
    in_channels: int = 1
    image_size: int = 16

    def __post_init__(self):
        for name in ("stage_count", "blocks_per_stage", "base_width", "class_count",
                     "in_channels", "image_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.image_size // (2 ** self.stage_count) < 1:
            raise ValueError(
                f"{self.stage_count} down-sampling layers reduce a "
                f"{self.image_size}px input below 1px"
            )

    def stage_width(self, stage: int) -> int:
        return self.base_width * (2 ** (stage - 1))

    def stage_extent(self, stage: int) -> int:
        return self.image_size // (2 ** stage)

    def to_dict(self) -> dict:
        return {
            "stage_count": self.stage_count,
            "blocks_per_stage": self.blocks_per_stage,
            "base_width": self.base_width,
            "class_count": self.class_count,
            "in_channels": self.in_channels,
            "image_size": self.image_size,
        }


_BRANCH_RE = re.compile(r"^D(\d+)B(\d+)$")


@dataclass(frozen=True)
class BranchSpec:
    """Auxiliary learner placement: attach stage N, depth M ("DNBM")."""

    attach_stage: int
    depth: int

    def __post_init__(self):
        if self.attach_stage < 1:
            raise ValueError("attach_stage must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "BranchSpec":
        m = _BRANCH_RE.match(text.strip().upper())
        if not m:
            raise ValueError(f"branch spec {text!r} does not match DNBM")
        return cls(attach_stage=int(m.group(1)), depth=int(m.group(2)))

    def __str__(self) -> str:
        return f"D{self.attach_stage}B{self.depth}"


class Conv2d:
    """3x3 or 1x1 convolution layer; weights OIHW, optional (C,1,1) bias."""

    def __init__(self, rng, name, in_ch, out_ch, ksize, stride=1, pad=0,
                 bias=False, zero_init=False, dtype=tc.DEFAULT_DTYPE):
        self.name = name
        self.stride = stride
        self.pad = pad
        shape = (out_ch, in_ch, ksize, ksize)
        if zero_init:
            self.w = tc.zeros(shape, dtype=dtype)
        else:
            self.w = tc.he_init(rng, shape, fan_in=in_ch * ksize * ksize, dtype=dtype)
        self.w.requires_grad = True
        self.b = None
        if bias:
            self.b = tc.zeros((out_ch, 1, 1), dtype=dtype)
            self.b.requires_grad = True

    def __call__(self, x: Tensor) -> Tensor:
        y = tc.conv2d(x, self.w, stride=self.stride, pad=self.pad)
        return y + self.b if self.b is not None else y

    def params(self):
        yield f"{self.name}.w", self.w
        if self.b is not None:
            yield f"{self.name}.b", self.b


class Linear:
    def __init__(self, rng, name, in_dim, out_dim, dtype=tc.DEFAULT_DTYPE):
        self.name = name
        self.w = tc.he_init(rng, (in_dim, out_dim), fan_in=in_dim, dtype=dtype)
        self.w.requires_grad = True
        self.b = tc.zeros((out_dim,), dtype=dtype)
        self.b.requires_grad = True

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def params(self):
        yield f"{self.name}.w", self.w
        yield f"{self.name}.b", self.b


class PreactBlock:
    """x + conv(relu(conv(relu(x)))); the second conv starts at zero so the
    block is the identity at initialisation."""

    def __init__(self, rng, name, width, dtype=tc.DEFAULT_DTYPE):
        self.c1 = Conv2d(rng, f"{name}.c1", width, width, 3, pad=1, dtype=dtype)
        self.c2 = Conv2d(rng, f"{name}.c2", width, width, 3, pad=1,
                         zero_init=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.c2(self.c1(x.relu()).relu())
        return x + h

    def params(self):
        yield from self.c1.params()
        yield from self.c2.params()


class ModelGraph:
    """Stage/down-sampling backbone with a global-pool classifier head."""

    def __init__(self, arch: ArchSpec, rng: np.random.Generator,
                 dtype=tc.DEFAULT_DTYPE):
        self.arch = arch
        self.dtype = dtype
        self.stem = Conv2d(rng, "stem", arch.in_channels, arch.base_width, 3,
                           pad=1, dtype=dtype)
        self.downsamples: list[Conv2d] = []
        self.stages: list[list[PreactBlock]] = []
        prev = arch.base_width
        for s in range(1, arch.stage_count + 1):
            width = arch.stage_width(s)
            self.downsamples.append(
                Conv2d(rng, f"ds{s}", prev, width, 3, stride=2, pad=1, dtype=dtype)
            )
            self.stages.append(
                [PreactBlock(rng, f"s{s}b{b}", width, dtype=dtype)
                 for b in range(1, arch.blocks_per_stage + 1)]
            )
            prev = width
        self.head = Linear(rng, "head", prev, arch.class_count, dtype=dtype)
        self._params = collect_params(self._layers())

    def _layers(self):
        yield self.stem
        for ds, blocks in zip(self.downsamples, self.stages):
            yield ds
            yield from blocks
        yield self.head

    def forward_taps(self, x: Tensor):
        """Logits plus the per-down-sampling-layer activations and the pooled
        penultimate feature."""
        h = self.stem(x)
        taps = []
        for ds, blocks in zip(self.downsamples, self.stages):
            h = ds(h)
            taps.append(h)
            for block in blocks:
                h = block(h)
        pooled = h.relu().global_avg_pool()
        return self.head(pooled), taps, pooled

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_taps(x)[0]

    @property
    def params(self) -> dict[str, Tensor]:
        return self._params

    def param_count(self) -> int:
        return sum(p.size for p in self._params.values())


class Branch:
    """One auxiliary learner: entry convs for skipped stages, depth blocks at
    the deepest width, and a fresh classifier head."""

    def __init__(self, rng, index: int, spec: BranchSpec, arch: ArchSpec,
                 dtype=tc.DEFAULT_DTYPE):
        if spec.attach_stage > arch.stage_count:
            raise ValueError(
                f"branch {spec} attaches beyond the {arch.stage_count} "
                f"down-sampling layers"
            )
        self.spec = spec
        self.index = index
        name = f"br{index}"
        deep = arch.stage_width(arch.stage_count)
        self.transitions: list[Conv2d] = []
        prev = arch.stage_width(spec.attach_stage)
        for s in range(spec.attach_stage + 1, arch.stage_count + 1):
            width = arch.stage_width(s)
            self.transitions.append(
                Conv2d(rng, f"{name}.t{s}", prev, width, 3, stride=2, pad=1, dtype=dtype)
            )
            prev = width
        self.blocks = [PreactBlock(rng, f"{name}.b{m}", deep, dtype=dtype)
                       for m in range(1, spec.depth + 1)]
        self.head = Linear(rng, f"{name}.head", deep, arch.class_count, dtype=dtype)

    def __call__(self, tap: Tensor):
        h = tap
        for t in self.transitions:
            h = t(h)
        for block in self.blocks:
            h = block(h)
        feature = h
        logits = self.head(h.relu().global_avg_pool())
        return feature, logits

    def _layers(self):
        yield from self.transitions
        yield from self.blocks
        yield self.head

    def params(self):
        for layer in self._layers():
            yield from layer.params()


@dataclass
class EnsembleOutputs:
    target_logits: Tensor
    target_feature: Tensor
    branch_features: list[Tensor]
    branch_logits: list[Tensor]


class StudentEnsemble:
    """Backbone (target learner) plus auxiliary learners reading its taps."""

    def __init__(self, backbone: ModelGraph, branches: list[Branch]):
        self.backbone = backbone
        self.branches = branches
        self._params = dict(backbone.params)
        for br in branches:
            for name, p in br.params():
                if name in self._params:
                    raise ValueError(f"duplicate parameter name {name!r}")
                self._params[name] = p

    @property
    def specs(self) -> list[BranchSpec]:
        return [br.spec for br in self.branches]

    def forward(self, x: Tensor) -> EnsembleOutputs:
        logits, taps, pooled = self.backbone.forward_taps(x)
        feats, blogits = [], []
        for br in self.branches:
            f, z = br(taps[br.spec.attach_stage - 1])
            feats.append(f)
            blogits.append(z)
        return EnsembleOutputs(logits, pooled, feats, blogits)

    @property
    def params(self) -> dict[str, Tensor]:
        return self._params

    def branch_params(self) -> dict[str, Tensor]:
        return {n: p for n, p in self._params.items() if n.startswith("br")}

    def param_count(self) -> int:
        return sum(p.size for p in self._params.values())


def collect_params(layers) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for layer in layers:
        for name, p in layer.params():
            if name in params:
                raise ValueError(f"duplicate parameter name {name!r}")
            params[name] = p
    return params


def build_backbone(arch: ArchSpec, rng: np.random.Generator | int = 0,
                   dtype=tc.DEFAULT_DTYPE) -> ModelGraph:
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    return ModelGraph(arch, rng, dtype=dtype)


def attach_auxiliary_learners(backbone: ModelGraph,
                              specs: list[BranchSpec | str],
                              rng: np.random.Generator | int = 0) -> StudentEnsemble:
    """Branches are built in spec order from the given rng; an empty spec list
    degenerates to the bare backbone (vanilla-KD mode)."""
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    parsed = [s if isinstance(s, BranchSpec) else BranchSpec.parse(s) for s in specs]
    branches = [Branch(rng, k + 1, spec, backbone.arch, dtype=backbone.dtype)
                for k, spec in enumerate(parsed)]
    return StudentEnsemble(backbone, branches)


def strip_auxiliaries(ensemble: StudentEnsemble) -> ModelGraph:
    """Drop every auxiliary learner; the backbone keeps its parameters."""
    return ensemble.backbone


# -- checkpoints ---------------------------------------------------------------

_DTYPE_CODES = {"<f4": "<f4", "<f8": "<f8"}


def _dtype_code(arr: np.ndarray) -> str:
    code = {"float32": "<f4", "float64": "<f8"}.get(arr.dtype.name)
    if code is None:
        raise ValueError(f"checkpoint supports float32/float64, got {arr.dtype}")
    return code


def save_checkpoint(path, params: dict[str, Tensor], arch: ArchSpec,
                    branch_specs: list[BranchSpec] | None = None) -> None:
    """Versioned binary container: JSON manifest + raw little-endian values."""
    manifest = {
        "arch": arch.to_dict(),
        "branch_specs": [str(s) for s in branch_specs] if branch_specs else None,
        "params": [
            {"name": n, "shape": list(p.shape), "dtype": _dtype_code(p.data)}
            for n, p in params.items()
        ],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n, p in params.items():
            fh.write(np.ascontiguousarray(p.data, dtype=_dtype_code(p.data)).tobytes())


def load_checkpoint(path):
    """Returns (arch, branch_specs or None, dict name -> np.ndarray)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, blob_len = struct.unpack("<II", buf.read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(buf.read(blob_len).decode("utf-8"))
    arch = ArchSpec(**manifest["arch"])
    specs = manifest["branch_specs"]
    specs = [BranchSpec.parse(s) for s in specs] if specs else None
    params: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        dt = np.dtype(_DTYPE_CODES[entry["dtype"]])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        data = buf.read(count * dt.itemsize)
        if len(data) != count * dt.itemsize:
            raise ValueError(f"{path}: truncated checkpoint at {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(data, dtype=dt).reshape(entry["shape"]).copy()
    return arch, specs, params


def save_model(path, model: ModelGraph) -> None:
    save_checkpoint(path, model.params, model.arch)


def save_ensemble(path, ensemble: StudentEnsemble) -> None:
    save_checkpoint(path, ensemble.params, ensemble.backbone.arch, ensemble.specs)


def load_model(path, dtype=tc.DEFAULT_DTYPE) -> ModelGraph:
    arch, specs, params = load_checkpoint(path)
    if specs:
        raise ValueError(f"{path} holds an ensemble; use load_ensemble")
    model = build_backbone(arch, rng=np.random.default_rng(0), dtype=dtype)
    _assign_params(model.params, params)
    return model


def load_ensemble(path, dtype=tc.DEFAULT_DTYPE) -> StudentEnsemble:
    arch, specs, params = load_checkpoint(path)
    backbone = build_backbone(arch, rng=np.random.default_rng(0), dtype=dtype)
    ens = attach_auxiliary_learners(backbone, specs or [], rng=np.random.default_rng(0))
    _assign_params(ens.params, params)
    return ens


def _assign_params(target: dict[str, Tensor], source: dict[str, np.ndarray]) -> None:
    if set(target) != set(source):
        missing = set(target) ^ set(source)
        raise ValueError(f"checkpoint parameter names do not match model: {sorted(missing)[:4]}")
    for name, p in target.items():
        arr = source[name]
        if tuple(arr.shape) != p.shape:
            raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {p.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
