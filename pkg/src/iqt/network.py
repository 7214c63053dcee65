"""Anisotropic super-resolution U-Net.

The encoder pools only in-plane until voxels are isotropic, then pools
isotropically; every level is a residual block. Skip paths pass through
bottleneck blocks whose (1,1,u) transpose convolution upsamples z so the
skip matches the decoder, which upsamples (2,2,2) between all levels.
The z extent therefore grows by the super-resolution factor r overall:
input patches of 32 x 32 x (32/r) map to 32 x 32 x 32.

Optional fixed binary channel masks after each 3x3x3 convolution give an
implicit ensemble for uncertainty estimation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import BatchNormState, Graph, Tensor
from .errors import CapabilityError, FormatError, ShapeError, SpecError
from .normalizer import LandmarkTable, apply_normalization
from .patching import blend_clip, extract_pairs
from .volume import Geometry, Volume3D

_CKPT_MAGIC = b"IQTM"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class MasksemblesSpec:
    """Fixed binary channel masks: m masks, overlap controlled by scale."""

    m: int
    scale: float = 2.0

    def __post_init__(self):
        if self.m < 1:
            raise SpecError(f"mask count must be >= 1, got {self.m}")
        if self.scale < 1.0:
            raise SpecError(f"mask scale must be >= 1, got {self.scale}")

    def active_channels(self, channels: int) -> int:
        return max(int(round(channels / self.scale)), 1)

    def build(self, channels: int) -> np.ndarray:
        """Deterministic (m, channels) binary mask matrix.

        Each mask activates round(channels / scale) channels; start
        offsets are spread evenly so pairwise overlap is minimal and every
        channel is covered (requires k * m >= channels).
        """
        k = self.active_channels(channels)
        if k * self.m < channels:
            raise SpecError(
                f"masks cover only {k * self.m} of {channels} channels; decrease scale or increase mask count"
            )
        masks = np.zeros((self.m, channels), dtype=np.float64)
        for i in range(self.m):
            start = (i * channels) // self.m
            cols = (start + np.arange(k)) % channels
            masks[i, cols] = 1.0
        return masks


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; together with weights it defines the model."""

    r: int
    levels: int = 5
    convs_per_level: int = 2
    base_filters: int = 16
    bottleneck_depth: int = 2
    in_channels: int = 1
    masksembles: MasksemblesSpec | None = None

    def __post_init__(self):
        if self.r not in (2, 4, 8):
            raise SpecError(f"upsampling factor must be one of 2, 4, 8, got {self.r}")
        if self.levels < 2:
            raise SpecError(f"need >= 2 levels, got {self.levels}")
        if self.levels - 1 < self.n_anisotropic:
            raise SpecError(
                f"{self.levels} levels provide {self.levels - 1} pooling stages, "
                f"but r={self.r} needs {self.n_anisotropic} anisotropic stages"
            )
        if self.convs_per_level < 1 or self.base_filters < 1 or self.bottleneck_depth < 1:
            raise SpecError("convs per level, filters and bottleneck depth must be >= 1")

    @property
    def n_anisotropic(self) -> int:
        return int(np.log2(self.r))

    def filters(self, level: int) -> int:
        return self.base_filters * (2**level)

    def pool_window(self, stage: int) -> tuple[int, int, int]:
        return (2, 2, 1) if stage < self.n_anisotropic else (2, 2, 2)

    def skip_upscale(self, level: int) -> int:
        """z-factor of the bottleneck on the skip at `level`.

        The per-stage factors are 2 on each anisotropic stage and multiply
        to r along the decoder path, so level i below all remaining
        anisotropic stages carries the cumulative factor.
        """
        return 2 ** max(self.n_anisotropic - level, 0)

    def validate_input_shape(self, shape: tuple[int, ...]) -> None:
        if len(shape) != 5:
            raise ShapeError("batch must be (N, C, X, Y, Z)", shape)
        n, c, x, y, z = shape
        if c != self.in_channels:
            raise ShapeError("wrong channel count", shape, (n, self.in_channels, x, y, z))
        div_xy = 2 ** (self.levels - 1)
        div_z = 2 ** (self.levels - 1 - self.n_anisotropic)
        if x % div_xy or y % div_xy or x // div_xy < 1 or y // div_xy < 1:
            raise SpecError(f"in-plane dims {x}x{y} not divisible by {div_xy} across {self.levels} levels")
        if z < 2 or z % div_z or z // div_z < 1:
            raise SpecError(f"patch z-dim {z} too small or not divisible by {div_z} for {self.levels} levels")

    def to_json(self) -> dict:
        doc = {
            "r": self.r,
            "levels": self.levels,
            "convs_per_level": self.convs_per_level,
            "base_filters": self.base_filters,
            "bottleneck_depth": self.bottleneck_depth,
            "in_channels": self.in_channels,
        }
        if self.masksembles is not None:
            doc["masksembles"] = {"m": self.masksembles.m, "scale": self.masksembles.scale}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ModelSpec":
        kwargs = dict(doc)
        mask = kwargs.pop("masksembles", None)
        if mask is not None:
            kwargs["masksembles"] = MasksemblesSpec(m=mask["m"], scale=mask["scale"])
        return cls(**kwargs)


@dataclass(eq=False)
class ModelWeights:
    """Named parameter tensors plus batchnorm state and ensemble masks."""

    params: dict[str, Tensor] = field(default_factory=dict)
    bn_states: dict[str, BatchNormState] = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def trainable(self) -> dict[str, Tensor]:
        return {name: t for name, t in self.params.items() if t.requires_grad}

    def copy(self) -> "ModelWeights":
        out = ModelWeights()
        for name, t in self.params.items():
            out.params[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name)
        for name, state in self.bn_states.items():
            fresh = BatchNormState(state.running_mean.shape[1], dtype=state.running_mean.dtype)
            fresh.running_mean = state.running_mean.copy()
            fresh.running_var = state.running_var.copy()
            out.bn_states[name] = fresh
        out.masks = {name: m.copy() for name, m in self.masks.items()}
        return out


class _Builder:
    """Allocates named parameters on first use; reuses them afterwards."""

    def __init__(self, spec: ModelSpec, weights: ModelWeights, dtype, rng):
        self.spec = spec
        self.weights = weights
        self.dtype = dtype
        self.rng = rng

    def param(self, name: str, shape, init: str) -> Tensor:
        from .training import glorot_init

        if name in self.weights.params:
            return self.weights.params[name]
        if init == "glorot":
            data = glorot_init(shape, self.rng).astype(self.dtype)
        elif init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        else:
            data = np.ones(shape, dtype=self.dtype)
        tensor = Tensor(data, requires_grad=True, name=name)
        self.weights.params[name] = tensor
        return tensor

    def bn_state(self, name: str) -> BatchNormState:
        if name not in self.weights.bn_states:
            channels = self.weights.params[name + ".gamma"].shape[1]
            self.weights.bn_states[name] = BatchNormState(channels, dtype=self.dtype)
        return self.weights.bn_states[name]

    def mask(self, name: str, channels: int) -> np.ndarray:
        if name not in self.weights.masks:
            self.weights.masks[name] = self.spec.masksembles.build(channels)
        return self.weights.masks[name]


def _conv_block(b: _Builder, g: Graph, x: Tensor, name: str, kind: str, out_ch: int, in_ch: int,
                training: bool, factor=None, masked: bool = False) -> Tensor:
    """conv [+ ensemble mask] + ReLU + BN."""
    x = _conv(b, g, x, name, kind, out_ch, in_ch, factor)
    if masked and b.spec.masksembles is not None:
        mask = b.mask(name + ".mask", out_ch)
        x = g.apply("masksemble_mask", [x], {"masks": mask})
    x = g.apply("relu", [x])
    gamma = b.param(name + ".bn.gamma", (1, out_ch, 1, 1, 1), "ones")
    beta = b.param(name + ".bn.beta", (1, out_ch, 1, 1, 1), "zeros")
    state = b.bn_state(name + ".bn")
    return g.apply("batchnorm", [x, gamma, beta], {"state": state, "training": training})


def _conv(b: _Builder, g: Graph, x: Tensor, name: str, kind: str, out_ch: int, in_ch: int, factor=None) -> Tensor:
    if kind == "conv3":
        shape = (out_ch, in_ch, 3, 3, 3)
        params = None
    elif kind == "conv1":
        shape = (out_ch, in_ch, 1, 1, 1)
        params = None
    elif kind == "convtranspose":
        shape = (out_ch, in_ch) + tuple(factor)
        params = {"factor": tuple(factor)}
    elif kind == "convtranspose_z":
        shape = (out_ch, in_ch, 1, 1, int(factor))
        params = {"u": int(factor)}
    else:
        raise ValueError(f"unexpected conv kind {kind}")
    w = b.param(name + ".w", shape, "glorot")
    bias = b.param(name + ".b", (1, out_ch, 1, 1, 1), "zeros")
    return g.apply(kind, [x, w, bias], params)


def _residual_block(b: _Builder, g: Graph, x: Tensor, name: str, in_ch: int, out_ch: int, training: bool) -> Tensor:
    h = x
    ch = in_ch
    for j in range(b.spec.convs_per_level):
        h = _conv_block(b, g, h, f"{name}.conv{j}", "conv3", out_ch, ch, training, masked=True)
        ch = out_ch
    skip = _conv(b, g, x, f"{name}.skip", "conv1", out_ch, in_ch)
    return g.apply("add", [h, skip])


def _bottleneck_block(b: _Builder, g: Graph, x: Tensor, name: str, f: int, u: int, training: bool) -> Tensor:
    half = max(f // 2, 1)
    h = _conv_block(b, g, x, f"{name}.in", "conv1", f, f, training)
    ch = f
    for j in range(b.spec.bottleneck_depth):
        h = _conv_block(b, g, h, f"{name}.mid{j}", "conv3", half, ch, training, masked=True)
        ch = half
    h = _conv_block(b, g, h, f"{name}.out", "conv1", f, half, training)
    h = _conv_block(b, g, h, f"{name}.up", "convtranspose_z", f, f, training, factor=u)
    skip = _conv(b, g, x, f"{name}.res", "convtranspose_z", f, f, factor=u)
    return g.apply("add", [h, skip])


def run_model(spec: ModelSpec, weights: ModelWeights, graph: Graph, x: Tensor,
              training: bool = False, rng=None, dtype=None) -> Tensor:
    """Execute the network on `x`, materializing any missing parameters."""
    spec.validate_input_shape(x.shape)
    if spec.masksembles is not None and x.shape[0] % spec.masksembles.m:
        raise ShapeError(f"batch size must be divisible by mask count {spec.masksembles.m}", x.shape)
    dtype = dtype or (next(iter(weights.params.values())).data.dtype if weights.params else x.data.dtype)
    b = _Builder(spec, weights, dtype, rng)

    levels = spec.levels
    h = x
    skips = []
    for i in range(levels):
        h = _residual_block(b, g=graph, x=h, name=f"enc{i}", in_ch=(spec.in_channels if i == 0 else spec.filters(i - 1)),
                            out_ch=spec.filters(i), training=training)
        if i < levels - 1:
            skips.append(h)
            h = graph.apply("maxpool", [h], {"window": spec.pool_window(i)})

    for i in range(levels - 2, -1, -1):
        h = _conv_block(b, graph, h, f"up{i}", "convtranspose", spec.filters(i), spec.filters(i + 1),
                        training, factor=(2, 2, 2))
        skip = _bottleneck_block(b, graph, skips[i], f"skip{i}", spec.filters(i), spec.skip_upscale(i), training)
        h = graph.apply("concat_channels", [h, skip])
        h = _residual_block(b, graph, h, f"dec{i}", in_ch=2 * spec.filters(i), out_ch=spec.filters(i),
                            training=training)

    return _conv(b, graph, h, "final", "conv1", 1, spec.filters(0))


def build_aniso_unet(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> ModelWeights:
    """Materialize Glorot-initialized weights for the architecture.

    Runs one tracing forward pass on a minimal dummy batch so every layer
    allocates its parameters in execution order.
    """
    rng = np.random.default_rng(seed)
    weights = ModelWeights()
    div_xy = 2 ** (spec.levels - 1)
    div_z = 2 ** (spec.levels - 1 - spec.n_anisotropic)
    batch = spec.masksembles.m if spec.masksembles is not None else 1
    dummy = Tensor(np.zeros((batch, spec.in_channels, div_xy, div_xy, max(div_z, 2)), dtype=dtype))
    graph = Graph()
    graph.mutate_state = False
    run_model(spec, weights, graph, dummy, training=True, rng=rng, dtype=dtype)
    return weights


def forward(weights: ModelWeights, spec: ModelSpec, batch: np.ndarray) -> np.ndarray:
    """Deterministic inference on a batch (N, 1, X, Y, Z)."""
    dtype = next(iter(weights.params.values())).data.dtype
    x = Tensor(np.asarray(batch, dtype=dtype))
    out = run_model(spec, weights, Graph(), x, training=False)
    return out.data


def _ensemble_forward(weights: ModelWeights, spec: ModelSpec, patches: np.ndarray) -> np.ndarray:
    """Outputs of every ensemble member: (m, k, 1, X, Y, Z').

    The batch is laid out group-major (all k patches under mask 0, then
    mask 1, ...), matching the mask routing by contiguous batch blocks.
    """
    if spec.masksembles is None:
        raise CapabilityError("model was built without masksembles")
    m = spec.masksembles.m
    k = patches.shape[0]
    tiled = np.tile(patches, (m, 1, 1, 1, 1))
    out = forward(weights, spec, tiled)
    return out.reshape(m, k, *out.shape[1:])


def predict_with_uncertainty(weights: ModelWeights, spec: ModelSpec, patch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel ensemble mean and variance for a single patch.

    The patch is replicated once per mask and routed through each member;
    the spread of the outputs is the uncertainty map.
    """
    patch = np.asarray(patch)
    if patch.ndim == 3:
        patch = patch[None, None]
    elif patch.ndim != 5 or patch.shape[0] != 1:
        raise ShapeError("expected one patch, (X, Y, Z) or (1, 1, X, Y, Z)", patch.shape)
    outputs = _ensemble_forward(weights, spec, patch)[:, 0, 0]  # (m, X, Y, Z')
    return outputs.mean(axis=0), outputs.var(axis=0)


def enhance_volume(
    weights: ModelWeights,
    spec: ModelSpec,
    lf_volume: Volume3D,
    landmark_table: LandmarkTable | None = None,
    batch_size: int = 8,
) -> Volume3D:
    """Enhance a whole low-field volume patch by patch.

    Normalize, pad, run every grid patch through the network, blend the
    estimates with overlap clipping and crop; the output has r x the input
    slice count and the slice pitch divided by r.
    """
    vol = apply_normalization(lf_volume, landmark_table) if landmark_table is not None else lf_volume
    r = spec.r
    # Self-pairing extracts the low-field grid; the high-field side of the
    # pairs is unused. Threshold 1.0 keeps every grid position.
    dummy_hf = Volume3D(data=np.zeros((vol.dims[0], vol.dims[1], vol.dims[2] * r), dtype=np.float32),
                        geometry=vol.geometry)
    pairs = extract_pairs(vol, dummy_hf, r, bg_threshold=1.0)

    estimates = []
    n = len(pairs.lf_patches)
    for start in range(0, n, batch_size):
        chunk = np.stack(pairs.lf_patches[start : start + batch_size])[:, None]  # (k, 1, px, py, pz)
        if spec.masksembles is not None:
            out = _ensemble_forward(weights, spec, chunk).mean(axis=0)
        else:
            out = forward(weights, spec, chunk)
        estimates.extend(out[:, 0])

    data = blend_clip(estimates, pairs.grid, domain="hf")
    g = vol.geometry
    geometry = Geometry(g.voxel_x, g.voxel_y, g.slice_thickness / r, g.slice_gap / r)
    return Volume3D(data=np.ascontiguousarray(data), geometry=geometry)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, spec: ModelSpec, weights: ModelWeights) -> None:
    """Versioned binary container: spec JSON plus named float32 blobs."""
    entries: list[tuple[str, np.ndarray]] = []
    for name, t in weights.params.items():
        entries.append(("param:" + name, t.data))
    for name, state in weights.bn_states.items():
        entries.append(("bnmean:" + name, state.running_mean))
        entries.append(("bnvar:" + name, state.running_var))
    for name, mask in weights.masks.items():
        entries.append(("mask:" + name, mask))

    spec_blob = json.dumps(spec.to_json()).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(entries)))
        fh.write(struct.pack("<I", len(spec_blob)))
        fh.write(spec_blob)
        for name, arr in entries:
            blob = np.ascontiguousarray(arr, dtype="<f4")
            name_b = name.encode()
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", blob.ndim))
            fh.write(struct.pack(f"<{blob.ndim}I", *blob.shape))
            fh.write(blob.tobytes())


def load_checkpoint(path: str) -> tuple[ModelSpec, ModelWeights]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        version, n_entries = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (spec_len,) = struct.unpack("<I", fh.read(4))
        spec = ModelSpec.from_json(json.loads(fh.read(spec_len).decode()))
        weights = ModelWeights()
        bn_mean: dict[str, np.ndarray] = {}
        bn_var: dict[str, np.ndarray] = {}
        for _ in range(n_entries):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape))
            arr = np.frombuffer(fh.read(count * 4), dtype="<f4").reshape(shape).astype(np.float32)
            kind, _, key = name.partition(":")
            if kind == "param":
                weights.params[key] = Tensor(arr, requires_grad=True, name=key)
            elif kind == "bnmean":
                bn_mean[key] = arr
            elif kind == "bnvar":
                bn_var[key] = arr
            elif kind == "mask":
                weights.masks[key] = arr.astype(np.float64)
            else:
                raise FormatError(f"{path}: unknown checkpoint entry kind {kind!r}")
        for key, mean in bn_mean.items():
            state = BatchNormState(mean.shape[1], dtype=np.float32)
            state.running_mean = mean
            state.running_var = bn_var[key]
            weights.bn_states[key] = state
    return spec, weights
