"""Network: conv encoder, three decoders, point-guided sampling, masked transformer."""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import meshtopo
from .meshtopo import TemplateMesh, build_attention_mask
from .ndtensor import (
    ConfigurationError,
    ContractError,
    DimensionError,
    Tensor,
    as_tensor,
    avg_pool2d,
    broadcast_to,
    concat,
    conv2d,
    get_default_dtype,
    layer_norm,
    linear,
    masked_softmax,
    matmul,
    upsample_nearest2d,
)

SAMPLING_MODES = ("point_guided", "learned_queries")
MASK_MODES = ("none", "single", "progressive")
SAMPLING_EPS = 1e-8
# per-channel statistics of the synthetic renders; inputs are standardized with them
IMAGE_MEAN = np.array([0.186, 0.192, 0.227])
IMAGE_STD = np.array([0.143, 0.126, 0.107])


GELU_GAIN = math.sqrt(2.0)  # He initialisation for convs feeding a GELU


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64
    backbone_channels: int = 128
    feature_resolution: int = 16
    token_dim: int = 64
    joint_count: int = 14
    grid_size: int = 8  # grid tokens Z = grid_size ** 2
    blocks: int = 2
    mask_schedule: tuple[int, ...] = (7, 5, 3, 1)
    heads: int = 4
    ffn_mult: int = 2
    dim_reduction: float = 0.5
    id_dim: int = 16
    sampling_mode: str = "point_guided"
    mask_mode: str = "progressive"
    template_preset: str = "default"
    camera_scale_init: float = 0.8

    def __post_init__(self):
        self.mask_schedule = tuple(int(m) for m in self.mask_schedule)

    @property
    def backbone_resolution(self) -> int:
        return self.image_size // 4

    @property
    def grid_tokens(self) -> int:
        return self.grid_size**2

    @property
    def encoder_count(self) -> int:
        return 2 * self.blocks

    def block_dims(self) -> list[int]:
        dims = [self.token_dim]
        for _ in range(self.blocks):
            dims.append(int(round(dims[-1] * self.dim_reduction)))
        return dims

    def encoder_levels(self) -> list[int | None]:
        """Mask level M per encoder; None means unmasked."""
        if self.mask_mode == "none":
            return [None] * self.encoder_count
        if self.mask_mode == "single":
            return [1] * self.encoder_count
        return list(self.mask_schedule)

    def validate(self) -> None:
        if self.sampling_mode not in SAMPLING_MODES:
            raise ConfigurationError(f"sampling_mode must be one of {SAMPLING_MODES}, got '{self.sampling_mode}'")
        if self.mask_mode not in MASK_MODES:
            raise ConfigurationError(f"mask_mode must be one of {MASK_MODES}, got '{self.mask_mode}'")
        if self.image_size % 4:
            raise ConfigurationError("image_size must be divisible by 4")
        if self.feature_resolution % self.backbone_resolution:
            raise ConfigurationError(
                f"feature_resolution {self.feature_resolution} must be a multiple of backbone resolution {self.backbone_resolution}"
            )
        if self.backbone_resolution % self.grid_size:
            raise ConfigurationError(f"grid_size {self.grid_size} must divide {self.backbone_resolution}")
        if self.token_dim % 4:
            raise ConfigurationError("token_dim must be divisible by 4 for the 2-D positional encoding")
        if self.backbone_channels % 2:
            raise ConfigurationError("backbone_channels must be even")
        if self.mask_mode == "progressive":
            if len(self.mask_schedule) != self.encoder_count:
                raise ConfigurationError(
                    f"mask_schedule has {len(self.mask_schedule)} levels for {self.encoder_count} encoders"
                )
            if any(m < 1 for m in self.mask_schedule):
                raise ConfigurationError("mask levels must be >= 1")
            if any(b > a for a, b in zip(self.mask_schedule, self.mask_schedule[1:])):
                raise ConfigurationError("progressive mask_schedule must be non-increasing")
        for d in self.block_dims()[:-1]:
            if d % self.heads:
                raise ConfigurationError(f"token dim {d} not divisible by {self.heads} heads")
        if self.block_dims()[-1] < 3:
            raise ConfigurationError("final token dim must be >= 3")


@dataclass
class ModelOutput:
    coarse_vertices: Tensor  # (B, N_c, 3)
    dense_vertices: Tensor  # (B, N, 3)
    joints3d: Tensor  # (B, K, 3)
    camera: Tensor  # (B, 3): s, tx, ty
    heatmaps: Tensor  # (B, N_c, h, w)
    target_feature: Tensor | None = None
    attention: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------- pure ops


def positional_encoding_2d(dim: int, h: int, w: int) -> np.ndarray:
    """Sinusoidal (dim, h, w) encoding; first half codes rows, second half columns."""
    half = dim // 2
    freq = 1.0 / (10000.0 ** (np.arange(0, half, 2) / half))
    ys = (np.arange(h) + 0.5) / h * 2 * np.pi
    xs = (np.arange(w) + 0.5) / w * 2 * np.pi
    py = np.concatenate([np.sin(np.outer(freq, ys)), np.cos(np.outer(freq, ys))])  # (half, h)
    px = np.concatenate([np.sin(np.outer(freq, xs)), np.cos(np.outer(freq, xs))])  # (half, w)
    return np.concatenate(
        [np.broadcast_to(py[:, :, None], (half, h, w)), np.broadcast_to(px[:, None, :], (half, h, w))]
    )


def point_guided_sampling(heatmaps, features) -> Tensor:
    """Vertex tokens as heatmap-weighted spatial sums of the feature map.

    ``heatmaps`` (..., N, h, w) are normalised to unit spatial mass, with the
    mass clamped below at 1e-8; ``features`` is (..., D, h, w). Returns
    (..., N, D). A one-hot map reproduces the selected feature column exactly.
    """
    H, F = as_tensor(heatmaps), as_tensor(features)
    if H.shape[-2:] != F.shape[-2:]:
        raise ConfigurationError(f"heatmap {H.shape} and feature {F.shape} resolutions differ")
    if np.any(H.data < 0):
        raise ContractError("heatmaps must be non-negative")
    lead = H.shape[:-2]
    Hf = H.reshape(lead + (H.shape[-2] * H.shape[-1],))
    Ff = F.reshape(F.shape[:-2] + (F.shape[-2] * F.shape[-1],))
    mass = Hf.sum(axis=-1, keepdims=True).clamp_min(SAMPLING_EPS)
    return matmul(Hf / mass, Ff.swapaxes(-1, -2))


def project_2d(points, camera) -> Tensor:
    """Weak perspective ``s * (X, Y) + (tx, ty)`` for (B, n, 3) points and (B, 3) cameras."""
    points, camera = as_tensor(points), as_tensor(camera)
    unbatched = points.ndim == 2
    if unbatched:
        points, camera = points.reshape((1,) + points.shape), camera.reshape(1, 3)
    s = camera[:, 0:1].reshape(-1, 1, 1)
    t = camera[:, 1:3].reshape(-1, 1, 2)
    out = points[:, :, 0:2] * s + t
    return out.reshape(out.shape[1:]) if unbatched else out


# ------------------------------------------------------------------ model


class PointGuidedMeshModel:
    """Parameters live in :attr:`params`, an ordered name -> Tensor dict."""

    def __init__(self, config: ModelConfig, template: TemplateMesh, seed: int = 0):
        config.validate()
        if config.joint_count != template.joint_count:
            raise ConfigurationError(f"config joint_count {config.joint_count} != template {template.joint_count}")
        self.config = config
        self.template = template
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        c = config
        self._pe = positional_encoding_2d(c.token_dim, c.feature_resolution, c.feature_resolution)
        self._grid_pe = positional_encoding_2d(c.token_dim, c.grid_size, c.grid_size)
        self._masks = [
            build_attention_mask(template.hop, M, c.joint_count, c.grid_tokens).allowed for M in c.encoder_levels()
        ]

    # ------------------------------------------------------------- params
    def _add(self, name: str, array: np.ndarray) -> None:
        self.params[name] = Tensor(array, requires_grad=True, dtype=get_default_dtype(), name=name)

    def _dense(self, name: str, fan_in: int, fan_out: int, bias: float = 0.0) -> None:
        self._add(f"{name}.w", self._rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)))
        self._add(f"{name}.b", np.full(fan_out, bias))

    def _conv(self, name: str, c_in: int, c_out: int, k: int, bias: float = 0.0, gain: float = 1.0) -> None:
        fan_in = c_in * k * k
        self._add(f"{name}.w", self._rng.normal(0.0, gain / math.sqrt(fan_in), size=(c_out, c_in, k, k)))
        self._add(f"{name}.b", np.full(c_out, bias))

    def _norm(self, name: str, dim: int) -> None:
        self._add(f"{name}.g", np.ones(dim))
        self._add(f"{name}.b", np.zeros(dim))

    def _build(self) -> None:
        c, t = self.config, self.template
        C, D = c.backbone_channels, c.token_dim
        n_vert, K, Z = t.coarse_count, c.joint_count, c.grid_tokens
        hw = c.feature_resolution**2

        self._conv("backbone.0", 3, C // 2, 3, gain=GELU_GAIN)
        self._conv("backbone.1", C // 2, C, 3, gain=GELU_GAIN)
        self._conv("backbone.2", C, C, 3, gain=GELU_GAIN)
        self._conv("heatmap.0", C + 2, C, 3, gain=GELU_GAIN)
        # sigmoid starts near the 1/(h*w) prior of a one-hot target
        self._conv("heatmap.1", C, n_vert, 1, bias=-math.log(hw))
        self._conv("target.0", C, D, 3)
        self._conv("grid.0", C, D, 1)

        self._add("tokens.joint", self._rng.normal(size=(K, D)))
        if c.sampling_mode == "learned_queries":
            self._add("tokens.vertex_query", self._rng.normal(size=(n_vert, D)))
        self._add("tokens.identity", self._rng.normal(size=(n_vert + K + Z, c.id_dim)))
        self._dense("tokens.proj", D + c.id_dim, D)

        dims = c.block_dims()
        e = 0
        for b in range(c.blocks):
            d = dims[b]
            for _ in range(2):
                p = f"encoder.{e}"
                self._norm(f"{p}.ln1", d)
                for proj in ("q", "k", "v", "o"):
                    self._dense(f"{p}.{proj}", d, d)
                self._norm(f"{p}.ln2", d)
                self._dense(f"{p}.ffn1", d, c.ffn_mult * d)
                self._dense(f"{p}.ffn2", c.ffn_mult * d, d)
                e += 1
            self._dense(f"reduce.{b}", d, dims[b + 1])
        self._norm("head.ln", dims[-1])
        self._dense("head.coord", dims[-1], 3)
        s0 = math.log(math.expm1(c.camera_scale_init))
        self._add("head.camera.w", self._rng.normal(0.0, 0.01, size=(dims[-1], 3)))
        self._add("head.camera.b", np.array([s0, 0.0, 0.0]))

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def p(self, name: str) -> Tensor:
        return self.params[name]

    # ------------------------------------------------------------ stages
    def _conv_block(self, x, name, pool: bool = False):
        x = conv2d(x, self.p(f"{name}.w"), self.p(f"{name}.b"), stride=1, padding=1).gelu()
        return avg_pool2d(x, 2) if pool else x

    def encode_backbone(self, image) -> Tensor:
        image = as_tensor(image)
        if image.ndim == 3:
            image = image.reshape((1,) + image.shape)
        if image.ndim != 4 or image.shape[1] != 3:
            raise DimensionError(f"expected (B, 3, H, W) images, got {image.shape}")
        s = self.config.image_size
        if image.shape[2:] != (s, s):
            raise DimensionError(f"expected {s}x{s} images, got {image.shape[2:]}")
        mean, std = IMAGE_MEAN.reshape(1, 3, 1, 1), IMAGE_STD.reshape(1, 3, 1, 1)
        image = (image - mean.astype(image.dtype)) * (1.0 / std).astype(image.dtype)
        x = self._conv_block(image, "backbone.0", pool=True)
        x = self._conv_block(x, "backbone.1", pool=True)
        return self._conv_block(x, "backbone.2")

    def _coords(self, x: Tensor) -> np.ndarray:
        """(B, 2, h, w) normalised column/row coordinates, so the heatmap branch knows where it looks."""
        B, _, h, w = x.shape
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h * 2 - 1, (np.arange(w) + 0.5) / w * 2 - 1, indexing="ij")
        return np.broadcast_to(np.stack([xs, ys])[None], (B, 2, h, w)).astype(x.dtype)

    def decode_heads(self, xb: Tensor):
        c = self.config
        up = c.feature_resolution // xb.shape[-1]
        xu = upsample_nearest2d(xb, up)
        h = self._conv_block(concat([xu, self._coords(xu)], axis=1), "heatmap.0")
        heatmaps = conv2d(h, self.p("heatmap.1.w"), self.p("heatmap.1.b")).sigmoid()
        target = conv2d(xu, self.p("target.0.w"), self.p("target.0.b"), padding=1) + self._pe.astype(xu.dtype)
        if heatmaps.shape[-2:] != target.shape[-2:]:
            raise ConfigurationError("heatmap and target feature resolutions differ")
        pooled = avg_pool2d(xb, xb.shape[-1] // c.grid_size)
        # conv features alone do not say where a cell is
        grid = conv2d(pooled, self.p("grid.0.w"), self.p("grid.0.b")) + self._grid_pe.astype(pooled.dtype)
        B = grid.shape[0]
        grid_tokens = grid.reshape(B, c.token_dim, c.grid_tokens).swapaxes(1, 2)
        return heatmaps, target, grid_tokens

    def assemble_tokens(self, vertex_tokens: Tensor, grid_tokens: Tensor) -> Tensor:
        B = grid_tokens.shape[0]
        if vertex_tokens.ndim == 2:
            vertex_tokens = broadcast_to(vertex_tokens, (B,) + vertex_tokens.shape)
        joints = broadcast_to(self.p("tokens.joint"), (B,) + self.p("tokens.joint").shape)
        seq = concat([vertex_tokens, joints, grid_tokens], axis=1)
        ident = self.p("tokens.identity")
        ident = broadcast_to(ident, (B,) + ident.shape)
        return linear(concat([seq, ident], axis=2), self.p("tokens.proj.w"), self.p("tokens.proj.b"))

    def _attention(self, x: Tensor, prefix: str, mask: np.ndarray, record: list | None) -> Tensor:
        B, T, d = x.shape
        nh = self.config.heads
        dh = d // nh

        def heads(name):
            y = linear(x, self.p(f"{prefix}.{name}.w"), self.p(f"{prefix}.{name}.b"))
            return y.reshape(B, T, nh, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        attn = masked_softmax(scores, mask)
        if record is not None:
            record.append(attn.data)
        out = matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, T, d)
        return linear(out, self.p(f"{prefix}.o.w"), self.p(f"{prefix}.o.b"))

    def encoder(self, x: Tensor, index: int, record: list | None = None) -> Tensor:
        p = f"encoder.{index}"
        h = layer_norm(x, self.p(f"{p}.ln1.g"), self.p(f"{p}.ln1.b"))
        x = x + self._attention(h, p, self._masks[index], record)
        h = layer_norm(x, self.p(f"{p}.ln2.g"), self.p(f"{p}.ln2.b"))
        h = linear(h, self.p(f"{p}.ffn1.w"), self.p(f"{p}.ffn1.b")).gelu()
        return x + linear(h, self.p(f"{p}.ffn2.w"), self.p(f"{p}.ffn2.b"))

    def transformer_stack(self, tokens: Tensor, record: list | None = None) -> Tensor:
        c = self.config
        if len(self._masks) != c.encoder_count:
            raise ConfigurationError("mask schedule does not match encoder count")
        x = tokens
        for b in range(c.blocks):
            x = self.encoder(x, 2 * b, record)
            x = self.encoder(x, 2 * b + 1, record)
            x = linear(x, self.p(f"reduce.{b}.w"), self.p(f"reduce.{b}.b"))
        return x

    def coordinate_head(self, tokens_final: Tensor):
        n, K = self.template.coarse_count, self.config.joint_count
        h = layer_norm(tokens_final, self.p("head.ln.g"), self.p("head.ln.b"))
        xyz = linear(h[:, : n + K], self.p("head.coord.w"), self.p("head.coord.b"))
        return xyz[:, :n], xyz[:, n:]

    def camera_head(self, tokens_final: Tensor) -> Tensor:
        n, K = self.template.coarse_count, self.config.joint_count
        pooled = tokens_final[:, n + K :].mean(axis=1)
        raw = linear(pooled, self.p("head.camera.w"), self.p("head.camera.b"))
        return concat([raw[:, 0:1].softplus(), raw[:, 1:3]], axis=1)

    def forward(self, images, record_attention: bool = False) -> ModelOutput:
        c = self.config
        xb = self.encode_backbone(images)
        heatmaps, target, grid_tokens = self.decode_heads(xb)
        if c.sampling_mode == "point_guided":
            vertex_tokens = point_guided_sampling(heatmaps, target)
        else:
            vertex_tokens = self.p("tokens.vertex_query")
        record = [] if record_attention else None
        final = self.transformer_stack(self.assemble_tokens(vertex_tokens, grid_tokens), record)
        coarse, joints = self.coordinate_head(final)
        dense = meshtopo.upsample_vertices(self.template.U.astype(coarse.dtype), coarse)
        return ModelOutput(
            coarse_vertices=coarse,
            dense_vertices=dense,
            joints3d=joints,
            camera=self.camera_head(final),
            heatmaps=heatmaps,
            target_feature=target,
            attention=record or [],
        )

    __call__ = forward

    # ---------------------------------------------------------- checkpoints
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise CheckpointError(f"shape mismatch for '{k}': checkpoint {state[k].shape}, model {p.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)


CONFIG_KEY = "__config__"


def save_checkpoint(path: str | Path, model: PointGuidedMeshModel, config_text: str, extra: dict | None = None) -> None:
    """npz container: one array per parameter name plus ``__config__`` text.

    Arrays are stored with their dtype (float32 or float64) and shape in
    row-major order; the config entry is the run configuration as
    ``key = value`` lines. ``extra`` arrays are stored under ``__extra__.<name>``.
    """
    arrays = dict(model.state_dict())
    arrays[CONFIG_KEY] = np.array(config_text)
    for k, v in (extra or {}).items():
        arrays[f"__extra__.{k}"] = np.asarray(v)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], str, dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if CONFIG_KEY not in arrays:
        raise CheckpointError(f"checkpoint {path} has no config entry")
    text = str(arrays.pop(CONFIG_KEY))
    extra = {k.split(".", 1)[1]: arrays.pop(k) for k in list(arrays) if k.startswith("__extra__.")}
    return arrays, text, extra


def model_config_fields() -> list[str]:
    return [f.name for f in fields(ModelConfig)]


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
