"""ViT-style segmentation network with an optional shared/specific FFN expert split.

Every transformer block is pre-norm with residual connections. The FFN's
second projection is either a single linear (plain mode) or one shared
expert of width (1-alpha)*C concatenated with a per-dataset specific
expert of width alpha*C. Both modes run through the same fused linear, so
converting a plain checkpoint by slicing its output channels reproduces
the original network bit-for-bit at step 0.

The decoder is a per-dataset linear map from each token to the logits of
its own patch, so pixel predictions depend only on the owning token.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, DimensionError
from .io import read_tensor_bytes, write_tensor_bytes
from .rng import stream

LN_EPS = 1e-6


@dataclass
class ModelConfig:
    image_size: int
    patch_size: int
    embed_dim: int
    ffn_hidden: int
    ffn_out: int
    depth: int
    heads: int
    num_classes: list[int]
    dataset_names: list[str]
    alpha: float = 0.25
    moe_enabled: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"heads {self.heads} must divide embed_dim {self.embed_dim}")
        if self.ffn_out != self.embed_dim:
            raise ConfigError("ffn_out must equal embed_dim (residual width)")
        if len(self.num_classes) != len(self.dataset_names):
            raise ConfigError("num_classes and dataset_names must pair up")
        if len(set(self.dataset_names)) != len(self.dataset_names):
            raise ConfigError("dataset names must be unique")
        spec = self.alpha * self.ffn_out
        if not (0.0 <= self.alpha <= 1.0) or abs(spec - round(spec)) > 1e-9:
            raise ConfigError(f"alpha {self.alpha} must lie in [0,1] with alpha*C integral")

    @property
    def num_datasets(self) -> int:
        return len(self.dataset_names)

    @property
    def tokens_per_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.tokens_per_side ** 2

    @property
    def specific_width(self) -> int:
        return int(round(self.alpha * self.ffn_out)) if self.moe_enabled else 0

    @property
    def shared_width(self) -> int:
        return self.ffn_out - self.specific_width

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        return cls(**data)


def _trunc_normal(rng, shape, std=0.02):
    # resample anything beyond 2 sigma; draw order is deterministic
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class SegMoEModel:
    """Parameter container plus forward passes for all fine-tuning regimes."""

    def __init__(self, config: ModelConfig, params: dict[str, T.Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else self._init_params(seed)

    # -- parameters --------------------------------------------------------

    def _param_shapes(self) -> dict[str, tuple]:
        cfg = self.config
        d, D, C = cfg.embed_dim, cfg.ffn_hidden, cfg.ffn_out
        patch_in = cfg.patch_size * cfg.patch_size * 3
        shapes = {
            "embed.w": (patch_in, d),
            "embed.b": (d,),
            "embed.pos": (cfg.num_tokens, d),
        }
        for i in range(cfg.depth):
            p = f"block{i}."
            shapes[p + "ln1.g"] = (d,)
            shapes[p + "ln1.b"] = (d,)
            for proj in ("q", "k", "v", "o"):
                shapes[p + f"attn.w{proj}"] = (d, d)
                shapes[p + f"attn.b{proj}"] = (d,)
            shapes[p + "ln2.g"] = (d,)
            shapes[p + "ln2.b"] = (d,)
            shapes[p + "ffn.in.w"] = (d, D)
            shapes[p + "ffn.in.b"] = (D,)
            if cfg.moe_enabled:
                shapes[p + "ffn.shared.w"] = (D, cfg.shared_width)
                shapes[p + "ffn.shared.b"] = (cfg.shared_width,)
                for t in range(cfg.num_datasets):
                    shapes[p + f"ffn.spec{t}.w"] = (D, cfg.specific_width)
                    shapes[p + f"ffn.spec{t}.b"] = (cfg.specific_width,)
            else:
                shapes[p + "ffn.out.w"] = (D, C)
                shapes[p + "ffn.out.b"] = (C,)
        shapes["final.g"] = (d,)
        shapes["final.b"] = (d,)
        for t, k in enumerate(cfg.num_classes):
            out = cfg.patch_size * cfg.patch_size * k
            shapes[f"decoder{t}.w"] = (d, out)
            shapes[f"decoder{t}.b"] = (out,)
        return shapes

    def _init_params(self, seed: int) -> dict[str, T.Tensor]:
        # each buffer draws from its own named stream, so init is stable
        # under regime changes that add or drop sibling parameters
        params = {}
        for name, shape in self._param_shapes().items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                data = np.ones(shape)
            elif leaf == "b":
                data = np.zeros(shape)
            else:
                data = _trunc_normal(stream(seed, "init", name), shape)
            params[name] = T.Tensor(data, requires_grad=True)
        return params

    def parameter_buffers(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- forward -----------------------------------------------------------

    def patch_tokens(self, image: np.ndarray) -> np.ndarray:
        """Rearrange H x W x 3 pixels into flattened per-patch rows."""
        cfg = self.config
        if image.shape != (cfg.image_size, cfg.image_size, 3):
            raise DimensionError(
                f"expected image {(cfg.image_size, cfg.image_size, 3)}, got {image.shape}")
        g, p = cfg.tokens_per_side, cfg.patch_size
        patches = image.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4)
        return np.ascontiguousarray(patches.reshape(cfg.num_tokens, p * p * 3))

    def embed(self, image: np.ndarray) -> T.Tensor:
        x = T.Tensor(self.patch_tokens(image))
        tokens = T.add(T.matmul(x, self.params["embed.w"]), self.params["embed.b"])
        return T.add(tokens, self.params["embed.pos"])

    def _attention(self, x: T.Tensor, prefix: str) -> T.Tensor:
        cfg = self.config
        pr = self.params
        h = T.layer_norm(x, pr[prefix + "ln1.g"], pr[prefix + "ln1.b"], LN_EPS)
        q = T.add(T.matmul(h, pr[prefix + "attn.wq"]), pr[prefix + "attn.bq"])
        k = T.add(T.matmul(h, pr[prefix + "attn.wk"]), pr[prefix + "attn.bk"])
        v = T.add(T.matmul(h, pr[prefix + "attn.wv"]), pr[prefix + "attn.bv"])
        dh = cfg.embed_dim // cfg.heads
        heads = []
        for i in range(cfg.heads):
            qi = T.slice_cols(q, i * dh, (i + 1) * dh)
            ki = T.slice_cols(k, i * dh, (i + 1) * dh)
            vi = T.slice_cols(v, i * dh, (i + 1) * dh)
            scores = T.mul(T.matmul(qi, T.transpose2d(ki)), 1.0 / math.sqrt(dh))
            heads.append(T.matmul(T.softmax_rows(scores), vi))
        cat = heads[0] if len(heads) == 1 else T.concat_cols(heads)
        out = T.add(T.matmul(cat, pr[prefix + "attn.wo"]), pr[prefix + "attn.bo"])
        return T.add(x, out)

    def _ffn(self, x: T.Tensor, prefix: str, dataset_id: int) -> T.Tensor:
        cfg = self.config
        pr = self.params
        h = T.layer_norm(x, pr[prefix + "ln2.g"], pr[prefix + "ln2.b"], LN_EPS)
        h = T.relu(T.add(T.matmul(h, pr[prefix + "ffn.in.w"]), pr[prefix + "ffn.in.b"]))
        if cfg.moe_enabled:
            pairs = [
                (pr[prefix + "ffn.shared.w"], pr[prefix + "ffn.shared.b"]),
                (pr[prefix + f"ffn.spec{dataset_id}.w"], pr[prefix + f"ffn.spec{dataset_id}.b"]),
            ]
        else:
            pairs = [(pr[prefix + "ffn.out.w"], pr[prefix + "ffn.out.b"])]
        return T.add(x, T.linear_cat(h, pairs))

    def backbone(self, image: np.ndarray, dataset_id: int = 0) -> T.Tensor:
        """Token features after all blocks and the final norm."""
        self._check_dataset(dataset_id)
        x = self.embed(image)
        for i in range(self.config.depth):
            x = self._attention(x, f"block{i}.")
            x = self._ffn(x, f"block{i}.", dataset_id)
        return T.layer_norm(x, self.params["final.g"], self.params["final.b"], LN_EPS)

    def decode(self, tokens: T.Tensor, dataset_id: int) -> T.Tensor:
        """Per-token linear to patch logits, rearranged to H x W x K."""
        self._check_dataset(dataset_id)
        cfg = self.config
        k = cfg.num_classes[dataset_id]
        out = T.add(T.matmul(tokens, self.params[f"decoder{dataset_id}.w"]),
                    self.params[f"decoder{dataset_id}.b"])
        g, p = cfg.tokens_per_side, cfg.patch_size
        # token-major rows -> pixel-major rows without mixing patches
        perm = np.transpose(np.arange(g * g * p * p).reshape(g, g, p, p), (0, 2, 1, 3)).reshape(-1)
        flat = T.reshape(out, (g * g * p * p, k))
        rows = T.gather_rows(flat, perm)
        return T.reshape(rows, (cfg.image_size, cfg.image_size, k))

    def forward(self, image: np.ndarray, dataset_id: int = 0) -> T.Tensor:
        """Full pass: image -> per-pixel logits [H, W, K_t]."""
        return self.decode(self.backbone(image, dataset_id), dataset_id)

    def _check_dataset(self, dataset_id: int):
        if not (0 <= dataset_id < self.config.num_datasets):
            raise ConfigError(
                f"dataset_id {dataset_id} out of range for {self.config.num_datasets} dataset(s)")

    # -- persistence --------------------------------------------------------

    def save(self, path):
        names = sorted(self.params)
        header = json.dumps({"config": self.config.to_json(), "tensors": names},
                            sort_keys=True).encode("utf-8")
        blob = bytearray()
        blob += b"S5CK" + struct.pack("<I", len(header)) + header
        for name in names:
            blob += write_tensor_bytes(self.params[name].data)
        Path(path).write_bytes(bytes(blob))

    @classmethod
    def load(cls, path) -> "SegMoEModel":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"missing checkpoint: {path}")
        buf = path.read_bytes()
        if buf[:4] != b"S5CK":
            raise CheckpointError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack_from("<I", buf, 4)
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
        config = ModelConfig.from_json(header["config"])
        offset = 8 + hlen
        params = {}
        for name in header["tensors"]:
            array, offset = read_tensor_bytes(buf, offset)
            params[name] = T.Tensor(np.array(array, dtype=np.float64), requires_grad=True)
        model = cls(config, params=params)
        expected = model._param_shapes()
        got = {n: p.data.shape for n, p in params.items()}
        if {n: tuple(s) for n, s in expected.items()} != got:
            raise CheckpointError(f"checkpoint parameters do not match architecture: {path}")
        model.params = {name: params[name] for name in expected}
        return model


# ---------------------------------------------------------------------------
# regime surgery and accounting


def convert_to_moe(model: SegMoEModel, alpha: float, dataset_names: list[str],
                   num_classes: list[int], seed: int = 0) -> SegMoEModel:
    """Split each FFN output linear into shared + specific experts.

    The shared expert takes the first (1-alpha)*C output channels; every
    specific expert starts as an identical copy of the remaining alpha*C
    channels, so the converted network computes exactly the same function
    until training diverges the experts.
    """
    old = model.config
    if old.moe_enabled:
        raise ConfigError("model already uses the expert split")
    cfg = ModelConfig(
        image_size=old.image_size, patch_size=old.patch_size, embed_dim=old.embed_dim,
        ffn_hidden=old.ffn_hidden, ffn_out=old.ffn_out, depth=old.depth, heads=old.heads,
        num_classes=list(num_classes), dataset_names=list(dataset_names),
        alpha=alpha, moe_enabled=True)
    out = SegMoEModel(cfg, seed=seed)
    _carry_over(model, out)
    c_shared = cfg.shared_width
    for i in range(cfg.depth):
        p = f"block{i}."
        w = model.params[p + "ffn.out.w"].data
        b = model.params[p + "ffn.out.b"].data
        out.params[p + "ffn.shared.w"] = T.Tensor(w[:, :c_shared].copy(), requires_grad=True)
        out.params[p + "ffn.shared.b"] = T.Tensor(b[:c_shared].copy(), requires_grad=True)
        for t in range(cfg.num_datasets):
            out.params[p + f"ffn.spec{t}.w"] = T.Tensor(w[:, c_shared:].copy(), requires_grad=True)
            out.params[p + f"ffn.spec{t}.b"] = T.Tensor(b[c_shared:].copy(), requires_grad=True)
    return out


def adapt_datasets(model: SegMoEModel, dataset_names: list[str],
                   num_classes: list[int], seed: int = 0) -> SegMoEModel:
    """Re-target a plain checkpoint at a new dataset list (shared backbone)."""
    old = model.config
    cfg = ModelConfig(
        image_size=old.image_size, patch_size=old.patch_size, embed_dim=old.embed_dim,
        ffn_hidden=old.ffn_hidden, ffn_out=old.ffn_out, depth=old.depth, heads=old.heads,
        num_classes=list(num_classes), dataset_names=list(dataset_names),
        alpha=old.alpha, moe_enabled=False)
    out = SegMoEModel(cfg, seed=seed)
    _carry_over(model, out)
    return out


def _carry_over(src: SegMoEModel, dst: SegMoEModel):
    """Copy backbone weights; decoders copy over when the class count matches."""
    src_k = src.config.num_classes[0]
    for name in dst.params:
        if name.startswith("decoder"):
            t = int(name.split(".")[0][len("decoder"):])
            if dst.config.num_classes[t] == src_k:
                leaf = name.split(".", 1)[1]
                dst.params[name] = T.Tensor(src.params[f"decoder0.{leaf}"].data.copy(),
                                            requires_grad=True)
        elif name in src.params:
            dst.params[name] = T.Tensor(src.params[name].data.copy(), requires_grad=True)


def param_count(config: ModelConfig, regime: str, num_datasets: int | None = None) -> dict:
    """Closed-form parameter accounting for the SDF / MDF / MoE-MDF regimes.

    `total_single` is the cost of serving one dataset, `total_multiple` of
    serving all of them: SDF replicates the whole model per dataset, MDF
    shares the backbone, MoE-MDF shares the backbone plus a shared expert
    and adds one specific expert per dataset per block.
    """
    regimes = ("SDF", "MDF", "MoE-MDF")
    if regime not in regimes:
        raise ConfigError(f"regime must be one of {regimes}, got {regime!r}")
    t_count = num_datasets if num_datasets is not None else config.num_datasets
    if t_count < 1:
        raise ConfigError("need at least one dataset")
    d, D, C = config.embed_dim, config.ffn_hidden, config.ffn_out
    patch_in = config.patch_size * config.patch_size * 3
    attn = 4 * (d * d + d)
    ffn_in = d * D + D
    norms = 4 * d  # two pre-norm gain/bias pairs per block
    block_common = attn + ffn_in + norms
    embed = patch_in * d + d + config.num_tokens * d
    final = 2 * d
    k = config.num_classes[0]
    decoder = d * (config.patch_size ** 2 * k) + config.patch_size ** 2 * k

    if regime == "MoE-MDF":
        spec_c = int(round(config.alpha * C))
        shared_c = C - spec_c
        shared_layer = D * shared_c + shared_c
        specific = D * spec_c + spec_c
    else:
        shared_layer = D * C + C
        specific = 0

    backbone = embed + final + config.depth * (block_common + shared_layer)
    experts_multiple = config.depth * t_count * specific
    if regime == "SDF":
        total_single = backbone + decoder
        total_multiple = t_count * total_single
        decoders = t_count * decoder
    elif regime == "MDF":
        total_single = backbone + decoder
        total_multiple = backbone + t_count * decoder
        decoders = t_count * decoder
    else:
        total_single = backbone + config.depth * specific + decoder
        total_multiple = backbone + experts_multiple + t_count * decoder
        decoders = t_count * decoder
    return {
        "regime": regime,
        "num_datasets": t_count,
        "backbone": backbone,
        "decoders": decoders,
        "experts": experts_multiple,
        "total_single": total_single,
        "total_multiple": total_multiple,
    }
