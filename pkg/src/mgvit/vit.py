"""Toy vision transformer with a vanilla and a mask-guided forward path.

Token layout everywhere is ``[patch tokens | detect tokens | class token]``.
The mask-guided path multiplies patch tokens and their position rows by a
per-sample binary mask before the first encoder layer, and rewrites the
patch rows entering the last encoder layer as ``x_last * mask + x_first``,
where ``x_first`` is the masked, position-added layer-1 input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InputError, ShapeError, UsageError
from .tensor import Tensor, concat, gelu, layer_norm, sigmoid, softmax

INIT_STD = 0.2


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 32
    num_heads: int = 2
    num_layers: int = 4
    num_classes: int = 8
    num_det_tokens: int = 0
    mlp_ratio: float = 2.0
    ln_eps: float = 1e-6

    def __post_init__(self):
        p = self.patch_size
        if p <= 0 or self.image_height % p or self.image_width % p:
            raise InputError(f"image {self.image_height}x{self.image_width} "
                             f"is not divisible into {p}x{p} patches")
        if self.embed_dim % self.num_heads:
            raise InputError(f"embed_dim {self.embed_dim} not divisible by "
                             f"num_heads {self.num_heads}")
        if self.num_layers < 0 or self.num_det_tokens < 0 or self.num_classes <= 0:
            raise InputError("num_layers/num_det_tokens must be >= 0 and num_classes > 0")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        h, w = self.grid
        return h * w

    @property
    def seq_len(self) -> int:
        return self.num_patches + self.num_det_tokens + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSequence:
    """Token matrix ``(B, T, D)`` plus the row ranges of each token kind.

    ``z0`` and ``last_input`` are filled in by the forward passes (the
    layer-1 input and the input actually fed to the last encoder layer).
    """

    tokens: Tensor
    num_patches: int
    num_det: int
    z0: Optional[Tensor] = None
    last_input: Optional[Tensor] = None
    attention: list = field(default_factory=list)

    @property
    def patch_slice(self) -> slice:
        return slice(0, self.num_patches)

    @property
    def det_slice(self) -> slice:
        return slice(self.num_patches, self.num_patches + self.num_det)

    @property
    def cls_index(self) -> int:
        return self.num_patches + self.num_det

    @property
    def patch(self) -> Tensor:
        return self.tokens[:, : self.num_patches]

    @property
    def det(self) -> Tensor:
        return self.tokens[:, self.det_slice]

    @property
    def cls(self) -> Tensor:
        return self.tokens[:, self.cls_index]


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every parameter of a model built from ``cfg`` (fixed order)."""
    d, hid = cfg.embed_dim, cfg.mlp_hidden
    shapes = {
        "patch.w": (cfg.patch_dim, d),
        "patch.b": (d,),
        "pos": (cfg.seq_len, d),
        "cls": (1, d),
    }
    if cfg.num_det_tokens:
        shapes["det"] = (cfg.num_det_tokens, d)
    for l in range(cfg.num_layers):
        pre = f"layer{l}."
        shapes.update({
            pre + "ln1.g": (d,), pre + "ln1.b": (d,),
            pre + "attn.wq": (d, d), pre + "attn.bq": (d,),
            pre + "attn.wk": (d, d), pre + "attn.bk": (d,),
            pre + "attn.wv": (d, d), pre + "attn.bv": (d,),
            pre + "attn.wo": (d, d), pre + "attn.bo": (d,),
            pre + "ln2.g": (d,), pre + "ln2.b": (d,),
            pre + "mlp.w1": (d, hid), pre + "mlp.b1": (hid,),
            pre + "mlp.w2": (hid, d), pre + "mlp.b2": (d,),
        })
    shapes.update({
        "head.ln.g": (d,), "head.ln.b": (d,),
        "head.w": (d, cfg.num_classes), "head.b": (cfg.num_classes,),
    })
    if cfg.num_det_tokens:
        shapes.update({
            "det_cls.ln.g": (d,), "det_cls.ln.b": (d,),
            "det_cls.w1": (d, d), "det_cls.b1": (d,),
            "det_cls.w2": (d, cfg.num_classes + 1), "det_cls.b2": (cfg.num_classes + 1,),
            "det_box.ln.g": (d,), "det_box.ln.b": (d,),
            "det_box.w1": (d, d), "det_box.b1": (d,),
            "det_box.w2": (d, 4), "det_box.b2": (4,),
        })
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))


def init_parameters(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "cls" or leaf.startswith("b"):
            params[name] = np.zeros(shape)
        elif leaf == "g":
            params[name] = np.ones(shape)
        else:
            params[name] = _trunc_normal(rng, shape)
    return params


class ViT:
    """Parameters plus forward passes.

    ``mg_flow`` selects the default path taken by :meth:`forward`: ``False``
    is the vanilla ViT, ``True`` the mask-guided flow with the
    first-to-last residual engaged (used from the initial fine-tuning step on).
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0, mg_flow: bool = False):
        self.config = config
        if params is None:
            params = init_parameters(config, np.random.default_rng(seed))
        shapes = parameter_shapes(config)
        if set(params) != set(shapes):
            missing = sorted(set(shapes) - set(params))
            extra = sorted(set(params) - set(shapes))
            raise ShapeError(f"parameter names do not match config: missing {missing}, extra {extra}")
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"parameter {name!r} has shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        self.mg_flow = mg_flow

    # -- bookkeeping ----------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> "ViT":
        return ViT(self.config, self.state_dict(), mg_flow=self.mg_flow)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_trainable(self, names=None) -> None:
        """Mark only ``names`` (all when ``None``) as requiring grad."""
        for k, p in self.params.items():
            p.requires_grad = names is None or k in names

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- pieces ---------------------------------------------------------
    def _as_batch(self, images) -> np.ndarray:
        x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (c.channels, c.image_height, c.image_width):
            raise ShapeError(f"expected images of shape (B, {c.channels}, {c.image_height}, "
                             f"{c.image_width}), got {x.shape}")
        return x

    def patchify(self, images) -> np.ndarray:
        """``(B, C, H, W)`` -> ``(B, N, C*P*P)``, patches in row-major grid order."""
        x = self._as_batch(images)
        b, ch, h, w = x.shape
        p = self.config.patch_size
        x = x.reshape(b, ch, h // p, p, w // p, p)
        return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), ch * p * p)

    def patch_embed(self, images) -> Tensor:
        return Tensor(self.patchify(images)) @ self.params["patch.w"] + self.params["patch.b"]

    def assemble_input(self, patch_tokens: Tensor, mask=None) -> TokenSequence:
        """Build ``z_0``; with ``mask`` (shape ``(B, N)``) patch tokens and patch position rows are masked."""
        cfg, prm = self.config, self.params
        b, n, _ = patch_tokens.shape
        if n != cfg.num_patches:
            raise ShapeError(f"expected {cfg.num_patches} patch tokens, got {n}")
        pos = prm["pos"]
        patch = patch_tokens + pos[: n]
        if mask is not None:
            patch = patch * Tensor(mask[:, :, None])
        ones = Tensor(np.ones((b, 1, 1)))
        rest = [prm["det"]] if cfg.num_det_tokens else []
        rest.append(prm["cls"])
        extra = concat(rest, axis=0) + pos[n:]
        z0 = concat([patch, ones * extra], axis=1)
        return TokenSequence(z0, n, cfg.num_det_tokens, z0=z0)

    def attention(self, x: Tensor, l: int, record: list | None = None) -> Tensor:
        cfg, prm = self.config, self.params
        pre = f"layer{l}.attn."
        b, t, d = x.shape
        h, dh = cfg.num_heads, cfg.head_dim

        def heads(w, bias):
            return (x @ prm[pre + w] + prm[pre + bias]).reshape(b, t, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
        attn = softmax((q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
        if record is not None:
            record.append(attn.data)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return out @ prm[pre + "wo"] + prm[pre + "bo"]

    def encoder_layer(self, z: Tensor, l: int, record: list | None = None) -> Tensor:
        prm, eps = self.params, self.config.ln_eps
        pre = f"layer{l}."
        z = z + self.attention(layer_norm(z, prm[pre + "ln1.g"], prm[pre + "ln1.b"], eps), l, record)
        hdn = gelu(layer_norm(z, prm[pre + "ln2.g"], prm[pre + "ln2.b"], eps)
                   @ prm[pre + "mlp.w1"] + prm[pre + "mlp.b1"])
        return z + hdn @ prm[pre + "mlp.w2"] + prm[pre + "mlp.b2"]

    # -- forward paths --------------------------------------------------
    def encode(self, patch_tokens: Tensor, mask=None, inject: bool = False,
               record_attention: bool = False) -> TokenSequence:
        """Run the encoder from patch embeddings.

        ``mask=None`` with ``inject=False`` is the vanilla ViT.  ``inject``
        turns on the first-to-last residual (an all-ones mask is used when
        ``mask`` is ``None``).
        """
        cfg = self.config
        b = patch_tokens.shape[0]
        n = cfg.num_patches
        if mask is not None:
            mask = _check_mask(mask, b, n)
        seq = self.assemble_input(patch_tokens, mask)
        record = seq.attention if record_attention else None
        z = seq.tokens
        for l in range(cfg.num_layers):
            if inject and l == cfg.num_layers - 1:
                m = Tensor((mask if mask is not None else np.ones((b, n)))[:, :, None])
                patch = z[:, :n] * m + seq.z0[:, :n]
                z = concat([patch, z[:, n:]], axis=1)
                seq.last_input = z
            elif l == cfg.num_layers - 1:
                seq.last_input = z
            z = self.encoder_layer(z, l, record)
        seq.tokens = z
        return seq

    def forward_vanilla(self, images, record_attention: bool = False) -> TokenSequence:
        return self.encode(self.patch_embed(images), record_attention=record_attention)

    def forward_masked(self, images, mask=None, inject: bool = True,
                       record_attention: bool = False) -> TokenSequence:
        b = self._as_batch(images).shape[0]
        if mask is None:
            mask = np.ones((b, self.config.num_patches))
        return self.encode(self.patch_embed(images), mask, inject, record_attention)

    def forward(self, images, mask=None) -> TokenSequence:
        """Forward along the model's current flow (see ``mg_flow``)."""
        if self.mg_flow:
            return self.forward_masked(images, mask, inject=True)
        if mask is not None:
            return self.forward_masked(images, mask, inject=False)
        return self.forward_vanilla(images)

    # -- heads ----------------------------------------------------------
    def classify_head(self, seq: TokenSequence) -> Tensor:
        prm = self.params
        x = layer_norm(seq.cls, prm["head.ln.g"], prm["head.ln.b"], self.config.ln_eps)
        return x @ prm["head.w"] + prm["head.b"]

    def detect_head(self, seq: TokenSequence) -> tuple[Tensor, Tensor]:
        """Per-detect-token class logits ``(B, M, C+1)`` (last column = no object) and boxes ``(B, M, 4)``."""
        if not self.config.num_det_tokens:
            raise UsageError("detect_head called on a model without detect tokens")
        prm, eps = self.params, self.config.ln_eps
        x = seq.det

        def mlp(pre):
            hdn = gelu(layer_norm(x, prm[pre + "ln.g"], prm[pre + "ln.b"], eps)
                       @ prm[pre + "w1"] + prm[pre + "b1"])
            return hdn @ prm[pre + "w2"] + prm[pre + "b2"]

        return mlp("det_cls."), sigmoid(mlp("det_box."))

    def logits(self, images, mask=None) -> Tensor:
        return self.classify_head(self.forward(images, mask))

    # -- resolution change ---------------------------------------------
    def resize(self, image_height: int, image_width: int) -> "ViT":
        """New model for a different image size with bicubically resampled patch positions."""
        cfg = replace(self.config, image_height=image_height, image_width=image_width)
        state = self.state_dict()
        state["pos"] = interpolate_pos_embed(state["pos"], self.config.grid, cfg.grid)
        return ViT(cfg, state, mg_flow=self.mg_flow)


def _check_mask(mask, b: int, n: int) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 1:
        m = np.broadcast_to(m, (b, m.shape[0]))
    if m.shape != (b, n):
        raise ShapeError(f"mask shape {m.shape} does not match (batch, patches) = {(b, n)}")
    if not np.isin(m, (0.0, 1.0)).all():
        raise InputError("mask entries must be 0 or 1")
    return m


def _cubic_weights(t: float, a: float = -0.75) -> np.ndarray:
    def near(x):
        return ((a + 2) * x - (a + 3)) * x * x + 1

    def far(x):
        return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a

    return np.array([far(t + 1), near(t), near(1 - t), far(2 - t)])


def _resample_matrix(old: int, new: int) -> np.ndarray:
    w = np.zeros((new, old))
    scale = old / new
    for i in range(new):
        src = (i + 0.5) * scale - 0.5
        i0 = int(np.floor(src))
        for off, wt in zip(range(-1, 3), _cubic_weights(src - i0)):
            w[i, min(max(i0 + off, 0), old - 1)] += wt
    return w


def interpolate_pos_embed(pos: np.ndarray, old_grid: tuple[int, int],
                          new_grid: tuple[int, int]) -> np.ndarray:
    """Bicubically resample the patch rows of a position table; other rows are copied.

    Uses the cubic convolution kernel with a = -0.75, half-pixel centers and
    clamped borders.  Patch rows are assumed to come first.
    """
    pos = np.asarray(pos, dtype=np.float64)
    oh, ow = old_grid
    n_old = oh * ow
    if pos.ndim != 2 or pos.shape[0] < n_old:
        raise ShapeError(f"position table {pos.shape} has fewer than {oh}x{ow} patch rows")
    if tuple(old_grid) == tuple(new_grid):
        return pos.copy()
    nh, nw = new_grid
    grid = pos[:n_old].reshape(oh, ow, -1)
    wy, wx = _resample_matrix(oh, nh), _resample_matrix(ow, nw)
    out = np.einsum("ij,jkd,lk->ild", wy, grid, wx)
    return np.concatenate([out.reshape(nh * nw, -1), pos[n_old:]], axis=0)
