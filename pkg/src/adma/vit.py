"""Tiny pre-norm Vision Transformer with a shared mask token and a linear decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import checkpoint, rng
from . import tensor as T
from .tensor import ShapeError, Tensor

CHANNELS = 3
HOG_BINS = 9
HOG_CELL = 8


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    ffn_multiplier: int = 4
    num_classes: int = 4
    mc_dropout_p: float = 0.1

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ValueError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if not 0.0 <= self.mc_dropout_p < 1.0:
            raise ValueError("mc_dropout_p must be in [0, 1)")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return CHANNELS * self.patch_size**2

    @property
    def hog_dim_per_token(self) -> int:
        if self.patch_size % HOG_CELL:
            raise ValueError(f"patch_size {self.patch_size} is not a multiple of the HOG cell")
        return CHANNELS * HOG_BINS * (self.patch_size // HOG_CELL) ** 2


@dataclass
class TokenBatch:
    """Patch embeddings before positional addition.

    ``positional`` is the model's positional table, added inside ``forward``
    so that mask replacement happens first.
    """

    embeddings: Tensor  # [B, N, D]
    positional: Tensor  # [N, D]
    mask_flags: np.ndarray  # bool [B, N]

    @property
    def batch(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class VitOutput:
    logits: Tensor  # [B, C]
    token_features: Tensor  # [B, N, D], after the final norm
    block1_features: Tensor  # [B, N, D]


def _xavier(g: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return g.uniform(-limit, limit, size=(fan_in, fan_out))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, N, C*p*p], patches row-major, values (channel, row, col)."""
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


class VisionTransformer:
    def __init__(self, cfg: VitConfig = VitConfig(), seed: int = 0, decoder_dim: Optional[int] = None):
        self.cfg = cfg
        d, n = cfg.embed_dim, cfg.num_tokens
        hidden = d * cfg.ffn_multiplier
        g = rng.stream(seed, "vit-init")
        p = {}

        def linear(name, fi, fo):
            p[f"{name}.w"] = Tensor(_xavier(g, fi, fo), requires_grad=True, name=f"{name}.w")
            p[f"{name}.b"] = Tensor(np.zeros(fo), requires_grad=True, name=f"{name}.b")

        def norm(name):
            p[f"{name}.g"] = Tensor(np.ones(d), requires_grad=True, name=f"{name}.g")
            p[f"{name}.b"] = Tensor(np.zeros(d), requires_grad=True, name=f"{name}.b")

        linear("patch", cfg.patch_dim, d)
        p["pos"] = Tensor(g.normal(0.0, 0.02, size=(n, d)), requires_grad=True, name="pos")
        p["mask_token"] = Tensor(np.zeros(d), requires_grad=True, name="mask_token")
        for i in range(cfg.depth):
            norm(f"blocks.{i}.ln1")
            for proj in ("q", "k", "v", "o"):
                linear(f"blocks.{i}.attn.{proj}", d, d)
            norm(f"blocks.{i}.ln2")
            linear(f"blocks.{i}.fc1", d, hidden)
            linear(f"blocks.{i}.fc2", hidden, d)
        norm("norm")
        linear("head", d, cfg.num_classes)
        self.params = p
        self.reset_decoder(decoder_dim or cfg.hog_dim_per_token, seed)

    # -- parameters -------------------------------------------------------

    def reset_decoder(self, out_dim: int, seed: int) -> None:
        """Fresh randomly initialised linear decoder projecting D -> ``out_dim``."""
        g = rng.stream(seed, "decoder-init", out_dim)
        d = self.cfg.embed_dim
        self.params["decoder.w"] = Tensor(_xavier(g, d, out_dim), requires_grad=True, name="decoder.w")
        self.params["decoder.b"] = Tensor(np.zeros(out_dim), requires_grad=True, name="decoder.b")

    @property
    def decoder_dim(self) -> int:
        return self.params["decoder.w"].shape[1]

    def parameters(self) -> list:
        return list(self.params.values())

    def layernorm_parameters(self) -> list:
        return [t for k, t in self.params.items() if ".ln" in k or k.startswith("norm.")]

    def state_dict(self) -> dict:
        out = {k: t.data.copy() for k, t in self.params.items()}
        for f in fields(self.cfg):
            out[f"config.{f.name}"] = np.array(float(getattr(self.cfg, f.name)))
        return out

    def load_state_dict(self, state: dict) -> None:
        cfg = {k[len("config."):]: v for k, v in state.items() if k.startswith("config.")}
        if cfg:
            current = asdict(self.cfg)
            for k, v in cfg.items():
                if k in current and float(current[k]) != float(v):
                    raise ValueError(f"checkpoint config {k}={float(v)} differs from model {current[k]}")
        for k, arr in state.items():
            if k.startswith("config."):
                continue
            if k.startswith("decoder.") and k in self.params and self.params[k].shape != arr.shape:
                self.params[k] = Tensor(arr, requires_grad=True, name=k)
                continue
            if k not in self.params:
                raise KeyError(f"unexpected parameter {k!r} in checkpoint")
            if self.params[k].shape != arr.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} vs model {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict())

    @classmethod
    def load(cls, path) -> "VisionTransformer":
        state = checkpoint.load(path)
        kw = {}
        for f in fields(VitConfig):
            key = f"config.{f.name}"
            if key in state:
                kw[f.name] = type(f.default)(state[key])
        model = cls(VitConfig(**kw), decoder_dim=state["decoder.w"].shape[1])
        model.load_state_dict(state)
        return model

    def copy(self) -> "VisionTransformer":
        other = VisionTransformer.__new__(VisionTransformer)
        other.cfg = self.cfg
        other.params = {k: Tensor(t.data, requires_grad=True, name=k) for k, t in self.params.items()}
        return other

    # -- forward pieces -----------------------------------------------------

    def embed(self, images) -> TokenBatch:
        x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        s = self.cfg.image_size
        if x.ndim != 4 or x.shape[1] != CHANNELS or x.shape[2] != s or x.shape[3] != s:
            raise ShapeError(f"embed: expected images [B, 3, {s}, {s}], got {x.shape}")
        patches = Tensor(patchify(x, self.cfg.patch_size))
        emb = patches @ self.params["patch.w"] + self.params["patch.b"]
        flags = np.zeros(emb.shape[:2], dtype=bool)
        return TokenBatch(emb, self.params["pos"], flags)

    def apply_mask(self, tokens: TokenBatch, plans) -> TokenBatch:
        """Swap the selected tokens for the shared mask embedding.

        ``plans`` is one index collection (or MaskPlan) per image; a single
        one is accepted for a batch of one.
        """
        b, n = tokens.mask_flags.shape
        if b == 1 and not _is_plan_list(plans):
            plans = [plans]
        if len(plans) != b:
            raise ValueError(f"apply_mask: {len(plans)} plans for a batch of {b}")
        flags = tokens.mask_flags.copy()
        for i, plan in enumerate(plans):
            idx = np.asarray(getattr(plan, "selected", plan), dtype=np.int64).reshape(-1)
            if np.unique(idx).size != idx.size:
                raise ValueError(f"apply_mask: duplicate indices in plan {idx.tolist()}")
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValueError(f"apply_mask: indices must lie in [0, {n})")
            flags[i, idx] = True
        emb = T.replace_rows(tokens.embeddings, flags, self.params["mask_token"])
        return TokenBatch(emb, tokens.positional, flags)

    def _attention(self, x: Tensor, i: int) -> Tensor:
        cfg = self.cfg
        b, n, d = x.shape
        h, dh = cfg.heads, d // cfg.heads
        p = self.params
        pre = f"blocks.{i}.attn."

        def heads(name):
            y = x @ p[pre + name + ".w"] + p[pre + name + ".b"]
            return T.transpose(T.reshape(y, (b, n, h, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        att = T.softmax(T.scale(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh)))
        y = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (b, n, d))
        return y @ p[pre + "o.w"] + p[pre + "o.b"]

    def _ffn(self, x: Tensor, i: int, drop_rng: Optional[np.random.Generator]) -> Tensor:
        p = self.params
        pre = f"blocks.{i}."
        hidden = T.gelu(x @ p[pre + "fc1.w"] + p[pre + "fc1.b"])
        if drop_rng is not None:
            hidden = T.dropout(hidden, self.cfg.mc_dropout_p, drop_rng)
        return hidden @ p[pre + "fc2.w"] + p[pre + "fc2.b"]

    def _block(self, x: Tensor, i: int, drop_rng) -> Tensor:
        p = self.params
        pre = f"blocks.{i}."
        x = x + self._attention(T.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]), i)
        return x + self._ffn(T.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"]), i, drop_rng)

    def block1(self, tokens: TokenBatch, dropout: bool = False, seed=None) -> Tensor:
        """Positional addition plus the first block only; returns [B, N, D].

        ``seed`` may be a list with one seed per image to give each batch
        slice its own dropout stream.
        """
        drop_rng = None
        if dropout:
            if isinstance(seed, (list, tuple)):
                drop_rng = [rng.stream(s, "mc-dropout") for s in seed]
            else:
                drop_rng = rng.stream(seed, "mc-dropout")
        return self._block(tokens.embeddings + tokens.positional, 0, drop_rng)

    def forward(self, tokens: TokenBatch, dropout: bool = False, seed=None) -> VitOutput:
        """Full forward.  Dropout, when active, only touches block 1's FFN hidden layer."""
        if dropout and seed is None:
            raise ValueError("forward with dropout needs a seed")
        x = self.block1(tokens, dropout, seed)
        b1 = x
        for i in range(1, self.cfg.depth):
            x = self._block(x, i, None)
        feats = T.layer_norm(x, self.params["norm.g"], self.params["norm.b"])
        logits = T.mean(feats, axis=1) @ self.params["head.w"] + self.params["head.b"]
        return VitOutput(logits, feats, b1)

    def __call__(self, images, dropout: bool = False, seed: Optional[int] = None) -> VitOutput:
        return self.forward(self.embed(images), dropout, seed)

    def decode(self, features: Tensor) -> Tensor:
        """Linear projection of masked-token features [M, D] -> [M, decoder_dim]."""
        if features.ndim != 2 or features.shape[1] != self.cfg.embed_dim:
            raise ShapeError(f"decode: expected [M, {self.cfg.embed_dim}], got {features.shape}")
        if features.shape[0] < 1:
            raise ShapeError("decode: need at least one masked token")
        return features @ self.params["decoder.w"] + self.params["decoder.b"]

    def masked_features(self, out: VitOutput, plans: Sequence) -> Tensor:
        """Gather final-layer features at masked positions, image-major order."""
        b, n, d = out.token_features.shape
        flat = T.reshape(out.token_features, (b * n, d))
        rows = [i * n + int(j) for i, plan in enumerate(plans) for j in getattr(plan, "selected", plan)]
        return T.gather_rows(flat, rows)


def _is_plan_list(plans) -> bool:
    if hasattr(plans, "selected"):
        return False
    seq = list(plans)
    return bool(seq) and all(hasattr(p, "selected") or np.ndim(p) == 1 for p in seq)


def predict(model: VisionTransformer, images) -> np.ndarray:
    """Deterministic class predictions without recording a graph."""
    with T.inference():
        return np.argmax(model(images).logits.data, axis=-1)
