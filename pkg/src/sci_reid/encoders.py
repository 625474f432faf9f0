"""Randomly initialised stand-ins for the CLIP image and text towers.

Both towers project into a shared ``d_txt`` space. Each carries a
``frozen`` flag; a frozen encoder exposes no trainable parameters, but
gradients still flow *through* it to its inputs (the prompt contexts).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor, concat, reshape, softmax, take_rows, transpose
from .errors import ContractError, DimensionError
from .nn import LayerNorm, Linear, Mlp, Module

VOCAB = ("<sot>", "a", "photo", "of", "the", "person", "clothes", ".", "<eot>")
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}


@dataclass
class EncoderConfig:
    H: int = 32
    W: int = 16
    p: int = 4
    C: int = 32
    d_tok: int = 32
    d_txt: int = 64
    vocab_size: int = len(VOCAB)
    L_max: int = 16
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.p <= 0 or self.H % self.p or self.W % self.p:
            raise ContractError(f"H={self.H} and W={self.W} must be divisible by p={self.p}")
        if self.d_txt <= 0 or self.C <= 0 or self.d_tok <= 0:
            raise ContractError("feature dims must be positive")
        if self.d_tok % self.heads:
            raise ContractError(f"d_tok={self.d_tok} not divisible by heads={self.heads}")
        if self.vocab_size < len(VOCAB):
            raise ContractError(f"vocab_size must be >= {len(VOCAB)}")

    @property
    def grid(self) -> Tuple[int, int]:
        return self.H // self.p, self.W // self.p

    @property
    def n_pix(self) -> int:
        h, w = self.grid
        return h * w

    def to_dict(self) -> dict:
        return asdict(self)


class _Frozen:
    _frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, flag: bool) -> None:
        self._frozen = bool(flag)
        self.set_requires_grad(not flag)

    def trainable_parameters(self):
        return [] if self._frozen else self.parameters()


class SelfAttention(Module):
    def __init__(self, rng: np.random.Generator, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = self.add_child("qkv", Linear(rng, d, 3 * d))
        self.out = self.add_child("out", Linear(rng, d, d))

    def __call__(self, x: Tensor) -> Tensor:
        b, length, d = x.shape
        dh = d // self.heads
        qkv = transpose(reshape(self.qkv(x), (b, length, 3, self.heads, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = softmax((q @ transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh)), axis=-1)
        y = reshape(transpose(att @ v, (0, 2, 1, 3)), (b, length, d))
        return self.out(y)


class TextEncoderStub(_Frozen, Module):
    """Token + position embeddings, one pre-norm transformer block, EOT readout."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 1])
        d = cfg.d_tok
        self.token_embedding = self.add_param("token_embedding", rng.normal(0.0, 0.02, (cfg.vocab_size, d)))
        self.positional = self.add_param("positional", rng.normal(0.0, 0.01, (cfg.L_max, d)))
        self.ln1 = self.add_child("ln1", LayerNorm(d))
        self.attn = self.add_child("attn", SelfAttention(rng, d, cfg.heads))
        self.ln2 = self.add_child("ln2", LayerNorm(d))
        self.mlp = self.add_child("mlp", Mlp(rng, d, 4 * d))
        self.ln_final = self.add_child("ln_final", LayerNorm(d))
        self.proj = self.add_child("proj", Linear(rng, d, cfg.d_txt, bias=False))

    def embed_ids(self, ids: Sequence[int]) -> Tensor:
        ids = np.asarray(ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ContractError(f"token id out of range [0, {self.cfg.vocab_size})")
        return take_rows(self.token_embedding, ids)

    def __call__(self, seq: Tensor) -> Tensor:
        """``seq`` is [B, L, d_tok] embeddings; returns [B, d_txt]."""
        if seq.ndim != 3 or seq.shape[-1] != self.cfg.d_tok:
            raise DimensionError(f"expected [B, L, {self.cfg.d_tok}] embeddings, got {seq.shape}")
        length = seq.shape[1]
        if length > self.cfg.L_max:
            raise ContractError(f"sequence length {length} exceeds L_max={self.cfg.L_max}")
        x = seq + self.positional[:length]
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        x = self.ln_final(x)
        return self.proj(x[:, length - 1, :])


class VisualEncoderStub(_Frozen, Module):
    """Patch embedding followed by two token/channel mixing blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 2])
        n, c = cfg.n_pix, cfg.C
        self.patch = self.add_child("patch", Linear(rng, cfg.p * cfg.p * 3, c))
        self.pos = self.add_param("pos", rng.normal(0.0, 0.02, (n, c)))
        for i in range(2):
            self.add_child(f"block{i}_ln1", LayerNorm(c))
            self.add_param(f"block{i}_tokmix_w", rng.normal(0.0, 1.0 / np.sqrt(n), (n, n)))
            self.add_param(f"block{i}_tokmix_b", np.zeros((n, 1)))
            self.add_child(f"block{i}_ln2", LayerNorm(c))
            self.add_child(f"block{i}_mlp", Mlp(rng, c, 2 * c))
        self.proj = self.add_child("proj", Linear(rng, c, cfg.d_txt, bias=False))

    def patchify(self, images: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (cfg.H, cfg.W, 3):
            raise ContractError(f"expected images of shape (H={cfg.H}, W={cfg.W}, 3), got {images.shape[1:]}")
        b = images.shape[0]
        h, w = cfg.grid
        x = images.reshape(b, h, cfg.p, w, cfg.p, 3).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, h * w, cfg.p * cfg.p * 3)

    def feature_map(self, images) -> Tensor:
        """[B, H, W, 3] images -> [B, N_pix, C] row-major feature map."""
        x = self.patch(Tensor(self.patchify(images))) + self.pos
        for i in range(2):
            ln1 = self._children[f"block{i}_ln1"]
            ln2 = self._children[f"block{i}_ln2"]
            mlp = self._children[f"block{i}_mlp"]
            x = x + (self._params[f"block{i}_tokmix_w"] @ ln1(x) + self._params[f"block{i}_tokmix_b"])
            x = x + mlp(ln2(x))
        return x

    def project_map(self, fmap: Tensor) -> Tensor:
        """Per-position projection into the shared text space: [B, N, C] -> [B, N, d_txt]."""
        return self.proj(fmap)

    def __call__(self, images) -> Tuple[Tensor, Tensor]:
        fmap = self.feature_map(images)
        return fmap, self.project_map(fmap).mean(axis=1)


def _token_row(enc: TextEncoderStub, tok) -> Tensor:
    if isinstance(tok, Tensor):
        return reshape(tok, (1, enc.cfg.d_tok))
    if isinstance(tok, (int, np.integer)):
        return enc.embed_ids([tok])
    return Tensor(np.asarray(tok).reshape(1, enc.cfg.d_tok))


def encode_text(enc: TextEncoderStub, tokens: Sequence[Union[int, Tensor, np.ndarray]]) -> Tensor:
    """Encode one prompt given as a mix of token ids and context embeddings."""
    if len(tokens) > enc.cfg.L_max:
        raise ContractError(f"sequence length {len(tokens)} exceeds L_max={enc.cfg.L_max}")
    seq = concat([_token_row(enc, t) for t in tokens], axis=0)
    return reshape(enc(reshape(seq, (1, len(tokens), enc.cfg.d_tok))), (enc.cfg.d_txt,))


def encode_image(enc: VisualEncoderStub, image) -> Tuple[Tensor, Tensor]:
    """Single image -> ([h', w', C] feature map, [d_txt] global feature)."""
    image = np.asarray(image)
    if image.shape != (enc.cfg.H, enc.cfg.W, 3):
        raise ContractError(f"expected image of shape ({enc.cfg.H}, {enc.cfg.W}, 3), got {image.shape}")
    fmap, glob = enc(image[None])
    h, w = enc.cfg.grid
    return reshape(fmap, (h, w, enc.cfg.C)), reshape(glob, (enc.cfg.d_txt,))
