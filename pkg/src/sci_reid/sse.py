"""Dual-prompt semantic separation and stage-1 prompt learning.

Identity prompts read "a photo of a [X]_1 .. [X]_M person." and clothing
prompts "a photo of the [X]_1 .. [X]_M clothes."; only the M context
vectors are learned. The clothing direction is removed from each identity
text feature by projecting onto the identity feature and subtracting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Adam,
    AdamState,
    LrSchedule,
    Tensor,
    concat,
    cosine_sim,
    cross_entropy,
    getitem,
    l2_normalize,
    matmul,
    parameters_checksum,
    reshape,
    take_rows,
    transpose,
    tsum,
)
from .encoders import TOKEN_ID, TextEncoderStub, VisualEncoderStub
from .errors import ContractError, DataError, DegenerateVectorError, DimensionError
from .nn import Module

log = logging.getLogger(__name__)

ID_PREFIX = ("<sot>", "a", "photo", "of", "a")
ID_SUFFIX = ("person", ".", "<eot>")
CLO_PREFIX = ("<sot>", "a", "photo", "of", "the")
CLO_SUFFIX = ("clothes", ".", "<eot>")

# CLIP's logit scale, exp(ln(1/0.07)); held fixed since only contexts train.
LOGIT_SCALE = float(np.exp(np.log(1.0 / 0.07)))


@dataclass
class SseLossWeights:
    lambda1: float = 0.7
    lambda2: float = 0.3

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class ClothesIndex:
    """Dense re-indexing of identity and outfit labels."""

    pids: np.ndarray  # original pid per dense identity index
    clothes: np.ndarray  # original clothes id per dense clothes index
    clothes_to_pid: np.ndarray  # dense clothes index -> dense identity index
    pid_clothes: List[np.ndarray]  # dense identity index -> dense clothes indices
    sample_pid: np.ndarray
    sample_clothes: np.ndarray

    @property
    def num_pids(self) -> int:
        return len(self.pids)

    @property
    def num_clothes(self) -> int:
        return len(self.clothes)


def clo_pairing(pids: Sequence[int], clothes_ids: Sequence[int]) -> ClothesIndex:
    """Index identities and globally-numbered outfits; each outfit must have one owner."""
    pids = np.asarray(pids, dtype=np.int64)
    clothes_ids = np.asarray(clothes_ids, dtype=np.int64)
    if pids.shape != clothes_ids.shape:
        raise DataError("every sample needs both a pid and a clothes id")
    uniq_pids, sample_pid = np.unique(pids, return_inverse=True)
    uniq_clo, sample_clo = np.unique(clothes_ids, return_inverse=True)
    owner = np.full(len(uniq_clo), -1, dtype=np.int64)
    for p, c in zip(sample_pid, sample_clo):
        if owner[c] == -1:
            owner[c] = p
        elif owner[c] != p:
            raise DataError(
                f"clothes id {uniq_clo[c]} is shared by pids {uniq_pids[owner[c]]} and {uniq_pids[p]}"
            )
    pid_clothes = [np.flatnonzero(owner == i) for i in range(len(uniq_pids))]
    return ClothesIndex(uniq_pids, uniq_clo, owner, pid_clothes, sample_pid, sample_clo)


class PromptBank(Module):
    """Learnable context vectors, one set per identity and per clothes class."""

    def __init__(self, num_pids: int, num_clothes: int, M: int = 4, d_tok: int = 32, seed: int = 0,
                 std: float = 0.02):
        super().__init__()
        if num_pids <= 0 or num_clothes <= 0 or M <= 0:
            raise ContractError("num_pids, num_clothes and M must be positive")
        self.M = M
        rng = np.random.default_rng([seed, 3])
        self.id_contexts = self.add_param("id_contexts", rng.normal(0.0, std, (num_pids, M, d_tok)))
        self.clo_contexts = self.add_param("clo_contexts", rng.normal(0.0, std, (num_clothes, M, d_tok)))
        self.template_id_tokens = (
            [TOKEN_ID[t] for t in ID_PREFIX],
            [TOKEN_ID[t] for t in ID_SUFFIX],
        )
        self.template_clo_tokens = (
            [TOKEN_ID[t] for t in CLO_PREFIX],
            [TOKEN_ID[t] for t in CLO_SUFFIX],
        )

    @property
    def num_pids(self) -> int:
        return self.id_contexts.shape[0]

    @property
    def num_clothes(self) -> int:
        return self.clo_contexts.shape[0]


def build_prompts(bank: PromptBank, pid: int, clo_id: int) -> Tuple[list, list]:
    """Token sequences (ids mixed with context Tensors) for one identity and one outfit."""
    if not 0 <= pid < bank.num_pids:
        raise ContractError(f"pid index {pid} out of range [0, {bank.num_pids})")
    if not 0 <= clo_id < bank.num_clothes:
        raise ContractError(f"clothes index {clo_id} out of range [0, {bank.num_clothes})")
    pre, suf = bank.template_id_tokens
    id_seq = list(pre) + [bank.id_contexts[pid, m] for m in range(bank.M)] + list(suf)
    pre, suf = bank.template_clo_tokens
    clo_seq = list(pre) + [bank.clo_contexts[clo_id, m] for m in range(bank.M)] + list(suf)
    return id_seq, clo_seq


def _batched_sequences(enc: TextEncoderStub, contexts: Tensor, rows, template) -> Tensor:
    rows = np.asarray(rows, dtype=np.intp)
    b = len(rows)
    pre, suf = template
    zeros = np.zeros(b, dtype=np.intp)
    pre_emb = getitem(reshape(enc.embed_ids(pre), (1, len(pre), -1)), zeros)
    suf_emb = getitem(reshape(enc.embed_ids(suf), (1, len(suf), -1)), zeros)
    return concat([pre_emb, take_rows(contexts, rows), suf_emb], axis=1)


def id_text_features(bank: PromptBank, enc: TextEncoderStub, pid_rows) -> Tensor:
    return enc(_batched_sequences(enc, bank.id_contexts, pid_rows, bank.template_id_tokens))


def clo_text_features(bank: PromptBank, enc: TextEncoderStub, clo_rows) -> Tensor:
    return enc(_batched_sequences(enc, bank.clo_contexts, clo_rows, bank.template_clo_tokens))


def project(f_clo: Tensor, f_id: Tensor) -> Tensor:
    """Component of ``f_clo`` along ``f_id`` (row-wise over the last axis)."""
    if f_clo.shape != f_id.shape:
        raise DimensionError(f"project shape mismatch: {f_clo.shape} vs {f_id.shape}")
    sq = tsum(f_id * f_id, axis=-1, keepdims=True)
    if np.any(sq.data == 0):
        raise DegenerateVectorError("cannot project onto a zero-norm identity feature")
    return (tsum(f_clo * f_id, axis=-1, keepdims=True) / sq) * f_id


def orthogonalize(f_id: Tensor, f_proj: Tensor) -> Tensor:
    if f_id.shape != f_proj.shape:
        raise DimensionError(f"orthogonalize shape mismatch: {f_id.shape} vs {f_proj.shape}")
    return f_id - f_proj


def _outfit_average(cindex: ClothesIndex, pid_rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Clothes rows owned by ``pid_rows`` and the [P x n_clo] averaging matrix."""
    clo_rows = np.concatenate([cindex.pid_clothes[p] for p in pid_rows])
    avg = np.zeros((len(pid_rows), len(clo_rows)), dtype=np.float32)
    start = 0
    for i, p in enumerate(pid_rows):
        n = len(cindex.pid_clothes[p])
        avg[i, start:start + n] = 1.0 / n
        start += n
    return clo_rows, avg


def separate(f_id: Tensor, f_clo_per_pid: Tensor) -> Tuple[Tensor, Tensor]:
    """(F_proj, F_ort) for aligned identity / clothing rows."""
    f_proj = project(f_clo_per_pid, f_id)
    return f_proj, orthogonalize(f_id, f_proj)


def sse_similarity_loss(f_ort: Tensor, f_id: Tensor, f_clo: Tensor, w: SseLossWeights) -> Tensor:
    """Batch mean of lambda1 (1 - cos(ort, id)) + lambda2 cos(ort, clo)."""
    sim_id = cosine_sim(f_ort, f_id, axis=-1).mean()
    sim_clo = cosine_sim(f_ort, f_clo, axis=-1).mean()
    return (1.0 - sim_id) * w.lambda1 + sim_clo * w.lambda2


def _similarity_logits(a: Tensor, b: Tensor, scale: float) -> Tensor:
    return matmul(l2_normalize(a), transpose(l2_normalize(b))) * scale


def i2t_loss(V: Tensor, F_txt: Tensor, scale: float = LOGIT_SCALE) -> Tensor:
    """Image-to-text InfoNCE where row i of ``F_txt`` is the text of image i."""
    n = V.shape[0]
    if n == 0:
        raise ContractError("i2t_loss needs a non-empty batch")
    if V.shape != F_txt.shape:
        raise DimensionError(f"i2t_loss shape mismatch: {V.shape} vs {F_txt.shape}")
    return cross_entropy(_similarity_logits(V, F_txt, scale), np.eye(n, dtype=V.data.dtype))


def t2i_targets(labels) -> np.ndarray:
    """Row i spreads unit mass over the batch positives of label y_i."""
    labels = np.asarray(labels)
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    return same / same.sum(axis=1, keepdims=True)


def t2i_loss(V: Tensor, labels, T: Tensor, scale: float = LOGIT_SCALE) -> Tensor:
    """Text-to-image loss averaging over every in-batch positive of y_i.

    ``T`` is a text table indexed by ``labels``.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if V.shape[0] == 0:
        raise ContractError("t2i_loss needs a non-empty batch")
    if labels.min() < 0 or labels.max() >= T.shape[0]:
        raise ContractError("label outside the text table")
    logits = _similarity_logits(take_rows(T, labels), V, scale)
    return cross_entropy(logits, t2i_targets(labels).astype(V.data.dtype))


@dataclass
class TextFeatureSet:
    F_id: np.ndarray
    F_clo: np.ndarray
    F_proj: np.ndarray
    F_ort: np.ndarray


def prompt_loss(
    bank: PromptBank,
    enc: TextEncoderStub,
    V: Tensor,
    pid_rows: np.ndarray,
    clo_rows: np.ndarray,
    cindex: ClothesIndex,
    weights: SseLossWeights,
    use_sse: bool = True,
    scale: float = LOGIT_SCALE,
) -> Tuple[Tensor, Dict[str, float]]:
    """Stage-1 objective for one batch: i2t + t2i (+ similarity when ``use_sse``).

    ``pid_rows``/``clo_rows`` are dense per-sample identity / outfit indices.
    Without SSE the single identity prompt plays the role of F_ort.
    """
    uniq, inv = np.unique(pid_rows, return_inverse=True)
    f_id = id_text_features(bank, enc, uniq)
    if use_sse:
        all_clo, avg = _outfit_average(cindex, uniq)
        f_clo_all = clo_text_features(bank, enc, all_clo)
        _, f_ort = separate(f_id, matmul(Tensor(avg), f_clo_all))
        pos = {c: i for i, c in enumerate(all_clo)}
        f_clo_sample = take_rows(f_clo_all, [pos[c] for c in clo_rows])
        l_sim = sse_similarity_loss(take_rows(f_ort, inv), take_rows(f_id, inv), f_clo_sample, weights)
    else:
        f_ort = f_id
        l_sim = None
    l_i2t = i2t_loss(V, take_rows(f_ort, inv), scale)
    l_t2i = t2i_loss(V, inv, f_ort, scale)
    total = l_i2t + l_t2i
    parts = {"i2t": float(l_i2t.data), "t2i": float(l_t2i.data), "sim": 0.0}
    if l_sim is not None:
        total = total + l_sim
        parts["sim"] = float(l_sim.data)
    parts["prompt"] = float(total.data)
    return total, parts


def compute_text_features(bank: PromptBank, enc: TextEncoderStub, cindex: ClothesIndex,
                          use_sse: bool = True) -> TextFeatureSet:
    """Full per-class feature tables (no graph kept)."""
    rows = np.arange(cindex.num_pids)
    f_id = id_text_features(bank, enc, rows).detach()
    if not use_sse:
        d = f_id.shape[1]
        return TextFeatureSet(f_id.data.copy(), np.zeros((0, d), f_id.data.dtype),
                              np.zeros_like(f_id.data), f_id.data.copy())
    f_clo = clo_text_features(bank, enc, np.arange(cindex.num_clothes)).detach()
    all_clo, avg = _outfit_average(cindex, rows)
    per_pid = Tensor(avg @ f_clo.data[all_clo])
    f_proj, f_ort = separate(f_id, per_pid)
    return TextFeatureSet(f_id.data, f_clo.data, f_proj.data, f_ort.data)


@dataclass
class Stage1Config:
    epochs: int = 30
    lr: float = 3.5e-4
    schedule: str = "cosine"
    P: int = 4
    K: int = 4
    weights: SseLossWeights = field(default_factory=SseLossWeights)
    use_sse: bool = True
    seed: int = 0


@dataclass
class Stage1Result:
    features: TextFeatureSet
    history: List[Dict[str, float]]
    optimizer: Optional[AdamState] = None


def train_stage1(
    bank: PromptBank,
    text_enc: TextEncoderStub,
    vis_enc: VisualEncoderStub,
    images: np.ndarray,
    pids: np.ndarray,
    clothes: np.ndarray,
    cfg: Stage1Config,
    sampler=None,
) -> Stage1Result:
    """Optimise the prompt contexts against frozen encoders.

    Returns the per-epoch mean losses and the cached feature tables computed
    from the final contexts. ``sampler(rng)`` must yield index arrays; by
    default PK batches over ``pids``.
    """
    from .synthdata import pk_sample

    if not (text_enc.frozen and vis_enc.frozen):
        raise ContractError("stage 1 requires both encoders frozen")
    cindex = clo_pairing(pids, clothes)
    if cindex.num_pids != bank.num_pids or cindex.num_clothes != bank.num_clothes:
        raise ContractError(
            f"prompt bank sized ({bank.num_pids}, {bank.num_clothes}) but data has "
            f"({cindex.num_pids}, {cindex.num_clothes}) identities/outfits"
        )
    rng = np.random.default_rng([cfg.seed, 11])
    history: List[Dict[str, float]] = []
    opt_state = None
    if cfg.epochs > 0:
        V_all = _frozen_image_features(vis_enc, images)
        params = [bank.id_contexts] + ([bank.clo_contexts] if cfg.use_sse else [])
        opt = Adam(params, lr=cfg.lr)
        schedule = LrSchedule(cfg.schedule, cfg.lr, cfg.epochs)
        steps = max(1, len(pids) // (cfg.P * cfg.K))
        for epoch in range(cfg.epochs):
            opt.lr = schedule(epoch)
            acc: Dict[str, float] = {}
            for _ in range(steps):
                idx = sampler(rng) if sampler else pk_sample(pids, cfg.P, cfg.K, rng).indices
                loss, parts = prompt_loss(
                    bank, text_enc, Tensor(V_all[idx]), cindex.sample_pid[idx],
                    cindex.sample_clothes[idx], cindex, cfg.weights, cfg.use_sse,
                )
                opt.zero_grad()
                loss.backward()
                opt.step()
                for k, v in parts.items():
                    acc[k] = acc.get(k, 0.0) + v / steps
            acc["epoch"] = epoch + 1
            history.append(acc)
            log.debug("stage1 epoch %d %s", epoch + 1, acc)
        opt_state = opt.state
    return Stage1Result(compute_text_features(bank, text_enc, cindex, cfg.use_sse), history, opt_state)


def _frozen_image_features(vis_enc: VisualEncoderStub, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = [vis_enc(images[i:i + chunk])[1].data for i in range(0, len(images), chunk)]
    return np.concatenate(out, axis=0)
