"""Text-guided refinement of visual feature maps and stage-2 training.

Pipeline per image, on the projected [N_pix, d] map ``F_ori``::

    F_res  = W(theta(F) phi(F)^T / N_pix  g(F)) + F_ori          non-local
    F_out  = F_res + softmax(F_res F_ort^T / sqrt(d_k)) F_ort     text attention
    F_diff = MLP(LayerNorm(F_out))
    F_img  = F_ori + alpha * F_diff                               per-channel gate

W and alpha start at zero so an untrained module is the identity on F_ori.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import (
    Adam,
    LrSchedule,
    Tensor,
    as_tensor,
    cross_entropy,
    exp,
    l2_normalize,
    log,
    matmul,
    one_hot,
    softmax,
    transpose,
    tsum,
)
from .encoders import VisualEncoderStub
from .errors import ContractError, DimensionError
from .nn import LayerNorm, Linear, Mlp, Module
from .sse import LOGIT_SCALE, ClothesIndex, TextFeatureSet, clo_pairing

log_ = logging.getLogger(__name__)


class NonLocalBlock(Module):
    def __init__(self, rng: np.random.Generator, C: int, C_inner: Optional[int] = None):
        super().__init__()
        C_inner = C_inner or max(1, C // 2)
        self.theta = self.add_child("theta", Linear(rng, C, C_inner))
        self.phi = self.add_child("phi", Linear(rng, C, C_inner))
        self.g = self.add_child("g", Linear(rng, C, C_inner))
        self.W = self.add_child("W", Linear(rng, C_inner, C, std=0.0))

    def __call__(self, F_ori: Tensor) -> Tensor:
        return nonlocal_forward(self, F_ori)


def nonlocal_forward(block: NonLocalBlock, F_ori: Tensor) -> Tensor:
    """[..., N_pix, C] -> same shape; context is averaged over the N_pix positions."""
    n_pix = F_ori.shape[-2]
    if n_pix < 1:
        raise ContractError("non-local block needs at least one position")
    th, ph, g = block.theta(F_ori), block.phi(F_ori), block.g(F_ori)
    affinity = matmul(th, transpose(ph, _swap_last(ph.ndim))) * (1.0 / n_pix)
    F_con = matmul(affinity, g)
    return block.W(F_con) + F_ori


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def text_guided_attention(F_res: Tensor, F_ort_rows, d_k: Optional[int] = None) -> Tensor:
    """Residual cross-attention with text rows as both keys and values."""
    F_ort_rows = as_tensor(F_ort_rows)
    if F_ort_rows.ndim != 2 or F_ort_rows.shape[0] < 1:
        raise ContractError(f"text table must be [T >= 1, C], got {F_ort_rows.shape}")
    if F_res.shape[-1] != F_ort_rows.shape[1]:
        raise DimensionError(
            f"visual dim {F_res.shape[-1]} does not match text dim {F_ort_rows.shape[1]}"
        )
    d_k = d_k or F_ort_rows.shape[1]
    att = softmax(matmul(F_res, transpose(F_ort_rows)) * (1.0 / np.sqrt(d_k)), axis=-1)
    return F_res + matmul(att, F_ort_rows)


class CrossAttnRefiner(Module):
    def __init__(self, rng: np.random.Generator, C: int, mlp_out_std: Optional[float] = None):
        super().__init__()
        self.d_k = C
        self.norm = self.add_child("norm", LayerNorm(C))
        self.mlp = self.add_child("mlp", Mlp(rng, C, 4 * C, out_std=mlp_out_std))
        self.alpha = self.add_param("alpha", np.zeros(C))


def refine(refiner: CrossAttnRefiner, F_out: Tensor) -> Tensor:
    return refiner.mlp(refiner.norm(F_out))


def fuse(F_ori: Tensor, F_diff: Tensor, alpha: Tensor) -> Tensor:
    if F_ori.shape != F_diff.shape or alpha.shape != (F_ori.shape[-1],):
        raise DimensionError(f"fuse shape mismatch: {F_ori.shape}, {F_diff.shape}, alpha {alpha.shape}")
    return F_ori + alpha * F_diff


class SimModule(Module):
    """Non-local context block followed by the text-guided refiner."""

    def __init__(self, C: int, seed: int = 0, C_inner: Optional[int] = None, mlp_out_std: Optional[float] = 0.02):
        super().__init__()
        rng = np.random.default_rng([seed, 4])
        self.nonlocal_block = self.add_child("nonlocal", NonLocalBlock(rng, C, C_inner))
        self.refiner = self.add_child("refiner", CrossAttnRefiner(rng, C, mlp_out_std))

    def __call__(self, F_ori: Tensor, F_ort) -> Tensor:
        F_res = nonlocal_forward(self.nonlocal_block, F_ori)
        F_out = text_guided_attention(F_res, F_ort, self.refiner.d_k)
        return fuse(F_ori, refine(self.refiner, F_out), self.refiner.alpha)


class IdHead(Module):
    def __init__(self, d: int, num_pids: int, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng([seed, 5])
        self.fc = self.add_child("fc", Linear(rng, d, num_pids))
        self.num_pids = num_pids

    def __call__(self, features: Tensor) -> Tensor:
        return self.fc(features)


class CalHead(Module):
    """Cosine clothes classifier with temperature ``tau``."""

    def __init__(self, d: int, clothes_to_pid: np.ndarray, tau: float = 1.0 / 16, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng([seed, 6])
        self.clothes_to_pid = np.asarray(clothes_to_pid, dtype=np.int64)
        self.tau = tau
        self.weight = self.add_param("weight", rng.normal(0.0, 1.0 / np.sqrt(d), (len(self.clothes_to_pid), d)))

    @property
    def num_clothes(self) -> int:
        return len(self.clothes_to_pid)

    def logits(self, features: Tensor, detach_weight: bool = False) -> Tensor:
        w = Tensor(self.weight.data) if detach_weight else self.weight
        return matmul(l2_normalize(features), transpose(l2_normalize(w))) * (1.0 / self.tau)


def id_loss(features: Tensor, labels, head: IdHead) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= head.num_pids):
        raise ContractError(f"identity label outside [0, {head.num_pids})")
    logits = head(features)
    return cross_entropy(logits, one_hot(labels, head.num_pids, logits.data.dtype))


def cal_targets(pid_labels, clothes_labels, clothes_to_pid) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample (q weights, negative mask, skipped flags).

    q is uniform over the sample identity's other outfits; negatives are the
    outfits of every other identity. Samples whose identity owns a single
    outfit get q = 0 and are flagged.
    """
    pid_labels = np.asarray(pid_labels)
    clothes_labels = np.asarray(clothes_labels)
    owner = np.asarray(clothes_to_pid)
    same_id = owner[None, :] == pid_labels[:, None]
    own = np.arange(len(owner))[None, :] == clothes_labels[:, None]
    if np.any(owner[clothes_labels] != pid_labels):
        raise ContractError("clothes label does not belong to the sample's identity")
    pos = same_id & ~own
    counts = pos.sum(axis=1, keepdims=True)
    q = np.where(counts > 0, pos / np.maximum(counts, 1), 0.0)
    return q, ~same_id, counts[:, 0] == 0


def cal_loss(features: Tensor, pid_labels, clothes_labels, head: CalHead) -> Tuple[Tensor, int]:
    """Clothes-based adversarial loss; classifier weights are treated as constants.

    Returns the batch mean and the number of samples skipped because their
    identity has a single outfit.
    """
    q, neg, skipped = cal_targets(pid_labels, clothes_labels, head.clothes_to_pid)
    logits = head.logits(features, detach_weight=True)
    dtype = logits.data.dtype
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    e = exp(logits - shift)
    neg_sum = tsum(e * Tensor(neg.astype(dtype)), axis=1, keepdims=True)
    log_prob = logits - shift - log(e + neg_sum)
    per_sample = -tsum(log_prob * Tensor(q.astype(dtype)), axis=1)
    return per_sample.mean(), int(skipped.sum())


def clothes_ce_loss(features: Tensor, clothes_labels, head: CalHead) -> Tensor:
    """Standard CE for the clothes classifier on detached features."""
    logits = head.logits(features.detach())
    return cross_entropy(logits, one_hot(clothes_labels, head.num_clothes, logits.data.dtype))


def i2tce_loss(V: Tensor, F_ort, labels, eps: float = 0.1, scale: float = LOGIT_SCALE) -> Tensor:
    """Image-to-all-texts CE with label smoothing ``eps``."""
    if not 0.0 <= eps < 1.0:
        raise ContractError(f"smoothing eps must lie in [0, 1), got {eps}")
    F_ort = as_tensor(F_ort)
    n_cls = F_ort.shape[0]
    labels = np.asarray(labels, dtype=np.intp)
    logits = matmul(l2_normalize(V), transpose(l2_normalize(F_ort))) * scale
    q = (1.0 - eps) * one_hot(labels, n_cls, np.float64) + eps / n_cls
    return cross_entropy(logits, q.astype(logits.data.dtype))


class SciModel(Module):
    """Trainable visual path: encoder, optional SIM, identity and clothes heads."""

    def __init__(self, vis_enc: VisualEncoderStub, text_features: Optional[TextFeatureSet],
                 cindex: ClothesIndex, use_sim: bool = True, tau: float = 1.0 / 16, seed: int = 0,
                 mlp_out_std: Optional[float] = 0.02):
        super().__init__()
        d = vis_enc.cfg.d_txt
        self.vis_enc = self.add_child("visual", vis_enc)
        self.use_sim = use_sim
        self.sim = self.add_child("sim", SimModule(d, seed=seed, mlp_out_std=mlp_out_std)) if use_sim else None
        self.id_head = self.add_child("id_head", IdHead(d, cindex.num_pids, seed=seed))
        self.cal_head = self.add_child("cal_head", CalHead(d, cindex.clothes_to_pid, tau=tau, seed=seed))
        self.text_features = text_features
        self.cindex = cindex

    @property
    def F_ort(self) -> np.ndarray:
        if self.text_features is None:
            raise ContractError("stage-1 text feature cache missing")
        return self.text_features.F_ort

    def global_features(self, images) -> Tensor:
        """Pooled [B, d_txt] features after optional SIM refinement."""
        F_ori = self.vis_enc.project_map(self.vis_enc.feature_map(images))
        F_img = self.sim(F_ori, Tensor(self.F_ort)) if self.use_sim else F_ori
        return F_img.mean(axis=1)

    def main_parameters(self) -> List[Tensor]:
        params = self.vis_enc.parameters() + self.id_head.parameters()
        if self.sim is not None:
            params += self.sim.parameters()
        return params


def extract_embedding(model: SciModel, images, chunk: int = 64) -> np.ndarray:
    """L2-normalised embeddings; a single [H, W, 3] image gives a 1-D vector."""
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    feats = [model.global_features(images[i:i + chunk]).data for i in range(0, len(images), chunk)]
    f = np.concatenate(feats, axis=0)
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    return f[0] if single else f


@dataclass
class Stage2Config:
    epochs: int = 30
    lr: float = 3.5e-4
    schedule: str = "step"
    milestones: Tuple[int, ...] = (10, 18)
    P: int = 4
    K: int = 4
    smoothing: float = 0.1
    seed: int = 0


def stage2_objective(model: SciModel, feats: Tensor, pid_rows, clo_rows, smoothing: float = 0.1):
    """id + cal + i2tce on precomputed pooled features; returns (loss, parts)."""
    l_id = id_loss(feats, pid_rows, model.id_head)
    l_cal, skipped = cal_loss(feats, pid_rows, clo_rows, model.cal_head)
    l_i2tce = i2tce_loss(feats, model.F_ort, pid_rows, smoothing)
    total = l_id + l_cal + l_i2tce
    parts = {"id": float(l_id.data), "cal": float(l_cal.data), "i2tce": float(l_i2tce.data),
             "total": float(total.data), "cal_skipped": skipped}
    return total, parts


def stage2_loss(model: SciModel, images: np.ndarray, pid_rows, clo_rows, smoothing: float = 0.1):
    return stage2_objective(model, model.global_features(images), pid_rows, clo_rows, smoothing)


def train_stage2(model: SciModel, images: np.ndarray, pids: np.ndarray, clothes: np.ndarray,
                 cfg: Stage2Config, sampler=None, states: Optional[Dict] = None) -> List[Dict[str, float]]:
    """Alternate a clothes-classifier step with the main step, per PK batch.

    If ``states`` is a dict it receives the final optimiser states under
    ``"main"`` and ``"clothes"``.
    """
    from .synthdata import pk_sample

    if model.text_features is None:
        raise ContractError("stage 2 needs the stage-1 text feature cache")
    cindex = clo_pairing(pids, clothes)
    if cindex.num_pids != model.cindex.num_pids or cindex.num_clothes != model.cindex.num_clothes:
        raise ContractError("training labels do not match the model's identity/outfit tables")
    history: List[Dict[str, float]] = []
    if cfg.epochs <= 0:
        return history
    model.vis_enc.frozen = False
    main_opt = Adam(model.main_parameters(), lr=cfg.lr)
    clo_opt = Adam(model.cal_head.parameters(), lr=cfg.lr)
    schedule = LrSchedule("step", cfg.lr, cfg.epochs, tuple(cfg.milestones)) if cfg.schedule == "step" \
        else LrSchedule("cosine", cfg.lr, cfg.epochs)
    rng = np.random.default_rng([cfg.seed, 12])
    steps = max(1, len(pids) // (cfg.P * cfg.K))
    for epoch in range(cfg.epochs):
        lr = schedule(epoch)
        main_opt.lr = clo_opt.lr = lr
        acc: Dict[str, float] = {}
        for _ in range(steps):
            idx = sampler(rng) if sampler else pk_sample(pids, cfg.P, cfg.K, rng).indices
            pid_rows, clo_rows = cindex.sample_pid[idx], cindex.sample_clothes[idx]
            feats = model.global_features(images[idx])

            clo_loss = clothes_ce_loss(feats, clo_rows, model.cal_head)
            clo_opt.zero_grad()
            clo_loss.backward()
            clo_opt.step()

            loss, parts = stage2_objective(model, feats, pid_rows, clo_rows, cfg.smoothing)
            parts["clothes_ce"] = float(clo_loss.data)
            main_opt.zero_grad()
            loss.backward()
            main_opt.step()
            for k, v in parts.items():
                acc[k] = acc.get(k, 0.0) + v / steps
        acc["epoch"] = epoch + 1
        history.append(acc)
        log_.debug("stage2 epoch %d %s", epoch + 1, acc)
    if states is not None:
        states["main"], states["clothes"] = main_opt.state, clo_opt.state
    return history
