"""Run configuration and the end-to-end train / evaluate / ablate pipeline."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import AdamState
from .checkpoint import Checkpoint
from .encoders import EncoderConfig, TextEncoderStub, VisualEncoderStub
from .errors import CheckpointError, ContractError
from .evalkit import EvalResult, Meta, evaluate, parse_protocols
from .sim import SciModel, Stage2Config, extract_embedding, train_stage2
from .sse import (
    PromptBank,
    SseLossWeights,
    Stage1Config,
    TextFeatureSet,
    clo_pairing,
    train_stage1,
)
from .synthdata import Dataset, SynthConfig, generate, load

log = logging.getLogger(__name__)

VARIANTS: Dict[str, Tuple[bool, bool]] = {
    "baseline": (False, False),
    "+SSE": (True, False),
    "+SIM": (False, True),
    "+SSE+SIM": (True, True),
}


@dataclass
class StageSchedule:
    epochs: int = 30
    lr: float = 3.5e-4
    schedule: str = "cosine"
    milestones: List[int] = field(default_factory=list)


@dataclass
class RunConfig:
    seed: int = 0
    data: Dict = field(default_factory=dict)  # SynthConfig overrides; seed defaults to the run seed
    data_path: Optional[str] = None
    encoder: Dict = field(default_factory=dict)  # EncoderConfig overrides
    M: int = 4
    lambda1: float = 0.7
    lambda2: float = 0.3
    tau_cal: float = 1.0 / 16
    smoothing: float = 0.1
    sim_mlp_out_std: float = 0.02
    stage1: StageSchedule = field(default_factory=lambda: StageSchedule(30, 3.5e-4, "cosine"))
    stage2: StageSchedule = field(default_factory=lambda: StageSchedule(30, 3.5e-4, "step", [10, 18]))
    P: int = 4
    K: int = 4
    use_sse: bool = True
    use_sim: bool = True
    protocols: List[str] = field(default_factory=lambda: ["general", "same_clothes", "cloth_changing"])
    k_max: int = 10

    def __post_init__(self):
        if isinstance(self.stage1, dict):
            self.stage1 = _stage_from(self.stage1, "stage1")
        if isinstance(self.stage2, dict):
            self.stage2 = _stage_from(self.stage2, "stage2")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ContractError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.M < 1 or self.P < 1 or self.K < 1 or self.k_max < 1:
            raise ContractError("M, P, K and k_max must be >= 1")
        if not 0.0 <= self.smoothing < 1.0:
            raise ContractError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        if self.tau_cal <= 0:
            raise ContractError(f"tau_cal must be positive, got {self.tau_cal}")
        SseLossWeights(self.lambda1, self.lambda2)
        parse_protocols(self.protocols)
        for stage, name in ((self.stage1, "stage1"), (self.stage2, "stage2")):
            if stage.epochs < 0 or stage.lr <= 0:
                raise ContractError(f"{name}: epochs must be >= 0 and lr > 0")
            if stage.schedule not in ("cosine", "step"):
                raise ContractError(f"{name}.schedule must be 'cosine' or 'step', got {stage.schedule!r}")
        _checked(SynthConfig, self.synth_kwargs(), "data")
        self.encoder_config()

    @classmethod
    def from_dict(cls, raw: Dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ContractError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ContractError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ContractError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ContractError("config file must hold a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> Dict:
        return asdict(self)

    def synth_kwargs(self) -> Dict:
        kw = dict(self.data)
        kw.setdefault("seed", self.seed)
        return kw

    def synth_config(self) -> SynthConfig:
        return _checked(SynthConfig, self.synth_kwargs(), "data")

    def encoder_config(self) -> EncoderConfig:
        kw = dict(self.encoder)
        kw.setdefault("seed", self.seed)
        return _checked(EncoderConfig, kw, "encoder")

    def variant(self, use_sse: bool, use_sim: bool) -> "RunConfig":
        d = self.to_dict()
        d.update(use_sse=use_sse, use_sim=use_sim)
        return RunConfig.from_dict(d)


def _stage_from(raw: Dict, name: str) -> StageSchedule:
    return _checked(StageSchedule, raw, name)


def _checked(cls, kwargs: Dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(kwargs) - known)
    if unknown:
        raise ContractError(f"unknown {name} field(s): {', '.join(unknown)}")
    obj = cls(**kwargs)
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


def load_dataset(cfg: RunConfig, path: Optional[str] = None) -> Dataset:
    path = path or cfg.data_path
    return load(path) if path else generate(cfg.synth_config())


def check_compatible(cfg: RunConfig, ds: Dataset) -> None:
    enc = cfg.encoder_config()
    _, H, W, ch = ds.images.shape
    if (H, W, ch) != (enc.H, enc.W, 3):
        raise ContractError(f"dataset images are {H}x{W}x{ch} but the encoder expects {enc.H}x{enc.W}x3")
    train = ds.indices("train")
    if len(train) == 0:
        raise ContractError("dataset has no training split")
    if cfg.P > len(np.unique(ds.pids[train])):
        raise ContractError(f"P={cfg.P} exceeds the number of training identities")


@dataclass
class TrainedRun:
    config: RunConfig
    text_enc: TextEncoderStub
    bank: PromptBank
    model: SciModel
    log_rows: List[Dict]
    optimizers: Dict[str, AdamState]


def train(cfg: RunConfig, ds: Dataset) -> TrainedRun:
    """Stage 1 (prompts, frozen encoders) followed by stage 2 (visual path)."""
    check_compatible(cfg, ds)
    tr = ds.subset("train")
    ecfg = cfg.encoder_config()
    text_enc, vis_enc = TextEncoderStub(ecfg), VisualEncoderStub(ecfg)
    text_enc.frozen = vis_enc.frozen = True
    cindex = clo_pairing(tr.pids, tr.clothes_ids)
    bank = PromptBank(cindex.num_pids, cindex.num_clothes, cfg.M, ecfg.d_tok, seed=cfg.seed)

    s1 = Stage1Config(epochs=cfg.stage1.epochs, lr=cfg.stage1.lr, schedule=cfg.stage1.schedule,
                      P=cfg.P, K=cfg.K, weights=SseLossWeights(cfg.lambda1, cfg.lambda2),
                      use_sse=cfg.use_sse, seed=cfg.seed)
    r1 = train_stage1(bank, text_enc, vis_enc, tr.images, tr.pids, tr.clothes_ids, s1)
    rows = [dict(stage=1, **h) for h in r1.history]

    model = SciModel(vis_enc, r1.features, cindex, use_sim=cfg.use_sim, tau=cfg.tau_cal,
                     seed=cfg.seed, mlp_out_std=cfg.sim_mlp_out_std)
    s2 = Stage2Config(epochs=cfg.stage2.epochs, lr=cfg.stage2.lr, schedule=cfg.stage2.schedule,
                      milestones=tuple(cfg.stage2.milestones), P=cfg.P, K=cfg.K,
                      smoothing=cfg.smoothing, seed=cfg.seed)
    states: Dict[str, AdamState] = {}
    rows += [dict(stage=2, **h) for h in train_stage2(model, tr.images, tr.pids, tr.clothes_ids, s2, states=states)]
    if r1.optimizer is not None:
        states["stage1"] = r1.optimizer
    text_enc.frozen = vis_enc.frozen = True
    return TrainedRun(cfg, text_enc, bank, model, rows, states)


# -- checkpoint conversion ------------------------------------------------------------------

def _prefixed(prefix: str, state: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def _unprefixed(prefix: str, section: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    head = prefix + "."
    return {k[len(head):]: v for k, v in section.items() if k.startswith(head)}


def to_checkpoint(run: TrainedRun) -> Checkpoint:
    model, feats = run.model, run.model.text_features
    opt_arrays, opt_meta = {}, {}
    for name in sorted(run.optimizers):
        st = run.optimizers[name]
        opt_meta[name] = {"lr": st.lr, "betas": list(st.betas), "eps": st.eps, "step": st.step}
        for i, (m, v) in enumerate(zip(st.m, st.v)):
            opt_arrays[f"{name}.m.{i:03d}"] = m
            opt_arrays[f"{name}.v.{i:03d}"] = v
    sections = {
        "encoders": {**_prefixed("text", run.text_enc.state_dict()),
                     **_prefixed("visual", model.vis_enc.state_dict())},
        "prompt_bank": run.bank.state_dict(),
        "sim": model.sim.state_dict() if model.sim is not None else {},
        "heads": {**_prefixed("id", model.id_head.state_dict()),
                  **_prefixed("cal", model.cal_head.state_dict())},
        "text_features": {"F_id": feats.F_id, "F_clo": feats.F_clo,
                          "F_proj": feats.F_proj, "F_ort": feats.F_ort},
        "optimizer": opt_arrays,
    }
    ci = model.cindex
    meta = {
        "config": run.config.to_dict(),
        "seed": run.config.seed,
        "labels": {"pids": ci.pids.tolist(), "clothes": ci.clothes.tolist(),
                   "clothes_to_pid": ci.clothes_to_pid.tolist()},
        "optimizer": opt_meta,
    }
    return Checkpoint(sections, meta)


def model_from_checkpoint(ckpt: Checkpoint) -> Tuple[RunConfig, SciModel]:
    try:
        cfg = RunConfig.from_dict(ckpt.meta["config"])
        labels = ckpt.meta["labels"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint metadata incomplete: {exc}") from exc
    ecfg = cfg.encoder_config()
    vis_enc = VisualEncoderStub(ecfg)
    enc = ckpt.section("encoders")
    vis_enc.load_state_dict(_unprefixed("visual", enc))
    owner = np.asarray(labels["clothes_to_pid"], dtype=np.int64)
    pids = np.asarray(labels["pids"], dtype=np.int64)
    clothes = np.asarray(labels["clothes"], dtype=np.int64)
    cindex = clo_pairing(pids[owner], clothes)
    tf = ckpt.section("text_features")
    feats = TextFeatureSet(tf["F_id"], tf["F_clo"], tf["F_proj"], tf["F_ort"])
    model = SciModel(vis_enc, feats, cindex, use_sim=cfg.use_sim, tau=cfg.tau_cal, seed=cfg.seed,
                     mlp_out_std=cfg.sim_mlp_out_std)
    if model.sim is not None:
        model.sim.load_state_dict(ckpt.section("sim"))
    heads = ckpt.section("heads")
    model.id_head.load_state_dict(_unprefixed("id", heads))
    model.cal_head.load_state_dict(_unprefixed("cal", heads))
    return cfg, model


# -- evaluation -------------------------------------------------------------------------------

def evaluate_model(model: SciModel, ds: Dataset, protocols, k_max: int = 10,
                   threads: Optional[int] = None) -> Dict[str, EvalResult]:
    q, g = ds.subset("query"), ds.subset("gallery")
    if len(q) == 0 or len(g) == 0:
        raise ContractError("dataset needs non-empty query and gallery splits")
    qe, ge = extract_embedding(model, q.images), extract_embedding(model, g.images)
    qm = Meta.of(q.pids, q.camera_ids, q.clothes_ids)
    gm = Meta.of(g.pids, g.camera_ids, g.clothes_ids)
    return {p.mode: evaluate(qe, ge, qm, gm, p, k_max, threads) for p in parse_protocols(protocols)}


def ablate(cfg: RunConfig, ds: Dataset, protocols=None, k_max: Optional[int] = None,
           threads: Optional[int] = None) -> List[Dict]:
    """Train and evaluate the four variants with a shared seed; one row per (variant, protocol)."""
    protocols = protocols or cfg.protocols
    k_max = k_max or cfg.k_max
    rows = []
    for name, (use_sse, use_sim) in VARIANTS.items():
        run = train(cfg.variant(use_sse, use_sim), ds)
        for mode, res in evaluate_model(run.model, ds, protocols, k_max, threads).items():
            rows.append({"variant": name, "use_sse": use_sse, "use_sim": use_sim, "protocol": mode,
                         "rank1": res.rank(1), "map": res.map,
                         "num_valid_queries": res.num_valid_queries})
    return rows
