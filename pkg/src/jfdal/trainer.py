"""Training regimes: VIS-only pretraining, joint training, fine-tuning and JFDAL."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import diffcore as dc
from .embedder import EmbedderConfig, EmbedderParams, embed, forward, freeze_guidance, init_params
from .losses import VIS, LossBreakdown, MarginConfig, cfdal_loss, margin_softmax_loss, sfdal_loss, total_loss
from .synthdata import Dataset, sample_hfr_batch, sample_vis_batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient turns non-finite.  Carries the last finite params."""

    def __init__(self, message: str, params: EmbedderParams | None, step: int):
        super().__init__(message)
        self.params = params
        self.step = step


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.2
    lam: float = 0.01
    margin: MarginConfig = field(default_factory=MarginConfig)
    N: int = 128
    N_prime: int = 128
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 100
    lr_milestones: tuple[int, ...] = ()
    seed: int = 0
    hfr_k: int = 4
    head_init: str = "mean_embedding"
    jitter_sigma: float = 0.0
    hidden_dims: tuple[int, ...] = (128, 128)
    embed_dim: int = 32

    def __post_init__(self):
        if isinstance(self.margin, dict):
            object.__setattr__(self, "margin", MarginConfig(**self.margin))
        object.__setattr__(self, "lr_milestones", tuple(int(e) for e in self.lr_milestones))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.N < 1 or self.N_prime < 1 or self.epochs < 1 or self.hfr_k < 1:
            raise ValueError("batch sizes, epochs and hfr_k must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("invalid optimizer settings")
        if self.head_init not in ("mean_embedding", "random"):
            raise ValueError("head_init must be 'mean_embedding' or 'random'")

    @classmethod
    def pretrain_defaults(cls, **kw) -> "TrainConfig":
        """Schedule for VIS-only and joint training: lr 0.1, /10 at epochs 9 and 14, 16 epochs."""
        base = dict(lr=0.1, epochs=16, lr_milestones=(9, 14))
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        return self.lr * 0.1 ** sum(1 for m in self.lr_milestones if epoch >= m)


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def record(self, step: int, epoch: int, lr: float, br: LossBreakdown) -> None:
        self.steps.append({"step": step, "epoch": epoch, **br.as_record(), "lr": lr})

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.steps)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


@dataclass
class TrainResult:
    params: EmbedderParams
    log: TrainLog
    guidance: EmbedderParams | None = None


StepCallback = Callable[[int, EmbedderParams], None]
EpochCallback = Callable[[int, EmbedderParams], dict]


def sgd_step(params: dict, grads: dict, lr: float, momentum: float, weight_decay: float, velocity: dict | None = None):
    """One momentum-SGD update.

    ``v <- momentum * v + (grad + weight_decay * param)``; ``param <- param - lr * v``.
    Returns ``(new_params, new_velocity)``; inputs are not modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r}; step aborted")
    velocity = velocity or {}
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        if g.shape != p.shape:
            raise dc.ShapeError(f"gradient for {name!r} has shape {g.shape}, param {p.shape}")
        v = g + weight_decay * p
        if name in velocity:
            v = momentum * velocity[name] + v
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, new_velocity


class _Optimizer:
    def __init__(self, params: EmbedderParams, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.velocity: dict = {}

    def apply(self, grads: dict, lr: float, step: int) -> None:
        try:
            arrays, self.velocity = sgd_step(
                self.params.arrays, grads, lr, self.cfg.momentum, self.cfg.weight_decay, self.velocity
            )
        except NonFiniteGradient as exc:
            raise TrainingDiverged(str(exc), self.params, step) from exc
        self.params = EmbedderParams(self.params.config, arrays)


def _check_finite(value: float, opt: _Optimizer, step: int) -> None:
    if not np.isfinite(value):
        log.error("non-finite loss at step %d; aborting with last finite params", step)
        raise TrainingDiverged(f"loss became non-finite at step {step}", opt.params, step)


def _jitter(obs: np.ndarray, sigma: float, rng) -> np.ndarray:
    return obs + rng.normal(scale=sigma, size=obs.shape) if sigma > 0 else obs


def iter_batches(n: int, batch: int, rng):
    """Index batches of one epoch: a fresh permutation cut into full batches (last partial dropped)."""
    perm = rng.permutation(n)
    for start in range(0, n - batch + 1, batch):
        yield perm[start : start + batch]


def _classification_loop(data: Dataset, labels: np.ndarray, params: EmbedderParams, cfg: TrainConfig,
                         on_step: StepCallback | None, on_epoch: EpochCallback | None) -> TrainResult:
    seq = np.random.SeedSequence(cfg.seed)
    order_rng, jitter_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    opt = _Optimizer(params, cfg)
    trace = TrainLog()
    n = len(data)
    batch = min(cfg.N, n)
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        for idx in iter_batches(n, batch, order_rng):
            tape = dc.Tape()
            leaves = opt.params.on_tape(tape)
            emb = forward(_jitter(data.obs[idx], cfg.jitter_sigma, jitter_rng), leaves, tape)
            loss = margin_softmax_loss(emb, labels[idx], leaves["head"], cfg.margin)
            value = float(loss.data)
            _check_finite(value, opt, step)
            grads = dc.backward(loss)
            opt.apply({k: grads[t] for k, t in leaves.items()}, lr, step)
            trace.record(step, epoch, lr, LossBreakdown(value, 0.0, value, 0.0, value))
            step += 1
            if on_step:
                on_step(step, opt.params)
        snap = {"epoch": epoch, "seconds": time.perf_counter() - t0}
        if on_epoch:
            snap.update(on_epoch(epoch, opt.params))
        trace.epochs.append(snap)
    return TrainResult(opt.params, trace)


def _arch(cfg: TrainConfig, input_dim: int, num_classes: int) -> EmbedderConfig:
    return EmbedderConfig(input_dim, cfg.hidden_dims, cfg.embed_dim, num_classes)


def pretrain_vis(large_vis: Dataset, cfg: TrainConfig, on_step: StepCallback | None = None,
                 on_epoch: EpochCallback | None = None) -> TrainResult:
    """VIS-only classifier; the result's ``guidance`` is the frozen copy."""
    if len(large_vis) == 0:
        raise ValueError("empty VIS dataset")
    classes, labels = np.unique(large_vis.ids, return_inverse=True)
    params = init_params(_arch(cfg, large_vis.obs.shape[1], classes.size), cfg.seed)
    res = _classification_loop(large_vis, labels, params, cfg, on_step, on_epoch)
    res.guidance = freeze_guidance(res.params)
    return res


def pool_datasets(large_vis: Dataset, hfr_train: Dataset) -> Dataset:
    return Dataset(
        np.vstack([large_vis.obs, hfr_train.obs]),
        np.concatenate([large_vis.ids, hfr_train.ids]),
        np.concatenate([large_vis.domains, hfr_train.domains]),
        "POOLED",
    )


def train_jt(large_vis: Dataset, hfr_train: Dataset, cfg: TrainConfig, on_step: StepCallback | None = None,
             on_epoch: EpochCallback | None = None) -> TrainResult:
    """Joint training from scratch over the pooled VIS and HFR data."""
    pooled = pool_datasets(large_vis, hfr_train)
    classes, labels = np.unique(pooled.ids, return_inverse=True)
    params = init_params(_arch(cfg, pooled.obs.shape[1], classes.size), cfg.seed)
    return _classification_loop(pooled, labels, params, cfg, on_step, on_epoch)


def init_hfr_head(hfr_train: Dataset, guidance: EmbedderParams, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Head over HFR-train identities and the identity -> row mapping."""
    classes = hfr_train.identities
    if cfg.head_init == "mean_embedding":
        vis = hfr_train.where(VIS)
        feats = embed(vis.obs, guidance)
        head = np.stack([feats[vis.ids == i].mean(axis=0) for i in classes])
        head /= np.linalg.norm(head, axis=1, keepdims=True)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        head = rng.normal(0.0, np.sqrt(1.0 / guidance.config.embed_dim), size=(classes.size, guidance.config.embed_dim))
    return head, classes


def _finetune_loop(hfr_train: Dataset, large_vis: Dataset | None, guidance: EmbedderParams, cfg: TrainConfig,
                   use_vis: bool, on_step: StepCallback | None, on_epoch: EpochCallback | None) -> TrainResult:
    if not guidance.guidance:
        guidance = freeze_guidance(guidance)
    head, classes = init_hfr_head(hfr_train, guidance, cfg)
    params = guidance.with_head(head)
    row_of = {int(c): r for r, c in enumerate(classes)}

    seq = np.random.SeedSequence(cfg.seed)
    hfr_rng, vis_rng, jitter_rng = (np.random.default_rng(s) for s in seq.spawn(3))
    opt = _Optimizer(params, cfg)
    trace = TrainLog()
    steps_per_epoch = max(1, int(np.ceil(len(hfr_train) / cfg.N)))
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        for _ in range(steps_per_epoch):
            hfr = sample_hfr_batch(hfr_train, cfg.N, hfr_rng, cfg.hfr_k)
            labels = np.array([row_of[int(i)] for i in hfr.ids])
            tape = dc.Tape()
            leaves = opt.params.on_tape(tape)
            emb = forward(_jitter(hfr.obs, cfg.jitter_sigma, jitter_rng), leaves, tape)
            l_cfdal, l_cls, align = cfdal_loss(emb, hfr.ids, hfr.domains, leaves["head"], cfg.margin, cfg.lam, labels)
            if use_vis:
                vis = sample_vis_batch(large_vis, cfg.N_prime, vis_rng)
                vis_rows = np.flatnonzero(hfr.domains == VIS)
                student = dc.concat_rows([forward(vis.obs, leaves, tape), dc.take_rows(emb, vis_rows)])
                teacher = embed(np.vstack([vis.obs, hfr.obs[vis_rows]]), guidance)
                l_sfdal = sfdal_loss(student, teacher)
            else:
                l_sfdal = tape.const(0.0)
            l_tot = total_loss(l_cfdal, l_sfdal, cfg.alpha)
            value = float(l_tot.data)
            _check_finite(value, opt, step)
            grads = dc.backward(l_tot)
            opt.apply({k: grads[t] for k, t in leaves.items()}, lr, step)
            br = LossBreakdown(float(l_cls.data), float(align.loss.data), float(l_cfdal.data),
                               float(l_sfdal.data), value, align.centroids)
            trace.record(step, epoch, lr, br)
            step += 1
            if on_step:
                on_step(step, opt.params)
        snap = {"epoch": epoch, "seconds": time.perf_counter() - t0}
        if on_epoch:
            snap.update(on_epoch(epoch, opt.params))
        trace.epochs.append(snap)
    return TrainResult(opt.params, trace, guidance)


def train_jfdal(hfr_train: Dataset, large_vis: Dataset, guidance: EmbedderParams, cfg: TrainConfig,
                on_step: StepCallback | None = None, on_epoch: EpochCallback | None = None) -> TrainResult:
    """Each step: HFR batch -> CFDAL; VIS batch + HFR VIS subset -> SFDAL; combine with alpha."""
    return _finetune_loop(hfr_train, large_vis, guidance, cfg, True, on_step, on_epoch)


def train_ft(hfr_train: Dataset, guidance: EmbedderParams, cfg: TrainConfig, on_step: StepCallback | None = None,
             on_epoch: EpochCallback | None = None) -> TrainResult:
    """Fine-tuning on HFR data alone, i.e. the alpha = 1 case with no VIS batch."""
    return _finetune_loop(hfr_train, None, guidance, replace(cfg, alpha=1.0), False, on_step, on_epoch)
