"""Training, embedding extraction, trial scoring and checkpoint I/O."""
from __future__ import annotations

import dataclasses
import itertools
import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import formats
from .backbone import BackboneConfig, ResNetBackbone
from .features import N_MELS, Utterance, crop_or_extend
from .losses import (AnnealSchedule, ClassifierHead, L2Constraint, RingState,
                     asoftmax_loss, init_ring_R, l2_constrain, ring_loss, softmax_loss,
                     total_loss)
from .metrics import compute_eer, compute_min_dcf, cosine_score
from .numerics import Module, NonFiniteError, ShapeError
from .pooling import PyramidSpec, build_head

log = logging.getLogger(__name__)

POOLINGS = ("tap", "spp", "lde", "spe")
LOSSES = ("sm", "asm")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr0: float = 0.1
    lr_step: int | None = None  # epochs per 10x decay; default: a third of the run
    epochs: int = 60
    crop_min: int = 300
    crop_max: int = 500
    pooling: str = "spe"
    pyramid: str = "1d"
    loss: str = "sm"
    ring: bool = True
    ring_lambda: float = 1.0
    l2cons: str = "none"  # none | fixed:<alpha> | learned
    margin: int = 4
    anneal_beta0: float = 1000.0
    anneal_beta_min: float = 5.0
    anneal_gamma: float = 0.1
    backbone_blocks: tuple[int, ...] = (3, 4, 6, 3)
    base_channels: int = 32
    codewords: int = 64
    reduced_channels: int = 64
    embedding_dim: int = 256
    stop_accuracy: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got '{self.pooling}'")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got '{self.loss}'")
        if self.pyramid not in ("1d", "2d"):
            raise ConfigError("pyramid must be 1d or 2d")
        for name in ("batch_size", "epochs", "crop_min", "crop_max", "margin",
                     "base_channels", "codewords", "reduced_channels", "embedding_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.crop_min > self.crop_max:
            raise ConfigError("crop_min must not exceed crop_max")
        if self.lr0 < 0 or self.momentum < 0 or self.weight_decay < 0 or self.ring_lambda < 0:
            raise ConfigError("lr0, momentum, weight_decay and ring_lambda must be >= 0")
        if self.lr_step is not None and self.lr_step < 1:
            raise ConfigError("lr_step must be positive")
        self.backbone_blocks = tuple(int(b) for b in self.backbone_blocks)
        self.l2cons_mode()
        if self.ring and self.l2cons != "none":
            raise ConfigError("ring loss and L2-constraint are alternatives; enable one")

    def l2cons_mode(self) -> tuple[str, float | None]:
        if self.l2cons in ("none", "learned"):
            return self.l2cons, None
        kind, _, val = self.l2cons.partition(":")
        try:
            alpha = float(val)
        except ValueError:
            alpha = -1.0
        if kind != "fixed" or alpha <= 0:
            raise ConfigError(f"l2cons must be none, learned or fixed:<alpha>, got '{self.l2cons}'")
        return "fixed", alpha

    @property
    def step(self) -> int:
        return self.lr_step or max(1, self.epochs // 3)

    @property
    def pyramid_spec(self) -> PyramidSpec:
        return PyramidSpec.two_d() if self.pyramid == "2d" else PyramidSpec.one_d()

    def to_pairs(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = str(v).lower()
            elif v is None:
                v = "none"
            elif isinstance(v, float):
                v = repr(v)
            out[f.name] = str(v)
        return out

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "TrainConfig":
        defaults = cls()
        kwargs = {}
        for key, raw in pairs.items():
            if not hasattr(defaults, key):
                raise ConfigError(f"unknown key '{key}'")
            kwargs[key] = _parse_value(key, raw, getattr(defaults, key))
        return cls(**kwargs)


_OPTIONAL = {"lr_step": int, "stop_accuracy": float}


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key in _OPTIONAL:
            return None if raw.lower() == "none" else _OPTIONAL[key](raw)
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(","))
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"bad value for '{key}': '{raw}'") from None


def lr_schedule(epoch: int, lr0: float = 0.1, step: int = 20) -> float:
    """Step decay: lr0 * 0.1 ** floor(epoch / step)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * 0.1 ** (epoch // step)


# ---------------------------------------------------------------------------
# model


class SpeakerModel(Module):
    """Backbone, pooling head, optional length normalization and speaker classifier."""

    def __init__(self, cfg: TrainConfig, n_speakers: int):
        super().__init__()
        rng = np.random.default_rng([cfg.seed, 0])
        self.cfg = cfg
        self.backbone = ResNetBackbone(BackboneConfig(list(cfg.backbone_blocks), cfg.base_channels), rng)
        self.backbone.conv1.input_grad = False  # the input spectrogram needs no gradient
        self.head = build_head(cfg.pooling, self.backbone.out_channels, cfg.pyramid_spec,
                               cfg.embedding_dim, cfg.reduced_channels, cfg.codewords, rng)
        self.classifier = ClassifierHead(n_speakers, self.head.out_dim, rng,
                                         unit_rows=cfg.loss == "asm")
        self.ring = RingState(1.0, cfg.ring_lambda) if cfg.ring else None
        mode, alpha = cfg.l2cons_mode()
        self.l2 = None if mode == "none" else L2Constraint(alpha or 1.0, learned=mode == "learned")

    @property
    def embedding_dim(self) -> int:
        return self.head.out_dim

    @property
    def min_frames(self) -> int:
        """Shortest input whose feature map (width ceil(T/8)) fills every pyramid bin."""
        if self.cfg.pooling in ("spp", "spe"):
            cols = max(c for _, c in self.cfg.pyramid_spec.levels)
            return 8 * (cols - 1) + 1
        return 8

    @property
    def length_normalized(self) -> bool:
        return self.ring is not None or self.l2 is not None

    def embed(self, x: np.ndarray) -> np.ndarray:
        return self.head.forward(self.backbone.forward(x))

    def backward_embed(self, d_emb: np.ndarray) -> np.ndarray:
        return self.backbone.backward(self.head.backward(d_emb))

    def trainable(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        skip = set()
        if self.cfg.loss == "asm":
            skip.add("classifier.bias")
        if self.l2 is not None and not self.l2.learned:
            skip.add("l2.alpha")
        return [t for t in self.named_parameters() if t[0] not in skip]


class SGD:
    """Classical momentum with L2 weight decay added to the gradient."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 1e-4,
                 no_decay: Sequence[str] = ()):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.velocity = {name: np.zeros_like(p) for name, p, _ in self.params}

    def step(self, lr: float) -> None:
        for name, p, g in self.params:
            d = g if name in self.no_decay else g + self.weight_decay * p
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * d
            p += v


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    accuracy: float
    R: float | None
    seconds: float


@dataclass
class TrainResult:
    model: SpeakerModel
    history: list[EpochStats]
    speakers: list[str]
    iterations: int

    @property
    def final_loss(self) -> float:
        return self.history[-1].loss


def speaker_index(utts: Sequence[Utterance]) -> list[str]:
    return sorted({u.speaker for u in utts})


def make_batch(feats: Sequence[np.ndarray], T: int, rng: np.random.Generator) -> np.ndarray:
    """Crop or extend each utterance to T frames and stack as (B, 64, T, 1)."""
    return np.stack([crop_or_extend(f, T, rng) for f in feats])[..., None]


def _first_nonfinite(named) -> str | None:
    for name, arr in named:
        if not np.all(np.isfinite(arr)):
            return name
    return None


def train_step(model: SpeakerModel, x: np.ndarray, labels: np.ndarray, optimizer: SGD,
               lr: float, iteration: int, anneal: AnnealSchedule) -> tuple[float, int]:
    """One SGD step; returns (loss, number of correct predictions)."""
    cfg = model.cfg
    model.zero_grad()
    f = model.embed(x)
    if (bad := _first_nonfinite([("embedding", f)])) is not None:
        raise NonFiniteError(bad)

    g, l2_back = f, None
    if model.l2 is not None:
        if model.l2.learned and not model.l2.initialized:
            model.l2.alpha = init_ring_R(f)
            model.l2.initialized = True
        g, l2_back = l2_constrain(f, model.l2.alpha)

    head = model.classifier
    if cfg.loss == "asm":
        primary = asoftmax_loss(g, labels, head, cfg.margin, anneal.beta(iteration))
    else:
        primary = softmax_loss(g, labels, head)

    ring = None
    if model.ring is not None:
        if not model.ring.initialized:
            model.ring.R = init_ring_R(f)
            model.ring.initialized = True
        ring = ring_loss(f, model.ring.R)
    objective = total_loss(primary, ring, model.ring.lam if ring else 0.0)
    if not np.isfinite(objective.value):
        raise NonFiniteError("loss")

    d_f = objective.d_embeddings
    if l2_back is not None:
        d_f, d_alpha = l2_back(d_f)
        model.l2.grads["alpha"] += d_alpha
    head.accumulate(primary.d_params)
    if ring is not None:
        model.ring.grads["R"] += objective.d_params["R"]
    model.backward_embed(d_f)

    if (bad := _first_nonfinite((f"grad:{n}", gr) for n, _, gr in optimizer.params)) is not None:
        raise NonFiniteError(bad)
    optimizer.step(lr)
    if head.unit_rows:
        head.renormalize()
    if model.ring is not None and model.ring.R <= 0:
        model.ring.R = 1e-6

    W = head.params["weight"]
    if cfg.loss == "asm":
        scores = g @ (W / np.linalg.norm(W, axis=1, keepdims=True)).T
    else:
        scores = g @ W.T + head.params["bias"]
    return objective.value, int((scores.argmax(1) == labels).sum())


def train(utts: Sequence[Utterance], cfg: TrainConfig,
          on_epoch_end: Callable[[EpochStats, SpeakerModel], None] | None = None,
          model: SpeakerModel | None = None) -> TrainResult:
    """SGD training on a labeled feature set; deterministic for a fixed seed.

    One crop length T is drawn per batch so the batch is rectangular. Stops
    early once an epoch's training accuracy reaches ``cfg.stop_accuracy``.
    """
    if not utts:
        raise ValueError("empty training set")
    rows = {u.features.shape[0] for u in utts}
    if rows != {N_MELS}:
        raise ShapeError(f"features must have {N_MELS} rows, found {sorted(rows)}")
    speakers = speaker_index(utts)
    lookup = {s: i for i, s in enumerate(speakers)}
    labels = np.array([lookup[u.speaker] for u in utts])
    model = model or SpeakerModel(cfg, len(speakers))
    opt = SGD(model.trainable(), cfg.momentum, cfg.weight_decay, ("ring.R", "l2.alpha"))
    anneal = AnnealSchedule(cfg.anneal_beta0, cfg.anneal_beta_min, cfg.anneal_gamma)
    rng = np.random.default_rng([cfg.seed, 1])

    history: list[EpochStats] = []
    it = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, cfg.lr0, cfg.step)
        model.train()
        order = rng.permutation(len(utts))
        total, correct, seen = 0.0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            T = int(rng.integers(cfg.crop_min, cfg.crop_max + 1))
            x = make_batch([utts[i].features for i in idx], T, rng)
            loss, ok = train_step(model, x, labels[idx], opt, lr, it, anneal)
            total += loss * len(idx)
            correct += ok
            seen += len(idx)
            it += 1
        stats = EpochStats(epoch, lr, total / seen, correct / seen,
                           model.ring.R if model.ring is not None else None,
                           time.perf_counter() - t0)
        history.append(stats)
        log.info("epoch %d lr %.4g loss %.6f acc %.4f", epoch, lr, stats.loss, stats.accuracy)
        if on_epoch_end is not None:
            on_epoch_end(stats, model)
        if cfg.stop_accuracy is not None and stats.accuracy >= cfg.stop_accuracy:
            break
    return TrainResult(model, history, speakers, it)


# ---------------------------------------------------------------------------
# inference and scoring


def embed_raw(model: SpeakerModel, features: np.ndarray) -> np.ndarray:
    """Pooling-layer output for a full-length 64 x T utterance, inference-mode BN."""
    if features.ndim != 2 or features.shape[0] != N_MELS:
        raise ShapeError(f"expected a ({N_MELS}, T) feature matrix, got {features.shape}")
    if features.shape[1] < 8:
        raise ShapeError(f"utterance too short: {features.shape[1]} frames, need >= 8")
    min_T = model.min_frames
    if features.shape[1] < min_T:
        features = crop_or_extend(features, min_T)  # wrap-around tiling
    model.eval()
    return model.embed(np.asarray(features, dtype=np.float64)[None, :, :, None])[0]


def extract_embedding(model: SpeakerModel, features: np.ndarray) -> np.ndarray:
    """Embedding ready for cosine scoring.

    Ring-loss models use the raw embedding, L2-constrained models the scaled
    one; models without length normalization are divided by their norm.
    """
    f = embed_raw(model, features)
    if model.ring is not None:
        return f
    if model.l2 is not None:
        return l2_constrain(f, model.l2.alpha)[0]
    return f / np.linalg.norm(f)


def make_trials(utts: Sequence[Utterance]) -> list[tuple[bool, str, str]]:
    """Every unordered pair of distinct utterances as a trial."""
    return [(a.speaker == b.speaker, a.utt_id, b.utt_id)
            for a, b in itertools.combinations(utts, 2)]


def score_trials(embeddings: dict[str, np.ndarray], trials) -> list[tuple[str, str, float]]:
    missing = sorted({i for _, e, t in trials for i in (e, t) if i not in embeddings})
    if missing:
        raise KeyError(f"ids missing from embeddings: {', '.join(missing)}")
    return [(e, t, cosine_score(embeddings[e], embeddings[t])) for _, e, t in trials]


def evaluate_scores(scores, labels, p_targets=(0.01, 0.001)) -> dict[str, float]:
    eer, thr = compute_eer(scores, labels)
    out = {"eer": eer, "eer_threshold": thr}
    for p in p_targets:
        dcf, dthr = compute_min_dcf(scores, labels, p)
        out[f"mindcf@{p:g}"] = dcf
        out[f"mindcf_threshold@{p:g}"] = dthr
    return out


# ---------------------------------------------------------------------------
# checkpoints


def architecture_string(cfg: TrainConfig) -> str:
    blocks = ",".join(map(str, cfg.backbone_blocks))
    return f"resnet[{blocks}]x{cfg.base_channels}"


def save_checkpoint(path, model: SpeakerModel, epoch: int, speakers: Sequence[str],
                    extra: dict[str, str] | None = None) -> None:
    cfg = model.cfg
    manifest = {
        "architecture": architecture_string(cfg),
        "pooling": cfg.pooling,
        "loss": cfg.loss,
        "lambda": repr(cfg.ring_lambda if cfg.ring else 0.0),
        "R": repr(model.ring.R) if model.ring is not None else "none",
        "alpha": repr(model.l2.alpha) if model.l2 is not None else "none",
        "ring_initialized": str(bool(model.ring and model.ring.initialized)).lower(),
        "alpha_initialized": str(bool(model.l2 and model.l2.initialized)).lower(),
        "epoch": str(epoch),
        "seed": str(cfg.seed),
        "n_speakers": str(len(speakers)),
        "embedding_dim": str(model.embedding_dim),
        "input_rows": str(N_MELS),
    }
    manifest.update({f"config.{k}": v for k, v in cfg.to_pairs().items()})
    for k, v in (extra or {}).items():
        manifest[f"run.{k}"] = v
    formats.write_checkpoint(path, manifest, model.state_dict())


def load_checkpoint(path) -> tuple[SpeakerModel, dict[str, str]]:
    manifest, tensors = formats.read_checkpoint(path)
    pairs = {k[len("config."):]: v for k, v in manifest.items() if k.startswith("config.")}
    cfg = TrainConfig.from_pairs(pairs)
    model = SpeakerModel(cfg, int(manifest["n_speakers"]))
    model.load_state_dict(tensors)
    if model.ring is not None:
        model.ring.initialized = manifest.get("ring_initialized") == "true"
    if model.l2 is not None:
        model.l2.initialized = manifest.get("alpha_initialized") == "true"
    return model, manifest
