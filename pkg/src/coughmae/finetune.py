"""Binary-classification fine-tuning and evaluation.

The encoder output is pooled (CLS token or mean over patch features), a
two-logit linear head plus softmax gives class probabilities, and quality is
measured by rank-based AUROC. Fine-tuning updates the whole network with
separate learning rates for encoder and head; the epoch with the best
validation AUROC is the one whose weights are kept.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_into
from .dsp import DatasetManifest, MelConfig
from .errors import ConfigError, DataError, NumericsError, ShapeError
from .mae import prepare_patches
from .optim import AdamW, warmup_cosine_lr
from .rng import seeded_rng, truncated_normal
from .tensor import Parameter, Tensor
from .vit import (INIT_STD, EncoderParams, FeatureSequence, ModelConfig,
                  embed, encode)

N_CLASSES = 2


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 8
    encoder_lr: float = 1e-4
    head_lr: float = 1e-3
    pooling: str = "cls"
    k_folds: int = 5
    target_frames: int = 98
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    warmup_frac: float = 0.05

    def __post_init__(self):
        if self.pooling not in ("cls", "mean"):
            raise ConfigError(f"pooling must be cls or mean, got {self.pooling!r}")
        if self.epochs <= 0 or self.batch_size <= 0 or self.k_folds < 2:
            raise ConfigError("epochs/batch_size must be positive and k_folds >= 2")


class ClassifierHead:
    """Linear map from pooled features to two logits."""

    def __init__(self, dim: int, seed: int, prefix: str = "head"):
        rng = seeded_rng(seed, f"init.{prefix}.w")
        self.w = Parameter(truncated_normal(rng, (dim, N_CLASSES), INIT_STD), f"{prefix}.w")
        self.b = Parameter(np.zeros(N_CLASSES), f"{prefix}.b")

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


def pool(feats: FeatureSequence, mode: str) -> Tensor:
    """Collapse a feature sequence to one vector per sample.

    'cls' takes the CLS slot; 'mean' averages the patch features (CLS
    excluded). The mean is computed over value-sorted cells so it is exactly
    invariant to patch order.
    """
    if mode == "cls":
        if not feats.has_cls:
            raise ShapeError("cls pooling on a sequence without a CLS token")
        picked = T.gather(feats.features, np.array([0], dtype=np.intp), axis=1)
        return T.reshape(picked, (feats.features.shape[0], feats.features.shape[2]))
    if mode == "mean":
        offset = 1 if feats.has_cls else 0
        idx = np.arange(offset, offset + feats.n_patches, dtype=np.intp)
        patch_feats = T.gather(feats.features, idx, axis=1)
        return _order_invariant_mean(patch_feats)
    raise ConfigError(f"unknown pooling mode {mode!r}")


def _order_invariant_mean(x: Tensor) -> Tensor:
    """Mean over axis 1 with the summation done in sorted order.

    Sorting canonicalizes the reduction order, so permuting the tokens gives
    a bit-identical result; the gradient of a mean is uniform either way.
    """
    b, n, d = x.shape
    data = np.sort(x.data, axis=1)
    out = data.sum(axis=1) / n

    def vjp(g):
        return np.broadcast_to(g[:, None, :] / n, (b, n, d)).copy()

    return T._node(out, "sorted_mean", (x,), (vjp,))


def logits(pooled: Tensor, head: ClassifierHead) -> Tensor:
    return T.linear(pooled, head.w, head.b)


def classify(pooled: Tensor, head: ClassifierHead) -> Tensor:
    """Class probabilities (batch, 2): softmax over the two logits."""
    return T.softmax(logits(pooled, head))


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic; ties credit 0.5.

    Equals the fraction of (positive, negative) pairs the scores order
    correctly, computed from average ranks so ties are shared evenly.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError(f"scores {s.shape} vs labels {y.shape}")
    if not np.isfinite(s).all():
        raise NumericsError("non-finite scores in auroc")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("auroc needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[order[j + 1]] == s[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = ranks[y == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# - Folds -


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple[tuple[int, ...], ...]
    seed: int
    stratified: bool


def kfold_split(labels, k: int, seed: int, stratified: bool = True) -> FoldSplit:
    """Partition sample indices into k folds, deterministically from the seed.

    Stratified splitting deals each class's shuffled members round-robin, so
    per-fold class counts differ from perfect proportion by at most one.
    """
    y = np.asarray(labels)
    n = len(y)
    if k < 2 or k > n:
        raise DataError(f"k={k} incompatible with {n} samples")
    rng = seeded_rng(seed, "kfold")
    folds: list[list[int]] = [[] for _ in range(k)]
    if stratified:
        for cls in sorted(set(y.tolist())):
            members = np.flatnonzero(y == cls)
            if len(members) < k:
                raise DataError(f"class {cls} has {len(members)} members, fewer than k={k}")
            members = members[rng.permutation(len(members))]
            for i, idx in enumerate(members):
                folds[i % k].append(int(idx))
    else:
        order = rng.permutation(n)
        for i, idx in enumerate(order):
            folds[i % k].append(int(idx))
    return FoldSplit(folds=tuple(tuple(sorted(f)) for f in folds), seed=seed,
                     stratified=stratified)


# - Fine-tuning -


@dataclass
class FinetuneResult:
    encoder: EncoderParams
    head: ClassifierHead
    curve: list[float]            # validation AUROC per epoch
    best_epoch: int
    best_auroc: float
    train_loss: list[float] = field(default_factory=list)


def score_samples(patches: np.ndarray, grid_shape, encoder: EncoderParams,
                  head: ClassifierHead, pooling: str, batch_size: int = 32) -> np.ndarray:
    """Positive-class probability for each sample in a stacked patch array."""
    out = []
    for lo in range(0, patches.shape[0], batch_size):
        chunk = patches[lo:lo + batch_size]
        seq = embed(chunk, encoder, with_cls=True, grid_shape=grid_shape)
        feats = encode(seq, encoder)
        probs = classify(pool(feats, pooling), head)
        out.append(probs.data[:, 1])
    return np.concatenate(out)


def _snapshot(params: list[Parameter]) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in params}


def _restore(params: list[Parameter], snap: dict[str, np.ndarray]) -> None:
    for p in params:
        p.data[...] = snap[p.name]


def finetune_arrays(encoder: EncoderParams, patches: np.ndarray, labels: np.ndarray,
                    grid_shape, train_idx, val_idx, cfg: FinetuneConfig, seed: int,
                    select_best: bool = True, log=None) -> FinetuneResult:
    """Fine-tune encoder+head on pre-extracted patches.

    Full fine-tuning: the encoder moves at cfg.encoder_lr and the fresh head
    at cfg.head_lr, both on the warmup/cosine schedule. After every epoch the
    validation AUROC is recorded; the weights from the best epoch are what
    the returned model carries (select_best=False keeps the final epoch
    instead, for fixed-budget retraining).
    """
    train_idx = np.asarray(train_idx, dtype=np.intp)
    val_idx = np.asarray(val_idx, dtype=np.intp)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise DataError("fine-tuning needs non-empty train and validation sets")
    head = ClassifierHead(encoder.cfg.dim, seed)
    enc_params = encoder.parameters()
    head_params = head.parameters()
    opt_enc = AdamW(enc_params, lr=cfg.encoder_lr, betas=cfg.betas,
                    weight_decay=cfg.weight_decay)
    opt_head = AdamW(head_params, lr=cfg.head_lr, betas=cfg.betas,
                     weight_decay=cfg.weight_decay)
    shuffle_rng = seeded_rng(seed, "finetune.shuffle")

    steps_per_epoch = (len(train_idx) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    curve: list[float] = []
    train_loss: list[float] = []
    best_epoch, best_auroc = -1, -np.inf
    best_state: dict[str, np.ndarray] | None = None
    step = 0
    for epoch in range(cfg.epochs):
        order = train_idx[shuffle_rng.permutation(len(train_idx))]
        for b in range(steps_per_epoch):
            chunk = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            seq = embed(patches[chunk], encoder, with_cls=True, grid_shape=grid_shape)
            feats = encode(seq, encoder)
            z = logits(pool(feats, cfg.pooling), head)
            loss = T.cross_entropy_with_logits(z, labels[chunk])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericsError(f"non-finite fine-tune loss at step {step}")
            opt_enc.zero_grad()
            opt_head.zero_grad()
            T.backward(loss)
            lr_scale = warmup_cosine_lr(step, total_steps, 1.0, cfg.warmup_frac)
            opt_enc.step(lr=cfg.encoder_lr * lr_scale)
            opt_head.step(lr=cfg.head_lr * lr_scale)
            train_loss.append(value)
            step += 1
        val_scores = score_samples(patches[val_idx], grid_shape, encoder, head, cfg.pooling)
        epoch_auroc = auroc(val_scores, labels[val_idx])
        curve.append(epoch_auroc)
        if epoch_auroc > best_auroc:
            best_epoch, best_auroc = epoch, epoch_auroc
            best_state = _snapshot(enc_params + head_params)
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} val_auroc {epoch_auroc:.4f}")
    if select_best:
        _restore(enc_params + head_params, best_state)
    return FinetuneResult(encoder=encoder, head=head, curve=curve,
                          best_epoch=best_epoch, best_auroc=best_auroc,
                          train_loss=train_loss)


def encoder_from_checkpoint(ckpt: Checkpoint, model_cfg: ModelConfig) -> EncoderParams:
    """Rebuild an encoder from checkpoint arrays; shape mismatches are loud."""
    encoder = EncoderParams(model_cfg, seed=0)
    load_into(ckpt.arrays, encoder.parameters())
    return encoder


def classifier_from_checkpoint(ckpt: Checkpoint, model_cfg: ModelConfig):
    """Rebuild encoder + head + pooling mode + stats from a fine-tuned checkpoint."""
    if ckpt.config.get("kind") != "finetuned":
        raise DataError("checkpoint has no classifier head; fine-tune first")
    encoder = EncoderParams(model_cfg, seed=0)
    head = ClassifierHead(model_cfg.dim, seed=0)
    load_into(ckpt.arrays, encoder.parameters() + head.parameters())
    pooling = ckpt.config.get("finetune", {}).get("pooling", "cls")
    stats = None
    if ckpt.config.get("normalized") and ckpt.stats is not None:
        from .dsp import DatasetStats
        stats = DatasetStats(mean=ckpt.stats["mean"], std=ckpt.stats["std"])
    return encoder, head, pooling, stats


def build_scorer(encoder: EncoderParams, head: ClassifierHead, mel_cfg: MelConfig,
                 pooling: str, stats=None):
    """Window scorer for segmentation: Waveform -> positive-class probability.

    The window is featurized exactly like training data (log-mel at whatever
    length the window has; normalized only when the model was trained on
    normalized input) and run through encoder, pooling and head.
    """
    from .dsp import log_mel_spectrogram, normalize
    from .vit import patchify

    def scorer(window) -> float:
        spec = log_mel_spectrogram(window, mel_cfg)
        if stats is not None:
            spec = normalize(spec, stats.mean, stats.std)
        ps = patchify(spec, encoder.cfg.patch_size, encoder.cfg.patch_stride)
        seq = embed(ps, encoder)
        feats = encode(seq, encoder)
        return float(classify(pool(feats, pooling), head).data[0, 1])

    return scorer


def finetune(init, manifest: DatasetManifest, mel_cfg: MelConfig,
             model_cfg: ModelConfig, cfg: FinetuneConfig, seed: int,
             train_idx=None, val_idx=None, log=None) -> FinetuneResult:
    """Fine-tune from a pretraining Checkpoint or from scratch (init=None).

    From a checkpoint, spectrograms are normalized with the checkpoint's
    stored statistics; from scratch they are left raw. Without explicit
    index lists, entries tagged split=train/val are used.
    """
    stats = None
    if init is not None:
        if init.stats is None or "mean" not in init.stats:
            raise DataError("checkpoint has no normalization statistics; cannot fine-tune from it")
        from .dsp import DatasetStats
        stats = DatasetStats(mean=init.stats["mean"], std=init.stats["std"])
    patches, grid_shape, _ = prepare_patches(manifest, mel_cfg, cfg.target_frames,
                                             model_cfg, stats=stats)
    labels = manifest.labels()
    if train_idx is None or val_idx is None:
        split_of = [e.split for e in manifest.entries]
        train_idx = [i for i, s in enumerate(split_of) if s == "train"]
        val_idx = [i for i, s in enumerate(split_of) if s in ("val", "test")]
        if not train_idx or not val_idx:
            raise DataError("manifest lacks train/val split tags and no indices were given")
    if init is not None:
        encoder = encoder_from_checkpoint(init, model_cfg)
    else:
        encoder = EncoderParams(model_cfg, seed)
    return finetune_arrays(encoder, patches, labels, grid_shape, train_idx, val_idx,
                           cfg, seed, log=log)


# - Cross-validation -


@dataclass
class EvalReport:
    """Per-fold fine-tuning outcomes plus the raw epoch curves."""

    pooling: str
    fold_auroc: list[float]
    best_epochs: list[int]
    curves: list[list[float]]
    mean_auroc: float
    init_kind: str

    def to_json(self) -> str:
        return json.dumps({
            "pooling": self.pooling,
            "init": self.init_kind,
            "fold_auroc": self.fold_auroc,
            "best_epochs": self.best_epochs,
            "mean_auroc": self.mean_auroc,
            "curves": self.curves,
        }, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        lines = ["fold,best_epoch,auroc,pooling,init"]
        for i, (a, e) in enumerate(zip(self.fold_auroc, self.best_epochs)):
            lines.append(f"{i},{e},{a:.10g},{self.pooling},{self.init_kind}")
        lines.append(f"mean,,{self.mean_auroc:.10g},{self.pooling},{self.init_kind}")
        return "\n".join(lines) + "\n"


def cross_validate(init, manifest: DatasetManifest, mel_cfg: MelConfig,
                   model_cfg: ModelConfig, cfg: FinetuneConfig, seed: int,
                   log=None) -> EvalReport:
    """Stratified k-fold fine-tuning; each fold starts from the same init.

    init is a pretraining Checkpoint or None for scratch. Fold f trains on
    the other folds and validates on fold f.
    """
    stats = None
    if init is not None:
        if init.stats is None:
            raise DataError("checkpoint has no normalization statistics")
        from .dsp import DatasetStats
        stats = DatasetStats(mean=init.stats["mean"], std=init.stats["std"])
    patches, grid_shape, _ = prepare_patches(manifest, mel_cfg, cfg.target_frames,
                                             model_cfg, stats=stats)
    labels = manifest.labels()
    split = kfold_split(labels, cfg.k_folds, seed)
    fold_auroc, best_epochs, curves = [], [], []
    for f, fold in enumerate(split.folds):
        val_idx = np.array(fold, dtype=np.intp)
        train_idx = np.array(sorted(set(range(len(labels))) - set(fold)), dtype=np.intp)
        if init is not None:
            encoder = encoder_from_checkpoint(init, model_cfg)
        else:
            encoder = EncoderParams(model_cfg, seed=seed * 1000 + f)
        result = finetune_arrays(encoder, patches, labels, grid_shape, train_idx,
                                 val_idx, cfg, seed=seed * 1000 + f,
                                 log=(lambda m, f=f: log(f"fold {f}: {m}")) if log else None)
        fold_auroc.append(result.best_auroc)
        best_epochs.append(result.best_epoch)
        curves.append(result.curve)
    return EvalReport(pooling=cfg.pooling, fold_auroc=fold_auroc,
                      best_epochs=best_epochs, curves=curves,
                      mean_auroc=float(np.mean(fold_auroc)),
                      init_kind="pretrained" if init is not None else "scratch")
