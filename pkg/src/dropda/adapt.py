"""Adversarial training with an MC-dropout discriminator.

Variants:

* ``source_only``: classifier loss only, the discriminator is never used.
* ``grl``: one deterministic discriminator (K = 1, no dropout).
* ``d3a``: ``k_fixed`` sampled discriminators every step.
* ``cd3a``: the number of sampled discriminators grows linearly from
  ``k_min`` to ``k_max`` over training.

All parameter groups are updated together from one backward pass; the
feature extractor sees the domain gradient through a reversal of scale
lambda.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from dropda import diffcore as dc
from dropda.data import Dataset, DomainBatch, batch_iter, batches_per_epoch
from dropda.errors import ValidationError
from dropda.network import (McOutput, NetworkParams, classify, discriminate_mc,
                            extract_features, predict)

VARIANTS = ("source_only", "grl", "d3a", "cd3a")


@dataclass(frozen=True)
class CurriculumSchedule:
    k_min: int
    k_max: int
    total_steps: int

    def __post_init__(self):
        if self.k_min < 1 or self.k_max < self.k_min:
            raise ValidationError(f"need 1 <= k_min <= k_max, got {self.k_min}, {self.k_max}")
        if self.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")


def curriculum_k(step: int, sched: CurriculumSchedule) -> int:
    if step < 0:
        raise ValidationError(f"step must be non-negative, got {step}")
    step = min(step, sched.total_steps)
    # integer arithmetic so the endpoints are exact
    k = sched.k_min + (step * (sched.k_max - sched.k_min)) // sched.total_steps
    return min(max(k, sched.k_min), sched.k_max)


@dataclass(frozen=True)
class LambdaSchedule:
    gamma: float = 10.0
    lambda_max: float = 1.0


def lambda_at(p: float, sched: LambdaSchedule) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"progress must be in [0, 1], got {p}")
    return sched.lambda_max * (2.0 / (1.0 + math.exp(-sched.gamma * p)) - 1.0)


@dataclass
class TrainConfig:
    variant: str = "cd3a"
    k_fixed: int = 2
    k_min: int = 1
    k_max: int | None = None  # None: number of classes
    dropout: float = 0.5
    lr: float = 0.001
    momentum: float = 0.9
    disc_lr_mult: float = 1.0
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    gamma: float = 10.0
    lambda_max: float = 1.0
    eval_period: int = 1  # epochs; 0 disables accuracy logging
    extractor_hidden: tuple[int, ...] = (64, 64)
    discriminator_hidden: tuple[int, ...] = (64,)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.lr <= 0 or self.disc_lr_mult <= 0:
            raise ValidationError("lr and disc_lr_mult must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must be in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")
        if self.eval_period < 0:
            raise ValidationError("eval_period must be >= 0")
        if self.variant == "d3a" and self.k_fixed < 1:
            raise ValidationError("d3a needs k_fixed >= 1")
        if self.variant == "cd3a":
            if self.k_min < 1:
                raise ValidationError("cd3a needs k_min >= 1")
            if self.k_max is not None and self.k_max < self.k_min:
                raise ValidationError(f"cd3a needs k_min <= k_max, got {self.k_min} > {self.k_max}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("extractor_hidden", "discriminator_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extractor_hidden"] = list(self.extractor_hidden)
        d["discriminator_hidden"] = list(self.discriminator_hidden)
        return d

    @property
    def effective_dropout(self) -> float:
        return 0.0 if self.variant in ("grl", "source_only") else self.dropout


HISTORY_HEADER = ["step", "epoch", "loss_cls", "loss_dom", "k", "lambda", "acc_src", "acc_tgt"]


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss_cls: float
    loss_dom: float  # NaN when there is no discriminator
    k: int
    lam: float
    acc_src: float | None = None
    acc_tgt: float | None = None


@dataclass
class RunHistory:
    records: list[StepRecord] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValidationError("history steps must strictly increase")
        self.records.append(rec)

    def last_accuracy(self, which="acc_tgt"):
        for r in reversed(self.records):
            v = getattr(r, which)
            if v is not None:
                return v
        return None

    def to_csv(self) -> str:
        def fmt(v):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                return ""
            return repr(float(v)) if isinstance(v, float) else str(v)

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in self.records:
            w.writerow([r.step, r.epoch, fmt(r.loss_cls), fmt(r.loss_dom), r.k, fmt(r.lam),
                        fmt(r.acc_src), fmt(r.acc_tgt)])
        return buf.getvalue()


@dataclass
class JointCache:
    n_source: int
    n_rows: int
    cls_grad: np.ndarray  # dL_c / d classifier logits
    mc: McOutput | None
    dom_grads: list[np.ndarray]  # dL_d_mean / d logits of each sampled discriminator


def joint_loss(batch: DomainBatch, params: NetworkParams, k: int | None, rng):
    """Forward pass of the joint objective.

    Returns ``(L_c, L_d_mean, cache)``. ``L_c`` is the mean cross-entropy
    over source rows; ``L_d_mean`` is the BCE over all source and target rows,
    averaged over the ``k`` sampled discriminators. ``k=None`` skips the
    discriminator (``L_d_mean`` is NaN).
    """
    if batch.n_source == 0:
        raise ValidationError("joint loss needs at least one source row")
    h = extract_features(batch.inputs, params.extractor)
    logits = classify(h[: batch.n_source], params.classifier)
    loss_c, g_cls = dc.softmax_cross_entropy(logits, batch.source_y)
    if k is None:
        return loss_c, math.nan, JointCache(batch.n_source, len(h), g_cls, None, [])
    mc = discriminate_mc(h, params.discriminator, k, rng)
    d = batch.domain_labels
    losses, grads = [], []
    for j in range(k):
        l_j, g_j = dc.sigmoid_bce(mc.logits[j], d)
        losses.append(l_j)
        grads.append(g_j / k)
    return loss_c, float(np.mean(losses)), JointCache(batch.n_source, len(h), g_cls, mc, grads)


def joint_gradients(cache: JointCache, params: NetworkParams, lam: float, reverse: bool = True):
    """Backward pass for the cache of the last ``joint_loss`` call.

    Returns a dict with ``extractor``, ``classifier``, ``discriminator``
    gradient lists (ordered like each group's ``params()``) and
    ``features_domain``, the unreversed domain gradient at the features.

    The classifier gets dL_c only and the discriminator dL_d_mean only.
    The extractor gets dL_c plus the domain gradient scaled by -lambda
    (``reverse=True``) or by +lambda (``reverse=False``, used for checking
    against finite differences of L_c + lambda * L_d_mean).
    """
    ns = cache.n_source
    g_cls_h, cls_grads = params.classifier.backward(cache.cls_grad)
    g_h = np.zeros((cache.n_rows, g_cls_h.shape[1]))
    g_h[:ns] += g_cls_h
    disc = params.discriminator
    disc_grads = [np.zeros_like(p) for p in disc.params()]
    g_dom = np.zeros_like(g_h)
    if cache.mc is not None:
        for g_j, c_j in zip(cache.dom_grads, cache.mc.caches):
            gh_j, gd_j = disc.backward(g_j, c_j)
            g_dom += gh_j
            for acc, g in zip(disc_grads, gd_j):
                acc += g
        g_h += dc.grad_reverse(g_dom, lam) if reverse else lam * g_dom
    _, ext_grads = params.extractor.backward(g_h)
    return {"extractor": ext_grads, "classifier": cls_grads,
            "discriminator": disc_grads, "features_domain": g_dom}


@dataclass
class Optimizers:
    extractor: dc.SgdState
    classifier: dc.SgdState
    discriminator: dc.SgdState

    @classmethod
    def make(cls, lr, momentum, disc_lr_mult=1.0):
        return cls(dc.SgdState(lr, momentum), dc.SgdState(lr, momentum),
                   dc.SgdState(lr * disc_lr_mult, momentum))


def train_step(batch: DomainBatch, params: NetworkParams, k: int | None, lam: float,
               opt: Optimizers, rng) -> tuple[float, float]:
    """One simultaneous update of all three groups; returns ``(L_c, L_d_mean)``."""
    loss_c, loss_d, cache = joint_loss(batch, params, k, rng)
    grads = joint_gradients(cache, params, lam)
    dc.sgd_step(params.extractor.params(), grads["extractor"], opt.extractor)
    dc.sgd_step(params.classifier.params(), grads["classifier"], opt.classifier)
    if k is not None:
        dc.sgd_step(params.discriminator.params(), grads["discriminator"], opt.discriminator)
    return loss_c, loss_d


def accuracy_of(params: NetworkParams, ds: Dataset) -> float:
    return float(np.mean(predict(params, ds.features) == ds.labels))


def k_for_step(cfg: TrainConfig, step: int, total_steps: int, n_classes: int) -> int | None:
    if cfg.variant == "source_only":
        return None
    if cfg.variant == "grl":
        return 1
    if cfg.variant == "d3a":
        return cfg.k_fixed
    k_max = n_classes if cfg.k_max is None else cfg.k_max
    k_max = max(k_max, cfg.k_min)
    # the last step index is total_steps - 1, so the schedule ends there
    sched = CurriculumSchedule(cfg.k_min, k_max, max(total_steps - 1, 1))
    return curriculum_k(step, sched)


def rng_streams(seed: int):
    """Independent generators for initialization, batching and dropout masks."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(3)]


def train(source: Dataset, target: Dataset, cfg: TrainConfig, target_eval: Dataset | None = None,
          params: NetworkParams | None = None):
    """Train one run; returns ``(params, RunHistory)``.

    ``target`` must be unlabeled training data. ``target_eval`` (labeled) is
    only used for logging target accuracy.
    """
    cfg.validate()
    if len(source) == 0 or len(target) == 0:
        raise ValidationError("source and target datasets must be non-empty")
    if source.labels is None:
        raise ValidationError("source dataset needs labels")
    if target.labels is not None:
        raise ValidationError("target training data must be unlabeled")
    if source.dim != target.dim:
        raise ValidationError(f"source has {source.dim} features, target {target.dim}")
    if cfg.batch_size > min(len(source), len(target)):
        raise ValidationError(f"batch_size {cfg.batch_size} exceeds dataset size")
    init_rng, batch_rng, mask_rng = rng_streams(cfg.seed)
    if params is None:
        params = NetworkParams.build(source.dim, source.n_classes, init_rng,
                                     extractor_hidden=cfg.extractor_hidden,
                                     discriminator_hidden=cfg.discriminator_hidden,
                                     dropout=cfg.effective_dropout)
    opt = Optimizers.make(cfg.lr, cfg.momentum, cfg.disc_lr_mult)
    lam_sched = LambdaSchedule(cfg.gamma, cfg.lambda_max)
    per_epoch = batches_per_epoch(len(source), len(target), cfg.batch_size)
    total = per_epoch * cfg.epochs
    history = RunHistory()
    step = 0
    for epoch in range(cfg.epochs):
        for batch in batch_iter(source, target, cfg.batch_size, batch_rng):
            k = k_for_step(cfg, step, total, source.n_classes)
            lam = 0.0 if k is None else lambda_at(step / total, lam_sched)
            loss_c, loss_d = train_step(batch, params, k, lam, opt, mask_rng)
            history.append(StepRecord(step, epoch, loss_c, loss_d, 0 if k is None else k, lam))
            step += 1
        if cfg.eval_period and (epoch + 1) % cfg.eval_period == 0:
            rec = history.records[-1]
            rec.acc_src = accuracy_of(params, source)
            if target_eval is not None:
                rec.acc_tgt = accuracy_of(params, target_eval)
    return params, history


@dataclass
class GradientStats:
    k: int
    per_sample: np.ndarray  # (K, rows, feature_dim) reversed feature gradients
    mean_gradient: np.ndarray
    mean_norm: float  # Frobenius norm of the mean over samples
    variance: float  # unbiased across-sample variance, averaged over components


def gradient_distribution(batch: DomainBatch, params: NetworkParams, k: int, lam: float, rng) -> GradientStats:
    """Reversed domain gradients at the features, one per sampled discriminator.

    Nothing is updated. Each sample's gradient is that of its own BCE
    (not divided by K).
    """
    if k < 2:
        raise ValidationError("gradient distribution needs at least 2 MC samples")
    h = extract_features(batch.inputs, params.extractor)
    mc = discriminate_mc(h, params.discriminator, k, rng)
    d = batch.domain_labels
    samples = []
    for j in range(k):
        _, g = dc.sigmoid_bce(mc.logits[j], d)
        gh, _ = params.discriminator.backward(g, mc.caches[j])
        samples.append(dc.grad_reverse(gh, lam))
    per_sample = np.stack(samples)
    mean = per_sample.mean(axis=0)
    var = float((per_sample - per_sample[0]).var(axis=0, ddof=1).mean())
    return GradientStats(k, per_sample, mean, float(np.linalg.norm(mean)), var)
