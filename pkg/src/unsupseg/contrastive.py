"""Negative sampling, the adjacent-frame contrastive (NCE) loss, and training.

For reference frame ``i`` the positive is frame ``i + 1`` and the negatives
are ``K`` frames ``j`` of the same sequence with ``|i - j| > 1``.  The loss
term is the cross-entropy of picking the positive among the ``K + 1``
candidates under a softmax over cosine similarities.  Losses are averaged
over every reference frame in the batch.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numkit
from .corpus import MIN_CROP_SAMPLES, make_crops, stream_rng
from .encoder import Encoder, EncoderConfig, FrameEmbeddings
from .errors import ConfigError, ContractError, DataError, NumericError

log = logging.getLogger(__name__)


@dataclass
class NegativeSample:
    reference_index: int
    negative_indices: np.ndarray


def _candidates(L, i):
    return np.concatenate([np.arange(0, max(i - 1, 0)), np.arange(i + 2, L)])


def sample_negatives(L, i, K, rng):
    """Draw ``K`` negatives for reference frame ``i`` of an ``L``-frame sequence.

    Sampling is uniform over ``{j : |i - j| > 1}``, without replacement when
    there are at least ``K`` candidates and with replacement otherwise.
    Returns ``None`` when there is no candidate at all (the frame then
    contributes no loss term).
    """
    if L < 2:
        raise ContractError(f"need at least 2 frames, got {L}")
    if not 0 <= i <= L - 2:
        raise ContractError(f"reference index {i} outside [0, {L - 2}]")
    if K < 1:
        raise ContractError(f"K must be >= 1, got {K}")
    cand = _candidates(L, i)
    if len(cand) == 0:
        return None
    picked = rng.choice(cand, size=K, replace=len(cand) < K)
    return NegativeSample(i, np.asarray(picked, dtype=np.int64))


def sequence_negatives(L, K, rng):
    """Negatives for every reference frame ``0..L-2`` at once.

    Returns ``(refs, negs)`` with ``negs`` of shape ``(len(refs), K)``;
    frames without candidates are dropped from ``refs``.
    """
    if L < 2:
        raise ContractError(f"need at least 2 frames, got {L}")
    refs = np.arange(L - 1)
    j = np.arange(L)
    allowed = np.abs(refs[:, None] - j[None, :]) > 1
    n_allowed = allowed.sum(axis=1)
    keep = n_allowed > 0
    refs, allowed, n_allowed = refs[keep], allowed[keep], n_allowed[keep]
    if len(refs) == 0:
        return refs, np.zeros((0, K), dtype=np.int64)
    keys = rng.random(allowed.shape)
    keys[~allowed] = np.inf
    negs = np.empty((len(refs), K), dtype=np.int64)
    order = np.argsort(keys, axis=1, kind="stable")[:, :K]
    negs[:, :order.shape[1]] = order
    short = np.flatnonzero(n_allowed < K)
    for r in short:
        negs[r] = rng.choice(np.flatnonzero(allowed[r]), size=K, replace=True)
    return refs, negs.astype(np.int64)


def _nce_terms(z, refs, negs):
    """Summed loss over ``refs`` and its gradient wrt ``z``; float64 internally."""
    z64 = np.asarray(z, dtype=np.float64)
    norms = np.sqrt(np.sum(z64 * z64, axis=1))
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        raise ContractError(f"frame {zero[0]} has a zero-norm embedding; cosine similarity undefined")
    if len(refs) == 0:
        return 0.0, np.zeros_like(z64)
    u = z64 / norms[:, None]
    cand = np.concatenate([(refs + 1)[:, None], negs], axis=1)  # (M, K+1), positive first
    sims = np.einsum("md,mkd->mk", u[refs], u[cand])
    shift = sims.max(axis=1, keepdims=True)
    e = np.exp(sims - shift)
    denom = e.sum(axis=1, keepdims=True)
    loss = float(np.sum(np.log(denom[:, 0]) + shift[:, 0] - sims[:, 0]))

    dsim = e / denom
    dsim[:, 0] -= 1.0
    du = np.zeros_like(u)
    np.add.at(du, refs, np.einsum("mk,mkd->md", dsim, u[cand]))
    np.add.at(du, cand.reshape(-1), (dsim[:, :, None] * u[refs][:, None, :]).reshape(-1, u.shape[1]))
    # back through u = z / |z|
    dz = (du - u * np.sum(du * u, axis=1, keepdims=True)) / norms[:, None]
    return loss, dz


def nce_loss(z, negatives):
    """Mean contrastive loss of one sequence and its gradient.

    Parameters
    ----------
    z : FrameEmbeddings or ndarray, shape (L, N)
    negatives : list of NegativeSample (``None`` entries are skipped), or a
        ``(refs, negs)`` pair as returned by :func:`sequence_negatives`.

    Returns
    -------
    (loss, grad) with ``grad`` shaped like ``z``.
    """
    vectors = getattr(z, "vectors", z)
    if vectors.shape[0] < 2:
        raise ContractError("nce_loss needs at least 2 frames")
    refs, negs = _as_arrays(negatives)
    total, grad = _nce_terms(vectors, refs, negs)
    count = max(len(refs), 1)
    return total / count, grad / count


def _as_arrays(negatives):
    if isinstance(negatives, tuple):
        return negatives
    samples = [n for n in negatives if n is not None]
    if not samples:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 1), dtype=np.int64)
    refs = np.array([n.reference_index for n in samples], dtype=np.int64)
    return refs, np.stack([n.negative_indices for n in samples])


def batch_nce_loss(zs, K, rng):
    """Mean loss over every reference frame of every sequence in ``zs``.

    Returns ``(loss, grads, n_terms)``; gradients are w.r.t. the mean.
    """
    sums, grads, count = 0.0, [], 0
    for z in zs:
        refs, negs = sequence_negatives(z.shape[0], K, rng)
        s, g = _nce_terms(z, refs, negs)
        sums += s
        grads.append(g)
        count += len(refs)
    if count == 0:
        return 0.0, [np.zeros_like(g) for g in grads], 0
    return sums / count, [g / count for g in grads], count


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    epochs: int = 50
    K: int = 5
    crop_seconds: float = 1.0
    patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.crop_seconds * 16000 < MIN_CROP_SAMPLES:
            raise ConfigError(f"crop_seconds must cover at least {MIN_CROP_SAMPLES} samples "
                              f"(two frames)")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 before any epoch
    stopped_early: bool = False

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


class EarlyStopping:
    """Track the best validation loss; ``should_stop`` once more than
    ``patience`` consecutive epochs failed to improve on it."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch, loss):
        """Record ``loss`` for 1-based ``epoch``; True if it is a new best."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self):
        return self.bad_epochs > self.patience


def validation_loss(encoder, utterances, K, seed):
    """Pooled eval-mode loss over full utterances with seed-fixed negatives."""
    rng = stream_rng(seed, "val-negatives")
    total, count = 0.0, 0
    for w in utterances:
        z = encoder.encode(w, mode="eval").vectors
        refs, negs = sequence_negatives(len(z), K, rng)
        s, _ = _nce_terms(z, refs, negs)
        total += s
        count += len(refs)
    return total / count if count else math.nan


def _usable(utterances, what):
    kept = [w for w in utterances if len(w) >= MIN_CROP_SAMPLES]
    skipped = len(utterances) - len(kept)
    if skipped:
        log.info("skipped %d %s utterances shorter than %d samples", skipped, what, MIN_CROP_SAMPLES)
    if not kept:
        raise DataError(f"no usable {what} utterances (all shorter than {MIN_CROP_SAMPLES} samples)")
    return kept


def train(train_set, val_set, config=None, encoder_config=None, log_path=None):
    """Train an encoder with early stopping on validation loss.

    ``train_set`` and ``val_set`` are sequences of ``Waveform``.  Returns the
    encoder restored to its best-validation epoch and the ``TrainHistory``.
    If ``log_path`` is given, one ``epoch\\ttrain_loss\\tval_loss\\tseconds``
    line is appended per epoch.
    """
    config = config or TrainConfig()
    config.validate()
    if not train_set:
        raise DataError("empty training set")
    if not val_set:
        raise DataError("empty validation set")
    train_set = _usable(list(train_set), "training")
    val_set = _usable(list(val_set), "validation")

    encoder = Encoder(encoder_config or EncoderConfig(), seed=config.seed)
    shuffle_rng = stream_rng(config.seed, "shuffle")
    crop_rng = stream_rng(config.seed, "crop")
    neg_rng = stream_rng(config.seed, "negatives")
    history = TrainHistory()
    stopper = EarlyStopping(config.patience)
    best_state = encoder.state_copy()
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            crops = []
            for idx in shuffle_rng.permutation(len(train_set)):
                crops.extend(make_crops(train_set[idx], config.crop_seconds, crop_rng))
            losses = []
            for b in range(0, len(crops), config.batch_size):
                batch = [c.samples for c in crops[b:b + config.batch_size]]
                zs = encoder.forward(batch, training=True)
                loss, grads, n_terms = batch_nce_loss(zs, config.K, neg_rng)
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite training loss at epoch {epoch}, batch {b // config.batch_size}")
                if n_terms == 0:
                    continue
                encoder.backward([g.astype(encoder.dtype) for g in grads])
                numkit.adam_step(encoder.params, config.lr, config.beta1, config.beta2,
                                 config.adam_eps)
                losses.append(loss)
            train_loss = float(np.mean(losses)) if losses else math.nan
            val_loss = validation_loss(encoder, val_set, config.K, config.seed)
            if not math.isfinite(val_loss):
                raise NumericError(f"non-finite validation loss at epoch {epoch}")
            seconds = time.perf_counter() - t0
            history.train_loss.append(train_loss)
            history.val_loss.append(val_loss)
            history.seconds.append(seconds)
            if stopper.update(epoch, val_loss):
                best_state = encoder.state_copy()
            history.best_epoch = stopper.best_epoch
            line = f"{epoch}\t{train_loss:.6f}\t{val_loss:.6f}\t{seconds:.2f}"
            log.info("epoch %s", line.replace("\t", " "))
            if log_file:
                log_file.write(line + "\n")
                log_file.flush()
            if stopper.should_stop:
                history.stopped_early = epoch < config.epochs
                break
    finally:
        if log_file:
            log_file.close()
    encoder.load_state(best_state)
    encoder.metadata = {"epoch": history.best_epoch, "best_val_loss": stopper.best,
                        "seed": config.seed}
    return encoder, history


def save_history(history, path):
    Path(path).write_text(history.to_json())
