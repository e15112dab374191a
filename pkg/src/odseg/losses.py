"""Training losses for all head variants and the per-head total compositions.

Label conventions: y holds per-pixel semantic labels where values below the
class count are inlier classes and values at or above it are non-inlier
(exactly the class count for outliers in the C+1 relabeling); z flags each
pixel as outlier (0), inlier (1) or ignore (2).

Every loss is a sum over its contributing pixels divided by their count, so
the loss weights stay comparable across crop sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# keeps the log of interpolated probabilities finite when a confidence of
# exactly 1 meets a vanishing class probability
_PROB_FLOOR = 1e-12


@dataclass
class LabelPair:
    """Semantic labels y and inlier/outlier/ignore flags z, both (N,H,W)."""

    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y)
        self.z = np.asarray(self.z)
        if self.y.shape != self.z.shape:
            raise ValueError(
                f"y shape {self.y.shape} does not match z shape {self.z.shape}"
            )


@dataclass
class LossConfig:
    lambda_mc: float = 0.6
    lambda_ml: float = 0.6
    lambda_aux: float = 0.4
    lambda_th: float = 0.2
    lambda_kl: float = 0.2
    lambda_c: float = 0.1  # adapted during confidence training
    beta: float = 0.15
    class_weights: np.ndarray | None = None
    cplus1_outlier_weight: float = 0.05
    aux_resolutions: tuple = (4, 8, 16, 32)


def one_hot(y, num_channels):
    """(N,H,W) int labels -> (N,C,H,W) float; rows for y >= C are all zero."""
    n, h, w = y.shape
    oh = np.zeros((n, num_channels, h, w), dtype=np.float32)
    valid = y < num_channels
    nn, hh, ww = np.nonzero(valid)
    oh[nn, y[valid], hh, ww] = 1.0
    return oh


def _zero_like_graph(logits):
    """A zero scalar that still connects to the tape (zero gradient)."""
    return ad.mul(ad.tsum(logits), 0.0)


def loss_mc(class_logits, labels, class_weights=None):
    """Multi-class negative log-likelihood over labeled inlier pixels.

    Pixels with z=2 or with labels outside the logit channel range are
    excluded. With C+1 logits the relabeled outlier pixels (y equal to the
    inlier class count, z=0) participate like any other class.
    """
    k = class_logits.shape[1]
    y, z = labels.y, labels.z
    gate = (z != 2) & (y < k)
    count = int(gate.sum())
    if count == 0:
        return _zero_like_graph(class_logits)
    if class_weights is None:
        class_weights = np.ones(k, dtype=np.float32)
    w = class_weights[np.clip(y, 0, k - 1)] * gate
    lp = ad.log_softmax(class_logits, axis=1)
    picked = ad.tsum(ad.mul(lp, one_hot(y, k).astype(lp.dtype)), axis=1)
    total = ad.tsum(ad.mul(picked, w.astype(lp.dtype)))
    return ad.div(ad.neg(total), float(count))


def loss_mc_on_probs(class_probs, labels, class_weights=None):
    """As loss_mc but on (possibly interpolated) probabilities."""
    k = class_probs.shape[1]
    y, z = labels.y, labels.z
    gate = (z != 2) & (y < k)
    count = int(gate.sum())
    if count == 0:
        return _zero_like_graph(class_probs)
    if class_weights is None:
        class_weights = np.ones(k, dtype=np.float32)
    w = class_weights[np.clip(y, 0, k - 1)] * gate
    picked = ad.tsum(
        ad.mul(class_probs, one_hot(y, k).astype(class_probs.dtype)), axis=1
    )
    logp = ad.log(ad.add(picked, _PROB_FLOOR))
    total = ad.tsum(ad.mul(logp, w.astype(class_probs.dtype)))
    return ad.div(ad.neg(total), float(count))


def loss_ml(class_logits, labels):
    """Per-class binary cross-entropy.

    A pixel is a positive for its own class when z=1 and a negative for every
    other class; outlier pixels (z=0) are negatives for all classes; ignore
    pixels contribute nothing. Normalized by the contributing pixel count.
    """
    c = class_logits.shape[1]
    y, z = labels.y, labels.z
    inlier = (z == 1)[:, None].astype(np.float32)
    outlier = (z == 0)[:, None].astype(np.float32)
    pos = one_hot(y, c) * inlier
    neg = inlier * (1.0 - one_hot(y, c)) + outlier
    count = int(((z == 0) | (z == 1)).sum())
    if count == 0:
        return _zero_like_graph(class_logits)
    # -log sigmoid(s) = softplus(-s), -log(1 - sigmoid(s)) = softplus(s)
    dt = class_logits.dtype
    pos_term = ad.mul(ad.softplus(ad.neg(class_logits)), pos.astype(dt))
    neg_term = ad.mul(ad.softplus(class_logits), neg.astype(dt))
    return ad.div(ad.tsum(ad.add(pos_term, neg_term)), float(count))


def soft_targets(y, resolution, num_classes):
    """Window-wise class distributions for the auxiliary losses.

    Each resolution x resolution window of the full-resolution label map
    yields a distribution over the valid (y < num_classes) pixels inside it;
    windows where valid pixels are not a strict majority are masked out.
    Returns (targets (N,C,Hr,Wr), valid mask (N,Hr,Wr)) as plain arrays.
    """
    n, h, w = y.shape
    r = resolution
    if h % r or w % r:
        raise ValueError(f"label extents {h}x{w} not divisible by window {r}")
    oh = one_hot(y, num_classes)
    counts = oh.reshape(n, num_classes, h // r, r, w // r, r).sum(axis=(3, 5))
    n_valid = counts.sum(axis=1)
    valid = n_valid > (r * r) / 2.0
    denom = np.maximum(n_valid, 1.0)
    targets = counts / denom[:, None]
    return targets.astype(np.float32), valid.astype(np.float32)


def loss_aux(aux_logits, y, num_classes, resolutions=(4, 8, 16, 32)):
    """Cross-entropy against window distributions, averaged over resolutions."""
    if len(aux_logits) != len(resolutions):
        raise ValueError(
            f"{len(aux_logits)} aux outputs for {len(resolutions)} resolutions"
        )
    terms = []
    for logits, r in zip(aux_logits, resolutions):
        targets, valid = soft_targets(y, r, num_classes)
        vcount = float(valid.sum())
        if vcount == 0:
            terms.append(_zero_like_graph(logits))
            continue
        lp = ad.log_softmax(logits, axis=1)
        dt = lp.dtype
        ce = ad.neg(
            ad.tsum(
                ad.mul(
                    ad.tsum(ad.mul(lp, targets.astype(dt)), axis=1),
                    valid.astype(dt),
                )
            )
        )
        terms.append(ad.div(ce, vcount))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.div(total, float(len(terms)))


def loss_th(outlier_logits, z):
    """Two-way NLL of the outlier head over non-ignore pixels.

    Channel 0 is the inlier class, channel 1 the outlier class.
    """
    if outlier_logits.shape[1] != 2:
        raise ValueError(
            f"outlier head must emit 2 channels, got {outlier_logits.shape}"
        )
    gate = z <= 1
    count = int(gate.sum())
    if count == 0:
        return _zero_like_graph(outlier_logits)
    target = np.zeros((z.shape[0], 2) + z.shape[1:], dtype=np.float32)
    target[:, 0] = (z == 1)
    target[:, 1] = (z == 0)
    lp = ad.log_softmax(outlier_logits, axis=1)
    total = ad.tsum(ad.mul(lp, target.astype(lp.dtype)))
    return ad.div(ad.neg(total), float(count))


def loss_kl(class_logits, z):
    """KL(U || P) on outlier pixels, pushing predictions toward uniform."""
    c = class_logits.shape[1]
    gate = (z == 0).astype(np.float32)
    count = int(gate.sum())
    if count == 0:
        return _zero_like_graph(class_logits)
    lp = ad.log_softmax(class_logits, axis=1)
    mean_lp = ad.tmean(lp, axis=1)
    per_pixel = ad.sub(-float(np.log(c)), mean_lp)
    total = ad.tsum(ad.mul(per_pixel, gate.astype(lp.dtype)))
    return ad.div(total, float(count))


def interpolate_confidence(class_probs, confidence, y_onehot):
    """Blend predictions toward the target: P' = c * P + (1 - c) * onehot."""
    dt = class_probs.dtype
    onehot = Tensor(np.asarray(y_onehot, dtype=dt))
    return ad.add(
        ad.mul(confidence, class_probs),
        ad.mul(ad.sub(1.0, confidence), onehot),
    )


def loss_conf(confidence, y, num_classes):
    """-log c averaged over labeled inlier pixels."""
    gate = (y < num_classes).astype(np.float32)
    count = int(gate.sum())
    if count == 0:
        return _zero_like_graph(confidence)
    c = confidence
    if c.data.ndim == 4:
        gate = gate[:, None]
    total = ad.tsum(ad.mul(ad.log(c), gate.astype(c.dtype)))
    return ad.div(ad.neg(total), float(count))


def _upsampled(logits, labels):
    hl = logits.shape[2]
    hy = labels.y.shape[1]
    if hy % hl:
        raise ValueError(
            f"label height {hy} is not an integer multiple of logit height {hl}"
        )
    return ad.bilinear_upsample(logits, hy // hl)


def total_loss(head_kind, output, labels, config, interpolate=False, parts=None):
    """Weighted total training loss for one head kind.

    Gradients flow through the class logits after bilinear upsampling to the
    label resolution. Terms with a zero weight are skipped entirely, so e.g.
    a two-head model with lambda_th=0 builds exactly the multiclass graph.
    parts, if given, collects the unweighted component values by name.
    """
    nc_eff = output.class_logits.shape[1]
    terms = []

    def emit(name, weight, value):
        if parts is not None:
            parts[name] = float(value.data)
        terms.append(ad.mul(value, float(weight)))

    logits_up = _upsampled(output.class_logits, labels)

    if head_kind in ("multiclass", "cplus1", "twohead", "confidence"):
        if config.lambda_mc > 0:
            weights = config.class_weights
            if weights is None and head_kind == "cplus1":
                weights = np.ones(nc_eff, dtype=np.float32)
                weights[-1] = config.cplus1_outlier_weight
            if head_kind == "confidence" and interpolate:
                if output.confidence is None:
                    raise ValueError("confidence head output missing")
                conf_up = _upsampled(output.confidence, labels)
                probs = ad.softmax(logits_up, axis=1)
                mixed = interpolate_confidence(
                    probs, conf_up, one_hot(labels.y, nc_eff)
                )
                emit("mc", config.lambda_mc, loss_mc_on_probs(mixed, labels, weights))
            else:
                emit("mc", config.lambda_mc, loss_mc(logits_up, labels, weights))
    elif head_kind == "multilabel":
        if config.lambda_ml > 0:
            emit("ml", config.lambda_ml, loss_ml(logits_up, labels))
    else:
        raise ValueError(f"unknown head kind {head_kind!r}")

    if head_kind == "multiclass" and config.lambda_kl > 0:
        emit("kl", config.lambda_kl, loss_kl(logits_up, labels.z))

    if head_kind == "twohead":
        if output.outlier_logits is None:
            raise ValueError("two-head loss requires outlier logits")
        if config.lambda_th > 0:
            out_up = _upsampled(output.outlier_logits, labels)
            emit("th", config.lambda_th, loss_th(out_up, labels.z))

    if head_kind == "confidence":
        if output.confidence is None:
            raise ValueError("confidence loss requires a confidence map")
        if config.lambda_c > 0:
            conf_up = _upsampled(output.confidence, labels)
            emit("conf", config.lambda_c, loss_conf(conf_up, labels.y, nc_eff))

    if config.lambda_aux > 0:
        if len(output.aux_logits) != len(config.aux_resolutions):
            raise ValueError(
                f"model emits {len(output.aux_logits)} aux outputs, config "
                f"expects {len(config.aux_resolutions)}"
            )
        emit(
            "aux",
            config.lambda_aux,
            loss_aux(
                output.aux_logits, labels.y, nc_eff, config.aux_resolutions
            ),
        )

    if not terms:
        return _zero_like_graph(output.class_logits)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total
