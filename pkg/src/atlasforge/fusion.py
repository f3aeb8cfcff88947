"""Label fusion: majority voting, LNCC ranking, multi-label STAPLE and the STEPS stack.

Posteriors are arrays of shape ``(3, h, w)`` indexed by label.  Rater stacks are
arrays of shape ``(R, h, w)`` in atlas-manifest order; that order breaks every
ranking tie.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, GeometryError, NumericError
from .grid import ImageGrid, LabelMap, RoiBox, check_same_geometry
from .registration import lncc_map

log = logging.getLogger(__name__)

N_LABELS = 3


@dataclass(frozen=True)
class FusionConfig:
    """``local_n=None`` selects ``max(2, floor(M / 3))`` raters per pixel."""

    lncc_sigma: float = 2.0
    top_fraction: float = 0.10
    top_minimum: int = 2
    local_n: int | None = None
    mrf_beta: float = 0.5
    em_max_iters: int = 50
    em_tol: float = 1e-4
    mrf_iters: int = 5
    prior_floor: float = 0.01

    def __post_init__(self):
        if self.lncc_sigma <= 0:
            raise ConfigError("lncc_sigma must be > 0")
        if not 0 < self.top_fraction <= 1:
            raise ConfigError("top_fraction must lie in (0, 1]")
        if self.local_n is not None and self.local_n < 1:
            raise ConfigError("local_n must be >= 1")
        if self.mrf_beta < 0 or self.em_max_iters < 1 or self.em_tol <= 0 or self.mrf_iters < 0:
            raise ConfigError("invalid EM/MRF settings")
        if not 0 <= self.prior_floor < 1:
            raise ConfigError("prior_floor must lie in [0, 1)")


@dataclass
class FusionReport:
    """Diagnostics of one fusion: ranking, selection, EM trace, confusion matrices."""

    method: str
    scores: list[float] = field(default_factory=list)
    ranking: list[int] = field(default_factory=list)
    selected: list[int] = field(default_factory=list)
    raters_per_pixel: int = 0
    em_iterations: int = 0
    confusion: list[list[list[float]]] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"method {self.method}"]
        if self.ranking:
            lines.append("ranking " + " ".join(str(i) for i in self.ranking))
            lines.append("scores " + " ".join(f"{self.scores[i]:.6f}" for i in self.ranking))
        if self.selected:
            lines.append("selected " + " ".join(str(i) for i in self.selected))
        if self.raters_per_pixel:
            lines.append(f"raters_per_pixel {self.raters_per_pixel}")
        lines.append(f"em_iterations {self.em_iterations}")
        for r, theta in enumerate(self.confusion):
            rows = " | ".join(" ".join(f"{v:.6f}" for v in row) for row in theta)
            lines.append(f"confusion {r} {rows}")
        return "\n".join(lines) + "\n"


def _stack(labels: Sequence[LabelMap]) -> np.ndarray:
    if len(labels) == 0:
        raise ConfigError("label stack is empty")
    check_same_geometry(list(labels), "label maps")
    return np.stack([lm.data for lm in labels]).astype(np.int64)


def _one_hot(labels: np.ndarray) -> np.ndarray:
    return (labels[None] == np.arange(N_LABELS).reshape((N_LABELS,) + (1,) * labels.ndim)).astype(np.float64)


def argmax_labels(posterior: np.ndarray) -> np.ndarray:
    # np.argmax keeps the first maximum, i.e. the smaller label on ties
    return np.argmax(posterior, axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Majority voting
# ---------------------------------------------------------------------------

def majority_vote(stack: Sequence[LabelMap]) -> LabelMap:
    """Per-pixel modal label; ties go to the smallest label."""
    arr = _stack(stack)
    counts = np.stack([(arr == lab).sum(axis=0) for lab in range(N_LABELS)])
    return stack[0].with_data(np.argmax(counts, axis=0).astype(np.uint8))


# ---------------------------------------------------------------------------
# Ranking and selection
# ---------------------------------------------------------------------------

def _roi_mask(roi, shape) -> np.ndarray:
    if roi is None:
        return np.ones(shape, dtype=bool)
    if isinstance(roi, RoiBox):
        m = np.zeros(shape, dtype=bool)
        m[roi.slices] = True
        return m
    arr = roi.data if isinstance(roi, LabelMap) else np.asarray(roi)
    if arr.shape != shape:
        raise GeometryError("ranking mask does not match the target")
    return arr != 0


def rank_global(target: ImageGrid, warped: Sequence[ImageGrid], mask=None, sigma: float = 2.0):
    """Order atlases by mean LNCC with the target over ``mask``.

    Returns ``(order, scores)``: indices sorted by descending score (ties in
    manifest order) and the per-atlas scores in manifest order.
    """
    if not warped:
        raise ConfigError("nothing to rank")
    for w in warped:
        if not target.same_geometry(w):
            raise GeometryError("warped atlas does not share the target geometry")
    m = _roi_mask(mask, target.shape)
    if not m.any():
        raise NumericError("ranking mask is empty")
    scores = np.array([float(lncc_map(target, w, sigma)[m].mean()) for w in warped])
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order], [float(s) for s in scores]


def select_top_fraction(ranking: Sequence[int], fraction: float, minimum: int = 2) -> list[int]:
    if not ranking:
        raise ConfigError("empty ranking")
    count = max(minimum, math.ceil(fraction * len(ranking) - 1e-9))
    return list(ranking[: min(count, len(ranking))])


def local_count(m: int, local_n: int | None = None) -> int:
    """Raters voting at each pixel in local mode: ``max(2, floor(M / 3))`` unless overridden."""
    n = local_n if local_n is not None else max(2, m // 3)
    return min(n, m)


# ---------------------------------------------------------------------------
# Consensus ROI
# ---------------------------------------------------------------------------

def consensus_roi(stack, active: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask of pixels where the (active) raters do not all agree."""
    arr = stack if isinstance(stack, np.ndarray) else _stack(stack)
    if active is None:
        return np.any(arr != arr[0:1], axis=0)
    present = np.stack([np.any((arr == lab) & active, axis=0) for lab in range(N_LABELS)])
    return present.sum(axis=0) >= 2


def _unanimous(arr: np.ndarray, active: np.ndarray | None) -> np.ndarray:
    if active is None:
        return arr[0]
    first = np.argmax(active, axis=0)
    return np.take_along_axis(arr, first[None], axis=0)[0]


def label_prior(arr: np.ndarray, active: np.ndarray | None = None, floor: float = 0.01) -> np.ndarray:
    """Per-pixel label frequencies among the (active) raters, floored and renormalised."""
    onehot = np.stack([(arr == lab) for lab in range(N_LABELS)], axis=1).astype(np.float64)  # (R, 3, h, w)
    if active is not None:
        onehot *= active[:, None]
        n = active.sum(axis=0)
    else:
        n = np.full(arr.shape[1:], arr.shape[0])
    prior = onehot.sum(axis=0) / np.maximum(n, 1)
    prior = np.maximum(prior, floor)
    return prior / prior.sum(axis=0, keepdims=True)


def global_prior(arr: np.ndarray) -> np.ndarray:
    """Spatially flat prior from the overall label frequencies of all raters."""
    freq = np.array([(arr == lab).mean() for lab in range(N_LABELS)])
    freq = np.maximum(freq, 1e-6)
    freq /= freq.sum()
    return np.broadcast_to(freq.reshape(N_LABELS, 1, 1), (N_LABELS,) + arr.shape[1:]).copy()


# ---------------------------------------------------------------------------
# Multi-label STAPLE
# ---------------------------------------------------------------------------

def _initial_theta(r: int) -> np.ndarray:
    theta = np.full((r, N_LABELS, N_LABELS), 0.05)
    idx = np.arange(N_LABELS)
    theta[:, idx, idx] = 0.9
    return theta


def staple_multilabel(
    stack,
    roi: np.ndarray | None = None,
    prior: np.ndarray | None = None,
    config: FusionConfig | None = None,
    active: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Multi-label STAPLE expectation-maximisation.

    ``stack`` is a sequence of LabelMaps or an ``(R, h, w)`` label array.  EM
    runs only on ``roi`` pixels (all pixels if ``None``); elsewhere the
    posterior is the unanimous label.  ``active`` (``(R, h, w)`` bool) hides a
    rater's vote at pixels where it was not selected.

    Returns ``(posterior, theta, iterations)`` with ``theta[r, true, observed]``.
    """
    config = config or FusionConfig()
    arr = stack if isinstance(stack, np.ndarray) else _stack(stack)
    arr = arr.astype(np.int64)
    r = arr.shape[0]
    if r < 2:
        raise ConfigError("STAPLE needs at least two raters")
    shape = arr.shape[1:]
    if prior is None:
        prior = label_prior(arr, active, config.prior_floor)
    if prior.shape != (N_LABELS,) + shape:
        raise GeometryError("prior does not match the rater stack")
    if np.any(prior < 0) or not np.allclose(prior.sum(axis=0), 1.0, atol=1e-9):
        raise ConfigError("prior rows must be non-negative and sum to 1")
    roi_mask = np.ones(shape, dtype=bool) if roi is None else np.asarray(roi, dtype=bool)

    posterior = _one_hot(_unanimous(arr, active))
    theta = _initial_theta(r)
    idx = np.flatnonzero(roi_mask.ravel())
    if idx.size == 0:
        return posterior, theta, 0

    obs = arr.reshape(r, -1)[:, idx]  # (R, P)
    act = np.ones_like(obs, dtype=bool) if active is None else active.reshape(r, -1)[:, idx]
    pri = prior.reshape(N_LABELS, -1)[:, idx]  # (3, P)
    obs_onehot = np.stack([(obs == o) & act for o in range(N_LABELS)], axis=1).astype(np.float64)  # (R, 3obs, P)

    iterations = 0
    w = pri
    for iterations in range(1, config.em_max_iters + 1):
        # E-step in log space: log prior + sum over active raters of log theta[true, obs]
        with np.errstate(divide="ignore"):
            log_theta = np.log(theta)  # (R, 3true, 3obs)
            logw = np.log(pri)
        contrib = np.einsum("rto,rop->tp", np.where(np.isinf(log_theta), -1e300, log_theta), obs_onehot)
        logw = logw + contrib
        logw -= logw.max(axis=0, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=0, keepdims=True)

        # M-step: theta[r, t, o] = sum_p w[t, p] [obs_rp = o] / sum_p w[t, p] [rater r active at p]
        num = np.einsum("tp,rop->rto", w, obs_onehot)
        den = num.sum(axis=2, keepdims=True)
        new_theta = np.where(den > 0, num / np.where(den > 0, den, 1.0), theta)
        delta = float(np.max(np.abs(new_theta - theta)))
        theta = new_theta
        if delta < config.em_tol:
            break

    post = posterior.reshape(N_LABELS, -1)
    post[:, idx] = w
    return posterior, theta, iterations


# ---------------------------------------------------------------------------
# MRF regularisation
# ---------------------------------------------------------------------------

def _neighbour_sum(q: np.ndarray) -> np.ndarray:
    s = np.zeros_like(q)
    s[:, 1:, :] += q[:, :-1, :]
    s[:, :-1, :] += q[:, 1:, :]
    s[:, :, 1:] += q[:, :, :-1]
    s[:, :, :-1] += q[:, :, 1:]
    return s


def mrf_regularize(posterior: np.ndarray, beta: float = 0.5, iters: int = 5) -> np.ndarray:
    """Jacobi mean-field sweeps: ``p'(l) ∝ p(l) exp(beta * sum of 4-neighbour q(l))``.

    ``p`` stays the input posterior; ``q`` is the previous sweep's output.
    """
    if beta < 0:
        raise ConfigError("mrf beta must be >= 0")
    p = np.asarray(posterior, dtype=np.float64)
    if beta == 0 or iters == 0:
        return p.copy()
    q = p.copy()
    for _ in range(iters):
        energy = beta * _neighbour_sum(q)
        energy -= energy.max(axis=0, keepdims=True)
        q = p * np.exp(energy)
        q /= q.sum(axis=0, keepdims=True)
    return q


# ---------------------------------------------------------------------------
# STEPS
# ---------------------------------------------------------------------------

def steps_fuse(
    target: ImageGrid,
    warped: Sequence[tuple[ImageGrid, LabelMap]],
    config: FusionConfig | None = None,
    mode: str = "global_top",
    roi=None,
    report: FusionReport | None = None,
) -> LabelMap:
    """LNCC-ranked multi-label STAPLE with consensus ROI and MRF post-pass.

    ``global_top`` ranks whole atlases over ``roi`` and fuses the best
    ``top_fraction``; ``local_n`` lets only the N locally best atlases vote at
    each pixel.
    """
    config = config or FusionConfig()
    if mode not in ("global_top", "local_n"):
        raise ConfigError(f"unknown fusion mode {mode!r}")
    if len(warped) < 2:
        raise NumericError("STEPS needs at least two warped atlases")
    images = [w[0] for w in warped]
    labels = [w[1] for w in warped]
    for img, lab in warped:
        if not (target.same_geometry(img) and target.same_geometry(lab)):
            raise GeometryError("warped atlas does not share the target geometry")
    report = report if report is not None else FusionReport(mode)
    report.method = f"steps/{mode}"
    arr = _stack(labels)

    if mode == "global_top":
        order, scores = rank_global(target, images, roi, config.lncc_sigma)
        chosen = select_top_fraction(order, config.top_fraction, config.top_minimum)
        if len(chosen) < 2:
            raise NumericError("fewer than two atlases survive selection")
        report.scores, report.ranking, report.selected = scores, order, sorted(chosen)
        sub = arr[sorted(chosen)]
        active = None
    else:
        m = len(warped)
        n = local_count(m, config.local_n)
        if n < 2:
            raise NumericError("fewer than two atlases survive selection")
        maps = np.stack([lncc_map(target, img, config.lncc_sigma) for img in images])
        rank = np.argsort(-maps, axis=0, kind="stable")
        active = np.zeros(arr.shape, dtype=bool)
        np.put_along_axis(active, rank[:n], True, axis=0)
        report.raters_per_pixel = n
        scores = maps.reshape(m, -1).mean(axis=1)
        report.scores = [float(s) for s in scores]
        report.ranking = [int(i) for i in np.argsort(-scores, kind="stable")]
        sub = arr

    disagree = consensus_roi(sub, active)
    prior = label_prior(sub, active, config.prior_floor)
    posterior, theta, iters = staple_multilabel(sub, disagree, prior, config, active)
    posterior = mrf_regularize(posterior, config.mrf_beta, config.mrf_iters)
    report.em_iterations = iters
    report.confusion = theta.tolist()
    return target_labels(target, argmax_labels(posterior))


def target_labels(target: ImageGrid, data: np.ndarray) -> LabelMap:
    return LabelMap(data, target.spacing)


def staple_fuse(stack: Sequence[LabelMap], config: FusionConfig | None = None) -> LabelMap:
    """Plain STAPLE over every pixel with a flat global prior."""
    arr = _stack(stack)
    posterior, _, _ = staple_multilabel(arr, None, global_prior(arr), config)
    return stack[0].with_data(argmax_labels(posterior))
