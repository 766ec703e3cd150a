"""
Tampering-mask estimation from a fingerprint.

Unsupervised route: split the fingerprint into non-overlapping 8x8 patches,
cluster them (K-means or a diagonal GMM fitted by EM), keep the cluster whose
member pixels are spatially most compact and paint its patches as spliced.

Supervised route: a small U-Net maps the (standardised) fingerprint to a
per-pixel probability map which is thresholded at ``tau``.

Cluster ids are 0-based throughout.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

import numpy as np
import pydantic
from pydantic import BaseModel, Field
from scipy.special import logsumexp

from .. import config
from ..data.models import Fingerprint, TamperMask
from ..errors import CapacityError, ConfigurationError, ModelError, SizingError, ToolkitError, ValidationError
from ..helpers import MaskMethod, make_rng
from ..tensornet import AdamState, LayerSpec, Network, NetworkSpec, PlateauSchedule, adam_step, dice_focal_loss
from .validators import GridValidator, ensure

logger = logging.getLogger(__name__)

PATCH_SIDE = int(config.setting("patch_side"))
DEFAULT_CLUSTERS = int(config.setting("clusters"))
DEFAULT_TAU = float(config.setting("tau"))


@dataclass(frozen=True)
class PatchObservation:
    vector: np.ndarray
    patch_row: int
    patch_col: int


@dataclass(frozen=True)
class PatchGrid:
    """Patches of a centre-cropped fingerprint, row-major over a ``rows`` x ``cols`` grid."""

    vectors: np.ndarray  # (rows * cols, side * side), float64
    rows: int
    cols: int
    side: int
    top: int
    left: int
    shape: tuple[int, int]

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def patch_rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.rows), self.cols)

    def patch_cols(self) -> np.ndarray:
        return np.tile(np.arange(self.cols), self.rows)

    def observations(self) -> list[PatchObservation]:
        return [
            PatchObservation(self.vectors[k], int(k // self.cols), int(k % self.cols)) for k in range(self.count)
        ]


def patchify(fp: Fingerprint | np.ndarray, side: int = PATCH_SIDE) -> PatchGrid:
    values = np.asarray(fp.values if isinstance(fp, Fingerprint) else fp, dtype=np.float64)
    height, width = values.shape
    if height < side or width < side:
        raise SizingError(f"fingerprint {height}x{width} is smaller than patch side {side}")
    rows, cols = height // side, width // side
    top, left = (height - rows * side) // 2, (width - cols * side) // 2
    cropped = values[top : top + rows * side, left : left + cols * side]
    vectors = cropped.reshape(rows, side, cols, side).transpose(0, 2, 1, 3).reshape(rows * cols, side * side)
    return PatchGrid(np.ascontiguousarray(vectors), rows, cols, side, top, left, (height, width))


@dataclass
class Clustering:
    method: str
    assignments: np.ndarray
    n_clusters: int
    centroids: np.ndarray
    objective: list[float] = field(default_factory=list)
    variances: np.ndarray | None = None
    weights: np.ndarray | None = None
    responsibilities: np.ndarray | None = None

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == cluster)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.n_clusters)


def _as_matrix(obs: PatchGrid | np.ndarray) -> np.ndarray:
    return obs.vectors if isinstance(obs, PatchGrid) else np.asarray(obs, dtype=np.float64)


def _sq_distances(x: np.ndarray, centres: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centres[None, :, :]
    return np.einsum("ncd,ncd->nc", diff, diff)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centres = [x[int(rng.integers(0, n))]]
    closest = _sq_distances(x, np.asarray(centres))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        idx = int(rng.choice(n, p=closest / total)) if total > 0 else int(rng.integers(0, n))
        centres.append(x[idx])
        closest = np.minimum(closest, _sq_distances(x, x[idx][None])[:, 0])
    return np.array(centres)


def _reseed_empty(x: np.ndarray, assign: np.ndarray, centres: np.ndarray, k: int) -> None:
    """Give every empty cluster the point farthest from its centre among clusters with spare members."""
    for c in range(k):
        counts = np.bincount(assign, minlength=k)
        if counts[c] > 0:
            continue
        donors = counts[assign] > 1
        if not donors.any():
            break
        own = ((x - centres[assign]) ** 2).sum(axis=1)
        own[~donors] = -1.0
        idx = int(np.argmax(own))
        assign[idx] = c
        centres[c] = x[idx]


def _objective(x: np.ndarray, assign: np.ndarray, centres: np.ndarray) -> float:
    return float(((x - centres[assign]) ** 2).sum())


def _kmeans_once(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int) -> Clustering:
    centres = _kmeans_pp(x, k, rng)
    previous: np.ndarray | None = None
    trace: list[float] = []
    assign = np.zeros(len(x), dtype=np.int64)
    for _ in range(max_iter):
        assign = np.argmin(_sq_distances(x, centres), axis=1)
        _reseed_empty(x, assign, centres, k)
        for c in range(k):
            members = assign == c
            if members.any():
                centres[c] = x[members].mean(axis=0)
        trace.append(_objective(x, assign, centres))
        if previous is not None and np.array_equal(assign, previous):
            break
        previous = assign.copy()
    return Clustering("kmeans", assign, k, centres, trace)


def kmeans(
    obs: PatchGrid | np.ndarray,
    n_clusters: int = DEFAULT_CLUSTERS,
    rng: np.random.Generator | int | None = None,
    *,
    restarts: int = int(config.setting("kmeans_restarts")),
    max_iter: int = int(config.setting("kmeans_max_iter")),
) -> Clustering:
    """k-means++ plus Lloyd iterations; the restart with the lowest final objective wins."""
    x = _as_matrix(obs)
    if len(x) < n_clusters:
        raise CapacityError(f"{len(x)} observations cannot fill {n_clusters} clusters")
    gen = make_rng(rng)
    best: Clustering | None = None
    for _ in range(max(1, restarts)):
        run = _kmeans_once(x, n_clusters, gen, max_iter)
        if best is None or run.objective[-1] < best.objective[-1]:
            best = run
    assert best is not None
    return best


def _log_gaussian(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    # (N, C) diagonal log densities
    log_det = np.log(2.0 * np.pi * variances).sum(axis=1)
    diff = x[:, None, :] - means[None, :, :]
    maha = np.einsum("ncd,ncd->nc", diff / variances[None, :, :], diff)
    return -0.5 * (log_det[None, :] + maha)


def gmm_em(
    obs: PatchGrid | np.ndarray,
    n_clusters: int = DEFAULT_CLUSTERS,
    rng: np.random.Generator | int | None = None,
    *,
    max_iter: int = int(config.setting("gmm_max_iter")),
    tol: float = float(config.setting("gmm_tol")),
    var_floor: float = float(config.setting("gmm_var_floor")),
) -> Clustering:
    """
    Diagonal-covariance Gaussian mixture fitted by EM, initialised from K-means.

    Stops when the log-likelihood gain per observation drops below ``tol``.
    ``objective`` holds the total log-likelihood after each E-step.
    """
    x = _as_matrix(obs)
    n = len(x)
    if n < n_clusters:
        raise CapacityError(f"{n} observations cannot fill {n_clusters} clusters")
    init = kmeans(x, n_clusters, rng)
    global_var = np.maximum(x.var(axis=0), var_floor)
    means = init.centroids.copy()
    variances = np.empty_like(means)
    counts = init.sizes()
    for c in range(n_clusters):
        members = x[init.assignments == c]
        variances[c] = np.maximum(members.var(axis=0), var_floor) if len(members) > 1 else global_var
    weights = counts / n

    trace: list[float] = []
    resp = np.zeros((n, n_clusters))
    for _ in range(max_iter + 1):
        with np.errstate(divide="ignore"):
            log_joint = np.log(weights)[None, :] + _log_gaussian(x, means, variances)
        log_norm = logsumexp(log_joint, axis=1)
        resp = np.exp(log_joint - log_norm[:, None])
        ll = float(log_norm.sum())
        converged = bool(trace) and (ll - trace[-1]) / n < tol
        trace.append(ll)
        if converged or len(trace) > max_iter:
            break
        nk = resp.sum(axis=0)
        weights = nk / n
        for c in range(n_clusters):
            if nk[c] <= 0:
                continue
            means[c] = resp[:, c] @ x / nk[c]
            variances[c] = np.maximum(resp[:, c] @ ((x - means[c]) ** 2) / nk[c], var_floor)

    assignments = np.argmax(resp, axis=1)
    return Clustering("gmm", assignments, n_clusters, means, trace, variances, weights, resp)


def _compactness(grid: PatchGrid, members: np.ndarray) -> Fraction:
    """Mean of the population variances of member-pixel row and column coordinates, exactly."""
    n = len(members)
    pr = grid.patch_rows()[members].astype(np.int64)
    pc = grid.patch_cols()[members].astype(np.int64)
    s = grid.side
    var_r = Fraction(n * int((pr * pr).sum()) - int(pr.sum()) ** 2, n * n)
    var_c = Fraction(n * int((pc * pc).sum()) - int(pc.sum()) ** 2, n * n)
    # coordinates within a patch are uniform on 0..s-1 and independent of the patch index
    within = Fraction(s * s - 1, 12)
    return (s * s * var_r + within + s * s * var_c + within) / 2


def cluster_compactness(clust: Clustering, grid: PatchGrid) -> dict[int, float]:
    return {
        c: float(_compactness(grid, members))
        for c in range(clust.n_clusters)
        if len(members := clust.members(c))
    }


def select_compact_cluster(clust: Clustering, grid: PatchGrid) -> int:
    best_id, best_score = -1, None
    for c in range(clust.n_clusters):
        members = clust.members(c)
        if len(members) == 0:
            continue
        score = _compactness(grid, members)
        if best_score is None or score < best_score:
            best_id, best_score = c, score
    if best_id < 0:
        raise ToolkitError("every cluster is empty")
    return best_id


def cluster_to_mask(clust: Clustering, cluster: int, grid: PatchGrid) -> TamperMask:
    bits = np.zeros(grid.shape, dtype=np.uint8)
    selected = (clust.assignments == cluster).reshape(grid.rows, grid.cols).astype(np.uint8)
    block = np.kron(selected, np.ones((grid.side, grid.side), dtype=np.uint8))
    bits[grid.top : grid.top + block.shape[0], grid.left : grid.left + block.shape[1]] = block
    return TamperMask(bits)


# ---------------------------------------------------------------- U-Net


class UNetConfig(BaseModel):
    levels: int = Field(default=3, ge=1, le=5)
    base_width: int = Field(default=16, ge=1)
    lr: float = Field(default=1e-4, ge=0.0)
    batch_size: int = Field(default=4, ge=1)
    max_epochs: int = Field(default=300, ge=1)
    plateau_patience: int = Field(default=10, ge=1)
    lr_factor: float = Field(default=0.1, gt=0.0, le=1.0)
    early_stop_patience: int = Field(default=30, ge=1)
    focal_alpha: float = Field(default=0.25, gt=0.0)
    focal_gamma: float = Field(default=2.0, ge=0.0)
    seed: int = Field(default=0, ge=0)


def unet_spec(levels: int = 3, base_width: int = 16, seed: int = 0) -> NetworkSpec:
    layers: list[LayerSpec] = []

    def block(prefix: str, width: int) -> None:
        for k in (1, 2):
            layers.extend(
                [
                    LayerSpec(kind="conv2d", name=f"{prefix}_conv{k}", out_channels=width, bias=False),
                    LayerSpec(kind="batch_norm", name=f"{prefix}_bn{k}"),
                    LayerSpec(kind="relu", name=f"{prefix}_relu{k}"),
                ]
            )

    for level in range(levels):
        block(f"enc{level}", base_width * 2**level)
        layers.append(LayerSpec(kind="max_pool", name=f"pool{level}"))
    block("mid", base_width * 2**levels)
    for level in reversed(range(levels)):
        layers.append(LayerSpec(kind="upsample_nearest", name=f"up{level}"))
        layers.append(LayerSpec(kind="concat", name=f"cat{level}", skip=f"enc{level}_relu2"))
        block(f"dec{level}", base_width * 2**level)
    layers.append(LayerSpec(kind="conv2d", name="head", out_channels=1, kernel=1))
    layers.append(LayerSpec(kind="sigmoid", name="prob"))
    return NetworkSpec(in_channels=1, layers=layers, seed=seed)


def standardize(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    std = v.std()
    return (v - v.mean()) / std if std > 0 else np.zeros_like(v)


def _pad_to_multiple(values: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    height, width = values.shape
    pad_h, pad_w = (-height) % multiple, (-width) % multiple
    top, left = pad_h // 2, pad_w // 2
    if pad_h or pad_w:
        mode = "reflect" if min(height, width) > 1 else "edge"
        values = np.pad(values, ((top, pad_h - top), (left, pad_w - left)), mode=mode)
    return values, (top, left)


def threshold(prob: np.ndarray, tau: float = DEFAULT_TAU) -> TamperMask:
    """1 where ``prob >= tau``."""
    return TamperMask((np.asarray(prob) >= tau).astype(np.uint8))


@dataclass
class UNetEstimator:
    network: Network
    config: UNetConfig
    extractor_id: str = "unknown"

    @property
    def multiple(self) -> int:
        return 2**self.network.spec.pooling_levels

    def prepare(self, fp: Fingerprint | np.ndarray) -> tuple[np.ndarray, tuple[int, int], tuple[int, int]]:
        values = fp.values if isinstance(fp, Fingerprint) else np.asarray(fp)
        padded, offset = _pad_to_multiple(standardize(values), self.multiple)
        return padded.astype(np.float32), offset, values.shape

    def predict(self, fp: Fingerprint | np.ndarray) -> np.ndarray:
        padded, (top, left), (height, width) = self.prepare(fp)
        out = self.network.forward(padded[None, None], "eval")[0, 0]
        return out[top : top + height, left : left + width].astype(np.float64)

    def estimate(self, fp: Fingerprint | np.ndarray, tau: float = DEFAULT_TAU) -> tuple[TamperMask, np.ndarray]:
        prob = self.predict(fp)
        return threshold(prob, tau), prob

    def save(self, directory: Path | str) -> Path:
        return self.network.save(
            directory, metadata={"kind": "unet", "extractor_id": self.extractor_id, "config": self.config.model_dump()}
        )

    @classmethod
    def load(cls, directory: Path | str) -> UNetEstimator:
        network, metadata = Network.load(directory)
        if metadata.get("kind") != "unet":
            raise ModelError(f"{directory} does not hold a U-Net")
        try:
            cfg = UNetConfig.model_validate(metadata.get("config", {}))
        except pydantic.ValidationError as exc:
            raise ModelError(f"{directory}: stored U-Net config is invalid: {exc}") from exc
        return cls(network, cfg, str(metadata.get("extractor_id") or "unknown"))


def unet_estimate(
    model: UNetEstimator | None, fp: Fingerprint, tau: float = DEFAULT_TAU
) -> tuple[TamperMask, np.ndarray]:
    if model is None:
        raise ModelError("the unet method needs a trained model")
    return model.estimate(fp, tau)


@dataclass
class UNetEpoch:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class UNetTrainingResult:
    estimator: UNetEstimator
    history: list[UNetEpoch] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf


Sample = tuple[Fingerprint, TamperMask]


def _batches(estimator: UNetEstimator, samples: list[Sample], order: np.ndarray, size: int):
    """Yield stacked ``(x, truth, crops)`` groups of equal padded shape."""
    for start in range(0, len(order), size):
        groups: dict[tuple[int, int], list[tuple[np.ndarray, np.ndarray, tuple[int, int, int, int]]]] = {}
        for i in order[start : start + size]:
            fp, mask = samples[int(i)]
            padded, (top, left), (height, width) = estimator.prepare(fp)
            groups.setdefault(padded.shape, []).append((padded, mask.bits, (top, left, height, width)))
        for items in groups.values():
            x = np.stack([p for p, _, _ in items])[:, None]
            yield x, [t for _, t, _ in items], [c for _, _, c in items]


def _batch_loss(
    estimator: UNetEstimator, x: np.ndarray, truths: list[np.ndarray], crops: list, cfg: UNetConfig, train: bool
) -> tuple[float, np.ndarray]:
    out = estimator.network.forward(x, "train" if train else "eval")
    pred = np.concatenate([out[k, 0, t : t + h, l : l + w].ravel() for k, (t, l, h, w) in enumerate(crops)])
    truth = np.concatenate([t.ravel() for t in truths])
    res = dice_focal_loss(pred, truth, alpha=cfg.focal_alpha, gamma=cfg.focal_gamma)
    grad = np.zeros_like(out)
    offset = 0
    for k, (t, l, h, w) in enumerate(crops):
        grad[k, 0, t : t + h, l : l + w] = res.grad[offset : offset + h * w].reshape(h, w)
        offset += h * w
    return res.loss, grad


def train_unet(
    train: list[Sample],
    cfg: UNetConfig | None = None,
    rng: np.random.Generator | int | None = None,
    *,
    val: list[Sample] | None = None,
    extractor_id: str = "unknown",
) -> UNetTrainingResult:
    """
    Adam on Dice + Focal. Without an explicit ``val`` list the samples are split 50/50.

    The learning rate is cut by ``lr_factor`` after ``plateau_patience`` epochs
    without validation improvement; training stops after ``early_stop_patience``.
    """
    cfg = cfg or UNetConfig()
    gen = make_rng(cfg.seed if rng is None else rng)
    if val is None:
        order = gen.permutation(len(train))
        half = len(train) // 2
        train, val = [train[int(i)] for i in order[half:]], [train[int(i)] for i in order[:half]]
    if not train or not val:
        raise ConfigurationError(f"U-Net training needs non-empty splits, got {len(train)} train / {len(val)} val")
    for fp, mask in [*train, *val]:
        ensure(GridValidator.validate_same_shape(fp, mask, "fingerprint and mask"), context="unet sample")

    network = Network(unet_spec(cfg.levels, cfg.base_width, cfg.seed))
    estimator = UNetEstimator(network, cfg, extractor_id)
    state = AdamState.create(network.parameters(), cfg.lr)
    schedule = PlateauSchedule(
        lr=cfg.lr, stop_after=cfg.early_stop_patience, reduce_after=cfg.plateau_patience, factor=cfg.lr_factor
    )
    result = UNetTrainingResult(estimator)
    best_params = {k: v.copy() for k, v in network.parameters().items()}
    best_buffers = {k: v.copy() for k, v in network.buffers().items()}
    logger.info("Training U-Net on %s fingerprints (%s validation)", len(train), len(val))

    for epoch in range(cfg.max_epochs):
        lr = schedule.lr
        losses = []
        for x, truths, crops in _batches(estimator, train, gen.permutation(len(train)), cfg.batch_size):
            loss, grad = _batch_loss(estimator, x, truths, crops, cfg, train=True)
            network.backward(grad)
            state.lr = lr
            network.set_parameters(adam_step(state, network.parameters(), network.gradients()))
            losses.append(loss)
        val_losses = [
            _batch_loss(estimator, x, truths, crops, cfg, train=False)[0]
            for x, truths, crops in _batches(estimator, val, np.arange(len(val)), cfg.batch_size)
        ]
        train_loss, val_loss = float(np.mean(losses)), float(np.mean(val_losses))
        result.history.append(UNetEpoch(epoch, train_loss, val_loss, lr))
        logger.info("unet epoch %s: train %.5f val %.5f lr %.2g", epoch, train_loss, val_loss, lr)
        if schedule.update(epoch, val_loss):
            best_params = {k: v.copy() for k, v in network.parameters().items()}
            best_buffers = {k: v.copy() for k, v in network.buffers().items()}
        if schedule.should_stop:
            logger.info("U-Net early stop at epoch %s (best %s)", epoch, schedule.best_epoch)
            break

    network.set_parameters(best_params)
    network.set_buffers(best_buffers)
    result.best_epoch = schedule.best_epoch
    result.best_val_loss = schedule.best
    return result


@dataclass(frozen=True)
class MaskEstimate:
    method: MaskMethod
    mask: TamperMask
    cluster: int | None = None
    probability: np.ndarray | None = None
    details: dict[str, Any] = field(default_factory=dict)


def estimate_mask(
    method: MaskMethod,
    fp: Fingerprint,
    rng: np.random.Generator | int | None = None,
    *,
    model: UNetEstimator | None = None,
    tau: float = DEFAULT_TAU,
    n_clusters: int = DEFAULT_CLUSTERS,
    side: int = PATCH_SIDE,
) -> MaskEstimate:
    if method == "unet":
        mask, prob = unet_estimate(model, fp, tau)
        return MaskEstimate("unet", mask, probability=prob)
    grid = patchify(fp, side)
    if method == "kmeans":
        clust = kmeans(grid, n_clusters, rng)
    elif method == "gmm":
        clust = gmm_em(grid, n_clusters, rng)
    else:
        raise ValidationError(f"unknown mask method {method!r}")
    cluster = select_compact_cluster(clust, grid)
    return MaskEstimate(
        method,
        cluster_to_mask(clust, cluster, grid),
        cluster=cluster,
        details={"sizes": clust.sizes().tolist(), "objective": clust.objective[-1]},
    )
