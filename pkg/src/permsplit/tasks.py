"""Synthetic multi-task data with planted latent signals, non-IID client
partitioning, and evaluation metrics (AUC, MSE, Dice).

All three tasks share one image process: a bright background level drawn per
image (a strong nuisance factor) plus small Gaussian blobs. Classification
and severity labels derive from the same blob latents (intensity level,
per-region placement), so the tasks are correlated; segmentation masks come
from an independent placement of larger blobs over the shared background
process. Labels are deterministic functions of the latents, which keeps the
tasks learnable by construction while the background confounder makes raw
pixel pooling uninformative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .model import load_tensors, save_tensors

__all__ = [
    "MetricError", "WorldError", "TaskSpec", "ClientData", "TaskData",
    "SyntheticWorld", "TASK_KINDS", "generate_world", "auc",
    "multiclass_auc", "mse", "dice", "dump_world", "load_world",
]

TASK_KINDS = ("classification", "severity", "segmentation")

N_CLASSES = 3
N_SEVERITY = 6


class MetricError(ValueError):
    """Metric undefined for the given inputs."""


class WorldError(ValueError):
    """Requested world composition is infeasible."""


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    image_h: int = 32
    image_w: int = 32
    channels: int = 1

    @property
    def label_shape(self) -> tuple[int, ...]:
        if self.kind == "classification":
            return (N_CLASSES,)
        if self.kind == "severity":
            return (N_SEVERITY,)
        return (self.image_h, self.image_w)


@dataclass
class ClientData:
    client_id: int
    images: np.ndarray            # [N, C, H, W] float32
    labels: np.ndarray            # task-dependent, float32
    latents: np.ndarray           # planted per-sample factors, float32

    @property
    def n_samples(self) -> int:
        return int(self.images.shape[0])


@dataclass
class TaskData:
    spec: TaskSpec
    clients: list[ClientData]
    test_images: np.ndarray
    test_labels: np.ndarray
    test_latents: np.ndarray


@dataclass
class SyntheticWorld:
    seed: int
    tasks: dict[str, TaskData] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# image process

_BLOB_SIGMA = 1.8
_CLASS_AMPS = (0.12, 0.30, 0.50)
_PIXEL_NOISE = 0.04

# skew=1 classification composition profiles, mirroring a two-site split
# where the second site contributes no middle class
_SKEW_PROFILES = (
    np.array([0.366, 0.366, 0.268]),
    np.array([0.106, 0.0, 0.894]),
)


def _grid(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return ys.astype(np.float64), xs.astype(np.float64)


def _add_blob(img, ys, xs, cy, cx, amp, sigma):
    img += amp * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma ** 2))


def _region_bounds(h: int, w: int):
    """Six regions: three bands top-to-bottom, split left/right."""
    rows = np.linspace(0, h, 4).astype(int)
    return [(rows[i], rows[i + 1], 0 if j == 0 else w // 2,
             w // 2 if j == 0 else w)
            for i in range(3) for j in range(2)]


def _sample_shared(rng, spec: TaskSpec, cls: int):
    """One image from the shared latent process; returns image, per-region
    blob mass, and the latent vector [class, background, total mass]."""
    h, w = spec.image_h, spec.image_w
    ys, xs = _grid(h, w)
    background = rng.uniform(0.30, 0.70)
    img = np.full((h, w), background) + rng.normal(0, _PIXEL_NOISE, (h, w))
    amp = _CLASS_AMPS[cls] + rng.normal(0, 0.03)
    regions = _region_bounds(h, w)
    present = rng.random(len(regions)) < (0.25 + 0.25 * cls)
    if not present.any():
        present[rng.integers(len(regions))] = True
    region_mass = np.zeros(len(regions))
    for r, (r0, r1, c0, c1) in enumerate(regions):
        if not present[r]:
            continue
        for _ in range(rng.integers(1, 3)):
            cy = rng.uniform(r0 + 2, max(r0 + 3, r1 - 2))
            cx = rng.uniform(c0 + 2, max(c0 + 3, c1 - 2))
            _add_blob(img, ys, xs, cy, cx, amp, _BLOB_SIGMA)
            region_mass[r] += max(amp, 0.0)
    latent = np.array([cls, background, region_mass.sum()], dtype=np.float32)
    return img[None].astype(np.float32), region_mass, latent


def _sample_segmentation(rng, spec: TaskSpec):
    h, w = spec.image_h, spec.image_w
    ys, xs = _grid(h, w)
    background = rng.uniform(0.30, 0.70)
    img = np.full((h, w), background) + rng.normal(0, _PIXEL_NOISE, (h, w))
    support = np.zeros((h, w))
    n_blobs = rng.integers(1, 3)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(6, h - 6), rng.uniform(6, w - 6)
        sigma = rng.uniform(2.5, 4.0)
        amp = rng.uniform(0.35, 0.55)
        blob = amp * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma ** 2))
        img += blob
        support = np.maximum(support, blob)
    mask = (support > 0.12).astype(np.float32)
    latent = np.array([n_blobs, background, mask.mean()], dtype=np.float32)
    return img[None].astype(np.float32), mask, latent


def _class_counts(size: int, proportions: np.ndarray) -> np.ndarray:
    if (proportions < 0).any() or abs(proportions.sum() - 1.0) > 1e-9:
        raise WorldError(f"invalid class proportions {proportions}")
    raw = proportions * size
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts))
    for i in range(size - counts.sum()):
        counts[order[i % len(counts)]] += 1
    if (counts < 0).any() or counts.sum() != size:
        raise WorldError(f"cannot realize {size} samples with {proportions}")
    return counts


def _classification_proportions(client_idx: int, skew: float) -> np.ndarray:
    if not 0.0 <= skew <= 1.0:
        raise WorldError(f"skew must be in [0, 1], got {skew}")
    balanced = np.full(N_CLASSES, 1.0 / N_CLASSES)
    profile = _SKEW_PROFILES[client_idx % len(_SKEW_PROFILES)]
    return (1.0 - skew) * balanced + skew * profile


def _make_classification(rng, spec, size, proportions):
    counts = _class_counts(size, proportions)
    images, labels, latents = [], [], []
    for cls, cnt in enumerate(counts):
        for _ in range(cnt):
            img, _, lat = _sample_shared(rng, spec, cls)
            onehot = np.zeros(N_CLASSES, np.float32)
            onehot[cls] = 1.0
            images.append(img)
            labels.append(onehot)
            latents.append(lat)
    order = rng.permutation(size)
    return (np.stack(images)[order], np.stack(labels)[order],
            np.stack(latents)[order])


def _make_severity(rng, spec, size):
    images, labels, latents = [], [], []
    for _ in range(size):
        cls = int(rng.integers(N_CLASSES))
        img, region_mass, lat = _sample_shared(rng, spec, cls)
        score = np.clip(region_mass / 0.8, 0.0, 1.0).astype(np.float32)
        images.append(img)
        labels.append(score)
        latents.append(lat)
    return np.stack(images), np.stack(labels), np.stack(latents)


def _make_segmentation(rng, spec, size):
    images, labels, latents = [], [], []
    for _ in range(size):
        img, mask, lat = _sample_segmentation(rng, spec)
        images.append(img)
        labels.append(mask)
        latents.append(lat)
    return np.stack(images), np.stack(labels), np.stack(latents)


def _make_split(rng, spec, size, proportions):
    if spec.kind == "classification":
        return _make_classification(rng, spec, size, proportions)
    if spec.kind == "severity":
        return _make_severity(rng, spec, size)
    return _make_segmentation(rng, spec, size)


def generate_world(seed: int, sizes: dict[str, list[int]], skew: float = 0.0,
                   test_sizes: dict[str, int] | None = None,
                   image_h: int = 32, image_w: int = 32) -> SyntheticWorld:
    """Build per-task client partitions plus a balanced held-out test split.

    `sizes` maps task kind -> per-client sample counts. Classification
    clients honor the skew knob (0 = balanced, 1 = two-site profiles where
    client 2 lacks the middle class); severity/segmentation skew is carried
    by the size imbalance itself.
    """
    test_sizes = test_sizes or {}
    world = SyntheticWorld(seed=seed)
    next_client = 0
    for kind in TASK_KINDS:
        if kind not in sizes:
            continue
        spec = TaskSpec(kind, image_h, image_w)
        clients = []
        for idx, size in enumerate(sizes[kind]):
            if size < 1:
                raise WorldError(f"{kind} client size must be >= 1, got {size}")
            props = (_classification_proportions(idx, skew)
                     if kind == "classification" else None)
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([seed, TASK_KINDS.index(kind), idx])))
            images, labels, latents = _make_split(rng, spec, size, props)
            clients.append(ClientData(next_client, images, labels, latents))
            next_client += 1
        t_size = test_sizes.get(kind, 60)
        t_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, TASK_KINDS.index(kind), 0x7E57])))
        t_props = (np.full(N_CLASSES, 1.0 / N_CLASSES)
                   if kind == "classification" else None)
        t_images, t_labels, t_latents = _make_split(t_rng, spec, t_size, t_props)
        world.tasks[kind] = TaskData(spec, clients, t_images, t_labels,
                                     t_latents)
    return world


# ---------------------------------------------------------------------------
# metrics


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties 0.5.

    Computed from the rank statistic (average ranks), which equals the
    pairwise count.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(
            f"scores/labels must be equal-length vectors, got "
            f"{scores.shape} and {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined without both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def multiclass_auc(scores: np.ndarray, onehot: np.ndarray) -> float:
    """Mean of one-vs-rest AUCs over classes."""
    scores = np.asarray(scores, dtype=np.float64)
    onehot = np.asarray(onehot)
    if scores.shape != onehot.shape or scores.ndim != 2:
        raise MetricError(f"expected [N,K] scores/onehot, got {scores.shape}")
    return float(np.mean([auc(scores[:, k], onehot[:, k])
                          for k in range(scores.shape[1])]))


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def dice(pred_mask, truth, threshold: float = 0.5) -> float:
    """2|A&B| / (|A|+|B|) after binarizing both at the threshold; the
    both-empty case scores 1.0."""
    a = np.asarray(pred_mask, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    a = a > threshold
    b = b > threshold
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


# ---------------------------------------------------------------------------
# dump / load


def dump_world(world: SyntheticWorld, tensor_path, manifest_path) -> None:
    """Persist datasets in the named-tensor container plus a plain-text
    manifest of per-client composition."""
    named: dict[str, np.ndarray] = {}
    lines = [f"seed = {world.seed}"]
    for kind, task in world.tasks.items():
        for cd in task.clients:
            base = f"{kind}.client{cd.client_id}"
            named[f"{base}.images"] = cd.images
            named[f"{base}.labels"] = cd.labels
            named[f"{base}.latents"] = cd.latents
            if kind == "classification":
                counts = cd.labels.sum(axis=0).astype(int)
                comp = " ".join(f"class{k}={c}" for k, c in enumerate(counts))
            else:
                comp = f"samples={cd.n_samples}"
            lines.append(f"{base}: {comp}")
        named[f"{kind}.test.images"] = task.test_images
        named[f"{kind}.test.labels"] = task.test_labels
        named[f"{kind}.test.latents"] = task.test_latents
        lines.append(f"{kind}.test: samples={task.test_images.shape[0]}")
    save_tensors(tensor_path, named)
    with open(manifest_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_world(tensor_path, seed: int = 0) -> SyntheticWorld:
    named = load_tensors(tensor_path)
    world = SyntheticWorld(seed=seed)
    kinds = sorted({key.split(".")[0] for key in named})
    for kind in kinds:
        client_ids = sorted({int(key.split(".")[1].removeprefix("client"))
                             for key in named
                             if key.startswith(f"{kind}.client")})
        clients = [ClientData(cid,
                              named[f"{kind}.client{cid}.images"],
                              named[f"{kind}.client{cid}.labels"],
                              named[f"{kind}.client{cid}.latents"])
                   for cid in client_ids]
        h, w = named[f"{kind}.test.images"].shape[2:]
        world.tasks[kind] = TaskData(
            TaskSpec(kind, h, w), clients,
            named[f"{kind}.test.images"], named[f"{kind}.test.labels"],
            named[f"{kind}.test.latents"])
    return world
