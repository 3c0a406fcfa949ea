"""Feature-inversion oracle quantifying what an interceptor can reconstruct
from transmitted patch features, under combinations of three knowledge flags:
the embedder weights, the position embedding table, and the permutation key.

The attacker math runs in float64 on top of the float32 features exactly as
the transport would carry them. Policies per flag set:

  * permutation known: rows are un-shuffled with the key; else patches are
    placed in identity order (the interceptor's only defensible guess).
  * position table known + order known: subtract per-position rows; known
    but order unknown: subtract the table MEAN (the minimum-MSE use of the
    table under a uniformly unknown permutation).
  * embedder known: least-squares inversion of the projection (requires an
    injective projection, i.e. full-rank with d >= patch_dim); unknown:
    the zero reconstruction (no informative prior).

Assignment accuracy is the fraction of rows matched to their true position:
with the key it is 1; with only the position table, nearest-anchor matching
in feature space; otherwise the identity guess.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import model, perm

__all__ = ["AttackError", "AttackScenario", "InversionResult", "patchify",
           "make_scenario", "invert", "attack_head", "run_scenario_grid",
           "write_attack_csv", "pos_residual_norms"]


class AttackError(ValueError):
    """Oracle preconditions violated (rank-deficient projection, ...)."""


@dataclass(frozen=True)
class AttackScenario:
    knows_embedder: bool
    knows_pos_embedding: bool
    knows_permutation: bool
    intercepted: np.ndarray          # [n, d] float32, as transmitted
    true_patches: np.ndarray         # [n, patch_dim] ground truth, raster order
    key: perm.PermutationKey


@dataclass(frozen=True)
class InversionResult:
    reconstruction: np.ndarray       # [n, patch_dim]
    per_patch_mse: np.ndarray        # [n]
    assignment_accuracy: float

    @property
    def mse(self) -> float:
        return float(self.per_patch_mse.mean())


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """Ground-truth patches in raster order, channel-major within a patch.
    Independent of the embedding path on purpose."""
    C, H, W = image.shape
    gh, gw = H // patch, W // patch
    view = image.reshape(C, gh, patch, gw, patch)
    return view.transpose(1, 3, 0, 2, 4).reshape(gh * gw, C * patch * patch)


def attack_head(cfg: model.ModelConfig, seed: int) -> model.HeadParams:
    """Well-conditioned random head for inversion studies: orthonormal
    projection columns, small-scale position table."""
    if cfg.d < cfg.patch_dim:
        raise AttackError(
            f"injective projection needs d >= patch_dim, got "
            f"{cfg.d} < {cfg.patch_dim}")
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, 0xA77C])))
    head = model.HeadParams(cfg, frozen=True)
    gauss = rng.normal(size=(cfg.d, cfg.d))
    q, _ = np.linalg.qr(gauss)
    head.weight.data = q[:cfg.patch_dim, :].astype(cfg.dtype)
    head.bias.data = rng.uniform(-0.01, 0.01, cfg.d).astype(cfg.dtype)
    head.pos.data = rng.normal(0.0, 0.05,
                               (cfg.n_tokens, cfg.d)).astype(cfg.dtype)
    return head


def make_scenario(image: np.ndarray, head: model.HeadParams,
                  key: perm.PermutationKey, knows_embedder: bool,
                  knows_pos_embedding: bool,
                  knows_permutation: bool) -> AttackScenario:
    """Build the interceptor's view: permuted float32 features exactly as
    the wire would carry them."""
    from .engine import Tensor, no_grad
    with no_grad():
        tokens = model.embed_patches(Tensor(image), head).data
    intercepted = np.ascontiguousarray(tokens[key.forward])
    return AttackScenario(knows_embedder, knows_pos_embedding,
                          knows_permutation, intercepted,
                          patchify(image, head.cfg.patch), key)


def pos_residual_norms(head: model.HeadParams) -> np.ndarray:
    """Per-position reconstruction residual left by an unsubtracted position
    embedding: ||pos_i @ pinv(W)|| for each position i."""
    winv = np.linalg.pinv(head.weight.data.astype(np.float64))  # [d, patch_dim]
    return np.linalg.norm(head.pos.data.astype(np.float64) @ winv, axis=1)


def invert(sc: AttackScenario, head: model.HeadParams) -> InversionResult:
    """Reconstruct patches from intercepted features under the scenario's
    knowledge flags; score against the ground truth."""
    cfg = head.cfg
    n, d = sc.intercepted.shape
    w = head.weight.data.astype(np.float64)
    if np.linalg.matrix_rank(w) < cfg.patch_dim:
        raise AttackError("projection is rank-deficient; oracle undefined")
    z = sc.intercepted.astype(np.float64)
    pos = head.pos.data.astype(np.float64)
    bias = head.bias.data.astype(np.float64)
    truth = sc.true_patches.astype(np.float64)

    if sc.knows_permutation:
        rows = z[sc.key.inverse]                # true raster order
        estimated = sc.key.forward.copy()
        if sc.knows_pos_embedding:
            rows = rows - pos
    else:
        rows = z.copy()                         # identity-order guess
        if sc.knows_pos_embedding:
            rows = rows - pos.mean(axis=0)      # order-free Bayes estimate
            anchors = np.linalg.norm(
                z[:, None, :] - pos[None, :, :], axis=2)
            estimated = anchors.argmin(axis=1)
        else:
            estimated = np.arange(n)

    if sc.knows_embedder:
        sol, *_ = np.linalg.lstsq(w.T, (rows - bias).T, rcond=None)
        recon = sol.T
    else:
        recon = np.zeros_like(truth)

    per_patch = ((recon - truth) ** 2).mean(axis=1)
    accuracy = float(np.mean(estimated == sc.key.forward))
    return InversionResult(recon, per_patch, accuracy)


FLAG_GRID = list(product((True, False), repeat=3))


def run_scenario_grid(images: np.ndarray, head: model.HeadParams, seed: int,
                      trials: int = 200) -> list[dict]:
    """Average MSE / assignment accuracy per knowledge combination over
    randomly drawn (image, key) trials. One row per flag combination."""
    rows = []
    for ke, kp, kk in FLAG_GRID:
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, int(ke), int(kp), int(kk)])))
        mses, accs = [], []
        for t in range(trials):
            img = images[int(rng.integers(images.shape[0]))]
            key = perm.generate_key(t, head.cfg.n_tokens, rng)
            sc = make_scenario(img, head, key, ke, kp, kk)
            res = invert(sc, head)
            mses.append(res.mse)
            accs.append(res.assignment_accuracy)
        rows.append({
            "knows_embedder": ke,
            "knows_pos_embedding": kp,
            "knows_permutation": kk,
            "mean_mse": float(np.mean(mses)),
            "assignment_accuracy": float(np.mean(accs)),
            "trials": trials,
        })
    return rows


def write_attack_csv(path, rows: list[dict]) -> None:
    fields = ["knows_embedder", "knows_pos_embedding", "knows_permutation",
              "mean_mse", "assignment_accuracy", "trials"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow(row)
