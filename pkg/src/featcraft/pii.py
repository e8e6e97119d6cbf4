"""Privacy and utility metrics: exact and dual EMD, epsilon-PII, SSIM, recognition accuracy, AUC."""

from __future__ import annotations

import csv
import io
from collections.abc import Callable
from dataclasses import asdict, dataclass

import numpy as np

from .assignment import brute_force_assignment, linear_assignment, pairwise_euclidean
from .attacks import invert_whitebox
from .diffcore import Adam, gradients, ops
from .nets import LayerStack, gradient_penalty, oracle_predict
from .synthdata import normalize_to_reference

SSIM_K1 = 0.01
SSIM_K2 = 0.03
METRICS_COLUMNS = ("beta", "utility_auc", "eval_acc", "ssim", "fsim", "epsilon")


class SampleSet:
    """``n`` equally weighted points in R^D (images are flattened)."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        pts = pts.reshape(len(pts), -1)
        if len(pts) < 1:
            raise ValueError("a sample set needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("sample set contains non-finite entries")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _as_set(s) -> SampleSet:
    return s if isinstance(s, SampleSet) else SampleSet(s)


@dataclass
class MetricsRecord:
    eval_acc: float
    fsim: float
    ssim: float
    utility: float
    epsilon: float

    def __post_init__(self):
        checks = {
            "eval_acc": (0.0, 1.0),
            "fsim": (-1.0, 1.0),
            "ssim": (-1.0, 1.0),
            "utility": (0.0, 1.0),
            "epsilon": (0.0, np.inf),
        }
        for name, (lo, hi) in checks.items():
            val = getattr(self, name)
            # NaN marks "not measured" (e.g. no reconstruction for a public-only row)
            if not np.isnan(val) and not (lo - 1e-12 <= val <= hi + 1e-12):
                raise ValueError(f"{name}={val} outside [{lo}, {hi}]")

    def csv_row(self, beta: float) -> str:
        vals = [beta, self.utility, self.eval_acc, self.ssim, self.fsim, self.epsilon]
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow([format_float(v) for v in vals])
        return buf.getvalue()

    def as_dict(self) -> dict:
        return asdict(self)


def format_float(v: float) -> str:
    return repr(float(v)) if np.isnan(v) else f"{float(v):.17g}"


# -- transport distances ---------------------------------------------------


def emd_exact(p, q, scale: bool = False, method: str = "auto") -> float:
    """Exact EMD between two equal-size uniform empirical measures (Euclidean ground cost).

    The optimal coupling is a permutation, found by exhaustive search for
    ``n <= 8`` (``method="auto"`` or ``"brute"``) and by the Hungarian
    solver otherwise.  ``scale`` divides by the dimension ``D``.
    """
    p, q = _as_set(p), _as_set(q)
    if len(p) != len(q):
        raise ValueError(f"sample sets differ in size ({len(p)} vs {len(q)})")
    if p.dim != q.dim:
        raise ValueError("sample sets differ in dimension")
    cost = pairwise_euclidean(p.points, q.points)
    if method == "brute" or (method == "auto" and len(p) <= 8):
        cols = brute_force_assignment(cost)
    elif method in ("auto", "hungarian"):
        cols = linear_assignment(cost)
    else:
        raise ValueError(f"unknown method {method!r}")
    val = float(cost[np.arange(len(p)), cols].mean())
    return val / p.dim if scale else val


def make_critic(dim: int, hidden=(64, 64), rng=None, zero_last: bool = False) -> LayerStack:
    """A leaky-ReLU critic suitable as a ``disc_template`` for :func:`emd_dual`."""
    widths = [dim, *hidden, 1]
    return LayerStack(widths, ["leaky_relu"] * len(hidden) + ["linear"], rng=rng, zero_last=zero_last)


def emd_dual(
    disc_template: LayerStack,
    p,
    q,
    train_steps: int = 500,
    gp_weight: float = 10.0,
    lr: float = 1e-3,
    batch_size: int = 128,
    seed: int = 0,
) -> float:
    """Neural-net distance: ``|E_P[D] - E_Q[D]|`` for a critic trained from ``disc_template``.

    The template is copied, never modified.  The critic maximises the mean
    gap under a gradient penalty that keeps it near 1-Lipschitz.  The
    Lipschitz class is closed under negation, so the absolute gap is a valid
    estimate; it matters when the penalty traps the critic in the mirrored
    optimum (a 1-D critic cannot flip the sign of its slope without crossing
    zero slope, where the penalty is largest).
    """
    p, q = _as_set(p).points, _as_set(q).points
    if p.shape[1] != disc_template.n_in or q.shape[1] != disc_template.n_in:
        raise ValueError("critic input width does not match the sample dimension")
    disc = disc_template.copy()
    rng = np.random.default_rng(seed)
    opt = Adam(disc.params, lr=lr, betas=(0.5, 0.9))
    m = min(batch_size, len(p), len(q))
    for _ in range(train_steps):
        a = p[rng.choice(len(p), m, replace=False)]
        b = q[rng.choice(len(q), m, replace=False)]
        pv = disc.vars()
        gap = ops.mean(disc(a, pv)) - ops.mean(disc(b, pv))
        loss = -gap + gp_weight * gradient_penalty(disc, a, b, rng.uniform(size=m), pv)
        if not np.isfinite(loss.item()):
            raise FloatingPointError("critic training diverged")
        grads = gradients(loss, list(pv.values()))
        opt.step({k: g.data for k, g in zip(pv, grads)})
    return float(abs(disc.predict(p).mean() - disc.predict(q).mean()))


def pii_epsilon(
    craft_fn: Callable,
    enc: LayerStack,
    gen: LayerStack,
    x_pvt,
    x_pub=None,
    inversion_iters: int = 600,
    latent_lr: float = 0.01,
    seed: int = 0,
    reference: str = "prior",
    scale: bool = True,
) -> float:
    """Empirical epsilon of perceptual inversion indistinguishability.

    Crafts features for ``x_pvt`` with ``craft_fn`` (images -> features),
    inverts them white-box, and returns the exact EMD between the
    reconstructions and an equal-count reference set.  With
    ``reference="prior"`` the reference is ``G(z_r)`` for fresh standard
    normal ``z_r``; with ``reference="public"`` it is the same pipeline run on
    ``x_pub`` after normalising it to ``x_pvt``'s pixel statistics.
    """
    x_pvt = np.asarray(x_pvt, dtype=np.float64).reshape(len(x_pvt), -1)
    n = len(x_pvt)
    recon = invert_whitebox(enc, gen, craft_fn(x_pvt), iters=inversion_iters, lr=latent_lr, seed=seed).x_hat
    if reference == "prior":
        return epsilon_from_reconstruction(recon, gen, seed=seed, scale=scale)
    if reference != "public":
        raise ValueError(f"unknown reference {reference!r}")
    if x_pub is None:
        raise ValueError("reference='public' needs x_pub")
    x_pub = np.asarray(x_pub, dtype=np.float64).reshape(len(x_pub), -1)[:n]
    if len(x_pub) != n:
        raise ValueError("x_pub must hold at least as many images as x_pvt")
    if not np.array_equal(x_pub, x_pvt):
        x_pub = normalize_to_reference(x_pub, x_pvt)
    ref = invert_whitebox(enc, gen, craft_fn(x_pub), iters=inversion_iters, lr=latent_lr, seed=seed).x_hat
    return emd_exact(recon, ref, scale=scale)


def prior_images(gen: LayerStack, n: int, seed: int = 0) -> np.ndarray:
    """``n`` samples ``G(z_r)`` of the non-private prior, ``z_r`` standard normal."""
    return gen.predict(np.random.default_rng(seed).standard_normal((n, gen.n_in)))


def epsilon_from_reconstruction(recon, gen: LayerStack, seed: int = 0, scale: bool = True, draws: int = 1) -> float:
    """Exact EMD between white-box reconstructions and an equal-count prior sample.

    With ``draws > 1`` the EMD is averaged over independent prior samples,
    which lowers the variance contributed by the reference set.
    """
    if draws < 1:
        raise ValueError("draws must be at least 1")
    recon = np.asarray(recon, dtype=np.float64)
    vals = [emd_exact(recon, prior_images(gen, len(recon), seed + 7919 * k), scale=scale) for k in range(draws)]
    return float(np.mean(vals))


# -- perceptual and task metrics -------------------------------------------


def ssim_per_image(a, b, data_range: float = 1.0) -> np.ndarray:
    """SSIM of each image pair, computed over one global window per image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = a.mean(1), b.mean(1)
    da, db = a - mu_a[:, None], b - mu_b[:, None]
    var_a, var_b = (da**2).mean(1), (db**2).mean(1)
    cov = (da * db).mean(1)
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean global-window SSIM over a batch."""
    return float(ssim_per_image(a, b, data_range).mean())


def _cosine_rows(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    denom = nu * nv
    out = np.zeros(len(u))
    ok = denom > 0
    out[ok] = (u[ok] * v[ok]).sum(1) / denom[ok]
    return out


def recognition_metrics(id_oracle: LayerStack, reconstructed, originals, true_ids) -> tuple[float, float]:
    """``(eval_acc, fsim)``: oracle top-1 accuracy on reconstructions, and the
    mean cosine similarity of penultimate oracle features between
    reconstructions and originals."""
    if getattr(id_oracle, "classes", None) is None:
        raise ValueError("identity oracle has not been trained")
    rec = np.asarray(reconstructed, dtype=np.float64)
    rec = rec.reshape(len(rec), -1)
    org = np.asarray(originals, dtype=np.float64).reshape(len(rec), -1)
    pred = oracle_predict(id_oracle, rec)
    acc = float(np.mean(pred == np.asarray(true_ids)))
    fsim = float(_cosine_rows(id_oracle.penultimate(rec), id_oracle.penultimate(org)).mean())
    return acc, fsim


def mann_whitney_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC is undefined with a single class")
    # average ranks handle ties
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    _, first, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    avg = first + (counts + 1) / 2.0
    ranks[order] = np.repeat(avg, counts)
    r_pos = ranks[labels].sum()
    return float((r_pos - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))


def utility_score(task_head: LayerStack, features, labels) -> float:
    """Mann-Whitney AUC of the task head's scores, averaged over attribute columns."""
    scores = task_head.predict(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    if scores.shape[1] != labels.shape[1]:
        raise ValueError("task head output width does not match the number of attributes")
    return float(np.mean([mann_whitney_auc(scores[:, j], labels[:, j]) for j in range(labels.shape[1])]))
