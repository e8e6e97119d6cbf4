"""Feature crafting: bilevel optimisation of released features against a simulated inverter.

The defender moves the released features ``F`` so that the white-box
attacker's best-response reconstruction ``G(z*(F))`` looks like a draw from
the public prior ``G(z_r)``, while ``F`` stays close to ``Enc(X)``.  The
gradient through ``z*(F)`` comes from the implicit function theorem with a
truncated Neumann series standing in for the inverse Hessian.
"""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .attacks import feature_residuals, inversion_loss, invert_whitebox
from .diffcore import Adam, AdamState, HessianOperator, Var, adam_step, gradients
from .diffcore import ops
from .nets import LayerStack, gradient_penalty

log = logging.getLogger(__name__)


class NeumannDivergence(ArithmeticError):
    """The Neumann iterate kept growing: ``alpha`` is too large for this Hessian."""

    def __init__(self, msg: str, partial: np.ndarray):
        super().__init__(msg)
        self.partial = partial


@dataclass
class CraftConfig:
    beta: float = 1.0
    utility: str = "norm"
    lp_weight: float = 1.0
    prior_pool: int = 1
    n_critic: int = 5
    flr: float = 0.01
    outer_iters: int = 500
    neumann_alpha: float = 0.001
    neumann_iters: int = 150
    inner_iters: int = 600
    inner_warm_iters: int = 20
    inner_lr: float = 0.01
    warm_lr: float = 0.05
    minibatch: int = 16
    disc_hidden: tuple[int, ...] = (64,)
    disc_lr: float = 1e-3
    gp_weight: float = 10.0
    zlr: float = 0.01
    blockwise_hessian: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.neumann_alpha <= 0:
            raise ValueError("neumann_alpha must be positive")
        if self.utility not in UTILITY_FORMS:
            raise ValueError(f"utility must be one of {UTILITY_FORMS}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        for name in ("n_critic", "minibatch", "inner_iters", "prior_pool"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.outer_iters < 0 or self.neumann_iters < 0 or self.inner_warm_iters < 0:
            raise ValueError("iteration counts must be non-negative")


@dataclass
class CraftOutput:
    features: np.ndarray
    trajectory: list[tuple[float, float]] = field(default_factory=list)
    disc: LayerStack | None = None
    z_star: np.ndarray | None = None
    z_prior: np.ndarray | None = None
    stationarity: list[float] = field(default_factory=list)
    neumann_diverged: int = 0


def approx_inverse_hvp(v, hvp_fn: Callable[[np.ndarray], np.ndarray], alpha: float, iters: int, patience: int = 10) -> np.ndarray:
    """``alpha * sum_{j=0..iters} (I - alpha H)^j v``, a truncated Neumann series for ``H^{-1} v``.

    Raises :class:`NeumannDivergence` (carrying the partial sum) when the
    iterate's norm grows ``patience`` steps in a row.
    """
    v = np.array(v, dtype=np.float64)
    p = v.copy()
    prev = np.linalg.norm(v)
    growing = 0
    for _ in range(iters):
        v = v - alpha * hvp_fn(v)
        p += v
        cur = np.linalg.norm(v)
        growing = growing + 1 if cur > prev else 0
        prev = cur
        if growing >= patience or not np.isfinite(cur):
            raise NeumannDivergence(
                f"Neumann iterate grew for {growing} consecutive steps; "
                f"spectral radius of I - alpha*H likely exceeds 1 (alpha={alpha})",
                alpha * p,
            )
    return alpha * p


UTILITY_FORMS = ("norm", "squared")


def utility_loss(f: Var, f0: np.ndarray, form: str = "norm") -> Var:
    """Batch mean of the per-sample distance ``||F_i - Enc(X_i)||_2`` (``form="norm"``)
    or of half its square (``form="squared"``)."""
    d = f - f0
    if form == "norm":
        return ops.mean(ops.row_norm(d))
    if form == "squared":
        return 0.5 * ops.mean(ops.sum(ops.square(d), axis=1))
    raise ValueError(f"unknown utility form {form!r}")


def per_sample_hessian(hop: HessianOperator) -> np.ndarray:
    """The ``(b, d, d)`` diagonal blocks of the latent Hessian of a per-sample-separable loss.

    When the loss is a sum of per-sample terms, each row of ``z`` only
    interacts with itself, so ``d`` batched products with one-hot columns
    recover every block exactly.
    """
    b, d = hop.x.shape
    blocks = np.empty((b, d, d))
    for i in range(d):
        e = np.zeros((b, d))
        e[:, i] = 1.0
        blocks[:, :, i] = hop.hvp(e)
    return blocks


def indirect_gradient(
    enc: LayerStack,
    gen: LayerStack,
    features,
    z_star,
    dlp_dz,
    alpha: float = 0.001,
    iters: int = 150,
    stationarity_tol: float | None = None,
    inv_loss: Callable[[Var, Var], Var] | None = None,
    blockwise: bool = False,
    info: dict | None = None,
) -> np.ndarray:
    """Hypergradient of the privacy loss with respect to the released features.

    ``-(dL_p/dz*) [d2 L_inv/dz dz]^-1 (d2 L_inv/dz dF)``, with the inverse
    applied by :func:`approx_inverse_hvp`.  ``inv_loss(F, z)`` overrides the
    default encoder/generator inversion loss.  ``blockwise=True`` assumes the
    loss separates over batch rows and runs the Neumann loop on the exact
    per-sample Hessian blocks (same series, far fewer double-backward passes).
    ``info``, if given, receives the stationarity measure and whether the
    series diverged.
    """
    fv = Var(np.asarray(features, dtype=np.float64), requires_grad=True)
    zv = Var(np.asarray(z_star, dtype=np.float64), requires_grad=True)
    loss = inv_loss(fv, zv) if inv_loss is not None else inversion_loss(enc, gen, fv, zv)
    hop = HessianOperator(loss, zv, others=(fv,))
    gnorm = float(np.linalg.norm(hop.grad_x.data, axis=-1).max())
    if info is not None:
        info["stationarity"] = gnorm
        info["diverged"] = False
    if stationarity_tol is not None and gnorm > stationarity_tol:
        log.warning("inner problem not stationary: max ||dL_inv/dz|| = %.3g", gnorm)
    dlp_dz = np.asarray(dlp_dz, dtype=np.float64)
    if not np.any(dlp_dz):
        return np.zeros_like(fv.data)
    if blockwise:
        blocks = per_sample_hessian(hop)

        def hvp_fn(v):
            return np.einsum("bij,bj->bi", blocks, v)

    else:
        hvp_fn = hop.hvp
    try:
        v1 = approx_inverse_hvp(dlp_dz, hvp_fn, alpha, iters)
    except NeumannDivergence as exc:
        if info is not None:
            info["diverged"] = True
        else:
            log.warning("%s; using the partial sum", exc)
        v1 = exc.partial
    (mixed,) = hop.mixed(v1)
    return -mixed


def _solve_inner(enc, gen, f, z0, iters, lr, rng) -> np.ndarray:
    """Cold white-box solve, retried once at half the step size if it diverges."""
    inv = invert_whitebox(enc, gen, f, z0=z0, iters=iters, lr=lr, seed=int(rng.integers(2**31)))
    if inv.diverged:
        log.warning("inner inversion diverged; retrying with lr=%g", lr / 2)
        inv = invert_whitebox(enc, gen, f, z0=z0, iters=iters, lr=lr / 2, seed=int(rng.integers(2**31)))
        if inv.diverged:
            raise FloatingPointError("inner inversion diverged twice")
    return inv.z


def refine_latent(enc: LayerStack, gen: LayerStack, f, z, iters: int, lr: float) -> np.ndarray:
    """Track ``z*(F)`` after a small change of ``F`` with plain gradient descent.

    Unlike Adam, plain descent barely moves along near-flat directions of the
    inversion loss, so the tracked solution does not wander off along them
    over hundreds of outer steps.  Each sample keeps its own step size, grown
    after an accepted step and halved after a rejected one; a step is
    accepted only when it lowers that sample's inversion loss.
    """
    f = np.asarray(f, dtype=np.float64)
    z = np.array(z, dtype=np.float64)
    fv = Var(f)
    best = feature_residuals(enc, gen, f, z)
    step = np.full((len(z), 1), float(lr))
    for _ in range(iters):
        zv = Var(z, requires_grad=True)
        (g,) = gradients(inversion_loss(enc, gen, fv, zv), [zv])
        cand = z - step * g.data
        res = feature_residuals(enc, gen, f, cand)
        if not np.all(np.isfinite(res)):
            raise FloatingPointError("latent refinement produced non-finite residuals")
        ok = res < best
        z[ok], best[ok] = cand[ok], res[ok]
        step[ok] *= 1.2
        step[~ok] *= 0.5
    return z


def _sample_rows(rng, n, m):
    return rng.choice(n, size=min(m, n), replace=False)


class _Critic:
    """The crafting-time discriminator, updated incrementally across outer steps."""

    def __init__(self, n_in: int, cfg: CraftConfig, rng: np.random.Generator):
        widths = [n_in, *cfg.disc_hidden, 1]
        self.net = LayerStack(widths, ["leaky_relu"] * len(cfg.disc_hidden) + ["linear"], rng=rng)
        self.opt = Adam(self.net.params, lr=cfg.disc_lr, betas=(0.5, 0.9))
        self.cfg = cfg

    def train(self, recon: np.ndarray, prior: np.ndarray, rng: np.random.Generator) -> None:
        cfg = self.cfg
        for _ in range(cfg.n_critic):
            a = recon[_sample_rows(rng, len(recon), cfg.minibatch)]
            b = prior[_sample_rows(rng, len(prior), cfg.minibatch)]
            m = min(len(a), len(b))
            a, b = a[:m], b[:m]
            p = self.net.vars()
            loss = ops.mean(self.net(a, p)) - ops.mean(self.net(b, p))
            loss = loss + cfg.gp_weight * gradient_penalty(self.net, a, b, rng.uniform(size=m), p)
            grads = gradients(loss, list(p.values()))
            self.opt.step({k: g.data for k, g in zip(p, grads)})

    def privacy_loss_grad(self, gen: LayerStack, z: np.ndarray) -> tuple[float, np.ndarray]:
        """``L_p = -mean D(G(z))`` and its gradient in ``z``."""
        zv = Var(z, requires_grad=True)
        lp = -ops.mean(self.net(gen(zv)))
        (g,) = gradients(lp, [zv])
        return lp.item(), g.data


def craft(enc: LayerStack, gen: LayerStack, x, cfg: CraftConfig, rng=None, z_prior=None, callback=None) -> CraftOutput:
    """Protect a batch of images: return crafted features ``F*`` for ``x``.

    ``rng`` supplies the per-call randomness (prior latents, critic
    initialisation, minibatches); pass a shared Generator to get fresh prior
    latents on every call.  ``callback(it, features, z_star)`` is invoked
    after each outer iteration.
    """
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    b, d = len(x), gen.n_in
    if b < 2 * min(cfg.minibatch, b // 2 or 1):
        raise ValueError("batch must hold at least two critic minibatches")
    f0 = enc.predict(x)
    f = f0.copy()
    out = CraftOutput(features=f, z_prior=None)
    z_r = rng.standard_normal((cfg.prior_pool * b, d)) if z_prior is None else np.asarray(z_prior, dtype=np.float64)
    out.z_prior = z_r
    if cfg.outer_iters == 0:
        out.features = f0.copy()
        return out
    prior_imgs = gen.predict(z_r)
    critic = _Critic(gen.n_out, cfg, rng)
    state = AdamState(f.shape, lr=cfg.flr)
    z = None
    inner_lr = cfg.inner_lr
    for it in range(cfg.outer_iters):
        if z is None:
            z = _solve_inner(enc, gen, f, None, cfg.inner_iters, inner_lr, rng)
        else:
            z = refine_latent(enc, gen, f, z, cfg.inner_warm_iters, cfg.warm_lr)
        critic.train(gen.predict(z), prior_imgs, rng)
        lp, dlp_dz = critic.privacy_loss_grad(gen, z)
        dlp_dz = cfg.lp_weight * dlp_dz
        info: dict = {}
        hyper = indirect_gradient(
            enc, gen, f, z, dlp_dz, cfg.neumann_alpha, cfg.neumann_iters, blockwise=cfg.blockwise_hessian, info=info
        )
        out.stationarity.append(info["stationarity"])
        out.neumann_diverged += int(info["diverged"])
        fv = Var(f, requires_grad=True)
        lu = utility_loss(fv, f0, cfg.utility)
        (du,) = gradients(lu, [fv])
        out.trajectory.append((lp, lu.item()))
        f = adam_step(state, f, cfg.beta * du.data + hyper)
        if callback is not None:
            callback(it, f, z)
    if out.neumann_diverged:
        log.warning(
            "Neumann series diverged in %d of %d outer steps (alpha=%g); partial sums were used",
            out.neumann_diverged, cfg.outer_iters, cfg.neumann_alpha,
        )
    out.features = f
    out.disc = critic.net
    out.z_star = refine_latent(enc, gen, f, z, cfg.inner_warm_iters, cfg.warm_lr)
    return out


def craft_z(enc: LayerStack, gen: LayerStack, x, cfg: CraftConfig, rng=None, z_prior=None) -> CraftOutput:
    """Latent-space variant: optimise ``z`` directly and release ``Enc(G(z))``.

    No implicit differentiation; the privacy and utility gradients are both
    taken in ``z``.
    """
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    b, d = len(x), gen.n_in
    f0 = enc.predict(x)
    z = invert_whitebox(enc, gen, f0, iters=cfg.inner_iters, lr=cfg.inner_lr, seed=int(rng.integers(2**31))).z
    z_r = rng.standard_normal((cfg.prior_pool * b, d)) if z_prior is None else np.asarray(z_prior, dtype=np.float64)
    out = CraftOutput(features=enc.predict(gen.predict(z)), z_prior=z_r)
    if cfg.outer_iters == 0:
        out.z_star = z
        return out
    prior_imgs = gen.predict(z_r)
    critic = _Critic(gen.n_out, cfg, rng)
    state = AdamState(z.shape, lr=cfg.zlr)
    for _ in range(cfg.outer_iters):
        critic.train(gen.predict(z), prior_imgs, rng)
        zv = Var(z, requires_grad=True)
        lp = -ops.mean(critic.net(gen(zv)))
        lu = utility_loss(enc(gen(zv)), f0, cfg.utility)
        gz = gradients(cfg.beta * lu + cfg.lp_weight * lp, [zv])[0].data
        out.trajectory.append((lp.item(), lu.item()))
        z = adam_step(state, z, gz)
    out.features = enc.predict(gen.predict(z))
    out.z_star = z
    out.disc = critic.net
    return out


@dataclass
class ShuffledRelease:
    """Features as released (in the shuffled order) plus the user's secret permutation."""

    features: np.ndarray
    perm: np.ndarray
    cached: bool = False

    def aligned(self) -> np.ndarray:
        """Features re-ordered to the caller's input order."""
        out = np.empty_like(self.features)
        out[self.perm] = self.features
        return out


class ShuffleGuard:
    """Shuffle each batch before crafting; replay cached output for small repeated batches.

    The released feature rows follow a fresh random permutation of the
    input rows, so averaging several responses to the same batch mixes
    features of different images.  Only the querying user holds the
    permutation (``ShuffledRelease.aligned`` undoes it).
    """

    def __init__(self, craft_fn: Callable, cfg: CraftConfig, rng=None, cache_threshold: int = 8):
        self.craft_fn = craft_fn
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed if rng is None else rng)
        self.cache: dict[str, ShuffledRelease] = {}
        self.cache_threshold = cache_threshold

    def __call__(self, x) -> ShuffledRelease:
        return shuffle_defense(self.craft_fn, x, self.cfg, self.cache, self.rng, self.cache_threshold)


def batch_key(x) -> str:
    x = np.ascontiguousarray(x, dtype=np.float64)
    return hashlib.sha256(repr(x.shape).encode() + x.tobytes()).hexdigest()


def shuffle_defense(craft_fn: Callable, x, cfg: CraftConfig, cache: dict | None, rng=None, cache_threshold: int = 8) -> ShuffledRelease:
    """Craft ``x`` under a fresh row permutation.

    ``craft_fn(x, cfg, rng)`` returns a feature array (or a CraftOutput).
    Batches smaller than ``cache_threshold`` are answered from ``cache`` after
    their first query.
    """
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    x = np.asarray(x, dtype=np.float64)
    small = len(x) < cache_threshold
    key = batch_key(x) if (small and cache is not None) else None
    if key is not None and key in cache:
        hit = cache[key]
        return ShuffledRelease(hit.features.copy(), hit.perm.copy(), cached=True)
    perm = rng.permutation(len(x))
    res = craft_fn(x[perm], cfg, rng)
    feats = np.asarray(getattr(res, "features", res), dtype=np.float64)
    release = ShuffledRelease(feats, perm)
    if key is not None:
        cache[key] = ShuffledRelease(feats.copy(), perm.copy())
    return release


class CraftService:
    """Crafting as a service: every call draws fresh randomness from one Generator."""

    def __init__(self, enc: LayerStack, gen: LayerStack, cfg: CraftConfig, method: str = "craft"):
        self.enc, self.gen, self.cfg = enc, gen, cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.fn = craft if method == "craft" else craft_z
        self.calls = 0

    def craft(self, x, cfg: CraftConfig | None = None, rng=None) -> np.ndarray:
        self.calls += 1
        return self.fn(self.enc, self.gen, x, cfg or self.cfg, rng=self.rng if rng is None else rng).features

    __call__ = craft
