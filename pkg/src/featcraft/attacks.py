"""Model-inversion attackers: black-box decoder, white-box latent search, hybrid, and A1/A3."""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Adam, AdamState, NumericError, RMSProp, Var, adam_step, gradients, no_grad
from .diffcore import ops
from .nets import LayerStack, TrainReport

log = logging.getLogger(__name__)

ATTACK_KINDS = ("black", "white", "hybrid", "a1-white", "a1-black", "a3")


@dataclass
class AttackConfig:
    kind: str = "white"
    inversion_iters: int = 600
    latent_lr: float = 0.01
    adaptive_epochs: int = 30
    adaptive_lr: float = 1e-3
    a3_queries: int = 5
    hybrid_iters: int = 150
    hybrid_lr: float = 0.005
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        for name in ("inversion_iters", "adaptive_epochs", "a3_queries", "restarts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class InversionResult:
    x_hat: np.ndarray
    z: np.ndarray | None
    loss: float
    iters: int
    per_sample: np.ndarray = field(repr=False, default=None)
    history: list[float] = field(repr=False, default_factory=list)
    diverged: bool = False


class QueryOracle:
    """Forward-only access to a model, counting queries.

    The black-box attacker sees only this wrapper; touching the weights is a
    contract violation.
    """

    def __init__(self, model: LayerStack):
        self._model = model
        self.queries = 0

    def __call__(self, x) -> np.ndarray:
        self.queries += 1
        return self._model.predict(x)

    @property
    def params(self):
        raise PermissionError("black-box access: encoder parameters are not readable")

    @property
    def n_out(self) -> int:
        return self._model.n_out


def _flat(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(len(x), -1)


def feature_residuals(enc: LayerStack, gen: LayerStack, target, z) -> np.ndarray:
    """Per-sample ||F - Enc(G(z))||_2."""
    return np.linalg.norm(enc.predict(gen.predict(z)) - _flat(target), axis=1)


def inversion_loss(enc: LayerStack, gen: LayerStack, f: Var, z: Var) -> Var:
    """Half the summed squared feature residual; same minimiser as the per-sample norm."""
    r = f - enc(gen(z))
    return 0.5 * ops.sum(ops.square(r))


def invert_whitebox(
    enc: LayerStack,
    gen: LayerStack,
    target_feature,
    z0=None,
    iters: int = 600,
    lr: float = 0.01,
    seed: int = 0,
    restarts: int = 1,
    tol: float = 0.0,
) -> InversionResult:
    """Search the generator's latent space for ``argmin_z ||F - Enc(G(z))||``.

    Adam on ``z``; the best iterate per sample is kept, so the reported loss
    never increases.  Extra restarts draw fresh standard-normal starts and
    keep the per-sample best.
    """
    target = _flat(target_feature)
    if target.shape[1] != enc.n_out:
        raise ValueError(f"target feature width {target.shape[1]} != encoder width {enc.n_out}")
    rng = np.random.default_rng(seed)
    b, d = len(target), gen.n_in
    starts = []
    if z0 is not None:
        starts.append(np.array(z0, dtype=np.float64).reshape(b, d))
    while len(starts) < max(restarts, 1):
        starts.append(rng.standard_normal((b, d)))

    best_z, best = None, None
    history: list[float] = []
    used = 0
    diverged = False
    fv = Var(target)
    for start in starts:
        z = start.copy()
        cur = feature_residuals(enc, gen, target, z)
        bz, bl = z.copy(), cur.copy()
        state = AdamState(z.shape, lr=lr)
        run_hist = [float(bl.mean())]
        for it in range(iters):
            if bl.max() <= tol:
                break
            zv = Var(z, requires_grad=True)
            try:
                loss = inversion_loss(enc, gen, fv, zv)
                (g,) = gradients(loss, [zv])
            except NumericError:
                diverged = True
                break
            z = adam_step(state, z, g.data)
            cur = feature_residuals(enc, gen, target, z)
            if not np.all(np.isfinite(cur)):
                diverged = True
                break
            better = cur < bl
            bz[better], bl[better] = z[better], cur[better]
            run_hist.append(float(bl.mean()))
            used = max(used, it + 1)
        if best is None:
            best_z, best, history = bz, bl, run_hist
        else:
            better = bl < best
            best_z[better], best[better] = bz[better], bl[better]
            history = [min(a, c) for a, c in zip(history, run_hist)] if len(run_hist) == len(history) else history
    if diverged:
        log.warning("white-box inversion hit a non-finite value; returning best iterate")
    return InversionResult(gen.predict(best_z), best_z, float(best.mean()), used, best, history, diverged)


def train_blackbox_decoder(
    enc_query: Callable,
    dec: LayerStack,
    x_pub,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> TrainReport:
    """Fit a shadow decoder on ``(enc(x), x)`` pairs using forward queries only."""
    x = _flat(x_pub)
    report = TrainReport(seed=seed, epochs=epochs)
    if epochs <= 0:
        return report
    feats = np.asarray(enc_query(x), dtype=np.float64)
    return fit_decoder(dec, feats, x, epochs, lr=lr, batch_size=batch_size, seed=seed)


def fit_decoder(dec: LayerStack, feats, x, epochs: int, lr: float = 1e-3, batch_size: int = 32, seed: int = 0, on_epoch=None, opt=None) -> TrainReport:
    x = _flat(x)
    feats = _flat(feats)
    rng = np.random.default_rng(seed)
    report = TrainReport(seed=seed, epochs=epochs)
    opt = opt or Adam(dec.params, lr=lr)
    for ep in range(epochs):
        total = 0.0
        perm = rng.permutation(len(x))
        for i in range(0, len(x), batch_size):
            idx = perm[i : i + batch_size]
            p = dec.vars()
            loss = ops.mean(ops.sum(ops.square(dec(feats[idx], p) - x[idx]), axis=1))
            grads = gradients(loss, list(p.values()))
            opt.step({k: g.data for k, g in zip(p, grads)})
            total += loss.item() * len(idx)
        report.losses.append(total / len(x))
        if on_epoch is not None:
            on_epoch(ep + 1, dec)
    return report


def reconstruction_error(dec: LayerStack, feats, x) -> float:
    """Mean per-image ||Dec(F) - X||_2."""
    return float(np.linalg.norm(dec.predict(feats) - _flat(x), axis=1).mean())


def attack_blackbox(dec: LayerStack, target_feature) -> InversionResult:
    x_hat = dec.predict(_flat(target_feature))
    return InversionResult(x_hat, None, float("nan"), 0)


def attack_hybrid(enc: LayerStack, dec: LayerStack, target_feature, iters: int = 150, lr: float = 0.005) -> InversionResult:
    """Start from the decoder's reconstruction and refine pixels against the encoder."""
    target = _flat(target_feature)
    x = dec.predict(target)
    fv = Var(target)

    def resid(img):
        return np.linalg.norm(enc.predict(img) - target, axis=1)

    bl = resid(x)
    bx = x.copy()
    hist = [float(bl.mean())]
    state = AdamState(x.shape, lr=lr)
    for _ in range(iters):
        xv = Var(x, requires_grad=True)
        loss = 0.5 * ops.sum(ops.square(fv - enc(xv)))
        (g,) = gradients(loss, [xv])
        x = adam_step(state, x, g.data)
        cur = resid(x)
        better = cur < bl
        bx[better], bl[better] = x[better], cur[better]
        hist.append(float(bl.mean()))
    return InversionResult(bx, None, float(bl.mean()), iters, bl, hist)


def adapt_a1(
    kind: str,
    attacker_model: LayerStack,
    craft_oracle: Callable,
    x_adv,
    epochs: int,
    lr: float = 1e-3,
    enc: LayerStack | None = None,
    inversion_iters: int = 600,
    latent_lr: float = 0.01,
    batch_size: int = 32,
    seed: int = 0,
    on_epoch: Callable | None = None,
) -> tuple[LayerStack, TrainReport]:
    """Continue training the attacker on protected features of its own images.

    White-box: re-invert the protected features with the current generator
    (cold start every epoch), then move the generator so that ``G(z*)``
    matches the true images (RMSProp).  Black-box: fit the decoder on
    ``(F*, X)`` pairs (Adam).  ``on_epoch(epoch, model)`` is called after
    every epoch, and once with epoch 0 before any update.
    """
    if kind not in ("white", "black"):
        raise ValueError("kind must be 'white' or 'black'")
    x = _flat(x_adv)
    model = attacker_model.copy()
    report = TrainReport(seed=seed, epochs=epochs)
    if on_epoch is not None:
        on_epoch(0, model)
    if epochs <= 0:
        return model, report
    feats = np.asarray(craft_oracle(x), dtype=np.float64)
    if feats.shape[0] != len(x):
        raise ValueError("oracle returned a feature batch of the wrong length")
    rng = np.random.default_rng(seed)
    if kind == "black":
        opt = Adam(model.params, lr=lr)
        for ep in range(epochs):
            fit_decoder(model, feats, x, 1, batch_size=batch_size, seed=int(rng.integers(2**31)), opt=opt)
            report.losses.append(reconstruction_error(model, feats, x))
            if on_epoch is not None:
                on_epoch(ep + 1, model)
        return model, report

    if enc is None:
        raise ValueError("white-box adaptation needs the encoder")
    opt = RMSProp(model.params, lr=lr)
    for ep in range(epochs):
        inv = invert_whitebox(enc, model, feats, iters=inversion_iters, lr=latent_lr, seed=int(rng.integers(2**31)))
        z = inv.z
        perm = rng.permutation(len(x))
        for i in range(0, len(x), batch_size):
            idx = perm[i : i + batch_size]
            p = model.vars()
            loss = ops.mean(ops.sum(ops.square(model(z[idx], p) - x[idx]), axis=1))
            grads = gradients(loss, list(p.values()))
            opt.step({k: g.data for k, g in zip(p, grads)})
        with no_grad():
            report.losses.append(float(np.linalg.norm(model.predict(z) - x, axis=1).mean()))
        if on_epoch is not None:
            on_epoch(ep + 1, model)
    return model, report


def attack_a3_average(craft_oracle: Callable, x, k: int = 5) -> np.ndarray:
    """Query the protection ``k`` times on the same batch and average the responses."""
    if k < 1:
        raise ValueError("k must be at least 1")
    responses = [np.asarray(craft_oracle(x), dtype=np.float64) for _ in range(k)]
    shape = responses[0].shape
    if any(r.shape != shape for r in responses):
        raise ValueError("oracle responses differ in shape")
    return np.mean(responses, axis=0)
