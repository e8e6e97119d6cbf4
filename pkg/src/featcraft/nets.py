"""Dense layer stacks, the model bundle, checkpoints and training routines."""

from __future__ import annotations

import hashlib
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import Adam, NumericError, Var, gradients, no_grad
from .diffcore import ops

log = logging.getLogger(__name__)

ACTIVATIONS = {
    "linear": lambda x: x,
    "tanh": ops.tanh,
    "sigmoid": ops.sigmoid,
    "softplus": ops.softplus,
    "relu": ops.relu,
    "leaky_relu": ops.leaky_relu,
}

CHECKPOINT_MAGIC = b"FCNET1"


class LayerStack:
    """A feed-forward stack of affine layers, each followed by an activation.

    ``widths`` has one more entry than ``activations``.  Parameters live in
    ``self.params`` as ``W{i}`` / ``b{i}`` float64 arrays.
    """

    def __init__(self, widths, activations, rng=None, params=None, zero_last: bool = False):
        widths = [int(w) for w in widths]
        activations = list(activations)
        if len(widths) != len(activations) + 1:
            raise ValueError("need exactly one activation per layer")
        if any(w <= 0 for w in widths):
            raise ValueError(f"widths must be positive, got {widths}")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.widths = widths
        self.activations = activations
        if params is None:
            rng = np.random.default_rng(rng)
            params = {}
            for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
                scale = 0.0 if (zero_last and i == len(activations) - 1) else 1.0 / np.sqrt(n_in)
                params[f"W{i}"] = rng.normal(size=(n_in, n_out)) * scale
                params[f"b{i}"] = np.zeros(n_out)
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        if self.n_params != sum(a * b + b for a, b in zip(widths[:-1], widths[1:])):
            raise ValueError("parameter arrays do not match the layer widths")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.activations)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def vars(self, requires_grad: bool = True) -> dict[str, Var]:
        return {k: Var(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def forward(self, x, params: dict[str, Var] | None = None, upto: int | None = None) -> Var:
        """Run the stack (or its first ``upto`` layers) on a batch of rows."""
        p = params if params is not None else self.vars(requires_grad=False)
        h = ops.as_var(x)
        if h.ndim != 2:
            h = ops.reshape(h, (h.shape[0], -1))
        n = self.n_layers if upto is None else upto
        for i in range(n):
            h = ACTIVATIONS[self.activations[i]](h @ p[f"W{i}"] + p[f"b{i}"])
        return h

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        with no_grad():
            return self.forward(np.asarray(x, dtype=np.float64)).data

    def penultimate(self, x) -> np.ndarray:
        with no_grad():
            return self.forward(np.asarray(x, dtype=np.float64), upto=self.n_layers - 1).data

    def copy(self) -> LayerStack:
        out = LayerStack(self.widths, self.activations, params={k: v.copy() for k, v in self.params.items()})
        for k, v in vars(self).items():
            if k not in ("widths", "activations", "params"):
                setattr(out, k, v)
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].tobytes())
        return h.hexdigest()

    def __repr__(self) -> str:
        return f"LayerStack({self.widths}, {self.activations})"


@dataclass
class ModelBundle:
    enc: LayerStack
    task_head: LayerStack
    gen: LayerStack
    disc: LayerStack
    dec: LayerStack | None = None
    amor: LayerStack | None = None
    id_oracle: LayerStack | None = None
    latent_dim: int = 0

    def __post_init__(self):
        if not self.latent_dim:
            self.latent_dim = self.gen.n_in
        feat = self.enc.n_out
        if self.task_head.n_in != feat:
            raise ValueError("task_head input width must equal enc output width")
        for name in ("dec", "amor"):
            m = getattr(self, name)
            if m is not None and m.n_in != feat:
                raise ValueError(f"{name} input width must equal enc output width")
        if self.gen.n_in != self.latent_dim:
            raise ValueError("gen input width must equal latent_dim")
        if not (self.gen.n_out == self.enc.n_in == self.disc.n_in):
            raise ValueError("gen output, enc input and disc input widths must agree")
        if self.amor is not None and self.amor.n_out != self.latent_dim:
            raise ValueError("amor output width must equal latent_dim")

    def stacks(self) -> dict[str, LayerStack]:
        names = ("enc", "task_head", "gen", "disc", "dec", "amor", "id_oracle")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def checksum(self) -> str:
        return hashlib.sha256("".join(s.checksum() for s in self.stacks().values()).encode()).hexdigest()

    def save(self, path) -> None:
        save_tensors(path, stacks_to_tensors(self.stacks()))

    @classmethod
    def load(cls, path) -> ModelBundle:
        return cls(**tensors_to_stacks(load_tensors(path)))


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    final_metric: float = float("nan")
    seed: int | None = None
    epochs: int = 0
    flags: list[str] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=dict)


# -- checkpoint format ----------------------------------------------------


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 tensors in the FCNET1 little-endian format."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:6] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an FCNET1 checkpoint")
    pos = 6
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * size
    return out


def stacks_to_tensors(stacks: dict[str, LayerStack]) -> dict[str, np.ndarray]:
    # layer structure is encoded in the names: <stack>.<layer>.<activation>.<W|b>
    out = {}
    for sname, st in stacks.items():
        for i, act in enumerate(st.activations):
            out[f"{sname}.{i}.{act}.W"] = st.params[f"W{i}"]
            out[f"{sname}.{i}.{act}.b"] = st.params[f"b{i}"]
        classes = getattr(st, "classes", None)
        if classes is not None:
            out[f"meta.{sname}.classes"] = np.asarray(classes, dtype=np.float64)
    return out


def tensors_to_stacks(tensors: dict[str, np.ndarray]) -> dict[str, LayerStack]:
    grouped: dict[str, dict[int, tuple[str, dict]]] = {}
    meta: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name.startswith("meta."):
            _, sname, key = name.split(".", 2)
            if key == "classes":
                meta[sname] = arr
            continue
        sname, idx, act, kind = name.rsplit(".", 3)
        layer = grouped.setdefault(sname, {}).setdefault(int(idx), (act, {}))
        layer[1][kind] = arr
    stacks = {}
    for sname, layers in grouped.items():
        order = sorted(layers)
        acts = [layers[i][0] for i in order]
        widths = [layers[order[0]][1]["W"].shape[0]] + [layers[i][1]["W"].shape[1] for i in order]
        params = {}
        for j, i in enumerate(order):
            params[f"W{j}"] = layers[i][1]["W"]
            params[f"b{j}"] = layers[i][1]["b"]
        stacks[sname] = LayerStack(widths, acts, params=params)
        if sname in meta:
            stacks[sname].classes = meta[sname].astype(np.int64)
            stacks[sname].degenerate = len(meta[sname]) < 2
    return stacks


# -- losses ----------------------------------------------------------------


def gradient_penalty(disc: LayerStack, x1, x2, mix, params: dict[str, Var] | None = None) -> Var:
    """Mean of (||grad_x D(x_hat)|| - 1)^2 over interpolates x_hat = mix*x1 + (1-mix)*x2.

    Differentiable with respect to ``params`` (the critic weights).
    """
    x1 = np.asarray(x1, dtype=np.float64).reshape(len(x1), -1)
    x2 = np.asarray(x2, dtype=np.float64).reshape(len(x2), -1)
    if x1.shape != x2.shape:
        raise ValueError(f"interpolation endpoints differ in shape: {x1.shape} vs {x2.shape}")
    mix = np.asarray(mix, dtype=np.float64).reshape(-1, 1)
    x_hat = Var(mix * x1 + (1.0 - mix) * x2, requires_grad=True)
    out = disc.forward(x_hat, params)
    (g,) = gradients(ops.sum(out), [x_hat], create_graph=True)
    return ops.mean(ops.square(ops.row_norm(g) - 1.0))


def interpolate_grad_norms(disc: LayerStack, x1, x2, mix) -> np.ndarray:
    x1 = np.asarray(x1, dtype=np.float64).reshape(len(x1), -1)
    x2 = np.asarray(x2, dtype=np.float64).reshape(len(x2), -1)
    mix = np.asarray(mix, dtype=np.float64).reshape(-1, 1)
    x_hat = Var(mix * x1 + (1.0 - mix) * x2, requires_grad=True)
    (g,) = gradients(ops.sum(disc(x_hat)), [x_hat])
    return np.linalg.norm(g.data, axis=1)


def bce_with_logits(logits: Var, y: np.ndarray) -> Var:
    y = np.asarray(y, dtype=np.float64).reshape(logits.shape)
    return ops.mean(ops.softplus(logits) - logits * y)


def cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    labels = np.asarray(labels, dtype=np.int64)
    lp = ops.log_softmax(logits, axis=1)
    picked = lp[(np.arange(len(labels)), labels)]
    return -ops.mean(picked)


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"{what} diverged (loss={value})")


def _grads(loss: Var, pv: dict[str, Var]) -> dict[str, np.ndarray]:
    keys = list(pv)
    return {k: g.data for k, g in zip(keys, gradients(loss, [pv[k] for k in keys]))}


def _joint_step(loss: Var, pvs: dict[str, dict[str, Var]], opts: dict[str, Adam]) -> None:
    """One backward pass over several stacks, then one optimizer step each."""
    flat = [(m, k, v) for m, pv in pvs.items() for k, v in pv.items()]
    grads = gradients(loss, [v for _, _, v in flat])
    for m in pvs:
        opts[m].step({k: g.data for (mm, k, _), g in zip(flat, grads) if mm == m})


# -- training routines -----------------------------------------------------


def wgan_pretrain(
    gen: LayerStack,
    disc: LayerStack,
    x_pub,
    steps: int,
    n_critic: int = 5,
    gp_weight: float = 10.0,
    batch_size: int = 64,
    lr: float = 1e-3,
    betas=(0.5, 0.9),
    seed: int = 0,
) -> TrainReport:
    """Fit ``gen`` to ``x_pub`` with the gradient-penalty Wasserstein objective.

    ``steps`` counts generator updates; the critic gets ``n_critic`` updates
    before each.  Both stacks are modified in place.
    """
    x_pub = np.asarray(x_pub, dtype=np.float64).reshape(len(x_pub), -1)
    rng = np.random.default_rng(seed)
    report = TrainReport(seed=seed, epochs=steps, counters={"disc_updates": 0, "gen_updates": 0})
    if steps <= 0:
        return report
    opt_d = Adam(disc.params, lr=lr, betas=betas)
    opt_g = Adam(gen.params, lr=lr, betas=betas)
    b = min(batch_size, len(x_pub))
    d = gen.n_in
    for _ in range(steps):
        for _ in range(n_critic):
            real = x_pub[rng.choice(len(x_pub), b, replace=False)]
            fake = gen.predict(rng.standard_normal((b, d)))
            pd = disc.vars()
            w_loss = ops.mean(disc(fake, pd)) - ops.mean(disc(real, pd))
            loss = w_loss + gp_weight * gradient_penalty(disc, real, fake, rng.uniform(size=b), pd)
            _check_finite(loss.item(), "critic")
            opt_d.step(_grads(loss, pd))
            report.counters["disc_updates"] += 1
        pg = gen.vars()
        g_loss = -ops.mean(disc(gen(rng.standard_normal((b, d)), pg)))
        _check_finite(g_loss.item(), "generator")
        opt_g.step(_grads(g_loss, pg))
        report.counters["gen_updates"] += 1
        report.losses.append(-w_loss.item())
    return report


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def train_task_model(
    enc: LayerStack,
    task_head: LayerStack,
    x,
    y,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    x_val=None,
    y_val=None,
    train_enc: bool = True,
) -> TrainReport:
    """Train ``task_head(enc(x))`` end to end on binary attribute labels ``y``."""
    from .pii import utility_score

    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(x), -1)
    rng = np.random.default_rng(seed)
    report = TrainReport(seed=seed, epochs=epochs)
    stacks = {"enc": enc, "head": task_head} if train_enc else {"head": task_head}
    opts = {k: Adam(s.params, lr=lr) for k, s in stacks.items()}
    for _ in range(epochs):
        total = 0.0
        for idx in _minibatches(len(x), batch_size, rng):
            pv = {k: s.vars() for k, s in stacks.items()}
            pe = pv.get("enc") or enc.vars(requires_grad=False)
            loss = bce_with_logits(task_head(enc(x[idx], pe), pv["head"]), y[idx])
            _check_finite(loss.item(), "task model")
            _joint_step(loss, pv, opts)
            total += loss.item() * len(idx)
        report.losses.append(total / len(x))
    if len(report.losses) >= 2 and report.losses[-1] >= report.losses[0]:
        report.flags.append("non-improving loss")
    if x_val is not None:
        report.final_metric = utility_score(task_head, enc.predict(x_val), y_val)
    return report


def train_identity_oracle(
    images,
    ids,
    epochs: int,
    hidden=(64, 32),
    lr: float = 3e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> LayerStack:
    """Identity classifier on flattened images; its penultimate layer feeds FSIM.

    Labels are remapped to ``0..k-1`` in sorted order; the mapping is stored
    on the returned stack as ``classes``.
    """
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    ids = np.asarray(ids)
    classes, y = np.unique(ids, return_inverse=True)
    counts = np.bincount(y)
    if counts.min() < 2:
        raise ValueError("every identity needs at least two training images")
    rng = np.random.default_rng(seed)
    widths = [x.shape[1], *hidden, max(len(classes), 1)]
    acts = ["tanh"] * len(hidden) + ["linear"]
    oracle = LayerStack(widths, acts, rng=rng)
    oracle.classes = classes
    oracle.degenerate = len(classes) < 2
    if oracle.degenerate:
        return oracle
    opt = Adam(oracle.params, lr=lr)
    for _ in range(epochs):
        for idx in _minibatches(len(x), batch_size, rng):
            p = oracle.vars()
            loss = cross_entropy(oracle(x[idx], p), y[idx])
            opt.step(_grads(loss, p))
    return oracle


def oracle_predict(oracle: LayerStack, images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    classes = getattr(oracle, "classes", None)
    if classes is None:
        raise ValueError("identity oracle has not been trained")
    if getattr(oracle, "degenerate", False):
        return np.full(len(x), classes[0])
    return classes[np.argmax(oracle.predict(x), axis=1)]


def train_amortizer(
    enc: LayerStack,
    gen: LayerStack,
    amor: LayerStack,
    steps: int,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
) -> TrainReport:
    """Fit ``amor`` so that ``amor(enc(gen(z)))`` recovers ``z`` (squared L2)."""
    if amor.n_in != enc.n_out or amor.n_out != gen.n_in:
        raise ValueError("amortizer widths must map enc features to gen latents")
    rng = np.random.default_rng(seed)
    report = TrainReport(seed=seed, epochs=steps)
    opt = Adam(amor.params, lr=lr)
    for _ in range(steps):
        z = rng.standard_normal((batch_size, gen.n_in))
        feats = enc.predict(gen.predict(z))
        p = amor.vars()
        loss = ops.mean(ops.sum(ops.square(amor(feats, p) - z), axis=1))
        _check_finite(loss.item(), "amortizer")
        opt.step(_grads(loss, p))
        report.losses.append(loss.item())
    return report


def train_autoencoder(
    enc: LayerStack,
    dec: LayerStack,
    x,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> TrainReport:
    """Jointly fit ``enc`` and ``dec`` to reconstruct ``x`` (a general-purpose encoder)."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    rng = np.random.default_rng(seed)
    report = TrainReport(seed=seed, epochs=epochs)
    opts = {"enc": Adam(enc.params, lr=lr), "dec": Adam(dec.params, lr=lr)}
    for _ in range(epochs):
        total = 0.0
        for idx in _minibatches(len(x), batch_size, rng):
            pv = {"enc": enc.vars(), "dec": dec.vars()}
            loss = ops.mean(ops.sum(ops.square(dec(enc(x[idx], pv["enc"]), pv["dec"]) - x[idx]), axis=1))
            _check_finite(loss.item(), "autoencoder")
            _joint_step(loss, pv, opts)
            total += loss.item() * len(idx)
        report.losses.append(total / len(x))
    return report
