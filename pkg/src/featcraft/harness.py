"""Experiment orchestration: deployment/development pipelines, the adversarial-learning
baseline, adaptive-attack robustness runs, and CSV export."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import (
    AttackConfig,
    QueryOracle,
    adapt_a1,
    attack_a3_average,
    attack_blackbox,
    attack_hybrid,
    invert_whitebox,
    train_blackbox_decoder,
)
from .crafter import CraftConfig, CraftService, ShuffleGuard, craft, craft_z
from .diffcore import Adam, gradients, ops
from .nets import (
    LayerStack,
    load_tensors,
    save_tensors,
    stacks_to_tensors,
    tensors_to_stacks,
    ModelBundle,
    TrainReport,
    bce_with_logits,
    train_amortizer,
    train_autoencoder,
    train_identity_oracle,
    train_task_model,
    wgan_pretrain,
)
from .pii import MetricsRecord, epsilon_from_reconstruction, format_float, recognition_metrics, ssim, utility_score
from .synthdata import DatasetSplit, generate_dataset, load_split, save_split, split_dataset

log = logging.getLogger(__name__)

SCENARIOS = ("deployment", "development")
ATTACKS = ("white", "black", "hybrid", "a2")
CSV_COLUMNS = ("defense", "scenario", "beta", "attack", "utility_auc", "eval_acc", "ssim", "fsim", "epsilon", "seed")
TRANSCRIPT_COLUMNS = ("epoch", "loss", "eval_acc", "ssim", "fsim")


def desk_craft_config(**overrides) -> CraftConfig:
    """Crafting settings calibrated for the 16x16 synthetic benchmark.

    The reference defaults in :class:`CraftConfig` assume much larger
    models; at desk scale the latent Hessian is small and the critic's
    gradient is weak relative to the utility term, so the Neumann step, the
    privacy weight and the utility form are recalibrated here.
    """
    base = dict(
        outer_iters=300,
        neumann_alpha=0.01,
        lp_weight=6.0,
        utility="squared",
        minibatch=32,
    )
    base.update(overrides)
    return CraftConfig(**base)


@dataclass
class ExperimentConfig:
    scenario: str = "deployment"
    # data
    n_identities: int = 80
    images_per_identity: int = 12
    image_size: int = 16
    pub_fraction: float = 0.75
    train_ratio: int = 2
    test_ratio: int = 1
    # models
    latent_dim: int = 16
    feature_dim: int = 32
    wgan_steps: int = 4000
    ae_epochs: int = 100
    head_epochs: int = 40
    finetune_epochs: int = 10
    oracle_epochs: int = 100
    decoder_epochs: int = 100
    amortizer_steps: int = 1000
    alt_latent_dim: int = 0
    # defense and attacks
    craft: CraftConfig = field(default_factory=desk_craft_config)
    attack: AttackConfig = field(default_factory=AttackConfig)
    attacks: list[str] = field(default_factory=lambda: ["white", "black", "hybrid"])
    betas: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0, 10.0])
    craft_seeds: list[int] = field(default_factory=lambda: [0])
    # adaptive experiment
    adaptive_epochs: int = 30
    adaptive_pool: int = 160
    adaptive_beta: float = 1.0
    # larger weights let the unbounded -reconstruction term wreck the task features
    adv_lambda: float = 0.1
    adv_epochs: int = 60
    a3_queries: int = 5
    epsilon_draws: int = 5
    out_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if not self.betas:
            raise ValueError("beta list must be non-empty")
        bad = [a for a in self.attacks if a not in ATTACKS]
        if bad:
            raise ValueError(f"unknown attacks {bad}; choose from {ATTACKS}")
        if not self.craft_seeds:
            raise ValueError("need at least one crafting seed")

    @property
    def alt_latent(self) -> int:
        return self.alt_latent_dim or max(self.latent_dim // 2, 1)


# -- flat key=value config files -------------------------------------------


def _coerce(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, (list, tuple)):
        items = [t for t in text.replace(";", ",").split(",") if t.strip()]
        elem = like[0] if like else ""
        vals = [_coerce(t, elem) for t in items]
        return type(like)(vals) if isinstance(like, tuple) else vals
    return text


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def apply_overrides(cfg: ExperimentConfig, kv: dict[str, str]) -> ExperimentConfig:
    """Return a copy of ``cfg`` with ``kv`` applied; ``craft.*`` and ``attack.*`` reach the nested configs."""
    top: dict = {}
    nested: dict[str, dict] = {"craft": {}, "attack": {}}
    for key, val in kv.items():
        if "." in key:
            group, name = key.split(".", 1)
            if group not in nested:
                raise KeyError(f"unknown config group {group!r}")
            sub = getattr(cfg, group)
            if not hasattr(sub, name):
                raise KeyError(f"unknown config key {key!r}")
            nested[group][name] = _coerce(val, getattr(sub, name))
        else:
            if key not in {f.name for f in dataclasses.fields(cfg)} or key in nested:
                raise KeyError(f"unknown config key {key!r}")
            top[key] = _coerce(val, getattr(cfg, key))
    for group, vals in nested.items():
        if vals:
            top[group] = replace(getattr(cfg, group), **vals)
    return replace(cfg, **top)


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        cfg = apply_overrides(cfg, parse_kv(Path(path).read_text()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


# -- records ----------------------------------------------------------------


@dataclass
class TradeoffRecord:
    defense: str
    scenario: str
    beta: float
    seed: int
    metrics: dict[str, MetricsRecord]

    def rows(self) -> list[dict]:
        out = []
        for attack, m in self.metrics.items():
            out.append(
                dict(
                    defense=self.defense,
                    scenario=self.scenario,
                    beta=self.beta,
                    attack=attack,
                    utility_auc=m.utility,
                    eval_acc=m.eval_acc,
                    ssim=m.ssim,
                    fsim=m.fsim,
                    epsilon=m.epsilon,
                    seed=self.seed,
                )
            )
        return out


def export_records(records: list[TradeoffRecord], path) -> None:
    """Write one CSV row per (record, attack); floats carry 17 significant digits."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in records:
            for row in rec.rows():
                w.writerow(
                    [
                        row["defense"],
                        row["scenario"],
                        format_float(row["beta"]),
                        row["attack"],
                        *(format_float(row[c]) for c in ("utility_auc", "eval_acc", "ssim", "fsim", "epsilon")),
                        row["seed"],
                    ]
                )


def read_records(path) -> list[TradeoffRecord]:
    """Inverse of :func:`export_records`; consecutive rows of one point are regrouped."""
    records: list[TradeoffRecord] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            key = (row["defense"], row["scenario"], float(row["beta"]), int(row["seed"]))
            m = MetricsRecord(
                eval_acc=float(row["eval_acc"]),
                fsim=float(row["fsim"]),
                ssim=float(row["ssim"]),
                utility=float(row["utility_auc"]),
                epsilon=float(row["epsilon"]),
            )
            last = records[-1] if records else None
            if last is not None and _same_point(last, key) and row["attack"] not in last.metrics:
                last.metrics[row["attack"]] = m
            else:
                records.append(TradeoffRecord(key[0], key[1], key[2], key[3], {row["attack"]: m}))
    return records


def _same_point(rec: TradeoffRecord, key) -> bool:
    same_beta = rec.beta == key[2] or (math.isnan(rec.beta) and math.isnan(key[2]))
    return rec.defense == key[0] and rec.scenario == key[1] and same_beta and rec.seed == key[3]


def write_transcript(rows: list[dict], path) -> None:
    """Per-epoch attack transcript: epoch, loss, eval_acc, ssim, fsim."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRANSCRIPT_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], *(format_float(r[c]) for c in TRANSCRIPT_COLUMNS[1:])])


def write_trajectory(trajectory, path) -> None:
    """Crafting trajectory: iter, L_p, L_u."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iter", "L_p", "L_u"))
        for i, (lp, lu) in enumerate(trajectory):
            w.writerow([i, format_float(lp), format_float(lu)])


# -- preparation ------------------------------------------------------------


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


def _stage(name: str, fn: Callable, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise StageError(f"stage '{name}' failed: {exc}") from exc


@dataclass
class Prepared:
    """Everything the offline phase produces: data, models, training reports."""

    cfg: ExperimentConfig
    split: DatasetSplit
    bundle: ModelBundle
    alt_gen: LayerStack | None = None
    general_enc: LayerStack | None = None
    reports: dict[str, TrainReport] = field(default_factory=dict)

    @property
    def x_test(self) -> np.ndarray:
        return self.split.x_test.flat


def make_data(cfg: ExperimentConfig) -> DatasetSplit:
    data = generate_dataset(cfg.n_identities, cfg.images_per_identity, (cfg.image_size, cfg.image_size), seed=cfg.seed)
    return split_dataset(data, cfg.pub_fraction, (cfg.train_ratio, cfg.test_ratio), seed=cfg.seed)


def _gen_stack(latent: int, n_pix: int, hidden, rng) -> LayerStack:
    widths = [latent, *hidden, n_pix]
    return LayerStack(widths, ["tanh"] * len(hidden) + ["sigmoid"], rng=rng)


def _disc_stack(n_pix: int, rng) -> LayerStack:
    return LayerStack([n_pix, 64, 1], ["leaky_relu", "linear"], rng=rng)


def pretrain_stage(cfg: ExperimentConfig, split: DatasetSplit) -> Prepared:
    """Generative prior (plus the alternate generator for A2) and the
    autoencoder-pretrained general encoder, all on public images only."""
    x_pub = split.x_pub.flat
    n_pix = x_pub.shape[1]
    rng = np.random.default_rng([cfg.seed, 11])
    reports: dict[str, TrainReport] = {}
    gen = _gen_stack(cfg.latent_dim, n_pix, (64, 128), rng)
    disc = _disc_stack(n_pix, rng)
    reports["wgan"] = _stage("wgan_pretrain", wgan_pretrain, gen, disc, x_pub, cfg.wgan_steps, seed=cfg.seed)
    alt_gen = None
    if "a2" in cfg.attacks:
        alt_gen = _gen_stack(cfg.alt_latent, n_pix, (96,), rng)
        alt_disc = _disc_stack(n_pix, rng)
        reports["wgan_alt"] = _stage(
            "wgan_pretrain_alt", wgan_pretrain, alt_gen, alt_disc, x_pub, cfg.wgan_steps, seed=cfg.seed + 1
        )
    enc = LayerStack([n_pix, 64, cfg.feature_dim], ["tanh", "tanh"], rng=rng)
    ae_dec = LayerStack([cfg.feature_dim, 128, n_pix], ["relu", "sigmoid"], rng=rng)
    reports["autoencoder"] = _stage("autoencoder", train_autoencoder, enc, ae_dec, x_pub, cfg.ae_epochs, lr=3e-3, seed=cfg.seed)
    head = LayerStack([cfg.feature_dim, split.x_pub.attrs.shape[1]], ["linear"], rng=rng)
    bundle = ModelBundle(enc=enc.copy(), task_head=head, gen=gen, disc=disc)
    return Prepared(cfg, split, bundle, alt_gen, enc, reports)


def task_stage(prep: Prepared) -> Prepared:
    """Deployment encoder and task head, the shadow decoder, the identity
    oracle and (optionally) the amortizer.  Starts from the general encoder."""
    cfg, split = prep.cfg, prep.split
    x_pub, y_pub = split.x_pub.flat, split.x_pub.attrs
    n_pix = x_pub.shape[1]
    rng = np.random.default_rng([cfg.seed, 12])
    reports = dict(prep.reports)
    enc = prep.general_enc.copy()
    head = LayerStack([cfg.feature_dim, y_pub.shape[1]], ["linear"], rng=rng)
    _stage("task_head", train_task_model, enc, head, x_pub, y_pub, cfg.head_epochs, lr=3e-3, seed=cfg.seed, train_enc=False)
    reports["task"] = _stage(
        "train_task", train_task_model, enc, head, x_pub, y_pub, cfg.finetune_epochs, lr=1e-3, seed=cfg.seed,
        x_val=split.x_test.flat, y_val=split.x_test.attrs,
    )
    dec = LayerStack([cfg.feature_dim, 128, n_pix], ["relu", "sigmoid"], rng=rng)
    reports["decoder"] = _stage(
        "blackbox_decoder", train_blackbox_decoder, QueryOracle(enc), dec, x_pub, cfg.decoder_epochs, lr=3e-3, seed=cfg.seed
    )
    oracle = _stage("identity_oracle", train_identity_oracle, split.x_train.flat, split.x_train.ids, cfg.oracle_epochs, seed=cfg.seed)
    b = prep.bundle
    amor = None
    if cfg.amortizer_steps:
        amor = LayerStack([cfg.feature_dim, 64, cfg.latent_dim], ["tanh", "linear"], rng=rng)
        reports["amortizer"] = _stage("amortizer", train_amortizer, enc, b.gen, amor, cfg.amortizer_steps, seed=cfg.seed)
    bundle = ModelBundle(enc=enc, task_head=head, gen=b.gen, disc=b.disc, dec=dec, amor=amor, id_oracle=oracle)
    return Prepared(cfg, split, bundle, prep.alt_gen, prep.general_enc, reports)


def prepare(cfg: ExperimentConfig, split: DatasetSplit | None = None) -> Prepared:
    """Offline phase: data, WGAN prior, encoder and task head, shadow decoder, identity oracle.

    Deployment encoder: autoencoder-pretrained on public images, then the
    task head is fitted on frozen features and both are fine-tuned briefly
    end to end.  The autoencoder-only encoder is kept as the development
    scenario's general-purpose extractor.
    """
    split = split if split is not None else _stage("data", make_data, cfg)
    return task_stage(pretrain_stage(cfg, split))


SPLIT_FILES = {"x_pub": "pub.split", "x_train": "train.split", "x_test": "test.split"}


def save_data(split: DatasetSplit, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for attr, name in SPLIT_FILES.items():
        save_split(out / name, getattr(split, attr))


def load_data(out_dir) -> DatasetSplit:
    out = Path(out_dir)
    return DatasetSplit(**{attr: load_split(out / name) for attr, name in SPLIT_FILES.items()})


def save_prepared(prep: Prepared, out_dir) -> None:
    """Models go to ``models.fcn``; the split files sit beside it."""
    save_data(prep.split, out_dir)
    stacks = dict(prep.bundle.stacks())
    if prep.alt_gen is not None:
        stacks["alt_gen"] = prep.alt_gen
    if prep.general_enc is not None:
        stacks["general_enc"] = prep.general_enc
    save_tensors(Path(out_dir) / "models.fcn", stacks_to_tensors(stacks))


def load_prepared(cfg: ExperimentConfig, out_dir) -> Prepared:
    split = load_data(out_dir)
    stacks = tensors_to_stacks(load_tensors(Path(out_dir) / "models.fcn"))
    alt_gen = stacks.pop("alt_gen", None)
    general_enc = stacks.pop("general_enc", None)
    return Prepared(cfg, split, ModelBundle(**stacks), alt_gen, general_enc)


# -- evaluation -------------------------------------------------------------


def reconstruct(kind: str, prep: Prepared, feats: np.ndarray, seed: int = 0) -> np.ndarray:
    """Run one basic attack on a feature batch and return the reconstructed images."""
    b, acfg = prep.bundle, prep.cfg.attack
    if kind == "white":
        return invert_whitebox(b.enc, b.gen, feats, iters=acfg.inversion_iters, lr=acfg.latent_lr, seed=seed, restarts=acfg.restarts).x_hat
    if kind == "a2":
        if prep.alt_gen is None:
            raise ValueError("the alternate generator was not trained (add 'a2' to attacks)")
        return invert_whitebox(b.enc, prep.alt_gen, feats, iters=acfg.inversion_iters, lr=acfg.latent_lr, seed=seed, restarts=acfg.restarts).x_hat
    if kind == "black":
        return attack_blackbox(b.dec, feats).x_hat
    if kind == "hybrid":
        return attack_hybrid(b.enc, b.dec, feats, iters=acfg.hybrid_iters, lr=acfg.hybrid_lr).x_hat
    raise ValueError(f"unknown attack {kind!r}")


def evaluate_features(
    prep: Prepared,
    feats: np.ndarray,
    x: np.ndarray,
    ids: np.ndarray,
    utility: float,
    attacks,
    seed: int = 0,
    recon_cache: dict | None = None,
) -> dict[str, MetricsRecord]:
    """Metrics of a released feature batch under each attack.

    Epsilon is always computed from the white-box reconstruction (its
    definition), and repeated on every attack's row.
    """
    recon = {}
    for kind in dict.fromkeys(["white", *attacks]):
        recon[kind] = reconstruct(kind, prep, feats, seed=seed)
    if recon_cache is not None:
        recon_cache.update(recon)
    eps = epsilon_from_reconstruction(recon["white"], prep.bundle.gen, seed=seed, draws=prep.cfg.epsilon_draws)
    out = {}
    for kind in attacks:
        acc, fs = recognition_metrics(prep.bundle.id_oracle, recon[kind], x, ids)
        out[kind] = MetricsRecord(eval_acc=acc, fsim=fs, ssim=ssim(recon[kind], x), utility=utility, epsilon=eps)
    return out


def _craft_cfg(cfg: ExperimentConfig, beta: float, seed: int) -> CraftConfig:
    return replace(cfg.craft, beta=beta, seed=seed)


def run_deployment_pipeline(cfg: ExperimentConfig, prep: Prepared | None = None, keep: dict | None = None) -> list[TradeoffRecord]:
    """Offline preparation, then crafting of the private test images per beta and seed.

    The first record is always the unprotected control (``defense="none"``,
    ``beta=inf``).  ``keep``, if given, collects crafted features and craft
    outputs keyed by ``(beta, seed)``.
    """
    prep = prep or prepare(cfg)
    b = prep.bundle
    x, ids, attrs = prep.split.x_test.flat, prep.split.x_test.ids, prep.split.x_test.attrs
    f0 = b.enc.predict(x)
    records = [
        TradeoffRecord(
            "none",
            "deployment",
            math.inf,
            cfg.seed,
            _stage("evaluate", evaluate_features, prep, f0, x, ids, utility_score(b.task_head, f0, attrs), cfg.attacks, seed=cfg.seed),
        )
    ]
    for beta in cfg.betas:
        for s in cfg.craft_seeds:
            out = _stage("craft", craft, b.enc, b.gen, x, _craft_cfg(cfg, beta, s), rng=np.random.default_rng([cfg.seed, s]))
            if keep is not None:
                keep[(beta, s)] = out
            util = utility_score(b.task_head, out.features, attrs)
            metrics = _stage("evaluate", evaluate_features, prep, out.features, x, ids, util, cfg.attacks, seed=cfg.seed)
            records.append(TradeoffRecord("crafter", "deployment", beta, s, metrics))
    return records


def _fit_head(feats, labels, epochs: int, seed: int, feature_dim: int) -> LayerStack:
    head = LayerStack([feature_dim, 1], ["linear"], rng=np.random.default_rng(seed))
    ident = LayerStack([feature_dim, feature_dim], ["linear"], params={"W0": np.eye(feature_dim), "b0": np.zeros(feature_dim)})
    train_task_model(ident, head, feats, labels, epochs, lr=3e-3, seed=seed, train_enc=False)
    return head


def run_development_pipeline(cfg: ExperimentConfig, prep: Prepared | None = None) -> list[TradeoffRecord]:
    """Development scene: the service releases crafted features of the private
    training images; the developer fits a fresh task head on them and is
    scored on held-out (unprotected) features.  Attacks target the crafted
    training features.  A public-only baseline row (``defense="public-only"``)
    trains on public features alone and releases nothing, so its epsilon is 0.
    """
    prep = prep or prepare(cfg)
    b = prep.bundle
    enc = prep.general_enc if prep.general_enc is not None else b.enc
    xtr, ids, ytr = prep.split.x_train.flat, prep.split.x_train.ids, prep.split.x_train.attrs
    xte, yte = prep.split.x_test.flat, prep.split.x_test.attrs
    dec = b.dec
    if enc is not b.enc and ("black" in cfg.attacks or "hybrid" in cfg.attacks):
        dec = b.dec.copy()
        _stage("blackbox_decoder", train_blackbox_decoder, QueryOracle(enc), dec, prep.split.x_pub.flat, cfg.decoder_epochs, lr=3e-3, seed=cfg.seed)
    eval_prep = replace(prep, bundle=replace(b, enc=enc, dec=dec))
    test_feats = enc.predict(xte)
    fd = enc.n_out

    def dev_record(defense, beta, seed, feats):
        head = _fit_head(feats, ytr, cfg.head_epochs, cfg.seed, fd)
        util = utility_score(head, test_feats, yte)
        metrics = _stage("evaluate", evaluate_features, eval_prep, feats, xtr, ids, util, cfg.attacks, seed=cfg.seed)
        return TradeoffRecord(defense, "development", beta, seed, metrics)

    records = [dev_record("none", math.inf, cfg.seed, enc.predict(xtr))]
    pub_head = _fit_head(enc.predict(prep.split.x_pub.flat), prep.split.x_pub.attrs, cfg.head_epochs, cfg.seed, fd)
    nan = float("nan")
    pub_metrics = MetricsRecord(eval_acc=nan, fsim=nan, ssim=nan, utility=utility_score(pub_head, test_feats, yte), epsilon=0.0)
    records.append(TradeoffRecord("public-only", "development", nan, cfg.seed, {a: pub_metrics for a in cfg.attacks}))
    for beta in cfg.betas:
        for s in cfg.craft_seeds:
            out = _stage("craft", craft, enc, b.gen, xtr, _craft_cfg(cfg, beta, s), rng=np.random.default_rng([cfg.seed, s]))
            records.append(dev_record("crafter", beta, s, out.features))
    return records


# -- adversarial-learning baseline -----------------------------------------


def adv_learning_baseline(
    enc: LayerStack,
    task_head: LayerStack,
    dec: LayerStack,
    x,
    y,
    lam: float,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[LayerStack, LayerStack, LayerStack, TrainReport]:
    """Game-based "stay-away" defense trained by alternating updates.

    Defender (enc, head) minimises ``lam * L_privacy + (1 - lam) * L_utility``
    with ``L_privacy = -mean ||Dec(Enc(x)) - x||`` and ``L_utility`` the
    binary cross-entropy; the co-trained attacker decoder minimises the
    reconstruction error.  Inputs are copied, never modified.  Returns the
    trained (enc, head, dec) and a report whose losses are the decoder's
    per-epoch reconstruction error.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    enc, task_head, dec = enc.copy(), task_head.copy(), dec.copy()
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(x), -1)
    rng = np.random.default_rng(seed)
    report = TrainReport(seed=seed, epochs=epochs)
    opt_e, opt_h, opt_d = Adam(enc.params, lr=lr), Adam(task_head.params, lr=lr), Adam(dec.params, lr=lr)
    for _ in range(epochs):
        perm = rng.permutation(len(x))
        for i in range(0, len(x), batch_size):
            idx = perm[i : i + batch_size]
            pe, ph = enc.vars(), task_head.vars()
            feats = enc(x[idx], pe)
            rec = ops.mean(ops.row_norm(dec(feats) - x[idx]))
            util = bce_with_logits(task_head(feats, ph), y[idx])
            loss = lam * (-rec) + (1.0 - lam) * util
            if not np.isfinite(loss.item()):
                report.flags.append("diverged")
                return enc, task_head, dec, report
            ge = gradients(loss, list(pe.values()) + list(ph.values()))
            opt_e.step({k: g.data for k, g in zip(pe, ge[: len(pe)])})
            opt_h.step({k: g.data for k, g in zip(ph, ge[len(pe) :])})
            pd = dec.vars()
            att = ops.mean(ops.row_norm(dec(enc.predict(x[idx]), pd) - x[idx]))
            gd = gradients(att, list(pd.values()))
            opt_d.step({k: g.data for k, g in zip(pd, gd)})
        report.losses.append(float(np.linalg.norm(dec.predict(enc.predict(x)) - x, axis=1).mean()))
    if len(report.losses) >= 2 and not np.all(np.isfinite(report.losses)):
        report.flags.append("diverged")
    return enc, task_head, dec, report


# -- adaptive attacks ---------------------------------------------------------


@dataclass
class AdaptiveResult:
    curves: dict[str, list[dict]]
    a3: dict[str, float]
    verdicts: dict[str, bool]


def _curve_recorder(prep, rows, feats_eval, x, ids, kind, enc, seed):
    oracle = prep.bundle.id_oracle

    def on_epoch(epoch, model):
        if kind == "white":
            inv = invert_whitebox(enc, model, feats_eval, iters=prep.cfg.attack.inversion_iters, lr=prep.cfg.attack.latent_lr, seed=seed)
            rec = inv.x_hat
        else:
            rec = model.predict(feats_eval)
        acc, fs = recognition_metrics(oracle, rec, x, ids)
        loss = float(np.linalg.norm(rec - x, axis=1).mean())
        rows.append(dict(epoch=epoch, loss=loss, eval_acc=acc, ssim=ssim(rec, x), fsim=fs))

    return on_epoch


def adaptive_robustness_experiment(cfg: ExperimentConfig, prep: Prepared | None = None, out_dir=None, include_a3: bool = True) -> AdaptiveResult:
    """A1 curves against Crafter and the adversarial-learning baseline, plus the A3 comparison.

    The attacker adapts on its own public images (``x_pub``) queried
    through the defense, and is scored each epoch on the protected private
    test images.  Epoch 0 is the basic attack.
    """
    prep = prep or prepare(cfg)
    b = prep.bundle
    x, ids = prep.split.x_test.flat, prep.split.x_test.ids
    seed = cfg.seed
    pub = prep.split.x_pub.flat
    pick = np.random.default_rng([seed, 3]).permutation(len(pub))[: cfg.adaptive_pool]
    x_adv = pub[np.sort(pick)]
    ccfg = _craft_cfg(cfg, cfg.adaptive_beta, seed)
    service = CraftService(b.enc, b.gen, ccfg)
    feats_eval = service(x)
    curves: dict[str, list[dict]] = {}

    rows: list[dict] = []
    adapt_a1("white", b.gen, service, x_adv, cfg.adaptive_epochs, lr=cfg.attack.adaptive_lr, enc=b.enc,
             inversion_iters=cfg.attack.inversion_iters, latent_lr=cfg.attack.latent_lr, seed=seed,
             on_epoch=_curve_recorder(prep, rows, feats_eval, x, ids, "white", b.enc, seed))
    curves["crafter-white"] = rows

    rows = []
    adapt_a1("black", b.dec, service, x_adv, cfg.adaptive_epochs, lr=cfg.attack.adaptive_lr, seed=seed,
             on_epoch=_curve_recorder(prep, rows, feats_eval, x, ids, "black", b.enc, seed))
    curves["crafter-black"] = rows

    adv_enc, adv_head, adv_dec, _ = adv_learning_baseline(
        b.enc, b.task_head, b.dec, prep.split.x_pub.flat, prep.split.x_pub.attrs, cfg.adv_lambda, cfg.adv_epochs, seed=seed
    )
    rows = []
    adapt_a1("black", adv_dec, QueryOracle(adv_enc), x_adv, cfg.adaptive_epochs, lr=cfg.attack.adaptive_lr, seed=seed,
             on_epoch=_curve_recorder(prep, rows, adv_enc.predict(x), x, ids, "black", adv_enc, seed))
    curves["adv-black"] = rows

    a3: dict[str, float] = {}
    if include_a3:
        a3 = a3_comparison(cfg, prep, service)

    verdicts = {
        "crafter_white_bounded": max(r["eval_acc"] for r in curves["crafter-white"]) <= curves["crafter-white"][0]["eval_acc"] + 0.05,
        "crafter_black_bounded": max(r["eval_acc"] for r in curves["crafter-black"]) <= curves["crafter-black"][0]["eval_acc"] + 0.05,
        "adv_gains": curves["adv-black"][-1]["eval_acc"] >= curves["adv-black"][0]["eval_acc"] + 0.1,
    }
    if a3:
        verdicts["a3_unshuffled_gains"] = a3["averaged"] >= a3["single"] + 0.05
        verdicts["a3_shuffle_blocks"] = a3["shuffled"] <= a3["single"] + 0.02
    if out_dir is not None:
        for name, r in curves.items():
            write_transcript(r, Path(out_dir) / f"adaptive_{name}.csv")
        with open(Path(out_dir) / "adaptive_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("check", "value"))
            for k, v in {**{f"a3_{k}": v for k, v in a3.items()}, **verdicts}.items():
                w.writerow((k, format_float(v) if isinstance(v, float) else v))
    return AdaptiveResult(curves, a3, verdicts)


def a3_comparison(cfg: ExperimentConfig, prep: Prepared, service: CraftService | None = None) -> dict[str, float]:
    """White-box eval accuracy for one query, for ``k`` averaged queries, and for ``k`` averaged shuffle-guarded releases."""
    b = prep.bundle
    x, ids = prep.split.x_test.flat, prep.split.x_test.ids
    service = service or CraftService(b.enc, b.gen, _craft_cfg(cfg, cfg.adaptive_beta, cfg.seed))

    def acc_of(feats):
        rec = invert_whitebox(b.enc, b.gen, feats, iters=cfg.attack.inversion_iters, lr=cfg.attack.latent_lr, seed=cfg.seed).x_hat
        return recognition_metrics(b.id_oracle, rec, x, ids)[0]

    single = acc_of(service(x))
    averaged = acc_of(attack_a3_average(service, x, cfg.a3_queries))
    guard = ShuffleGuard(service, service.cfg, rng=np.random.default_rng([cfg.seed, 7]))
    shuffled = acc_of(attack_a3_average(lambda q: guard(q).features, x, cfg.a3_queries))
    return {"single": single, "averaged": averaged, "shuffled": shuffled}


def crafter_z_comparison(
    prep: Prepared, cfg: CraftConfig, x, seed: int, snapshot_every: int = 5, max_halvings: int = 2
) -> dict[str, float]:
    """Epsilon of Crafter vs. Crafter-z on the same batch at matched utility loss.

    Utility loss is the mean feature distance to the clean features.
    Crafter-z runs first.  Crafter's iterates are snapshotted; when none
    reaches Crafter-z's distance (its released features are confined to the
    generator's range, so its distance starts high), Crafter is rerun with
    ``beta`` halved, at most ``max_halvings`` times.  The snapshot closest
    to Crafter-z's distance from below is compared (falling back to the
    closest overall).
    """
    b = prep.bundle
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    f0 = b.enc.predict(x)
    zout = craft_z(b.enc, b.gen, x, cfg, rng=np.random.default_rng([seed, 1]))
    lu_z = float(np.linalg.norm(zout.features - f0, axis=1).mean())
    snaps: list[tuple[float, np.ndarray]] = []

    def keep(it, f, z):
        if (it + 1) % snapshot_every == 0:
            snaps.append((float(np.linalg.norm(f - f0, axis=1).mean()), f.copy()))

    for k in range(max_halvings + 1):
        beta = cfg.beta / 2**k
        craft(b.enc, b.gen, x, replace(cfg, beta=beta), rng=np.random.default_rng([seed, 2, k]), callback=keep)
        if max(s[0] for s in snaps) >= lu_z:
            break
    below = [s for s in snaps if s[0] <= lu_z]
    lu_c, fc = max(below, key=lambda s: s[0]) if below else min(snaps, key=lambda s: abs(s[0] - lu_z))

    def eps(feats):
        rec = invert_whitebox(b.enc, b.gen, feats, iters=prep.cfg.attack.inversion_iters, lr=prep.cfg.attack.latent_lr, seed=seed).x_hat
        return epsilon_from_reconstruction(rec, b.gen, seed=seed, draws=prep.cfg.epsilon_draws)

    return {"eps_craft": eps(fc), "eps_craft_z": eps(zout.features), "lu_craft": lu_c, "lu_craft_z": lu_z, "beta_craft": beta}
