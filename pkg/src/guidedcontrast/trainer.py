"""Contrastive pretraining loop, probe evaluation and the ablation matrix.

Per sample: draw two augmentations (guided or uniform), apply both, encode
both views, optionally gather view-1 features along the structural map, pool
and project, then take one gradient step per batch on the NT-Xent loss.

Every random decision is seeded from ``(config.seed, epoch, batch, slot)``, so
a run is a deterministic function of its config and can be resumed from any
epoch checkpoint with bitwise-identical results.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import encoder as enc
from ._rng import derive_seed, make_rng
from .augmentation import apply, sample_random
from .checkpoint import load_checkpoint, load_optimizer_state, save_checkpoint
from .config import TrainConfig, dump_config
from .contrastive import ContrastiveError, loss_and_grad
from .gfm import map_views, scatter_gradient
from .guided import AugMemoryBank, coverage_metrics, pair_for_sample, random_pair
from .pointcloud import PointCloud, synth_corpus
from .probe import linear_probe

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "loss_mean", "probe_accuracy", "ga_min_pairwise", "ga_mean_nn", "lr")
ABLATION_HEADER = ("variant", "seed", "crop", "gfm", "ga", "probe_accuracy", "final_loss")

# (name, gfm, ga); crop stays on in every variant.
ABLATION_VARIANTS = (
    ("vanilla+crop", False, False),
    ("+GFM", True, False),
    ("+GA", False, True),
    ("+GFM+GA", True, True),
)

# Seed-derivation keys.
_INIT, _ORDER, _SAMPLE, _VIEW, _PROBE_DATA, _PROBE_AUG = 1, 2, 3, 4, 5, 6


class TrainingError(RuntimeError):
    """Raised when the loss or the parameters stop being finite."""


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("metrics rows must have increasing epoch numbers")
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.rows:
            w.writerow([_fmt(r.get(k)) for k in METRICS_HEADER])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RunMetrics":
        reader = csv.DictReader(io.StringIO(text))
        rows = []
        for r in reader:
            row = {"epoch": int(r["epoch"])}
            for k in METRICS_HEADER[1:]:
                row[k] = float(r[k]) if r[k] != "" else None
            rows.append(row)
        return cls(rows)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def cyclic_lr(step: int, steps_per_cycle: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from ``lr_max`` to ``lr_min``, restarted every cycle."""
    t = step % steps_per_cycle
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / steps_per_cycle))


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def training_corpus(config: TrainConfig) -> list[PointCloud]:
    c = config.corpus
    return synth_corpus(c.kinds, c.per_class, c.n_points, c.seed)


def probe_corpus(config: TrainConfig) -> list[PointCloud]:
    """Held-out clouds for the probe, optionally under a fixed rigid augmentation.

    Derived from the corpus seed only, so every training seed and every
    ablation variant is scored on the same data.
    """
    c, p = config.corpus, config.probe
    clouds = synth_corpus(c.kinds, p.per_class, p.n_points, derive_seed(c.seed, _PROBE_DATA))
    if not p.augment:
        return clouds
    rigid = dataclasses.replace(config.augment, enable_crop=False, enable_jitter=False)
    out = []
    for i, pc in enumerate(clouds):
        aug = sample_random(rigid, derive_seed(c.seed, _PROBE_AUG, i))
        out.append(apply(aug, pc)[0])
    return out


def encoder_input(pc: PointCloud, center: bool) -> np.ndarray:
    return pc.points - pc.points.mean(axis=0) if center else pc.points


def pooled_features(
    params: enc.EncoderParams, clouds: Sequence[PointCloud], center: bool = True
) -> np.ndarray:
    return np.stack([enc.pool(params, enc.forward(params, encoder_input(pc, center))) for pc in clouds])


def probe_accuracy(params: enc.EncoderParams, config: TrainConfig, clouds=None) -> float:
    clouds = probe_corpus(config) if clouds is None else clouds
    labels = np.array([pc.label for pc in clouds])
    feats = pooled_features(params, clouds, config.center_views)
    return linear_probe(feats, labels, config.probe.split_seed, config.probe.ridge)


# ---------------------------------------------------------------------------
# One training step
# ---------------------------------------------------------------------------


@dataclass
class _ViewPass:
    tcache: enc.TrunkCache
    hcache: enc.HeadCache
    mapping: Optional[np.ndarray]
    n_rows: int


def _encode_pair(params, config: TrainConfig, pc: PointCloud, a1, a2, sample_seed: int):
    v1, r1 = apply(a1, pc, config.point_budget, derive_seed(sample_seed, _VIEW, 1))
    v2, r2 = apply(a2, pc, config.point_budget, derive_seed(sample_seed, _VIEW, 2))
    f1, t1 = enc.forward_cached(params, encoder_input(v1, config.center_views))
    f2, t2 = enc.forward_cached(params, encoder_input(v2, config.center_views))
    mapping = None
    if config.gfm.enabled:
        mapping = map_views(v1, r1, v2, r2, config.gfm.invert_jitter)
        f1 = f1[mapping]
    z1, h1 = enc.pool_project_cached(params, f1)
    z2, h2 = enc.pool_project_cached(params, f2)
    return z1, z2, _ViewPass(t1, h1, mapping, v1.n), _ViewPass(t2, h2, None, v2.n)


def _view_grad(params, view: _ViewPass, d_z: np.ndarray) -> np.ndarray:
    head_grads, d_f = enc.head_backward(params, view.hcache, d_z)
    if view.mapping is not None:
        d_f = scatter_gradient(d_f, view.mapping, view.n_rows)
    trunk_grads = enc.trunk_backward(params, view.tcache, d_f)
    return enc.EncoderParams(trunk_grads, head_grads, params.pooling).flat()


def _batch_step(params, config, bank, corpus, batch, epoch, b_idx):
    """Forward/backward for one batch. Returns ``(loss, flat grad, augmentations)``."""
    z1s, z2s, passes, augs, seeds = [], [], [], [], []
    for slot, ci in enumerate(batch):
        s = derive_seed(config.seed, _SAMPLE, epoch, b_idx, slot)
        seeds.append(s)
        if config.ga.enabled:
            a1, a2 = pair_for_sample(bank, config.augment, config.ga.n_candidates, s)
        else:
            a1, a2 = random_pair(config.augment, s)
        augs.extend((a1, a2))
        try:
            z1, z2, p1, p2 = _encode_pair(params, config, corpus[ci], a1, a2, s)
        except enc.EncoderError as exc:
            raise TrainingError(f"epoch {epoch} batch {b_idx}: {exc}; sample seeds {seeds}") from None
        z1s.append(z1)
        z2s.append(z2)
        passes.append((p1, p2))
    Z1, Z2 = np.stack(z1s), np.stack(z2s)
    if not (np.all(np.isfinite(Z1)) and np.all(np.isfinite(Z2))):
        raise TrainingError(f"epoch {epoch} batch {b_idx}: non-finite latents; sample seeds {seeds}")
    try:
        loss, g1, g2 = loss_and_grad(Z1, Z2, config.tau)
    except ContrastiveError as exc:
        raise TrainingError(f"epoch {epoch} batch {b_idx}: {exc}; sample seeds {seeds}") from None
    if not math.isfinite(loss):
        raise TrainingError(f"epoch {epoch} batch {b_idx}: non-finite loss; sample seeds {seeds}")
    grad = np.zeros(params.num_params())
    for k, (p1, p2) in enumerate(passes):
        grad += _view_grad(params, p1, g1[k])
        grad += _view_grad(params, p2, g2[k])
    return loss, grad, augs


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = make_rng(seed, _ORDER, epoch).permutation(n)
    full = n // batch_size
    if full == 0:
        return [order]
    return [order[i * batch_size : (i + 1) * batch_size] for i in range(full)]


class SGD:
    """Gradient descent with decoupled weight decay."""

    def __init__(self, n: int, weight_decay: float):
        self.weight_decay = weight_decay

    def step(self, flat, grad, lr):
        return flat - lr * grad - lr * self.weight_decay * flat

    def state(self) -> np.ndarray:
        return np.zeros(0)

    def load_state(self, state: np.ndarray) -> None:
        if state.size:
            raise TrainingError("SGD carries no optimizer state")


class Adam:
    """Adam with decoupled weight decay; state is ``[t, m..., v...]``."""

    def __init__(self, n: int, weight_decay: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = np.zeros(n)
        self.v = np.zeros(n)

    def step(self, flat, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return flat - lr * m_hat / (np.sqrt(v_hat) + self.eps) - lr * self.weight_decay * flat

    def state(self) -> np.ndarray:
        return np.concatenate([[float(self.t)], self.m, self.v])

    def load_state(self, state: np.ndarray) -> None:
        n = self.m.size
        if state.size != 1 + 2 * n:
            raise TrainingError(f"optimizer state has {state.size} values, expected {1 + 2 * n}")
        self.t = int(state[0])
        self.m = state[1 : 1 + n].copy()
        self.v = state[1 + n :].copy()


def make_optimizer(config: TrainConfig, n: int):
    kind = config.optim.kind
    if kind == "adam":
        return Adam(n, config.optim.weight_decay)
    if kind == "sgd":
        return SGD(n, config.optim.weight_decay)
    raise TrainingError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def new_bank(config: TrainConfig, corpus_size: int) -> AugMemoryBank:
    return AugMemoryBank(
        capacity=config.ga.capacity or corpus_size,
        epsilon=config.ga.epsilon,
        c=config.ga.c,
        ranges=config.augment,
        weights=config.ga.weights,
    )


def init_encoder(config: TrainConfig) -> enc.EncoderParams:
    e = config.encoder
    return enc.init_params(e.trunk, e.head, derive_seed(config.seed, _INIT), e.pooling)


def pretrain(
    config: TrainConfig,
    out_dir=None,
    resume: bool = False,
    stop_epoch: Optional[int] = None,
) -> tuple[enc.EncoderParams, RunMetrics]:
    """Run contrastive pretraining.

    With ``out_dir`` the resolved config, ``metrics.csv``, ``timings.csv`` and a
    checkpoint (``checkpoint/``, including ``bank.json``) are rewritten at
    every epoch end. ``resume=True`` continues from that checkpoint.
    ``stop_epoch`` ends the run early without changing the schedule.
    """
    config.validate()
    corpus = training_corpus(config)
    probe_clouds = probe_corpus(config) if config.probe.enabled else None
    params = init_encoder(config)
    bank = new_bank(config, len(corpus))
    metrics = RunMetrics()
    optimizer = make_optimizer(config, params.num_params())
    start_epoch, step = 0, 0

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "checkpoint"
        if resume and (ckpt / "manifest.json").exists():
            params, records, manifest = load_checkpoint(
                ckpt,
                expect={
                    "trunk": list(config.encoder.trunk),
                    "head": list(config.encoder.head),
                    "pooling": config.encoder.pooling,
                    "seed": config.seed,
                },
            )
            bank = AugMemoryBank.from_records(
                records or [],
                capacity=bank.capacity,
                epsilon=bank.epsilon,
                c=bank.c,
                ranges=bank.ranges,
                weights=bank.weights,
            )
            state = load_optimizer_state(ckpt)
            if state is not None:
                optimizer.load_state(state)
            start_epoch, step = manifest["epoch"], manifest["step"]
            metrics = RunMetrics.from_csv((out / "metrics.csv").read_text())
            metrics.rows = [r for r in metrics.rows if r["epoch"] <= start_epoch]
            log.info("resuming at epoch %d (step %d)", start_epoch, step)
        dump_config(config, out / "config.json")
        if start_epoch == 0:
            _write_outputs(out, params, bank, optimizer, config, metrics, 0, step)

    n_batches = len(_batches(len(corpus), config.batch_size, config.seed, 0))
    steps_per_cycle = max(1, config.optim.epochs_per_cycle * n_batches)
    end_epoch = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    if config.batch_size < 2:
        log.warning("batch size %d leaves no negatives; the loss is identically zero", config.batch_size)

    for epoch in range(start_epoch, end_epoch):
        tic = time.perf_counter()
        losses, epoch_augs = [], []
        lr = config.optim.lr_max
        for b_idx, batch in enumerate(_batches(len(corpus), config.batch_size, config.seed, epoch)):
            loss, grad, augs = _batch_step(params, config, bank, corpus, batch, epoch, b_idx)
            lr = cyclic_lr(step, steps_per_cycle, config.optim.lr_max, config.optim.lr_min)
            flat = optimizer.step(params.flat(), grad, lr)
            if not np.all(np.isfinite(flat)):
                raise TrainingError(f"epoch {epoch} batch {b_idx}: parameters diverged")
            params = params.with_flat(flat)
            step += 1
            losses.append(loss)
            epoch_augs.extend(augs)
        cov = coverage_metrics(epoch_augs, config.ga.weights, config.augment) if len(epoch_augs) > 1 else {}
        probed = probe_clouds is not None and (
            (epoch + 1) % config.probe.every == 0 or epoch + 1 == config.epochs
        )
        metrics.append(
            {
                "epoch": epoch + 1,
                "loss_mean": float(np.mean(losses)),
                "probe_accuracy": probe_accuracy(params, config, probe_clouds) if probed else None,
                "ga_min_pairwise": cov.get("min_pairwise"),
                "ga_mean_nn": cov.get("mean_nn"),
                "lr": float(lr),
            }
        )
        wall = time.perf_counter() - tic
        log.info("epoch %d loss %.5f (%.1fs)", epoch + 1, metrics.rows[-1]["loss_mean"], wall)
        if out is not None:
            _write_outputs(out, params, bank, optimizer, config, metrics, epoch + 1, step, wall)
    return params, metrics


def _write_outputs(out: Path, params, bank, optimizer, config, metrics, epoch, step, wall=None):
    save_checkpoint(
        out / "checkpoint",
        params,
        seed=config.seed,
        epoch=epoch,
        step=step,
        bank_records=bank.to_records(),
        optimizer_state=optimizer.state(),
        extra={"config": config.to_dict()},
    )
    (out / "metrics.csv").write_text(metrics.to_csv())
    # Wall time lives apart from metrics.csv so that file stays reproducible.
    if wall is None:
        (out / "timings.csv").write_text("epoch,wall_seconds\n")
    else:
        with open(out / "timings.csv", "a", encoding="ascii") as fh:
            fh.write(f"{epoch},{wall:.3f}\n")


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


def variant_config(base: TrainConfig, gfm: bool, ga: bool, seed: int) -> TrainConfig:
    return dataclasses.replace(
        base,
        seed=seed,
        augment=dataclasses.replace(base.augment, enable_crop=True),
        gfm=dataclasses.replace(base.gfm, enabled=gfm),
        ga=dataclasses.replace(base.ga, enabled=ga),
        probe=dataclasses.replace(base.probe, enabled=True, every=max(base.epochs, 1)),
    )


def ablation_run(base: TrainConfig, out_dir=None, seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> list[dict]:
    """Train every variant for every seed and record the final probe accuracy."""
    rows = []
    for seed in seeds:
        for name, gfm, ga in ABLATION_VARIANTS:
            cfg = variant_config(base, gfm, ga, seed)
            params, metrics = pretrain(cfg)
            acc = metrics.rows[-1]["probe_accuracy"] if metrics.rows else probe_accuracy(params, cfg)
            loss = metrics.rows[-1]["loss_mean"] if metrics.rows else None
            rows.append(
                {
                    "variant": name,
                    "seed": seed,
                    "crop": True,
                    "gfm": gfm,
                    "ga": ga,
                    "probe_accuracy": acc,
                    "final_loss": loss,
                }
            )
            log.info("ablation %s seed %d: probe %.4f", name, seed, acc)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(ablation_csv(rows))
        dump_config(base, out / "config.json")
    return rows


def ablation_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for r in rows:
        w.writerow([_fmt(r[k]) if not isinstance(r[k], bool) else str(r[k]).lower() for k in ABLATION_HEADER])
    return buf.getvalue()


def summarize_ablation(rows: Sequence[dict]) -> dict[str, dict[str, float]]:
    """Mean and (population) std of probe accuracy per variant."""
    out = {}
    for name, _, _ in ABLATION_VARIANTS:
        acc = np.array([r["probe_accuracy"] for r in rows if r["variant"] == name])
        if acc.size:
            out[name] = {"mean": float(acc.mean()), "std": float(acc.std())}
    return out
