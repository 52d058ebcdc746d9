"""Joint training of both cascade stages, prediction with mask fusion, and test-set evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import lws
from .data import augment, extract_nonbrain_mask, filter_tumorless, normalize_intensity
from .errors import ConfigError, ContractViolation, DegenerateBatchError, NumericError
from .metrics import evaluate_dataset
from .model import SUBSTRUCTURE_LABELS, CUNet, CUNetConfig, fuse_predictions
from .optim import load_checkpoint, save_checkpoint, sgd_momentum_step

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    lr_floor: float = 1e-7
    lr_decay: float = 0.1
    lr_period: int = 10
    momentum: float = 0.9
    weight_decay: float = 5e-5
    omega0: float = 0.1
    omega_floor: float = 1e-3
    omega_decay: float = 0.1
    omega_period: int = 10
    alpha1: float = 2.0
    alpha2: float = 1.0
    beta: float = 1.5
    contour_width: int = 4
    batch_size: int = 4
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    sampling: str = "lws"  # "lws" or "uniform" (every pixel weighted 1)
    literal_l2: bool = False  # put weight decay in the loss as lambda * sum(theta^2) instead of the optimizer
    augment: bool = True
    drop_tumorless: bool = True

    def validate(self):
        for key in ("lr0", "lr_floor", "lr_decay", "omega0", "omega_floor", "omega_decay"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.lr_floor > self.lr0 or self.omega_floor > self.omega0:
            raise ConfigError("schedule floors must not exceed initial values")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be >= 1")
        if self.sampling not in ("lws", "uniform"):
            raise ConfigError(f"sampling must be 'lws' or 'uniform', got {self.sampling!r}")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need weight_decay >= 0 and 0 <= momentum < 1")
        return self

    def save(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            raw = json.load(f)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**raw).validate()


@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = -1
    epochs_since_best: int = 0
    steps: int = 0
    w_draws: int = 0
    skipped_batches: int = 0
    history: list = field(default_factory=list)


def schedule(epoch, initial, decay, period, floor):
    """Step decay: ``max(floor, initial * decay ** (epoch // period))``."""
    if epoch < 0:
        raise ContractViolation(f"epoch must be >= 0, got {epoch}")
    k = epoch // period
    inverse = round(1.0 / decay)
    if abs(1.0 / decay - inverse) < 1e-9:
        # divide by an exact integer power so 1e-3 * 0.1**2 lands on 1e-5, not 1.0000000000000003e-05
        return max(floor, initial / inverse**k)
    return max(floor, initial * decay**k)


def lr_at(cfg, epoch):
    return schedule(epoch, cfg.lr0, cfg.lr_decay, cfg.lr_period, cfg.lr_floor)


def omega_at(cfg, epoch):
    return schedule(epoch, cfg.omega0, cfg.omega_decay, cfg.omega_period, cfg.omega_floor)


# --- targets and losses ------------------------------------------------------


def stage_targets(labels):
    """One-hot (binary whole tumor, background + substructures) targets for a (b, h, w) label batch."""
    labels = np.asarray(labels)
    index2 = np.zeros(labels.shape, dtype=np.int64)
    for ch, lab in enumerate(SUBSTRUCTURE_LABELS, start=1):
        index2[labels == lab] = ch
    return lws.one_hot(labels != 0, 2), lws.one_hot(index2, 1 + len(SUBSTRUCTURE_LABELS))


def sample_weights(labels, brain, cfg, rng):
    """Fresh (stage 1, stage 2) sample matrices for a batch."""
    if cfg.sampling == "uniform":
        rng.random(labels.shape)  # keep the generator stream aligned with the LWS path
        rng.random(labels.shape)
        return np.ones(labels.shape), np.ones(labels.shape)
    part = lws.partition_regions(labels, brain, cfg.contour_width)
    first, second = lws.stage_sampling_configs(cfg.alpha1, cfg.alpha2, cfg.beta)
    return lws.sample_matrix(part, first.resolve(part), rng), lws.sample_matrix(part, second, rng)


def cascade_loss(outputs, labels, w1, w2, omega, depth, lam=0.0, params=None):
    """Total loss and per-term values. A stage whose weights sum to zero drops out."""
    t1, t2 = stage_targets(labels)
    terms = {}
    stage = []
    for name, branch, aux, target, w in (
        ("l1", outputs.branch1, outputs.aux[:depth], t1, w1),
        ("l2", outputs.branch2, outputs.aux[depth:], t2, w2),
    ):
        if w.sum() <= 0:
            stage.append((None, []))
            continue
        main = lws.weighted_cross_entropy(branch, target, w)
        aux_losses = [lws.weighted_cross_entropy(a, target, w) for a in aux]
        terms[name] = main.item()
        terms[name + "_aux"] = float(sum(a.item() for a in aux_losses))
        stage.append((main, aux_losses))
    (l1, a1), (l2, a2) = stage
    if l1 is None and l2 is None:
        raise DegenerateBatchError("both stages have zero total weight")
    mains = [x for x in (l1, l2) if x is not None]
    main_sum = mains[0] if len(mains) == 1 else mains[0] + mains[1]
    total = lws.total_loss(main_sum, 0.0, a1 + a2, omega, lam, params)
    return total, terms


# --- training ----------------------------------------------------------------


def _prepare(samples):
    return [normalize_intensity(s) for s in samples]


def _stack(samples):
    return (
        np.stack([s.image for s in samples]),
        np.stack([s.labels for s in samples]),
        np.stack([s.brain_mask for s in samples]),
    )


def train(model, dataset, config, out_dir=None, log=None):
    """Train ``model`` in place on ``dataset['train']``, early-stopping on ``dataset['val']``.

    Returns ``(state, best_params)``; the model is left holding the best parameters.
    With ``out_dir`` the best checkpoint, model config and history are written there.
    """
    config.validate()
    log = log or logger.info
    depth = model.config.depth
    train_cases = dataset["train"]
    if config.drop_tumorless:
        train_cases = filter_tumorless(train_cases, "train")
    if not train_cases:
        raise ValueError("training split is empty")
    train_cases = _prepare(train_cases)
    val_cases = _prepare(dataset.get("val") or [])

    rng = np.random.default_rng(config.seed)
    state = TrainState()
    best = model.params.state()
    use_literal = config.literal_l2
    lam = config.weight_decay if use_literal else 0.0
    decay = 0.0 if use_literal else config.weight_decay

    for epoch in range(config.max_epochs):
        lr, omega = lr_at(config, epoch), omega_at(config, epoch)
        order = rng.permutation(len(train_cases))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_cases[i] for i in order[start : start + config.batch_size]]
            if config.augment:
                batch = [augment(s, rng) for s in batch]
            x, labels, brain = _stack(batch)
            w1, w2 = sample_weights(labels, brain, config, rng)
            state.w_draws += 2
            try:
                outputs = model.forward(x)
                loss, _ = cascade_loss(outputs, labels, w1, w2, omega, depth, lam, model.params)
            except DegenerateBatchError:
                state.skipped_batches += 1
                log(f"epoch {epoch}: skipped batch at {start} (zero sample weight)")
                continue
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite training loss at epoch {epoch}, step {state.steps}")
            model.params.zero_grad()
            loss.backward()
            sgd_momentum_step(model.params, lr, config.momentum, decay)
            state.steps += 1
            losses.append(loss.item())

        train_loss = float(np.mean(losses)) if losses else math.nan
        val_loss = validation_loss(model, val_cases, config, omega) if val_cases else train_loss
        state.history.append({"epoch": epoch, "lr": lr, "omega": omega, "train_loss": train_loss, "val_loss": val_loss})
        state.epoch = epoch + 1
        log(f"epoch {epoch}: lr={lr:.3g} omega={omega:.3g} train={train_loss:.5f} val={val_loss:.5f}")
        if val_loss < state.best_val_loss:
            state.best_val_loss, state.best_epoch, state.epochs_since_best = val_loss, epoch, 0
            best = model.params.state()
        else:
            state.epochs_since_best += 1
            if state.epochs_since_best >= config.patience:
                log(f"early stop after epoch {epoch}: no improvement for {config.patience} epochs")
                break

    model.params.load_state(best)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "best.ckpt", model.params)
        model.config.save(out / "model.json")
        config.save(out / "train.json")
        with open(out / "history.json", "w") as f:
            json.dump(asdict(state), f, indent=2)
    return state, best


def validation_loss(model, cases, config, omega):
    """Mean loss over ``cases`` with sample matrices drawn from a fixed seed, so epochs compare fairly."""
    rng = np.random.default_rng([config.seed, 1])
    total, n = 0.0, 0
    for start in range(0, len(cases), config.batch_size):
        x, labels, brain = _stack(cases[start : start + config.batch_size])
        w1, w2 = sample_weights(labels, brain, config, rng)
        try:
            loss, _ = cascade_loss(model.forward(x), labels, w1, w2, omega, model.config.depth)
        except DegenerateBatchError:
            continue
        total += loss.item()
        n += 1
    return total / n if n else math.nan


# --- inference ---------------------------------------------------------------


def predict(model, sample):
    """Label map for one raw case: mask from raw intensities, normalize, forward, fuse."""
    m = 2**model.config.depth
    h, w = sample.labels.shape if sample.labels is not None else sample.image.shape[1:]
    if h % m or w % m:
        raise ValueError(f"slice size {h}x{w} is not divisible by 2**depth = {m}")
    nonbrain = extract_nonbrain_mask(sample)
    if nonbrain.all():
        return np.zeros((h, w), dtype=np.uint8)
    x = normalize_intensity(sample, ~nonbrain).image[None]
    out = model.forward(x)
    return fuse_predictions(out.branch1.data[0], out.branch2.data[0], nonbrain)


def evaluate(model, cases, report_csv=None, report_json=None):
    cases = list(cases)
    if not cases:
        raise ValueError("evaluation split is empty")
    preds = [predict(model, c) for c in cases]
    report = evaluate_dataset(preds, [c.labels for c in cases], [c.id for c in cases])
    if report_csv is not None:
        report.write_csv(report_csv)
    if report_json is not None:
        report.write_json(report_json)
    return report


def load_model(run_dir_or_ckpt, model_config=None):
    """Rebuild a model from a run directory (``model.json`` + ``best.ckpt``) or a checkpoint path."""
    path = Path(run_dir_or_ckpt)
    ckpt = path / "best.ckpt" if path.is_dir() else path
    if model_config is None:
        model_config = CUNetConfig.load(ckpt.parent / "model.json")
    model = CUNet(model_config)
    load_checkpoint(ckpt, model.params)
    return model
