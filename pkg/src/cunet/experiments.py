"""Desk-scale training experiments: memorizing a handful of phantoms, and LWS against uniform sampling."""

import time

import numpy as np

from .data import synthesize
from .model import CUNet, CUNetConfig
from .train import TrainConfig, evaluate, train


def overfit(
    count=10, size=64, depth=2, base_channels=16, epochs=150, lr0=1e-2, seed=0, data_seed=7, check_every=10, target=None, log=None
):
    """Train on ``count`` tumor phantoms and evaluate on the same phantoms.

    Returns a dict with the final report means, elapsed seconds and the epoch count.
    With ``target`` (``{"wt_dice": 0.95, ...}``) training stops at the first
    ``check_every`` boundary where every target is met.
    """
    cases = synthesize(count, size, data_seed, q_tumor=1.0)
    model = CUNet(CUNetConfig(depth=depth, base_channels=base_channels, seed=seed))
    # constant rate, no augmentation: the goal is memorization
    config = TrainConfig(
        lr0=lr0, lr_period=10**6, omega_period=10**6, max_epochs=check_every, patience=10**6, augment=False, seed=seed
    )
    start, done, means = time.perf_counter(), 0, {}
    while done < epochs:
        config.max_epochs = min(check_every, epochs - done)
        config.seed = seed * 100003 + done
        train(model, {"train": cases}, config, log=lambda _: None)
        done += config.max_epochs
        means = evaluate(model, cases).means
        if log:
            log(f"epoch {done}: " + " ".join(f"{k}={means[k]:.3f}" for k in ("wt_dice", "tc_dice", "et_dice")))
        if target and all(means[k] >= v for k, v in target.items()):
            break
    return {"means": means, "seconds": time.perf_counter() - start, "epochs": done, "model": model}


def compare_sampling(
    seeds=(0, 1, 2), n_train=100, n_test=30, size=64, depth=2, base_channels=8, epochs=15, lr0=1e-2, log=None
):
    """Mean test WT sensitivity of LWS and uniform training per seed.

    Both arms share data, initialization and every other setting; only the
    sample matrices differ. Returns ``{seed: {"lws": report_means, "uniform": report_means}}``.
    """
    out = {}
    for seed in seeds:
        cases = synthesize(n_train + n_test, size, 1000 + seed)
        train_cases, test_cases = cases[:n_train], cases[n_train:]
        out[seed] = {}
        for mode in ("lws", "uniform"):
            model = CUNet(CUNetConfig(depth=depth, base_channels=base_channels, seed=seed))
            config = TrainConfig(lr0=lr0, max_epochs=epochs, patience=10**6, sampling=mode, seed=seed)
            train(model, {"train": train_cases}, config, log=lambda _: None)
            out[seed][mode] = evaluate(model, test_cases).means
            if log:
                log(f"seed {seed} {mode}: wt_sens={out[seed][mode]['wt_sens']:.4f} wt_dice={out[seed][mode]['wt_dice']:.4f}")
    return out
