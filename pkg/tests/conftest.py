import time

import numpy as np
import pytest

from ecoclearn.attacks import AttackConfig, evaluate
from ecoclearn.data import (AugmentationConfig, Dataset, make_texture_images,
                            replicate_channels, split)
from ecoclearn.losses import LossConfig
from ecoclearn.network import NetConfig
from ecoclearn.training import TrainConfig, run_pipeline

# Robustness-trend experiment (acceptance criterion: mean-over-3-seeds FGSM
# accuracy of the dynamic-codebook model beats the supervised baseline, and
# PGD accuracy of the fixed-codebook model beats it, at epsilon = 8/255).
# 5000-sample texture set: a grayscale stand-in with a deliberately faint
# class cue so the plain supervised model is attackable.
TREND_SEEDS = (0, 1, 2)
TREND_DATASET_SEED = 11
TREND_ATTACK = AttackConfig(epsilon=8 / 255, pgd_steps=10, pgd_alpha=2 / 255)


def _trend_train_config(seed, finetune_epochs, pretrain_epochs):
    return TrainConfig(
        epochs_pretrain=pretrain_epochs, epochs_finetune=finetune_epochs,
        batch_size=64, seed=seed,
        learning_rate_pretrain=0.002, learning_rate_finetune=0.005,
        optimizer="adam", loss=LossConfig(tau=0.5),
        augmentation=AugmentationConfig(noise_sigma=0.05, crop_padding=2,
                                        flip_prob=0.5))


@pytest.fixture(scope="session")
def trend_accuracies():
    """Train standard / acl-cfpc / acl-tfc on the texture set for each trend
    seed and evaluate clean, FGSM, and PGD accuracy on the test split."""
    t0 = time.perf_counter()
    ds = make_texture_images(5, 1000, seed=TREND_DATASET_SEED)
    ds = Dataset(replicate_channels(ds.inputs), ds.labels, ds.num_classes)
    splits = split(ds, (0.7, 0.15, 0.1, 0.05), seed=TREND_DATASET_SEED)
    net = NetConfig(input_shape=(3, 28, 28), num_classes=5,
                    feature_dim=64, code_length=32)

    acc = {m: {c: [] for c in ("clean", "fgsm", "pgd")}
           for m in ("standard", "acl-cfpc", "acl-tfc")}
    for seed in TREND_SEEDS:
        cfg = _trend_train_config(seed, finetune_epochs=8, pretrain_epochs=4)
        book = None
        for name in ("standard", "acl-cfpc"):
            result = run_pipeline(name, net, cfg, splits)
            if name == "acl-cfpc":
                book = result.reports["finetune"].final_codebook
            for cond, attack in (("clean", "none"), ("fgsm", "fgsm"), ("pgd", "pgd")):
                acc[name][cond].append(
                    evaluate(result.model, splits["test"], attack=attack,
                             cfg=TREND_ATTACK, seed=seed))
        tfc_cfg = _trend_train_config(seed, finetune_epochs=20, pretrain_epochs=0)
        result = run_pipeline("acl-tfc", net, tfc_cfg, splits, fixed_book=book)
        for cond, attack in (("clean", "none"), ("fgsm", "fgsm"), ("pgd", "pgd")):
            acc["acl-tfc"][cond].append(
                evaluate(result.model, splits["test"], attack=attack,
                         cfg=TREND_ATTACK, seed=seed))
    return acc, time.perf_counter() - t0
