"""White-box L-infinity attacks (single-step sign and iterated projected
sign) plus clean/attacked accuracy evaluation.

The attack loss is the cross-entropy of the same probabilities the model
predicts with: decoder probabilities for codebook models, softmaxed logits
for baselines. Every generated example is asserted to satisfy the epsilon
box and [0, 1] clipping before it is returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, save_dataset_csv
from .losses import cross_entropy_loss
from .tensor import Tensor


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8.0 / 255.0
    pgd_steps: int = 10
    pgd_alpha: float = 2.0 / 255.0
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise AttackError(f"epsilon must be positive, got {self.epsilon}")
        if self.pgd_alpha > self.epsilon:
            raise AttackError("pgd_alpha must not exceed epsilon")
        if self.pgd_steps < 1:
            raise AttackError("pgd_steps must be >= 1")


def _loss_gradient(model, x, y):
    """d(cross-entropy)/dx at x; zeros when the model ignores its input."""
    xt = Tensor(x, requires_grad=True)
    loss = cross_entropy_loss(model.predict_probs(xt), y)
    loss.backward()
    return xt.grad if xt.grad is not None else np.zeros_like(x)


def _signed_step(x, x0, grad, step, epsilon):
    adv = x + step * np.sign(grad)
    adv = np.clip(adv, x0 - epsilon, x0 + epsilon)
    adv = np.clip(adv, 0.0, 1.0)
    # x0 +- epsilon rounds; nudge any one-ulp overshoot back into the box so
    # |adv - x0| <= epsilon holds exactly in float64
    for _ in range(4):
        over = np.abs(adv - x0) > epsilon
        if not np.any(over):
            return adv
        adv = np.where(over, np.nextafter(adv, x0), adv)
    raise AttackError("failed to project onto the epsilon box")


def _assert_contained(adv, x0, epsilon):
    # hard contract: epsilon box and valid pixel range, no tolerance
    assert np.all(np.abs(adv - x0) <= epsilon), "adversarial example left the epsilon box"
    assert adv.min() >= 0.0 and adv.max() <= 1.0, "adversarial example left [0, 1]"


def fgsm(model, x, y, cfg):
    """One signed-gradient step of size epsilon, clipped to the box."""
    x = np.asarray(x, dtype=np.float64)
    grad = _loss_gradient(model, x, y)
    adv = _signed_step(x, x, grad, cfg.epsilon, cfg.epsilon)
    _assert_contained(adv, x, cfg.epsilon)
    return adv


def pgd(model, x, y, cfg, seed=0):
    """Iterated signed-gradient steps of size pgd_alpha, each projected back
    into the epsilon box around the clean input and into [0, 1]. With one
    step, alpha = epsilon and no random start this reproduces fgsm exactly.
    """
    x0 = np.asarray(x, dtype=np.float64)
    if cfg.random_start:
        rng = np.random.default_rng(seed)
        cur = np.clip(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape),
                      0.0, 1.0)
    else:
        cur = x0
    for _ in range(cfg.pgd_steps):
        grad = _loss_gradient(model, cur, y)
        cur = _signed_step(cur, x0, grad, cfg.pgd_alpha, cfg.epsilon)
    _assert_contained(cur, x0, cfg.epsilon)
    return cur


ATTACK_KINDS = ("none", "fgsm", "pgd")


def attack_batch(model, x, y, attack, cfg, seed=0):
    if attack == "none":
        return np.asarray(x, dtype=np.float64)
    if attack == "fgsm":
        return fgsm(model, x, y, cfg)
    if attack == "pgd":
        return pgd(model, x, y, cfg, seed=seed)
    raise AttackError(f"unknown attack {attack!r}; expected one of {ATTACK_KINDS}")


def evaluate(model, dataset, attack="none", cfg=None, seed=0, batch_size=256,
             dump_path=None):
    """Fraction of correct predictions on clean or attacked inputs.

    ``dump_path`` optionally writes every attacked batch to the dataset CSV
    format for inspection.
    """
    if attack != "none" and cfg is None:
        cfg = AttackConfig()
    correct, total = 0, 0
    dumped = []
    for start in range(0, len(dataset), batch_size):
        x = dataset.inputs[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        adv = attack_batch(model, x, y, attack, cfg, seed=seed + start)
        if dump_path is not None and attack != "none":
            dumped.append(adv)
        correct += int(np.sum(model.predict(adv) == y))
        total += y.size
    if dump_path is not None and dumped:
        save_dataset_csv(
            Dataset(np.concatenate(dumped), dataset.labels[:total],
                    dataset.num_classes), dump_path)
    return correct / total if total else 0.0
