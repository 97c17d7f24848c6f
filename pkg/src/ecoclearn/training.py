"""The five training pipelines: standard supervised, contrastive-pretrain
baseline, and the three codebook-learning variants (frozen book after
pretraining, per-batch regenerated book, and from-scratch training against a
fixed book).

Every pipeline is deterministic given its config seed: parameter init,
batch order, augmentation, and positive sampling all draw from generators
derived from that seed. A run is strictly sequential; independent runs share
no mutable state and may execute in parallel processes.
"""

from __future__ import annotations

import time
import zlib
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .codebook import Codebook, decode_probabilities, generate_codebook
from .data import AugmentationConfig, augment_batch_pair
from .losses import (FinetuneParts, LossConfig, PretrainParts,
                     column_separation_loss, cross_entropy_loss, finetune_loss,
                     hinge_codeword_loss, info_nce_loss, mcsm_loss,
                     pretrain_loss, row_separation_loss,
                     sample_positive_indices)
from .network import (PROJECT_FROM_CODEWORD, PROJECT_FROM_FEATURE,
                      encode_codewords, extract_features, forward_baseline,
                      forward_pretrain, init_params, save_checkpoint,
                      transfer_pretrained)
from .tensor import NonFiniteError, Tensor, softmax

MODEL_NAMES = ("standard", "simclr", "acl-pf", "acl-cfpc", "acl-tfc")

REFRESH_ONCE = "once-after-pretrain"
REFRESH_EVERY_BATCH = "every-batch"
REFRESH_FIXED = "fixed-external"


class TrainingDiverged(RuntimeError):
    """A loss or gradient went non-finite; carries the offending step."""

    def __init__(self, phase, epoch, step, cause):
        super().__init__(
            f"training diverged in {phase} at epoch {epoch}, step {step}: {cause}")
        self.phase, self.epoch, self.step = phase, epoch, step


@dataclass(frozen=True)
class TrainConfig:
    epochs_pretrain: int = 10
    epochs_finetune: int = 20
    batch_size: int = 32
    learning_rate_pretrain: float = 0.05
    learning_rate_finetune: float = 0.01
    optimizer: str = "sgd-momentum"   # sgd | sgd-momentum | adam
    momentum: float = 0.9
    loss: LossConfig = field(default_factory=LossConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    codebook_refresh: str | None = None   # None = the pipeline's natural mode
    mcsm_weight: float = 1.0
    cfpc_ema_momentum: float | None = None
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs_pretrain, self.epochs_finetune) < 0 or self.batch_size < 2:
            raise ValueError("epoch counts must be >= 0 and batch_size >= 2")
        if min(self.learning_rate_pretrain, self.learning_rate_finetune) < 0:
            raise ValueError("learning rates must be >= 0")
        if self.optimizer not in ("sgd", "sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.codebook_refresh is not None and self.codebook_refresh not in (
                REFRESH_ONCE, REFRESH_EVERY_BATCH, REFRESH_FIXED):
            raise ValueError(f"unknown codebook_refresh {self.codebook_refresh!r}")


@dataclass
class TrainReport:
    loss_traces: dict
    total_components: tuple
    val_accuracy: list
    best_epoch: int
    final_codebook: Codebook | None
    best_codebook: Codebook | None
    codebook_trace: list
    wall_ms: float
    best_params: object = None
    final_params: object = None


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, named_tensors):
        for _, t in named_tensors:
            if t.grad is not None:
                t.data -= self.lr * t.grad


class SgdMomentum:
    def __init__(self, lr, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, named_tensors):
        for name, t in named_tensors:
            if t.grad is None:
                continue
            v = self.velocity.get(name)
            v = t.grad.copy() if v is None else self.momentum * v + t.grad
            self.velocity[name] = v
            t.data -= self.lr * v


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, named_tensors):
        self.t += 1
        for name, t in named_tensors:
            if t.grad is None:
                continue
            m = self.m.get(name, np.zeros_like(t.data))
            v = self.v.get(name, np.zeros_like(t.data))
            m = self.beta1 * m + (1 - self.beta1) * t.grad
            v = self.beta2 * v + (1 - self.beta2) * t.grad ** 2
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            t.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind, lr, momentum=0.9):
    if kind == "sgd":
        return Sgd(lr)
    if kind == "sgd-momentum":
        return SgdMomentum(lr, momentum)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# trained model wrapper (shared with the attacks module)
# ---------------------------------------------------------------------------

MODEL_KIND_ECOC = "ecoc"
MODEL_KIND_BASELINE = "baseline"


@dataclass
class TrainedModel:
    kind: str
    params: object
    book: Codebook | None = None

    def predict_probs(self, x):
        """Differentiable class probabilities (B, K) for an input Tensor."""
        if self.kind == MODEL_KIND_ECOC:
            c = encode_codewords(self.params, extract_features(self.params, x))
            return decode_probabilities(c, self.book)
        return softmax(forward_baseline(self.params, x), axis=-1)

    def predict(self, inputs, batch_size=512):
        """Predicted 1-based class ids for a plain array of inputs."""
        preds = []
        for start in range(0, inputs.shape[0], batch_size):
            probs = self.predict_probs(Tensor(inputs[start:start + batch_size]))
            preds.append(np.argmax(probs.data, axis=1) + 1)
        return np.concatenate(preds) if preds else np.array([], dtype=np.int64)


def accuracy(model, dataset):
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(model.predict(dataset.inputs) == dataset.labels))


# ---------------------------------------------------------------------------
# shared loop machinery
# ---------------------------------------------------------------------------

def _stream(seed, phase):
    # crc32 keeps the stream stable across processes (str hash is randomized)
    return np.random.default_rng(
        np.random.SeedSequence((seed, zlib.crc32(phase.encode()))))


def _batches(n, batch_size, rng, min_size=2):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if idx.size >= min_size:
            yield idx


def _fmt(value):
    return repr(float(value))


def _append_metrics(path, components, epoch, comps, val_acc, wall_ms):
    new = not path.exists()
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write("epoch," + ",".join(components) + ",val_accuracy,wall_ms\n")
        cells = [str(epoch)] + [_fmt(comps[c]) for c in components]
        cells += [_fmt(val_acc), _fmt(wall_ms)]
        fh.write(",".join(cells) + "\n")


def _epoch_end(out_dir, tag, params, components, epoch, means, val_acc, wall_ms):
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    _append_metrics(out_dir / f"metrics_{tag}.csv", components, epoch, means,
                    val_acc, wall_ms)
    save_checkpoint(params, out_dir / f"checkpoint_{tag}_epoch{epoch:03d}.npz")


def _class_mean_rows(values, labels, num_classes):
    rows = np.zeros((num_classes, values.shape[1]))
    for k in range(1, num_classes + 1):
        members = values[labels == k]
        if members.shape[0]:
            rows[k - 1] = members.mean(axis=0)
    return rows


def _mean_decode_accuracy(embedded, labels, rows):
    norms = np.linalg.norm(embedded, axis=1, keepdims=True)
    row_norms = np.linalg.norm(rows, axis=1, keepdims=True)
    ok_rows = row_norms[:, 0] > 0
    if not np.any(ok_rows) or np.any(norms == 0):
        return 0.0
    sims = (embedded / norms) @ (rows / np.where(row_norms > 0, row_norms, 1.0)).T
    sims[:, ~ok_rows] = -np.inf
    return float(np.mean(np.argmax(sims, axis=1) + 1 == labels))


def _embed(params, inputs, use_codewords):
    x = Tensor(inputs)
    h = extract_features(params, x)
    if use_codewords:
        return encode_codewords(params, h).data
    return h.data


def _book_from_params(params, gen_split):
    codewords = _embed(params, gen_split.inputs, use_codewords=True)
    return generate_codebook(codewords, gen_split.labels, gen_split.num_classes)


def _proxy_val_accuracy(params, splits, use_codewords):
    """Pretraining monitor: class-mean codewords from the generation split,
    cosine-decoded on the validation split."""
    emb_gen = _embed(params, splits["generation"].inputs, use_codewords)
    rows = _class_mean_rows(emb_gen, splits["generation"].labels,
                            splits["generation"].num_classes)
    emb_val = _embed(params, splits["validation"].inputs, use_codewords)
    return _mean_decode_accuracy(emb_val, splits["validation"].labels, rows)


def _guard(phase, epoch, step):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc_type is not None and issubclass(exc_type, NonFiniteError):
                raise TrainingDiverged(phase, epoch, step, exc) from exc
            return False

    return _Ctx()


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def pretrain(net_cfg, cfg, splits, out_dir=None, tag="pretrain"):
    """Contrastive pretraining; with a codeword-projecting config the column
    separation term is added (skipped entirely when its weight is 0)."""
    train = splits["train"]
    params = init_params(net_cfg, cfg.seed)
    is_acl = net_cfg.project_from == PROJECT_FROM_CODEWORD
    groups = ("extractor", "encoder", "projection") if is_acl else ("extractor", "projection")
    trainable = params.named_tensors(groups)
    use_csl = is_acl and cfg.loss.lambda_csl > 0

    opt = make_optimizer(cfg.optimizer, cfg.learning_rate_pretrain, cfg.momentum)
    rng = _stream(cfg.seed, "pretrain")
    components = ("info_nce", "column_separation", "total")
    traces = defaultdict(list)
    val_trace = []
    t_start = time.perf_counter()
    book = None

    for epoch in range(cfg.epochs_pretrain):
        t_epoch = time.perf_counter()
        sums, steps = defaultdict(float), 0
        for step, idx in enumerate(_batches(len(train), cfg.batch_size, rng)):
            with _guard(tag, epoch, step):
                v1, v2 = augment_batch_pair(train.inputs[idx], cfg.augmentation, rng)
                x = Tensor(np.concatenate([v1, v2]))
                b = idx.size
                pair = np.concatenate([np.arange(b) + b, np.arange(b)])
                out = forward_pretrain(params, x)
                nce = info_nce_loss(out.z, pair, cfg.loss)
                csl = column_separation_loss(out.c, cfg.loss) if use_csl else Tensor(0.0)
                total = pretrain_loss(PretrainParts(nce, csl), cfg.loss)
                total.backward()
                opt.step(trainable)
            sums["info_nce"] += nce.item()
            sums["column_separation"] += csl.item()
            sums["total"] += total.item()
            steps += 1
        means = {c: sums[c] / max(steps, 1) for c in components}
        for c in components:
            traces[c].append(means[c])
        val_acc = _proxy_val_accuracy(params, splits, use_codewords=is_acl)
        val_trace.append(val_acc)
        wall = (time.perf_counter() - t_epoch) * 1000.0
        _epoch_end(out_dir, tag, params, components, epoch, means, val_acc, wall)

    if is_acl and cfg.epochs_pretrain > 0:
        book = _book_from_params(params, splits["generation"])
    report = TrainReport(
        loss_traces=dict(traces),
        total_components=("info_nce", "column_separation"),
        val_accuracy=val_trace,
        best_epoch=int(np.argmax(val_trace)) if val_trace else 0,
        final_codebook=book,
        best_codebook=book,
        codebook_trace=[book.rows.copy()] if book is not None else [],
        wall_ms=(time.perf_counter() - t_start) * 1000.0,
        best_params=params,
        final_params=params,
    )
    return params, report


# ---------------------------------------------------------------------------
# fine-tuning (shared by the three codebook variants)
# ---------------------------------------------------------------------------

def _refresh_book(book, params, gen_split, batch_codewords, batch_labels, ema):
    if ema is None:
        return _book_from_params(params, gen_split)
    rows = book.rows.copy()
    for k in np.unique(batch_labels):
        members = batch_codewords[batch_labels == k]
        rows[k - 1] = ema * rows[k - 1] + (1.0 - ema) * members.mean(axis=0)
    return Codebook(rows)


def _finetune(params, variant, net_cfg, cfg, splits, fixed_book=None,
              out_dir=None, tag=None):
    train, gen = splits["train"], splits["generation"]
    tag = tag or f"finetune_{variant}"
    trainable = params.named_tensors(("extractor", "encoder"))
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate_finetune, cfg.momentum)
    rng = _stream(cfg.seed, "finetune")

    if variant == "tfc":
        mode = cfg.codebook_refresh or REFRESH_FIXED
        if mode != REFRESH_FIXED or fixed_book is None:
            raise ValueError("tfc training needs a fixed external codebook")
        book = fixed_book
    elif variant == "cfpc":
        mode = cfg.codebook_refresh or REFRESH_EVERY_BATCH
        if mode == REFRESH_FIXED:
            raise ValueError("cfpc regenerates its codebook; fixed mode is tfc")
        book = _book_from_params(params, gen)
    else:
        mode = cfg.codebook_refresh or REFRESH_ONCE
        if mode != REFRESH_ONCE:
            raise ValueError("pf uses a codebook frozen after generation")
        book = _book_from_params(params, gen)

    log_mcsm = variant in ("cfpc", "tfc")
    components = ("cross_entropy", "hinge", "row_separation") \
        + (("mcsm",) if log_mcsm else ()) + ("total",)
    total_components = ("cross_entropy", "hinge", "row_separation") \
        + (("mcsm",) if variant == "cfpc" and cfg.mcsm_weight == 1.0 else ())

    traces = defaultdict(list)
    val_trace, codebook_trace = [], []
    best_acc, best_epoch, best_params, best_book = -1.0, 0, None, None
    t_start = time.perf_counter()

    for epoch in range(cfg.epochs_finetune):
        t_epoch = time.perf_counter()
        sums, steps = defaultdict(float), 0
        for step, idx in enumerate(_batches(len(train), cfg.batch_size, rng)):
            x, y = Tensor(train.inputs[idx]), train.labels[idx]
            with _guard(tag, epoch, step):
                h = extract_features(params, x)
                c = encode_codewords(params, h)
                if variant == "cfpc" and mode == REFRESH_EVERY_BATCH:
                    book = _refresh_book(book, params, gen, c.data, y,
                                         cfg.cfpc_ema_momentum)
                p = decode_probabilities(c, book)
                parts = FinetuneParts(
                    cross_entropy=cross_entropy_loss(p, y),
                    hinge=hinge_codeword_loss(
                        c, Tensor(book.rows_for_labels(y)), cfg.loss.hinge_margin),
                    row_separation=row_separation_loss(
                        c, y, sample_positive_indices(y, rng), book, cfg.loss),
                    mcsm=mcsm_loss(book) if log_mcsm else None,
                )
                total = finetune_loss(parts, variant, cfg.mcsm_weight)
                total.backward()
                opt.step(trainable)
            sums["cross_entropy"] += parts.cross_entropy.item()
            sums["hinge"] += parts.hinge.item()
            sums["row_separation"] += parts.row_separation.item()
            if log_mcsm:
                sums["mcsm"] += parts.mcsm.item()
            sums["total"] += total.item()
            steps += 1

        if variant == "cfpc" and mode == REFRESH_EVERY_BATCH \
                and cfg.cfpc_ema_momentum is None:
            book = _book_from_params(params, gen)  # validation sees fresh rows
        codebook_trace.append(book.rows.copy())
        means = {c_: sums[c_] / max(steps, 1) for c_ in components}
        for c_ in components:
            traces[c_].append(means[c_])
        model = TrainedModel(MODEL_KIND_ECOC, params, book)
        val_acc = accuracy(model, splits["validation"])
        val_trace.append(val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_params, best_book = params.copy(), book
        wall = (time.perf_counter() - t_epoch) * 1000.0
        _epoch_end(out_dir, tag, params, components, epoch, means, val_acc, wall)

    if best_params is None:
        best_params, best_book = params.copy(), book
    return TrainReport(
        loss_traces=dict(traces),
        total_components=total_components,
        val_accuracy=val_trace,
        best_epoch=best_epoch,
        final_codebook=book,
        best_codebook=best_book,
        codebook_trace=codebook_trace,
        wall_ms=(time.perf_counter() - t_start) * 1000.0,
        best_params=best_params,
        final_params=params,
    )


def finetune_pf(pretrained, net_cfg, cfg, splits, out_dir=None, tag=None):
    """Frozen-codebook fine-tuning: the book is generated once from the
    generation split before the first step and never changes."""
    params = transfer_pretrained(pretrained, cfg.seed + 1)
    return _finetune(params, "pf", net_cfg, cfg, splits, out_dir=out_dir, tag=tag)


def finetune_cfpc(pretrained, net_cfg, cfg, splits, out_dir=None, tag=None):
    """Dynamic-codebook fine-tuning: the book is regenerated from the
    generation split before every batch (or EMA-updated from batch class
    means when ``cfpc_ema_momentum`` is set) and always treated as a
    constant target for gradients."""
    params = transfer_pretrained(pretrained, cfg.seed + 1)
    return _finetune(params, "cfpc", net_cfg, cfg, splits, out_dir=out_dir, tag=tag)


def train_tfc(fixed_book, net_cfg, cfg, splits, out_dir=None, tag=None):
    """From-scratch training against a fixed codebook (no pretrained
    transfer; the book never changes)."""
    params = init_params(net_cfg, cfg.seed)
    return _finetune(params, "tfc", net_cfg, cfg, splits, fixed_book=fixed_book,
                     out_dir=out_dir, tag=tag)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def _supervised(params, cfg, splits, out_dir=None, tag="supervised"):
    train = splits["train"]
    trainable = params.named_tensors(("extractor", "head"))
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate_finetune, cfg.momentum)
    rng = _stream(cfg.seed, "supervised")
    components = ("cross_entropy", "total")
    traces = defaultdict(list)
    val_trace = []
    best_acc, best_epoch, best_params = -1.0, 0, None
    t_start = time.perf_counter()

    for epoch in range(cfg.epochs_finetune):
        t_epoch = time.perf_counter()
        sums, steps = defaultdict(float), 0
        for step, idx in enumerate(_batches(len(train), cfg.batch_size, rng)):
            x, y = Tensor(train.inputs[idx]), train.labels[idx]
            with _guard(tag, epoch, step):
                logits = forward_baseline(params, x)
                ce = cross_entropy_loss(softmax(logits, axis=-1), y)
                ce.backward()
                opt.step(trainable)
            sums["cross_entropy"] += ce.item()
            sums["total"] += ce.item()
            steps += 1
        means = {c: sums[c] / max(steps, 1) for c in components}
        for c in components:
            traces[c].append(means[c])
        model = TrainedModel(MODEL_KIND_BASELINE, params)
        val_acc = accuracy(model, splits["validation"])
        val_trace.append(val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch, best_params = val_acc, epoch, params.copy()
        wall = (time.perf_counter() - t_epoch) * 1000.0
        _epoch_end(out_dir, tag, params, components, epoch, means, val_acc, wall)

    if best_params is None:
        best_params = params.copy()
    return TrainReport(
        loss_traces=dict(traces),
        total_components=("cross_entropy",),
        val_accuracy=val_trace,
        best_epoch=best_epoch,
        final_codebook=None,
        best_codebook=None,
        codebook_trace=[],
        wall_ms=(time.perf_counter() - t_start) * 1000.0,
        best_params=best_params,
        final_params=params,
    )


def train_standard(net_cfg, cfg, splits, out_dir=None, tag="standard"):
    """Plain supervised cross-entropy on the classification head."""
    params = init_params(net_cfg, cfg.seed)
    return _supervised(params, cfg, splits, out_dir=out_dir, tag=tag)


def train_simclr(net_cfg, cfg, splits, out_dir=None, tag="simclr"):
    """Contrastive pretraining of the extractor (projection from features,
    no codeword losses), then supervised fine-tuning matching standard."""
    feature_cfg = replace(net_cfg, project_from=PROJECT_FROM_FEATURE)
    contrastive_cfg = replace(cfg, loss=replace(cfg.loss, lambda_csl=0.0))
    pre_params, pre_report = pretrain(feature_cfg, contrastive_cfg, splits,
                                      out_dir=out_dir, tag=f"{tag}_pretrain")
    params = transfer_pretrained(pre_params, cfg.seed + 1)
    report = _supervised(params, cfg, splits, out_dir=out_dir, tag=f"{tag}_finetune")
    return pre_params, pre_report, report


# ---------------------------------------------------------------------------
# pipeline dispatch
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    model: TrainedModel
    reports: dict
    epochs_total: int
    wall_ms: float


def run_pipeline(model_name, net_cfg, cfg, splits, fixed_book=None, out_dir=None):
    """Train one of the five models end to end and wrap the selected-epoch
    parameters (+ codebook where applicable) for evaluation."""
    t0 = time.perf_counter()
    if model_name == "standard":
        report = train_standard(net_cfg, cfg, splits, out_dir=out_dir)
        model = TrainedModel(MODEL_KIND_BASELINE, report.best_params)
        reports = {"finetune": report}
        epochs = cfg.epochs_finetune
    elif model_name == "simclr":
        _, pre_report, report = train_simclr(net_cfg, cfg, splits, out_dir=out_dir)
        model = TrainedModel(MODEL_KIND_BASELINE, report.best_params)
        reports = {"pretrain": pre_report, "finetune": report}
        epochs = cfg.epochs_pretrain + cfg.epochs_finetune
    elif model_name in ("acl-pf", "acl-cfpc"):
        pre_params, pre_report = pretrain(net_cfg, cfg, splits, out_dir=out_dir,
                                          tag=f"{model_name}_pretrain")
        fn = finetune_pf if model_name == "acl-pf" else finetune_cfpc
        report = fn(pre_params, net_cfg, cfg, splits, out_dir=out_dir,
                    tag=f"{model_name}_finetune")
        model = TrainedModel(MODEL_KIND_ECOC, report.best_params, report.best_codebook)
        reports = {"pretrain": pre_report, "finetune": report}
        epochs = cfg.epochs_pretrain + cfg.epochs_finetune
    elif model_name == "acl-tfc":
        if fixed_book is None:
            raise ValueError("acl-tfc needs the codebook of a completed acl-cfpc run")
        report = train_tfc(fixed_book, net_cfg, cfg, splits, out_dir=out_dir,
                           tag="acl-tfc")
        model = TrainedModel(MODEL_KIND_ECOC, report.best_params, report.best_codebook)
        reports = {"finetune": report}
        epochs = cfg.epochs_finetune
    else:
        raise ValueError(f"unknown model {model_name!r}; expected one of {MODEL_NAMES}")
    return PipelineResult(model=model, reports=reports, epochs_total=epochs,
                          wall_ms=(time.perf_counter() - t0) * 1000.0)
