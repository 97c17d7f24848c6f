"""Acceptance criteria, one test per criterion, each printing a PASS line
(run with ``pytest tests/test_acceptance.py -v -s``).

The smoke-training and trend criteria train real models; everything else is
sub-second. Expected wall time: a few minutes in total, dominated by the
robustness-trend runs.
"""

import time

import numpy as np
import pytest

from ecoclearn.attacks import AttackConfig, evaluate, fgsm, pgd
from ecoclearn.cli import read_results, run_experiment
from ecoclearn.codebook import (Codebook, SOURCE_FIXED_BINARY, cosine_decode,
                                decode_probabilities, generate_codebook,
                                hamming_decode, hamming_distances)
from ecoclearn.config import config_from_entries, parse_config_text
from ecoclearn.data import (AugmentationConfig, Dataset, make_texture_images,
                            replicate_channels, split)
from ecoclearn.losses import (FinetuneParts, LossConfig, PretrainParts,
                              column_separation_loss, cross_entropy_loss,
                              finetune_loss, hinge_codeword_loss,
                              info_nce_loss, mcsm_loss, pretrain_loss,
                              row_separation_loss)
from ecoclearn.network import NetConfig, load_checkpoint
from ecoclearn.tensor import Tensor, finite_difference_check
from ecoclearn.training import (TrainConfig, TrainedModel, run_pipeline)

EPS = 8.0 / 255.0
ALPHA = 2.0 / 255.0

TABLE_BOOK = np.array([
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 1, 1, 0, 1, 0, 1, 1, 1, 1],
    [1, 1, 0, 1, 1, 1, 0, 0, 1, 1],
    [1, 0, 1, 1, 0, 1, 1, 0, 0, 1],
], dtype=float)
TABLE_QUERY = np.array([1, 0, 1, 1, 0, 1, 0, 1, 1, 1], dtype=float)

SMOKE_CONFIG = """
dataset.kind = blobs
dataset.blobs.classes = 3
dataset.blobs.per_class = 100
dataset.blobs.dim = 16
dataset.blobs.spread = 0.02
dataset.seed = 7
split.ratios = 0.7,0.15,0.1,0.05
models = standard,acl-pf,acl-cfpc,acl-tfc
seeds = 0,1,2
net.hidden_sizes = 32
net.feature_dim = 32
net.code_length = 16
train.optimizer = adam
train.epochs_pretrain = 15
train.epochs_finetune = 20
train.batch_size = 32
train.lr_pretrain = 0.005
train.lr_finetune = 0.01
loss.tau = 0.5
aug.noise_sigma = 0.08
attack.pgd_steps = 10
"""


def _announce(num, name, started, detail=""):
    wall = time.perf_counter() - started
    suffix = f" ({detail})" if detail else ""
    print(f"\nACCEPT C{num:02d} {name}: PASS in {wall:.3f}s{suffix}")


# -- C1: worked Hamming-decoding example ---------------------------------------

def test_c01_table_decoding_oracle():
    t0 = time.perf_counter()
    book = Codebook(TABLE_BOOK, source=SOURCE_FIXED_BINARY)

    def bit_count_oracle(query, rows):
        return [int(sum(int(a) ^ int(b) for a, b in zip(query, row)))
                for row in rows]

    oracle = bit_count_oracle(TABLE_QUERY, TABLE_BOOK)
    assert oracle == [7, 6, 4, 3]

    t1 = time.perf_counter()
    predicted = hamming_decode(TABLE_QUERY, book)
    decode_wall = time.perf_counter() - t1
    assert predicted == 4
    assert hamming_distances(TABLE_QUERY, book).tolist() == oracle
    assert decode_wall < 1e-3
    _announce(1, "table decoding oracle", t0,
              f"distances {oracle}, class 4, decode {decode_wall * 1e6:.0f}us")


# -- C2: finite-difference gradient suite ---------------------------------------

def test_c02_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20)
    cfg = LossConfig(tau=0.5)
    B, n, K, dz = 6, 4, 3, 4
    labels = np.array([1, 2, 3, 1, 2, 3])
    positives = np.array([3, 4, 5, 0, 1, 2])
    pair = np.concatenate([np.arange(3) + 3, np.arange(3)])
    book = Codebook(rng.normal(size=(K, n)))
    book_tensor = Tensor(book.rows)
    probe_w = Tensor(rng.normal(size=(B, K)))
    to_c = Tensor(rng.normal(size=(dz, n)) * 0.7)
    to_z = Tensor(rng.normal(size=(dz, dz)) * 0.7)
    true_rows = Tensor(book.rows[labels - 1])

    def eq5_functional(t):
        probs = decode_probabilities(t.reshape(B, n), book)
        return (probs * probe_w).sum()

    def eq8_composite(t):
        base = t.reshape(B, dz)
        parts = PretrainParts(
            info_nce=info_nce_loss(base @ to_z, pair, cfg),
            column_separation=column_separation_loss(base @ to_c, cfg))
        return pretrain_loss(parts, cfg)

    def finetune_composite(variant):
        def f(t):
            c = t.reshape(B, dz) @ to_c
            parts = FinetuneParts(
                cross_entropy=cross_entropy_loss(decode_probabilities(c, book), labels),
                hinge=hinge_codeword_loss(c, true_rows, cfg.hinge_margin),
                row_separation=row_separation_loss(c, labels, positives, book, cfg),
                mcsm=mcsm_loss(book_tensor))
            return finetune_loss(parts, variant)
        return f

    suite = {
        "csl (columns)": (lambda t: column_separation_loss(t.reshape(B, n), cfg), B * n),
        "info_nce": (lambda t: info_nce_loss(t.reshape(B, dz), pair, cfg), B * dz),
        "rsl": (lambda t: row_separation_loss(t.reshape(B, n), labels, positives, book, cfg), B * n),
        "decode probabilities": (eq5_functional, B * n),
        "cross entropy": (lambda t: cross_entropy_loss(
            decode_probabilities(t.reshape(B, n), book), labels), B * n),
        "hinge": (lambda t: hinge_codeword_loss(t.reshape(B, n), true_rows, cfg.hinge_margin), B * n),
        "mcsm": (lambda t: mcsm_loss(t.reshape(K, n)), K * n),
        "pretrain total": (eq8_composite, B * dz),
        "finetune total": (finetune_composite("pf"), B * dz),
        "finetune total + mcsm": (finetune_composite("cfpc"), B * dz),
    }

    worst = {}
    for name, (f, size) in suite.items():
        errs = []
        for _ in range(10):
            point = Tensor(rng.normal(size=size))
            if name == "mcsm":  # keep clear of argmax ties
                point = Tensor(rng.normal(size=size) + np.linspace(0, 1, size))
            errs.append(finite_difference_check(f, point, h=1e-5))
        worst[name] = max(errs)
        assert worst[name] < 1e-4, f"{name}: max rel err {worst[name]}"
    wall = time.perf_counter() - t0
    assert wall < 10.0
    _announce(2, "gradient suite", t0,
              "worst " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))


# -- C3: codebook-generation oracle ---------------------------------------------

def test_c03_codebook_generation_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(30)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(2, 9))
        count = int(rng.integers(k, 60))
        labels = np.concatenate([np.arange(1, k + 1),
                                 rng.integers(1, k + 1, size=count - k)])
        rng.shuffle(labels)
        words = rng.normal(size=(count, n))
        book = generate_codebook(Tensor(words), labels, k)
        for cls in range(1, k + 1):
            acc, m = np.zeros(n), 0
            for i in range(count):
                if labels[i] == cls:
                    acc += words[i]
                    m += 1
            worst = max(worst, float(np.max(np.abs(book.rows[cls - 1] - acc / m))))
    wall = time.perf_counter() - t0
    assert worst < 1e-12
    assert wall < 1.0
    _announce(3, "codebook generation oracle", t0, f"max abs diff {worst:.2e}")


# -- C4: definitional collapses ---------------------------------------------------

def test_c04_definitional_collapses():
    t0 = time.perf_counter()
    rng = np.random.default_rng(40)

    net = NetConfig(input_shape=(6,), num_classes=3, hidden_sizes=(8,),
                    feature_dim=8, code_length=6)
    from ecoclearn.network import init_params
    model = TrainedModel("baseline", init_params(net, seed=4))
    x = rng.random((12, 6))
    y = rng.integers(1, 4, size=12)
    one_step = AttackConfig(epsilon=EPS, pgd_steps=1, pgd_alpha=EPS, random_start=False)
    assert np.array_equal(pgd(model, x, y, one_step), fgsm(model, x, y, one_step))

    for _ in range(50):
        parts = FinetuneParts(*(Tensor(v) for v in rng.normal(size=3)),
                              mcsm=Tensor(float(rng.normal())))
        gap = finetune_loss(parts, "cfpc").item() - finetune_loss(parts, "pf").item()
        assert abs(gap - parts.mcsm.item()) < 1e-12

    for _ in range(50):
        m = Tensor(rng.normal(size=(7, 5)))
        unordered = column_separation_loss(m, LossConfig(csl_pair_mode="unordered")).item()
        ordered = column_separation_loss(m, LossConfig(csl_pair_mode="ordered")).item()
        assert abs(ordered - 2.0 * unordered) < 1e-12

    wall = time.perf_counter() - t0
    assert wall < 1.0
    _announce(4, "definitional collapses", t0,
              "pgd-1 == fgsm bitwise; eq11-eq9 == mcsm; ordered == 2x unordered")


# -- C5: scale invariances ----------------------------------------------------------

def test_c05_scale_invariances():
    t0 = time.perf_counter()
    rng = np.random.default_rng(50)
    cfg = LossConfig(tau=0.5)
    pair = np.concatenate([np.arange(3) + 3, np.arange(3)])
    labels = np.array([1, 2, 3, 1, 2, 3])
    positives = np.array([3, 4, 5, 0, 1, 2])

    for _ in range(100):
        scale = float(rng.uniform(1e-3, 1e3))
        m = rng.normal(size=(6, 5))
        rows = rng.normal(size=(3, 5))
        book, book_s = Codebook(rows), Codebook(rows * scale)

        assert abs(column_separation_loss(Tensor(m), cfg).item()
                   - column_separation_loss(Tensor(m * scale), cfg).item()) < 1e-9
        assert abs(info_nce_loss(Tensor(m), pair, cfg).item()
                   - info_nce_loss(Tensor(m * scale), pair, cfg).item()) < 1e-9
        assert abs(row_separation_loss(Tensor(m), labels, positives, book, cfg).item()
                   - row_separation_loss(Tensor(m * scale), labels, positives, book_s, cfg).item()) < 1e-9
        assert abs(hinge_codeword_loss(Tensor(m[:3]), Tensor(rows)).item()
                   - hinge_codeword_loss(Tensor(m[:3] * scale), Tensor(rows * scale)).item()) < 1e-9
        assert abs(mcsm_loss(book).item() - mcsm_loss(book_s).item()) < 1e-9

        query = rng.normal(size=5)
        cls_a, probs_a = cosine_decode(query, book)
        cls_b, probs_b = cosine_decode(query * scale, book)
        assert cls_a == cls_b
        assert np.max(np.abs(probs_a - probs_b)) < 1e-9
        scaled_rows = rows.copy()
        scaled_rows[int(rng.integers(3))] *= scale
        cls_c, _ = cosine_decode(query, Codebook(scaled_rows))
        assert cls_a == cls_c

        bits = (rng.random(8) > 0.5).astype(float)
        bbook = Codebook((rng.random((3, 8)) > 0.5).astype(float),
                         source=SOURCE_FIXED_BINARY)
        assert hamming_decode(bits, bbook) == hamming_decode(bits.copy(), bbook)

    wall = time.perf_counter() - t0
    assert wall < 5.0
    _announce(5, "scale invariances", t0, "100 trials per surface at 1e-9")


# -- C6 + C9: smoke training and determinism ------------------------------------------

@pytest.fixture(scope="module")
def smoke_runs(tmp_path_factory):
    cfg = config_from_entries(parse_config_text(SMOKE_CONFIG))
    t0 = time.perf_counter()
    first_dir = tmp_path_factory.mktemp("smoke_a")
    first = run_experiment(cfg, first_dir)
    first_wall = time.perf_counter() - t0
    second_dir = tmp_path_factory.mktemp("smoke_b")
    second = run_experiment(cfg, second_dir)
    return first_dir, first, first_wall, second_dir, second


def test_c06_smoke_training_targets(smoke_runs):
    t0 = time.perf_counter()
    first_dir, results_path, wall, *_ = smoke_runs
    floors = {"standard": 0.95, "acl-pf": 0.95, "acl-cfpc": 0.95, "acl-tfc": 0.90}
    best_val = {}
    for model in floors:
        for seed in (0, 1, 2):
            run_dir = first_dir / f"{model}_seed{seed}"
            candidates = sorted(run_dir.glob("metrics_*finetune.csv")) \
                or sorted(run_dir.glob("metrics_acl-tfc.csv")) \
                or sorted(run_dir.glob("metrics_*.csv"))
            lines = candidates[-1].read_text().strip().splitlines()
            header = lines[0].split(",")
            vi = header.index("val_accuracy")
            vals = [float(line.split(",")[vi]) for line in lines[1:]]
            best_val[(model, seed)] = max(vals)
            assert len(vals) <= 30
            assert max(vals) >= floors[model], \
                f"{model} seed {seed}: best val {max(vals):.3f} < {floors[model]}"
    assert wall < 120.0, f"smoke training took {wall:.0f}s"
    summary = "; ".join(
        f"{m}>={min(best_val[(m, s)] for s in (0, 1, 2)):.2f}" for m in floors)
    _announce(6, "smoke training targets", t0, f"{summary}; trained in {wall:.0f}s")


def test_c09_smoke_determinism(smoke_runs):
    t0 = time.perf_counter()
    first_dir, first, _, second_dir, second = smoke_runs

    def strip_wall_columns(path):
        lines = path.read_text().strip().splitlines()
        header = lines[0].split(",")
        keep = [i for i, name in enumerate(header) if name != "wall_ms"]
        return ["\x1f".join(line.split(",")[i] for i in keep) for line in lines]

    assert strip_wall_columns(first) == strip_wall_columns(second)
    first_metrics = sorted(p.relative_to(first_dir) for p in first_dir.rglob("metrics_*.csv"))
    second_metrics = sorted(p.relative_to(second_dir) for p in second_dir.rglob("metrics_*.csv"))
    assert first_metrics == second_metrics
    assert first_metrics, "no metrics CSVs written"
    for rel in first_metrics:
        assert strip_wall_columns(first_dir / rel) == strip_wall_columns(second_dir / rel), \
            f"nondeterministic metrics in {rel}"
    _announce(9, "bit-identical rerun", t0,
              f"{len(first_metrics)} metrics CSVs + results.csv identical modulo wall_ms")


# -- C7: robustness ordering trend ------------------------------------------------------

def test_c07_robustness_ordering_trend(trend_accuracies):
    t0 = time.perf_counter()
    acc, wall = trend_accuracies
    std_fgsm = float(np.mean(acc["standard"]["fgsm"]))
    cfpc_fgsm = float(np.mean(acc["acl-cfpc"]["fgsm"]))
    std_pgd = float(np.mean(acc["standard"]["pgd"]))
    tfc_pgd = float(np.mean(acc["acl-tfc"]["pgd"]))
    assert wall < 1800.0
    assert cfpc_fgsm > std_fgsm, \
        f"FGSM trend failed: acl-cfpc {cfpc_fgsm:.3f} <= standard {std_fgsm:.3f}"
    assert tfc_pgd > std_pgd, \
        f"PGD trend failed: acl-tfc {tfc_pgd:.3f} <= standard {std_pgd:.3f}"
    _announce(7, "robustness ordering trend", t0,
              f"fgsm: cfpc {cfpc_fgsm:.3f} > standard {std_fgsm:.3f}; "
              f"pgd: tfc {tfc_pgd:.3f} > standard {std_pgd:.3f}; {wall:.0f}s over 3 seeds")


# -- C8: attack containment --------------------------------------------------------------

def test_c08_attack_containment(smoke_runs, trend_accuracies, tmp_path):
    t0 = time.perf_counter()
    first_dir, *_ = smoke_runs
    # every attack call in this suite already hard-asserts containment at
    # generation time; re-verify externally on saved models and fresh dumps
    from ecoclearn.codebook import load_codebook
    from ecoclearn.data import load_dataset_csv, make_blobs
    checked = 0
    ds = make_blobs(3, 100, 16, 0.02, seed=7)
    probes = split(ds, (0.7, 0.15, 0.1, 0.05), seed=7)["test"]
    cfg = AttackConfig(epsilon=EPS, pgd_steps=10, pgd_alpha=ALPHA)
    for model_name in ("standard", "acl-pf", "acl-cfpc", "acl-tfc"):
        run_dir = first_dir / f"{model_name}_seed0"
        params, extra = load_checkpoint(run_dir / "model_best.npz")
        book = None
        if extra["kind"] == "ecoc":
            book = load_codebook(run_dir / "codebook_best.csv")
        model = TrainedModel(extra["kind"], params, book)
        for attack in ("fgsm", "pgd"):
            dump = tmp_path / f"{model_name}_{attack}.csv"
            evaluate(model, probes, attack=attack, cfg=cfg, seed=0, dump_path=dump)
            adv = load_dataset_csv(dump)
            assert np.all(np.abs(adv.inputs - probes.inputs) <= EPS)
            assert adv.inputs.min() >= 0.0 and adv.inputs.max() <= 1.0
            checked += len(adv)
    _announce(8, "attack containment", t0,
              f"{checked} adversarial examples inside the eps box and [0,1]")


# -- C10: split protocol --------------------------------------------------------------------

def test_c10_split_protocol_counts():
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)

    for total, want in ((60000, (40000, 8000, 10000, 2000)),
                        (70000, (48000, 8000, 12000, 2000))):
        labels = np.repeat(np.arange(1, 11), total // 10)
        ds = Dataset(rng.random((total, 2)), labels, 10)
        ratios = tuple(w / total for w in want)
        parts = split(ds, ratios, seed=0)
        got = tuple(len(parts[k]) for k in ("train", "test", "generation", "validation"))
        assert got == want, f"{total}: got {got}, want {want}"
    _announce(10, "split protocol counts", t0,
              "60000 -> 40000/8000/10000/2000; 70000 -> 48000/8000/12000/2000")
