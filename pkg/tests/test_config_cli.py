import numpy as np
import pytest

from ecoclearn.cli import (build_dataset, build_parser, main, read_results,
                           run_experiment, summarize_results)
from ecoclearn.codebook import Codebook, save_codebook
from ecoclearn.config import (ConfigError, config_from_entries, load_config,
                              parse_config_text)
from ecoclearn.data import make_blobs, save_dataset_csv

SMOKE_CONFIG = """
# tiny smoke experiment
dataset.kind = blobs
dataset.blobs.classes = 3
dataset.blobs.per_class = 40
dataset.blobs.dim = 8
dataset.blobs.spread = 0.02
dataset.seed = 5
split.ratios = 0.6,0.2,0.1,0.1
models = standard,acl-pf
seeds = 0
train.epochs_pretrain = 2
train.epochs_finetune = 2
train.batch_size = 16
train.optimizer = adam
train.lr_pretrain = 0.005
train.lr_finetune = 0.01
net.feature_dim = 16
net.code_length = 8
net.hidden_sizes = 16
aug.noise_sigma = 0.05
attack.pgd_steps = 2
attack.pgd_alpha = 0.0156862745
"""


def test_parse_config_text_basics():
    entries = parse_config_text("a.b = 1\n# comment\nc = x y  # trailing\n\n")
    assert entries == {"a.b": "1", "c": "x y"}


def test_parse_config_rejects_garbage():
    with pytest.raises(ConfigError):
        parse_config_text("not a key value line\n")


def test_config_round_trip_types():
    cfg = config_from_entries(parse_config_text(SMOKE_CONFIG))
    assert cfg.models == ("standard", "acl-pf")
    assert cfg.seeds == (0,)
    assert cfg.train.epochs_pretrain == 2
    assert cfg.train.batch_size == 16
    assert cfg.net["feature_dim"] == 16
    assert cfg.attack.pgd_steps == 2
    assert cfg.split_ratios == (0.6, 0.2, 0.1, 0.1)


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config keys"):
        config_from_entries({"bogus.key": "1"})


def test_config_unknown_model_rejected():
    with pytest.raises(ConfigError):
        config_from_entries({"models": "standard,resnet50"})


def test_config_tfc_without_source_rejected():
    with pytest.raises(ConfigError, match="acl-tfc"):
        config_from_entries({"models": "acl-tfc"})


def test_config_tfc_with_cfpc_allowed():
    cfg = config_from_entries({"models": "acl-cfpc,acl-tfc"})
    assert "acl-tfc" in cfg.models


def test_config_tfc_with_codebook_path_allowed(tmp_path):
    book_path = tmp_path / "book.csv"
    save_codebook(Codebook(np.eye(3)), book_path)
    cfg = config_from_entries({"models": "acl-tfc", "tfc.codebook": str(book_path)})
    assert cfg.tfc_codebook == str(book_path)


def test_build_dataset_blobs_and_limit():
    cfg = config_from_entries(parse_config_text(SMOKE_CONFIG))
    ds = build_dataset(cfg.dataset)
    assert len(ds) == 120
    cfg.dataset.limit = 60
    assert len(build_dataset(cfg.dataset)) == 60


def test_build_dataset_csv(tmp_path):
    path = tmp_path / "ds.csv"
    save_dataset_csv(make_blobs(2, 5, 4, 0.01, seed=1), path)
    cfg = config_from_entries({"dataset.kind": "csv", "dataset.csv.path": str(path)})
    assert len(build_dataset(cfg.dataset)) == 10


# -- full runner ----------------------------------------------------------------

@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = config_from_entries(parse_config_text(SMOKE_CONFIG))
    path = run_experiment(cfg, out)
    return out, path


def test_run_writes_results_rows(smoke_run):
    out, path = smoke_run
    rows = read_results(path)
    combos = {(m, s, c) for m, s, c, *_ in rows}
    assert combos == {(m, 0, c) for m in ("standard", "acl-pf")
                      for c in ("clean", "fgsm", "pgd")}
    for _, _, _, acc, epochs, _ in rows:
        assert 0.0 <= acc <= 1.0
        assert epochs > 0


def test_run_writes_artifacts(smoke_run):
    out, _ = smoke_run
    assert (out / "standard_seed0" / "model_best.npz").exists()
    assert (out / "acl-pf_seed0" / "model_best.npz").exists()
    assert (out / "acl-pf_seed0" / "codebook_best.csv").exists()
    assert (out / "acl-pf_seed0" / "metrics_acl-pf_finetune.csv").exists()


def test_rerun_is_deterministic(smoke_run, tmp_path):
    out, path = smoke_run
    cfg = config_from_entries(parse_config_text(SMOKE_CONFIG))
    path2 = run_experiment(cfg, tmp_path / "again")

    def strip_wall(p):
        lines = p.read_text().strip().splitlines()
        return [",".join(line.split(",")[:-1]) for line in lines]

    assert strip_wall(path) == strip_wall(path2)


def test_summary_aggregation():
    rows = [("standard", 0, "clean", 0.9, 2, 1.0),
            ("standard", 1, "clean", 0.8, 2, 1.0),
            ("standard", 0, "fgsm", 0.3, 2, 1.0),
            ("standard", 1, "fgsm", 0.5, 2, 1.0)]
    summary = summarize_results(rows)
    mean, std, n = summary[("standard", "clean")]
    assert mean == pytest.approx(0.85)
    assert std == pytest.approx(0.05)
    assert n == 2
    single = summarize_results([("x", 0, "pgd", 0.5, 1, 1.0)])
    assert single[("x", "pgd")][1] == 0.0  # single seed -> zero std


def test_report_verb(smoke_run, capsys):
    out, _ = smoke_run
    assert main(["report", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "standard" in printed and "acl-pf" in printed
    assert (out / "summary.csv").exists()
    lines = (out / "summary.csv").read_text().strip().splitlines()
    assert lines[0] == "model,condition,mean_accuracy,std_accuracy,seeds"
    assert len(lines) == 7  # 2 models x 3 conditions + header


def test_report_missing_dir_fails(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 1


def test_attack_verb(smoke_run, tmp_path, capsys):
    out, _ = smoke_run
    ds = make_blobs(3, 10, 8, 0.02, seed=5)
    ds_path = tmp_path / "probe.csv"
    save_dataset_csv(ds, ds_path)
    dump = tmp_path / "adv.csv"
    rc = main(["attack", str(out / "acl-pf_seed0" / "model_best.npz"), str(ds_path),
               "--attack", "fgsm", "--dump", str(dump)])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "clean accuracy" in printed
    assert dump.exists()


def test_codebook_stats_verb(smoke_run, capsys):
    out, _ = smoke_run
    rc = main(["codebook-stats", str(out / "acl-pf_seed0" / "codebook_best.csv")])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "min_pairwise_hamming" in printed
    assert "max_pairwise_cosine" in printed


def test_run_verb_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("models = acl-tfc\n")
    assert main(["run", str(bad), "--output", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_parser_rejects_unknown_verb():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["frobnicate"])


def test_run_with_workers_matches_serial(tmp_path):
    entries = parse_config_text(SMOKE_CONFIG)
    entries["seeds"] = "0,1"
    entries["models"] = "standard"
    cfg = config_from_entries(entries)
    serial = run_experiment(cfg, tmp_path / "serial", workers=1)
    parallel = run_experiment(cfg, tmp_path / "parallel", workers=2)

    def strip_wall(p):
        return [",".join(line.split(",")[:-1])
                for line in p.read_text().strip().splitlines()]

    assert strip_wall(serial) == strip_wall(parallel)
