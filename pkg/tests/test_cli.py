import csv
import json
import re

import numpy as np
import pytest
import yaml

from qumatl.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION, main, write_predictions
from qumatl.config import ConfigError, load_config, parse_override
from qumatl.data import load_dataset
from qumatl.harness import efficiency_report
from qumatl.metrics import consistency_matrix, evaluate
from qumatl.model import count_parameters, load_checkpoint

BASE = {
    "seed": 3,
    "num_annotators": 3,
    "num_classes": 3,
    "num_samples": 120,
    "num_groups": 2,
    "hidden_dim": 8,
    "num_heads": 2,
    "ffn_dim": 8,
    "max_epochs": 3,
    "patience": 2,
    "seeds": "0,1",
    "variants": "full,pooledPremv",
    "sparsity_rates": "0.4",
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(BASE))
    return path


@pytest.fixture
def dataset(tmp_path, config):
    out = tmp_path / "data.jsonl"
    assert main(["generate", str(config), str(out)]) == EXIT_OK
    return out


@pytest.fixture
def checkpoint(tmp_path, config, dataset):
    out = tmp_path / "model.ckpt"
    assert main(["train", str(config), str(dataset), str(out)]) == EXIT_OK
    return out


def parse_matrix(text):
    rows = [line for line in text.splitlines() if re.match(r"^\s*-?\d", line)]
    return np.array([[float(v) for v in row.split()] for row in rows])


# ---------------------------------------------------------------- config


def test_config_defaults_and_overrides(config):
    cfg = load_config(config, {"base_lr": "0.01"})
    assert cfg["base_lr"] == 0.01 and cfg["weight_decay"] == 0.01
    assert cfg.generator().correlation_groups == ((0, 1), (2,))
    assert cfg.seeds == (0, 1)


def test_unknown_key_named(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(dict(BASE, learning_rate=1)))
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(path)


def test_invalid_value_named(config):
    with pytest.raises(ConfigError, match="num_heads"):
        load_config(config, {"num_heads": 3})
    with pytest.raises(ConfigError, match="patience"):
        load_config(config, {"patience": 3})


def test_nested_config_rejected(tmp_path):
    path = tmp_path / "nested.yaml"
    path.write_text(yaml.safe_dump(dict(BASE, model={"hidden_dim": 8})))
    with pytest.raises(ConfigError, match="flat"):
        load_config(path)


def test_parse_override(config):
    key, value = parse_override("--base-lr=1e-3")
    assert key == "base_lr" and load_config(config, {key: value})["base_lr"] == 1e-3
    assert parse_override("variants=full,base") == ("variants", "full,base")
    assert parse_override("--max_epochs=7") == ("max_epochs", 7)


# -------------------------------------------------------------- generate


def test_generate_missing_required_key(tmp_path, capsys):
    path = tmp_path / "partial.yaml"
    path.write_text(yaml.safe_dump({k: v for k, v in BASE.items() if k != "num_classes"}))
    out = tmp_path / "never.jsonl"
    assert main(["generate", str(path), str(out)]) == EXIT_VALIDATION
    assert "num_classes" in capsys.readouterr().err
    assert not out.exists()


def test_generate_is_byte_identical(tmp_path, config):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["generate", str(config), str(a)]) == EXIT_OK
    assert main(["generate", str(config), str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_generate_prints_planted_matrix(tmp_path, config, capsys):
    out = tmp_path / "d.jsonl"
    main(["generate", str(config), str(out)])
    printed = parse_matrix(capsys.readouterr().out)
    d = load_dataset(out)
    assert np.max(np.abs(printed - consistency_matrix(d.labels.T, d.num_classes).values)) < 5e-5


# ----------------------------------------------------------------- train


def test_train_checkpoint_round_trip(tmp_path, config, dataset, checkpoint):
    model = load_checkpoint(checkpoint)
    d = load_dataset(dataset)
    outdir = tmp_path / "ev"
    assert main(["eval", str(checkpoint), str(dataset), str(outdir)]) == EXIT_OK
    report = json.loads((outdir / "report.json").read_text())
    assert report == json.loads(evaluate(model, d).to_json())


def test_train_history_reproducible(tmp_path, config, dataset, checkpoint):
    again = tmp_path / "again.ckpt"
    assert main(["train", str(config), str(dataset), str(again)]) == EXIT_OK
    assert again.with_suffix(".history.csv").read_bytes() == checkpoint.with_suffix(".history.csv").read_bytes()
    assert again.read_bytes() == checkpoint.read_bytes()


def test_train_base_variant_has_no_queries(tmp_path, config, dataset):
    out = tmp_path / "base.ckpt"
    assert main(["train", str(config), str(dataset), str(out), "--variant=base"]) == EXIT_OK
    assert "queries" not in load_checkpoint(out).params


def test_train_dimension_mismatch(tmp_path, config, dataset, capsys):
    out = tmp_path / "x.ckpt"
    assert main(["train", str(config), str(dataset), str(out), "--num_annotators=4"]) == EXIT_VALIDATION
    assert "(3, 3, 8)" in capsys.readouterr().err and not out.exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numeric_failure(tmp_path, config, dataset):
    text = dataset.read_text().splitlines()
    # poison one sample's first token value
    last = text[-1]
    text[-1] = re.sub(r'"tokens":\[[^,]+', '"tokens":[1e308', last)
    poisoned = tmp_path / "poisoned.jsonl"
    poisoned.write_text("\n".join(text) + "\n")
    code = main(["train", str(config), str(poisoned), str(tmp_path / "p.ckpt"), "--base_lr=1e300", "--max_epochs=2", "--patience=1"])
    assert code == EXIT_NUMERIC


def test_io_error_exit_code(tmp_path, config):
    assert main(["train", str(config), str(tmp_path / "missing.jsonl"), str(tmp_path / "m.ckpt")]) == EXIT_IO


def test_corrupt_dataset_is_io_class(tmp_path, config):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n")
    assert main(["train", str(config), str(bad), str(tmp_path / "m.ckpt")]) == EXIT_IO


# ------------------------------------------------------------------ eval


def test_eval_perfect_dump_prints_zero_dic(tmp_path, dataset, capsys):
    d = load_dataset(dataset)
    dump = tmp_path / "oracle.csv"
    write_predictions(d.labels, dump)
    assert main(["eval", str(dump), str(dataset), str(tmp_path / "ev")]) == EXIT_OK
    assert "DIC 0.000000" in capsys.readouterr().out


def test_eval_csv_layout(tmp_path, dataset, checkpoint):
    outdir = tmp_path / "ev"
    main(["eval", str(checkpoint), str(dataset), str(outdir)])
    with open(outdir / "report.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["metric", "A_1", "A_2", "A_3", "Avg", "CoPr"]
    for row in rows[1:]:
        assert float(row[4]) == pytest.approx(np.mean([float(v) for v in row[1:4]]), abs=1e-12)
    assert (outdir / "M.csv").exists() and (outdir / "Mprime.csv").exists()


def test_eval_incompatible_names_dims(tmp_path, config, checkpoint, capsys):
    other = tmp_path / "other.jsonl"
    main(["generate", str(config), str(other), "--num_annotators=4", "--num_groups=2"])
    capsys.readouterr()
    assert main(["eval", str(checkpoint), str(other), str(tmp_path / "ev")]) == EXIT_VALIDATION
    assert "(3, 3, 8, 12)" in capsys.readouterr().err


def test_eval_rejects_overrides(tmp_path, dataset, checkpoint):
    assert main(["eval", str(checkpoint), str(dataset), str(tmp_path / "ev"), "--seed=1"]) == EXIT_VALIDATION


# --------------------------------------------------------- ablate / sweep


def test_ablate_writes_pre_post_and_manifest_reruns(tmp_path, config):
    first = tmp_path / "ab1"
    assert main(["ablate", str(config), str(first)]) == EXIT_OK
    rows = list(csv.DictReader(open(first / "pre_post.csv")))
    assert [int(r["seed"]) for r in rows] == [0, 1]
    manifest = json.loads((first / "manifest.json").read_text())
    assert manifest["seeds"] == [0, 1] and manifest["config"]["seed"] == 3
    second = tmp_path / "ab2"
    assert main(["ablate", str(first / "manifest.json"), str(second)]) == EXIT_OK
    assert (first / "report.csv").read_bytes() == (second / "report.csv").read_bytes()


def test_sweep_two_rate_table(tmp_path, config):
    out = tmp_path / "sw"
    assert main(["sweep", str(config), str(out), "--variants=full", "--sparsity_rates=0,0.4"]) == EXIT_OK
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [(r["seed"], r["rate"]) for r in rows] == [("0", "0.0"), ("0", "0.4"), ("1", "0.0"), ("1", "0.4")]
    assert "relative_drop" in rows[0]


# ---------------------------------------------------------- attn / bench


def test_attn_dump(tmp_path, dataset, checkpoint):
    out = tmp_path / "att"
    assert main(["attn", str(checkpoint), str(dataset), str(out), "--limit=2"]) == EXIT_OK
    assert (out / "sample_00001_A3.pgm").exists() and (out / "fidelity.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert str(out / "sample_00000.csv") in manifest["artifacts"]


def test_bench_parameter_count(dataset, checkpoint, capsys):
    assert main(["bench", str(checkpoint), str(dataset), "--repetitions=1"]) == EXIT_OK
    out = capsys.readouterr().out
    count = int(re.search(r"parameterCount (\d+)", out).group(1))
    model = load_checkpoint(checkpoint)
    assert count == count_parameters(model) == efficiency_report(model, load_dataset(dataset), 1)[0]


# ----------------------------------------------------------- invariants


def test_commands_leave_inputs_untouched(tmp_path, config, dataset, checkpoint):
    before = {p: p.read_bytes() for p in (config, dataset, checkpoint)}
    main(["eval", str(checkpoint), str(dataset), str(tmp_path / "ev")])
    main(["attn", str(checkpoint), str(dataset), str(tmp_path / "att"), "--limit=1"])
    main(["bench", str(checkpoint), str(dataset), "--repetitions=1"])
    main(["train", str(config), str(dataset), str(tmp_path / "m2.ckpt")])
    assert all(p.read_bytes() == b for p, b in before.items())


def test_manifest_hashes_artifacts(config, dataset):
    manifest = json.loads(dataset.with_suffix(".manifest.json").read_text())
    import hashlib

    assert manifest["artifacts"][str(dataset)] == hashlib.sha256(dataset.read_bytes()).hexdigest()
    assert manifest["inputs"][str(config)] == hashlib.sha256(config.read_bytes()).hexdigest()
    assert manifest["command"] == "generate"
