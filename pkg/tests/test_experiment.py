import json

import numpy as np
import pytest

from barlowtuple import autodiff as ad
from barlowtuple.cli import main
from barlowtuple.errors import ConfigError, ContractError, DataError
from barlowtuple.experiment import MODES, ExperimentConfig, Pipeline, RunRecord, load_slides, summarize
from barlowtuple.metrics import MetricRow, parse_metric_csv
from barlowtuple.synth import build_dataset

TINY = {
    "preset": "desk",
    "data": {"slide_size": 64, "n_train": 2, "n_val": 1, "n_test": 1},
    "encoder": {"block_channels": [4, 8]},
    "patch": 32, "overlap": 16, "per_slide": 4, "val_per_slide": 4,
    "pretrain": {"epochs": 2, "batch_size": 8},
    "finetune": {"epochs": 2, "batch_size": 4},
    "seeds": [0],
}


@pytest.fixture(scope="module")
def tiny():
    config = ExperimentConfig.from_dict(TINY)
    return config, Pipeline(config, load_slides(config))


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


# --- config ----------------------------------------------------------------

def test_presets():
    paper = ExperimentConfig.paper()
    assert (paper.pretrain.epochs, paper.pretrain.batch_size, paper.pretrain.max_lr) == (200, 64, 1e-6)
    assert (paper.finetune.epochs, paper.finetune.batch_size, paper.finetune.max_lr) == (100, 8, 1e-4)
    assert paper.patch == 256 and paper.per_slide == 50 and paper.overlap == 128
    assert ExperimentConfig.desk().patch == 64


def test_config_round_trip_and_hash():
    config = ExperimentConfig.from_dict(TINY)
    again = ExperimentConfig.from_dict(config.to_dict())
    assert again.hash() == config.hash()
    assert ExperimentConfig.from_dict({**TINY, "seeds": [5, 6]}).hash() == config.hash()
    assert ExperimentConfig.from_dict({**TINY, "patch": 48}).hash() != config.hash()


@pytest.mark.parametrize("raw", [{"preset": "huge"}, {"bogus": 1}, {"patch": 30},
                                 {"data": {"train_domains": [0]}}, {"overlap": 64, "patch": 64}])
def test_bad_configs(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"preset": "desk", **raw})


# --- pipeline contracts ----------------------------------------------------

def test_pretrain_rows_per_epoch_and_domain(tiny):
    config, pipe = tiny
    encoder, rows = pipe.run_pretrain(0)
    assert all(k.startswith("encoder.") for k in encoder)
    cos = [(r.epoch, r.domain) for r in rows if r.metric == "cosine_distance"]
    others = ["NZ210", "NZ2.0", "P1000", "GT450"]
    assert cos == [(e, d) for e in range(3) for d in others]
    assert [r.epoch for r in rows if r.metric == "tuple_loss"] == [1, 2]


def test_two_domain_pretraining_uses_plain_twins_loss(tiny):
    config = ExperimentConfig.from_dict({**TINY, "data": {**TINY["data"], "train_domains": [0, 1],
                                                          "heldout_domains": [2]}})
    pipe = Pipeline(config, load_slides(config))
    _, rows = pipe.run_pretrain(0)
    assert {r.domain for r in rows if r.metric == "cosine_distance"} == {"NZ210", "NZ2.0"}


def test_patch_order_identical_across_modes(tiny):
    config, pipe = tiny
    encoder, _ = pipe.run_pretrain(0)
    hashes = {pipe.run_finetune(0, m, encoder if m.startswith("pre") else None)[1].patch_order_hash
              for m in MODES}
    assert len(hashes) == 1


def test_selected_epoch_not_worse_than_start(tiny):
    config, pipe = tiny
    params, record = pipe.run_finetune(0, "baseline_multi")
    val = {r.epoch: r.value for r in record.metrics if r.metric == "val_miou"}
    assert val[record.selected_epoch] >= val[0]
    assert pipe.validation_miou(params, [0, 1, 2]) == val[record.selected_epoch]


def test_pretrained_mode_needs_encoder(tiny):
    with pytest.raises(ConfigError):
        tiny[1].run_finetune(0, "pretrained_single")
    with pytest.raises(ConfigError):
        tiny[1].run_finetune(0, "semi_supervised")


def test_heldout_domains_never_trained(tiny, monkeypatch):
    config, pipe = tiny
    seen = []
    original = Pipeline.batch

    def audited(self, plan, domains):
        if ad._TAPES and ad._TAPES[-1] is not None:  # a recording tape means a training step
            seen.extend([domains] if isinstance(domains, int) else domains)
        return original(self, plan, domains)

    monkeypatch.setattr(Pipeline, "batch", audited)
    encoder, _ = pipe.run_pretrain(0)
    for mode in MODES:
        pipe.run_finetune(0, mode, encoder if mode.startswith("pre") else None)
    assert seen and set(seen) <= {0, 1, 2}
    with pytest.raises(DataError):
        pipe._assert_seen([0, 3])


def test_eval_tables_and_reference_concordance(tiny):
    config, pipe = tiny
    params, record = pipe.run_finetune(0, "baseline_single")
    record = pipe.run_eval(params, record)
    assert list(record.test_miou) == ["CS2", "NZ210", "NZ2.0", "P1000", "GT450"]
    assert record.concordance["CS2"] == 1.0
    files = summarize([record])
    table = files["table_miou.csv"].splitlines()
    assert table[0] == "mode,domain,mean,std,n" and len(table) == 6


def test_memorizing_model_scores_high_on_its_training_slide():
    raw = {**TINY, "data": {**TINY["data"], "n_train": 1}, "encoder": {"block_channels": [8, 16]},
           "per_slide": 32, "val_per_slide": 8, "finetune": {"epochs": 40, "batch_size": 8, "max_lr": 5e-3}}
    config = ExperimentConfig.from_dict(raw)
    dataset = build_dataset(config.data)
    pipe = Pipeline(config, dataset)
    params, record = pipe.run_finetune(0, "baseline_single")
    dataset.split.test = list(dataset.split.train)  # evaluate on what it was trained on
    record = pipe.run_eval(params, record)
    assert record.test_miou["CS2"] > 0.85


def test_summarize_std_with_three_seeds():
    recs = [RunRecord("h", s, "baseline_single", [MetricRow(0, "mean", "cosine_distance", 0.1 * s, s)], 1, "x",
                      {"CS2": 0.5 + 0.1 * s}, {"CS2": 1.0}) for s in range(3)]
    files = summarize(recs)
    row = files["table_miou.csv"].splitlines()[1].split(",")
    assert row[:2] == ["baseline_single", "CS2"] and float(row[3]) == pytest.approx(0.1) and row[4] == "3"
    assert "baseline_pooled" in files["alignment_finetune.csv"]
    with pytest.raises(ContractError):
        summarize([])


# --- command line ----------------------------------------------------------

def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_cli_full_run_is_reproducible(tiny_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", tiny_config, "--runs-dir", str(a)]) == 0
    assert main(["run", "--config", tiny_config, "--runs-dir", str(b)]) == 0
    fa, fb = _files(a), _files(b)
    assert fa.keys() == fb.keys()
    csvs = [k for k in fa if k.endswith(".csv")]
    assert any(k.endswith("seed0/pretrained_multi/metrics.csv") for k in csvs)
    for k in fa:
        assert fa[k] == fb[k], k
    (root,) = [p for p in a.iterdir()]
    records = json.loads((root / "report" / "records.json").read_text())
    assert {r["mode"] for r in records} == set(MODES)
    assert len({r["patch_order_hash"] for r in records}) == 1
    rows = parse_metric_csv((root / "seed0" / "baseline_single" / "metrics.csv").read_text())
    assert any(r.metric == "test_miou" for r in rows)


def test_cli_staged_verbs_and_manifest(tiny_config, tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", tiny_config, "--out", str(data)]) == 0
    manifest = capsys.readouterr().out.strip()
    runs = ["--config", tiny_config, "--manifest", manifest, "--runs-dir", str(tmp_path / "runs")]
    assert main(["finetune", *runs, "--modes", "baseline_single"]) == 0
    assert main(["eval", *runs, "--modes", "baseline_single"]) == 0
    assert main(["report", *runs]) == 0
    report = capsys.readouterr().out.strip().splitlines()[-1]
    assert "baseline_single,CS2" in (tmp_path / "runs" / report.split("/runs/")[-1] / "table_miou.csv").read_text()


def test_cli_exit_codes(tiny_config, tmp_path):
    runs = ["--runs-dir", str(tmp_path)]
    assert main(["pretrain", "--preset", "desk", "--set", "patch=30", *runs]) == 2
    assert main(["pretrain", "--config", str(tmp_path / "missing.json"), *runs]) == 2
    assert main(["finetune", "--config", tiny_config, "--modes", "pretrained_single", *runs]) == 3
    assert main(["finetune", "--config", tiny_config, "--modes", "bogus", *runs]) == 2
    assert main(["eval", "--config", tiny_config, "--modes", "baseline_multi", *runs]) == 3
    assert main(["report", "--config", tiny_config, "--runs-dir", str(tmp_path / "empty")]) == 3
    assert main(["pretrain", "--config", tiny_config, "--manifest", str(tmp_path / "nope.json"), *runs]) == 3


def test_cli_set_overrides(tiny_config, tmp_path):
    from barlowtuple.cli import build_config
    import argparse
    args = argparse.Namespace(config=tiny_config, preset=None, set=["pretrain.epochs=7", "finetune.max_lr=1e-3"],
                              seeds=[4, 5], manifest=None)
    config = build_config(args)
    assert config.pretrain.epochs == 7 and config.pretrain.batch_size == 8
    assert config.finetune.max_lr == 1e-3 and config.seeds == [4, 5]
