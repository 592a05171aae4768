import csv

import numpy as np
import pytest

from orthoadapt import checkpoint
from orthoadapt import config as configmod
from orthoadapt import rng as rngmod
from orthoadapt.cli import main
from orthoadapt.data import decode_ppm
from orthoadapt.models import SegNet

TINY = """
[data]
height = 16
width = 20
classes = 3
samples_per_domain = 2
rounds = 2

[pretrain]
num_train = 6
num_heldout = 3
epochs = 1
width = 8

[adapt]
rank = 4
grid = 4

[toy]
num_train = 2
num_heldout = 2
size = 16
epochs = 2
batch = 2
widths = 4, 8, 8
"""


def run_cli(cfg, *argv):
    return main(list(argv) + ["--config", str(cfg)])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    assert run_cli(cfg, "gen-data", "--out", str(root / "data")) == 0
    assert run_cli(cfg, "pretrain", "--data", str(root / "data"), "--out", str(root / "pre")) == 0
    assert run_cli(cfg, "adapt", "--data", str(root / "data"),
                   "--checkpoint", str(root / "pre" / "source.ckpt"), "--out", str(root / "adapt")) == 0
    return root, cfg


class TestGenData:
    def test_file_counts(self, work):
        root, _ = work
        assert len(list((root / "data" / "source").rglob("*.ppm"))) == 9
        assert len(list((root / "data" / "source").rglob("*.pgm"))) == 9
        # 4 domains x 2 samples x 2 rounds
        assert len(list((root / "data" / "stream").glob("*.ppm"))) == 16
        assert len(read_rows(root / "data" / "manifest.csv")) == 16

    def test_rerun_identical(self, work, tmp_path):
        root, cfg = work
        assert run_cli(cfg, "gen-data", "--out", str(tmp_path)) == 0
        for path in (root / "data").rglob("*"):
            if path.is_file():
                assert (tmp_path / path.relative_to(root / "data")).read_bytes() == path.read_bytes()

    def test_config_echoed(self, work):
        root, _ = work
        echoed = configmod.load(root / "data" / "config.resolved.ini")
        assert echoed.data.height == 16 and echoed.adapt.rank == 4


class TestPretrain:
    def test_outputs(self, work):
        root, _ = work
        model, meta = checkpoint.load(root / "pre" / "source.ckpt")
        assert meta["adapters"] is None and model.num_classes == 3
        rows = {r["metric"]: r["value"] for r in read_rows(root / "pre" / "pretrain.csv")}
        assert 0.0 <= float(rows["heldout_clean_miou"]) <= 100.0

    def test_zero_lr_keeps_init(self, work, tmp_path):
        root, _ = work
        cfg = tmp_path / "zero.ini"
        cfg.write_text(TINY.replace("epochs = 1\nwidth = 8", "epochs = 1\nwidth = 8\nlr = 0.0"))
        assert run_cli(cfg, "pretrain", "--data", str(root / "data"), "--out", str(tmp_path)) == 0
        model, _ = checkpoint.load(tmp_path / "source.ckpt")
        init = SegNet(3, 8, seed=rngmod.derive_seed(0, "pretrain", 0))
        for (n, a), (_, b) in zip(model.named_parameters(), init.named_parameters()):
            assert np.array_equal(a.data, b.data), n


class TestAdapt:
    def test_outputs(self, work):
        root, _ = work
        agg = {r["metric"]: r["value"] for r in read_rows(root / "adapt" / "aggregates.csv")}
        assert set(agg) == {"mean_miou", "mean_macc", "gain_over_source", "samples"}
        assert agg["samples"] == "16"
        assert len(read_rows(root / "adapt" / "cells.csv")) == 8
        _, meta = checkpoint.load(root / "adapt" / "adapted.ckpt")
        assert meta["adapters"]["rank"] == 4

    def test_without_adapters_equals_source(self, work, tmp_path):
        root, _ = work
        cfg = tmp_path / "off.ini"
        cfg.write_text(TINY.replace("rank = 4", "rank = 4\nadapters = false\north = false\nfill = none"))
        assert run_cli(cfg, "adapt", "--data", str(root / "data"),
                       "--checkpoint", str(root / "pre" / "source.ckpt"), "--out", str(tmp_path / "a")) == 0
        assert run_cli(cfg, "eval", "--data", str(root / "data"),
                       "--checkpoint", str(root / "pre" / "source.ckpt"), "--out", str(tmp_path / "e")) == 0
        agg = {r["metric"]: r["value"] for r in read_rows(tmp_path / "a" / "aggregates.csv")}
        assert float(agg["gain_over_source"]) == 0.0
        assert (tmp_path / "a" / "cells.csv").read_bytes() == (tmp_path / "e" / "cells.csv").read_bytes()

    def test_adapted_checkpoint_rejected(self, work, tmp_path):
        root, cfg = work
        code = run_cli(cfg, "adapt", "--data", str(root / "data"),
                       "--checkpoint", str(root / "adapt" / "adapted.ckpt"), "--out", str(tmp_path))
        assert code == 2


class TestMerge:
    def test_equivalence_and_count(self, work, tmp_path):
        root, cfg = work
        assert run_cli(cfg, "merge", "--checkpoint", str(root / "adapt" / "adapted.ckpt"),
                       "--out", str(tmp_path)) == 0
        rows = {r["metric"]: r["value"] for r in read_rows(tmp_path / "merge.csv")}
        assert float(rows["max_abs_deviation"]) < 1e-9
        assert rows["merged_parameters"] == rows["source_parameters"]
        _, meta = checkpoint.load(tmp_path / "merged.ckpt")
        assert meta["adapters"] is None

    def test_double_merge_fails(self, work, tmp_path, capsys):
        root, cfg = work
        assert run_cli(cfg, "merge", "--checkpoint", str(root / "adapt" / "adapted.ckpt"),
                       "--out", str(tmp_path)) == 0
        assert run_cli(cfg, "merge", "--checkpoint", str(tmp_path / "merged.ckpt"),
                       "--out", str(tmp_path / "again")) == 2
        assert "no adapters" in capsys.readouterr().err


class TestSweep:
    def test_order(self, work, tmp_path):
        root, cfg = work
        assert run_cli(cfg, "sweep", "--axis", "order", "--checkpoint", str(root / "pre" / "source.ckpt"),
                       "--out", str(tmp_path)) == 0
        rows = read_rows(tmp_path / "sweep_order.csv")
        assert len(rows) == 4 and {r["samples"] for r in rows} == {"16"}
        assert len({r["value"] for r in rows}) == 4

    def test_lambda_configs_differ_only_in_lambda(self, work, tmp_path):
        root, cfg = work
        assert run_cli(cfg, "sweep", "--axis", "lambda", "--checkpoint", str(root / "pre" / "source.ckpt"),
                       "--out", str(tmp_path)) == 0
        rows = read_rows(tmp_path / "sweep_lambda.csv")
        assert [r["value"] for r in rows] == ["0.1", "0.5", "1.0", "2.0"]
        texts = [(tmp_path / "lambda" / r["value"] / "config.resolved.ini").read_text().splitlines()
                 for r in rows]
        for other in texts[1:]:
            diff = [a for a, b in zip(texts[0], other) if a != b]
            assert len(diff) == 1 and diff[0].startswith("lam = ")

    def test_infeasible_rank_reported(self, work, tmp_path):
        root, cfg = work
        assert run_cli(cfg, "sweep", "--axis", "rank", "--checkpoint", str(root / "pre" / "source.ckpt"),
                       "--out", str(tmp_path)) == 0
        status = {r["value"]: r["status"] for r in read_rows(tmp_path / "sweep_rank.csv")}
        assert status["4"] == "ok"
        assert status["64"].startswith("infeasible")


class TestToy:
    def test_outputs(self, tmp_path, work):
        _, cfg = work
        assert run_cli(cfg, "toy", "--out", str(tmp_path)) == 0
        rows = read_rows(tmp_path / "modes.csv")
        assert [r["mode"] for r in rows] == ["inner", "magnitude", "angle"]
        assert all(np.isfinite(float(r["mse"])) for r in rows)
        assert decode_ppm((tmp_path / "triptych_000.ppm").read_bytes()).shape == (3, 16, 52)
        assert len(read_rows(tmp_path / "toy_history.csv")) == 2


class TestErrors:
    def test_missing_data(self, work, tmp_path, capsys):
        _, cfg = work
        assert run_cli(cfg, "pretrain", "--data", str(tmp_path / "none"), "--out", str(tmp_path)) == 2
        assert "gen-data" in capsys.readouterr().err

    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[adapt]\nrnak = 4\n")
        assert main(["toy", "--config", str(cfg), "--out", str(tmp_path)]) == 2
        assert "rnak" in capsys.readouterr().err

    def test_bad_checkpoint(self, tmp_path, work):
        _, cfg = work
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert run_cli(cfg, "merge", "--checkpoint", str(bad), "--out", str(tmp_path)) == 2

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as info:
            main(["serve"])
        assert info.value.code != 0
