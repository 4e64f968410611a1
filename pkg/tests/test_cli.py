import hashlib
import json

import pytest

from mixbound import data as D
from mixbound.cli import main

SMOKE = {
    "seed": 4,
    "out": "run",
    "encoder": {"d_model": 16, "n_layers": 1, "n_heads": 2, "window": 4, "ffn_dim": 16, "max_len": 32, "dropout": 0.1},
    "train": {"epochs": 2, "batch_size": 8, "lr": 0.003, "pretrain_epochs": 1},
    "synth": {"n_train": 30, "n_dev": 12, "n_docs": 20, "authors": {"min_length": 8, "max_length": 20}},
    "data": {"train": "run/train.jsonl", "dev": "run/dev.jsonl", "docs": "run/docs.jsonl"},
}


def write_cfg(d, **over):
    cfg = json.loads(json.dumps(SMOKE))
    for k, v in over.items():
        if isinstance(v, dict):
            cfg.setdefault(k, {}).update(v)
        else:
            cfg[k] = v
    path = d / "exp.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(d)
    assert run("synth", "--config", cfg) == 0
    assert run("train", "--config", cfg) == 0
    return d


class TestSynth:
    def test_split_sizes(self, workdir):
        assert len(D.load_jsonl(workdir / "run/train.jsonl")) == 30
        assert len(D.load_jsonl(workdir / "run/dev.jsonl")) == 12
        assert len(D.load_docs_jsonl(workdir / "run/docs.jsonl")) == 20

    def test_fixed_seed_fixed_hash(self, workdir, tmp_path):
        cfg = write_cfg(tmp_path)
        assert run("synth", "--config", cfg) == 0
        for name in ("train.jsonl", "dev.jsonl", "docs.jsonl", "pretrain1.jsonl"):
            assert sha(tmp_path / "run" / name) == sha(workdir / "run" / name)

    def test_seed_flag_changes_output(self, workdir, tmp_path):
        cfg = write_cfg(tmp_path)
        assert run("synth", "--config", cfg, "--seed", 5) == 0
        assert sha(tmp_path / "run/train.jsonl") != sha(workdir / "run/train.jsonl")

    def test_zero_overlap_disjoint_vocabularies(self, tmp_path):
        cfg = write_cfg(tmp_path, synth={"authors": {"min_length": 8, "max_length": 20, "overlap": 0.0}})
        assert run("synth", "--config", cfg) == 0
        human, machine = set(), set()
        for r in D.load_jsonl(tmp_path / "run/train.jsonl"):
            human.update(r.words[: r.k])
            machine.update(r.words[r.k:])
        assert human and machine and not human & machine


class TestStats:
    def test_singleton(self, tmp_path, capsys):
        p = tmp_path / "one.jsonl"
        D.save_jsonl([D.MixedTextRecord("a", "w1 w2 w3 w4 w5", 2)], p)
        assert run("stats", p) == 0
        out = capsys.readouterr().out
        assert "1" in out and "5" in out and "2" in out
        assert D.stats(D.load_jsonl(p)) == D.CorpusStats(1, 5.0, 5, 2.0)

    def test_empty_file(self, tmp_path, capsys):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        assert run("stats", p) != 0
        assert capsys.readouterr().err.startswith("mixbound-error:")


class TestTrain:
    def test_smoke_outputs(self, workdir):
        assert (workdir / "run/model.mtbd").read_bytes()[:4] == b"MTBD"
        lines = (workdir / "run/history.csv").read_text().splitlines()
        assert lines[0] == "phase,epoch,train_loss,dev_mae" and len(lines) >= 2

    def test_same_config_same_outputs(self, workdir, tmp_path):
        cfg = write_cfg(tmp_path, data={k: str(workdir / f"run/{k}.jsonl") for k in ("train", "dev", "docs")})
        assert run("train", "--config", cfg) == 0
        assert sha(tmp_path / "run/model.mtbd") == sha(workdir / "run/model.mtbd")
        assert sha(tmp_path / "run/history.csv") == sha(workdir / "run/history.csv")

    def test_divergence_exits_nonzero(self, workdir, tmp_path, capsys):
        cfg = write_cfg(tmp_path, train={"lr": 1e300}, data={k: str(workdir / f"run/{k}.jsonl") for k in ("train", "dev")})
        assert run("train", "--config", cfg) == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("mixbound-error: TrainingError:") and "diverged" in err[0]

    @pytest.mark.parametrize("cmd", ["pretrain1", "pretrain2"])
    def test_pretraining_commands(self, workdir, tmp_path, cmd):
        cfg = write_cfg(tmp_path, data={k: str(workdir / f"run/{k}.jsonl") for k in ("train", "dev", "docs")})
        assert run(cmd, "--config", cfg) == 0
        phases = [l.split(",")[0] for l in (tmp_path / "run/history.csv").read_text().splitlines()[1:]]
        assert phases[0] == cmd and phases[-1] == "finetune"

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, train={"learning_rate": 0.1})
        assert run("train", "--config", cfg) == 1
        assert "learning_rate" in capsys.readouterr().err

    def test_missing_data_path(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, data={"train": "nowhere.jsonl"})
        assert run("train", "--config", cfg) == 1
        assert "nowhere.jsonl" in capsys.readouterr().err


class TestPredict:
    def predict(self, workdir, out, *extra):
        return run("predict", workdir / "run/model.mtbd", "--data", workdir / "run/dev.jsonl", "--out", out, *extra)

    def test_one_line_per_id(self, workdir, tmp_path):
        out = tmp_path / "p.jsonl"
        assert self.predict(workdir, out) == 0
        ids = [json.loads(l)["id"] for l in out.read_text().splitlines()]
        assert ids == [r.id for r in D.load_jsonl(workdir / "run/dev.jsonl")]

    def test_strict_range(self, workdir, tmp_path):
        out = tmp_path / "p.jsonl"
        assert self.predict(workdir, out, "--strict", "on") == 0
        n = {r.id: r.word_count for r in D.load_jsonl(workdir / "run/dev.jsonl")}
        for line in out.read_text().splitlines():
            row = json.loads(line)
            assert 1 <= row["label"] <= n[row["id"]] - 1

    @pytest.mark.parametrize("strategy", ["map", "first-switch"])
    def test_strategy_in_metadata(self, workdir, tmp_path, strategy):
        out = tmp_path / "p.jsonl"
        assert self.predict(workdir, out, "--strategy", strategy) == 0
        meta = json.loads((tmp_path / "p.jsonl.meta.json").read_text())
        assert meta["strategy"] == strategy

    def test_texts_without_labels(self, workdir, tmp_path):
        src = tmp_path / "texts.jsonl"
        src.write_text("\n".join(json.dumps({"id": r.id, "text": r.text}) for r in D.load_jsonl(workdir / "run/dev.jsonl")))
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert self.predict(workdir, a) == 0
        assert run("predict", workdir / "run/model.mtbd", "--data", src, "--out", b) == 0
        assert a.read_bytes() == b.read_bytes()


class TestEnsemble:
    def test_single_equals_predict(self, workdir, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        ck, dev = workdir / "run/model.mtbd", workdir / "run/dev.jsonl"
        assert run("predict", ck, "--data", dev, "--out", a) == 0
        assert run("ensemble", ck, "--data", dev, "--out", b) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_duplicate_equals_once(self, workdir, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        ck, dev = workdir / "run/model.mtbd", workdir / "run/dev.jsonl"
        assert run("ensemble", ck, "--data", dev, "--out", a) == 0
        assert run("ensemble", ck, ck, "--data", dev, "--out", b) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_mismatched_vocab(self, workdir, tmp_path, capsys):
        cfg = write_cfg(tmp_path, seed=9, synth={"n_train": 10})
        assert run("synth", "--config", cfg) == 0
        assert run("train", "--config", cfg) == 0
        out = tmp_path / "e.jsonl"
        rc = run("ensemble", workdir / "run/model.mtbd", tmp_path / "run/model.mtbd", "--data", workdir / "run/dev.jsonl", "--out", out)
        assert rc == 1
        assert "EnsembleError" in capsys.readouterr().err


class TestEval:
    @pytest.fixture()
    def gold(self, tmp_path):
        p = tmp_path / "gold.jsonl"
        D.save_jsonl([D.MixedTextRecord("a", "x " * 10, 3), D.MixedTextRecord("b", "x " * 12, 9)], p)
        return p

    def preds(self, tmp_path, rows):
        p = tmp_path / "pred.jsonl"
        p.write_text("".join(json.dumps({"id": i, "label": k}) + "\n" for i, k in rows))
        return p

    def test_arithmetic(self, tmp_path, gold, capsys):
        rep = tmp_path / "r.json"
        assert run("eval", self.preds(tmp_path, [("a", 3), ("b", 5)]), gold, "--out", rep) == 0
        assert json.loads(rep.read_text())["mae"] == 2.0
        assert "2.0000" in capsys.readouterr().out

    def test_perfect(self, tmp_path, gold):
        rep = tmp_path / "r.json"
        assert run("eval", self.preds(tmp_path, [("a", 3), ("b", 9)]), gold, "--out", rep) == 0
        assert json.loads(rep.read_text())["mae"] == 0.0

    def test_id_mismatch(self, tmp_path, gold, capsys):
        assert run("eval", self.preds(tmp_path, [("a", 3)]), gold) == 1
        err = capsys.readouterr().err
        assert err.startswith("mixbound-error: EvaluationError:") and "'b'" in err

    def test_pipeline_end_to_end(self, workdir, tmp_path):
        out, rep = tmp_path / "p.jsonl", tmp_path / "r.json"
        assert run("predict", workdir / "run/model.mtbd", "--data", workdir / "run/dev.jsonl", "--out", out) == 0
        assert run("eval", out, workdir / "run/dev.jsonl", "--out", rep) == 0
        report = json.loads(rep.read_text())
        assert report["count"] == 12 and report["mae"] == sum(report["errors"].values()) / 12


def test_bad_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        run("predict", "x.mtbd", "--data", "d", "--out", "o", "--strict", "maybe")
    assert e.value.code == 2
    assert capsys.readouterr().err.startswith("mixbound-error: UsageError:")
