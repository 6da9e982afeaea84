import json

import pytest

from contok.cli import main
from contok.tokens import import_table

TINY = ["--branching", "3,3,2", "--n-users", "40"]
TRAIN = ["--epochs", "3", "--batch", "8", "--levels", "2", "--codebook-size", "6", "--dim", "8",
         "--hidden", "16"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synthetic", "--out", str(root / "ds"), *TINY]) == 0
    assert main(["train", "--data", str(root / "ds"), "--out", str(root / "run"), *TRAIN]) == 0
    assert main(["tokenize", "--checkpoint", str(root / "run/model.ckpt"), "--data", str(root / "ds"),
                 "--out", str(root / "tok")]) == 0
    return root


def _eval(root, out, *extra):
    return main(["eval-retrieval", "--table", str(root / "tok/tokens.jsonl"), "--data", str(root / "ds"),
                 "--out", str(root / out), "--min-item-count", "1", "--k", "1,5", "--beam", "10", *extra])


def test_gen_synthetic_writes_four_files(tmp_path):
    assert main(["gen-synthetic", "--out", str(tmp_path / "a"), "--seed", "7", *TINY]) == 0
    assert main(["gen-synthetic", "--out", str(tmp_path / "b"), "--seed", "7", *TINY]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["items.jsonl", "labels.json", "manifest.json", "sequences.jsonl"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    manifest = json.loads((tmp_path / "a/manifest.json").read_text())
    assert manifest["synthetic_spec"]["seed"] == 7


def test_gen_synthetic_rejects_bad_spec_and_nonempty_dir(tmp_path, capsys):
    assert main(["gen-synthetic", "--out", str(tmp_path / "a"), "--items-per-leaf", "0"]) == 2
    (tmp_path / "b").mkdir()
    (tmp_path / "b" / "keep").write_text("x")
    assert main(["gen-synthetic", "--out", str(tmp_path / "b"), *TINY]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["gen-synthetic", "--out", str(tmp_path / "b"), "--force", *TINY]) == 0


def test_train_outputs_and_echo(pipeline):
    run = pipeline / "run"
    assert sorted(p.name for p in run.iterdir()) == ["config.json", "model.ckpt", "report.csv"]
    assert len((run / "report.csv").read_text().splitlines()) == 1 + 3
    echo = json.loads((run / "config.json").read_text())
    assert echo["command"] == "train" and echo["train"]["epochs"] == 3
    assert echo["train"]["codebook_size"] == 6


def test_train_is_reproducible_from_echo(pipeline, tmp_path):
    echo = json.loads((pipeline / "run/config.json").read_text())
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": echo["train"]}))
    assert main(["train", "--data", str(pipeline / "ds"), "--out", str(tmp_path / "r"),
                 "--config", str(cfg)]) == 0
    assert (tmp_path / "r/model.ckpt").read_bytes() == (pipeline / "run/model.ckpt").read_bytes()


def test_train_zero_epochs(pipeline, tmp_path):
    assert main(["train", "--data", str(pipeline / "ds"), "--out", str(tmp_path / "r"),
                 *TRAIN, "--epochs", "0"]) == 0
    assert len((tmp_path / "r/report.csv").read_text().splitlines()) == 1


def test_train_missing_dataset_is_usage_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 2
    assert "not found" in capsys.readouterr().err


def test_train_bad_flag_value_exits_2(pipeline, tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["train", "--data", str(pipeline / "ds"), "--out", str(tmp_path / "r"),
              "--shared-codebook", "maybe"])
    assert info.value.code == 2
    assert main(["train", "--data", str(pipeline / "ds"), "--out", str(tmp_path / "r"),
                 *TRAIN, "--tau", "0"]) == 2


def test_train_divergence_exits_4(pipeline, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"lr": 1e300}}))
    with pytest.warns(RuntimeWarning):
        code = main(["train", "--data", str(pipeline / "ds"), "--out", str(tmp_path / "r"),
                     *TRAIN, "--config", str(cfg)])
    assert code == 4
    assert (tmp_path / "r/model.last_good.ckpt").exists()


def test_tokenize_outputs(pipeline):
    tok = pipeline / "tok"
    table = import_table(tok / "tokens.jsonl")
    assert len(table) == 18
    summary = json.loads((tok / "summary.json").read_text())
    assert 0 <= summary["collision_rate_raw"] < 1
    assert summary["level1_purity"] is not None
    assert (tok / "metrics.csv").read_text().splitlines()[0].startswith("level,")


def test_tokenize_deterministic_and_refuses_overwrite(pipeline, tmp_path):
    args = ["tokenize", "--checkpoint", str(pipeline / "run/model.ckpt"), "--data", str(pipeline / "ds"),
            "--out", str(tmp_path / "t")]
    assert main(args) == 0
    assert (tmp_path / "t/tokens.jsonl").read_bytes() == (pipeline / "tok/tokens.jsonl").read_bytes()
    assert main(args) == 2
    assert main(args + ["--force"]) == 0


def test_tokenize_corrupt_checkpoint_exits_3(pipeline, tmp_path):
    bad = tmp_path / "m.ckpt"
    bad.write_bytes((pipeline / "run/model.ckpt").read_bytes()[:-5])
    assert main(["tokenize", "--checkpoint", str(bad), "--data", str(pipeline / "ds"),
                 "--out", str(tmp_path / "t")]) == 3


def test_eval_defaults_and_threads_agree(pipeline, tmp_path):
    assert _eval(pipeline, "ev1", "--threads", "1", "--baseline") == 0
    assert _eval(pipeline, "ev4", "--threads", "4", "--baseline") == 0
    a = (pipeline / "ev1/retrieval.json").read_bytes()
    assert a == (pipeline / "ev4/retrieval.json").read_bytes()
    res = json.loads(a)
    assert set(res["recall"]) == {"1", "5"} and res["n_events"] > 0
    assert "baseline_shuffled" in res

    assert main(["eval-retrieval", "--table", str(pipeline / "tok/tokens.jsonl"), "--data",
                 str(pipeline / "ds"), "--out", str(tmp_path / "d"), "--min-item-count", "1"]) == 0
    echo = json.loads((tmp_path / "d/config.json").read_text())
    assert echo["eval"]["k"] == [5, 10] and echo["eval"]["beam"] == 50


def test_eval_beam_smaller_than_k_rejected(pipeline):
    assert _eval(pipeline, "evb", "--beam", "3", "--force") == 2


def test_eval_unknown_item_exits_3(pipeline, tmp_path):
    seqs = tmp_path / "s.jsonl"
    seqs.write_text(json.dumps({"user_id": "u", "items": ["ghost"] * 10}) + "\n")
    code = main(["eval-retrieval", "--table", str(pipeline / "tok/tokens.jsonl"), "--sequences", str(seqs),
                 "--out", str(tmp_path / "e"), "--min-item-count", "1"])
    assert code == 3


def test_eval_checksum_mismatch_needs_override(pipeline, tmp_path, capsys):
    other = tmp_path / "other"
    assert main(["train", "--data", str(pipeline / "ds"), "--out", str(other), *TRAIN, "--seed", "9"]) == 0
    ck = ["--checkpoint", str(other / "model.ckpt")]
    assert _eval(pipeline, "evc", *ck) == 3
    assert _eval(pipeline, "evc", *ck, "--allow-checksum-mismatch", "--force") == 0
    assert "warning" in capsys.readouterr().err


def test_report_prints_tables(pipeline, capsys):
    assert main(["report", str(pipeline / "run")]) == 0
    out = capsys.readouterr().out
    assert "3 epochs" in out and "perplexity" in out
    assert main(["report", str(pipeline / "tok")]) == 0
    assert main(["report", str(pipeline / "ds")]) == 2


def test_inputs_not_mutated(pipeline, tmp_path):
    before = {p.name: p.read_bytes() for p in (pipeline / "ds").iterdir()}
    assert main(["tokenize", "--checkpoint", str(pipeline / "run/model.ckpt"), "--data",
                 str(pipeline / "ds"), "--out", str(tmp_path / "t")]) == 0
    assert {p.name: p.read_bytes() for p in (pipeline / "ds").iterdir()} == before
