import json
import re

import numpy as np
import pytest

from diversify.bench import FIELDS, records_from_csv
from diversify.cli import main
from diversify.dataio import SegmentDataset, load_dataset, save_dataset

SMALL = ["data.series_per_cell=2", "data.length=128"]
FAST = ["train.rounds=1", "train.local_epochs=1", "model.conv_channels=4,8", "model.bottleneck_dim=32",
        "model.adv_hidden=16"]
ERROR_LINE = re.compile(r"^dvfy: error=[a-z_]+ exit=\d ")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture()
def dataset(tmp_path, capsys):
    path = tmp_path / "s.dvts"
    assert run(capsys, "synth", "--out", path, *SMALL)[0] == 0
    return path


def test_synth_header_and_determinism(tmp_path, capsys, dataset):
    head = dataset.read_text().splitlines()[0]
    assert head == "DVTS1 channels=3 window=64 classes=4"
    other = tmp_path / "again.dvts"
    run(capsys, "synth", "--out", other, *SMALL)
    assert other.read_bytes() == dataset.read_bytes()
    third = tmp_path / "seed.dvts"
    run(capsys, "synth", "--out", third, "--seed", 8, *SMALL)
    assert third.read_bytes() != dataset.read_bytes()


def test_synth_refuses_overwrite(capsys, dataset):
    code, _, err = run(capsys, "synth", "--out", dataset, *SMALL)
    assert code == 2 and ERROR_LINE.match(err) and "--force" in err
    assert run(capsys, "synth", "--out", dataset, "--force", *SMALL)[0] == 0


def test_synth_bad_k_true(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--out", tmp_path / "x", "data.k_true=1")
    assert code == 2
    assert err.startswith("dvfy: error=config_error exit=2 data.k_true:")
    assert err.count("\n") == 1


def test_synth_binary(tmp_path, capsys):
    path = tmp_path / "b.dvts"
    run(capsys, "synth", "--out", path, "--binary", *SMALL)
    assert path.read_bytes().startswith(b"DVTS1B ")
    assert len(load_dataset(path)) > 0


@pytest.mark.parametrize("method", ["erm", "diversify"])
def test_train_smoke_and_determinism(tmp_path, capsys, dataset, method):
    ck = tmp_path / f"{method}.dvfy"
    code, out, _ = run(capsys, "train", dataset, "--method", method, "--out", ck, *FAST)
    assert code == 0 and "best_val_acc=" in out
    hist = tmp_path / f"{method}.dvfy.history.csv"
    assert ck.exists() and hist.exists()
    ck2 = tmp_path / "again.dvfy"
    run(capsys, "train", dataset, "--method", method, "--out", ck2, *FAST)
    assert (tmp_path / "again.dvfy.history.csv").read_bytes() == hist.read_bytes()
    assert b"\r" not in hist.read_bytes()


def test_train_dann_needs_labels(tmp_path, capsys, dataset):
    code, _, err = run(capsys, "train", dataset, "--method", "dann", "--out", tmp_path / "d", *FAST)
    assert code == 2 and "--domain-labels" in err
    code, _, _ = run(capsys, "train", dataset, "--method", "dann", "--domain-labels", "true",
                     "--out", tmp_path / "d", *FAST)
    assert code == 0


def test_train_dann_with_csv_labels(tmp_path, capsys, dataset):
    ds = load_dataset(dataset)
    labels = tmp_path / "groups.csv"
    labels.write_text("id,group\n" + "".join(f"{i},{j % 2}\n" for j, i in enumerate(ds.ids)))
    code, _, _ = run(capsys, "train", dataset, "--method", "dann", "--domain-labels", labels,
                     "--out", tmp_path / "d", *FAST)
    assert code == 0


def test_train_unknown_key_and_missing_file(tmp_path, capsys, dataset):
    code, _, err = run(capsys, "train", dataset, "train.nonsense=1")
    assert code == 2 and "train.nonsense: unknown key" in err
    code, _, err = run(capsys, "train", tmp_path / "nope.dvts")
    assert code == 3 and ERROR_LINE.match(err)


def test_train_holdout_and_resume(tmp_path, capsys, dataset):
    ck = tmp_path / "m.dvfy"
    assert run(capsys, "train", dataset, "--out", ck, "data.holdout=2", *FAST)[0] == 0
    code, out, _ = run(capsys, "train", dataset, "--resume", ck, "--out", tmp_path / "m2.dvfy",
                       "data.holdout=2", *FAST[1:], "train.rounds=2")
    assert code == 0
    rows = (tmp_path / "m2.dvfy.history.csv").read_text().splitlines()[1:]
    assert {r.split(",")[0] for r in rows} == {"1"}


@pytest.fixture()
def checkpoint(tmp_path, capsys, dataset):
    ck = tmp_path / "m.dvfy"
    assert run(capsys, "train", dataset, "--out", ck, *FAST)[0] == 0
    return ck


def test_eval_json(tmp_path, capsys, dataset, checkpoint):
    code, out, _ = run(capsys, "eval", checkpoint, dataset)
    assert code == 0
    report = json.loads(out)
    assert json.loads(json.dumps(report)) == report
    assert report["n"] == len(load_dataset(dataset))
    assert 0 <= report["accuracy"] <= 1
    assert sum(c["n"] for c in report["per_class"]) == report["n"]
    correct = sum(c["correct"] for c in report["per_class"])
    assert report["accuracy"] == correct / report["n"]


def test_eval_empty_dataset(tmp_path, capsys, checkpoint):
    empty = tmp_path / "empty.dvts"
    empty.write_text("DVTS1 channels=3 window=64 classes=4\n")
    code, _, err = run(capsys, "eval", checkpoint, empty)
    assert code == 3 and "no segments" in err


def test_eval_toy_run_fits_training_set(tmp_path, capsys):
    rng = np.random.default_rng(0)
    y = np.repeat([0, 1], 40)
    X = rng.normal(scale=0.2, size=(80, 1, 1, 16)) + y[:, None, None, None]
    path = tmp_path / "toy.dvts"
    save_dataset(SegmentDataset(X, y, 2, np.repeat([0, 1, 0, 1], 20)), path)
    ck = tmp_path / "toy.dvfy"
    assert run(capsys, "train", path, "--method", "erm", "--out", ck, "model.channels=1",
               "model.window=16", "model.kernel_width=3", "data.channels=1", "data.window=16")[0] == 0
    report = json.loads(run(capsys, "eval", ck, path)[1])
    assert report["accuracy"] >= 0.9


def test_characterize(tmp_path, capsys, dataset, checkpoint):
    out_csv = tmp_path / "lat.csv"
    code, out, _ = run(capsys, "characterize", checkpoint, dataset, "--out", out_csv)
    assert code == 0
    summary = json.loads(out)
    assert "ari" in summary and -1 <= summary["ari"] <= 1
    rows = out_csv.read_text().splitlines()
    assert rows[0] == "id,d_prime,true_domain"
    d = [int(r.split(",")[1]) for r in rows[1:]]
    assert min(d) >= 0 and max(d) < summary["K"]
    assert sum(summary["cluster_sizes"]) == len(d)


def test_characterize_without_true_domain(tmp_path, capsys, dataset, checkpoint):
    ds = load_dataset(dataset)
    bare = tmp_path / "bare.dvts"
    save_dataset(SegmentDataset(ds.X, ds.y, ds.n_classes, None, None, ds.ids), bare)
    code, out, _ = run(capsys, "characterize", checkpoint, bare, "--out", tmp_path / "lat.csv")
    assert code == 0 and "ari" not in json.loads(out)
    assert (tmp_path / "lat.csv").read_text().splitlines()[0] == "id,d_prime"


def test_characterize_rejects_erm(tmp_path, capsys, dataset):
    ck = tmp_path / "erm.dvfy"
    run(capsys, "train", dataset, "--method", "erm", "--out", ck, *FAST)
    code, _, err = run(capsys, "characterize", ck, dataset)
    assert code == 2 and "erm" in err


@pytest.mark.parametrize("split", ["true", "random", "pseudo"])
def test_divergence(tmp_path, capsys, dataset, checkpoint, split):
    out = tmp_path / "div.json"
    code, _, _ = run(capsys, "divergence", dataset, "--split", split, "--checkpoint", checkpoint,
                     "--out", out)
    assert code == 0
    rep = json.loads(out.read_text())
    M = np.array(rep["matrix"])
    assert np.array_equal(M, M.T) and np.all(np.diag(M) == 0)
    csv_rows = out.with_suffix(".csv").read_text().splitlines()
    assert len(csv_rows) == len(M) + 1


def test_divergence_identical_groups_small(tmp_path, capsys, dataset):
    ds = load_dataset(dataset)
    groups = tmp_path / "g.csv"
    order = np.random.default_rng(0).permutation(len(ds)) % 2
    groups.write_text("".join(f"{i},{g}\n" for i, g in zip(ds.ids, order)))
    out = tmp_path / "div.json"
    assert run(capsys, "divergence", dataset, "--split", groups, "--out", out)[0] == 0
    assert json.loads(out.read_text())["max_off_diagonal"] <= 0.3


def test_divergence_pseudo_needs_checkpoint(capsys, dataset):
    code, _, err = run(capsys, "divergence", dataset, "--split", "pseudo")
    assert code == 2 and "--checkpoint" in err


def test_bench_rows_and_append(tmp_path, capsys):
    out = tmp_path / "results.csv"
    args = ["bench", "--seeds", 1, "--out", out, *SMALL, *FAST]
    code, stdout, _ = run(capsys, *args)
    assert code == 0
    assert re.match(r"^summary mean_ood_accuracy diversify=\S+ erm=\S+ dann=\S+ runs=9$", stdout.strip())
    recs = records_from_csv(out.read_text())
    assert len(recs) == 9
    assert {(r.method, r.seed, r.holdout) for r in recs} == {
        (m, 1, h) for m in ("diversify", "erm", "dann") for h in range(3)}
    run(capsys, *args, "--seed", 2, "--methods", "erm")
    text = out.read_text()
    assert text.count(",".join(FIELDS)) == 1
    assert len(records_from_csv(text)) == 12


def test_bench_rejects_foreign_file(tmp_path, capsys):
    out = tmp_path / "other.csv"
    out.write_text("a,b\n1,2\n")
    code, _, err = run(capsys, "bench", "--out", out, "--seeds", 1)
    assert code == 3 and ERROR_LINE.match(err)


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "train.lambda1 = 0.5" in capsys.readouterr().out


def test_bad_k_grid(capsys, tmp_path):
    code, _, err = run(capsys, "bench", "--k-grid", "5..2", "--out", tmp_path / "r.csv")
    assert code == 2 and "--k-grid" in err
