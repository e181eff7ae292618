import hashlib
from pathlib import Path

import numpy as np
import pytest

from locvae import cli
from locvae.data import read_volume
from locvae.evaluation import read_metrics_csv
from locvae.figures import read_pgm

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"
TINY_EDITS = {
    "n_cn = 60": "n_cn = 3",
    "n_ad = 60": "n_ad = 3",
    "scans_per_subject = 3": "scans_per_subject = 2",
    "folds = 5": "folds = 2",
    "stem_channels = 8": "stem_channels = 2",
    "stage_channels = 8, 8, 8": "stage_channels = 2, 2, 2",
    "blocks_per_stage = 2, 2, 1": "blocks_per_stage = 1, 1, 1",
    "epochs = 10": "epochs = 1",
    "trials = 10": "trials = 2",
}


def tree_hash(root, skip=()):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and p.name not in skip:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    text = DESK.read_text()
    for a, b in TINY_EDITS.items():
        assert a in text
        text = text.replace(a, b)
    (root / "tiny.ini").write_text(text)
    assert cli.main(["generate", "--config", str(root / "tiny.ini"), "--out", str(root / "data")]) == 0
    return root


def run(args, capsys):
    code = cli.main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def test_generate_twice_is_identical(tiny, capsys):
    code, _, _ = run(["generate", "--config", tiny / "tiny.ini", "--out", tiny / "data2"], capsys)
    assert code == 0
    assert tree_hash(tiny / "data") == tree_hash(tiny / "data2")


def test_usage_error_exit_code(capsys):
    code, _, err = run(["train", "--fold", "0"], capsys)
    assert code == 1 and err.startswith("ERROR:usage:")
    code, _, err = run(["nonsense"], capsys)
    assert code == 1 and err.startswith("ERROR:usage:")


def test_validation_errors(tiny, tmp_path, capsys):
    code, _, err = run(["generate", "--config", tmp_path / "missing.ini", "--out", tmp_path / "x"], capsys)
    assert code == 2 and err.startswith("ERROR:validation:")
    bad = tmp_path / "bad.ini"
    bad.write_text((tiny / "tiny.ini").read_text().replace("gamma = 0.004\n", ""))
    code, _, err = run(["generate", "--config", bad, "--out", tmp_path / "x"], capsys)
    assert code == 2 and "gamma" in err
    code, _, err = run(["train", "--config", tiny / "tiny.ini", "--data", tiny / "data", "--fold", 7,
                        "--variant", "LocVAE", "--out", tmp_path / "t"], capsys)
    assert code == 2 and err.count("\n") == 1


def test_data_must_match_config(tiny, tmp_path, capsys):
    other = tmp_path / "other.ini"
    other.write_text((tiny / "tiny.ini").read_text().replace("seed = 2024", "seed = 7"))
    code, _, err = run(["train", "--config", other, "--data", tiny / "data", "--fold", 0,
                        "--variant", "LocVAE", "--out", tmp_path / "t"], capsys)
    assert code == 2 and "manifest" in err


def test_corrupt_volume_is_validation_error(tiny, tmp_path, capsys):
    (tmp_path / "junk.lvol").write_bytes(b"junkjunk")
    code, _, err = run(["query", "--index", tmp_path / "none.lidx", "--volume", tmp_path / "junk.lvol", "--k", 1], capsys)
    assert code == 2


@pytest.fixture(scope="module")
def compared(tiny):
    assert cli.main(["compare", "--config", str(tiny / "tiny.ini"), "--data", str(tiny / "data"),
                     "--out", str(tiny / "cmp")]) == 0
    return tiny / "cmp"


def test_compare_outputs(compared):
    rows = read_metrics_csv(compared / "metrics.csv")
    assert [r.variant for r in rows] == ["BetaVAE", "BetaVAETW", "LocVAE"]
    lines = (compared / "locality.csv").read_text().splitlines()
    assert lines[0] == "variant,dim,entropy" and len(lines) == 1 + 3 * 8
    for v in ("BetaVAE", "BetaVAETW", "LocVAE"):
        for f in range(2):
            assert (compared / v / f"fold_{f}" / "checkpoint.lvae").is_file()
        assert (compared / v / "index.lidx").is_file()
        for kind in ("reconstruction", "saliency"):
            img = read_pgm(compared / "figures" / f"{v}_{kind}_sagittal.pgm")
            assert img.shape == (128, 128)
    assert (compared / "figures" / "mean_difference_coronal.pgm").is_file()
    assert (compared / "run_manifest.json").is_file()


def test_compare_is_deterministic_and_worker_count_free(tiny, compared, monkeypatch):
    monkeypatch.setenv("LOCVAE_THREADS", "2")
    assert cli.main(["compare", "--config", str(tiny / "tiny.ini"), "--data", str(tiny / "data"),
                     "--out", str(tiny / "cmp2")]) == 0
    assert tree_hash(compared) == tree_hash(tiny / "cmp2")


def test_query_self(tiny, compared, capsys):
    vol = sorted((tiny / "data" / "volumes").glob("*.lvol"))[3]
    code, out, _ = run(["query", "--index", compared / "LocVAE" / "index.lidx", "--volume", vol, "--k", 1], capsys)
    assert code == 0
    header, hit = out.strip().splitlines()
    assert header == "subject_id,scan_id,label,distance"
    subject, scan, _, dist = hit.split(",")
    assert vol.name == f"s{int(subject):04d}_{int(scan):02d}.lvol"
    assert float(dist) == 0.0


def test_explain(tiny, compared, tmp_path, capsys):
    vols = sorted((tiny / "data" / "volumes").glob("*.lvol"))
    code, out, _ = run(["explain", "--checkpoint", compared / "LocVAE" / "checkpoint.lvae", "--volume", vols[0],
                        "--neighbor", vols[-1], "--top", 3, "--out", tmp_path / "x"], capsys)
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "dim,contribution" and len(lines) == 4
    contrib = [float(line.split(",")[1]) for line in lines[1:]]
    assert contrib == sorted(contrib, reverse=True)
    assert len(list((tmp_path / "x").glob("*.pgm"))) == 9


def test_eval_command(tiny, compared, tmp_path, capsys):
    code, out, _ = run(["eval", "--checkpoints", compared / "LocVAE", "--data", tiny / "data",
                        "--trials", 2, "--out", tmp_path / "e"], capsys)
    assert code == 0
    (row,) = read_metrics_csv(tmp_path / "e" / "metrics.csv")
    (ref,) = [r for r in read_metrics_csv(compared / "metrics.csv") if r.variant == "LocVAE"]
    assert row == ref


def test_eval_missing_fold(tiny, tmp_path, capsys):
    code, _, err = run(["eval", "--checkpoints", tmp_path, "--data", tiny / "data", "--trials", 1,
                        "--out", tmp_path / "e"], capsys)
    assert code == 2 and "fold_0" in err


def test_train_nan_is_runtime_error(tiny, tmp_path, capsys, monkeypatch):
    import locvae.trainer as trainer_mod

    real = trainer_mod.total_loss

    def poisoned(x, *a, **kw):
        loss, br = real(x, *a, **kw)
        return loss, type(br)(float("nan"), br.kl, br.local, br.total)

    monkeypatch.setattr(trainer_mod, "total_loss", poisoned)
    code, _, err = run(["train", "--config", tiny / "tiny.ini", "--data", tiny / "data", "--fold", 0,
                        "--variant", "BetaVAE", "--out", tmp_path / "t"], capsys)
    assert code == 3 and err.startswith("ERROR:diverged:") and "recon" in err


def test_generated_volume_readable(tiny):
    v = read_volume(sorted((tiny / "data" / "volumes").glob("*.lvol"))[0])
    assert v.shape == (16, 16, 16) and np.isfinite(v).all()
