import hashlib
import json

import pandas as pd
import pytest
import yaml

from wmnseg import cli, config

SMALL = {
    "phantom": {"n_controls": 3, "n_patients": 3, "atrophy": {"VLp": 0.85}},
    "split": {"train": 2, "val": 1, "test": 1},
    "synthesis": {"epochs": 1, "windows_per_epoch": 6, "batch_size": 3,
                  "net": {"depth": 2, "base_channels": 4, "window": [16, 16]}},
    "segmentation": {"epochs": 1, "windows_per_epoch": 6, "batch_size": 3,
                     "net": {"depth": 2, "base_channels": 4, "window": [32, 32]}},
}


def dir_digest(path):
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        if f.name == "train_log.jsonl":  # carries wall times
            continue
        h.update(f.relative_to(path).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


def test_config_defaults_and_overrides(cfg_file):
    cfg = config.load_config(cfg_file, seed=4)
    assert cfg["seed"] == 4 and cfg["synthesis"]["seed"] == 4
    assert cfg["synthesis"]["net"]["window"] == [16, 16]
    assert cfg["synthesis"]["lr"] == 1e-3
    tc = config.train_config(cfg, "segmentation")
    assert tc.net.window == (32, 32) and tc.epochs == 1


def test_config_unknown_key(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("synthesis:\n  learning_rate: 0.1\n")
    with pytest.raises(config.ConfigError, match="synthesis.learning_rate"):
        config.load_config(p)
    assert cli.main(["phantom", "--out", str(tmp_path / "o"), "--config", str(p)]) == 2


def test_phantom_deterministic(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["phantom", "--spec", "default", "--out", str(d), "--seed", "1",
                         "--config", str(cfg_file)]) == 0
    assert dir_digest(a) == dir_digest(b)
    c = tmp_path / "c"
    cli.main(["phantom", "--out", str(c), "--seed", "2", "--config", str(cfg_file)])
    assert dir_digest(a) != dir_digest(c)
    man = json.loads((a / "manifest.json").read_text())
    assert {"config_hash", "seed", "inputs", "tools"} <= set(man)


def test_unknown_flag_exits_nonzero(tmp_path):
    with pytest.raises(SystemExit) as e:
        cli.main(["phantom", "--out", str(tmp_path), "--bogus"])
    assert e.value.code != 0


def test_preprocess_requires_tools(tmp_path, cfg_file, capsys):
    data = tmp_path / "data"
    cli.main(["phantom", "--out", str(data), "--config", str(cfg_file)])
    assert cli.main(["preprocess", "--data", str(data), "--out", str(tmp_path / "pp"),
                     "--config", str(cfg_file)]) == 2
    assert "--assume-preprocessed" in capsys.readouterr().err


def test_infer_scs_without_synthesis_checkpoint(tmp_path, cfg_file, capsys):
    data = tmp_path / "data"
    cli.main(["phantom", "--out", str(data), "--config", str(cfg_file)])
    seg = tmp_path / "seg.pt"
    seg.write_bytes(b"")
    rc = cli.main(["infer", "--mode", "scs", "--data", str(data), "--out", str(tmp_path / "i"),
                   "--segmentation-checkpoint", str(seg), "--config", str(cfg_file)])
    assert rc == 2
    assert "synthesis checkpoint" in capsys.readouterr().err


def run_pipeline(root, cfg_file, seed=0):
    c = ["--config", str(cfg_file), "--seed", str(seed)]
    ids = [f"sub-{i:03d}" for i in range(6)]  # every subject, so stats sees both groups
    steps = [
        ["phantom", "--out", f"{root}/raw"],
        ["preprocess", "--data", f"{root}/raw", "--out", f"{root}/data", "--assume-preprocessed"],
        ["train-synthesis", "--data", f"{root}/data", "--out", f"{root}/syn"],
        ["train-segmentation", "--data", f"{root}/data", "--out", f"{root}/ncs", "--mode", "ncs"],
        ["train-segmentation", "--data", f"{root}/data", "--out", f"{root}/scs", "--mode", "scs",
         "--synthesis-checkpoint", f"{root}/syn/best.pt"],
        ["infer", "--mode", "ncs", "--data", f"{root}/data", "--out", f"{root}/pred_ncs",
         "--segmentation-checkpoint", f"{root}/ncs/best.pt", "--subjects", *ids],
        ["infer", "--mode", "scs", "--data", f"{root}/data", "--out", f"{root}/pred_scs",
         "--segmentation-checkpoint", f"{root}/scs/best.pt",
         "--synthesis-checkpoint", f"{root}/syn/best.pt", "--subjects", *ids],
        ["evaluate", "--data", f"{root}/data", "--out", f"{root}/eval",
         "--pred", f"ncs={root}/pred_ncs", "--pred", f"scs={root}/pred_scs"],
        ["stats", "--cohort", f"{root}/eval/volumes.csv", "--out", f"{root}/stats"],
        ["report", f"{root}/eval", f"{root}/stats", f"{root}/ncs", "--out", f"{root}/report"],
    ]
    for s in steps:
        assert cli.main(s + c) == 0, s


@pytest.mark.slow
def test_end_to_end_cli(tmp_path, cfg_file):
    run_pipeline(tmp_path, cfg_file)
    t4 = pd.read_csv(tmp_path / "eval" / "table4.csv", index_col=0)
    assert "dice_scs_mean" in t4.columns and "Thal" in t4.index
    assert (tmp_path / "pred_scs" / "sub-003" / "wmn_synth.nii.gz").exists()
    ev = json.loads((tmp_path / "eval" / "evaluation.json").read_text())
    assert set(ev["synthesis"]) == {"scs"}
    st = json.loads((tmp_path / "stats" / "stats.json").read_text())
    assert set(st["bland_altman"]) == {"ncs", "scs"}
    pngs = list((tmp_path / "report").glob("*.png"))
    assert any(p.name.startswith("bland_altman_scs") for p in pngs)
    assert any(p.name.startswith("loss_") for p in pngs)
    assert (tmp_path / "report" / "table4.csv").exists()
