import json
from pathlib import Path

import pytest

from robust_sfda.cli import main
from robust_sfda.config import from_dict, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TINY = CONFIGS / "tiny.yaml"


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


def run_failing(capsys, *argv):
    with pytest.raises(SystemExit) as exc:
        main(list(argv))
    err = capsys.readouterr().err
    return exc.value.code, json.loads(err.strip().splitlines()[-1])


class TestConfig:
    @pytest.mark.parametrize("name", ["desk", "paper", "tiny"])
    def test_shipped_configs_parse_and_roundtrip(self, name):
        cfg = load_config(CONFIGS / f"{name}.yaml")
        assert from_dict(cfg.to_dict()) == cfg

    def test_method_defaults_surface(self):
        cfg = load_config(CONFIGS / "desk.yaml")
        tgt = cfg.train_config("target", "both")
        assert tgt.pseudo.threshold == 0.75 and tgt.weights.alpha == 1.0 and tgt.weights.beta == 0.4
        assert cfg.attack.epsilon == pytest.approx(4 / 255) and cfg.attack.steps == 20
        assert tgt.batch_size == 8 and tgt.flow == "both"

    def test_overrides(self):
        cfg = load_config(CONFIGS / "desk.yaml", seed=7, scale=0.5, attack_steps=3, out="/x")
        assert cfg.seed == 7 and cfg.attack.steps == 3 and cfg.output_dir == "/x"
        assert cfg.train_config("source_standard").epochs == 10
        assert cfg.train_config("target").epochs == 1
        assert cfg.train_config("target").seed == 7 and cfg.train_config("target").pseudo.seed == 7

    def test_validation(self):
        doc = load_config(TINY).to_dict()
        doc["domains"]["compound"] = []
        with pytest.raises(ValueError):
            from_dict(doc)
        doc = load_config(TINY).to_dict()
        doc["domains"]["open"] = [dict(doc["domains"]["source"])]
        with pytest.raises(ValueError):
            from_dict(doc)


def test_generate_is_idempotent_and_one_dir_per_domain(tmp_path, capsys):
    for out in ("a", "b"):
        assert run(capsys, "generate", "--config", str(TINY), "--out", str(tmp_path / out))[0] == 0
    domains = sorted(p.name for p in (tmp_path / "a" / "data").iterdir())
    assert domains == ["A", "B", "O", "source"]
    for m in (tmp_path / "a").rglob("manifest.json"):
        twin = tmp_path / "b" / m.relative_to(tmp_path / "a")
        assert m.read_bytes() == twin.read_bytes()


def test_three_domains_three_dirs(tmp_path, capsys):
    doc = load_config(TINY).to_dict()
    doc["domains"]["compound"] = doc["domains"]["compound"][:1]
    doc["output_dir"] = str(tmp_path / "r")
    cfg_path = tmp_path / "three.yaml"
    cfg_path.write_text(json.dumps(doc))  # JSON is valid YAML
    run(capsys, "generate", "--config", str(cfg_path))
    assert len(list((tmp_path / "r" / "data").iterdir())) == 3


def test_missing_prerequisite_names_the_path(tmp_path, capsys):
    code, err = run_failing(capsys, "adapt", "--config", str(TINY), "--out", str(tmp_path))
    assert code != 0 and err["error"] == "missing_artifact"
    path = Path(err["path"])
    assert path.parent == tmp_path / "checkpoints"
    assert path.name in ("standard_source.ckpt", "robust_source.ckpt")
    code, err = run_failing(capsys, "adapt", "--config", str(TINY), "--out", str(tmp_path), "--flow", "standard")
    assert err["path"] == str(tmp_path / "checkpoints" / "standard_source.ckpt")


def test_missing_config_and_usage_errors(tmp_path, capsys):
    code, err = run_failing(capsys, "generate", "--config", str(tmp_path / "nope.yaml"))
    assert code == 1 and "nope.yaml" in err["message"]
    code, err = run_failing(capsys, "adapt", "--config", str(TINY), "--flow", "sideways")
    assert code == 2 and err["error"] == "usage"


def test_full_cli_run(tmp_path, capsys):
    out = str(tmp_path / "run")
    for verb in ("generate", "train-source", "adapt", "eval"):
        assert run(capsys, verb, "--config", str(TINY), "--out", out)[0] == 0
    root = Path(out)
    names = ["standard_source", "robust_source", "target_standard", "target_robust", "target_both"]
    for n in names:
        assert (root / "checkpoints" / f"{n}.ckpt").exists()
        header = (root / "reports" / f"{n}.csv").read_text().splitlines()[0]
        assert header == "domain,class,condition,dice,asd,n"
        doc = json.loads((root / "reports" / f"{n}.json").read_text())
        assert {"C", "C+O"} <= set(doc["aggregates"]["adversarial"])
    assert (root / "traces" / "target_both.csv").read_text().startswith("step,epoch,loss")
    md = (root / "reports" / "summary.md").read_text()
    assert all(f"| {n} |" in md for n in names)
    for png in ("summary_dice.png", "summary_asd.png"):
        assert (root / "reports" / png).read_bytes()[:4] == b"\x89PNG"
    manifest = json.loads((root / "manifests" / "adapt.json").read_text())
    assert manifest["config"]["name"] == "tiny"
    assert not any(p.startswith("data/source") for p in manifest["inputs"])

    # report rebuilds the table from disk without recomputing anything
    (root / "reports" / "summary.md").unlink()
    run(capsys, "report", "--config", str(TINY), "--out", out)
    assert "| target_both |" in (root / "reports" / "summary.md").read_text()


def test_scale_flag_changes_epochs(tmp_path, capsys):
    out = str(tmp_path / "s")
    run(capsys, "generate", "--config", str(TINY), "--out", out)
    run(capsys, "train-source", "--config", str(TINY), "--out", out, "--scale", "2", "--role", "standard_source")
    trace = (Path(out) / "traces" / "standard_source.csv").read_text().splitlines()[1:]
    assert len(trace) == 2  # 8 samples, batch 8, two epochs
    assert trace[-1].split(",")[1] == "1"
