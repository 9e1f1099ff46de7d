import json

import numpy as np
import pytest

from vesca import formats
from vesca.cli import main
from vesca.harness import ABLATION_ROWS, CSV_COLUMNS, SCHEMA_VERSION

TINY = {
    "_comment": "tiny end-to-end configuration for tests",
    "image_side": 16, "patch_side": 4, "embed_dim": 8, "num_blocks": 1, "adapter_dim": 4,
    "num_source": 20, "num_target_train": 16, "num_target_test": 4,
    "num_images": 3, "reference_size": 5, "pretrain_epochs": 1, "downstream_epochs": 1,
    "N": 2, "M": 3, "T": 2, "t_init": 2, "H": 2, "ns": 4, "decline_samples": 2,
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY))
    return path


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}



def test_missing_config_exit_code(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["attack", "--config", str(tmp_path / "none.json")])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["attack"])
    assert exc.value.code == 2


def test_bad_config_exits_2(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"lambda": 0.1}))
    assert main(["attack", "--config", str(path)]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_config_command(capsys):
    assert main(["config"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["ns"] == 8 and doc["reference_size"] == 40


def test_gradcheck_pass_and_fail(capsys):
    assert main(["gradcheck", "--cases", "3"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS encoder") == 3
    assert main(["gradcheck", "--cases", "2", "--corrupt-backward"]) == 1
    out = capsys.readouterr().out
    assert "FAIL encoder[0]" in out and "gradcheck: FAIL" in out


def test_volcheck_cases_scale(capsys):
    assert main(["volcheck", "--cases", "30"]) == 0
    out = capsys.readouterr().out
    assert sum(line.startswith("PASS volume[") for line in out.splitlines()) == 30
    assert sum(line.startswith("PASS logvol[") for line in out.splitlines()) == 3


def test_synth_command(config, tmp_path):
    assert main(["synth", "--config", str(config), "--out", str(tmp_path / "o")]) == 0
    data = tmp_path / "o" / "data"
    assert (data / "manifest.json").is_file() and (data / "target_test_labels.vten").is_file()


def test_evaluate_missing_artifacts(config, tmp_path, capsys):
    out = tmp_path / "empty"
    assert main(["evaluate", "--config", str(config), "--out", str(out)]) == 1
    err = capsys.readouterr().err
    assert str(out / "surrogate.vckpt") in err
    assert str(out / "complexes" / "img_0002.vsc") in err


def test_report_missing(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 1


@pytest.fixture
def attacked(config, tmp_path, monkeypatch):
    monkeypatch.setenv("VESCA_LOG", "vertex")
    out = tmp_path / "run"
    assert main(["attack", "--config", str(config), "--out", str(out)]) == 0
    return out


def test_attack_outputs(attacked):
    for i in range(3):
        k = formats.load_complex(attacked / "complexes" / f"img_{i:04d}.vsc")
        assert len(k.simplices) == 2 and all(s.num_vertices == 3 for s in k.simplices)
        assert k.check()
        adv = formats.load_tensor(attacked / "adversarial" / f"img_{i:04d}_00.vten")
        assert np.max(np.abs(adv - k.base_image)) <= k.epsilon + 1e-9
    trace = [json.loads(line) for line in (attacked / "trace.jsonl").read_text().splitlines()]
    assert {r["image"] for r in trace} == {0, 1, 2}
    manifest = json.loads((attacked / "attack_manifest.json").read_text())
    assert manifest["schema_version"] == SCHEMA_VERSION
    assert len(manifest["reference_indices"]) == 5


def test_attack_rerun_byte_identical(config, attacked, tmp_path, monkeypatch):
    monkeypatch.setenv("VESCA_LOG", "vertex")
    again = tmp_path / "again"
    assert main(["attack", "--config", str(config), "--out", str(again), "--jobs", "2"]) == 0
    assert _files(again) == _files(attacked)


def test_seed_override_changes_output(config, attacked, tmp_path):
    other = tmp_path / "other"
    assert main(["attack", "--config", str(config), "--out", str(other), "--seed", "7"]) == 0
    a = (attacked / "complexes" / "img_0000.vsc").read_bytes()
    assert (other / "complexes" / "img_0000.vsc").read_bytes() != a


def test_trace_levels(config, tmp_path, monkeypatch):
    counts = {}
    for level in ("off", "vertex", "iter"):
        monkeypatch.setenv("VESCA_LOG", level)
        out = tmp_path / level
        assert main(["attack", "--config", str(config), "--out", str(out)]) == 0
        path = out / "trace.jsonl"
        counts[level] = len(path.read_text().splitlines()) if path.exists() else 0
    assert counts["off"] == 0 < counts["vertex"] < counts["iter"]
    monkeypatch.setenv("VESCA_LOG", "verbose")
    assert main(["attack", "--config", str(config), "--out", str(tmp_path / "x")]) == 2


def test_evaluate_and_report(config, attacked, capsys):
    assert main(["evaluate", "--config", str(config), "--out", str(attacked)]) == 0
    doc = json.loads((attacked / "report.json").read_text())
    assert doc["schema_version"] == SCHEMA_VERSION
    assert [r["row"] for r in doc["rows"]] == ["vesca"]
    assert set(doc["rows"][0]["models"]) == {"frozen", "adapter", "full"}
    assert len(doc["reference_mean"]) == 16 * 8
    csv = (attacked / "report.csv").read_text().splitlines()
    assert csv[0] == ",".join(CSV_COLUMNS) and len(csv) == 4
    first = (attacked / "report.json").read_bytes()
    assert main(["evaluate", "--config", str(config), "--out", str(attacked)]) == 0
    assert (attacked / "report.json").read_bytes() == first
    capsys.readouterr()
    assert main(["report", "--out", str(attacked)]) == 0
    assert "vesca" in capsys.readouterr().out
    assert main(["report", "--out", str(attacked), "--format", "csv"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == ",".join(CSV_COLUMNS)


def test_evaluate_ablation_rows(config, attacked):
    assert main(["evaluate", "--config", str(config), "--out", str(attacked), "--ablation"]) == 0
    doc = json.loads((attacked / "report.json").read_text())
    assert [r["row"] for r in doc["rows"]] == list(ABLATION_ROWS)
    clean = {m: {r["models"][m]["clean"] for r in doc["rows"]} for m in ("frozen", "full")}
    assert all(len(v) == 1 for v in clean.values())


def test_encoder_checkpoint_reuse(config, attacked, tmp_path):
    doc = dict(TINY, encoder_checkpoint=str(attacked / "surrogate.vckpt"))
    path = tmp_path / "ckpt.json"
    path.write_text(json.dumps(doc))
    out = tmp_path / "from_ckpt"
    assert main(["attack", "--config", str(path), "--out", str(out)]) == 0
    assert (out / "complexes" / "img_0001.vsc").read_bytes() == \
        (attacked / "complexes" / "img_0001.vsc").read_bytes()


def test_dataset_directory_input(config, attacked, tmp_path):
    assert main(["synth", "--config", str(config), "--out", str(tmp_path / "s")]) == 0
    doc = dict(TINY, dataset=str(tmp_path / "s" / "data"))
    path = tmp_path / "ds.json"
    path.write_text(json.dumps(doc))
    out = tmp_path / "from_ds"
    assert main(["attack", "--config", str(path), "--out", str(out)]) == 0
    assert (out / "complexes" / "img_0002.vsc").read_bytes() == \
        (attacked / "complexes" / "img_0002.vsc").read_bytes()
