"""Command-line workflows, exit codes, and artifact determinism."""
import json
from pathlib import Path

import numpy as np
import pytest

from coughmae.cli import main
from coughmae.config import RunConfig, serialize_config


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def write_config(path: Path, **sections) -> Path:
    path.write_text(json.dumps(sections) + "\n")
    return path


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Shared 16-sample synthetic corpus for training commands."""
    root = tmp_path_factory.mktemp("corpus")
    code = main(["synth-data", "--out", str(root), "--n", "16", "--seed", "5"])
    assert code == 0
    return root / "manifest.csv"


# - show-config -


def test_show_config_defaults(capsys):
    code, out, _ = run_cli(capsys, "show-config")
    assert code == 0
    assert out == serialize_config(RunConfig())


def test_show_config_file_and_seed_override(capsys, tmp_path):
    cfg = write_config(tmp_path / "run.json", seed=3)
    code, out, _ = run_cli(capsys, "show-config", "--config", str(cfg), "--seed", "9")
    assert code == 0
    assert json.loads(out)["seed"] == 9   # CLI flag wins over file


def test_missing_config_file_exit_2(capsys, tmp_path):
    code, _, err = run_cli(capsys, "show-config", "--config", str(tmp_path / "no.json"))
    assert code == 2
    assert "error:" in err


def test_unknown_config_key_exit_2(capsys, tmp_path):
    cfg = write_config(tmp_path / "run.json", banana=1)
    code, _, err = run_cli(capsys, "show-config", "--config", str(cfg))
    assert code == 2
    assert "unknown keys" in err


# - synth-data and stats -


def test_synth_data_writes_corpus(capsys, tmp_path):
    out_dir = tmp_path / "data"
    code, out, _ = run_cli(capsys, "synth-data", "--out", str(out_dir), "--n", "4",
                           "--seed", "1")
    assert code == 0
    manifest = Path(out.strip())
    assert manifest == out_dir / "manifest.csv"
    assert manifest.exists()
    assert len(list(out_dir.glob("*.wav"))) == 4


def test_synth_data_odd_count_exit_2(capsys, tmp_path):
    code, _, err = run_cli(capsys, "synth-data", "--out", str(tmp_path / "d"),
                           "--n", "3", "--seed", "0")
    assert code == 2
    assert "error:" in err


def test_stats_writes_sidecar(capsys, corpus):
    code, out, _ = run_cli(capsys, "stats", "--manifest", str(corpus))
    assert code == 0
    payload = json.loads(out)
    assert set(payload) == {"mean", "std", "degenerate"}
    assert payload["std"] > 0
    sidecar = Path(str(corpus) + ".stats.json")
    assert sidecar.exists()
    assert json.loads(sidecar.read_text()) == payload


def test_stats_without_manifest_exit_2(capsys):
    code, _, err = run_cli(capsys, "stats")
    assert code == 2
    assert "manifest" in err


# - pretrain -


def pretrain_config(tmp_path: Path, corpus: Path, out_name: str) -> Path:
    return write_config(
        tmp_path / f"{out_name}.json",
        seed=4,
        model={"dim": 32, "n_heads": 2, "n_blocks": 1, "decoder_dim": 16,
               "decoder_heads": 2, "decoder_blocks": 1},
        pretrain={"epochs": 2, "batch_size": 4},
        paths={"manifest": str(corpus), "output_dir": str(tmp_path / out_name)},
    )


def test_pretrain_artifacts_and_determinism(capsys, corpus, tmp_path):
    paths = []
    for name in ("runA", "runB"):
        cfg = pretrain_config(tmp_path, corpus, name)
        code, out, _ = run_cli(capsys, "pretrain", "--config", str(cfg))
        assert code == 0
        ckpt = Path(out.strip())
        assert ckpt.name == "checkpoint.bin"
        assert ckpt.exists()
        assert ckpt.with_name("loss.csv").exists()
        paths.append(ckpt)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert (paths[0].with_name("loss.csv").read_bytes()
            == paths[1].with_name("loss.csv").read_bytes())


def test_pretrain_requires_manifest(capsys, tmp_path):
    cfg = write_config(tmp_path / "no_manifest.json", pretrain={"epochs": 1})
    code, _, err = run_cli(capsys, "pretrain", "--config", str(cfg))
    assert code == 2
    assert "manifest" in err


# - finetune and segment -


@pytest.fixture(scope="module")
def finetuned_model(tmp_path_factory, corpus):
    """Run the finetune command once; reuse its artifacts across tests."""
    work = tmp_path_factory.mktemp("ft")
    out_dir = work / "out"
    cfg = write_config(
        work / "ft.json",
        seed=2,
        model={"dim": 32, "n_heads": 2, "n_blocks": 1, "decoder_dim": 16,
               "decoder_heads": 2, "decoder_blocks": 1},
        finetune={"epochs": 1, "batch_size": 4, "k_folds": 2},
        paths={"manifest": str(corpus), "output_dir": str(out_dir)},
    )
    code = main(["finetune", "--config", str(cfg), "--init", "scratch"])
    assert code == 0
    return out_dir


def test_finetune_artifacts(finetuned_model, capsys):
    capsys.readouterr()
    report = json.loads((finetuned_model / "eval_report.json").read_text())
    assert report["init"] == "scratch"
    assert len(report["fold_auroc"]) == 2
    assert abs(report["mean_auroc"] - np.mean(report["fold_auroc"])) < 1e-12
    csv_lines = (finetuned_model / "eval_report.csv").read_text().strip().split("\n")
    assert csv_lines[0] == "fold,best_epoch,auroc,pooling,init"
    assert len(csv_lines) == 1 + 2 + 1
    assert (finetuned_model / "model.bin").exists()


def test_segment_writes_events(finetuned_model, corpus, capsys, tmp_path):
    wav = sorted(corpus.parent.glob("*.wav"))[0]
    cfg = write_config(
        tmp_path / "seg.json",
        model={"dim": 32, "n_heads": 2, "n_blocks": 1, "decoder_dim": 16,
               "decoder_heads": 2, "decoder_blocks": 1},
        paths={"output_dir": str(tmp_path / "seg_out")},
    )
    code, out, _ = run_cli(capsys, "segment", "--config", str(cfg),
                           "--audio", str(wav),
                           "--checkpoint", str(finetuned_model / "model.bin"))
    assert code == 0
    events = Path(out.strip())
    assert events == tmp_path / "seg_out" / "events.csv"
    assert events.read_text().startswith("start_s,end_s")


def test_segment_with_truth_scores(finetuned_model, corpus, capsys, tmp_path):
    wav = sorted(corpus.parent.glob("*.wav"))[0]
    truth = tmp_path / "truth.csv"
    truth.write_text("start_s,end_s\n0.100,0.500\n")
    cfg = write_config(
        tmp_path / "seg.json",
        model={"dim": 32, "n_heads": 2, "n_blocks": 1, "decoder_dim": 16,
               "decoder_heads": 2, "decoder_blocks": 1},
        paths={"output_dir": str(tmp_path / "seg_out")},
    )
    code, out, _ = run_cli(capsys, "segment", "--config", str(cfg),
                           "--audio", str(wav),
                           "--checkpoint", str(finetuned_model / "model.bin"),
                           "--truth", str(truth))
    assert code == 0
    scores = json.loads(out)
    assert set(scores) == {"event_f1", "sample_f1"}
    for block in scores.values():
        assert set(block) == {"precision", "recall", "f1"}
        assert 0.0 <= block["f1"] <= 1.0


def test_segment_pretrain_checkpoint_rejected(corpus, capsys, tmp_path):
    cfg = pretrain_config(tmp_path, corpus, "pre")
    assert main(["pretrain", "--config", str(cfg)]) == 0
    capsys.readouterr()
    wav = sorted(corpus.parent.glob("*.wav"))[0]
    code, _, err = run_cli(capsys, "segment", "--config", str(cfg),
                           "--audio", str(wav),
                           "--checkpoint", str(tmp_path / "pre" / "checkpoint.bin"))
    assert code == 2        # no classifier head in a pretraining checkpoint
    assert "head" in err


def test_segment_needs_checkpoint(capsys, tmp_path, corpus):
    wav = sorted(corpus.parent.glob("*.wav"))[0]
    code, _, err = run_cli(capsys, "segment", "--audio", str(wav))
    assert code == 2
    assert "checkpoint" in err


def test_corrupt_checkpoint_exit_1(capsys, tmp_path, corpus):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"CGHMAE\x00\x01" + b"\x00" * 16)
    wav = sorted(corpus.parent.glob("*.wav"))[0]
    code, _, err = run_cli(capsys, "segment", "--audio", str(wav),
                           "--checkpoint", str(bad))
    assert code == 1
    assert "error:" in err


# - grad-check -


def test_grad_check_passes(capsys):
    code, out, _ = run_cli(capsys, "grad-check")
    assert code == 0
    assert "max_rel_err" in out
    assert "all gradients within" in out
