import json

import numpy as np
import pytest

from sweepmatch.cli import cli_main
from sweepmatch.config import default_config, load_config, merge_config
from sweepmatch.encoder import EncoderConfig, init_params, save_checkpoint
from sweepmatch.evaluation import evaluate, merge_reports, simulate_queries
from sweepmatch.phantom import PhantomConfig, generate_phantom_dataset
from sweepmatch.retrieval import RetrievalResult
from sweepmatch.sweeps import ProbePose
from sweepmatch.training import train

# -- metrics ------------------------------------------------------------------


def _matched(pose):
    return RetrievalResult(status="matched", score=1.0, runner_up_score=0.0,
                           frame_index=0, pose=ProbePose(pose))


REJECTED = RetrievalResult(status="rejected", score=-1.0, runner_up_score=-2.0)


def test_evaluate_hand_case():
    origin = ProbePose((0.0, 0.0, 0.0))
    img = np.zeros((4, 4))
    answers = iter([_matched((3.0, 0, 0)), _matched((14.9, 0, 0)),
                    _matched((15.0, 0, 0)), REJECTED])
    report = evaluate([(img, origin)] * 4, lambda _: next(answers),
                      success_threshold_mm=15.0)
    assert report.n_queries == 4
    assert report.success_rate == pytest.approx(0.5)   # 3mm and 14.9mm only
    assert report.rejection_rate == pytest.approx(0.25)
    # distance stats exclude the rejected query but include the 15.0mm miss
    assert report.mean_probe_distance_mm == pytest.approx((3 + 14.9 + 15.0) / 3)


def test_success_boundary_is_strict():
    origin = ProbePose((0.0, 0.0, 0.0))
    img = np.zeros((4, 4))
    at = lambda d: evaluate([(img, origin)], lambda _: _matched((d, 0, 0)),
                            success_threshold_mm=15.0).success_rate
    assert at(14.999) == 1.0
    assert at(15.0) == 0.0


def test_evaluate_empty_queries():
    with pytest.raises(ValueError, match="empty"):
        evaluate([], lambda _: REJECTED)


def test_all_rejected_has_no_distance_stats():
    origin = ProbePose((0.0, 0.0, 0.0))
    report = evaluate([(np.zeros((4, 4)), origin)] * 3, lambda _: REJECTED)
    assert report.success_rate == 0.0
    assert report.rejection_rate == 1.0
    assert report.mean_probe_distance_mm is None
    assert report.std_probe_distance_mm is None


def test_merge_reports_pools_queries():
    origin = ProbePose((0.0, 0.0, 0.0))
    img = np.zeros((4, 4))
    a = evaluate([(img, origin)] * 2, lambda _: _matched((1.0, 0, 0)))
    b = evaluate([(img, origin)] * 2, lambda _: REJECTED)
    merged = merge_reports([a, b])
    assert merged.n_queries == 4
    assert merged.success_rate == pytest.approx(0.5)
    assert merged.rejection_rate == pytest.approx(0.5)
    assert merged.mean_probe_distance_mm == pytest.approx(1.0)


# -- simulated query protocol ---------------------------------------------------

TINY_PHANTOM = PhantomConfig(volume_dims_voxels=(60, 40, 40),
                             sweep_length_frames=12, image_size=(16, 16),
                             pixel_spacing_mm=2.0, inclusion_count=3,
                             vessel_count=1, seed=7)


@pytest.fixture(scope="module")
def tiny_sweep():
    return generate_phantom_dataset(TINY_PHANTOM, 1)[0]


def test_simulate_queries_count_and_shape(tiny_sweep):
    queries = simulate_queries(tiny_sweep, n=5, seed=3, half_width=2)
    assert len(queries) == 5
    for image, pose in queries:
        assert image.shape == tiny_sweep.frames[0].image.shape
        assert isinstance(pose, ProbePose)


def test_simulate_queries_identity_returns_source_frame(tiny_sweep):
    queries = simulate_queries(tiny_sweep, n=4, seed=3, half_width=2,
                               force_identity=True)
    originals = {f.image.tobytes(): f.pose for f in tiny_sweep.frames}
    for image, pose in queries:
        assert image.tobytes() in originals
        assert originals[image.tobytes()].position == pose.position


def test_simulate_queries_deterministic(tiny_sweep):
    a = simulate_queries(tiny_sweep, n=4, seed=9, half_width=2)
    b = simulate_queries(tiny_sweep, n=4, seed=9, half_width=2)
    for (ia, pa), (ib, pb) in zip(a, b):
        assert np.array_equal(ia, ib) and pa.position == pb.position
    c = simulate_queries(tiny_sweep, n=4, seed=10, half_width=2)
    assert any(not np.array_equal(ia, ic) for (ia, _), (ic, _) in zip(a, c))


# -- training loop ----------------------------------------------------------------


def _tiny_cfg(root):
    override = {
        "data": {"train_dir": str(root / "train"), "val_dir": str(root / "val"),
                 "test_dir": str(root / "test")},
        "gen": {"train_sweeps": 1, "val_sweeps": 1, "test_sweeps": 1},
        "phantom": {"volume_dims_voxels": [60, 40, 40],
                    "sweep_length_frames": 10, "image_size": [16, 16],
                    "pixel_spacing_mm": 2.0, "inclusion_count": 3,
                    "vessel_count": 1, "seed": 7},
        "encoder": {"input_size": [16, 16], "conv_stages": [[4, 1, 2], [8, 1, 2]],
                    "embedding_dim": 8, "mlp_layers": 2, "mlp_width": 8},
        "train": {"batch_size": 4, "max_epochs": 2, "seed": 1},
        "eval": {"queries_per_sweep": 3, "half_width": 2},
    }
    return merge_config(default_config(), override)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    cfg = _tiny_cfg(root)
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    assert cli_main(["gen-synth", "--config", str(cfg_path),
                     "--out", str(root)]) == 0
    return root, cfg, cfg_path


def test_gen_synth_layout(tiny_dataset):
    root, cfg, _ = tiny_dataset
    for split in ("train", "val", "test"):
        dirs = sorted((root / split).iterdir())
        assert len(dirs) == 1
        assert (dirs[0] / "manifest.json").exists()


def test_train_smoke_and_determinism(tiny_dataset, tmp_path):
    root, cfg, _ = tiny_dataset
    r1 = train(cfg, tmp_path / "run1", baseline="ours", log=lambda *_: None)
    r2 = train(cfg, tmp_path / "run2", baseline="ours", log=lambda *_: None)
    assert len(r1.history) == 2
    assert r1.best_checkpoint.exists()
    assert all(np.isfinite(h["train_loss"]) for h in r1.history)
    assert [h["train_loss"] for h in r1.history] == \
        [h["train_loss"] for h in r2.history]
    assert r1.best_val_loss == r2.best_val_loss


def test_train_all_trainable_baselines_step(tiny_dataset, tmp_path):
    root, cfg, _ = tiny_dataset
    cfg = merge_config(cfg, {"train": {"max_epochs": 1}})
    for baseline in ("inter_sweep_cl", "ivpp", "distance_ivpp"):
        result = train(cfg, tmp_path / baseline, baseline=baseline,
                       log=lambda *_: None)
        assert np.isfinite(result.best_val_loss)


def test_train_ablation_modes_differ(tiny_dataset, tmp_path):
    root, cfg, _ = tiny_dataset
    cfg = merge_config(cfg, {"train": {"max_epochs": 1}})
    losses = {}
    for ablation in ("sce", "p1", "p2", "full"):
        result = train(cfg, tmp_path / ablation, baseline="ours",
                       ablation=ablation, log=lambda *_: None)
        losses[ablation] = result.best_val_loss
    # labeling and loss variants must actually change the objective
    assert len(set(losses.values())) > 1


def test_train_rejects_zero_epochs(tiny_dataset, tmp_path):
    root, cfg, _ = tiny_dataset
    cfg = merge_config(cfg, {"train": {"max_epochs": 0}})
    with pytest.raises(ValueError, match="max_epochs"):
        train(cfg, tmp_path / "zero", log=lambda *_: None)


def test_train_rejects_ncc(tiny_dataset, tmp_path):
    root, cfg, _ = tiny_dataset
    with pytest.raises(ValueError, match="no trainable"):
        train(cfg, tmp_path / "ncc", baseline="ncc", log=lambda *_: None)


# -- command line ----------------------------------------------------------------


def _last_json(capsys):
    lines = [ln for ln in capsys.readouterr().out.strip().splitlines() if ln]
    return json.loads(lines[-1])


def test_cli_train_index_query_evaluate(tiny_dataset, tmp_path, capsys):
    root, cfg, cfg_path = tiny_dataset
    run = tmp_path / "run"
    assert cli_main(["train", "--config", str(cfg_path),
                     "--out", str(run)]) == 0
    payload = _last_json(capsys)
    ckpt = payload["best_checkpoint"]
    assert payload["epochs"] == 2

    sweep_dir = sorted((root / "test").iterdir())[0]
    index_path = tmp_path / "db.swix"
    assert cli_main(["build-index", "--config", str(cfg_path),
                     "--checkpoint", ckpt, "--sweep", str(sweep_dir),
                     "--out", str(index_path)]) == 0
    payload = _last_json(capsys)
    assert payload["entries"] == 10

    image_path = sorted((sweep_dir / "frames").glob("*.pgm"))[0]
    assert cli_main(["query", "--config", str(cfg_path),
                     "--index", str(index_path), "--image", str(image_path),
                     "--checkpoint", ckpt]) == 0
    payload = _last_json(capsys)
    assert payload["status"] in ("matched", "rejected")

    assert cli_main(["evaluate", "--config", str(cfg_path), "--baseline", "ncc",
                     "--out", str(tmp_path / "report.json")]) == 0
    payload = _last_json(capsys)
    assert payload["n_queries"] == 3
    assert payload["rejection_rate"] == 0.0  # NCC never rejects
    saved = json.loads((tmp_path / "report.json").read_text())
    assert len(saved["records"]) == 3


def test_cli_evaluate_with_checkpoint(tiny_dataset, tmp_path, capsys):
    root, cfg, cfg_path = tiny_dataset
    enc = EncoderConfig(input_size=(16, 16), conv_stages=((4, 1, 2), (8, 1, 2)),
                        embedding_dim=8, mlp_layers=2, mlp_width=8)
    ckpt = tmp_path / "untrained.swmc"
    save_checkpoint(init_params(enc, seed=0), None, 0, ckpt)
    assert cli_main(["evaluate", "--config", str(cfg_path),
                     "--checkpoint", str(ckpt)]) == 0
    payload = _last_json(capsys)
    assert 0.0 <= payload["success_rate"] <= 1.0
    assert payload["baseline"] == "ours"
    assert payload["config_echo"]["train"]["batch_size"] == 4


def test_cli_usage_errors_exit_2(capsys):
    assert cli_main([]) == 2
    assert cli_main(["no-such-command"]) == 2


def test_cli_runtime_error_exits_1(tiny_dataset, tmp_path, capsys):
    root, cfg, cfg_path = tiny_dataset
    code = cli_main(["query", "--config", str(cfg_path),
                     "--index", str(tmp_path / "missing.swix"),
                     "--image", "nowhere.pgm", "--checkpoint", "nowhere.swmc"])
    assert code == 1
    payload = _last_json(capsys)
    assert "error" in payload and "message" in payload


def test_cli_version_exits_0(capsys):
    assert cli_main(["--version"]) == 0


def test_desk_preset_flag():
    cfg = load_config(None, desk=True)
    assert cfg["encoder"]["input_size"] == [32, 32]
    assert cfg["train"]["max_epochs"] == 60
    full = load_config(None, desk=False)
    assert full["encoder"]["input_size"] == [128, 128]


def test_train_norm_spread_weight_changes_objective(tiny_dataset, tmp_path):
    root, cfg, _ = tiny_dataset
    cfg = merge_config(cfg, {"train": {"max_epochs": 1}})
    base = train(cfg, tmp_path / "ns0", baseline="ours", log=lambda *_: None)
    cfg_pen = merge_config(cfg, {"loss": {"norm_spread_weight": 5.0}})
    pen = train(cfg_pen, tmp_path / "ns5", baseline="ours", log=lambda *_: None)
    assert np.isfinite(pen.best_val_loss)
    assert pen.best_val_loss != base.best_val_loss
