import json
import time

import numpy as np
import pytest
from PIL import Image

from avuseg import cli
from avuseg.inaccuracy import decompose
from avuseg.synthdata import DatasetSpec, generate, save_dataset
from avuseg.volumes import LabelVolume

SPEC = {"num_train": 3, "num_val": 1, "num_test": 2, "size": [16, 16], "seed": 2}
TRAIN = {"epochs": 2, "channels": [2, 4, 4], "batch_size": 2, "variant": "bayes-mid",
         "loss": "avu", "loss_params": {"alpha": 100.0}}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def outputs(run_dir):
    return json.loads((run_dir / cli.MANIFEST_NAME).read_text())["outputs"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = write_json(root / "spec.json", SPEC)
    cfg = write_json(root / "train.json", TRAIN)
    assert cli.main(["gen", "--spec", spec, "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", cfg, "--data", str(root / "data"),
                     "--out", str(root / "run"), "--quiet"]) == 0
    return root


def test_gen_manifest_and_rerun_crcs(pipeline, tmp_path):
    first = outputs(pipeline / "data")
    assert len(first) == 1 + 3 * 6
    assert cli.main(["gen", "--spec", str(pipeline / "spec.json"), "--out", str(tmp_path / "d2")]) == 0
    assert outputs(tmp_path / "d2") == first


def test_train_rerun_crcs(pipeline, tmp_path):
    assert cli.main(["train", "--config", str(pipeline / "train.json"), "--data", str(pipeline / "data"),
                     "--out", str(tmp_path / "r2"), "--quiet"]) == 0
    assert outputs(tmp_path / "r2") == outputs(pipeline / "run")


def eval_args(pipeline, out, *extra):
    return ["eval", "--checkpoint", str(pipeline / "run/best.json"), "--data", str(pipeline / "data"),
            "--out", str(out), "--samples", "2", *extra]


def test_eval_report_and_rerun_bytes(pipeline, tmp_path):
    assert cli.main(eval_args(pipeline, tmp_path / "e1")) == 0
    assert cli.main(eval_args(pipeline, tmp_path / "e2")) == 0
    a, b = (tmp_path / "e1/report.json").read_bytes(), (tmp_path / "e2/report.json").read_bytes()
    assert a == b
    assert outputs(tmp_path / "e1") == outputs(tmp_path / "e2")
    report = json.loads(a)
    assert len(report["per_scan"]) == 2
    for k in ("dice", "ece", "avu_auc", "roc_auc", "prc_auc"):
        assert {"mean", "std", "n"} <= set(report["summary"][k])
    head = (tmp_path / "e1/curves.csv").read_text().splitlines()[0]
    assert head == "scan,curve,threshold,x,y"


def test_eval_compare_same_checkpoint_is_degenerate(pipeline, tmp_path):
    assert cli.main(eval_args(pipeline, tmp_path, "--compare", str(pipeline / "run/best.json"))) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert any("degenerate" in n for n in report["notices"])


def test_eval_ensemble_and_tta_modes(pipeline, tmp_path):
    ck = str(pipeline / "run/best.json")
    assert cli.main(eval_args(pipeline, tmp_path / "ens", "--checkpoint", str(pipeline / "run/final.json"),
                              "--mode", "ensemble")) == 0
    assert cli.main(eval_args(pipeline, tmp_path / "tta", "--mode", "tta")) == 0
    assert cli.main(["eval", "--checkpoint", ck, "--data", str(pipeline / "data"), "--out",
                     str(tmp_path / "bad"), "--kernel", "2,2,1"]) == 2


def test_perfect_predictor_report(tmp_path):
    from avuseg.metrics import scan_metrics
    from avuseg.volumes import ProbVolume
    scan = generate(DatasetSpec(**{**SPEC, "size": (16, 16)})).scans[0]
    onehot = np.eye(2)[scan.label.data]
    m = scan_metrics(ProbVolume(onehot), scan.label)
    assert m.dice == 1.0 and m.ece == 0.0 and m.roc_auc is None


def test_heatmap_dimensions_and_failure_panel(pipeline, tmp_path):
    out = tmp_path / "h.png"
    assert cli.main(["heatmap", "--checkpoint", str(pipeline / "run/best.json"), "--data",
                     str(pipeline / "data"), "--scan", "scan_004", "--slice", "1", "--out", str(out)]) == 0
    rgb = np.asarray(Image.open(out))
    assert rgb.shape == (16, 16 * len(cli.PANELS), 3)
    assert cli.main(["heatmap", "--checkpoint", str(pipeline / "run/best.json"), "--data",
                     str(pipeline / "data"), "--scan", "scan_004", "--slice", "2", "--out", str(out)]) == 2
    assert cli.main(["heatmap", "--checkpoint", str(pipeline / "run/best.json"), "--data",
                     str(pipeline / "data"), "--scan", "nope", "--out", str(out)]) == 2


def test_render_panels_match_decomposition():
    rng = np.random.default_rng(0)
    gt = np.zeros((12, 12), dtype=np.uint8)
    gt[3:9, 3:9] = 1
    pred = gt.copy()
    pred[0, 0] = 1
    pred[3:9, 3:6] = 0
    probs = np.eye(2)[pred] * 0.8 + 0.1
    image = rng.normal(size=(12, 12))
    rgb = cli.render_heatmap(image, probs, gt, u_max=1.0)
    w = 12
    dec = decompose(LabelVolume(pred[None]), LabelVolume(gt[None]), (3, 3, 1))
    assert np.array_equal(rgb[:, 4 * w:5 * w, 0] == 255, dec.failures[0])
    assert np.array_equal(rgb[:, 3 * w:4 * w, 0] == 255, dec.errors[0])
    assert dec.failures[0].sum() == 18 and dec.errors[0].sum() == 1


def test_zero_uncertainty_overlay_is_lowest_colour():
    gt = np.zeros((8, 8), dtype=np.uint8)
    probs = np.eye(2)[gt]
    rgb = cli.render_heatmap(np.zeros((8, 8)), probs, gt, u_max=0.5)
    heat = rgb[:, 8:16]
    assert np.all(heat == np.array(cli.HEAT_STOPS[0][1], dtype=np.uint8))
    np.testing.assert_array_equal(cli.heat_colours(np.array([0.5, 9.0]), 0.5),
                                  [cli.HEAT_STOPS[-1][1]] * 2)


def test_mask_outline_ring():
    m = np.zeros((5, 5), dtype=bool)
    m[1:4, 1:4] = True
    ring = cli.mask_outline(m)
    assert ring.sum() == 8 and not ring[2, 2]


@pytest.mark.parametrize("argv", [
    ["train", "--data", "x", "--out", "y", "--config", "missing.json"],
    ["eval", "--checkpoint", "a.json", "--data", "nowhere", "--out", "o"],
])
def test_usage_errors_exit_two(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 2


def test_bad_spec_and_unknown_loss_exit_two(pipeline, tmp_path, capsys):
    bad = write_json(tmp_path / "bad.json", {"num_classes": 4})
    assert cli.main(["gen", "--spec", bad, "--out", str(tmp_path / "d")]) == 2
    assert "num_classes" in capsys.readouterr().err
    cfg = write_json(tmp_path / "cfg.json", {**TRAIN, "loss": "hinge"})
    assert cli.main(["train", "--config", cfg, "--data", str(pipeline / "data"), "--out", str(tmp_path / "r")]) == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate"])
    assert info.value.code == 2


def test_corrupt_checkpoint_is_usage_error(pipeline, tmp_path):
    broken = tmp_path / "ck.json"
    broken.write_text('{"format": "something-else"}')
    assert cli.main(["eval", "--checkpoint", str(broken), "--data", str(pipeline / "data"),
                     "--out", str(tmp_path / "o")]) == 2


def test_corrupt_volume_is_runtime_failure(pipeline, tmp_path):
    import shutil
    data = tmp_path / "data"
    shutil.copytree(pipeline / "data", data)
    vol = data / "scans/scan_004_image.uevol"
    blob = bytearray(vol.read_bytes())
    blob[-20] ^= 0xFF
    vol.write_bytes(bytes(blob))
    assert cli.main(["eval", "--checkpoint", str(pipeline / "run/best.json"), "--data", str(data),
                     "--out", str(tmp_path / "o")]) == 1


def test_sweep_command(pipeline, tmp_path):
    cfg = write_json(tmp_path / "cfg.json", {**TRAIN, "epochs": 1, "mc_samples": 1})
    assert cli.main(["sweep", "--config", cfg, "--data", str(pipeline / "data"), "--out", str(tmp_path / "s"),
                     "--alphas", "10,100"]) == 0
    assert json.loads((tmp_path / "s/sweep.json").read_text())["selected"] in ("alpha=10", "alpha=100")
    assert cli.main(["sweep", "--config", cfg, "--data", str(pipeline / "data"), "--out", str(tmp_path / "s"),
                     "--alphas", "ten"]) == 2


def test_default_det_ce_training_fits_time_budget(tmp_path):
    """Time a few epochs on the full default dataset and extrapolate to the 200-epoch default."""
    save_dataset(generate(DatasetSpec()), tmp_path / "data")
    cfg = write_json(tmp_path / "cfg.json", {"variant": "det", "loss": "ce"})
    epochs = 3
    t0 = time.perf_counter()
    assert cli.main(["train", "--config", cfg, "--data", str(tmp_path / "data"), "--out", str(tmp_path / "r"),
                     "--epochs", str(epochs), "--quiet"]) == 0
    per_epoch = (time.perf_counter() - t0) / epochs
    projected = per_epoch * 200
    print(f"det+CE default: {per_epoch:.2f} s/epoch, projected {projected:.0f} s for 200 epochs")
    assert projected < 600
