import numpy as np
import pytest

from voxelstrip import cli, phantom, seg_metrics, unet
from voxelstrip.volume_io import read_nifti

SMALL = unet.NetConfig(depth=2, base_width=4)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    assert cli.main(["phantom", "-o", str(root / "data"), "--n", "2"]) == 0
    model = root / "m.hdbw"
    unet.save_model(unet.build(SMALL, 1), SMALL, model)
    return root, model


def test_phantom_writes_pairs_and_config(workspace):
    root, _ = workspace
    names = sorted(p.name for p in (root / "data").iterdir())
    assert names == ["case_0000.nii.gz", "case_0000_mask.nii.gz", "case_0001.nii.gz",
                     "case_0001_mask.nii.gz", "phantom.cfg"]


def test_extract_directory_and_threads(workspace, capsys):
    root, model = workspace
    outs = []
    for threads in ("1", "2"):
        out = root / f"pred{threads}"
        assert cli.main(["extract", "-i", str(root / "data"), "-o", str(out), "-m", str(model),
                         "--no-tta", "--save-prob", "--threads", threads]) == 0
        outs.append(out)
    for name in ("case_0000_mask.nii.gz", "case_0001_mask.nii.gz"):
        a, b = (read_nifti(o / name) for o in outs)
        assert a.data.tobytes() == b.data.tobytes() and a.origin_dtype == "uint8"
        src = read_nifti(root / "data" / name.replace("_mask", ""))
        assert a.dims == src.dims and np.allclose(a.affine, src.affine)
    assert (outs[0] / "case_0000_prob.nii.gz").exists()


def test_extract_reports_bad_case(workspace, tmp_path):
    root, model = workspace
    bad = tmp_path / "broken.nii.gz"
    bad.write_bytes(b"not a nifti file")
    assert cli.main(["extract", "-i", str(bad), "-o", str(tmp_path), "-m", str(model)]) == 1


def test_argument_errors_exit_2(workspace, tmp_path):
    root, model = workspace
    cases = [["extract", "-i", str(tmp_path / "nope"), "-o", str(tmp_path), "-m", str(model)],
             ["extract", "-i", str(root / "data"), "-o", str(tmp_path), "-m", str(tmp_path / "x")],
             ["extract", "-i", str(root / "data"), "-o", str(tmp_path), "-m"] + [str(model)] * 6,
             ["evaluate", "--pred", str(tmp_path / "a"), "--gt", str(root), "-o", "x.csv"],
             ["compare", str(tmp_path / "one.csv"), "-o", "x.csv"],
             ["phantom", "-o", str(tmp_path), "--n", "0"],
             ["bogus"]]
    for argv in cases:
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 2, argv


def test_evaluate_and_compare(workspace, tmp_path):
    root, _ = workspace
    data = root / "data"
    assert cli.main(["evaluate", "--pred", str(data), "--gt", str(data),
                     "-o", str(tmp_path / "self.csv"), "--sequence", "T1w"]) == 0
    rows = seg_metrics.read_metrics_csv(tmp_path / "self.csv")
    assert [r.dice_pct for r in rows] == [100.0, 100.0] and rows[0].sequence == "T1w"
    # identical metric tables: every difference is zero, so the comparison fails
    (tmp_path / "copy.csv").write_text((tmp_path / "self.csv").read_text())
    assert cli.main(["compare", str(tmp_path / "self.csv"), str(tmp_path / "copy.csv"),
                     "-o", str(tmp_path / "cmp.csv")]) == 1
    rows = [seg_metrics.CaseMetrics(f"c{i}", 90 + i, 1.0 + i, "T1w", "a") for i in range(10)]
    worse = [seg_metrics.CaseMetrics(r.case_id, r.dice_pct - 1 - 0.1 * i, r.hd95_mm + 1, "T1w", "b")
             for i, r in enumerate(rows)]
    third = [seg_metrics.CaseMetrics(r.case_id, r.dice_pct - 3, r.hd95_mm + 2, "T1w", "c")
             for r in rows]
    for name, rs in (("a", rows), ("b", worse), ("c", third)):
        seg_metrics.write_metrics_csv(rs, tmp_path / f"{name}.csv")
    for metric in ("dice", "hd95"):
        assert cli.main(["compare", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"),
                         str(tmp_path / "c.csv"), "-o", str(tmp_path / "cmp.csv"),
                         "--metric", metric]) == 0
        lines = (tmp_path / "cmp.csv").read_text().splitlines()
        assert len(lines) == 3 and lines[1].startswith("a_vs_b,")


def test_evaluate_missing_case_exits_1(workspace, tmp_path):
    root, _ = workspace
    pred = tmp_path / "pred"
    pred.mkdir()
    (pred / "case_0000_mask.nii.gz").write_bytes((root / "data" / "case_0000_mask.nii.gz").read_bytes())
    assert cli.main(["evaluate", "--pred", str(pred), "--gt", str(root / "data"),
                     "-o", str(tmp_path / "m.csv")]) == 1
    assert len(seg_metrics.read_metrics_csv(tmp_path / "m.csv")) == 1


def test_train_tiny(workspace, tmp_path):
    root, _ = workspace
    net_cfg = tmp_path / "net.cfg"
    net_cfg.write_text("depth=2\nbase_width=4\n")
    out = tmp_path / "run"
    argv = ["train", "-d", str(root / "data"), "-o", str(out), "--net-config", str(net_cfg),
            "--epochs", "1", "--batches", "1"]
    assert cli.main(argv) == 0
    ws, cfg = unet.load_model(out / "full.hdbw")
    assert cfg == SMALL
    assert (out / "full_loss.csv").read_text().startswith("epoch,mean_loss,lr")
    assert {"train.cfg", "augment.cfg", "full.cfg"} <= {p.name for p in out.iterdir()}
    assert cli.main(argv[:-4] + ["--holdout", "2"]) == 1


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "network_depth2" in out and out.strip().splitlines()[-1].startswith("PASS")
