import csv
import json

import numpy as np
import pytest

from sdkn.checkpoint import Checkpoint
from sdkn.cli import main, predict_checkpoint
from sdkn.data import read_dataset


def _write_config(path, **overrides):
    cfg = {
        "dataset": {"seed": 0, "blind_test_seed": 1,
                    "dns": {"n": 256, "viscosity": 0.3, "dt": 2.5e-5, "t_end": 0.01,
                            "spectrum": {"peak_wavenumber": 8, "u_rms": 32}},
                    "filter": {"family": "top_hat", "n_coarse": 32},
                    "sampling": "GRU1", "sample_every": 12},
        "model": {"kind": "sdkn", "hidden_dims": [4, 4], "gru": {"hidden": 3}},
        "trainer": {"epochs": 2, "batch_size": 64},
        "output_dir": str(path.parent / "run"),
    }
    for section, values in overrides.items():
        cfg[section] = {**cfg[section], **values} if isinstance(values, dict) else values
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    cfg = _write_config(root / "cfg.json")
    assert main(["generate", "--config", str(cfg), "--out", str(root)]) == 0
    return root, root / "dataset.sdknds"


def test_generate_outputs(generated, capsys):
    root, ds = generated
    side = json.loads((root / "dataset.sdknds.json").read_text())
    assert side["sampling"] == {"name": "GRU1", "n_seq": 3, "dt_seq": 0.001}
    data = read_dataset(ds)
    assert side["counts"] == {"train": len(data.train), "val": len(data.val), "test": len(data.test)}
    assert int.from_bytes(ds.read_bytes()[12:16], "little") == 3


def test_generate_counting(tmp_path):
    # 400 DNS steps + 1; GRU1 needs 80 steps of history, every 4th final time kept
    cfg = _write_config(tmp_path / "c.json",
                        dataset={"filter": {"family": "top_hat", "n_coarse": 64}, "sample_every": 4})
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    side = json.loads((tmp_path / "dataset.sdknds.json").read_text())
    n_final = len(range(80, 401, 4))
    assert sum(side["counts"].values()) == 64 * n_final


def test_train_evaluate_roundtrip(generated, tmp_path, capsys):
    root, ds = generated
    cfg = _write_config(tmp_path / "cfg.json")
    assert main(["train", "--config", str(cfg), "--dataset", str(ds), "--out", str(tmp_path)]) == 0
    ck = Checkpoint.load(tmp_path / "checkpoint.sdkncp")
    rows = list(csv.reader(open(tmp_path / "trace.csv")))
    assert rows[0] == ["epoch", "lr", "train_mse", "val_mse", "wall_seconds"]
    assert len(rows) == 3
    # re-evaluating the stored parameters reproduces the recorded validation loss
    data = read_dataset(ds)
    pred = predict_checkpoint(ck, data.val.inputs)
    from sdkn.data import Normalizer

    tn = Normalizer.from_dict(ck.normalizers["target"])
    diff = tn.transform(pred) - tn.transform(data.val.targets)
    assert float(np.sum(diff * diff) / len(diff)) == pytest.approx(float(rows[-1][3]), rel=1e-12)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["parameter_count"] == ck.params.size()

    assert main(["evaluate", "--checkpoint", str(tmp_path / "checkpoint.sdkncp"),
                 "--dataset", str(ds), "--split", "val", "--out", str(tmp_path)]) == 0
    first = (tmp_path / "eval_val.json").read_text()
    assert main(["evaluate", "--checkpoint", str(tmp_path / "checkpoint.sdkncp"),
                 "--dataset", str(ds), "--split", "val", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "eval_val.json").read_text() == first


def test_sdkn_and_ann_reports_share_dataset_id(generated, tmp_path):
    _, ds = generated
    ids = []
    for kind in ("sdkn", "ann"):
        out = tmp_path / kind
        cfg = _write_config(tmp_path / f"{kind}.json", model={"kind": kind})
        assert main(["train", "--config", str(cfg), "--dataset", str(ds), "--out", str(out)]) == 0
        assert main(["evaluate", "--checkpoint", str(out / "checkpoint.sdkncp"), "--dataset", str(ds),
                     "--out", str(out)]) == 0
        ids.append(json.loads((out / "eval_test.json").read_text()))
    assert ids[0]["dataset_id"] == ids[1]["dataset_id"]
    assert ids[0]["model_id"] != ids[1]["model_id"]


def test_krr_interpolates_training_split(tmp_path):
    cfg = _write_config(tmp_path / "k.json",
                        dataset={"dns": {"n": 256, "viscosity": 0.3, "dt": 2.5e-5, "t_end": 0.003,
                                         "spectrum": {"peak_wavenumber": 8, "u_rms": 32}},
                                 "sample_every": 40},
                        model={"kind": "krr", "kernel": {"family": "gaussian", "epsilon": 3.0}})
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    ds = tmp_path / "dataset.sdknds"
    assert main(["train", "--config", str(cfg), "--dataset", str(ds), "--out", str(tmp_path)]) == 0
    assert main(["evaluate", "--checkpoint", str(tmp_path / "checkpoint.sdkncp"), "--dataset", str(ds),
                 "--split", "train", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "eval_train.json").read_text())["mse"] < 1e-8


def test_export_activations(generated, tmp_path):
    _, ds = generated
    cfg = _write_config(tmp_path / "cfg.json")
    assert main(["train", "--config", str(cfg), "--dataset", str(ds), "--out", str(tmp_path)]) == 0
    out = tmp_path / "act"
    assert main(["export-activations", "--checkpoint", str(tmp_path / "checkpoint_init.sdkncp"),
                 "--checkpoint", str(tmp_path / "checkpoint.sdkncp"), "--dataset", str(ds),
                 "--out", str(out)]) == 0
    # GRU(3) narrows the first activation layer to 3 dims, the second has 4
    assert len(list(out.glob("layer_*_dim_*.csv"))) == 7


def test_export_architecture_mismatch(generated, tmp_path):
    _, ds = generated
    paths = []
    for dims in ([4, 4], [5]):
        d = tmp_path / str(len(dims))
        cfg = _write_config(tmp_path / f"{len(dims)}.json", model={"hidden_dims": dims})
        assert main(["train", "--config", str(cfg), "--dataset", str(ds), "--out", str(d)]) == 0
        paths.append(str(d / "checkpoint.sdkncp"))
    assert main(["export-activations", "--checkpoint", paths[0], "--checkpoint", paths[1],
                 "--dataset", str(ds)]) == 2


def test_invalid_config_exit_2(tmp_path, capsys):
    cfg = _write_config(tmp_path / "bad.json", trainer={"batch_size": -1})
    assert main(["generate", "--config", str(cfg)]) == 2
    assert "trainer.batch_size" in capsys.readouterr().err


def test_missing_file_exit_3(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "nope.json")]) == 3


def test_dimension_mismatch_exit_2(generated, tmp_path):
    _, ds = generated
    cfg = _write_config(tmp_path / "g3.json", dataset={"sampling": "GRU3"})
    assert main(["train", "--config", str(cfg), "--dataset", str(ds), "--out", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort_exit_4(generated, tmp_path, capsys):
    _, ds = generated
    cfg = _write_config(tmp_path / "n.json", model={"kind": "ann", "gru": None},
                        trainer={"learning_rate": 1e300, "epochs": 3})
    assert main(["train", "--config", str(cfg), "--dataset", str(ds), "--out", str(tmp_path)]) == 4
    assert "epoch" in capsys.readouterr().err


def test_bad_split_is_usage_error(generated, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--checkpoint", "x", "--dataset", "y", "--split", "holdout"])
    assert exc.value.code == 2
