"""Command-line front end: ``sdkn generate | train | evaluate | export-activations``.

Exit codes: 0 success, 2 configuration or usage error, 3 IO error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import ExperimentConfig, load_config
from .data import (Normalizer, build_dataset, burgers_dns, fit_normalizer, read_dataset,
                   read_sidecar, write_dataset)
from .exceptions import ConfigurationError, NumericalError, UsageError
from .kernels import KernelSpec
from .metrics import evaluate_predictions, export_activation_profiles, write_profiles
from .model import KrrModel, count_parameters, init_params, krr_fit
from .trainer import TrainState, predict, train

DATASET_FILE = "dataset.sdknds"
CHECKPOINT_FILE = "checkpoint.sdkncp"
INIT_CHECKPOINT_FILE = "checkpoint_init.sdkncp"


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _with_seed(cfg: ExperimentConfig, seed, section: str) -> ExperimentConfig:
    if seed is None:
        return cfg
    data = cfg.to_dict()
    if section == "dataset":
        data["dataset"]["seed"] = seed
    else:
        data["trainer"]["seed"] = seed
        data["model"]["init_seed"] = seed
    return ExperimentConfig.model_validate(data)


def _out_dir(out, cfg: ExperimentConfig | None = None, fallback=None) -> Path:
    path = Path(out) if out is not None else Path(cfg.output_dir) if cfg is not None else Path(fallback)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(config_path, out=None, seed=None) -> Path:
    cfg = _with_seed(load_config(config_path), seed, "dataset")
    d = cfg.dataset
    spec, strategy = cfg.filter_spec(), cfg.sampling_strategy()
    dns_args = (d.dns.n, d.dns.viscosity, d.dns.dt, d.dns.t_end, cfg.init_spectrum())
    spec.validate(d.dns.n)
    dns = burgers_dns(d.seed, *dns_args)
    blind = burgers_dns(d.blind_test_seed, *dns_args) if d.blind_test_seed is not None else None
    ds = build_dataset(dns, spec, strategy, d.splits, sample_every=d.sample_every,
                       target=d.target, blind_dns=blind)
    norm = fit_normalizer(ds.train)
    target_norm = Normalizer().fit(ds.train.targets)
    sidecar = {
        "dataset": cfg.to_dict()["dataset"],
        "filter": {"family": spec.family, "n_coarse": spec.n_coarse, "degree": spec.degree,
                   "cutoff": spec.cutoff_wavenumber if spec.family == "fourier_cutoff" else None},
        "sampling": {"name": strategy.name, "n_seq": strategy.n_seq, "dt_seq": strategy.dt_seq},
        "seeds": {"dns": d.seed, "blind_test": d.blind_test_seed},
        "counts": {s: len(ds.split(s)) for s in ("train", "val", "test")},
        "final_time_range": {
            s: [float(ds.split(s).final_time.min()), float(ds.split(s).final_time.max())]
            if len(ds.split(s)) else None
            for s in ("train", "val", "test")
        },
        "normalizer": norm.to_dict(),
        "target_normalizer": target_norm.to_dict(),
    }
    path = write_dataset(_out_dir(out, cfg) / DATASET_FILE, ds, sidecar)
    counts = sidecar["counts"]
    print(f"wrote {path}: train={counts['train']} val={counts['val']} test={counts['test']} "
          f"(N_seq={strategy.n_seq}, dt_seq={strategy.dt_seq:g})")
    return path


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _model_inputs(inputs: np.ndarray, sequential: bool) -> np.ndarray:
    return inputs if sequential else inputs.reshape(len(inputs), -1)


def _load_training_data(dataset_path, normalizers: dict):
    ds = read_dataset(dataset_path)
    norm = Normalizer.from_dict(normalizers["input"])
    tnorm = Normalizer.from_dict(normalizers["target"]) if normalizers.get("target") else None
    return ds, norm, tnorm


def cmd_train(config_path, dataset_path, out=None, checkpoint=None, seed=None) -> Path:
    cfg = _with_seed(load_config(config_path), seed, "trainer")
    out_dir = _out_dir(out, cfg)
    sidecar = read_sidecar(dataset_path)
    normalizers = {"input": sidecar["normalizer"],
                   "target": sidecar["target_normalizer"] if cfg.model.normalize_targets else None}
    ds, norm, tnorm = _load_training_data(dataset_path, normalizers)
    n_seq, d_in = ds.train.inputs.shape[1:]
    d_out = ds.train.targets.shape[1]
    if n_seq != cfg.sampling_strategy().n_seq:
        raise ConfigurationError(
            f"dataset has N_seq={n_seq} but config sampling {cfg.dataset.sampling} needs "
            f"{cfg.sampling_strategy().n_seq}"
        )
    data_shape = {"n_seq": n_seq, "d_in": d_in, "d_out": d_out}
    sequential = cfg.model.kind != "krr" and cfg.model.gru is not None
    X = _model_inputs(norm.transform(ds.train.inputs), sequential)
    Y = tnorm.transform(ds.train.targets) if tnorm is not None else ds.train.targets
    val = None
    if len(ds.val):
        Yv = tnorm.transform(ds.val.targets) if tnorm is not None else ds.val.targets
        val = (_model_inputs(norm.transform(ds.val.inputs), sequential), Yv)
    config_snapshot = cfg.to_dict()
    start = time.perf_counter()

    if cfg.model.kind == "krr":
        krr = krr_fit(cfg.kernel_spec(), X, Y, cfg.model.krr_lambda)
        ckpt = Checkpoint(config_snapshot, "krr",
                          _krr_params(krr), data_shape=data_shape, normalizers=normalizers,
                          kernel={"family": krr.kernel.family, "epsilon": krr.kernel.epsilon,
                                  "lambda": krr.regularization})
        n_params = krr.coefficients.size
        trace = []
    else:
        graph = cfg.build_graph(d_in if sequential else n_seq * d_in, d_out)
        tcfg = cfg.train_config()

        def snapshot(params, state):
            return Checkpoint(config_snapshot, cfg.model.kind, params, graph, data_shape,
                              normalizers, adam=state.adam, epoch=state.epoch,
                              rng_state=state.rng.bit_generator.state, trace=list(state.trace))

        if checkpoint is not None:
            prev = Checkpoint.load(checkpoint)
            if prev.graph != graph or prev.data_shape != data_shape:
                raise ConfigurationError("checkpoint architecture does not match the config/dataset")
            params = prev.params
            rng = np.random.default_rng()
            rng.bit_generator.state = prev.rng_state
            state = TrainState(prev.adam, rng, prev.epoch, list(prev.trace))
        else:
            params = init_params(graph, cfg.model.init_seed, X)
            state = TrainState.fresh(params, tcfg)
            snapshot(params, state).save(out_dir / INIT_CHECKPOINT_FILE)

        def on_epoch(st):
            every = cfg.trainer.checkpoint_every
            if every and st.epoch % every == 0:
                snapshot(params, st).save(out_dir / f"checkpoint_epoch_{st.epoch}.sdkncp")

        state = train(graph, params, X, Y, tcfg, val=val, state=state, on_epoch=on_epoch)
        ckpt = snapshot(params, state)
        n_params = count_parameters(graph)
        trace = state.trace

    ckpt_path = ckpt.save(out_dir / CHECKPOINT_FILE)
    with open(out_dir / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_mse", "val_mse", "wall_seconds"])
        for r in trace:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_mse),
                        "" if r.val_mse is None else repr(r.val_mse), f"{r.wall_seconds:.6f}"])
    manifest = {
        "model_kind": cfg.model.kind,
        "parameter_count": int(n_params),
        "seeds": {"init": cfg.model.init_seed, "trainer": cfg.trainer.seed,
                  "dataset": sidecar["seeds"]},
        "dataset_id": _digest(dataset_path),
        "epochs": cfg.trainer.epochs if cfg.model.kind != "krr" else 0,
        "final_train_mse": trace[-1].train_mse if trace else None,
        "wall_seconds": round(time.perf_counter() - start, 6),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {ckpt_path} ({n_params} parameters)")
    return ckpt_path


def _krr_params(krr: KrrModel):
    from .autodiff import ParamStore

    coeffs = krr.coefficients.reshape(len(krr.coefficients), -1)
    return ParamStore({"centers": krr.centers, "coefficients": coeffs})


# ---------------------------------------------------------------------------
# evaluate / export
# ---------------------------------------------------------------------------


def predict_checkpoint(ckpt: Checkpoint, inputs: np.ndarray) -> np.ndarray:
    """Predictions in physical target units for raw dataset inputs."""
    norm = Normalizer.from_dict(ckpt.normalizers["input"])
    X = norm.transform(inputs)
    if ckpt.kind == "krr":
        k = ckpt.kernel
        model = KrrModel(KernelSpec(k["family"], k["epsilon"]), ckpt.params["centers"],
                         ckpt.params["coefficients"], k["lambda"])
        out = model.predict(X.reshape(len(X), -1))
    else:
        out = predict(ckpt.graph, ckpt.params, _model_inputs(X, ckpt.graph.is_sequential))
    if ckpt.normalizers.get("target"):
        out = Normalizer.from_dict(ckpt.normalizers["target"]).inverse_transform(out)
    return out


def _check_compatible(ckpt: Checkpoint, ds):
    n_seq, d_in = ds.train.inputs.shape[1:]
    shape = {"n_seq": n_seq, "d_in": d_in, "d_out": ds.train.targets.shape[1]}
    if ckpt.data_shape != shape:
        raise ConfigurationError(f"checkpoint expects data {ckpt.data_shape}, dataset has {shape}")


def cmd_evaluate(checkpoint, dataset_path, split="test", out=None) -> Path:
    ckpt = Checkpoint.load(checkpoint)
    ds = read_dataset(dataset_path)
    _check_compatible(ckpt, ds)
    part = ds.split(split)
    if len(part) == 0:
        raise UsageError(f"split {split!r} is empty")
    report = evaluate_predictions(predict_checkpoint(ckpt, part.inputs), part.targets,
                                  model_id=_digest(checkpoint), dataset_id=_digest(dataset_path),
                                  split=split)
    path = _out_dir(out, fallback=Path(checkpoint).parent) / f"eval_{split}.json"
    path.write_text(report.to_json())
    cc = report.cross_correlation
    print(f"{split}: mse={report.mse:.6g} cross_correlation="
          f"{'undefined' if cc is None else format(cc, '.6f')}")
    return path


def cmd_export_activations(checkpoint_before, checkpoint_after, dataset_path, out=None) -> list[Path]:
    before = Checkpoint.load(checkpoint_before)
    after = Checkpoint.load(checkpoint_after)
    if before.graph is None or before.graph != after.graph:
        raise ConfigurationError("checkpoints do not share a network architecture")
    ds = read_dataset(dataset_path)
    _check_compatible(after, ds)
    X = Normalizer.from_dict(after.normalizers["input"]).transform(ds.train.inputs)
    X = _model_inputs(X, after.graph.is_sequential)
    profiles = export_activation_profiles(after.graph, before.params, after.params, X)
    out_dir = _out_dir(out, fallback=Path(checkpoint_after).parent / "activations")
    paths = write_profiles(profiles, out_dir)
    print(f"wrote {len(paths)} activation profiles to {out_dir}")
    return paths


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdkn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="run the DNS and write a closure dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("evaluate", help="write an evaluation report for one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out")

    p = sub.add_parser("export-activations", help="tabulate activation profiles before/after training")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="give twice: the checkpoint before and after training")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            cmd_generate(args.config, args.out, args.seed)
        elif args.command == "train":
            cmd_train(args.config, args.dataset, args.out, args.checkpoint, args.seed)
        elif args.command == "evaluate":
            cmd_evaluate(args.checkpoint, args.dataset, args.split, args.out)
        else:
            if len(args.checkpoint) != 2:
                raise UsageError("export-activations needs --checkpoint BEFORE --checkpoint AFTER")
            cmd_export_activations(*args.checkpoint, args.dataset, args.out)
    except (ConfigurationError, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return 4
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
