"""Config-driven command-line entry point.

Subcommands: train, eval, equivariance, redundancy, bench, selftest.
Configuration is a flat key=value file merged with repeated
``--set key=value`` overrides; every CSV artifact starts with the full
resolved configuration as ``# key=value`` comment lines.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import fields

import numpy as np

from . import analysis as A
from . import data as D
from . import gconv as G
from . import kernelnet as kn
from . import lie
from . import model as M
from . import tensor as T


class ConfigError(ValueError):
    """Invalid or unknown configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration schema: flat keys with type-carrying defaults


def _dataclass_defaults(cls) -> dict:
    return {f.name: f.default for f in fields(cls)}


DEFAULTS: dict = {
    **_dataclass_defaults(M.GCNNConfig),
    **_dataclass_defaults(M.TrainConfig),  # shared 'seed' is the master seed
    "dataset": "digits",
    "n_train": 512,
    "n_eval": 256,
    "out": "runs/exp",
    "checkpoint": "",
    "transform": "rotation",
    "n_steps": 100,
    "n_h": 8,
    "k": 5,
    "c_in": 1,
    "c_out": 1,
    "batch": 1,
    "height": 16,
    "width": 16,
    "repeats": 5,
    "factorizations": "Nonseparable,Separable",
}

_NONE_OK = {"scale_support"}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, raw: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key '{key}'")
    proto = DEFAULTS[key]
    raw = raw.strip()
    try:
        if key in _NONE_OK and raw.lower() in ("none", "null", ""):
            return None
        if isinstance(proto, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(proto, int):
            return int(raw)
        if isinstance(proto, float):
            return float(raw)
        if isinstance(proto, tuple):
            return tuple(int(part) for part in raw.split(",") if part.strip())
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for config key '{key}': {raw!r}") from None


def _parse_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: '{path}'")
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            out[key.strip()] = _convert(key.strip(), raw)
    return out


def resolve_config(args) -> dict:
    """defaults < config file < --set overrides < --out/--seed flags."""
    resolved = dict(DEFAULTS)
    if args.config:
        resolved.update(_parse_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        resolved[key.strip()] = _convert(key.strip(), raw)
    if args.out is not None:
        resolved["out"] = args.out
    if args.seed is not None:
        resolved["seed"] = int(args.seed)
    return resolved


def _header(resolved: dict, command: str) -> dict:
    head = {"command": command}
    head.update({k: resolved[k] for k in sorted(resolved)})
    return head


def _gcnn_config(resolved: dict) -> M.GCNNConfig:
    kwargs = {f.name: resolved[f.name] for f in fields(M.GCNNConfig)}
    try:
        return M.GCNNConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _train_config(resolved: dict) -> M.TrainConfig:
    kwargs = {f.name: resolved[f.name] for f in fields(M.TrainConfig)}
    try:
        return M.TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# dataset construction

_SOURCES = ("digits", "bars", "mnist")
_VARIANTS = {"": None, "rotated": D.make_rotated, "scaled": D.make_scaled,
             "rot_scaled": D.make_rot_scaled}


def _split_dataset_name(name: str) -> tuple[str, str]:
    for source in _SOURCES:
        if name == source:
            return source, ""
        prefix = source + "_"
        if name.startswith(prefix) and name[len(prefix):] in _VARIANTS:
            return source, name[len(prefix):]
    raise ConfigError(
        f"invalid value for config key 'dataset': {name!r} "
        f"(sources {_SOURCES}, variants rotated/scaled/rot_scaled)"
    )


def _mnist_base(n_train: int, n_eval: int) -> tuple[D.Dataset, D.Dataset]:
    directory = os.environ.get("LIEGCONV_MNIST", "")
    if not directory:
        raise RuntimeError(
            "dataset 'mnist' needs the LIEGCONV_MNIST environment variable "
            "to point at a directory with the four IDX files"
        )
    raw = D.load_mnist(directory)
    train = D.Dataset(
        D.normalize_images(raw["train_images"][:n_train]),
        raw["train_labels"][:n_train],
        split="train",
        provenance={"source": "mnist"},
    )
    ev = D.Dataset(
        D.normalize_images(raw["test_images"][:n_eval]),
        raw["test_labels"][:n_eval],
        split="val",
        provenance={"source": "mnist"},
    )
    return train, ev


def build_datasets(resolved: dict) -> tuple[D.Dataset, D.Dataset]:
    source, variant = _split_dataset_name(resolved["dataset"])
    n_train, n_eval = resolved["n_train"], resolved["n_eval"]
    seed = resolved["seed"]
    if source == "digits":
        train = D.synth_digits(n_train, seed)
        ev = D.synth_digits(n_eval, seed + 1)
    elif source == "bars":
        train = D.synth_oriented_bars(n_train, seed)
        ev = D.synth_oriented_bars(n_eval, seed + 1)
    else:
        train, ev = _mnist_base(n_train, n_eval)
    transform = _VARIANTS[variant]
    if transform is not None:
        train = transform(train, seed + 2)
        ev = transform(ev, seed + 3)
    train.split, ev.split = "train", "val"
    return train, ev


# ---------------------------------------------------------------------------
# subcommands


def _checkpoint_path(resolved: dict) -> str:
    return resolved["checkpoint"] or os.path.join(resolved["out"], "checkpoint.bin")


def _outdir(resolved: dict) -> str:
    os.makedirs(resolved["out"], exist_ok=True)
    return resolved["out"]


def cmd_train(resolved: dict) -> int:
    out = _outdir(resolved)
    train_set, val_set = build_datasets(resolved)
    model = M.build_model(_gcnn_config(resolved))
    history = M.train(model, _train_config(resolved), train_set, val_set)
    M.save_checkpoint(_checkpoint_path(resolved), model)
    rows = [
        (h["epoch"], repr(h["train_loss"]),
         repr(h["val_accuracy"]) if "val_accuracy" in h else "")
        for h in history  # wall-clock stays out so reruns are identical
    ]
    A.write_csv(
        os.path.join(out, "metrics.csv"),
        ("epoch", "train_loss", "val_accuracy"),
        rows,
        header=_header(resolved, "train"),
    )
    last_acc = next(
        (h["val_accuracy"] for h in reversed(history) if "val_accuracy" in h), None
    )
    print(f"trained {resolved['epochs']} epochs; checkpoint {_checkpoint_path(resolved)}")
    if last_acc is not None:
        print(f"final val accuracy {last_acc:.4f}")
    return 0


def cmd_eval(resolved: dict) -> int:
    model = M.load_checkpoint(_checkpoint_path(resolved))
    _, val_set = build_datasets(resolved)
    acc = M.evaluate(model, val_set)
    print(f"accuracy {acc:.4f} on {len(val_set)} samples ({resolved['dataset']})")
    return 0


def cmd_equivariance(resolved: dict) -> int:
    out = _outdir(resolved)
    model = M.load_checkpoint(_checkpoint_path(resolved))
    _, val_set = build_datasets(resolved)
    curve = A.equivariance_sweep(
        model, val_set, transform=resolved["transform"], n_steps=resolved["n_steps"]
    )
    A.write_csv(
        os.path.join(out, "equivariance.csv"),
        A.EQUIVARIANCE_FIELDS,
        A.sweep_rows(curve, resolved["transform"]),
        header=_header(resolved, "equivariance"),
    )
    errors = [e for _, e in curve]
    print(f"swept {len(curve)} steps; error min {min(errors):.4f} max {max(errors):.4f}")
    return 0


def cmd_redundancy(resolved: dict) -> int:
    out = _outdir(resolved)
    trained = M.load_checkpoint(_checkpoint_path(resolved))
    init = M.build_model(trained.cfg)
    report = A.model_redundancy(init, "init")
    A.model_redundancy(trained, "trained", report)
    A.write_csv(
        os.path.join(out, "redundancy.csv"),
        A.REDUNDANCY_FIELDS,
        report.rows(),
        header=_header(resolved, "redundancy"),
    )
    for layer in A.GCONV_LAYERS:
        print(
            f"{layer}: first-PC ratio {report.mean_ratio('init', layer):.4f} -> "
            f"{report.mean_ratio('trained', layer):.4f}"
        )
    return 0


def cmd_bench(resolved: dict) -> int:
    out = _outdir(resolved)
    kinds = [k.strip() for k in resolved["factorizations"].split(",") if k.strip()]
    configs = [
        {
            "factorization": kind,
            "n_h": resolved["n_h"],
            "k": resolved["k"],
            "c_in": resolved["c_in"],
            "c_out": resolved["c_out"],
            "batch": resolved["batch"],
            "height": resolved["height"],
            "width": resolved["width"],
        }
        for kind in kinds
    ]
    try:
        rows = A.benchmark(configs, repeats=resolved["repeats"], seed=resolved["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    A.write_csv(
        os.path.join(out, "bench.csv"),
        A.BENCH_FIELDS,
        rows,
        header=_header(resolved, "bench"),
    )
    for row in rows:
        print(
            f"{row['factorization']:>13} |H|={row['n_h']} k={row['k']}: "
            f"{row['macs']} macs, {row['seconds'] * 1e3:.2f} ms"
        )
    return 0


# ---------------------------------------------------------------------------
# selftest battery


def _check_group_axioms():
    rng = np.random.default_rng(0)
    for tag in ("SE2", "R2xRplus", "Sim2"):
        e = lie.identity(tag)
        for _ in range(25):
            g = lie.exp_map(tag, rng.uniform(-1.5, 1.5, lie.algebra_dim(tag)))
            h = lie.exp_map(tag, rng.uniform(-1.5, 1.5, lie.algebra_dim(tag)))
            k = lie.exp_map(tag, rng.uniform(-1.5, 1.5, lie.algebra_dim(tag)))
            gi = lie.product(g, lie.inverse(g))
            assert np.allclose(gi.translation, e.translation, atol=1e-12)
            assert np.allclose(lie.linear_part(gi), lie.linear_part(e), atol=1e-12)
            lhs = lie.product(lie.product(g, h), k)
            rhs = lie.product(g, lie.product(h, k))
            p = rng.standard_normal(2)
            assert np.allclose(
                lie.act_on_point(lhs, p), lie.act_on_point(rhs, p), atol=1e-10
            )
            assert lie.determinant(g) > 0


def _check_factorization_equivalence():
    rng = np.random.default_rng(1)
    grids = G.make_h_grids("SE2", n_rot=3)
    f = G.GFeatureMap(T.constant(rng.standard_normal((1, 2, 3, 6, 6))), grids)
    for kind in ("Separable", "Gseparable", "DGseparable", "Dseparable"):
        bundle = kn.make_kernel_bundle(kind, "SE2", 2, 2, hidden=(8,), rng=rng)
        fast = G.separable_group_conv(f, bundle, grids, stencil=3)
        sk = kn.sample_kernel_grid(bundle, 3, grids, grids)
        with T.suspend_macs():
            dense = kn.materialize_full_kernel(sk)
        ref = G.group_conv_dense(f, dense, grids, kn.h_determinants(grids))
        err = np.abs(fast.data.data - ref.data.data).max()
        assert err < 1e-10, f"{kind} deviates by {err}"


def _check_exact_c4_equivariance():
    rng = np.random.default_rng(2)
    grids = G.make_h_grids("SE2", n_rot=4)
    bundle = kn.make_kernel_bundle("lift", "SE2", 1, 2, hidden=(8,), rng=rng)
    x = rng.standard_normal((1, 1, 8, 8))
    out = G.lift_conv(T.constant(x), bundle, grids, 3, padding="circular").data.data
    xr = np.rot90(x, k=3, axes=(-2, -1))
    out_r = G.lift_conv(T.constant(xr), bundle, grids, 3, padding="circular").data.data
    moved = np.roll(np.rot90(out, k=3, axes=(-2, -1)), 1, axis=2)
    assert np.abs(out_r - moved).max() < 1e-12


def _check_gradients():
    rng = np.random.default_rng(3)
    grids = G.make_h_grids("SE2", n_rot=2)
    bundle = kn.make_kernel_bundle("Separable", "SE2", 1, 1, hidden=(4,), rng=rng)
    x = T.parameter(rng.standard_normal((1, 1, 2, 4, 4)))

    def loss():
        f = G.GFeatureMap(x, grids)
        return T.reduce_sum(G.separable_group_conv(f, bundle, grids, stencil=3).data)

    worst = T.grad_check(loss, [x, *bundle.parameters().values()], max_entries=4,
                         rng=np.random.default_rng(4))
    assert worst < 1e-4, f"gradient mismatch {worst}"


def _check_cost_anchors():
    non = G.flop_estimate("Nonseparable", n_h_in=8, n_h_out=8, stencil=5)
    sep = G.flop_estimate("Separable", n_h_in=8, n_h_out=8, stencil=5)
    assert non.macs == 1600 and sep.macs == 264
    assert abs(sep.macs / non.macs - 0.165) < 1e-12
    rows = A.benchmark(
        [{"factorization": "Separable", "n_h": 2, "k": 3, "c_in": 2, "c_out": 2,
          "height": 4, "width": 4, "hidden": (4,)}],
        repeats=1, warmup=0,
    )
    est = G.flop_estimate("Separable", c_in=2, c_out=2, n_h_in=2, n_h_out=2,
                          stencil=3, height=4, width=4)
    assert rows[0]["macs"] == est.macs


def _check_data_roundtrip():
    ds = D.synth_digits(4, seed=0)
    assert np.array_equal(D.rotate_images(ds.images, 0.0), ds.images)
    assert np.array_equal(D.scale_images(ds.images, 1.0), ds.images)
    twice = D.rotate_images(D.rotate_images(ds.images, math.pi), math.pi)
    assert np.abs(twice - ds.images).max() < 0.1


def _check_redundancy_oracles():
    rng = np.random.default_rng(5)
    k = rng.standard_normal((3, 3))
    assert abs(A.pca_redundancy(np.stack([k, 2 * k])) - 1.0) < 1e-12
    assert A.kh_variance(np.array([-1.0, 1.0]))["mean"] == 1.0


SELFTEST_CHECKS = (
    ("group-axioms", _check_group_axioms),
    ("factorization-equivalence", _check_factorization_equivalence),
    ("exact-c4-equivariance", _check_exact_c4_equivariance),
    ("gradients", _check_gradients),
    ("cost-anchors", _check_cost_anchors),
    ("data-roundtrip", _check_data_roundtrip),
    ("redundancy-oracles", _check_redundancy_oracles),
)


def cmd_selftest(resolved: dict) -> int:
    passed = failed = 0
    for name, fn in SELFTEST_CHECKS:
        try:
            fn()
        except Exception as exc:  # report every failure, keep going
            failed += 1
            print(f"FAIL {name}: {exc}")
        else:
            passed += 1
            print(f"ok   {name}")
    print(f"selftest: {passed} passed, {failed} failed")
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------------------
# entry point


_DISPATCH = {
    "train": cmd_train,
    "eval": cmd_eval,
    "equivariance": cmd_equivariance,
    "redundancy": cmd_redundancy,
    "bench": cmd_bench,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="liegconv",
        description="Group-equivariant convolution experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _DISPATCH:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", default=None, type=int, help="master seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        resolved = resolve_config(args)
        return _DISPATCH[args.command](resolved)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
