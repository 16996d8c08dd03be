"""Command-line entry point wiring the modules into reproducible pipelines.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure.  Every command writes its fully-resolved configuration next to its
outputs.  The MFEIT_THREADS environment variable caps internal parallelism.
"""

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np

from mfeit import admm, fem, metrics
from mfeit import autodiff as ad
from mfeit import dataset as dsmod
from mfeit import network as net_mod
from mfeit.errors import ConfigError, DataFormatError, NumericalError
from mfeit.ioutil import write_csv, write_pgm

DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {
        "n_train": 200,
        "n_val": 40,
        "n_test": 40,
        "grid_h": 32,
        "grid_w": 32,
        "jacobian_level": 2,
        "background_sigma": 2.0,
        "n_electrodes": 16,
        "electrode_coverage": 1.0 / 32.0,
        "proportions": list(dsmod.CANONICAL_PROPORTIONS),
        "normalization": "td",
        "threads": 1,
    },
    "admm": {
        "beta1": 1.0,
        "beta2": 1.0,
        "gamma1": 1.0,
        "gamma2": 1.0,
        "eta": None,
        "K": 100,
        "x_update": "closed_form",
    },
    "gn": {"lambda": None},
    "network": {"C": 16, "G": 8, "K_s": 5, "arch": "both"},
    "training": {
        "batch_size": 6,
        "lr": 1e-3,
        "epochs_a": 50,
        "epochs_b": 30,
        "epochs_c": 100,
    },
}


def _merge_strict(defaults, user, path=""):
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge_strict(defaults[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path):
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            user = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top-level config must be an object")
    return _merge_strict(DEFAULT_CONFIG, user)


def _thread_cap(requested):
    cap = os.environ.get("MFEIT_THREADS")
    if cap is None:
        return requested
    try:
        cap = int(cap)
    except ValueError:
        raise ConfigError(f"MFEIT_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(requested, cap))


def _dataset_config(cfg):
    d = cfg["dataset"]
    return dsmod.DatasetConfig(
        n_train=d["n_train"],
        n_val=d["n_val"],
        n_test=d["n_test"],
        grid_h=d["grid_h"],
        grid_w=d["grid_w"],
        jacobian_level=d["jacobian_level"],
        background_sigma=d["background_sigma"],
        n_electrodes=d["n_electrodes"],
        electrode_coverage=d["electrode_coverage"],
        proportions=tuple(d["proportions"]),
        normalization=d["normalization"],
        threads=_thread_cap(d["threads"]),
    )


def _admm_params(cfg):
    a = cfg["admm"]
    return admm.AdmmParams(
        beta1=a["beta1"],
        beta2=a["beta2"],
        gamma1=a["gamma1"],
        gamma2=a["gamma2"],
        eta=a["eta"],
        K=a["K"],
    )


def _write_resolved(cfg, where, command):
    payload = {"command": command, "config": cfg}
    path = Path(where)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_net(checkpoint, grid, l):
    sidecar = Path(str(checkpoint) + ".json")
    if not Path(checkpoint).exists():
        raise DataFormatError(f"checkpoint {checkpoint} does not exist")
    meta = {}
    if sidecar.exists():
        with open(sidecar, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    net = net_mod.MmvNetParams(
        grid,
        l=meta.get("l", l),
        C=meta.get("C", 16),
        G=meta.get("G", 8),
        seed=meta.get("training_seed", 0),
        arch=meta.get("arch", "both"),
    )
    net.load_state_dict(ad.load_checkpoint(checkpoint))
    return net, meta


# ---------------------------------------------------------------------------
# commands


def cmd_gen_dataset(args):
    cfg = load_config(args.config)
    config = _dataset_config(cfg)
    data = dsmod.generate_dataset(config, seed=cfg["seed"])
    manifest = {
        "command": "gen-dataset",
        "seed": cfg["seed"],
        "config": cfg,
        "m": int(data.smat.entries.shape[0]),
        "n": int(data.smat.entries.shape[1]),
        "l": int(data.groups.l),
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dsmod.write_dataset(args.out, data, manifest=manifest)
    print(f"wrote {args.out}")
    return 0


def cmd_build_sensitivity(args):
    cfg = load_config(args.config)
    config = _dataset_config(cfg)
    geometry = fem.SensorGeometry(
        n_electrodes=config.n_electrodes,
        electrode_coverage=config.electrode_coverage,
    )
    protocol = fem.adjacent_protocol(config.n_electrodes)
    mesh = fem.build_disc_mesh(geometry, config.jacobian_level)
    grid = fem.build_pixel_grid(config.grid_h, config.grid_w)
    smat = fem.sensitivity_matrix(mesh, config.background_sigma, protocol, grid)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fem.save_sensitivity(args.out, smat)
    _write_resolved(cfg, str(args.out) + ".config.json", "build-sensitivity")
    print(f"wrote {args.out} (shape {smat.shape})")
    return 0


def cmd_reconstruct(args):
    cfg = load_config(args.config)
    data = dsmod.read_dataset(args.dataset)
    samples = data.split(args.split)
    if not 0 <= args.sample < len(samples):
        raise ConfigError(
            f"sample {args.sample} out of range for split {args.split!r} "
            f"({len(samples)} samples)"
        )
    sample = samples[args.sample]
    laplace = admm.laplacian(data.grid)
    out_dir = Path(args.render_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    net = None
    if args.method == "net":
        if args.checkpoint is None:
            raise ConfigError("method 'net' needs --checkpoint")
        net, meta = _load_net(args.checkpoint, data.grid, data.groups.l)
        K_s = args.iters if args.iters is not None else meta.get("K_s", cfg["network"]["K_s"])
    else:
        K_s = None

    admm_params = _admm_params(cfg)
    if args.method == "admm" and args.iters is not None:
        import dataclasses

        admm_params = dataclasses.replace(admm_params, K=args.iters)

    if args.dump_intermediates and args.method == "net":
        pred, intermediates = net_mod.reconstruct(
            sample.B,
            data.smat.entries,
            laplace,
            net,
            K_s,
            gn_lambda=cfg["gn"]["lambda"],
            collect=True,
        )
        history = None
        for k, z in enumerate(intermediates, start=1):
            for f in range(data.groups.l):
                write_pgm(
                    out_dir / f"iter{k:02d}_f{f + 1}.pgm",
                    data.grid.to_image(np.abs(z[:, f])),
                )
    else:
        pred, history = metrics.predict(
            args.method,
            sample.B,
            data,
            laplace,
            admm_params=admm_params,
            x_update=cfg["admm"]["x_update"],
            gn_lambda=cfg["gn"]["lambda"],
            net=net,
            K_s=K_s,
            x_true=sample.X_gt,
        )

    l = data.groups.l
    for f in range(l):
        write_pgm(out_dir / f"recon_f{f + 1}.pgm", data.grid.to_image(np.abs(pred[:, f])))
        write_pgm(
            out_dir / f"gt_f{f + 1}.pgm", data.grid.to_image(np.abs(sample.X_gt[:, f]))
        )
    np.save(out_dir / "recon.npy", data.grid.to_image(np.abs(pred)))

    p, s, r = metrics._sample_metrics(pred, sample.X_gt, data.grid)
    rows = [
        (args.method, str(f + 1), p[f], s[f], r[f]) for f in range(l)
    ]
    rows.append((args.method, "avg", float(np.mean(p)), float(np.mean(s)), float(np.mean(r))))
    write_csv(out_dir / "metrics.csv", ("method", "freq", "psnr", "ssim", "rmse"), rows)

    if args.method == "admm" and history is not None:
        write_csv(
            out_dir / "convergence.csv",
            ("method", "iteration", "rmse"),
            [("admm", i + 1, v) for i, v in enumerate(history)],
        )
    _write_resolved(cfg, out_dir / "resolved_config.json", "reconstruct")
    print(f"wrote reconstruction to {out_dir}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    if args.arch is not None:
        cfg["network"]["arch"] = args.arch
    data = dsmod.read_dataset(args.dataset)
    tc = net_mod.TrainConfig(
        batch_size=cfg["training"]["batch_size"],
        lr=cfg["training"]["lr"],
        epochs_a=cfg["training"]["epochs_a"],
        epochs_b=cfg["training"]["epochs_b"],
        epochs_c=cfg["training"]["epochs_c"],
        K_s=cfg["network"]["K_s"],
        C=cfg["network"]["C"],
        G=cfg["network"]["G"],
        arch=cfg["network"]["arch"],
        seed=cfg["seed"],
        gn_lambda=cfg["gn"]["lambda"],
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    net, logs = net_mod.train(data, tc)

    ckpt = out_dir / "net.ckpt"
    ad.save_checkpoint(ckpt, net.state_dict())
    sidecar = {
        "K_s": tc.K_s,
        "C": tc.C,
        "G": tc.G,
        "H": data.grid.H,
        "W": data.grid.W,
        "l": data.groups.l,
        "arch": tc.arch,
        "sign_convention": "negated",
        "training_seed": tc.seed,
        "parameter_count": net.trainable_count(),
    }
    with open(str(ckpt) + ".json", "w", encoding="ascii") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_csv(
        out_dir / "loss.csv",
        ("stage", "epoch", "train_loss", "val_loss", "val_rmse"),
        [
            (e["stage"], e["epoch"], e["train_loss"], e["val_loss"], e["val_rmse"])
            for e in logs
        ],
    )
    report, _ = metrics.evaluate(
        "net", data, "val", net=net, K_s=tc.K_s, gn_lambda=tc.gn_lambda
    )
    write_csv(
        out_dir / "val_metrics.csv",
        ("arch", "psnr", "ssim", "rmse"),
        [
            (
                tc.arch,
                report.average["psnr"],
                report.average["ssim"],
                report.average["rmse"],
            )
        ],
    )
    _write_resolved(cfg, out_dir / "resolved_config.json", "train")
    print(f"trained {net.trainable_count()} parameters -> {ckpt}")
    return 0


def cmd_eval(args):
    cfg = load_config(args.config)
    data = dsmod.read_dataset(args.dataset)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    net = None
    meta = {}
    if "net" in methods or args.iter_sweep:
        if args.checkpoint is None:
            raise ConfigError("evaluating 'net' needs --checkpoint")
        net, meta = _load_net(args.checkpoint, data.grid, data.groups.l)
    K_s = meta.get("K_s", cfg["network"]["K_s"])
    admm_params = _admm_params(cfg)

    metric_rows = []
    convergence_rows = []
    for method in methods:
        report, hist = metrics.evaluate(
            method,
            data,
            args.split,
            admm_params=admm_params,
            x_update=cfg["admm"]["x_update"],
            gn_lambda=cfg["gn"]["lambda"],
            net=net,
            K_s=K_s,
            iter_history=args.convergence and method in ("admm", "net"),
            max_samples=args.max_samples,
        )
        metric_rows.extend(report.rows())
        if hist:
            convergence_rows.extend(
                (method, i + 1, v) for i, v in enumerate(hist)
            )
    write_csv(
        out_dir / "metrics.csv", ("method", "freq", "psnr", "ssim", "rmse"), metric_rows
    )
    if convergence_rows:
        write_csv(
            out_dir / "convergence.csv",
            ("method", "iteration", "rmse"),
            convergence_rows,
        )

    if args.noise_sweep:
        snrs = [float(v) for v in args.noise_sweep.split(",")]
        noise_rows = []
        for method in methods:
            noise_rows.extend(
                metrics.noise_sweep(
                    method,
                    data,
                    args.split,
                    snrs,
                    seed=cfg["seed"],
                    admm_params=admm_params,
                    x_update=cfg["admm"]["x_update"],
                    gn_lambda=cfg["gn"]["lambda"],
                    net=net,
                    K_s=K_s,
                    max_samples=args.max_samples,
                )
            )
        write_csv(out_dir / "noise.csv", ("method", "snr_db", "psnr"), noise_rows)

    if args.iter_sweep:
        depths = [int(v) for v in args.iter_sweep.split(",")]
        sweep_rows = []
        for depth in depths:
            report, _ = metrics.evaluate(
                "net",
                data,
                args.split,
                net=net,
                K_s=depth,
                gn_lambda=cfg["gn"]["lambda"],
                max_samples=args.max_samples,
            )
            sweep_rows.append(
                (
                    depth,
                    report.average["psnr"],
                    report.average["ssim"],
                    report.average["rmse"],
                )
            )
        write_csv(
            out_dir / "itersweep.csv", ("iterations", "psnr", "ssim", "rmse"), sweep_rows
        )
    _write_resolved(cfg, out_dir / "resolved_config.json", "eval")
    print(f"wrote evaluation tables to {out_dir}")
    return 0


def cmd_render(args):
    if args.colormap != "gray":
        raise ConfigError(f"unsupported colormap {args.colormap!r}")
    try:
        img = np.load(args.input)
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"{args.input}: cannot read image ({exc})") from exc
    img = np.asarray(img, dtype=float)
    if img.ndim == 3:
        img = img[:, :, 0]
    if img.ndim != 2:
        raise DataFormatError(f"{args.input}: expected a 2-D image")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_pgm(args.out, img)
    print(f"wrote {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mfeit",
        description="Multi-frequency EIT workbench: simulate, reconstruct, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="simulate and write a dataset container")
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("build-sensitivity", help="write a standalone sensitivity file")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_sensitivity)

    p = sub.add_parser("reconstruct", help="reconstruct one sample and render images")
    p.add_argument("--method", required=True, choices=("gn", "admm", "net"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--render-dir", required=True)
    p.add_argument("--iters", type=int, default=None,
                   help="admm iterations or net unroll depth")
    p.add_argument("--dump-intermediates", action="store_true")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="run the three training stages")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--arch", default=None, choices=("both", "ssa_only", "lstm_only"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate methods over a split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--methods", required=True, help="comma list of gn,admm,net")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--noise-sweep", default=None, help="comma list of SNR dB values")
    p.add_argument("--iter-sweep", default=None, help="comma list of unroll depths")
    p.add_argument("--convergence", action="store_true")
    p.add_argument("--max-samples", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a float .npy image to PGM")
    p.add_argument("--input", required=True)
    p.add_argument("--colormap", default="gray")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
