"""Command-line front end and run-directory persistence.

Commands: ``train``, ``generate``, ``eval``, ``audit``, and the accountant
subcommands ``accountant report`` / ``accountant calibrate``. Every command
writes into a fresh directory, never mutates its inputs, and exits 0 on
success or 1 with a diagnostic line on stderr. Given the same config and
seed, every emitted checkpoint, log, and report is byte-identical across
reruns; manifests additionally carry wall-clock timestamps and content
digests of every file in the run directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import audit as au
from . import data as D
from . import dp as dpmod
from . import fedgan as fg
from . import metrics as M
from .checkpoint import read_checkpoint, write_checkpoint
from .config import ConfigError, RunConfig, load_config
from .rng import RngStream

__all__ = ["main"]


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run-directory plumbing
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fresh_dir(path: str) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        raise CliError(f"output directory {out} exists and is not empty")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _inventory(run_dir: Path) -> dict[str, str]:
    out = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.yaml":
            out[str(p.relative_to(run_dir))] = _sha256(p)
    return out


def _write_manifest(run_dir: Path, body: dict) -> None:
    body = dict(body)
    body["manifest_version"] = 1
    body["package_version"] = __version__
    body["inventory"] = _inventory(run_dir)
    with open(run_dir / "manifest.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(body, f, sort_keys=True)


def _read_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.yaml"
    if not path.exists():
        raise CliError(f"{run_dir} has no manifest.yaml")
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f)


def _verify_digest(run_dir: Path, manifest: dict, rel: str) -> None:
    want = manifest.get("inventory", {}).get(rel)
    if want is None:
        raise CliError(f"{rel} is not in the run manifest inventory")
    got = _sha256(run_dir / rel)
    if got != want:
        raise CliError(f"{rel} digest mismatch: file was modified after the run")


def _float_repr(v) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_partitioned(cfg: RunConfig):
    ds = D.load_csv(cfg.dataset_path, cfg.schema)
    enc = D.fit_encoder(ds)
    parts = fg.partition(D.encode(ds, enc), cfg.split)
    return ds, enc, parts


def _resolve_dp(cfg: RunConfig, n_rows: int):
    if cfg.dp is None:
        return None, None
    gamma = cfg.gan.batch_size / n_rows
    steps = cfg.gan.epochs * cfg.gan.disc_steps
    sigma = dpmod.calibrate(cfg.dp.epsilon, cfg.dp.delta, gamma, steps)
    report = dpmod.budget_report(sigma, gamma, steps, cfg.dp.delta)
    dp_cfg = dpmod.DpConfig(
        clip=cfg.dp.clip,
        sigma=sigma,
        epsilon=cfg.dp.epsilon,
        delta=cfg.dp.delta,
        sampling_rate=gamma,
        steps=steps,
    )
    return dp_cfg, report


def _checkpoint_models(model: fg.TrainedModel, best: bool) -> dict:
    gens = model.generator_set(best=best)
    return {f"g{i}": g for i, g in enumerate(gens)}


def _write_encoder(run_dir: Path, enc: D.Encoder) -> None:
    body = {
        "mu": [float(v) for v in enc.mu],
        "sigma": [float(v) for v in enc.sigma],
    }
    with open(run_dir / "encoder.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(body, f, sort_keys=True)


def _read_encoder(run_dir: Path, schema: D.Schema) -> D.Encoder:
    with open(run_dir / "encoder.yaml", "r", encoding="utf-8") as f:
        body = yaml.safe_load(f)
    spans, at = [], 0
    for attr in schema.attributes:
        width = len(attr.categories) if attr.kind == "categorical" else 1
        spans.append((at, width))
        at += width
    return D.Encoder(
        schema,
        tuple(float(v) for v in body["mu"]),
        tuple(float(v) for v in body["sigma"]),
        tuple(spans),
        at,
    )


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    ds, enc, parts = _load_partitioned(cfg)
    dp_cfg, dp_report = _resolve_dp(cfg, ds.n_rows)
    run_dir = _fresh_dir(cfg.output_dir)
    shutil.copyfile(args.config, run_dir / "config.yaml")
    (run_dir / "checkpoints").mkdir()
    (run_dir / "logs").mkdir()
    (run_dir / "reports").mkdir()
    started = _utc_now()
    manifest = {
        "status": "running",
        "created_utc": started,
        "variant": cfg.variant,
        "seed": cfg.seed,
    }
    if dp_report is not None:
        manifest["dp"] = {
            "clip": cfg.dp.clip,
            "sigma": dp_report.sigma,
            "gamma": dp_report.gamma,
            "steps": dp_report.steps,
            "delta": dp_report.delta,
            "epsilon_target": cfg.dp.epsilon,
            "epsilon_external": dp_report.epsilon_external,
            "alpha_external": dp_report.alpha_external,
            "epsilon_internal": dp_report.epsilon_internal,
            "alpha_internal": dp_report.alpha_internal,
        }
    try:
        model = fg.train(
            cfg.variant, parts, cfg.gan, dp_cfg, RngStream(cfg.seed, "train")
        )
    except Exception as exc:
        manifest["status"] = "failed"
        manifest["error"] = str(exc)
        manifest["completed_utc"] = _utc_now()
        _write_manifest(run_dir, manifest)
        raise
    model.log.to_csv(run_dir / "logs" / "train_log.csv")
    write_checkpoint(
        run_dir / "checkpoints" / "final.ckpt", _checkpoint_models(model, best=False)
    )
    write_checkpoint(
        run_dir / "checkpoints" / "best.ckpt", _checkpoint_models(model, best=True)
    )
    _write_encoder(run_dir, enc)
    manifest["status"] = "completed"
    manifest["completed_utc"] = _utc_now()
    manifest["best_epoch"] = model.log.best_epoch
    manifest["best_fd"] = float(model.log.best_fd)
    _write_manifest(run_dir, manifest)
    print(run_dir)
    return 0


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _rebuild_heads(cfg: RunConfig, enc: D.Encoder):
    per_party = fg.party_blocks(enc, cfg.split)
    if cfg.variant == fg.CENTRAL:
        blocks = [fg.merge_blocks(per_party)]
    else:
        blocks = list(per_party)
    return [
        fg.OutputHead(b, cfg.gan.gumbel_temperature, cfg.gan.numeric_activation)
        for b in blocks
    ]


def cmd_generate(args) -> int:
    run_dir = Path(args.run)
    manifest = _read_manifest(run_dir)
    if manifest.get("status") != "completed":
        raise CliError(f"run {run_dir} did not complete (status: {manifest.get('status')})")
    cfg = load_config(run_dir / "config.yaml")
    which = "best" if args.best else "final"
    rel = f"checkpoints/{which}.ckpt"
    _verify_digest(run_dir, manifest, rel)
    _verify_digest(run_dir, manifest, "encoder.yaml")
    models = read_checkpoint(run_dir / rel)
    enc = _read_encoder(run_dir, cfg.schema)
    heads = _rebuild_heads(cfg, enc)
    gens = [models[f"g{i}"] for i in range(len(heads))]
    synth = fg.generate_from(
        gens, heads, enc, cfg.gan.latent_dim, args.n,
        RngStream(args.seed, "generate"),
    )
    D.decode(synth).to_csv(args.out)
    print(args.out)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    target = args.target or cfg.schema.target
    if target is None:
        raise CliError("no target attribute: pass --target or set schema.target")
    if target not in cfg.schema.names:
        raise CliError(f"target attribute {target!r} is not in the schema")
    real = D.load_csv(args.real, cfg.schema)
    synth = D.load_csv(args.synth, cfg.schema)
    enc = D.fit_encoder(real)
    fd = M.frechet_distance(
        M.dataset_stats(D.encode(real, enc)),
        M.dataset_stats(D.encode(synth, enc)),
    )
    report = M.utility_fourway(real, synth, target, RngStream(args.seed, "eval"))
    out = _fresh_dir(args.out)
    body = {
        "frechet_distance": float(fd),
        "total_difference": report.total_difference,
        "settings": {
            name: {"accuracy": acc, "f1": f1}
            for name, acc, f1 in report.as_rows()
        },
        "target": target,
        "seed": args.seed,
    }
    with open(out / "report.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(body, f, sort_keys=True)
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as f:
        f.write("setting,accuracy,f1\n")
        for name, acc, f1 in report.as_rows():
            f.write(f"{name},{_float_repr(acc)},{_float_repr(f1)}\n")
        f.write(f"FD,{_float_repr(fd)},\n")
        f.write(f"TOTAL_DIFFERENCE,{_float_repr(report.total_difference)},\n")
    _write_manifest(out, {"status": "completed", "created_utc": _utc_now(),
                          "completed_utc": _utc_now(), "seed": args.seed})
    print(out)
    return 0


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------

def _select_target(ds: D.TabularDataset, spec, override_select, override_target):
    if override_target is not None:
        return int(override_target)
    select = override_select or spec.select
    if select == "outlier":
        idx, _, _ = au.find_vulnerable_outlier(ds)
        return idx
    if select == "nn":
        return au.find_vulnerable_nn(ds)
    if spec.target is None:
        raise CliError("audit target not determined")
    return int(spec.target)


def _write_feature_csv(path, x: np.ndarray, labels: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        cols = ",".join(f"f{i}" for i in range(x.shape[1]))
        f.write(f"label,{cols}\n")
        for row, y in zip(x, labels):
            f.write(str(int(y)) + "," + ",".join(_float_repr(v) for v in row) + "\n")


def cmd_audit(args) -> int:
    cfg = load_config(args.config)
    if cfg.audit is None:
        raise CliError("config has no audit section")
    spec = cfg.audit
    ds = D.load_csv(cfg.dataset_path, cfg.schema)
    if spec.rows is not None:
        if spec.rows > ds.n_rows:
            raise CliError(f"audit.rows={spec.rows} exceeds dataset size {ds.n_rows}")
        ds = D.subset(ds, np.arange(spec.rows))
    target = _select_target(ds, spec, args.select, args.target)
    dp_cfg, dp_report = _resolve_dp(cfg, ds.n_rows)
    acfg = au.AuditConfig(
        shadows=spec.shadows,
        repeats=spec.repeats,
        feature_kinds=spec.feature_kinds,
        train_count=spec.train_count,
        test_count=spec.test_count,
        variant=cfg.variant,
        gan=cfg.gan,
        dp=dp_cfg,
        synthetic_rows=spec.synthetic_rows,
    )
    out = _fresh_dir(args.out if args.out else cfg.output_dir)
    root = RngStream(cfg.seed, "audit")
    results = {}
    for mode in spec.modes:
        trainer = (
            au.train_shadows_assd if mode == "assd" else au.train_shadows_asif
        )
        sets = trainer(ds, target, cfg.split, acfg, root.child(mode))
        report = au.run_attack(sets, acfg, root.child(mode, "attack"), target)
        results[mode] = report
        for kind in acfg.feature_kinds:
            _write_feature_csv(
                out / f"features_{mode}_{kind}.csv",
                sets.features[kind],
                sets.labels,
            )
    body = {
        "target_index": int(target),
        "shadows_per_world": spec.shadows,
        "repeats": spec.repeats,
        "dp_enabled": dp_cfg is not None,
        "results": {
            mode: {
                kind: {
                    "auc_mean": rep.auc_mean[kind],
                    "auc_std": rep.auc_std[kind],
                }
                for kind in rep.auc_mean
            }
            for mode, rep in results.items()
        },
    }
    if dp_report is not None:
        body["dp"] = {
            "sigma": dp_report.sigma,
            "epsilon_external": dp_report.epsilon_external,
        }
    with open(out / "audit_report.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(body, f, sort_keys=True)
    _write_manifest(out, {"status": "completed", "created_utc": _utc_now(),
                          "completed_utc": _utc_now(), "seed": cfg.seed})
    print(out)
    return 0


# ---------------------------------------------------------------------------
# accountant
# ---------------------------------------------------------------------------

def cmd_accountant_report(args) -> int:
    if not 0 <= args.gamma <= 1:
        raise CliError(f"gamma {args.gamma} outside [0, 1]")
    rep = dpmod.budget_report(args.sigma, args.gamma, args.steps, args.delta)
    print(f"sigma={rep.sigma} gamma={rep.gamma} steps={rep.steps} delta={rep.delta}")
    print(
        f"epsilon_external={rep.epsilon_external:.6g} "
        f"(alpha={rep.alpha_external})"
    )
    print(
        f"epsilon_internal={rep.epsilon_internal:.6g} "
        f"(alpha={rep.alpha_internal})"
    )
    if args.curve:
        curve = dpmod.compose(
            dpmod.subsample_amplify(dpmod.gaussian_rdp(args.sigma), args.gamma),
            args.steps,
        )
        with open(args.curve, "w", encoding="utf-8", newline="") as f:
            f.write("alpha,epsilon\n")
            for a, e in zip(curve.alphas, curve.eps):
                f.write(f"{int(a)},{_float_repr(e)}\n")
        print(args.curve)
    return 0


def cmd_accountant_calibrate(args) -> int:
    if not 0 <= args.gamma <= 1:
        raise CliError(f"gamma {args.gamma} outside [0, 1]")
    sigma = dpmod.calibrate(args.epsilon, args.delta, args.gamma, args.steps)
    achieved, alpha = dpmod.pipeline_epsilon(
        sigma, args.gamma, args.steps, args.delta
    )
    print(f"sigma={sigma:.6g}")
    print(f"epsilon_achieved={achieved:.6g} (alpha={alpha}, target={args.epsilon})")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vfsynth",
        description="Vertically federated GAN synthesis with DP accounting "
        "and membership-inference auditing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override config output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample synthetic rows from a run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--best", action="store_true",
                   help="use the best-FD checkpoint (default: final)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="Frechet distance + four-way utility")
    p.add_argument("--real", required=True)
    p.add_argument("--synth", required=True)
    p.add_argument("--config", required=True, help="config providing the schema")
    p.add_argument("--target", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="leave-one-out membership-inference audit")
    p.add_argument("--config", required=True)
    p.add_argument("--select", choices=("outlier", "nn"), default=None)
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("accountant", help="privacy accountant")
    acc = p.add_subparsers(dest="subcommand", required=True)
    r = acc.add_parser("report", help="epsilon for given mechanism parameters")
    r.add_argument("--sigma", type=float, required=True)
    r.add_argument("--gamma", type=float, required=True)
    r.add_argument("--steps", type=int, required=True)
    r.add_argument("--delta", type=float, required=True)
    r.add_argument("--curve", default=None, help="write the composed curve as CSV")
    r.set_defaults(func=cmd_accountant_report)
    c = acc.add_parser("calibrate", help="smallest sigma meeting a budget")
    c.add_argument("--epsilon", type=float, required=True)
    c.add_argument("--delta", type=float, required=True)
    c.add_argument("--gamma", type=float, required=True)
    c.add_argument("--steps", type=int, required=True)
    c.set_defaults(func=cmd_accountant_calibrate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, D.DataError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
