"""Command-line surface.

Subcommands: train, finetune, nll, sample, gradcheck, is-diag,
schedule-dump, oracle-check. Shared flags: --config, --seed, --out,
--schedule, --gamma-min, --gamma-max. Exit codes: 0 success, 1 invalid
input, 2 numeric failure. Every run writes a ``run.json`` manifest with
the resolved configuration, seed, library versions, and wall time, so a
run can be reproduced from the manifest alone.

The optional config file is flat ``key = value`` text; keys mirror the
training configuration fields and explicit command-line flags win.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import Dataset, generate, load_dataset, quantize, save_dataset
from .errors import InvalidInputError, NumericError
from .importance import mse_profile, strategy_from_name, variance_profile
from .nets import MonotoneGammaNet, VelocityModel, load_checkpoint, monotone_gamma, save_checkpoint
from .objectives import fm_loss_per_sample
from .odeflow import Exact, Hutchinson, ode_log_likelihood, ode_sample
from .schedule import LogSnrSchedule, designed_density, designed_gamma_of_t, designed_normalizer, eval_schedule
from .solver import SolverConfig
from .trainer import TrainConfig, finetune, pretrain, use_params


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidInputError(message)


def _add_shared(p: argparse.ArgumentParser):
    p.add_argument("--config", type=str, default=None, help="flat key=value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default=".", help="output directory")
    p.add_argument("--schedule", choices=["vp", "sp"], default="vp")
    p.add_argument("--gamma-min", type=float, default=-13.3)
    p.add_argument("--gamma-max", type=float, default=5.0)


def _add_data_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", type=str, default=None, help="dataset CSV path")
    p.add_argument("--gen", type=str, default=None, help="generate a toy dataset kind instead")
    p.add_argument("--n", type=int, default=10_000, help="generated dataset size")


def build_parser() -> _Parser:
    parser = _Parser(prog="dode", description="diffusion-ODE likelihood toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule-dump", parents=[], help="emit schedule coefficients as CSV")
    _add_shared(p)
    p.add_argument("--kind", choices=["vp", "sp"], default=None, help="alias for --schedule")
    p.add_argument("--points", type=int, default=100)

    p = sub.add_parser("gradcheck", help="finite-difference validation of gradients and tangents")
    _add_shared(p)
    p.add_argument("--d", type=int, default=2)

    for name in ("train", "finetune"):
        p = sub.add_parser(name, help=f"{name} a velocity model")
        _add_shared(p)
        _add_data_flags(p)
        p.add_argument("--iters", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--strategy", choices=["uniform", "designed", "adaptive"], default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--eval-every", type=int, default=None)
        p.add_argument("--eval-nll", choices=["ode", "tn", "none"], default=None)
        if name == "finetune":
            p.add_argument("--checkpoint", type=str, required=True)
            p.add_argument("--lambda-tr", type=float, default=None)

    p = sub.add_parser("nll", help="discrete likelihood bounds for a checkpoint")
    _add_shared(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--bound", choices=["uniform", "tn", "variational"], default="tn")
    p.add_argument("--K", type=int, default=1)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--gamma-eval", type=float, default=None)
    p.add_argument("--divergence", choices=["exact", "hutchinson"], default="exact")
    p.add_argument("--probes", type=int, default=1)
    p.add_argument("--limit", type=int, default=None, help="evaluate only the first N data")

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    _add_shared(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--n", type=int, default=1000)

    p = sub.add_parser("is-diag", help="importance-sampling diagnostics")
    _add_shared(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--strategy", choices=["uniform", "designed", "adaptive"], default="designed")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--draws", type=int, default=3200)

    p = sub.add_parser("oracle-check", help="run the analytic validation suite")
    _add_shared(p)
    p.add_argument("--quick", action="store_true")
    return parser


def _schedule_from(args) -> LogSnrSchedule:
    kind = getattr(args, "kind", None) or args.schedule
    return LogSnrSchedule(kind, args.gamma_min, args.gamma_max)


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise InvalidInputError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, val = (t.strip() for t in text.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def _coerce_config_values(raw: dict) -> dict:
    out = {}
    for k, v in raw.items():
        if k in ("hidden",):
            out[k] = tuple(int(t) for t in str(v).replace("(", "").replace(")", "").split(",") if t.strip())
        elif k in ("strategy", "activation", "eval_nll"):
            out[k] = str(v)
        elif k in ("iters", "batch_size", "seed", "eval_every", "eval_size", "gamma_embed_dim", "nfe_probe_size"):
            out[k] = int(v)
        else:
            out[k] = float(v)
    return out


def _train_config(args, extra_overrides=()) -> TrainConfig:
    base = {}
    if args.config:
        base = _coerce_config_values(parse_config_file(args.config))
    base.setdefault("seed", args.seed)
    overrides = {
        "iters": args.iters,
        "batch_size": args.batch_size,
        "strategy": args.strategy,
        "lr": args.lr,
        "eval_every": args.eval_every,
        "eval_nll": args.eval_nll,
        "seed": args.seed if args.seed != 0 else None,
        **dict(extra_overrides),
    }
    for k, v in overrides.items():
        if v is not None:
            base[k] = v
    base.setdefault("iters", 20_000)
    return TrainConfig.from_dict(base)


def _load_data(args, s: LogSnrSchedule) -> Dataset:
    if args.data:
        return load_dataset(args.data)
    kind = args.gen or "gauss-mixture"
    return generate(kind, args.n, seed=args.seed)


def _fmt17(v: float) -> str:
    return format(v, ".17g")


# ---------------------------------------------------------------------------
# command bodies; each returns a dict merged into run.json
# ---------------------------------------------------------------------------


def _cmd_schedule_dump(args, out: Path) -> dict:
    s = _schedule_from(args)
    if args.points < 1:
        raise InvalidInputError("--points must be >= 1")
    path = out / "schedule.csv"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("gamma,alpha,sigma,dalpha,dsigma,norm\n")
        grid = np.linspace(s.gamma_min, s.gamma_max, args.points)
        for g in grid:
            ev = eval_schedule(s, float(g))
            fh.write(",".join(_fmt17(v) for v in (g, ev.alpha, ev.sigma, ev.dalpha, ev.dsigma, ev.norm)) + "\n")
    return {"outputs": [str(path)], "rows": args.points}


def _cmd_gradcheck(args, out: Path) -> dict:
    s = _schedule_from(args)
    rng = np.random.default_rng(args.seed)
    model = VelocityModel(args.d, hidden=(32, 32), gamma_min=s.gamma_min, gamma_max=s.gamma_max, seed=args.seed)
    with torch.no_grad():
        model.layers[-1].weight.copy_(torch.from_numpy(rng.uniform(-0.5, 0.5, size=tuple(model.layers[-1].weight.shape))))
        model.layers[-1].bias.copy_(torch.from_numpy(rng.uniform(-0.1, 0.1, size=tuple(model.layers[-1].bias.shape))))

    from .nets import loss_and_grad
    from .objectives import sample_path

    x0 = torch.from_numpy(rng.normal(size=(8, args.d)))
    eps = torch.from_numpy(rng.normal(size=(8, args.d)))
    gam = torch.from_numpy(rng.uniform(s.gamma_min, s.gamma_max, size=8))
    batch = sample_path(s, x0, eps, gam)
    loss_fn = lambda m, b, p: fm_loss_per_sample(s, m, b, params=p)
    _, grads = loss_and_grad(model, loss_fn, batch)

    h = 1e-4
    max_rel_grad = 0.0
    plist = list(model.parameters())
    for _ in range(24):
        pi = int(rng.integers(0, len(plist)))
        p = plist[pi]
        flat = int(rng.integers(0, p.numel()))
        with torch.no_grad():
            orig = float(p.view(-1)[flat])
            p.view(-1)[flat] = orig + h
            lp = float(fm_loss_per_sample(s, model, batch).mean())
            p.view(-1)[flat] = orig - h
            lm = float(fm_loss_per_sample(s, model, batch).mean())
            p.view(-1)[flat] = orig
        fd = (lp - lm) / (2 * h)
        ad = float(grads[pi].view(-1)[flat])
        max_rel_grad = max(max_rel_grad, abs(fd - ad) / max(abs(fd), 1e-6))

    xq = torch.from_numpy(rng.normal(size=(4, args.d)))
    tq = torch.from_numpy(rng.normal(size=(4, args.d)))
    gq = float(rng.uniform(-5, 3))
    _, jv = model.jvp(xq, gq, tq)
    hj = 1e-5
    fd = (model(xq + hj * tq, gq) - model(xq - hj * tq, gq)) / (2 * hj)
    max_rel_jvp = float(((jv - fd).abs() / fd.abs().clamp(min=1e-6)).max())

    net = MonotoneGammaNet(s.gamma_min, s.gamma_max, seed=args.seed)
    tt = torch.from_numpy(rng.uniform(0.01, 0.99, size=16))
    _, dg = monotone_gamma(net, tt)
    gp = net.gamma_of_t(tt + 1e-6)
    gm = net.gamma_of_t(tt - 1e-6)
    fd = (gp - gm) / 2e-6
    max_rel_dgamma = float(((dg - fd).abs() / fd.abs().clamp(min=1e-6)).max())

    report = {
        "max_rel_grad": max_rel_grad,
        "max_rel_jvp": max_rel_jvp,
        "max_rel_dgamma": max_rel_dgamma,
        "passed": max_rel_grad < 1e-4 and max_rel_jvp < 1e-5 and max_rel_dgamma < 1e-5,
    }
    path = out / "gradcheck.json"
    path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    if not report["passed"]:
        raise NumericError(f"gradcheck failed: {report}")
    return {"outputs": [str(path)], **report}


def _cmd_train(args, out: Path) -> dict:
    s = _schedule_from(args)
    cfg = _train_config(args)
    dataset = _load_data(args, s)
    result = pretrain(s, cfg, dataset)
    ck = out / "model.ckpt"
    ck_ema = out / "model_ema.ckpt"
    save_checkpoint(result.model, ck, seed=cfg.seed, iteration=cfg.iters, schedule_kind=s.kind.value)
    save_checkpoint(
        result.model,
        ck_ema,
        seed=cfg.seed,
        iteration=cfg.iters,
        schedule_kind=s.kind.value,
        params=np.concatenate([p.detach().numpy().ravel() for p in result.ema_params]),
    )
    rp = out / "report.csv"
    result.report.to_csv(rp)
    return {"outputs": [str(ck), str(ck_ema), str(rp)], "config": cfg.to_dict()}


def _cmd_finetune(args, out: Path) -> dict:
    s = _schedule_from(args)
    cfg = _train_config(args, extra_overrides=[("lambda_tr", args.lambda_tr)])
    model, header = load_checkpoint(args.checkpoint)
    dataset = _load_data(args, s)
    result = finetune(s, cfg, model, dataset)
    ck = out / "model.ckpt"
    ck_ema = out / "model_ema.ckpt"
    save_checkpoint(result.model, ck, seed=cfg.seed, iteration=header.get("iteration", 0) + cfg.iters, schedule_kind=s.kind.value)
    save_checkpoint(
        result.model,
        ck_ema,
        seed=cfg.seed,
        iteration=header.get("iteration", 0) + cfg.iters,
        schedule_kind=s.kind.value,
        params=np.concatenate([p.detach().numpy().ravel() for p in result.ema_params]),
    )
    rp = out / "report.csv"
    result.report.to_csv(rp)
    return {
        "outputs": [str(ck), str(ck_ema), str(rp)],
        "config": cfg.to_dict(),
        "nfe_before": result.nfe_before,
        "nfe_after": result.nfe_after,
    }


def _cmd_nll(args, out: Path) -> dict:
    from . import dequant

    s = _schedule_from(args)
    model, _ = load_checkpoint(args.checkpoint)
    dataset = _load_data(args, s)
    disc = dataset.discrete if dataset.discrete is not None else quantize(dataset.samples)
    if args.limit:
        disc = disc[: args.limit]
    cfg = SolverConfig()
    mode = Exact() if args.divergence == "exact" else Hutchinson(args.probes, "rademacher", args.seed)
    kw = dict(K=args.K, cfg=cfg, seed=args.seed, repeats=args.repeats, mode=mode)
    if args.bound == "tn":
        bounds = dequant.nll_trunc_normal(s, model, disc, **kw)
    elif args.bound == "uniform":
        bounds = dequant.nll_uniform(s, model, disc, gamma_eval=args.gamma_eval, **kw)
    else:
        bounds = dequant.nll_variational(s, model, disc, **kw)
    records = [
        {
            "logp": b.total_logp,
            "bpd": b.bpd_value,
            "ode_term": b.ode_term,
            "corrections": b.corrections,
            "kind": b.kind,
            "K": b.K,
            "mode": args.divergence,
            "seed": args.seed,
        }
        for b in bounds
    ]
    payload = {"records": records, "summary": dequant.summarize(bounds)}
    path = out / "nll.json"
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return {"outputs": [str(path)], "summary": payload["summary"]}


def _cmd_sample(args, out: Path) -> dict:
    s = _schedule_from(args)
    model, _ = load_checkpoint(args.checkpoint)
    samples, run = ode_sample(s, model, args.n, SolverConfig(), seed=args.seed)
    path = out / "samples.csv"
    save_dataset(Dataset("samples", samples), path)
    return {"outputs": [str(path)], "nfe": run.nfe, "accepted": run.accepted, "rejected": run.rejected}


def _cmd_is_diag(args, out: Path) -> dict:
    s = _schedule_from(args)
    model, _ = load_checkpoint(args.checkpoint)
    dataset = _load_data(args, s)
    strategy = strategy_from_name(args.strategy, s, seed=args.seed)

    curve = out / "gamma_of_t.csv"
    ts = np.linspace(0.0, 1.0, 201)
    with open(curve, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,gamma,dgamma_dt\n")
        if args.strategy == "designed":
            gam = designed_gamma_of_t(s, ts)
            dg = designed_normalizer(s) / np.maximum(designed_density(s, gam) * designed_normalizer(s), 1e-300)
            for t, g, d in zip(ts, gam, dg):
                fh.write(f"{_fmt17(t)},{_fmt17(g)},{_fmt17(d)}\n")
        elif args.strategy == "adaptive":
            gam, dg = monotone_gamma(strategy.net, torch.from_numpy(ts))
            for t, g, d in zip(ts, gam.numpy(), dg.numpy()):
                fh.write(f"{_fmt17(t)},{_fmt17(g)},{_fmt17(d)}\n")
        else:
            for t in ts:
                fh.write(f"{_fmt17(t)},{_fmt17(s.gamma_min + s.span * t)},{_fmt17(s.span)}\n")

    bins = variance_profile(s, model, strategy, dataset.samples, n_bins=args.bins, n_draws=args.draws, seed=args.seed)
    var_path = out / "variance.csv"
    with open(var_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("gamma_lo,gamma_hi,count,variance\n")
        for b in bins:
            var = "" if b.variance is None else _fmt17(b.variance)
            fh.write(f"{_fmt17(b.gamma_lo)},{_fmt17(b.gamma_hi)},{b.count},{var}\n")

    gammas = np.linspace(s.gamma_min + 0.1, s.gamma_max - 0.1, 32)
    gs, vm, em = mse_profile(s, model, dataset.samples, gammas, seed=args.seed)
    mse_path = out / "mse_profile.csv"
    with open(mse_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("gamma,velocity_mse,noise_mse\n")
        for g, v, e in zip(gs, vm, em):
            fh.write(f"{_fmt17(g)},{_fmt17(v)},{_fmt17(e)}\n")
    return {"outputs": [str(curve), str(var_path), str(mse_path)]}


def _cmd_oracle_check(args, out: Path) -> dict:
    from .oracle import oracle_check

    report = oracle_check(quick=args.quick)
    path = out / "oracle.json"
    path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    if not report["passed"]:
        first = next(c for c in report["checks"] if not c["passed"])
        raise NumericError(f"oracle check failed: {first['name']} (observed {first['observed']:.3e})")
    return {"outputs": [str(path)], "n_checks": len(report["checks"])}


_COMMANDS = {
    "schedule-dump": _cmd_schedule_dump,
    "gradcheck": _cmd_gradcheck,
    "train": _cmd_train,
    "finetune": _cmd_finetune,
    "nll": _cmd_nll,
    "sample": _cmd_sample,
    "is-diag": _cmd_is_diag,
    "oracle-check": _cmd_oracle_check,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    t0 = time.time()
    try:
        args = parser.parse_args(argv)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        summary = _COMMANDS[args.command](args, out)
        manifest = {
            "command": args.command,
            "argv": argv,
            "seed": args.seed,
            "out": str(out),
            "schedule": {"kind": getattr(args, "kind", None) or args.schedule, "gamma_min": args.gamma_min, "gamma_max": args.gamma_max},
            "versions": {
                "dode": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "torch": torch.__version__,
            },
            "wall_time_s": time.time() - t0,
            **summary,
        }
        (out / "run.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return 0
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
