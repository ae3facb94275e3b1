"""Command-line entry point: ``deeplinear <command> [options]``.

Every command writes one JSON report (to ``--out`` or stdout) that embeds the
fully resolved configuration.  Exit status: 0 success, 1 input error, 2 data
assumptions violated in strict mode, 3 internal error or theorem-violation
diagnostic.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import derivatives, landscape, nonlinear
from .io import (
    MatrixFormatError,
    canonical_json,
    load_dataset,
    load_weights,
    save_weights,
    write_matrix,
)
from .linalg import DEFAULT_TOLERANCES, BudgetError, ShapeError, ToleranceConfig
from .model import (
    AssumptionError,
    NetworkShape,
    WeightStack,
    data_spectrum,
    loss,
    require_assumptions,
)

EXIT_OK, EXIT_INPUT, EXIT_ASSUMPTION, EXIT_INTERNAL = 0, 1, 2, 3

COMMANDS = ("analyze", "grad-check", "hessian", "classify", "construct", "perturb", "train", "relu-mc")
CONSTRUCTIONS = ("global-min", "bad-saddle", "indefinite", "index-set")


class InputError(Exception):
    pass


def _int_list(text):
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--x", dest="x_path", help="input matrix X (d_x x m)")
    common.add_argument("--y", dest="y_path", help="target matrix Y (d_y x m)")
    common.add_argument("--shape", help="comma-separated widths d_x,d_1,...,d_H,d_y")
    common.add_argument("--weights", dest="weights_dir", help="weight-stack directory")
    common.add_argument("--save", dest="save_dir", help="directory for output matrices")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", dest="output_path", help="JSON report path (default stdout)")
    mode = common.add_mutually_exclusive_group()
    mode.add_argument("--strict", dest="strict", action="store_true", default=True)
    mode.add_argument("--permissive", dest="strict", action="store_false")
    common.add_argument("--rank-tol", type=float)
    common.add_argument("--eig-tol", type=float)
    common.add_argument("--grad-tol", type=float)
    common.add_argument("--fd-step", type=float)
    common.add_argument("--init-scale", type=float, default=0.5, help="scale of seeded random weights")
    common.add_argument("--step", type=float, default=0.05)
    common.add_argument("--iters", type=int, default=20000)
    common.add_argument("--stop-grad", type=float, default=1e-8)
    common.add_argument("--record-every", type=int, default=100)
    common.add_argument("--epsilon", type=float, default=1e-6)
    common.add_argument("--layer", type=int)
    common.add_argument("--index-set", type=_int_list)
    common.add_argument("--rho", type=float, default=0.5)
    common.add_argument("--q", type=float)
    common.add_argument("--samples", dest="n_samples", type=int, default=100000)
    common.add_argument("--shards", dest="n_shards", type=int, default=nonlinear.DEFAULT_SHARDS)
    common.add_argument("--export", dest="export_dir", help="hessian: write matrix text + JSON sidecar here")

    parser = argparse.ArgumentParser(prog="deeplinear", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "construct":
            p.add_argument("kind", choices=CONSTRUCTIONS)
    return parser


def _resolved_config(args) -> dict:
    cfg = vars(args).copy()
    cfg["tolerances"] = asdict(_tolerances(args))
    return cfg


def _tolerances(args) -> ToleranceConfig:
    return DEFAULT_TOLERANCES.with_overrides(
        rank_rel_tol=args.rank_tol,
        eig_zero_tol=args.eig_tol,
        grad_crit_tol=args.grad_tol,
        fd_step=args.fd_step,
    )


def _data(args):
    if not args.x_path or not args.y_path:
        raise InputError("--x and --y are required")
    for p in (args.x_path, args.y_path):
        if not Path(p).is_file():
            raise InputError(f"matrix file not found: {p}")
    return load_dataset(args.x_path, args.y_path)


def _shape(args, data=None, weights=None) -> NetworkShape:
    shape = NetworkShape.parse(args.shape) if args.shape else None
    if weights is not None:
        if shape is not None and shape != weights.shape:
            raise InputError(f"--shape {shape} disagrees with weights shape {weights.shape}")
        shape = weights.shape
    if shape is None:
        raise InputError("--shape is required")
    if data is not None and (shape.d_x != data.d_x or shape.d_y != data.d_y):
        raise InputError(
            f"shape expects d_x={shape.d_x}, d_y={shape.d_y}; data has d_x={data.d_x}, d_y={data.d_y}"
        )
    return shape


def _weights(args, data, random_ok=False):
    if args.weights_dir:
        if not Path(args.weights_dir, "manifest.json").is_file():
            raise InputError(f"weight manifest not found: {Path(args.weights_dir, 'manifest.json')}")
        W = load_weights(args.weights_dir)
        _shape(args, data, W)
        return W
    if not random_ok:
        raise InputError("--weights is required")
    shape = _shape(args, data)
    return WeightStack.random(shape, args.seed, args.init_scale)


def _stack_dict(W: WeightStack) -> dict:
    return {"shape": list(W.shape.widths), "layers": [W[k] for k in range(1, W.H + 2)]}


def _spectrum_dict(spectrum) -> dict:
    return {
        "sigma": spectrum.sigma,
        "eigvalues": spectrum.eigvalues,
        "eigvectors": spectrum.eigvectors,
        **spectrum.assumptions.to_dict(),
    }


def cmd_analyze(args, cfg):
    data = _data(args)
    spectrum = data_spectrum(data, cfg)
    notes = require_assumptions(spectrum, args.strict)
    report = {"DataSpectrum": _spectrum_dict(spectrum), "AssumptionReport": spectrum.assumptions.to_dict()}
    if args.shape:
        shape = _shape(args, data)
        report["NetworkShape"] = {"widths": list(shape.widths), "H": shape.H, "p": shape.p, "p_hat": shape.p_hat}
        report["loss_star"] = landscape.global_min_loss(data, shape.p_hat, spectrum)
    return report, notes


def cmd_grad_check(args, cfg):
    data = _data(args)
    W = _weights(args, data, random_ok=True)
    g = derivatives.gradient(W, data)
    f = derivatives.fd_gradient(W, data, cfg.fd_step)
    return {
        "WeightStack": _stack_dict(W),
        "GradientBlocks": {"analytic": list(g.blocks), "finite_difference": list(f.blocks), "stacked_norm": g.stacked_norm},
        "max_relative_error": derivatives.block_relative_error(f.to_vector(), g.to_vector()),
    }, []


def cmd_hessian(args, cfg):
    data = _data(args)
    W = _weights(args, data, random_ok=True)
    Hm = derivatives.full_hessian(W, data, cfg)
    eigs = Hm.eigvalsh()
    sidecar = {
        "dim": Hm.dim,
        "block_index": Hm.block_index(),
        "asymmetry_before_symmetrization": Hm.asymmetry,
        "fd_crosscheck": {f"{k},{kp}": v for (k, kp), v in sorted(Hm.fd_crosscheck.items())},
    }
    if args.export_dir:
        out = Path(args.export_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_matrix(out / "hessian.txt", Hm.matrix)
        (out / "hessian.json").write_text(canonical_json(sidecar))
    report = {"HessianMatrix": {**sidecar, "eigenvalues": eigs, "min_eig": eigs[0], "max_eig": eigs[-1]}}
    return report, []


def cmd_classify(args, cfg):
    data = _data(args)
    W = _weights(args, data)
    rep = landscape.classify_point(W, data, cfg, strict=args.strict)
    return {"CriticalPointReport": rep.to_dict()}, list(rep.warnings)


def cmd_construct(args, cfg):
    data = _data(args)
    if not args.weights_dir:
        raise InputError("construct needs --weights DIR to write the stack")
    shape = _shape(args, data)
    extra = {}
    if args.kind == "global-min":
        gm = landscape.global_minimum(shape, data, cfg, args.strict)
        W, claimed = gm.stack, landscape.Label.GLOBAL_MIN
        extra["GlobalMinimum"] = {"product": gm.product, "loss_star": gm.loss_star, "loss_direct": gm.loss_direct}
    elif args.kind == "bad-saddle":
        W, claimed = landscape.construct_bad_saddle(shape, data, seed=args.seed), landscape.Label.DEGENERATE_SADDLE
    elif args.kind == "indefinite":
        W, claimed = landscape.construct_indefinite_point(shape, data, cfg), landscape.Label.STRICT_SADDLE
    else:
        if args.index_set is None:
            raise InputError("construct index-set needs --index-set")
        W = landscape.construct_index_set_critical_point(data, shape, args.index_set, cfg, args.strict)
        star = landscape.global_min_loss(data, shape.p_hat)
        above = loss(W, data) > star + landscape.classification_margin(star)
        claimed = landscape.Label.STRICT_SADDLE if above else landscape.Label.GLOBAL_MIN
    save_weights(args.weights_dir, W)
    return {"WeightStack": _stack_dict(W), "claimed_label": claimed, "loss": loss(W, data), **extra}, []


def cmd_perturb(args, cfg):
    data = _data(args)
    W = _weights(args, data)
    if args.layer is None:
        raise InputError("perturb needs --layer K")
    res = landscape.loss_preserving_rank_perturbation(W, data, args.layer, args.epsilon, args.seed, cfg)
    if args.save_dir:
        save_weights(args.save_dir, res.stack)
    return {
        "PerturbationResult": {
            "status": res.status,
            "rank_before": res.rank_before,
            "rank_after": res.rank_after,
            "loss_before": res.loss_before,
            "loss_after": res.loss_after,
            "delta_norm": res.delta_norm,
            "attempts": res.attempts,
        },
        "WeightStack": _stack_dict(res.stack),
    }, []


def cmd_train(args, cfg):
    data = _data(args)
    W0 = _weights(args, data, random_ok=True)
    res = landscape.train_gd(W0, data, args.step, args.iters, args.stop_grad, args.record_every)
    if args.save_dir:
        save_weights(args.save_dir, res.final)
    return {
        "TrainResult": {
            "status": res.status,
            "final_loss": res.final_loss,
            "final_grad_norm": res.final_grad_norm,
            "trajectory": [list(t) for t in res.trajectory],
        },
        "WeightStack": _stack_dict(res.final),
    }, []


def cmd_relu_mc(args, cfg):
    data = _data(args)
    W = _weights(args, data, random_ok=True)
    model = nonlinear.PathModel(W.shape, args.rho, args.q, args.seed)
    res = nonlinear.expected_loss(model, W, data, args.n_samples, n_shards=args.n_shards)
    mc = res.mc
    files = {}
    if args.save_dir:
        out = Path(args.save_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, M in (("mean", mc.mean), ("stderr", mc.stderr), ("linear_reference", mc.linear_reference)):
            write_matrix(out / f"{name}.txt", M)
            files[name] = str(out / f"{name}.txt")
    return {
        "MCResult": {
            "rho": mc.rho,
            "q": mc.q,
            "n_samples": mc.n_samples,
            "n_shards": mc.n_shards,
            "seed": mc.seed,
            "psi_per_output": model.psi_per_output,
            "mean": mc.mean,
            "stderr": mc.stderr,
            "linear_reference": mc.linear_reference,
            "max_abs_z": float(np.max(np.abs(mc.mean - mc.linear_reference) / np.where(mc.stderr > 0, mc.stderr, np.inf))),
            "files": files,
        },
        "expected_loss": res.value,
        "expected_loss_stderr": res.stderr,
        "linear_loss": loss(W, data),
    }, []


HANDLERS = {
    "analyze": cmd_analyze,
    "grad-check": cmd_grad_check,
    "hessian": cmd_hessian,
    "classify": cmd_classify,
    "construct": cmd_construct,
    "perturb": cmd_perturb,
    "train": cmd_train,
    "relu-mc": cmd_relu_mc,
}


def _emit(report, args):
    text = canonical_json(report)
    if args.output_path:
        Path(args.output_path).write_text(text)
    else:
        sys.stdout.write(text)


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _tolerances(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    report = {"command": args.command, "config": _resolved_config(args)}
    try:
        body, notes = HANDLERS[args.command](args, cfg)
    except AssumptionError as exc:
        report["error"] = {"kind": "ASSUMPTION_VIOLATION", "message": str(exc)}
        print(f"error: {exc}", file=sys.stderr)
        _emit(report, args)
        return EXIT_ASSUMPTION
    except (InputError, MatrixFormatError, FileNotFoundError, ShapeError, BudgetError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - reported as an internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    report.update(body)
    if notes:
        report["warnings"] = notes
    _emit(report, args)
    diagnostics = report.get("CriticalPointReport", {}).get("diagnostics", [])
    if any(landscape.THEOREM_VIOLATION in d for d in diagnostics):
        return EXIT_INTERNAL
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
