"""Batch command-line front end.

Subcommands: fit | convert | refine | eval | audit | export.  Every command
is deterministic given its inputs, config and seed; reruns produce
byte-identical output files.  Exit codes: 0 on success, 2 for input or
usage errors, 3 for numerical failures.

Path flags may also come from the environment (``SKELFIT_MODEL``,
``SKELFIT_IN``, ``SKELFIT_OUT``); explicit flags win over the environment.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .body_model import (
    ModelDefinition,
    ModelValidationError,
    clamp_to_limits,
    load_model,
    make_toy_model,
    rest_joint_locations,
    skin_mesh,
)
from .camera import WeakPerspectiveCamera
from .losses import KeypointSet2D
from .mesh_io import read_obj, write_obj
from .metrics import mpjpe, mpvpe, pa_mpjpe, pa_mpvpe, pck, violation_audit
from .refine import DatasetFormatError, load_dataset, refine_batch, save_dataset
from .skelify import (
    FitConfig,
    FitInit,
    NumericalFitError,
    e_kp2d,
    fit,
    fit_to_mesh,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def _env_path(flag_value, env_name):
    if flag_value is not None:
        return flag_value
    return os.environ.get(env_name)


def _load_model_arg(args) -> ModelDefinition:
    model_path = _env_path(args.model, "SKELFIT_MODEL")
    if args.toy_model or model_path is None:
        return make_toy_model()
    return load_model(model_path)


def _load_config_arg(args) -> FitConfig:
    if getattr(args, "config", None):
        with open(args.config) as fh:
            return FitConfig.from_dict(json.load(fh))
    return FitConfig()


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _print_effective_config(args, config: FitConfig | None) -> None:
    eff = {k: v for k, v in vars(args).items() if k != "func"}
    if config is not None:
        eff["fit_config"] = config.to_dict()
    eff["kernel_backend"] = kernels.BACKEND
    print(f"effective config: {_dump_json(eff)}", file=sys.stderr)


def _default_rest_camera(model: ModelDefinition) -> WeakPerspectiveCamera:
    rest = rest_joint_locations(model, np.zeros(model.shape_dim))
    center = rest[:, :2].mean(axis=0)
    return WeakPerspectiveCamera(scale=1.0, tx=float(-center[0]), ty=float(-center[1]))


def _rest_pose(model: ModelDefinition) -> np.ndarray:
    return clamp_to_limits(model, np.zeros(model.pose_dim))


def cmd_fit(args) -> int:
    model = _load_model_arg(args)
    config = _load_config_arg(args)
    _print_effective_config(args, config)
    records = load_dataset(args.in_path)
    rng = np.random.default_rng(args.seed)
    mesh_dir = Path(args.export_meshes) if args.export_meshes else None
    if mesh_dir is not None:
        mesh_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        if rec.keypoints2d is None:
            lines.append({"example_id": rec.example_id, "skipped": True, "reason": "no keypoints"})
            continue
        if len(rec.keypoints2d) != model.n_keypoints:
            raise DatasetFormatError(
                f"record {rec.example_id}: {len(rec.keypoints2d)} keypoints do not match "
                f"the model's {model.n_keypoints} regressor rows"
            )
        if args.init == "rest":
            init = FitInit(
                q=_rest_pose(model),
                beta=np.zeros(model.shape_dim),
                camera=_default_rest_camera(model),
            )
        else:
            src = rec.regressor_estimate if args.init == "regressor" else rec.pseudo_gt
            if src is None:
                lines.append(
                    {"example_id": rec.example_id, "skipped": True,
                     "reason": f"record lacks the {args.init} estimate"}
                )
                continue
            init = FitInit(q=src.q.copy(), beta=src.beta.copy(), camera=src.camera)
        if args.perturb > 0:
            init.q = init.q + rng.uniform(-args.perturb, args.perturb, size=model.pose_dim)
        kp = rec.keypoints2d
        before = e_kp2d(model, init.q, init.beta, init.camera, kp, config.sigma,
                        config.conf_threshold)
        result = fit(model, kp, init, config)
        after = e_kp2d(model, result.q, result.beta, result.camera, kp, config.sigma,
                       config.conf_threshold)
        lines.append(
            {"example_id": rec.example_id, "fit": result.to_dict(),
             "e_kp2d_init": before, "e_kp2d_final": after}
        )
        if mesh_dir is not None:
            mesh = skin_mesh(model, result.q, result.beta)
            write_obj(mesh_dir / f"{rec.example_id}.obj", mesh.vertices, mesh.faces)
    with open(args.out, "w") as fh:
        for line in lines:
            fh.write(_dump_json(line))
            fh.write("\n")
    return EXIT_OK


def cmd_convert(args) -> int:
    model = _load_model_arg(args)
    config = _load_config_arg(args)
    _print_effective_config(args, config)
    vertices, _ = read_obj(args.in_path)
    if vertices.shape[0] != model.n_vertices:
        raise DatasetFormatError(
            f"target mesh has {vertices.shape[0]} vertices, model has {model.n_vertices}"
        )
    if args.init_params:
        with open(args.init_params) as fh:
            doc = json.load(fh)
        doc = doc.get("fit", doc)
        init = FitInit(
            q=np.asarray(doc["q"], dtype=np.float64),
            beta=np.asarray(doc["beta"], dtype=np.float64),
        )
    else:
        init = FitInit(q=_rest_pose(model), beta=np.zeros(model.shape_dim))
    result = fit_to_mesh(model, vertices, init, config)
    recovered = skin_mesh(model, result.q, result.beta).vertices
    mean_err = float(np.mean(np.linalg.norm(recovered - vertices, axis=1)))
    out = {
        "fit": result.to_dict(),
        "mean_vertex_error": mean_err,
        "suspect_local_minimum": mean_err > args.flag_threshold,
    }
    with open(args.out, "w") as fh:
        fh.write(_dump_json(out))
        fh.write("\n")
    return EXIT_OK


def cmd_refine(args) -> int:
    model = _load_model_arg(args)
    config = _load_config_arg(args)
    _print_effective_config(args, config)
    records = load_dataset(args.in_path)
    refined, report = refine_batch(
        records, model, config, init_policy=args.init_policy, jobs=args.jobs
    )
    save_dataset(refined, args.out)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(_dump_json(report.to_dict()))
            fh.write("\n")
    print(
        f"refined {len(records)} records, acceptance rate {report.acceptance_rate:.3f}",
        file=sys.stderr,
    )
    return EXIT_OK


def _load_eval_records(path):
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}: line {i}: {exc}") from exc
    return out


def cmd_eval(args) -> int:
    _print_effective_config(args, None)
    preds = _load_eval_records(args.pred)
    gts = _load_eval_records(args.gt)
    if len(preds) != len(gts):
        raise DatasetFormatError(f"{len(preds)} predictions vs {len(gts)} ground-truth records")
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    values: dict[str, list[float]] = {m: [] for m in wanted}
    for i, (p, g) in enumerate(zip(preds, gts)):
        for m in wanted:
            try:
                if m == "mpjpe":
                    values[m].append(mpjpe(p["joints3d"], g["joints3d"]))
                elif m == "pa_mpjpe":
                    values[m].append(pa_mpjpe(p["joints3d"], g["joints3d"]))
                elif m == "mpvpe":
                    values[m].append(mpvpe(p["vertices"], g["vertices"]))
                elif m == "pa_mpvpe":
                    values[m].append(pa_mpvpe(p["vertices"], g["vertices"]))
                elif m.startswith("pck@"):
                    thr = float(m.split("@", 1)[1])
                    values[m].append(
                        pck(
                            p["keypoints2d"],
                            g["keypoints2d"],
                            thr,
                            normalizer=float(g.get("normalizer", 2.0)),
                            visible=g.get("visibility"),
                        )
                    )
                else:
                    raise DatasetFormatError(f"unknown metric {m!r}")
            except KeyError as exc:
                raise DatasetFormatError(f"record {i}: missing field {exc} for metric {m!r}")
    table = {m: float(np.mean(v)) if v else float("nan") for m, v in values.items()}
    width = max(len(m) for m in wanted)
    for m in wanted:
        print(f"{m:<{width}}  {table[m]:.6f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(_dump_json({"metrics": table, "count": len(preds)}))
            fh.write("\n")
    return EXIT_OK


def cmd_audit(args) -> int:
    model = _load_model_arg(args)
    _print_effective_config(args, None)
    poses = []
    with open(args.in_path) as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                poses.append(json.loads(line)["q"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise DatasetFormatError(f"{args.in_path}: line {i}: {exc}") from exc
    if not poses:
        raise DatasetFormatError(f"{args.in_path}: no poses found")
    thresholds = [float(t) for t in args.thresholds.split(",")]
    joints = [j.strip() for j in args.joints.split(",")] if args.joints else None
    table = violation_audit(np.asarray(poses, dtype=np.float64), model, thresholds, joints)
    print(table.to_text())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(_dump_json(table.to_dict()))
            fh.write("\n")
    return EXIT_OK


def cmd_export(args) -> int:
    model = _load_model_arg(args)
    _print_effective_config(args, None)
    if args.params:
        with open(args.params) as fh:
            doc = json.load(fh)
        doc = doc.get("fit", doc)
        q = np.asarray(doc["q"], dtype=np.float64)
        beta = np.asarray(doc["beta"], dtype=np.float64)
    else:
        q = np.zeros(model.pose_dim)
        beta = np.zeros(model.shape_dim)
    mesh = skin_mesh(model, q, beta)
    write_obj(args.out, mesh.vertices, mesh.faces)
    return EXIT_OK


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="model definition JSON (env: SKELFIT_MODEL)")
    p.add_argument("--toy-model", action="store_true", help="use the built-in toy biped")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skelfit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit pose/shape/camera to 2D keypoints")
    _add_model_flags(p)
    p.add_argument("--config", help="FitConfig JSON file")
    p.add_argument("--in", dest="in_path", help="dataset records JSONL (env: SKELFIT_IN)")
    p.add_argument("--out", help="results JSONL (env: SKELFIT_OUT)")
    p.add_argument("--init", choices=("rest", "regressor", "pseudo-gt"), default="rest")
    p.add_argument("--perturb", type=float, default=0.0,
                   help="seeded uniform pose perturbation added to the init (radians)")
    p.add_argument("--export-meshes", help="directory for per-record OBJ exports")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("convert", help="fit the model to a same-topology target mesh")
    _add_model_flags(p)
    p.add_argument("--config", help="FitConfig JSON file")
    p.add_argument("--in", dest="in_path", help="target mesh OBJ (env: SKELFIT_IN)")
    p.add_argument("--out", help="result JSON (env: SKELFIT_OUT)")
    p.add_argument("--init-params", help="JSON file with initial q/beta")
    p.add_argument("--flag-threshold", type=float, default=0.02,
                   help="mean vertex error (m) above which the fit is flagged as a "
                        "suspect local minimum")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("refine", help="batch-refine pseudo labels against keypoints")
    _add_model_flags(p)
    p.add_argument("--config", help="FitConfig JSON file")
    p.add_argument("--in", dest="in_path", help="dataset JSONL (env: SKELFIT_IN)")
    p.add_argument("--out", help="refined dataset JSONL (env: SKELFIT_OUT)")
    p.add_argument("--report", help="refinement report JSON")
    p.add_argument("--init-policy",
                   choices=("regressor-estimate", "existing-pseudo-gt", "best-of-both"),
                   default="best-of-both")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="metric table for predictions vs ground truth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pred", required=True, help="predictions JSONL")
    p.add_argument("--gt", required=True, help="ground truth JSONL")
    p.add_argument("--metrics", default="mpjpe,pa_mpjpe",
                   help="comma list: mpjpe, pa_mpjpe, mpvpe, pa_mpvpe, pck@T")
    p.add_argument("--out", help="also write the table as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="joint-limit violation frequencies of a pose batch")
    _add_model_flags(p)
    p.add_argument("--in", dest="in_path", help="poses JSONL with a 'q' field (env: SKELFIT_IN)")
    p.add_argument("--thresholds", default="10,20,30", help="degrees, ascending")
    p.add_argument("--joints", help="comma list of joint names (default: all bounded)")
    p.add_argument("--out", help="also write the table as JSON")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("export", help="write the posed surface mesh as OBJ")
    _add_model_flags(p)
    p.add_argument("--params", help="JSON file with q/beta (default: rest pose)")
    p.add_argument("--out", help="output OBJ path (env: SKELFIT_OUT)")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # environment may supply paths when flags are omitted
    for attr, env in (("in_path", "SKELFIT_IN"), ("out", "SKELFIT_OUT")):
        if hasattr(args, attr) and getattr(args, attr) is None:
            setattr(args, attr, os.environ.get(env))
    for attr in ("in_path", "out", "pred", "gt"):
        if hasattr(args, attr) and getattr(args, attr) is None:
            print(f"error: missing required path --{attr.replace('_path', '')}", file=sys.stderr)
            return EXIT_INPUT
    try:
        return args.func(args)
    except (DatasetFormatError, ModelValidationError, FileNotFoundError,
            json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalFitError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
