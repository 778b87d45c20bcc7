"""Command line front end.

Subcommands cover the full loop: generate joint data, fit a flow, draw
conditional or joint samples from it, run the Metropolis reference chain,
and evaluate samples against ground truth or against each other.

Exit codes: 0 on success, 2 for invalid inputs or configs, 1 for numerical
failures and other runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .baselines import (
    McmcConfig,
    closest_to_mean,
    energy_permutation_test,
    l1_grid_error,
    nw_ckde,
    rw_metropolis,
)
from .core import (
    STREAM_PERMUTE,
    STREAM_SAMPLE,
    STREAM_SPLIT,
    JointDataset,
    NumericsError,
    RngState,
    SampleBatch,
    ValidationError,
    build_product_reference,
    split_dataset,
)
from .features import kde_eval, kde_fit
from .flow import (
    conditional_sample,
    encode_json_value,
    fit_flow,
    flow_config_from_dict,
    model_from_json_dict,
    model_to_json_dict,
    push_forward,
)
from .problems import (
    BananaProblem,
    LVProblem,
    banana_conditional_pdf,
    banana_joint_sample,
    lv_canonical_fixture,
    lv_joint_sample,
    lv_log_posterior_logspace,
    lv_observe,
    lv_prior_sample,
    lv_simulate,
)

# prior mean orderings for the four log rates (prey growth, predation,
# predator death, predator gain)
LV_PRIOR_MEANS = {
    "interleaved": (-0.125, -3.0, -0.125, -3.0),
    "grouped": (-0.125, -0.125, -3.0, -3.0),
}

FIT_CONFIG_KEYS = {
    "problem",
    "problem_options",
    "dataset",
    "y_star",
    "y_star_file",
    "out_model",
    "out_diagnostics",
    "flow",
    "seed",
}


def resolve_seed(cli_seed, config_seed=None) -> int:
    """CLI flag beats config file beats OTFLOW_SEED env beats 0."""
    if cli_seed is not None:
        return int(cli_seed)
    if config_seed is not None:
        return int(config_seed)
    env = os.environ.get("OTFLOW_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ValidationError(f"OTFLOW_SEED must be an integer, got {env!r}") from exc
    return 0


def parse_options(pairs) -> dict:
    """key=value pairs with JSON-parsed values (bare words stay strings)."""
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ValidationError(f"expected key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def apply_overrides(doc: dict, pairs) -> None:
    """Apply --set dotted.key=value overrides in place."""
    for item in pairs or []:
        if "=" not in item:
            raise ValidationError(f"expected dotted.key=value, got {item!r}")
        dotted, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValidationError(f"cannot descend into {part!r} in {dotted!r}")
        node[parts[-1]] = value


def parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError as exc:
        raise ValidationError(f"cannot parse vector {text!r}") from exc


def parse_grid(text: str) -> np.ndarray:
    parts = text.split(":")
    if len(parts) != 3:
        raise ValidationError(f"grid must look like lo:hi:count, got {text!r}")
    lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
    if count < 2 or hi <= lo:
        raise ValidationError(f"bad grid spec {text!r}")
    return np.linspace(lo, hi, count)


def load_y_star_file(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"no such file: {p}")
    doc = json.loads(p.read_text())
    if isinstance(doc, dict):
        doc = doc.get("y_star")
    if not isinstance(doc, list):
        raise ValidationError(f"{p}: expected a JSON list or an object with 'y_star'")
    return np.array(doc, dtype=np.float64)


def build_problem(name, options: dict):
    options = dict(options or {})
    try:
        if name == "banana":
            return BananaProblem(**options)
        if name == "lv":
            if isinstance(options.get("prior_mean_log"), str):
                options["prior_mean_log"] = LV_PRIOR_MEANS[options["prior_mean_log"]]
            return LVProblem(**options)
    except (TypeError, KeyError) as exc:
        raise ValidationError(f"bad options for problem {name!r}: {exc}") from exc
    if name in (None, "none"):
        return None
    raise ValidationError(f"unknown problem {name!r}")


def write_json(path, doc) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(encode_json_value(doc), sort_keys=True, indent=2) + "\n")


def write_table(path, columns: list[str], rows) -> None:
    """CSV with repr-formatted floats so a rerun is byte-comparable."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(
                [v if isinstance(v, (int, str)) else repr(float(v)) for v in row]
            )


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    seed = resolve_seed(args.seed)
    options = parse_options(args.problem_option)
    if args.problem == "lv":
        options.setdefault("prior_mean_log", LV_PRIOR_MEANS[args.lv_prior])
        if args.flip_predator_gain:
            options.setdefault("flip_predator_gain", True)
    problem = build_problem(args.problem, options)
    if args.problem == "banana":
        gen = RngState(seed).generator(STREAM_SAMPLE)
        joint = banana_joint_sample(args.n, gen, problem, seed=seed)
    else:
        joint = lv_joint_sample(args.n, RngState(seed), problem)
    joint.save_csv(args.out)
    print(f"wrote {joint.n_rows} rows ({joint.y_dim}+{joint.x_dim} cols) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise ValidationError(f"no such config file: {cfg_path}")
    doc = json.loads(cfg_path.read_text())
    if not isinstance(doc, dict):
        raise ValidationError("fit config must be a JSON object")
    apply_overrides(doc, args.set)
    unknown = set(doc) - FIT_CONFIG_KEYS
    if unknown:
        raise ValidationError(f"unknown fit config keys: {sorted(unknown)}")
    if "dataset" not in doc or "out_model" not in doc:
        raise ValidationError("fit config needs 'dataset' and 'out_model'")

    flow_doc = dict(doc.get("flow") or {})
    seed = resolve_seed(args.seed, doc.get("seed", flow_doc.get("seed")))
    flow_doc["seed"] = seed
    config = flow_config_from_dict(flow_doc)

    # validates problem_options early even though fitting itself is generic
    build_problem(doc.get("problem"), doc.get("problem_options") or {})

    joint = JointDataset.load_csv(doc["dataset"])
    if "y_star" in doc and "y_star_file" in doc:
        raise ValidationError("give y_star or y_star_file, not both")
    y_star = None
    if "y_star" in doc and doc["y_star"] is not None:
        y_star = np.array(doc["y_star"], dtype=np.float64).reshape(-1)
    elif "y_star_file" in doc and doc["y_star_file"] is not None:
        y_star = load_y_star_file(doc["y_star_file"])

    model = fit_flow(joint, config, y_star)

    mdoc = model_to_json_dict(model)
    mdoc["fit"] = {
        "problem": doc.get("problem"),
        "problem_options": doc.get("problem_options") or {},
        "dataset": str(doc["dataset"]),
        "y_star": None if y_star is None else [float(v) for v in y_star],
        "seed": seed,
    }
    out_model = Path(doc["out_model"])
    out_model.parent.mkdir(parents=True, exist_ok=True)
    out_model.write_text(json.dumps(encode_json_value(mdoc), sort_keys=True) + "\n")

    if doc.get("out_diagnostics"):
        d = model.diagnostics
        # wall_time stays out of the file: reruns must be byte-identical,
        # and timings are the one diagnostic that never is
        write_table(
            doc["out_diagnostics"],
            ["step", "max_displacement", "gradient_norm", "feature_count"],
            [
                (t, d.max_displacement[t], d.gradient_norm[t],
                 int(d.feature_count[t]))
                for t in range(len(d.max_displacement))
            ],
        )
    trace = model.diagnostics.max_displacement
    last = trace[-1] if trace else float("nan")
    print(
        f"fitted {len(model.steps)} steps (terminated by {model.terminated_by}, "
        f"final max displacement {last:.3e}); model -> {out_model}"
    )
    return 0


# ---------------------------------------------------------------------------
# sample


def cmd_sample(args) -> int:
    model_path = Path(args.model)
    if not model_path.exists():
        raise ValidationError(f"no such model file: {model_path}")
    raw = json.loads(model_path.read_text())
    model = model_from_json_dict(raw)
    fit_meta = raw.get("fit") or {}
    seed = resolve_seed(args.seed)
    mode = args.mode
    if mode is None:
        mode = "conditional" if (args.y_star or args.y_star_file or fit_meta.get("y_star")) else "joint"

    if mode == "conditional":
        if args.y_star:
            y_star = parse_vector(args.y_star)
        elif args.y_star_file:
            y_star = load_y_star_file(args.y_star_file)
        elif fit_meta.get("y_star"):
            y_star = np.array(fit_meta["y_star"], dtype=np.float64)
        else:
            raise ValidationError("conditional sampling needs a y_star")
        problem = build_problem(fit_meta.get("problem"), fit_meta.get("problem_options"))
        gen = RngState(seed).generator(STREAM_SAMPLE)
        if isinstance(problem, BananaProblem):
            x = problem.prior_std * gen.standard_normal((args.n, 1))
        elif isinstance(problem, LVProblem):
            x = lv_prior_sample(args.n, gen, problem)
        else:
            # no sampleable prior recorded: bootstrap x rows from the dataset
            dataset = args.dataset or fit_meta.get("dataset")
            if not dataset:
                raise ValidationError(
                    "model has no problem prior; pass --dataset to bootstrap x draws"
                )
            joint = JointDataset.load_csv(dataset)
            idx = gen.integers(0, joint.n_rows, size=args.n)
            x = joint.x[idx]
        x_cond = conditional_sample(model, y_star, x)
        # emit full rows with y pinned at y_star so downstream loaders see
        # the usual (y, x) layout
        rows = np.hstack([np.tile(y_star, (x_cond.shape[0], 1)), x_cond])
        out = SampleBatch(rows, model.y_dim, model.x_dim)
    elif mode == "joint":
        dataset = args.dataset or fit_meta.get("dataset")
        if not dataset:
            raise ValidationError("joint sampling needs --dataset (or a dataset in the model)")
        if raw.get("config") is None:
            raise ValidationError("model carries no config; cannot rebuild the reference")
        config = flow_config_from_dict(raw["config"])
        joint = JointDataset.load_csv(dataset)
        if config.reference_reuse:
            source = joint
        else:
            # same split stream as the fit, so the reference source is identical
            source, _ = split_dataset(
                joint, config.target_fraction, RngState(config.seed).generator(STREAM_SPLIT)
            )
        # permutation keeps every emitted y distinct while n fits in the source
        ref_mode = "permutation" if args.n <= source.n_rows else "tiled_permutation"
        new_ref = build_product_reference(
            source, args.n, ref_mode, RngState(seed).generator(STREAM_SAMPLE)
        )
        out = push_forward(model, new_ref)
    else:
        raise ValidationError(f"unknown sampling mode {mode!r}")

    out.save_csv(args.out, seed=seed)
    print(f"wrote {out.n_rows} {mode} samples to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# mcmc


def cmd_mcmc(args) -> int:
    seed = resolve_seed(args.seed)
    options = parse_options(args.problem_option)
    problem = build_problem("lv", options)
    if args.y_star_file:
        y_star = load_y_star_file(args.y_star_file)
    else:
        _, y_star, _ = lv_canonical_fixture()

    if args.init:
        init_log = np.log(parse_vector(args.init))
    else:
        init_log = np.array(problem.prior_mean_log, dtype=np.float64)

    config = McmcConfig(
        steps=args.steps,
        burn_in=args.burn_in,
        proposal_std=args.proposal_std,
        init=init_log,
        seed=seed,
    )
    chain = rw_metropolis(
        lambda theta: lv_log_posterior_logspace(theta, y_star, problem), config
    )
    samples = np.exp(chain.samples)
    SampleBatch(samples, y_dim=0, x_dim=samples.shape[1]).save_csv(args.out, seed=seed)
    if args.summary:
        write_json(
            args.summary,
            {
                "acceptance_rate": chain.acceptance_rate,
                "mean": samples.mean(axis=0),
                "std": samples.std(axis=0, ddof=1),
                "n_kept": samples.shape[0],
                "steps": args.steps,
                "burn_in": args.burn_in,
                "proposal_std": args.proposal_std,
                "init_log": init_log,
                "seed": seed,
            },
        )
    print(
        f"chain of {samples.shape[0]} kept states "
        f"(acceptance {chain.acceptance_rate:.3f}) -> {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _load_x_columns(path: str) -> np.ndarray:
    batch = SampleBatch.load_csv(path)
    return batch.x


def _evaluate_banana(args) -> int:
    problem = build_problem("banana", parse_options(args.problem_option))
    if args.y_star is None:
        raise ValidationError("banana evaluation needs --y-star")
    y_star = float(args.y_star)
    grid = parse_grid(args.grid)
    truth = banana_conditional_pdf(grid, y_star, problem)

    report: dict = {"y_star": y_star, "grid": args.grid}
    curves = {"x": grid, "truth": truth}

    if args.flow_samples:
        x = _load_x_columns(args.flow_samples)[:, 0]
        kde = kde_fit(x[:, None])
        flow_curve = np.array([kde_eval(kde, np.array([v])) for v in grid])
        curves["flow_kde"] = flow_curve
        report["l1_flow"] = l1_grid_error(flow_curve, truth, grid)
        report["n_flow_samples"] = int(x.shape[0])
    if args.dataset:
        joint = JointDataset.load_csv(args.dataset)
        ckde_curve = nw_ckde(joint, np.array([y_star]), grid)
        curves["nw_ckde"] = ckde_curve
        report["l1_ckde"] = l1_grid_error(ckde_curve, truth, grid)
        report["n_joint_rows"] = int(joint.n_rows)
    if "l1_flow" in report and "l1_ckde" in report:
        report["flow_better"] = bool(report["l1_flow"] < report["l1_ckde"])

    if args.curves:
        names = list(curves)
        write_table(
            args.curves, names,
            zip(*[curves[name] for name in names]),
        )
    write_json(args.out, report)
    print(f"banana report -> {args.out}")
    return 0


def _trajectory_stats(prey: np.ndarray) -> dict:
    interior = (prey[1:-1] > prey[:-2]) & (prey[1:-1] > prey[2:])
    return {"prey_peaks": int(np.count_nonzero(interior)), "prey_max": float(prey.max())}


def _evaluate_lv(args) -> int:
    problem = build_problem("lv", parse_options(args.problem_option))
    if args.y_star_file:
        y_star = load_y_star_file(args.y_star_file)
    else:
        _, y_star, _ = lv_canonical_fixture()
    if not args.flow_samples:
        raise ValidationError("lv evaluation needs --flow-samples")
    flow_x = _load_x_columns(args.flow_samples)

    report: dict = {
        "flow_mean": flow_x.mean(axis=0),
        "flow_std": flow_x.std(axis=0, ddof=1),
        "n_flow_samples": int(flow_x.shape[0]),
    }
    if args.chain:
        chain_x = _load_x_columns(args.chain)
        chain_mean = chain_x.mean(axis=0)
        chain_std = chain_x.std(axis=0, ddof=1)
        report["chain_mean"] = chain_mean
        report["chain_std"] = chain_std
        gaps = np.abs(flow_x.mean(axis=0) - chain_mean) / chain_std
        report["mean_gap_in_chain_std"] = gaps
        report["max_mean_gap_in_chain_std"] = float(gaps.max())

    idx = closest_to_mean(flow_x, count=min(args.trajectory_count, flow_x.shape[0]))
    noiseless = dataclasses.replace(problem, noise_var=0.0)
    dummy = RngState(0).generator()
    rows = []
    obs_vectors = []
    traj_stats = []
    for rank, i in enumerate(idx):
        traj = lv_simulate(flow_x[i], problem)
        obs_vectors.append(lv_observe(traj, dummy, noiseless))
        traj_stats.append(_trajectory_stats(traj.states[0]))
        for t in range(0, traj.times.shape[0], args.stride):
            rows.append((rank, traj.times[t], traj.states[0, t], traj.states[1, t]))
    obs = np.array(obs_vectors)
    hits = (obs.min(axis=0) <= y_star) & (y_star <= obs.max(axis=0))
    report["envelope_hits"] = int(np.count_nonzero(hits))
    report["envelope_total"] = int(y_star.shape[0])
    report["envelope_per_coordinate"] = hits.astype(int)
    report["trajectories"] = traj_stats

    if args.trajectories:
        write_table(args.trajectories, ["sample", "time", "prey", "predator"], rows)
    write_json(args.out, report)
    print(
        f"lv report -> {args.out} (envelope {report['envelope_hits']}"
        f"/{report['envelope_total']})"
    )
    return 0


def _evaluate_two_sample(args) -> int:
    if not (args.samples_a and args.samples_b):
        raise ValidationError("two-sample evaluation needs --samples-a and --samples-b")
    a = SampleBatch.load_csv(args.samples_a)
    b = SampleBatch.load_csv(args.samples_b)
    seed = resolve_seed(args.seed)
    result = energy_permutation_test(
        a,
        b,
        n_permutations=args.permutations,
        quantile=args.quantile,
        rng=RngState(seed).generator(STREAM_PERMUTE),
        max_side=args.max_side,
    )
    result["n_a"] = int(a.n_rows)
    result["n_b"] = int(b.n_rows)
    result["seed"] = seed
    write_json(args.out, result)
    verdict = "below" if result["below_threshold"] else "above"
    print(
        f"energy {result['statistic']:.5f} {verdict} permutation threshold "
        f"{result['threshold']:.5f} -> {args.out}"
    )
    return 0


def cmd_evaluate(args) -> int:
    if args.mode == "banana":
        return _evaluate_banana(args)
    if args.mode == "lv":
        return _evaluate_lv(args)
    return _evaluate_two_sample(args)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otflow",
        description="Nonparametric triangular transport flows for conditional sampling.",
    )
    parser.add_argument(
        "--threads", type=int, default=1,
        help="BLAS thread cap (default 1, keeps runs reproducible)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="draw a joint dataset from a test problem")
    g.add_argument("--problem", choices=["banana", "lv"], required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--problem-option", action="append", metavar="KEY=VALUE")
    g.add_argument("--lv-prior", choices=sorted(LV_PRIOR_MEANS), default="interleaved")
    g.add_argument("--flip-predator-gain", action="store_true")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit a flow from a JSON config")
    f.add_argument("--config", required=True)
    f.add_argument("--seed", type=int)
    f.add_argument("--set", action="append", metavar="DOTTED.KEY=VALUE",
                   help="override a config entry, e.g. --set flow.p=15")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("sample", help="draw samples from a fitted model")
    s.add_argument("--model", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--mode", choices=["conditional", "joint"])
    s.add_argument("--y-star", help="comma separated values, overrides the fit's y_star")
    s.add_argument("--y-star-file")
    s.add_argument("--dataset", help="joint CSV (joint mode, or x bootstrap)")
    s.set_defaults(func=cmd_sample)

    m = sub.add_parser("mcmc", help="random-walk Metropolis posterior reference")
    m.add_argument("--problem", choices=["lv"], default="lv")
    m.add_argument("--y-star-file", help="defaults to the packaged observation fixture")
    m.add_argument("--out", required=True)
    m.add_argument("--summary")
    m.add_argument("--steps", type=int, default=12000)
    m.add_argument("--burn-in", type=int, default=2000)
    m.add_argument("--proposal-std", type=float, default=0.08)
    m.add_argument("--init", help="comma separated start point (original scale)")
    m.add_argument("--seed", type=int)
    m.add_argument("--problem-option", action="append", metavar="KEY=VALUE")
    m.set_defaults(func=cmd_mcmc)

    e = sub.add_parser("evaluate", help="compare samples against truth or each other")
    e.add_argument("--mode", choices=["banana", "lv", "two-sample"], required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--flow-samples")
    e.add_argument("--dataset")
    e.add_argument("--chain")
    e.add_argument("--y-star", type=float)
    e.add_argument("--y-star-file")
    e.add_argument("--grid", default="-4:4:401")
    e.add_argument("--curves")
    e.add_argument("--trajectories")
    e.add_argument("--trajectory-count", type=int, default=30)
    e.add_argument("--stride", type=int, default=10)
    e.add_argument("--samples-a")
    e.add_argument("--samples-b")
    e.add_argument("--permutations", type=int, default=200)
    e.add_argument("--quantile", type=float, default=0.95)
    e.add_argument("--max-side", type=int, default=2000)
    e.add_argument("--seed", type=int)
    e.add_argument("--problem-option", action="append", metavar="KEY=VALUE")
    e.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
