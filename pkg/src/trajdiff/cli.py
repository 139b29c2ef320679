"""Command-line pipeline: gen -> propose -> ks-verify / fit-noise -> train -> sample / eval, plus ablate.

Every stage reads and writes plain files, and every output depends only on
the inputs, the config and the seeds.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path as FsPath

from .config import RunConfig, load_config
from .denoiser import load_model, save_model, train, write_loss_curve
from .errors import AlignmentError, ConfigError, TrajdiffError
from .evaluate import (
    ablation_medians,
    ablation_run,
    overlay_svg,
    parse_flag_row,
    write_ablation_csv,
    write_ablation_seed_csv,
    write_report_csv,
)
from .pipeline import (
    GroundTruthOracle,
    build_training_set,
    fit_model,
    mock_responses,
    parallel_map,
    reverse_grid_for,
    run_eval,
    sample_paths,
    scene_inputs,
)
from .proposer import align_responses, read_responses, write_responses
from .scene import generate_scenario, read_scenarios, scenario_seeds, write_scenarios
from .stats import (
    REPORT_COLUMNS,
    NoiseModel,
    extract_noise,
    fit_noise_model,
    normality_report,
    pool_noise,
    report_rows,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _dump_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_noise_model(path) -> NoiseModel:
    try:
        with open(path, encoding="utf-8") as fh:
            return NoiseModel.from_dict(json.load(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read noise model {path}: {exc}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad noise model file {path}: {exc}") from None


def _config_noise(cfg: RunConfig) -> NoiseModel:
    n = cfg.noise
    return NoiseModel.gaussian(n.std_x, n.std_y, n.mean_x, n.mean_y)


def _aligned(responses_path, scenarios_path, horizon: int):
    """Responses paired with their scenarios, in response-file order."""
    scenarios = read_scenarios(scenarios_path)
    pairs = align_responses(read_responses(responses_path, horizon), scenarios)
    return [s for s, _ in pairs], [r for _, r in pairs]


def _responses_for(args, cfg: RunConfig, scenarios_path, seed_name: str):
    if args.responses:
        return _aligned(args.responses, scenarios_path, cfg.scenario.horizon)
    scenarios = read_scenarios(scenarios_path)
    return scenarios, mock_responses(scenarios, _config_noise(cfg), cfg.seeds.resolve(seed_name))


def _out_dir(path) -> None:
    parent = FsPath(path).parent
    if str(parent):
        parent.mkdir(parents=True, exist_ok=True)


# --------------------------------------------------------------------------- commands

def cmd_gen(args, cfg: RunConfig) -> int:
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    seeds = scenario_seeds(cfg.seeds.resolve("scenarios"), args.count)
    scenarios = parallel_map(_GenerateWith(cfg), seeds, args.jobs)
    _out_dir(args.out)
    write_scenarios(args.out, scenarios)
    print(f"wrote {len(scenarios)} scenarios to {args.out}")
    return 0


class _GenerateWith:
    def __init__(self, cfg: RunConfig):
        self.config = cfg.scenario

    def __call__(self, seed):
        return generate_scenario(seed, self.config)


def cmd_propose(args, cfg: RunConfig) -> int:
    if args.parse:
        responses = read_responses(args.parse, cfg.scenario.horizon)
        if args.scenarios:
            align_responses(responses, read_scenarios(args.scenarios))
    else:
        if not args.scenarios:
            raise ConfigError("propose needs --scenarios (or --parse FILE)")
        noise = _read_noise_model(args.noise_model) if args.noise_model else _config_noise(cfg)
        responses = mock_responses(read_scenarios(args.scenarios), noise, cfg.seeds.resolve("proposals"))
    _out_dir(args.out)
    write_responses(args.out, responses)
    print(f"wrote {len(responses)} responses to {args.out}")
    return 0


def cmd_ks_verify(args, cfg: RunConfig) -> int:
    scenarios, responses = _aligned(args.responses, args.scenarios, cfg.scenario.horizon)
    alpha = cfg.stats.alpha if args.alpha is None else args.alpha
    pool = cfg.stats.pool if args.pool is None else args.pool
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"--alpha must be in [0, 1], got {alpha}")
    if pool < 1:
        raise ConfigError(f"--pool must be >= 1, got {pool}")
    noise = extract_noise([r.proposed_path for r in responses], [s.gt_path for s in scenarios])
    pooled = pool_noise(noise, pool)
    if not pooled:
        raise AlignmentError(f"{len(noise)} paths cannot fill one pool of {pool}")
    reference = _read_noise_model(args.reference) if args.reference else None
    report = normality_report(pooled, alpha, reference)
    ids = [",".join(r.scenario_id for r in responses[k * pool:(k + 1) * pool]) if pool > 1
           else responses[k].scenario_id for k in range(len(pooled))]
    _out_dir(args.out)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        writer.writerows(report_rows(report, ids))
        writer.writerow(["summary", report.total_paths, "", "", "", "", report.passed_paths])
        writer.writerow(["pass_percentage", f"{report.pass_percentage:.6f}", "", "", "", "", ""])
    print(f"{report.passed_paths}/{report.total_paths} paths pass "
          f"({report.pass_percentage:.2f}%) at alpha={alpha}, pool={pool}")
    return 0


def cmd_fit_noise(args, cfg: RunConfig) -> int:
    scenarios, responses = _aligned(args.responses, args.scenarios, cfg.scenario.horizon)
    model = fit_noise_model(extract_noise([r.proposed_path for r in responses], [s.gt_path for s in scenarios]))
    _out_dir(args.out)
    _dump_json(args.out, model.to_dict())
    print(f"noise model: mean=({model.mean_x:.4f}, {model.mean_y:.4f}) std=({model.std_x:.4f}, "
          f"{model.std_y:.4f}) from {model.sample_count} residuals per coordinate")
    return 0


def _training_inputs(args, cfg: RunConfig, d_model: int):
    scenarios, responses = _aligned(args.responses, args.scenarios, cfg.scenario.horizon)
    if args.noise_model:
        noise = _read_noise_model(args.noise_model)
    else:
        noise = fit_noise_model(extract_noise([r.proposed_path for r in responses],
                                              [s.gt_path for s in scenarios]))
    inputs = scene_inputs(scenarios, responses, cfg.grid, cfg.seeds.resolve("table"), d_model, args.jobs)
    return inputs, noise


def cmd_train(args, cfg: RunConfig) -> int:
    resume = load_model(args.resume) if args.resume else None
    d_model = resume.config.d_model if resume else cfg.denoiser.d_model
    inputs, noise = _training_inputs(args, cfg, d_model)
    if resume is None:
        model, curve = fit_model(inputs, noise, cfg)
    else:
        d = cfg.diffusion
        examples = build_training_set(inputs, noise, resume.schedule, d.draws_per_scenario,
                                      cfg.seeds.resolve("noising"))
        model, curve = train(resume, examples, cfg.optimizer, cfg.seeds.resolve("shuffle"))
    _out_dir(args.out)
    save_model(model, args.out)
    loss_csv = args.loss_csv or os.fspath(args.out) + ".loss.csv"
    write_loss_curve(loss_csv, curve)
    if curve:
        print(f"trained {model.parameter_count} parameters for {cfg.optimizer.steps} steps: "
              f"loss {curve[0][3]:.6f} -> {curve[-1][3]:.6f}")
    print(f"wrote model to {args.out} and loss curve to {loss_csv}")
    return 0


def _eval_inputs(args, cfg: RunConfig, d_model: int):
    scenarios, responses = _responses_for(args, cfg, args.scenarios, "eval_proposals")
    return scene_inputs(scenarios, responses, cfg.grid, cfg.seeds.resolve("table"), d_model, args.jobs)


def cmd_sample(args, cfg: RunConfig) -> int:
    model = load_model(args.model)
    inputs = _eval_inputs(args, cfg, model.config.d_model)
    paths = sample_paths(model, inputs, reverse_grid_for(cfg))
    _out_dir(args.out)
    with open(args.out, "w", encoding="utf-8") as fh:
        for inp, p in zip(inputs, paths):
            fh.write(json.dumps({"scenario_id": inp.scenario.id, "path": p.to_dict()},
                                separators=(",", ":")) + "\n")
    print(f"wrote {len(paths)} sampled paths to {args.out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    if args.oracle_denoiser:
        model = GroundTruthOracle()
        d_model = cfg.denoiser.d_model
    else:
        if not args.model:
            raise ConfigError("eval needs --model (or --oracle-denoiser)")
        model = load_model(args.model)
        d_model = model.config.d_model
    inputs = _eval_inputs(args, cfg, d_model)
    sampled, baseline, paths = run_eval(model, inputs, cfg)
    _out_dir(args.out)
    write_report_csv(args.out, [("sampled", sampled), ("proposal", baseline)])
    if args.svg_dir:
        os.makedirs(args.svg_dir, exist_ok=True)
        for inp, p in list(zip(inputs, paths))[: cfg.eval.svg_limit]:
            svg = overlay_svg(inp.scenario, {"gt": inp.scenario.gt_path,
                                             "proposal": inp.response.proposed_path, "sampled": p})
            with open(os.path.join(args.svg_dir, f"{inp.scenario.id}.svg"), "w", encoding="utf-8") as fh:
                fh.write(svg)
    print(f"sampled:  L2 avg {sampled.l2_avg:.4f} m, collision avg {sampled.coll_avg:.4f}%")
    print(f"proposal: L2 avg {baseline.l2_avg:.4f} m, collision avg {baseline.coll_avg:.4f}%")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    row_texts = args.rows.split(",") if args.rows else list(cfg.ablation.rows)
    rows = [parse_flag_row(r) for r in row_texts]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.ablation.seeds)
    train_inputs, noise = _training_inputs(args, cfg, cfg.denoiser.d_model)
    eval_scn, eval_resp = _responses_for(argparse.Namespace(responses=args.eval_responses), cfg,
                                         args.eval_scenarios, "eval_proposals")
    eval_inputs = scene_inputs(eval_scn, eval_resp, cfg.grid, cfg.seeds.resolve("table"),
                               cfg.denoiser.d_model, args.jobs)

    def train_and_eval(flags, seed):
        dcfg = _with_flags(cfg.denoiser, flags)
        model, _ = fit_model(train_inputs, noise, cfg, dcfg, seed_offset=seed)
        sampled, _, _ = run_eval(model, eval_inputs, cfg)
        print(f"  {_flags_text(flags)} seed {seed}: L2 avg {sampled.l2_avg:.4f} m, "
              f"collision avg {sampled.coll_avg:.4f}%")
        return sampled

    per_seed = ablation_run(rows, seeds, train_and_eval)
    summaries = ablation_medians(per_seed)
    _out_dir(args.out)
    write_ablation_csv(args.out, summaries)
    seed_csv = args.seed_csv or os.fspath(args.out) + ".seeds.csv"
    write_ablation_seed_csv(seed_csv, per_seed)
    for s in summaries:
        print(f"{_flags_text(s.flags)}: median L2 avg {s.l2_avg:.4f} m, median collision avg {s.coll_avg:.4f}%")
    return 0


def _with_flags(dcfg, flags: dict):
    return replace(dcfg, use_tse=flags["TSE"], use_caf=flags["CAF"], use_cap=flags["CAP"], use_bfc=flags["BFC"])


def _flags_text(flags: dict) -> str:
    return " ".join(f"{k}={'on' if v else 'off'}" for k, v in flags.items())


# --------------------------------------------------------------------------- parser

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON run config")
    p.add_argument("--seed", type=int, default=d, help="base seed (replaces seeds.base)")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS if suppress else 1,
                   help="worker processes (outputs do not depend on it)")
    p.add_argument("--set", action="append", dest="overrides", metavar="KEY=VALUE",
                   default=argparse.SUPPRESS if suppress else [], help="override a config key, e.g. denoiser.layers=3")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trajdiff", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate scenarios")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("propose", parents=[common], help="mock proposals, or normalize a recorded file")
    p.add_argument("--scenarios")
    p.add_argument("--noise-model", help="noise model JSON (default: config noise section)")
    p.add_argument("--parse", metavar="FILE", help="parse and re-emit a recorded response file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("ks-verify", parents=[common], help="KS normality report of proposal residuals")
    p.add_argument("--responses", required=True)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--pool", type=int, help="consecutive paths pooled per test")
    p.add_argument("--reference", help="test against this noise model instead of per-path estimates")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ks_verify)

    p = sub.add_parser("fit-noise", parents=[common], help="fit the Gaussian noise model")
    p.add_argument("--responses", required=True)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_noise)

    p = sub.add_parser("train", parents=[common], help="train the denoiser")
    p.add_argument("--scenarios", required=True)
    p.add_argument("--responses", required=True)
    p.add_argument("--noise-model", help="noise model JSON (default: fit from the responses)")
    p.add_argument("--resume", help="continue training from a model artifact")
    p.add_argument("--loss-csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="denoise proposals with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--responses", help="recorded responses (default: mock proposals)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", parents=[common], help="L2 and collision report")
    p.add_argument("--model")
    p.add_argument("--oracle-denoiser", action="store_true", help="predict ground truth instead of a model")
    p.add_argument("--scenarios", required=True)
    p.add_argument("--responses", help="recorded responses (default: mock proposals)")
    p.add_argument("--svg-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate one model per flag row")
    p.add_argument("--scenarios", required=True)
    p.add_argument("--responses", required=True)
    p.add_argument("--noise-model")
    p.add_argument("--eval-scenarios", required=True)
    p.add_argument("--eval-responses")
    p.add_argument("--rows", help="comma list like all,no-TSE,no-CAF+no-CAP")
    p.add_argument("--seeds", help="comma list of seed offsets")
    p.add_argument("--seed-csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def _error_line(exc: BaseException, code: int) -> str:
    return json.dumps({"error": type(exc).__name__, "exit_code": code, "message": str(exc),
                       **({"field": exc.field} if getattr(exc, "field", None) else {})})


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config, args.overrides, args.seed)
        return args.func(args, cfg)
    except TrajdiffError as exc:
        print(_error_line(exc, exc.exit_code), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(_error_line(exc, 2), file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
