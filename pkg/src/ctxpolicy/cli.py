"""Command-line entry point: data generation, training, evaluation,
benchmarking, and ablation sweeps.

Every command writes its artifacts into --out plus a manifest.json
recording the command, the effective config, the seed, and sha256 hashes
of file inputs, so a run can be reproduced exactly. Metrics CSVs are
deterministic given the seed; only measured-latency columns vary.

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

from .backbone import CheckpointError, ModelConfig, load_checkpoint
from .decoders import ActionTokenizer, DecodeError, TokenizerError
from .envs import (
    BUDGET,
    TASKS,
    DatasetError,
    ExpertPolicy,
    RandomPolicy,
    evaluate_policy,
    generate_dataset,
    load_dataset,
)
from .numerics import NonFiniteError
from .train import TrainConfig, finetune_preset, train_bc

DATA_FILE = "data.bin"


class CLIError(ValueError):
    """Bad arguments, config, or input files; maps to exit code 2."""


def worker_cap() -> int:
    """CTXP_THREADS caps parallelism; this build computes serially."""
    try:
        return max(1, int(os.environ.get("CTXP_THREADS", "1")))
    except ValueError:
        return 1


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(out_dir: str, command: str, config: dict, seed: int,
                    inputs: list[str], outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {p: _sha256(p) for p in inputs},
        "outputs": sorted(outputs),
        "workers": worker_cap(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise CLIError(msg)


def _resolve_data(path: str) -> str:
    if os.path.isdir(path):
        path = os.path.join(path, DATA_FILE)
    _require(os.path.isfile(path), f"dataset not found: {path}")
    return path


def _model_config(args) -> ModelConfig:
    try:
        return ModelConfig(
            history_len=args.frames - 1,
            num_blocks=args.depth,
            split_block=args.split_n,
            hidden_dim=args.hidden,
            heads=args.heads,
            mlp_ratio=args.mlp_ratio,
            flow_hidden=args.flow_hidden,
            use_context=not args.no_context_token,
        )
    except ValueError as e:
        raise CLIError(str(e)) from e


# ---------------------------------------------------------------------------
# Commands.

def cmd_gen_data(args) -> int:
    _require(args.task in TASKS, f"unknown task {args.task!r}")
    _require(args.episodes >= 1, "--episodes must be >= 1")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, DATA_FILE)
    ds = generate_dataset(path, args.task, episodes=args.episodes,
                          seed=args.seed, noise_sigma=args.noise_sigma)
    _write_manifest(
        args.out, "gen-data",
        {"task": args.task, "episodes": args.episodes,
         "noise_sigma": args.noise_sigma},
        args.seed, {}, [DATA_FILE, DATA_FILE + ".json"],
    )
    print(f"wrote {args.episodes} episodes ({ds.records} records) to {path}")
    return 0


def cmd_train(args) -> int:
    data = _resolve_data(args.data)
    mcfg = _model_config(args)
    base = finetune_preset() if args.preset == "finetune" else TrainConfig()
    default_warmup = min(base.warmup_iters, args.iters // 10)
    try:
        tcfg = TrainConfig(
            lr=args.lr if args.lr is not None else base.lr,
            betas=base.betas,
            weight_decay=base.weight_decay,
            warmup_iters=args.warmup if args.warmup is not None else default_warmup,
            total_iters=args.iters,
            schedule_total=args.schedule_total,
            batch=args.batch if args.batch is not None else base.batch,
            seed=args.seed,
            decoder=args.decoder,
            eval_interval=args.eval_interval,
            eval_trials=args.eval_trials,
            early_stop_full=200.0 if args.no_early_stop else 100.0,
            freeze_backbone=args.freeze_backbone,
        )
    except ValueError as e:
        raise CLIError(str(e)) from e
    eval_task = args.eval_task
    if eval_task is None and args.eval_interval <= args.iters:
        eval_task = load_dataset(data).task
    os.makedirs(args.out, exist_ok=True)
    res = train_bc(data, mcfg, tcfg, args.out, eval_task=eval_task)
    outputs = [os.path.basename(res["checkpoint"]), "loss.csv"]
    if eval_task:
        outputs.append("eval.csv")
    if args.decoder == "ar":
        outputs.append("tokenizer.txt")
    from dataclasses import asdict

    _write_manifest(
        args.out, "train",
        {"model": asdict(mcfg), "train": _tcfg_dict(tcfg), "data": data,
         "eval_task": eval_task},
        args.seed, [data], outputs,
    )
    msg = (f"trained {res['iters_run']} iters, final loss {res['final_loss']:.4f}")
    if res["best_full_pct"] >= 0:
        msg += f", best full success {res['best_full_pct']:.0f}% at iter {res['best_iter']}"
    print(msg)
    print(f"checkpoint: {res['checkpoint']}")
    return 0


def _tcfg_dict(tcfg: TrainConfig) -> dict:
    from dataclasses import asdict

    d = asdict(tcfg)
    d["betas"] = list(d["betas"])
    return d


def _load_policy(args):
    from .inference import DecoderSpec, StreamingPolicy

    _require(os.path.isfile(args.ckpt), f"checkpoint not found: {args.ckpt}")
    try:
        params, cfg = load_checkpoint(args.ckpt)
    except CheckpointError as e:
        raise CLIError(f"bad checkpoint: {e}") from e
    if args.decoder == "ar":
        tok_path = args.tokenizer or os.path.join(
            os.path.dirname(args.ckpt), "tokenizer.txt")
        _require(os.path.isfile(tok_path),
                 f"ar decoding needs a tokenizer file (looked at {tok_path})")
        spec = DecoderSpec("ar", tokenizer=ActionTokenizer.load(tok_path))
        inputs = [args.ckpt, tok_path]
    else:
        spec = DecoderSpec("flow", flow_steps=args.flow_steps)
        inputs = [args.ckpt]
    return StreamingPolicy(params, cfg, spec, seed=args.seed), inputs


def cmd_eval(args) -> int:
    _require(args.task in TASKS, f"unknown task {args.task!r}")
    _require(args.trials >= 1, "--trials must be >= 1")
    inputs: list[str] = []
    if args.expert_oracle:
        policy = ExpertPolicy()
    elif args.random_policy:
        policy = RandomPolicy(args.seed)
    else:
        _require(args.ckpt is not None,
                 "--ckpt is required unless --expert-oracle or --random-policy")
        policy, inputs = _load_policy(args)
    report = evaluate_policy(policy, args.task, trials=args.trials,
                             seed=args.seed, budget=args.budget)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode", "steps", "partial", "full"])
        for r in report["episodes"]:
            w.writerow([r["episode"], r["steps"], int(r["partial"]), int(r["full"])])
    summary = {k: report[k] for k in ("task", "trials", "partial_pct", "full_pct")}
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_manifest(
        args.out, "eval",
        {"task": args.task, "trials": args.trials, "budget": args.budget,
         "decoder": args.decoder if not (args.expert_oracle or args.random_policy)
         else ("expert" if args.expert_oracle else "random")},
        args.seed, inputs,
        ["report.csv", "report.json"],
    )
    print(f"{args.task}: partial {report['partial_pct']:.1f}%  "
          f"full {report['full_pct']:.1f}%  ({args.trials} trials)")
    return 0


def cmd_bench(args) -> int:
    from .inference import BENCH_MODES, bench

    modes = tuple(args.modes.split(",")) if args.modes else BENCH_MODES
    for m in modes:
        _require(m in BENCH_MODES, f"unknown bench mode {m!r}")
    inputs = []
    if args.ckpt:
        _require(os.path.isfile(args.ckpt), f"checkpoint not found: {args.ckpt}")
        try:
            params, cfg = load_checkpoint(args.ckpt)
        except CheckpointError as e:
            raise CLIError(f"bad checkpoint: {e}") from e
        inputs = [args.ckpt]
    else:
        cfg = ModelConfig()
    rows = bench(cfg, modes=modes, trials=args.trials, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    cols = ["mode", "median_ms", "p90_ms", "key_tokens", "attn_macs",
            "expected_key_tokens"]
    with open(os.path.join(args.out, "bench.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([r["mode"], f"{r['median_ms']:.3f}", f"{r['p90_ms']:.3f}",
                        r["key_tokens"], r["attn_macs"], r["expected_key_tokens"]])
    _write_manifest(
        args.out, "bench",
        {"modes": list(modes), "trials": args.trials,
         "config": "from checkpoint" if args.ckpt else "default"},
        args.seed, inputs, ["bench.csv"],
    )
    print(f"{'mode':<20} {'median_ms':>10} {'p90_ms':>10} {'key_tokens':>11}")
    for r in rows:
        print(f"{r['mode']:<20} {r['median_ms']:>10.2f} {r['p90_ms']:>10.2f} "
              f"{r['key_tokens']:>11}")
    return 0


ABLATE_AXES = {
    "frames": (1, 2, 4, 8),
    "depth": (1, 2, 4, 6, 8),
    "context": ("keep", "discard"),
}


def cmd_ablate(args) -> int:
    _require(args.axis in ABLATE_AXES, f"--axis must be one of {sorted(ABLATE_AXES)}")
    data = _resolve_data(args.data)
    task = load_dataset(data).task
    os.makedirs(args.out, exist_ok=True)
    from .inference import expected_key_tokens

    rows = []
    for setting in ABLATE_AXES[args.axis]:
        mcfg = _ablate_config(args, setting)
        tcfg = TrainConfig(total_iters=args.iters, warmup_iters=min(200, args.iters),
                           batch=args.batch, seed=args.seed,
                           eval_interval=args.eval_interval,
                           eval_trials=args.trials)
        sub = os.path.join(args.out, f"{args.axis}_{setting}")
        res = train_bc(data, mcfg, tcfg, sub, eval_task=task)
        rows.append({
            "axis": args.axis,
            "setting": setting,
            "full_pct": res["best_full_pct"],
            "best_iter": res["best_iter"],
            "iters_run": res["iters_run"],
            "key_tokens": expected_key_tokens(mcfg, "compressed+cached"),
        })
        print(f"{args.axis}={setting}: full {res['best_full_pct']:.0f}% "
              f"(best at iter {res['best_iter']})")
    with open(os.path.join(args.out, "sweep.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["axis", "setting", "full_pct", "best_iter", "iters_run",
                    "key_tokens"])
        for r in rows:
            w.writerow([r["axis"], r["setting"], f"{r['full_pct']:.1f}",
                        r["best_iter"], r["iters_run"], r["key_tokens"]])
    _write_manifest(
        args.out, "ablate",
        {"axis": args.axis, "iters": args.iters, "trials": args.trials,
         "data": data},
        args.seed, [data], ["sweep.csv"],
    )
    return 0


def _ablate_config(args, setting) -> ModelConfig:
    frames = args.frames
    depth = args.depth
    split = args.split_n
    use_ctx = True
    if args.axis == "frames":
        frames = setting
    elif args.axis == "depth":
        depth = 8
        split = setting
        if split >= depth:
            split = depth - 1
    else:
        use_ctx = setting == "keep"
    try:
        return ModelConfig(
            history_len=frames - 1,
            num_blocks=depth,
            split_block=min(split, depth - 1) if depth > 1 else 1,
            hidden_dim=args.hidden,
            heads=args.heads,
            mlp_ratio=args.mlp_ratio,
            flow_hidden=args.flow_hidden,
            use_context=use_ctx,
        )
    except ValueError as e:
        raise CLIError(str(e)) from e


# ---------------------------------------------------------------------------
# Parser.

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--frames", type=int, default=8,
                   help="observation window size (history + current)")
    p.add_argument("--split-n", type=int, default=2, dest="split_n",
                   help="block index where history is pooled into one token")
    p.add_argument("--depth", type=int, default=4, help="transformer blocks")
    p.add_argument("--hidden", type=int, default=48)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--mlp-ratio", type=int, default=2, dest="mlp_ratio")
    p.add_argument("--flow-hidden", type=int, default=96, dest="flow_hidden")
    p.add_argument("--no-context-token", action="store_true",
                   dest="no_context_token",
                   help="drop the pooled history token (ablation)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ctxp",
        description="History-compressing visuomotor policy toolkit",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write expert demonstrations")
    g.add_argument("task", choices=TASKS)
    g.add_argument("--episodes", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-sigma", type=float, default=0.0, dest="noise_sigma")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="behavior-clone a policy")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--decoder", choices=("flow", "ar"), default="flow")
    t.add_argument("--iters", type=int, default=20000)
    t.add_argument("--preset", choices=("toy", "finetune"), default="toy")
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--warmup", type=int, default=None)
    t.add_argument("--schedule-total", type=int, default=None,
                   dest="schedule_total")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--eval-task", default=None, dest="eval_task")
    t.add_argument("--eval-interval", type=int, default=2000, dest="eval_interval")
    t.add_argument("--eval-trials", type=int, default=20, dest="eval_trials")
    t.add_argument("--no-early-stop", action="store_true", dest="no_early_stop")
    t.add_argument("--freeze-backbone", action="store_true", dest="freeze_backbone")
    _add_model_flags(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="closed-loop success rates")
    e.add_argument("--ckpt", default=None)
    e.add_argument("--task", required=True)
    e.add_argument("--trials", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--budget", type=int, default=BUDGET)
    e.add_argument("--decoder", choices=("flow", "ar"), default="flow")
    e.add_argument("--flow-steps", type=int, default=10, dest="flow_steps")
    e.add_argument("--tokenizer", default=None)
    e.add_argument("--expert-oracle", action="store_true", dest="expert_oracle")
    e.add_argument("--random-policy", action="store_true", dest="random_policy")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="act latency across serving modes")
    b.add_argument("--ckpt", default=None)
    b.add_argument("--modes", default=None,
                   help="comma-separated subset of "
                        "uncompressed,compressed,compressed+cached")
    b.add_argument("--trials", type=int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bench)

    a = sub.add_parser("ablate", help="sweep one architecture axis")
    a.add_argument("--axis", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--iters", type=int, default=4000)
    a.add_argument("--batch", type=int, default=16)
    a.add_argument("--trials", type=int, default=20)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--eval-interval", type=int, default=1000, dest="eval_interval")
    _add_model_flags(a)
    a.set_defaults(fn=cmd_ablate)

    for p in (g, t, e, b, a):
        p.add_argument("--config", default=None,
                       help="flat key=value file; CLI flags override it")
    return ap


def _expand_config(argv: list[str]) -> list[str]:
    """Splice `--config FILE` entries in as defaults before explicit flags."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise CLIError("--config needs a file path")
    path = argv[i + 1]
    if not os.path.isfile(path):
        raise CLIError(f"config file not found: {path}")
    rest = argv[:i] + argv[i + 2 :]
    if not rest:
        raise CLIError("--config requires a command")
    injected = []
    for line_no, line in enumerate(open(path), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{line_no}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "false"):
            if value.lower() == "true":
                injected.append(flag)
        else:
            injected.extend([flag, value])
    return rest[:1] + injected + rest[1:]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _expand_config(argv)
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, TokenizerError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NonFiniteError, DecodeError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
