"""Command-line entry point for the pipeline stages and the triage service."""

from __future__ import annotations

import argparse
import json
import logging
import random
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .config import ConfigError, EngineConfig, load_config
from .core import (
    CandidatePair,
    CotMode,
    Origin,
    dialogue_from_payload,
    dialogue_to_payload,
    load_dialogues,
)
from .curation import CurationPipeline, Disposition, write_rollout_groups
from .evaluation import (
    evaluate_set,
    load_eval_inputs,
    render_report_table,
    run_judged_evaluation,
)
from .gateway import Gateway
from .judges import JudgeSuite
from .triage import CaseStore, TriageEngine, TriageState, emit_curated_corpus

logger = logging.getLogger(__name__)

_SEEDED_COMMANDS = {"think", "reject-sample", "refine", "emit-sft", "emit-rollouts"}


def engine_version() -> str:
    try:
        described = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        )
        if described.returncode == 0 and described.stdout.strip():
            return described.stdout.strip()
    except OSError:
        pass
    return f"v{__version__}"


@dataclass
class Runtime:
    config: EngineConfig
    seed: int
    gateway: Gateway
    judges: JudgeSuite
    pipeline: CurationPipeline

    @classmethod
    def build(cls, config: EngineConfig, seed: int) -> "Runtime":
        gateway = Gateway(stub_script=config.stub)
        judges = JudgeSuite(
            gateway,
            archive_path=config.archive_path,
            gsb_swap_mitigation=config.gsb_swap_mitigation,
        )
        pipeline = CurationPipeline(
            gateway, judges, random.Random(seed), ruleset=config.ruleset(),
            workers=config.workers,
        )
        return cls(config=config, seed=seed, gateway=gateway, judges=judges, pipeline=pipeline)


def write_manifest(
    output: str, command: str, config: EngineConfig, seed: int | None,
    counts: dict[str, int], started: float,
) -> None:
    manifest = {
        "command": command,
        "config_hash": config.config_hash,
        "seed": seed,
        "version": engine_version(),
        "counts": counts,
        "duration_s": round(time.monotonic() - started, 6),
    }
    path = Path(str(output) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _count_lines(path: str) -> int:
    with open(path, encoding="utf-8") as handle:
        return sum(1 for line in handle if line.strip())


def _dry_run(args: argparse.Namespace, runtime: Runtime) -> int:
    """Print the resolved plan without issuing a single request."""
    config = runtime.config
    records = _count_lines(args.input) if getattr(args, "input", None) else 0
    plan: dict[str, object] = {
        "command": args.command,
        "config_hash": config.config_hash,
        "seed": runtime.seed,
        "input_records": records,
    }
    if args.command == "think":
        plan["planned_requests"] = records
    elif args.command in ("reject-sample", "refine"):
        stage = config.stage_config(args.stage)
        judge_calls = sum(len(v) for v in stage.judge_profiles.values())
        plan["planned_requests"] = records * (stage.n_candidates + stage.n_candidates * judge_calls)
    elif args.command == "emit-rollouts":
        stage = config.stage_config(args.stage)
        judge_calls = sum(len(v) for v in stage.judge_profiles.values())
        plan["planned_requests"] = records * args.group_size * (1 + judge_calls)
    else:
        plan["planned_requests"] = 0
    plan["requests_issued"] = runtime.gateway.stats["requests"]
    plan["stub_calls"] = runtime.gateway.stats["stub_calls"]
    print(json.dumps(plan, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# Stage commands

def _pair_payload(pair) -> dict:
    return {"cot": pair.cot, "answer": pair.answer, "mode": pair.mode.value}


def cmd_think(args, runtime: Runtime) -> int:
    cfg = runtime.config.stage_config(args.stage)
    dialogues = load_dialogues(args.input)
    with open(args.output, "w", encoding="utf-8") as sink:
        for dialogue, trace in runtime.pipeline.run_think_stage(dialogues, cfg):
            sink.write(
                json.dumps(
                    {
                        "dialogue_id": dialogue.dialogue_id,
                        "reasoning_process": trace.reasoning_process,
                        "response_strategy": trace.response_strategy,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    return 0


def cmd_reject_sample(args, runtime: Runtime) -> int:
    cfg = runtime.config.stage_config(args.stage)
    dialogues = load_dialogues(args.input)
    with open(args.output, "w", encoding="utf-8") as sink:
        for dialogue, outcome in runtime.pipeline.run_reject_stage(dialogues, cfg):
            if outcome.disposition is not Disposition.SELECTED:
                continue
            assert outcome.selected is not None
            row = {
                "dialogue": dialogue_to_payload(dialogue),
                "pair": _pair_payload(outcome.selected),
                "selected_index": outcome.selected_index,
            }
            sink.write(json.dumps(row, ensure_ascii=False) + "\n")
    return 0


def _load_pair_rows(path: str):
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            dialogue = dialogue_from_payload(row["dialogue"])
            pair = CandidatePair(
                cot=row["pair"]["cot"],
                answer=row["pair"]["answer"],
                mode=CotMode(row["pair"]["mode"]),
                origin=Origin.EXTERNAL,
            )
            yield dialogue, pair


def cmd_refine(args, runtime: Runtime) -> int:
    cfg = runtime.config.stage_config(args.stage)
    with open(args.output, "w", encoding="utf-8") as sink:
        for dialogue, pair in runtime.pipeline.run_refine_stage(_load_pair_rows(args.input), cfg):
            row = {"dialogue": dialogue_to_payload(dialogue), "pair": _pair_payload(pair)}
            sink.write(json.dumps(row, ensure_ascii=False) + "\n")
    return 0


def cmd_emit_sft(args, runtime: Runtime) -> int:
    mode = CotMode(args.mode)
    count = runtime.pipeline.emit_sft_corpus(
        _load_pair_rows(args.input),
        mode,
        args.output,
        stage_tag=args.stage,
        hybrid_ratio=runtime.config.hybrid_ratio,
    )
    print(f"wrote {count} training records to {args.output}")
    return 0


def cmd_emit_rollouts(args, runtime: Runtime) -> int:
    cfg = runtime.config.stage_config(args.stage)
    triage_engine = None
    roles = runtime.config.judge_profiles()
    if cfg.stage.is_hard and "hallucination_detector" in roles:
        store = CaseStore(path=None)
        triage_engine = TriageEngine(
            store,
            runtime.judges,
            detector=roles["hallucination_detector"][0],
            verifiers=roles.get("hallucination_verifiers", roles["hallucination_detector"]),
            optimizer=None,
        )
    groups = runtime.pipeline.emit_rollout_batches(
        load_dialogues(args.input),
        cfg,
        runtime.config.weights,
        group_size=args.group_size,
        triage_engine=triage_engine,
    )
    count = write_rollout_groups(groups, args.output)
    print(f"wrote {count} rollout groups to {args.output}")
    return 0


def cmd_triage(args, runtime: Runtime) -> int:
    roles = runtime.config.judge_profiles()
    if "hallucination_detector" not in roles:
        raise ConfigError("triage needs judges.hallucination_detector")
    store = CaseStore(runtime.config.store_path)
    try:
        engine = TriageEngine(
            store,
            runtime.judges,
            detector=roles["hallucination_detector"][0],
            verifiers=roles.get("hallucination_verifiers", roles["hallucination_detector"]),
            optimizer=roles.get("reason_optimizer", (None,))[0],
        )
        for index, (dialogue, response, _cot) in enumerate(load_eval_inputs(args.input)):
            case_id = f"{dialogue.dialogue_id}-{index:05d}"
            case = engine.detect(dialogue, response, case_id)
            if case.state is TriageState.AWAITING_VERIFIER:
                engine.verify(case_id)
        for case in store.cases():
            if case.state is TriageState.VERIFIED_HALLUC:
                engine.optimize_reason(case.case_id)
        counts = emit_curated_corpus(store.cases(), args.output)
        print(json.dumps({"curated": counts, "states": store.state_counts()}, indent=2))
    finally:
        store.close()
    return 0


def cmd_evaluate(args, runtime: Runtime) -> int:
    roles = dict(runtime.config.judge_profiles())
    if args.judges:
        override = json.loads(Path(args.judges).read_text(encoding="utf-8"))
        for role, names in override.items():
            names = [names] if isinstance(names, str) else list(names)
            roles[role] = tuple(runtime.config.profile(n) for n in names)
    for role in ("human", "gsb", "risk", "hallucination_detector"):
        if role not in roles:
            raise ConfigError(f"evaluate needs judges.{role}")
    judged = run_judged_evaluation(
        load_eval_inputs(args.input),
        runtime.judges,
        human_judge=roles["human"][0],
        gsb_judge=roles["gsb"][0],
        risk_judge=roles["risk"][0],
        halluc_judge=roles["hallucination_detector"][0],
    )
    report = evaluate_set(judged.records)
    Path(args.output).write_text(
        json.dumps(report.to_payload(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(render_report_table(report))
    threshold = runtime.config.judge_failure_threshold
    if judged.failure_rate > threshold:
        print(
            f"judge hard-failure rate {judged.failure_rate:.2%} exceeds threshold {threshold:.2%}",
            file=sys.stderr,
        )
        return 1
    return 0


def cmd_serve(args, runtime: Runtime) -> int:
    import uvicorn

    from .service import create_app, resolve_auth_token

    config = runtime.config
    store = CaseStore(config.store_path)
    roles = runtime.config.judge_profiles()
    detector_profiles = roles.get("hallucination_detector", ())
    engine = TriageEngine(
        store,
        runtime.judges,
        detector=detector_profiles[0] if detector_profiles else None,
        verifiers=roles.get("hallucination_verifiers", detector_profiles),
        optimizer=roles.get("reason_optimizer", (None,))[0],
    )
    app = create_app(
        store,
        engine,
        lease_ttl_s=config.lease_ttl_s,
        auth_token=resolve_auth_token(config.auth_token_env),
        ui_dir=config.ui_dir,
    )
    try:
        uvicorn.run(app, host=config.bind_host, port=config.bind_port, log_level="warning")
    finally:
        store.close()
    return 0


_COMMANDS = {
    "think": cmd_think,
    "reject-sample": cmd_reject_sample,
    "refine": cmd_refine,
    "emit-sft": cmd_emit_sft,
    "emit-rollouts": cmd_emit_rollouts,
    "triage": cmd_triage,
    "evaluate": cmd_evaluate,
    "serve": cmd_serve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dialogforge")
    parser.add_argument("--version", action="version", version=engine_version())
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add(
        name: str, *, io: bool = True, stage: str | None = None, output_flags: tuple[str, ...] = ("--output",)
    ) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", required=True)
        sub.add_argument("--seed", type=int, default=None)
        sub.add_argument("--dry-run", action="store_true")
        if io:
            sub.add_argument("--input", required=True)
            sub.add_argument(*output_flags, dest="output", required=True)
        if stage is not None:
            sub.add_argument("--stage", default=stage)
        return sub

    add("think", stage="think")
    add("reject-sample", stage="basic_reject")
    add("refine", stage="basic_refine")
    sft = add("emit-sft", stage="basic_reject")
    sft.add_argument("--mode", default="pre_cot", choices=[m.value for m in CotMode])
    rollouts = add("emit-rollouts", stage="basic_reject")
    rollouts.add_argument("--group-size", type=int, default=16)
    add("triage")
    evaluate = add("evaluate", output_flags=("--report", "--output"))
    evaluate.add_argument("--judges", default=None)
    add("serve", io=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    seed = args.seed if args.seed is not None else config.seed
    if args.command in _SEEDED_COMMANDS and seed is None:
        print(f"config error: {args.command} requires --seed (or a seed in the config)", file=sys.stderr)
        return 2

    started = time.monotonic()
    runtime = Runtime.build(config, seed if seed is not None else 0)

    if args.dry_run:
        try:
            return _dry_run(args, runtime)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
    try:
        code = _COMMANDS[args.command](args, runtime)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # stage failures exit 1 with a message
        logger.exception("stage failed")
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 1
    if args.command not in ("serve",) and getattr(args, "output", None):
        write_manifest(
            args.output, args.command, config, seed,
            dict(runtime.pipeline.counters.values), started,
        )
    return code


if __name__ == "__main__":
    sys.exit(main())
