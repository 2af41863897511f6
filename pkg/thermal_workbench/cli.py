"""
Command-line surface. Every command reads one config document (plus
``--set section.key=value`` overrides), writes its outputs into a run
directory together with the resolved config, and prints a JSON summary.

Exit codes: 0 success, 2 input error, 3 gate failure, 4 divergence.
"""

import argparse
import json
import logging
import math
import sys
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .config import RunConfig, load_config, set_global_seed
from .control import (ReplayBuffer, SacAgent, ACTION_DIM, OBS_DIM, ActionBounds, ComfortBounds, baseline_policy,
                      evaluate_policy, make_model_env, make_plant_env, seed_replay_from_plant, train_agent)
from .errors import GateFailure, InputError, WorkbenchError
from .evaluation import (PRIOR_PAIRS, ablation_harness, gain_sign_audit, period_window_set, rolling_eval, trv)
from .models import SequenceModel, load_checkpoint, save_checkpoint
from .plant import PLAUSIBLE_RANGE, generate_dataset, generate_weather, read_telemetry_csv, write_telemetry_csv
from .plotting import PLOT_KINDS, render
from .training import VARIANT_FLAGS, build_variant, train

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")


def make_run_dir(cfg: RunConfig, command: str, explicit: Optional[str] = None) -> Path:
    if explicit:
        run_dir = Path(explicit)
        run_dir.mkdir(parents=True, exist_ok=True)
    else:
        base = Path(cfg.io.output_dir) / f"{command}-{datetime.now():%Y%m%d-%H%M%S}"
        run_dir, n = base, 0
        while run_dir.exists():
            n += 1
            run_dir = base.with_name(f"{base.name}-{n}")
        run_dir.mkdir(parents=True)
    (run_dir / "config.yaml").write_text(cfg.to_yaml(), encoding="utf-8")
    return run_dir


def _telemetry(cfg: RunConfig, path: Optional[str], days: Optional[int] = None, seed_offset: int = 0) -> pd.DataFrame:
    source = path or cfg.io.telemetry
    if source:
        return read_telemetry_csv(source)
    return generate_dataset(cfg.plant.params(), days or cfg.plant.days, cfg.seed + seed_offset, start=cfg.plant.start)


def _test_period(cfg: RunConfig, model: SequenceModel, path: Optional[str]) -> Tuple[pd.DataFrame, int, Optional[int]]:
    """Test telemetry and its scored span: a file is scored whole, generated data spans the test month."""
    if path or cfg.io.telemetry:
        return _telemetry(cfg, path), model.config.encoder_len, None
    spd = cfg.plant.params().steps_per_day
    history_days = math.ceil(model.config.encoder_len / spd)
    tail_days = math.ceil(model.config.decoder_len / spd)
    days = history_days + cfg.evaluation.test_days + tail_days
    frame = _telemetry(cfg, None, days=days, seed_offset=1000)
    return frame, history_days * spd, cfg.evaluation.test_days * spd


def _load_model(path: Optional[str]) -> SequenceModel:
    if not path:
        raise InputError("a model checkpoint is required (--checkpoint)")
    model, _ = load_checkpoint(path)
    return model


def cmd_gen_data(cfg: RunConfig, args, run_dir: Path) -> dict:
    frame = generate_dataset(cfg.plant.params(), args.days or cfg.plant.days, cfg.seed, start=cfg.plant.start)
    out = Path(args.out) if args.out else run_dir / "telemetry.csv"
    write_telemetry_csv(frame, out)
    return {"telemetry": str(out), "records": len(frame), "start": frame.index[0].isoformat(),
            "end": frame.index[-1].isoformat()}


def cmd_train(cfg: RunConfig, args, run_dir: Path) -> dict:
    frame = _telemetry(cfg, args.data)
    if args.init_checkpoint:
        model, doc = load_checkpoint(args.init_checkpoint)
        variant = doc["variant"]
        logger.info(f"fine-tuning {variant} from {args.init_checkpoint}")
    else:
        variant = args.variant
        model = build_variant(variant, cfg.seed, cfg.model)
    model, report = train(model, frame, cfg.training, cfg.seed, dt=cfg.plant.dt)
    save_checkpoint(model, run_dir / "model.json", variant)
    report.write_json(run_dir / "train_report.json")
    report.write_loss_csv(run_dir / "loss.csv")
    return {"variant": variant, "checkpoint": str(run_dir / "model.json"), "best_epoch": report.best_epoch,
            "stop_epoch": report.stop_epoch, "best_val_loss": report.best_val_loss}


def cmd_eval(cfg: RunConfig, args, run_dir: Path) -> dict:
    model = _load_model(args.checkpoint)
    frame, start, steps = _test_period(cfg, model, args.data)
    report = rolling_eval(model, frame, model.config, start, steps,
                          stride=cfg.evaluation.rolling_stride, dt=cfg.plant.dt)
    _write_json(run_dir / "mae_report.json", report.to_dict())
    return {"aggregate_mae": report.aggregate_mae, "n_evaluations": report.n_evaluations,
            "report": str(run_dir / "mae_report.json")}


def _trv_report(cfg: RunConfig, model: SequenceModel, frame: pd.DataFrame, start: int, steps: Optional[int]):
    if steps is None:
        steps = len(frame) - start - model.config.decoder_len + 1
    episodes = period_window_set(frame, model.config, start, steps, stride=cfg.evaluation.trv_stride,
                                 dt=cfg.plant.dt).batch()
    return trv(model, episodes, cfg.evaluation.check_levels, cfg.evaluation.u_limit_kw, dt=cfg.plant.dt)


def cmd_trv(cfg: RunConfig, args, run_dir: Path) -> dict:
    model = _load_model(args.checkpoint)
    frame, start, steps = _test_period(cfg, model, args.data)
    report = _trv_report(cfg, model, frame, start, steps)
    _write_json(run_dir / "trv_report.json", report.to_dict())
    return {"trv_plus": report.trv_plus, "trv_minus": report.trv_minus, "report": str(run_dir / "trv_report.json")}


def cmd_ablate(cfg: RunConfig, args, run_dir: Path) -> dict:
    ev = cfg.evaluation
    spd = cfg.plant.params().steps_per_day
    if args.data or cfg.io.telemetry:
        frame = _telemetry(cfg, args.data)
    else:
        days = max(ev.training_days) + ev.test_days + math.ceil(cfg.model.decoder_len / spd)
        frame = _telemetry(cfg, None, days=days)
    result = ablation_harness(frame, cfg, ev.variants, ev.training_days, ev.seeds, ev.test_days,
                              base_seed=cfg.seed, jobs=args.jobs or ev.jobs)
    result.write_json(run_dir / "ablation.json")
    result.write_csv(run_dir / "ablation.csv")
    failed = sum(1 for c in result.cells if not c.ok)
    return {"cells": len(result.cells), "failed": failed, "report": str(run_dir / "ablation.json"),
            "rule_importance": {f"{r.prior}/{r.metric}": r.summary() for r in result.rule_importance}}


def _recommendations(model: SequenceModel, mae_failed: bool) -> List[dict]:
    recs = []
    cfg = model.config
    if not cfg.hard_constraints or not cfg.physics_structure:
        recs.append({"prior": "constraints", "compare": list(PRIOR_PAIRS["constraints"]),
                     "action": "train with non-negative f_NNA/f_NNB weights (variant PI-ModNN or PI-ModNN|L)"})
    if not cfg.physics_structure:
        recs.append({"prior": "structure", "compare": list(PRIOR_PAIRS["structure"]),
                     "action": "replace the black-box recurrent model with the modular time stepper"})
    if mae_failed and not cfg.fluctuation_loss:
        recs.append({"prior": "loss", "compare": list(PRIOR_PAIRS["loss"]),
                     "action": "add the fluctuation loss term"})
    return recs


def run_gate(cfg: RunConfig, model: SequenceModel, frame: pd.DataFrame, start: int, steps: Optional[int]) -> dict:
    """Accuracy, consistency, prior guidance and control readiness, in that order."""
    ev = cfg.evaluation
    results = []

    rolling = rolling_eval(model, frame, model.config, start, steps, stride=ev.rolling_stride, dt=cfg.plant.dt)
    mae_ok = rolling.aggregate_mae <= ev.mae_threshold
    results.append({"step": 1, "name": "accuracy", "status": "PASS" if mae_ok else "FAIL",
                    "reason": f"rolling MAE {rolling.aggregate_mae:.4f} C vs threshold {ev.mae_threshold} C",
                    "mae_c": rolling.aggregate_mae})

    audit = gain_sign_audit(model, ev.audit_points, seed=cfg.seed)
    report = _trv_report(cfg, model, frame, start, steps)
    consistent = audit.negative_fraction == 0 and report.total == 0
    results.append({"step": 2, "name": "consistency", "status": "PASS" if consistent else "FAIL",
                    "reason": f"negative-gain fraction {audit.negative_fraction}, TRV+ {report.trv_plus:.6f}, "
                              f"TRV- {report.trv_minus:.6f}",
                    "gain_audit": audit.to_dict(), "trv_plus": report.trv_plus, "trv_minus": report.trv_minus})

    if consistent:
        results.append({"step": 3, "name": "prior guidance", "status": "SKIPPED", "reason": "consistency passed"})
    else:
        recs = _recommendations(model, not mae_ok)
        results.append({"step": 3, "name": "prior guidance", "status": "GUIDANCE",
                        "reason": "; ".join(r["action"] for r in recs) or "no missing prior identified",
                        "recommendations": recs})

    env = make_model_env(cfg, model, frame)
    policy = baseline_policy(ActionBounds.from_config(cfg.control), ComfortBounds.from_config(cfg.control))
    obs, _ = env.reset(seed=cfg.seed)
    temps, done = [obs[0]], False
    while not done:
        obs, _, terminated, truncated, _ = env.step(policy(obs, env.timestamp))
        temps.append(obs[0])
        done = terminated or truncated
    temps = np.asarray(temps)
    lo, hi = PLAUSIBLE_RANGE
    ready = bool(np.all(np.isfinite(temps)) and temps.min() >= lo and temps.max() <= hi)
    results.append({"step": 4, "name": "control readiness", "status": "PASS" if ready else "FAIL",
                    "reason": f"{len(temps) - 1}-step rollout, temperatures in [{temps.min():.2f}, {temps.max():.2f}] C"})

    passed = all(r["status"] in ("PASS", "SKIPPED") for r in results)
    return {"schema_version": 1, "verdict": "PASS" if passed else "FAIL", "steps": results}


def cmd_gate(cfg: RunConfig, args, run_dir: Path) -> dict:
    model = _load_model(args.checkpoint)
    frame, start, steps = _test_period(cfg, model, args.data)
    verdict = run_gate(cfg, model, frame, start, steps)
    _write_json(run_dir / "gate.json", verdict)
    for step in verdict["steps"]:
        print(f"step {step['step']} {step['name']}: {step['status']} ({step['reason']})")
    if verdict["verdict"] != "PASS":
        failed = [s["name"] for s in verdict["steps"] if s["status"] in ("FAIL", "GUIDANCE")]
        raise GateFailure(f"gate failed at {', '.join(failed)}", verdict)
    return verdict


def cmd_train_agent(cfg: RunConfig, args, run_dir: Path) -> dict:
    model = _load_model(args.checkpoint)
    telemetry = _telemetry(cfg, args.data)
    env = make_model_env(cfg, model, telemetry)
    agent = SacAgent(cfg.control, seed=cfg.seed)
    buffer = ReplayBuffer(OBS_DIM, ACTION_DIM, cfg.control.buffer_capacity, cfg.seed)
    if cfg.control.hybrid_episodes > 0:
        plant_env = make_plant_env(cfg, telemetry)
        policy = baseline_policy(ActionBounds.from_config(cfg.control), ComfortBounds.from_config(cfg.control))
        seed_replay_from_plant(buffer, plant_env, policy, cfg.control.hybrid_episodes, seed=cfg.seed)
    agent, curve = train_agent(agent, env, cfg.control.episodes, seed=cfg.seed, buffer=buffer)
    agent.save(run_dir / "agent.json")
    curve.write_csv(run_dir / "learning_curve.csv")
    return {"agent": str(run_dir / "agent.json"), "episodes": len(curve.rows),
            "final_reward": curve.rows[-1]["reward"] if curve.rows else None}


def cmd_eval_agent(cfg: RunConfig, args, run_dir: Path) -> dict:
    if not args.agent:
        raise InputError("an agent checkpoint is required (--agent)")
    agent = SacAgent.load(args.agent)
    days = args.days or cfg.control.eval_days
    weather = generate_weather(days + 1, cfg.seed + 2000, start=cfg.plant.start, dt=cfg.plant.dt)
    env = make_plant_env(cfg, weather)
    bounds, comfort = ActionBounds.from_config(cfg.control), ComfortBounds.from_config(cfg.control)
    reports = {
        "agent": evaluate_policy(agent.policy_fn(deterministic=True), env, days, seed=cfg.seed, start=0),
        "baseline": evaluate_policy(baseline_policy(bounds, comfort), env, days, seed=cfg.seed, start=0),
    }
    for name, report in reports.items():
        report.trace.to_csv(run_dir / f"{name}_trace.csv", index=False)
    base_energy = reports["baseline"].energy_kwh
    doc = {
        "schema_version": 1,
        "days": days,
        "agent": reports["agent"].to_dict(),
        "baseline": reports["baseline"].to_dict(),
        "energy_reduction": None if base_energy == 0 else 1.0 - reports["agent"].energy_kwh / base_energy,
    }
    _write_json(run_dir / "policy_report.json", doc)
    return doc


def cmd_plot(cfg: RunConfig, args, run_dir: Path) -> dict:
    svg, csv = render(args.report, args.kind, run_dir)
    return {"svg": str(svg), "csv": str(csv)}


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace, Path], dict]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "trv": cmd_trv,
    "ablate": cmd_ablate,
    "gate": cmd_gate,
    "train-agent": cmd_train_agent,
    "eval-agent": cmd_eval_agent,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--run-dir", help="write outputs here instead of a new timestamped directory")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="workbench", description="Zone thermal model and control workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="simulate plant telemetry")
    p.add_argument("--days", type=int)
    p.add_argument("--out", help="telemetry CSV path")

    p = sub.add_parser("train", parents=[common], help="train one model variant")
    p.add_argument("--variant", default="PI-ModNN", choices=list(VARIANT_FLAGS))
    p.add_argument("--data", help="telemetry CSV (default: generated)")
    p.add_argument("--init-checkpoint", help="fine-tune this checkpoint on the new data")

    for name, text in (("eval", "rolling-horizon MAE"), ("trv", "temperature response violation"),
                       ("gate", "four-step model gate")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="test telemetry CSV (default: generated test month)")

    p = sub.add_parser("ablate", parents=[common], help="variant x size x seed grid with rule importance")
    p.add_argument("--jobs", type=int, help="parallel worker processes")
    p.add_argument("--data", help="telemetry CSV covering training sizes and the test month")

    p = sub.add_parser("train-agent", parents=[common], help="train the SAC agent inside the model environment")
    p.add_argument("--checkpoint", required=True, help="zone model checkpoint")
    p.add_argument("--data", help="telemetry CSV for the environment (default: generated)")

    p = sub.add_parser("eval-agent", parents=[common], help="agent vs baseline on the plant")
    p.add_argument("--agent", required=True)
    p.add_argument("--days", type=int)

    p = sub.add_parser("plot", parents=[common], help="render a report as SVG + CSV")
    p.add_argument("--report", required=True)
    p.add_argument("--kind", required=True, help=f"one of {', '.join(PLOT_KINDS)}")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        cfg = load_config(args.config, args.set)
        set_global_seed(cfg.seed)
        run_dir = make_run_dir(cfg, args.command, args.run_dir)
        summary = COMMANDS[args.command](cfg, args, run_dir)
    except GateFailure as e:
        print(f"Error: {e}")
        print(json.dumps(e.verdict, indent=2))
        return e.exit_code
    except WorkbenchError as e:
        print(f"Error: {e}")
        return e.exit_code
    print(f"{args.command}: outputs in {run_dir}")
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
