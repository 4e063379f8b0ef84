"""Operator command line: corpora, training, evaluation, studies, serving.

Flag resolution is layered (hard defaults < --config file < explicit flags)
and every run prints the resolved configuration, so artifacts can always be
traced back to the exact settings that produced them.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from .policy import TrainConfig, train_batch
from .reward import DurationStats, RewardConfig
from .rupture import (
    CVConfig,
    FUSION_TAGS,
    MODEL_TAGS,
    FeatureStream,
    SyntheticRuptureConfig,
    build_dataset,
    run_cv,
    synthetic_rupture_corpus,
)
from .server import ServerConfig, serve
from .sim import (
    StudyConfig,
    corpus_population,
    generate_corpus,
    run_study,
    sign_test_wins,
    study_population,
)
from .store import (
    StoreError,
    load_checkpoint,
    load_json,
    load_transitions,
    read_session_logs,
    save_checkpoint,
    save_json,
    save_transitions,
)


class CliError(Exception):
    """Operational failure surfaced as a one-line error and exit code 1."""


# Hard defaults per subcommand; a --config JSON file and explicit flags
# override them in that order. Keys use underscores in the file.
DEFAULTS: dict[str, dict] = {
    "gen-corpus": {
        "profiles": 5, "sessions": 19, "seed": 0, "out": "corpus",
    },
    "train-batch": {
        "algo": "dqn", "corpus": None, "calibration": None, "epochs": 300,
        "batch_size": 32, "learning_rate": 1e-3, "gamma": 0.9, "hidden": 64,
        "nfq_iterations": 60, "seed": 0, "out": "checkpoint",
    },
    "eval-rupture": {
        "model": "bilstm", "fusion": "late", "data": None, "subjects": 8,
        "seconds": 180, "folds": 5, "repeats": 10, "epochs": 30, "hidden": 16,
        "learning_rate": 5e-3, "seed": 0, "out": "rupture-eval",
    },
    "simulate-study": {
        "arms": "adaptive,generic-frozen", "seeds": 20, "coachees": 17,
        "sessions": 4, "corpus_profiles": 5, "corpus_sessions": 19,
        "algo": "dqn", "epochs": 300, "batch_size": 32, "learning_rate": 1e-3,
        "gamma": 0.9, "hidden": 64, "jobs": 1, "seed": 0, "out": "study",
    },
    "serve": {
        "host": "127.0.0.1", "port": 8000, "checkpoint": None, "corpus": None,
        "log_path": None, "llm_base_url": "", "llm_model": "", "seed": 0,
    },
    "session-replay": {
        "log": None, "session": None, "seed": 0,
    },
    "export-report": {
        "study": None, "seed": 0, "out": "report",
    },
}


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON file of default flag values")
    sub.add_argument("--seed", type=int, help="master random seed")
    sub.add_argument("--out", help="output directory for artifacts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coachflow",
        description="Corpus generation, policy training, rupture evaluation, "
                    "simulated studies, and live serving.")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-corpus", help="generate a logged interaction corpus")
    _add_common(p)
    p.add_argument("--profiles", type=int, help="number of simulated coachees")
    p.add_argument("--sessions", type=int, help="sessions logged per coachee")
    p.set_defaults(func=cmd_gen_corpus)

    p = commands.add_parser("train-batch", help="pretrain the generic policy on a corpus")
    _add_common(p)
    p.add_argument("--algo", choices=("dqn", "double-dqn", "nfq"))
    p.add_argument("--corpus", help="transition corpus JSONL")
    p.add_argument("--calibration",
                   help="calibration JSON from gen-corpus (default: next to the corpus)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--nfq-iterations", type=int)
    p.set_defaults(func=cmd_train_batch)

    p = commands.add_parser("eval-rupture",
                            help="cross-validate a rupture window classifier")
    _add_common(p)
    p.add_argument("--model", choices=MODEL_TAGS)
    p.add_argument("--fusion", choices=FUSION_TAGS)
    p.add_argument("--data", help="dataset directory (facial.npz, audio.npz, labels.json); "
                                  "omitted = synthetic")
    p.add_argument("--subjects", type=int, help="synthetic data: number of subjects")
    p.add_argument("--seconds", type=int, help="synthetic data: seconds per subject")
    p.add_argument("--folds", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--learning-rate", type=float)
    p.set_defaults(func=cmd_eval_rupture)

    p = commands.add_parser("simulate-study", help="run the arm-comparison simulation")
    _add_common(p)
    p.add_argument("--arms", help="comma-separated arm names")
    p.add_argument("--seeds", type=int, help="number of seeded replications")
    p.add_argument("--coachees", type=int)
    p.add_argument("--sessions", type=int)
    p.add_argument("--corpus-profiles", type=int)
    p.add_argument("--corpus-sessions", type=int)
    p.add_argument("--algo", choices=("dqn", "double-dqn", "nfq"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--jobs", type=int, help="replications to run in parallel")
    p.set_defaults(func=cmd_simulate_study)

    p = commands.add_parser("serve", help="run the live-session service")
    _add_common(p)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--checkpoint", help="policy checkpoint file")
    p.add_argument("--corpus", help="generic replay corpus JSONL for adaptive sessions")
    p.add_argument("--log-path", help="JSONL sink for finished session logs")
    p.add_argument("--llm-base-url")
    p.add_argument("--llm-model")
    p.set_defaults(func=cmd_serve)

    p = commands.add_parser("session-replay",
                            help="re-derive logged decisions from logged q-values")
    _add_common(p)
    p.add_argument("--log", help="session log JSONL")
    p.add_argument("--session", help="only this session id")
    p.set_defaults(func=cmd_session_replay)

    p = commands.add_parser("export-report",
                            help="render a study report JSON to markdown + plot")
    _add_common(p)
    p.add_argument("--study", help="study_report.json from simulate-study")
    p.set_defaults(func=cmd_export_report)

    return parser


def _resolve(args: argparse.Namespace) -> dict:
    """Merge hard defaults, the --config file, and explicit flags."""
    defaults = DEFAULTS[args.command]
    file_values: dict = {}
    if args.config:
        raw = load_json(args.config)
        if not isinstance(raw, dict):
            raise CliError(f"{args.config}: config file must hold a JSON object")
        file_values = {str(k).replace("-", "_"): v for k, v in raw.items()}
    resolved = {}
    for key, default in defaults.items():
        explicit = getattr(args, key, None)
        if explicit is not None:
            resolved[key] = explicit
        elif key in file_values:
            resolved[key] = file_values[key]
        else:
            resolved[key] = default
    print(f"resolved-config: {json.dumps({'command': args.command, **resolved}, sort_keys=True)}")
    return resolved


def _out_dir(resolved: dict) -> Path:
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _wrote(path: Path) -> None:
    print(f"wrote: {path}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    out = _out_dir(cfg)
    profiles = corpus_population(n=cfg["profiles"], seed=cfg["seed"])
    result = generate_corpus(profiles, sessions_per_profile=cfg["sessions"],
                             seed=cfg["seed"])
    corpus_path = out / "corpus.jsonl"
    count = save_transitions(corpus_path, result.transitions)
    _wrote(corpus_path)
    calibration_path = out / "calibration.json"
    save_json(calibration_path, {
        "calibration": result.calibration.as_dict(),
        "duration_stats": {
            "mean_s": result.duration_stats.mean_s,
            "std_s": result.duration_stats.std_s,
            "source": result.duration_stats.source,
        },
        "reward_config": {
            "scale_fv": result.reward_config.scale_fv,
            "scale_sd": result.reward_config.scale_sd,
            "clip_sd": result.reward_config.clip_sd,
        },
        "profiles": len(profiles),
        "sessions_per_profile": result.sessions_per_profile,
    })
    _wrote(calibration_path)
    print(f"transitions: {count}  reward-mean: {result.calibration.mean:.3f}  "
          f"reward-std: {result.calibration.std:.3f}")
    return 0


def _load_calibration(path: Path) -> tuple[DurationStats, RewardConfig]:
    data = load_json(path)
    try:
        stats = DurationStats(**data["duration_stats"])
        reward = RewardConfig(**data["reward_config"])
    except (KeyError, TypeError) as err:
        raise CliError(f"{path}: not a calibration file ({err})")
    return stats, reward


def cmd_train_batch(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    if not cfg["corpus"]:
        raise CliError("train-batch requires --corpus")
    corpus_path = Path(cfg["corpus"])
    if not corpus_path.exists():
        raise CliError(f"corpus not found: {corpus_path}")
    calibration_path = Path(cfg["calibration"] or corpus_path.parent / "calibration.json")
    if not calibration_path.exists():
        raise CliError(f"calibration file not found: {calibration_path} "
                       "(pass --calibration)")
    duration_stats, reward_config = _load_calibration(calibration_path)
    transitions = load_transitions(corpus_path)

    result = train_batch(
        transitions,
        cfg["algo"],
        TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                    learning_rate=cfg["learning_rate"], shuffle_seed=cfg["seed"]),
        gamma=cfg["gamma"],
        duration_stats=duration_stats,
        reward_config=reward_config,
        hidden=cfg["hidden"],
        seed=cfg["seed"],
        nfq_iterations=cfg["nfq_iterations"],
        corpus_id=corpus_path.stem,
    )
    out = _out_dir(cfg)
    checkpoint_path = out / "policy.ckpt"
    save_checkpoint(checkpoint_path, result.checkpoint)
    _wrote(checkpoint_path)
    curve_path = out / "loss_curve.csv"
    rows = ["step,loss"] + [f"{i},{loss:.10g}" for i, loss in enumerate(result.loss_curve)]
    curve_path.write_text("\n".join(rows) + "\n")
    _wrote(curve_path)
    print(f"final-loss: {result.loss_curve[-1]:.6g}")
    return 0


def _load_rupture_dir(data_dir: Path):
    """Read a dataset directory: facial.npz + audio.npz (subject -> (n, width)
    arrays sampled at 1 Hz) and labels.json ("subject:start" -> 0/1)."""
    for name in ("facial.npz", "audio.npz", "labels.json"):
        if not (data_dir / name).exists():
            raise CliError(f"dataset directory is missing {name}: {data_dir}")
    streams = {"facial": [], "audio": []}
    for modality in streams:
        with np.load(data_dir / f"{modality}.npz") as archive:
            for subject in archive.files:
                values = archive[subject]
                streams[modality].append(FeatureStream(
                    modality=modality,
                    subject_id=subject,
                    timestamps=tuple(float(t) for t in range(len(values))),
                    values=values,
                ))
    raw = load_json(data_dir / "labels.json")
    labels = {}
    for key, value in raw.items():
        subject, _, start = key.rpartition(":")
        if not subject:
            raise CliError(f"labels.json keys must look like 'subject:start', got {key!r}")
        labels[(subject, int(start))] = int(value)
    return streams["facial"], streams["audio"], labels


def cmd_eval_rupture(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    if cfg["data"]:
        facial, audio, labels = _load_rupture_dir(Path(cfg["data"]))
    else:
        facial, audio, labels = synthetic_rupture_corpus(SyntheticRuptureConfig(
            n_subjects=cfg["subjects"], seconds_per_subject=cfg["seconds"],
            seed=cfg["seed"]))
    dataset = build_dataset(facial, audio, labels).balanced()
    result = run_cv(dataset, cfg["model"], cfg["fusion"], CVConfig(
        folds=cfg["folds"], repeats=cfg["repeats"], hidden=cfg["hidden"],
        epochs=cfg["epochs"], learning_rate=cfg["learning_rate"], seed=cfg["seed"]))

    out = _out_dir(cfg)
    folds_path = out / "folds.csv"
    header = "repeat,fold,accuracy,precision,recall,f1,precision_defined,recall_defined"
    lines = [header]
    for i, record in enumerate(result.records):
        d = record.as_dict()
        lines.append(f"{i // cfg['folds']},{i % cfg['folds']},"
                     f"{d['accuracy']:.6f},{d['precision']:.6f},{d['recall']:.6f},"
                     f"{d['f1']:.6f},{int(d['precision_defined'])},{int(d['recall_defined'])}")
    folds_path.write_text("\n".join(lines) + "\n")
    _wrote(folds_path)

    counts = dataset.class_counts()
    summary_lines = [
        f"model={result.model} fusion={result.fusion} "
        f"folds={cfg['folds']} repeats={cfg['repeats']} "
        f"windows={len(dataset)} positives={counts.get(1, 0)}",
        "",
        f"{'metric':<10}{'mean':>9}{'std':>9}",
    ]
    for metric in ("accuracy", "precision", "recall", "f1"):
        stats = result.summary[metric]
        summary_lines.append(f"{metric:<10}{stats['mean']:>9.3f}{stats['std']:>9.3f}")
    summary_text = "\n".join(summary_lines) + "\n"
    summary_path = out / "summary.txt"
    summary_path.write_text(summary_text)
    _wrote(summary_path)
    print(summary_text, end="")
    return 0


def _plot_session_trend(curves: dict[str, list[float]], sessions: int, path: Path) -> None:
    """Static reward-trend image; one line per arm."""
    from matplotlib.figure import Figure

    fig = Figure(figsize=(6.0, 4.0))
    ax = fig.subplots()
    xs = list(range(1, sessions + 1))
    for arm, means in sorted(curves.items()):
        ax.plot(xs, means, marker="o", label=arm)
    ax.set_xlabel("session")
    ax.set_ylabel("mean reward")
    ax.set_xticks(xs)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)


def cmd_simulate_study(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    # "generic" is accepted as shorthand for the frozen-generic arm tag.
    arms = tuple("generic-frozen" if a.strip() == "generic" else a.strip()
                 for a in str(cfg["arms"]).split(",") if a.strip())
    if not arms:
        raise CliError("--arms must name at least one arm")

    corpus = generate_corpus(
        corpus_population(n=cfg["corpus_profiles"], seed=cfg["seed"]),
        sessions_per_profile=cfg["corpus_sessions"], seed=cfg["seed"])
    trained = train_batch(
        corpus.transitions, cfg["algo"],
        TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                    learning_rate=cfg["learning_rate"], shuffle_seed=cfg["seed"]),
        gamma=cfg["gamma"], duration_stats=corpus.duration_stats,
        reward_config=corpus.reward_config, hidden=cfg["hidden"],
        seed=cfg["seed"], corpus_id="simulate-study")

    def one_replication(rep: int) -> dict:
        rep_seed = cfg["seed"] + rep
        study = StudyConfig(
            profiles=study_population(n=cfg["coachees"], seed=rep_seed),
            sessions=cfg["sessions"], arms=arms, seed=rep_seed)
        report = run_study(study, trained.checkpoint,
                           generic_corpus=corpus.transitions,
                           calibration=corpus.calibration)
        return report.to_dict()

    reps = range(cfg["seeds"])
    if cfg["jobs"] > 1:
        with ThreadPoolExecutor(max_workers=cfg["jobs"]) as pool:
            replications = list(pool.map(one_replication, reps))
    else:
        replications = [one_replication(rep) for rep in reps]

    aggregate: dict = {"arms": list(arms), "replications": cfg["seeds"]}
    curves: dict[str, list[float]] = {}
    for arm in arms:
        means = np.asarray([r["arms"][arm]["session_means"] for r in replications])
        curves[arm] = [float(v) for v in means.mean(axis=0)]
        aggregate[arm] = {"session_means": curves[arm],
                          "session_stds": [float(v) for v in means.std(axis=0)]}
    if "adaptive" in arms and cfg["sessions"] >= 4:
        s4_vs_s2 = [r["arms"]["adaptive"]["session_means"][3]
                    - r["arms"]["adaptive"]["session_means"][1] for r in replications]
        wins, p_value = sign_test_wins(s4_vs_s2)
        aggregate["adaptive_s4_vs_s2"] = {
            "wins": wins, "of": len(s4_vs_s2), "p_value": p_value}
    if "adaptive" in arms and "generic-frozen" in arms:
        final_deltas = [r["arm_deltas"][-1] for r in replications]
        aggregate["adaptive_final_session_win_rate"] = float(
            np.mean([d > 0 for d in final_deltas]))

    out = _out_dir(cfg)
    report_path = out / "study_report.json"
    save_json(report_path, {"seed": cfg["seed"], "sessions": cfg["sessions"],
                            "aggregate": aggregate, "replications": replications})
    _wrote(report_path)
    plot_path = out / "reward_trend.png"
    _plot_session_trend(curves, cfg["sessions"], plot_path)
    _wrote(plot_path)
    print(f"aggregate: {json.dumps(aggregate, sort_keys=True)}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    if not cfg["checkpoint"]:
        raise CliError("serve requires --checkpoint")
    checkpoint_path = Path(cfg["checkpoint"])
    if not checkpoint_path.exists():
        raise CliError(f"checkpoint not found: {checkpoint_path}")
    load_checkpoint(checkpoint_path)  # fail fast on corrupt files
    server_config = ServerConfig(
        host=cfg["host"],
        port=cfg["port"],
        checkpoint_path=checkpoint_path,
        corpus_path=Path(cfg["corpus"]) if cfg["corpus"] else None,
        log_path=Path(cfg["log_path"]) if cfg["log_path"] else None,
        llm_base_url=cfg["llm_base_url"],
        llm_model=cfg["llm_model"],
        stub_seed=cfg["seed"],
    )
    print(f"serving on {server_config.host}:{server_config.port}")
    serve(server_config)
    return 0


def cmd_session_replay(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    if not cfg["log"]:
        raise CliError("session-replay requires --log")
    log_path = Path(cfg["log"])
    if not log_path.exists():
        raise CliError(f"log file not found: {log_path}")
    logs = read_session_logs(log_path)
    if cfg["session"]:
        logs = [l for l in logs if l.session_id == cfg["session"]]
        if not logs:
            raise CliError(f"no session {cfg['session']!r} in {log_path}")

    mismatches = 0
    turns = 0
    for log in logs:
        for record in log.turns:
            turns += 1
            greedy = max(range(len(record.q_values)),
                         key=lambda i: (record.q_values[i], -i))
            derived_explored = record.action.value != greedy
            status = "ok" if derived_explored == record.explored else "MISMATCH"
            if status == "MISMATCH":
                mismatches += 1
            print(f"{log.session_id} turn {record.turn_index}: "
                  f"action={record.action.name} greedy_action={greedy} "
                  f"explored={record.explored} {status}")
    if mismatches:
        raise CliError(f"{mismatches} of {turns} decisions cannot be re-derived "
                       "from their logged q-values")
    print(f"replayed {len(logs)} session(s), {turns} decision(s), all consistent")
    return 0


def cmd_export_report(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    if not cfg["study"]:
        raise CliError("export-report requires --study")
    study_path = Path(cfg["study"])
    if not study_path.exists():
        raise CliError(f"study report not found: {study_path}")
    report = load_json(study_path)
    try:
        aggregate = report["aggregate"]
        sessions = int(report["sessions"])
        arms = list(aggregate["arms"])
    except (KeyError, TypeError) as err:
        raise CliError(f"{study_path}: not a study report ({err})")

    lines = [
        "# Simulated study report",
        "",
        f"- replications: {aggregate['replications']}",
        f"- sessions per coachee: {sessions}",
        f"- arms: {', '.join(arms)}",
        "",
        "## Mean reward by session",
        "",
        "| arm | " + " | ".join(f"S{i}" for i in range(1, sessions + 1)) + " |",
        "| --- | " + " | ".join("---" for _ in range(sessions)) + " |",
    ]
    curves = {}
    for arm in arms:
        means = aggregate[arm]["session_means"]
        curves[arm] = means
        lines.append(f"| {arm} | " + " | ".join(f"{v:.3f}" for v in means) + " |")
    if "adaptive_s4_vs_s2" in aggregate:
        sign = aggregate["adaptive_s4_vs_s2"]
        lines += ["", f"Adaptive arm improved from session 2 to session 4 in "
                      f"{sign['wins']} of {sign['of']} replications "
                      f"(one-sided sign test p = {sign['p_value']:.4g})."]
    if "adaptive_final_session_win_rate" in aggregate:
        rate = aggregate["adaptive_final_session_win_rate"]
        lines += ["", f"Adaptive beat the frozen generic policy in the final "
                      f"session of {rate:.0%} of replications."]

    out = _out_dir(cfg)
    md_path = out / "report.md"
    md_path.write_text("\n".join(lines) + "\n")
    _wrote(md_path)
    plot_path = out / "reward_trend.png"
    _plot_session_trend(curves, sessions, plot_path)
    _wrote(plot_path)
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"coachflow: error: {str(err).strip()}", file=sys.stderr)
        return 1
    except (StoreError, ValueError, OSError) as err:
        message = " ".join(str(err).split())
        print(f"coachflow: error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
