"""Experiment runner: typed flat config files, train/finetune/analyze/sweep/
eval subcommands, checkpoint + manifest persistence, metrics CSVs, and a
static sweep plot.

Config files are ``key = value`` lines (``#`` comments). Every key has a
documented default in CONFIG_SCHEMA; unknown keys are errors so sweep typos
fail loudly. Parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .agents import ModelConfig, VocabMask, init_params
from .analysis import (BStarEstimate, ClusterTable, bstar_from_stats,
                       budget_sweep, build_null_mask, collect_token_stats,
                       estimate_bstar, measure_all_effects, table1_metrics)
from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from .envs import EnvConfig, make_env
from .numerics import ConfigurationError
from .training import (METRICS_HEADER, TrainConfig, arrival_curriculum,
                       evaluate, format_metrics_row, run_training, schedule)

log = logging.getLogger("sparsecomm.cli")

MANIFEST_VERSION = 1

# key -> (type, default). Types: int, float, bool, str, ints, floats.
CONFIG_SCHEMA = {
    # environment
    "env": ("str", "traffic_junction"),
    "difficulty": ("str", "easy"),
    "n_agents": ("int", 5),
    "max_steps": ("int", 0),
    "height": ("int", 0),
    "width": ("int", 0),
    "arrival_prob": ("float", -1.0),
    "vision": ("int", 1),
    "r_collision": ("float", -10.0),
    "r_delay": ("float", -0.01),
    "r_pp_step": ("float", -0.05),
    "r_pp_bonus": ("float", 0.05),
    # model (paper-unspecified dims; defaults are local choices)
    "hidden_size": ("int", 32),
    "message_dim": ("int", 8),
    "n_prototypes": ("int", 16),
    "message_mode": ("str", "continuous"),
    "gate_mode": ("str", "targeting"),
    "decoder_input": ("str", "fused"),
    # training
    "gamma": ("float", 1.0),
    "lambda1": ("float", 0.1),
    "lambda2": ("float", 10.0),
    "budget": ("float", 1.0),
    "b_star": ("float", 1.0),
    "schedule": ("str", "pretrain"),
    "epochs": ("int", 100),
    "finetune_epochs": ("int", 0),
    "samples_per_epoch": ("int", 5000),
    "batch_steps": ("int", 500),
    "lr": ("float", 0.003),
    "rms_decay": ("float", 0.99),
    "rms_eps": ("float", 1e-8),
    "value_coef": ("float", 0.5),
    "entropy_coef": ("float", 0.01),
    "strict_budget_interval": ("bool", False),
    "arrival_ramp_epochs": ("int", 0),
    "seeds": ("ints", [0]),
    # analysis
    "epsilon": ("float", 1e-3),
    "analysis_episodes": ("int", 500),
    "causal_episodes": ("int", 100),
    "bstar_episodes": ("int", 100),
    "eval_episodes": ("int", 100),
    "n_clusters": ("int", 64),
    "mask_global": ("bool", False),
    "sweep_budgets": ("floats", [1.0, 0.8, 0.6, 0.4, 0.2]),
    # runtime
    "workers": ("int", 1),
}


def _parse_value(key: str, raw: str):
    kind, _default = CONFIG_SCHEMA[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return [int(x) for x in raw.split(",") if x.strip()]
        if kind == "floats":
            return [float(x) for x in raw.split(",") if x.strip()]
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"config key {key!r}: bad {kind} value {raw!r}") from exc


def default_config() -> dict:
    return {k: (list(v) if isinstance(v, list) else v)
            for k, (_t, v) in CONFIG_SCHEMA.items()}


def parse_config(text: str) -> dict:
    cfg = default_config()
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigurationError(f"config line {lineno}: expected key = value")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        cfg[key] = _parse_value(key, raw)
    return cfg


def serialize_config(cfg: dict) -> str:
    lines = []
    for key in CONFIG_SCHEMA:
        v = cfg[key]
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, list):
            s = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            s = repr(v)
        else:
            s = str(v)
        lines.append(f"{key} = {s}")
    return "\n".join(lines) + "\n"


def load_config(path: str | None) -> dict:
    if path is None:
        return default_config()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def build_configs(cfg: dict):
    env_cfg = EnvConfig(
        kind=cfg["env"], difficulty=cfg["difficulty"], n_agents=cfg["n_agents"],
        max_steps=cfg["max_steps"], height=cfg["height"], width=cfg["width"],
        arrival_prob=cfg["arrival_prob"], vision=cfg["vision"],
        r_collision=cfg["r_collision"], r_delay=cfg["r_delay"],
        r_pp_step=cfg["r_pp_step"], r_pp_bonus=cfg["r_pp_bonus"])
    env = make_env(env_cfg)
    mcfg = ModelConfig(
        obs_dim=env.obs_dim, n_actions=env.n_actions, n_agents=env.n_agents,
        hidden=cfg["hidden_size"], d_m=cfg["message_dim"],
        n_prototypes=cfg["n_prototypes"], message_mode=cfg["message_mode"],
        gate_mode=cfg["gate_mode"], decoder_input=cfg["decoder_input"])
    tcfg = TrainConfig(
        gamma=cfg["gamma"], lambda1=cfg["lambda1"], lambda2=cfg["lambda2"],
        budget=cfg["budget"], b_star=cfg["b_star"], schedule=cfg["schedule"],
        epochs=cfg["epochs"], finetune_epochs=cfg["finetune_epochs"],
        samples_per_epoch=cfg["samples_per_epoch"], batch_steps=cfg["batch_steps"],
        lr=cfg["lr"], rms_decay=cfg["rms_decay"], rms_eps=cfg["rms_eps"],
        value_coef=cfg["value_coef"], entropy_coef=cfg["entropy_coef"],
        strict_budget_interval=cfg["strict_budget_interval"])
    return env_cfg, mcfg, tcfg


# ---------------------------------------------------------------------------
# manifest and file hygiene


def _fresh(path: Path, overwrite: bool) -> Path:
    if path.exists() and not overwrite:
        raise ConfigurationError(f"{path} exists; pass --overwrite to replace it")
    return path


def load_manifest(out: Path) -> dict:
    path = out / "manifest.json"
    if not path.exists():
        return {"format_version": MANIFEST_VERSION, "config": None, "phases": {}}
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ConfigurationError(f"{path}: unsupported manifest version")
    return manifest


def write_manifest(out: Path, manifest: dict) -> None:
    for phase in manifest["phases"].values():
        for ref in list(phase.get("checkpoints", {}).values()) + \
                [phase.get("metrics", "")]:
            if ref and not (out / ref).exists():
                raise ConfigurationError(f"manifest references missing file {ref}")
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _cluster_table_for(mask_path: Path | None, mcfg: ModelConfig):
    if mask_path is None or mcfg.message_mode != "continuous":
        return None
    sibling = mask_path.parent / "clusters.npy"
    if sibling.exists():
        return ClusterTable.load(sibling)
    return None


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    env_cfg, mcfg, tcfg = build_configs(cfg)
    if tcfg.schedule == "finetune":
        raise ConfigurationError("use the finetune subcommand for finetuning")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    phases = schedule(tcfg)
    metrics_path = _fresh(out / "metrics.csv", args.overwrite)
    manifest = load_manifest(out)
    manifest["config"] = cfg
    phase_entry = {"checkpoints": {}, "metrics": metrics_path.name, "seeds": cfg["seeds"]}

    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for seed in cfg["seeds"]:
            def on_epoch(metrics, _params, fh=fh):
                fh.write(format_metrics_row(metrics) + "\n")
                fh.flush()
            ramp = cfg["arrival_ramp_epochs"]
            params, history, aborted = run_training(
                env_cfg, mcfg, tcfg, phases, seed, on_epoch=on_epoch,
                curriculum=arrival_curriculum(ramp) if ramp > 0 else None)
            ck = _fresh(out / f"{phases[-1].name}_seed{seed}.bin", args.overwrite)
            save_checkpoint(ck, params, {"seed": seed, "phase": phases[-1].name,
                                         "epochs": len(history)})
            phase_entry["checkpoints"][str(seed)] = ck.name
            if aborted:
                log.error("seed %d aborted: %s (checkpoint preserved)", seed, aborted)
                manifest["phases"][phases[-1].name] = phase_entry
                write_manifest(out, manifest)
                return 1
            last = history[-1]
            print(f"seed {seed}: {len(history)} epochs, "
                  f"success={last['success']:.3f} m_avg={last['m_avg']:.3f}")
    manifest["phases"][phases[-1].name] = phase_entry
    write_manifest(out, manifest)
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    if args.budget is not None:
        cfg["budget"] = args.budget
    cfg["schedule"] = "finetune"
    env_cfg, mcfg, tcfg = build_configs(cfg)
    out = Path(args.out)
    manifest = load_manifest(out)
    pre = manifest["phases"].get("pretrain")
    if pre is None:
        raise ConfigurationError(f"no pretrain phase recorded in {out}/manifest.json")
    recorded = manifest["phases"].get("analysis", {}).get("b_star")
    if recorded is not None and tcfg.budget >= recorded:
        log.warning("budget %.3f is not below recorded b*=%.3f; "
                    "zero-shot masking would suffice", tcfg.budget, recorded)
    phases = schedule(tcfg, have_checkpoint=True)
    tag = f"finetune_b{tcfg.budget:g}"
    metrics_path = _fresh(out / f"metrics_{tag}.csv", args.overwrite)
    phase_entry = {"checkpoints": {}, "metrics": metrics_path.name,
                   "seeds": cfg["seeds"], "budget": tcfg.budget}

    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for seed in cfg["seeds"]:
            ck_name = pre["checkpoints"].get(str(seed))
            if ck_name is None or not (out / ck_name).exists():
                raise ConfigurationError(f"missing pretrain checkpoint for seed {seed}")
            params, record = load_checkpoint(out / ck_name)

            def on_epoch(metrics, _params, fh=fh):
                fh.write(format_metrics_row(metrics) + "\n")
                fh.flush()
            params, history, aborted = run_training(
                env_cfg, mcfg, tcfg, phases, seed, params=params, on_epoch=on_epoch)
            ck = _fresh(out / f"{tag}_seed{seed}.bin", args.overwrite)
            save_checkpoint(ck, params, {"seed": seed, "phase": tag,
                                         "epochs": len(history),
                                         "from": record.get("phase")})
            phase_entry["checkpoints"][str(seed)] = ck.name
            if aborted:
                log.error("seed %d aborted: %s", seed, aborted)
                manifest["phases"][tag] = phase_entry
                write_manifest(out, manifest)
                return 1
            last = history[-1]
            print(f"seed {seed}: {len(history)} finetune epochs, "
                  f"success={last['success']:.3f} m_avg={last['m_avg']:.3f}")
    manifest["phases"][tag] = phase_entry
    write_manifest(out, manifest)
    return 0


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    env_cfg, mcfg, _tcfg = build_configs(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, _record = load_checkpoint(args.checkpoint)
    ck_hash = checkpoint_hash(args.checkpoint)
    seed0 = cfg["seeds"][0]

    stats, table, _summary = collect_token_stats(
        params, env_cfg, mcfg, episodes=cfg["analysis_episodes"], seed=seed0,
        n_clusters=cfg["n_clusters"])
    mask_path = _fresh(out / "mask.txt", args.overwrite)
    if not stats:
        log.warning("empty-emission policy: writing empty mask, b*=1")
        VocabMask(checkpoint_hash=ck_hash).save(mask_path)
        bstar = BStarEstimate(1.0, 0.0, 0)
        table1 = table1_metrics(stats, VocabMask())
        effects = {}
    else:
        if table is not None:
            table.save(out / "clusters.npy")
        effects = measure_all_effects(
            params, env_cfg, mcfg, stats, episodes=cfg["causal_episodes"],
            seed=seed0, cluster_table=table)
        mask = build_null_mask(stats, effects, cfg["epsilon"],
                               checkpoint_hash=ck_hash,
                               global_mode=cfg["mask_global"], path=mask_path)
        bstar = estimate_bstar(params, env_cfg, mcfg, mask,
                               episodes=cfg["bstar_episodes"], seeds=cfg["seeds"],
                               cluster_table=table)
        if bstar is None:
            bstar = BStarEstimate(1.0, 0.0, 0)
        table1 = table1_metrics(stats, mask)

    tokens_path = _fresh(out / "tokens.csv", args.overwrite)
    with open(tokens_path, "w", encoding="utf-8") as fh:
        fh.write("token_id,emissions,n_observations,null\n")
        for ts in stats:
            fh.write(f"{ts.token_id},{ts.emissions},{ts.n_observations},{int(ts.null)}\n")
    pairs_path = _fresh(out / "pairs.csv", args.overwrite)
    with open(pairs_path, "w", encoding="utf-8") as fh:
        fh.write("token_id,recipient,emissions,delta\n")
        for ts in stats:
            for r, c in sorted(ts.per_recipient.items()):
                d = ts.effects.get(r)
                fh.write(f"{ts.token_id},{r},{c},{'' if d is None else repr(d)}\n")
    table1_path = _fresh(out / "table1.csv", args.overwrite)
    with open(table1_path, "w", encoding="utf-8") as fh:
        fh.write("null_vocab_fraction,obs_per_token,null_emission_fraction,n_tokens\n")
        fh.write(f"{table1['null_vocab_fraction']!r},{table1['obs_per_token']!r},"
                 f"{table1['null_emission_fraction']!r},{table1['n_tokens']}\n")
    with open(_fresh(out / "analysis.log", args.overwrite), "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"event": "analyze", "checkpoint": str(args.checkpoint),
                             "hash": ck_hash, "epsilon": cfg["epsilon"]}) + "\n")
        for (tok, rec), delta in sorted(effects.items()):
            fh.write(json.dumps({"event": "effect", "token": tok, "recipient": rec,
                                 "delta": delta}) + "\n")
        fh.write(json.dumps({"event": "b_star", "mean": bstar.b_star,
                             "std": bstar.std, "episodes": bstar.sample_size}) + "\n")

    manifest = load_manifest(out)
    manifest["phases"]["analysis"] = {
        "checkpoints": {}, "metrics": tokens_path.name, "mask": mask_path.name,
        "checkpoint_hash": ck_hash, "b_star": bstar.b_star, "b_star_std": bstar.std,
    }
    write_manifest(out, manifest)
    print(f"tokens={table1['n_tokens']} null_vocab_fraction="
          f"{table1['null_vocab_fraction']:.3f} b*={bstar.b_star:.3f}"
          f" (+-{bstar.std:.3f}, {bstar.sample_size} episodes)")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    env_cfg, mcfg, _tcfg = build_configs(cfg)
    out = Path(args.out)
    manifest = load_manifest(out)
    analysis = manifest["phases"].get("analysis")
    if analysis is None:
        raise ConfigurationError("run analyze before sweep (no b* in manifest)")
    mask = VocabMask.load(out / analysis["mask"])
    table = _cluster_table_for(out / analysis["mask"], mcfg)
    pre = manifest["phases"].get("pretrain", {}).get("checkpoints", {})
    if not pre:
        raise ConfigurationError("no pretrain checkpoint recorded in manifest")
    params, _ = load_checkpoint(out / pre[sorted(pre)[0]])

    finetuned = {}
    for name, entry in manifest["phases"].items():
        if name.startswith("finetune_b") and entry.get("checkpoints"):
            first = entry["checkpoints"][sorted(entry["checkpoints"])[0]]
            fparams, _ = load_checkpoint(out / first)
            finetuned[entry["budget"]] = fparams

    rows = budget_sweep(params, env_cfg, mcfg, budgets=cfg["sweep_budgets"],
                        episodes=cfg["eval_episodes"], seeds=cfg["seeds"],
                        mask=mask, b_star=analysis["b_star"],
                        cluster_table=table, finetuned=finetuned)
    sweep_path = _fresh(out / "sweep.csv", args.overwrite)
    with open(sweep_path, "w", encoding="utf-8") as fh:
        fh.write("budget,success,ci95,source\n")
        for r in rows:
            fh.write(f"{r['budget']!r},{r['success']!r},{r['ci95']!r},{r['source']}\n")
    plot_path = _fresh(out / "sweep.svg", args.overwrite)
    plot_sweep(rows, plot_path)
    for r in rows:
        print(f"b={r['budget']:.2f} success={r['success']:.3f} "
              f"+-{r['ci95']:.3f} ({r['source']})")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    env_cfg, mcfg, _tcfg = build_configs(cfg)
    params, record = load_checkpoint(args.checkpoint)
    mask = None
    table = None
    if args.mask:
        mask = VocabMask.load(args.mask)
        table = _cluster_table_for(Path(args.mask), mcfg)
    # a pretrained (non-sparse) policy has an untrained gate head: keep the
    # gate open; finetuned/tri policies are judged on their learned gate
    open_gate = record.get("phase") in (None, "pretrain", "init")
    summary = evaluate(params, env_cfg, mcfg, episodes=cfg["eval_episodes"],
                       seed=cfg["seeds"][0], open_gate=open_gate,
                       vocab_mask=mask, cluster_table=table)
    print(f"episodes={cfg['eval_episodes']} success={summary.success_rate!r} "
          f"mean_reward={summary.mean_reward!r} m_avg={summary.m_avg!r}")
    return 0


def plot_sweep(rows: list[dict], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = sorted(rows, key=lambda r: r["budget"])
    b = np.array([r["budget"] for r in rows])
    s = np.array([r["success"] for r in rows])
    ci = np.array([r["ci95"] for r in rows])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(b, s, marker="o", color="tab:blue")
    ax.fill_between(b, s - ci, s + ci, alpha=0.25, color="tab:blue")
    ax.set_xlabel("budget b")
    ax.set_ylabel("success")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsecomm",
        description="budgeted multi-agent communication experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, mask=False, budget=False):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed list with one seed")
        p.add_argument("--out", default="runs/default", help="output directory")
        p.add_argument("--deterministic", action="store_true",
                       help="force single-threaded execution")
        p.add_argument("--overwrite", action="store_true",
                       help="allow replacing existing outputs")
        if checkpoint:
            p.add_argument("checkpoint", help="checkpoint file")
        if mask:
            p.add_argument("--mask", default=None, help="vocabulary mask file")
        if budget:
            p.add_argument("--budget", type=float, default=None)

    common(sub.add_parser("train", help="pretrain or tri-objective training"))
    common(sub.add_parser("finetune", help="budgeted gate finetuning"), budget=True)
    common(sub.add_parser("analyze", help="token statistics, null mask, b*"),
           checkpoint=True)
    common(sub.add_parser("sweep", help="success versus budget table and plot"))
    common(sub.add_parser("eval", help="greedy evaluation summary"),
           checkpoint=True, mask=True)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.deterministic:
        pass  # the default execution path is already single-threaded
    handlers = {"train": cmd_train, "finetune": cmd_finetune,
                "analyze": cmd_analyze, "sweep": cmd_sweep, "eval": cmd_eval}
    try:
        return handlers[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
