"""Command-line entry point: collect, build-dataset, train, evaluate, report.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import agents, datasets, envlab, evalkit, numkit
from .config import default_out_root, resolve_config, validate_config
from .errors import AfbcLabError, ConfigError
from .policy import SquashedGaussianPolicy
from .replay import PrioritySchemeConfig, ReplayBuffer
from .seeding import stream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

MC_RECIPES = ("mc-expert", "mc-random-9to1", "mc-adversarial-9to1")


def build_agent(cfg, state_dim, action_dim, rng):
    filter_cfg = agents.FilterConfig(
        kind=cfg.filter["kind"],
        beta=cfg.filter["beta"],
        clip_max=cfg.filter["clip_max"],
        popart_rescale=cfg.filter["popart_rescale"],
        ttest_k=cfg.filter["ttest_k"],
        ttest_p_start=cfg.filter["ttest_p_start"],
        ttest_p_end=cfg.filter["ttest_p_end"],
        classifier_ensemble=cfg.filter["classifier_ensemble"],
        classifier_threshold=cfg.filter["classifier_threshold"],
        classifier_max_std=cfg.filter["classifier_max_std"],
    )
    return agents.AfbcAgent(
        state_dim=state_dim,
        action_dim=action_dim,
        rng=rng,
        hidden=tuple(cfg.hidden),
        actor_lr=cfg.actor_lr,
        critic_lr=cfg.critic_lr,
        gamma=cfg.gamma,
        tau_polyak=cfg.tau_polyak,
        target_delay=cfg.target_delay,
        k_advantage_samples=cfg.k_advantage_samples,
        filter_cfg=filter_cfg,
        use_popart=cfg.use_popart,
        ensemble_size=cfg.ensemble_size,
        redq_subset=cfg.redq_subset,
        tau_temp=cfg.tau_temp,
    )


def run_training(cfg, out_dir):
    """Executes one seeded training run into ``out_dir``; returns the log."""
    os.makedirs(out_dir, exist_ok=True)
    snapshot = dict(cfg.to_dict())
    snapshot["out"] = out_dir
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not cfg.dataset:
        raise ConfigError("train requires a 'dataset' path in the config")
    data, _ = datasets.load_dataset(cfg.dataset)

    init_rng = stream(cfg.seed, "agent-init")
    train_rng = stream(cfg.seed, "train-loop")
    agent = build_agent(cfg, data.s.shape[1], data.a.shape[1], init_rng)
    # uniform modes run the actor batch through a flat (alpha = 0) tree so
    # that afbc_per with alpha = 0 reproduces afbc_uniform exactly
    alpha = cfg.per["alpha"] if cfg.mode == "afbc_per" else 0.0
    buffer = ReplayBuffer(
        data,
        alpha=alpha,
        scheme=PrioritySchemeConfig(scheme=cfg.per["scheme"], epsilon=cfg.per["epsilon"]),
        eps_priority=cfg.per["epsilon"],
    )
    probe = data.subset(slice(0, min(2048, len(data))))
    max_steps = cfg.max_episode_steps or None

    log_path = os.path.join(out_dir, "train_log.jsonl")
    with open(log_path, "w") as log_file:

        def sink(record):
            log_file.write(json.dumps(record.to_json_dict(), sort_keys=True))
            log_file.write("\n")

        log = agents.train(
            agent,
            buffer,
            steps=cfg.steps,
            mode=cfg.mode,
            rng=train_rng,
            env_factory=lambda: envlab.make_env(cfg.env, max_episode_steps=max_steps),
            batch_size=cfg.batch_size,
            eval_interval=cfg.eval_interval,
            eval_episodes=cfg.eval_episodes,
            log_interval=cfg.log_interval,
            log_sink=sink,
            histogram_probe=probe,
        )
    nets = {"actor": agent.actor.trunk}
    for i, critic in enumerate(agent.critics):
        nets[f"critic{i}"] = critic
    numkit.save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), nets)
    return log


def _seed_worker(args):
    raw, seed, out_dir = args
    cfg = resolve_config(raw)
    cfg.values["seed"] = seed
    run_training(cfg, out_dir)
    return out_dir


def cmd_collect(args):
    rng = stream(args.seed, "collect")
    store = datasets.collect_snapshots(args.env, rng, episodes_per_block=args.episodes_per_block)
    store.save(args.out)
    sizes = store.tier_sizes()
    for tier, name in enumerate(datasets.TIER_NAMES):
        print(f"{name}: {sizes[tier]} transitions")
    print(f"tier store written to {args.out}")
    return EXIT_OK


def cmd_build_dataset(args):
    rng = stream(args.seed, "build-dataset")
    if args.recipe in MC_RECIPES:
        built = datasets.build_mountain_car_sets(rng, total=args.budget, seed=args.seed)
        ds, manifest = built[args.recipe]
    else:
        if not args.tiers:
            raise ConfigError("--tiers is required for tiered recipes")
        store = datasets.TierStore.load(args.tiers)
        ds, manifest = datasets.compose(args.recipe, store, args.budget, rng, seed=args.seed)
    datasets.save_dataset(ds, manifest, args.out)
    counts = {manifest.tag_names.get(t, str(t)): c for t, c in manifest.tag_counts.items()}
    print(f"wrote {len(ds)} transitions to {args.out}: {counts}")
    return EXIT_OK


def cmd_train(args):
    cfg = validate_config(args.config)
    for warning in cfg.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    if args.seed is not None:
        cfg.values["seed"] = args.seed
    out_dir = args.out or cfg.out or os.path.join(default_out_root(), f"run_seed{cfg.seed}")
    if args.seeds > 1:
        jobs = [
            (cfg.to_dict(), cfg.seed + i, os.path.join(out_dir, f"seed_{cfg.seed + i}"))
            for i in range(args.seeds)
        ]
        with ProcessPoolExecutor(max_workers=min(args.seeds, os.cpu_count() or 1)) as pool:
            for done in pool.map(_seed_worker, jobs):
                print(f"finished {done}")
    else:
        run_training(cfg, out_dir)
        print(f"finished {out_dir}")
    return EXIT_OK


def cmd_evaluate(args):
    nets = numkit.load_checkpoint(args.checkpoint)
    trunk = nets["actor"]
    env_id = args.env
    if env_id is None:
        sidecar = os.path.join(os.path.dirname(args.checkpoint) or ".", "resolved_config.json")
        if not os.path.exists(sidecar):
            raise ConfigError("--env not given and no resolved_config.json next to the checkpoint")
        with open(sidecar) as fh:
            env_id = json.load(fh)["env"]
    action_dim = trunk.out_dim // 2
    policy = SquashedGaussianPolicy(trunk.in_dim, action_dim, hidden=trunk.layer_sizes[1:-1])
    policy.trunk.copy_from(trunk)
    env = envlab.make_env(env_id)
    rng = stream(args.seed, "evaluate")
    mean_return, goal_rate = agents.evaluate_policy(policy, env, rng, args.episodes)
    print(f"mean return over {args.episodes} episodes: {mean_return:.3f} (goal rate {goal_rate:.2f})")
    return EXIT_OK


def cmd_report(args):
    written = evalkit.emit_report(args.run_dir)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="afbc-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="record scripted policies into a tier store")
    p.add_argument("--env", default="pendulum", choices=envlab.ENV_IDS)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes-per-block", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("build-dataset", help="compose an offline dataset from a tier store")
    p.add_argument("--recipe", required=True, choices=datasets.RECIPE_NAMES + MC_RECIPES)
    p.add_argument("--budget", type=int, default=30_000)
    p.add_argument("--tiers", default="", help="tier store directory (tiered recipes)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train an agent on an offline dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="")
    p.add_argument("--seeds", type=int, default=1, help="launch N independent seeds in parallel")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="mean-action evaluation of a checkpointed actor")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--env", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="emit score tables, curves, and figures for a run")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AfbcLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
